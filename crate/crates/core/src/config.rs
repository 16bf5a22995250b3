//! Experiment configuration: a sectioned `key = value` file (TOML syntax)
//! plus `section.key=value` overrides. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degrade::DegradeConfig;
use crate::flow::{FlowKind, FlowVariant, HrDistance, LossWeights};
use crate::net::NetConfig;
use crate::sched::SchedConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// HR patch side length.
    pub size: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: 32,
            train_images: 512,
            eval_images: 32,
            seed: 0,
        }
    }
}

/// Stage-one (flow pretraining) optimisation settings; stage two reuses
/// everything except `steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Held-out evaluation interval in steps; 0 disables periodic eval.
    pub eval_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 500,
            eval_every: 0,
        }
    }
}

/// Which consistency terms stage two optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Adjacent-time agreement only.
    Cd,
    /// HR regression of the student's origin prediction only.
    Hr,
    /// Both.
    #[default]
    Hrcd,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Cd => "cd",
            Objective::Hr => "hr",
            Objective::Hrcd => "hrcd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub steps: u64,
    pub ema_mu: f64,
    /// Share of each batch trained with the flow loss; the rest gets the
    /// consistency objective.
    pub flow_fraction: f64,
    pub objective: Objective,
    pub hr_distance: HrDistance,
    pub adv_enabled: bool,
    pub disc_lr: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            steps: 3000,
            ema_mu: 0.999,
            flow_fraction: 0.5,
            objective: Objective::Hrcd,
            hr_distance: HrDistance::Perceptual,
            adv_enabled: true,
            disc_lr: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub step_counts: Vec<usize>,
    /// Evaluation images used; 0 means the whole split.
    pub images: usize,
    /// Images per forward pass.
    pub chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            step_counts: vec![1, 4],
            images: 0,
            chunk: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub degrade: DegradeConfig,
    pub net: NetConfig,
    pub flow: FlowVariant,
    pub loss: LossWeights,
    pub sched: SchedConfig,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides. Values parse as TOML and fall
    /// back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not section.key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key {key:?} needs a section")))?;
            let value = parse_value(raw.trim());
            let table = root
                .get_mut(section)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Config(format!("unknown section {section:?}")))?;
            table.insert(field.to_string(), value);
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    /// Fills derived fields and validates.
    pub fn resolved(mut self) -> Result<Self> {
        self.net.condition_lr = self.flow.kind != FlowKind::SrFlow;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.degrade.validate()?;
        self.net.validate()?;
        self.flow.validate()?;
        self.loss.validate()?;
        self.sched.validate()?;
        let d = &self.data;
        if d.size < 16 || !d.size.is_multiple_of(self.degrade.scale) || !d.size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "data.size {} must be >= 16 and divisible by 8 and the scale",
                d.size
            )));
        }
        if !d.size.is_multiple_of(1 << (self.net.depth - 1)) {
            return Err(Error::Config("data.size must be divisible by 2^(depth-1)".into()));
        }
        let t = &self.train;
        if t.batch == 0 || !(t.lr > 0.0) {
            return Err(Error::Config("train.batch must be >= 1 and train.lr > 0".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and adam_eps > 0".into()));
        }
        let s = &self.distill;
        if !(s.ema_mu > 0.0 && s.ema_mu < 1.0) {
            return Err(Error::Config(format!("distill.ema_mu {} must lie in (0, 1)", s.ema_mu)));
        }
        if !(s.flow_fraction > 0.0 && s.flow_fraction < 1.0) || !(s.disc_lr > 0.0) {
            return Err(Error::Config("distill.flow_fraction must lie in (0, 1) and disc_lr > 0".into()));
        }
        if self.eval.step_counts.is_empty() || self.eval.step_counts.contains(&0) || self.eval.chunk == 0 {
            return Err(Error::Config("eval.step_counts must be nonempty and positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
