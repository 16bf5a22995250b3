//! Two-stage training: flow pretraining, then HR-regularized consistency
//! distillation against a frozen teacher with an EMA target.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndgrad::{Graph, Scalar, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{self, config_digest, Checkpoint};
use crate::config::{ExperimentConfig, Objective};
use crate::corpus::Corpus;
use crate::degrade::ImagePair;
use crate::flow::{
    cd_loss, consistency_fn, consistency_node, flow_loss, hinge_losses, interp_batch, mse, time_map, total_loss,
    FlowKind, HrDistance,
};
use crate::metrics::{evaluate, EvalRow, EvalSpec};
use crate::net::{Bound, Discriminator, Model, ParamSet, UNet};
use crate::sample::{teacher_step, VelocityField};
use crate::sched::PairSampler;
use crate::seed::{derive_seed, rng_from};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FlowPretrain,
    Consistency,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::FlowPretrain => "flow_pretrain",
            Stage::Consistency => "consistency",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        [Stage::FlowPretrain, Stage::Consistency].into_iter().find(|st| st.name() == s)
    }

    /// Checkpoint file name inside a run directory.
    pub fn checkpoint_file(self) -> &'static str {
        match self {
            Stage::FlowPretrain => "flow.ckpt",
            Stage::Consistency => "distill.ckpt",
        }
    }

    fn id(self) -> u64 {
        match self {
            Stage::FlowPretrain => 1,
            Stage::Consistency => 2,
        }
    }
}

// child-seed slots of train.seed
const SEED_INIT: u64 = 0;
const SEED_DISC_INIT: u64 = 1;
const SEED_EVAL: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update. Parameters without a gradient are left
/// untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one, eps) = (T::one(), T::lit(cfg.eps));
    let c1 = T::lit(1.0 - cfg.beta1.powf(state.t as f64));
    let c2 = T::lit(1.0 - cfg.beta2.powf(state.t as f64));
    let lr = T::lit(cfg.lr);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.get_mut(name).ok_or_else(|| Error::invalid("adam", format!("no moment for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::invalid("adam", format!("shape mismatch for {name}")));
        }
        let v = state.v.get_mut(name).expect("moments share names");
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `θ⁻ ← μ·θ⁻ + (1 − μ)·θ` for every parameter.
pub fn ema_update<T: Scalar>(theta_minus: &mut ParamSet<T>, theta: &ParamSet<T>, mu: f64) -> Result<()> {
    if !theta_minus.same_layout(theta) {
        return Err(Error::invalid("ema_update", "parameter sets differ"));
    }
    let (a, b) = (T::lit(mu), T::lit(1.0 - mu));
    for ((_, tm), (_, t)) in theta_minus.iter_mut().zip(theta.iter()) {
        for (x, &y) in tm.data_mut().iter_mut().zip(t.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}

/// Named loss values of one step; absent terms are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub flow: f64,
    pub cd: Option<f64>,
    pub hr: Option<f64>,
    /// Weighted-in consistency objective (`cd + hr` for the terms used).
    pub hrcd: Option<f64>,
    pub adv_gen: Option<f64>,
    pub disc: Option<f64>,
    pub total: f64,
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub cfg: ExperimentConfig,
    pub stage: Stage,
    pub step: u64,
    pub theta: ParamSet<T>,
    pub theta_minus: Option<ParamSet<T>>,
    pub phi: Option<ParamSet<T>>,
    pub disc: Option<ParamSet<T>>,
    pub opt: AdamState<T>,
    pub disc_opt: Option<AdamState<T>>,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh stage-one state with seeded weights.
    pub fn new_flow(cfg: &ExperimentConfig) -> Result<Self> {
        let net = UNet::new(cfg.net.clone())?;
        let theta = net.init(derive_seed(cfg.train.seed, SEED_INIT));
        Ok(Self {
            cfg: cfg.clone(),
            stage: Stage::FlowPretrain,
            step: 0,
            opt: AdamState::new(&theta),
            theta,
            theta_minus: None,
            phi: None,
            disc: None,
            disc_opt: None,
        })
    }

    /// Stage-two state: student, EMA target and teacher all start from the
    /// pretrained weights.
    pub fn from_teacher(cfg: &ExperimentConfig, teacher: ParamSet<T>) -> Result<Self> {
        let net = UNet::new(cfg.net.clone())?;
        if !teacher.same_layout(&net.init::<T>(0)) {
            return Err(Error::invalid("distill", "teacher weights do not match the network configuration"));
        }
        let disc = cfg
            .distill
            .adv_enabled
            .then(|| Discriminator::new(&cfg.net).init::<T>(derive_seed(cfg.train.seed, SEED_DISC_INIT)));
        Ok(Self {
            cfg: cfg.clone(),
            stage: Stage::Consistency,
            step: 0,
            opt: AdamState::new(&teacher),
            disc_opt: disc.as_ref().map(AdamState::new),
            disc,
            theta_minus: Some(teacher.clone()),
            phi: Some(teacher.clone()),
            theta: teacher,
        })
    }

    pub fn net(&self) -> Result<UNet> {
        UNet::new(self.cfg.net.clone())
    }

    /// Weights used for sampling: the EMA target once distilling, the
    /// trained weights before.
    pub fn inference_params(&self) -> &ParamSet<T> {
        self.theta_minus.as_ref().unwrap_or(&self.theta)
    }

    /// Seed of the random stream used at `step`.
    pub fn step_seed(&self, step: u64) -> u64 {
        derive_seed(derive_seed(self.cfg.train.seed, self.stage.id() + 16), step)
    }

    fn adam(&self) -> AdamConfig {
        let t = &self.cfg.train;
        AdamConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
        }
    }

    fn target_steps(&self) -> u64 {
        match self.stage {
            Stage::FlowPretrain => self.cfg.train.steps,
            Stage::Consistency => self.cfg.distill.steps,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut blobs = Vec::new();
        let mut add = |prefix: &str, set: &ParamSet<T>| {
            for (name, t) in set.iter() {
                blobs.push((format!("{prefix}/{name}"), t.cast::<f32>()));
            }
        };
        add("theta", &self.theta);
        add("opt.m", &self.opt.m);
        add("opt.v", &self.opt.v);
        for (prefix, set) in [("theta_minus", &self.theta_minus), ("phi", &self.phi), ("disc", &self.disc)] {
            if let Some(s) = set {
                add(prefix, s);
            }
        }
        if let Some(o) = &self.disc_opt {
            add("disc_opt.m", &o.m);
            add("disc_opt.v", &o.v);
        }
        Checkpoint {
            digest: config_digest(&self.cfg.net),
            step: self.step,
            meta: serde_json::json!({
                "stage": self.stage.name(),
                "seed": self.cfg.train.seed,
                "adam_t": self.opt.t,
                "disc_adam_t": self.disc_opt.as_ref().map(|o| o.t),
                "config": self.cfg.to_json(),
            }),
            blobs,
        }
    }

    /// Rebuilds a state; `cfg` supplies the run configuration and must
    /// describe the same network as the checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<Self> {
        let malformed = |m: String| Error::invalid("checkpoint", m);
        if ck.digest != config_digest(&cfg.net) {
            return Err(malformed("network configuration digest differs".into()));
        }
        let stage = ck.meta["stage"]
            .as_str()
            .and_then(Stage::from_name)
            .ok_or_else(|| malformed("missing stage".into()))?;
        let mut sets: BTreeMap<&str, ParamSet<T>> = BTreeMap::new();
        for (name, t) in &ck.blobs {
            let (prefix, rest) = name.split_once('/').ok_or_else(|| malformed(format!("blob name {name}")))?;
            sets.entry(prefix).or_default().insert(rest, t.cast());
        }
        let mut take = |p: &str| sets.remove(p);
        let theta = take("theta").ok_or_else(|| malformed("no theta".into()))?;
        let adam_t = ck.meta["adam_t"].as_u64().unwrap_or(0);
        let opt = AdamState {
            m: take("opt.m").unwrap_or_else(|| theta.zeros_like()),
            v: take("opt.v").unwrap_or_else(|| theta.zeros_like()),
            t: adam_t,
        };
        let disc_opt = match (take("disc_opt.m"), take("disc_opt.v")) {
            (Some(m), Some(v)) => Some(AdamState {
                m,
                v,
                t: ck.meta["disc_adam_t"].as_u64().unwrap_or(0),
            }),
            _ => None,
        };
        let state = Self {
            cfg: cfg.clone(),
            stage,
            step: ck.step,
            theta_minus: take("theta_minus"),
            phi: take("phi"),
            disc: take("disc"),
            theta,
            opt,
            disc_opt,
        };
        if !state.theta.same_layout(&state.net()?.init::<T>(0)) {
            return Err(malformed("parameter layout differs from the network configuration".into()));
        }
        Ok(state)
    }
}

/// Batched images of one group.
struct Group<T> {
    hr: Tensor<T>,
    lr: Tensor<T>,
}

fn stack_group<T: Scalar>(pairs: &[&ImagePair<T>]) -> Result<Group<T>> {
    let hr = Tensor::stack_outer(&pairs.iter().map(|p| p.x_hr.clone()).collect::<Vec<_>>())?;
    let lr = Tensor::stack_outer(&pairs.iter().map(|p| p.x_lr.clone()).collect::<Vec<_>>())?;
    Ok(Group { hr, lr })
}

/// Inputs of the flow loss for one group.
pub struct FlowBatch<T> {
    pub x_hr: Tensor<T>,
    pub x_lr: Tensor<T>,
    pub x1: Tensor<T>,
    pub x_t: Tensor<T>,
    pub t: Vec<f64>,
}

pub fn prepare_flow_batch<T: Scalar>(
    pairs: &[&ImagePair<T>],
    cfg: &ExperimentConfig,
    sampler: &PairSampler,
    rng: &mut ChaCha8Rng,
) -> Result<FlowBatch<T>> {
    let g = stack_group(pairs)?;
    let t: Vec<f64> = (0..pairs.len()).map(|_| sampler.flow_time(rng)).collect();
    let x1 = cfg.flow.endpoint(&g.lr, rng);
    let x_t = interp_batch(&g.hr, &x1, &t)?;
    Ok(FlowBatch {
        x_hr: g.hr,
        x_lr: g.lr,
        x1,
        x_t,
        t,
    })
}

/// Records the flow loss of a prepared batch; `velocity` maps
/// `(graph, x_t, t, condition)` to the predicted velocity.
pub fn flow_batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    batch: &FlowBatch<T>,
    lambda_p: f64,
    conditioned: bool,
    velocity: &mut dyn FnMut(&mut Graph<T>, Var, &[f64], Option<Var>) -> Result<Var>,
) -> Result<Var> {
    let x_t = g.constant(batch.x_t.clone());
    let cond = conditioned.then(|| g.constant(batch.x_lr.clone()));
    let v = velocity(g, x_t, &batch.t, cond)?;
    let x_hat = consistency_node(g, x_t, &batch.t, v)?;
    let hr = g.constant(batch.x_hr.clone());
    flow_loss(g, x_hat, hr, lambda_p)
}

fn draw_batch<'a, T>(pairs: &'a [ImagePair<T>], batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&'a ImagePair<T>>> {
    if pairs.is_empty() {
        return Err(Error::invalid("training", "training split is empty"));
    }
    Ok(if batch <= pairs.len() {
        sample_indices(rng, pairs.len(), batch).into_iter().map(|i| &pairs[i]).collect()
    } else {
        (0..batch).map(|_| &pairs[rng.random_range(0..pairs.len())]).collect()
    })
}

fn check_finite(state_step: u64, seed: u64, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            step: state_step,
            seed,
            term: term.to_string(),
        })
    }
}

fn named_grads<T: Scalar>(bound: &Bound, grads: &ndgrad::GradMap<T>) -> BTreeMap<String, Tensor<T>> {
    bound
        .iter()
        .filter_map(|(name, var)| grads.get(var).map(|g| (name.clone(), g.clone())))
        .collect()
}

/// One stage-one update on `pairs`.
pub fn flow_pretrain_step<T: Scalar>(state: &mut TrainState<T>, pairs: &[&ImagePair<T>], rng: &mut ChaCha8Rng) -> Result<LossReport> {
    if state.stage != Stage::FlowPretrain {
        return Err(Error::invalid("flow_pretrain_step", "state is not in the flow pretraining stage"));
    }
    let net = state.net()?;
    let sampler = state.cfg.sched.sampler()?;
    let batch = prepare_flow_batch(pairs, &state.cfg, &sampler, rng)?;
    let mut g = Graph::new();
    let p = state.theta.bind(&mut g, true);
    let loss = flow_batch_loss(&mut g, &batch, state.cfg.loss.lambda_p, net.cfg.condition_lr, &mut |g, x, t, c| {
        net.forward(g, &p, x, t, c)
    })?;
    let value = check_finite(state.step, state.step_seed(state.step), "flow", g.value(loss).item().as_f64())?;
    let grads = named_grads(&p, &g.backward(loss)?);
    let adam = state.adam();
    adam_step(&mut state.theta, &grads, &mut state.opt, &adam)?;
    state.step += 1;
    Ok(LossReport {
        flow: value,
        total: value,
        ..LossReport::default()
    })
}

/// `(1 − s)·x + s·x_lr` per sample: the discriminator sees images moved a
/// random distance back along the degradation path.
fn disc_input<T: Scalar>(x: &Tensor<T>, lr: &Tensor<T>, s: &[f64]) -> Result<Tensor<T>> {
    interp_batch(x, lr, s)
}

/// Sizes of the flow and consistency groups for a batch.
pub fn split_batch(batch: usize, flow_fraction: f64) -> Result<(usize, usize)> {
    if batch < 2 {
        return Err(Error::invalid("consistency_step", "batch must hold at least 2 samples"));
    }
    let a = ((batch as f64 * flow_fraction).round() as usize).clamp(1, batch - 1);
    Ok((a, batch - a))
}

/// Values and gradients of one consistency step, before any update.
pub struct ConsistencyEval<T> {
    pub report: LossReport,
    pub grads: BTreeMap<String, Tensor<T>>,
    /// Student origin prediction at `t′` for the consistency group,
    /// detached; feeds the discriminator update.
    pub fake: Option<Tensor<T>>,
    pub consistency_group: Group2<T>,
}

/// HR / LR images of the consistency group and the discriminator times.
pub struct Group2<T> {
    pub hr: Tensor<T>,
    pub lr: Tensor<T>,
    pub disc_t: Vec<f64>,
}

/// Computes the stage-two loss and student gradients without updating.
pub fn consistency_eval<T: Scalar>(state: &TrainState<T>, pairs: &[&ImagePair<T>], rng: &mut ChaCha8Rng) -> Result<ConsistencyEval<T>> {
    if state.stage != Stage::Consistency {
        return Err(Error::invalid("consistency_step", "state is not in the consistency stage"));
    }
    let cfg = &state.cfg;
    let (n_flow, n_cons) = split_batch(pairs.len(), cfg.distill.flow_fraction)?;
    let net = state.net()?;
    let sampler = cfg.sched.sampler()?;
    let conditioned = net.cfg.condition_lr;
    let phi = state.phi.as_ref().ok_or_else(|| Error::invalid("consistency_step", "no teacher"))?;
    let target = state.theta_minus.as_ref().ok_or_else(|| Error::invalid("consistency_step", "no EMA target"))?;
    let w = cfg.loss;

    let mut g = Graph::new();
    let p = state.theta.bind(&mut g, true);

    // flow group
    let fb = prepare_flow_batch(&pairs[..n_flow], cfg, &sampler, rng)?;
    let flow = flow_batch_loss(&mut g, &fb, w.lambda_p, conditioned, &mut |g, x, t, c| net.forward(g, &p, x, t, c))?;

    // consistency group
    let grp = stack_group(&pairs[n_flow..])?;
    let tp_pairs = (0..n_cons).map(|_| sampler.pair(rng)).collect::<Result<Vec<_>>>()?;
    let t: Vec<f64> = tp_pairs.iter().map(|p| p.t).collect();
    let t_prime: Vec<f64> = tp_pairs.iter().map(|p| p.t_prime).collect();
    let x1 = cfg.flow.endpoint(&grp.lr, rng);
    let x_tp = interp_batch(&grp.hr, &x1, &t_prime)?;
    let cond_t = conditioned.then_some(&grp.lr);
    let x_hat_t = teacher_step(&x_tp, &t, &t_prime, &Model { net: &net, params: phi }, cond_t)?;

    let objective = cfg.distill.objective;
    let adv = cfg.distill.adv_enabled && w.lambda_adv > 0.0;
    let need_tp = objective != Objective::Hr || adv;
    let need_t = objective != Objective::Cd;

    // student evaluations share one forward pass
    let mut xs = Vec::new();
    let mut ts = Vec::new();
    if need_tp {
        xs.push(x_tp.clone());
        ts.extend_from_slice(&t_prime);
    }
    if need_t {
        xs.push(x_hat_t.clone());
        ts.extend_from_slice(&t);
    }
    let stacked = g.constant(Tensor::stack_outer(&xs)?);
    let cond = if conditioned {
        let reps: Vec<Tensor<T>> = xs.iter().map(|_| grp.lr.clone()).collect();
        Some(g.constant(Tensor::stack_outer(&reps)?))
    } else {
        None
    };
    let v = net.forward(&mut g, &p, stacked, &ts, cond)?;
    let origins = consistency_node(&mut g, stacked, &ts, v)?;
    let mut offset = 0;
    let s_tp = if need_tp {
        offset = n_cons;
        Some(g.slice_outer(origins, 0, n_cons)?)
    } else {
        None
    };
    let s_t = if need_t { Some(g.slice_outer(origins, offset, n_cons)?) } else { None };

    let hr = g.constant(grp.hr.clone());
    let mut report = LossReport::default();
    let cd = match (objective, s_tp) {
        (Objective::Cd | Objective::Hrcd, Some(s)) => {
            let v_target = Model { net: &net, params: target }.velocity(&x_hat_t, &t, cond_t)?;
            let f_target = g.constant(consistency_per_sample(&x_hat_t, &t, &v_target)?);
            Some(cd_loss(&mut g, s, f_target)?)
        }
        _ => None,
    };
    let hr_term = match s_t {
        Some(s) => Some(match cfg.distill.hr_distance {
            HrDistance::Perceptual => flow_loss(&mut g, s, hr, w.lambda_p)?,
            HrDistance::Mse => mse(&mut g, s, hr)?,
        }),
        None => None,
    };
    let objective_loss = match (cd, hr_term) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!("every objective has a term"),
    };

    let mut fake = None;
    let mut disc_t = Vec::new();
    let adv_loss = if adv {
        let s = s_tp.expect("computed when adversarial");
        let disc = state.disc.as_ref().ok_or_else(|| Error::invalid("consistency_step", "no discriminator"))?;
        let d = Discriminator::new(&net.cfg);
        disc_t = (0..n_cons).map(|_| rng.random::<f64>()).collect();
        let lr_c = g.constant(grp.lr.clone());
        // noised fake: (1 − s)·fake + s·lr
        let keep = g.constant(time_map(grp.hr.shape(), &disc_t.iter().map(|v| 1.0 - v).collect::<Vec<_>>())?);
        let mix = g.constant(time_map(grp.hr.shape(), &disc_t)?);
        let a = g.mul(keep, s)?;
        let b = g.mul(mix, lr_c)?;
        let noised = g.add(a, b)?;
        let dp = disc.bind(&mut g, false);
        let d_fake = d.forward(&mut g, &dp, noised, &disc_t)?;
        let neg = g.mean(d_fake);
        let gen = g.scale(neg, -T::one());
        report.adv_gen = Some(g.value(gen).item().as_f64());
        fake = Some(g.value(s).clone());
        Some(gen)
    } else {
        None
    };

    let total = total_loss(&mut g, flow, Some(objective_loss), adv_loss, &w)?;
    let seed = state.step_seed(state.step);
    report.flow = check_finite(state.step, seed, "flow", g.value(flow).item().as_f64())?;
    report.cd = cd.map(|v| g.value(v).item().as_f64());
    report.hr = hr_term.map(|v| g.value(v).item().as_f64());
    report.hrcd = Some(check_finite(state.step, seed, "consistency", g.value(objective_loss).item().as_f64())?);
    report.total = check_finite(state.step, seed, "total", g.value(total).item().as_f64())?;
    let grads = named_grads(&p, &g.backward(total)?);
    Ok(ConsistencyEval {
        report,
        grads,
        fake,
        consistency_group: Group2 {
            hr: grp.hr,
            lr: grp.lr,
            disc_t,
        },
    })
}

fn consistency_per_sample<T: Scalar>(x: &Tensor<T>, t: &[f64], v: &Tensor<T>) -> Result<Tensor<T>> {
    let parts = (0..t.len())
        .map(|i| consistency_fn(&x.slice_outer(i, 1)?, t[i], &v.slice_outer(i, 1)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack_outer(&parts)?)
}

/// One stage-two update: student Adam step, EMA refresh, then a
/// discriminator step when the adversarial term is on.
pub fn consistency_step<T: Scalar>(state: &mut TrainState<T>, pairs: &[&ImagePair<T>], rng: &mut ChaCha8Rng) -> Result<LossReport> {
    let ev = consistency_eval(state, pairs, rng)?;
    let mut report = ev.report;
    let adam = state.adam();
    adam_step(&mut state.theta, &ev.grads, &mut state.opt, &adam)?;
    let theta_minus = state.theta_minus.as_mut().expect("checked in eval");
    ema_update(theta_minus, &state.theta, state.cfg.distill.ema_mu)?;

    if let (Some(fake), Some(disc), Some(dopt)) = (ev.fake, state.disc.as_mut(), state.disc_opt.as_mut()) {
        let grp = ev.consistency_group;
        let d = Discriminator::new(&state.cfg.net);
        let mut g = Graph::new();
        let dp = disc.bind(&mut g, true);
        let real = g.constant(disc_input(&grp.hr, &grp.lr, &grp.disc_t)?);
        let fk = g.constant(disc_input(&fake, &grp.lr, &grp.disc_t)?);
        let d_real = d.forward(&mut g, &dp, real, &grp.disc_t)?;
        let d_fake = d.forward(&mut g, &dp, fk, &grp.disc_t)?;
        let (dloss, _) = hinge_losses(&mut g, d_real, d_fake);
        let seed = derive_seed(state.cfg.train.seed, state.step);
        report.disc = Some(check_finite(state.step, seed, "disc", g.value(dloss).item().as_f64())?);
        let grads = named_grads(&dp, &g.backward(dloss)?);
        let dcfg = AdamConfig {
            lr: state.cfg.distill.disc_lr,
            ..adam
        };
        adam_step(disc, &grads, dopt, &dcfg)?;
    }
    state.step += 1;
    Ok(report)
}

/// Draws the batch for the state's next step and applies it.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, train: &[ImagePair<T>]) -> Result<LossReport> {
    let mut rng = rng_from(state.step_seed(state.step));
    let batch = draw_batch(train, state.cfg.train.batch, &mut rng)?;
    match state.stage {
        Stage::FlowPretrain => flow_pretrain_step(state, &batch, &mut rng),
        Stage::Consistency => consistency_step(state, &batch, &mut rng),
    }
}

/// ODE start point and network condition for an LR batch under the
/// configured flow variant. Noise is seeded by `(seed, chunk)`.
pub fn start_point<T: Scalar>(cfg: &ExperimentConfig, seed: u64, chunk: usize, lr: &Tensor<T>) -> (Tensor<T>, Option<Tensor<T>>) {
    let mut rng = rng_from(derive_seed(seed, chunk as u64));
    let x1 = cfg.flow.endpoint(lr, &mut rng);
    let cond = (cfg.flow.kind != FlowKind::SrFlow).then(|| lr.clone());
    (x1, cond)
}

/// Evaluates weights on `pairs` at every configured step count plus the
/// baselines.
pub fn evaluate_params<T: Scalar>(
    cfg: &ExperimentConfig,
    params: &ParamSet<T>,
    pairs: &[ImagePair<T>],
    method: &str,
) -> Result<Vec<EvalRow>> {
    let net = UNet::new(cfg.net.clone())?;
    let model = Model { net: &net, params };
    let limit = if cfg.eval.images == 0 { pairs.len() } else { cfg.eval.images.min(pairs.len()) };
    let grid = |n: usize| cfg.sched.inference_grid(n);
    let spec = EvalSpec {
        method,
        grid: &grid,
        step_counts: &cfg.eval.step_counts,
        chunk: cfg.eval.chunk,
    };
    let seed = derive_seed(cfg.train.seed, SEED_EVAL);
    evaluate(&model, &pairs[..limit], &spec, |chunk, lr| Ok(start_point(cfg, seed, chunk, lr)))
}

#[derive(Serialize)]
struct LogLine<'a> {
    stage: &'a str,
    step: u64,
    #[serde(flatten)]
    losses: &'a LossReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval: Option<&'a [EvalRow]>,
}

fn append_log(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn save_state<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    checkpoint::save(&state.to_checkpoint(), path)
}

/// Loads stage-one weights from a checkpoint for use as a teacher.
pub fn load_teacher<T: Scalar>(path: &Path, cfg: &ExperimentConfig) -> Result<ParamSet<T>> {
    if !path.is_file() {
        return Err(Error::Prerequisite(format!(
            "stage-one checkpoint {} not found; run train-flow first",
            path.display()
        )));
    }
    let ck = checkpoint::load(path, Some(&config_digest(&cfg.net)))?;
    Ok(TrainState::<T>::from_checkpoint(&ck, cfg)?.theta)
}

/// Options for [`run_training`].
pub struct RunOptions<'a> {
    pub stage: Stage,
    pub out_dir: &'a Path,
    /// Stage-one checkpoint; defaults to `out_dir/flow.ckpt`.
    pub teacher: Option<&'a Path>,
    /// Called after every step with the step's report.
    pub on_step: Option<&'a mut dyn FnMut(u64, &LossReport)>,
}

/// Runs (or resumes) a stage end to end. Writes `<stage>.ckpt`,
/// `metrics.jsonl` and `config.toml` under `out_dir` and returns the
/// checkpoint path.
pub fn run_training(cfg: &ExperimentConfig, corpus: &Corpus<f32>, opts: RunOptions<'_>) -> Result<PathBuf> {
    let RunOptions {
        stage,
        out_dir,
        teacher,
        mut on_step,
    } = opts;
    if corpus.train.is_empty() {
        return Err(Error::invalid("run_training", "training split is empty"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    checkpoint::write_atomic(&out_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let ck_path = out_dir.join(stage.checkpoint_file());
    let log_path = out_dir.join("metrics.jsonl");

    let mut state = if ck_path.is_file() {
        let ck = checkpoint::load(&ck_path, Some(&config_digest(&cfg.net)))?;
        TrainState::from_checkpoint(&ck, cfg)?
    } else {
        match stage {
            Stage::FlowPretrain => TrainState::new_flow(cfg)?,
            Stage::Consistency => {
                let default = out_dir.join(Stage::FlowPretrain.checkpoint_file());
                let path = teacher.unwrap_or(&default);
                TrainState::from_teacher(cfg, load_teacher(path, cfg)?)?
            }
        }
    };
    if state.stage != stage {
        return Err(Error::invalid("run_training", format!("{} holds a different stage", ck_path.display())));
    }
    let target = state.target_steps();
    if state.step == 0 || state.step >= target {
        save_state(&state, &ck_path)?;
    }
    while state.step < target {
        let report = train_step(&mut state, &corpus.train)?;
        let step = state.step;
        let eval_due = cfg.train.eval_every > 0 && (step % cfg.train.eval_every == 0 || step == target);
        let rows = if eval_due && !corpus.eval.is_empty() {
            Some(evaluate_params(cfg, state.inference_params(), &corpus.eval, stage.name())?)
        } else {
            None
        };
        let line = LogLine {
            stage: stage.name(),
            step,
            losses: &report,
            eval: rows.as_deref(),
        };
        append_log(&log_path, &serde_json::to_string(&line).expect("serializable"))?;
        if let Some(cb) = on_step.as_mut() {
            cb(step, &report);
        }
        let ck_due = cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0;
        if ck_due || step == target {
            save_state(&state, &ck_path)?;
        }
    }
    Ok(ck_path)
}
