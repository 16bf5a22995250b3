//! Scripted ablations: flow variants, consistency objectives and pair
//! scheduling, each row trained and evaluated into its own report.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rectsr::config::ExperimentConfig;
use rectsr::corpus::Corpus;
use rectsr::distill::{evaluate_params, load_teacher, run_training, RunOptions, Stage, TrainState};
use rectsr::metrics::EvalReport;
use rectsr::{checkpoint, Error, Result};

use crate::{make_report, write_report};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Flow endpoint variants.
    Flow,
    /// Stage-two objectives on top of the SR flow teacher.
    Consistency,
    /// Time-pair scheduling for stage two.
    Schedule,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Flow, Group::Consistency, Group::Schedule];

    pub fn name(self) -> &'static str {
        match self {
            Group::Flow => "flow",
            Group::Consistency => "consistency",
            Group::Schedule => "schedule",
        }
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation group {s:?} (flow, consistency, schedule, all)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    /// Stage-one training of a flow variant.
    Pretrain,
    /// Evaluation of the stage-one SR flow model as is.
    Teacher,
    /// Stage-two training from the SR flow teacher.
    Distill,
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub group: Group,
    /// Directory name.
    pub slug: String,
    /// Row label used as the report's method name.
    pub label: String,
    pub kind: RowKind,
    pub overrides: Vec<String>,
}

fn variant(group: Group, slug: &str, label: &str, kind: RowKind, overrides: &[&str]) -> Variant {
    Variant {
        group,
        slug: slug.to_string(),
        label: label.to_string(),
        kind,
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

/// The rows of a group, in table order.
pub fn variants(group: Group) -> Vec<Variant> {
    use RowKind::*;
    let g = group;
    match group {
        Group::Flow => vec![
            variant(g, "noise_to_hr", "Noise to HR", Pretrain, &["flow.kind=noise_to_hr"]),
            variant(g, "noised_lr_to_hr", "Noised LR to HR", Pretrain, &["flow.kind=noised_lr_to_hr"]),
            variant(g, "sr_flow", "SR Flow", Pretrain, &["flow.kind=sr_flow"]),
        ],
        Group::Consistency => vec![
            variant(g, "sr_flow", "SR Flow", Teacher, &[]),
            variant(g, "cd", "+L_cd", Distill, &["distill.objective=cd"]),
            variant(g, "hr", "+L_hr", Distill, &["distill.objective=hr"]),
            variant(g, "hrcd", "+L_hrcd", Distill, &["distill.objective=hrcd"]),
        ],
        Group::Schedule => {
            let mut rows: Vec<Variant> = [50, 18, 4]
                .into_iter()
                .map(|n| {
                    Variant {
                        group: g,
                        slug: format!("n_interval_{n}"),
                        label: format!("N-Interval ({n})"),
                        kind: Distill,
                        overrides: vec![format!("sched.pairing=n_interval({n})")],
                    }
                })
                .collect();
            rows.push(variant(
                g,
                "slow_only_1000",
                "Slow Only (1000)",
                Distill,
                &["sched.pairing=slow_only", "sched.slow_steps=1000"],
            ));
            for n in [8, 4, 1] {
                rows.push(Variant {
                    group: g,
                    slug: format!("fast_slow_{n}"),
                    label: format!("Fast-Slow ({n})"),
                    kind: Distill,
                    overrides: vec!["sched.pairing=fast_slow".into(), format!("sched.fast_steps={n}")],
                });
            }
            rows
        }
    }
}

/// Where a row's run lives under the ablation root.
pub fn variant_dir(root: &Path, v: &Variant) -> PathBuf {
    root.join(v.group.name()).join(&v.slug)
}

fn teacher_variant() -> Variant {
    variants(Group::Flow).into_iter().find(|v| v.slug == "sr_flow").expect("sr_flow row")
}

/// Stage-two rows always distil the SR flow model.
fn distill_config(base: &ExperimentConfig, v: &Variant) -> Result<ExperimentConfig> {
    let mut o = vec!["flow.kind=sr_flow".to_string()];
    o.extend(v.overrides.iter().cloned());
    base.with_overrides(&o)
}

/// Trains (or resumes) and evaluates one row, writing its report next to the
/// run outputs. Stage-two rows train the shared SR flow teacher first if
/// needed.
pub fn run_variant(
    base: &ExperimentConfig,
    corpus: &Corpus<f32>,
    root: &Path,
    v: &Variant,
    progress: &mut dyn FnMut(&str),
) -> Result<EvalReport> {
    let dir = variant_dir(root, v);
    let teacher_dir = variant_dir(root, &teacher_variant());
    let teacher_ckpt = teacher_dir.join(Stage::FlowPretrain.checkpoint_file());
    let ensure_teacher = |progress: &mut dyn FnMut(&str)| -> Result<ExperimentConfig> {
        let cfg = base.with_overrides(&teacher_variant().overrides)?;
        if !complete(&teacher_ckpt, cfg.train.steps) {
            progress("training SR flow teacher");
        }
        run_training(&cfg, corpus, opts(Stage::FlowPretrain, &teacher_dir, None))?;
        Ok(cfg)
    };
    let (cfg, params) = match v.kind {
        RowKind::Pretrain => {
            let cfg = base.with_overrides(&v.overrides)?;
            progress(&format!("{}: stage one", v.label));
            let ck = run_training(&cfg, corpus, opts(Stage::FlowPretrain, &dir, None))?;
            let params = load_teacher::<f32>(&ck, &cfg)?;
            (cfg, params)
        }
        RowKind::Teacher => {
            let cfg = ensure_teacher(progress)?;
            (cfg.clone(), load_teacher::<f32>(&teacher_ckpt, &cfg)?)
        }
        RowKind::Distill => {
            ensure_teacher(progress)?;
            let cfg = distill_config(base, v)?;
            progress(&format!("{}: stage two", v.label));
            let ck = run_training(&cfg, corpus, opts(Stage::Consistency, &dir, Some(&teacher_ckpt)))?;
            let state = TrainState::<f32>::from_checkpoint(&checkpoint::load(&ck, None)?, &cfg)?;
            let params = state.inference_params().clone();
            (cfg, params)
        }
    };
    let rows = evaluate_params(&cfg, &params, &corpus.eval, &v.label)?;
    let report = make_report(&cfg, rows, corpus.eval.len());
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    write_report(&dir, &report)?;
    Ok(report)
}

fn opts<'a>(stage: Stage, out_dir: &'a Path, teacher: Option<&'a Path>) -> RunOptions<'a> {
    RunOptions {
        stage,
        out_dir,
        teacher,
        on_step: None,
    }
}

fn complete(ckpt: &Path, steps: u64) -> bool {
    checkpoint::load(ckpt, None).is_ok_and(|c| c.step >= steps)
}

/// Runs every row of `group` (or only the slugs in `only`) and writes a
/// group summary table.
pub fn run_group(
    base: &ExperimentConfig,
    corpus: &Corpus<f32>,
    root: &Path,
    group: Group,
    only: Option<&[String]>,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<(Variant, EvalReport)>> {
    let mut out = Vec::new();
    for v in variants(group) {
        if only.is_some_and(|o| !o.contains(&v.slug)) {
            continue;
        }
        let report = run_variant(base, corpus, root, &v, progress)?;
        out.push((v, report));
    }
    let summary = summary_table(&out);
    let gdir = root.join(group.name());
    std::fs::create_dir_all(&gdir).map_err(|e| Error::Io { path: gdir.clone(), source: e })?;
    checkpoint::write_atomic(&gdir.join("summary.txt"), summary.as_bytes())?;
    Ok(out)
}

/// One line per (row, step count) across a group's reports.
pub fn summary_table(rows: &[(Variant, EvalReport)]) -> String {
    let mut s = format!("# {}\n", rectsr::metrics::REPORT_NOTE);
    s.push_str(&format!("{:<20} {:>5} {:>10} {:>8} {:>12}\n", "row", "steps", "psnr_db", "ssim", "gradient_l1"));
    for (v, rep) in rows {
        for r in rep.rows.iter().filter(|r| r.steps.is_some()) {
            s.push_str(&format!(
                "{:<20} {:>5} {:>10.4} {:>8.5} {:>12.6}\n",
                v.label,
                r.steps.unwrap_or(0),
                r.psnr_db,
                r.ssim,
                r.gradient_l1
            ));
        }
    }
    s
}
