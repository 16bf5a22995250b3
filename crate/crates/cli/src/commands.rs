//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rectsr::checkpoint::{self, write_atomic};
use rectsr::config::ExperimentConfig;
use rectsr::corpus::{load_split, write_corpus, Corpus, Split};
use rectsr::degrade::upscale;
use rectsr::distill::{evaluate_params, run_training, start_point, RunOptions, Stage, TrainState};
use rectsr::imageio::{read_png, write_png, write_raw};
use rectsr::net::{Model, UNet};
use rectsr::sample::sample_ode_from;
use rectsr::{Error, Result};
use sha2::{Digest, Sha256};

use crate::ablate::{self, Group};
use crate::{make_report, write_report, OUT_ENV};

#[derive(Debug, Parser)]
#[command(name = "rectsr", version, about = "Rectified-flow super-resolution with consistency distillation")]
pub struct Cli {
    /// Experiment config file (TOML sections); defaults are used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root for default paths.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    pub out_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic train/eval corpus as PNGs plus a manifest.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write exact f32 `.raw` sidecars.
        #[arg(long)]
        raw: bool,
    },
    /// Stage one: train the velocity field with the flow loss.
    TrainFlow {
        /// Corpus directory from `gen-data`; synthesized in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Stage two: consistency distillation from a stage-one checkpoint.
    Distill {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Stage-one checkpoint; defaults to `<run>/flow.ckpt`.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Super-resolve one LR PNG.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// LR image at its small size.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Write every ODE state as PNG and raw f32 into this directory.
        #[arg(long)]
        dump_trajectory: Option<PathBuf>,
        /// Write an exact `.raw` sidecar next to the output.
        #[arg(long)]
        raw: bool,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        split: String,
        /// Report directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation group (flow, consistency, schedule or all).
    Ablate {
        #[arg(long, default_value = "all")]
        group: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict to these row slugs (comma separated).
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
    },
}

/// Resolved run configuration: the config file (or defaults) plus overrides.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default().resolved()?,
    };
    base.with_overrides(&cli.overrides)
}

/// Configuration embedded in a checkpoint, unless `--config` was given,
/// with overrides applied.
fn checkpoint_config(cli: &Cli, ck: &checkpoint::Checkpoint) -> Result<ExperimentConfig> {
    if cli.config.is_some() {
        return load_config(cli);
    }
    let embedded: ExperimentConfig = serde_json::from_value(ck.meta["config"].clone())
        .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    embedded.resolved()?.with_overrides(&cli.overrides)
}

fn corpus(data: Option<&Path>, cfg: &ExperimentConfig) -> Result<Corpus<f32>> {
    match data {
        Some(d) => Corpus::load(d, cfg),
        None => Corpus::synthesize(cfg),
    }
}

fn file_digest(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(Sha256::digest(bytes).to_vec())
}

fn progress_printer(label: &'static str, every: u64) -> impl FnMut(u64, &rectsr::distill::LossReport) {
    move |step, r| {
        if step % every == 0 {
            eprintln!("{label} step {step} loss {:.6}", r.total);
        }
    }
}

/// Runs a parsed command; returns the text printed on success.
pub fn run(cli: &Cli) -> Result<String> {
    let root = &cli.out_root;
    match &cli.command {
        Command::GenData { out, raw } => {
            let cfg = load_config(cli)?;
            let dir = out.clone().unwrap_or_else(|| root.join("data"));
            let n = write_corpus(&dir, &cfg, *raw)?;
            Ok(format!("wrote {n} pairs to {}", dir.display()))
        }
        Command::TrainFlow { data, run } => {
            let cfg = load_config(cli)?;
            let corpus = corpus(data.as_deref(), &cfg)?;
            let dir = run.clone().unwrap_or_else(|| root.join("run"));
            let mut cb = progress_printer("flow", 100);
            let ck = run_training(
                &cfg,
                &corpus,
                RunOptions {
                    stage: Stage::FlowPretrain,
                    out_dir: &dir,
                    teacher: None,
                    on_step: Some(&mut cb),
                },
            )?;
            Ok(ck.display().to_string())
        }
        Command::Distill { data, run, teacher } => {
            let cfg = load_config(cli)?;
            let dir = run.clone().unwrap_or_else(|| root.join("run"));
            // fail on a missing teacher before building the corpus
            let teacher_path = teacher.clone().unwrap_or_else(|| dir.join(Stage::FlowPretrain.checkpoint_file()));
            if !dir.join(Stage::Consistency.checkpoint_file()).is_file() && !teacher_path.is_file() {
                return Err(Error::Prerequisite(format!(
                    "stage-one checkpoint {} not found; run train-flow first",
                    teacher_path.display()
                )));
            }
            let corpus = corpus(data.as_deref(), &cfg)?;
            let mut cb = progress_printer("distill", 100);
            let ck = run_training(
                &cfg,
                &corpus,
                RunOptions {
                    stage: Stage::Consistency,
                    out_dir: &dir,
                    teacher: Some(&teacher_path),
                    on_step: Some(&mut cb),
                },
            )?;
            Ok(ck.display().to_string())
        }
        Command::Sample {
            checkpoint: ck_path,
            input,
            output,
            steps,
            dump_trajectory,
            raw,
        } => {
            let ck = checkpoint::load(ck_path, None)?;
            let cfg = checkpoint_config(cli, &ck)?;
            let state = TrainState::<f32>::from_checkpoint(&ck, &cfg)?;
            let small: rectsr::Tensor<f32> = read_png(input)?;
            let lr = upscale(&small, cfg.degrade.scale, cfg.degrade.upscale)?;
            let net = UNet::new(cfg.net.clone())?;
            let model = Model {
                net: &net,
                params: state.inference_params(),
            };
            let (x1, cond) = start_point(&cfg, cfg.train.seed, 0, &lr);
            let grid = cfg.sched.inference_grid(*steps)?;
            let traj = sample_ode_from(&x1, cond.as_ref(), &model, &grid)?;
            write_png(output, &traj.output())?;
            if *raw {
                write_raw(&output.with_extension("raw"), &traj.output())?;
            }
            if let Some(dir) = dump_trajectory {
                for (k, (t, x)) in traj.states.iter().enumerate() {
                    let stem = dir.join(format!("state_{k:03}_t{t:.4}"));
                    write_png(&stem.with_extension("png"), &x.clamp(0.0, 1.0))?;
                    write_raw(&stem.with_extension("raw"), x)?;
                }
            }
            Ok(output.display().to_string())
        }
        Command::Eval {
            checkpoint: ck_path,
            data,
            split,
            out,
        } => {
            let before = file_digest(ck_path)?;
            let ck = checkpoint::load(ck_path, None)?;
            let cfg = checkpoint_config(cli, &ck)?;
            let state = TrainState::<f32>::from_checkpoint(&ck, &cfg)?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "eval" => Split::Eval,
                other => return Err(Error::Config(format!("unknown split {other:?} (train, eval)"))),
            };
            let pairs = match data {
                Some(d) => {
                    if !d.join(rectsr::corpus::MANIFEST).is_file() {
                        return Err(Error::Prerequisite(format!("{} is not a corpus; run gen-data first", d.display())));
                    }
                    load_split(d, split, &cfg)?
                }
                None => rectsr::corpus::synthesize(&cfg, split)?,
            };
            let rows = evaluate_params(&cfg, state.inference_params(), &pairs, state.stage.name())?;
            let report = make_report(&cfg, rows, pairs.len());
            let dir = out
                .clone()
                .unwrap_or_else(|| ck_path.parent().map(Path::to_path_buf).unwrap_or_default());
            write_report(&dir, &report)?;
            if file_digest(ck_path)? != before {
                return Err(Error::Invalid {
                    op: "eval",
                    msg: format!("checkpoint {} changed during evaluation", ck_path.display()),
                });
            }
            Ok(report.to_table())
        }
        Command::Ablate { group, out, only } => {
            let cfg = load_config(cli)?;
            let groups = if group == "all" {
                Group::ALL.to_vec()
            } else {
                vec![group.parse::<Group>()?]
            };
            let dir = out.clone().unwrap_or_else(|| root.join("ablate"));
            let corpus = Corpus::<f32>::synthesize(&cfg)?;
            let mut text = String::new();
            let mut progress = |msg: &str| eprintln!("ablate: {msg}");
            for g in groups {
                let rows = ablate::run_group(&cfg, &corpus, &dir, g, only.as_deref(), &mut progress)?;
                text.push_str(&format!("[{}]\n{}", g.name(), ablate::summary_table(&rows)));
            }
            write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
            Ok(text)
        }
    }
}
