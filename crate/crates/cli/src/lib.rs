//! Library side of the `rectsr` binary: subcommands, report writing and the
//! ablation runner.

pub mod ablate;
pub mod commands;

use std::path::Path;

use rectsr::checkpoint::{config_digest, hex, write_atomic};
use rectsr::config::ExperimentConfig;
use rectsr::metrics::{EvalReport, EvalRow};
use rectsr::Result;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "RECTSR_OUT";

/// Wraps evaluation rows with the resolved configuration that produced them.
pub fn make_report(cfg: &ExperimentConfig, rows: Vec<EvalRow>, images: usize) -> EvalReport {
    EvalReport {
        rows,
        config_digest: hex(&config_digest(cfg)),
        seeds: vec![cfg.train.seed, cfg.data.seed],
        images,
        config: cfg.to_json(),
    }
}

/// Writes `report.txt` (aligned table) and `report.jsonl` under `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_atomic(&dir.join("report.txt"), report.to_table().as_bytes())?;
    write_atomic(&dir.join("report.jsonl"), report.to_jsonl().as_bytes())
}
