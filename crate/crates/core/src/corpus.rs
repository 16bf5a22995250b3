//! Seeded train/eval splits, in memory or as a PNG directory.
//!
//! Image `i` of a split uses seed `derive_seed(derive_seed(data.seed,
//! split_id), i)`, so any single image can be regenerated on its own.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndgrad::{Scalar, Tensor};
use serde::Serialize;

use crate::checkpoint::write_atomic;
use crate::config::ExperimentConfig;
use crate::degrade::{degrade, make_texture, upscale, ImagePair};
use crate::imageio::{read_png, write_png, write_raw};
use crate::seed::derive_seed;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }

    fn count(self, cfg: &ExperimentConfig) -> usize {
        match self {
            Split::Train => cfg.data.train_images,
            Split::Eval => cfg.data.eval_images,
        }
    }
}

pub fn image_seed(data_seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(derive_seed(data_seed, split.id()), index as u64)
}

/// HR texture and its small (not yet upscaled) LR image.
fn synth_one<T: Scalar>(cfg: &ExperimentConfig, split: Split, index: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let seed = image_seed(cfg.data.seed, split, index);
    let hr = make_texture(derive_seed(seed, 0), cfg.data.size, cfg.net.image_channels)?;
    let small = degrade(&hr, &cfg.degrade, derive_seed(seed, 1))?;
    Ok((hr, small))
}

/// Generates a split in memory.
pub fn synthesize<T: Scalar>(cfg: &ExperimentConfig, split: Split) -> Result<Vec<ImagePair<T>>> {
    (0..split.count(cfg))
        .map(|i| {
            let (x_hr, small) = synth_one(cfg, split, i)?;
            let x_lr = upscale(&small, cfg.degrade.scale, cfg.degrade.upscale)?;
            Ok(ImagePair { x_hr, x_lr })
        })
        .collect()
}

/// Training and held-out pairs.
#[derive(Clone, Debug)]
pub struct Corpus<T> {
    pub train: Vec<ImagePair<T>>,
    pub eval: Vec<ImagePair<T>>,
}

impl<T: Scalar> Corpus<T> {
    pub fn synthesize(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            train: synthesize(cfg, Split::Train)?,
            eval: synthesize(cfg, Split::Eval)?,
        })
    }

    /// Loads both splits of a `gen-data` directory.
    pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        if !dir.join(MANIFEST).is_file() {
            return Err(Error::Prerequisite(format!(
                "corpus {} has no {MANIFEST}; run gen-data first",
                dir.display()
            )));
        }
        Ok(Self {
            train: load_split(dir, Split::Train, cfg)?,
            eval: load_split(dir, Split::Eval, cfg)?,
        })
    }
}

fn pair_paths(dir: &Path, split: Split, index: usize) -> (PathBuf, PathBuf) {
    let d = dir.join(split.name());
    (d.join(format!("{index}_hr.png")), d.join(format!("{index}_lr.png")))
}

fn manifest_text(cfg: &ExperimentConfig, raw: bool) -> String {
    #[derive(Serialize)]
    struct Section<'a> {
        data: &'a crate::config::DataConfig,
        degrade: &'a crate::degrade::DegradeConfig,
    }
    let mut s = String::new();
    let _ = writeln!(s, "# rectsr corpus manifest");
    let _ = writeln!(s, "# code_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# seed_hash = splitmix64(base ^ (index + 1) * 0x9E3779B97F4A7C15)");
    let _ = writeln!(s, "# image_seed(i) = derive(derive(data.seed, split_id), i); split_id train=0 eval=1");
    let _ = writeln!(s, "# texture seed = derive(image_seed, 0); degradation seed = derive(image_seed, 1)");
    let _ = writeln!(s, "# lr images are stored at 1/scale; loaders upscale with degrade.upscale = {}", cfg.degrade.upscale);
    let _ = writeln!(s, "# raw_f32_sidecar = {raw}");
    let sec = Section {
        data: &cfg.data,
        degrade: &cfg.degrade,
    };
    s.push_str(&toml::to_string(&sec).expect("serializable"));
    s
}

/// Writes `{split}/{i}_hr.png`, `{split}/{i}_lr.png` (LR at its small size)
/// and a manifest. With `raw`, exact `.raw` tensors are written alongside.
pub fn write_corpus(dir: &Path, cfg: &ExperimentConfig, raw: bool) -> Result<usize> {
    let mut written = 0;
    for split in [Split::Train, Split::Eval] {
        std::fs::create_dir_all(dir.join(split.name())).map_err(|e| Error::io(dir.join(split.name()), e))?;
        for i in 0..split.count(cfg) {
            let (hr, small) = synth_one::<f32>(cfg, split, i)?;
            let (hp, lp) = pair_paths(dir, split, i);
            write_png(&hp, &hr)?;
            write_png(&lp, &small)?;
            if raw {
                write_raw(&hp.with_extension("raw"), &hr)?;
                write_raw(&lp.with_extension("raw"), &small)?;
            }
            written += 1;
        }
    }
    write_atomic(&dir.join(MANIFEST), manifest_text(cfg, raw).as_bytes())?;
    Ok(written)
}

/// Reads every `{i}_hr.png` of a split in index order. A missing
/// `{i}_lr.png` is synthesized from the HR image with the configured
/// degradation, so a directory of plain HR PNGs also works.
pub fn load_split<T: Scalar>(dir: &Path, split: Split, cfg: &ExperimentConfig) -> Result<Vec<ImagePair<T>>> {
    let sdir = dir.join(split.name());
    let entries = std::fs::read_dir(&sdir).map_err(|e| Error::io(&sdir, e))?;
    let mut indices = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&sdir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(i) = name.strip_suffix("_hr.png").and_then(|s| s.parse::<usize>().ok()) {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    let scale = cfg.degrade.scale;
    indices
        .into_iter()
        .map(|i| {
            let (hp, lp) = pair_paths(dir, split, i);
            let x_hr: Tensor<T> = read_png(&hp)?;
            let small = if lp.is_file() {
                read_png(&lp)?
            } else {
                degrade(&x_hr, &cfg.degrade, derive_seed(image_seed(cfg.data.seed, split, i), 1))?
            };
            let x_lr = upscale(&small, scale, cfg.degrade.upscale)?;
            if x_lr.shape() != x_hr.shape() {
                return Err(Error::Image {
                    path: lp,
                    msg: format!("LR upscales to {:?}, HR is {:?}", x_lr.shape(), x_hr.shape()),
                });
            }
            Ok(ImagePair { x_hr, x_lr })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::default()
            .with_overrides(&["data.train_images=3", "data.eval_images=2", "data.size=16"])
            .unwrap()
    }

    #[test]
    fn synthesis_is_reproducible_and_split_specific() {
        let cfg = tiny();
        let a = synthesize::<f64>(&cfg, Split::Train).unwrap();
        assert_eq!(a, synthesize::<f64>(&cfg, Split::Train).unwrap());
        let e = synthesize::<f64>(&cfg, Split::Eval).unwrap();
        assert_ne!(a[0], e[0]);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].x_lr.shape(), &[1, 3, 16, 16]);
    }

    #[test]
    fn directory_round_trip() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(write_corpus(dir.path(), &cfg, true).unwrap(), 5);
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.contains("upscale = \"nearest\""));
        assert!(dir.path().join("eval/1_lr.raw").is_file());
        let small = crate::imageio::read_png::<f32>(&dir.path().join("train/0_lr.png")).unwrap();
        assert_eq!(small.shape(), &[1, 3, 8, 8]);

        let loaded = Corpus::<f32>::load(dir.path(), &cfg).unwrap();
        let mem = Corpus::<f32>::synthesize(&cfg).unwrap();
        assert_eq!(loaded.train.len(), 3);
        for (l, m) in loaded.eval.iter().zip(&mem.eval) {
            assert!(l.x_hr.max_abs_diff(&m.x_hr).unwrap() <= 0.5 / 255.0 + 1e-6);
            assert!(l.x_lr.max_abs_diff(&m.x_lr).unwrap() <= 0.5 / 255.0 + 1e-6);
        }
        // regeneration is byte-identical
        let again = tempfile::tempdir().unwrap();
        write_corpus(again.path(), &cfg, false).unwrap();
        for f in ["train/2_hr.png", "eval/0_lr.png"] {
            assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap());
        }
    }

    #[test]
    fn hr_only_directories_get_synthesized_lr() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &cfg, false).unwrap();
        std::fs::remove_file(dir.path().join("train/1_lr.png")).unwrap();
        let split = load_split::<f32>(dir.path(), Split::Train, &cfg).unwrap();
        assert_eq!(split.len(), 3);
        assert_eq!(split[1].x_lr.shape(), split[1].x_hr.shape());
    }

    #[test]
    fn missing_manifest_is_a_prerequisite_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Corpus::<f32>::load(dir.path(), &tiny()), Err(Error::Prerequisite(_))));
    }
}
