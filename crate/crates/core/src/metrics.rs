//! Reference-based image metrics and evaluation reports.

use std::fmt::Write as _;

use ndgrad::{conv2d, Scalar, Tensor};
use serde::{Serialize, Serializer};

use crate::degrade::ImagePair;
use crate::sample::{sample_ode_from, VelocityField};
use crate::sched::Scheduler;
use crate::{Error, Result};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-image planes in f64: the luma plane for RGB inputs when `y_channel`
/// is set, otherwise every channel as its own plane.
fn planes<T: Scalar>(x: &Tensor<T>, y_channel: bool) -> Vec<Vec<f64>> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let d = x.data();
    let mut out = Vec::new();
    for i in 0..n {
        let img = &d[i * c * hw..(i + 1) * c * hw];
        if y_channel && c == 3 {
            out.push(
                (0..hw)
                    .map(|p| {
                        LUMA[0] * img[p].as_f64()
                            + LUMA[1] * img[hw + p].as_f64()
                            + LUMA[2] * img[2 * hw + p].as_f64()
                    })
                    .collect(),
            );
        } else {
            for ch in 0..c {
                out.push(img[ch * hw..(ch + 1) * hw].iter().map(|v| v.as_f64()).collect());
            }
        }
    }
    out
}

fn check_pair<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(op, format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.shape().len() != 4 {
        return Err(Error::invalid(op, format!("expected NCHW, got {:?}", a.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`, averaged over
/// the batch. Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, y_channel: bool) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let n = a.shape()[0];
    let (pa, pb) = (planes(a, y_channel), planes(b, y_channel));
    let per_image = pa.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let mut se = 0.0;
        let mut count = 0usize;
        for p in i * per_image..(i + 1) * per_image {
            se += pa[p].iter().zip(&pb[p]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            count += pa[p].len();
        }
        let mse = se / count as f64;
        total += if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() };
    }
    Ok(total / n as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - k.len(), w + 1 - k.len());
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = k.iter().enumerate().map(|(i, kw)| kw * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = k.iter().enumerate().map(|(i, kw)| kw * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> f64 {
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, k);
    let mu_b = filter_valid(b, h, w, k);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, k);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, k);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / mu_a.len() as f64
}

/// Single-scale SSIM (11×11 Gaussian window, σ 1.5) on the luma channel for
/// RGB, per channel otherwise, averaged over valid windows and the batch.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (_, _, h, w) = a.dims4();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = gaussian_window();
    let (pa, pb) = (planes(a, true), planes(b, true));
    let total: f64 = pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, h, w, &k)).sum();
    Ok(total / pa.len() as f64)
}

/// Horizontal and vertical Sobel kernels scaled by 1/8, so a unit ramp
/// responds with slope 1; `2×1×3×3`.
pub fn sobel_kernel<T: Scalar>() -> Tensor<T> {
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let v: Vec<f64> = gx.iter().chain(&gy).map(|w| w / 8.0).collect();
    Tensor::from_f64(&[2, 1, 3, 3], &v).expect("static shape")
}

/// Both Sobel responses of every channel (unpadded), `(N·C)×2×(H−2)×(W−2)`.
fn sobel<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4();
    let planes = x.clone().reshape(&[n * c, 1, h, w])?;
    Ok(conv2d(&planes, &sobel_kernel(), 1, 0)?)
}

/// Mean absolute Sobel response over both orientations.
pub fn sobel_energy<T: Scalar>(x: &Tensor<T>) -> f64 {
    let g = sobel(x).expect("NCHW input of at least 3x3");
    g.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / g.len() as f64
}

/// Structural stand-in for a learned perceptual distance:
/// mean |Sobel(a) − Sobel(b)| over both orientations.
pub fn gradient_l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair("gradient_l1", a, b)?;
    Ok(sobel_energy(&a.sub(b)?))
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "nan" })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub method: String,
    /// Sampler steps; `None` for baselines.
    pub steps: Option<usize>,
    #[serde(serialize_with = "serialize_db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub gradient_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub images: usize,
    /// Resolved configuration of the run being evaluated.
    pub config: serde_json::Value,
}

pub const REPORT_NOTE: &str = "no-reference quality metrics are not computed; \
gradient_l1 (mean |Sobel difference|) stands in for a learned perceptual distance";

impl EvalReport {
    pub fn row(&self, method: &str, steps: Option<usize>) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method && r.steps == steps)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {REPORT_NOTE}");
        let _ = writeln!(s, "# config {} | seeds {:?} | images {}", self.config_digest, self.seeds, self.images);
        let _ = writeln!(s, "{:<22} {:>5} {:>10} {:>8} {:>12}", "method", "steps", "psnr_db", "ssim", "gradient_l1");
        for r in &self.rows {
            let steps = r.steps.map_or("-".to_string(), |n| n.to_string());
            let _ = writeln!(
                s,
                "{:<22} {:>5} {:>10.4} {:>8.5} {:>12.6}",
                r.method, steps, r.psnr_db, r.ssim, r.gradient_l1
            );
        }
        s
    }

    /// One JSON object per row followed by a trailer with the run metadata.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r).expect("serializable row"));
            s.push('\n');
        }
        let meta = serde_json::json!({
            "note": REPORT_NOTE,
            "config_digest": self.config_digest,
            "seeds": self.seeds,
            "images": self.images,
            "config": self.config,
        });
        s.push_str(&meta.to_string());
        s.push('\n');
        s
    }
}

/// Batch-mean metrics of predictions against HR targets.
pub fn score<T: Scalar>(method: &str, steps: Option<usize>, pred: &Tensor<T>, hr: &Tensor<T>) -> Result<EvalRow> {
    Ok(EvalRow {
        method: method.to_string(),
        steps,
        psnr_db: psnr(pred, hr, true)?,
        ssim: ssim(pred, hr)?,
        gradient_l1: gradient_l1(pred, hr)?,
    })
}

/// What to sample from and how.
pub struct EvalSpec<'a> {
    pub method: &'a str,
    /// Builds one inference grid per requested step count.
    pub grid: &'a dyn Fn(usize) -> Result<Scheduler>,
    pub step_counts: &'a [usize],
    /// Images per forward pass.
    pub chunk: usize,
}

/// Samples every LR input at each step count and scores against HR, plus
/// the LR-upsample and oracle-HR baselines. `start` maps an LR batch to the
/// ODE start point and the optional network condition.
pub fn evaluate<T, F, S>(field: &F, pairs: &[ImagePair<T>], spec: &EvalSpec<'_>, start: S) -> Result<Vec<EvalRow>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
    S: Fn(usize, &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)>,
{
    if pairs.is_empty() {
        return Err(Error::invalid("evaluate", "evaluation split is empty"));
    }
    let hr = Tensor::stack_outer(&pairs.iter().map(|p| p.x_hr.clone()).collect::<Vec<_>>())?;
    let lr = Tensor::stack_outer(&pairs.iter().map(|p| p.x_lr.clone()).collect::<Vec<_>>())?;
    let chunk = spec.chunk.max(1);
    let mut rows = Vec::new();
    for &steps in spec.step_counts {
        let grid = (spec.grid)(steps)?;
        let mut preds = Vec::new();
        for (ci, from) in (0..pairs.len()).step_by(chunk).enumerate() {
            let count = chunk.min(pairs.len() - from);
            let lr_chunk = lr.slice_outer(from, count)?;
            let (x1, cond) = start(ci, &lr_chunk)?;
            let traj = sample_ode_from(&x1, cond.as_ref(), field, &grid)?;
            preds.push(traj.output());
        }
        let pred = Tensor::stack_outer(&preds)?;
        rows.push(score(spec.method, Some(steps), &pred, &hr)?);
    }
    rows.push(score("lr-upsample", None, &lr, &hr)?);
    rows.push(score("oracle-hr", None, &hr, &hr)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp() -> Tensor<f64> {
        let (h, w) = (16, 16);
        let mut v = Vec::new();
        for _ in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    v.push(0.8 * (x + y) as f64 / (h + w) as f64);
                }
            }
        }
        Tensor::from_f64(&[1, 3, h, w], &v).unwrap()
    }

    #[test]
    fn psnr_values() {
        let a = ramp();
        assert_eq!(psnr(&a, &a, true).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, true).unwrap() - 20.0).abs() < 1e-9);
        let g = Tensor::<f64>::full(&[1, 1, 4, 4], 0.5);
        let h = Tensor::<f64>::full(&[1, 1, 4, 4], 0.6);
        assert!((psnr(&g, &h, false).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&g, &ramp(), true).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = ramp();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let (c, d) = (0.3, 0.7);
        let ca = Tensor::<f64>::full(&[1, 1, 12, 12], c);
        let cb = Tensor::<f64>::full(&[1, 1, 12, 12], d);
        let expect = (2.0 * c * d + SSIM_C1) * SSIM_C2 / ((c * c + d * d + SSIM_C1) * SSIM_C2);
        assert!((ssim(&ca, &cb).unwrap() - expect).abs() < 1e-12);
        assert!(ssim(&Tensor::<f64>::zeros(&[1, 1, 10, 10]), &Tensor::zeros(&[1, 1, 10, 10])).is_err());
    }

    #[test]
    fn sobel_of_ramp() {
        // horizontal unit ramp: Gx response 1 everywhere, Gy 0
        let v: Vec<f64> = (0..25).map(|i| (i % 5) as f64).collect();
        let x = Tensor::<f64>::from_f64(&[1, 1, 5, 5], &v).unwrap();
        assert!((sobel_energy(&x) - 0.5).abs() < 1e-12);
        assert!(sobel_energy(&Tensor::<f64>::full(&[1, 3, 8, 8], 0.4)) < 1e-15);
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(sa in 0u64..1000, sb in 0u64..1000) {
            let a = Tensor::<f64>::rand_uniform(&[1, 3, 12, 12], 0.0, 1.0, sa);
            let b = Tensor::<f64>::rand_uniform(&[1, 3, 12, 12], 0.0, 1.0, sb);
            let s = ssim(&a, &b).unwrap();
            prop_assert_eq!(s, ssim(&b, &a).unwrap());
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn psnr_monotone_in_error(seed in 0u64..1000, e1 in 0.001f64..0.2, e2 in 0.001f64..0.2) {
            let a = Tensor::<f64>::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, seed);
            let p1 = psnr(&a, &a.map(|v| v + e1), true).unwrap();
            let p2 = psnr(&a, &a.map(|v| v + e2), true).unwrap();
            prop_assert_eq!(e1 < e2, p1 > p2);
        }
    }
}
