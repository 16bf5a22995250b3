//! Straight-path interpolation between HR and the degraded endpoint, the
//! origin (consistency) map, and every training loss.
//!
//! Time runs from 0 (HR) to 1 (the start endpoint `x1`). Loss builders
//! record onto a caller-owned [`Graph`] so gradients reach whatever
//! parameters produced their inputs.

use std::fmt;
use std::str::FromStr;

use ndgrad::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::metrics::sobel_kernel;
use crate::{Error, Result};

/// Which distribution the path starts from at `t = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    /// `x1 = x_lr`.
    #[default]
    SrFlow,
    /// `x1 = ε`, conditioned on `x_lr`.
    NoiseToHr,
    /// `x1 = x_lr + κ·ε`, conditioned on `x_lr`.
    NoisedLrToHr,
}

impl FlowKind {
    pub const ALL: [FlowKind; 3] = [FlowKind::SrFlow, FlowKind::NoiseToHr, FlowKind::NoisedLrToHr];

    pub fn name(self) -> &'static str {
        match self {
            FlowKind::SrFlow => "sr_flow",
            FlowKind::NoiseToHr => "noise_to_hr",
            FlowKind::NoisedLrToHr => "noised_lr_to_hr",
        }
    }
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FlowKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FlowKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown flow variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowVariant {
    pub kind: FlowKind,
    /// Noise level added to `x_lr`; read only by `NoisedLrToHr`.
    pub kappa: f64,
}

impl Default for FlowVariant {
    fn default() -> Self {
        Self {
            kind: FlowKind::SrFlow,
            kappa: 0.2,
        }
    }
}

impl FlowVariant {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        Ok(())
    }

    /// Whether the network must see `x_lr` as an extra input.
    pub fn conditions_on_lr(&self) -> bool {
        self.kind != FlowKind::SrFlow
    }

    /// The `t = 1` endpoint for a batch of upscaled LR images.
    pub fn endpoint<T: Scalar>(&self, x_lr: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
        let k = T::lit(self.kappa);
        let data = x_lr
            .data()
            .iter()
            .map(|&v| {
                let mut e = || T::lit(rng.sample::<f64, _>(StandardNormal));
                match self.kind {
                    FlowKind::SrFlow => v,
                    FlowKind::NoiseToHr => e(),
                    FlowKind::NoisedLrToHr => v + k * e(),
                }
            })
            .collect();
        Tensor::new(x_lr.shape(), data).expect("same shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the gradient-L1 term inside the flow loss.
    pub lambda_p: f64,
    pub lambda_cd: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 2.0,
            lambda_cd: 0.1,
            lambda_adv: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_p, self.lambda_cd, self.lambda_adv];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Distance used between the student's origin prediction and HR in the
/// HR-regularized consistency loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HrDistance {
    /// MSE + λp · gradient L1, the same form as the flow loss.
    #[default]
    Perceptual,
    Mse,
}

fn check_t(op: &'static str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(op, format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(op, format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(1 − t)·x_hr + t·x1`; exact at both endpoints.
pub fn interp<T: Scalar>(x_hr: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_t("interp", t)?;
    same_shape("interp", x_hr, x1)?;
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    Ok(x_hr.zip_map(x1, "interp", |h, e| a * h + b * e)?)
}

/// [`interp`] with one time per sample along the batch axis.
pub fn interp_batch<T: Scalar>(x_hr: &Tensor<T>, x1: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
    same_shape("interp", x_hr, x1)?;
    let parts = per_sample(x_hr, t, "interp")?
        .map(|(i, tt)| interp(&x_hr.slice_outer(i, 1)?, &x1.slice_outer(i, 1)?, tt))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack_outer(&parts)?)
}

fn per_sample<'a, T: Scalar>(
    x: &Tensor<T>,
    t: &'a [f64],
    op: &'static str,
) -> Result<impl Iterator<Item = (usize, f64)> + 'a> {
    if x.shape().first() != Some(&t.len()) {
        return Err(Error::invalid(op, format!("{} times for batch shape {:?}", t.len(), x.shape())));
    }
    Ok(t.iter().copied().enumerate())
}

/// Straight-path derivative `x1 − x_hr`.
pub fn velocity_target<T: Scalar>(x_hr: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x1.sub(x_hr)?)
}

/// Origin prediction `x_t − t·v`.
pub fn consistency_fn<T: Scalar>(x_t: &Tensor<T>, t: f64, v: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("consistency_fn", x_t, v)?;
    let tt = T::lit(t);
    Ok(x_t.zip_map(v, "consistency_fn", |x, vv| x - tt * vv)?)
}

/// Tensor of `x`'s shape holding `t[i]` throughout sample `i`.
pub fn time_map<T: Scalar>(shape: &[usize], t: &[f64]) -> Result<Tensor<T>> {
    if shape.first() != Some(&t.len()) {
        return Err(Error::invalid("time_map", format!("{} times for batch shape {shape:?}", t.len())));
    }
    let inner: usize = shape[1..].iter().product();
    let data = t.iter().flat_map(|&v| std::iter::repeat_n(T::lit(v), inner)).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Graph form of [`consistency_fn`] with per-sample times.
pub fn consistency_node<T: Scalar>(g: &mut Graph<T>, x_t: Var, t: &[f64], v: Var) -> Result<Var> {
    let tm = g.constant(time_map(g.shape(x_t), t)?);
    let tv = g.mul(tm, v)?;
    Ok(g.sub(x_t, tv)?)
}

pub fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Mean |Sobel(a) − Sobel(b)| over both orientations and all channels,
/// unpadded.
pub fn gradient_l1<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let s = g.shape(d).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("gradient_l1", format!("expected NCHW, got {s:?}")));
    }
    let planes = g.reshape(d, &[s[0] * s[1], 1, s[2], s[3]])?;
    let k = g.constant(sobel_kernel());
    let e = g.conv2d(planes, k, 1, 0)?;
    let a = g.abs(e);
    Ok(g.mean(a))
}

/// MSE plus `lambda_p` times the gradient-L1 term.
pub fn flow_loss<T: Scalar>(g: &mut Graph<T>, x_hat: Var, x_hr: Var, lambda_p: f64) -> Result<Var> {
    let m = mse(g, x_hat, x_hr)?;
    if lambda_p == 0.0 {
        return Ok(m);
    }
    let p = gradient_l1(g, x_hat, x_hr)?;
    let p = g.scale(p, T::lit(lambda_p));
    Ok(g.add(m, p)?)
}

/// MSE against a target that never receives gradient.
pub fn cd_loss<T: Scalar>(g: &mut Graph<T>, student: Var, target: Var) -> Result<Var> {
    let target = g.detach(target);
    mse(g, student, target)
}

/// Parts of the HR-regularized consistency loss.
#[derive(Clone, Copy, Debug)]
pub struct HrcdTerms {
    pub cd: Var,
    pub hr: Var,
    pub total: Var,
}

/// `cd(student(t′), target(t)) + d(student(t), x_hr)`.
pub fn hrcd_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_at_tprime: Var,
    target_at_t: Var,
    student_at_t: Var,
    x_hr: Var,
    distance: HrDistance,
    lambda_p: f64,
) -> Result<HrcdTerms> {
    let cd = cd_loss(g, student_at_tprime, target_at_t)?;
    let hr = match distance {
        HrDistance::Perceptual => flow_loss(g, student_at_t, x_hr, lambda_p)?,
        HrDistance::Mse => mse(g, student_at_t, x_hr)?,
    };
    let total = g.add(cd, hr)?;
    Ok(HrcdTerms { cd, hr, total })
}

/// Hinge objectives: `(discriminator loss, generator loss)`.
pub fn hinge_losses<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> (Var, Var) {
    let neg_real = g.scale(d_real, -T::one());
    let r = g.add_scalar(neg_real, T::one());
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(d_fake, T::one());
    let f = g.relu(f);
    let f = g.mean(f);
    let disc = g.add(r, f).expect("scalars");
    let gen = g.mean(d_fake);
    let gen = g.scale(gen, -T::one());
    (disc, gen)
}

/// `flow + λcd·hrcd + λadv·adv`; absent terms contribute nothing.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    flow: Var,
    hrcd: Option<Var>,
    adv: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = flow;
    for (term, weight) in [(hrcd, w.lambda_cd), (adv, w.lambda_adv)] {
        if let Some(v) = term {
            let s = g.scale(v, T::lit(weight));
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}
