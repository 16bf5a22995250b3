//! Time-conditioned U-shaped velocity network and the patch discriminator.

use std::collections::BTreeMap;

use ndgrad::{Graph, Resample, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sample::VelocityField;
use crate::seed::rng_from;
use crate::{Error, Result};

/// Frequencies span `1 … 1/MAX_PERIOD` geometrically; times are scaled by
/// `TIME_SCALE` first so neighbouring grid points separate.
const MAX_PERIOD: f64 = 10_000.0;
const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub base_channels: usize,
    /// Resolution levels; each below the first halves H and W.
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Concatenate the upscaled LR image to the input.
    pub condition_lr: bool,
    pub image_channels: usize,
    pub disc_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 2,
            time_embed_dim: 64,
            condition_lr: false,
            image_channels: 3,
            disc_channels: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.base_channels, self.depth, self.time_embed_dim, self.image_channels, self.disc_channels];
        if positive.contains(&0) {
            return Err(Error::Config(format!("network sizes must be positive: {self:?}")));
        }
        if self.depth > 3 {
            return Err(Error::Config(format!("depth {} exceeds 3", self.depth)));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_embed_dim {} must be even", self.time_embed_dim)));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        if self.condition_lr {
            2 * self.image_channels
        } else {
            self.image_channels
        }
    }
}

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// True when both sets hold the same names with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Records every tensor on `g`, as trainable parameters or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                    (k.clone(), var)
                })
                .collect(),
        )
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound(iter.into_iter().collect())
    }
}

/// Sinusoidal features of each time: `[sin(ω_k·s·t)…, cos(ω_k·s·t)…]`,
/// shape `len(t)×dim`.
pub fn time_embed<T: Scalar>(t: &[f64], dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid("time_embed", format!("dim must be even and positive, got {dim}")));
    }
    if t.is_empty() {
        return Err(Error::invalid("time_embed", "no times given"));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tt in t {
        let arg = |k: usize| TIME_SCALE * tt * (-(MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
        data.extend((0..half).map(|k| T::lit(arg(k).sin())));
        data.extend((0..half).map(|k| T::lit(arg(k).cos())));
    }
    Ok(Tensor::new(&[t.len(), dim], data)?)
}

/// He-uniform weights and zero biases, drawn in `shapes` order.
fn init_params<T: Scalar>(seed: u64, shapes: Vec<(String, Vec<usize>, usize)>) -> ParamSet<T> {
    let mut rng = rng_from(seed);
    let mut set = ParamSet::new();
    for (name, shape, fan_in) in shapes {
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".b") || fan_in == 0 {
            Tensor::zeros(&shape)
        } else {
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
            Tensor::new(&shape, data).expect("consistent shape")
        };
        set.insert(name, t);
    }
    set
}

fn conv_shapes(name: &str, out_c: usize, in_c: usize, k: usize) -> [(String, Vec<usize>, usize); 2] {
    [
        (format!("{name}.w"), vec![out_c, in_c, k, k], in_c * k * k),
        (format!("{name}.b"), vec![out_c], 0),
    ]
}

fn linear_shapes(name: &str, in_d: usize, out_d: usize) -> [(String, Vec<usize>, usize); 2] {
    [
        (format!("{name}.w"), vec![in_d, out_d], in_d),
        (format!("{name}.b"), vec![out_d], 0),
    ]
}

fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = g.conv2d(x, p.var(&format!("{name}.w"))?, stride, pad)?;
    Ok(g.channel_bias(y, p.var(&format!("{name}.b"))?)?)
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.linear(x, p.var(&format!("{name}.w"))?)?;
    Ok(g.row_bias(y, p.var(&format!("{name}.b"))?)?)
}

/// Encoder-decoder velocity network with one time projection per level.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub cfg: NetConfig,
}

impl UNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let c = self.cfg.base_channels;
        let d = self.cfg.time_embed_dim;
        let mut s = Vec::new();
        s.extend(linear_shapes("temb", d, d));
        for l in 0..self.cfg.depth {
            let in_c = if l == 0 { self.cfg.input_channels() } else { c };
            s.extend(conv_shapes(&format!("enc{l}.conv_a"), c, in_c, 3));
            s.extend(linear_shapes(&format!("enc{l}.temb"), d, c));
            s.extend(conv_shapes(&format!("enc{l}.conv_b"), c, c, 3));
        }
        for l in 0..self.cfg.depth - 1 {
            s.extend(conv_shapes(&format!("dec{l}.conv"), c, c, 3));
        }
        s.extend(conv_shapes("out", self.cfg.image_channels, c, 3));
        s
    }

    /// Seeded initialization; the output layer starts at zero so the
    /// initial velocity is zero everywhere.
    pub fn init<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let mut p = init_params(seed, self.shapes());
        let w = p.get_mut("out.w").expect("output layer");
        *w = Tensor::zeros(w.shape());
        p
    }

    pub fn check_input<T: Scalar>(&self, x_t: &[usize], cond: Option<&[usize]>) -> Result<()> {
        if x_t.len() != 4 || x_t[1] != self.cfg.image_channels {
            return Err(Error::invalid("velocity", format!("expected N×{}×H×W, got {x_t:?}", self.cfg.image_channels)));
        }
        let div = 1 << (self.cfg.depth - 1);
        if !x_t[2].is_multiple_of(div) || !x_t[3].is_multiple_of(div) {
            return Err(Error::invalid("velocity", format!("H, W must be divisible by {div}, got {x_t:?}")));
        }
        match (self.cfg.condition_lr, cond) {
            (true, None) => Err(Error::invalid("velocity", "network expects the LR condition")),
            (false, Some(_)) => Err(Error::invalid("velocity", "network takes no LR condition")),
            (true, Some(c)) if c != x_t => Err(Error::invalid("velocity", format!("condition {c:?} vs input {x_t:?}"))),
            _ => Ok(()),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x_t: Var, t: &[f64], cond: Option<Var>) -> Result<Var> {
        self.check_input::<T>(g.shape(x_t), cond.map(|c| g.shape(c)))?;
        if t.len() != g.shape(x_t)[0] {
            return Err(Error::invalid("velocity", format!("{} times for batch {}", t.len(), g.shape(x_t)[0])));
        }
        let emb = g.constant(time_embed(t, self.cfg.time_embed_dim)?);
        let emb = linear(g, p, "temb", emb)?;
        let emb = g.silu(emb);

        let mut h = match cond {
            Some(c) => g.concat_channels(x_t, c)?,
            None => x_t,
        };
        let mut skips = Vec::new();
        for l in 0..self.cfg.depth {
            if l > 0 {
                h = g.resample2x(h, Resample::Down)?;
            }
            h = conv(g, p, &format!("enc{l}.conv_a"), h, 1, 1)?;
            h = g.silu(h);
            let proj = linear(g, p, &format!("enc{l}.temb"), emb)?;
            h = g.add_per_channel(h, proj)?;
            h = conv(g, p, &format!("enc{l}.conv_b"), h, 1, 1)?;
            h = g.silu(h);
            skips.push(h);
        }
        for l in (0..self.cfg.depth - 1).rev() {
            h = g.resample2x(h, Resample::Up)?;
            h = g.add(h, skips[l])?;
            h = conv(g, p, &format!("dec{l}.conv"), h, 1, 1)?;
            h = g.silu(h);
        }
        conv(g, p, "out", h, 1, 1)
    }
}

/// A network paired with concrete weights, usable as a [`VelocityField`].
pub struct Model<'a, T> {
    pub net: &'a UNet,
    pub params: &'a ParamSet<T>,
}

impl<T: Scalar> VelocityField<T> for Model<'_, T> {
    fn velocity(&self, x_t: &Tensor<T>, t: &[f64], cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let c = cond.map(|c| g.constant(c.clone()));
        let v = self.net.forward(&mut g, &p, x, t, c)?;
        Ok(g.value(v).clone())
    }
}

/// Three stride-2 convolutions with time injection after the first, then a
/// 1×1 score head: one real score per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub channels: usize,
    pub image_channels: usize,
    pub time_embed_dim: usize,
}

impl Discriminator {
    pub fn new(cfg: &NetConfig) -> Self {
        Self {
            channels: cfg.disc_channels,
            image_channels: cfg.image_channels,
            time_embed_dim: cfg.time_embed_dim,
        }
    }

    fn widths(&self) -> [usize; 4] {
        let c = self.channels;
        [self.image_channels, c, 2 * c, 2 * c]
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let w = self.widths();
        let mut s = Vec::new();
        for i in 0..3 {
            s.extend(conv_shapes(&format!("conv{i}"), w[i + 1], w[i], 3));
        }
        s.extend(linear_shapes("temb", self.time_embed_dim, w[1]));
        s.extend(conv_shapes("head", 1, w[3], 1));
        init_params(seed, s)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, t: &[f64]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.image_channels || !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) || t.len() != s[0] {
            return Err(Error::invalid("discriminator", format!("bad input {s:?} with {} times", t.len())));
        }
        let emb = g.constant(time_embed(t, self.time_embed_dim)?);
        let proj = linear(g, p, "temb", emb)?;
        let mut h = x;
        for i in 0..3 {
            h = conv(g, p, &format!("conv{i}"), h, 2, 1)?;
            if i == 0 {
                h = g.add_per_channel(h, proj)?;
            }
            h = g.silu(h);
        }
        conv(g, p, "head", h, 1, 0)
    }

    pub fn scores<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let s = self.forward(&mut g, &p, xv, t)?;
        Ok(g.value(s).clone())
    }
}
