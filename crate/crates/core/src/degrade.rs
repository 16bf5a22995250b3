//! Procedural HR textures and a seeded blur → area-downsample → noise chain
//! producing their LR counterparts.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndgrad::{resample2x, Resample, Scalar, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seed::{derive_seed, rng_from};
use crate::{Error, Result};

/// Interpolation used to bring the LR image back to HR size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UpscaleMethod {
    #[default]
    Nearest,
    Bilinear,
}

impl fmt::Display for UpscaleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpscaleMethod::Nearest => "nearest",
            UpscaleMethod::Bilinear => "bilinear",
        })
    }
}

impl FromStr for UpscaleMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(Error::Config(format!("unknown upscale method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    /// 2 or 4.
    pub scale: usize,
    pub blur_sigma: [f64; 2],
    pub noise_sigma: [f64; 2],
    pub upscale: UpscaleMethod,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            blur_sigma: [0.4, 1.6],
            noise_sigma: [0.0, 0.06],
            upscale: UpscaleMethod::Nearest,
            seed: 0,
        }
    }
}

impl DegradeConfig {
    /// Blur and noise disabled; only the area downsample remains.
    pub fn clean(scale: usize) -> Self {
        Self {
            scale,
            blur_sigma: [0.0, 0.0],
            noise_sigma: [0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::Config(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        let [blo, bhi] = self.blur_sigma;
        let [nlo, nhi] = self.noise_sigma;
        if !(0.0 <= blo && blo <= bhi) {
            return Err(Error::Config(format!("bad blur_sigma range {:?}", self.blur_sigma)));
        }
        if !(0.0 <= nlo && nlo <= nhi && nhi <= 0.3) {
            return Err(Error::Config(format!("bad noise_sigma range {:?}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// An HR image and its degraded counterpart, both `1×C×H×W` in `[0, 1]`.
/// `x_lr` is already upscaled to the HR size.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<T> {
    pub x_hr: Tensor<T>,
    pub x_lr: Tensor<T>,
}

impl<T: Scalar> ImagePair<T> {
    pub fn cast<U: Scalar>(&self) -> ImagePair<U> {
        ImagePair {
            x_hr: self.x_hr.cast(),
            x_lr: self.x_lr.cast(),
        }
    }
}

fn sample_range(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn smoothstep(x: f64) -> f64 {
    x * x * (3.0 - 2.0 * x)
}

/// Smoothly interpolated random lattice, one octave.
fn value_noise(rng: &mut impl Rng, size: usize, cell: usize) -> Vec<f64> {
    let cells = size.div_ceil(cell) + 1;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |i: usize, j: usize| lattice[i * cells + j];
            let top = at(iy, ix) + tx * (at(iy, ix + 1) - at(iy, ix));
            let bot = at(iy + 1, ix) + tx * (at(iy + 1, ix + 1) - at(iy + 1, ix));
            out[y * size + x] = top + ty * (bot - top);
        }
    }
    out
}

fn inside_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Procedural HR image: band-limited value noise, oriented sinusoid
/// gratings and a few filled polygons. Shape `1×channels×size×size`,
/// values in `[0, 1]`, a pure function of `seed`.
pub fn make_texture<T: Scalar>(seed: u64, size: usize, channels: usize) -> Result<Tensor<T>> {
    if size < 8 {
        return Err(Error::invalid("make_texture", format!("size must be >= 8, got {size}")));
    }
    if channels == 0 {
        return Err(Error::invalid("make_texture", "channels must be positive"));
    }
    let mut rng = rng_from(seed);
    let plane = size * size;
    let mut img = vec![0.0f64; channels * plane];

    // background: two octaves of value noise around a random base colour
    let coarse = value_noise(&mut rng, size, (size / 4).max(2));
    let fine = value_noise(&mut rng, size, (size / 8).max(2));
    for c in 0..channels {
        let base = rng.random_range(0.2..0.8);
        let (a1, a2) = (rng.random_range(0.1..0.4), rng.random_range(0.0..0.2));
        for i in 0..plane {
            img[c * plane + i] = base + a1 * (coarse[i] - 0.5) + a2 * (fine[i] - 0.5);
        }
    }

    let gratings = rng.random_range(2..=4);
    for _ in 0..gratings {
        let theta = rng.random_range(0.0..PI);
        let freq = rng.random_range(0.08..0.22);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.1..0.25);
        let colour: Vec<f64> = (0..channels).map(|_| rng.random_range(0.3..1.0)).collect();
        let (kx, ky) = (theta.cos() * freq * 2.0 * PI, theta.sin() * freq * 2.0 * PI);
        for y in 0..size {
            for x in 0..size {
                let s = amp * (kx * x as f64 + ky * y as f64 + phase).sin();
                for (c, w) in colour.iter().enumerate() {
                    img[c * plane + y * size + x] += w * s;
                }
            }
        }
    }

    let polygons = rng.random_range(2..=6);
    for _ in 0..polygons {
        let sides = rng.random_range(3..=6);
        let (cx, cy) = (
            rng.random_range(0.0..size as f64),
            rng.random_range(0.0..size as f64),
        );
        let radius = rng.random_range(0.15..0.45) * size as f64;
        let mut angles: Vec<f64> = (0..sides).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        let verts: Vec<(f64, f64)> = angles
            .iter()
            .map(|a| {
                let r = radius * rng.random_range(0.5..1.0);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let colour: Vec<f64> = (0..channels).map(|_| rng.random::<f64>()).collect();
        let alpha = rng.random_range(0.5..1.0);
        for y in 0..size {
            for x in 0..size {
                if inside_polygon(x as f64 + 0.5, y as f64 + 0.5, &verts) {
                    for (c, col) in colour.iter().enumerate() {
                        let v = &mut img[c * plane + y * size + x];
                        *v += alpha * (col - *v);
                    }
                }
            }
        }
    }

    let data = img.into_iter().map(|v| T::lit(v.clamp(0.0, 1.0))).collect();
    Ok(Tensor::new(&[1, channels, size, size], data)?)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur with edge replication. Written as
/// `x + Σ w_i (x_i - x)` so constant regions come through bit-exact.
fn gaussian_blur<T: Scalar>(x: &Tensor<T>, sigma: f64) -> Tensor<T> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let k: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::lit).collect();
    let r = (k.len() / 2) as isize;
    let (n, c, h, w) = x.dims4();
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = x.clone();
    let mut out = x.clone();
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut tmp.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let centre = src[y * w + xx];
                let mut acc = T::zero();
                for (i, &kw) in k.iter().enumerate() {
                    let sx = clampi(xx as isize + i as isize - r, w);
                    acc = acc + kw * (src[y * w + sx] - centre);
                }
                dst[y * w + xx] = centre + acc;
            }
        }
    }
    for p in 0..n * c {
        let src = &tmp.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let centre = src[y * w + xx];
                let mut acc = T::zero();
                for (i, &kw) in k.iter().enumerate() {
                    let sy = clampi(y as isize + i as isize - r, h);
                    acc = acc + kw * (src[sy * w + xx] - centre);
                }
                dst[y * w + xx] = centre + acc;
            }
        }
    }
    out
}

/// Blur (σ drawn from `cfg.blur_sigma`) → repeated 2× area downsample to
/// `1/cfg.scale` → additive Gaussian noise (σ from `cfg.noise_sigma`) →
/// clamp. Deterministic in `(cfg.seed, seed)`. Returns the small LR image.
pub fn degrade<T: Scalar>(x_hr: &Tensor<T>, cfg: &DegradeConfig, seed: u64) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (_, _, h, w) = x_hr.dims4();
    if h % cfg.scale != 0 || w % cfg.scale != 0 {
        return Err(Error::invalid(
            "degrade",
            format!("extents {h}x{w} not divisible by scale {}", cfg.scale),
        ));
    }
    let mut rng = rng_from(derive_seed(cfg.seed, seed));
    let blur = sample_range(&mut rng, cfg.blur_sigma);
    let noise = sample_range(&mut rng, cfg.noise_sigma);

    let mut x = gaussian_blur(x_hr, blur);
    let mut factor = 1;
    while factor < cfg.scale {
        x = resample2x(&x, Resample::Down)?;
        factor *= 2;
    }
    if noise > 0.0 {
        for v in x.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = *v + T::lit(noise * z);
        }
    }
    Ok(x.clamp(T::zero(), T::one()))
}

/// Multiplies spatial extents by `scale`.
pub fn upscale<T: Scalar>(x_small: &Tensor<T>, scale: usize, method: UpscaleMethod) -> Result<Tensor<T>> {
    if scale == 0 {
        return Err(Error::invalid("upscale", "scale must be positive"));
    }
    let (n, c, h, w) = x_small.dims4();
    let (h2, w2) = (h * scale, w * scale);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    let src_all = x_small.data();
    for p in 0..n * c {
        let src = &src_all[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        match method {
            UpscaleMethod::Nearest => {
                for y in 0..h2 {
                    for x in 0..w2 {
                        dst[y * w2 + x] = src[(y / scale) * w + x / scale];
                    }
                }
            }
            UpscaleMethod::Bilinear => {
                // half-pixel centres, edge clamped; `a + f (b - a)` keeps
                // constants exact
                let coord = |o: usize, len: usize| {
                    let s = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
                    let i0 = (s.floor() as usize).min(len - 1);
                    let i1 = (i0 + 1).min(len - 1);
                    (i0, i1, T::lit(s - i0 as f64))
                };
                for y in 0..h2 {
                    let (y0, y1, fy) = coord(y, h);
                    for x in 0..w2 {
                        let (x0, x1, fx) = coord(x, w);
                        let top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
                        let bot = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
                        dst[y * w2 + x] = top + fy * (bot - top);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[n, c, h2, w2], out)?)
}

/// Texture → degrade → upscale, with texture and degradation seeds derived
/// from `seed`. RGB.
pub fn make_pair<T: Scalar>(seed: u64, size: usize, cfg: &DegradeConfig) -> Result<ImagePair<T>> {
    let x_hr = make_texture(derive_seed(seed, 0), size, 3)?;
    let small = degrade(&x_hr, cfg, derive_seed(seed, 1))?;
    let x_lr = upscale(&small, cfg.scale, cfg.upscale)?;
    Ok(ImagePair { x_hr, x_lr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{psnr, sobel_energy};

    #[test]
    fn texture_is_deterministic_and_bounded() {
        let a = make_texture::<f64>(42, 32, 3).unwrap();
        let b = make_texture::<f64>(42, 32, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn different_seeds_differ() {
        for s in 0..100u64 {
            let a = make_texture::<f64>(s, 32, 3).unwrap();
            let b = make_texture::<f64>(s + 1000, 32, 3).unwrap();
            let differing = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
            assert!(differing * 100 >= a.len(), "seed {s}: {differing}");
        }
    }

    #[test]
    fn tiny_texture_rejected() {
        assert!(make_texture::<f64>(0, 7, 3).is_err());
    }

    #[test]
    fn clean_degrade_is_block_mean_and_invertible() {
        let small = Tensor::<f64>::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, 5);
        let blocky = upscale(&small, 2, UpscaleMethod::Nearest).unwrap();
        let lr = degrade(&blocky, &DegradeConfig::clean(2), 9).unwrap();
        assert_eq!(lr, small);
        assert_eq!(upscale(&lr, 2, UpscaleMethod::Nearest).unwrap(), blocky);
    }

    #[test]
    fn noiseless_degrade_depends_only_on_input() {
        let x = make_texture::<f64>(3, 32, 3).unwrap();
        let cfg = DegradeConfig {
            blur_sigma: [1.0, 1.0],
            noise_sigma: [0.0, 0.0],
            ..DegradeConfig::default()
        };
        let a = degrade(&x, &cfg, 1).unwrap();
        let b = degrade(&x, &cfg, 2).unwrap();
        let other = DegradeConfig { seed: 77, ..cfg };
        assert_eq!(a, b);
        assert_eq!(a, degrade(&x, &other, 3).unwrap());
    }

    #[test]
    fn constant_survives_blur() {
        let x = Tensor::<f64>::full(&[1, 3, 16, 16], 0.3);
        for scale in [2, 4] {
            let cfg = DegradeConfig {
                scale,
                blur_sigma: [0.4, 1.6],
                noise_sigma: [0.0, 0.0],
                ..DegradeConfig::default()
            };
            let lr = degrade(&x, &cfg, 11).unwrap();
            assert_eq!(lr.shape(), &[1, 3, 16 / scale, 16 / scale]);
            assert!(lr.data().iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn indivisible_extent_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3, 10, 10]);
        let cfg = DegradeConfig { scale: 4, ..DegradeConfig::default() };
        assert!(degrade(&x, &cfg, 0).is_err());
    }

    #[test]
    fn upscale_contracts() {
        let px = Tensor::<f64>::full(&[1, 1, 1, 1], 0.7);
        assert_eq!(upscale(&px, 2, UpscaleMethod::Nearest).unwrap(), Tensor::full(&[1, 1, 2, 2], 0.7));
        let c = Tensor::<f64>::full(&[1, 3, 4, 4], 0.25);
        for m in [UpscaleMethod::Nearest, UpscaleMethod::Bilinear] {
            assert_eq!(upscale(&c, 4, m).unwrap(), Tensor::full(&[1, 3, 16, 16], 0.25));
        }
        let x = Tensor::<f64>::rand_uniform(&[1, 3, 5, 6], 0.0, 1.0, 1);
        let up = upscale(&x, 2, UpscaleMethod::Nearest).unwrap();
        assert_eq!(resample2x(&up, Resample::Down).unwrap(), x);
    }

    #[test]
    fn pairs_are_reproducible() {
        let cfg = DegradeConfig::default();
        let a = make_pair::<f64>(5, 32, &cfg).unwrap();
        assert_eq!(a, make_pair::<f64>(5, 32, &cfg).unwrap());
        assert_eq!(a.x_hr.shape(), a.x_lr.shape());
        assert!(a.x_lr.all_finite());
    }

    #[test]
    fn clean_pair_is_block_average() {
        let p = make_pair::<f64>(8, 32, &DegradeConfig::clean(2)).unwrap();
        let expect = upscale(&resample2x(&p.x_hr, Resample::Down).unwrap(), 2, UpscaleMethod::Nearest).unwrap();
        assert_eq!(p.x_lr, expect);
    }

    #[test]
    fn noisy_pairs_lose_fidelity() {
        let cfg = DegradeConfig {
            noise_sigma: [0.02, 0.06],
            ..DegradeConfig::default()
        };
        let mut below_40 = 0;
        for s in 0..100 {
            let p = make_pair::<f64>(s, 32, &cfg).unwrap();
            let db = psnr(&p.x_lr, &p.x_hr, true).unwrap();
            assert!(db.is_finite());
            if db < 40.0 {
                below_40 += 1;
            }
        }
        assert!(below_40 >= 95, "{below_40}");
    }

    #[test]
    fn degradation_removes_high_frequency_energy() {
        let cfg = DegradeConfig::default();
        let n = 200;
        let contractive = (0..n)
            .filter(|&s| {
                let p = make_pair::<f64>(s, 32, &cfg).unwrap();
                sobel_energy(&p.x_lr) <= sobel_energy(&p.x_hr)
            })
            .count();
        assert!(contractive * 100 >= 95 * n as usize, "{contractive}/{n}");
    }
}
