use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Result, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; all of them if the tensor
    /// is smaller.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_param: 16,
            seed: 0,
        }
    }
}

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh graph and one `Var` per entry of `params`
/// and must return a scalar node. Returns the maximum over sampled
/// coordinates of `|analytic - numeric| / max(|analytic| + |numeric|, 1e-6)`.
/// The floor keeps exactly-zero gradients from scoring finite-difference
/// rounding noise as a full relative miss.
pub fn grad_check<T, F>(params: &[Tensor<T>], cfg: &GradCheckConfig, loss_fn: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    drop(g);

    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let l = loss_fn(&mut g, &vs)?;
        Ok(g.value(l).item().as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(&vars[pi]);
        let count = cfg.coords_per_param.min(p.len());
        for idx in sample(&mut rng, p.len(), count) {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + T::lit(cfg.eps);
            let up = eval(&work)?;
            work[pi].data_mut()[idx] = orig - T::lit(cfg.eps);
            let down = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = analytic.map_or(0.0, |t| t.data()[idx].as_f64());
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Resample;

    fn cfg() -> GradCheckConfig {
        GradCheckConfig {
            eps: 1e-5,
            coords_per_param: 32,
            seed: 11,
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::rand_uniform(&[3, 5], -1.0, 1.0, 2);
        let err = grad_check(&[x], &cfg(), |g, v| {
            let s = g.square(v[0]);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn silu_chain() {
        let x = Tensor::<f64>::rand_uniform(&[4, 4], -2.0, 2.0, 3);
        let err = grad_check(&[x], &cfg(), |g, v| {
            let a = g.silu(v[0]);
            let b = g.scale(a, 1.7);
            let c = g.silu(b);
            let d = g.mul(c, a)?;
            Ok(g.mean(d))
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn no_parameters_constant_loss() {
        let err = grad_check::<f64, _>(&[], &cfg(), |g, _| Ok(g.constant(Tensor::scalar(1.5)))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn two_layer_conv_net() {
        let x = Tensor::<f64>::rand_uniform(&[2, 3, 8, 8], -1.0, 1.0, 4);
        let w1 = Tensor::<f64>::rand_uniform(&[4, 3, 3, 3], -0.5, 0.5, 5);
        let b1 = Tensor::<f64>::rand_uniform(&[4], -0.5, 0.5, 6);
        let w2 = Tensor::<f64>::rand_uniform(&[2, 4, 3, 3], -0.5, 0.5, 7);
        let err = grad_check(&[x.clone(), w1, b1, w2], &cfg(), |g, v| {
            let h = g.conv2d(v[0], v[1], 1, 1)?;
            let h = g.channel_bias(h, v[2])?;
            let h = g.silu(h);
            let h = g.conv2d(h, v[3], 2, 1)?;
            let sq = g.square(h);
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn structural_ops() {
        let x = Tensor::<f64>::rand_uniform(&[2, 2, 4, 4], -1.0, 1.0, 8);
        let y = Tensor::<f64>::rand_uniform(&[2, 1, 4, 4], -1.0, 1.0, 9);
        let e = Tensor::<f64>::rand_uniform(&[2, 5], -1.0, 1.0, 10);
        let w = Tensor::<f64>::rand_uniform(&[5, 3], -1.0, 1.0, 11);
        let b = Tensor::<f64>::rand_uniform(&[3], -1.0, 1.0, 12);
        let err = grad_check(&[x, y, e, w, b], &cfg(), |g, v| {
            let cat = g.concat_channels(v[0], v[1])?;
            let emb = g.linear(v[2], v[3])?;
            let emb = g.row_bias(emb, v[4])?;
            let h = g.add_per_channel(cat, emb)?;
            let d = g.resample2x(h, Resample::Down)?;
            let u = g.resample2x(d, Resample::Up)?;
            let u = g.mul(u, h)?;
            let r = g.reshape(u, &[6, 16])?;
            let top = g.slice_outer(r, 1, 3)?;
            let bot = g.slice_outer(r, 4, 2)?;
            let r2 = g.stack_outer(&[bot, top, r])?;
            let rl = g.relu(r2);
            let rl = g.sum(rl);
            let a = g.abs(r);
            let s = g.sub(a, r)?;
            let q = g.square(s);
            let t = g.add(q, r)?;
            let t = g.sum(t);
            g.add(t, rl)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn linearity_of_backward() {
        let x = Tensor::<f64>::rand_uniform(&[2, 1, 4, 4], -1.0, 1.0, 1);
        let w = Tensor::<f64>::rand_uniform(&[3, 1, 3, 3], -1.0, 1.0, 2);
        let build = |g: &mut Graph<f64>, w: Var, alpha: f64, beta: f64| -> Result<Var> {
            let xv = g.constant(x.clone());
            let h = g.conv2d(xv, w, 1, 1)?;
            let l1 = g.square(h);
            let l1 = g.mean(l1);
            let l2 = g.silu(h);
            let l2 = g.sum(l2);
            let a = g.scale(l1, alpha);
            let b = g.scale(l2, beta);
            g.add(a, b)
        };
        let grad = |alpha, beta| {
            let mut g = Graph::new();
            let wv = g.param(w.clone());
            let l = build(&mut g, wv, alpha, beta).unwrap();
            g.backward(l).unwrap().remove(&wv).unwrap()
        };
        let (alpha, beta) = (0.7, -1.3);
        let combined = grad(alpha, beta);
        let mut expected = grad(1.0, 0.0).scale(alpha);
        expected.axpy(beta, &grad(0.0, 1.0)).unwrap();
        assert!(combined.max_abs_diff(&expected).unwrap() <= 1e-10);
    }
}
