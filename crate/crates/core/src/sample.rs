//! Reverse-time Euler integration of a velocity field and the teacher's
//! one-step estimate.

use ndgrad::{Scalar, Tensor};

use crate::sched::Scheduler;
use crate::{Error, Result};

/// Anything that predicts a velocity for a batch of states.
pub trait VelocityField<T: Scalar> {
    /// `t` holds one time per sample. `cond` is the upscaled LR batch for
    /// fields that take it as an extra input.
    fn velocity(&self, x_t: &Tensor<T>, t: &[f64], cond: Option<&Tensor<T>>) -> Result<Tensor<T>>;
}

/// Adapts a closure `(x_t, t) -> v` into a [`VelocityField`].
pub struct FnField<F>(pub F);

impl<T, F> VelocityField<T> for FnField<F>
where
    T: Scalar,
    F: Fn(&Tensor<T>, &[f64]) -> Tensor<T>,
{
    fn velocity(&self, x_t: &Tensor<T>, t: &[f64], _cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        Ok((self.0)(x_t, t))
    }
}

/// States visited from `t = 1` down to `t = 0`.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub states: Vec<(f64, Tensor<T>)>,
}

impl<T: Scalar> Trajectory<T> {
    /// Unclamped state at `t = 0`.
    pub fn final_state(&self) -> &Tensor<T> {
        &self.states.last().expect("trajectory is never empty").1
    }

    /// Final state clamped to the image range.
    pub fn output(&self) -> Tensor<T> {
        self.final_state().clamp(T::zero(), T::one())
    }

    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|(t, _)| *t).collect()
    }
}

/// `x + (t_to − t_from)·v`.
pub fn euler_step<T: Scalar>(x: &Tensor<T>, t_from: f64, t_to: f64, v: &Tensor<T>) -> Result<Tensor<T>> {
    let dt = T::lit(t_to - t_from);
    Ok(x.zip_map(v, "euler_step", |a, b| a + dt * b)?)
}

/// [`euler_step`] with per-sample times along the batch axis.
pub fn euler_step_batch<T: Scalar>(x: &Tensor<T>, t_from: &[f64], t_to: &[f64], v: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    if t_from.len() != n || t_to.len() != n {
        return Err(Error::invalid("euler_step", format!("{} / {} times for batch {n}", t_from.len(), t_to.len())));
    }
    let parts = (0..n)
        .map(|i| euler_step(&x.slice_outer(i, 1)?, t_from[i], t_to[i], &v.slice_outer(i, 1)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack_outer(&parts)?)
}

/// Integrates from `x1` at `t = 1` down the reversed grid to `t = 0`.
pub fn sample_ode_from<T, F>(x1: &Tensor<T>, cond: Option<&Tensor<T>>, field: &F, grid: &Scheduler) -> Result<Trajectory<T>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
{
    let n = x1.shape()[0];
    let mut times: Vec<f64> = grid.grid().iter().rev().copied().collect();
    times.push(0.0);
    let mut x = x1.clone();
    let mut states = Vec::with_capacity(times.len());
    states.push((times[0], x.clone()));
    for w in times.windows(2) {
        let v = field.velocity(&x, &vec![w[0]; n], cond)?;
        if v.shape() != x.shape() {
            return Err(Error::invalid("sample_ode", format!("velocity shape {:?} for state {:?}", v.shape(), x.shape())));
        }
        x = euler_step(&x, w[0], w[1], &v)?;
        states.push((w[1], x.clone()));
    }
    Ok(Trajectory { states })
}

/// Super-resolves starting from the upscaled LR image itself.
pub fn sample_ode<T, F>(x_lr: &Tensor<T>, field: &F, grid: &Scheduler) -> Result<Trajectory<T>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
{
    sample_ode_from(x_lr, None, field, grid)
}

/// One reverse Euler step of the teacher from `t′` to `t`, per sample.
pub fn teacher_step<T, F>(
    x_tprime: &Tensor<T>,
    t: &[f64],
    t_prime: &[f64],
    teacher: &F,
    cond: Option<&Tensor<T>>,
) -> Result<Tensor<T>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
{
    if t.iter().zip(t_prime).any(|(a, b)| a >= b) {
        return Err(Error::invalid("teacher_step", "requires t < t'"));
    }
    let v = teacher.velocity(x_tprime, t_prime, cond)?;
    euler_step_batch(x_tprime, t_prime, t, &v)
}
