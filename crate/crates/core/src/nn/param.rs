//! Trainable parameters, Adam, target-network averaging and initialization.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A weight tensor together with its Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S: Scalar> {
    pub tensor: Tensor<S>,
    pub adam_m: Vec<S>,
    pub adam_v: Vec<S>,
    pub step_count: u64,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(tensor: Tensor<S>) -> Self {
        let n = tensor.numel();
        Self {
            tensor,
            adam_m: vec![S::zero(); n],
            adam_v: vec![S::zero(); n],
            step_count: 0,
        }
    }

    pub fn values(&self) -> &[S] {
        self.tensor.values()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn zero_grad(&mut self) {
        self.tensor.zero_grad();
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step using the gradient stored on the parameter.
///
/// The gradient buffer is left in place; callers clear it.
pub fn adam_step<S: Scalar>(param: &mut Parameter<S>, cfg: &AdamConfig) -> Result<()> {
    let Some(grad) = param.tensor.grad() else {
        return Err(Error::contract(format!(
            "adam_step on parameter {:?} without a gradient",
            param.tensor.shape()
        )));
    };
    if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::contract(format!(
            "adam_step gradient entry {bad} is not finite"
        )));
    }
    let grad = grad.to_vec();
    param.step_count += 1;
    let t = param.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (S::from_f64(cfg.beta1), S::from_f64(cfg.beta2));
    let (ob1, ob2) = (S::one() - b1, S::one() - b2);
    let step = S::from_f64(cfg.lr / bc1);
    let inv_bc2 = S::from_f64(1.0 / bc2);
    let eps = S::from_f64(cfg.eps);
    let Parameter {
        tensor,
        adam_m,
        adam_v,
        ..
    } = param;
    for (((w, m), v), g) in tensor
        .values_mut()
        .iter_mut()
        .zip(adam_m.iter_mut())
        .zip(adam_v.iter_mut())
        .zip(grad)
    {
        *m = b1 * *m + ob1 * g;
        *v = b2 * *v + ob2 * g * g;
        *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
    }
    Ok(())
}

/// `target ← (1 − τ)·target + τ·online`, element-wise.
pub fn polyak_update<S: Scalar>(target: &mut Tensor<S>, online: &Tensor<S>, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::contract(format!("polyak rate {tau} outside [0, 1]")));
    }
    if target.shape() != online.shape() {
        return Err(Error::contract(format!(
            "polyak shape mismatch: target {:?}, online {:?}",
            target.shape(),
            online.shape()
        )));
    }
    if tau == 1.0 {
        target.values_mut().copy_from_slice(online.values());
        return Ok(());
    }
    if tau == 0.0 {
        return Ok(());
    }
    let t = S::from_f64(tau);
    let keep = S::from_f64(1.0 - tau);
    target
        .values_mut()
        .iter_mut()
        .zip(online.values())
        .for_each(|(a, &b)| *a = keep * *a + t * b);
    Ok(())
}

/// Orthogonal matrix of shape `[rows, cols]` scaled by `gain`.
///
/// Rows are orthonormal when `rows <= cols`, columns otherwise.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (count, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        // Modified Gram-Schmidt, applied twice for numerical orthogonality.
        for _ in 0..2 {
            for u in &basis {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for (i, u) in basis.iter().enumerate() {
        for (j, &x) in u.iter().enumerate() {
            if rows <= cols {
                out[i * cols + j] = gain * x;
            } else {
                out[j * cols + i] = gain * x;
            }
        }
    }
    out
}
