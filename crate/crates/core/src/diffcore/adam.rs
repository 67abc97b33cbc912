use serde::{Deserialize, Serialize};

use crate::diffcore::linalg::DenseMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    first: Vec<DenseMatrix<T>>,
    second: Vec<DenseMatrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[DenseMatrix<T>], lr: T, weight_decay: T) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            weight_decay,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Gradients are checked before any
    /// parameter is touched, so a divergence error leaves `params` intact.
    pub fn step(&mut self, params: &mut [DenseMatrix<T>], grads: &[DenseMatrix<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} accumulators",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[k].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {k}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Divergence {
                    epoch: 0,
                    detail: format!("non-finite gradient for parameter {k}"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (one - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                pd[i] = pd[i] - self.lr * (mhat / (vhat.sqrt() + self.eps)) - self.lr * self.weight_decay * pd[i];
            }
        }
        Ok(())
    }
}
