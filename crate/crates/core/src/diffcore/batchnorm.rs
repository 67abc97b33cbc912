use serde::{Deserialize, Serialize};

use crate::diffcore::linalg::DenseMatrix;
use crate::diffcore::tape::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of a batch-norm layer. The affine parameters live
/// with the owning model's parameter set and are passed in as tape vars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); dim],
            running_var: vec![T::one(); dim],
            eps: T::lit(BN_EPS),
            momentum: T::lit(BN_MOMENTUM),
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalises with batch statistics and folds them into the running
    /// estimates. `weights` restricts statistics to non-zero cells.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        weights: Option<&DenseMatrix<T>>,
    ) -> Result<Var> {
        let (y, stats) = tape.batch_norm_train(x, gamma, beta, weights, self.eps)?;
        let one = T::one();
        for j in 0..self.dim() {
            let c = stats.count[j];
            if c < T::lit(2.0) {
                continue;
            }
            let unbiased = stats.var[j] * c / (c - one);
            self.running_mean[j] = (one - self.momentum) * self.running_mean[j] + self.momentum * stats.mean[j];
            self.running_var[j] = (one - self.momentum) * self.running_var[j] + self.momentum * unbiased;
        }
        Ok(y)
    }

    pub fn forward_eval(&self, tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        tape.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M = DenseMatrix<f64>;

    fn affine(t: &mut Tape<f64>, d: usize) -> (Var, Var) {
        (t.param(M::filled(1, d, 1.0)), t.param(M::zeros(1, d)))
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let mut bn = BatchNorm::new(1);
        let mut t = Tape::new();
        let x = t.constant(M::column_vector(vec![4.0; 5]));
        let (g, b) = affine(&mut t, 1);
        let y = bn.forward_train(&mut t, x, g, b, None).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_with_unit_statistics_is_identity_up_to_eps() {
        let bn = BatchNorm::new(2);
        let mut t = Tape::new();
        let xm = M::from_rows(&[vec![0.5, -2.0], vec![1.5, 3.0], vec![-7.0, 0.0]]);
        let x = t.constant(xm.clone());
        let (g, b) = affine(&mut t, 2);
        let y = bn.forward_eval(&mut t, x, g, b).unwrap();
        let s = 1.0 / (1.0f64 + BN_EPS).sqrt();
        assert!(t.value(y).sub(&xm.scale(s)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn training_output_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xm = M::from_vec(
            64,
            4,
            (0..256).map(|i| rng.random_range(-3.0..3.0) * (1 + i % 4) as f64 + 5.0).collect(),
        )
        .unwrap();
        let mut bn = BatchNorm::new(4);
        let mut t = Tape::new();
        let x = t.constant(xm);
        let (g, b) = affine(&mut t, 4);
        let y = bn.forward_train(&mut t, x, g, b, None).unwrap();
        let out = t.value(y);
        for j in 0..4 {
            let col = out.column(j);
            let m = col.iter().sum::<f64>() / 64.0;
            let v = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-10);
            // var / (var + eps) with var > 1 for every column here.
            assert!(v < 1.0 && 1.0 - v < BN_EPS, "{v}");
        }
        assert!(bn.running_mean.iter().all(|&m| m > 0.4));
    }

    #[test]
    fn observed_only_statistics_ignore_zero_weight_cells() {
        let mut bn = BatchNorm::new(1);
        let mut t = Tape::new();
        let x = t.constant(M::column_vector(vec![1.0, 3.0, 0.0, 0.0]));
        let w = M::column_vector(vec![1.0, 1.0, 0.0, 0.0]);
        let (g, b) = affine(&mut t, 1);
        let y = bn.forward_train(&mut t, x, g, b, Some(&w)).unwrap();
        let a = 1.0 / (1.0f64 + BN_EPS).sqrt();
        assert!((t.value(y)[(0, 0)] + a).abs() < 1e-12);
        assert!((t.value(y)[(1, 0)] - a).abs() < 1e-12);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
    }
}
