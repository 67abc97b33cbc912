//! Feed-forward predictor with an optional Neumann embedding in front.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::diffcore::{BatchNorm, DenseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::neural::embedding::{neumise_forward, neumiss_forward, EmbeddingKind, EmbeddingSpec};
use crate::scalar::Scalar;

const PREDICT_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub embedding: Option<EmbeddingSpec>,
    /// Hidden layer width.
    pub width: usize,
    /// Number of hidden layers; 0 gives a linear head.
    pub depth: usize,
}

impl Architecture {
    pub fn mlp(input_dim: usize, width: usize, depth: usize) -> Self {
        Self {
            input_dim,
            embedding: None,
            width,
            depth,
        }
    }

    pub fn embedded(d: usize, spec: EmbeddingSpec, width: usize, depth: usize) -> Self {
        Self {
            input_dim: d,
            embedding: Some(spec),
            width,
            depth,
        }
    }

    fn embedding_params(&self) -> usize {
        match self.embedding.map(|e| e.kind) {
            None => 0,
            Some(EmbeddingKind::Neumiss) => 3,
            Some(EmbeddingKind::Neumise) => 4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || (self.depth > 0 && self.width == 0) {
            return Err(Error::Config(format!(
                "architecture needs positive input dimension and width, got {} and {}",
                self.input_dim, self.width
            )));
        }
        Ok(())
    }
}

/// Model inputs: zero-filled values and, for embeddings, the 0/1 mask.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput<T> {
    pub x: DenseMatrix<T>,
    pub mask: Option<DenseMatrix<T>>,
}

impl<T: Scalar> NetInput<T> {
    /// From a matrix with `NaN` at missing cells.
    pub fn from_masked(xtilde: &DenseMatrix<f64>) -> Self {
        let x = xtilde.map(|v| if v.is_nan() { 0.0 } else { v }).cast();
        let mask = xtilde.map(|v| if v.is_nan() { 1.0 } else { 0.0 }).cast();
        Self { x, mask: Some(mask) }
    }

    pub fn dense(x: &DenseMatrix<f64>) -> Self {
        Self { x: x.cast(), mask: None }
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            mask: self.mask.as_ref().map(|m| m.select_rows(rows)),
        }
    }
}

/// Batch-norm statistics handling for one forward pass.
pub enum BnMode<'a, T> {
    Train(&'a mut BatchNorm<T>),
    Eval(&'a BatchNorm<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub arch: Architecture,
    /// Embedding parameters (NeuMiss: μ, V, W; NeuMISE: γ, β, V, W), then
    /// weight and bias per layer.
    pub params: Vec<DenseMatrix<T>>,
    pub bn: Option<BatchNorm<T>>,
    /// Frozen input standardisation for plain MLPs.
    pub scaler: Option<(Vec<T>, Vec<T>)>,
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> DenseMatrix<T> {
    let data = (0..rows * cols).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized")
}

impl<T: Scalar> Network<T> {
    /// Uniform `±1/√fan_in` initialisation. NeuMiss's `μ` starts at the
    /// observed column means of `init_input`, NeuMISE's affine at (1, 0);
    /// plain MLPs take their standardisation from `init_input`.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, init_input: &NetInput<T>, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let d = arch.input_dim;
        if init_input.x.cols() != d {
            return Err(Error::shape("network_init", format!("input has {} columns, architecture {d}", init_input.x.cols())));
        }
        let mut params = Vec::new();
        let mut bn = None;
        let mut scaler = None;
        let b = 1.0 / (d as f64).sqrt();
        match arch.embedding.map(|e| e.kind) {
            Some(EmbeddingKind::Neumiss) => {
                let (mean, _) = observed_moments(init_input);
                params.push(DenseMatrix::row_vector(mean));
                params.push(uniform(d, d, b, rng));
                params.push(uniform(d, d, b, rng));
            }
            Some(EmbeddingKind::Neumise) => {
                params.push(DenseMatrix::filled(1, d, T::one()));
                params.push(DenseMatrix::zeros(1, d));
                params.push(uniform(d, d, b, rng));
                params.push(uniform(d, d, b, rng));
                bn = Some(BatchNorm::new(d));
            }
            None => {
                let (mean, sd) = observed_moments(init_input);
                let sd = sd.into_iter().map(|s| if s > T::lit(1e-12) { s } else { T::one() }).collect();
                scaler = Some((mean, sd));
            }
        }
        let mut fan_in = d;
        for _ in 0..arch.depth {
            let b = 1.0 / (fan_in as f64).sqrt();
            params.push(uniform(fan_in, arch.width, b, rng));
            params.push(uniform(1, arch.width, b, rng));
            fan_in = arch.width;
        }
        let b = 1.0 / (fan_in as f64).sqrt();
        params.push(uniform(fan_in, 1, b, rng));
        params.push(uniform(1, 1, b, rng));
        Ok(Self { arch, params, bn, scaler })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.data().len()).sum()
    }

    /// Applies the frozen scaler (plain MLPs) to an input batch.
    pub fn prepare(&self, input: &NetInput<T>) -> NetInput<T> {
        match &self.scaler {
            None => input.clone(),
            Some((mean, sd)) => {
                let mut x = input.x.clone();
                for i in 0..x.rows() {
                    for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                        *v = (*v - mean[j]) / sd[j];
                    }
                }
                NetInput { x, mask: input.mask.clone() }
            }
        }
    }

    /// Records the forward pass of a prepared batch on `tape` with the
    /// network's parameters bound to `vars`; returns the `n × 1` output.
    pub fn forward(arch: &Architecture, tape: &mut Tape<T>, vars: &[Var], input: &NetInput<T>, bn: Option<BnMode<'_, T>>) -> Result<Var> {
        let d = arch.input_dim;
        if input.x.cols() != d {
            return Err(Error::shape("forward", format!("batch has {} columns, network expects {d}", input.x.cols())));
        }
        let mut h = tape.constant(input.x.clone());
        if let Some(spec) = arch.embedding {
            let m = input
                .mask
                .as_ref()
                .ok_or_else(|| Error::Contract("embedding networks need the missingness mask".into()))?;
            let mbar_m = m.map(|v| T::one() - v);
            match spec.kind {
                EmbeddingKind::Neumiss => {
                    let mbar = tape.constant(mbar_m);
                    h = neumiss_forward(tape, h, mbar, vars[0], vars[1], vars[2], spec.n_blocks)?;
                }
                EmbeddingKind::Neumise => {
                    let weights = spec.observed_only_bn.then_some(&mbar_m);
                    let normed = match bn {
                        Some(BnMode::Train(state)) => state.forward_train(tape, h, vars[0], vars[1], weights)?,
                        Some(BnMode::Eval(state)) => state.forward_eval(tape, h, vars[0], vars[1])?,
                        None => return Err(Error::Contract("NeuMISE forward needs batch-norm state".into())),
                    };
                    let mbar = tape.constant(mbar_m);
                    let xn = tape.mul(normed, mbar)?;
                    let mv = tape.constant(m.clone());
                    h = neumise_forward(tape, xn, mv, vars[2], vars[3], spec.n_blocks)?;
                }
            }
        }
        let mut k = arch.embedding_params();
        for _ in 0..arch.depth {
            let z = tape.matmul(h, vars[k])?;
            let z = tape.add_row(z, vars[k + 1])?;
            h = tape.relu(z);
            k += 2;
        }
        let z = tape.matmul(h, vars[k])?;
        tape.add_row(z, vars[k + 1])
    }

    /// Evaluation-mode predictions for a raw (unprepared) batch.
    pub fn predict(&self, input: &NetInput<T>) -> Result<Vec<T>> {
        let n = input.rows();
        let chunks: Vec<Vec<usize>> = (0..n)
            .collect::<Vec<_>>()
            .chunks(PREDICT_CHUNK)
            .map(|c| c.to_vec())
            .collect();
        let parts: Result<Vec<Vec<T>>> = chunks
            .par_iter()
            .map(|rows| {
                let batch = self.prepare(&input.select_rows(rows));
                let mut tape = Tape::new();
                let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
                let out = Self::forward(&self.arch, &mut tape, &vars, &batch, self.bn.as_ref().map(BnMode::Eval))?;
                Ok(tape.value(out).data().to_vec())
            })
            .collect();
        Ok(parts?.into_iter().flatten().collect())
    }
}

fn observed_moments<T: Scalar>(input: &NetInput<T>) -> (Vec<T>, Vec<T>) {
    let (n, d) = input.x.shape();
    let mut mean = vec![T::zero(); d];
    let mut sd = vec![T::one(); d];
    for j in 0..d {
        let vals: Vec<T> = (0..n)
            .filter(|&i| input.mask.as_ref().is_none_or(|m| m[(i, j)] == T::zero()))
            .map(|i| input.x[(i, j)])
            .collect();
        if vals.is_empty() {
            continue;
        }
        let c = T::from_count(vals.len());
        let m = vals.iter().copied().sum::<T>() / c;
        mean[j] = m;
        if vals.len() > 1 {
            let v = vals.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / (c - T::one());
            sd[j] = v.sqrt();
        }
    }
    (mean, sd)
}

impl Network<f64> {
    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        for (k, p) in self.params.iter().enumerate() {
            c.push(format!("{prefix}param{k}"), p.clone());
        }
        if let Some(bn) = &self.bn {
            c.push_vec(format!("{prefix}bn/mean"), &bn.running_mean);
            c.push_vec(format!("{prefix}bn/var"), &bn.running_var);
        }
        if let Some((m, s)) = &self.scaler {
            c.push_vec(format!("{prefix}scaler/mean"), m);
            c.push_vec(format!("{prefix}scaler/sd"), s);
        }
    }

    pub fn read_from(c: &Container, prefix: &str, arch: Architecture) -> Result<Self> {
        let mut params = Vec::new();
        while c.has(&format!("{prefix}param{}", params.len())) {
            params.push(c.get(&format!("{prefix}param{}", params.len()))?.clone());
        }
        let expected = arch.embedding_params() + 2 * (arch.depth + 1);
        if params.len() != expected {
            return Err(Error::Format(format!("network payload has {} parameter arrays, expected {expected}", params.len())));
        }
        let bn = if c.has(&format!("{prefix}bn/mean")) {
            let mut bn = BatchNorm::new(arch.input_dim);
            bn.running_mean = c.get_vec(&format!("{prefix}bn/mean"))?;
            bn.running_var = c.get_vec(&format!("{prefix}bn/var"))?;
            Some(bn)
        } else {
            None
        };
        let scaler = if c.has(&format!("{prefix}scaler/mean")) {
            Some((c.get_vec(&format!("{prefix}scaler/mean"))?, c.get_vec(&format!("{prefix}scaler/sd"))?))
        } else {
            None
        };
        Ok(Self { arch, params, bn, scaler })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn masked_input(n: usize, d: usize, seed: u64) -> DenseMatrix<f64> {
        let mut rng = rng_from(seed);
        let data = (0..n * d)
            .map(|_| if rng.random::<f64>() < 0.3 { f64::NAN } else { rng.random_range(-2.0..2.0) })
            .collect();
        DenseMatrix::from_vec(n, d, data).unwrap()
    }

    #[test]
    fn parameter_layout() {
        let input = NetInput::<f64>::from_masked(&masked_input(20, 4, 1));
        let spec = EmbeddingSpec::new(EmbeddingKind::Neumiss, 3);
        let net = Network::init(Architecture::embedded(4, spec, 8, 2), &input, &mut rng_from(0)).unwrap();
        let shapes: Vec<_> = net.params.iter().map(|p| p.shape()).collect();
        assert_eq!(shapes, vec![(1, 4), (4, 4), (4, 4), (4, 8), (1, 8), (8, 8), (1, 8), (8, 1), (1, 1)]);
        let out = net.predict(&input).unwrap();
        assert_eq!(out.len(), 20);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embeddings_require_the_mask() {
        let x = DenseMatrix::<f64>::zeros(3, 2);
        let spec = EmbeddingSpec::new(EmbeddingKind::Neumise, 1);
        let arch = Architecture::embedded(2, spec, 4, 1);
        let net = Network::<f64>::init(arch, &NetInput::from_masked(&x), &mut rng_from(0)).unwrap();
        assert!(matches!(net.predict(&NetInput::dense(&x)), Err(Error::Contract(_))));
    }

    #[test]
    fn predictions_do_not_depend_on_chunking() {
        let x = masked_input(9000, 3, 2);
        let input = NetInput::<f64>::from_masked(&x);
        let spec = EmbeddingSpec::new(EmbeddingKind::Neumise, 2);
        let net = Network::init(Architecture::embedded(3, spec, 5, 1), &input, &mut rng_from(3)).unwrap();
        let all = net.predict(&input).unwrap();
        let tail = net.predict(&input.select_rows(&(8990..9000).collect::<Vec<_>>())).unwrap();
        assert_eq!(&all[8990..], &tail[..]);
    }

    #[test]
    fn container_roundtrip() {
        let x = masked_input(30, 3, 4);
        for arch in [
            Architecture::mlp(3, 4, 1),
            Architecture::embedded(3, EmbeddingSpec::new(EmbeddingKind::Neumise, 2), 4, 0),
        ] {
            let input = if arch.embedding.is_some() {
                NetInput::from_masked(&x)
            } else {
                NetInput::dense(&x.map(|v| if v.is_nan() { 0.0 } else { v }))
            };
            let net = Network::init(arch, &input, &mut rng_from(5)).unwrap();
            let mut c = Container::new("t", &()).unwrap();
            net.write_into(&mut c, "net/");
            assert_eq!(Network::read_from(&c, "net/", arch).unwrap(), net);
        }
    }
}
