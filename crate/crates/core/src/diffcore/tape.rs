//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records nodes in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep.
//! Leaves are either constants ([`Tape::constant`]) or trainable
//! parameters ([`Tape::param`]); only nodes downstream of a parameter
//! receive adjoints.

use crate::error::{Error, Result};
use crate::diffcore::linalg::DenseMatrix;
use crate::scalar::{normal_cdf, normal_pdf, sigmoid, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    MatMul,
    Add,
    Sub,
    AddRow,
    Mul,
    Scale,
    Sigmoid,
    Relu,
    BatchNorm,
    MseLoss,
    GaussianCdf,
    Sum,
    Slice,
    Concat,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Relu(Var),
    GaussianCdf(Var),
    BatchNorm(Box<BatchNormNode<T>>),
    Mse(Var, Var),
    Sum(Var),
    Slice { x: Var, start: usize, end: usize },
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct BatchNormNode<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: DenseMatrix<T>,
    inv_std: Vec<T>,
    /// Per-cell statistics weights and per-column weight totals; `None` in
    /// evaluation mode where the statistics are constants.
    batch: Option<(Option<DenseMatrix<T>>, Vec<T>)>,
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: DenseMatrix<T>,
    tracked: bool,
}

/// Statistics of one training-mode batch-norm evaluation.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalisation.
    pub var: Vec<T>,
    /// Number of contributing cells per column.
    pub count: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: DenseMatrix<T>, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &DenseMatrix<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        match &self.nodes[v.0].op {
            Op::Input => OpKind::Input,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::GaussianCdf(_) => OpKind::GaussianCdf,
            Op::BatchNorm(_) => OpKind::BatchNorm,
            Op::Mse(..) => OpKind::MseLoss,
            Op::Sum(_) => OpKind::Sum,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat(_) => OpKind::Concat,
        }
    }

    pub fn constant(&mut self, m: DenseMatrix<T>) -> Var {
        self.push(Op::Input, m, false)
    }

    pub fn param(&mut self, m: DenseMatrix<T>) -> Var {
        self.push(Op::Input, m, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::MatMul(a, b), v, t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add(a, b), v, t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Sub(a, b), v, t))
    }

    /// `x + 1·b` for an `n×c` matrix and a `1×c` row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut v = xv.clone();
        let c = v.cols();
        for i in 0..v.rows() {
            for (o, &b) in v.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(c, bv.cols());
        let t = self.tracked(x) || self.tracked(b);
        Ok(self.push(Op::AddRow(x, b), v, t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Mul(a, b), v, t))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let t = self.tracked(a);
        self.push(Op::Scale(a, s), v, t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let t = self.tracked(a);
        self.push(Op::Sigmoid(a), v, t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let t = self.tracked(a);
        self.push(Op::Relu(a), v, t)
    }

    pub fn gaussian_cdf(&mut self, a: Var) -> Var {
        let v = self.value(a).map(normal_cdf);
        let t = self.tracked(a);
        self.push(Op::GaussianCdf(a), v, t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = DenseMatrix::scalar(self.value(a).sum());
        let t = self.tracked(a);
        self.push(Op::Sum(a), v, t)
    }

    /// Mean squared error over all entries; a `1×1` node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, y) = (self.value(pred), self.value(target));
        if p.shape() != y.shape() || p.data().is_empty() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", p.shape(), y.shape()),
            ));
        }
        let n = T::from_count(p.data().len());
        let s: T = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let t = self.tracked(pred) || self.tracked(target);
        Ok(self.push(Op::Mse(pred, target), DenseMatrix::scalar(s / n), t))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} of {} columns", xv.cols()),
            ));
        }
        let cols: Vec<usize> = (start..end).collect();
        let v = xv.select_cols(&cols);
        let t = self.tracked(x);
        Ok(self.push(Op::Slice { x, start, end }, v, t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let mut v = self.value(*first).clone();
        for p in &parts[1..] {
            v = v.hcat(self.value(*p))?;
        }
        let t = parts.iter().any(|p| self.tracked(*p));
        Ok(self.push(Op::Concat(parts.to_vec()), v, t))
    }

    /// Training-mode batch normalisation. Statistics are computed per
    /// column over the batch, restricted to cells with non-zero weight when
    /// `weights` is given (observed-only statistics).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        weights: Option<&DenseMatrix<T>>,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        if n < 2 {
            return Err(Error::Contract(format!(
                "batch norm in training mode needs at least 2 rows, got {n}"
            )));
        }
        self.check_affine(gamma, beta, d)?;
        if let Some(w) = weights {
            if w.shape() != xv.shape() {
                return Err(Error::shape(
                    "batch_norm",
                    format!("weights {:?} vs input {:?}", w.shape(), xv.shape()),
                ));
            }
        }
        let wt = |i: usize, j: usize| weights.map_or(T::one(), |w| w[(i, j)]);
        let mut mean = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        let mut count = vec![T::zero(); d];
        for j in 0..d {
            let mut s = T::zero();
            let mut c = T::zero();
            for i in 0..n {
                let w = wt(i, j);
                s += w * xv[(i, j)];
                c += w;
            }
            count[j] = c;
            if c > T::zero() {
                let m = s / c;
                let mut q = T::zero();
                for i in 0..n {
                    let e = xv[(i, j)] - m;
                    q += wt(i, j) * e * e;
                }
                mean[j] = m;
                var[j] = q / c;
            } else {
                var[j] = T::one();
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = DenseMatrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                xhat[(i, j)] = (xv[(i, j)] - mean[j]) * inv_std[j];
            }
        }
        let out = self.affine(&xhat, gamma, beta);
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let node = BatchNormNode {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch: Some((weights.cloned(), count.clone())),
        };
        let v = self.push(Op::BatchNorm(Box::new(node)), out, t);
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Evaluation-mode batch normalisation with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        self.check_affine(gamma, beta, d)?;
        if mean.len() != d || var.len() != d {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = DenseMatrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                xhat[(i, j)] = (xv[(i, j)] - mean[j]) * inv_std[j];
            }
        }
        let out = self.affine(&xhat, gamma, beta);
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let node = BatchNormNode {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch: None,
        };
        Ok(self.push(Op::BatchNorm(Box::new(node)), out, t))
    }

    fn check_affine(&self, gamma: Var, beta: Var, d: usize) -> Result<()> {
        for v in [gamma, beta] {
            let s = self.value(v).shape();
            if s != (1, d) {
                return Err(Error::shape(
                    "batch_norm",
                    format!("affine parameter {s:?}, expected (1, {d})"),
                ));
            }
        }
        Ok(())
    }

    fn affine(&self, xhat: &DenseMatrix<T>, gamma: Var, beta: Var) -> DenseMatrix<T> {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        out
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 loss, got {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<DenseMatrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(DenseMatrix::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn accumulate(&self, adj: &mut [Option<DenseMatrix<T>>], v: Var, g: DenseMatrix<T>) {
        if !self.tracked(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(a) => a.add_assign_scaled(&g, T::one()),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &DenseMatrix<T>,
        adj: &mut [Option<DenseMatrix<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    let ga = g.matmul_t(self.value(*b))?;
                    self.accumulate(adj, *a, ga);
                }
                if self.tracked(*b) {
                    let gb = self.value(*a).t_matmul(g)?;
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.scale(-T::one()));
            }
            Op::AddRow(x, b) => {
                self.accumulate(adj, *x, g.clone());
                if self.tracked(*b) {
                    let mut gb = DenseMatrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(adj, *a, g.hadamard(self.value(*b))?);
                }
                if self.tracked(*b) {
                    self.accumulate(adj, *b, g.hadamard(self.value(*a))?);
                }
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, g.scale(*s)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = g.zip_map(y, "sigmoid", |g, y| g * y * (T::one() - y))?;
                self.accumulate(adj, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, "relu", |g, x| if x > T::zero() { g } else { T::zero() })?;
                self.accumulate(adj, *a, ga);
            }
            Op::GaussianCdf(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, "gaussian_cdf", |g, x| g * normal_pdf(x))?;
                self.accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(adj, *a, DenseMatrix::filled(r, c, g[(0, 0)]));
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let k = T::lit(2.0) * g[(0, 0)] / T::from_count(pv.data().len());
                let diff = pv.zip_map(tv, "mse", |a, b| (a - b) * k)?;
                if self.tracked(*t) {
                    self.accumulate(adj, *t, diff.scale(-T::one()));
                }
                self.accumulate(adj, *p, diff);
            }
            Op::Slice { x, start, end } => {
                let (r, c) = self.value(*x).shape();
                let mut gx = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    gx.row_mut(i)[*start..*end].copy_from_slice(g.row(i));
                }
                self.accumulate(adj, *x, gx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let cols: Vec<usize> = (off..off + w).collect();
                    self.accumulate(adj, *p, g.select_cols(&cols));
                    off += w;
                }
            }
            Op::BatchNorm(bn) => self.batch_norm_backward(bn, g, adj)?,
        }
        Ok(())
    }

    fn batch_norm_backward(
        &self,
        bn: &BatchNormNode<T>,
        g: &DenseMatrix<T>,
        adj: &mut [Option<DenseMatrix<T>>],
    ) -> Result<()> {
        let (n, d) = g.shape();
        let gamma = self.value(bn.gamma).data().to_vec();
        if self.tracked(bn.gamma) {
            let mut gg = DenseMatrix::zeros(1, d);
            for i in 0..n {
                for j in 0..d {
                    gg[(0, j)] += g[(i, j)] * bn.xhat[(i, j)];
                }
            }
            self.accumulate(adj, bn.gamma, gg);
        }
        if self.tracked(bn.beta) {
            let mut gb = DenseMatrix::zeros(1, d);
            for i in 0..n {
                for j in 0..d {
                    gb[(0, j)] += g[(i, j)];
                }
            }
            self.accumulate(adj, bn.beta, gb);
        }
        if !self.tracked(bn.x) {
            return Ok(());
        }
        let mut gx = DenseMatrix::zeros(n, d);
        match &bn.batch {
            None => {
                for i in 0..n {
                    for j in 0..d {
                        gx[(i, j)] = g[(i, j)] * gamma[j] * bn.inv_std[j];
                    }
                }
            }
            Some((weights, count)) => {
                let wt = |i: usize, j: usize| weights.as_ref().map_or(T::one(), |w| w[(i, j)]);
                for j in 0..d {
                    let inv = bn.inv_std[j];
                    if count[j] <= T::zero() {
                        for i in 0..n {
                            gx[(i, j)] = g[(i, j)] * gamma[j] * inv;
                        }
                        continue;
                    }
                    // Every output depends on the weighted mean and variance;
                    // only weighted cells feed those statistics.
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for i in 0..n {
                        let gh = g[(i, j)] * gamma[j];
                        s1 += gh;
                        s2 += gh * bn.xhat[(i, j)];
                    }
                    let c = count[j];
                    for i in 0..n {
                        let gh = g[(i, j)] * gamma[j];
                        let w = wt(i, j);
                        gx[(i, j)] = inv * (gh - w * (s1 + bn.xhat[(i, j)] * s2) / c);
                    }
                }
            }
        }
        self.accumulate(adj, bn.x, gx);
        Ok(())
    }
}

/// Adjoints from one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    adj: Vec<Option<DenseMatrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`, or zeros shaped like its value when no gradient
    /// reached it.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> DenseMatrix<T> {
        match &self.adj[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                DenseMatrix::zeros(r, c)
            }
        }
    }
}

/// Runs `build` on a fresh tape with `params` bound as trainable leaves and
/// returns the scalar loss with one gradient per parameter.
pub fn forward_backward<T, F>(params: &[DenseMatrix<T>], build: F) -> Result<(T, Vec<DenseMatrix<T>>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss)[(0, 0)];
    Ok((value, vars.iter().map(|&v| grads.wrt(&tape, v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M = DenseMatrix<f64>;

    fn rand_m(r: usize, c: usize, rng: &mut ChaCha8Rng) -> M {
        M::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences, the oracle for every gradient test here.
    fn finite_diff<F>(params: &[M], f: F, h: f64) -> Vec<M>
    where
        F: Fn(&[M]) -> f64,
    {
        let mut out = Vec::new();
        for k in 0..params.len() {
            let mut g = M::zeros(params[k].rows(), params[k].cols());
            for e in 0..params[k].data().len() {
                let mut p = params.to_vec();
                p[k].data_mut()[e] += h;
                let up = f(&p);
                p[k].data_mut()[e] -= 2.0 * h;
                let down = f(&p);
                g.data_mut()[e] = (up - down) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn max_rel_err(a: &[M], b: &[M]) -> f64 {
        let mut worst: f64 = 0.0;
        for (x, y) in a.iter().zip(b) {
            for (&u, &v) in x.data().iter().zip(y.data()) {
                let scale = u.abs().max(v.abs());
                let e = if scale > 1e-3 { (u - v).abs() / scale } else { (u - v).abs() };
                worst = worst.max(e);
            }
        }
        worst
    }

    #[test]
    fn quadratic_gradient() {
        let w = M::row_vector(vec![1.0, 2.0]);
        let (loss, g) = forward_backward(&[w], |t, p| {
            let sq = t.mul(p[0], p[0])?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert_eq!(loss, 5.0);
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let (loss, g) = forward_backward(&[M::scalar(0.0)], |t, p| Ok(t.sigmoid(p[0]))).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(g[0][(0, 0)], 0.25);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let r = forward_backward(&[M::row_vector(vec![1.0, 2.0])], |t, p| Ok(t.relu(p[0])));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_surfaces_at_construction() {
        let mut t = Tape::<f64>::new();
        let a = t.param(M::zeros(2, 3));
        let b = t.param(M::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn mask_multiplication_zeroes_masked_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_m(4, 3, &mut rng);
        let mask = M::from_rows(&[
            vec![1.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ]);
        let mut t = Tape::new();
        let xv = t.param(x);
        let m = t.constant(mask.clone());
        let y = t.mul(xv, m).unwrap();
        let s = t.sigmoid(y);
        let l = t.sum(s);
        let g = t.backward(l).unwrap().wrt(&t, xv);
        for (gv, mv) in g.data().iter().zip(mask.data()) {
            if *mv == 0.0 {
                assert_eq!(*gv, 0.0);
            } else {
                assert!(*gv != 0.0);
            }
        }
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let x = rand_m(8, 4, &mut rng);
        let y = rand_m(8, 1, &mut rng);
        // 4*8 + 8 + 8*1 + 1 = 49 trainable scalars, plus a 1-scalar cdf gain.
        let params = vec![
            rand_m(4, 8, &mut rng),
            rand_m(1, 8, &mut rng),
            rand_m(8, 1, &mut rng),
            rand_m(1, 1, &mut rng),
        ];
        let build = |t: &mut Tape<f64>, p: &[Var], x: &M, y: &M| -> Result<Var> {
            let xv = t.constant(x.clone());
            let yv = t.constant(y.clone());
            let h = t.matmul(xv, p[0])?;
            let h = t.add_row(h, p[1])?;
            let h = t.sigmoid(h);
            let o = t.matmul(h, p[2])?;
            let o = t.add_row(o, p[3])?;
            let o = t.gaussian_cdf(o);
            t.mse(o, yv)
        };
        let (_, g) = forward_backward(&params, |t, p| build(t, p, &x, &y)).unwrap();
        let fd = finite_diff(
            &params,
            |p| {
                let mut t = Tape::new();
                let vars: Vec<Var> = p.iter().map(|m| t.param(m.clone())).collect();
                let l = build(&mut t, &vars, &x, &y).unwrap();
                t.value(l)[(0, 0)]
            },
            1e-5,
        );
        assert!(max_rel_err(&g, &fd) < 1e-4, "{}", max_rel_err(&g, &fd));
    }

    #[test]
    fn slice_concat_and_sub_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![rand_m(3, 4, &mut rng), rand_m(3, 2, &mut rng)];
        let build = |t: &mut Tape<f64>, p: &[Var]| -> Result<Var> {
            let a = t.slice_cols(p[0], 1, 3)?;
            let c = t.concat_cols(&[a, p[1], p[0]])?;
            let c2 = t.mul(c, c)?;
            let s = t.scale(c2, 0.5);
            let d = t.sub(s, c)?;
            let r = t.relu(d);
            Ok(t.sum(r))
        };
        let (_, g) = forward_backward(&params, build).unwrap();
        let fd = finite_diff(
            &params,
            |p| {
                let mut t = Tape::new();
                let v: Vec<Var> = p.iter().map(|m| t.param(m.clone())).collect();
                let l = build(&mut t, &v).unwrap();
                t.value(l)[(0, 0)]
            },
            1e-6,
        );
        assert!(max_rel_err(&g, &fd) < 1e-4);
    }

    #[test]
    fn batch_norm_forward_and_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(M::from_rows(&[vec![-1.0, 3.0], vec![1.0, 3.0]]));
        let g = t.param(M::row_vector(vec![1.0, 1.0]));
        let b = t.param(M::row_vector(vec![0.0, 0.0]));
        let (y, _) = t.batch_norm_train(x, g, b, None, 1e-5).unwrap();
        let a = 1.0 / (1.0f64 + 1e-5).sqrt();
        let out = t.value(y);
        assert!((out[(0, 0)] + a).abs() < 1e-15 && (out[(1, 0)] - a).abs() < 1e-15);
        assert_eq!(out[(0, 1)], 0.0);
        assert_eq!(out[(1, 1)], 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xm = rand_m(6, 3, &mut rng);
        let w = M::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 1.0, 1.0],
        ]);
        let target = rand_m(6, 3, &mut rng);
        let params = vec![xm, rand_m(1, 3, &mut rng), rand_m(1, 3, &mut rng)];
        for weights in [None, Some(&w)] {
            let build = |t: &mut Tape<f64>, p: &[Var]| -> Result<Var> {
                let (y, _) = t.batch_norm_train(p[0], p[1], p[2], weights, 1e-5)?;
                let tv = t.constant(target.clone());
                let s = t.sigmoid(y);
                t.mse(s, tv)
            };
            let (_, g) = forward_backward(&params, build).unwrap();
            let fd = finite_diff(
                &params,
                |p| {
                    let mut t = Tape::new();
                    let v: Vec<Var> = p.iter().map(|m| t.param(m.clone())).collect();
                    let l = build(&mut t, &v).unwrap();
                    t.value(l)[(0, 0)]
                },
                1e-5,
            );
            assert!(max_rel_err(&g, &fd) < 1e-4, "{}", max_rel_err(&g, &fd));
        }
    }

    #[test]
    fn batch_norm_rejects_single_row_batches() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(M::row_vector(vec![1.0, 2.0]));
        let g = t.param(M::row_vector(vec![1.0, 1.0]));
        let b = t.param(M::row_vector(vec![0.0, 0.0]));
        assert!(t.batch_norm_train(x, g, b, None, 1e-5).is_err());
        assert!(t.batch_norm_eval(x, g, b, &[0.0, 0.0], &[1.0, 1.0], 0.0).is_ok());
    }
}
