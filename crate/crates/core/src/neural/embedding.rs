//! Neumann-series embeddings for inputs with missing entries.
//!
//! Batches are row-major (`n × d`), so a weight matrix `V` acts on a row as
//! `x ↦ x V`. Every recursion below is therefore the transpose of the
//! column-vector form; the learned matrices absorb the difference.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;

pub const DEFAULT_N_BLOCKS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// Updates observed coordinates (`⊙ m̄`); input centred by a learned `μ`.
    Neumiss,
    /// Updates missing coordinates (`⊙ m`); input batch-normalised.
    Neumise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    pub n_blocks: usize,
    /// NeuMISE only: batch statistics over observed cells (`true`) or over
    /// the zero-filled matrix.
    #[serde(default = "yes")]
    pub observed_only_bn: bool,
}

fn yes() -> bool {
    true
}

impl EmbeddingSpec {
    pub fn new(kind: EmbeddingKind, n_blocks: usize) -> Self {
        Self {
            kind,
            n_blocks,
            observed_only_bn: true,
        }
    }
}

/// `x₀ = (x V) ⊙ u + x`, then `n_blocks` times `xᵢ = (xᵢ₋₁ W) ⊙ u + x`.
pub fn neumann_blocks<T: Scalar>(tape: &mut Tape<T>, x: Var, update: Var, v: Var, w: Var, n_blocks: usize) -> Result<Var> {
    let xv = tape.matmul(x, v)?;
    let gated = tape.mul(xv, update)?;
    let mut h = tape.add(gated, x)?;
    for _ in 0..n_blocks {
        let hw = tape.matmul(h, w)?;
        let gated = tape.mul(hw, update)?;
        h = tape.add(gated, x)?;
    }
    Ok(h)
}

/// NeuMiss embedding of a zero-filled batch `x0` with observed indicator
/// `mbar`: centre by `μ`, re-zero the missing cells, run the recursion on
/// observed coordinates.
pub fn neumiss_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x0: Var,
    mbar: Var,
    mu: Var,
    v: Var,
    w: Var,
    n_blocks: usize,
) -> Result<Var> {
    let neg_mu = tape.scale(mu, -T::one());
    let centred = tape.add_row(x0, neg_mu)?;
    let xc = tape.mul(centred, mbar)?;
    neumann_blocks(tape, xc, mbar, v, w, n_blocks)
}

/// NeuMISE embedding of a normalised, zero-filled batch `xn` with missing
/// indicator `m`. Rows with `m = 0` come out equal to `xn`.
pub fn neumise_forward<T: Scalar>(tape: &mut Tape<T>, xn: Var, m: Var, v: Var, w: Var, n_blocks: usize) -> Result<Var> {
    neumann_blocks(tape, xn, m, v, w, n_blocks)
}
