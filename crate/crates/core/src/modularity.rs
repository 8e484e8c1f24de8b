//! Affinity graphs and the differentiable modularity objective.
//!
//! For pixel embeddings `x_1..x_n` the affinity is
//! `A[i][j] = max(0, cos(x_i, x_j))`, with degrees `k_i = Σ_j A[i][j]` and
//! total weight `2m = Σ_ij A[i][j]`. The modularity weight of a pair is
//! `w[i][j] = A[i][j] − k_i k_j / 2m`. Given the soft assignment `S`, the
//! pair agreement is `δ(i, j) = max_c S̄[i][c] · S̄[j][c]` with
//! `S̄ = max(0, S)`, and the per-image loss is
//!
//! ```text
//! L = −(1 / 2m) Σ_{i,j} w[i][j] · δ(i, j)
//! ```
//!
//! summed over all ordered pairs, diagonal included unless
//! [`LossOptions::include_diagonal`] is off.

use serde::{Deserialize, Serialize};

use crate::assignment::COSINE_EPS;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    pub weights: Tensor<f64>,
    pub degrees: Vec<f64>,
    pub two_m: f64,
}

impl AffinityGraph {
    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchReduction {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    pub include_diagonal: bool,
    pub batch_reduction: BatchReduction,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            include_diagonal: true,
            batch_reduction: BatchReduction::Mean,
        }
    }
}

/// Fully connected graph over the rows of `pixels` with clamped cosine
/// weights.
pub fn build_affinity(pixels: &Tensor<f64>) -> Result<AffinityGraph> {
    if pixels.shape().len() != 2 || pixels.rows() < 2 {
        return Err(Error::Dimension(format!(
            "affinity graph needs at least two pixel rows, got shape {:?}",
            pixels.shape()
        )));
    }
    let (unit, _) = kernels::l2_normalize_rows(pixels, COSINE_EPS)?;
    let mut weights = kernels::matmul_nt(&unit, &unit)?;
    let n = weights.rows();
    for i in 0..n {
        for j in 0..n {
            let v = if j < i { weights.get(j, i) } else { weights.get(i, j).clamp(0.0, 1.0) };
            weights.set(i, j, v);
        }
    }
    let degrees: Vec<f64> = (0..n).map(|i| weights.row(i).iter().sum()).collect();
    let two_m = degrees.iter().sum();
    Ok(AffinityGraph {
        weights,
        degrees,
        two_m,
    })
}

/// `w[i][j] = A[i][j] − k_i k_j / 2m`.
pub fn modularity_weights(graph: &AffinityGraph) -> Result<Tensor<f64>> {
    if !(graph.two_m > 0.0) {
        return Err(Error::Empty("affinity graph has zero total edge weight".into()));
    }
    let n = graph.len();
    let mut w = graph.weights.clone();
    for i in 0..n {
        let ki = graph.degrees[i];
        for (j, v) in w.row_mut(i).iter_mut().enumerate() {
            *v -= ki * graph.degrees[j] / graph.two_m;
        }
    }
    Ok(w)
}

/// `δ(i, j) = max_c max(0, S[i][c]) · max(0, S[j][c])`.
pub fn pair_agreement(soft: &Tensor<f64>) -> Tensor<f64> {
    let clamped = kernels::relu(soft);
    let n = clamped.rows();
    Tensor::from_fn(n, n, |i, j| {
        clamped
            .row(i)
            .iter()
            .zip(clamped.row(j))
            .map(|(a, b)| a * b)
            .fold(0.0, f64::max)
    })
}

/// Per-image loss without a tape.
pub fn modularity_loss(graph: &AffinityGraph, soft: &Tensor<f64>, opts: &LossOptions) -> Result<f64> {
    if soft.rows() != graph.len() {
        return Err(Error::Dimension(format!(
            "assignment has {} rows, graph has {} vertices",
            soft.rows(),
            graph.len()
        )));
    }
    let w = modularity_weights(graph)?;
    let delta = pair_agreement(soft);
    let n = graph.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j && !opts.include_diagonal {
                continue;
            }
            total += w.get(i, j) * delta.get(i, j);
        }
    }
    Ok(-total / graph.two_m)
}

/// Loss weights ready for the tape: `w` with the diagonal zeroed when the
/// diagonal is excluded.
pub fn loss_weights(graph: &AffinityGraph, opts: &LossOptions) -> Result<Tensor<f64>> {
    let mut w = modularity_weights(graph)?;
    if !opts.include_diagonal {
        for i in 0..graph.len() {
            w.set(i, i, 0.0);
        }
    }
    Ok(w)
}

/// Records the loss on `tape`. `weights` is the (constant) output of
/// [`loss_weights`]; `soft` is the `n×k` cosine assignment.
pub fn modularity_loss_on_tape(tape: &mut Tape<'_, f64>, weights: Var, two_m: f64, soft: Var) -> Result<Var> {
    let n = tape.value(soft).rows();
    if tape.value(weights).shape() != [n, n] {
        return Err(Error::Dimension(format!(
            "weights {:?} for {} pixels",
            tape.value(weights).shape(),
            n
        )));
    }
    let clamped = tape.relu(soft)?;
    let total = tape.weighted_pair_max(clamped, weights)?;
    Ok(tape.scale(total, -1.0 / two_m)?)
}
