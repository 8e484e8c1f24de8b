//! Pixel-to-concept assignment.
//!
//! Soft assignment is the cosine similarity between every pixel embedding
//! and every concept. Hard assignment is the per-pixel argmax (lowest
//! concept index on ties); concepts that win no pixel are inactive, so the
//! number of regions varies per image. At inference the soft map is first
//! resized to the target resolution with
//! [`kernels::bilinear_resize`](crate::tensor::kernels::bilinear_resize).

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tape, Tensor, Var};

/// Floor on vector norms in cosine denominators.
pub const COSINE_EPS: f64 = 1e-12;

/// Cosine similarities plus the rows that needed the epsilon guard.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignment<T: Element = f64> {
    pub similarities: Tensor<T>,
    /// Pixel rows whose norm was below [`COSINE_EPS`].
    pub zero_norm_pixels: Vec<usize>,
    /// Concept rows whose norm was below [`COSINE_EPS`].
    pub zero_norm_concepts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardAssignment {
    pub labels: Vec<usize>,
    /// Sorted indices of concepts that own at least one pixel.
    pub active: Vec<usize>,
}

impl HardAssignment {
    pub fn region_count(&self) -> usize {
        self.active.len()
    }
}

/// Soft and hard assignment of one image at a given resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix<T: Element = f64> {
    pub soft: Tensor<T>,
    pub hard: HardAssignment,
    /// `(height, width)` of the grid `soft` and `hard` live on.
    pub grid: (usize, usize),
    pub zero_norm_pixels: Vec<usize>,
}

/// `S[i][j] = cos(x_i, c_j)` for `x: n×d`, `c: k×d`.
pub fn soft_assign<T: Element>(pixels: &Tensor<T>, concepts: &Tensor<T>) -> Result<SoftAssignment<T>> {
    if pixels.shape().len() != 2 || concepts.shape().len() != 2 || pixels.cols() != concepts.cols() {
        return Err(Error::Dimension(format!(
            "pixels {:?} vs concepts {:?}",
            pixels.shape(),
            concepts.shape()
        )));
    }
    let eps = T::from_f64(COSINE_EPS);
    let (xn, xnorm) = kernels::l2_normalize_rows(pixels, eps)?;
    let (cn, cnorm) = kernels::l2_normalize_rows(concepts, eps)?;
    let zero_norm_pixels = zero_rows(&xnorm, eps);
    let zero_norm_concepts = zero_rows(&cnorm, eps);
    if !zero_norm_pixels.is_empty() {
        log::warn!("{} pixel embeddings have zero norm; cosine guarded", zero_norm_pixels.len());
    }
    if !zero_norm_concepts.is_empty() {
        log::warn!("{} concepts have zero norm; cosine guarded", zero_norm_concepts.len());
    }
    let mut similarities = kernels::matmul_nt(&xn, &cn)?;
    // rounding can push |cos| a hair above 1
    for v in similarities.data_mut() {
        *v = v.max(-T::one()).min(T::one());
    }
    Ok(SoftAssignment {
        similarities,
        zero_norm_pixels,
        zero_norm_concepts,
    })
}

fn zero_rows<T: Element>(norms: &[T], eps: T) -> Vec<usize> {
    norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n < eps)
        .map(|(i, _)| i)
        .collect()
}

/// Differentiable cosine assignment on the tape. `pixels_unit` must hold
/// L2-normalized pixel rows (they are constants during training).
pub fn soft_assign_on_tape<T: Element>(tape: &mut Tape<'_, T>, pixels_unit: Var, concepts: Var) -> Result<Var> {
    let c = tape.l2_normalize_rows(concepts, T::from_f64(COSINE_EPS))?;
    Ok(tape.matmul_nt(pixels_unit, c)?)
}

/// Row-wise argmax of an `n×k` similarity matrix.
pub fn hard_assign<T: Element>(soft: &Tensor<T>) -> HardAssignment {
    let labels: Vec<usize> = (0..soft.rows()).map(|r| kernels::argmax(soft.row(r))).collect();
    let active: BTreeSet<usize> = labels.iter().copied().collect();
    HardAssignment {
        labels,
        active: active.into_iter().collect(),
    }
}

/// Bilinear resize of an `(h·w)×k` soft assignment to `(H·W)×k`.
pub fn upsample_soft<T: Element>(soft: &Tensor<T>, from: (usize, usize), to: (usize, usize)) -> Result<Tensor<T>> {
    if to.0 < from.0 || to.1 < from.1 {
        return Err(Error::Dimension(format!(
            "upsampling target {}x{} is smaller than source {}x{}",
            to.0, to.1, from.0, from.1
        )));
    }
    Ok(kernels::bilinear_resize(soft, from, to)?)
}

/// Soft assignment on the feature grid, bilinear upsampling to `target`,
/// then hard assignment at the target resolution.
pub fn assign<T: Element>(
    pixels: &Tensor<T>,
    concepts: &Tensor<T>,
    grid: (usize, usize),
    target: (usize, usize),
) -> Result<AssignmentMatrix<T>> {
    if grid.0 * grid.1 != pixels.rows() {
        return Err(Error::Dimension(format!(
            "grid {}x{} does not match {} pixel rows",
            grid.0,
            grid.1,
            pixels.rows()
        )));
    }
    let soft = soft_assign(pixels, concepts)?;
    let resized = if target == grid {
        soft.similarities
    } else {
        upsample_soft(&soft.similarities, grid, target)?
    };
    let hard = hard_assign(&resized);
    Ok(AssignmentMatrix {
        soft: resized,
        hard,
        grid: target,
        zero_norm_pixels: soft.zero_norm_pixels,
    })
}
