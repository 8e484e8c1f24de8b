//! Forward kernels on rank-2 tensors. None of these record anything;
//! [`super::Tape`] wraps them and adds the backward rules.

use super::{Element, Tensor};
use crate::error::TensorError;

type KResult<T> = Result<Tensor<T>, TensorError>;

fn require_rank2<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(), TensorError> {
    if t.shape().len() != 2 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("expected a rank-2 tensor, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn mismatch<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> KResult<T> {
    require_rank2("matmul", a)?;
    require_rank2("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_rows(m, n, out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> KResult<T> {
    require_rank2("matmul_nt", a)?;
    require_rank2("matmul_nt", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(mismatch("matmul_nt", a, b));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out.push(dot(arow, b.row(j)));
        }
    }
    Tensor::from_rows(m, n, out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> KResult<T> {
    require_rank2("matmul_tn", a)?;
    require_rank2("matmul_tn", b)?;
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(mismatch("matmul_tn", a, b));
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_rows(m, n, out)
}

/// Four interleaved partial sums, combined as `(s0 + s1) + (s2 + s3)`,
/// then the tail.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut s = [T::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (at, bt) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        s[0] = s[0] + x[0] * y[0];
        s[1] = s[1] + x[1] * y[1];
        s[2] = s[2] + x[2] * y[2];
        s[3] = s[3] + x[3] * y[3];
    }
    let mut total = (s[0] + s[1]) + (s[2] + s[3]);
    for (&x, &y) in at.iter().zip(bt) {
        total = total + x * y;
    }
    total
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> KResult<T> {
    require_rank2("transpose", a)?;
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.get(i, j);
        }
    }
    Tensor::from_rows(n, m, out)
}

/// Numerically stable softmax along each row.
pub fn softmax_rows<T: Element>(a: &Tensor<T>) -> KResult<T> {
    require_rank2("softmax_rows", a)?;
    let mut out = a.clone();
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Normalizes each row to zero mean and unit variance (biased variance,
/// `eps` added before the square root). Returns the output and the
/// per-row `1/sqrt(var + eps)`.
pub fn layer_norm_rows<T: Element>(a: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>), TensorError> {
    require_rank2("layer_norm_rows", a)?;
    let cols = T::from_f64(a.cols() as f64);
    let mut out = a.clone();
    let mut inv_std = Vec::with_capacity(a.rows());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / cols;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cols;
        let is = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    Ok((out, inv_std))
}

/// Clamp at zero.
pub fn relu<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| v.max(T::zero()))
}

/// Divides each row by `max(‖row‖, eps)`. Returns the output and the raw
/// row norms.
pub fn l2_normalize_rows<T: Element>(a: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>), TensorError> {
    require_rank2("l2_normalize_rows", a)?;
    let mut out = a.clone();
    let mut norms = Vec::with_capacity(a.rows());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        let denom = norm.max(eps);
        for v in row.iter_mut() {
            *v = *v / denom;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Per-row maximum as an `m×1` tensor plus the selected column indices.
pub fn row_max<T: Element>(a: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    require_rank2("row_max", a)?;
    if a.cols() == 0 {
        return Err(TensorError::InvalidArgument {
            op: "row_max",
            reason: "zero columns".into(),
        });
    }
    let mut vals = Vec::with_capacity(a.rows());
    let mut idx = Vec::with_capacity(a.rows());
    for r in 0..a.rows() {
        let row = a.row(r);
        let j = argmax(row);
        vals.push(row[j]);
        idx.push(j);
    }
    Ok((Tensor::from_rows(a.rows(), 1, vals)?, idx))
}

fn zip_same<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> KResult<T> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> KResult<T> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> KResult<T> {
    zip_same("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> KResult<T> {
    zip_same("mul", a, b, |x, y| x * y)
}

fn row_broadcast<T: Element>(op: &'static str, a: &Tensor<T>, row: &Tensor<T>, f: impl Fn(T, T) -> T) -> KResult<T> {
    require_rank2(op, a)?;
    if row.len() != a.cols() || row.rows() != 1 {
        return Err(mismatch(op, a, row));
    }
    let mut out = a.clone();
    let r = row.data();
    for i in 0..a.rows() {
        for (v, &b) in out.row_mut(i).iter_mut().zip(r) {
            *v = f(*v, b);
        }
    }
    Ok(out)
}

/// Adds a `1×n` row to every row of `a`.
pub fn add_row<T: Element>(a: &Tensor<T>, row: &Tensor<T>) -> KResult<T> {
    row_broadcast("add_row", a, row, |x, y| x + y)
}

/// Multiplies every row of `a` elementwise by a `1×n` row.
pub fn mul_row<T: Element>(a: &Tensor<T>, row: &Tensor<T>) -> KResult<T> {
    row_broadcast("mul_row", a, row, |x, y| x * y)
}

pub fn scale<T: Element>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

/// Columns `start..end` of `a`.
pub fn select_cols<T: Element>(a: &Tensor<T>, start: usize, end: usize) -> KResult<T> {
    require_rank2("select_cols", a)?;
    if start > end || end > a.cols() {
        return Err(TensorError::InvalidArgument {
            op: "select_cols",
            reason: format!("range {start}..{end} out of {} columns", a.cols()),
        });
    }
    let w = end - start;
    let mut out = Vec::with_capacity(a.rows() * w);
    for r in 0..a.rows() {
        out.extend_from_slice(&a.row(r)[start..end]);
    }
    Tensor::from_rows(a.rows(), w, out)
}

/// Horizontal concatenation of tensors with equal row counts.
pub fn concat_cols<T: Element>(parts: &[&Tensor<T>]) -> KResult<T> {
    let Some(first) = parts.first() else {
        return Err(TensorError::InvalidArgument {
            op: "concat_cols",
            reason: "no inputs".into(),
        });
    };
    let rows = first.rows();
    for p in parts {
        require_rank2("concat_cols", p)?;
        if p.rows() != rows {
            return Err(mismatch("concat_cols", first, p));
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_rows(rows, total, out)
}

/// For `a: n×k` and `b: m×k`, the `(n·m)×k` tensor whose row `i·m + j`
/// is `a_i ⊙ b_j`.
pub fn pair_product<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> KResult<T> {
    require_rank2("pair_product", a)?;
    require_rank2("pair_product", b)?;
    if a.cols() != b.cols() {
        return Err(mismatch("pair_product", a, b));
    }
    let (n, m, k) = (a.rows(), b.rows(), a.cols());
    let mut out = Vec::with_capacity(n * m * k);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            out.extend(ai.iter().zip(b.row(j)).map(|(&x, &y)| x * y));
        }
    }
    Tensor::from_rows(n * m, k, out)
}

/// One axis of a bilinear resize: for every output coordinate, the two
/// source indices and the interpolation weight of the second one.
///
/// Half-pixel (align-corners = false) convention:
/// `src = max(0, (dst + 0.5) · in/out − 0.5)`, `i0 = ⌊src⌋`,
/// `i1 = min(i0 + 1, in − 1)`, `λ = src − i0`.
pub fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

/// Channelwise bilinear resize of an `(h·w)×c` tensor whose rows are grid
/// cells in row-major order (origin top-left) to `(out_h·out_w)×c`.
///
/// Each output is `top + λy·(bottom − top)` with `top = p00 + λx·(p01 − p00)`
/// and `bottom = p10 + λx·(p11 − p10)`, which reproduces a constant field
/// bit for bit.
pub fn bilinear_resize<T: Element>(
    a: &Tensor<T>,
    from: (usize, usize),
    to: (usize, usize),
) -> KResult<T> {
    require_rank2("bilinear_resize", a)?;
    let (h, w) = from;
    let (oh, ow) = to;
    if h * w != a.rows() || h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(TensorError::InvalidArgument {
            op: "bilinear_resize",
            reason: format!("grid {h}x{w} -> {oh}x{ow} with {} rows", a.rows()),
        });
    }
    let c = a.cols();
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    let mut out = Vec::with_capacity(oh * ow * c);
    for &(y0, y1, ly) in &ys {
        let ly = T::from_f64(ly);
        for &(x0, x1, lx) in &xs {
            let lx = T::from_f64(lx);
            let (p00, p01) = (a.row(y0 * w + x0), a.row(y0 * w + x1));
            let (p10, p11) = (a.row(y1 * w + x0), a.row(y1 * w + x1));
            for ch in 0..c {
                let top = p00[ch] + lx * (p01[ch] - p00[ch]);
                let bottom = p10[ch] + lx * (p11[ch] - p10[ch]);
                out.push(top + ly * (bottom - top));
            }
        }
    }
    Tensor::from_rows(oh * ow, c, out)
}

/// Adjoint of [`bilinear_resize`]: scatters an `(out_h·out_w)×c` gradient
/// back onto the `(h·w)×c` source grid.
pub fn bilinear_resize_adjoint<T: Element>(
    g: &Tensor<T>,
    from: (usize, usize),
    to: (usize, usize),
) -> Tensor<T> {
    let (h, w) = from;
    let (oh, ow) = to;
    let c = g.cols();
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    let mut out = Tensor::zeros(&[h * w, c]);
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        let ly = T::from_f64(ly);
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let lx = T::from_f64(lx);
            let grow = g.row(oy * ow + ox).to_vec();
            let weights = [
                (y0 * w + x0, (T::one() - ly) * (T::one() - lx)),
                (y0 * w + x1, (T::one() - ly) * lx),
                (y1 * w + x0, ly * (T::one() - lx)),
                (y1 * w + x1, ly * lx),
            ];
            for (idx, wt) in weights {
                if wt == T::zero() {
                    continue;
                }
                for (o, &gv) in out.row_mut(idx).iter_mut().zip(&grow) {
                    *o = *o + wt * gv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let t = Tensor::from_nested(&[&[0.0, 0.0, 0.0]]);
        let s = softmax_rows(&t).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::from_nested(&[&[-1.0, 0.5]]);
        assert_eq!(relu(&t).data(), &[0.0, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let t = Tensor::from_nested(&[&[3.0, 3.0, 3.0, 3.0]]);
        let (y, inv) = layer_norm_rows(&t, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!((inv[0] - 1.0 / 1e-5f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.7, 0.7, 0.1]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_nested(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let b = Tensor::from_nested(&[&[1.0, 0.5, -1.0], &[2.0, 0.0, 1.0]]);
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ab.shape(), &[3, 3]);
        assert_eq!(ab.row(0), &[5.0, 0.5, 1.0]);
        let bt = transpose(&b).unwrap();
        assert_eq!(matmul_nt(&a, &bt).unwrap(), ab);
        let at = transpose(&a).unwrap();
        assert_eq!(matmul_tn(&at, &b).unwrap(), ab);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let a = Tensor::from_fn(6, 2, |r, c| (r * 2 + c) as f64 * 0.37);
        assert_eq!(bilinear_resize(&a, (2, 3), (2, 3)).unwrap(), a);
        let k = Tensor::filled(&[4, 3], 0.1f64);
        let up = bilinear_resize(&k, (2, 2), (7, 5)).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn pair_product_layout() {
        let a = Tensor::from_nested(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = pair_product(&a, &a).unwrap();
        assert_eq!(p.shape(), &[4, 2]);
        assert_eq!(p.row(1), &[3.0, 8.0]);
        assert_eq!(p.row(2), &[3.0, 8.0]);
        assert_eq!(p.row(3), &[9.0, 16.0]);
    }
}
