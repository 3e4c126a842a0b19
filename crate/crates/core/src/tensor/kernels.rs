//! Slice-level numeric kernels shared by the forward and backward passes.

use crate::scalar::Scalar;

/// `[m,k] x [k,n]`, accumulating in i-k-j order.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out += aᵀ · b` for `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
pub(crate) fn matmul_at_b_acc<T: Scalar>(
    out: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: [m,n]`, `b: [k,n]`, `out: [m,k]`.
pub(crate) fn matmul_a_bt_acc<T: Scalar>(
    out: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: T = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

pub(crate) fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax over the last axis with max subtraction.
///
/// When `allowed` is given, disallowed cells behave as `-inf` scores: they are
/// excluded from the max and the normalizer and receive probability exactly 0.
/// Every row must keep at least one allowed cell.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize, allowed: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (r, (xrow, orow)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let ok = |c: usize| allowed.is_none_or(|m| m[r * cols + c]);
        let mut max = T::neg_infinity();
        for (c, &v) in xrow.iter().enumerate() {
            if ok(c) && v > max {
                max = v;
            }
        }
        debug_assert!(
            max > T::neg_infinity(),
            "softmax row {r} has no allowed cell"
        );
        let mut total = T::zero();
        for (c, (&v, o)) in xrow.iter().zip(orow.iter_mut()).enumerate() {
            if ok(c) {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Rotation angle for pair `pair` of a `dim`-wide head at `position`.
pub(crate) fn rope_angle(position: usize, pair: usize, dim: usize, base: f64) -> f64 {
    position as f64 * base.powf(-2.0 * pair as f64 / dim as f64)
}

/// Rotates consecutive coordinate pairs of each row. `sign = -1` applies the inverse rotation.
pub(crate) fn rope_rotate<T: Scalar>(
    x: &[T],
    dim: usize,
    positions: &[usize],
    base: f64,
    sign: f64,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (s, (xrow, orow)) in x.chunks(dim).zip(out.chunks_mut(dim)).enumerate() {
        for i in 0..dim / 2 {
            let theta = sign * rope_angle(positions[s], i, dim, base);
            let (sin, cos) = (T::lit(theta.sin()), T::lit(theta.cos()));
            let (a, b) = (xrow[2 * i], xrow[2 * i + 1]);
            orow[2 * i] = a * cos - b * sin;
            orow[2 * i + 1] = a * sin + b * cos;
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
