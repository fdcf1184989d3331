//! Dense row-major kernels and the per-component forward/backward passes.

use super::Scalar;

#[inline]
pub(crate) fn c<T: Scalar>(v: f64) -> T {
    T::from(v).expect("finite constant")
}

/// `out (n×m) += a (n×k) · b (k×m)`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let row = &b[p * m..(p + 1) * m];
            for (oj, &bj) in o.iter_mut().zip(row) {
                *oj = *oj + s * bj;
            }
        }
    }
}

/// `out (k×m) += aᵀ · b` with `a: n×k`, `b: n×m`.
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let o = &mut out[p * m..(p + 1) * m];
            for (oj, &bj) in o.iter_mut().zip(brow) {
                *oj = *oj + s * bj;
            }
        }
    }
}

/// `out (n×k) += a · bᵀ` with `a: n×m`, `b: k×m`.
pub(crate) fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * k);
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * k + j] = out[i * k + j] + s;
        }
    }
}

pub(crate) fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// In-place softmax over one row; entries equal to `-inf` get probability 0.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Log-softmax of a row, returned as `f64` regardless of the model precision.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|x| x.to_f64().unwrap_or(f64::NAN))
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .map(|x| (x.to_f64().unwrap_or(f64::NAN) - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN) - lse).collect()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x · sigmoid(x)`.
pub fn swish<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn swish_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}

pub(crate) const LN_EPS: f64 = 1e-6;

pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
) -> (Vec<T>, LayerNormCache<T>) {
    let n = x.len() / d;
    let eps = c::<T>(LN_EPS);
    let dn = c::<T>(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().fold(T::zero(), |a, b| a + b) / dn;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[i * d + j] = h;
            y[i * d + j] = gamma[j] * h + beta[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Accumulates parameter gradients and returns `dx`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LayerNormCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    d: usize,
) -> Vec<T> {
    let n = dy.len() / d;
    let dn = c::<T>(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for j in 0..d {
            let g = dy[i * d + j];
            let h = cache.xhat[i * d + j];
            dgamma[j] = dgamma[j] + g * h;
            dbeta[j] = dbeta[j] + g;
            dxhat[j] = g * gamma[j];
            s1 = s1 + dxhat[j];
            s2 = s2 + dxhat[j] * h;
        }
        let inv = cache.inv_std[i];
        for j in 0..d {
            let h = cache.xhat[i * d + j];
            dx[i * d + j] = inv / dn * (dn * dxhat[j] - s1 - h * s2);
        }
    }
    dx
}

/// `y = x W + b` for `x: n×k`, `W: k×m`.
pub(crate) fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], k: usize, m: usize) -> Vec<T> {
    let n = x.len() / k;
    let mut y = Vec::with_capacity(n * m);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    matmul_acc(x, w, n, k, m, &mut y);
    y
}

/// Accumulates `dW`, `db` and `dx` for `y = x W + b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    k: usize,
    m: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let n = x.len() / k;
    matmul_tn_acc(x, dy, n, k, m, dw);
    for i in 0..n {
        add_assign(db, &dy[i * m..(i + 1) * m]);
    }
    matmul_nt_acc(dy, w, n, m, k, dx);
}

/// Sinusoidal position encoding for one position.
pub(crate) fn position_encoding<T: Scalar>(pos: usize, d: usize, out: &mut [T]) {
    for i in 0..d {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        out[i] = c(if i % 2 == 0 { angle.sin() } else { angle.cos() });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swish_values() {
        assert_eq!(swish(0.0f64), 0.0);
        assert!((swish(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((swish(20.0f64) - 20.0).abs() < 1e-7);
        assert!(swish(-40.0f64).abs() < 1e-15);
    }

    #[test]
    fn swish_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (swish(x + h) - swish(x - h)) / (2.0 * h);
            assert!((fd - swish_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0f64, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3×2
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, [1.0 - 2.0 + 1.5, 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);
        // aᵀ·a (3×3) via tn equals explicit
        let mut ata = [0.0; 9];
        matmul_tn_acc(&a, &a, 2, 3, 3, &mut ata);
        assert_eq!(ata[0], 1.0 + 16.0);
        assert_eq!(ata[5], 2.0 * 3.0 + 5.0 * 6.0);
        let mut aat = [0.0; 4];
        matmul_nt_acc(&a, &a, 2, 3, 2, &mut aat);
        assert_eq!(aat, [14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn softmax_handles_masked_entries() {
        let mut row = [0.0f64, f64::NEG_INFINITY, 0.0];
        softmax_in_place(&mut row);
        assert_eq!(row, [0.5, 0.0, 0.5]);
        let ls = log_softmax(&[1.0f32, 2.0, 3.0]);
        let sum: f64 = ls.iter().map(|x| x.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}
