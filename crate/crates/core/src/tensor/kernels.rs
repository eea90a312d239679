//! Slice kernels shared by the inference path and the autodiff tape.
//!
//! Every kernel processes rows independently with a fixed accumulation
//! order, so a row's result never depends on how many other rows are in the
//! batch. Prefill, incremental decoding and training all rely on this to be
//! bit-identical to each other.

use super::Scalar;

pub const RMS_EPS: f64 = 1e-6;

/// `out[m x n] = a[m x k] * b[k x n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// `out[m x n] = a[m x k] * b[n x k]^T`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[k x n] += a[m x k]^T * b[m x n]`, accumulating into `out`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// In-place softmax of one row; subtracts the row max first.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// d silu / dx.
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}

/// RMS-normalises `x` into `out` and applies `gain`. Returns `1 / rms`.
pub fn rms_norm_row<T: Scalar>(x: &[T], gain: &[T], out: &mut [T]) -> T {
    let mut ss = T::zero();
    for &v in x {
        ss += v * v;
    }
    let d = T::from_f64(x.len() as f64);
    let inv = T::one() / (ss / d + T::from_f64(RMS_EPS)).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

/// Rotary embedding tables for one absolute position: `(cos, sin)`, each of
/// length `head_dim / 2`.
pub fn rope_tables<T: Scalar>(pos: usize, head_dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(half);
    let mut sin = Vec::with_capacity(half);
    for i in 0..half {
        let inv_freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
        let angle = pos as f64 * inv_freq;
        cos.push(T::from_f64(angle.cos()));
        sin.push(T::from_f64(angle.sin()));
    }
    (cos, sin)
}

/// Rotates each head of `row` in place (rotate-half pairing `(i, i + half)`).
/// `inverse` applies the transposed rotation, used by the backward pass.
pub fn rope_row<T: Scalar>(row: &mut [T], n_heads: usize, cos: &[T], sin: &[T], inverse: bool) {
    let head_dim = row.len() / n_heads;
    let half = head_dim / 2;
    for h in 0..n_heads {
        let head = &mut row[h * head_dim..(h + 1) * head_dim];
        for i in 0..half {
            let (x1, x2) = (head[i], head[i + half]);
            let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
            head[i] = x1 * c - x2 * s;
            head[i + half] = x2 * c + x1 * s;
        }
    }
}

/// Causal attention for a single query row against the first `n_keys` rows
/// of `keys`/`values` (each `n_keys x d`, heads laid out along columns).
///
/// Writes the attended row into `out` and the per-head probabilities into
/// `probs` (`n_heads x n_keys`).
pub fn attend_row<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    n_keys: usize,
    n_heads: usize,
    out: &mut [T],
    probs: &mut [T],
) {
    let d = q.len();
    let head_dim = d / n_heads;
    let scale = T::one() / T::from_f64(head_dim as f64).sqrt();
    out.iter_mut().for_each(|o| *o = T::zero());
    for h in 0..n_heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let qh = &q[cols.clone()];
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(qh, &keys[j * d + cols.start..j * d + cols.end]) * scale;
        }
        softmax_row(p);
        let oh = &mut out[cols.clone()];
        for (j, &pj) in p.iter().enumerate() {
            let vh = &values[j * d + cols.start..j * d + cols.end];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += pj * v;
            }
        }
    }
}

/// Index of the first maximal element.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_dot() {
        let eye = [1.0f64, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(matmul(&eye, &b, 2, 2, 2), b.to_vec());
        assert_eq!(matmul(&[1.0f64, 2.0], &[3.0, 4.0], 1, 2, 1), vec![11.0]);
    }

    #[test]
    fn matmul_rows_do_not_depend_on_batch() {
        let a: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..12).map(|i| (i as f32 * 0.91).cos()).collect();
        let full = matmul(&a, &b, 3, 4, 3);
        let top = matmul(&a[..8], &b, 2, 4, 3);
        assert_eq!(&full[..6], &top[..]);
        let nt = matmul_nt(&a, &b, 3, 4, 3);
        let nt_top = matmul_nt(&a[..4], &b, 1, 4, 3);
        assert_eq!(&nt[..3], &nt_top[..]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut r = [0.0f64; 3];
        softmax_row(&mut r);
        for v in r {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut r = [1000.0f64, 0.0];
        softmax_row(&mut r);
        assert!((r[0] - 1.0).abs() < 1e-12 && r[1].abs() < 1e-12);
    }

    #[test]
    fn silu_limits() {
        assert_eq!(silu(0.0f64), 0.0);
        assert!((silu(40.0f64) - 40.0).abs() < 1e-12);
        assert!(silu(-40.0f64).abs() < 1e-12);
    }

    #[test]
    fn rms_norm_constant_row() {
        let x = [-3.0f64; 8];
        let gain = [1.0f64; 8];
        let mut out = [0.0; 8];
        rms_norm_row(&x, &gain, &mut out);
        for v in out {
            assert!((v + 1.0).abs() < 1e-6);
        }
        let mut out = [1.0; 8];
        rms_norm_row(&x, &[0.0; 8], &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rope_inverse_round_trips() {
        let (c, s) = rope_tables::<f64>(17, 8, 10_000.0);
        let orig: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
        let mut row = orig.clone();
        rope_row(&mut row, 2, &c, &s, false);
        assert!(row.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-3));
        rope_row(&mut row, 2, &c, &s, true);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
        // position zero is the identity
        let (c0, s0) = rope_tables::<f64>(0, 8, 10_000.0);
        let mut row = orig.clone();
        rope_row(&mut row, 2, &c0, &s0, false);
        assert_eq!(row, orig);
    }

    #[test]
    fn single_key_attends_to_itself() {
        let q = [0.3f64, -1.0, 2.0, 0.5];
        let k = [1.0f64, 2.0, 3.0, 4.0];
        let v = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        let mut probs = [0.0; 2];
        attend_row(&q, &k, &v, 1, 2, &mut out, &mut probs);
        assert_eq!(probs, [1.0, 1.0]);
        assert_eq!(out, v);
    }

    #[test]
    fn uniform_keys_average_values() {
        let q = [0.3f64, -1.0];
        let k = [1.0f64, 1.0, 1.0, 1.0, 1.0, 1.0];
        let v = [1.0f64, 2.0, 3.0, 4.0, 5.0, 9.0];
        let mut out = [0.0; 2];
        let mut probs = [0.0; 3];
        attend_row(&q, &k, &v, 3, 1, &mut out, &mut probs);
        assert!((out[0] - 3.0).abs() < 1e-12);
        assert!((out[1] - 5.0).abs() < 1e-12);
    }
}
