//! Shared oracles for unit tests: a one-sided Jacobi SVD, a loop-based
//! attention reference, and central finite differences. These deliberately
//! avoid the library's own kernels so they stay independent checks.

#![allow(clippy::needless_range_loop)]

/// Singular values of a row-major `rows × cols` matrix, descending, via
/// one-sided Jacobi rotations on the columns.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    // work on columns of A as vectors of length `rows`
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| data[r * cols + c]).collect())
        .collect();
    let n = cols;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for r in 0..rows {
                    app += a[p][r] * a[p][r];
                    aqq += a[q][r] * a[q][r];
                    apq += a[p][r] * a[q][r];
                }
                off += apq.abs();
                if apq.abs() < 1e-15 {
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let vp = a[p][r];
                    let vq = a[q][r];
                    a[p][r] = c * vp - s * vq;
                    a[q][r] = s * vp + c * vq;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }
    let mut sv: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Loop-based multi-head attention reference: softmax(QKᵀ/√d_k)V per head.
#[allow(clippy::too_many_arguments)]
pub fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_q: usize,
    n_k: usize,
    width: usize,
    v_width: usize,
    heads: usize,
) -> Vec<f64> {
    let d_k = width / heads;
    let d_v = v_width / heads;
    let mut out = vec![0.0; n_q * v_width];
    for h in 0..heads {
        for i in 0..n_q {
            let mut logits = vec![0.0; n_k];
            for (j, lj) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..d_k {
                    acc += q[i * width + h * d_k + d] * k[j * width + h * d_k + d];
                }
                *lj = acc / (d_k as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in &mut logits {
                *l = (*l - mx).exp();
                sum += *l;
            }
            for l in &mut logits {
                *l /= sum;
            }
            for d in 0..d_v {
                let mut acc = 0.0;
                for (j, &p) in logits.iter().enumerate() {
                    acc += p * v[j * v_width + h * d_v + d];
                }
                out[i * v_width + h * d_v + d] = acc;
            }
        }
    }
    out
}

/// Central finite differences of a scalar function.
pub fn finite_diff(data: &[f64], f: &mut dyn FnMut(&[f64]) -> f64, h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; data.len()];
    let mut work = data.to_vec();
    for i in 0..data.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work);
        work[i] = orig - h;
        let dn = f(&work);
        work[i] = orig;
        grad[i] = (up - dn) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_svd_matches_known_diagonal() {
        // diag(3, 2, 1) has singular values 3, 2, 1
        let m = vec![3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0];
        let sv = singular_values(&m, 3, 3);
        assert!((sv[0] - 3.0).abs() < 1e-10);
        assert!((sv[1] - 2.0).abs() < 1e-10);
        assert!((sv[2] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn jacobi_svd_rank_deficient() {
        // [[1, 2], [2, 4]] has rank 1, singular values {sqrt(25)=5, 0}
        let m = vec![1.0, 2.0, 2.0, 4.0];
        let sv = singular_values(&m, 2, 2);
        assert!((sv[0] - 5.0).abs() < 1e-10);
        assert!(sv[1].abs() < 1e-12);
    }
}
