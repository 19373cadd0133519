//! Shared oracles for the integration and acceptance suites. These are
//! deliberately independent reimplementations (Jacobi SVD, finite
//! differences, brute-force metric scans) used to cross-check the library.

#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

/// Singular values of a row-major matrix, descending, via one-sided Jacobi
/// rotations on the columns.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
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

/// Cosine similarity with the zero-vector convention used by the harness.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}
