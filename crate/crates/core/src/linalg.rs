//! Small dense routines: Householder least squares, triangular inverse and
//! one-sided Jacobi singular values. Matrices are stored column-major as
//! `Vec<Vec<T>>` (one inner vector per column).

use crate::scalar::Scalar;

/// Relative singular-value cutoff used for rank decisions.
pub(crate) const RANK_TOL: f64 = 1e-10;

pub(crate) struct QrLeastSquares<T> {
    /// Upper-triangular factor, `r[i][j]` for `i <= j` (row-major).
    pub r: Vec<Vec<T>>,
    pub coefficients: Vec<T>,
    pub rss: T,
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) enum QrFailure {
    /// Index of the first column found to be (numerically) dependent.
    RankDeficient(usize),
}

/// Solves `min ||X b - y||` by Householder QR.
pub(crate) fn qr_least_squares<T: Scalar>(
    columns: &[Vec<T>],
    y: &[T],
) -> Result<QrLeastSquares<T>, QrFailure> {
    let q = columns.len();
    let n = y.len();
    let mut a: Vec<Vec<T>> = columns.to_vec();
    let mut rhs = y.to_vec();
    let mut diag = vec![T::zero(); q];
    for k in 0..q.min(n) {
        let norm = a[k][k..].iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            diag[k] = T::zero();
            continue;
        }
        let alpha = if a[k][k] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: T = v.iter().map(|&x| x * x).sum();
        diag[k] = alpha;
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::lit(2.0);
        for col in a.iter_mut().skip(k + 1) {
            let dot: T = v.iter().zip(&col[k..]).map(|(&vi, &ci)| vi * ci).sum();
            let s = two * dot / vnorm2;
            for (ci, &vi) in col[k..].iter_mut().zip(&v) {
                *ci -= s * vi;
            }
        }
        let dot: T = v.iter().zip(&rhs[k..]).map(|(&vi, &ri)| vi * ri).sum();
        let s = two * dot / vnorm2;
        for (ri, &vi) in rhs[k..].iter_mut().zip(&v) {
            *ri -= s * vi;
        }
    }
    let mut r = vec![vec![T::zero(); q]; q];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = diag[i];
        for j in (i + 1)..q {
            row[j] = a[j][i];
        }
    }

    let sv = singular_values(&r);
    let smax = sv.iter().copied().fold(T::zero(), T::max);
    let cutoff = T::lit(RANK_TOL) * smax;
    if smax == T::zero() {
        return Err(QrFailure::RankDeficient(0));
    }
    if sv.iter().any(|&s| s <= cutoff) {
        let col = (0..q)
            .find(|&j| diag[j].abs() <= cutoff)
            .unwrap_or_else(|| {
                // no tiny pivot: blame the column with the smallest relative pivot
                (0..q)
                    .min_by(|&i, &j| {
                        let ri = diag[i].abs() / column_norm(&columns[i]);
                        let rj = diag[j].abs() / column_norm(&columns[j]);
                        ri.partial_cmp(&rj).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .unwrap_or(0)
            });
        return Err(QrFailure::RankDeficient(col));
    }

    let coefficients = back_substitute(&r, &rhs[..q]);
    let rss = rhs[q..].iter().map(|&v| v * v).sum();
    Ok(QrLeastSquares {
        r,
        coefficients,
        rss,
    })
}

fn column_norm<T: Scalar>(col: &[T]) -> T {
    col.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::min_positive_value())
}

fn back_substitute<T: Scalar>(r: &[Vec<T>], b: &[T]) -> Vec<T> {
    let q = b.len();
    let mut x = vec![T::zero(); q];
    for i in (0..q).rev() {
        let mut s = b[i];
        for j in (i + 1)..q {
            s -= r[i][j] * x[j];
        }
        x[i] = s / r[i][i];
    }
    x
}

/// Inverse of a nonsingular upper-triangular matrix (row-major).
pub(crate) fn upper_triangular_inverse<T: Scalar>(r: &[Vec<T>]) -> Vec<Vec<T>> {
    let q = r.len();
    let mut inv = vec![vec![T::zero(); q]; q];
    for col in 0..q {
        let mut e = vec![T::zero(); q];
        e[col] = T::one();
        let x = back_substitute(r, &e);
        for (i, xi) in x.into_iter().enumerate() {
            inv[i][col] = xi;
        }
    }
    inv
}

/// `(R^T R)^{-1} = R^{-1} R^{-T}`, symmetrized.
pub(crate) fn gram_inverse_from_r<T: Scalar>(r: &[Vec<T>]) -> Vec<Vec<T>> {
    let rinv = upper_triangular_inverse(r);
    let q = r.len();
    let mut out = vec![vec![T::zero(); q]; q];
    for i in 0..q {
        for j in i..q {
            let s: T = (j..q).map(|k| rinv[i][k] * rinv[j][k]).sum();
            out[i][j] = s;
            out[j][i] = s;
        }
    }
    out
}

/// Singular values of a square row-major matrix by one-sided Jacobi
/// rotations on its columns.
pub(crate) fn singular_values<T: Scalar>(m: &[Vec<T>]) -> Vec<T> {
    let n = m.len();
    if n == 0 {
        return Vec::new();
    }
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| (0..n).map(|i| m[i][j]).collect()).collect();
    let eps = T::epsilon();
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha: T = cols[i].iter().map(|&v| v * v).sum();
                let beta: T = cols[j].iter().map(|&v| v * v).sum();
                let gamma: T = cols[i].iter().zip(&cols[j]).map(|(&a, &b)| a * b).sum();
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let sign = if zeta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(j);
                for (a, b) in left[i].iter_mut().zip(right[0].iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<T> = cols
        .iter()
        .map(|c| c.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_values_of_diagonal_and_rank_one() {
        let d = vec![vec![3.0f64, 0.0], vec![0.0, 4.0]];
        assert_eq!(singular_values(&d), vec![4.0, 3.0]);
        let r1 = vec![vec![1.0f64, 2.0], vec![2.0, 4.0]];
        let sv = singular_values(&r1);
        assert!((sv[0] - 5.0).abs() < 1e-12);
        assert!(sv[1].abs() < 1e-12);
    }

    #[test]
    fn exact_line_fit() {
        let x0 = vec![1.0f64; 4];
        let x1 = vec![0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x1.iter().map(|&x| 1.5 - 2.0 * x).collect();
        let fit = qr_least_squares(&[x0, x1], &y).unwrap();
        assert!((fit.coefficients[0] - 1.5).abs() < 1e-12);
        assert!((fit.coefficients[1] + 2.0).abs() < 1e-12);
        assert!(fit.rss < 1e-20);
    }

    #[test]
    fn duplicate_column_is_flagged() {
        let x0 = vec![1.0f64; 5];
        let x1 = vec![0.3, 1.0, 2.0, 3.0, 7.0];
        let err = qr_least_squares(&[x0, x1.clone(), x1], &[1.0; 5]).err().unwrap();
        assert_eq!(err, QrFailure::RankDeficient(2));
    }

    #[test]
    fn gram_inverse_matches_identity() {
        let r = vec![vec![2.0f64, 1.0], vec![0.0, 3.0]];
        let g = gram_inverse_from_r(&r);
        // (R^T R) g = I
        let rtr = [[4.0, 2.0], [2.0, 10.0]];
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| rtr[i][k] * g[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }
}
