//! One-sided Jacobi SVD in f64.

/// `a = u * diag(s) * v^T` for a row-major `m x n` matrix, keeping the `r`
/// components with nonzero singular value. `u` is `m x r` and `v` is `n x r`,
/// both row-major; `s` is descending.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    pub rows: usize,
    pub cols: usize,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Column `k` of `u`.
    pub fn left(&self, k: usize) -> Vec<f64> {
        let r = self.rank();
        (0..self.rows).map(|i| self.u[i * r + k]).collect()
    }

    /// Column `k` of `v`.
    pub fn right(&self, k: usize) -> Vec<f64> {
        let r = self.rank();
        (0..self.cols).map(|i| self.v[i * r + k]).collect()
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let r = self.rank();
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[i * self.cols + j] = (0..r).map(|k| self.u[i * r + k] * self.s[k] * self.v[j * r + k]).sum();
            }
        }
        out
    }
}

const MAX_SWEEPS: usize = 60;

pub fn svd(a: &[f64], rows: usize, cols: usize) -> SvdResult {
    assert_eq!(a.len(), rows * cols, "svd input size");
    if rows >= cols {
        let (u, s, v) = jacobi(a.to_vec(), rows, cols);
        SvdResult { rows, cols, u, s, v }
    } else {
        // work on the transpose so the rotated dimension is the short one
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        let (u, s, v) = jacobi(t, cols, rows);
        SvdResult {
            rows,
            cols,
            u: v,
            s,
            v: u,
        }
    }
}

/// Orthogonalize the columns of `b` (`p x q`, `p >= q`). Returns left
/// vectors `p x r`, singular values and right vectors `q x r`.
fn jacobi(mut b: Vec<f64>, p: usize, q: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; q * q];
    for i in 0..q {
        v[i * q + i] = 1.0;
    }
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return (Vec::new(), Vec::new(), Vec::new());
    }
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for j in 0..q {
            for k in j + 1..q {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..p {
                    let (x, y) = (b[i * q + j], b[i * q + k]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..p {
                    let (x, y) = (b[i * q + j], b[i * q + k]);
                    b[i * q + j] = c * x - s * y;
                    b[i * q + k] = s * x + c * y;
                }
                for i in 0..q {
                    let (x, y) = (v[i * q + j], v[i * q + k]);
                    v[i * q + j] = c * x - s * y;
                    v[i * q + k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..q)
        .map(|j| (0..p).map(|i| b[i * q + j] * b[i * q + j]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let tol = norms[order[0]] * 1e-12 * (p.max(q) as f64);
    let keep: Vec<usize> = order.into_iter().filter(|&j| norms[j] > tol).collect();
    let r = keep.len();
    let mut u = vec![0.0; p * r];
    let mut vv = vec![0.0; q * r];
    for (k, &j) in keep.iter().enumerate() {
        for i in 0..p {
            u[i * r + k] = b[i * q + j] / norms[j];
        }
        for i in 0..q {
            vv[i * r + k] = v[i * q + j];
        }
    }
    (u, keep.iter().map(|&j| norms[j]).collect(), vv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let a = [3.0, 0.0, 0.0, 0.0, 5.0, 0.0];
        let r = svd(&a, 2, 3);
        assert_eq!(r.rank(), 2);
        assert!((r.s[0] - 5.0).abs() < 1e-12 && (r.s[1] - 3.0).abs() < 1e-12);
        assert!((r.left(0)[1].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        assert_eq!(svd(&[0.0; 6], 3, 2).rank(), 0);
    }

    #[test]
    fn rank_one_is_detected() {
        let u = [1.0, 2.0, 3.0];
        let v = [0.5, -1.0];
        let a: Vec<f64> = (0..6).map(|i| u[i / 2] * v[i % 2]).collect();
        let r = svd(&a, 3, 2);
        assert_eq!(r.rank(), 1);
        let back = r.reconstruct();
        assert!(a.iter().zip(&back).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
