//! Independent numerical oracles and matrix generators shared by the
//! integration tests. Nothing here calls into the library's linear algebra.

#![allow(dead_code)]

use chip_core::tensor_io::ActivationMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major dense matrix.
#[derive(Debug, Clone)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.at(r, c);
            }
        }
        Self::new(self.cols, self.rows, data)
    }

    /// Keeps only the listed rows.
    pub fn submatrix(&self, rows: &[usize]) -> Self {
        let data = rows
            .iter()
            .flat_map(|&r| {
                self.data[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .copied()
            })
            .collect();
        Self::new(rows.len(), self.cols, data)
    }

    pub fn to_activation(&self) -> ActivationMatrix {
        ActivationMatrix::from_row_slice("oracle", self.rows, self.cols, &self.data).unwrap()
    }
}

/// Singular values by one-sided (Hestenes) Jacobi rotations on the columns
/// of whichever orientation has fewer columns. Sorted descending.
pub fn jacobi_singular_values(a: &Dense) -> Vec<f64> {
    let m = if a.cols > a.rows {
        a.transpose()
    } else {
        a.clone()
    };
    let (n_rows, n_cols) = (m.rows, m.cols);
    // Column-major working copy.
    let mut cols: Vec<Vec<f64>> = (0..n_cols)
        .map(|c| (0..n_rows).map(|r| m.at(r, c)).collect())
        .collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n_cols {
            for q in p + 1..n_cols {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n_rows {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * x - s * y;
                    cols[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn oracle_nuclear_norm(a: &Dense) -> f64 {
    if a.rows == 0 {
        return 0.0;
    }
    jacobi_singular_values(a).iter().sum()
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method.
pub fn jacobi_eigenvalues(sym: &Dense) -> Vec<f64> {
    let n = sym.rows;
    let mut a = sym.data.clone();
    let idx = |r: usize, c: usize| r * n + c;
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| a[idx(r, c)].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[idx(q, q)] - a[idx(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[idx(k, p)], a[idx(k, q)]);
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[idx(p, k)], a[idx(q, k)]);
                    a[idx(p, k)] = c * apk - s * aqk;
                    a[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[idx(i, i)]).collect()
}

/// `A·Aᵀ`.
pub fn gram(a: &Dense) -> Dense {
    let mut g = vec![0.0; a.rows * a.rows];
    for i in 0..a.rows {
        for j in 0..a.rows {
            g[i * a.rows + j] = (0..a.cols).map(|k| a.at(i, k) * a.at(j, k)).sum();
        }
    }
    Dense::new(a.rows, a.rows, g)
}

/// Numerical rank: singular values above `rel_tol·σ_max`.
pub fn oracle_rank(a: &Dense, rel_tol: f64) -> usize {
    let sv = jacobi_singular_values(a);
    let max = sv.first().copied().unwrap_or(0.0);
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// `‖A‖_* − ‖A without rows‖_*` via explicit row deletion.
pub fn oracle_combined_ci(a: &Dense, removed: &[usize]) -> f64 {
    let kept: Vec<usize> = (0..a.rows).filter(|r| !removed.contains(r)).collect();
    oracle_nuclear_norm(a) - oracle_nuclear_norm(&a.submatrix(&kept))
}

/// Standard normal entries (Box-Muller, to stay independent of the library's samplers).
pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Dense {
    let data = (0..rows * cols)
        .map(|_| {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Dense::new(rows, cols, data)
}

/// Mix of matrix families: dense Gaussian, ReLU-like non-negative, low rank
/// and matrices with repeated rows.
pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Dense {
    match rng.random_range(0..4) {
        0 => gaussian(rng, rows, cols),
        1 => {
            let mut m = gaussian(rng, rows, cols);
            m.data.iter_mut().for_each(|v| *v = v.max(0.0));
            if m.data.iter().all(|&v| v == 0.0) {
                m.data[0] = 1.0;
            }
            m
        }
        2 => {
            let r = rng.random_range(1..=rows.min(cols));
            let left = gaussian(rng, rows, r);
            let right = gaussian(rng, r, cols);
            let mut data = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    data[i * cols + j] = (0..r).map(|k| left.at(i, k) * right.at(k, j)).sum();
                }
            }
            Dense::new(rows, cols, data)
        }
        _ => {
            let mut m = gaussian(rng, rows, cols);
            let src = rng.random_range(0..rows);
            let dst = rng.random_range(0..rows);
            for c in 0..cols {
                m.data[dst * cols + c] = m.at(src, c);
            }
            m
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The worked 3×2×2 example, flattened to 3×4.
pub fn worked_example() -> Dense {
    Dense::new(
        3,
        4,
        vec![
            0.9, 0.8, 1.1, 1.2, 0.81, 0.72, 0.99, 1.08, 0.8, 0.9, 1.2, 1.1,
        ],
    )
}
