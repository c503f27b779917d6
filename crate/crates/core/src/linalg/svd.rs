//! Singular value decomposition by one-sided Jacobi rotations, plus the
//! truncation and error helpers used for low-rank approximation.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const SWEEP_TOLERANCE: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;

/// Full SVD `w = U · diag(sigma) · Vᵀ` with `U` d×d and `V` k×k.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rows(&self) -> usize {
        self.u.rows()
    }

    pub fn cols(&self) -> usize {
        self.v.rows()
    }

    pub fn max_rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U_r · Σ_r · V_rᵀ` for the leading `r` singular triplets.
    pub fn reconstruct(&self, r: usize) -> Result<Matrix> {
        let (u_r, sigma_r, vt_r) = truncate_svd(self, r)?;
        u_r.matmul(&sigma_r)?.matmul(&vt_r)
    }

    /// `sqrt(Σ_{i>r} σᵢ²)`: Frobenius error of the rank-`r` truncation.
    pub fn tail_error(&self, r: usize) -> f64 {
        self.sigma
            .iter()
            .skip(r)
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ErrorMetric {
    #[default]
    Frobenius,
    Spectral,
}

/// Column-major working copy: `cols[j]` is column `j`.
struct Columns {
    len: usize,
    cols: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthogonalizes the columns of `a` in place, accumulating the rotations
/// in `v`. Returns the number of sweeps used.
fn jacobi_orthogonalize(a: &mut Columns, v: &mut Columns) -> Result<usize> {
    let n = a.cols.len();
    let mut off_norm = 0.0;
    for sweep in 1..=MAX_SWEEPS {
        off_norm = 0.0_f64;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a.cols[p], &a.cols[p]);
                let beta = dot(&a.cols[q], &a.cols[q]);
                let gamma = dot(&a.cols[p], &a.cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                off_norm = off_norm.max(rel);
                if rel <= SWEEP_TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a.cols, p, q, c, s);
                rotate(&mut v.cols, p, q, c, s);
            }
        }
        if !rotated {
            return Ok(sweep);
        }
    }
    Err(Error::NoConvergence {
        sweeps: MAX_SWEEPS,
        off_norm,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Extends orthonormal `basis` (vectors of length `dim`) to a full basis.
fn complete_basis(basis: &mut Vec<Vec<f64>>, dim: usize) {
    let mut e = 0;
    while basis.len() < dim && e < dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        e += 1;
        // Two Gram-Schmidt passes keep the completion orthogonal to ~eps.
        for _ in 0..2 {
            for b in basis.iter() {
                let proj = dot(&cand, b);
                for (c, bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 1e-8 {
            cand.iter_mut().for_each(|c| *c /= norm);
            basis.push(cand);
        }
    }
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// SVD of a tall-or-square matrix (`d ≥ k`).
fn svd_tall(w: &Matrix) -> Result<SvdResult> {
    let (d, k) = w.shape();
    let mut a = Columns {
        len: d,
        cols: (0..k).map(|j| w.column(j)).collect(),
    };
    let mut v = Columns {
        len: k,
        cols: (0..k)
            .map(|j| {
                let mut e = vec![0.0; k];
                e[j] = 1.0;
                e
            })
            .collect(),
    };
    jacobi_orthogonalize(&mut a, &mut v)?;

    let norms: Vec<f64> = a.cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let sigma_max = norms[order[0]];
    let null_threshold = sigma_max * f64::EPSILON * d.max(k) as f64;

    let mut sigma = Vec::with_capacity(k);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut null_slots = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        v_cols.push(v.cols[j].clone());
        if s > null_threshold && s > 0.0 {
            sigma.push(s);
            u_cols.push(a.cols[j].iter().map(|x| x / s).collect());
        } else {
            // Numerically null direction: sigma reported as computed, U column
            // filled by basis completion below.
            sigma.push(s);
            null_slots.push(slot);
        }
    }
    let mut basis = u_cols;
    let kept = basis.len();
    complete_basis(&mut basis, a.len);
    // Reorder so completion vectors occupy the null slots in sigma order.
    let mut completion = basis.split_off(kept).into_iter();
    let mut kept_iter = basis.into_iter();
    let mut u_final = Vec::with_capacity(d);
    for slot in 0..k {
        if null_slots.contains(&slot) {
            u_final.push(completion.next().expect("basis completion"));
        } else {
            u_final.push(kept_iter.next().expect("kept column"));
        }
    }
    u_final.extend(completion);
    debug_assert_eq!(u_final.len(), d);

    Ok(SvdResult {
        u: columns_to_matrix(&u_final, d),
        sigma,
        v: columns_to_matrix(&v_cols, k),
    })
}

/// Full SVD via one-sided Jacobi on the thinner side.
pub fn svd(w: &Matrix) -> Result<SvdResult> {
    if !w.is_finite() {
        return Err(Error::Numeric("svd input contains non-finite entries".into()));
    }
    if w.rows() >= w.cols() {
        svd_tall(w)
    } else {
        let t = svd_tall(&w.transpose())?;
        Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

/// Leading-`r` factors `(U_r, Σ_r, V_rᵀ)`.
pub fn truncate_svd(s: &SvdResult, r: usize) -> Result<(Matrix, Matrix, Matrix)> {
    if r == 0 || r > s.max_rank() {
        return Err(Error::Argument(format!(
            "truncation rank {r} outside [1, {}]",
            s.max_rank()
        )));
    }
    let (d, k) = (s.rows(), s.cols());
    let u_r = s.u.block(0, d, 0, r);
    let sigma_r = Matrix::from_diag(&s.sigma[..r]);
    let vt_r = Matrix::from_fn(r, k, |i, j| s.v.get(j, i));
    Ok((u_r, sigma_r, vt_r))
}

/// Distance between `w` and its approximation `w_bar`.
pub fn approx_error(w: &Matrix, w_bar: &Matrix, metric: ErrorMetric) -> Result<f64> {
    let diff = w.sub(w_bar)?;
    match metric {
        ErrorMetric::Frobenius => Ok(diff.frobenius_norm()),
        ErrorMetric::Spectral => {
            if diff.max_abs() == 0.0 {
                return Ok(0.0);
            }
            Ok(svd(&diff)?.sigma[0])
        }
    }
}
