//! Low-rank adapters over a frozen dense layer.
//!
//! A [`LoraLinear`] keeps the pretrained weight `W` (d×k) untouched and learns
//! the update as a product `B·A` with `B` d×r and `A` r×k:
//!
//! ```text
//! f(x) = W·x + B·(A·x) + bias
//! ```
//!
//! `A` starts Gaussian and `B` starts at zero, so a fresh adapter is an exact
//! no-op. After training the product can be folded into `W` ([`LoraLinear::merge`]),
//! which removes the adapter path from inference entirely.

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, svd, truncate_svd, Matrix, Rng};

/// Default standard deviation of the Gaussian `A` initialization.
pub const DEFAULT_INIT_STDDEV: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct LoraLinear {
    w: Matrix,
    bias: Option<Vec<f64>>,
    a: Matrix,
    b: Matrix,
    rank: usize,
    scale: f64,
    merged: bool,
}

/// Gradients of a [`LoraLinear`] forward pass. `W` never receives one.
#[derive(Clone, Debug)]
pub struct LoraGrads {
    pub grad_a: Matrix,
    pub grad_b: Matrix,
    pub grad_x: Matrix,
}

pub(crate) fn check_rank(rank: usize, d: usize, k: usize) -> Result<()> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::Argument(format!(
            "LoRA rank {rank} outside [1, {}] for a {d}x{k} weight",
            d.min(k)
        )));
    }
    Ok(())
}

impl LoraLinear {
    /// Wraps `w` with a rank-`rank` adapter: `A ~ N(0, stddev²)`, `B = 0`.
    pub fn init(w: Matrix, rank: usize, stddev: f64, rng: &mut Rng) -> Result<Self> {
        let (d, k) = w.shape();
        check_rank(rank, d, k)?;
        let a = gaussian_matrix(rank, k, stddev, rng)?;
        Ok(Self {
            b: Matrix::zeros(d, rank),
            w,
            bias: None,
            a,
            rank,
            scale: 1.0,
            merged: false,
        })
    }

    /// Builds a layer from explicit factors, e.g. when restoring a trained adapter.
    pub fn from_parts(w: Matrix, a: Matrix, b: Matrix) -> Result<Self> {
        let (d, k) = w.shape();
        let rank = a.rows();
        check_rank(rank, d, k)?;
        if a.cols() != k || b.shape() != (d, rank) {
            return Err(Error::shape(
                "LoraLinear::from_parts",
                format!(
                    "W {d}x{k} needs A {rank}x{k} and B {d}x{rank}, got A {:?} and B {:?}",
                    a.shape(),
                    b.shape()
                ),
            ));
        }
        Ok(Self {
            w,
            bias: None,
            a,
            b,
            rank,
            scale: 1.0,
            merged: false,
        })
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.w.rows() {
            return Err(Error::shape(
                "LoraLinear::with_bias",
                format!("bias length {} for {} outputs", bias.len(), self.w.rows()),
            ));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    /// Multiplier on the adapter path. Defaults to 1 (no scaling).
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn in_features(&self) -> usize {
        self.w.cols()
    }

    pub fn out_features(&self) -> usize {
        self.w.rows()
    }

    /// `scale · B·A`.
    pub fn delta(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("factor shapes checked at construction")
            .scale(self.scale)
    }

    pub fn budget(&self) -> ParamBudget {
        param_budget(self.w.rows(), self.w.cols(), self.rank)
            .expect("rank validated at construction")
    }

    fn add_bias(&self, out: &mut Matrix) {
        if let Some(bias) = &self.bias {
            let n = out.cols();
            for (i, &bi) in bias.iter().enumerate() {
                out.row_mut(i).iter_mut().for_each(|v| *v += bi);
            }
            debug_assert_eq!(n, out.cols());
        }
    }

    /// `W·x + scale·B·(A·x) + bias` for column inputs `x` (k×n).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.in_features() {
            return Err(Error::shape(
                "lora_forward",
                format!("expected {} input rows, got {}", self.in_features(), x.rows()),
            ));
        }
        let mut out = self.w.matmul(x)?;
        if !self.merged {
            let ax = self.a.matmul(x)?;
            let bax = self.b.matmul(&ax)?;
            if self.scale == 1.0 {
                out.add_assign(&bax)?;
            } else {
                out.add_assign(&bax.scale(self.scale))?;
            }
        }
        self.add_bias(&mut out);
        Ok(out)
    }

    /// Gradients for `A`, `B` and the input given `upstream = ∂L/∂f` (d×n).
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<LoraGrads> {
        let (d, k) = self.w.shape();
        if x.rows() != k || upstream.rows() != d || upstream.cols() != x.cols() {
            return Err(Error::shape(
                "lora_backward",
                format!(
                    "x {:?}, upstream {:?} for a {d}x{k} layer",
                    x.shape(),
                    upstream.shape()
                ),
            ));
        }
        let ax = self.a.matmul(x)?;
        let bt_up = self.b.matmul_tn(upstream)?;
        let grad_b = upstream.matmul_nt(&ax)?.scale(self.scale);
        let grad_a = bt_up.matmul_nt(x)?.scale(self.scale);
        let mut grad_x = self.w.matmul_tn(upstream)?;
        if !self.merged {
            grad_x.add_assign(&self.a.matmul_tn(&bt_up)?.scale(self.scale))?;
        }
        Ok(LoraGrads {
            grad_a,
            grad_b,
            grad_x,
        })
    }

    /// Folds `B·A` into `W`. Returns the merged weight.
    pub fn merge(&mut self) -> Result<&Matrix> {
        if self.merged {
            return Err(Error::State("adapter already merged".into()));
        }
        self.w.add_assign(&self.delta())?;
        self.merged = true;
        Ok(&self.w)
    }

    /// Subtracts `B·A` back out of `W`.
    pub fn unmerge(&mut self) -> Result<&Matrix> {
        if !self.merged {
            return Err(Error::State("adapter is not merged".into()));
        }
        self.w.sub_assign(&self.delta())?;
        self.merged = false;
        Ok(&self.w)
    }
}

/// Dense vs. adapter parameter counts for one d×k weight at rank `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamBudget {
    pub dense_count: u64,
    pub lora_count: u64,
    pub compressed_ratio: f64,
}

impl ParamBudget {
    /// Whether the adapter has fewer trainable scalars than the dense weight.
    pub fn reduces_parameters(&self) -> bool {
        self.lora_count < self.dense_count
    }
}

/// `p = r(d+k) / (dk)`.
pub fn param_budget(d: usize, k: usize, rank: usize) -> Result<ParamBudget> {
    if d == 0 || k == 0 {
        return Err(Error::Argument(format!("dimensions must be positive, got {d}x{k}")));
    }
    check_rank(rank, d, k)?;
    let dense_count = d as u64 * k as u64;
    let lora_count = rank as u64 * (d as u64 + k as u64);
    Ok(ParamBudget {
        dense_count,
        lora_count,
        compressed_ratio: lora_count as f64 / dense_count as f64,
    })
}

/// Factors `ΔW ≈ B̄·Ā` from its rank-`r` SVD truncation, splitting `Σ_r`
/// symmetrically: `B̄ = U_r·Σ_r^½`, `Ā = Σ_r^½·V_rᵀ`.
pub fn lora_from_svd(delta_w: &Matrix, rank: usize) -> Result<(Matrix, Matrix)> {
    let (d, k) = delta_w.shape();
    check_rank(rank, d, k)?;
    let s = svd(delta_w)?;
    let (u_r, sigma_r, vt_r) = truncate_svd(&s, rank)?;
    let half: Vec<f64> = (0..rank).map(|i| sigma_r.get(i, i).sqrt()).collect();
    let b_bar = Matrix::from_fn(d, rank, |i, j| u_r.get(i, j) * half[j]);
    let a_bar = Matrix::from_fn(rank, k, |i, j| half[i] * vt_r.get(i, j));
    Ok((b_bar, a_bar))
}
