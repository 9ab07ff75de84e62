//! Moore–Penrose pseudo-inverses.
//!
//! `pinv_iterate` is the Ben-Israel–Cohen hyperpower iteration of order two
//! (`X ← 2X − XAX`). Layer queries only ever invert a single vector, so the
//! production path is the closed form in [`vector_pinv`] / [`build_query`].

use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{matmul_raw, Tensor, TensorError};

/// Activations with a smaller L2 norm have no usable pseudo-inverse.
pub const DEGENERATE_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PinvError {
    #[error("pseudo-inverse of the zero matrix requested")]
    ZeroMatrix,
    #[error("input must be a finite, non-empty matrix (got shape {0:?})")]
    InvalidInput(Vec<usize>),
    #[error("hyperpower iteration did not converge after {iterations} steps: {residuals:?}")]
    NonConvergence {
        iterations: usize,
        residuals: MoorePenroseResiduals,
    },
    #[error("vector norm {0:e} is below the degenerate floor")]
    NearZeroVector(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PinvConfig {
    pub max_iters: usize,
    pub residual_tol: f64,
    pub init_scale_safety: f64,
}

impl Default for PinvConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            residual_tol: 1e-8,
            init_scale_safety: 0.9,
        }
    }
}

/// Relative residuals of the four Penrose conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoorePenroseResiduals {
    /// ‖AXA − A‖ / ‖A‖
    pub axa: f64,
    /// ‖XAX − X‖ / ‖X‖
    pub xax: f64,
    /// ‖AX − (AX)ᵀ‖ / ‖AX‖
    pub ax_sym: f64,
    /// ‖XA − (XA)ᵀ‖ / ‖XA‖
    pub xa_sym: f64,
}

impl MoorePenroseResiduals {
    pub fn max(&self) -> f64 {
        self.axa.max(self.xax).max(self.ax_sym).max(self.xa_sym)
    }
}

#[derive(Debug, Clone)]
pub struct PinvOutput {
    pub pinv: Tensor,
    pub iterations: usize,
    pub residuals: MoorePenroseResiduals,
    /// `‖AXA − A‖ / ‖A‖` after each iteration.
    pub history: Vec<f64>,
}

// Small dense helpers over row-major buffers.
fn fro(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

fn asym_norm(a: &[f64], n: usize) -> f64 {
    diff_norm(a, &transpose(a, n, n))
}

fn rel(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Penrose residuals of a candidate `x` (n×m) for `a` (m×n).
pub fn penrose_residuals(a: &Tensor, x: &Tensor) -> MoorePenroseResiduals {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let (a, x) = (a.data(), x.data());
    let ax = matmul_raw(a, x, m, n, m);
    let xa = matmul_raw(x, a, n, m, n);
    let axa = matmul_raw(&ax, a, m, m, n);
    let xax = matmul_raw(&xa, x, n, n, m);
    MoorePenroseResiduals {
        axa: rel(diff_norm(&axa, a), fro(a)),
        xax: rel(diff_norm(&xax, x), fro(x)),
        ax_sym: rel(asym_norm(&ax, m), fro(&ax)),
        xa_sym: rel(asym_norm(&xa, n), fro(&xa)),
    }
}

/// Hyperpower (Newton–Schulz) pseudo-inverse.
///
/// Starts from `X₀ = α Aᵀ` with `α = safety · 2 / (‖A‖₁ ‖A‖_∞)`, which keeps
/// `α σ_max² < 2` and guarantees convergence to `A⁺`.
pub fn pinv_iterate(a: &Tensor, cfg: &PinvConfig) -> Result<PinvOutput, PinvError> {
    if a.rank() != 2 || a.data().iter().any(|v| !v.is_finite()) {
        return Err(PinvError::InvalidInput(a.shape().to_vec()));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    if ad.iter().all(|&v| v == 0.0) {
        return Err(PinvError::ZeroMatrix);
    }
    let norm1 = (0..n)
        .map(|j| (0..m).map(|i| ad[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let norm_inf = (0..m)
        .map(|i| ad[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let alpha = cfg.init_scale_safety * 2.0 / (norm1 * norm_inf);
    let mut x: Vec<f64> = transpose(ad, m, n).into_iter().map(|v| v * alpha).collect();
    let a_norm = fro(ad);
    let mut history = Vec::new();

    for it in 1..=cfg.max_iters {
        // X ← 2X − X A X
        let xa = matmul_raw(&x, ad, n, m, n);
        let xax = matmul_raw(&xa, &x, n, n, m);
        for (xi, yi) in x.iter_mut().zip(&xax) {
            *xi = 2.0 * *xi - yi;
        }
        let ax = matmul_raw(ad, &x, m, n, m);
        let axa = matmul_raw(&ax, ad, m, m, n);
        let r = diff_norm(&axa, ad) / a_norm;
        history.push(r);
        if r < cfg.residual_tol {
            let pinv = Tensor::matrix(n, m, x)?;
            let residuals = penrose_residuals(a, &pinv);
            return Ok(PinvOutput {
                pinv,
                iterations: it,
                residuals,
                history,
            });
        }
    }
    let pinv = Tensor::matrix(n, m, x)?;
    Err(PinvError::NonConvergence {
        iterations: cfg.max_iters,
        residuals: penrose_residuals(a, &pinv),
    })
}

/// Closed-form pseudo-inverse of a vector, `xᵀ / ‖x‖²`, as a 1×n row.
pub fn vector_pinv(x: &Tensor) -> Result<Tensor, PinvError> {
    let sq: f64 = x.data().iter().map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm.is_nan() || norm <= DEGENERATE_NORM_FLOOR {
        return Err(PinvError::NearZeroVector(norm));
    }
    Ok(Tensor::matrix(1, x.numel(), x.data().iter().map(|v| v / sq).collect())?)
}

/// Rank-one query `y xᵀ / ‖x‖²`, the minimum-norm matrix with `W x = y`.
/// Shape is `len(y) × len(x)`.
pub fn build_query(x: &Tensor, y: &Tensor) -> Result<Tensor, PinvError> {
    let xp = vector_pinv(x)?;
    let (m, n) = (y.numel(), x.numel());
    let mut data = Vec::with_capacity(m * n);
    for &yi in y.data() {
        data.extend(xp.data().iter().map(|&v| yi * v));
    }
    Ok(Tensor::matrix(m, n, data)?)
}

/// Differentiable [`build_query`] on a tape. Registers no parameters.
pub fn build_query_var(tape: &mut Tape, x: Var, y: Var) -> Result<Var, PinvError> {
    let norm = tape.value(x).frobenius_norm();
    if norm.is_nan() || norm <= DEGENERATE_NORM_FLOOR {
        return Err(PinvError::NearZeroVector(norm));
    }
    let sq = tape.mul(x, x)?;
    let sq = tape.sum(sq)?;
    let inv = tape.recip(sq)?;
    let xp = tape.mul(x, inv)?;
    Ok(tape.outer(y, xp)?)
}
