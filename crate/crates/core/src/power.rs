//! Power-iteration learners: the generalized Hebbian rule of MINC, BYOL's
//! alternating regressions, and the generalized variational power
//! iteration with an NCE or KL matching loss.
//!
//! All updates act on tabular ξ over a shared domain (n = m). Writing
//! `D = diag(px)` and `P` for the joint, the eigen fixed point of ξ is
//! `P Ξ = D Ξ Λᵀ`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dist::JointTable;
use crate::error::{Error, Result};
use crate::linalg::{self, lower_triangle, scale_rows};
use crate::nce::{ranking_loss, RankingMode};

/// Ridge added to the BYOL normal equations when the Gram matrix is
/// ill-conditioned.
pub const BYOL_RIDGE: f64 = 1e-10;
/// Condition number above which the BYOL Gram matrix is reported.
pub const BYOL_MAX_COND: f64 = 1e12;

/// State of one power-iteration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerState {
    #[serde(with = "crate::io::mat")]
    pub xi: Array2<f64>,
    #[serde(with = "crate::io::mat")]
    pub lambda: Array2<f64>,
    #[serde(with = "crate::io::mat")]
    pub a_mat: Array2<f64>,
    #[serde(with = "crate::io::mat")]
    pub target_xi: Array2<f64>,
    /// EMA coefficient of the MINC eigenvalue estimate.
    pub beta: f64,
    /// EMA coefficient of the BYOL target; 0 is a hard copy.
    #[serde(default)]
    pub tau: f64,
    pub step: usize,
}

impl PowerState {
    /// Student and teacher both `xi`, Λ = 0, A = I.
    pub fn new(xi: Array2<f64>, beta: f64) -> Self {
        let d = xi.ncols();
        PowerState {
            target_xi: xi.clone(),
            xi,
            lambda: Array2::zeros((d, d)),
            a_mat: Array2::eye(d),
            beta,
            tau: 0.0,
            step: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.xi.ncols()
    }

    pub fn refresh_teacher(&mut self) {
        self.target_xi = self.xi.clone();
    }
}

fn check_shared(j: &JointTable, s: &PowerState) -> Result<()> {
    if j.n() != j.m() {
        return Err(Error::DimensionMismatch("power iteration needs a shared domain".into()));
    }
    if s.xi.nrows() != j.n() || s.target_xi.dim() != s.xi.dim() {
        return Err(Error::DimensionMismatch(format!("xi {:?} for {} elements", s.xi.dim(), j.n())));
    }
    if s.d() > j.n() {
        return Err(Error::RankOutOfBounds(format!("d = {} > n = {}", s.d(), j.n())));
    }
    Ok(())
}

/// E_px[ξ ξᵀ] = Ξᵀ D Ξ.
pub fn second_moment(j: &JointTable, xi: &Array2<f64>) -> Array2<f64> {
    xi.t().dot(&scale_rows(xi.view(), j.px()))
}

/// `‖T·diag(√py)·ξ − diag(√px)·ξ·Λᵀ‖_F`, i.e. `‖D^{-1/2}(PΞ − DΞΛᵀ)‖_F`.
pub fn fixed_point_residual(j: &JointTable, xi: &Array2<f64>, lambda: &Array2<f64>) -> f64 {
    let lhs = j.p().dot(xi);
    let rhs = scale_rows(xi.dot(&lambda.t()).view(), j.px());
    let r = scale_rows((lhs - rhs).view(), &j.px().mapv(|v| 1.0 / v.sqrt()));
    linalg::fro(r.view())
}

/// Hebbian direction `PΞ − DΞ·LT(Λ)ᵀ` for a given eigenvalue estimate.
pub fn minc_direction(j: &JointTable, xi: &Array2<f64>, lambda: &Array2<f64>) -> Array2<f64> {
    let lt = lower_triangle(lambda.view());
    j.p().dot(xi) - scale_rows(xi.dot(&lt.t()).view(), j.px())
}

/// One MINC update: Λ ← βΛ + (1−β)E[ξξᵀ], then ξ moves along the Hebbian
/// direction with the lower-triangular Λ.
pub fn minc_step(j: &JointTable, s: &PowerState, alpha: f64) -> Result<PowerState> {
    check_shared(j, s)?;
    let mut out = s.clone();
    let m = second_moment(j, &s.xi);
    out.lambda = &s.lambda * s.beta + &m * (1.0 - s.beta);
    // symmetrize away rounding so Λ stays exactly symmetric
    out.lambda = (&out.lambda + &out.lambda.t()) * 0.5;
    let dir = minc_direction(j, &s.xi, &out.lambda);
    out.xi = &s.xi + &(dir * alpha);
    out.target_xi = out.xi.clone();
    out.step += 1;
    Ok(out)
}

/// Closed-form `argmin_Λ E_p‖Λξ(x) − ξ_t(x′)‖²`:
/// `Λ = (Ξ_tᵀ Pᵀ Ξ)(Ξᵀ D Ξ)⁻¹`. When the Gram matrix has condition number
/// above [`BYOL_MAX_COND`] the ridge is applied and a `SingularGram`
/// diagnostic is returned alongside the state.
pub fn byol_lambda_step(j: &JointTable, s: &PowerState) -> Result<(PowerState, Option<Error>)> {
    check_shared(j, s)?;
    let gram = second_moment(j, &s.xi);
    let cross = s.target_xi.t().dot(&j.p().t()).dot(&s.xi);
    let d = s.d();
    let cond = linalg::sym_condition(gram.view());
    let (gram, warning) = if cond > BYOL_MAX_COND || !cond.is_finite() {
        (
            gram + Array2::<f64>::eye(d) * BYOL_RIDGE,
            Some(Error::SingularGram(format!("E[ξξᵀ] condition number {cond:e}; ridge {BYOL_RIDGE:e} applied"))),
        )
    } else {
        (gram, None)
    };
    // Λ G = C  ⇔  G Λᵀ = Cᵀ (G symmetric)
    let lambda_t = linalg::solve(gram.view(), cross.t())?;
    let mut out = s.clone();
    out.lambda = lambda_t.t().to_owned();
    Ok((out, warning))
}

/// Gradient in ξ of `E_p‖Λξ(x) − ξ_t(x′)‖²`: `2(DΞΛᵀ − PΞ_t)Λ`.
pub fn byol_xi_gradient(j: &JointTable, s: &PowerState) -> Array2<f64> {
    let pred = scale_rows(s.xi.dot(&s.lambda.t()).view(), j.px());
    (pred - j.p().dot(&s.target_xi)).dot(&s.lambda) * 2.0
}

/// One gradient step on the BYOL regression in ξ with the target frozen;
/// the target then moves to `τ·target + (1−τ)·ξ`.
pub fn byol_xi_step(j: &JointTable, s: &PowerState, alpha: f64) -> Result<PowerState> {
    check_shared(j, s)?;
    let g = byol_xi_gradient(j, s);
    let mut out = s.clone();
    out.xi = &s.xi - &(g * alpha);
    out.target_xi = &s.target_xi * s.tau + &out.xi * (1.0 - s.tau);
    out.step += 1;
    Ok(out)
}

/// Matching loss of the generalized power iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GvpiLoss {
    /// Ranking NCE with k candidates, exact expectation over negatives.
    Nce { k: usize },
    /// Variational KL: `−E_p[log u] + E_{px⊗py}[u]`.
    Kl,
}

/// Loss and gradients of the generalized power iteration at the current
/// state, with score `u(x, x′) = ψ_t(x′)ᵀ A ψ(x)` and the teacher frozen.
#[derive(Debug, Clone)]
pub struct GvpiReport {
    pub value: f64,
    pub grad_xi: Array2<f64>,
    pub grad_a: Array2<f64>,
}

impl GvpiReport {
    pub fn grad_norm(&self) -> f64 {
        self.grad_xi.iter().chain(self.grad_a.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Student scores `u = Ψ Aᵀ Ψ_tᵀ`.
pub fn gvpi_scores(s: &PowerState) -> Array2<f64> {
    s.xi.dot(&s.a_mat.t()).dot(&s.target_xi.t())
}

pub fn gvpi_objective(j: &JointTable, s: &PowerState, loss: GvpiLoss) -> Result<GvpiReport> {
    check_shared(j, s)?;
    let u = gvpi_scores(s);
    if let Some(bad) = u.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::NonPositiveScore(format!("score {bad:e}")));
    }
    // d value / d u
    let (value, gu) = match loss {
        GvpiLoss::Kl => {
            let q = j.product();
            let value: f64 =
                j.p().iter().zip(u.iter()).filter(|(&p, _)| p > 0.0).map(|(&p, &v)| -p * v.ln()).sum::<f64>()
                    + (&q * &u).sum();
            let gu = Array2::from_shape_fn(u.raw_dim(), |(a, b)| -j.p()[[a, b]] / u[[a, b]] + q[[a, b]]);
            (value, gu)
        }
        GvpiLoss::Nce { k } => {
            let ell = u.mapv(f64::ln);
            let out = ranking_loss(j.p(), j.py(), &ell, k, RankingMode::Expected)?;
            (out.value, out.grad / &u)
        }
    };
    // u = Ψ Aᵀ Ψ_tᵀ: ∂/∂Ψ = G Ψ_t A, ∂/∂A = Ψ_tᵀ Gᵀ Ψ
    let grad_xi = gu.dot(&s.target_xi).dot(&s.a_mat);
    let grad_a = s.target_xi.t().dot(&gu.t()).dot(&s.xi);
    Ok(GvpiReport { value, grad_xi, grad_a })
}

/// Halvings tried when a step would leave the positive-score region.
const MAX_HALVINGS: usize = 60;

/// One gradient step on (ψ, A) with the teacher frozen. A step that would
/// make a score non-positive is halved until it does not; the teacher is
/// not refreshed here (see [`PowerState::refresh_teacher`]).
pub fn gvpi_step(j: &JointTable, s: &PowerState, loss: GvpiLoss, alpha: f64) -> Result<PowerState> {
    let rep = gvpi_objective(j, s, loss)?;
    let mut step = alpha;
    for _ in 0..MAX_HALVINGS {
        let mut out = s.clone();
        out.xi = &s.xi - &(&rep.grad_xi * step);
        out.a_mat = &s.a_mat - &(&rep.grad_a * step);
        if gvpi_scores(&out).iter().all(|&v| v > 0.0) {
            out.step += 1;
            return Ok(out);
        }
        step *= 0.5;
    }
    Err(Error::NonPositiveScore("no positive step found".into()))
}

/// Fitted conditional `P̂(x′|x) ∝ py(x′)·u(x, x′)`, normalized per row.
pub fn gvpi_conditional(j: &JointTable, s: &PowerState) -> Array2<f64> {
    let mut c = linalg::scale_cols(gvpi_scores(s).view(), j.py());
    for mut row in c.rows_mut() {
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    c
}

/// Eigenvalue estimate reported for a converged ξ: diag of Λ.
pub fn lambda_diagonal(s: &PowerState) -> Array1<f64> {
    s.lambda.diag().to_owned()
}
