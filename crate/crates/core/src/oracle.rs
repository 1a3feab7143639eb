//! Ground truth for every learner: the exact truncated SVD of T, its
//! Eckart–Young tails, and rotation-invariant subspace comparisons.

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dist::{t_matrix, JointTable, TMatrix};
use crate::error::{Error, Result};
use crate::linalg::{self, scale_rows};

/// Singular values closer than this are treated as one cluster.
pub const CLUSTER_GAP: f64 = 1e-9;

/// Truncated SVD of T: `t ≈ u · diag(sigma) · vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralBasis {
    #[serde(with = "crate::io::vec1")]
    pub sigma: Array1<f64>,
    #[serde(with = "crate::io::mat")]
    pub u: Array2<f64>,
    #[serde(with = "crate::io::mat")]
    pub v: Array2<f64>,
}

impl SpectralBasis {
    pub fn d(&self) -> usize {
        self.sigma.len()
    }

    /// Tabular factors with `phi ψᵀ` equal to the rank-d part of the ratio
    /// matrix: `phi = u √σ / √px`, `psi = v √σ / √py`.
    pub fn ratio_factors(&self, j: &JointTable) -> (Array2<f64>, Array2<f64>) {
        let root = self.sigma.mapv(f64::sqrt);
        let phi = linalg::scale_cols(scale_rows(self.u.view(), &j.px().mapv(|v| 1.0 / v.sqrt())).view(), &root);
        let psi = linalg::scale_cols(scale_rows(self.v.view(), &j.py().mapv(|v| 1.0 / v.sqrt())).view(), &root);
        (phi, psi)
    }

    /// Indices `[start, end)` of each cluster of (numerically) equal
    /// singular values.
    pub fn clusters(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.d() {
            if i == self.d() || (self.sigma[i - 1] - self.sigma[i]).abs() >= CLUSTER_GAP {
                out.push((start, i));
                start = i;
            }
        }
        out
    }
}

fn check_rank(t: &TMatrix, d: usize) -> Result<()> {
    let (n, m) = t.t.dim();
    if d == 0 || d > n.min(m) {
        return Err(Error::RankOutOfBounds(format!("d = {d} for a {n}×{m} operator")));
    }
    Ok(())
}

/// Top-d singular triplets of T.
pub fn svd_truncated(t: &TMatrix, d: usize) -> Result<SpectralBasis> {
    check_rank(t, d)?;
    let f = linalg::svd(t.t.view());
    Ok(SpectralBasis {
        sigma: f.s.slice(s![..d]).to_owned(),
        u: f.u.slice(s![.., ..d]).to_owned(),
        v: f.v.slice(s![.., ..d]).to_owned(),
    })
}

/// Convenience: oracle basis straight from a table.
pub fn oracle(j: &JointTable, d: usize) -> Result<SpectralBasis> {
    svd_truncated(&t_matrix(j), d)
}

/// All singular values of T, descending.
pub fn spectrum(t: &TMatrix) -> Array1<f64> {
    linalg::svd(t.t.view()).s
}

/// Σ_{i>d} σᵢ², the best achievable rank-d Frobenius residual.
pub fn eckart_young_tail(t: &TMatrix, d: usize) -> Result<f64> {
    check_rank(t, d)?;
    Ok(spectrum(t).iter().skip(d).map(|s| s * s).sum())
}

/// Principal angles between two column spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceMetric {
    #[serde(with = "crate::io::vec1")]
    pub principal_angles: Array1<f64>,
    pub chordal_distance: f64,
}

impl SubspaceMetric {
    pub fn max_angle(&self) -> f64 {
        self.principal_angles.iter().cloned().fold(0.0, f64::max)
    }
}

/// Relative rank threshold for the weighted inputs.
pub const RANK_TOL: f64 = 1e-10;

/// Angles between span(diag(weight)·A) and span(diag(weight)·B).
///
/// Cosines come from the singular values of `Q_Aᵀ Q_B` and sines from the
/// part of `Q_B` outside span(A); small angles are read off the sines so
/// they stay accurate near zero.
pub fn principal_angles(a: ArrayView2<f64>, b: ArrayView2<f64>, weight: &Array1<f64>) -> Result<SubspaceMetric> {
    if a.nrows() != weight.len() || b.nrows() != weight.len() {
        return Err(Error::DimensionMismatch(format!(
            "bases with {} and {} rows, weight of length {}",
            a.nrows(),
            b.nrows(),
            weight.len()
        )));
    }
    let qa = linalg::orthonormal_basis(scale_rows(a, weight).view(), RANK_TOL)?;
    let qb = linalg::orthonormal_basis(scale_rows(b, weight).view(), RANK_TOL)?;
    // let the smaller span play the role of B
    let (qa, qb) = if qa.ncols() >= qb.ncols() { (qa, qb) } else { (qb, qa) };
    let k = qb.ncols();
    let cross = qa.t().dot(&qb);
    let cos = linalg::svd(cross.view()).s;
    let resid = &qb - &qa.dot(&cross);
    let mut sin = linalg::svd(resid.view()).s.to_vec();
    sin.truncate(k);
    sin.sort_by(|x, y| x.total_cmp(y));
    let angles: Array1<f64> = (0..k)
        .map(|i| {
            let si = sin[i].min(1.0);
            if si < std::f64::consts::FRAC_1_SQRT_2 {
                si.asin()
            } else {
                cos[i].clamp(-1.0, 1.0).acos()
            }
        })
        .collect();
    let chordal = angles.iter().map(|t| t.sin().powi(2)).sum::<f64>().sqrt();
    Ok(SubspaceMetric { principal_angles: angles, chordal_distance: chordal })
}

/// Largest angle between the weighted span of tabular features `phi` and
/// the oracle's left singular subspace.
pub fn angle_to_oracle(j: &JointTable, phi: ArrayView2<f64>, basis: &SpectralBasis) -> Result<f64> {
    let w = j.px().mapv(f64::sqrt);
    let ones = Array1::ones(j.n());
    Ok(principal_angles(scale_rows(phi, &w).view(), basis.u.view(), &ones)?.max_angle())
}

/// ‖t − diag(√px)·phi·psiᵀ·diag(√py)‖²_F.
pub fn fit_residual(j: &JointTable, phi: ArrayView2<f64>, psi: ArrayView2<f64>) -> Result<f64> {
    if phi.nrows() != j.n() || psi.nrows() != j.m() || phi.ncols() != psi.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "phi {:?}, psi {:?} for a {}×{} table",
            phi.dim(),
            psi.dim(),
            j.n(),
            j.m()
        )));
    }
    let t = t_matrix(j);
    let s = phi.dot(&psi.t());
    let mut acc = 0.0;
    for ((a, b), &tv) in t.t.indexed_iter() {
        let r = tv - t.sqrt_px[a] * t.sqrt_py[b] * s[[a, b]];
        acc += r * r;
    }
    Ok(acc)
}
