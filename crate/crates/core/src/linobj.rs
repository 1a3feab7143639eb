//! Direct spectral objectives on tabular linear features: value and exact
//! gradient, in full-population or sampled form, plus the minibatch-bias
//! probe.
//!
//! Every loss is reported in minimized form. A score is `S = φ ψᵀ`; the
//! log-based losses read a positive score `u = link(S)`.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{t_matrix, JointTable, PairBatch, PairSampler};
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, softplus};
use crate::nce::{ranking_loss, RankingMode};

/// Tabular linear features, one row per domain element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprParams {
    #[serde(with = "crate::io::mat")]
    pub phi: Array2<f64>,
    #[serde(with = "crate::io::mat")]
    pub psi: Array2<f64>,
}

impl ReprParams {
    pub fn new(phi: Array2<f64>, psi: Array2<f64>) -> Self {
        ReprParams { phi, psi }
    }

    /// Shared features for a symmetric objective on a single domain.
    pub fn tied(phi: Array2<f64>) -> Self {
        ReprParams { psi: phi.clone(), phi }
    }

    pub fn d(&self) -> usize {
        self.phi.ncols()
    }

    pub fn scores(&self) -> Array2<f64> {
        self.phi.dot(&self.psi.t())
    }
}

/// Loss value with gradients for both feature tables.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_phi: Array2<f64>,
    pub grad_psi: Array2<f64>,
}

impl LossReport {
    pub fn grad_norm(&self) -> f64 {
        (self.grad_phi.iter().chain(self.grad_psi.iter()).map(|g| g * g).sum::<f64>()).sqrt()
    }
}

/// How a log-based loss turns a raw score into a positive one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ScoreLink {
    /// `u = softplus(S)`, always positive.
    #[default]
    Softplus,
    /// `u = S`; a non-positive score is an error.
    Raw,
}

impl ScoreLink {
    /// `(u, du/dS)`.
    pub fn apply(self, s: f64) -> Result<(f64, f64)> {
        match self {
            ScoreLink::Softplus => Ok((softplus(s), sigmoid(s))),
            ScoreLink::Raw if s > 0.0 => Ok((s, 1.0)),
            ScoreLink::Raw => Err(Error::NonPositiveScore(format!("score {s:e}"))),
        }
    }

    /// Inverse map, used to build parameters with a prescribed u.
    pub fn inverse(self, u: f64) -> f64 {
        match self {
            ScoreLink::Softplus => u + (-(-u).exp_m1()).ln(),
            ScoreLink::Raw => u,
        }
    }
}

/// Weighted pair lists realizing the two expectations of every objective:
/// positives under p and negatives under px ⊗ py.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPairs {
    pub pos: Vec<(usize, usize, f64)>,
    pub neg: Vec<(usize, usize, f64)>,
}

impl WeightedPairs {
    /// Every pair with its exact probability.
    pub fn exact(j: &JointTable) -> Self {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for ((x, y), &w) in j.p().indexed_iter() {
            if w > 0.0 {
                pos.push((x, y, w));
            }
            neg.push((x, y, j.px()[x] * j.py()[y]));
        }
        WeightedPairs { pos, neg }
    }

    /// Sample means over a batch.
    pub fn from_batch(b: &PairBatch) -> Self {
        let wp = 1.0 / b.pos_pairs.len().max(1) as f64;
        let wn = 1.0 / b.neg_pairs.len().max(1) as f64;
        WeightedPairs {
            pos: b.pos_pairs.iter().map(|&(x, y)| (x, y, wp)).collect(),
            neg: b.neg_pairs.iter().map(|&(x, y)| (x, y, wn)).collect(),
        }
    }
}

/// Where expectations come from.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    Exact,
    Batch(&'a PairBatch),
}

impl Estimator<'_> {
    fn pairs(&self, j: &JointTable) -> WeightedPairs {
        match self {
            Estimator::Exact => WeightedPairs::exact(j),
            Estimator::Batch(b) => WeightedPairs::from_batch(b),
        }
    }
}

fn check_dims(j: &JointTable, p: &ReprParams) -> Result<()> {
    if p.phi.nrows() != j.n() || p.psi.nrows() != j.m() || p.phi.ncols() != p.psi.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "phi {:?}, psi {:?} for a {}×{} table",
            p.phi.dim(),
            p.psi.dim(),
            j.n(),
            j.m()
        )));
    }
    Ok(())
}

fn check_symmetric(j: &JointTable, p: &ReprParams) -> Result<()> {
    if j.n() != j.m() || p.phi.nrows() != j.n() {
        return Err(Error::DimensionMismatch("symmetric objective needs a shared domain".into()));
    }
    Ok(())
}

fn score(p: &ReprParams, x: usize, y: usize) -> f64 {
    p.phi.row(x).dot(&p.psi.row(y))
}

/// Scatter `g · ∂S(x,y)` into the two gradient tables.
fn push_score_grad(p: &ReprParams, gphi: &mut Array2<f64>, gpsi: &mut Array2<f64>, x: usize, y: usize, g: f64) {
    if g == 0.0 {
        return;
    }
    gphi.row_mut(x).scaled_add(g, &p.psi.row(y));
    gpsi.row_mut(y).scaled_add(g, &p.phi.row(x));
}

/// ‖T‖²_F − 2·E_p[S] + E_{px⊗py}[S²]; equals ‖T − √px·S·√pyᵀ‖²_F in
/// exact mode.
pub fn loss_spectral_contrastive(j: &JointTable, params: &ReprParams, est: Estimator) -> Result<LossReport> {
    check_dims(j, params)?;
    let pairs = est.pairs(j);
    let t2: f64 = t_matrix(j).t.iter().map(|v| v * v).sum();
    pairwise_loss(params, &pairs, t2, |s| (-2.0 * s, -2.0), |s| (s * s, 2.0 * s))
}

/// χ² variational objective, `−(2E_p[u] − E_{px⊗py}[u²])` with raw `u = S`.
fn loss_chisq(params: &ReprParams, pairs: &WeightedPairs) -> Result<LossReport> {
    pairwise_loss(params, pairs, 0.0, |s| (-2.0 * s, -2.0), |s| (s * s, 2.0 * s))
}

/// Sum `w·f(S)` over positives and `w·g(S)` over negatives, where the
/// closures return `(value, derivative)`.
fn pairwise_loss(
    params: &ReprParams,
    pairs: &WeightedPairs,
    constant: f64,
    fpos: impl Fn(f64) -> (f64, f64),
    fneg: impl Fn(f64) -> (f64, f64),
) -> Result<LossReport> {
    let mut gphi = Array2::zeros(params.phi.raw_dim());
    let mut gpsi = Array2::zeros(params.psi.raw_dim());
    let mut value = constant;
    for &(x, y, w) in &pairs.pos {
        let (v, dv) = fpos(score(params, x, y));
        value += w * v;
        push_score_grad(params, &mut gphi, &mut gpsi, x, y, w * dv);
    }
    for &(x, y, w) in &pairs.neg {
        let (v, dv) = fneg(score(params, x, y));
        value += w * v;
        push_score_grad(params, &mut gphi, &mut gpsi, x, y, w * dv);
    }
    Ok(LossReport { value, grad_phi: gphi, grad_psi: gpsi })
}

/// Same as [`pairwise_loss`] but the closures may fail.
fn pairwise_loss_fallible(
    params: &ReprParams,
    pairs: &WeightedPairs,
    fpos: impl Fn(f64) -> Result<(f64, f64)>,
    fneg: impl Fn(f64) -> Result<(f64, f64)>,
) -> Result<LossReport> {
    let mut gphi = Array2::zeros(params.phi.raw_dim());
    let mut gpsi = Array2::zeros(params.psi.raw_dim());
    let mut value = 0.0;
    for &(x, y, w) in &pairs.pos {
        let (v, dv) = fpos(score(params, x, y))?;
        value += w * v;
        push_score_grad(params, &mut gphi, &mut gpsi, x, y, w * dv);
    }
    for &(x, y, w) in &pairs.neg {
        let (v, dv) = fneg(score(params, x, y))?;
        value += w * v;
        push_score_grad(params, &mut gphi, &mut gpsi, x, y, w * dv);
    }
    Ok(LossReport { value, grad_phi: gphi, grad_psi: gpsi })
}

/// Weighted moments of ξ = phi read off the positive pairs: the cross
/// moment E[ξ(x)ξ(x′)ᵀ] and the per-view weights of each element.
struct PairMoments {
    cross: Array2<f64>,
    wx: Array1<f64>,
    wy: Array1<f64>,
}

fn pair_moments(phi: &Array2<f64>, pairs: &WeightedPairs) -> PairMoments {
    let (n, d) = phi.dim();
    let mut cross = Array2::<f64>::zeros((d, d));
    let mut wx = Array1::<f64>::zeros(n);
    let mut wy = Array1::<f64>::zeros(n);
    for &(x, y, w) in &pairs.pos {
        for a in 0..d {
            for b in 0..d {
                cross[[a, b]] += w * phi[[x, a]] * phi[[y, b]];
            }
        }
        wx[x] += w;
        wy[y] += w;
    }
    PairMoments { cross, wx, wy }
}

/// Gradient of `Σ_pos w·ξ(x)ᵀ G ξ(y)` with respect to ξ.
fn cross_grad(phi: &Array2<f64>, pairs: &WeightedPairs, g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(phi.raw_dim());
    let gt = g.t();
    for &(x, y, w) in &pairs.pos {
        let ry = phi.row(y).to_owned();
        let rx = phi.row(x).to_owned();
        out.row_mut(x).scaled_add(w, &g.dot(&ry));
        out.row_mut(y).scaled_add(w, &gt.dot(&rx));
    }
    out
}

/// Σᵢ(1 − Cᵢᵢ)² + λ Σ_{i≠j} Cᵢⱼ² with C = E_p[ξ(x)ξ(x′)ᵀ], ξ = phi.
pub fn loss_barlow_twins(j: &JointTable, params: &ReprParams, lambda: f64, est: Estimator) -> Result<LossReport> {
    check_symmetric(j, params)?;
    let pairs = est.pairs(j);
    Ok(barlow_from_pairs(&params.phi, &pairs, lambda))
}

fn barlow_from_pairs(phi: &Array2<f64>, pairs: &WeightedPairs, lambda: f64) -> LossReport {
    let d = phi.ncols();
    let c = pair_moments(phi, pairs).cross;
    let mut value = 0.0;
    let mut g = Array2::<f64>::zeros((d, d));
    for a in 0..d {
        for b in 0..d {
            if a == b {
                value += (1.0 - c[[a, a]]).powi(2);
                g[[a, a]] = -2.0 * (1.0 - c[[a, a]]);
            } else {
                value += lambda * c[[a, b]].powi(2);
                g[[a, b]] = 2.0 * lambda * c[[a, b]];
            }
        }
    }
    let grad = cross_grad(phi, pairs, &g);
    LossReport { value, grad_psi: Array2::zeros(phi.raw_dim()), grad_phi: grad }
}

/// The two VICReg variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VicregForm {
    /// Invariance E‖ξ−ξ′‖², off-diagonal covariance penalty (weight η/d)
    /// and variance hinge max(0, 1 − √var) (weight λ/d), both views.
    Hinge,
    /// −2E_p[ξᵀξ′] + λ‖E[ξξᵀ] − I‖²_F.
    Square,
}

/// Floor on a variance before taking its square-root derivative.
const VAR_FLOOR: f64 = 1e-12;

pub fn loss_vicreg(
    j: &JointTable,
    params: &ReprParams,
    lambda: f64,
    eta: f64,
    form: VicregForm,
    est: Estimator,
) -> Result<LossReport> {
    check_symmetric(j, params)?;
    let pairs = est.pairs(j);
    Ok(match form {
        VicregForm::Square => vicreg_square_from_pairs(&params.phi, &pairs, lambda),
        VicregForm::Hinge => vicreg_hinge_from_pairs(&params.phi, &pairs, lambda, eta),
    })
}

fn vicreg_square_from_pairs(phi: &Array2<f64>, pairs: &WeightedPairs, lambda: f64) -> LossReport {
    let d = phi.ncols();
    let mo = pair_moments(phi, pairs);
    let inner: f64 = (0..d).map(|a| mo.cross[[a, a]]).sum();
    // second moment over the anchor view
    let mut second = Array2::<f64>::zeros((d, d));
    for (x, &w) in mo.wx.iter().enumerate() {
        if w != 0.0 {
            let r = phi.row(x);
            for a in 0..d {
                for b in 0..d {
                    second[[a, b]] += w * r[a] * r[b];
                }
            }
        }
    }
    let dev = &second - &Array2::<f64>::eye(d);
    let value = -2.0 * inner + lambda * dev.iter().map(|v| v * v).sum::<f64>();
    let mut grad = cross_grad(phi, pairs, &(Array2::<f64>::eye(d) * -2.0));
    // d/dξ(x) of λ‖M − I‖² is 4λ w(x) (M − I) ξ(x)
    for (x, &w) in mo.wx.iter().enumerate() {
        if w != 0.0 {
            let g = dev.dot(&phi.row(x)) * (4.0 * lambda * w);
            grad.row_mut(x).scaled_add(1.0, &g);
        }
    }
    LossReport { value, grad_psi: Array2::zeros(phi.raw_dim()), grad_phi: grad }
}

/// Centered covariance of ξ under element weights `w`, returning the mean.
fn weighted_cov(phi: &Array2<f64>, w: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = phi.ncols();
    let total = w.sum();
    let mean = phi.t().dot(w) / total;
    let mut cov = Array2::<f64>::zeros((d, d));
    for (x, &wx) in w.iter().enumerate() {
        if wx != 0.0 {
            let c = &phi.row(x) - &mean;
            for a in 0..d {
                for b in 0..d {
                    cov[[a, b]] += wx / total * c[a] * c[b];
                }
            }
        }
    }
    (cov, mean)
}

fn vicreg_hinge_from_pairs(phi: &Array2<f64>, pairs: &WeightedPairs, lambda: f64, eta: f64) -> LossReport {
    let d = phi.ncols();
    let df = d as f64;
    let mo = pair_moments(phi, pairs);
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros(phi.raw_dim());
    // invariance: E_p‖ξ(x) − ξ(x′)‖²
    for &(x, y, w) in &pairs.pos {
        let diff = &phi.row(x) - &phi.row(y);
        value += w * diff.dot(&diff);
        grad.row_mut(x).scaled_add(2.0 * w, &diff);
        grad.row_mut(y).scaled_add(-2.0 * w, &diff);
    }
    for wv in [&mo.wx, &mo.wy] {
        let total = wv.sum();
        let (cov, mean) = weighted_cov(phi, wv);
        // G = ∂value/∂cov for this view
        let mut g = Array2::<f64>::zeros((d, d));
        for a in 0..d {
            for b in 0..d {
                if a != b {
                    value += eta / df * cov[[a, b]].powi(2);
                    g[[a, b]] += 2.0 * eta / df * cov[[a, b]];
                }
            }
            let sd = cov[[a, a]].max(0.0).sqrt();
            if sd < 1.0 {
                value += lambda / df * (1.0 - sd);
                g[[a, a]] += -lambda / df * 0.5 / cov[[a, a]].max(VAR_FLOOR).sqrt();
            }
        }
        // ∂cov/∂ξ(x) contracted with symmetric G: 2 (w(x)/W) G (ξ(x) − μ)
        for (x, &wx) in wv.iter().enumerate() {
            if wx != 0.0 {
                let c = &phi.row(x) - &mean;
                grad.row_mut(x).scaled_add(2.0 * wx / total, &g.dot(&c));
            }
        }
    }
    LossReport { value, grad_psi: Array2::zeros(phi.raw_dim()), grad_phi: grad }
}

/// Binary NCE, `−E_p[log(u/(1+u))] + E_{px⊗py}[log(1+u)]`.
pub fn loss_nce_binary(j: &JointTable, params: &ReprParams, link: ScoreLink, est: Estimator) -> Result<LossReport> {
    check_dims(j, params)?;
    let pairs = est.pairs(j);
    pairwise_loss_fallible(
        params,
        &pairs,
        |s| {
            let (u, du) = link.apply(s)?;
            // −log(u/(1+u)) = log(1 + 1/u)
            Ok(((1.0 / u).ln_1p(), -du / (u * (1.0 + u))))
        },
        |s| {
            let (u, du) = link.apply(s)?;
            Ok((u.ln_1p(), du / (1.0 + u)))
        },
    )
}

/// Ranking NCE with k candidates (positive plus k−1 marginal negatives).
pub fn loss_nce_ranking(
    j: &JointTable,
    params: &ReprParams,
    k: usize,
    link: ScoreLink,
    mode: RankingMode,
) -> Result<LossReport> {
    check_dims(j, params)?;
    let s = params.scores();
    let mut ell = Array2::<f64>::zeros(s.raw_dim());
    let mut dell = Array2::<f64>::zeros(s.raw_dim());
    for ((idx, &sv), (l, dl)) in s.indexed_iter().zip(ell.iter_mut().zip(dell.iter_mut())) {
        let _ = idx;
        let (u, du) = link.apply(sv)?;
        *l = u.ln();
        *dl = du / u;
    }
    let out = ranking_loss(j.p(), j.py(), &ell, k, mode)?;
    let gs = out.grad * dell;
    Ok(LossReport { value: out.value, grad_phi: gs.dot(&params.psi), grad_psi: gs.t().dot(&params.phi) })
}

/// Which f-divergence's variational bound to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FKind {
    Kl,
    ChiSq,
}

/// KL: `−(E_p[log u] − E_{px⊗py}[u])` with u = link(S).
/// χ²: `−(2E_p[u] − E_{px⊗py}[u²])` with raw u = S.
pub fn loss_fdiv(
    j: &JointTable,
    params: &ReprParams,
    kind: FKind,
    link: ScoreLink,
    est: Estimator,
) -> Result<LossReport> {
    check_dims(j, params)?;
    let pairs = est.pairs(j);
    match kind {
        FKind::ChiSq => loss_chisq(params, &pairs),
        FKind::Kl => pairwise_loss_fallible(
            params,
            &pairs,
            |s| {
                let (u, du) = link.apply(s)?;
                Ok((-u.ln(), -du / u))
            },
            |s| {
                let (u, du) = link.apply(s)?;
                Ok((u, du))
            },
        ),
    }
}

/// A linear objective with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LinearObjective {
    SpectralContrastive,
    BarlowTwins { lambda: f64 },
    VicregHinge { lambda: f64, eta: f64 },
    VicregSquare { lambda: f64 },
    NceBinary { link: ScoreLink },
    NceRanking { k: usize, link: ScoreLink, surrogate: bool },
    FdivKl { link: ScoreLink },
    FdivChiSq,
}

impl LinearObjective {
    pub fn id(&self) -> &'static str {
        match self {
            LinearObjective::SpectralContrastive => "spectral_contrastive",
            LinearObjective::BarlowTwins { .. } => "barlow_twins",
            LinearObjective::VicregHinge { .. } => "vicreg_hinge",
            LinearObjective::VicregSquare { .. } => "vicreg_square",
            LinearObjective::NceBinary { .. } => "nce_binary",
            LinearObjective::NceRanking { .. } => "nce_ranking",
            LinearObjective::FdivKl { .. } => "fdiv_kl",
            LinearObjective::FdivChiSq => "fdiv_chisq",
        }
    }

    /// True for objectives that read only ξ = phi on a shared domain.
    pub fn is_symmetric(&self) -> bool {
        matches!(
            self,
            LinearObjective::BarlowTwins { .. }
                | LinearObjective::VicregHinge { .. }
                | LinearObjective::VicregSquare { .. }
        )
    }

    pub fn evaluate(&self, j: &JointTable, params: &ReprParams, est: Estimator) -> Result<LossReport> {
        match *self {
            LinearObjective::SpectralContrastive => loss_spectral_contrastive(j, params, est),
            LinearObjective::BarlowTwins { lambda } => loss_barlow_twins(j, params, lambda, est),
            LinearObjective::VicregHinge { lambda, eta } => loss_vicreg(j, params, lambda, eta, VicregForm::Hinge, est),
            LinearObjective::VicregSquare { lambda } => loss_vicreg(j, params, lambda, 0.0, VicregForm::Square, est),
            LinearObjective::NceBinary { link } => loss_nce_binary(j, params, link, est),
            LinearObjective::NceRanking { k, link, surrogate } => {
                let mode = match (est, surrogate) {
                    (Estimator::Batch(b), _) => RankingMode::Sampled(b),
                    (Estimator::Exact, true) => RankingMode::Surrogate,
                    (Estimator::Exact, false) => RankingMode::Expected,
                };
                loss_nce_ranking(j, params, k, link, mode)
            }
            LinearObjective::FdivKl { link } => loss_fdiv(j, params, FKind::Kl, link, est),
            LinearObjective::FdivChiSq => loss_fdiv(j, params, FKind::ChiSq, ScoreLink::Raw, est),
        }
    }

    /// Entrywise estimate of the ratio matrix implied by the scores, for
    /// objectives whose optimum is the ratio itself.
    pub fn ratio_estimate(&self, params: &ReprParams) -> Array2<f64> {
        let s = params.scores();
        match self {
            LinearObjective::NceBinary { link }
            | LinearObjective::NceRanking { link, .. }
            | LinearObjective::FdivKl { link } => s.mapv(|v| match link {
                ScoreLink::Softplus => softplus(v),
                ScoreLink::Raw => v,
            }),
            _ => s,
        }
    }
}

/// Objectives the bias probe supports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BiasObjective {
    SpectralContrastive,
    BarlowTwins { lambda: f64 },
    VicregSquare { lambda: f64 },
}

/// Plug-in gradient of the objective from a weighted pair list. For
/// spectral contrastive the positive and negative lists are independent;
/// for Barlow Twins and VICReg the empirical moments sit inside the
/// nonlinearity.
pub fn plug_in_gradient(
    obj: BiasObjective,
    j: &JointTable,
    params: &ReprParams,
    pairs: &WeightedPairs,
) -> Result<LossReport> {
    match obj {
        BiasObjective::SpectralContrastive => {
            check_dims(j, params)?;
            let t2: f64 = t_matrix(j).t.iter().map(|v| v * v).sum();
            pairwise_loss(params, pairs, t2, |s| (-2.0 * s, -2.0), |s| (s * s, 2.0 * s))
        }
        BiasObjective::BarlowTwins { lambda } => {
            check_symmetric(j, params)?;
            Ok(barlow_from_pairs(&params.phi, pairs, lambda))
        }
        BiasObjective::VicregSquare { lambda } => {
            check_symmetric(j, params)?;
            Ok(vicreg_square_from_pairs(&params.phi, pairs, lambda))
        }
    }
}

/// Result of the minibatch-bias probe. Gradients of phi and psi are
/// stacked row-wise.
#[derive(Debug, Clone)]
pub struct BiasReport {
    pub bias: Array2<f64>,
    pub norm: f64,
    /// Standard deviation of the trial-mean norm noise,
    /// `sqrt(Σ_entries var / n_trials)`.
    pub sigma: f64,
    /// `3 · sigma`.
    pub threshold: f64,
}

fn stack(r: &LossReport) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[r.grad_phi.view(), r.grad_psi.view()]).expect("same width")
}

/// Mean minibatch gradient minus the full gradient, over `n_trials`
/// batches of `batch_size` positives (and as many independent negatives).
pub fn minibatch_gradient_bias(
    obj: BiasObjective,
    j: &JointTable,
    params: &ReprParams,
    batch_size: usize,
    n_trials: usize,
    seed: u64,
) -> Result<BiasReport> {
    let full = stack(&plug_in_gradient(obj, j, params, &WeightedPairs::exact(j))?);
    let sampler = PairSampler::new(j);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = Array2::<f64>::zeros(full.raw_dim());
    let mut m2 = Array2::<f64>::zeros(full.raw_dim());
    let w = 1.0 / batch_size as f64;
    for t in 0..n_trials {
        let pos = (0..batch_size).map(|_| {
            let (x, y) = sampler.positive(&mut rng);
            (x, y, w)
        });
        let pos: Vec<_> = pos.collect();
        let neg: Vec<_> = (0..batch_size)
            .map(|_| {
                let (x, y) = sampler.negative(&mut rng);
                (x, y, w)
            })
            .collect();
        let g = stack(&plug_in_gradient(obj, j, params, &WeightedPairs { pos, neg })?);
        // Welford update
        let delta = &g - &mean;
        mean.scaled_add(1.0 / (t + 1) as f64, &delta);
        let delta2 = &g - &mean;
        m2 += &(&delta * &delta2);
    }
    let var_sum: f64 = m2.iter().sum::<f64>() / (n_trials.max(2) - 1) as f64;
    let sigma = (var_sum / n_trials as f64).sqrt();
    let bias = mean - &full;
    let norm = bias.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(BiasReport { bias, norm, sigma, threshold: 3.0 * sigma })
}
