//! Downstream uses of a spectral representation: least-squares regression,
//! Bayes-risk classification, the attention-form regressor for energy
//! features, primal-dual instrumental-variable regression and LSTD policy
//! evaluation in a linear MDP.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dist::{IvModel, JointTable, MdpTable};
use crate::ebm::EnergyParams;
use crate::error::{Error, Result};
use crate::linalg::{self, solve, solve_vec};
use crate::oracle;

/// Ridge added to every weighted least-squares normal matrix.
pub const LS_RIDGE: f64 = 1e-12;

/// Tolerance of the representation checks on posteriors and MDP spans.
pub const POSTERIOR_TOL: f64 = 1e-6;
pub const SPAN_TOL: f64 = 1e-8;

/// Ties in conditional risk within this margin go to the lowest class.
pub const TIE_TOL: f64 = 1e-12;

/// A joint over (x, y) with real labels for the y-domain and, for
/// classification, a cost matrix `risk[predicted, true]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedTable {
    pub joint: JointTable,
    pub y_values: Array1<f64>,
    pub risk: Option<Array2<f64>>,
}

impl SupervisedTable {
    pub fn new(joint: JointTable, y_values: Array1<f64>, risk: Option<Array2<f64>>) -> Result<Self> {
        if y_values.len() != joint.m() {
            return Err(Error::DimensionMismatch(format!("{} labels for {} outcomes", y_values.len(), joint.m())));
        }
        if let Some(r) = &risk {
            if r.dim() != (joint.m(), joint.m()) {
                return Err(Error::DimensionMismatch(format!("risk {:?} for {} classes", r.dim(), joint.m())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("non-finite cost".into()));
            }
        }
        Ok(SupervisedTable { joint, y_values, risk })
    }

    /// E[y | x].
    pub fn conditional_mean(&self) -> Array1<f64> {
        self.joint.conditional().dot(&self.y_values)
    }

    /// E_px[Var(y | x)], the risk of the Bayes regressor.
    pub fn bayes_mse(&self) -> f64 {
        let cond = self.joint.conditional();
        let mean = cond.dot(&self.y_values);
        let second = cond.dot(&self.y_values.mapv(|v| v * v));
        self.joint.px().iter().zip(mean.iter().zip(&second)).map(|(p, (m, s2))| p * (s2 - m * m)).sum()
    }

    /// The cost matrix, 0-1 when none was given.
    pub fn costs(&self) -> Array2<f64> {
        let k = self.joint.m();
        self.risk.clone().unwrap_or_else(|| Array2::from_shape_fn((k, k), |(i, j)| if i == j { 0.0 } else { 1.0 }))
    }
}

/// `argmin_w Σ_x w(x) (target(x) − φ(x)ᵀw)²` with a small ridge.
pub fn weighted_least_squares(phi: ArrayView2<f64>, target: &Array1<f64>, weight: &Array1<f64>) -> Result<Array1<f64>> {
    if phi.nrows() != target.len() || phi.nrows() != weight.len() {
        return Err(Error::DimensionMismatch(format!("features {:?}, {} targets", phi.dim(), target.len())));
    }
    let wphi = linalg::scale_rows(phi, weight);
    let mut gram = phi.t().dot(&wphi);
    gram.diag_mut().mapv_inplace(|v| v + LS_RIDGE);
    solve_vec(gram.view(), &wphi.t().dot(target))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Regression {
    #[serde(with = "crate::io::vec1")]
    pub w: Array1<f64>,
    #[serde(with = "crate::io::vec1")]
    pub predictions: Array1<f64>,
    /// E_px[(E[y|x] − wᵀφ(x))²].
    pub mse: f64,
    /// E_p[(y − wᵀφ(x))²] = mse + bayes_mse.
    pub risk: f64,
    pub bayes_mse: f64,
}

/// Best linear predictor of E[y | x] from φ under px.
pub fn fit_linear_regressor(st: &SupervisedTable, phi: ArrayView2<f64>) -> Result<Regression> {
    if phi.nrows() != st.joint.n() {
        return Err(Error::DimensionMismatch(format!("features {:?} for {} inputs", phi.dim(), st.joint.n())));
    }
    let target = st.conditional_mean();
    let px = st.joint.px();
    let w = weighted_least_squares(phi, &target, px)?;
    let predictions = phi.dot(&w);
    let mse: f64 = px.iter().zip(target.iter().zip(&predictions)).map(|(p, (t, f))| p * (t - f).powi(2)).sum();
    let bayes_mse = st.bayes_mse();
    Ok(Regression { w, predictions, mse, risk: mse + bayes_mse, bayes_mse })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classification {
    /// 0-based predicted class per x.
    pub classes: Vec<usize>,
    /// Conditional risk of the chosen class per x.
    #[serde(with = "crate::io::vec1")]
    pub risk: Array1<f64>,
    /// Conditional risk of every class, n×k.
    #[serde(with = "crate::io::mat")]
    pub all_risks: Array2<f64>,
}

/// Bayes decision from a representation of the posterior
/// `P(y|x) = φ(x)ᵀμ(y)`: minimize `Σ_j cost[i, j] P(j|x)` over i.
pub fn bayes_classify(st: &SupervisedTable, phi: ArrayView2<f64>, mu_y: ArrayView2<f64>) -> Result<Classification> {
    let (n, k) = (st.joint.n(), st.joint.m());
    if phi.nrows() != n || mu_y.nrows() != k || phi.ncols() != mu_y.ncols() {
        return Err(Error::DimensionMismatch(format!("φ {:?}, μ {:?} for a {n}×{k} table", phi.dim(), mu_y.dim())));
    }
    let post = phi.dot(&mu_y.t());
    let err = linalg::max_abs_diff(post.view(), st.joint.conditional().view());
    if err > POSTERIOR_TOL {
        return Err(Error::RepresentationMismatch(format!("posterior reconstruction error {err:e}")));
    }
    let all_risks = post.dot(&st.costs().t());
    let mut classes = Vec::with_capacity(n);
    let mut risk = Array1::zeros(n);
    for (x, row) in all_risks.rows().into_iter().enumerate() {
        let mut best = 0;
        for c in 1..k {
            if row[c] < row[best] - TIE_TOL {
                best = c;
            }
        }
        classes.push(best);
        risk[x] = row[best];
    }
    Ok(Classification { classes, risk, all_risks })
}

/// Posterior factors `(φ, μ)` of a table from its oracle ratio
/// factorization: `P(y|x) = φ(x)ᵀ μ(y)` with `μ = diag(py) ψ`.
pub fn posterior_factors(j: &JointTable, d: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let (phi, psi) = oracle::oracle(j, d)?.ratio_factors(j);
    Ok((phi, linalg::scale_rows(psi.view(), j.py())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Attention {
    #[serde(with = "crate::io::vec1")]
    pub alpha: Array1<f64>,
    #[serde(with = "crate::io::vec1")]
    pub beta: Array1<f64>,
    #[serde(with = "crate::io::vec1")]
    pub predictions: Array1<f64>,
    /// max_x |prediction − E[y|x]|.
    pub max_error: f64,
}

/// Attention-form regressor
/// `Σ_i β_i k(x, x_i) / Σ_j α_j k(x, x_j)` with `k(x, x′) = exp(a_xᵀa_x′/τ)`
/// over the anchor inputs. α is the least-squares fit of the partition
/// `Z(x) = E_py[exp s(x,·)]`, then β the least-squares fit of E[y|x] on
/// the normalized attention weights, both under px.
pub fn attention_regressor(st: &SupervisedTable, params: &EnergyParams, anchors: &[usize]) -> Result<Attention> {
    let n = st.joint.n();
    if anchors.is_empty() {
        return Err(Error::Config("attention regressor needs at least one anchor".into()));
    }
    if let Some(a) = anchors.iter().find(|&&a| a >= n) {
        return Err(Error::DimensionMismatch(format!("anchor {a} with {n} inputs")));
    }
    let (a, b) = params.features()?;
    if a.nrows() != n || b.nrows() != st.joint.m() {
        return Err(Error::DimensionMismatch(format!(
            "features {:?}/{:?} for a {n}×{} table",
            a.dim(),
            b.dim(),
            st.joint.m()
        )));
    }
    let tau = params.temperature;
    let kernel = Array2::from_shape_fn((n, anchors.len()), |(x, i)| (a.row(x).dot(&a.row(anchors[i])) / tau).exp());
    let z = a.dot(&b.t()).mapv(|v| (v / tau).exp()).dot(st.joint.py());
    let px = st.joint.px();
    let alpha = weighted_least_squares(kernel.view(), &z, px)?;
    let denom = kernel.dot(&alpha);
    if let Some((x, v)) = denom.iter().enumerate().find(|(_, &v)| !(v > 1e-300)) {
        return Err(Error::DegenerateDenominator(format!("denominator {v:e} at x = {x}")));
    }
    let normalized = Array2::from_shape_fn(kernel.raw_dim(), |(x, i)| kernel[[x, i]] / denom[x]);
    let target = st.conditional_mean();
    let beta = weighted_least_squares(normalized.view(), &target, px)?;
    let predictions = normalized.dot(&beta);
    let max_error = (&predictions - &target).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Attention { alpha, beta, predictions, max_error })
}

/// Saddle-point update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SaddleMethod {
    /// Simultaneous descent in v and ascent in w.
    Simultaneous,
    /// Gradient at an extrapolated midpoint.
    #[default]
    Extragradient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvSolution {
    #[serde(with = "crate::io::vec1")]
    pub v: Array1<f64>,
    #[serde(with = "crate::io::vec1")]
    pub w: Array1<f64>,
    #[serde(with = "crate::io::vec1")]
    pub f_hat: Array1<f64>,
    #[serde(with = "crate::io::vec1")]
    pub g_hat: Array1<f64>,
    pub iters: usize,
    pub grad_v: f64,
    pub grad_w: f64,
}

/// Moments of the linear primal-dual IV objective
/// `L(v, w) = wᵀb − wᵀCv − ½ wᵀMw + λ vᵀRv`, where `b = E[μ(z) y]`,
/// `C = E[μ(z) φ(x)ᵀ]`, `M = E[μ(z)μ(z)ᵀ]` and the regularizer
/// `Ω(f) = E_px[f²]` gives `R = E[φφᵀ]`.
struct IvMoments {
    b: Array1<f64>,
    c: Array2<f64>,
    m: Array2<f64>,
    r: Array2<f64>,
}

impl IvMoments {
    fn new(iv: &IvModel, phi: ArrayView2<f64>, mu: ArrayView2<f64>) -> Result<Self> {
        let p = iv.p_zx.p();
        let (nz, nx) = p.dim();
        if phi.nrows() != nx || mu.nrows() != nz || phi.ncols() != mu.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "φ {:?}, μ {:?} for a {nz}×{nx} instrument table",
                phi.dim(),
                mu.dim()
            )));
        }
        let py_z = (p * &iv.ey_zx).sum_axis(Axis(1));
        Ok(IvMoments {
            b: mu.t().dot(&py_z),
            c: mu.t().dot(p).dot(&phi),
            m: mu.t().dot(&linalg::scale_rows(mu, iv.p_zx.px())),
            r: phi.t().dot(&linalg::scale_rows(phi, iv.p_zx.py())),
        })
    }

    fn grads(&self, v: &Array1<f64>, w: &Array1<f64>, lambda: f64) -> (Array1<f64>, Array1<f64>) {
        let gv = -self.c.t().dot(w) + self.r.dot(v) * (2.0 * lambda);
        let gw = &self.b - &self.c.dot(v) - self.m.dot(w);
        (gv, gw)
    }
}

/// Features for the IV problem from the oracle factorization of the
/// instrument table: `P(z, x)/(P(z)P(x)) = μ(z)ᵀφ(x)`. Returns `(φ, μ)`.
pub fn iv_features(iv: &IvModel, d: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let (mu, phi) = oracle::oracle(&iv.p_zx, d)?.ratio_factors(&iv.p_zx);
    Ok((phi, mu))
}

/// Gradient descent-ascent on the linear primal-dual IV objective with
/// `f = φv` and `g = μw`, from v = w = 0. Stops when both gradient norms
/// are ≤ 1e-8.
pub fn iv_saddle_solve(
    iv: &IvModel,
    phi: ArrayView2<f64>,
    mu: ArrayView2<f64>,
    lambda: f64,
    iters: usize,
    alpha: f64,
    method: SaddleMethod,
) -> Result<IvSolution> {
    const TOL: f64 = 1e-8;
    let mom = IvMoments::new(iv, phi, mu)?;
    let d = phi.ncols();
    let mut v = Array1::<f64>::zeros(d);
    let mut w = Array1::<f64>::zeros(d);
    let norm = |a: &Array1<f64>| a.dot(a).sqrt();
    for it in 0..=iters {
        let (gv, gw) = mom.grads(&v, &w, lambda);
        if norm(&gv) <= TOL && norm(&gw) <= TOL {
            return Ok(IvSolution {
                f_hat: phi.dot(&v),
                g_hat: mu.dot(&w),
                v,
                w,
                iters: it,
                grad_v: norm(&gv),
                grad_w: norm(&gw),
            });
        }
        if it == iters {
            return Err(Error::NotConverged(format!(
                "IV saddle after {iters} iterations: ‖∇v‖ = {:e}, ‖∇w‖ = {:e}",
                norm(&gv),
                norm(&gw)
            )));
        }
        match method {
            SaddleMethod::Simultaneous => {
                v = &v - &(gv * alpha);
                w = &w + &(gw * alpha);
            }
            SaddleMethod::Extragradient => {
                let vm = &v - &(&gv * alpha);
                let wm = &w + &(&gw * alpha);
                let (gv, gw) = mom.grads(&vm, &wm, lambda);
                v = &v - &(gv * alpha);
                w = &w + &(gw * alpha);
            }
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Closed-form saddle point: `w = M⁻¹(b − Cv)` and
/// `v = (CᵀM⁻¹C + 2λR)⁻¹ CᵀM⁻¹b`. Returns `(f_hat, g_hat)`.
pub fn iv_closed_form(
    iv: &IvModel,
    phi: ArrayView2<f64>,
    mu: ArrayView2<f64>,
    lambda: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let mom = IvMoments::new(iv, phi, mu)?;
    let minv_c = solve(mom.m.view(), mom.c.view())?;
    let minv_b = solve_vec(mom.m.view(), &mom.b)?;
    let lhs = mom.c.t().dot(&minv_c) + &mom.r * (2.0 * lambda);
    let v = solve_vec(lhs.view(), &mom.c.t().dot(&minv_b))?;
    let w = solve_vec(mom.m.view(), &(&mom.b - &mom.c.dot(&v)))?;
    Ok((phi.dot(&v), mu.dot(&w)))
}

/// Direct solve of the moment equation `E[f(x) | z] = E[y | z]` for a
/// square invertible conditional-expectation matrix.
pub fn iv_direct(iv: &IvModel) -> Result<Array1<f64>> {
    solve_vec(iv.conditional_expectation().view(), &iv.ey_z())
}

/// A stochastic policy π(a|s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    #[serde(with = "crate::io::mat")]
    pub pi: Array2<f64>,
}

impl PolicyTable {
    pub fn new(pi: Array2<f64>) -> Result<Self> {
        for (s, row) in pi.rows().into_iter().enumerate() {
            if row.iter().any(|&v| v < 0.0) || (row.sum() - 1.0).abs() > crate::dist::MASS_TOL {
                return Err(Error::InvalidTable(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(PolicyTable { pi })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        PolicyTable { pi: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64) }
    }
}

/// State-action to state-action transition matrix under π.
pub fn policy_transition(mdp: &MdpTable, pi: &PolicyTable) -> Result<Array2<f64>> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions);
    if pi.pi.dim() != (ns, na) {
        return Err(Error::DimensionMismatch(format!("policy {:?} for {ns} states, {na} actions", pi.pi.dim())));
    }
    Ok(Array2::from_shape_fn((ns * na, ns * na), |(i, j)| mdp.transition[[i, j / na]] * pi.pi[[j / na, j % na]]))
}

/// `Q = (I − γ P_π)⁻¹ r`.
pub fn q_direct(mdp: &MdpTable, pi: &PolicyTable) -> Result<Array1<f64>> {
    let pp = policy_transition(mdp, pi)?;
    let a = Array2::<f64>::eye(pp.nrows()) - &pp * mdp.gamma;
    solve_vec(a.view(), &mdp.reward)
}

/// Stationary state-action weighting under the uniform policy, from the
/// lazy chain `(I + P)/2` (same stationary law, aperiodic) started at the
/// uniform distribution.
pub fn default_rho(mdp: &MdpTable) -> Result<Array1<f64>> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions);
    let uni = PolicyTable::uniform(ns, na);
    let pp = policy_transition(mdp, &uni)?;
    let mut rho = Array1::from_elem(ns * na, 1.0 / (ns * na) as f64);
    for _ in 0..1_000_000 {
        let next = (&rho + &pp.t().dot(&rho)) * 0.5;
        let delta = (&next - &rho).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        rho = next;
        if delta < 1e-15 {
            break;
        }
    }
    if rho.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Config("stationary weighting has empty state-actions; pass rho explicitly".into()));
    }
    Ok(rho)
}

/// Oracle features for a linear MDP: the top-d left singular vectors of
/// the transition scaled by the singular values, augmented by the reward
/// when it is not already in their span.
pub fn mdp_spectral_features(mdp: &MdpTable, d: usize) -> Result<Array2<f64>> {
    let f = linalg::svd(mdp.transition.view());
    if d == 0 || d > f.s.len() {
        return Err(Error::RankOutOfBounds(format!("d = {d} with {} singular values", f.s.len())));
    }
    let u = f.u.slice(s![.., ..d]);
    let spectral = linalg::scale_cols(u, &f.s.slice(s![..d]).to_owned());
    let outside = &mdp.reward - &u.dot(&u.t().dot(&mdp.reward));
    let scale = mdp.reward.dot(&mdp.reward).sqrt().max(1.0);
    if outside.dot(&outside).sqrt() <= REWARD_IN_SPAN_TOL * scale {
        return Ok(spectral);
    }
    let sa = mdp.transition.nrows();
    let mut out = Array2::<f64>::zeros((sa, d + 1));
    out.slice_mut(s![.., ..d]).assign(&spectral);
    out.column_mut(d).assign(&mdp.reward);
    Ok(out)
}

/// Relative residual below which the reward counts as spanned.
const REWARD_IN_SPAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lstd {
    #[serde(with = "crate::io::vec1")]
    pub eta: Array1<f64>,
    #[serde(with = "crate::io::vec1")]
    pub q_hat: Array1<f64>,
    /// Largest residual of the transition and reward outside span(features).
    pub span_residual: f64,
}

/// Solves `Φᵀ D_ρ (Φ − γ P_π Φ) η = Φᵀ D_ρ r` after checking that the
/// transition columns and the reward lie in the feature span.
pub fn lstd_policy_eval(
    mdp: &MdpTable,
    pi: &PolicyTable,
    features: ArrayView2<f64>,
    rho: Option<&Array1<f64>>,
) -> Result<Lstd> {
    let sa = mdp.transition.nrows();
    if features.nrows() != sa {
        return Err(Error::DimensionMismatch(format!("features {:?} for {sa} state-actions", features.dim())));
    }
    let span_residual = span_residual(features, mdp)?;
    if span_residual > SPAN_TOL {
        return Err(Error::SpanViolation(format!("transition/reward residual {span_residual:e} outside feature span")));
    }
    let owned;
    let rho = match rho {
        Some(r) => r,
        None => {
            owned = default_rho(mdp)?;
            &owned
        }
    };
    if rho.len() != sa || rho.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Config("rho must be a positive weight per state-action".into()));
    }
    let pp = policy_transition(mdp, pi)?;
    let next = pp.dot(&features);
    let wf = linalg::scale_rows(features, rho);
    let a = wf.t().dot(&(&features - &(&next * mdp.gamma)));
    let eta = solve_vec(a.view(), &wf.t().dot(&mdp.reward))?;
    let q_hat = features.dot(&eta);
    Ok(Lstd { eta, q_hat, span_residual })
}

fn span_residual(features: ArrayView2<f64>, mdp: &MdpTable) -> Result<f64> {
    let f = linalg::svd(features);
    let smax = f.s.iter().cloned().fold(0.0, f64::max);
    let rank = f.s.iter().filter(|&&v| v > 1e-12 * smax.max(1.0)).count();
    if rank == 0 {
        return Err(Error::RankDeficient("features are zero".into()));
    }
    let q = f.u.slice(s![.., ..rank]).to_owned();
    let mut target = Array2::<f64>::zeros((mdp.transition.nrows(), mdp.n_states() + 1));
    target.slice_mut(s![.., ..mdp.n_states()]).assign(&mdp.transition);
    target.column_mut(mdp.n_states()).assign(&mdp.reward);
    let resid = &target - &q.dot(&q.t().dot(&target));
    Ok(resid.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}
