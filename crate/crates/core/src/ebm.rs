//! Energy-based spectral representation: scores `s = υ(x)ᵀυ(x′)/τ` with
//! the ratio modeled as `exp(s)` up to a partition function. Covers
//! SimCLR, MoCo, word2vec, direct density-ratio fitting and the random
//! Fourier features turning `exp(uᵀu′)` into an inner product.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::JointTable;
use crate::error::{Error, Result};
use crate::linalg::{log_sigmoid, sigmoid};
use crate::linobj::{Estimator, LossReport, WeightedPairs};
use crate::nce::{ranking_loss, RankingMode};

/// Energy parameters. `upsilon_y = None` ties the two domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    #[serde(with = "crate::io::mat")]
    pub upsilon: Array2<f64>,
    #[serde(default, with = "opt_mat")]
    pub upsilon_y: Option<Array2<f64>>,
    pub normalize: bool,
    pub temperature: f64,
}

mod opt_mat {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(a: &Option<Array2<f64>>, s: S) -> Result<S::Ok, S::Error> {
        a.as_ref().map(crate::io::matrix_to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Array2<f64>>, D::Error> {
        match Option::<Vec<Vec<f64>>>::deserialize(d)? {
            Some(rows) => crate::io::rows_to_matrix(&rows).map(Some).map_err(serde::de::Error::custom),
            None => Ok(None),
        }
    }
}

impl EnergyParams {
    pub fn tied(upsilon: Array2<f64>, normalize: bool, temperature: f64) -> Self {
        EnergyParams { upsilon, upsilon_y: None, normalize, temperature }
    }

    pub fn untied(upsilon: Array2<f64>, upsilon_y: Array2<f64>, temperature: f64) -> Self {
        EnergyParams { upsilon, upsilon_y: Some(upsilon_y), normalize: false, temperature }
    }

    pub fn is_tied(&self) -> bool {
        self.upsilon_y.is_none()
    }

    fn raw_y(&self) -> &Array2<f64> {
        self.upsilon_y.as_ref().unwrap_or(&self.upsilon)
    }

    /// Features actually entering the scores (row-normalized if requested).
    pub fn features(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        let f = |a: &Array2<f64>| if self.normalize { normalize_rows(a) } else { Ok(a.clone()) };
        Ok((f(&self.upsilon)?, f(self.raw_y())?))
    }

    /// `s = υ(x)ᵀυ(x′)/τ`.
    pub fn scores(&self) -> Result<Array2<f64>> {
        let (a, b) = self.features()?;
        Ok(a.dot(&b.t()) / self.temperature)
    }

    /// Gradients of a loss with `d loss / d s = gs`, mapped back to the raw
    /// parameters. For tied parameters the whole gradient lands in
    /// `grad_phi` and `grad_psi` is zero.
    pub fn backprop(&self, gs: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (a, b) = self.features()?;
        let ga = gs.dot(&b) / self.temperature;
        let gb = gs.t().dot(&a) / self.temperature;
        let (ga, gb) = if self.normalize {
            (normalize_backprop(&self.upsilon, &a, &ga), normalize_backprop(self.raw_y(), &b, &gb))
        } else {
            (ga, gb)
        };
        Ok(if self.is_tied() { (ga + gb, Array2::zeros(self.upsilon.raw_dim())) } else { (ga, gb) })
    }
}

/// Project every row to unit norm.
pub fn normalize_rows(a: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = a.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let nrm = row.dot(&row).sqrt();
        if nrm == 0.0 {
            return Err(Error::ZeroVector(format!("row {i} has zero norm")));
        }
        row.mapv_inplace(|v| v / nrm);
    }
    Ok(out)
}

/// Chain rule through `n = v/‖v‖`: `(g − (g·n) n)/‖v‖` per row.
pub fn normalize_backprop(raw: &Array2<f64>, normed: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut o, v), n) in out.rows_mut().into_iter().zip(raw.rows()).zip(normed.rows()) {
        let nrm = v.dot(&v).sqrt();
        let gn = o.dot(&n);
        o.scaled_add(-gn, &n);
        o.mapv_inplace(|x| x / nrm);
    }
    out
}

/// SimCLR: ranking NCE with k candidates on the energy scores.
pub fn loss_simclr(j: &JointTable, params: &EnergyParams, k: usize, mode: RankingMode) -> Result<LossReport> {
    if k < 2 {
        return Err(Error::Config(format!("SimCLR needs k ≥ 2, got {k}")));
    }
    let s = params.scores()?;
    let out = ranking_loss(j.p(), j.py(), &s, k, mode)?;
    let (grad_phi, grad_psi) = params.backprop(&out.grad)?;
    Ok(LossReport { value: out.value, grad_phi, grad_psi })
}

/// MoCo scores: student anchors against teacher candidates,
/// `s(x, x′) = υ(x)ᵀυ_t(x′)/τ`.
pub fn moco_scores(student: &EnergyParams, teacher: &EnergyParams) -> Result<Array2<f64>> {
    let (a, _) = student.features()?;
    let (_, b) = teacher.features()?;
    Ok(a.dot(&b.t()) / student.temperature)
}

/// Loss and student gradient of the MoCo objective with the teacher frozen.
pub fn moco_objective(
    j: &JointTable,
    student: &EnergyParams,
    teacher: &EnergyParams,
    k: usize,
    mode: RankingMode,
) -> Result<(f64, Array2<f64>)> {
    if k < 2 {
        return Err(Error::Config(format!("MoCo needs k ≥ 2, got {k}")));
    }
    let s = moco_scores(student, teacher)?;
    let out = ranking_loss(j.p(), j.py(), &s, k, mode)?;
    let (a, _) = student.features()?;
    let (_, b) = teacher.features()?;
    let ga = out.grad.dot(&b) / student.temperature;
    let ga = if student.normalize { normalize_backprop(&student.upsilon, &a, &ga) } else { ga };
    Ok((out.value, ga))
}

/// One MoCo step: gradient step on the student anchors, then the teacher
/// moves by EMA, `υ_t ← μ υ_t + (1−μ) υ`.
pub fn moco_step(
    j: &JointTable,
    student: &EnergyParams,
    teacher: &EnergyParams,
    k: usize,
    alpha: f64,
    momentum: f64,
    mode: RankingMode,
) -> Result<(EnergyParams, EnergyParams)> {
    let (_, g) = moco_objective(j, student, teacher, k, mode)?;
    let mut s = student.clone();
    s.upsilon = &student.upsilon - &(g * alpha);
    let mut t = teacher.clone();
    t.upsilon = &teacher.upsilon * momentum + &s.upsilon * (1.0 - momentum);
    Ok((s, t))
}

/// Density-ratio fitting, `−(E_p[s] − E_{px⊗py}[exp s])`.
pub fn loss_ebm_density_ratio(j: &JointTable, params: &EnergyParams, est: Estimator) -> Result<LossReport> {
    let s = params.scores()?;
    let pairs = est_pairs(j, est);
    let mut gs = Array2::<f64>::zeros(s.raw_dim());
    let mut value = 0.0;
    for &(x, y, w) in &pairs.pos {
        value -= w * s[[x, y]];
        gs[[x, y]] -= w;
    }
    for &(x, y, w) in &pairs.neg {
        let e = s[[x, y]].exp();
        value += w * e;
        gs[[x, y]] += w * e;
    }
    let (grad_phi, grad_psi) = params.backprop(&gs)?;
    Ok(LossReport { value, grad_phi, grad_psi })
}

fn est_pairs(j: &JointTable, est: Estimator) -> WeightedPairs {
    match est {
        Estimator::Exact => WeightedPairs::exact(j),
        Estimator::Batch(b) => WeightedPairs::from_batch(b),
    }
}

/// Skip-gram with negative sampling on a square co-occurrence table with
/// shared embedding rows `E = Vᵀ`: `−E_pos[log σ(s)] − E_neg[log σ(−s)]`,
/// `s = E(w)ᵀE(c)`. Uses the standard sign on the negative term.
pub fn loss_word2vec(cooc: &JointTable, embed: &Array2<f64>, est: Estimator) -> Result<LossReport> {
    if cooc.n() != cooc.m() || embed.nrows() != cooc.n() {
        return Err(Error::DimensionMismatch(format!(
            "embedding {:?} for a {}×{} co-occurrence table",
            embed.dim(),
            cooc.n(),
            cooc.m()
        )));
    }
    let params = EnergyParams::tied(embed.clone(), false, 1.0);
    let s = params.scores()?;
    let pairs = est_pairs(cooc, est);
    let mut gs = Array2::<f64>::zeros(s.raw_dim());
    let mut value = 0.0;
    for &(x, y, w) in &pairs.pos {
        value -= w * log_sigmoid(s[[x, y]]);
        gs[[x, y]] -= w * sigmoid(-s[[x, y]]);
    }
    for &(x, y, w) in &pairs.neg {
        value -= w * log_sigmoid(-s[[x, y]]);
        gs[[x, y]] += w * sigmoid(s[[x, y]]);
    }
    let (grad_phi, grad_psi) = params.backprop(&gs)?;
    Ok(LossReport { value, grad_phi, grad_psi })
}

/// `Z(x) = Σ_{x′} py(x′) exp(s(x, x′))`.
pub fn partition_exact(j: &JointTable, params: &EnergyParams) -> Result<Array1<f64>> {
    let s = params.scores()?;
    Ok(Array1::from_iter(s.rows().into_iter().map(|r| r.iter().zip(j.py()).map(|(&v, &q)| q * v.exp()).sum())))
}

/// Normalized model `P̂(x′|x) = py(x′) exp(s(x, x′)) / Z(x)`.
pub fn model_conditional(j: &JointTable, params: &EnergyParams) -> Result<Array2<f64>> {
    let s = params.scores()?;
    let z = partition_exact(j, params)?;
    Ok(Array2::from_shape_fn(s.raw_dim(), |(x, y)| j.py()[y] * s[[x, y]].exp() / z[x]))
}

/// Random Fourier features for the Gaussian kernel, reweighted so that
/// their inner product estimates `exp(uᵀu′)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffBridge {
    pub n_features: usize,
    pub seed: u64,
    #[serde(with = "crate::io::mat")]
    pub frequencies: Array2<f64>,
    #[serde(with = "crate::io::vec1")]
    pub phases: Array1<f64>,
}

impl RffBridge {
    /// ω ~ N(0, I), phases uniform on [0, 2π).
    pub fn new(n_features: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = Array2::from_shape_fn((n_features, dim), |_| rng.sample::<f64, _>(StandardNormal));
        let phases = Array1::from_shape_fn(n_features, |_| rng.gen_range(0.0..std::f64::consts::TAU));
        RffBridge { n_features, seed, frequencies, phases }
    }
}

/// `√(2/D) cos(ωᵀu + b) · exp(‖u‖²/2)`.
pub fn rff_expand(b: &RffBridge, u: &Array1<f64>) -> Result<Array1<f64>> {
    if u.len() != b.frequencies.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "u of length {} for {}-dim frequencies",
            u.len(),
            b.frequencies.ncols()
        )));
    }
    let scale = (2.0 / b.n_features as f64).sqrt() * (0.5 * u.dot(u)).exp();
    let proj = b.frequencies.dot(u);
    Ok(Array1::from_iter(proj.iter().zip(b.phases.iter()).map(|(&p, &ph)| scale * (p + ph).cos())))
}

/// `exp(−‖u−u′‖²/2)·exp(‖u‖²/2)·exp(‖u′‖²/2)`, which equals `exp(uᵀu′)`.
pub fn gaussian_factorization(u: &Array1<f64>, v: &Array1<f64>) -> f64 {
    let diff = u - v;
    (-0.5 * diff.dot(&diff)).exp() * (0.5 * u.dot(u)).exp() * (0.5 * v.dot(v)).exp()
}
