//! Classical component analysis read as spectral representation of a
//! pairwise kernel: PCA, MDS, Laplacian embedding, LPP, CCA, NCA and SNE.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::JointTable;
use crate::ebm::{normalize_backprop, normalize_rows};
use crate::error::{Error, Result};
use crate::linalg::{self, fix_signs, inv_sqrt_sym, logsumexp, scale_cols, sym_eigen};
use crate::linobj::LossReport;
use crate::oracle;

/// Eigenvalues this close to zero (relative to the largest) are zero.
const ZERO_EIG_TOL: f64 = 1e-10;

/// Whitening ridge for CCA and the LPP constraint matrix.
pub const WHITEN_RIDGE: f64 = 1e-10;

/// Above this condition number the constraint Gram matrix is reported.
pub const MAX_GRAM_COND: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    #[serde(with = "crate::io::mat")]
    pub x: Array2<f64>,
}

impl PointCloud {
    pub fn new(x: Array2<f64>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::Config(format!("a point cloud needs n ≥ 2, got {}", x.nrows())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite coordinates".into()));
        }
        Ok(PointCloud { x })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn centered(&self) -> Array2<f64> {
        let mean = self.x.mean_axis(Axis(0)).expect("n ≥ 2");
        &self.x - &mean
    }

    /// Squared Euclidean distances.
    pub fn sq_distances(&self) -> Array2<f64> {
        let n = self.n();
        Array2::from_shape_fn((n, n), |(i, j)| {
            self.x.row(i).iter().zip(self.x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
        })
    }
}

#[derive(Debug, Clone)]
pub struct Pca {
    /// p×d, orthonormal columns.
    pub components: Array2<f64>,
    pub eigenvalues: Array1<f64>,
    /// Centered data projected on the components, n×d.
    pub scores: Array2<f64>,
}

/// Top-d eigenvectors of the (1/n)-normalized centered covariance.
pub fn pca(pc: &PointCloud, d: usize) -> Result<Pca> {
    if d == 0 || d > pc.p() {
        return Err(Error::RankOutOfBounds(format!("d = {d} with {} coordinates", pc.p())));
    }
    let xc = pc.centered();
    let cov = xc.t().dot(&xc) / pc.n() as f64;
    let (vals, vecs) = sym_eigen(cov.view());
    let components = vecs.slice(s![.., ..d]).to_owned();
    let scores = xc.dot(&components);
    Ok(Pca { components, eigenvalues: vals.slice(s![..d]).to_owned(), scores })
}

/// Pairwise similarity fed to MDS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MdsKernel {
    /// `k(x, x′) = −‖x − x′‖²`.
    NegSquaredDistance,
    /// `k(x, x′) = xᵀx′`, the kernel under which MDS is PCA.
    Linear,
}

#[derive(Debug, Clone)]
pub struct Mds {
    /// n×r with r ≤ d: coordinates with a negative eigenvalue are dropped.
    pub embedding: Array2<f64>,
    /// Retained eigenvalues of `H K H`, descending.
    pub eigenvalues: Array1<f64>,
    /// Number of top-d coordinates dropped for a negative eigenvalue.
    pub dropped: usize,
}

/// Top-d eigenvectors of `H K H`, scaled by √eigenvalue.
pub fn mds(pc: &PointCloud, d: usize, kernel: MdsKernel) -> Result<Mds> {
    let n = pc.n();
    if d == 0 || d > n - 1 {
        return Err(Error::RankOutOfBounds(format!("d = {d} with {n} points")));
    }
    let k = match kernel {
        MdsKernel::NegSquaredDistance => -pc.sq_distances(),
        MdsKernel::Linear => pc.x.dot(&pc.x.t()),
    };
    let (vals, vecs) = sym_eigen(center_kernel(&k).view());
    let tol = ZERO_EIG_TOL * vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut cols = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = 0;
    for i in 0..d {
        let l = if vals[i].abs() <= tol { 0.0 } else { vals[i] };
        if l < 0.0 {
            log::warn!("MDS eigenvalue {l:e} at position {i} is negative; coordinate dropped");
            dropped += 1;
            continue;
        }
        cols.push(vecs.column(i).mapv(|v| v * l.sqrt()));
        kept.push(l);
    }
    let mut embedding = Array2::<f64>::zeros((n, cols.len()));
    for (c, col) in cols.iter().enumerate() {
        embedding.column_mut(c).assign(col);
    }
    Ok(Mds { embedding, eigenvalues: Array1::from_vec(kept), dropped })
}

/// `H K H` with `H = I − 𝟙𝟙ᵀ/n`.
pub fn center_kernel(k: &Array2<f64>) -> Array2<f64> {
    let row = k.mean_axis(Axis(1)).expect("nonempty");
    let col = k.mean_axis(Axis(0)).expect("nonempty");
    let all = k.mean().expect("nonempty");
    Array2::from_shape_fn(k.raw_dim(), |(i, j)| k[[i, j]] - row[i] - col[j] + all)
}

/// Symmetric nonnegative affinities and their degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    #[serde(with = "crate::io::mat")]
    pub w: Array2<f64>,
    #[serde(with = "crate::io::vec1")]
    pub d: Array1<f64>,
}

impl NeighborGraph {
    pub fn new(w: Array2<f64>) -> Result<Self> {
        let (n, m) = w.dim();
        if n != m {
            return Err(Error::DimensionMismatch(format!("affinity matrix {n}×{m}")));
        }
        for ((i, j), &v) in w.indexed_iter() {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::NegativeEntry(format!("w[{i},{j}] = {v}")));
            }
            if (v - w[[j, i]]).abs() > 1e-12 {
                return Err(Error::InvalidTable(format!("w not symmetric at ({i},{j})")));
            }
        }
        let d = w.sum_axis(Axis(1));
        Ok(NeighborGraph { w, d })
    }

    /// Every pair joined with weight 1, no self loops.
    pub fn complete(n: usize) -> Self {
        let w = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 });
        NeighborGraph::new(w).expect("complete graph is valid")
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    /// Connected components by breadth-first search over positive weights.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(i) = queue.pop_front() {
                for j in 0..n {
                    if !seen[j] && self.w[[i, j]] > 0.0 {
                        seen[j] = true;
                        comp.push(j);
                        queue.push_back(j);
                    }
                }
            }
            out.push(comp);
        }
        out
    }
}

/// Median of the pairwise distances between distinct points.
pub fn median_distance(pc: &PointCloud) -> f64 {
    let d2 = pc.sq_distances();
    let n = pc.n();
    let mut all: Vec<f64> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d2[[i, j]].sqrt()).collect();
    all.sort_by(|a, b| a.total_cmp(b));
    let m = all.len();
    if m % 2 == 1 {
        all[m / 2]
    } else {
        0.5 * (all[m / 2 - 1] + all[m / 2])
    }
}

/// ε-neighborhood graph with Gaussian weights `exp(−‖x − x′‖² / 2h²)`,
/// bandwidth h = median pairwise distance, no self loops.
pub fn epsilon_graph(pc: &PointCloud, epsilon: f64) -> Result<NeighborGraph> {
    let h = median_distance(pc);
    if !(h > 0.0) {
        return Err(Error::Config("all points coincide; bandwidth is zero".into()));
    }
    let d2 = pc.sq_distances();
    let w = Array2::from_shape_fn(d2.raw_dim(), |(i, j)| {
        if i != j && d2[[i, j]].sqrt() <= epsilon {
            (-d2[[i, j]] / (2.0 * h * h)).exp()
        } else {
            0.0
        }
    });
    NeighborGraph::new(w)
}

#[derive(Debug, Clone)]
pub struct LaplacianEmbedding {
    /// Eigenvectors of `D⁻¹W` as columns, scaled so `fᵀDf = Σd`; the first
    /// is the constant vector 𝟙.
    pub embedding: Array2<f64>,
    /// Eigenvalues of `D⁻¹W`, descending, all in [−1, 1].
    pub eigenvalues: Array1<f64>,
}

/// Top-d eigenvectors of the random-walk operator `D⁻¹W`.
///
/// `D⁻¹W = D^{-1/2} S D^{1/2}` with `S = D^{-1/2} W D^{-1/2}` symmetric, so
/// both share eigenvalues and `f = D^{-1/2} u` maps eigenvectors of S to
/// those of `D⁻¹W`.
pub fn laplacian_embed(g: &NeighborGraph, d: usize) -> Result<LaplacianEmbedding> {
    let n = g.n();
    if d == 0 || d > n {
        return Err(Error::RankOutOfBounds(format!("d = {d} with {n} nodes")));
    }
    let comps = g.components();
    if comps.len() > 1 {
        return Err(Error::Disconnected(format!("{} connected components", comps.len())));
    }
    if let Some(i) = g.d.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Disconnected(format!("node {i} has zero degree")));
    }
    let isd = g.d.mapv(|v| 1.0 / v.sqrt());
    let sym = Array2::from_shape_fn(g.w.raw_dim(), |(i, j)| isd[i] * g.w[[i, j]] * isd[j]);
    let (vals, vecs) = sym_eigen(sym.view());
    let total = g.d.sum();
    let mut f = linalg::scale_rows(vecs.slice(s![.., ..d]), &isd);
    for mut col in f.columns_mut() {
        let norm: f64 = col.iter().zip(g.d.iter()).map(|(v, w)| w * v * v).sum();
        col.mapv_inplace(|v| v * (total / norm).sqrt());
    }
    fix_signs(&mut f, None);
    let eigenvalues = vals.slice(s![..d]).mapv(|v| v.clamp(-1.0, 1.0));
    Ok(LaplacianEmbedding { embedding: f, eigenvalues })
}

#[derive(Debug, Clone)]
pub struct Lpp {
    /// p×d projection V with `Vᵀ (XᵀX/n) V = I`.
    pub projection: Array2<f64>,
    pub eigenvalues: Array1<f64>,
    /// Set when the constraint Gram matrix needed the ridge.
    pub warning: Option<Error>,
}

/// Locality preserving projections: maximize `tr(Vᵀ Xᵀ D⁻¹W X V)` subject
/// to `Vᵀ (XᵀX/n) V = I`. Only the symmetric part of `XᵀD⁻¹WX` enters the
/// trace, so the generalized problem is symmetric.
pub fn lpp(pc: &PointCloud, g: &NeighborGraph, d: usize) -> Result<Lpp> {
    let (n, p) = pc.x.dim();
    if g.n() != n {
        return Err(Error::DimensionMismatch(format!("graph on {} nodes, {n} points", g.n())));
    }
    if d == 0 || d > p {
        return Err(Error::RankOutOfBounds(format!("d = {d} with {p} coordinates")));
    }
    if let Some(i) = g.d.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Disconnected(format!("node {i} has zero degree")));
    }
    let rw = Array2::from_shape_fn(g.w.raw_dim(), |(i, j)| g.w[[i, j]] / g.d[i]);
    let m = pc.x.t().dot(&rw).dot(&pc.x);
    let a = (&m + &m.t()) / 2.0;
    let b = pc.x.t().dot(&pc.x) / n as f64;
    let cond = linalg::sym_condition(b.view());
    let warning = (cond > MAX_GRAM_COND).then(|| {
        log::warn!("LPP constraint Gram condition {cond:e}; ridge {WHITEN_RIDGE:e} applied");
        Error::SingularGram(format!("constraint Gram condition {cond:e}"))
    });
    let b_isqrt = inv_sqrt_sym(b.view(), WHITEN_RIDGE)?;
    let (vals, vecs) = sym_eigen(b_isqrt.dot(&a).dot(&b_isqrt).view());
    let mut projection = b_isqrt.dot(&vecs.slice(s![.., ..d]));
    fix_signs(&mut projection, None);
    Ok(Lpp { projection, eigenvalues: vals.slice(s![..d]).to_owned(), warning })
}

#[derive(Debug, Clone)]
pub struct Cca {
    /// Transforms for x: table rows (n×d) or coordinates (p×d).
    pub a: Array2<f64>,
    /// Transforms for y.
    pub b: Array2<f64>,
    /// Canonical correlations, descending.
    pub correlations: Array1<f64>,
    pub warning: Option<Error>,
}

/// CCA on a finite table: the constant pair has correlation 1 and is
/// skipped; the rest are σ₂..σ_{d+1} of T with `a = D_x^{-1/2} u`, so that
/// `E_px[a aᵀ] = I`.
pub fn cca_table(j: &JointTable, d: usize) -> Result<Cca> {
    let r = j.n().min(j.m());
    if d == 0 || d + 1 > r {
        return Err(Error::RankOutOfBounds(format!("d = {d} needs d + 1 ≤ {r}")));
    }
    let basis = oracle::oracle(j, d + 1)?;
    let ix = j.px().mapv(|v| 1.0 / v.sqrt());
    let iy = j.py().mapv(|v| 1.0 / v.sqrt());
    let a = linalg::scale_rows(basis.u.slice(s![.., 1..]), &ix);
    let b = linalg::scale_rows(basis.v.slice(s![.., 1..]), &iy);
    let correlations = basis.sigma.slice(s![1..]).mapv(|v| v.clamp(0.0, 1.0));
    Ok(Cca { a, b, correlations, warning: None })
}

/// Linear CCA on paired clouds via the SVD of the whitened
/// cross-covariance `Cxx^{-1/2} Cxy Cyy^{-1/2}`.
pub fn cca_clouds(x: &PointCloud, y: &PointCloud, d: usize) -> Result<Cca> {
    let n = x.n();
    if y.n() != n {
        return Err(Error::DimensionMismatch(format!("{n} vs {} paired points", y.n())));
    }
    if d == 0 || d > x.p().min(y.p()) {
        return Err(Error::RankOutOfBounds(format!("d = {d} with {} and {} coordinates", x.p(), y.p())));
    }
    let xc = x.centered();
    let yc = y.centered();
    let cxx = xc.t().dot(&xc) / n as f64;
    let cyy = yc.t().dot(&yc) / n as f64;
    let cxy = xc.t().dot(&yc) / n as f64;
    let cond = linalg::sym_condition(cxx.view()).max(linalg::sym_condition(cyy.view()));
    let warning = (cond > MAX_GRAM_COND).then(|| {
        log::warn!("CCA covariance condition {cond:e}; ridge {WHITEN_RIDGE:e} applied");
        Error::SingularGram(format!("covariance condition {cond:e}"))
    });
    let wx = inv_sqrt_sym(cxx.view(), WHITEN_RIDGE)?;
    let wy = inv_sqrt_sym(cyy.view(), WHITEN_RIDGE)?;
    let f = linalg::svd(wx.dot(&cxy).dot(&wy).view());
    let mut a = wx.dot(&f.u.slice(s![.., ..d]));
    let mut b = wy.dot(&f.v.slice(s![.., ..d]));
    fix_signs(&mut a, Some(&mut b));
    let correlations = f.s.slice(s![..d]).mapv(|v| v.clamp(0.0, 1.0));
    Ok(Cca { a, b, correlations, warning })
}

/// One NCA ranking problem: the anchor must pick `positive` out of
/// `{positive} ∪ negatives`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NcaSet {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// For every anchor, a random same-label positive and `n_neg` random
/// other-label negatives. Anchors without a same-label partner or without
/// other-label points are skipped.
pub fn nca_sets_from_labels(labels: &[usize], n_neg: usize, seed: u64) -> Vec<NcaSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, &li) in labels.iter().enumerate() {
        let same: Vec<usize> = (0..labels.len()).filter(|&j| j != i && labels[j] == li).collect();
        let other: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != li).collect();
        if same.is_empty() || other.is_empty() {
            continue;
        }
        let positive = same[rng.gen_range(0..same.len())];
        let negatives = (0..n_neg).map(|_| other[rng.gen_range(0..other.len())]).collect();
        out.push(NcaSet { anchor: i, positive, negatives });
    }
    out
}

/// NCA log loss with scores `s = (Wx/‖Wx‖)ᵀ(Wx′/‖Wx′‖)`, averaged over
/// the sets. `w` is d×p; the gradient lands in `grad_phi` (grad_psi is
/// zero, the map is shared by both sides).
pub fn nca_loss(pc: &PointCloud, sets: &[NcaSet], w: &Array2<f64>) -> Result<LossReport> {
    if w.ncols() != pc.p() {
        return Err(Error::DimensionMismatch(format!("map {:?} for {} coordinates", w.dim(), pc.p())));
    }
    if sets.is_empty() {
        return Err(Error::Config("NCA needs at least one candidate set".into()));
    }
    let z = pc.x.dot(&w.t());
    let u = normalize_rows(&z)?;
    let n = pc.n();
    let mut gs = Array2::<f64>::zeros((n, n));
    let mut value = 0.0;
    let weight = 1.0 / sets.len() as f64;
    for set in sets {
        let cands: Vec<usize> = std::iter::once(set.positive).chain(set.negatives.iter().copied()).collect();
        if cands.iter().chain(std::iter::once(&set.anchor)).any(|&c| c >= n) {
            return Err(Error::DimensionMismatch(format!("candidate index out of range in {set:?}")));
        }
        let sc: Vec<f64> = cands.iter().map(|&c| u.row(set.anchor).dot(&u.row(c))).collect();
        let lse = logsumexp(sc.iter().copied());
        value += weight * (lse - sc[0]);
        gs[[set.anchor, set.positive]] -= weight;
        for (&c, &sv) in cands.iter().zip(&sc) {
            gs[[set.anchor, c]] += weight * (sv - lse).exp();
        }
    }
    // s = U Uᵀ, so dL/dU = (G + Gᵀ) U
    let gu = (&gs + &gs.t()).dot(&u);
    let gz = normalize_backprop(&z, &u, &gu);
    Ok(LossReport { value, grad_phi: gz.t().dot(&pc.x), grad_psi: Array2::zeros(w.raw_dim()) })
}

/// SNE objective with free embeddings: ranking NCE over candidates j ≠ i
/// with `s(i, j) = −‖y_i − y_j‖²`, positives weighted by the similarity
/// table (its diagonal is ignored).
pub fn sne_loss(sim: &JointTable, y: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let n = sim.n();
    if sim.m() != n || y.nrows() != n {
        return Err(Error::DimensionMismatch(format!("similarity {}×{} for {} points", n, sim.m(), y.nrows())));
    }
    let mut grad = Array2::<f64>::zeros(y.raw_dim());
    if n < 2 {
        return Ok((0.0, grad));
    }
    let p = sim.p();
    let mut value = 0.0;
    let mut gs = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let s: Vec<f64> = (0..n).map(|j| if j == i { f64::NEG_INFINITY } else { -sq_dist(y, i, j) }).collect();
        let lse = logsumexp(s.iter().copied().filter(|v| v.is_finite()));
        let ri: f64 = (0..n).filter(|&j| j != i).map(|j| p[[i, j]]).sum();
        for j in (0..n).filter(|&j| j != i) {
            value += p[[i, j]] * (lse - s[j]);
            gs[[i, j]] += -p[[i, j]] + ri * (s[j] - lse).exp();
        }
    }
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let g = gs[[i, j]];
            if g == 0.0 {
                continue;
            }
            // s = −‖y_i − y_j‖²
            let diff = &y.row(i) - &y.row(j);
            grad.row_mut(i).scaled_add(-2.0 * g, &diff);
            grad.row_mut(j).scaled_add(2.0 * g, &diff);
        }
    }
    Ok((value, grad))
}

fn sq_dist(y: &Array2<f64>, i: usize, j: usize) -> f64 {
    y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[derive(Debug, Clone)]
pub struct SneRun {
    pub embedding: Array2<f64>,
    /// Loss before the first step and after every step.
    pub trace: Vec<f64>,
}

/// Gradient descent on `sne_loss` from a seeded gaussian start (scale 0.1),
/// halving the step until the loss does not increase.
pub fn sne_embed(sim: &JointTable, d: usize, iters: usize, alpha: f64, seed: u64) -> Result<SneRun> {
    if !sim.is_symmetric(1e-12) {
        return Err(Error::InvalidTable("SNE needs a symmetric similarity table".into()));
    }
    let n = sim.n();
    if n == 1 {
        return Ok(SneRun { embedding: Array2::zeros((1, d)), trace: vec![0.0] });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Array2::from_shape_fn((n, d), |_| 0.1 * rng.sample::<f64, _>(StandardNormal));
    let (mut value, mut grad) = sne_loss(sim, &y)?;
    let mut trace = vec![value];
    for _ in 0..iters {
        let mut step = alpha;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &y - &(&grad * step);
            let (v, g) = sne_loss(sim, &cand)?;
            if v <= value {
                y = cand;
                value = v;
                grad = g;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        trace.push(value);
        if !accepted {
            break;
        }
    }
    Ok(SneRun { embedding: y, trace })
}

/// Rescale columns of `a` to unit Euclidean norm (for comparing
/// embeddings up to per-axis scale).
pub fn unit_columns(a: ArrayView2<f64>) -> Array2<f64> {
    let norms = a.map_axis(Axis(0), |c| {
        let n = c.dot(&c).sqrt();
        if n > 0.0 {
            1.0 / n
        } else {
            0.0
        }
    });
    scale_cols(a, &norms)
}
