//! Latent-variable spectral representation: softmax posteriors P(z|x),
//! DeepCluster's k-means/cross-entropy alternation, SeLa's Sinkhorn
//! E-step, and DINO/SwAV distillation toward a stationary posterior.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::JointTable;
use crate::error::{Error, Result};
use crate::linalg::{logsumexp, softmax_rows};

/// Softmax posterior `P(z|x) = softmax(υ(x)ᵀW + b)` plus the Gaussian
/// view of the same model (centroids C, variance σ²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    #[serde(with = "crate::io::mat")]
    pub upsilon: Array2<f64>,
    #[serde(with = "crate::io::mat")]
    pub w: Array2<f64>,
    #[serde(with = "crate::io::vec1")]
    pub b: Array1<f64>,
    #[serde(with = "crate::io::mat")]
    pub centroids: Array2<f64>,
    pub sigma2: f64,
}

impl LatentParams {
    pub fn new(upsilon: Array2<f64>, w: Array2<f64>, b: Array1<f64>) -> Result<Self> {
        if w.nrows() != upsilon.ncols() || b.len() != w.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "upsilon {:?}, W {:?}, b {}",
                upsilon.dim(),
                w.dim(),
                b.len()
            )));
        }
        let centroids = Array2::zeros(w.raw_dim());
        Ok(LatentParams { upsilon, w, b, centroids, sigma2: 1.0 })
    }

    /// Softmax weights equivalent to isotropic Gaussian clusters:
    /// `W_z = C_z/σ²`, `b_z = −‖C_z‖²/(2σ²)`.
    pub fn from_gaussian(upsilon: Array2<f64>, centroids: Array2<f64>, sigma2: f64) -> Result<Self> {
        if sigma2 <= 0.0 {
            return Err(Error::Config(format!("sigma2 = {sigma2} must be positive")));
        }
        let w = &centroids / sigma2;
        let b = centroids.map_axis(Axis(0), |c| -c.dot(&c) / (2.0 * sigma2));
        let mut p = LatentParams::new(upsilon, w, b)?;
        p.centroids = centroids;
        p.sigma2 = sigma2;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn logits(&self) -> Array2<f64> {
        self.upsilon.dot(&self.w) + &self.b
    }
}

/// P(z|x) for one element.
pub fn posterior(params: &LatentParams, x: usize) -> Array1<f64> {
    let l = params.upsilon.row(x).dot(&params.w) + &params.b;
    let lse = logsumexp(l.iter().copied());
    l.mapv(|v| (v - lse).exp())
}

/// P(z|x) for every element, one row per x.
pub fn posteriors(params: &LatentParams) -> Array2<f64> {
    softmax_rows(params.logits().view())
}

/// `softmax(−‖C_z − υ(x)‖²/(2σ²))` computed directly from distances.
pub fn gaussian_posteriors(upsilon: ArrayView2<f64>, centroids: ArrayView2<f64>, sigma2: f64) -> Array2<f64> {
    let logits = Array2::from_shape_fn((upsilon.nrows(), centroids.ncols()), |(x, z)| {
        let d = &upsilon.row(x) - &centroids.column(z);
        -d.dot(&d) / (2.0 * sigma2)
    });
    softmax_rows(logits.view())
}

/// Gradients of a loss in the softmax logits mapped to (υ, W, b).
#[derive(Debug, Clone)]
pub struct LatentGrad {
    pub value: f64,
    pub upsilon: Array2<f64>,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LatentGrad {
    pub fn norm(&self) -> f64 {
        self.upsilon.iter().chain(self.w.iter()).chain(self.b.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// `−Σ_x Σ_z Q(x,z) log P(z|x)` for nonnegative target weights Q, with its
/// gradient.
pub fn cross_entropy(params: &LatentParams, targets: &Array2<f64>) -> Result<LatentGrad> {
    let logits = params.logits();
    if targets.dim() != logits.dim() {
        return Err(Error::DimensionMismatch(format!("targets {:?} vs logits {:?}", targets.dim(), logits.dim())));
    }
    let mut value = 0.0;
    let mut g = Array2::<f64>::zeros(logits.raw_dim());
    for x in 0..logits.nrows() {
        let row = logits.row(x);
        let lse = logsumexp(row.iter().copied());
        let mass: f64 = targets.row(x).sum();
        for z in 0..logits.ncols() {
            let q = targets[[x, z]];
            if q != 0.0 {
                value -= q * (row[z] - lse);
            }
            g[[x, z]] = mass * (row[z] - lse).exp() - q;
        }
    }
    Ok(LatentGrad { value, upsilon: g.dot(&params.w.t()), w: params.upsilon.t().dot(&g), b: g.sum_axis(Axis(0)) })
}

fn apply(params: &LatentParams, g: &LatentGrad, step: f64) -> LatentParams {
    let mut out = params.clone();
    out.upsilon.scaled_add(-step, &g.upsilon);
    out.w.scaled_add(-step, &g.w);
    out.b.scaled_add(-step, &g.b);
    out
}

/// Halvings allowed per backtracked step.
const MAX_HALVINGS: usize = 50;

/// One gradient step on `cross_entropy` that never increases it: the step
/// is halved until the value does not go up. Returns the new parameters,
/// the new value and the step actually taken.
pub fn descend_cross_entropy(
    params: &LatentParams,
    targets: &Array2<f64>,
    alpha: f64,
) -> Result<(LatentParams, f64, f64)> {
    let g = cross_entropy(params, targets)?;
    let mut step = alpha;
    for _ in 0..MAX_HALVINGS {
        let cand = apply(params, &g, step);
        let v = cross_entropy(&cand, targets)?.value;
        if v <= g.value {
            return Ok((cand, v, step));
        }
        step *= 0.5;
    }
    Ok((params.clone(), g.value, 0.0))
}

/// Hard k-means result.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    /// k × d, one centroid per row.
    pub centroids: Array2<f64>,
    pub distortion: f64,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once(data: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> KMeans {
    let n = data.nrows();
    // k-means++ seeding
    let mut centers: Vec<usize> = vec![rng.gen_range(0..n)];
    while centers.len() < k {
        let d2: Vec<f64> = (0..n)
            .map(|i| centers.iter().map(|&c| sq_dist(data.row(i), data.row(c))).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total == 0.0 {
            (0..n).find(|i| !centers.contains(i)).unwrap_or(0)
        } else {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                if r < v {
                    pick = i;
                    break;
                }
                r -= v;
            }
            pick
        };
        centers.push(next);
    }
    let mut cent = Array2::from_shape_fn((k, data.ncols()), |(c, j)| data[[centers[c], j]]);
    let mut assign = vec![usize::MAX; n];
    for _ in 0..1000 {
        let mut changed = false;
        for i in 0..n {
            // ties go to the lowest cluster index
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let d = sq_dist(data.row(i), cent.row(c));
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros(cent.raw_dim());
        for i in 0..n {
            counts[assign[i]] += 1;
            sums.row_mut(assign[i]).scaled_add(1.0, &data.row(i));
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed at the point farthest from its own centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(data.row(a), cent.row(assign[a])).total_cmp(&sq_dist(data.row(b), cent.row(assign[b])))
                    })
                    .expect("nonempty data");
                cent.row_mut(c).assign(&data.row(far));
                assign[far] = c;
                changed = true;
            } else {
                cent.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        if !changed {
            break;
        }
    }
    let distortion = (0..n).map(|i| sq_dist(data.row(i), cent.row(assign[i]))).sum();
    KMeans { assignments: assign, centroids: cent, distortion }
}

/// DeepCluster E-step: k-means on the rows of `data` with k-means++
/// seeding, keeping the restart of lowest distortion. Restart `i` draws
/// from stream `i` of the seeded generator, so adding restarts never
/// changes the earlier ones.
pub fn deepcluster_e_step(data: ArrayView2<f64>, k: usize, n_restarts: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > data.nrows() {
        return Err(Error::RankOutOfBounds(format!("k = {k} clusters for {} points", data.nrows())));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..n_restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let km = kmeans_once(data, k, &mut rng);
        if best.as_ref().map_or(true, |b| km.distortion < b.distortion) {
            best = Some(km);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// One-hot targets weighted by `weights`.
pub fn hard_targets(assignments: &[usize], k: usize, weights: &Array1<f64>) -> Array2<f64> {
    let mut t = Array2::zeros((assignments.len(), k));
    for (x, &z) in assignments.iter().enumerate() {
        t[[x, z]] = weights[x];
    }
    t
}

/// DeepCluster M-step: backtracked gradient steps on the weighted
/// cross-entropy of the assignments. Returns the parameters and the
/// cross-entropy after each step.
pub fn deepcluster_m_step(
    params: &LatentParams,
    assignments: &[usize],
    weights: &Array1<f64>,
    max_iters: usize,
    alpha: f64,
) -> Result<(LatentParams, Vec<f64>)> {
    if assignments.len() != params.upsilon.nrows() || assignments.iter().any(|&z| z >= params.k()) {
        return Err(Error::DimensionMismatch("assignments do not match the parameters".into()));
    }
    let targets = hard_targets(assignments, params.k(), weights);
    let mut p = params.clone();
    let mut trace = Vec::with_capacity(max_iters);
    for _ in 0..max_iters {
        let (next, v, step) = descend_cross_entropy(&p, &targets, alpha)?;
        p = next;
        trace.push(v);
        if step == 0.0 {
            break;
        }
    }
    Ok((p, trace))
}

/// Entropic transport plan with prescribed marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentPlan {
    /// n × k, rows are elements.
    pub q: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub converged: bool,
    pub sweeps: usize,
    /// Max-abs deviation of the plan's marginals from the targets.
    pub residual: f64,
}

impl AssignmentPlan {
    /// Rows rescaled to sum to one, i.e. q(z|x).
    pub fn conditional(&self) -> Array2<f64> {
        let mut c = self.q.clone();
        for (mut row, &m) in c.rows_mut().into_iter().zip(self.row_marginal.iter()) {
            row.mapv_inplace(|v| v / m);
        }
        c
    }
}

/// Default entropic regularization of the Sinkhorn E-step.
pub const SINKHORN_EPSILON: f64 = 0.05;
/// Default sweep budget.
pub const SINKHORN_MAX_SWEEPS: usize = 10_000;
/// Marginal residual at which a plan counts as converged.
pub const SINKHORN_TOL: f64 = 1e-10;

/// Log-domain Sinkhorn–Knopp on the kernel `exp(log_kernel/ε)`.
pub fn sinkhorn(
    log_kernel: &Array2<f64>,
    row_marginal: &Array1<f64>,
    col_marginal: &Array1<f64>,
    epsilon: f64,
    max_sweeps: usize,
) -> Result<AssignmentPlan> {
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon = {epsilon} must be positive")));
    }
    let (n, k) = log_kernel.dim();
    if row_marginal.len() != n || col_marginal.len() != k {
        return Err(Error::DimensionMismatch("sinkhorn marginals".into()));
    }
    let kern = log_kernel / epsilon;
    let lr = row_marginal.mapv(f64::ln);
    let lc = col_marginal.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(k);
    let plan =
        |f: &Array1<f64>, g: &Array1<f64>| Array2::from_shape_fn((n, k), |(x, z)| (kern[[x, z]] + f[x] + g[z]).exp());
    let resid = |q: &Array2<f64>| {
        let r = (&q.sum_axis(Axis(1)) - row_marginal).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let c = (&q.sum_axis(Axis(0)) - col_marginal).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        r.max(c)
    };
    let mut sweeps = 0;
    let mut residual = resid(&plan(&f, &g));
    while sweeps < max_sweeps && residual > SINKHORN_TOL {
        for x in 0..n {
            f[x] = lr[x] - logsumexp((0..k).map(|z| kern[[x, z]] + g[z]));
        }
        for z in 0..k {
            g[z] = lc[z] - logsumexp((0..n).map(|x| kern[[x, z]] + f[x]));
        }
        sweeps += 1;
        residual = resid(&plan(&f, &g));
    }
    Ok(AssignmentPlan {
        q: plan(&f, &g),
        row_marginal: row_marginal.clone(),
        col_marginal: col_marginal.clone(),
        converged: residual <= SINKHORN_TOL,
        sweeps,
        residual,
    })
}

/// SeLa E-step: equipartition plan with rows 1/n and columns 1/k.
pub fn sela_e_step(log_posteriors: &Array2<f64>, epsilon: f64, max_sweeps: usize) -> Result<AssignmentPlan> {
    let (n, k) = log_posteriors.dim();
    sinkhorn(
        log_posteriors,
        &Array1::from_elem(n, 1.0 / n as f64),
        &Array1::from_elem(k, 1.0 / k as f64),
        epsilon,
        max_sweeps,
    )
}

/// How the DINO teacher is refreshed after each student step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TeacherMode {
    /// The new student's posterior (DINO).
    Previous,
    /// The Sinkhorn projection of the new student's posterior onto rows
    /// px and columns 1/k (SwAV).
    Sinkhorn { epsilon: f64 },
}

/// Distillation targets `Q = P·T + Pᵀ·T`: each element is pulled toward
/// the teacher posterior of its partners in both directions.
pub fn dino_targets(j: &JointTable, teacher: &Array2<f64>) -> Array2<f64> {
    j.p().dot(teacher) + j.p().t().dot(teacher)
}

/// Frozen-teacher cross-entropy of the student and its gradient.
pub fn dino_objective(j: &JointTable, student: &LatentParams, teacher: &Array2<f64>) -> Result<LatentGrad> {
    if j.n() != j.m() || teacher.nrows() != j.n() || student.upsilon.nrows() != j.n() || teacher.ncols() != student.k()
    {
        return Err(Error::DimensionMismatch("dino needs a shared domain and shared k".into()));
    }
    cross_entropy(student, &dino_targets(j, teacher))
}

/// Teacher posterior table produced from a student.
pub fn refresh_teacher(j: &JointTable, student: &LatentParams, mode: TeacherMode) -> Result<Array2<f64>> {
    match mode {
        TeacherMode::Previous => Ok(posteriors(student)),
        TeacherMode::Sinkhorn { epsilon } => {
            let k = student.k();
            let logp = posteriors(student).mapv(|v| v.max(f64::MIN_POSITIVE).ln());
            let plan = sinkhorn(&logp, j.px(), &Array1::from_elem(k, 1.0 / k as f64), epsilon, SINKHORN_MAX_SWEEPS)?;
            Ok(plan.conditional())
        }
    }
}

/// One backtracked student step on the frozen-teacher cross-entropy,
/// followed by the teacher refresh.
pub fn dino_step(
    j: &JointTable,
    student: &LatentParams,
    teacher: &Array2<f64>,
    alpha: f64,
    mode: TeacherMode,
) -> Result<(LatentParams, Array2<f64>)> {
    dino_objective(j, student, teacher)?;
    let (next, _, _) = descend_cross_entropy(student, &dino_targets(j, teacher), alpha)?;
    let t = refresh_teacher(j, &next, mode)?;
    Ok((next, t))
}

/// `max_{x,z} |Σ_{x′} P(z|x′)P(x′|x) − P(z|x)|`.
pub fn stationarity_residual(j: &JointTable, posterior: &Array2<f64>) -> Result<f64> {
    if posterior.nrows() != j.m() || j.n() != j.m() {
        return Err(Error::DimensionMismatch("posterior rows must index the shared domain".into()));
    }
    let lhs = j.conditional().dot(posterior);
    Ok((&lhs - posterior).iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Largest k for which label matching enumerates all permutations.
pub const MAX_MATCH_K: usize = 8;

/// Column permutation of `b` maximizing its overlap `Σ_z ⟨a_z, b_π(z)⟩`
/// with `a`, found by exhaustive search, and the max-abs difference after
/// relabeling.
pub fn match_labels(a: &Array2<f64>, b: &Array2<f64>) -> Result<(Vec<usize>, f64)> {
    let k = a.ncols();
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if k > MAX_MATCH_K {
        return Err(Error::Config(format!("label matching supports k ≤ {MAX_MATCH_K}, got {k}")));
    }
    let overlap = a.t().dot(b);
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = (f64::NEG_INFINITY, perm.clone());
    permute(&mut perm, 0, &mut |p| {
        let s: f64 = (0..k).map(|z| overlap[[z, p[z]]]).sum();
        if s > best.0 {
            best = (s, p.to_vec());
        }
    });
    let p = best.1;
    let err = (0..a.nrows())
        .flat_map(|x| (0..k).map(move |z| (x, z)))
        .map(|(x, z)| (a[[x, z]] - b[[x, p[z]]]).abs())
        .fold(0.0, f64::max);
    Ok((p, err))
}

fn permute(p: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, f);
        p.swap(i, j);
    }
}

/// Adjusted Rand index of two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = Array2::<f64>::zeros((ka, kb));
    for (&x, &y) in a.iter().zip(b) {
        table[[x, y]] += 1.0;
    }
    let c2 = |v: f64| v * (v - 1.0) / 2.0;
    let sum_ij: f64 = table.iter().map(|&v| c2(v)).sum();
    let sum_a: f64 = table.sum_axis(Axis(1)).iter().map(|&v| c2(v)).sum();
    let sum_b: f64 = table.sum_axis(Axis(0)).iter().map(|&v| c2(v)).sum();
    let expected = sum_a * sum_b / c2(n as f64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}
