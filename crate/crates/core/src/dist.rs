//! Exact finite joint distributions, the operators built from them, pair
//! sampling, and the synthetic fixtures every learner is trained on.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedAliasIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on total mass and on probability-vector sums.
pub const MASS_TOL: f64 = 1e-12;

/// An exact joint distribution over two finite domains. Rows index the
/// x-domain, columns the x′ (or y) domain. Both marginals are strictly
/// positive; individual entries may be zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JointTableRepr", into = "JointTableRepr")]
pub struct JointTable {
    p: Array2<f64>,
    px: Array1<f64>,
    py: Array1<f64>,
    labels_x: Option<Vec<String>>,
    labels_y: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct JointTableRepr {
    labels_x: Option<Vec<String>>,
    labels_y: Option<Vec<String>>,
    p: Vec<Vec<f64>>,
}

impl TryFrom<JointTableRepr> for JointTable {
    type Error = Error;
    fn try_from(r: JointTableRepr) -> Result<Self> {
        let p = crate::io::rows_to_matrix(&r.p)?;
        let mut j = JointTable::new(p)?;
        j.set_labels(r.labels_x, r.labels_y)?;
        Ok(j)
    }
}

impl From<JointTable> for JointTableRepr {
    fn from(j: JointTable) -> Self {
        JointTableRepr { labels_x: j.labels_x, labels_y: j.labels_y, p: crate::io::matrix_to_rows(&j.p) }
    }
}

impl JointTable {
    /// Wrap an already-normalized probability matrix, validating every
    /// invariant.
    pub fn new(p: Array2<f64>) -> Result<Self> {
        let (n, m) = p.dim();
        if n == 0 || m == 0 {
            return Err(Error::InvalidTable("empty table".into()));
        }
        if let Some(v) = p.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidTable(format!("non-finite entry {v}")));
        }
        if let Some(v) = p.iter().find(|&&v| v < 0.0) {
            return Err(Error::NegativeEntry(format!("{v}")));
        }
        let total: f64 = p.sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidTable(format!("mass {total} differs from 1")));
        }
        let px = p.sum_axis(ndarray::Axis(1));
        let py = p.sum_axis(ndarray::Axis(0));
        if let Some(i) = px.iter().position(|&v| v <= 0.0) {
            return Err(Error::ZeroRowOrColumn(format!("row {i}")));
        }
        if let Some(i) = py.iter().position(|&v| v <= 0.0) {
            return Err(Error::ZeroRowOrColumn(format!("column {i}")));
        }
        Ok(JointTable { p, px, py, labels_x: None, labels_y: None })
    }

    /// Attach element names; lengths must match the domains.
    pub fn set_labels(&mut self, labels_x: Option<Vec<String>>, labels_y: Option<Vec<String>>) -> Result<()> {
        if labels_x.as_ref().is_some_and(|l| l.len() != self.n()) {
            return Err(Error::DimensionMismatch("labels_x length".into()));
        }
        if labels_y.as_ref().is_some_and(|l| l.len() != self.m()) {
            return Err(Error::DimensionMismatch("labels_y length".into()));
        }
        self.labels_x = labels_x;
        self.labels_y = labels_y;
        Ok(())
    }

    pub fn p(&self) -> &Array2<f64> {
        &self.p
    }
    pub fn px(&self) -> &Array1<f64> {
        &self.px
    }
    pub fn py(&self) -> &Array1<f64> {
        &self.py
    }
    pub fn n(&self) -> usize {
        self.p.nrows()
    }
    pub fn m(&self) -> usize {
        self.p.ncols()
    }
    pub fn labels_x(&self) -> Option<&[String]> {
        self.labels_x.as_deref()
    }
    pub fn labels_y(&self) -> Option<&[String]> {
        self.labels_y.as_deref()
    }

    /// Product of the marginals, `px · pyᵀ`.
    pub fn product(&self) -> Array2<f64> {
        outer(&self.px, &self.py)
    }

    /// The table with the two domains swapped.
    pub fn transpose(&self) -> JointTable {
        JointTable {
            p: self.p.t().to_owned(),
            px: self.py.clone(),
            py: self.px.clone(),
            labels_x: self.labels_y.clone(),
            labels_y: self.labels_x.clone(),
        }
    }

    /// Row-conditional P(x′|x).
    pub fn conditional(&self) -> Array2<f64> {
        let mut c = self.p.clone();
        for (mut row, &w) in c.rows_mut().into_iter().zip(self.px.iter()) {
            row.mapv_inplace(|v| v / w);
        }
        c
    }

    /// True when rows and columns index the same domain and p = pᵀ.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.n() == self.m() && crate::linalg::max_abs_diff(self.p.view(), self.p.t()) <= tol
    }
}

pub(crate) fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Normalize a nonnegative matrix into a JointTable.
pub fn from_table(raw: ArrayView2<f64>) -> Result<JointTable> {
    if let Some(v) = raw.iter().find(|&&v| v < 0.0) {
        return Err(Error::NegativeEntry(format!("{v}")));
    }
    if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidTable(format!("non-finite entry {v}")));
    }
    for (i, row) in raw.rows().into_iter().enumerate() {
        if row.sum() <= 0.0 {
            return Err(Error::ZeroRowOrColumn(format!("row {i}")));
        }
    }
    for (j, col) in raw.columns().into_iter().enumerate() {
        if col.sum() <= 0.0 {
            return Err(Error::ZeroRowOrColumn(format!("column {j}")));
        }
    }
    let total: f64 = raw.sum();
    JointTable::new(raw.mapv(|v| v / total))
}

/// Row and column marginals.
pub fn marginals(j: &JointTable) -> (Array1<f64>, Array1<f64>) {
    (j.px.clone(), j.py.clone())
}

/// The normalized operator `T = p / (√px √pyᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TMatrix {
    pub t: Array2<f64>,
    pub sqrt_px: Array1<f64>,
    pub sqrt_py: Array1<f64>,
}

pub fn t_matrix(j: &JointTable) -> TMatrix {
    let sqrt_px = j.px.mapv(f64::sqrt);
    let sqrt_py = j.py.mapv(f64::sqrt);
    let t = Array2::from_shape_fn(j.p.dim(), |(a, b)| j.p[[a, b]] / (sqrt_px[a] * sqrt_py[b]));
    TMatrix { t, sqrt_px, sqrt_py }
}

/// The pointwise-mutual-information ratio `p / (px pyᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioMatrix {
    pub r: Array2<f64>,
}

pub fn ratio_matrix(j: &JointTable) -> RatioMatrix {
    let r = Array2::from_shape_fn(j.p.dim(), |(a, b)| j.p[[a, b]] / (j.px[a] * j.py[b]));
    RatioMatrix { r }
}

/// Positive pairs drawn from p and negative pairs from px ⊗ py.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    pub pos_pairs: Vec<(usize, usize)>,
    pub neg_pairs: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Alias-table sampler for the three distributions of a table.
pub struct PairSampler {
    joint: WeightedAliasIndex<f64>,
    px: WeightedAliasIndex<f64>,
    py: WeightedAliasIndex<f64>,
    m: usize,
}

impl PairSampler {
    pub fn new(j: &JointTable) -> Self {
        let alias = |w: Vec<f64>| WeightedAliasIndex::new(w).expect("valid probability vector");
        PairSampler {
            joint: alias(j.p.iter().copied().collect()),
            px: alias(j.px.to_vec()),
            py: alias(j.py.to_vec()),
            m: j.m(),
        }
    }

    pub fn positive<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let k = self.joint.sample(rng);
        (k / self.m, k % self.m)
    }

    pub fn negative<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        (self.px.sample(rng), self.py.sample(rng))
    }

    pub fn x<R: Rng>(&self, rng: &mut R) -> usize {
        self.px.sample(rng)
    }

    pub fn y<R: Rng>(&self, rng: &mut R) -> usize {
        self.py.sample(rng)
    }
}

/// Draw `n_pos` positives and `n_neg` negatives with a ChaCha stream keyed
/// by `seed`.
pub fn sample_pairs(j: &JointTable, n_pos: usize, n_neg: usize, seed: u64) -> PairBatch {
    let sampler = PairSampler::new(j);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos_pairs = (0..n_pos).map(|_| sampler.positive(&mut rng)).collect();
    let neg_pairs = (0..n_neg).map(|_| sampler.negative(&mut rng)).collect();
    PairBatch { pos_pairs, neg_pairs, seed }
}

/// Two equal diagonal blocks with in-block mass `a` and cross mass `b`.
pub fn synth_block(n: usize, a: f64, b: f64) -> Result<JointTable> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidTable(format!("block size {n} must be even and positive")));
    }
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidTable("block masses must be positive".into()));
    }
    let total = (n * n) as f64 / 2.0 * (a + b);
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::MassMismatch(format!("(n²/2)(a+b) = {total}")));
    }
    let h = n / 2;
    JointTable::new(Array2::from_shape_fn((n, n), |(i, k)| if (i < h) == (k < h) { a } else { b }))
}

/// The canonical 4×4 block fixture with T spectrum (1, ½, 0, 0).
pub fn block4() -> JointTable {
    synth_block(4, 3.0 / 32.0, 1.0 / 32.0).expect("valid block fixture")
}

/// Uniform mass mixed into every factor of the low-rank generator.
pub const LOWRANK_UNIFORM_MIX: f64 = 1e-3;

/// A strictly positive joint of rank exactly `d`, built as a mixture of `d`
/// product components. Each factor is a log-normal profile with
/// `LOWRANK_UNIFORM_MIX` uniform mass mixed in, which keeps every entry
/// positive without raising the rank. When `n == m` the two factors of each
/// component coincide, so the table is symmetric and T is positive
/// semidefinite.
pub fn synth_random_lowrank(n: usize, m: usize, d: usize, seed: u64) -> Result<JointTable> {
    if d == 0 || d > n.min(m) {
        return Err(Error::RankOutOfBounds(format!("d = {d} for a {n}×{m} table")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = |len: usize, rng: &mut ChaCha8Rng| -> Array1<f64> {
        let raw: Array1<f64> = (0..len).map(|_| (1.5 * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
        let s = raw.sum();
        raw.mapv(|v| (1.0 - LOWRANK_UNIFORM_MIX) * v / s + LOWRANK_UNIFORM_MIX / len as f64)
    };
    let weights: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut p = Array2::<f64>::zeros((n, m));
    for &w in &weights {
        let a = profile(n, &mut rng);
        let b = if n == m { a.clone() } else { profile(m, &mut rng) };
        p.scaled_add(w / wsum, &outer(&a, &b));
    }
    from_table(p.view())
}

/// A latent-class joint `Σ_z P(z) P(x|z) P(x′|z)` whose emissions have
/// disjoint supports: x belongs to the contiguous block `z = ⌊x·k/n_x⌋`.
/// Disjoint supports make the true posterior one-hot and exactly
/// stationary under P(x′|x). Returns the joint and the true posterior.
pub fn synth_latent_mixture(n_x: usize, k: usize, seed: u64) -> Result<(JointTable, Array2<f64>)> {
    if k == 0 || k > n_x {
        return Err(Error::RankOutOfBounds(format!("k = {k} latent classes for {n_x} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block: Vec<usize> = (0..n_x).map(|x| x * k / n_x).collect();
    let pz = Array1::from_elem(k, 1.0 / k as f64);
    let mut emission = Array2::<f64>::zeros((k, n_x));
    for (x, &z) in block.iter().enumerate() {
        emission[[z, x]] = rng.gen_range(0.5..1.5);
    }
    for mut row in emission.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let mut p = Array2::<f64>::zeros((n_x, n_x));
    for z in 0..k {
        let e = emission.row(z).to_owned();
        p.scaled_add(pz[z], &outer(&e, &e));
    }
    let posterior = Array2::from_shape_fn((n_x, k), |(x, z)| if block[x] == z { 1.0 } else { 0.0 });
    Ok((JointTable::new(p)?, posterior))
}

/// Instrumental-variable model: joint over (z, x), the conditional means
/// E[y | z, x], and the structural function kept for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct IvModel {
    pub p_zx: JointTable,
    pub ey_zx: Array2<f64>,
    pub f_star: Array1<f64>,
}

impl IvModel {
    /// Validates instrument validity E[y − f*(x) | z] = 0.
    pub fn new(p_zx: JointTable, ey_zx: Array2<f64>, f_star: Array1<f64>) -> Result<Self> {
        if ey_zx.dim() != p_zx.p().dim() || f_star.len() != p_zx.m() {
            return Err(Error::DimensionMismatch("iv model tables".into()));
        }
        let cond = p_zx.conditional();
        for z in 0..p_zx.n() {
            let resid: f64 = (0..p_zx.m()).map(|x| cond[[z, x]] * (ey_zx[[z, x]] - f_star[x])).sum();
            if resid.abs() > MASS_TOL {
                return Err(Error::InvalidTable(format!("instrument validity fails at z={z}: residual {resid:e}")));
            }
        }
        Ok(IvModel { p_zx, ey_zx, f_star })
    }

    /// E[y | z].
    pub fn ey_z(&self) -> Array1<f64> {
        let cond = self.p_zx.conditional();
        (&cond * &self.ey_zx).sum_axis(ndarray::Axis(1))
    }

    /// The conditional-expectation operator E[f(x) | z] as a |Z|×|X| matrix.
    pub fn conditional_expectation(&self) -> Array2<f64> {
        self.p_zx.conditional()
    }
}

/// Binary instrument z, binary confounder u, x = z XOR u,
/// y = f*(x) + h(u).
pub fn synth_iv_xor(p_u0: f64, h: [f64; 2], f_star: [f64; 2]) -> Result<IvModel> {
    if !(p_u0 > 0.0 && p_u0 < 1.0) {
        return Err(Error::InvalidTable(format!("p_u0 = {p_u0} outside (0,1)")));
    }
    if (p_u0 - 0.5).abs() < MASS_TOL {
        return Err(Error::NotIdentified("P(u=0) = 0.5 makes E[f(x)|z] constant".into()));
    }
    if (p_u0 * h[0] + (1.0 - p_u0) * h[1]).abs() > MASS_TOL {
        return Err(Error::InvalidTable("h must have mean zero under P(u)".into()));
    }
    let pu = [p_u0, 1.0 - p_u0];
    let p = Array2::from_shape_fn((2, 2), |(z, x)| 0.5 * pu[z ^ x]);
    let ey = Array2::from_shape_fn((2, 2), |(z, x)| f_star[x] + h[z ^ x]);
    IvModel::new(JointTable::new(p)?, ey, Array1::from_vec(f_star.to_vec()))
}

/// A finite MDP; state-action pairs are indexed `s·|A| + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpTable {
    #[serde(with = "crate::io::mat")]
    pub transition: Array2<f64>,
    #[serde(with = "crate::io::vec1")]
    pub reward: Array1<f64>,
    pub gamma: f64,
    #[serde(with = "crate::io::vec1")]
    pub d0: Array1<f64>,
    pub n_actions: usize,
}

impl MdpTable {
    pub fn new(
        transition: Array2<f64>,
        reward: Array1<f64>,
        gamma: f64,
        d0: Array1<f64>,
        n_actions: usize,
    ) -> Result<Self> {
        let (sa, s) = transition.dim();
        if n_actions == 0 || sa != s * n_actions || reward.len() != sa || d0.len() != s {
            return Err(Error::DimensionMismatch(format!(
                "transition {sa}×{s}, {n_actions} actions, reward {}, d0 {}",
                reward.len(),
                d0.len()
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidTable(format!("gamma = {gamma} outside [0,1)")));
        }
        for (i, row) in transition.rows().into_iter().enumerate() {
            if row.iter().any(|&v| v < 0.0) || (row.sum() - 1.0).abs() > MASS_TOL {
                return Err(Error::InvalidTable(format!("transition row {i} is not stochastic")));
            }
        }
        Ok(MdpTable { transition, reward, gamma, d0, n_actions })
    }

    pub fn n_states(&self) -> usize {
        self.transition.ncols()
    }
}

/// Two states, one action, s0 → s1 → s0, reward 1 in s0.
pub fn two_state_cycle(gamma: f64) -> MdpTable {
    MdpTable::new(
        ndarray::array![[0.0, 1.0], [1.0, 0.0]],
        ndarray::array![1.0, 0.0],
        gamma,
        ndarray::array![1.0, 0.0],
        1,
    )
    .expect("valid cycle")
}

/// Identity joint δ(x = x′)/n.
pub fn identity_joint(n: usize) -> JointTable {
    JointTable::new(Array2::eye(n) / n as f64).expect("valid identity joint")
}

/// Independent joint px · pyᵀ.
pub fn independent_joint(px: &Array1<f64>, py: &Array1<f64>) -> Result<JointTable> {
    from_table(outer(px, py).view())
}

/// The 2×2 table [[0.4, 0.1], [0.1, 0.4]].
pub fn table2x2() -> JointTable {
    JointTable::new(ndarray::array![[0.4, 0.1], [0.1, 0.4]]).expect("valid 2×2 fixture")
}

/// A random strictly positive table, used by property tests and selftest.
pub fn random_table(n: usize, m: usize, seed: u64) -> JointTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Array2::from_shape_fn((n, m), |_| rng.gen_range(0.01..1.0));
    from_table(raw.view()).expect("positive table")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn from_table_normalizes() {
        let j = from_table(array![[3.0, 1.0], [1.0, 3.0]].view()).unwrap();
        assert_eq!(j.p(), &array![[0.375, 0.125], [0.125, 0.375]]);
        let u = from_table(Array2::<f64>::ones((4, 4)).view()).unwrap();
        assert!(u.p().iter().all(|&v| v == 1.0 / 16.0));
    }

    #[test]
    fn from_table_rejects_bad_support() {
        let raw = array![[1.0, 0.0], [1.0, 0.0]];
        assert!(matches!(from_table(raw.view()), Err(Error::ZeroRowOrColumn(_))));
        let raw = array![[1.0, -1.0], [1.0, 1.0]];
        assert!(matches!(from_table(raw.view()), Err(Error::NegativeEntry(_))));
    }

    #[test]
    fn marginals_of_fixtures() {
        let (px, py) = marginals(&block4());
        assert!(px.iter().chain(py.iter()).all(|&v| (v - 0.25).abs() < 1e-15));
        let (px, _) = marginals(&JointTable::new(array![[0.375, 0.125], [0.125, 0.375]]).unwrap());
        assert_eq!(px.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn operators_of_fixtures() {
        let t = t_matrix(&identity_joint(3));
        assert!(crate::linalg::max_abs_diff(t.t.view(), Array2::<f64>::eye(3).view()) < 1e-15);
        let b = block4();
        let t = t_matrix(&b);
        assert!((t.t[[0, 1]] - 4.0 * 3.0 / 32.0).abs() < 1e-15);
        assert!((t.t[[0, 2]] - 4.0 / 32.0).abs() < 1e-15);
        let r = ratio_matrix(&b);
        assert!((r.r[[0, 0]] - 1.5).abs() < 1e-15 && (r.r[[3, 0]] - 0.5).abs() < 1e-15);
        let r = ratio_matrix(&identity_joint(4));
        assert_eq!(r.r[[2, 2]], 4.0);
        assert_eq!(r.r[[2, 1]], 0.0);
    }

    #[test]
    fn block_mass_is_checked() {
        assert!(matches!(synth_block(4, 0.1, 0.1), Err(Error::MassMismatch(_))));
        let u = synth_block(4, 1.0 / 16.0, 1.0 / 16.0).unwrap();
        assert!(ratio_matrix(&u).r.iter().all(|&v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn sampling_is_deterministic() {
        let j = block4();
        assert_eq!(sample_pairs(&j, 50, 50, 7), sample_pairs(&j, 50, 50, 7));
        assert!(sample_pairs(&j, 0, 3, 1).pos_pairs.is_empty());
        let id = identity_joint(4);
        let b = sample_pairs(&id, 100_000, 0, 3);
        assert!(b.pos_pairs.iter().all(|(x, y)| x == y));
    }

    #[test]
    fn iv_xor_fixture() {
        let iv = synth_iv_xor(0.7, [-0.3, 0.7], [0.0, 1.0]).unwrap();
        let ey = iv.ey_z();
        assert!((ey[0] - 0.3).abs() < 1e-15 && (ey[1] - 0.7).abs() < 1e-15);
        let e = iv.conditional_expectation();
        assert!(crate::linalg::max_abs_diff(e.view(), array![[0.7, 0.3], [0.3, 0.7]].view()) < 1e-15);
        assert!(matches!(synth_iv_xor(0.5, [0.0, 0.0], [0.0, 1.0]), Err(Error::NotIdentified(_))));
        let z = synth_iv_xor(0.7, [-0.3, 0.7], [0.0, 0.0]).unwrap();
        assert!(z.ey_z().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn latent_mixture_k1_is_independent() {
        let (j, post) = synth_latent_mixture(5, 1, 2).unwrap();
        let r = ratio_matrix(&j);
        assert!(r.r.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(post.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mdp_validation() {
        assert!(MdpTable::new(array![[0.5, 0.4]], array![0.0], 0.5, array![1.0, 0.0], 1).is_err());
        assert!(two_state_cycle(0.9).gamma < 1.0);
    }
}
