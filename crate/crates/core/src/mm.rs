//! Multi-modal energy-based representation: two towers `φ` (domain X) and
//! `ν` (domain Y) with scores `s = φ νᵀ / τ`. CLIP, SigLIP and the
//! stop-gradient conditional MLE with moving-average partitions.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dist::{JointTable, PairBatch};
use crate::error::{Error, Result};
use crate::linalg::{log_sigmoid, sigmoid};
use crate::linobj::{Estimator, LossReport, WeightedPairs};
use crate::nce::{ranking_loss, RankingMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmParams {
    #[serde(with = "crate::io::mat")]
    pub phi: Array2<f64>,
    #[serde(with = "crate::io::mat")]
    pub nu: Array2<f64>,
    pub temperature: f64,
}

impl MmParams {
    pub fn new(phi: Array2<f64>, nu: Array2<f64>, temperature: f64) -> Result<Self> {
        if phi.ncols() != nu.ncols() {
            return Err(Error::DimensionMismatch(format!("φ has {} columns, ν has {}", phi.ncols(), nu.ncols())));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        if phi.iter().chain(nu.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite tower entries".into()));
        }
        Ok(MmParams { phi, nu, temperature })
    }

    pub fn d(&self) -> usize {
        self.phi.ncols()
    }

    pub fn scores(&self) -> Array2<f64> {
        self.phi.dot(&self.nu.t()) / self.temperature
    }

    fn backprop(&self, gs: &Array2<f64>, value: f64) -> LossReport {
        LossReport {
            value,
            grad_phi: gs.dot(&self.nu) / self.temperature,
            grad_psi: gs.t().dot(&self.phi) / self.temperature,
        }
    }

    fn check(&self, j: &JointTable) -> Result<()> {
        if self.phi.nrows() != j.n() || self.nu.nrows() != j.m() {
            return Err(Error::DimensionMismatch(format!(
                "towers {}×{} vs table {}×{}",
                self.phi.nrows(),
                self.nu.nrows(),
                j.n(),
                j.m()
            )));
        }
        Ok(())
    }
}

/// CLIP: ranking NCE for `P(y|x)` plus ranking NCE for `P(x|y)`, each
/// picking the positive among k candidates.
pub fn loss_clip(j: &JointTable, params: &MmParams, k: usize, mode: RankingMode) -> Result<LossReport> {
    if k < 2 {
        return Err(Error::Config(format!("CLIP needs k ≥ 2, got {k}")));
    }
    params.check(j)?;
    let s = params.scores();
    let fwd = ranking_loss(j.p(), j.py(), &s, k, mode)?;
    let pt = j.p().t().to_owned();
    let st = s.t().to_owned();
    let swapped;
    let back_mode = match mode {
        RankingMode::Sampled(b) => {
            swapped = swap_batch(b);
            RankingMode::Sampled(&swapped)
        }
        other => other,
    };
    let back = ranking_loss(&pt, j.px(), &st, k, back_mode)?;
    let gs = &fwd.grad + &back.grad.t();
    Ok(params.backprop(&gs, fwd.value + back.value))
}

/// The same draws with the roles of x and y exchanged.
fn swap_batch(b: &PairBatch) -> PairBatch {
    let flip = |v: &Vec<(usize, usize)>| v.iter().map(|&(x, y)| (y, x)).collect();
    PairBatch { pos_pairs: flip(&b.pos_pairs), neg_pairs: flip(&b.neg_pairs), seed: b.seed }
}

/// SigLIP: `−E_p[log σ(s)] − E_{px⊗py}[log σ(−s)]`.
pub fn loss_siglip(j: &JointTable, params: &MmParams, est: Estimator) -> Result<LossReport> {
    params.check(j)?;
    let s = params.scores();
    let pairs = pairs_of(j, est);
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
    Ok(params.backprop(&gs, value))
}

fn pairs_of(j: &JointTable, est: Estimator) -> WeightedPairs {
    match est {
        Estimator::Exact => WeightedPairs::exact(j),
        Estimator::Batch(b) => WeightedPairs::from_batch(b),
    }
}

/// Per-sample partition estimates for both conditionals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionState {
    #[serde(with = "crate::io::vec1")]
    pub z_x: Array1<f64>,
    #[serde(with = "crate::io::vec1")]
    pub z_y: Array1<f64>,
    pub eta: f64,
}

impl PartitionState {
    /// All partitions start at 1, the value for zero scores.
    pub fn ones(n: usize, m: usize, eta: f64) -> Result<Self> {
        Self::new(Array1::ones(n), Array1::ones(m), eta)
    }

    pub fn new(z_x: Array1<f64>, z_y: Array1<f64>, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!("eta = {eta} outside [0, 1]")));
        }
        let s = PartitionState { z_x, z_y, eta };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if let Some(v) = self.z_x.iter().chain(self.z_y.iter()).find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::NonPositivePartition(format!("partition entry {v}")));
        }
        Ok(())
    }
}

/// `Z(x) = E_py[exp s(x,·)]` and `Z(y) = E_px[exp s(·,y)]`.
pub fn partition_exact(j: &JointTable, params: &MmParams) -> Result<(Array1<f64>, Array1<f64>)> {
    params.check(j)?;
    let e = params.scores().mapv(f64::exp);
    Ok((e.dot(j.py()), e.t().dot(j.px())))
}

/// Which draws feed the moving average.
#[derive(Debug, Clone, Copy)]
pub enum PartitionBatch<'a> {
    /// Population expectations; with η = 1 this is `partition_exact`.
    FullPopulation,
    /// Every x is averaged over the batch's negative y-draws and every y
    /// over its negative x-draws.
    Sampled(&'a PairBatch),
}

/// `z ← (1−η) z + η · (batch mean of exp s)` for both sides.
pub fn partition_update(
    j: &JointTable,
    params: &MmParams,
    state: &PartitionState,
    batch: PartitionBatch,
) -> Result<PartitionState> {
    params.check(j)?;
    if !(0.0..=1.0).contains(&state.eta) {
        return Err(Error::Config(format!("eta = {} outside [0, 1]", state.eta)));
    }
    let (mx, my) = match batch {
        PartitionBatch::FullPopulation => partition_exact(j, params)?,
        PartitionBatch::Sampled(b) => {
            if b.neg_pairs.is_empty() {
                return Err(Error::Config("partition update needs negative pairs".into()));
            }
            let e = params.scores().mapv(f64::exp);
            let w = 1.0 / b.neg_pairs.len() as f64;
            let mut mx = Array1::<f64>::zeros(j.n());
            let mut my = Array1::<f64>::zeros(j.m());
            for &(x, y) in &b.neg_pairs {
                mx.scaled_add(w, &e.column(y));
                my.scaled_add(w, &e.row(x));
            }
            (mx, my)
        }
    };
    let eta = state.eta;
    let next =
        PartitionState { z_x: &state.z_x * (1.0 - eta) + &mx * eta, z_y: &state.z_y * (1.0 - eta) + &my * eta, eta };
    next.validate()?;
    Ok(next)
}

/// Partitions used by the stop-gradient objective.
#[derive(Debug, Clone, Copy)]
pub enum Partition<'a> {
    Exact,
    Tracked(&'a PartitionState),
}

/// Minimized form of the stop-gradient conditional MLE,
/// `−2E_p[s] + E_{px⊗py}[exp s / Z(x)] + E_{px⊗py}[exp s / Z(y)]`,
/// with both partitions held constant under differentiation.
pub fn loss_mle_stopgrad(j: &JointTable, params: &MmParams, partition: Partition) -> Result<LossReport> {
    params.check(j)?;
    let owned;
    let (zx, zy) = match partition {
        Partition::Exact => {
            owned = partition_exact(j, params)?;
            (&owned.0, &owned.1)
        }
        Partition::Tracked(st) => {
            if st.z_x.len() != j.n() || st.z_y.len() != j.m() {
                return Err(Error::DimensionMismatch("partition state vs table".into()));
            }
            st.validate()?;
            (&st.z_x, &st.z_y)
        }
    };
    let s = params.scores();
    let mut value = 0.0;
    let mut gs = Array2::<f64>::zeros(s.raw_dim());
    for ((x, y), &sv) in s.indexed_iter() {
        let p = j.p()[[x, y]];
        let q = j.px()[x] * j.py()[y];
        let e = q * sv.exp() * (1.0 / zx[x] + 1.0 / zy[y]);
        value += -2.0 * p * sv + e;
        gs[[x, y]] = -2.0 * p + e;
    }
    Ok(params.backprop(&gs, value))
}

/// Minimized conditional log-likelihood
/// `−2E_p[s] + E_px[log Z(x)] + E_py[log Z(y)]`. Its true gradient is the
/// stop-gradient gradient with exact partitions, which makes it the merit
/// function for line searches on that objective.
pub fn mle_value(j: &JointTable, params: &MmParams) -> Result<f64> {
    let (zx, zy) = partition_exact(j, params)?;
    let s = params.scores();
    let fit: f64 = j.p().iter().zip(s.iter()).map(|(p, v)| p * v).sum();
    let lx: f64 = j.px().iter().zip(zx.iter()).map(|(p, z)| p * z.ln()).sum();
    let ly: f64 = j.py().iter().zip(zy.iter()).map(|(p, z)| p * z.ln()).sum();
    Ok(-2.0 * fit + lx + ly)
}
