//! Configuration-driven training, evaluation and sweeps.
//!
//! A run pairs an objective with a learner, trains on one joint table and
//! records a trace. Configs are plain text, one `key = value` per line:
//!
//! ```text
//! # comment
//! run_id    = sc-block4
//! objective = spectral_contrastive
//! learner   = direct-gradient
//! fixture   = block4
//! d         = 2
//! ---
//! objective = barlow_twins
//! ...
//! ```
//!
//! Blank lines and `#` comments are ignored, `---` starts the next run,
//! unknown or repeated keys are errors. [`TrainConfig::to_text`] writes
//! every key in a fixed order and parses back to the same config.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{self, sample_pairs, t_matrix, JointTable, PairBatch};
use crate::ebm::{self, EnergyParams};
use crate::error::{Error, Result};
use crate::io;
use crate::latent::{self, LatentParams, TeacherMode};
use crate::linalg::{self, scale_cols, scale_rows};
use crate::linobj::{Estimator, LinearObjective, ReprParams, ScoreLink};
use crate::mm::{self, MmParams, Partition, PartitionBatch, PartitionState};
use crate::nce::RankingMode;
use crate::oracle::{self, SpectralBasis};
use crate::power::{self, GvpiLoss, PowerState};
use crate::tasks::{fit_linear_regressor, SupervisedTable};

/// Learner identifiers.
pub const LEARNERS: &[&str] = &["direct-gradient", "minc", "byol", "gvpi", "moco", "em", "dino", "swav"];

/// Objective identifiers trained by `direct-gradient`.
pub const DIRECT_OBJECTIVES: &[&str] = &[
    "spectral_contrastive",
    "barlow_twins",
    "vicreg_hinge",
    "vicreg_square",
    "nce_binary",
    "nce_ranking",
    "fdiv_kl",
    "fdiv_chisq",
    "simclr",
    "ebm_ratio",
    "word2vec",
    "clip",
    "siglip",
    "mle_stopgrad",
];

/// Every accepted (objective, learner) pair outside `direct-gradient`.
pub const COMPATIBILITY: &[(&str, &str)] = &[
    ("minc", "minc"),
    ("byol", "byol"),
    ("gvpi_nce", "gvpi"),
    ("gvpi_kl", "gvpi"),
    ("moco", "moco"),
    ("deepcluster", "em"),
    ("sela", "em"),
    ("dino", "dino"),
    ("swav", "swav"),
];

pub fn is_compatible(objective: &str, learner: &str) -> bool {
    (learner == "direct-gradient" && DIRECT_OBJECTIVES.contains(&objective))
        || COMPATIBILITY.iter().any(|&(o, l)| o == objective && l == learner)
}

/// Armijo sufficient-decrease constant.
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
/// Barzilai–Borwein trial steps are clamped to this range.
const BB_MIN: f64 = 1e-12;
const BB_MAX: f64 = 1e8;
/// Number of trace rows aimed for when `record_every = 0`.
const AUTO_ROWS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchMode {
    Exact,
    /// `pos` positive pairs and `neg` negative pairs per iteration.
    Sampled {
        pos: usize,
        neg: usize,
    },
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchMode::Exact => write!(f, "exact"),
            BatchMode::Sampled { pos, neg } => write!(f, "sampled:{pos}:{neg}"),
        }
    }
}

impl FromStr for BatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "exact" {
            return Ok(BatchMode::Exact);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["sampled", pos, neg] => {
                let pos = parse_num(pos, "batch")?;
                let neg = parse_num(neg, "batch")?;
                if pos == 0 || neg == 0 {
                    return Err(Error::Config("sampled batches need positive sizes".into()));
                }
                Ok(BatchMode::Sampled { pos, neg })
            }
            _ => Err(Error::Config(format!("batch must be exact or sampled:POS:NEG, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// i.i.d. normal entries times `init_scale`.
    Gaussian,
    /// Oracle ratio factors plus the gaussian perturbation.
    OracleWarm,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::Gaussian => "gaussian",
            InitScheme::OracleWarm => "oracle-warm",
        })
    }
}

impl FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(InitScheme::Gaussian),
            "oracle-warm" => Ok(InitScheme::OracleWarm),
            _ => Err(Error::Config(format!("init must be gaussian or oracle-warm, got {s:?}"))),
        }
    }
}

/// Metric in which direct-gradient steps are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precondition {
    /// Plain Euclidean gradient on the table entries.
    None,
    /// Gradient in `L2(px)` for x-side rows and `L2(py)` for y-side rows:
    /// each row's gradient is divided by its marginal. From a small start
    /// the dynamics of the self-correlation losses then follow the
    /// conditional operator rather than `P` itself.
    Marginal,
}

impl fmt::Display for Precondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precondition::None => "none",
            Precondition::Marginal => "marginal",
        })
    }
}

impl FromStr for Precondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Precondition::None),
            "marginal" => Ok(Precondition::Marginal),
            _ => Err(Error::Config(format!("precondition must be none or marginal, got {s:?}"))),
        }
    }
}

/// Partition handling for `mle_stopgrad`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionMode {
    Exact,
    /// Moving average with rate `partition_eta`.
    Ema,
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionMode::Exact => "exact",
            PartitionMode::Ema => "ema",
        })
    }
}

impl FromStr for PartitionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(PartitionMode::Exact),
            "ema" => Ok(PartitionMode::Ema),
            _ => Err(Error::Config(format!("partition must be exact or ema, got {s:?}"))),
        }
    }
}

fn link_str(l: ScoreLink) -> &'static str {
    match l {
        ScoreLink::Softplus => "softplus",
        ScoreLink::Raw => "raw",
    }
}

fn parse_link(s: &str) -> Result<ScoreLink> {
    match s {
        "softplus" => Ok(ScoreLink::Softplus),
        "raw" => Ok(ScoreLink::Raw),
        _ => Err(Error::Config(format!("link must be softplus or raw, got {s:?}"))),
    }
}

fn parse_num<T: FromStr>(s: &str, key: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
}

/// One training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub run_id: String,
    pub objective: String,
    pub learner: String,
    /// Fixture name, see [`resolve_fixture`].
    pub fixture: String,
    pub d: usize,
    pub alpha: f64,
    pub max_iters: usize,
    /// Gradient-norm stopping threshold.
    pub tolerance: f64,
    pub seed: u64,
    pub batch: BatchMode,
    pub init: InitScheme,
    pub init_scale: f64,
    pub precondition: Precondition,
    /// Barlow Twins / VICReg weight.
    pub lambda: f64,
    /// VICReg hinge threshold.
    pub eta: f64,
    /// Candidates per anchor in ranking losses.
    pub k: usize,
    pub temperature: f64,
    pub link: ScoreLink,
    /// Ranking NCE with the log-of-mean surrogate instead of the exact
    /// expectation over negatives.
    pub surrogate: bool,
    /// MINC eigenvalue EMA rate.
    pub beta: f64,
    /// BYOL target EMA rate (0 copies the student every step).
    pub target_ema: f64,
    /// MoCo teacher momentum.
    pub momentum: f64,
    /// Student steps between GVPI teacher refreshes.
    pub round_length: usize,
    /// Sinkhorn entropic strength (SeLa, SwAV).
    pub epsilon: f64,
    /// Latent classes.
    pub clusters: usize,
    /// k-means restarts in the DeepCluster E-step.
    pub restarts: usize,
    /// Gradient steps per EM M-step.
    pub inner_iters: usize,
    pub partition: PartitionMode,
    pub partition_eta: f64,
    /// Trace stride; 0 picks one giving about 200 rows.
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            run_id: "run".into(),
            objective: "spectral_contrastive".into(),
            learner: "direct-gradient".into(),
            fixture: "block4".into(),
            d: 2,
            alpha: 0.5,
            max_iters: 5000,
            tolerance: 1e-8,
            seed: 0,
            batch: BatchMode::Exact,
            init: InitScheme::Gaussian,
            init_scale: 0.1,
            precondition: Precondition::Marginal,
            lambda: 1.0,
            eta: 1.0,
            k: 4,
            temperature: 1.0,
            link: ScoreLink::Softplus,
            surrogate: false,
            beta: 0.5,
            target_ema: 0.0,
            momentum: 0.9,
            round_length: 1,
            epsilon: latent::SINKHORN_EPSILON,
            clusters: 2,
            restarts: 5,
            inner_iters: 50,
            partition: PartitionMode::Exact,
            partition_eta: 0.1,
            record_every: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "run_id",
    "objective",
    "learner",
    "fixture",
    "d",
    "alpha",
    "max_iters",
    "tolerance",
    "seed",
    "batch",
    "init",
    "init_scale",
    "precondition",
    "lambda",
    "eta",
    "k",
    "temperature",
    "link",
    "surrogate",
    "beta",
    "target_ema",
    "momentum",
    "round_length",
    "epsilon",
    "clusters",
    "restarts",
    "inner_iters",
    "partition",
    "partition_eta",
    "record_every",
];

impl TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "run_id" => self.run_id = v.to_string(),
            "objective" => self.objective = v.to_string(),
            "learner" => self.learner = v.to_string(),
            "fixture" => self.fixture = v.to_string(),
            "d" => self.d = parse_num(v, key)?,
            "alpha" => self.alpha = parse_num(v, key)?,
            "max_iters" => self.max_iters = parse_num(v, key)?,
            "tolerance" => self.tolerance = parse_num(v, key)?,
            "seed" => self.seed = parse_num(v, key)?,
            "batch" => self.batch = v.parse()?,
            "init" => self.init = v.parse()?,
            "init_scale" => self.init_scale = parse_num(v, key)?,
            "precondition" => self.precondition = v.parse()?,
            "lambda" => self.lambda = parse_num(v, key)?,
            "eta" => self.eta = parse_num(v, key)?,
            "k" => self.k = parse_num(v, key)?,
            "temperature" => self.temperature = parse_num(v, key)?,
            "link" => self.link = parse_link(v)?,
            "surrogate" => self.surrogate = parse_num(v, key)?,
            "beta" => self.beta = parse_num(v, key)?,
            "target_ema" => self.target_ema = parse_num(v, key)?,
            "momentum" => self.momentum = parse_num(v, key)?,
            "round_length" => self.round_length = parse_num(v, key)?,
            "epsilon" => self.epsilon = parse_num(v, key)?,
            "clusters" => self.clusters = parse_num(v, key)?,
            "restarts" => self.restarts = parse_num(v, key)?,
            "inner_iters" => self.inner_iters = parse_num(v, key)?,
            "partition" => self.partition = v.parse()?,
            "partition_eta" => self.partition_eta = parse_num(v, key)?,
            "record_every" => self.record_every = parse_num(v, key)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "run_id" => self.run_id.clone(),
            "objective" => self.objective.clone(),
            "learner" => self.learner.clone(),
            "fixture" => self.fixture.clone(),
            "d" => self.d.to_string(),
            "alpha" => self.alpha.to_string(),
            "max_iters" => self.max_iters.to_string(),
            "tolerance" => self.tolerance.to_string(),
            "seed" => self.seed.to_string(),
            "batch" => self.batch.to_string(),
            "init" => self.init.to_string(),
            "init_scale" => self.init_scale.to_string(),
            "precondition" => self.precondition.to_string(),
            "lambda" => self.lambda.to_string(),
            "eta" => self.eta.to_string(),
            "k" => self.k.to_string(),
            "temperature" => self.temperature.to_string(),
            "link" => link_str(self.link).to_string(),
            "surrogate" => self.surrogate.to_string(),
            "beta" => self.beta.to_string(),
            "target_ema" => self.target_ema.to_string(),
            "momentum" => self.momentum.to_string(),
            "round_length" => self.round_length.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "clusters" => self.clusters.to_string(),
            "restarts" => self.restarts.to_string(),
            "inner_iters" => self.inner_iters.to_string(),
            "partition" => self.partition.to_string(),
            "partition_eta" => self.partition_eta.to_string(),
            "record_every" => self.record_every.to_string(),
            _ => unreachable!("key table and accessor out of sync: {key}"),
        }
    }

    /// All keys in a fixed order.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !LEARNERS.contains(&self.learner.as_str()) {
            return Err(Error::Config(format!("unknown learner {:?}", self.learner)));
        }
        if !is_compatible(&self.objective, &self.learner) {
            return Err(Error::IncompatiblePair { objective: self.objective.clone(), learner: self.learner.clone() });
        }
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.d == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        let positive = [
            ("alpha", self.alpha),
            ("temperature", self.temperature),
            ("epsilon", self.epsilon),
            ("init_scale", self.init_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        let unit = [
            ("beta", self.beta),
            ("target_ema", self.target_ema),
            ("momentum", self.momentum),
            ("partition_eta", self.partition_eta),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.round_length == 0 || self.clusters == 0 || self.restarts == 0 || self.inner_iters == 0 {
            return Err(Error::Config("round_length, clusters, restarts and inner_iters must be positive".into()));
        }
        let sampled = matches!(self.batch, BatchMode::Sampled { .. });
        let batched = ["direct-gradient", "moco"].contains(&self.learner.as_str());
        if sampled && !batched {
            return Err(Error::Config(format!("learner {} runs on exact expectations only", self.learner)));
        }
        let warm = ["direct-gradient", "minc", "byol", "gvpi"].contains(&self.learner.as_str())
            && (self.learner != "direct-gradient" || linear_objective(self).is_some());
        if self.init == InitScheme::OracleWarm && !warm {
            return Err(Error::Config("oracle-warm init exists for linear and power learners only".into()));
        }
        Ok(())
    }
}

/// Parse a config file into runs. Runs without a `run_id` are named
/// `run000`, `run001`, … by position.
pub fn parse_configs(text: &str) -> Result<Vec<TrainConfig>> {
    let mut out = Vec::new();
    for (idx, chunk) in split_runs(text).into_iter().enumerate() {
        let mut cfg = TrainConfig { run_id: format!("run{idx:03}"), ..TrainConfig::default() };
        let mut seen = BTreeSet::new();
        for (lineno, line) in chunk {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {lineno}: duplicate key {k:?}")));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
        }
        out.push(cfg);
    }
    if out.is_empty() {
        return Err(Error::Config("no runs in config".into()));
    }
    let mut ids = BTreeSet::new();
    for c in &out {
        if !ids.insert(c.run_id.clone()) {
            return Err(Error::Config(format!("duplicate run_id {:?}", c.run_id)));
        }
    }
    Ok(out)
}

fn split_runs(text: &str) -> Vec<Vec<(usize, &str)>> {
    let mut runs = vec![Vec::new()];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line == "---" {
            runs.push(Vec::new());
        } else if !line.is_empty() {
            runs.last_mut().expect("nonempty").push((i + 1, line));
        }
    }
    runs.into_iter().filter(|r| !r.is_empty()).collect()
}

/// Named tables: `block4`, `lowrank` (8×8, rank 3, seed 1), `table2x2`,
/// `identity:N`, `random:N:M:SEED`, `lowrank:N:M:D:SEED`,
/// `mixture:N:K:SEED`, and files as `csv:PATH` or `json:PATH`.
pub fn resolve_fixture(name: &str) -> Result<JointTable> {
    if let Some(path) = name.strip_prefix("csv:") {
        return io::joint_from_csv(&std::fs::read_to_string(path)?);
    }
    if let Some(path) = name.strip_prefix("json:") {
        return io::joint_from_json(&std::fs::read_to_string(path)?);
    }
    let parts: Vec<&str> = name.split(':').collect();
    let num = |i: usize| -> Result<u64> { parse_num(parts[i], name) };
    match (parts[0], parts.len()) {
        ("block4", 1) => Ok(dist::block4()),
        ("lowrank", 1) => dist::synth_random_lowrank(8, 8, 3, 1),
        ("table2x2", 1) => Ok(dist::table2x2()),
        ("identity", 2) => Ok(dist::identity_joint(num(1)? as usize)),
        ("random", 4) => Ok(dist::random_table(num(1)? as usize, num(2)? as usize, num(3)?)),
        ("lowrank", 5) => dist::synth_random_lowrank(num(1)? as usize, num(2)? as usize, num(3)? as usize, num(4)?),
        ("mixture", 4) => Ok(dist::synth_latent_mixture(num(1)? as usize, num(2)? as usize, num(3)?)?.0),
        _ => Err(Error::Config(format!("unknown fixture {name:?}"))),
    }
}

fn linear_objective(cfg: &TrainConfig) -> Option<LinearObjective> {
    Some(match cfg.objective.as_str() {
        "spectral_contrastive" => LinearObjective::SpectralContrastive,
        "barlow_twins" => LinearObjective::BarlowTwins { lambda: cfg.lambda },
        "vicreg_hinge" => LinearObjective::VicregHinge { lambda: cfg.lambda, eta: cfg.eta },
        "vicreg_square" => LinearObjective::VicregSquare { lambda: cfg.lambda },
        "nce_binary" => LinearObjective::NceBinary { link: cfg.link },
        "nce_ranking" => LinearObjective::NceRanking { k: cfg.k, link: cfg.link, surrogate: cfg.surrogate },
        "fdiv_kl" => LinearObjective::FdivKl { link: cfg.link },
        "fdiv_chisq" => LinearObjective::FdivChiSq,
        _ => return None,
    })
}

/// Which learner produced a power-family state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerKind {
    Minc,
    Byol,
    Gvpi,
}

/// Energy-family objective behind a set of energy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyKind {
    Simclr,
    Moco,
    EbmRatio,
    Word2vec,
}

/// Final parameters of a run, tagged by family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TrainedParams {
    Linear { objective: LinearObjective, params: ReprParams },
    Power { kind: PowerKind, state: PowerState },
    Energy { kind: EnergyKind, student: EnergyParams, teacher: Option<EnergyParams> },
    Mm { params: MmParams, partition: Option<PartitionState> },
    Latent { params: LatentParams },
}

impl TrainedParams {
    /// Rank budget of the representation (the class count for latent models).
    pub fn d(&self) -> usize {
        match self {
            TrainedParams::Linear { params, .. } => params.d(),
            TrainedParams::Power { state, .. } => state.d(),
            TrainedParams::Energy { student, .. } => student.upsilon.ncols(),
            TrainedParams::Mm { params, .. } => params.d(),
            TrainedParams::Latent { params } => params.k(),
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            TrainedParams::Linear { params, .. } => (params.phi.nrows(), params.psi.nrows()),
            TrainedParams::Power { state, .. } => (state.xi.nrows(), state.xi.nrows()),
            TrainedParams::Energy { student, .. } => {
                (student.upsilon.nrows(), student.upsilon_y.as_ref().unwrap_or(&student.upsilon).nrows())
            }
            TrainedParams::Mm { params, .. } => (params.phi.nrows(), params.nu.nrows()),
            TrainedParams::Latent { params } => (params.upsilon.nrows(), params.upsilon.nrows()),
        }
    }

    /// Features whose weighted span is compared with the oracle directly.
    /// Families without such features are compared through the top-d
    /// left singular span of their balanced ratio estimate.
    pub fn span_features(&self) -> Option<&Array2<f64>> {
        match self {
            TrainedParams::Linear { params, .. } => Some(&params.phi),
            TrainedParams::Power { state, .. } => Some(&state.xi),
            _ => None,
        }
    }

    /// Entrywise estimate of the ratio matrix `P/(px⊗py)`.
    pub fn ratio_estimate(&self, j: &JointTable) -> Result<Array2<f64>> {
        self.check(j)?;
        Ok(match self {
            TrainedParams::Linear { objective, params } => objective.ratio_estimate(params),
            TrainedParams::Power { kind: PowerKind::Gvpi, state } => power::gvpi_scores(state),
            TrainedParams::Power { state, .. } => projected_ratio(j, &state.xi)?,
            TrainedParams::Energy { student, .. } => student.scores()?.mapv(f64::exp),
            TrainedParams::Mm { params, .. } => params.scores().mapv(f64::exp),
            TrainedParams::Latent { params } => {
                let post = latent::posteriors(params);
                let prior = post.t().dot(j.px());
                if let Some(z) = prior.iter().position(|&v| !(v > 0.0)) {
                    return Err(Error::RankDeficient(format!("latent class {z} has no mass")));
                }
                scale_cols(post.view(), &prior.mapv(|v| 1.0 / v)).dot(&post.t())
            }
        })
    }

    fn check(&self, j: &JointTable) -> Result<()> {
        if self.dims() != (j.n(), j.m()) {
            return Err(Error::DimensionMismatch(format!(
                "parameters for a {:?} table, instance is {}×{}",
                self.dims(),
                j.n(),
                j.m()
            )));
        }
        Ok(())
    }

    /// Largest principal angle to the oracle top-d subspace.
    pub fn angle(&self, j: &JointTable, basis: &SpectralBasis) -> Result<f64> {
        match self.span_features() {
            Some(phi) => oracle::angle_to_oracle(j, phi.view(), basis),
            None => {
                let r = balance_ratio(j, &self.ratio_estimate(j)?)?;
                let t = weighted(j, &r);
                let f = linalg::svd(t.view());
                let d = basis.d().min(f.u.ncols());
                let ones = Array1::ones(j.n());
                Ok(oracle::principal_angles(f.u.slice(ndarray::s![.., ..d]), basis.u.view(), &ones)?.max_angle())
            }
        }
    }
}

/// `px`-weighted projection of the ratio onto span(ξ):
/// `Ξ G⁻¹ (ΞᵀPΞ) G⁻¹ Ξᵀ` with `G = ΞᵀDΞ`.
fn projected_ratio(j: &JointTable, xi: &Array2<f64>) -> Result<Array2<f64>> {
    let g = power::second_moment(j, xi);
    let c = xi.t().dot(j.p()).dot(xi);
    let left = linalg::solve(g.view(), xi.t())?;
    Ok(left.t().dot(&c).dot(&left))
}

/// `diag(√px)·R·diag(√py)`.
fn weighted(j: &JointTable, r: &Array2<f64>) -> Array2<f64> {
    scale_cols(scale_rows(r.view(), &j.px().mapv(f64::sqrt)).view(), &j.py().mapv(f64::sqrt))
}

/// Rescale a positive ratio estimate by row and column factors until
/// `E_py R(x,·) = 1` and `E_px R(·,y) = 1`. Any estimate of the form
/// `a(x)·R(x,y)·b(y)` is mapped back to `R`.
pub fn balance_ratio(j: &JointTable, r: &Array2<f64>) -> Result<Array2<f64>> {
    if r.dim() != (j.n(), j.m()) {
        return Err(Error::DimensionMismatch("ratio estimate vs table".into()));
    }
    if let Some(v) = r.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::NonPositiveScore(format!("cannot balance a ratio entry {v:e}")));
    }
    let q = j.product();
    let log_kernel = (&q * r).mapv(f64::ln);
    let plan = latent::sinkhorn(&log_kernel, j.px(), j.py(), 1.0, latent::SINKHORN_MAX_SWEEPS)?;
    Ok(&plan.q / &q)
}

/// Evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub d: usize,
    /// `‖T − diag(√px)·R̂·diag(√py)‖²_F` for the raw estimate.
    pub fit_residual: f64,
    /// Fit residual minus the Eckart–Young tail at the same rank.
    pub eckart_young_gap: f64,
    /// Largest principal angle to the oracle top-d subspace; absent when
    /// d exceeds the table's smaller side.
    pub principal_angle: Option<f64>,
    pub ratio_err_raw: f64,
    /// Error of the row/column-balanced estimate; `None` if the raw
    /// estimate has non-positive entries.
    pub ratio_err_normalized: Option<f64>,
    /// Regression of the outcome index `y` on the representation.
    pub regression_mse: f64,
    pub bayes_mse: f64,
}

/// Metrics of trained parameters against a table.
pub fn run_eval(params: &TrainedParams, j: &JointTable) -> Result<EvalMetrics> {
    params.check(j)?;
    let t = t_matrix(j);
    let r = dist::ratio_matrix(j).r;
    let rhat = params.ratio_estimate(j)?;
    let fit = (&t.t - &weighted(j, &rhat)).mapv(|v| v * v).sum();
    let d = params.d();
    let tail = oracle::eckart_young_tail(&t, d.min(j.n().min(j.m())))?;
    let basis = oracle_basis(j, d);
    let angle = defined_angle(params, j, basis.as_ref())?;
    let balanced = balance_ratio(j, &rhat).ok();
    let st = SupervisedTable::new(j.clone(), Array1::from_iter((0..j.m()).map(|y| y as f64)), None)?;
    let regression_mse = match params.span_features() {
        Some(phi) => fit_linear_regressor(&st, phi.view())?.risk,
        None => {
            // plug-in conditional from the balanced ratio
            let cond = match &balanced {
                Some(b) => scale_cols(b.view(), j.py()),
                None => j.conditional(),
            };
            let pred = cond.dot(&st.y_values);
            let truth = st.conditional_mean();
            st.bayes_mse()
                + j.px().iter().zip(pred.iter().zip(&truth)).map(|(p, (a, b))| p * (a - b).powi(2)).sum::<f64>()
        }
    };
    Ok(EvalMetrics {
        d,
        fit_residual: fit,
        eckart_young_gap: fit - tail,
        principal_angle: angle,
        ratio_err_raw: linalg::max_abs_diff(rhat.view(), r.view()),
        ratio_err_normalized: balanced.map(|b| linalg::max_abs_diff(b.view(), r.view())),
        regression_mse,
        bayes_mse: st.bayes_mse(),
    })
}

/// The angle to the oracle, absent when the learned span is degenerate.
fn defined_angle(params: &TrainedParams, j: &JointTable, basis: Option<&SpectralBasis>) -> Result<Option<f64>> {
    match basis.map(|b| params.angle(j, b)) {
        None | Some(Err(Error::RankDeficient(_))) => Ok(None),
        Some(r) => r.map(Some),
    }
}

fn oracle_basis(j: &JointTable, d: usize) -> Option<SpectralBasis> {
    if d <= j.n().min(j.m()) {
        oracle::oracle(j, d).ok()
    } else {
        None
    }
}

/// One trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub angle: Option<f64>,
    pub fixed_point_residual: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Gradient norm fell to the tolerance.
    Tolerance,
    MaxIters,
    /// No step passed the line search: the objective is at its
    /// floating-point floor.
    Stalled,
    /// A non-finite value appeared; the parameters are the last finite ones.
    NonFiniteLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub run_id: String,
    pub objective: String,
    pub learner: String,
    pub rows: Vec<TraceRow>,
    pub stop: StopReason,
    /// Iterations performed.
    pub iters: usize,
    /// Not serialized, so artifacts stay byte-identical across runs.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainTrace {
    pub fn final_row(&self) -> &TraceRow {
        self.rows.last().expect("traces always hold the initial row")
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(io::fmt_f64).unwrap_or_default();
        let mut out = String::from("iter,loss,grad_norm,angle,fixed_point_residual\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iter,
                io::fmt_f64(r.loss),
                io::fmt_f64(r.grad_norm),
                opt(r.angle),
                opt(r.fixed_point_residual)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub trace: TrainTrace,
    pub params: TrainedParams,
}

impl TrainOutcome {
    /// The run error, if the run aborted.
    pub fn error(&self) -> Option<Error> {
        (self.trace.stop == StopReason::NonFiniteLoss).then(|| Error::NonFiniteLoss(self.trace.iters))
    }
}

/// Train on the config's fixture.
pub fn run_train_fixture(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    run_train(cfg, &resolve_fixture(&cfg.fixture)?)
}

/// Train one run on `j`. Deterministic given the config.
pub fn run_train(cfg: &TrainConfig, j: &JointTable) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rec = Recorder {
        j,
        basis: oracle_basis(j, cfg.d),
        every: if cfg.record_every == 0 { (cfg.max_iters / AUTO_ROWS).max(1) } else { cfg.record_every },
        rows: Vec::new(),
        last_good: None,
    };
    let result = match cfg.learner.as_str() {
        "direct-gradient" => train_direct(cfg, j, &mut rec),
        "minc" | "byol" | "gvpi" => train_power(cfg, j, &mut rec),
        "moco" => train_moco(cfg, j, &mut rec),
        "em" => train_em(cfg, j, &mut rec),
        "dino" | "swav" => train_dino(cfg, j, &mut rec),
        other => Err(Error::Config(format!("unknown learner {other:?}"))),
    };
    let (params, stop, iters) = match result {
        Ok(v) => v,
        Err(Error::NonFiniteLoss(it)) => {
            let last = rec.last_good.clone().ok_or(Error::NonFiniteLoss(it))?;
            (last, StopReason::NonFiniteLoss, it)
        }
        Err(e) => return Err(e),
    };
    let trace = TrainTrace {
        run_id: cfg.run_id.clone(),
        objective: cfg.objective.clone(),
        learner: cfg.learner.clone(),
        rows: rec.rows,
        stop,
        iters,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { trace, params })
}

struct Recorder<'a> {
    j: &'a JointTable,
    basis: Option<SpectralBasis>,
    every: usize,
    rows: Vec<TraceRow>,
    last_good: Option<TrainedParams>,
}

/// Per-iteration quantities of a learner state.
struct Eval {
    loss: f64,
    grad_norm: f64,
    fixed_point: Option<f64>,
}

impl Recorder<'_> {
    fn push(&mut self, iter: usize, ev: &Eval, params: TrainedParams) -> Result<()> {
        if self.rows.last().is_some_and(|r| r.iter == iter) {
            return Ok(());
        }
        let angle = defined_angle(&params, self.j, self.basis.as_ref())?;
        if angle.is_some_and(|a| !a.is_finite()) {
            return Err(Error::NonFiniteLoss(iter));
        }
        self.rows.push(TraceRow {
            iter,
            loss: ev.loss,
            grad_norm: ev.grad_norm,
            angle,
            fixed_point_residual: ev.fixed_point,
        });
        self.last_good = Some(params);
        Ok(())
    }
}

/// The shared loop: evaluate, record, test for stopping, step.
/// `step` returns `None` when no acceptable step exists.
fn drive<S>(
    cfg: &TrainConfig,
    rec: &mut Recorder,
    mut state: S,
    eval: impl Fn(&S) -> Result<Eval>,
    snapshot: impl Fn(&S) -> TrainedParams,
    mut step: impl FnMut(&S, usize) -> Result<Option<S>>,
) -> Result<(TrainedParams, StopReason, usize)> {
    let mut iter = 0;
    loop {
        let ev = eval(&state)?;
        let finite = ev.loss.is_finite() && ev.grad_norm.is_finite() && ev.fixed_point.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::NonFiniteLoss(iter));
        }
        let stop = if ev.grad_norm <= cfg.tolerance {
            Some(StopReason::Tolerance)
        } else if iter >= cfg.max_iters {
            Some(StopReason::MaxIters)
        } else {
            None
        };
        if stop.is_some() || iter % rec.every == 0 {
            rec.push(iter, &ev, snapshot(&state))?;
        }
        if let Some(reason) = stop {
            return Ok((snapshot(&state), reason, iter));
        }
        match step(&state, iter)? {
            Some(next) => state = next,
            None => {
                rec.push(iter, &ev, snapshot(&state))?;
                return Ok((snapshot(&state), StopReason::Stalled, iter));
            }
        }
        iter += 1;
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(&mut *rng);
        scale * z
    })
}

/// Seed of the batch drawn at `iter`.
fn batch_seed(seed: u64, iter: usize) -> u64 {
    seed ^ (iter as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn batch_at(cfg: &TrainConfig, j: &JointTable, iter: usize) -> Option<PairBatch> {
    match cfg.batch {
        BatchMode::Exact => None,
        BatchMode::Sampled { pos, neg } => Some(sample_pairs(j, pos, neg, batch_seed(cfg.seed, iter))),
    }
}

// ---------------------------------------------------------------------------
// direct gradient

#[derive(Debug, Clone, Copy)]
enum DirectKind {
    Linear(LinearObjective),
    Simclr,
    EbmRatio,
    Word2vec,
    Clip,
    Siglip,
    MleStopgrad,
}

/// Flattened parameter layout of a direct-gradient run: the x-side block,
/// followed by the y-side block unless the parameters are tied.
struct Direct<'a> {
    kind: DirectKind,
    j: &'a JointTable,
    d: usize,
    tied: bool,
    k: usize,
    temperature: f64,
    surrogate: bool,
    /// Per-coordinate inverse metric; all ones without preconditioning.
    inv_metric: Vec<f64>,
}

impl Direct<'_> {
    fn new<'a>(cfg: &TrainConfig, j: &'a JointTable) -> Result<Direct<'a>> {
        let kind = match linear_objective(cfg) {
            Some(o) => DirectKind::Linear(o),
            None => match cfg.objective.as_str() {
                "simclr" => DirectKind::Simclr,
                "ebm_ratio" => DirectKind::EbmRatio,
                "word2vec" => DirectKind::Word2vec,
                "clip" => DirectKind::Clip,
                "siglip" => DirectKind::Siglip,
                "mle_stopgrad" => DirectKind::MleStopgrad,
                o => return Err(Error::IncompatiblePair { objective: o.into(), learner: cfg.learner.clone() }),
            },
        };
        let tied = match kind {
            DirectKind::Linear(o) => o.is_symmetric(),
            DirectKind::Simclr | DirectKind::Word2vec => true,
            _ => false,
        };
        if tied && j.n() != j.m() {
            return Err(Error::DimensionMismatch(format!("{} needs a square table", cfg.objective)));
        }
        let d = cfg.d;
        let inv_metric = match cfg.precondition {
            Precondition::None => vec![1.0; d * if tied { j.n() } else { j.n() + j.m() }],
            Precondition::Marginal => {
                let side =
                    |w: &Array1<f64>| w.iter().flat_map(|&v| std::iter::repeat_n(1.0 / v, d)).collect::<Vec<_>>();
                let mut m = side(j.px());
                if !tied {
                    m.extend(side(j.py()));
                }
                m
            }
        };
        Ok(Direct { kind, j, d, tied, k: cfg.k, temperature: cfg.temperature, surrogate: cfg.surrogate, inv_metric })
    }

    fn split(&self, x: &[f64]) -> (Array2<f64>, Array2<f64>) {
        let nx = self.j.n() * self.d;
        let phi = Array2::from_shape_vec((self.j.n(), self.d), x[..nx].to_vec()).expect("layout");
        let psi = if self.tied {
            phi.clone()
        } else {
            Array2::from_shape_vec((self.j.m(), self.d), x[nx..].to_vec()).expect("layout")
        };
        (phi, psi)
    }

    fn len(&self) -> usize {
        self.d * if self.tied { self.j.n() } else { self.j.n() + self.j.m() }
    }

    fn params(&self, x: &[f64], partition: Option<&PartitionState>) -> TrainedParams {
        let (phi, psi) = self.split(x);
        match self.kind {
            DirectKind::Linear(objective) => TrainedParams::Linear { objective, params: ReprParams::new(phi, psi) },
            DirectKind::Simclr => TrainedParams::Energy {
                kind: EnergyKind::Simclr,
                student: EnergyParams::tied(phi, true, self.temperature),
                teacher: None,
            },
            DirectKind::EbmRatio => TrainedParams::Energy {
                kind: EnergyKind::EbmRatio,
                student: EnergyParams::untied(phi, psi, self.temperature),
                teacher: None,
            },
            DirectKind::Word2vec => TrainedParams::Energy {
                kind: EnergyKind::Word2vec,
                student: EnergyParams::tied(phi, false, 1.0),
                teacher: None,
            },
            DirectKind::Clip | DirectKind::Siglip | DirectKind::MleStopgrad => TrainedParams::Mm {
                params: MmParams { phi, nu: psi, temperature: self.temperature },
                partition: partition.cloned(),
            },
        }
    }

    fn mm(&self, x: &[f64]) -> Result<MmParams> {
        let (phi, psi) = self.split(x);
        MmParams::new(phi, psi, self.temperature)
    }

    fn ranking_mode<'b>(&self, est: Estimator<'b>) -> RankingMode<'b> {
        match est {
            Estimator::Batch(b) => RankingMode::Sampled(b),
            Estimator::Exact if self.surrogate => RankingMode::Surrogate,
            Estimator::Exact => RankingMode::Expected,
        }
    }

    /// Value and flattened gradient. `mle_stopgrad` reports the exact
    /// log-likelihood as its value.
    fn value_grad(&self, x: &[f64], est: Estimator, partition: Option<&PartitionState>) -> Result<(f64, Vec<f64>)> {
        let j = self.j;
        let (phi, psi) = self.split(x);
        let rep = match self.kind {
            DirectKind::Linear(o) => {
                let params = if self.tied { ReprParams::tied(phi) } else { ReprParams::new(phi, psi) };
                o.evaluate(j, &params, est)?
            }
            DirectKind::Simclr => {
                ebm::loss_simclr(j, &EnergyParams::tied(phi, true, self.temperature), self.k, self.ranking_mode(est))?
            }
            DirectKind::EbmRatio => {
                ebm::loss_ebm_density_ratio(j, &EnergyParams::untied(phi, psi, self.temperature), est)?
            }
            DirectKind::Word2vec => ebm::loss_word2vec(j, &phi, est)?,
            DirectKind::Clip => mm::loss_clip(j, &self.mm(x)?, self.k, self.ranking_mode(est))?,
            DirectKind::Siglip => mm::loss_siglip(j, &self.mm(x)?, est)?,
            DirectKind::MleStopgrad => {
                let p = self.mm(x)?;
                let part = partition.map_or(Partition::Exact, Partition::Tracked);
                let mut rep = mm::loss_mle_stopgrad(j, &p, part)?;
                rep.value = mm::mle_value(j, &p)?;
                rep
            }
        };
        let mut g: Vec<f64> = rep.grad_phi.iter().copied().collect();
        if !self.tied {
            g.extend(rep.grad_psi.iter().copied());
        }
        Ok((rep.value, g))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct DirectState {
    x: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    /// Next trial step length.
    t: f64,
    partition: Option<PartitionState>,
}

fn direct_init(cfg: &TrainConfig, j: &JointTable, prob: &Direct) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = gaussian(prob.len(), 1, cfg.init_scale, &mut rng);
    let mut x: Vec<f64> = noise.iter().copied().collect();
    if cfg.init == InitScheme::OracleWarm {
        let (phi, psi) = oracle::oracle(j, cfg.d)?.ratio_factors(j);
        let warm: Vec<f64> =
            if prob.tied { phi.iter().copied().collect() } else { phi.iter().chain(psi.iter()).copied().collect() };
        x.iter_mut().zip(warm).for_each(|(a, b)| *a += b);
    }
    Ok(x)
}

fn train_direct(cfg: &TrainConfig, j: &JointTable, rec: &mut Recorder) -> Result<(TrainedParams, StopReason, usize)> {
    let prob = Direct::new(cfg, j)?;
    let x = direct_init(cfg, j, &prob)?;
    let ema = matches!(prob.kind, DirectKind::MleStopgrad) && cfg.partition == PartitionMode::Ema;
    let partition = if ema { Some(PartitionState::ones(j.n(), j.m(), cfg.partition_eta)?) } else { None };
    // exact-partition gradient is reported even while a tracked one drives the steps
    let (value, grad) = prob.value_grad(&x, Estimator::Exact, None)?;
    let state = DirectState { x, value, grad, t: cfg.alpha, partition };
    let eval = |s: &DirectState| Ok(Eval { loss: s.value, grad_norm: dot(&s.grad, &s.grad).sqrt(), fixed_point: None });
    let snapshot = |s: &DirectState| prob.params(&s.x, s.partition.as_ref());
    let stochastic = ema || matches!(cfg.batch, BatchMode::Sampled { .. });
    if stochastic {
        drive(cfg, rec, state, eval, snapshot, |s, iter| {
            let batch = batch_at(cfg, j, iter);
            let est = batch.as_ref().map_or(Estimator::Exact, Estimator::Batch);
            let (_, g) = prob.value_grad(&s.x, est, s.partition.as_ref())?;
            let x: Vec<f64> =
                s.x.iter().zip(&g).zip(&prob.inv_metric).map(|((a, b), w)| a - cfg.alpha * w * b).collect();
            let partition = match &s.partition {
                Some(ps) => {
                    let pb = batch.as_ref().map_or(PartitionBatch::FullPopulation, PartitionBatch::Sampled);
                    Some(mm::partition_update(j, &prob.mm(&x)?, ps, pb)?)
                }
                None => None,
            };
            let (value, grad) = prob.value_grad(&x, Estimator::Exact, None)?;
            Ok(Some(DirectState { x, value, grad, t: cfg.alpha, partition }))
        })
    } else {
        drive(cfg, rec, state, eval, snapshot, |s, _| Ok(armijo_step(&prob, s)))
    }
}

/// Backtracking from a Barzilai–Borwein trial step. Evaluation errors at a
/// trial point (for example a non-positive raw score) count as rejections.
fn armijo_step(prob: &Direct, s: &DirectState) -> Option<DirectState> {
    let dir: Vec<f64> = s.grad.iter().zip(&prob.inv_metric).map(|(g, w)| g * w).collect();
    let gg = dot(&s.grad, &dir);
    let floor = 8.0 * f64::EPSILON * s.value.abs().max(1.0);
    let mut t = s.t;
    for _ in 0..MAX_HALVINGS {
        let x: Vec<f64> = s.x.iter().zip(&dir).map(|(a, b)| a - t * b).collect();
        if let Ok((value, grad)) = prob.value_grad(&x, Estimator::Exact, None) {
            let decrease = value <= s.value - ARMIJO_C * t * gg;
            // below the rounding floor of the objective, accept steps that
            // shrink the gradient instead
            let flat = (value - s.value).abs() <= floor && dot(&grad, &grad) < dot(&s.grad, &s.grad);
            if value.is_finite() && (decrease || flat) {
                let dx: Vec<f64> = x.iter().zip(&s.x).map(|(a, b)| a - b).collect();
                let dg: Vec<f64> = grad.iter().zip(&s.grad).map(|(a, b)| a - b).collect();
                let sy = dot(&dx, &dg);
                let ss: f64 = dx.iter().zip(&prob.inv_metric).map(|(a, w)| a * a / w).sum();
                let next_t = if sy > 0.0 { ss / sy } else { 2.0 * t };
                return Some(DirectState { x, value, grad, t: next_t.clamp(BB_MIN, BB_MAX), partition: None });
            }
        }
        t *= 0.5;
    }
    None
}

// ---------------------------------------------------------------------------
// power iteration

fn power_init(cfg: &TrainConfig, j: &JointTable) -> Result<PowerState> {
    if j.n() != j.m() {
        return Err(Error::DimensionMismatch(format!("{} needs a square table", cfg.learner)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xi = gaussian(j.n(), cfg.d, cfg.init_scale, &mut rng);
    match cfg.init {
        InitScheme::OracleWarm => xi += &oracle::oracle(j, cfg.d)?.ratio_factors(j).0,
        // GVPI scores must start positive: the constant direction carries
        // the unit singular value
        InitScheme::Gaussian if cfg.learner == "gvpi" => xi.column_mut(0).mapv_inplace(|v| v + 1.0),
        InitScheme::Gaussian => {}
    }
    let mut s = PowerState::new(xi, cfg.beta);
    s.tau = cfg.target_ema;
    Ok(s)
}

/// `E_p‖Λξ(x) − ξ_t(x′)‖²`.
fn byol_loss(j: &JointTable, s: &PowerState) -> f64 {
    let pred = s.xi.dot(&s.lambda.t());
    let mut v = 0.0;
    for ((x, y), &p) in j.p().indexed_iter() {
        let r = &pred.row(x) - &s.target_xi.row(y);
        v += p * r.dot(&r);
    }
    v
}

fn train_power(cfg: &TrainConfig, j: &JointTable, rec: &mut Recorder) -> Result<(TrainedParams, StopReason, usize)> {
    let state = power_init(cfg, j)?;
    let kind = match cfg.learner.as_str() {
        "minc" => PowerKind::Minc,
        "byol" => PowerKind::Byol,
        _ => PowerKind::Gvpi,
    };
    let snapshot = |s: &PowerState| TrainedParams::Power { kind, state: s.clone() };
    let fit = |s: &PowerState| -> Result<f64> {
        let r = projected_ratio(j, &s.xi)?;
        Ok((&t_matrix(j).t - &weighted(j, &r)).mapv(|v| v * v).sum())
    };
    match kind {
        PowerKind::Minc => {
            let eval = |s: &PowerState| -> Result<Eval> {
                // the direction is taken with the Λ the next step would use
                let m = power::second_moment(j, &s.xi);
                let lambda = &s.lambda * s.beta + &m * (1.0 - s.beta);
                Ok(Eval {
                    loss: fit(s)?,
                    grad_norm: linalg::fro(power::minc_direction(j, &s.xi, &lambda).view()),
                    fixed_point: Some(power::fixed_point_residual(j, &s.xi, &s.lambda)),
                })
            };
            drive(cfg, rec, state, eval, snapshot, |s, _| power::minc_step(j, s, cfg.alpha).map(Some))
        }
        PowerKind::Byol => {
            let mut warned = false;
            // the closed-form Λ is refreshed before every evaluation
            let refit = |s: &PowerState| power::byol_lambda_step(j, s);
            let (state, w) = refit(&state)?;
            if let Some(e) = w {
                log::warn!("{}: {e}", cfg.run_id);
                warned = true;
            }
            let eval = |s: &PowerState| -> Result<Eval> {
                Ok(Eval {
                    loss: byol_loss(j, s),
                    grad_norm: linalg::fro(power::byol_xi_gradient(j, s).view()),
                    fixed_point: Some(power::fixed_point_residual(j, &s.xi, &s.lambda)),
                })
            };
            drive(cfg, rec, state, eval, snapshot, |s, _| {
                let next = power::byol_xi_step(j, s, cfg.alpha)?;
                let (next, w) = refit(&next)?;
                if let (Some(e), false) = (w, warned) {
                    log::warn!("{}: {e}", cfg.run_id);
                    warned = true;
                }
                Ok(Some(next))
            })
        }
        PowerKind::Gvpi => {
            let loss = match cfg.objective.as_str() {
                "gvpi_nce" => GvpiLoss::Nce { k: cfg.k },
                _ => GvpiLoss::Kl,
            };
            let eval = |s: &PowerState| -> Result<Eval> {
                let rep = power::gvpi_objective(j, s, loss)?;
                let drift = linalg::fro((&s.xi - &s.target_xi).view());
                Ok(Eval { loss: rep.value, grad_norm: rep.grad_norm().max(drift), fixed_point: Some(drift) })
            };
            drive(cfg, rec, state, eval, snapshot, |s, iter| {
                let mut next = power::gvpi_step(j, s, loss, cfg.alpha)?;
                if (iter + 1) % cfg.round_length == 0 {
                    next.refresh_teacher();
                }
                Ok(Some(next))
            })
        }
    }
}

// ---------------------------------------------------------------------------
// MoCo

fn train_moco(cfg: &TrainConfig, j: &JointTable, rec: &mut Recorder) -> Result<(TrainedParams, StopReason, usize)> {
    if j.n() != j.m() {
        return Err(Error::DimensionMismatch("moco needs a square table".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let student = EnergyParams::tied(gaussian(j.n(), cfg.d, cfg.init_scale, &mut rng), true, cfg.temperature);
    let state = (student.clone(), student);
    fn mode(b: Option<&PairBatch>, surrogate: bool) -> RankingMode<'_> {
        match (b, surrogate) {
            (Some(b), _) => RankingMode::Sampled(b),
            (None, true) => RankingMode::Surrogate,
            (None, false) => RankingMode::Expected,
        }
    }
    let eval = |s: &(EnergyParams, EnergyParams)| -> Result<Eval> {
        let (v, g) = ebm::moco_objective(j, &s.0, &s.1, cfg.k, mode(None, cfg.surrogate))?;
        Ok(Eval { loss: v, grad_norm: linalg::fro(g.view()), fixed_point: None })
    };
    let snapshot = |s: &(EnergyParams, EnergyParams)| TrainedParams::Energy {
        kind: EnergyKind::Moco,
        student: s.0.clone(),
        teacher: Some(s.1.clone()),
    };
    drive(cfg, rec, state, eval, snapshot, |s, iter| {
        let batch = batch_at(cfg, j, iter);
        ebm::moco_step(j, &s.0, &s.1, cfg.k, cfg.alpha, cfg.momentum, mode(batch.as_ref(), cfg.surrogate)).map(Some)
    })
}

// ---------------------------------------------------------------------------
// latent-variable learners

/// Student initialization: gaussian embeddings and head, zero bias.
fn latent_init(cfg: &TrainConfig, rows: usize, dim: usize) -> Result<LatentParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let upsilon = gaussian(rows, dim, cfg.init_scale, &mut rng);
    let w = gaussian(dim, cfg.clusters, cfg.init_scale, &mut rng);
    LatentParams::new(upsilon, w, Array1::zeros(cfg.clusters))
}

/// DeepCluster and SeLa alternate an E-step on the current embeddings with
/// `inner_iters` backtracked cross-entropy steps. The clustered data are
/// the rows of the conditional `P(·|x)`, which also seed the embeddings, so
/// `d` is not used. The stopping quantity is the change of the E-step
/// targets between rounds.
fn train_em(cfg: &TrainConfig, j: &JointTable, rec: &mut Recorder) -> Result<(TrainedParams, StopReason, usize)> {
    let cond = j.conditional();
    let mut init = latent_init(cfg, j.n(), j.m())?;
    init.upsilon = cond.clone();
    let sela = cfg.objective == "sela";
    let targets = |p: &LatentParams, round: usize| -> Result<Array2<f64>> {
        if sela {
            let logp = latent::posteriors(p).mapv(|v| v.max(f64::MIN_POSITIVE).ln());
            Ok(latent::sela_e_step(&logp, cfg.epsilon, latent::SINKHORN_MAX_SWEEPS)?.q)
        } else {
            let km =
                latent::deepcluster_e_step(p.upsilon.view(), cfg.clusters, cfg.restarts, batch_seed(cfg.seed, round))?;
            Ok(latent::hard_targets(&km.assignments, cfg.clusters, j.px()))
        }
    };
    struct Em {
        params: LatentParams,
        targets: Array2<f64>,
        change: f64,
    }
    let t0 = targets(&init, 0)?;
    let state = Em { params: init, targets: t0, change: f64::INFINITY };
    let eval = |s: &Em| -> Result<Eval> {
        let g = latent::cross_entropy(&s.params, &s.targets)?;
        Ok(Eval { loss: g.value, grad_norm: s.change.min(f64::MAX), fixed_point: None })
    };
    let snapshot = |s: &Em| TrainedParams::Latent { params: s.params.clone() };
    drive(cfg, rec, state, eval, snapshot, |s, iter| {
        let mut p = s.params.clone();
        for _ in 0..cfg.inner_iters {
            let (next, _, step) = latent::descend_cross_entropy(&p, &s.targets, cfg.alpha)?;
            p = next;
            if step == 0.0 {
                break;
            }
        }
        let t = targets(&p, iter + 1)?;
        let change = linalg::max_abs_diff(t.view(), s.targets.view());
        Ok(Some(Em { params: p, targets: t, change }))
    })
}

fn train_dino(cfg: &TrainConfig, j: &JointTable, rec: &mut Recorder) -> Result<(TrainedParams, StopReason, usize)> {
    if j.n() != j.m() {
        return Err(Error::DimensionMismatch(format!("{} needs a square table", cfg.learner)));
    }
    let mode =
        if cfg.learner == "dino" { TeacherMode::Previous } else { TeacherMode::Sinkhorn { epsilon: cfg.epsilon } };
    let student = latent_init(cfg, j.n(), cfg.d)?;
    let teacher = latent::refresh_teacher(j, &student, mode)?;
    let eval = |s: &(LatentParams, Array2<f64>)| -> Result<Eval> {
        let g = latent::dino_objective(j, &s.0, &s.1)?;
        let post = latent::posteriors(&s.0);
        Ok(Eval { loss: g.value, grad_norm: g.norm(), fixed_point: Some(latent::stationarity_residual(j, &post)?) })
    };
    let snapshot = |s: &(LatentParams, Array2<f64>)| TrainedParams::Latent { params: s.0.clone() };
    drive(cfg, rec, (student, teacher), eval, snapshot, |s, _| {
        latent::dino_step(j, &s.0, &s.1, cfg.alpha, mode).map(Some)
    })
}

// ---------------------------------------------------------------------------
// sweeps

/// Columns of the sweep summary, in order.
pub const SWEEP_COLUMNS: &[&str] = &[
    "run_id",
    "objective",
    "learner",
    "fixture",
    "d",
    "seed",
    "status",
    "stop",
    "iters",
    "final_loss",
    "final_grad_norm",
    "fit_residual",
    "eckart_young_gap",
    "principal_angle",
    "ratio_err_raw",
    "ratio_err_normalized",
    "regression_mse",
    "bayes_mse",
];

/// One sweep row. `status` is `ok` or the error text of a failed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    pub objective: String,
    pub learner: String,
    pub fixture: String,
    pub d: usize,
    pub seed: u64,
    pub status: String,
    pub stop: Option<StopReason>,
    pub iters: Option<usize>,
    pub final_loss: Option<f64>,
    pub final_grad_norm: Option<f64>,
    pub metrics: Option<EvalMetrics>,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Train and evaluate one config into a sweep row; failures become rows.
pub fn sweep_row(cfg: &TrainConfig) -> SweepRow {
    let mut row = SweepRow {
        run_id: cfg.run_id.clone(),
        objective: cfg.objective.clone(),
        learner: cfg.learner.clone(),
        fixture: cfg.fixture.clone(),
        d: cfg.d,
        seed: cfg.seed,
        status: "ok".into(),
        stop: None,
        iters: None,
        final_loss: None,
        final_grad_norm: None,
        metrics: None,
    };
    let res = run_train_fixture(cfg).and_then(|out| {
        let j = resolve_fixture(&cfg.fixture)?;
        let m = run_eval(&out.params, &j)?;
        Ok((out, m))
    });
    match res {
        Ok((out, m)) => {
            let last = out.trace.final_row();
            row.stop = Some(out.trace.stop);
            row.iters = Some(out.trace.iters);
            row.final_loss = Some(last.loss);
            row.final_grad_norm = Some(last.grad_norm);
            row.metrics = Some(m);
            if let Some(e) = out.error() {
                row.status = e.to_string();
            }
        }
        Err(e) => row.status = e.to_string(),
    }
    row
}

/// Run every config on a pool of `parallelism` threads. Rows come back
/// sorted by run id.
pub fn run_sweep(configs: &[TrainConfig], parallelism: usize) -> Result<Vec<SweepRow>> {
    if configs.is_empty() {
        return Err(Error::Config("empty sweep".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut rows: Vec<SweepRow> = pool.install(|| configs.par_iter().map(sweep_row).collect());
    rows.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let f = |v: Option<f64>| v.map(io::fmt_f64).unwrap_or_default();
    let mut out = SWEEP_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let m = r.metrics.as_ref();
        let stop = r.stop.map(|s| serde_json::to_value(s).expect("enum").as_str().unwrap_or_default().to_string());
        let fields = [
            csv_field(&r.run_id),
            csv_field(&r.objective),
            csv_field(&r.learner),
            csv_field(&r.fixture),
            r.d.to_string(),
            r.seed.to_string(),
            csv_field(&r.status),
            stop.unwrap_or_default(),
            r.iters.map(|v| v.to_string()).unwrap_or_default(),
            f(r.final_loss),
            f(r.final_grad_norm),
            f(m.map(|m| m.fit_residual)),
            f(m.map(|m| m.eckart_young_gap)),
            f(m.and_then(|m| m.principal_angle)),
            f(m.map(|m| m.ratio_err_raw)),
            f(m.and_then(|m| m.ratio_err_normalized)),
            f(m.map(|m| m.regression_mse)),
            f(m.map(|m| m.bayes_mse)),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
