//! Built-in gradient audit over every objective, shared by the acceptance
//! suite and the `selftest` subcommand.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classic::{nca_loss, nca_sets_from_labels, sne_loss, PointCloud};
use crate::dist::{block4, from_table, random_table, sample_pairs};
use crate::ebm::{loss_ebm_density_ratio, loss_simclr, loss_word2vec, moco_objective, EnergyParams};
use crate::gradcheck::{check, FD_STEP};
use crate::latent::{cross_entropy, dino_objective, LatentGrad, LatentParams};
use crate::linobj::{Estimator, LinearObjective, ReprParams, ScoreLink};
use crate::mm::{loss_clip, loss_mle_stopgrad, loss_siglip, MmParams, Partition, PartitionState};
use crate::nce::RankingMode;
use crate::power::{gvpi_objective, GvpiLoss, PowerState};
use crate::Result;

/// Largest accepted relative error between analytic and central-difference
/// gradients.
pub const AUDIT_TOL: f64 = 1e-6;

/// Floor on the gradient norm in the relative error.
const FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct AuditRow {
    pub name: String,
    pub points: usize,
    /// Worst relative error over the random points.
    pub worst: f64,
}

impl AuditRow {
    pub fn ok(&self) -> bool {
        self.worst <= AUDIT_TOL
    }
}

fn mat(x: &[f64], r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_vec((r, c), x.to_vec()).expect("slice length matches the shape")
}

fn flat<'a>(parts: impl IntoIterator<Item = &'a Array2<f64>>) -> Vec<f64> {
    parts.into_iter().flat_map(|a| a.iter().copied()).collect()
}

fn latent_flat(g: &LatentGrad) -> Vec<f64> {
    g.upsilon.iter().chain(g.w.iter()).chain(g.b.iter()).copied().collect()
}

fn latent(x: &[f64], n: usize, d: usize, k: usize) -> Result<LatentParams> {
    let (a, b) = (n * d, n * d + d * k);
    LatentParams::new(mat(&x[..a], n, d), mat(&x[a..b], d, k), Array1::from_vec(x[b..].to_vec()))
}

struct Auditor {
    points: usize,
    rng: ChaCha8Rng,
    rows: Vec<AuditRow>,
}

impl Auditor {
    fn run(
        &mut self,
        name: &str,
        len: usize,
        range: (f64, f64),
        f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    ) -> Result<()> {
        let mut worst: f64 = 0.0;
        for _ in 0..self.points {
            let x: Vec<f64> = (0..len).map(|_| self.rng.gen_range(range.0..range.1)).collect();
            f(&x)?;
            let g = |y: &[f64]| f(y).unwrap_or((f64::NAN, vec![f64::NAN; len]));
            let e = check(g, &x, FD_STEP, FLOOR).rel_error;
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        self.rows.push(AuditRow { name: name.to_string(), points: self.points, worst });
        Ok(())
    }
}

/// Audit every objective's analytic gradient at `points` random parameter
/// settings drawn from `seed`.
pub fn gradient_audit(points: usize, seed: u64) -> Result<Vec<AuditRow>> {
    let mut a = Auditor { points, rng: ChaCha8Rng::seed_from_u64(seed), rows: Vec::new() };
    let b4 = block4();
    let r34 = random_table(3, 4, 7);
    let sq = random_table(4, 4, 10);
    let batch = sample_pairs(&r34, 6, 18, 3);
    let sq_batch = sample_pairs(&sq, 6, 12, 4);

    let linear = [
        (LinearObjective::SpectralContrastive, &r34, false),
        (LinearObjective::BarlowTwins { lambda: 0.5 }, &b4, false),
        (LinearObjective::VicregHinge { lambda: 1.0, eta: 0.5 }, &b4, false),
        (LinearObjective::VicregSquare { lambda: 1.0 }, &b4, false),
        (LinearObjective::NceBinary { link: ScoreLink::Softplus }, &r34, false),
        (LinearObjective::NceRanking { k: 4, link: ScoreLink::Softplus, surrogate: false }, &r34, false),
        (LinearObjective::FdivKl { link: ScoreLink::Softplus }, &r34, false),
        (LinearObjective::FdivChiSq, &r34, false),
    ];
    for (obj, j, positive) in linear {
        let (n, m, d) = (j.n(), j.m(), 2);
        let range = if positive { (0.2, 1.0) } else { (-1.0, 1.0) };
        a.run(obj.id(), (n + m) * d, range, |x| {
            let p = ReprParams::new(mat(&x[..n * d], n, d), mat(&x[n * d..], m, d));
            let r = obj.evaluate(j, &p, Estimator::Exact)?;
            Ok((r.value, flat([&r.grad_phi, &r.grad_psi])))
        })?;
    }
    a.run("spectral_contrastive (minibatch)", 14, (-1.0, 1.0), |x| {
        let p = ReprParams::new(mat(&x[..6], 3, 2), mat(&x[6..], 4, 2));
        let r = LinearObjective::SpectralContrastive.evaluate(&r34, &p, Estimator::Batch(&batch))?;
        Ok((r.value, flat([&r.grad_phi, &r.grad_psi])))
    })?;

    a.run("simclr", 8, (-1.0, 1.0), |x| {
        let r = loss_simclr(&b4, &EnergyParams::tied(mat(x, 4, 2), true, 0.5), 4, RankingMode::Expected)?;
        Ok((r.value, flat([&r.grad_phi])))
    })?;
    let teacher =
        EnergyParams::tied(Array2::from_shape_fn((4, 2), |(i, k)| ((i * 2 + k) as f64 * 0.7).sin()), true, 0.7);
    a.run("moco", 8, (-1.0, 1.0), |x| {
        let s = EnergyParams::tied(mat(x, 4, 2), true, 0.7);
        let (v, g) = moco_objective(&b4, &s, &teacher, 3, RankingMode::Expected)?;
        Ok((v, flat([&g])))
    })?;
    a.run("ebm_ratio", 14, (-1.0, 1.0), |x| {
        let p = EnergyParams::untied(mat(&x[..6], 3, 2), mat(&x[6..], 4, 2), 0.8);
        let r = loss_ebm_density_ratio(&r34, &p, Estimator::Exact)?;
        Ok((r.value, flat([&r.grad_phi, &r.grad_psi])))
    })?;
    for (name, est) in [("word2vec", Estimator::Exact), ("word2vec (minibatch)", Estimator::Batch(&sq_batch))] {
        a.run(name, 8, (-1.0, 1.0), |x| {
            let r = loss_word2vec(&sq, &mat(x, 4, 2), est)?;
            Ok((r.value, flat([&r.grad_phi])))
        })?;
    }

    let towers =
        |x: &[f64], n: usize, m: usize, tau: f64| MmParams::new(mat(&x[..n * 2], n, 2), mat(&x[n * 2..], m, 2), tau);
    a.run("clip", 14, (-1.0, 1.0), |x| {
        let r = loss_clip(&r34, &towers(x, 3, 4, 0.6)?, 4, RankingMode::Expected)?;
        Ok((r.value, flat([&r.grad_phi, &r.grad_psi])))
    })?;
    a.run("siglip", 14, (-1.0, 1.0), |x| {
        let r = loss_siglip(&r34, &towers(x, 3, 4, 0.6)?, Estimator::Exact)?;
        Ok((r.value, flat([&r.grad_phi, &r.grad_psi])))
    })?;
    let state =
        PartitionState::new(Array1::from_vec(vec![0.8, 1.3, 2.0]), Array1::from_vec(vec![1.1, 0.6, 0.9, 1.7]), 0.1)?;
    a.run("mle_stopgrad", 14, (-1.0, 1.0), |x| {
        let r = loss_mle_stopgrad(&r34, &towers(x, 3, 4, 1.0)?, Partition::Tracked(&state))?;
        Ok((r.value, flat([&r.grad_phi, &r.grad_psi])))
    })?;

    let target = Array2::from_shape_fn((4, 2), |(i, k)| 0.4 + 0.1 * (i + 2 * k) as f64);
    for (name, loss) in [("gvpi_kl", GvpiLoss::Kl), ("gvpi_nce", GvpiLoss::Nce { k: 3 })] {
        // positive entries keep every score positive, as the log losses need
        a.run(name, 12, (0.2, 1.0), |x| {
            let mut s = PowerState::new(mat(&x[..8], 4, 2), 0.5);
            s.a_mat = mat(&x[8..], 2, 2);
            s.target_xi = target.clone();
            let r = gvpi_objective(&sq, &s, loss)?;
            Ok((r.value, flat([&r.grad_xi, &r.grad_a])))
        })?;
    }

    let targets = Array2::from_shape_fn((5, 3), |(i, k)| 0.05 + 0.1 * ((i + k) % 4) as f64);
    a.run("latent cross-entropy", 5 * 2 + 2 * 3 + 3, (-1.0, 1.0), |x| {
        let g = cross_entropy(&latent(x, 5, 2, 3)?, &targets)?;
        Ok((g.value, latent_flat(&g)))
    })?;
    let dino_teacher = Array2::from_shape_fn((4, 2), |(x, z)| if (x < 2) == (z == 0) { 0.8 } else { 0.2 });
    a.run("dino", 4 * 3 + 3 * 2 + 2, (-1.0, 1.0), |x| {
        let g = dino_objective(&b4, &latent(x, 4, 3, 2)?, &dino_teacher)?;
        Ok((g.value, latent_flat(&g)))
    })?;

    let pc = PointCloud::new(Array2::from_shape_fn((6, 3), |(i, k)| ((3 * i + k) as f64 * 1.3).cos()))?;
    let sets = nca_sets_from_labels(&[0, 0, 0, 1, 1, 1], 2, 3);
    a.run("nca", 6, (-1.0, 1.0), |x| {
        let r = nca_loss(&pc, &sets, &mat(x, 2, 3))?;
        Ok((r.value, flat([&r.grad_phi])))
    })?;
    let sim = from_table(Array2::from_shape_fn((5, 5), |(i, k)| 1.0 + ((i + k) % 3) as f64).view())?;
    a.run("sne", 10, (-1.0, 1.0), |x| {
        let (v, g) = sne_loss(&sim, &mat(x, 5, 2))?;
        Ok((v, flat([&g])))
    })?;
    Ok(a.rows)
}
