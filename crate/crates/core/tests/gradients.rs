//! Analytic gradients against central finite differences, 20 random
//! points per objective, relative error ≤ 1e-6.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specrep::classic::{nca_loss, nca_sets_from_labels, sne_loss, PointCloud};
use specrep::dist::{block4, random_table, sample_pairs};
use specrep::ebm::{loss_ebm_density_ratio, loss_simclr, loss_word2vec, moco_objective, EnergyParams};
use specrep::gradcheck::{check, FD_STEP};
use specrep::latent::{cross_entropy, dino_objective, LatentParams};
use specrep::linobj::Estimator;
use specrep::mm::{loss_clip, loss_mle_stopgrad, loss_siglip, mle_value, MmParams, Partition, PartitionState};
use specrep::nce::RankingMode;
use specrep::power::{byol_xi_gradient, gvpi_objective, GvpiLoss, PowerState};
use specrep::JointTable;

const TOL: f64 = 1e-6;
const POINTS: usize = 20;

fn mat(x: &[f64], r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_vec((r, c), x.to_vec()).unwrap()
}

fn flat<'a>(parts: impl IntoIterator<Item = &'a Array2<f64>>) -> Vec<f64> {
    parts.into_iter().flat_map(|a| a.iter().copied()).collect()
}

/// Worst relative error of `f` over random points in `range`.
fn audit(len: usize, seed: u64, range: (f64, f64), f: impl Fn(&[f64]) -> (f64, Vec<f64>)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..POINTS)
        .map(|_| {
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(range.0..range.1)).collect();
            check(&f, &x, FD_STEP, 1e-8).rel_error
        })
        .fold(0.0, f64::max)
}

fn assert_audit(name: &str, e: f64) {
    assert!(e <= TOL, "{name}: relative error {e:e}");
}

#[test]
fn simclr_in_every_ranking_mode() {
    let j = block4();
    let batch = sample_pairs(&j, 5, 15, 2);
    let modes = [
        ("expected", RankingMode::Expected),
        ("surrogate", RankingMode::Surrogate),
        ("sampled", RankingMode::Sampled(&batch)),
    ];
    for (name, mode) in modes {
        let e = audit(8, 1, (-1.0, 1.0), |x| {
            let r = loss_simclr(&j, &EnergyParams::tied(mat(x, 4, 2), true, 0.5), 4, mode).unwrap();
            (r.value, flat([&r.grad_phi]))
        });
        assert_audit(&format!("simclr {name}"), e);
    }
}

#[test]
fn moco_student_gradient() {
    let j = block4();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let teacher = EnergyParams::tied(Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0)), true, 0.7);
    let e = audit(8, 2, (-1.0, 1.0), |x| {
        let s = EnergyParams::tied(mat(x, 4, 2), true, 0.7);
        let (v, g) = moco_objective(&j, &s, &teacher, 3, RankingMode::Expected).unwrap();
        (v, flat([&g]))
    });
    assert_audit("moco", e);
}

#[test]
fn density_ratio_and_word2vec() {
    let r = random_table(3, 4, 9);
    let sq = random_table(4, 4, 10);
    let batch = sample_pairs(&r, 6, 12, 4);
    let sq_batch = sample_pairs(&sq, 6, 12, 4);
    for (name, est) in [("exact", Estimator::Exact), ("batch", Estimator::Batch(&batch))] {
        let e = audit(14, 3, (-1.0, 1.0), |x| {
            let p = EnergyParams::untied(mat(&x[..6], 3, 2), mat(&x[6..], 4, 2), 0.8);
            let rep = loss_ebm_density_ratio(&r, &p, est).unwrap();
            (rep.value, flat([&rep.grad_phi, &rep.grad_psi]))
        });
        assert_audit(&format!("ebm_ratio {name}"), e);
    }
    for (name, est) in [("exact", Estimator::Exact), ("batch", Estimator::Batch(&sq_batch))] {
        let e = audit(8, 4, (-1.0, 1.0), |x| {
            let rep = loss_word2vec(&sq, &mat(x, 4, 2), est).unwrap();
            (rep.value, flat([&rep.grad_phi]))
        });
        assert_audit(&format!("word2vec {name}"), e);
    }
}

fn towers(x: &[f64], n: usize, m: usize, d: usize, tau: f64) -> MmParams {
    MmParams::new(mat(&x[..n * d], n, d), mat(&x[n * d..], m, d), tau).unwrap()
}

#[test]
fn multimodal_losses() {
    let j = random_table(3, 4, 11);
    let batch = sample_pairs(&j, 4, 12, 5);
    for (name, mode) in [("expected", RankingMode::Expected), ("sampled", RankingMode::Sampled(&batch))] {
        let e = audit(14, 6, (-1.0, 1.0), |x| {
            let r = loss_clip(&j, &towers(x, 3, 4, 2, 0.6), 4, mode).unwrap();
            (r.value, flat([&r.grad_phi, &r.grad_psi]))
        });
        assert_audit(&format!("clip {name}"), e);
    }
    for (name, est) in [("exact", Estimator::Exact), ("batch", Estimator::Batch(&batch))] {
        let e = audit(14, 7, (-1.0, 1.0), |x| {
            let r = loss_siglip(&j, &towers(x, 3, 4, 2, 0.6), est).unwrap();
            (r.value, flat([&r.grad_phi, &r.grad_psi]))
        });
        assert_audit(&format!("siglip {name}"), e);
    }
}

#[test]
fn stop_gradient_mle_with_tracked_partitions() {
    let j = random_table(3, 4, 12);
    let state =
        PartitionState::new(Array1::from_vec(vec![0.8, 1.3, 2.0]), Array1::from_vec(vec![1.1, 0.6, 0.9, 1.7]), 0.1)
            .unwrap();
    let e = audit(14, 8, (-1.0, 1.0), |x| {
        let r = loss_mle_stopgrad(&j, &towers(x, 3, 4, 2, 1.0), Partition::Tracked(&state)).unwrap();
        (r.value, flat([&r.grad_phi, &r.grad_psi]))
    });
    assert_audit("mle_stopgrad tracked", e);
}

#[test]
fn exact_partition_stop_gradient_is_the_likelihood_gradient() {
    // the stop-gradient direction with exact partitions must be the true
    // gradient of the log-likelihood
    let j = random_table(4, 3, 13);
    let e = audit(14, 9, (-1.0, 1.0), |x| {
        let p = towers(x, 4, 3, 2, 0.9);
        let r = loss_mle_stopgrad(&j, &p, Partition::Exact).unwrap();
        (mle_value(&j, &p).unwrap(), flat([&r.grad_phi, &r.grad_psi]))
    });
    assert_audit("mle_value", e);
}

fn power_state(x: &[f64], n: usize, d: usize, target: &Array2<f64>) -> PowerState {
    let mut s = PowerState::new(mat(&x[..n * d], n, d), 0.5);
    s.a_mat = mat(&x[n * d..], d, d);
    s.target_xi = target.clone();
    s
}

#[test]
fn gvpi_objectives() {
    let j = random_table(4, 4, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let target = Array2::from_shape_fn((4, 2), |_| rng.gen_range(0.3..1.0));
    for loss in [GvpiLoss::Kl, GvpiLoss::Nce { k: 3 }] {
        // positive entries keep every score positive
        let e = audit(12, 10, (0.2, 1.0), |x| {
            let r = gvpi_objective(&j, &power_state(x, 4, 2, &target), loss).unwrap();
            (r.value, flat([&r.grad_xi, &r.grad_a]))
        });
        assert_audit(&format!("gvpi {loss:?}"), e);
    }
}

#[test]
fn byol_regression_gradient() {
    let j = random_table(4, 4, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let target = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
    let lambda = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
    let loss = |s: &PowerState| -> f64 {
        let pred = s.xi.dot(&s.lambda.t());
        j.p()
            .indexed_iter()
            .map(|((a, b), &p)| {
                let r = &pred.row(a) - &s.target_xi.row(b);
                p * r.dot(&r)
            })
            .sum()
    };
    let e = audit(8, 11, (-1.0, 1.0), |x| {
        let mut s = PowerState::new(mat(x, 4, 2), 0.5);
        s.target_xi = target.clone();
        s.lambda = lambda.clone();
        (loss(&s), flat([&byol_xi_gradient(&j, &s)]))
    });
    assert_audit("byol", e);
}

fn latent(x: &[f64], n: usize, d: usize, k: usize) -> LatentParams {
    let (a, b) = (n * d, n * d + d * k);
    LatentParams::new(mat(&x[..a], n, d), mat(&x[a..b], d, k), Array1::from_vec(x[b..].to_vec())).unwrap()
}

fn latent_grad(g: &specrep::latent::LatentGrad) -> Vec<f64> {
    g.upsilon.iter().chain(g.w.iter()).chain(g.b.iter()).copied().collect()
}

#[test]
fn latent_cross_entropy_and_distillation() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let targets = Array2::from_shape_fn((5, 3), |_| rng.gen_range(0.0..0.4));
    let len = 5 * 2 + 2 * 3 + 3;
    let e = audit(len, 12, (-1.0, 1.0), |x| {
        let g = cross_entropy(&latent(x, 5, 2, 3), &targets).unwrap();
        (g.value, latent_grad(&g))
    });
    assert_audit("cross_entropy", e);

    let j: JointTable = block4();
    let teacher = Array2::from_shape_fn((4, 2), |(x, z)| if (x < 2) == (z == 0) { 0.8 } else { 0.2 });
    let e = audit(4 * 3 + 3 * 2 + 2, 13, (-1.0, 1.0), |x| {
        let g = dino_objective(&j, &latent(x, 4, 3, 2), &teacher).unwrap();
        (g.value, latent_grad(&g))
    });
    assert_audit("dino", e);
}

#[test]
fn classical_ranking_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let pc = PointCloud::new(Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0))).unwrap();
    let sets = nca_sets_from_labels(&[0, 0, 0, 1, 1, 1], 2, 3);
    let e = audit(6, 14, (-1.0, 1.0), |x| {
        let r = nca_loss(&pc, &sets, &mat(x, 2, 3)).unwrap();
        (r.value, flat([&r.grad_phi]))
    });
    assert_audit("nca", e);

    let raw = Array2::from_shape_fn((5, 5), |(a, b)| 1.0 + ((a + b) % 3) as f64);
    let sim = specrep::dist::from_table(raw.view()).unwrap();
    let e = audit(10, 15, (-1.0, 1.0), |x| {
        let (v, g) = sne_loss(&sim, &mat(x, 5, 2)).unwrap();
        (v, flat([&g]))
    });
    assert_audit("sne", e);
}
