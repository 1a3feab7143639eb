//! Invariants of the power-iteration, energy-based, latent-variable and
//! multi-modal learners.

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specrep::dist::{block4, independent_joint, ratio_matrix, synth_latent_mixture, table2x2};
use specrep::ebm::{
    gaussian_factorization, loss_simclr, loss_word2vec, moco_step, model_conditional, partition_exact, rff_expand,
    EnergyParams, RffBridge,
};
use specrep::latent::{
    adjusted_rand_index, deepcluster_e_step, deepcluster_m_step, dino_objective, dino_step, posteriors, sela_e_step,
    LatentParams, TeacherMode,
};
use specrep::linalg::{fro, max_abs_diff};
use specrep::linobj::Estimator;
use specrep::mm::{loss_mle_stopgrad, partition_update, Partition, PartitionBatch, PartitionState};
use specrep::nce::RankingMode;
use specrep::oracle::{angle_to_oracle, oracle, spectrum};
use specrep::power::{byol_lambda_step, byol_xi_step, fixed_point_residual, gvpi_conditional, minc_step, PowerState};
use specrep::train::{parse_configs, run_train_fixture, TrainedParams};
use specrep::{dist, JointTable};

fn gaussian(r: usize, c: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((r, c), |_| scale * rng.gen_range(-1.0..1.0))
}

fn train(text: &str) -> TrainedParams {
    let out = run_train_fixture(&parse_configs(text).unwrap()[0]).unwrap();
    assert!(out.error().is_none());
    out.params
}

// ---------------------------------------------------------------------------
// power iteration

#[test]
fn minc_recovers_the_top_two_span() {
    let j = block4();
    let basis = oracle(&j, 2).unwrap();
    let mut s = PowerState::new(gaussian(4, 2, 0.1, 1), 0.5);
    for _ in 0..10_000 {
        s = minc_step(&j, &s, 0.1).unwrap();
    }
    let angle = angle_to_oracle(&j, s.xi.view(), &basis).unwrap();
    assert!(angle <= 1e-3, "angle {angle:e}");
    let sym = max_abs_diff(s.lambda.view(), s.lambda.t());
    assert!(sym <= 1e-10);
    let min_eig = specrep::linalg::sym_eigen(s.lambda.view()).0.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    assert!(min_eig >= -1e-10);
}

#[test]
fn minc_oracle_start_does_not_drift() {
    let j = block4();
    let basis = oracle(&j, 2).unwrap();
    let (xi, _) = basis.ratio_factors(&j);
    let mut s = PowerState::new(xi, 0.5);
    s.lambda = Array2::from_diag(&basis.sigma);
    for _ in 0..10 {
        let next = minc_step(&j, &s, 1e-3).unwrap();
        let drift = angle_to_oracle(&j, next.xi.view(), &basis).unwrap();
        assert!(drift <= 1e-8, "drift {drift:e}");
        s = next;
    }
}

/// The residual scales with ‖ξ‖, so it can grow while a small start is
/// still growing toward the eigenvalue scale; that phase ends well within
/// 1000 steps at step size 0.05 on these starts.
#[test]
fn minc_fixed_point_residual_decreases_after_burn_in() {
    const BURN_IN: usize = 1000;
    let j = block4();
    for (seed, scale) in [(2, 0.1), (3, 0.1), (4, 0.1), (2, 1.0), (3, 1.0), (5, 0.5)] {
        let mut s = PowerState::new(gaussian(4, 2, scale, seed), 0.5);
        let mut prev = f64::INFINITY;
        for t in 0..5_000 {
            s = minc_step(&j, &s, 0.05).unwrap();
            let r = fixed_point_residual(&j, &s.xi, &s.lambda);
            if t >= BURN_IN {
                assert!(r <= prev * (1.0 + 1e-12) + 1e-15, "seed {seed}, step {t}: {r:e} after {prev:e}");
            }
            prev = r;
        }
        assert!(prev < 1e-6, "seed {seed}: final residual {prev:e}");
    }
}

/// Near the fixed point the spec's 100-step burn-in suffices.
#[test]
fn minc_residual_is_monotone_near_the_oracle() {
    let j = block4();
    let basis = oracle(&j, 2).unwrap();
    let (xi, _) = basis.ratio_factors(&j);
    for seed in 0..5 {
        let mut s = PowerState::new(&xi + &gaussian(4, 2, 0.05, 40 + seed), 0.5);
        let mut prev = f64::INFINITY;
        for t in 0..3_000 {
            s = minc_step(&j, &s, 0.05).unwrap();
            let r = fixed_point_residual(&j, &s.xi, &s.lambda);
            if t >= 100 {
                assert!(r <= prev * (1.0 + 1e-12) + 1e-15, "seed {seed}, step {t}: {r:e} after {prev:e}");
            }
            prev = r;
        }
    }
}

#[test]
fn byol_alternation_recovers_the_top_two_span() {
    let j = block4();
    let basis = oracle(&j, 2).unwrap();
    let mut s = PowerState::new(gaussian(4, 2, 1.0, 3), 0.0);
    for _ in 0..20_000 {
        let (next, _) = byol_lambda_step(&j, &s).unwrap();
        s = byol_xi_step(&j, &next, 0.5).unwrap();
    }
    let angle = angle_to_oracle(&j, s.xi.view(), &basis).unwrap();
    assert!(angle <= 1e-3, "angle {angle:e}");
}

#[test]
fn gvpi_fits_the_low_rank_conditional() {
    let TrainedParams::Power { state, .. } = train("objective = gvpi_kl\nlearner = gvpi\nfixture = lowrank\nd = 3")
    else {
        panic!("power params expected")
    };
    let j = dist::synth_random_lowrank(8, 8, 3, 1).unwrap();
    let err = max_abs_diff(gvpi_conditional(&j, &state).view(), j.conditional().view());
    assert!(err <= 1e-3, "conditional error {err:e}");
}

#[test]
fn power_learners_share_the_direct_span() {
    for (fixture, d) in [("block4", 2), ("lowrank", 3)] {
        let j = specrep::train::resolve_fixture(fixture).unwrap();
        let spans: Vec<Array2<f64>> = [
            "objective = spectral_contrastive",
            "objective = minc\nlearner = minc",
            "objective = byol\nlearner = byol",
        ]
        .iter()
        .map(|o| train(&format!("{o}\nfixture = {fixture}\nd = {d}")).span_features().unwrap().clone())
        .collect();
        let w = j.px().clone();
        for a in 0..spans.len() {
            for b in a + 1..spans.len() {
                let ang = specrep::oracle::principal_angles(spans[a].view(), spans[b].view(), &w).unwrap().max_angle();
                assert!(ang <= 2e-3, "{fixture}: {a} vs {b}: {ang:e}");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// energy-based

#[test]
fn simclr_at_infinite_temperature_is_log_k() {
    let j = block4();
    for k in [2, 5] {
        let p = EnergyParams::tied(gaussian(4, 2, 1.0, 4), true, 1e9);
        let v = loss_simclr(&j, &p, k, RankingMode::Expected).unwrap().value;
        assert!((v - (k as f64).ln()).abs() < 1e-8);
    }
}

#[test]
fn word2vec_independent_optimum_is_zero_scores() {
    let j = independent_joint(&array![0.2, 0.3, 0.5], &array![0.2, 0.3, 0.5]).unwrap();
    let r = loss_word2vec(&j, &Array2::zeros((3, 2)), Estimator::Exact).unwrap();
    assert!((r.value - 2.0 * 2f64.ln()).abs() < 1e-14);
    assert!(r.grad_norm() < 1e-14);
}

#[test]
fn density_ratio_optimum_is_the_log_ratio() {
    let params = train("objective = ebm_ratio");
    let j = block4();
    let TrainedParams::Energy { student, .. } = &params else { panic!("energy params expected") };
    let s = student.scores().unwrap();
    for x in 0..4 {
        for y in 0..4 {
            let want = if (x < 2) == (y < 2) { 1.5f64.ln() } else { 0.5f64.ln() };
            assert!((s[[x, y]] - want).abs() <= 1e-3, "({x},{y}) {}", s[[x, y]]);
        }
    }
    let cond = model_conditional(&j, student).unwrap();
    assert!(max_abs_diff(cond.view(), j.conditional().view()) <= 1e-3);
}

#[test]
fn partition_is_rotation_invariant() {
    let j = block4();
    let u = gaussian(4, 2, 1.0, 5);
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    let q = array![[c, -s], [s, c]];
    let z0 = partition_exact(&j, &EnergyParams::tied(u.clone(), false, 1.0)).unwrap();
    let z1 = partition_exact(&j, &EnergyParams::tied(u.dot(&q), false, 1.0)).unwrap();
    assert!((&z0 - &z1).iter().all(|v| v.abs() <= 1e-12));
    let z = partition_exact(&j, &EnergyParams::tied(Array2::zeros((4, 2)), false, 1.0)).unwrap();
    assert!(z.iter().all(|&v| (v - 1.0).abs() < 1e-15));
}

#[test]
fn moco_momentum_one_freezes_the_teacher_and_stationary_steps_vanish() {
    let j = block4();
    let student = EnergyParams::tied(gaussian(4, 2, 1.0, 6), true, 1.0);
    let teacher = EnergyParams::tied(gaussian(4, 2, 1.0, 7), true, 1.0);
    let (_, t) = moco_step(&j, &student, &teacher, 4, 0.1, 1.0, RankingMode::Expected).unwrap();
    assert_eq!(t.upsilon, teacher.upsilon);

    let TrainedParams::Energy { student, .. } = train("objective = moco\nlearner = moco") else {
        panic!("energy params expected")
    };
    let (s, _) = moco_step(&j, &student, &student, 4, 0.1, 0.9, RankingMode::Expected).unwrap();
    let change = fro((&s.upsilon - &student.upsilon).view());
    assert!(change <= 1e-8, "step change {change:e}");
}

#[test]
fn rff_identity_and_concentration() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let u: Array1<f64> = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let v: Array1<f64> = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let want: f64 = u.dot(&v).exp();
        assert!((gaussian_factorization(&u, &v) - want).abs() <= 1e-12 * want.max(1.0));
    }
    let n = 100_000;
    let b = RffBridge::new(n, 2, 9);
    let f = rff_expand(&b, &Array1::zeros(2)).unwrap();
    assert!((f.dot(&f) - 1.0).abs() <= 3.0 / (n as f64).sqrt());
    let one = RffBridge::new(1, 2, 9);
    assert!(rff_expand(&one, &array![0.3, -0.2]).unwrap().iter().all(|v| v.is_finite()));
}

/// Root-mean-square error falls as `D^{-1/2}`.
#[test]
fn rff_error_slope_is_minus_one_half() {
    let u: Array1<f64> = array![0.4, -0.3];
    let v: Array1<f64> = array![-0.2, 0.5];
    let want = u.dot(&v).exp();
    let sizes = [1_000usize, 10_000, 100_000];
    let rms: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let trials = 40;
            let ss: f64 = (0..trials)
                .map(|seed| {
                    let b = RffBridge::new(n, 2, 100 + seed);
                    let est = rff_expand(&b, &u).unwrap().dot(&rff_expand(&b, &v).unwrap());
                    (est - want).powi(2)
                })
                .sum();
            (ss / trials as f64).sqrt()
        })
        .collect();
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = rms.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}, rms {rms:?}");
}

// ---------------------------------------------------------------------------
// latent variable

#[test]
fn kmeans_contracts() {
    let data = array![[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.0, 5.1]];
    let km = deepcluster_e_step(data.view(), 4, 3, 1).unwrap();
    assert!(km.distortion <= 1e-15);
    // brute force over all 2-partitions
    let km = deepcluster_e_step(data.view(), 2, 3, 1).unwrap();
    let best = (1u32..(1 << 3))
        .map(|mask| {
            let labels: Vec<usize> = (0..4).map(|i| if i > 0 && mask & (1 << (i - 1)) != 0 { 1 } else { 0 }).collect();
            (distortion(&data, &labels), labels)
        })
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .unwrap();
    assert!((adjusted_rand_index(&km.assignments, &best.1) - 1.0).abs() < 1e-12);
    let noisy = gaussian(30, 2, 1.0, 10);
    let mut prev = f64::INFINITY;
    for r in 1..=8 {
        let d = deepcluster_e_step(noisy.view(), 4, r, 11).unwrap().distortion;
        assert!(d <= prev + 1e-15, "{r} restarts: {d} after {prev}");
        prev = d;
    }
}

fn distortion(data: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for c in 0..2 {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        let mean = rows.iter().fold(Array1::<f64>::zeros(2), |a, &i| a + data.row(i)) / rows.len() as f64;
        total += rows.iter().map(|&i| (&data.row(i) - &mean).mapv(|v| v * v).sum()).sum::<f64>();
    }
    total
}

#[test]
fn m_step_cross_entropy_is_nonincreasing() {
    let p = LatentParams::new(gaussian(6, 2, 1.0, 12), gaussian(2, 3, 1.0, 13), Array1::zeros(3)).unwrap();
    let (_, trace) = deepcluster_m_step(&p, &[0, 0, 1, 1, 2, 2], &Array1::from_elem(6, 1.0 / 6.0), 200, 1.0).unwrap();
    assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(trace.last().unwrap() < &trace[0]);
}

#[test]
fn em_recovers_the_mixture_partition() {
    let (j, truth) = synth_latent_mixture(8, 2, 3).unwrap();
    // the conditional rows are the E-step features; blocks are far apart
    let km = deepcluster_e_step(j.conditional().view(), 2, 5, 14).unwrap();
    let labels: Vec<usize> = truth.rows().into_iter().map(|r| if r[0] > 0.5 { 0 } else { 1 }).collect();
    assert!((adjusted_rand_index(&km.assignments, &labels) - 1.0).abs() < 1e-12);
}

#[test]
fn sela_marginals_and_small_epsilon_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let logp = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-3.0..0.0));
    let plan = sela_e_step(&logp, 0.05, 10_000).unwrap();
    assert!(plan.converged);
    let rows = plan.q.sum_axis(ndarray::Axis(1));
    let cols = plan.q.sum_axis(ndarray::Axis(0));
    assert!(rows.iter().all(|v| (v - 1.0 / 7.0).abs() <= 1e-8));
    assert!(cols.iter().all(|v| (v - 1.0 / 3.0).abs() <= 1e-8));

    // a permutation-dominant score matrix
    let perm = [2usize, 0, 3, 1];
    let logp = Array2::from_shape_fn((4, 4), |(x, z)| if perm[x] == z { 0.0 } else { -1.0 - 0.1 * (x + z) as f64 });
    let plan = sela_e_step(&logp, 1e-3, 10_000).unwrap();
    let best = permutations(4)
        .into_iter()
        .max_by(|a, b| {
            let s = |p: &Vec<usize>| (0..4).map(|x| logp[[x, p[x]]]).sum::<f64>();
            s(a).partial_cmp(&s(b)).unwrap()
        })
        .unwrap();
    let want = Array2::from_shape_fn((4, 4), |(x, z)| if best[x] == z { 0.25 } else { 0.0 });
    assert!(max_abs_diff(plan.q.view(), want.view()) <= 1e-6);
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn uniform_teacher_pulls_the_student_to_uniform() {
    let j = block4();
    let uniform = Array2::from_elem((4, 2), 0.5);
    let mut s = LatentParams::new(gaussian(4, 2, 1.0, 16), gaussian(2, 2, 1.0, 17), array![0.3, -0.3]).unwrap();
    for _ in 0..3_000 {
        s = dino_step(&j, &s, &uniform, 1.0, TeacherMode::Previous).unwrap().0;
    }
    assert!(max_abs_diff(posteriors(&s).view(), uniform.view()) <= 1e-3);
}

#[test]
fn dino_steps_never_raise_the_frozen_teacher_loss() {
    let (j, _) = synth_latent_mixture(8, 2, 3).unwrap();
    let mut s = LatentParams::new(gaussian(8, 3, 1.0, 18), gaussian(3, 2, 1.0, 19), Array1::zeros(2)).unwrap();
    let mut teacher = posteriors(&s);
    for _ in 0..300 {
        let before = dino_objective(&j, &s, &teacher).unwrap().value;
        let (next, t) = dino_step(&j, &s, &teacher, 2.0, TeacherMode::Previous).unwrap();
        let after = dino_objective(&j, &next, &teacher).unwrap().value;
        assert!(after <= before + 1e-14, "{after} after {before}");
        s = next;
        teacher = t;
    }
}

// ---------------------------------------------------------------------------
// multi-modal

fn row_softmax(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.mapv(f64::exp);
    for mut r in out.rows_mut() {
        let z = r.sum();
        r.mapv_inplace(|v| v / z);
    }
    out
}

#[test]
fn two_by_two_table_optima() {
    let j = table2x2();
    assert!((spectrum(&specrep::dist::t_matrix(&j))[1] - 0.6).abs() < 1e-12);
    let log_ratio = ratio_matrix(&j).r.mapv(f64::ln);
    assert!(
        max_abs_diff(log_ratio.view(), array![[1.6f64.ln(), 0.4f64.ln()], [0.4f64.ln(), 1.6f64.ln()]].view()) < 1e-12
    );

    let TrainedParams::Mm { params, .. } = train("objective = siglip\nfixture = table2x2") else { panic!("mm params") };
    assert!(max_abs_diff(params.scores().view(), log_ratio.view()) <= 1e-3);

    let TrainedParams::Mm { params, .. } = train("objective = clip\nfixture = table2x2") else { panic!("mm params") };
    let s = params.scores();
    assert!(max_abs_diff(row_softmax(&s).view(), row_softmax(&log_ratio).view()) <= 1e-3);
    let (st, lt) = (s.t().to_owned(), log_ratio.t().to_owned());
    assert!(max_abs_diff(row_softmax(&st).view(), row_softmax(&lt).view()) <= 1e-3);
}

#[test]
fn moving_average_partition_matches_the_exact_gradient() {
    let j: JointTable = block4();
    let TrainedParams::Mm { params, .. } = train("objective = mle_stopgrad") else { panic!("mm params") };
    let mut state = PartitionState::ones(4, 4, 0.1).unwrap();
    for _ in 0..10_000 {
        state = partition_update(&j, &params, &state, PartitionBatch::FullPopulation).unwrap();
    }
    let (zx, zy) = specrep::mm::partition_exact(&j, &params).unwrap();
    assert!((&state.z_x - &zx).iter().chain((&state.z_y - &zy).iter()).all(|v| v.abs() <= 1e-10));
    let exact = loss_mle_stopgrad(&j, &params, Partition::Exact).unwrap();
    let tracked = loss_mle_stopgrad(&j, &params, Partition::Tracked(&state)).unwrap();
    assert!(max_abs_diff(exact.grad_phi.view(), tracked.grad_phi.view()) <= 1e-6);
    assert!(max_abs_diff(exact.grad_psi.view(), tracked.grad_psi.view()) <= 1e-6);
    assert!(exact.grad_norm() <= 1e-8);
}
