//! Invariants of classical component analysis and the downstream tasks.

use ndarray::{array, s, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specrep::classic::{
    cca_clouds, cca_table, epsilon_graph, laplacian_embed, lpp, mds, pca, sne_embed, MdsKernel, NeighborGraph,
    PointCloud,
};
use specrep::dist::{from_table, independent_joint, ratio_matrix, t_matrix};
use specrep::dist::{IvModel, MdpTable};
use specrep::ebm::EnergyParams;
use specrep::linalg::{max_abs_diff, svd};
use specrep::oracle::{oracle, principal_angles, spectrum};
use specrep::tasks::{
    attention_regressor, bayes_classify, fit_linear_regressor, iv_closed_form, iv_direct, iv_features, iv_saddle_solve,
    lstd_policy_eval, mdp_spectral_features, posterior_factors, q_direct, PolicyTable, SaddleMethod, SupervisedTable,
};
use specrep::train::{parse_configs, resolve_fixture, run_eval, run_train_fixture};
use specrep::JointTable;

fn cloud(n: usize, p: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(Array2::from_shape_fn((n, p), |_| rng.gen_range(-1.0..1.0))).unwrap()
}

fn ones(n: usize) -> Array1<f64> {
    Array1::ones(n)
}

fn rotation3(a: f64, b: f64) -> Array2<f64> {
    let (ca, sa, cb, sb) = (a.cos(), a.sin(), b.cos(), b.sin());
    let rz = array![[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]];
    let rx = array![[1.0, 0.0, 0.0], [0.0, cb, -sb], [0.0, sb, cb]];
    rz.dot(&rx)
}

// ---------------------------------------------------------------------------
// classic

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pca_is_rotation_equivariant(seed in 0u64..10_000, a in 0.0f64..6.0, b in 0.0f64..6.0) {
        let pc = cloud(12, 3, seed);
        let q = rotation3(a, b);
        let rotated = PointCloud::new(pc.x.dot(&q.t())).unwrap();
        let base = pca(&pc, 2).unwrap();
        let eig = pca(&pc, 3).unwrap().eigenvalues;
        prop_assume!(eig[1] - eig[2] > 1e-3);
        let turned = pca(&rotated, 2).unwrap();
        let ang = principal_angles(turned.components.view(), q.dot(&base.components).view(), &ones(3)).unwrap().max_angle();
        prop_assert!(ang <= 1e-10, "angle {ang:e}");
    }

    #[test]
    fn pca_is_linear_kernel_mds(seed in 0u64..10_000, d in 1usize..=3) {
        let pc = cloud(9, 3, seed);
        let a = pca(&pc, d).unwrap().scores;
        let b = mds(&pc, d, MdsKernel::Linear).unwrap().embedding;
        // equal Gram matrices ⇔ equal up to an orthogonal transform
        let err = max_abs_diff(a.dot(&a.t()).view(), b.dot(&b.t()).view());
        prop_assert!(err <= 1e-9, "gram error {err:e}");
        let ang = principal_angles(a.view(), b.view(), &ones(9)).unwrap().max_angle();
        prop_assert!(ang <= 1e-9);
    }

    #[test]
    fn laplacian_spectrum_lies_in_the_unit_interval(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let mut w = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.gen_range(0.1..2.0);
                w[[i, j]] = v;
                w[[j, i]] = v;
            }
        }
        let emb = laplacian_embed(&NeighborGraph::new(w).unwrap(), n).unwrap();
        prop_assert!((emb.eigenvalues[0] - 1.0).abs() <= 1e-10);
        prop_assert!(emb.eigenvalues.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let first = emb.embedding.column(0);
        prop_assert!(first.iter().all(|&v| (v - first[0]).abs() <= 1e-10));
    }

    #[test]
    fn cca_correlations_are_the_nontrivial_spectrum(seed in 0u64..10_000) {
        let j = specrep::dist::random_table(5, 4, seed);
        let sigma = spectrum(&t_matrix(&j));
        let c = cca_table(&j, 3).unwrap();
        for i in 0..3 {
            prop_assert!((c.correlations[i] - sigma[i + 1]).abs() <= 1e-9);
        }
    }
}

#[test]
fn mds_fixtures() {
    let tri = PointCloud::new(array![[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]]).unwrap();
    let m = mds(&tri, 2, MdsKernel::NegSquaredDistance).unwrap();
    assert!((m.eigenvalues[0] - m.eigenvalues[1]).abs() <= 1e-12);
    let same = PointCloud::new(Array2::from_elem((4, 2), 0.7)).unwrap();
    let m = mds(&same, 2, MdsKernel::NegSquaredDistance).unwrap();
    assert!(m.eigenvalues.iter().all(|v| v.abs() <= 1e-12));
    let m = mds(&cloud(7, 3, 1), 3, MdsKernel::NegSquaredDistance).unwrap();
    assert!(m.embedding.sum_axis(ndarray::Axis(0)).iter().all(|v| v.abs() <= 1e-10));
}

#[test]
fn lpp_matches_a_brute_force_direction_search() {
    let pc = cloud(10, 2, 3);
    let g = NeighborGraph::complete(10);
    let out = lpp(&pc, &g, 1).unwrap();
    let n = pc.n() as f64;
    let rw = &g.w / 9.0;
    let m = pc.x.t().dot(&rw).dot(&pc.x);
    let b = pc.x.t().dot(&pc.x) / n;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let best = (0..10_000)
        .map(|_| {
            let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let v = array![t.cos(), t.sin()];
            v.dot(&m.dot(&v)) / v.dot(&b.dot(&v))
        })
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((out.eigenvalues[0] - best).abs() <= 1e-3, "{} vs {best}", out.eigenvalues[0]);
}

#[test]
fn lpp_constraint_and_scale_invariance() {
    let pc = cloud(8, 3, 5);
    let g = epsilon_graph(&pc, 10.0).unwrap();
    let full = lpp(&pc, &g, 3).unwrap();
    let b = pc.x.t().dot(&pc.x) / 8.0;
    let gram = full.projection.t().dot(&b).dot(&full.projection);
    let err = max_abs_diff(gram.view(), Array2::<f64>::eye(3).view());
    assert!(err <= 1e-8, "constraint error {err:e}");
    let a = lpp(&pc, &g, 2).unwrap().projection;
    let doubled = PointCloud::new(&pc.x * 2.0).unwrap();
    let b2 = lpp(&doubled, &g, 2).unwrap().projection;
    assert!(principal_angles(a.view(), b2.view(), &ones(3)).unwrap().max_angle() <= 1e-10);
}

#[test]
fn cca_degenerate_cases() {
    let j = independent_joint(&array![0.2, 0.3, 0.5], &array![0.3, 0.3, 0.4]).unwrap();
    let c = cca_table(&j, 2).unwrap();
    assert!(c.correlations.iter().all(|v| v.abs() <= 1e-9));
    let pc = cloud(20, 3, 6);
    let c = cca_clouds(&pc, &pc, 3).unwrap();
    assert!(c.correlations.iter().all(|v| (v - 1.0).abs() <= 1e-9));
}

#[test]
fn sne_identical_rows_meet_and_losses_fall() {
    // points 0 and 1 have the same similarities to everyone else
    let raw = array![
        [0.0, 4.0, 3.0, 1.0, 1.0],
        [4.0, 0.0, 3.0, 1.0, 1.0],
        [3.0, 3.0, 0.0, 2.0, 0.5],
        [1.0, 1.0, 2.0, 0.0, 2.0],
        [1.0, 1.0, 0.5, 2.0, 0.0],
    ];
    let sim = from_table(raw.view()).unwrap();
    let run = sne_embed(&sim, 2, 3_000, 1.0, 7).unwrap();
    assert!(run.trace.windows(2).all(|w| w[1] <= w[0]));
    let gap = &run.embedding.row(0) - &run.embedding.row(1);
    assert!(gap.dot(&gap).sqrt() <= 1e-3, "gap {gap}");
}

// ---------------------------------------------------------------------------
// tasks

fn supervised(j: &JointTable) -> SupervisedTable {
    SupervisedTable::new(j.clone(), Array1::from_iter((0..j.m()).map(|y| (y * y) as f64 - 1.0)), None).unwrap()
}

#[test]
fn oracle_basis_regression_is_sufficient() {
    for seed in 0..10 {
        let j = specrep::dist::random_table(5, 4, seed);
        let st = supervised(&j);
        let (phi, _) = oracle(&j, 4).unwrap().ratio_factors(&j);
        let r = fit_linear_regressor(&st, phi.view()).unwrap();
        assert!(r.mse <= 1e-10);
        assert!(
            max_abs_diff(
                r.predictions.view().insert_axis(ndarray::Axis(0)),
                st.conditional_mean().view().insert_axis(ndarray::Axis(0))
            ) <= 1e-6
        );
        let c = fit_linear_regressor(&st, Array2::ones((5, 1)).view()).unwrap();
        let mean = j.px().dot(&st.conditional_mean());
        assert!(c.predictions.iter().all(|v| (v - mean).abs() <= 1e-10));
    }
    let ind = independent_joint(&array![0.3, 0.7], &array![0.2, 0.8]).unwrap();
    let r = fit_linear_regressor(&supervised(&ind), Array2::ones((2, 1)).view()).unwrap();
    assert!(r.mse <= 1e-20);
}

fn argmax_first(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] + 1e-12 { i } else { b })
}

#[test]
fn bayes_rule_agrees_with_the_table_argmax() {
    let fixtures = ["block4", "table2x2", "lowrank", "random:5:4:3", "random:6:3:9", "mixture:8:2:3"];
    for name in fixtures {
        let j = resolve_fixture(name).unwrap();
        let st = SupervisedTable::new(j.clone(), Array1::from_iter((0..j.m()).map(|y| y as f64)), None).unwrap();
        let (phi, mu) = posterior_factors(&j, j.n().min(j.m())).unwrap();
        let out = bayes_classify(&st, phi.view(), mu.view()).unwrap();
        let cond = j.conditional();
        for x in 0..j.n() {
            assert_eq!(out.classes[x], argmax_first(cond.row(x)), "{name}, x = {x}");
        }
    }
}

/// An untied energy model with `exp(a bᵀ)` equal to the ratio, from the
/// SVD of the log-ratio.
fn exact_energy(j: &JointTable) -> EnergyParams {
    let lr = ratio_matrix(j).r.mapv(f64::ln);
    let f = svd(lr.view());
    let r = f.s.len();
    let sq = f.s.mapv(f64::sqrt);
    let a = specrep::linalg::scale_cols(f.u.slice(s![.., ..r]), &sq);
    let b = specrep::linalg::scale_cols(f.v.slice(s![.., ..r]), &sq);
    EnergyParams::untied(a, b, 1.0)
}

#[test]
fn attention_regressor_cases() {
    let j = specrep::dist::random_table(5, 4, 21);
    let st = supervised(&j);
    let e = exact_energy(&j);
    assert!(max_abs_diff(e.scores().unwrap().mapv(f64::exp).view(), ratio_matrix(&j).r.view()) <= 1e-10);
    let all: Vec<usize> = (0..5).collect();
    let out = attention_regressor(&st, &e, &all).unwrap();
    assert!(out.max_error <= 1e-6, "max error {:e}", out.max_error);

    let mean = j.px().dot(&st.conditional_mean());
    let one = attention_regressor(&st, &e, &[2]).unwrap();
    assert!(one.predictions.iter().all(|v| (v - mean).abs() <= 1e-9));
    let zero = EnergyParams::untied(Array2::zeros((5, 2)), Array2::zeros((4, 2)), 1.0);
    let flat = attention_regressor(&st, &zero, &all).unwrap();
    assert!(flat.predictions.iter().all(|v| (v - mean).abs() <= 1e-9));
}

/// A random valid instrument model: E[y|z,x] = f*(x) + e(z,x) with the
/// confounding term centered under P(x|z). A heavy diagonal keeps the
/// instrument strong.
fn random_iv(nz: usize, nx: usize, seed: u64, f_star: Array1<f64>) -> IvModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Array2::from_shape_fn((nz, nx), |(z, x)| rng.gen_range(0.1..1.0) + if z == x { 2.0 } else { 0.0 });
    let j = from_table(raw.view()).unwrap();
    let mut e = Array2::from_shape_fn((nz, nx), |_| rng.gen_range(-1.0..1.0));
    let cond = j.conditional();
    for z in 0..nz {
        let m = cond.row(z).dot(&e.row(z));
        e.row_mut(z).mapv_inplace(|v| v - m);
    }
    let ey = Array2::from_shape_fn((nz, nx), |(z, x)| f_star[x] + e[[z, x]]);
    IvModel::new(j, ey, f_star).unwrap()
}

#[test]
fn iv_saddle_agrees_with_direct_and_closed_form_solves() {
    for seed in 0..4 {
        let iv = random_iv(3, 3, 30 + seed, array![0.5, -1.0, 2.0]);
        let (phi, mu) = iv_features(&iv, 3).unwrap();
        let sol = iv_saddle_solve(&iv, phi.view(), mu.view(), 0.0, 200_000, 0.05, SaddleMethod::Extragradient).unwrap();
        let direct = iv_direct(&iv).unwrap();
        assert!((&sol.f_hat - &direct).iter().all(|v| v.abs() <= 1e-4), "{} vs {direct}", sol.f_hat);
        assert!((&direct - &iv.f_star).iter().all(|v| v.abs() <= 1e-9));
        let (f, _) = iv_closed_form(&iv, phi.view(), mu.view(), 0.0).unwrap();
        let err = (&sol.f_hat - &f).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-6, "saddle vs closed form {err:e}");
    }
}

#[test]
fn iv_null_structure_and_ridge_path() {
    let iv = random_iv(3, 3, 40, Array1::zeros(3));
    let (phi, mu) = iv_features(&iv, 3).unwrap();
    let sol = iv_saddle_solve(&iv, phi.view(), mu.view(), 0.0, 200_000, 0.05, SaddleMethod::Extragradient).unwrap();
    assert!(sol.f_hat.iter().all(|v| v.abs() <= 1e-6));

    let iv = random_iv(3, 3, 41, array![1.0, -2.0, 0.5]);
    let (phi, mu) = iv_features(&iv, 3).unwrap();
    let norms: Vec<f64> = [0.01, 0.1, 1.0]
        .iter()
        .map(|&lambda| {
            let s = iv_saddle_solve(&iv, phi.view(), mu.view(), lambda, 200_000, 0.05, SaddleMethod::Extragradient)
                .unwrap();
            iv.p_zx.py().iter().zip(&s.f_hat).map(|(p, f)| p * f * f).sum::<f64>()
        })
        .collect();
    assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
}

fn random_mdp(s: usize, a: usize, gamma: f64, seed: u64) -> MdpTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Array2::from_shape_fn((s * a, s), |_| rng.gen_range(0.1..1.0));
    for mut row in p.rows_mut() {
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    let r = Array1::from_shape_fn(s * a, |_| rng.gen_range(-1.0..1.0));
    MdpTable::new(p, r, gamma, Array1::from_elem(s, 1.0 / s as f64), a).unwrap()
}

#[test]
fn lstd_with_spectral_features_matches_the_bellman_solve() {
    for seed in 0..5 {
        let mdp = random_mdp(3, 2, 0.9, seed);
        let pi = PolicyTable::uniform(3, 2);
        let feats = mdp_spectral_features(&mdp, 3).unwrap();
        let out = lstd_policy_eval(&mdp, &pi, feats.view(), None).unwrap();
        let q = q_direct(&mdp, &pi).unwrap();
        assert!((&out.q_hat - &q).iter().all(|v| v.abs() <= 1e-6));
    }
    let mdp = random_mdp(3, 2, 0.0, 9);
    let feats = Array2::<f64>::eye(6);
    let out = lstd_policy_eval(&mdp, &PolicyTable::uniform(3, 2), feats.view(), None).unwrap();
    assert!((&out.q_hat - &mdp.reward).iter().all(|v| v.abs() <= 1e-12));
}

/// Converged linear learners at d ≥ rank reach the Bayes risk.
#[test]
fn learned_features_are_sufficient_for_regression() {
    let learners = [
        "objective = spectral_contrastive",
        "objective = vicreg_square",
        "objective = barlow_twins\ninit_scale = 1e-4",
        "objective = fdiv_chisq",
        "objective = minc\nlearner = minc",
        "objective = byol\nlearner = byol",
        "objective = gvpi_kl\nlearner = gvpi",
    ];
    for (fixture, d) in [("block4", 2), ("table2x2", 2), ("lowrank", 3)] {
        for l in learners {
            let c = &parse_configs(&format!("{l}\nfixture = {fixture}\nd = {d}")).unwrap()[0];
            let out = run_train_fixture(c).unwrap();
            let m = run_eval(&out.params, &resolve_fixture(fixture).unwrap()).unwrap();
            let gap = m.regression_mse - m.bayes_mse;
            assert!(gap.abs() <= 1e-6, "{fixture} {l}: gap {gap:e}");
        }
    }
}
