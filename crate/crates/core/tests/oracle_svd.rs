//! The exact SVD oracle against an independent implementation, and the
//! laws every normalized operator obeys.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specrep::dist::{from_table, random_table, ratio_matrix, t_matrix};
use specrep::linalg::{max_abs_diff, scale_cols, scale_rows};
use specrep::oracle::{eckart_young_tail, fit_residual, oracle, principal_angles, spectrum};

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

#[test]
fn spectrum_matches_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let (n, m) = (rng.gen_range(2..=12), rng.gen_range(2..=12));
        let j = random_table(n, m, rng.gen());
        let t = t_matrix(&j);
        let ours = spectrum(&t);
        let mut theirs: Vec<f64> = to_na(&t.t).svd(false, false).singular_values.iter().copied().collect();
        theirs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(ours.len(), theirs.len());
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-12, "{n}×{m}: {a} vs {b}");
        }
    }
}

#[test]
fn singular_subspaces_match_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let n = rng.gen_range(3..=10);
        let j = random_table(n, n + 1, rng.gen());
        let t = t_matrix(&j);
        let svd = to_na(&t.t).svd(true, false);
        let u = svd.u.unwrap();
        // nalgebra does not sort; order its columns by singular value
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
        let d = 2;
        let theirs = Array2::from_shape_fn((n, d), |(r, c)| u[(r, order[c])]);
        let basis = oracle(&j, d).unwrap();
        let ones = Array1::ones(n);
        let angle = principal_angles(basis.u.view(), theirs.view(), &ones).unwrap().max_angle();
        assert!(angle < 1e-8, "angle {angle:e}");
    }
}

/// Top singular value 1 with vectors √px and √py on 100 random tables.
#[test]
fn top_singular_pair_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (n, m) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let j = random_table(n, m, rng.gen());
        let b = oracle(&j, 1).unwrap();
        assert!((b.sigma[0] - 1.0).abs() <= 1e-10);
        let (u, v) = (b.u.column(0), b.v.column(0));
        let su = j.px().mapv(f64::sqrt);
        let sv = j.py().mapv(f64::sqrt);
        assert!((u.dot(&su).abs() - 1.0).abs() <= 1e-10);
        assert!((v.dot(&sv).abs() - 1.0).abs() <= 1e-10);
    }
}

fn table() -> impl Strategy<Value = Array2<f64>> {
    (1usize..=7, 1usize..=7).prop_flat_map(|(n, m)| {
        prop::collection::vec(0.01f64..1.0, n * m).prop_map(move |v| Array2::from_shape_vec((n, m), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectrum_is_bounded_by_one(raw in table()) {
        let j = from_table(raw.view()).unwrap();
        let s = spectrum(&t_matrix(&j));
        prop_assert!((s[0] - 1.0).abs() < 1e-10);
        prop_assert!(s.iter().all(|&v| v <= 1.0 + 1e-10 && v >= -1e-12));
    }

    #[test]
    fn full_rank_factors_rebuild_the_ratio(raw in table()) {
        let j = from_table(raw.view()).unwrap();
        let r = j.n().min(j.m());
        let (phi, psi) = oracle(&j, r).unwrap().ratio_factors(&j);
        let err = max_abs_diff(phi.dot(&psi.t()).view(), ratio_matrix(&j).r.view());
        prop_assert!(err < 1e-8, "err {err:e}");
    }

    #[test]
    fn oracle_fit_attains_the_tail(raw in table(), dsel in 0usize..7) {
        let j = from_table(raw.view()).unwrap();
        let d = 1 + dsel % j.n().min(j.m());
        let (phi, psi) = oracle(&j, d).unwrap().ratio_factors(&j);
        let fit = fit_residual(&j, phi.view(), psi.view()).unwrap();
        let tail = eckart_young_tail(&t_matrix(&j), d).unwrap();
        prop_assert!((fit - tail).abs() < 1e-9);
    }

    #[test]
    fn angles_ignore_invertible_mixing(raw in table(), a in -2.0f64..2.0, b in 0.5f64..2.0) {
        let j = from_table(raw.view()).unwrap();
        prop_assume!(j.n() >= 2 && j.m() >= 2);
        let basis = oracle(&j, 2).unwrap();
        let mix = Array2::from_shape_vec((2, 2), vec![b, a, 0.0, 1.0 / b]).unwrap();
        let mixed = basis.u.dot(&mix);
        let ones = Array1::ones(j.n());
        let ang = principal_angles(mixed.view(), basis.u.view(), &ones).unwrap().max_angle();
        prop_assert!(ang < 1e-7);
    }

    #[test]
    fn t_is_the_weighted_table(raw in table()) {
        let j = from_table(raw.view()).unwrap();
        let t = t_matrix(&j);
        let back = scale_cols(scale_rows(t.t.view(), &t.sqrt_px).view(), &t.sqrt_py);
        prop_assert!(max_abs_diff(back.view(), j.p().view()) < 1e-14);
    }
}
