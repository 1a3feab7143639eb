use criterion::{black_box, criterion_group, criterion_main, Criterion};
use specrep::dist::{random_table, t_matrix};
use specrep::linalg::svd;
use specrep::oracle::oracle;
use specrep::train::run_train_fixture;
use specrep_bench::config;

fn oracle_svd(c: &mut Criterion) {
    let j = random_table(12, 12, 1);
    c.bench_function("oracle 12x12 top-3", |b| b.iter(|| oracle(black_box(&j), 3).unwrap()));
    let t = t_matrix(&random_table(48, 32, 2)).t;
    c.bench_function("jacobi svd 48x32", |b| b.iter(|| svd(black_box(t.view()))));
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("train block4");
    group.sample_size(20);
    for text in [
        "objective = spectral_contrastive",
        "objective = vicreg_square",
        "objective = minc\nlearner = minc\nmax_iters = 2000",
        "objective = clip",
    ] {
        let cfg = config(text);
        group.bench_function(cfg.objective.clone(), |b| b.iter(|| run_train_fixture(black_box(&cfg)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, oracle_svd, training);
criterion_main!(benches);
