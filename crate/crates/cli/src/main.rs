use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};
use serde_json::{json, Value};
use specrep::classic::{
    cca_clouds, cca_table, epsilon_graph, laplacian_embed, lpp, mds, pca, sne_embed, MdsKernel, NeighborGraph,
    PointCloud,
};
use specrep::dist::{synth_iv_xor, two_state_cycle, MdpTable};
use specrep::io;
use specrep::selftest::{gradient_audit, AUDIT_TOL};
use specrep::tasks::{
    bayes_classify, fit_linear_regressor, iv_features, iv_saddle_solve, lstd_policy_eval, mdp_spectral_features,
    posterior_factors, q_direct, PolicyTable, SaddleMethod, SupervisedTable,
};
use specrep::train::{
    parse_configs, resolve_fixture, run_eval, run_sweep, run_train_fixture, sweep_csv, TrainConfig, TrainedParams,
};

#[derive(Parser)]
#[command(name = "specrep", version, about = "Spectral representation learning on exact joint tables")]
struct Cli {
    /// Run configuration file (`key = value` lines, runs separated by `---`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override applied to every run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; results go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a fixture joint table.
    Gen {
        /// Fixture name, e.g. `block4`, `random:6:4:SEED`, `mixture:8:2:SEED`.
        #[arg(long)]
        fixture: String,
    },
    /// Train every run in the config; writes a trace and parameters per run.
    Train,
    /// Evaluate saved parameters against a table.
    Eval {
        /// Parameter file written by `train`.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        fixture: String,
    },
    /// Train and evaluate every run in the config into one summary table.
    Sweep {
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Classical component analysis on a point cloud or a table.
    Classic {
        #[arg(long, value_enum)]
        method: ClassicMethod,
        /// Point cloud as a CSV matrix, one point per row.
        #[arg(long)]
        points: Option<PathBuf>,
        /// Second view for point-cloud CCA.
        #[arg(long)]
        points_y: Option<PathBuf>,
        /// Table for table CCA and SNE.
        #[arg(long)]
        fixture: Option<String>,
        #[arg(short, long, default_value_t = 2)]
        d: usize,
        /// ε-neighborhood radius in bandwidth units; the complete graph
        /// is used when absent.
        #[arg(long)]
        epsilon: Option<f64>,
        /// SNE gradient steps.
        #[arg(long, default_value_t = 1000)]
        iters: usize,
    },
    /// Downstream tasks on exact tables.
    Downstream {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long, default_value = "block4")]
        fixture: String,
        /// Trained parameters whose features replace the oracle's.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Feature rank; defaults to the table's full rank.
        #[arg(short, long)]
        d: Option<usize>,
        /// IV: P(u = 0) of the XOR instrument model.
        #[arg(long, default_value_t = 0.7)]
        p_u0: f64,
        /// IV: ridge weight.
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// LSTD: MDP as JSON; the two-state cycle when absent.
        #[arg(long)]
        mdp: Option<PathBuf>,
        /// LSTD: discount for the two-state cycle.
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
    },
    /// Audit every objective's gradient against finite differences.
    Selftest {
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassicMethod {
    Pca,
    Mds,
    MdsLinear,
    Laplacian,
    Lpp,
    Cca,
    Sne,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Regression,
    Classify,
    Iv,
    Lstd,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether every requested run reported ok.
fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Gen { fixture } => gen(cli, fixture),
        Command::Train => train(cli),
        Command::Eval { params, fixture } => eval(cli, params, fixture),
        Command::Sweep { parallelism } => sweep(cli, *parallelism),
        Command::Classic { method, points, points_y, fixture, d, epsilon, iters } => {
            let out = classic(
                cli,
                *method,
                points.as_deref(),
                points_y.as_deref(),
                fixture.as_deref(),
                *d,
                *epsilon,
                *iters,
            )?;
            emit(cli, "classic", &out.0, &out.1)?;
            Ok(true)
        }
        Command::Downstream { task, fixture, params, d, p_u0, lambda, mdp, gamma } => {
            let out = downstream(*task, fixture, params.as_deref(), *d, *p_u0, *lambda, mdp.as_deref(), *gamma)?;
            emit(cli, "downstream", &out.0, &out.1)?;
            Ok(true)
        }
        Command::Selftest { points } => selftest(cli, *points),
    }
}

/// Write `name.<ext>` under `--out`, or print to stdout.
fn write_named(cli: &Cli, name: &str, text: &str) -> Result<()> {
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Emit a result as JSON or as its CSV rendering.
fn emit(cli: &Cli, stem: &str, value: &Value, csv: &str) -> Result<()> {
    let text = match cli.format {
        Format::Json => format!("{}\n", serde_json::to_string_pretty(value)?),
        Format::Csv => csv.to_string(),
    };
    write_named(cli, &format!("{stem}.{}", cli.format.ext()), &text)
}

fn with_seed(fixture: &str, seed: Option<u64>) -> String {
    let Some(seed) = seed else { return fixture.to_string() };
    let parts: Vec<&str> = fixture.split(':').collect();
    match (parts[0], parts.len()) {
        ("random" | "mixture", 4) | ("lowrank", 5) => {
            format!("{}:{seed}", parts[..parts.len() - 1].join(":"))
        }
        _ => fixture.to_string(),
    }
}

fn gen(cli: &Cli, fixture: &str) -> Result<bool> {
    let name = with_seed(fixture, cli.seed);
    let j = resolve_fixture(&name)?;
    let text = match cli.format {
        Format::Csv => io::joint_to_csv(&j),
        Format::Json => format!("{}\n", io::joint_to_json(&j)),
    };
    let stem: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    write_named(cli, &format!("{stem}.{}", cli.format.ext()), &text)?;
    Ok(true)
}

fn load_configs(cli: &Cli) -> Result<Vec<TrainConfig>> {
    let path = cli.config.as_ref().context("--config is required")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut configs = parse_configs(&text)?;
    if let Some(seed) = cli.seed {
        for c in &mut configs {
            c.seed = seed;
        }
    }
    Ok(configs)
}

fn train(cli: &Cli) -> Result<bool> {
    let configs = load_configs(cli)?;
    let mut all_ok = true;
    for c in &configs {
        let out = match run_train_fixture(c) {
            Ok(out) => out,
            Err(e) => {
                eprintln!("{}: failed: {e}", c.run_id);
                all_ok = false;
                continue;
            }
        };
        let last = out.trace.final_row();
        let status = out.error().map_or("ok".to_string(), |e| e.to_string());
        eprintln!(
            "{}: {status}, stop {:?} after {} iterations, loss {}, angle {}",
            c.run_id,
            out.trace.stop,
            out.trace.iters,
            io::fmt_f64(last.loss),
            last.angle.map(io::fmt_f64).unwrap_or_else(|| "-".into())
        );
        all_ok &= out.error().is_none();
        let trace = match cli.format {
            Format::Csv => out.trace.to_csv(),
            Format::Json => format!("{}\n", serde_json::to_string_pretty(&out.trace)?),
        };
        match &cli.out {
            Some(dir) => {
                let run_dir = dir.join(&c.run_id);
                fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
                fs::write(run_dir.join(format!("trace.{}", cli.format.ext())), trace)?;
                fs::write(run_dir.join("params.json"), format!("{}\n", serde_json::to_string_pretty(&out.params)?))?;
                fs::write(run_dir.join("config.json"), format!("{}\n", serde_json::to_string_pretty(c)?))?;
            }
            None => print!("{trace}"),
        }
    }
    Ok(all_ok)
}

fn load_params(path: &Path) -> Result<TrainedParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn eval(cli: &Cli, params: &Path, fixture: &str) -> Result<bool> {
    let p = load_params(params)?;
    let j = resolve_fixture(fixture)?;
    let m = run_eval(&p, &j)?;
    let value = serde_json::to_value(&m)?;
    let obj = value.as_object().expect("metrics serialize as an object");
    let keys: Vec<&String> = obj.keys().collect();
    let vals: Vec<String> = obj
        .values()
        .map(|v| match v {
            Value::Null => String::new(),
            Value::Number(n) => n.as_f64().map(io::fmt_f64).unwrap_or_else(|| n.to_string()),
            other => other.to_string(),
        })
        .collect();
    let csv = format!("{}\n{}\n", keys.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(","), vals.join(","));
    emit(cli, "eval", &value, &csv)?;
    Ok(true)
}

fn sweep(cli: &Cli, parallelism: Option<usize>) -> Result<bool> {
    let configs = load_configs(cli)?;
    let threads = parallelism.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let rows = run_sweep(&configs, threads)?;
    for r in rows.iter().filter(|r| !r.ok()) {
        eprintln!("{}: {}", r.run_id, r.status);
    }
    let text = match cli.format {
        Format::Csv => sweep_csv(&rows),
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&rows)?),
    };
    write_named(cli, &format!("sweep.{}", cli.format.ext()), &text)?;
    Ok(rows.iter().all(|r| r.ok()))
}

fn read_points(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(PointCloud::new(io::matrix_from_csv(&text)?)?)
}

fn rows(a: &Array2<f64>) -> Value {
    json!(io::matrix_to_rows(a))
}

fn vec1(a: &Array1<f64>) -> Value {
    json!(a.to_vec())
}

#[allow(clippy::too_many_arguments)]
fn classic(
    cli: &Cli,
    method: ClassicMethod,
    points: Option<&Path>,
    points_y: Option<&Path>,
    fixture: Option<&str>,
    d: usize,
    epsilon: Option<f64>,
    iters: usize,
) -> Result<(Value, String)> {
    let cloud = || -> Result<PointCloud> { read_points(points.context("--points is required")?) };
    let graph = |pc: &PointCloud| -> Result<NeighborGraph> {
        Ok(match epsilon {
            Some(eps) => epsilon_graph(pc, eps)?,
            None => NeighborGraph::complete(pc.n()),
        })
    };
    Ok(match method {
        ClassicMethod::Pca => {
            let r = pca(&cloud()?, d)?;
            let v = json!({"method": "pca", "components": rows(&r.components), "eigenvalues": vec1(&r.eigenvalues), "scores": rows(&r.scores)});
            (v, io::matrix_to_csv(&r.scores))
        }
        ClassicMethod::Mds | ClassicMethod::MdsLinear => {
            let kernel =
                if matches!(method, ClassicMethod::Mds) { MdsKernel::NegSquaredDistance } else { MdsKernel::Linear };
            let r = mds(&cloud()?, d, kernel)?;
            let v = json!({"method": "mds", "embedding": rows(&r.embedding), "eigenvalues": vec1(&r.eigenvalues), "dropped": r.dropped});
            (v, io::matrix_to_csv(&r.embedding))
        }
        ClassicMethod::Laplacian => {
            let pc = cloud()?;
            let r = laplacian_embed(&graph(&pc)?, d)?;
            let v =
                json!({"method": "laplacian", "embedding": rows(&r.embedding), "eigenvalues": vec1(&r.eigenvalues)});
            (v, io::matrix_to_csv(&r.embedding))
        }
        ClassicMethod::Lpp => {
            let pc = cloud()?;
            let r = lpp(&pc, &graph(&pc)?, d)?;
            let v = json!({"method": "lpp", "projection": rows(&r.projection), "eigenvalues": vec1(&r.eigenvalues)});
            (v, io::matrix_to_csv(&r.projection))
        }
        ClassicMethod::Cca => {
            let r = match (fixture, points_y) {
                (Some(f), _) => cca_table(&resolve_fixture(f)?, d)?,
                (None, Some(y)) => cca_clouds(&cloud()?, &read_points(y)?, d)?,
                (None, None) => bail!("CCA needs --fixture or --points with --points-y"),
            };
            let v = json!({"method": "cca", "a": rows(&r.a), "b": rows(&r.b), "correlations": vec1(&r.correlations)});
            let csv = format!(
                "correlation\n{}",
                r.correlations.iter().map(|c| format!("{}\n", io::fmt_f64(*c))).collect::<String>()
            );
            (v, csv)
        }
        ClassicMethod::Sne => {
            let sim = resolve_fixture(fixture.context("SNE needs --fixture with a symmetric similarity table")?)?;
            let r = sne_embed(&sim, d, iters, 1.0, cli.seed.unwrap_or(0))?;
            let v = json!({"method": "sne", "embedding": rows(&r.embedding), "loss": r.trace});
            (v, io::matrix_to_csv(&r.embedding))
        }
    })
}

fn features(j: &specrep::JointTable, params: Option<&Path>, d: usize) -> Result<Array2<f64>> {
    match params {
        Some(path) => load_params(path)?.span_features().cloned().context("parameters have no feature map"),
        None => Ok(posterior_factors(j, d)?.0),
    }
}

#[allow(clippy::too_many_arguments)]
fn downstream(
    task: Task,
    fixture: &str,
    params: Option<&Path>,
    d: Option<usize>,
    p_u0: f64,
    lambda: f64,
    mdp: Option<&Path>,
    gamma: f64,
) -> Result<(Value, String)> {
    Ok(match task {
        Task::Regression | Task::Classify => {
            let j = resolve_fixture(fixture)?;
            let d = d.unwrap_or(j.n().min(j.m()));
            let st = SupervisedTable::new(j.clone(), Array1::from_iter((0..j.m()).map(|y| y as f64)), None)?;
            match task {
                Task::Regression => {
                    let r = fit_linear_regressor(&st, features(&j, params, d)?.view())?;
                    let v = json!({"task": "regression", "predictions": vec1(&r.predictions), "mse": r.mse, "risk": r.risk, "bayes_mse": r.bayes_mse});
                    let csv = format!(
                        "mse,risk,bayes_mse\n{},{},{}\n",
                        io::fmt_f64(r.mse),
                        io::fmt_f64(r.risk),
                        io::fmt_f64(r.bayes_mse)
                    );
                    (v, csv)
                }
                _ => {
                    let (phi, mu) = posterior_factors(&j, d)?;
                    let c = bayes_classify(&st, phi.view(), mu.view())?;
                    let v = serde_json::to_value(&c)?;
                    let csv = format!(
                        "x,class\n{}",
                        c.classes.iter().enumerate().map(|(x, k)| format!("{x},{k}\n")).collect::<String>()
                    );
                    (v, csv)
                }
            }
        }
        Task::Iv => {
            let h = [1.0 - p_u0, -p_u0];
            let iv = synth_iv_xor(p_u0, h, [0.0, 1.0])?;
            let (phi, mu) = iv_features(&iv, 2)?;
            let s = iv_saddle_solve(&iv, phi.view(), mu.view(), lambda, 200_000, 0.05, SaddleMethod::Extragradient)?;
            let v = json!({"task": "iv", "f_star": vec1(&iv.f_star), "f_hat": vec1(&s.f_hat), "g_hat": vec1(&s.g_hat), "iters": s.iters});
            let csv = format!(
                "x,f_star,f_hat\n{}",
                (0..2)
                    .map(|x| format!("{x},{},{}\n", io::fmt_f64(iv.f_star[x]), io::fmt_f64(s.f_hat[x])))
                    .collect::<String>()
            );
            (v, csv)
        }
        Task::Lstd => {
            let m: MdpTable = match mdp {
                Some(path) => serde_json::from_str(
                    &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
                )?,
                None => {
                    let c = two_state_cycle(0.0);
                    MdpTable::new(c.transition, c.reward, gamma, c.d0, c.n_actions)?
                }
            };
            let pi = PolicyTable::uniform(m.n_states(), m.n_actions);
            let feats = mdp_spectral_features(&m, d.unwrap_or(m.n_states()))?;
            let l = lstd_policy_eval(&m, &pi, feats.view(), None)?;
            let q = q_direct(&m, &pi)?;
            let v = json!({"task": "lstd", "q_hat": vec1(&l.q_hat), "q_direct": vec1(&q), "span_residual": l.span_residual});
            let csv = format!(
                "sa,q_hat,q_direct\n{}",
                (0..q.len())
                    .map(|i| format!("{i},{},{}\n", io::fmt_f64(l.q_hat[i]), io::fmt_f64(q[i])))
                    .collect::<String>()
            );
            (v, csv)
        }
    })
}

fn selftest(cli: &Cli, points: usize) -> Result<bool> {
    let rows = gradient_audit(points, cli.seed.unwrap_or(2024))?;
    let ok = rows.iter().all(|r| r.ok());
    let csv = format!(
        "objective,points,worst_rel_error,status\n{}",
        rows.iter()
            .map(|r| format!(
                "{},{},{},{}\n",
                r.name,
                r.points,
                io::fmt_f64(r.worst),
                if r.ok() { "ok" } else { "fail" }
            ))
            .collect::<String>()
    );
    let value = json!({"tolerance": AUDIT_TOL, "rows": serde_json::to_value(&rows)?});
    emit(cli, "selftest", &value, &csv)?;
    Ok(ok)
}
