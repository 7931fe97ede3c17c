//! Experiment driver for the clustering samplers: dataset generation, chain
//! execution, runtime benchmarks, the stale-site diagnostic and trace
//! evaluation. Each subcommand writes machine-readable CSV/JSON artifacts;
//! plotting is left to external tools.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use epgibbs::harness::{
    config_hash, generate_mvt, generate_ts, gsm_diagnostic, read_labels_json, run_bench,
    run_to_dir, write_matrix_csv, BenchSpec, DatasetConfig, ExperimentConfig, GsmDatasetConfig,
    GsmDiagSpec, ModelKind, MvtDatasetConfig, SamplerKind, TimingMode, TsDatasetConfig,
};
use epgibbs::metrics::nmi;

#[derive(Parser)]
#[command(name = "epgibbs", about = "Approximate collapsed Gibbs clustering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic correlated time-series dataset.
    GenerateTs(GenerateTsArgs),
    /// Generate a synthetic Student-t mixture dataset.
    GenerateMvt(GenerateMvtArgs),
    /// Run one sampler chain and write trace/summary artifacts.
    Run(RunArgs),
    /// Runtime-per-iteration scaling benchmark over the number of series.
    Bench(BenchArgs),
    /// Stale-site diagnostic on Gaussian-scale-mixture components.
    GsmDiag(GsmDiagArgs),
    /// Evaluate labelings or traces.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateTsArgs {
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    t: usize,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0.01)]
    sigma_x2: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_y2: f64,
    #[arg(long, default_value_t = 0.95)]
    a: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateMvtArgs {
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 5.0)]
    dof: f64,
    #[arg(long, default_value_t = 8.0)]
    mean_scale: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    refresh_every: Option<usize>,
    #[arg(long)]
    quad_m: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    /// Evaluate candidate clusters concurrently.
    #[arg(long)]
    parallel: Option<bool>,
    /// `wall` or `off`; `off` zeroes the wall_seconds column so trace files
    /// are byte-reproducible.
    #[arg(long)]
    timing: Option<String>,
    /// Load the dataset matrix from a CSV instead of generating it.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ground-truth sidecar for NMI tracing when loading data.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    t: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![40usize, 80, 160, 320])]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_sampler, default_values_t = vec![SamplerKind::Naive, SamplerKind::Collapsed, SamplerKind::Ep])]
    samplers: Vec<SamplerKind>,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 2)]
    sweeps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    parallel: bool,
}

#[derive(Args)]
struct GsmDiagArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2.0, 5.0, 10.0])]
    c: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.2, 0.5])]
    r: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5])]
    delta: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    passes: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Start sites from converged full EP instead of flat.
    #[arg(long, default_value_t = false)]
    warm_start: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// First labeling (JSON array or truth sidecar with a z field).
    #[arg(long)]
    labels_a: Option<PathBuf>,
    /// Second labeling.
    #[arg(long)]
    labels_b: Option<PathBuf>,
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    s.parse().map_err(|e: epgibbs::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // machine-readable error record on stderr
            let record = serde_json::json!({ "error": err.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> epgibbs::Result<()> {
    match cli.command {
        Command::GenerateTs(args) => {
            let spec = TsDatasetConfig {
                n: args.n,
                t: args.t,
                k: args.k,
                sigma_x2: args.sigma_x2,
                sigma_y2: args.sigma_y2,
                a: args.a,
                lambda: args.lambda,
            };
            let ds = generate_ts(&spec, args.seed)?;
            std::fs::create_dir_all(&args.out)?;
            let rows: Vec<Vec<Option<f64>>> = ds
                .data
                .iter()
                .map(|s| (0..s.len()).map(|t| s.is_observed(t).then(|| s.value(t))).collect())
                .collect();
            write_matrix_csv(&args.out.join("data.csv"), &rows)?;
            let sidecar = serde_json::json!({
                "kind": "ts",
                "spec": spec,
                "seed": args.seed,
                "z": ds.truth.z,
                "eta": ds.truth.eta,
                "x": ds.truth.x,
                "a": ds.truth.a,
                "lambda": ds.truth.lambda,
                "sigma_x2": ds.truth.sigma_x2,
                "sigma_y2": ds.truth.sigma_y2,
                "init_var": ds.truth.init_var,
            });
            std::fs::write(
                args.out.join("truth.json"),
                serde_json::to_string_pretty(&sidecar)? + "\n",
            )?;
            println!("wrote {} series to {}", ds.data.len(), args.out.display());
            Ok(())
        }
        Command::GenerateMvt(args) => {
            let spec = MvtDatasetConfig {
                n: args.n,
                k: args.k,
                d: args.d,
                dof: args.dof,
                mean_scale: args.mean_scale,
            };
            let ds = generate_mvt(&spec, args.seed)?;
            std::fs::create_dir_all(&args.out)?;
            let rows: Vec<Vec<Option<f64>>> = ds
                .data
                .iter()
                .map(|y| y.iter().map(|&v| Some(v)).collect())
                .collect();
            write_matrix_csv(&args.out.join("data.csv"), &rows)?;
            let sidecar = serde_json::json!({
                "kind": "mvt",
                "spec": spec,
                "seed": args.seed,
                "z": ds.truth.z,
                "mu": ds.truth.mu,
                "sigma": ds.truth.sigma,
                "dof": ds.truth.dof,
                "mean_scale": ds.truth.mean_scale,
            });
            std::fs::write(
                args.out.join("truth.json"),
                serde_json::to_string_pretty(&sidecar)? + "\n",
            )?;
            println!("wrote {} items to {}", ds.data.len(), args.out.display());
            Ok(())
        }
        Command::Run(args) => {
            let mut config = match &args.config {
                Some(path) => ExperimentConfig::from_toml(&std::fs::read_to_string(path)?)?,
                None => default_run_config(&args)?,
            };
            if let Some(s) = args.sampler {
                config.sampler = s;
            }
            if let Some(s) = args.sweeps {
                config.sweeps = s;
            }
            if let Some(s) = args.seed {
                config.seed = s;
            }
            if let Some(r) = args.refresh_every {
                config.refresh_every = r;
            }
            if let Some(m) = args.quad_m {
                config.quad_m = m;
            }
            if let Some(a) = args.alpha {
                config.alpha = a;
            }
            if let Some(g) = args.damping {
                config.damping = g;
            }
            if let Some(p) = args.parallel {
                config.parallel = p;
            }
            if let Some(t) = &args.timing {
                config.timing = match t.as_str() {
                    "wall" => TimingMode::Wall,
                    "off" => TimingMode::Off,
                    other => {
                        return Err(epgibbs::Error::Config(format!(
                            "unknown timing mode '{other}'"
                        )))
                    }
                };
            }
            if args.data.is_some() {
                config.data_path = args.data.clone();
            }
            if args.truth.is_some() {
                config.truth_path = args.truth.clone();
            }
            let out = args
                .out
                .clone()
                .or_else(|| config.out_dir.clone())
                .ok_or_else(|| epgibbs::Error::Config("no output directory given".into()))?;
            config.out_dir = Some(out.clone());
            let artifacts = run_to_dir(&config, &out)?;
            println!(
                "sampler={} sweeps={} final_nmi={:?} mean_iter_seconds={:.6}",
                config.sampler,
                config.sweeps,
                artifacts.summary.final_nmi,
                artifacts.summary.mean_iter_seconds
            );
            Ok(())
        }
        Command::Bench(args) => {
            let spec = BenchSpec {
                t: args.t,
                k: args.k,
                n_values: args.n.clone(),
                samplers: args.samplers.clone(),
                warmup_sweeps: args.warmup,
                measured_sweeps: args.sweeps,
                seed: args.seed,
                parallel: args.parallel,
                ..BenchSpec::default()
            };
            let result = run_bench(&spec)?;
            std::fs::create_dir_all(&args.out)?;
            let hash = config_hash(&spec)?;
            let mut csv = format!("# config-hash: {hash}\nsampler,n,sweep,seconds\n");
            for row in &result.rows {
                csv.push_str(&format!(
                    "{},{},{},{:?}\n",
                    row.sampler, row.n, row.sweep, row.seconds
                ));
            }
            std::fs::write(args.out.join("bench.csv"), csv)?;
            let summary = serde_json::json!({
                "config_hash": hash,
                "spec": spec,
                "slopes": result
                    .slopes
                    .iter()
                    .map(|(s, v)| serde_json::json!({"sampler": s, "slope": v}))
                    .collect::<Vec<_>>(),
            });
            std::fs::write(
                args.out.join("bench_summary.json"),
                serde_json::to_string_pretty(&summary)? + "\n",
            )?;
            for (sampler, slope) in &result.slopes {
                println!("{sampler}: log-log slope {slope:.3}");
            }
            Ok(())
        }
        Command::GsmDiag(args) => {
            let spec = GsmDiagSpec {
                n: args.n,
                c_values: args.c.clone(),
                r_values: args.r.clone(),
                delta_values: args.delta.clone(),
                passes: args.passes,
                trials: args.trials,
                seed: args.seed,
                warm_start: args.warm_start,
                ..GsmDiagSpec::default()
            };
            let rows = gsm_diagnostic(&spec)?;
            std::fs::create_dir_all(&args.out)?;
            let hash = config_hash(&spec)?;
            let mut csv =
                format!("# config-hash: {hash}\nc,r,delta,pass,kl,mean_pe,mean_ape,var_pe,var_ape\n");
            for row in &rows {
                csv.push_str(&format!(
                    "{:?},{:?},{:?},{},{:?},{:?},{:?},{:?},{:?}\n",
                    row.c,
                    row.r,
                    row.delta,
                    row.pass,
                    row.kl,
                    row.mean_pe,
                    row.mean_ape,
                    row.var_pe,
                    row.var_ape
                ));
            }
            std::fs::write(args.out.join("gsm_diag.csv"), csv)?;
            println!("wrote {} rows to {}", rows.len(), args.out.display());
            Ok(())
        }
        Command::Eval(args) => match (&args.labels_a, &args.labels_b) {
            (Some(a), Some(b)) => {
                let la = read_labels_json(a)?;
                let lb = read_labels_json(b)?;
                let score = nmi(&la, &lb)?;
                println!("{}", serde_json::json!({ "nmi": score }));
                Ok(())
            }
            _ => Err(epgibbs::Error::Config(
                "eval needs --labels-a and --labels-b".into(),
            )),
        },
    }
}

fn default_run_config(args: &RunArgs) -> epgibbs::Result<ExperimentConfig> {
    let model = match args.model.as_deref() {
        Some("ts") => ModelKind::Ts,
        Some("mvt") => ModelKind::Mvt,
        Some("gsm") => ModelKind::Gsm,
        Some(other) => return Err(epgibbs::Error::Config(format!("unknown model '{other}'"))),
        None => {
            return Err(epgibbs::Error::Config(
                "give --config or --model with flags".into(),
            ))
        }
    };
    let dataset = match model {
        ModelKind::Ts => DatasetConfig::Ts(TsDatasetConfig::default()),
        ModelKind::Mvt => DatasetConfig::Mvt(MvtDatasetConfig::default()),
        ModelKind::Gsm => DatasetConfig::Gsm(GsmDatasetConfig::default()),
    };
    Ok(ExperimentConfig {
        model,
        sampler: args.sampler.unwrap_or(SamplerKind::Ep),
        dataset,
        sweeps: args.sweeps.unwrap_or(50),
        burn_in: 0,
        refresh_every: args.refresh_every.unwrap_or(0),
        damping: args.damping.unwrap_or(1.0),
        quad_m: args.quad_m.unwrap_or(64),
        alpha: args.alpha.unwrap_or(1.0),
        seed: args.seed.unwrap_or(0),
        out_dir: args.out.clone(),
        sweep_order: Default::default(),
        sample_hyperparams: false,
        parallel: args.parallel.unwrap_or(false),
        timing: TimingMode::Wall,
        trace_loglik: true,
        data_path: args.data.clone(),
        truth_path: args.truth.clone(),
        prior_kappa: None,
    })
}
