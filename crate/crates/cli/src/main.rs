mod data;

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcrr::estimators::{dcrr_refine, dcrr_stage1, fit_dcrr, fit_local_init, FitConfig};
use dcrr::simlab::{config_hash, make_scenario, run_experiment, write_report, ExperimentConfig};
use dcrr::transport::{serve_forever, Backend, Cluster, CommStats, SiteWorker, DEFAULT_TIMEOUT};
use dcrr::Error;
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => CliError::Config(e.to_string()),
            Error::Data(_) | Error::TooFewRows(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "dcrr", version, about = "Distributed convoluted rank regression")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment and write summary.csv, report.json, timing.json.
    Simulate(ExperimentArgs),
    /// Fit DCRR-SCAD on per-site CSV files and write fit.json.
    Fit(FitArgs),
    /// Compare rounds, bytes and wall time of the in-process and socket backends.
    Bench(ExperimentArgs),
    /// Serve one site's CSV to a remote master over TCP.
    Serve(ServeArgs),
    /// Write one replicate of a scenario as per-site CSV files.
    Export(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    InProcess,
    Socket,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::InProcess => Backend::InProcess,
            BackendArg::Socket => Backend::Socket,
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment JSON (scenario, methods, fit, backend).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: table2_m5, table2_m15, table3_m5, table3_m15, table4_m5, table4_m15, smoke.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// `paper` sets p = 1000 and 100 replicates.
    #[arg(long, value_enum)]
    scale: Option<Scale>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    /// Directory with one CSV per site; with --addresses, the master's own CSV.
    #[arg(long)]
    data: PathBuf,
    /// Fit configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "in-process")]
    backend: BackendArg,
    /// Comma-separated site addresses (socket backend).
    #[arg(long, value_delimiter = ',')]
    addresses: Vec<String>,
    /// Recorded in the output; the fit itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Socket read/write timeout in seconds.
    #[arg(long)]
    timeout: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    /// This site's CSV file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    listen: String,
    #[arg(long)]
    site_id: u16,
    /// Fit configuration JSON, read for the kernel.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    #[arg(long)]
    seed: Option<u64>,
}

const PRESETS: &[(&str, &str)] = &[
    ("table2_m5", include_str!("../presets/table2_m5.json")),
    ("table2_m15", include_str!("../presets/table2_m15.json")),
    ("table3_m5", include_str!("../presets/table3_m5.json")),
    ("table3_m15", include_str!("../presets/table3_m15.json")),
    ("table4_m5", include_str!("../presets/table4_m5.json")),
    ("table4_m15", include_str!("../presets/table4_m15.json")),
    ("smoke", include_str!("../presets/smoke.json")),
];

fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            CliError::Config(format!("{origin}: {}", e.inner()))
        } else {
            CliError::Config(format!("{origin}: at `{path}`: {}", e.inner()))
        }
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_json(&text, &path.display().to_string())
}

fn experiment_config(config: &Option<PathBuf>, preset: &Option<String>) -> Result<ExperimentConfig, CliError> {
    match (config, preset) {
        (Some(path), _) => read_json(path),
        (None, Some(name)) => {
            let (_, text) = PRESETS.iter().find(|(n, _)| n == name).ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                CliError::Config(format!("unknown preset {name:?}; known: {}", names.join(", ")))
            })?;
            parse_json(text, &format!("preset {name}"))
        }
        (None, None) => Err(CliError::Config("give --config or --preset".into())),
    }
}

fn load_experiment(args: &ExperimentArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = experiment_config(&args.config, &args.preset)?;
    if let Some(Scale::Paper) = args.scale {
        cfg.scenario.p = 1000;
        cfg.scenario.replicates = 100;
    }
    if let Some(seed) = args.seed {
        cfg.scenario.seed = seed;
    }
    if let Some(r) = args.replicates {
        cfg.scenario.replicates = r;
    }
    if let Some(b) = args.backend {
        cfg.backend = b.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text).map_err(io_err(path))
}

fn cmd_simulate(args: &ExperimentArgs) -> Result<(), CliError> {
    let cfg = load_experiment(args)?;
    info!("config {} seed {}", cfg.hash(), cfg.scenario.seed);
    let report = run_experiment(&cfg)?;
    write_report(&report, &args.out)?;

    println!("{:<18} {:>16} {:>12} {:>12} {:>8}", "method", "l2 (se)", "FP", "FN", "rounds");
    for &m in &cfg.methods {
        let get = |k: &str| report.summary_of(m, k).map_or((f64::NAN, f64::NAN), |r| (r.mean, r.se));
        let (l2, l2se) = get("l2_err");
        println!(
            "{:<18} {:>8.4} ({:.4}) {:>12.2} {:>12.2} {:>8.1}",
            m.to_string(),
            l2,
            l2se,
            get("fp").0,
            get("fn").0,
            get("comm_rounds").0
        );
    }
    println!("config_hash {} seed {}", report.config_hash, report.seed);
    let failures = report.replicates.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        return Err(CliError::Runtime(format!("{failures} method fit(s) failed; see report.json")));
    }
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let cfg: FitConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    cfg.validate()?;
    let timeout = args.timeout.map_or(DEFAULT_TIMEOUT, Duration::from_secs);
    let backend: Backend = args.backend.into();

    let (features, mut cluster, site_files, dropped) = match backend {
        Backend::Socket => {
            if args.addresses.is_empty() {
                return Err(CliError::Config("the socket backend needs --addresses".into()));
            }
            let files = data::site_files(&args.data)?;
            if files.len() != 1 {
                return Err(CliError::Config("with --addresses, --data must name the master's single CSV".into()));
            }
            let (header, rows) = data::read_csv(&files[0])?;
            let master = data::to_block(&rows, header.len())?;
            let cluster = Cluster::connect(&args.addresses, master, cfg.kernel, timeout)?;
            let mut features = header;
            features.pop();
            (features, cluster, Vec::new(), Vec::new())
        }
        Backend::InProcess => {
            if !args.addresses.is_empty() {
                warn!("--addresses is ignored by the in-process backend");
            }
            let sites = data::load_sites(&args.data)?;
            let blocks: Vec<_> = sites.sites.iter().map(|s| s.block.clone()).collect();
            let cluster = Cluster::in_process(&blocks, cfg.kernel, cfg.master_policy)?;
            let files: Vec<_> = sites
                .sites
                .iter()
                .enumerate()
                .map(|(k, s)| json!({"site_id": k, "file": s.path.display().to_string(), "n": s.block.n()}))
                .collect();
            let dropped: Vec<_> =
                sites.dropped.iter().map(|(p, n)| json!({"file": p.display().to_string(), "n": n})).collect();
            (sites.features, cluster, files, dropped)
        }
    };

    let start = Instant::now();
    let (mean_x, mean_y) = cluster.center()?;
    let res = fit_dcrr(&mut cluster, &cfg)?;
    let total = cluster.stats();
    if !res.converged {
        warn!("some solves stopped at max_iter");
    }
    let coefficients: serde_json::Map<String, serde_json::Value> =
        features.iter().zip(res.beta.iter()).map(|(f, b)| (f.clone(), json!(b))).collect();
    let out = json!({
        "config_hash": config_hash(&cfg),
        "seed": args.seed,
        "config": cfg,
        "backend": backend,
        "sites": site_files,
        "dropped_sites": dropped,
        "master_site": cluster.master_id(),
        "total_n": cluster.total_n(),
        "features": features,
        "centering": {"x_means": mean_x.to_vec(), "y_mean": mean_y},
        "beta": res.beta.to_vec(),
        "coefficients": coefficients,
        "support": res.support,
        "support_names": res.support.iter().map(|&j| features[j].clone()).collect::<Vec<_>>(),
        "lambdas": res.lambdas,
        "path_lengths": res.path_lengths,
        "converged": res.converged,
        "capped": res.capped,
        "comm_fit": res.comm,
        "comm_total": total,
        "wall_time": start.elapsed().as_secs_f64(),
    });
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    write_json(&args.out.join("fit.json"), &out)?;
    println!(
        "support {:?}; {} gradient + {} loss + {} other rounds",
        out["support_names"], total.gradient_rounds, total.loss_rounds, total.other_rounds
    );
    Ok(())
}

#[derive(Serialize)]
struct StageBench {
    stage: usize,
    comm: CommStats,
    wall_time: f64,
}

#[derive(Serialize)]
struct BackendBench {
    backend: Backend,
    stages: Vec<StageBench>,
    total: CommStats,
    wall_time: f64,
    beta: Vec<f64>,
}

fn bench_backend(cfg: &ExperimentConfig, backend: Backend) -> Result<BackendBench, CliError> {
    let sc = make_scenario(&cfg.scenario, 0)?;
    let fit = cfg.fit;
    let start = Instant::now();
    let mut cluster = Cluster::build(backend, &sc.shards, fit.kernel, fit.master_policy)?;
    let init = fit_local_init(cluster.master(), &fit)?;
    let mut stages = Vec::new();
    let mut before = cluster.stats();
    let t = Instant::now();
    let mut beta = dcrr_stage1(&mut cluster, &fit, init.view())?.beta;
    stages.push(StageBench { stage: 1, comm: cluster.stats().since(&before), wall_time: t.elapsed().as_secs_f64() });
    for stage in 2..=fit.stages {
        before = cluster.stats();
        let t = Instant::now();
        beta = dcrr_refine(&mut cluster, &fit, beta.view())?.beta;
        stages.push(StageBench { stage, comm: cluster.stats().since(&before), wall_time: t.elapsed().as_secs_f64() });
    }
    Ok(BackendBench {
        backend,
        stages,
        total: cluster.stats(),
        wall_time: start.elapsed().as_secs_f64(),
        beta: beta.to_vec(),
    })
}

fn cmd_bench(args: &ExperimentArgs) -> Result<(), CliError> {
    let cfg = load_experiment(args)?;
    let runs = [bench_backend(&cfg, Backend::InProcess)?, bench_backend(&cfg, Backend::Socket)?];
    let same_beta = runs[0].beta.iter().zip(&runs[1].beta).all(|(a, b)| a.to_bits() == b.to_bits());
    let same_comm = runs[0].total == runs[1].total;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    write_json(
        &args.out.join("bench.json"),
        &json!({
            "config_hash": cfg.hash(),
            "seed": cfg.scenario.seed,
            "m": cfg.scenario.m,
            "p": cfg.scenario.p,
            "identical_beta": same_beta,
            "identical_comm": same_comm,
            "runs": runs,
        }),
    )?;
    println!(
        "{:<11} {:>5} {:>9} {:>9} {:>12} {:>12} {:>9}",
        "backend", "stage", "gradient", "loss", "bytes_down", "bytes_up", "seconds"
    );
    for run in &runs {
        for s in &run.stages {
            println!(
                "{:<11} {:>5} {:>9} {:>9} {:>12} {:>12} {:>9.3}",
                format!("{:?}", run.backend),
                s.stage,
                s.comm.gradient_rounds,
                s.comm.loss_rounds,
                s.comm.bytes_down,
                s.comm.bytes_up,
                s.wall_time
            );
        }
    }
    println!("config_hash {} seed {}", cfg.hash(), cfg.scenario.seed);
    if !(same_beta && same_comm) {
        return Err(CliError::Runtime("backends disagree".into()));
    }
    Ok(())
}

fn cmd_serve(args: &ServeArgs) -> Result<(), CliError> {
    let cfg: FitConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    let (header, rows) = data::read_csv(&args.data)?;
    let block = data::to_block(&rows, header.len())?;
    let worker = SiteWorker::new(args.site_id, block, cfg.kernel)?;
    let listener =
        TcpListener::bind(&args.listen).map_err(|e| CliError::Runtime(format!("bind {}: {e}", args.listen)))?;
    info!("site {} serving {} rows on {}", args.site_id, worker.n(), args.listen);
    serve_forever(listener, worker)?;
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<(), CliError> {
    let mut cfg = experiment_config(&args.config, &args.preset)?;
    if let Some(seed) = args.seed {
        cfg.scenario.seed = seed;
    }
    cfg.scenario.validate()?;
    let sc = make_scenario(&cfg.scenario, args.replicate)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let features: Vec<String> = (1..=cfg.scenario.p).map(|j| format!("x{j}")).collect();
    for (k, shard) in sc.shards.iter().enumerate() {
        data::write_block(&args.out.join(format!("site_{k:03}.csv")), &features, shard)?;
    }
    println!("wrote {} site files to {}", sc.shards.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dcrr: {e}");
            ExitCode::from(e.code())
        }
    }
}
