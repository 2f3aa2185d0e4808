//! Simulated data, error laws, metrics, the Lemma-style variance diagnostic
//! and the Monte Carlo runner.
//!
//! Randomness comes from ChaCha8 keyed by the configured seed. Each
//! (replicate, purpose) pair reads its own ChaCha stream, so replicates are
//! independent of each other and of the order in which threads run them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Cauchy as CauchyPdf, Continuous, Normal as NormalPdf, StudentsT};

use crate::error::{Error, Result};
use crate::estimators::{
    fit_crr_centralized, fit_dc_average, fit_dcrr, fit_oracle_centralized, fit_oracle_distributed, FitConfig, FitResult,
};
use crate::penalty::{support, PenaltyKind, SUPPORT_TOL};
use crate::rank_loss::DataBlock;
use crate::smoothing::{conv_loss_d1, conv_loss_d2, KernelSpec};
use crate::transport::{Backend, Cluster};

const STREAM_DESIGN: u64 = 0;
const STREAM_ERRORS: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorLaw {
    Normal,
    /// `√2 · t(4)`. Its variance is 4, since `Var t(4) = 2`.
    ScaledT4,
    Cauchy,
}

fn default_rho() -> f64 {
    0.5
}

fn default_beta_star() -> Vec<f64> {
    vec![3f64.sqrt(); 3]
}

fn default_replicates() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Rows per site.
    pub n: usize,
    /// Number of sites.
    pub m: usize,
    pub p: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Leading coefficients of `β*`; the rest are zero. Empty gives the null model.
    #[serde(default = "default_beta_star")]
    pub beta_star: Vec<f64>,
    pub error: ErrorLaw,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidConfig(format!("n must be >= 2, got {}", self.n)));
        }
        if self.m < 1 {
            return Err(Error::InvalidConfig("m must be >= 1".into()));
        }
        if self.p < 1 {
            return Err(Error::InvalidConfig("p must be >= 1".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidConfig(format!("|rho| must be < 1, got {}", self.rho)));
        }
        if self.beta_star.len() > self.p {
            return Err(Error::InvalidConfig(format!(
                "beta_star has {} entries but p = {}",
                self.beta_star.len(),
                self.p
            )));
        }
        if self.beta_star.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidConfig("beta_star must be finite".into()));
        }
        if self.replicates < 1 {
            return Err(Error::InvalidConfig("replicates must be >= 1".into()));
        }
        Ok(())
    }

    pub fn beta_star_vec(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.p, |j| self.beta_star.get(j).copied().unwrap_or(0.0))
    }

    pub fn true_support(&self) -> Vec<usize> {
        support(self.beta_star_vec().view())
    }
}

fn stream(seed: u64, replicate: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((replicate << 8) | purpose);
    rng
}

fn design_from(rng: &mut impl Rng, n_total: usize, p: usize, rho: f64) -> Array2<f64> {
    let scale = (1.0 - rho * rho).sqrt();
    let mut x = Array2::zeros((n_total, p));
    for mut row in x.rows_mut() {
        let mut prev = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            prev = if j == 0 { z } else { rho * prev + scale * z };
            *v = prev;
        }
    }
    x
}

fn errors_from(rng: &mut impl Rng, law: ErrorLaw, n_total: usize) -> Array1<f64> {
    match law {
        ErrorLaw::Normal => Array1::from_shape_fn(n_total, |_| StandardNormal.sample(rng)),
        ErrorLaw::ScaledT4 => {
            let t = StudentT::new(4.0).expect("4 degrees of freedom");
            Array1::from_shape_fn(n_total, |_| 2f64.sqrt() * t.sample(rng))
        }
        ErrorLaw::Cauchy => {
            let c = Cauchy::new(0.0, 1.0).expect("unit scale");
            Array1::from_shape_fn(n_total, |_| c.sample(rng))
        }
    }
}

/// Rows i.i.d. `N(0, Σ)` with `Σ_ij = ρ^|i−j|`, via the AR(1) recursion.
pub fn gen_design(n_total: usize, p: usize, rho: f64, seed: u64) -> Result<Array2<f64>> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("|rho| must be < 1, got {rho}")));
    }
    Ok(design_from(&mut stream(seed, 0, STREAM_DESIGN), n_total, p, rho))
}

pub fn gen_errors(law: ErrorLaw, n_total: usize, seed: u64) -> Array1<f64> {
    errors_from(&mut stream(seed, 0, STREAM_ERRORS), law, n_total)
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub shards: Vec<DataBlock>,
    pub pooled: DataBlock,
    pub beta_star: Array1<f64>,
}

/// `N = nM` rows of `y = Xβ* + ε`, cut into `M` contiguous shards of `n`.
pub fn make_scenario(cfg: &ScenarioConfig, replicate: u64) -> Result<Scenario> {
    cfg.validate()?;
    let n_total = cfg.n * cfg.m;
    let x = design_from(&mut stream(cfg.seed, replicate, STREAM_DESIGN), n_total, cfg.p, cfg.rho);
    let e = errors_from(&mut stream(cfg.seed, replicate, STREAM_ERRORS), cfg.error, n_total);
    let beta_star = cfg.beta_star_vec();
    let y = x.dot(&beta_star) + e;
    let shards = (0..cfg.m)
        .map(|k| {
            let rows = k * cfg.n..(k + 1) * cfg.n;
            DataBlock::new(x.slice(ndarray::s![rows.clone(), ..]).to_owned(), y.slice(ndarray::s![rows]).to_owned())
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = DataBlock::new(x, y)?;
    Ok(Scenario { shards, pooled, beta_star })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l1_err: f64,
    pub l2_err: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub model_size: f64,
}

pub fn metrics(beta_hat: ArrayView1<f64>, beta_star: ArrayView1<f64>) -> Result<Metrics> {
    if beta_hat.len() != beta_star.len() {
        return Err(Error::DimensionMismatch { expected: beta_star.len(), got: beta_hat.len() });
    }
    let d = &beta_hat - &beta_star;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut size = 0;
    for (b, t) in beta_hat.iter().zip(beta_star.iter()) {
        let selected = b.abs() > SUPPORT_TOL;
        let truth = *t != 0.0;
        size += selected as usize;
        fp += (selected && !truth) as usize;
        fn_ += (!selected && truth) as usize;
    }
    Ok(Metrics {
        l1_err: d.iter().map(|v| v.abs()).sum(),
        l2_err: d.dot(&d).sqrt(),
        fp: fp as f64,
        fn_: fn_ as f64,
        model_size: size as f64,
    })
}

/// Plug-in `E[E{L_h'(e−e') | e}²] / E{L_h''(e−e')}²` from residuals.
pub fn tau2_diagnostic(residuals: &[f64], spec: &KernelSpec) -> Result<f64> {
    spec.validate()?;
    let n = residuals.len();
    if n < 3 {
        return Err(Error::TooFewRows(n));
    }
    let rows: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ei = residuals[i];
            let mut d1 = 0.0;
            let mut d2 = 0.0;
            for (j, &ej) in residuals.iter().enumerate() {
                if j != i {
                    d1 += conv_loss_d1(spec, ei - ej);
                    d2 += conv_loss_d2(spec, ei - ej);
                }
            }
            (d1, d2)
        })
        .collect();
    let nf = n as f64;
    let num = rows.iter().map(|(d1, _)| (d1 / (nf - 1.0)).powi(2)).sum::<f64>() / nf;
    let den = (rows.iter().map(|(_, d2)| d2).sum::<f64>() / (nf * (nf - 1.0))).powi(2);
    if den == 0.0 {
        return Err(Error::Degenerate("residuals are spread beyond the kernel support".into()));
    }
    Ok(num / den)
}

/// `∫ f²` for the error density.
pub fn density_sq_integral(law: ErrorLaw) -> f64 {
    match law {
        ErrorLaw::Normal => 1.0 / (2.0 * std::f64::consts::PI.sqrt()),
        ErrorLaw::Cauchy => 1.0 / (2.0 * std::f64::consts::PI),
        ErrorLaw::ScaledT4 => {
            // f(x) = g(x/√2)/√2 with g the t(4) density, so ∫f² = ∫g²/√2
            let t = StudentsT::new(0.0, 1.0, 4.0).expect("valid t(4)");
            simpson(|x| t.pdf(x).powi(2), -200.0, 200.0, 40_000) / 2f64.sqrt()
        }
    }
}

/// Density of the error law, for reference checks.
pub fn error_pdf(law: ErrorLaw, x: f64) -> f64 {
    match law {
        ErrorLaw::Normal => NormalPdf::new(0.0, 1.0).expect("unit normal").pdf(x),
        ErrorLaw::Cauchy => CauchyPdf::new(0.0, 1.0).expect("unit cauchy").pdf(x),
        ErrorLaw::ScaledT4 => StudentsT::new(0.0, 1.0, 4.0).expect("valid t(4)").pdf(x / 2f64.sqrt()) / 2f64.sqrt(),
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Efficiency of the smoothed estimator relative to the unsmoothed rank
/// estimator: `1 / (12 (∫f²)² τ²)`. Tends to 1 as `h → 0`.
pub fn are_diagnostic(tau2: f64, int_f2: f64) -> f64 {
    1.0 / (12.0 * int_f2 * int_f2 * tau2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    CrrLasso,
    CrrScad,
    DcrrLasso,
    DcrrScad(usize),
    DcrrOra(usize),
    CrrOra,
    DcCrrLasso,
    DcCrrScad,
}

impl Method {
    /// Table 2-4 menu.
    pub fn table_menu() -> Vec<Method> {
        vec![
            Method::CrrLasso,
            Method::CrrScad,
            Method::DcrrLasso,
            Method::DcrrScad(2),
            Method::DcrrScad(6),
            Method::CrrOra,
            Method::DcrrOra(2),
            Method::DcrrOra(6),
            Method::DcCrrLasso,
            Method::DcCrrScad,
        ]
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::CrrLasso => write!(f, "CRR-LASSO"),
            Method::CrrScad => write!(f, "CRR-SCAD"),
            Method::DcrrLasso => write!(f, "DCRR-LASSO"),
            Method::DcrrScad(t) => write!(f, "DCRR-SCAD(T={t})"),
            Method::DcrrOra(t) => write!(f, "DCRR-ORA(T={t})"),
            Method::CrrOra => write!(f, "CRR-ORA"),
            Method::DcCrrLasso => write!(f, "DC-CRR-LASSO"),
            Method::DcCrrScad => write!(f, "DC-CRR-SCAD"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let staged = |prefix: &str| -> Option<Result<usize>> {
            let rest = s.strip_prefix(prefix)?;
            let t = rest.strip_prefix("(T=")?.strip_suffix(')')?;
            Some(
                t.parse::<usize>()
                    .ok()
                    .filter(|t| *t >= 1)
                    .ok_or_else(|| Error::InvalidConfig(format!("bad stage count in method {s:?}"))),
            )
        };
        Ok(match s {
            "CRR-LASSO" => Method::CrrLasso,
            "CRR-SCAD" => Method::CrrScad,
            "DCRR-LASSO" => Method::DcrrLasso,
            "CRR-ORA" => Method::CrrOra,
            "DC-CRR-LASSO" => Method::DcCrrLasso,
            "DC-CRR-SCAD" => Method::DcCrrScad,
            _ => {
                if let Some(t) = staged("DCRR-SCAD") {
                    Method::DcrrScad(t?)
                } else if let Some(t) = staged("DCRR-ORA") {
                    Method::DcrrOra(t?)
                } else {
                    return Err(Error::InvalidConfig(format!("unknown method {s:?}")));
                }
            }
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_methods() -> Vec<Method> {
    Method::table_menu()
}

fn default_backend() -> Backend {
    Backend::InProcess
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default = "default_backend")]
    pub backend: Backend,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.fit.validate()?;
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("methods must not be empty".into()));
        }
        if self.fit.penalty.kind == PenaltyKind::L1 {
            return Err(Error::InvalidConfig("fit.penalty sets the refinement penalty and must be scad or mcp".into()));
        }
        let oracle = self.methods.iter().any(|m| matches!(m, Method::CrrOra | Method::DcrrOra(_)));
        if oracle && self.scenario.true_support().is_empty() {
            return Err(Error::InvalidConfig("oracle methods need a nonzero beta_star".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// SHA-256 hex digest of a value's JSON serialization.
pub fn config_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Gradient rounds.
    pub comm_rounds: u64,
    pub loss_rounds: u64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    /// Seconds; not part of the reproducible output.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRow {
    pub replicate: u64,
    pub method: Method,
    pub row: Option<MetricRow>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub metric: &'static str,
    pub mean: f64,
    pub se: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub summary: Vec<SummaryRow>,
    pub replicates: Vec<ReplicateRow>,
}

impl ExperimentReport {
    pub fn summary_of(&self, method: Method, metric: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.metric == metric)
    }

    pub fn rows_of(&self, method: Method) -> impl Iterator<Item = &ReplicateRow> {
        self.replicates.iter().filter(move |r| r.method == method)
    }
}

pub const METRIC_NAMES: [&str; 6] = ["l1_err", "l2_err", "fp", "fn", "model_size", "comm_rounds"];

fn metric_value(row: &MetricRow, name: &str) -> f64 {
    match name {
        "l1_err" => row.metrics.l1_err,
        "l2_err" => row.metrics.l2_err,
        "fp" => row.metrics.fp,
        "fn" => row.metrics.fn_,
        "model_size" => row.metrics.model_size,
        "comm_rounds" => row.comm_rounds as f64,
        _ => unreachable!("metric names are fixed"),
    }
}

/// Mean and `sd / √R` with the `R − 1` sample standard deviation.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let r = values.len();
    if r == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / r as f64;
    if r == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
    (mean, (var / r as f64).sqrt())
}

/// Shared fits behind the method menu: stage prefixes of one long fit
/// serve the shorter methods.
#[derive(Default)]
struct Plan {
    crr_stages: usize,
    dcrr_stages: usize,
    ora_stages: usize,
    crr_ora: bool,
    dc_stages: usize,
}

impl Plan {
    fn new(methods: &[Method]) -> Self {
        let mut p = Plan::default();
        for m in methods {
            match *m {
                Method::CrrLasso => p.crr_stages = p.crr_stages.max(1),
                Method::CrrScad => p.crr_stages = p.crr_stages.max(2),
                Method::DcrrLasso => p.dcrr_stages = p.dcrr_stages.max(1),
                Method::DcrrScad(t) => p.dcrr_stages = p.dcrr_stages.max(t),
                Method::DcrrOra(t) => p.ora_stages = p.ora_stages.max(t),
                Method::CrrOra => p.crr_ora = true,
                Method::DcCrrLasso => p.dc_stages = p.dc_stages.max(1),
                Method::DcCrrScad => p.dc_stages = p.dc_stages.max(2),
            }
        }
        p
    }
}

type Timed = std::result::Result<(FitResult, f64), String>;

fn timed(f: impl FnOnce() -> Result<FitResult>) -> Timed {
    let start = Instant::now();
    f().map(|r| (r, start.elapsed().as_secs_f64())).map_err(|e| e.to_string())
}

/// All fits for one replicate, keyed by method.
pub fn run_replicate(cfg: &ExperimentConfig, replicate: u64) -> Result<Vec<ReplicateRow>> {
    let sc = make_scenario(&cfg.scenario, replicate)?;
    let plan = Plan::new(&cfg.methods);
    let a = support(sc.beta_star.view());
    let fit = cfg.fit;
    let with_stages = |t: usize| FitConfig { stages: t, ..fit };

    let dcrr = |stages: usize| {
        timed(|| {
            let mut c = Cluster::build(cfg.backend, &sc.shards, fit.kernel, fit.master_policy)?;
            fit_dcrr(&mut c, &with_stages(stages))
        })
    };
    let dcrr_ora = |stages: usize| {
        timed(|| {
            let mut c = Cluster::build(cfg.backend, &sc.shards, fit.kernel, fit.master_policy)?;
            fit_oracle_distributed(&mut c, &a, &with_stages(stages))
        })
    };
    let crr = (plan.crr_stages > 0).then(|| timed(|| fit_crr_centralized(&sc.pooled, &with_stages(plan.crr_stages))));
    let dist = (plan.dcrr_stages > 0).then(|| dcrr(plan.dcrr_stages));
    let ora = (plan.ora_stages > 0).then(|| dcrr_ora(plan.ora_stages));
    let crr_ora = plan.crr_ora.then(|| timed(|| fit_oracle_centralized(&sc.pooled, &a, &fit)));
    let dc = (plan.dc_stages > 0).then(|| timed(|| fit_dc_average(&sc.shards, &with_stages(plan.dc_stages))));

    let pick = |shared: &Option<Timed>, stages: usize| -> std::result::Result<(FitResult, f64), String> {
        let (res, secs) = shared.as_ref().expect("planned").clone()?;
        Ok((res.truncated(stages).map_err(|e| e.to_string())?, secs))
    };

    let mut rows = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let got = match method {
            Method::CrrLasso => pick(&crr, 1),
            Method::CrrScad => pick(&crr, 2),
            Method::DcrrLasso => pick(&dist, 1),
            Method::DcrrScad(t) => pick(&dist, t),
            Method::DcrrOra(t) => pick(&ora, t),
            Method::CrrOra => pick(&crr_ora, 1),
            Method::DcCrrLasso => pick(&dc, 1),
            Method::DcCrrScad => pick(&dc, 2),
        };
        let row = got.and_then(|(res, secs)| {
            let m = metrics(res.beta.view(), sc.beta_star.view()).map_err(|e| e.to_string())?;
            Ok(MetricRow {
                metrics: m,
                comm_rounds: res.comm.gradient_rounds,
                loss_rounds: res.comm.loss_rounds,
                bytes_down: res.comm.bytes_down,
                bytes_up: res.comm.bytes_up,
                wall_time: secs,
            })
        });
        rows.push(match row {
            Ok(r) => ReplicateRow { replicate, method, row: Some(r), error: None },
            Err(e) => {
                warn!("replicate {replicate}, {method}: {e}");
                ReplicateRow { replicate, method, row: None, error: Some(e) }
            }
        });
    }
    Ok(rows)
}

/// Run every replicate (in parallel) and summarise.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let per_rep: Vec<Vec<ReplicateRow>> =
        (0..cfg.scenario.replicates as u64).into_par_iter().map(|r| run_replicate(cfg, r)).collect::<Result<_>>()?;
    let replicates: Vec<ReplicateRow> = per_rep.into_iter().flatten().collect();
    Ok(summarize(cfg, replicates))
}

pub fn summarize(cfg: &ExperimentConfig, replicates: Vec<ReplicateRow>) -> ExperimentReport {
    let mut by_method: BTreeMap<usize, (Vec<MetricRow>, usize)> = BTreeMap::new();
    for r in &replicates {
        let idx = cfg.methods.iter().position(|m| *m == r.method).expect("method from config");
        let slot = by_method.entry(idx).or_default();
        match &r.row {
            Some(row) => slot.0.push(*row),
            None => slot.1 += 1,
        }
    }
    let mut summary = Vec::new();
    for (idx, (rows, failures)) in by_method {
        for name in METRIC_NAMES {
            let vals: Vec<f64> = rows.iter().map(|r| metric_value(r, name)).collect();
            let (mean, se) = mean_se(&vals);
            summary.push(SummaryRow {
                method: cfg.methods[idx],
                metric: name,
                mean,
                se,
                replicates: rows.len(),
                failures,
            });
        }
    }
    ExperimentReport { config_hash: cfg.hash(), seed: cfg.scenario.seed, config: cfg.clone(), summary, replicates }
}

/// Writes `summary.csv`, `report.json` and `timing.json` into `out_dir`.
/// The first two depend only on the configuration.
pub fn write_report(report: &ExperimentReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let sc = &report.config.scenario;
    let mut w = csv::Writer::from_path(out_dir.join("summary.csv")).map_err(csv_err)?;
    w.write_record([
        "method",
        "metric",
        "mean",
        "se",
        "replicates",
        "failures",
        "n",
        "m",
        "p",
        "rho",
        "error",
        "seed",
        "config_hash",
    ])
    .map_err(csv_err)?;
    for r in &report.summary {
        w.write_record([
            r.method.to_string(),
            r.metric.to_string(),
            r.mean.to_string(),
            r.se.to_string(),
            r.replicates.to_string(),
            r.failures.to_string(),
            sc.n.to_string(),
            sc.m.to_string(),
            sc.p.to_string(),
            sc.rho.to_string(),
            format!("{:?}", sc.error),
            sc.seed.to_string(),
            report.config_hash.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    std::fs::write(out_dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    let timing: Vec<_> = report
        .replicates
        .iter()
        .map(|r| {
            serde_json::json!({
                "replicate": r.replicate,
                "method": r.method,
                "wall_time": r.row.map(|m| m.wall_time),
            })
        })
        .collect();
    std::fs::write(out_dir.join("timing.json"), serde_json::to_vec_pretty(&timing)?)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}
