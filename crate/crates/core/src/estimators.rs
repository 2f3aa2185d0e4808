//! The two-stage distributed estimator and its baselines.
//!
//! [`fit_dcrr`] runs:
//!
//! 1. a local ℓ1 fit on the master block (no communication), λ by HBIC;
//! 2. `k1` rounds of: gradient round at the current iterate, then an ℓ1
//!    surrogate solve. λ is chosen by DHBIC in the first round and held;
//! 3. `T − 1` refinements: one gradient round at the previous stage's
//!    estimate, then a surrogate solve with LLA weights `p'_λ(|β_prev|)`,
//!    λ reselected by DHBIC.
//!
//! Centralized CRR is the same machinery on one block with a zero
//! correction. The baselines (divide-and-conquer averaging, oracle fits)
//! reuse the same pieces.

use log::debug;
use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalty::{lla_weights, support, PenaltyKind, PenaltySpec};
use crate::prox::{lipschitz_bound, solve_restricted, solve_weighted_l1, SolveConfig, SurrogateOracle};
use crate::rank_loss::{CorrectionVector, DataBlock};
use crate::select::{lambda_grid, lambda_max, select_lambda, LocalLoss, LossSource, SelectConfig, Selection};
use crate::smoothing::KernelSpec;
use crate::transport::{Cluster, CommStats, GradientMessage, MasterPolicy, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaRule {
    /// DHBIC over a λ path at every stage.
    #[default]
    Dhbic,
    /// `penalty.lambda` everywhere.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub kernel: KernelSpec,
    /// Refinement penalty. Its `lambda` is used only with [`LambdaRule::Fixed`].
    pub penalty: PenaltySpec,
    pub k1: usize,
    /// Total stages `T`; `T = 1` stops after the ℓ1 stage.
    pub stages: usize,
    pub solver: SolveConfig,
    pub master_policy: MasterPolicy,
    pub select: SelectConfig,
    pub lambda_rule: LambdaRule,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::default(),
            penalty: PenaltySpec::scad(0.0),
            k1: 8,
            stages: 2,
            solver: SolveConfig::default(),
            master_policy: MasterPolicy::Largest,
            select: SelectConfig::default(),
            lambda_rule: LambdaRule::Dhbic,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.penalty.validate()?;
        self.solver.validate()?;
        self.select.validate()?;
        if self.k1 < 1 {
            return Err(Error::InvalidConfig("k1 must be >= 1".into()));
        }
        if self.stages < 1 {
            return Err(Error::InvalidConfig("stages (T) must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub beta: Array1<f64>,
    pub support: Vec<usize>,
    pub comm: CommStats,
    /// Composite surrogate objective at the end of every solve round.
    pub objective_trace: Vec<f64>,
    /// Estimate after the ℓ1 stage and after each refinement.
    pub stage_betas: Vec<Array1<f64>>,
    /// Cumulative communication at the end of each stage.
    pub stage_comm: Vec<CommStats>,
    pub lambdas: Vec<f64>,
    /// Per stage, the λ-grid points scored by DHBIC (one loss round each).
    pub path_lengths: Vec<usize>,
    pub init_beta: Array1<f64>,
    /// Some λ search hit the support cap at every grid point.
    pub capped: bool,
    /// Every kept solve reached its tolerance.
    pub converged: bool,
}

impl FitResult {
    fn from_stages(
        init_beta: Array1<f64>,
        stage_betas: Vec<Array1<f64>>,
        stage_comm: Vec<CommStats>,
        lambdas: Vec<f64>,
        objective_trace: Vec<f64>,
        capped: bool,
        converged: bool,
    ) -> Self {
        let beta = stage_betas.last().expect("at least one stage").clone();
        Self {
            support: support(beta.view()),
            comm: *stage_comm.last().expect("one stats entry per stage"),
            beta,
            objective_trace,
            stage_betas,
            stage_comm,
            lambdas,
            path_lengths: Vec::new(),
            init_beta,
            capped,
            converged,
        }
    }

    /// The result a run with `stages` total stages would have returned.
    pub fn truncated(&self, stages: usize) -> Result<FitResult> {
        if stages == 0 || stages > self.stage_betas.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate a {}-stage fit to {stages} stages",
                self.stage_betas.len()
            )));
        }
        let rounds_kept = self.objective_trace.len().saturating_sub(self.stage_betas.len() - stages);
        let mut out = Self::from_stages(
            self.init_beta.clone(),
            self.stage_betas[..stages].to_vec(),
            self.stage_comm[..stages].to_vec(),
            self.lambdas[..stages.min(self.lambdas.len())].to_vec(),
            self.objective_trace[..rounds_kept].to_vec(),
            self.capped,
            self.converged,
        );
        out.path_lengths = self.path_lengths[..stages.min(self.path_lengths.len())].to_vec();
        Ok(out)
    }
}

/// What the two-stage driver needs from its environment.
pub trait Rounds: LossSource {
    fn master(&self) -> &DataBlock;
    fn correction_at(&mut self, beta: ArrayView1<f64>) -> Result<CorrectionVector>;
    fn comm(&self) -> CommStats;
}

impl Rounds for Cluster {
    fn master(&self) -> &DataBlock {
        Cluster::master(self)
    }

    fn correction_at(&mut self, beta: ArrayView1<f64>) -> Result<CorrectionVector> {
        Cluster::correction_at(self, beta)
    }

    fn comm(&self) -> CommStats {
        self.stats()
    }
}

/// A single block with no sites: the correction is always zero and nothing
/// is communicated.
pub struct SingleBlock<'a> {
    pub block: &'a DataBlock,
    pub kernel: KernelSpec,
}

impl LossSource for SingleBlock<'_> {
    fn mean_loss(&mut self, beta: ArrayView1<f64>) -> Result<f64> {
        LocalLoss { block: self.block, kernel: self.kernel }.mean_loss(beta)
    }

    fn penalty_n(&self) -> usize {
        self.block.n()
    }

    fn total_n(&self) -> usize {
        self.block.n()
    }

    fn p(&self) -> usize {
        self.block.p()
    }
}

impl Rounds for SingleBlock<'_> {
    fn master(&self) -> &DataBlock {
        self.block
    }

    fn correction_at(&mut self, beta: ArrayView1<f64>) -> Result<CorrectionVector> {
        if beta.len() != self.block.p() {
            return Err(Error::DimensionMismatch { expected: self.block.p(), got: beta.len() });
        }
        Ok(CorrectionVector::zeros(self.block.p()))
    }

    fn comm(&self) -> CommStats {
        CommStats::default()
    }
}

/// Outcome of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub beta: Array1<f64>,
    pub lambda: f64,
    /// Composite objective at the end of each round in the stage.
    pub trace: Vec<f64>,
    pub capped: bool,
    pub converged: bool,
    /// Grid points fitted and scored, one loss round each.
    pub scored: usize,
}

struct Ctx {
    master: DataBlock,
    lipschitz: f64,
}

impl Ctx {
    fn new(rounds: &dyn Rounds, kernel: &KernelSpec) -> Self {
        let master = rounds.master().clone();
        let lipschitz = lipschitz_bound(&master, kernel);
        Self { master, lipschitz }
    }

    fn oracle<'a>(&'a self, corr: &'a CorrectionVector, kernel: KernelSpec) -> SurrogateOracle<'a> {
        SurrogateOracle {
            master: &self.master,
            correction: corr,
            kernel,
            lipschitz: (self.lipschitz > 0.0).then_some(self.lipschitz),
        }
    }
}

fn selected_converged(s: &Selection) -> bool {
    s.path.iter().find(|pt| pt.lambda == s.lambda).is_none_or(|pt| pt.converged)
}

fn uniform(p: usize) -> impl Fn(f64) -> Array1<f64> {
    move |lam| Array1::from_elem(p, lam)
}

/// ℓ1-penalized CRR on the master block alone, λ by local HBIC.
pub fn fit_local_init(master: &DataBlock, cfg: &FitConfig) -> Result<Array1<f64>> {
    cfg.validate()?;
    let mut src = SingleBlock { block: master, kernel: cfg.kernel };
    let ctx = Ctx::new(&src, &cfg.kernel);
    let zero = CorrectionVector::zeros(master.p());
    let start = Array1::zeros(master.p());
    Ok(l1_solve(&mut src, &ctx, &zero, start.view(), cfg, None)?.beta)
}

/// ℓ1 surrogate solve: DHBIC over the path when `lambda` is `None`.
fn l1_solve(
    src: &mut dyn Rounds,
    ctx: &Ctx,
    corr: &CorrectionVector,
    warm: ArrayView1<f64>,
    cfg: &FitConfig,
    lambda: Option<f64>,
) -> Result<StageOutcome> {
    let p = ctx.master.p();
    let oracle = ctx.oracle(corr, cfg.kernel);
    let lambda = match (lambda, cfg.lambda_rule) {
        (Some(l), _) => l,
        (None, LambdaRule::Fixed) => cfg.penalty.lambda,
        (None, LambdaRule::Dhbic) => {
            let grid = lambda_grid(lambda_max(&oracle)?, &cfg.select)?;
            // the path starts at λ_max, whose solution is zero
            let zero = Array1::zeros(p);
            let s = select_lambda(src, &oracle, &uniform(p), zero.view(), &grid, &cfg.select, &cfg.solver)?;
            let converged = selected_converged(&s);
            return Ok(StageOutcome {
                trace: vec![*s.trace.last().expect("trace")],
                beta: s.beta,
                lambda: s.lambda,
                capped: s.capped,
                converged,
                scored: s.path.len(),
            });
        }
    };
    let out = solve_weighted_l1(&oracle, &Array1::from_elem(p, lambda), warm, &cfg.solver)?;
    Ok(StageOutcome {
        trace: vec![out.objective()],
        beta: out.beta,
        lambda,
        capped: false,
        converged: out.converged,
        scored: 0,
    })
}

/// `k1` rounds of the ℓ1 stage from `beta0`.
pub fn dcrr_stage1(rounds: &mut dyn Rounds, cfg: &FitConfig, beta0: ArrayView1<f64>) -> Result<StageOutcome> {
    cfg.validate()?;
    let ctx = Ctx::new(rounds, &cfg.kernel);
    stage1(rounds, &ctx, cfg, beta0)
}

fn stage1(rounds: &mut dyn Rounds, ctx: &Ctx, cfg: &FitConfig, beta0: ArrayView1<f64>) -> Result<StageOutcome> {
    if beta0.len() != ctx.master.p() {
        return Err(Error::DimensionMismatch { expected: ctx.master.p(), got: beta0.len() });
    }
    let mut beta = beta0.to_owned();
    let mut lambda = None;
    let mut trace = Vec::with_capacity(cfg.k1);
    let mut capped = false;
    let mut converged = true;
    let mut scored = 0;
    for k in 1..=cfg.k1 {
        let corr = rounds.correction_at(beta.view())?;
        let out = l1_solve(rounds, ctx, &corr, beta.view(), cfg, lambda)?;
        debug!("stage 1 round {k}: λ = {:.4e}, |supp| = {}", out.lambda, support(out.beta.view()).len());
        lambda = Some(out.lambda);
        trace.extend(out.trace);
        capped |= out.capped;
        converged &= out.converged;
        scored += out.scored;
        beta = out.beta;
    }
    Ok(StageOutcome { beta, lambda: lambda.expect("k1 >= 1"), trace, capped, converged, scored })
}

/// One LLA refinement from `beta_prev`.
pub fn dcrr_refine(rounds: &mut dyn Rounds, cfg: &FitConfig, beta_prev: ArrayView1<f64>) -> Result<StageOutcome> {
    cfg.validate()?;
    let ctx = Ctx::new(rounds, &cfg.kernel);
    refine(rounds, &ctx, cfg, beta_prev)
}

fn refine(rounds: &mut dyn Rounds, ctx: &Ctx, cfg: &FitConfig, beta_prev: ArrayView1<f64>) -> Result<StageOutcome> {
    let p = ctx.master.p();
    if beta_prev.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: beta_prev.len() });
    }
    let corr = rounds.correction_at(beta_prev)?;
    let oracle = ctx.oracle(&corr, cfg.kernel);
    let anchor = beta_prev.to_owned();
    let pen = cfg.penalty;
    let weights_for = move |lam: f64| lla_weights(&pen.with_lambda(lam), anchor.view());
    match cfg.lambda_rule {
        LambdaRule::Fixed => {
            let out = solve_weighted_l1(&oracle, &weights_for(pen.lambda), beta_prev, &cfg.solver)?;
            Ok(StageOutcome {
                trace: vec![out.objective()],
                beta: out.beta,
                lambda: pen.lambda,
                capped: false,
                converged: out.converged,
                scored: 0,
            })
        }
        LambdaRule::Dhbic => {
            let grid = lambda_grid(lambda_max(&oracle)?, &cfg.select)?;
            let s = select_lambda(rounds, &oracle, &weights_for, beta_prev, &grid, &cfg.select, &cfg.solver)?;
            let converged = selected_converged(&s);
            Ok(StageOutcome {
                trace: vec![*s.trace.last().expect("trace")],
                beta: s.beta,
                lambda: s.lambda,
                capped: s.capped,
                converged,
                scored: s.path.len(),
            })
        }
    }
}

fn two_stage(rounds: &mut dyn Rounds, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let start = rounds.comm();
    let ctx = Ctx::new(rounds, &cfg.kernel);
    let init = fit_local_init(&ctx.master, cfg)?;

    let s1 = stage1(rounds, &ctx, cfg, init.view())?;
    let mut trace = s1.trace;
    let mut capped = s1.capped;
    let mut converged = s1.converged;
    let mut lambdas = vec![s1.lambda];
    let mut path_lengths = vec![s1.scored];
    let mut stage_betas = vec![s1.beta];
    let mut stage_comm = vec![rounds.comm().since(&start)];
    if cfg.penalty.kind == PenaltyKind::L1 && cfg.stages > 1 {
        debug!("ℓ1 refinement stages repeat the ℓ1 stage with reselected λ");
    }
    for t in 2..=cfg.stages {
        let prev = stage_betas.last().expect("stage 1 ran").clone();
        let out = refine(rounds, &ctx, cfg, prev.view())?;
        debug!("stage {t}: λ = {:.4e}, |supp| = {}", out.lambda, support(out.beta.view()).len());
        trace.extend(out.trace);
        capped |= out.capped;
        converged &= out.converged;
        lambdas.push(out.lambda);
        path_lengths.push(out.scored);
        stage_betas.push(out.beta);
        stage_comm.push(rounds.comm().since(&start));
    }
    let mut res = FitResult::from_stages(init, stage_betas, stage_comm, lambdas, trace, capped, converged);
    res.path_lengths = path_lengths;
    Ok(res)
}

/// The two-stage distributed estimator.
pub fn fit_dcrr(cluster: &mut Cluster, cfg: &FitConfig) -> Result<FitResult> {
    if cluster.m() == 0 {
        return Err(Error::InvalidConfig("cluster has no sites".into()));
    }
    two_stage(cluster, cfg)
}

/// The same estimator on one pooled block: the U-statistic over all
/// `N(N−1)` pairs, no communication.
pub fn fit_crr_centralized(all: &DataBlock, cfg: &FitConfig) -> Result<FitResult> {
    two_stage(&mut SingleBlock { block: all, kernel: cfg.kernel }, cfg)
}

/// Every site fits alone (HBIC on its own data); coefficient vectors are
/// averaged with row-count weights, stage by stage. Reported as a single
/// round in which each site uploads one `p`-vector.
pub fn fit_dc_average(shards: &[DataBlock], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let first = shards.first().ok_or_else(|| Error::InvalidConfig("no sites to average".into()))?;
    let p = first.p();
    if let Some(b) = shards.iter().find(|b| b.p() != p) {
        return Err(Error::DimensionMismatch { expected: p, got: b.p() });
    }
    let fits: Vec<FitResult> = shards
        .par_iter()
        .enumerate()
        .map(|(m, b)| fit_crr_centralized(b, cfg).map_err(|e| Error::Site { site_id: m as u16, reason: e.to_string() }))
        .collect::<Result<_>>()?;
    let total: f64 = shards.iter().map(|b| b.n() as f64).sum();
    let stages = cfg.stages;
    let comm = CommStats {
        rounds: 1,
        other_rounds: 1,
        bytes_up: (shards.len() * GradientMessage::encoded_len(p, Purpose::GradientRequest)) as u64,
        ..CommStats::default()
    };
    let avg = |get: &dyn Fn(&FitResult) -> &Array1<f64>| {
        let mut out = Array1::<f64>::zeros(p);
        for (f, b) in fits.iter().zip(shards) {
            out.scaled_add(b.n() as f64 / total, get(f));
        }
        out
    };
    let stage_betas: Vec<Array1<f64>> = (0..stages).map(|t| avg(&|f| &f.stage_betas[t])).collect();
    let init = avg(&|f| &f.init_beta);
    let capped = fits.iter().any(|f| f.capped);
    let converged = fits.iter().all(|f| f.converged);
    Ok(FitResult::from_stages(init, stage_betas, vec![comm; stages], Vec::new(), Vec::new(), capped, converged))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    Centralized,
    Distributed,
}

fn check_support(true_support: &[usize], p: usize) -> Result<Vec<usize>> {
    let mut s = true_support.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.is_empty() {
        return Err(Error::InvalidArgument("oracle support is empty".into()));
    }
    if let Some(&j) = s.iter().find(|&&j| j >= p) {
        return Err(Error::InvalidArgument(format!("oracle support index {j} out of range for p = {p}")));
    }
    Ok(s)
}

/// Unpenalized CRR on the pooled block restricted to `true_support`.
pub fn fit_oracle_centralized(all: &DataBlock, true_support: &[usize], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let a = check_support(true_support, all.p())?;
    let src = SingleBlock { block: all, kernel: cfg.kernel };
    let ctx = Ctx::new(&src, &cfg.kernel);
    let zero = CorrectionVector::zeros(all.p());
    let out = solve_restricted(&ctx.oracle(&zero, cfg.kernel), &a, Array1::zeros(all.p()).view(), &cfg.solver)?;
    Ok(FitResult::from_stages(
        Array1::zeros(all.p()),
        vec![out.beta.clone()],
        vec![CommStats::default()],
        Vec::new(),
        vec![out.objective()],
        false,
        out.converged,
    ))
}

/// Restricted surrogate iterations: start from the master's restricted fit,
/// then `k1` rounds for the first stage and one round per further stage, so
/// the gradient-round budget equals the two-stage fit with the same `T`.
pub fn fit_oracle_distributed(cluster: &mut Cluster, true_support: &[usize], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let p = cluster.p();
    let a = check_support(true_support, p)?;
    let start = cluster.stats();
    let ctx = Ctx::new(cluster, &cfg.kernel);
    let zero = CorrectionVector::zeros(p);
    let init = solve_restricted(&ctx.oracle(&zero, cfg.kernel), &a, Array1::zeros(p).view(), &cfg.solver)?;
    let mut beta = init.beta.clone();
    let mut converged = init.converged;
    let mut trace = Vec::new();
    let mut stage_betas = Vec::with_capacity(cfg.stages);
    let mut stage_comm = Vec::with_capacity(cfg.stages);
    let total_rounds = cfg.k1 + cfg.stages - 1;
    for r in 1..=total_rounds {
        let corr = cluster.correction_at(beta.view())?;
        let out = solve_restricted(&ctx.oracle(&corr, cfg.kernel), &a, beta.view(), &cfg.solver)?;
        converged &= out.converged;
        trace.push(out.objective());
        beta = out.beta;
        if r >= cfg.k1 {
            stage_betas.push(beta.clone());
            stage_comm.push(cluster.stats().since(&start));
        }
    }
    Ok(FitResult::from_stages(init.beta, stage_betas, stage_comm, Vec::new(), trace, false, converged))
}

/// One distributed oracle step anchored at someone else's iterate: a
/// gradient round at `anchor`, then the unpenalized surrogate minimized over
/// `true_support`. With `anchor` the previous DCRR stage this is the oracle
/// that the next DCRR-SCAD stage should reproduce exactly.
pub fn oracle_step(
    cluster: &mut Cluster,
    anchor: ArrayView1<f64>,
    true_support: &[usize],
    cfg: &FitConfig,
) -> Result<Array1<f64>> {
    cfg.validate()?;
    let a = check_support(true_support, cluster.p())?;
    let ctx = Ctx::new(cluster, &cfg.kernel);
    let corr = cluster.correction_at(anchor)?;
    Ok(solve_restricted(&ctx.oracle(&corr, cfg.kernel), &a, anchor, &cfg.solver)?.beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rank_loss::crr_grad;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, p: usize, beta: &[f64], seed: u64) -> DataBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.7..1.7));
        let b = Array1::from_shape_fn(p, |j| beta.get(j).copied().unwrap_or(0.0));
        let e = Array1::from_shape_fn(n, |_| rng.random_range(-0.8..0.8));
        DataBlock::new(x.clone(), x.dot(&b) + e).unwrap()
    }

    fn small_cfg(stages: usize) -> FitConfig {
        FitConfig { k1: 3, stages, select: SelectConfig { grid_size: 12, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        assert!(FitConfig { k1: 0, ..Default::default() }.validate().is_err());
        assert!(FitConfig { stages: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn null_model_with_strong_lambda_is_zero() {
        let b = toy(40, 6, &[], 1);
        let cfg = FitConfig { penalty: PenaltySpec::l1(10.0), lambda_rule: LambdaRule::Fixed, ..small_cfg(1) };
        assert!(fit_local_init(&b, &cfg).unwrap().iter().all(|v| *v == 0.0));
        let mut c = Cluster::in_process(&[b.clone(), toy(40, 6, &[], 2)], cfg.kernel, MasterPolicy::Largest).unwrap();
        let out = dcrr_stage1(&mut c, &cfg, Array1::from_elem(6, 0.3).view()).unwrap();
        assert!(out.beta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_site_cluster_matches_centralized_bitwise() {
        let b = toy(50, 8, &[1.5, -1.0, 1.0], 7);
        let cfg = small_cfg(3);
        let mut c = Cluster::in_process(std::slice::from_ref(&b), cfg.kernel, MasterPolicy::Largest).unwrap();
        let d = fit_dcrr(&mut c, &cfg).unwrap();
        let z = fit_crr_centralized(&b, &cfg).unwrap();
        assert_eq!(d.stage_betas, z.stage_betas);
        assert_eq!(d.lambdas, z.lambdas);
        // round 1 of stage 1 on one site is the local initial fit itself
        let cfg1 = FitConfig { k1: 1, stages: 1, ..cfg };
        let s1 = fit_crr_centralized(&b, &cfg1).unwrap();
        assert_eq!(s1.beta, fit_local_init(&b, &cfg1).unwrap());
    }

    #[test]
    fn l1_refinement_equals_one_more_stage1_round() {
        let shards = vec![toy(40, 5, &[1.0, 1.0], 3), toy(40, 5, &[1.0, 1.0], 4)];
        let cfg = FitConfig { penalty: PenaltySpec::l1(0.05), lambda_rule: LambdaRule::Fixed, ..small_cfg(2) };
        let beta_prev = Array1::from(vec![0.8, 0.9, 0.0, 0.1, 0.0]);
        let mut c1 = Cluster::in_process(&shards, cfg.kernel, MasterPolicy::Largest).unwrap();
        let r = dcrr_refine(&mut c1, &cfg, beta_prev.view()).unwrap();
        let mut c2 = Cluster::in_process(&shards, cfg.kernel, MasterPolicy::Largest).unwrap();
        let s = dcrr_stage1(&mut c2, &FitConfig { k1: 1, ..cfg }, beta_prev.view()).unwrap();
        assert_eq!(r.beta, s.beta);
    }

    #[test]
    fn scad_refinement_leaves_large_coefficients_unpenalized() {
        let shards = vec![toy(60, 4, &[2.0, -2.0], 5), toy(60, 4, &[2.0, -2.0], 6)];
        let lam = 0.05;
        let cfg = FitConfig { penalty: PenaltySpec::scad(lam), lambda_rule: LambdaRule::Fixed, ..small_cfg(2) };
        let beta_prev = Array1::from(vec![2.0, -2.0, 0.0, 0.0]);
        let mut c = Cluster::in_process(&shards, cfg.kernel, MasterPolicy::Largest).unwrap();
        let r = dcrr_refine(&mut c, &cfg, beta_prev.view()).unwrap();
        // optimality: zero surrogate gradient on the large coordinates
        let mut c2 = Cluster::in_process(&shards, cfg.kernel, MasterPolicy::Largest).unwrap();
        let corr = c2.correction_at(beta_prev.view()).unwrap();
        let g = crr_grad(c2.master(), r.beta.view(), &cfg.kernel).unwrap() - &corr.g;
        assert!(g[0].abs() < 1e-5 && g[1].abs() < 1e-5, "{g}");
        for j in 2..4 {
            if r.beta[j] == 0.0 {
                assert!(g[j].abs() <= lam + 1e-6);
            }
        }
    }

    #[test]
    fn tiny_lambda_matches_unpenalized_surrogate() {
        let shards = vec![toy(30, 3, &[1.0, -0.5, 0.25], 8), toy(30, 3, &[1.0, -0.5, 0.25], 9)];
        let cfg = FitConfig { penalty: PenaltySpec::l1(0.0), lambda_rule: LambdaRule::Fixed, ..small_cfg(1) };
        let beta0 = Array1::from(vec![0.5, 0.0, 0.0]);
        let mut c = Cluster::in_process(&shards, cfg.kernel, MasterPolicy::Largest).unwrap();
        let s = dcrr_stage1(&mut c, &FitConfig { k1: 1, ..cfg }, beta0.view()).unwrap();
        let mut c2 = Cluster::in_process(&shards, cfg.kernel, MasterPolicy::Largest).unwrap();
        let corr = c2.correction_at(beta0.view()).unwrap();
        let master = c2.master().clone();
        let oracle = SurrogateOracle { master: &master, correction: &corr, kernel: cfg.kernel, lipschitz: None };
        let un = solve_restricted(&oracle, &[0, 1, 2], beta0.view(), &cfg.solver).unwrap();
        let diff = (&s.beta - &un.beta).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn fit_records_stages_and_rounds() {
        let shards: Vec<DataBlock> = (0..3).map(|m| toy(40, 10, &[1.5, 1.5, 1.5], 20 + m)).collect();
        let cfg = small_cfg(3);
        let mut c = Cluster::in_process(&shards, cfg.kernel, MasterPolicy::Largest).unwrap();
        let f = fit_dcrr(&mut c, &cfg).unwrap();
        assert_eq!(f.stage_betas.len(), 3);
        assert_eq!(f.lambdas.len(), 3);
        assert_eq!(f.comm.gradient_rounds, 3 + 2);
        assert_eq!(f.path_lengths.len(), 3);
        assert!(f.path_lengths.iter().all(|&k| (1..=12).contains(&k)));
        assert_eq!(f.comm.loss_rounds, f.path_lengths.iter().sum::<usize>() as u64);
        assert_eq!(f.objective_trace.len(), 3 + 2);
        assert_eq!(f.support, support(f.beta.view()));
        let t2 = f.truncated(2).unwrap();
        assert_eq!(t2.beta, f.stage_betas[1]);
        assert_eq!(t2.comm.gradient_rounds, 4);
        assert_eq!(t2.objective_trace.len(), 4);
        assert!(f.truncated(4).is_err());
        assert_eq!(&f.support[..3], &[0, 1, 2]);
    }

    #[test]
    fn site_order_does_not_matter() {
        let shards: Vec<DataBlock> = (0..3).map(|m| toy(30, 6, &[1.0, 1.0], 40 + m)).collect();
        let cfg = FitConfig { master_policy: MasterPolicy::Index(0), ..small_cfg(2) };
        let mut c = Cluster::in_process(&shards, cfg.kernel, cfg.master_policy).unwrap();
        let a = fit_dcrr(&mut c, &cfg).unwrap();
        let reordered = vec![shards[0].clone(), shards[2].clone(), shards[1].clone()];
        let mut c2 = Cluster::in_process(&reordered, cfg.kernel, cfg.master_policy).unwrap();
        let b = fit_dcrr(&mut c2, &cfg).unwrap();
        let diff = (&a.beta - &b.beta).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // the weighted mean is summed in a different order, so rounding may differ
        assert!(diff < 1e-9, "{diff}");
        assert_eq!(a.support, b.support);
    }

    #[test]
    fn response_shift_invariance() {
        let b = toy(40, 5, &[1.0, -1.0], 11);
        let shifted = DataBlock::new(b.x().clone(), b.y().mapv(|v| v + 123.0)).unwrap();
        let cfg = small_cfg(2);
        let f1 = fit_crr_centralized(&b, &cfg).unwrap();
        let f2 = fit_crr_centralized(&shifted, &cfg).unwrap();
        let diff = (&f1.beta - &f2.beta).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn dc_average_reductions() {
        let b = toy(40, 5, &[1.0, 1.0], 12);
        let cfg = small_cfg(2);
        let alone = fit_crr_centralized(&b, &cfg).unwrap();
        let one = fit_dc_average(std::slice::from_ref(&b), &cfg).unwrap();
        assert_eq!(one.beta, alone.beta);
        let three = fit_dc_average(&[b.clone(), b.clone(), b.clone()], &cfg).unwrap();
        let diff = (&three.beta - &alone.beta).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-15);
        assert_eq!(three.comm.rounds, 1);
    }

    #[test]
    fn oracle_reductions() {
        let b = toy(30, 3, &[1.0, -1.0, 0.5], 13);
        let cfg = small_cfg(2);
        let full = fit_oracle_centralized(&b, &[0, 1, 2], &cfg).unwrap();
        let mut src = SingleBlock { block: &b, kernel: cfg.kernel };
        let ctx = Ctx::new(&src, &cfg.kernel);
        let zero = CorrectionVector::zeros(3);
        let free =
            solve_weighted_l1(&ctx.oracle(&zero, cfg.kernel), &Array1::zeros(3), Array1::zeros(3).view(), &cfg.solver)
                .unwrap();
        let diff = (&full.beta - &free.beta).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-5, "{diff}");
        let _ = src.mean_loss(full.beta.view()).unwrap();

        let mut c = Cluster::in_process(std::slice::from_ref(&b), cfg.kernel, MasterPolicy::Largest).unwrap();
        let d = fit_oracle_distributed(&mut c, &[0, 2], &cfg).unwrap();
        let z = fit_oracle_centralized(&b, &[0, 2], &cfg).unwrap();
        let diff = (&d.beta - &z.beta).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "{diff}");
        assert_eq!(d.beta[1], 0.0);
        assert_eq!(d.comm.gradient_rounds as usize, cfg.k1 + cfg.stages - 1);
        assert!(fit_oracle_centralized(&b, &[], &cfg).is_err());
        assert!(fit_oracle_centralized(&b, &[5], &cfg).is_err());
    }
}
