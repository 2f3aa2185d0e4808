//! Distributed HBIC and λ-path search.
//!
//! ```text
//! DHBIC(λ) = log( Σ_m w_m L_m(β̂_λ) ) + |supp β̂_λ| · C_N · log p / n
//! ```
//!
//! with row-count weights `w_m`, `C_N = log log N` and `n` the master's row
//! count. On a single block this is the ordinary HBIC.

use log::{debug, warn};
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalty::support;
use crate::prox::{solve_weighted_l1, SmoothOracle, SolveConfig};
use crate::rank_loss::{crr_loss, DataBlock};
use crate::smoothing::KernelSpec;
use crate::transport::Cluster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub grid_size: usize,
    pub grid_min_ratio: f64,
    /// Defaults to `log log N`.
    pub c_n: Option<f64>,
    /// Defaults to `min(n, 2√p, 50)`.
    pub k_n: Option<usize>,
    /// End the path at the first fit with more than `K_N` nonzeros instead
    /// of fitting and scoring the rest of the grid.
    pub stop_at_cap: bool,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self { grid_size: 50, grid_min_ratio: 0.01, c_n: None, k_n: None, stop_at_cap: true }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::InvalidConfig(format!("grid_size must be >= 2, got {}", self.grid_size)));
        }
        if !(self.grid_min_ratio > 0.0 && self.grid_min_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "grid_min_ratio must lie in (0, 1), got {}",
                self.grid_min_ratio
            )));
        }
        if let Some(c) = self.c_n {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidConfig(format!("C_N must be > 0, got {c}")));
            }
        }
        if self.k_n == Some(0) {
            return Err(Error::InvalidConfig("K_N must be >= 1".into()));
        }
        Ok(())
    }

    pub fn c_n_for(&self, total_n: usize) -> f64 {
        self.c_n.unwrap_or_else(|| (total_n as f64).ln().ln().max(f64::MIN_POSITIVE))
    }

    pub fn k_n_for(&self, n: usize, p: usize) -> usize {
        self.k_n.unwrap_or_else(|| {
            let cap = (2.0 * (p as f64).sqrt()).floor() as usize;
            n.min(cap).clamp(1, 50)
        })
    }
}

/// Where fitted losses come from: a cluster (one loss round per query) or a
/// block held locally.
pub trait LossSource {
    fn mean_loss(&mut self, beta: ArrayView1<f64>) -> Result<f64>;
    /// `n` in the support penalty.
    fn penalty_n(&self) -> usize;
    /// `N` in `C_N = log log N`.
    fn total_n(&self) -> usize;
    fn p(&self) -> usize;
}

impl LossSource for Cluster {
    fn mean_loss(&mut self, beta: ArrayView1<f64>) -> Result<f64> {
        Cluster::mean_loss(self, beta)
    }

    fn penalty_n(&self) -> usize {
        self.master().n()
    }

    fn total_n(&self) -> usize {
        Cluster::total_n(self)
    }

    fn p(&self) -> usize {
        Cluster::p(self)
    }
}

pub struct LocalLoss<'a> {
    pub block: &'a DataBlock,
    pub kernel: KernelSpec,
}

impl LossSource for LocalLoss<'_> {
    fn mean_loss(&mut self, beta: ArrayView1<f64>) -> Result<f64> {
        crr_loss(self.block, beta, &self.kernel)
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

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    pub lambdas: Vec<f64>,
    /// `λ_max` was zero or not finite; the grid is the single point `0`.
    pub degenerate: bool,
}

/// Log-spaced grid from `lambda_max` down to `grid_min_ratio · lambda_max`.
pub fn lambda_grid(lambda_max: f64, sel: &SelectConfig) -> Result<LambdaGrid> {
    sel.validate()?;
    if !(lambda_max.is_finite() && lambda_max > 0.0) {
        return Ok(LambdaGrid { lambdas: vec![0.0], degenerate: true });
    }
    let k = sel.grid_size;
    let lambdas = (0..k)
        .map(|i| {
            if i == 0 {
                lambda_max
            } else if i == k - 1 {
                lambda_max * sel.grid_min_ratio
            } else {
                lambda_max * sel.grid_min_ratio.powf(i as f64 / (k - 1) as f64)
            }
        })
        .collect();
    Ok(LambdaGrid { lambdas, degenerate: false })
}

/// `‖∇f(0)‖_∞`: the smallest uniform ℓ1 weight whose solution is zero.
pub fn lambda_max(oracle: &dyn SmoothOracle) -> Result<f64> {
    let g = oracle.grad(Array1::zeros(oracle.dim()).view())?;
    Ok(g.iter().fold(0.0, |m: f64, v| m.max(v.abs())))
}

/// Score from an already computed mean loss.
pub fn hbic_from_loss(mean_loss: f64, support_size: usize, c_n: f64, p: usize, n: usize) -> Result<f64> {
    if !(mean_loss > 0.0 && mean_loss.is_finite()) {
        return Err(Error::Degenerate(format!("mean loss {mean_loss} is not positive")));
    }
    Ok(mean_loss.ln() + support_size as f64 * c_n * (p as f64).ln() / n as f64)
}

/// One loss round at `beta_hat` and its DHBIC value.
pub fn dhbic_score(source: &mut dyn LossSource, beta_hat: ArrayView1<f64>, c_n: f64) -> Result<f64> {
    let loss = source.mean_loss(beta_hat)?;
    hbic_from_loss(loss, support(beta_hat).len(), c_n, source.p(), source.penalty_n())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub support_size: usize,
    pub score: f64,
    pub iters: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub lambda: f64,
    pub beta: Array1<f64>,
    pub score: f64,
    /// Every grid point exceeded `K_N`; the largest-λ fit was returned.
    pub capped: bool,
    pub degenerate_grid: bool,
    pub path: Vec<PathPoint>,
    /// Composite objective trace of the selected solve.
    pub trace: Vec<f64>,
}

/// Fit `oracle + Σ_j w_j(λ)|β_j|` along the grid (warm-started from the
/// largest λ), score each fit by DHBIC and return the minimiser among fits
/// with at most `K_N` nonzeros. Ties prefer the smaller support, then the
/// larger λ. Issues exactly one loss query per fitted grid point; with
/// `stop_at_cap` the path ends after the first fit above `K_N`.
///
/// Past that point the fits are inadmissible anyway, and for a surrogate
/// with `p` above the master's `n` the objective is unbounded below at small
/// λ, so the solver would only run to `max_iter` there.
pub fn select_lambda(
    source: &mut dyn LossSource,
    oracle: &dyn SmoothOracle,
    weights_for: &dyn Fn(f64) -> Array1<f64>,
    init: ArrayView1<f64>,
    grid: &LambdaGrid,
    sel: &SelectConfig,
    solver: &SolveConfig,
) -> Result<Selection> {
    if grid.lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty λ grid".into()));
    }
    let c_n = sel.c_n_for(source.total_n());
    let k_n = sel.k_n_for(source.penalty_n(), source.p());
    let mut warm = init.to_owned();
    let mut path = Vec::with_capacity(grid.lambdas.len());
    // (score, size, grid index, β, objective trace)
    type Best = (f64, usize, usize, Array1<f64>, Vec<f64>);
    let mut best: Option<Best> = None;
    let mut first: Option<(Array1<f64>, f64, Vec<f64>)> = None;
    let mut prev_size = 0;
    for (idx, &lam) in grid.lambdas.iter().enumerate() {
        let w = weights_for(lam);
        let out = solve_weighted_l1(oracle, &w, warm.view(), solver)?;
        if !out.converged {
            debug!("λ = {lam:.4e}: solver stopped at max_iter");
        }
        let size = support(out.beta.view()).len();
        let score = dhbic_score(source, out.beta.view(), c_n)?;
        if idx > 0 && size < prev_size {
            debug!("λ path not monotone in sparsity at λ = {lam:.4e} ({prev_size} -> {size})");
        }
        prev_size = size;
        path.push(PathPoint { lambda: lam, support_size: size, score, iters: out.iters, converged: out.converged });
        if first.is_none() {
            first = Some((out.beta.clone(), score, out.trace.clone()));
        }
        if size <= k_n {
            let better = match &best {
                None => true,
                Some((s, sz, _, _, _)) => score < *s || (score == *s && size < *sz),
            };
            if better {
                best = Some((score, size, idx, out.beta.clone(), out.trace.clone()));
            }
        }
        warm = out.beta;
        if sel.stop_at_cap && size > k_n {
            break;
        }
    }
    match best {
        Some((score, _, idx, beta, trace)) => Ok(Selection {
            lambda: grid.lambdas[idx],
            beta,
            score,
            capped: false,
            degenerate_grid: grid.degenerate,
            path,
            trace,
        }),
        None => {
            warn!("every λ on the grid selects more than K_N = {k_n} variables; keeping the largest λ");
            let (beta, score, trace) = first.expect("grid is nonempty");
            Ok(Selection {
                lambda: grid.lambdas[0],
                beta,
                score,
                capped: true,
                degenerate_grid: grid.degenerate,
                path,
                trace,
            })
        }
    }
}
