//! Pairwise convoluted rank loss over a data block and the surrogate built
//! from a master block plus a gradient correction.
//!
//! With residuals `r_i = y_i - x_iᵀβ` the block loss is
//!
//! ```text
//! L(β) = 1/(n(n-1)) Σ_{i≠j} L_h(r_i - r_j)
//! ```
//!
//! Because `L_h'` is odd the gradient regroups into `-2/(n(n-1)) Σ_i c_i x_i`
//! with `c_i = Σ_{j≠i} L_h'(r_i - r_j)`, so one evaluation costs `O(n² + np)`.
//!
//! For the Epanechnikov kernel `L_h(u) = |u|` once `|u| ≥ h`, so residuals are
//! sorted and only pairs closer than `h` go through the polynomial; the rest
//! come from suffix sums. That costs `O(n log n + near pairs)`.
//! The Gaussian kernel uses the plain double loop, with rows accumulated in
//! ascending `j` and combined in ascending `i`; rows may run on several
//! threads without changing the bit pattern.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::smoothing::{conv_loss, conv_loss_d1, KernelKind, KernelSpec};

/// Rows at or above this count are processed on the rayon pool.
const PARALLEL_ROWS: usize = 192;

/// Covariates `x` (n × p) and response `y` held by one site.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    x: Array2<f64>,
    y: Array1<f64>,
    /// `x_i − x_0`; pairwise differences are unchanged and rows equal to the
    /// first row become exact zeros.
    shifted: Array2<f64>,
}

impl DataBlock {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), got: y.len() });
        }
        if x.nrows() < 2 {
            return Err(Error::TooFewRows(x.nrows()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("data block contains NaN or infinity".into()));
        }
        let shifted = &x - &x.row(0).insert_axis(Axis(0));
        Ok(Self { x, y, shifted })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    /// Stack blocks row-wise in the given order.
    pub fn concat(blocks: &[&DataBlock]) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| Error::InvalidArgument("no blocks to concatenate".into()))?;
        let p = first.p();
        for b in blocks {
            if b.p() != p {
                return Err(Error::DimensionMismatch { expected: p, got: b.p() });
            }
        }
        let xs: Vec<_> = blocks.iter().map(|b| b.x.view()).collect();
        let ys: Vec<_> = blocks.iter().map(|b| b.y.view()).collect();
        let x = ndarray::concatenate(Axis(0), &xs).expect("column counts checked");
        let y = ndarray::concatenate(Axis(0), &ys).expect("1-d concat");
        Self::new(x, y)
    }

    /// Subtract the given column means from `x` and `mean_y` from `y`.
    pub fn centered(&self, means_x: ArrayView1<f64>, mean_y: f64) -> Result<Self> {
        if means_x.len() != self.p() {
            return Err(Error::DimensionMismatch { expected: self.p(), got: means_x.len() });
        }
        let x = &self.x - &means_x.insert_axis(Axis(0));
        let y = self.y.mapv(|v| v - mean_y);
        Self::new(x, y)
    }

    /// Column sums of `x` and the sum of `y`.
    pub fn sums(&self) -> (Array1<f64>, f64) {
        (self.x.sum_axis(Axis(0)), self.y.sum())
    }

    pub fn residuals(&self, beta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_beta(beta)?;
        Ok(&self.y - &self.x.dot(&beta))
    }

    /// `y_i − (x_i − x_0)ᵀβ`: the residuals up to a common constant.
    fn pair_residuals(&self, beta: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_beta(beta)?;
        Ok(&self.y - &self.shifted.dot(&beta))
    }

    fn check_beta(&self, beta: ArrayView1<f64>) -> Result<()> {
        if beta.len() != self.p() {
            return Err(Error::DimensionMismatch { expected: self.p(), got: beta.len() });
        }
        Ok(())
    }
}

/// `∇L_1(β₀) − weighted mean of site gradients at β₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionVector {
    pub g: Array1<f64>,
    pub origin_round: u32,
}

impl CorrectionVector {
    pub fn zeros(p: usize) -> Self {
        Self { g: Array1::zeros(p), origin_round: 0 }
    }
}

#[inline]
fn loss_and_d1(spec: &KernelSpec, u: f64) -> (f64, f64) {
    if spec.kind == KernelKind::Epanechnikov {
        let z = u / spec.h;
        if z >= 1.0 {
            return (u, 1.0);
        }
        if z <= -1.0 {
            return (-u, -1.0);
        }
        let z2 = z * z;
        return (spec.h * (0.375 + 0.75 * z2 - 0.125 * z2 * z2), z * (1.5 - 0.5 * z2));
    }
    (conv_loss(spec, u), conv_loss_d1(spec, u))
}

fn map_rows<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if n >= PARALLEL_ROWS {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Epanechnikov sweep over sorted residuals. Returns the sum of `L_h` over
/// unordered pairs and, if asked, the scores `c_i` in the original row order.
fn epan_sorted(r: &[f64], h: f64, want_scores: bool) -> (f64, Option<Vec<f64>>) {
    let n = r.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
    let s: Vec<f64> = order.iter().map(|&i| r[i]).collect();
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] + s[k];
    }
    let mut near_score = if want_scores { vec![0.0; n] } else { Vec::new() };
    let mut total = 0.0;
    let mut hi = 0;
    let mut lo = 0;
    let mut scores = if want_scores { vec![0.0; n] } else { Vec::new() };
    for k in 0..n {
        let sk = s[k];
        if hi <= k {
            hi = k + 1;
        }
        while hi < n && s[hi] - sk < h {
            hi += 1;
        }
        // pairs (k, j) for k < j < hi are near, j ≥ hi are far
        let far_above = n - hi;
        total += suffix[hi] - far_above as f64 * sk;
        let mut acc = 0.0;
        for j in k + 1..hi {
            let z = (sk - s[j]) / h;
            let z2 = z * z;
            total += h * (0.375 + 0.75 * z2 - 0.125 * z2 * z2);
            if want_scores {
                let d = z * (1.5 - 0.5 * z2);
                acc += d;
                near_score[j] -= d;
            }
        }
        if want_scores {
            while sk - s[lo] >= h {
                lo += 1;
            }
            // lo rows sit below by at least h
            near_score[k] += acc;
            scores[order[k]] = lo as f64 - far_above as f64 + near_score[k];
        }
    }
    (total, want_scores.then_some(scores))
}

/// Sum of `L_h(r_i - r_j)` over `j > i`, one entry per row.
fn upper_loss_rows(r: &[f64], spec: &KernelSpec) -> Vec<f64> {
    map_rows(r.len(), |i| {
        let ri = r[i];
        r[i + 1..].iter().fold(0.0, |acc, &rj| acc + conv_loss(spec, ri - rj))
    })
}

/// Per row: (`Σ_{j>i} L_h(r_i - r_j)`, `Σ_{j≠i} L_h'(r_i - r_j)`).
fn fused_rows(r: &[f64], spec: &KernelSpec) -> Vec<(f64, f64)> {
    map_rows(r.len(), |i| {
        let ri = r[i];
        let mut score = 0.0;
        for &rj in &r[..i] {
            score += conv_loss_d1(spec, ri - rj);
        }
        let mut loss = 0.0;
        for &rj in &r[i + 1..] {
            let (l, d) = loss_and_d1(spec, ri - rj);
            loss += l;
            score += d;
        }
        (loss, score)
    })
}

fn pair_count(n: usize) -> f64 {
    (n * (n - 1)) as f64
}

fn finish_loss(upper_total: f64, n: usize) -> f64 {
    2.0 * upper_total / pair_count(n)
}

/// Loss from a residual vector; exposed for callers that already hold residuals.
pub fn crr_loss_from_residuals(r: &[f64], spec: &KernelSpec) -> Result<f64> {
    if r.len() < 2 {
        return Err(Error::TooFewRows(r.len()));
    }
    let total: f64 = if spec.kind == KernelKind::Epanechnikov {
        epan_sorted(r, spec.h, false).0
    } else {
        upper_loss_rows(r, spec).iter().sum()
    };
    Ok(finish_loss(total, r.len()))
}

/// `1/(n(n-1)) Σ_{i≠j} L_h(y_i - y_j - (x_i - x_j)ᵀβ)`.
pub fn crr_loss(block: &DataBlock, beta: ArrayView1<f64>, spec: &KernelSpec) -> Result<f64> {
    let r = block.pair_residuals(beta)?;
    crr_loss_from_residuals(r.as_slice().expect("contiguous"), spec)
}

/// Gradient of [`crr_loss`] in `β`.
pub fn crr_grad(block: &DataBlock, beta: ArrayView1<f64>, spec: &KernelSpec) -> Result<Array1<f64>> {
    Ok(crr_loss_grad(block, beta, spec)?.1)
}

/// Loss and gradient in one pass over the pairs.
pub fn crr_loss_grad(block: &DataBlock, beta: ArrayView1<f64>, spec: &KernelSpec) -> Result<(f64, Array1<f64>)> {
    let r = block.pair_residuals(beta)?;
    let r = r.as_slice().expect("contiguous");
    let n = block.n();
    let (loss, scores) = if spec.kind == KernelKind::Epanechnikov {
        let (l, c) = epan_sorted(r, spec.h, true);
        (l, Array1::from(c.expect("scores requested")))
    } else {
        let mut loss = 0.0;
        let mut scores = Array1::zeros(n);
        for (i, (l, c)) in fused_rows(r, spec).into_iter().enumerate() {
            loss += l;
            scores[i] = c;
        }
        (loss, scores)
    };
    let grad = block.shifted.t().dot(&scores) * (-2.0 / pair_count(n));
    Ok((finish_loss(loss, n), grad))
}

/// `crr_loss(master, β) − ⟨β, correction⟩`.
pub fn surrogate_loss(
    master: &DataBlock,
    beta: ArrayView1<f64>,
    correction: &CorrectionVector,
    spec: &KernelSpec,
) -> Result<f64> {
    check_len(master.p(), correction.g.len())?;
    Ok(crr_loss(master, beta, spec)? - beta.dot(&correction.g))
}

/// `crr_grad(master, β) − correction`.
pub fn surrogate_grad(
    master: &DataBlock,
    beta: ArrayView1<f64>,
    correction: &CorrectionVector,
    spec: &KernelSpec,
) -> Result<Array1<f64>> {
    check_len(master.p(), correction.g.len())?;
    Ok(crr_grad(master, beta, spec)? - &correction.g)
}

/// Surrogate loss and gradient together.
pub fn surrogate_loss_grad(
    master: &DataBlock,
    beta: ArrayView1<f64>,
    correction: &CorrectionVector,
    spec: &KernelSpec,
) -> Result<(f64, Array1<f64>)> {
    check_len(master.p(), correction.g.len())?;
    let (l, g) = crr_loss_grad(master, beta, spec)?;
    Ok((l - beta.dot(&correction.g), g - &correction.g))
}

/// Weighted mean of site gradients, weights normalised before use so a
/// single site reproduces its own gradient exactly.
pub fn weighted_mean(site_grads: &[(Array1<f64>, f64)]) -> Result<Array1<f64>> {
    let (first, _) = site_grads.first().ok_or_else(|| Error::InvalidArgument("no site gradients".into()))?;
    let p = first.len();
    let mut total_w = 0.0;
    for (g, w) in site_grads {
        check_len(p, g.len())?;
        if !(w.is_finite() && *w > 0.0) {
            return Err(Error::InvalidArgument(format!("site weight must be positive, got {w}")));
        }
        total_w += w;
    }
    let mut mean = Array1::zeros(p);
    for (g, w) in site_grads {
        mean.scaled_add(w / total_w, g);
    }
    Ok(mean)
}

/// `master_grad − Σ w_m g_m / Σ w_m`.
pub fn build_correction(master_grad: ArrayView1<f64>, site_grads: &[(Array1<f64>, f64)]) -> Result<CorrectionVector> {
    let mean = weighted_mean(site_grads)?;
    check_len(master_grad.len(), mean.len())?;
    let g = &master_grad - &mean;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient correction".into()));
    }
    Ok(CorrectionVector { g, origin_round: 0 })
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
