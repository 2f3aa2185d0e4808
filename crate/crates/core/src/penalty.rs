//! ℓ1, SCAD and MCP penalties as used by the local linear approximation.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A coefficient counts as selected when its magnitude exceeds this.
pub const SUPPORT_TOL: f64 = 1e-8;

pub const DEFAULT_SCAD_A: f64 = 3.7;
pub const DEFAULT_MCP_GAMMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    L1,
    Scad,
    Mcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda: f64,
    /// SCAD `a` or MCP `γ`; unused for ℓ1.
    pub shape: f64,
}

impl PenaltySpec {
    pub fn l1(lambda: f64) -> Self {
        Self { kind: PenaltyKind::L1, lambda, shape: 0.0 }
    }

    pub fn scad(lambda: f64) -> Self {
        Self { kind: PenaltyKind::Scad, lambda, shape: DEFAULT_SCAD_A }
    }

    pub fn mcp(lambda: f64) -> Self {
        Self { kind: PenaltyKind::Mcp, lambda, shape: DEFAULT_MCP_GAMMA }
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        match self.kind {
            PenaltyKind::Scad if !(self.shape > 2.0) => {
                Err(Error::InvalidConfig(format!("SCAD requires a > 2, got {}", self.shape)))
            }
            PenaltyKind::Mcp if !(self.shape > 1.0) => {
                Err(Error::InvalidConfig(format!("MCP requires gamma > 1, got {}", self.shape)))
            }
            _ => Ok(()),
        }
    }
}

/// `sign(z) · max(|z| − t, 0)`.
#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// `p'_λ(v)` for `v ≥ 0`.
pub fn penalty_deriv(spec: &PenaltySpec, v: f64) -> Result<f64> {
    if v < 0.0 || v.is_nan() {
        return Err(Error::InvalidArgument(format!("penalty derivative needs v >= 0, got {v}")));
    }
    let lam = spec.lambda;
    Ok(match spec.kind {
        PenaltyKind::L1 => lam,
        PenaltyKind::Scad => {
            if v <= lam {
                lam
            } else {
                (spec.shape * lam - v).max(0.0) / (spec.shape - 1.0)
            }
        }
        PenaltyKind::Mcp => (lam - v / spec.shape).max(0.0),
    })
}

/// LLA weights `p'_λ(|β_j|)` at an anchor.
pub fn lla_weights(spec: &PenaltySpec, beta_anchor: ArrayView1<f64>) -> Array1<f64> {
    beta_anchor.mapv(|b| penalty_deriv(spec, b.abs()).expect("|b| is nonnegative"))
}

/// Indices with `|β_j| > SUPPORT_TOL`.
pub fn support(beta: ArrayView1<f64>) -> Vec<usize> {
    beta.iter().enumerate().filter(|(_, b)| b.abs() > SUPPORT_TOL).map(|(j, _)| j).collect()
}
