//! Smoothing kernels and the convolution-smoothed absolute loss.
//!
//! The smoothed loss is `L_h(u) = ∫ |u - v| K_h(v) dv` with `K_h(v) = K(v/h)/h`.
//! Equivalently `L_h(u) = E|u - hV|` where `V` has density `K`. Both kernels
//! have closed forms for `L_h`, `L_h'` and `L_h''`:
//!
//! | kernel       | `L_h(u)` for `t = u/h`                          |
//! |--------------|-------------------------------------------------|
//! | Epanechnikov | `h (3/8 + 3t²/4 - t⁴/8)` on `|t| < 1`, else `|u|` |
//! | Gaussian     | `u (2Φ(t) - 1) + 2h φ(t)`                        |
//!
//! [`quad_conv_loss`] integrates the convolution numerically and exists only
//! to check the closed forms.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    #[default]
    Epanechnikov,
}

/// Kernel family plus bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub h: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self { kind: KernelKind::Epanechnikov, h: 1.0 }
    }
}

impl KernelSpec {
    pub fn new(kind: KernelKind, h: f64) -> Result<Self> {
        let spec = Self { kind, h };
        spec.validate()?;
        Ok(spec)
    }

    pub fn epanechnikov(h: f64) -> Result<Self> {
        Self::new(KernelKind::Epanechnikov, h)
    }

    pub fn gaussian(h: f64) -> Result<Self> {
        Self::new(KernelKind::Gaussian, h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::InvalidConfig(format!("kernel bandwidth must be positive and finite, got {}", self.h)));
        }
        Ok(())
    }

    /// `sup_t K_h(t)`, which bounds `L_h'' / 2`.
    pub fn density_sup(&self) -> f64 {
        match self.kind {
            KernelKind::Gaussian => INV_SQRT_2PI / self.h,
            KernelKind::Epanechnikov => 0.75 / self.h,
        }
    }

    /// Half-width of the support, `None` for unbounded kernels.
    pub fn support_radius(&self) -> Option<f64> {
        match self.kind {
            KernelKind::Gaussian => None,
            KernelKind::Epanechnikov => Some(self.h),
        }
    }
}

/// Standard normal cdf, accurate to full double precision in both tails.
pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `K_h(t) = K(t/h)/h`.
pub fn kernel_density(spec: &KernelSpec, t: f64) -> f64 {
    let z = t / spec.h;
    match spec.kind {
        KernelKind::Gaussian => std_normal_pdf(z) / spec.h,
        KernelKind::Epanechnikov => {
            if z.abs() >= 1.0 {
                0.0
            } else {
                0.75 * (1.0 - z * z) / spec.h
            }
        }
    }
}

/// `∫_{-∞}^t K_h(v) dv`.
pub fn kernel_cdf(spec: &KernelSpec, t: f64) -> f64 {
    let z = t / spec.h;
    match spec.kind {
        KernelKind::Gaussian => std_normal_cdf(z),
        KernelKind::Epanechnikov => {
            if z <= -1.0 {
                0.0
            } else if z >= 1.0 {
                1.0
            } else {
                0.5 + 0.75 * (z - z * z * z / 3.0)
            }
        }
    }
}

/// The smoothed absolute loss `L_h(u)`.
pub fn conv_loss(spec: &KernelSpec, u: f64) -> f64 {
    let h = spec.h;
    let z = u / h;
    match spec.kind {
        KernelKind::Gaussian => {
            let a = z.abs();
            u.abs() * (1.0 - erfc(a / std::f64::consts::SQRT_2)) + 2.0 * h * std_normal_pdf(a)
        }
        KernelKind::Epanechnikov => {
            if z.abs() >= 1.0 {
                u.abs()
            } else {
                let z2 = z * z;
                h * (0.375 + 0.75 * z2 - 0.125 * z2 * z2)
            }
        }
    }
}

/// `L_h'(u) = 2 F_h(u) - 1`.
pub fn conv_loss_d1(spec: &KernelSpec, u: f64) -> f64 {
    let z = u / spec.h;
    match spec.kind {
        // 2Φ(z) - 1 = erf(z/√2); written through erfc so both tails keep precision
        KernelKind::Gaussian => {
            if z >= 0.0 {
                1.0 - erfc(z / std::f64::consts::SQRT_2)
            } else {
                erfc(-z / std::f64::consts::SQRT_2) - 1.0
            }
        }
        KernelKind::Epanechnikov => {
            if z >= 1.0 {
                1.0
            } else if z <= -1.0 {
                -1.0
            } else {
                z * (1.5 - 0.5 * z * z)
            }
        }
    }
}

/// `L_h''(u) = 2 K_h(u)`.
pub fn conv_loss_d2(spec: &KernelSpec, u: f64) -> f64 {
    2.0 * kernel_density(spec, u)
}

/// Numerical value of `∫ |u - v| K_h(v) dv` by composite Simpson quadrature.
///
/// The integrand has a kink at `v = u`, so the integration range is split
/// there; each piece gets `n_points` panels. Epanechnikov pieces are cubic
/// polynomials, which Simpson integrates exactly. Gaussian tails beyond
/// `±(|u| + 40h)` contribute less than `1e-300`.
pub fn quad_conv_loss(spec: &KernelSpec, u: f64, n_points: usize) -> Result<f64> {
    if n_points < 64 {
        return Err(Error::InvalidArgument(format!("quadrature needs at least 64 points, got {n_points}")));
    }
    let (lo, hi) = match spec.kind {
        KernelKind::Epanechnikov => (-spec.h, spec.h),
        KernelKind::Gaussian => (-(u.abs() + 40.0 * spec.h), u.abs() + 40.0 * spec.h),
    };
    let f = |v: f64| (u - v).abs() * kernel_density(spec, v);
    let mut total = 0.0;
    if u > lo && u < hi {
        total += simpson(&f, lo, u, n_points);
        total += simpson(&f, u, hi, n_points);
    } else {
        total += simpson(&f, lo, hi, n_points);
    }
    Ok(total)
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n };
    let step = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + step * k as f64);
    }
    acc * step / 3.0
}
