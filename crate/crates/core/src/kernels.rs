//! Robust kernels `κ(ε)` and their IRLS weight functions `ω(ε) = κ'(ε) / ε`.
//!
//! | kind          | κ(ε)                    | ω(ε)               |
//! |---------------|-------------------------|--------------------|
//! | L2            | ε²/2                    | 1                  |
//! | L1            | \|ε\|                   | 1/\|ε\|            |
//! | Charbonnier   | √(ε²+c²) − c            | 1/√(ε²+c²)         |
//! | Geman-McClure | (ε²/2) / (1 + ε²/c²)    | 1/(1 + ε²/c²)²     |
//!
//! Every kernel is even, vanishes at zero and is non-decreasing in `|ε|`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Below this magnitude the L1 weight is clamped to [`L1_WEIGHT_CAP`].
pub const L1_EPS_FLOOR: f64 = 1e-8;
pub const L1_WEIGHT_CAP: f64 = 1e8;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("non-finite residual {0}")]
    NonFinite(f64),
    #[error("kernel scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("unknown kernel `{0}` (expected l2, l1, charbonnier or geman_mcclure)")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    L2,
    L1,
    Charbonnier,
    GemanMcClure,
}

impl FromStr for KernelKind {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l2" => Ok(Self::L2),
            "l1" => Ok(Self::L1),
            "charbonnier" => Ok(Self::Charbonnier),
            "geman_mcclure" => Ok(Self::GemanMcClure),
            other => Err(KernelError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::L2 => "l2",
            Self::L1 => "l1",
            Self::Charbonnier => "charbonnier",
            Self::GemanMcClure => "geman_mcclure",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustKernel {
    pub kind: KernelKind,
    /// Kernel scale `c`, in residual units. Ignored by L1 and L2.
    pub scale: f64,
}

impl Default for RobustKernel {
    fn default() -> Self {
        Self {
            kind: KernelKind::L1,
            scale: 1.0,
        }
    }
}

impl RobustKernel {
    pub fn new(kind: KernelKind, scale: f64) -> Result<Self, KernelError> {
        let kernel = Self { kind, scale };
        kernel.check_scale()?;
        Ok(kernel)
    }

    pub fn l2() -> Self {
        Self {
            kind: KernelKind::L2,
            scale: 1.0,
        }
    }

    pub fn l1() -> Self {
        Self::default()
    }

    fn check_scale(&self) -> Result<(), KernelError> {
        match self.kind {
            KernelKind::Charbonnier | KernelKind::GemanMcClure
                if !(self.scale.is_finite() && self.scale > 0.0) =>
            {
                Err(KernelError::BadScale(self.scale))
            }
            _ => Ok(()),
        }
    }

    /// `κ(|ε|)`.
    pub fn value(&self, eps: f64) -> Result<f64, KernelError> {
        if !eps.is_finite() {
            return Err(KernelError::NonFinite(eps));
        }
        self.check_scale()?;
        let c = self.scale;
        let e2 = eps * eps;
        Ok(match self.kind {
            KernelKind::L2 => 0.5 * e2,
            KernelKind::L1 => eps.abs(),
            KernelKind::Charbonnier => (e2 + c * c).sqrt() - c,
            KernelKind::GemanMcClure => 0.5 * e2 / (1.0 + e2 / (c * c)),
        })
    }

    /// IRLS weight `ω(ε) = ε⁻¹ ∂κ/∂ε`, defined by its limit at zero.
    pub fn weight(&self, eps: f64) -> Result<f64, KernelError> {
        if !eps.is_finite() {
            return Err(KernelError::NonFinite(eps));
        }
        self.check_scale()?;
        let c = self.scale;
        let e2 = eps * eps;
        Ok(match self.kind {
            KernelKind::L2 => 1.0,
            KernelKind::L1 => {
                let a = eps.abs();
                if a < L1_EPS_FLOOR {
                    L1_WEIGHT_CAP
                } else {
                    1.0 / a
                }
            }
            KernelKind::Charbonnier => 1.0 / (e2 + c * c).sqrt(),
            KernelKind::GemanMcClure => {
                let d = 1.0 + e2 / (c * c);
                1.0 / (d * d)
            }
        })
    }

    /// `∂κ/∂ε = ω(ε)·ε`. For L1 this is `sign(ε)` with `sign(0) = 0`.
    pub fn derivative(&self, eps: f64) -> Result<f64, KernelError> {
        if self.kind == KernelKind::L1 {
            if !eps.is_finite() {
                return Err(KernelError::NonFinite(eps));
            }
            return Ok(if eps > 0.0 {
                1.0
            } else if eps < 0.0 {
                -1.0
            } else {
                0.0
            });
        }
        Ok(self.weight(eps)? * eps)
    }
}
