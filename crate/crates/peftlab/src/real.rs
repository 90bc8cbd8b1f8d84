//! Scalar abstraction over the two supported precisions.
//!
//! Verification and tests run in f64; training may run in f32 when the
//! `PEFTLAB_PRECISION` environment variable selects it. Tolerances that
//! depend on the precision live here as associated constants.

use std::fmt;

/// On-disk dtype tag for checkpoint entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point scalar the engine computes in.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;
    /// Tolerance for the per-step loss-component identity
    /// (total == ce + penalty terms).
    const COMPONENT_TOL: f64;
    /// Tolerance for merged-vs-adapted forward agreement.
    const MERGE_TOL: f64;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const COMPONENT_TOL: f64 = 1e-12;
    const MERGE_TOL: f64 = 1e-6;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const COMPONENT_TOL: f64 = 1e-6;
    const MERGE_TOL: f64 = 1e-3;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Training precision selected by the `PEFTLAB_PRECISION` env var.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    /// Reads `PEFTLAB_PRECISION` (`f32` or `f64`); defaults to f64.
    pub fn from_env() -> crate::Result<Self> {
        match std::env::var("PEFTLAB_PRECISION") {
            Ok(v) if v == "f32" => Ok(Precision::F32),
            Ok(v) if v == "f64" => Ok(Precision::F64),
            Ok(v) => Err(crate::Error::Validation(format!(
                "PEFTLAB_PRECISION must be f32 or f64, got {v:?}"
            ))),
            Err(_) => Ok(Precision::F64),
        }
    }
}
