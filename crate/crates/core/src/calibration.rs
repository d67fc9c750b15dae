//! Per-device range calibration curves.
//!
//! A calibration maps a raw FTM distance to a distance estimate through a
//! polynomial `c_0 + c_1 d + ... + c_L d^L`, clamped at zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::model::RangingPair;

/// Default lower bound on the reported std-dev, in meters.
pub const DEFAULT_STD_FLOOR: f64 = 0.1;

/// Polynomial order used unless configured otherwise.
pub const DEFAULT_ORDER: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("calibration polynomial needs at least one coefficient")]
    Empty,
    #[error("calibration coefficient c_{index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
}

/// Inverse-distortion polynomial. `coeffs[l]` multiplies `d^l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CalibrationPoly {
    coeffs: Vec<f64>,
}

impl CalibrationPoly {
    pub fn new(coeffs: Vec<f64>) -> Result<Self, CalibrationError> {
        if coeffs.is_empty() {
            return Err(CalibrationError::Empty);
        }
        if let Some((index, &value)) = coeffs.iter().enumerate().find(|(_, c)| !c.is_finite()) {
            return Err(CalibrationError::NonFinite { index, value });
        }
        Ok(Self { coeffs })
    }

    /// `d ↦ d` padded to `order`.
    pub fn identity(order: usize) -> Self {
        let mut coeffs = vec![0.0; order.max(1) + 1];
        coeffs[1] = 1.0;
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Polynomial value before clamping.
    pub fn eval(&self, d: f64) -> f64 {
        horner(&self.coeffs, d)
    }

    pub(crate) fn with_coeffs_unchecked(coeffs: Vec<f64>) -> Self {
        debug_assert!(!coeffs.is_empty());
        Self { coeffs }
    }
}

impl TryFrom<Vec<f64>> for CalibrationPoly {
    type Error = CalibrationError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<CalibrationPoly> for Vec<f64> {
    fn from(p: CalibrationPoly) -> Self {
        p.coeffs
    }
}

fn horner<T: Real>(coeffs: &[T], d: f64) -> T {
    let mut acc = T::zero();
    for c in coeffs.iter().rev() {
        acc = acc * d + c.clone();
    }
    acc
}

/// Calibrated distance `max(f⁻¹(d_ftm), 0)`.
pub fn calibrate(poly: &CalibrationPoly, d_ftm: f64) -> f64 {
    calibrate_with(&poly.coeffs, d_ftm)
}

/// Generic form of [`calibrate`]. At or below the clamp the result is a
/// constant zero, so the clamp contributes a zero subgradient.
pub(crate) fn calibrate_with<T: Real>(coeffs: &[T], d_ftm: f64) -> T {
    let v = horner(coeffs, d_ftm);
    if v.value() > 0.0 {
        v
    } else {
        T::zero()
    }
}

/// Constant-offset calibration `d ↦ d + b`, as a degenerate quadratic.
pub fn offset_calibration(b: f64) -> CalibrationPoly {
    CalibrationPoly {
        coeffs: vec![b, 1.0, 0.0],
    }
}

/// Std-dev estimate for a pair: the burst-reported value, floored.
pub fn estimate_std(pair: &RangingPair, floor: f64) -> f64 {
    pair.s_ftm.max(floor)
}
