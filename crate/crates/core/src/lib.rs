//! Joint estimation of unknown Wi-Fi AP coordinates and per-device FTM
//! range calibration from unlabeled ranging logs.
//!
//! The pipeline localizes every device with the current parameters, scores
//! the fixes with geometric and smoothness costs, and runs gradient descent
//! on the unknown AP coordinates and calibration coefficients. A simulator
//! produces ranging logs with known ground truth.

// `!(x > 0.0)` is used on purpose to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod calibration;
pub mod cli;
pub mod costs;
pub mod exec;
pub mod io;
pub mod metrics;
pub mod model;
pub mod simulator;
pub mod trainer;
pub mod trilateration;

pub use calibration::{calibrate, estimate_std, offset_calibration, CalibrationPoly};
pub use costs::{combined_cost, geometric_cost, position_cost, unified_cost, velocity_cost, CombinedCost};
pub use exec::Exec;
pub use model::*;
pub use trilateration::{localize_track, solve_ls, solve_wls, Algo, EkfConfig, EkfState, LocalizerConfig};
