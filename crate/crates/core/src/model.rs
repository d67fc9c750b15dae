//! Shared domain types.
//!
//! Distances are meters and time is seconds everywhere inside the crate.
//! Only the on-disk ranging log uses integer millimeters (see [`crate::io`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationPoly;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("scene area {width} x {height} must be positive and finite")]
    BadArea { width: f64, height: f64 },
    #[error("duplicate AP id `{0}`")]
    DuplicateId(String),
    #[error("AP `{id}` at {at} lies outside the {width} x {height} area")]
    OutOfArea {
        id: String,
        at: Point2,
        width: f64,
        height: f64,
    },
    #[error("AP `{0}` has non-finite coordinates")]
    NonFinite(String),
}

/// A deployment area and its APs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: f64,
    pub height: f64,
    pub aps: Vec<ApNode>,
}

impl Scene {
    /// Builds a scene and checks ids are unique and every known position lies in the area.
    pub fn new(width: f64, height: f64, aps: Vec<ApNode>) -> Result<Self, SceneError> {
        let scene = Self { width, height, aps };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.width.is_finite() && self.height.is_finite() && self.width > 0.0 && self.height > 0.0) {
            return Err(SceneError::BadArea {
                width: self.width,
                height: self.height,
            });
        }
        let mut seen = BTreeSet::new();
        for ap in &self.aps {
            if !seen.insert(ap.id.as_str()) {
                return Err(SceneError::DuplicateId(ap.id.clone()));
            }
            if let Some(p) = ap.true_coords() {
                if !p.is_finite() {
                    return Err(SceneError::NonFinite(ap.id.clone()));
                }
                if !self.contains(p) {
                    return Err(SceneError::OutOfArea {
                        id: ap.id.clone(),
                        at: p,
                        width: self.width,
                        height: self.height,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: Point2) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    pub fn get(&self, id: &str) -> Option<&ApNode> {
        self.aps.iter().find(|a| a.id == id)
    }

    pub fn anchors(&self) -> impl Iterator<Item = (&str, Point2)> {
        self.aps.iter().filter_map(|a| match a.kind {
            ApKind::Anchor(p) => Some((a.id.as_str(), p)),
            ApKind::Unknown { .. } => None,
        })
    }

    pub fn unknown_ids(&self) -> impl Iterator<Item = &str> {
        self.aps.iter().filter(|a| !a.is_anchor()).map(|a| a.id.as_str())
    }

    /// Ground-truth coordinates of the unknown APs, where the scene records them.
    pub fn unknown_truth(&self) -> BTreeMap<String, Point2> {
        self.aps
            .iter()
            .filter_map(|a| match a.kind {
                ApKind::Unknown { truth: Some(p) } => Some((a.id.clone(), p)),
                _ => None,
            })
            .collect()
    }

    /// Every AP position with unknown APs at their ground truth.
    /// `None` if some unknown AP has no recorded truth.
    pub fn true_positions(&self) -> Option<BTreeMap<String, Point2>> {
        self.aps
            .iter()
            .map(|a| a.true_coords().map(|p| (a.id.clone(), p)))
            .collect()
    }

    /// Returns a copy where the given APs are demoted to unknown (truth kept).
    pub fn with_unknowns(&self, ids: &[&str]) -> Scene {
        let aps = self
            .aps
            .iter()
            .map(|a| {
                if ids.contains(&a.id.as_str()) {
                    ApNode::unknown(a.id.clone(), a.true_coords())
                } else {
                    a.clone()
                }
            })
            .collect();
        Scene {
            width: self.width,
            height: self.height,
            aps,
        }
    }

    /// Copy of the scene restricted to its anchors.
    pub fn anchors_only(&self) -> Scene {
        Scene {
            width: self.width,
            height: self.height,
            aps: self.aps.iter().filter(|a| a.is_anchor()).cloned().collect(),
        }
    }
}

/// A 2D point in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;

    fn sub(self, other: Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }
}

impl fmt::Display for Point2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Euclidean distance between two points. Same operation order as the
/// cost and localizer code, so identical geometry gives identical bits.
pub fn distance(a: Point2, b: Point2) -> f64 {
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    (dx * dx + dy * dy).sqrt()
}

/// Whether an AP has a surveyed position or must be discovered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ApKind {
    /// Known, fixed coordinates defining the global frame.
    Anchor(Point2),
    /// Coordinates are trainable. `truth` is only ever used for evaluation.
    Unknown { truth: Option<Point2> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApNode {
    pub id: String,
    pub kind: ApKind,
}

impl ApNode {
    pub fn anchor(id: impl Into<String>, at: Point2) -> Self {
        Self {
            id: id.into(),
            kind: ApKind::Anchor(at),
        }
    }

    pub fn unknown(id: impl Into<String>, truth: Option<Point2>) -> Self {
        Self {
            id: id.into(),
            kind: ApKind::Unknown { truth },
        }
    }

    pub fn is_anchor(&self) -> bool {
        matches!(self.kind, ApKind::Anchor(_))
    }

    /// Anchor position, or the ground-truth position of an unknown AP if known.
    pub fn true_coords(&self) -> Option<Point2> {
        match self.kind {
            ApKind::Anchor(p) => Some(p),
            ApKind::Unknown { truth } => truth,
        }
    }
}

/// One FTM report: mean distance and burst std-dev for one AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangingPair {
    pub ap_id: String,
    /// Raw FTM distance. Can be negative.
    pub d_ftm: f64,
    pub s_ftm: f64,
}

impl RangingPair {
    pub fn new(ap_id: impl Into<String>, d_ftm: f64, s_ftm: f64) -> Self {
        Self {
            ap_id: ap_id.into(),
            d_ftm,
            s_ftm,
        }
    }
}

/// All measurements a device collected at one time step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RangingSnapshot {
    pub step: usize,
    pub pairs: Vec<RangingPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTrack {
    pub device_id: String,
    /// Measurement interval in seconds.
    pub dt: f64,
    pub snapshots: Vec<RangingSnapshot>,
    /// Ground-truth positions aligned with `snapshots`, evaluation only.
    pub truth: Option<Vec<Point2>>,
}

impl DeviceTrack {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Copy keeping only the pairs whose AP id passes `keep`.
    pub fn retain_aps(&self, keep: impl Fn(&str) -> bool) -> DeviceTrack {
        let mut out = self.clone();
        for snap in &mut out.snapshots {
            snap.pairs.retain(|p| keep(&p.ap_id));
        }
        out
    }

    /// Contiguous sub-track `[start, start + len)`, truth sliced alongside.
    pub fn window(&self, start: usize, len: usize) -> DeviceTrack {
        let end = (start + len).min(self.snapshots.len());
        DeviceTrack {
            device_id: self.device_id.clone(),
            dt: self.dt,
            snapshots: self.snapshots[start..end].to_vec(),
            truth: self.truth.as_ref().map(|t| t[start..end].to_vec()),
        }
    }
}

/// The trainable state: unknown-AP coordinates plus one calibration per device.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub unknown_coords: BTreeMap<String, Point2>,
    pub calib: BTreeMap<String, CalibrationPoly>,
}

impl ParamSet {
    /// Number of trainable scalars.
    pub fn dim(&self) -> usize {
        2 * self.unknown_coords.len() + self.calib.values().map(|c| c.coeffs().len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.unknown_coords.values().all(Point2::is_finite)
            && self.calib.values().all(|c| c.coeffs().iter().all(|v| v.is_finite()))
    }
}

/// Balance between the geometric, position and velocity costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub geometric: f64,
    pub position: f64,
    pub velocity: f64,
}

impl CostWeights {
    pub const fn new(geometric: f64, position: f64, velocity: f64) -> Self {
        Self {
            geometric,
            position,
            velocity,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.geometric, self.position, self.velocity]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.geometric * k, self.position * k, self.velocity * k)
    }
}

impl Default for CostWeights {
    fn default() -> Self {
        Self::new(1.0, 0.1, 0.1)
    }
}

/// One AP as used in a position fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsedAp {
    pub ap_id: String,
    /// Calibrated distance.
    pub d_hat: f64,
    /// Floored std-dev estimate.
    pub s_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fix {
    pub step: usize,
    pub position: Point2,
    /// APs selected for this step, closest first.
    pub used: Vec<UsedAp>,
}

/// Output of the localizer for one track. Steps without a fix are absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FixSeries {
    pub fixes: Vec<Fix>,
}

impl FixSeries {
    pub fn len(&self) -> usize {
        self.fixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixes.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = Point2> + '_ {
        self.fixes.iter().map(|f| f.position)
    }
}
