//! Position fixes from calibrated ranges.
//!
//! Three localizers are provided: linearized least squares, its weighted
//! variant, and an extended Kalman filter over a constant-velocity model.
//! All of them are smooth in the AP coordinates and calibration
//! coefficients away from the discrete decisions (AP selection, clamping,
//! filter initialization), which is what the trainer relies on.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::calibration::{calibrate, calibrate_with, CalibrationPoly, DEFAULT_STD_FLOOR};
use crate::model::{DeviceTrack, Fix, FixSeries, ParamSet, Point2, RangingSnapshot, Scene, UsedAp};

/// Normal matrices with a larger condition number are treated as collinear.
pub const MAX_CONDITION: f64 = 1e10;

/// Ranges shorter than this make the range Jacobian undefined.
pub const MIN_RANGE: f64 = 1e-9;

pub const DEFAULT_K_MAX: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrilatError {
    #[error("need at least {need} APs, got {got}")]
    TooFewAps { need: usize, got: usize },
    #[error("AP geometry is degenerate (collinear or coincident APs)")]
    DegenerateGeometry,
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("predicted position coincides with AP #{0}")]
    SingularMeasurement(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizeError {
    #[error("device `{device}` reports AP `{ap}` which is not in the scene")]
    UnknownAp { device: String, ap: String },
    #[error("no coordinates for unknown AP `{0}`")]
    MissingCoords(String),
    #[error("no calibration for device `{0}`")]
    MissingCalibration(String),
    #[error("no position fix available for device `{0}`")]
    NoFixAvailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
pub enum Algo {
    Ls,
    Wls,
    Ekf,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Ls => "ls",
            Algo::Wls => "wls",
            Algo::Ekf => "ekf",
        })
    }
}

impl FromStr for Algo {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ls" => Ok(Algo::Ls),
            "wls" => Ok(Algo::Wls),
            "ekf" => Ok(Algo::Ekf),
            other => Err(format!("unknown algorithm `{other}` (expected ls, wls or ekf)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfConfig {
    /// White-acceleration noise intensity, m²/s³.
    pub q: f64,
    /// Initial covariance diagonal for (x, y, vx, vy).
    pub init_var: [f64; 4],
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            q: 1.0,
            init_var: [25.0, 25.0, 4.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    pub algo: Algo,
    pub k_max: usize,
    pub std_floor: f64,
    pub ekf: EkfConfig,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Ekf,
            k_max: DEFAULT_K_MAX,
            std_floor: DEFAULT_STD_FLOOR,
            ekf: EkfConfig::default(),
        }
    }
}

impl LocalizerConfig {
    pub fn with_algo(mut self, algo: Algo) -> Self {
        self.algo = algo;
        self
    }
}

// ---------------------------------------------------------------------------
// Generic geometry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct P<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> P<T> {
    pub fn cst(p: Point2) -> Self {
        Self {
            x: T::cst(p.x),
            y: T::cst(p.y),
        }
    }

    pub fn value(&self) -> Point2 {
        Point2::new(self.x.value(), self.y.value())
    }

    pub fn dist(&self, o: &P<T>) -> T {
        let dx = self.x.clone() - o.x.clone();
        let dy = self.y.clone() - o.y.clone();
        (dx.square() + dy.square()).sqrt()
    }
}

/// Linearized (weighted) least squares with the last AP as reference.
///
/// Subtracting the reference circle from the others gives, per AP `j`,
/// `2 (z_j - z_m)ᵀ u = |z_j|² - |z_m|² - d_j² + d_m²`. It is solved here in
/// coordinates relative to `z_m`, which is the same system without the
/// large `|z|²` terms.
pub(crate) fn solve_linear<T: Real>(pos: &[P<T>], d: &[T], weights: Option<&[f64]>) -> Result<P<T>, TrilatError> {
    let n = pos.len();
    if n < 3 {
        return Err(TrilatError::TooFewAps { need: 3, got: n });
    }
    let m = n - 1;
    let zm = &pos[m];
    let dm2 = d[m].square();
    let (mut a11, mut a12, mut a22) = (T::zero(), T::zero(), T::zero());
    let (mut r1, mut r2) = (T::zero(), T::zero());
    for j in 0..m {
        let wx = pos[j].x.clone() - zm.x.clone();
        let wy = pos[j].y.clone() - zm.y.clone();
        let rhs = (wx.square() + wy.square() - d[j].square() + dm2.clone()) * 0.5;
        let w = weights.map_or(1.0, |w| w[j]);
        a11 = a11 + wx.square() * w;
        a12 = a12 + wx.clone() * wy.clone() * w;
        a22 = a22 + wy.square() * w;
        r1 = r1 + wx * rhs.clone() * w;
        r2 = r2 + wy * rhs * w;
    }
    if !well_conditioned(a11.value(), a12.value(), a22.value()) {
        return Err(TrilatError::DegenerateGeometry);
    }
    let det = a11.clone() * a22.clone() - a12.square();
    let ux = (a22 * r1.clone() - a12.clone() * r2.clone()) / det.clone();
    let uy = (a11 * r2 - a12 * r1) / det;
    Ok(P {
        x: ux + zm.x.clone(),
        y: uy + zm.y.clone(),
    })
}

fn well_conditioned(a11: f64, a12: f64, a22: f64) -> bool {
    let half_tr = 0.5 * (a11 + a22);
    let disc = (0.25 * (a11 - a22).powi(2) + a12 * a12).sqrt();
    let l_max = half_tr + disc;
    if !(l_max > 0.0) || !l_max.is_finite() {
        return false;
    }
    let l_min = (a11 * a22 - a12 * a12) / l_max;
    l_min > 0.0 && l_max / l_min <= MAX_CONDITION
}

/// Linear least-squares position from `(AP position, calibrated distance)`.
pub fn solve_ls(aps: &[(Point2, f64)]) -> Result<Point2, TrilatError> {
    let pos: Vec<P<f64>> = aps.iter().map(|(p, _)| P::cst(*p)).collect();
    let d: Vec<f64> = aps.iter().map(|a| a.1).collect();
    solve_linear(&pos, &d, None).map(|p| p.value())
}

/// Weighted variant of [`solve_ls`]; row `j` is weighted by `1 / s_j²`.
pub fn solve_wls(aps: &[(Point2, f64, f64)]) -> Result<Point2, TrilatError> {
    if let Some(&(_, _, s)) = aps.iter().find(|a| !(a.2 > 0.0)) {
        return Err(TrilatError::NonPositiveStd(s));
    }
    let pos: Vec<P<f64>> = aps.iter().map(|(p, _, _)| P::cst(*p)).collect();
    let d: Vec<f64> = aps.iter().map(|a| a.1).collect();
    let w: Vec<f64> = aps.iter().map(|a| 1.0 / (a.2 * a.2)).collect();
    solve_linear(&pos, &d, Some(&w)).map(|p| p.value())
}

// ---------------------------------------------------------------------------
// Extended Kalman filter
// ---------------------------------------------------------------------------

type Mat4<T> = [[T; 4]; 4];

fn mat_mul<T: Real>(a: &Mat4<T>, b: &Mat4<T>) -> Mat4<T> {
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            let mut acc = a[i][0].clone() * b[0][j].clone();
            for k in 1..4 {
                acc = acc + a[i][k].clone() * b[k][j].clone();
            }
            acc
        })
    })
}

fn transpose<T: Real>(a: &Mat4<T>) -> Mat4<T> {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i].clone()))
}

fn symmetrize<T: Real>(a: &Mat4<T>) -> Mat4<T> {
    std::array::from_fn(|i| std::array::from_fn(|j| (a[i][j].clone() + a[j][i].clone()) * 0.5))
}

/// Constant-velocity filter state: (x, y, vx, vy) and its covariance.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Ekf<T> {
    pub mean: [T; 4],
    pub cov: Mat4<T>,
}

impl<T: Real> Ekf<T> {
    pub fn init(pos: P<T>, cfg: &EkfConfig) -> Self {
        let cov = std::array::from_fn(|i| std::array::from_fn(|j| T::cst(if i == j { cfg.init_var[i] } else { 0.0 })));
        Self {
            mean: [pos.x, pos.y, T::zero(), T::zero()],
            cov,
        }
    }

    pub fn position(&self) -> P<T> {
        P {
            x: self.mean[0].clone(),
            y: self.mean[1].clone(),
        }
    }

    pub fn predict(&self, dt: f64, q: f64) -> Self {
        let [x, y, vx, vy] = self.mean.clone();
        let mean = [x + vx.clone() * dt, y + vy.clone() * dt, vx, vy];
        let f: Mat4<T> = std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                T::cst(match (i, j) {
                    _ if i == j => 1.0,
                    (0, 2) | (1, 3) => dt,
                    _ => 0.0,
                })
            })
        });
        let fp = mat_mul(&f, &self.cov);
        let fpf = mat_mul(&fp, &transpose(&f));
        let (q11, q12, q22) = (q * dt.powi(3) / 3.0, q * dt.powi(2) / 2.0, q * dt);
        let cov = std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                let qij = match (i, j) {
                    (0, 0) | (1, 1) => q11,
                    (0, 2) | (2, 0) | (1, 3) | (3, 1) => q12,
                    (2, 2) | (3, 3) => q22,
                    _ => 0.0,
                };
                fpf[i][j].clone() + qij
            })
        });
        Self { mean, cov }
    }

    /// Range update against `(AP position, range, std)` triples, all
    /// linearized at the prior mean. Processing the independent ranges one
    /// at a time around that fixed point is algebraically the batch update
    /// with `R = diag(s²)`.
    pub fn update(&self, aps: &[(P<T>, T, f64)]) -> Result<Self, TrilatError> {
        let prior = self.position();
        let mut rows = Vec::with_capacity(aps.len());
        for (idx, (z, d, s)) in aps.iter().enumerate() {
            if !(*s > 0.0) {
                return Err(TrilatError::NonPositiveStd(*s));
            }
            let range = prior.dist(z);
            if range.value() < MIN_RANGE {
                return Err(TrilatError::SingularMeasurement(idx));
            }
            let hx = (prior.x.clone() - z.x.clone()) / range.clone();
            let hy = (prior.y.clone() - z.y.clone()) / range.clone();
            rows.push((hx, hy, d.clone() - range, s * s));
        }
        let mut mean = self.mean.clone();
        let mut cov = self.cov.clone();
        for (hx, hy, innov, r) in rows {
            // innovation relative to the fixed linearization point
            let shift = hx.clone() * (mean[0].clone() - self.mean[0].clone())
                + hy.clone() * (mean[1].clone() - self.mean[1].clone());
            let y = innov - shift;
            let ph: [T; 4] = std::array::from_fn(|i| cov[i][0].clone() * hx.clone() + cov[i][1].clone() * hy.clone());
            let s = hx.clone() * ph[0].clone() + hy.clone() * ph[1].clone() + r;
            let k: [T; 4] = std::array::from_fn(|i| ph[i].clone() / s.clone());
            for i in 0..4 {
                mean[i] = mean[i].clone() + k[i].clone() * y.clone();
            }
            // Joseph form: (I - K H) P (I - K H)ᵀ + K r Kᵀ
            let a: Mat4<T> = std::array::from_fn(|i| {
                std::array::from_fn(|j| {
                    let h = match j {
                        0 => hx.clone(),
                        1 => hy.clone(),
                        _ => T::zero(),
                    };
                    T::cst(if i == j { 1.0 } else { 0.0 }) - k[i].clone() * h
                })
            });
            let apa = mat_mul(&mat_mul(&a, &cov), &transpose(&a));
            cov = std::array::from_fn(|i| std::array::from_fn(|j| apa[i][j].clone() + k[i].clone() * k[j].clone() * r));
            cov = symmetrize(&cov);
        }
        Ok(Self { mean, cov })
    }
}

/// Public EKF state: `(x, y, vx, vy)` in m and m/s with its covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EkfState {
    pub mean: [f64; 4],
    pub cov: [[f64; 4]; 4],
}

impl EkfState {
    pub fn at(position: Point2, cfg: &EkfConfig) -> Self {
        Ekf::init(P::cst(position), cfg).into()
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.mean[0], self.mean[1])
    }
}

impl From<Ekf<f64>> for EkfState {
    fn from(e: Ekf<f64>) -> Self {
        Self {
            mean: e.mean,
            cov: e.cov,
        }
    }
}

impl From<&EkfState> for Ekf<f64> {
    fn from(e: &EkfState) -> Self {
        Self {
            mean: e.mean,
            cov: e.cov,
        }
    }
}

/// Constant-velocity prediction over `dt` seconds with noise intensity `q`.
pub fn ekf_predict(state: &EkfState, dt: f64, q: f64) -> EkfState {
    Ekf::from(state).predict(dt, q).into()
}

/// Range-only measurement update with `(AP position, d̂, ŝ)` triples.
pub fn ekf_update(state: &EkfState, aps: &[(Point2, f64, f64)]) -> Result<EkfState, TrilatError> {
    if aps.is_empty() {
        return Err(TrilatError::TooFewAps { need: 1, got: 0 });
    }
    let meas: Vec<(P<f64>, f64, f64)> = aps.iter().map(|(p, d, s)| (P::cst(*p), *d, *s)).collect();
    Ekf::from(state).update(&meas).map(Into::into)
}

// ---------------------------------------------------------------------------
// Track localization
// ---------------------------------------------------------------------------

/// Up to `k_max` AP ids with the smallest calibrated distance, closest
/// first, ties broken by ascending id.
pub fn select_aps(snapshot: &RangingSnapshot, poly: &CalibrationPoly, k_max: usize) -> Vec<String> {
    let mut ranked: Vec<(f64, &str)> = snapshot
        .pairs
        .iter()
        .map(|p| (calibrate(poly, p.d_ftm), p.ap_id.as_str()))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    ranked.into_iter().take(k_max).map(|(_, id)| id.to_string()).collect()
}

/// Scene AP ids in ascending order; the position in this list is the AP
/// index used by the internal solvers, so index order is id order.
#[derive(Debug, Clone)]
pub(crate) struct ApIndex {
    pub ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl ApIndex {
    pub fn new(scene: &Scene) -> Self {
        let mut ids: Vec<String> = scene.aps.iter().map(|a| a.id.clone()).collect();
        ids.sort();
        let lookup = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Self { ids, lookup }
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// Position table with anchors fixed and unknown APs from `params`.
    pub fn positions(&self, scene: &Scene, params: &ParamSet) -> Result<Vec<Point2>, LocalizeError> {
        self.ids
            .iter()
            .map(|id| {
                let ap = scene.get(id).expect("index built from scene");
                match ap.kind {
                    crate::model::ApKind::Anchor(p) => Ok(p),
                    crate::model::ApKind::Unknown { .. } => params
                        .unknown_coords
                        .get(id)
                        .copied()
                        .ok_or_else(|| LocalizeError::MissingCoords(id.clone())),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PreparedStep {
    pub step: usize,
    /// (AP index, raw distance, floored std)
    pub pairs: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub(crate) struct PreparedTrack {
    pub device_id: String,
    pub dt: f64,
    pub steps: Vec<PreparedStep>,
}

impl PreparedTrack {
    pub fn new(track: &DeviceTrack, index: &ApIndex, std_floor: f64) -> Result<Self, LocalizeError> {
        let steps = track
            .snapshots
            .iter()
            .map(|snap| {
                let pairs = snap
                    .pairs
                    .iter()
                    .map(|p| {
                        let ap = index.get(&p.ap_id).ok_or_else(|| LocalizeError::UnknownAp {
                            device: track.device_id.clone(),
                            ap: p.ap_id.clone(),
                        })?;
                        Ok((ap, p.d_ftm, p.s_ftm.max(std_floor)))
                    })
                    .collect::<Result<Vec<_>, LocalizeError>>()?;
                Ok(PreparedStep { step: snap.step, pairs })
            })
            .collect::<Result<Vec<_>, LocalizeError>>()?;
        Ok(Self {
            device_id: track.device_id.clone(),
            dt: track.dt,
            steps,
        })
    }

    pub fn window(&self, start: usize, len: usize) -> PreparedTrack {
        let end = (start + len).min(self.steps.len());
        PreparedTrack {
            device_id: self.device_id.clone(),
            dt: self.dt,
            steps: self.steps[start..end].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct UsedT<T> {
    pub ap: usize,
    pub d_hat: T,
    pub s_hat: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct FixT<T> {
    pub step: usize,
    pub pos: P<T>,
    pub used: Vec<UsedT<T>>,
}

fn linear_fix<T: Real>(aps: &[P<T>], used: &[UsedT<T>], weighted: bool) -> Option<P<T>> {
    let pos: Vec<P<T>> = used.iter().map(|u| aps[u.ap].clone()).collect();
    let d: Vec<T> = used.iter().map(|u| u.d_hat.clone()).collect();
    let w: Option<Vec<f64>> = weighted.then(|| used.iter().map(|u| 1.0 / (u.s_hat * u.s_hat)).collect());
    solve_linear(&pos, &d, w.as_deref()).ok()
}

/// Runs the configured localizer over a prepared track.
pub(crate) fn localize_prepared<T: Real>(
    track: &PreparedTrack,
    aps: &[P<T>],
    coeffs: &[T],
    cfg: &LocalizerConfig,
) -> Result<Vec<FixT<T>>, LocalizeError> {
    let mut fixes = Vec::new();
    let mut ekf: Option<Ekf<T>> = None;
    let mut last_step: Option<usize> = None;
    for snap in &track.steps {
        let mut used: Vec<UsedT<T>> = snap
            .pairs
            .iter()
            .map(|&(ap, d, s)| UsedT {
                ap,
                d_hat: calibrate_with(coeffs, d),
                s_hat: s,
            })
            .collect();
        used.sort_by(|a, b| a.d_hat.value().total_cmp(&b.d_hat.value()).then(a.ap.cmp(&b.ap)));
        used.truncate(cfg.k_max);

        match cfg.algo {
            Algo::Ls | Algo::Wls => {
                if let Some(pos) = linear_fix(aps, &used, cfg.algo == Algo::Wls) {
                    fixes.push(FixT {
                        step: snap.step,
                        pos,
                        used,
                    });
                }
            }
            Algo::Ekf => match ekf.take() {
                None => {
                    if let Some(pos) = linear_fix(aps, &used, false) {
                        ekf = Some(Ekf::init(pos.clone(), &cfg.ekf));
                        last_step = Some(snap.step);
                        fixes.push(FixT {
                            step: snap.step,
                            pos,
                            used,
                        });
                    }
                }
                Some(state) => {
                    let gap = snap.step.saturating_sub(last_step.unwrap_or(snap.step)).max(1);
                    let predicted = state.predict(track.dt * gap as f64, cfg.ekf.q);
                    let prior = predicted.position().value();
                    used.retain(|u| crate::model::distance(prior, aps[u.ap].value()) >= MIN_RANGE);
                    let meas: Vec<(P<T>, T, f64)> = used
                        .iter()
                        .map(|u| (aps[u.ap].clone(), u.d_hat.clone(), u.s_hat))
                        .collect();
                    let next = if meas.is_empty() {
                        predicted
                    } else {
                        predicted.update(&meas).expect("singular ranges filtered above")
                    };
                    fixes.push(FixT {
                        step: snap.step,
                        pos: next.position(),
                        used,
                    });
                    last_step = Some(snap.step);
                    ekf = Some(next);
                }
            },
        }
    }
    if fixes.is_empty() {
        return Err(LocalizeError::NoFixAvailable(track.device_id.clone()));
    }
    Ok(fixes)
}

pub(crate) fn to_fix_series(fixes: &[FixT<f64>], index: &ApIndex) -> FixSeries {
    FixSeries {
        fixes: fixes
            .iter()
            .map(|f| Fix {
                step: f.step,
                position: f.pos.value(),
                used: f
                    .used
                    .iter()
                    .map(|u| UsedAp {
                        ap_id: index.ids[u.ap].clone(),
                        d_hat: u.d_hat,
                        s_hat: u.s_hat,
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Localizes every step of `track` with the device's calibration from
/// `params`, recording the APs, calibrated distances and std estimates used.
pub fn localize_track(
    track: &DeviceTrack,
    scene: &Scene,
    params: &ParamSet,
    cfg: &LocalizerConfig,
) -> Result<FixSeries, LocalizeError> {
    let index = ApIndex::new(scene);
    let prepared = PreparedTrack::new(track, &index, cfg.std_floor)?;
    let positions: Vec<P<f64>> = index.positions(scene, params)?.into_iter().map(P::cst).collect();
    let poly = params
        .calib
        .get(&track.device_id)
        .ok_or_else(|| LocalizeError::MissingCalibration(track.device_id.clone()))?;
    let fixes = localize_prepared(&prepared, &positions, poly.coeffs(), cfg)?;
    Ok(to_fix_series(&fixes, &index))
}
