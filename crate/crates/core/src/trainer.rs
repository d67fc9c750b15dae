//! Gradient-descent estimation of unknown AP coordinates and per-device
//! calibration coefficients.
//!
//! Each iteration samples one contiguous window per device, differentiates
//! the summed per-device unified cost with respect to every trainable
//! scalar, and takes a plain gradient step. Every `eval_every` iterations
//! the full-data cost is evaluated and the best parameters so far are kept.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Dual, Real};
use crate::calibration::{CalibrationPoly, DEFAULT_ORDER};
use crate::costs::{reduce_devices, unified_t, CostError};
use crate::exec::Exec;
use crate::model::{ApKind, CostWeights, DeviceTrack, ParamSet, Point2, Scene};
use crate::simulator::{substream, Substream};
use crate::trilateration::{localize_prepared, ApIndex, LocalizeError, LocalizerConfig, PreparedTrack, P};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum GradMode {
    /// Central differences per scalar.
    FiniteDiff,
    /// Forward-mode dual numbers through calibration, solver and costs.
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Consecutive steps per device per iteration.
    pub batch_len: usize,
    pub weights: CostWeights,
    pub localizer: LocalizerConfig,
    pub seed: u64,
    pub grad_mode: GradMode,
    /// Central-difference step for AP coordinates, meters.
    pub fd_step: f64,
    /// Central-difference step per calibration coefficient `c_0, c_1, ...`.
    /// Orders beyond the list keep shrinking by 100x.
    pub fd_coeff_steps: Vec<f64>,
    /// Full-data cost evaluation period, iterations.
    pub eval_every: usize,
    /// Distance unit of the calibration coefficients during descent: the
    /// update of `c_l` is divided by `coeff_scale^(2l)`, i.e. descent runs on
    /// `c_l * coeff_scale^l`. `1.0` is plain descent on the raw coefficients.
    pub coeff_scale: f64,
    /// Learning-rate multiplier for the calibration coefficients relative
    /// to the AP coordinates. `1.0` uses the same rate.
    pub coeff_rate: f64,
    /// Optional cap, in meters, on the largest single move of one iteration.
    /// Coefficient moves count as `|Δc_l| * coeff_scale^l`. When the step
    /// would exceed the cap the whole update is shrunk uniformly, so the
    /// direction is unchanged. `None` applies the raw step.
    pub max_step: Option<f64>,
    pub poly_order: usize,
    pub exec: Exec,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            iterations: 1000,
            batch_len: 30,
            weights: CostWeights::default(),
            localizer: LocalizerConfig::default(),
            seed: 1,
            grad_mode: GradMode::FiniteDiff,
            fd_step: 1e-4,
            fd_coeff_steps: vec![1e-2, 1e-4, 1e-6],
            eval_every: 20,
            coeff_scale: 20.0,
            coeff_rate: 0.03,
            max_step: Some(1.0),
            poly_order: DEFAULT_ORDER,
            exec: Exec::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.batch_len < 3 {
            return bad("batch length must be at least 3");
        }
        if !self.weights.is_valid() {
            return bad("cost weights must be non-negative");
        }
        if !(self.fd_step > 0.0) || self.fd_coeff_steps.iter().any(|h| !(*h > 0.0)) {
            return bad("finite-difference steps must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(self.coeff_scale > 0.0 && self.coeff_scale.is_finite()) {
            return bad("coefficient scale must be positive");
        }
        if !(self.coeff_rate > 0.0 && self.coeff_rate.is_finite()) {
            return bad("coefficient rate must be positive");
        }
        if self.max_step.is_some_and(|m| !(m > 0.0 && m.is_finite())) {
            return bad("max step must be positive");
        }
        if self.localizer.k_max == 0 || !(self.localizer.std_floor > 0.0) {
            return bad("k_max must be >= 1 and std floor > 0");
        }
        Ok(())
    }

    fn coeff_step(&self, l: usize) -> f64 {
        match self.fd_coeff_steps.get(l) {
            Some(h) => *h,
            None => {
                let last = self.fd_coeff_steps.last().copied().unwrap_or(1e-2);
                last * 1e-2f64.powi((l + 1 - self.fd_coeff_steps.len()) as i32)
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid trainer configuration: {0}")]
    InvalidConfig(String),
    #[error("scene has no anchor APs")]
    NoAnchors,
    #[error("scene has no unknown APs to estimate")]
    NoUnknowns,
    #[error("track of device `{device}` has {len} steps, fewer than the batch length {batch_len}")]
    TrackTooShort {
        device: String,
        len: usize,
        batch_len: usize,
    },
    #[error("gradient has non-finite components")]
    NonFiniteGradient,
    #[error("no device is usable")]
    NoUsableDevice,
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error("training aborted at iteration {iteration}: {reason}")]
    Aborted {
        iteration: usize,
        reason: String,
        report: Box<TrainReport>,
    },
}

impl From<CostError> for TrainError {
    fn from(e: CostError) -> Self {
        match e {
            CostError::Localize(l) => TrainError::Localize(l),
            CostError::NoUsableDevice => TrainError::NoUsableDevice,
            CostError::UnknownAp(ap) => TrainError::Localize(LocalizeError::MissingCoords(ap)),
        }
    }
}

/// Every unknown AP at the anchor centroid; every device on the identity curve.
pub fn init_params(scene: &Scene, devices: &[String]) -> Result<ParamSet, TrainError> {
    init_params_with_order(scene, devices, DEFAULT_ORDER)
}

pub fn init_params_with_order(scene: &Scene, devices: &[String], order: usize) -> Result<ParamSet, TrainError> {
    let anchors: Vec<Point2> = scene.anchors().map(|(_, p)| p).collect();
    if anchors.is_empty() {
        return Err(TrainError::NoAnchors);
    }
    let n = anchors.len() as f64;
    let center = Point2::new(
        anchors.iter().map(|p| p.x).sum::<f64>() / n,
        anchors.iter().map(|p| p.y).sum::<f64>() / n,
    );
    Ok(ParamSet {
        unknown_coords: scene.unknown_ids().map(|id| (id.to_string(), center)).collect(),
        calib: devices
            .iter()
            .map(|d| (d.clone(), CalibrationPoly::identity(order)))
            .collect(),
    })
}

/// Window start drawn uniformly from `[0, len - batch_len]`.
fn sample_start<R: Rng>(len: usize, batch_len: usize, rng: &mut R) -> usize {
    rng.random_range(0..=len - batch_len)
}

/// A uniformly random contiguous window of exactly `batch_len` snapshots.
pub fn sample_minibatch<R: Rng>(track: &DeviceTrack, batch_len: usize, rng: &mut R) -> Result<DeviceTrack, TrainError> {
    if track.len() < batch_len || batch_len == 0 {
        return Err(TrainError::TrackTooShort {
            device: track.device_id.clone(),
            len: track.len(),
            batch_len,
        });
    }
    let start = sample_start(track.len(), batch_len, rng);
    Ok(track.window(start, batch_len))
}

/// Partial derivatives of the combined cost, shaped like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Gradient {
    /// `(∂/∂x, ∂/∂y)` per unknown AP.
    pub coords: BTreeMap<String, [f64; 2]>,
    /// `∂/∂c_l` per device.
    pub coeffs: BTreeMap<String, Vec<f64>>,
}

impl Gradient {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.coords
            .values()
            .flat_map(|g| g.iter().copied())
            .chain(self.coeffs.values().flatten().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Gradient {
        Gradient {
            coords: self
                .coords
                .iter()
                .map(|(id, g)| (id.clone(), [g[0] * k, g[1] * k]))
                .collect(),
            coeffs: self
                .coeffs
                .iter()
                .map(|(id, g)| (id.clone(), g.iter().map(|v| v * k).collect()))
                .collect(),
        }
    }
}

/// Plain gradient step `θ ← θ - α ∂J/∂θ` on every trainable scalar present
/// in `grad`. Anchors are not part of a [`ParamSet`] and are never touched.
pub fn gd_step(params: &ParamSet, grad: &Gradient, alpha: f64) -> ParamSet {
    let mut out = params.clone();
    for (id, g) in &grad.coords {
        if let Some(p) = out.unknown_coords.get_mut(id) {
            p.x -= alpha * g[0];
            p.y -= alpha * g[1];
        }
    }
    for (id, g) in &grad.coeffs {
        if let Some(poly) = out.calib.get_mut(id) {
            let c: Vec<f64> = poly
                .coeffs()
                .iter()
                .zip(g.iter().chain(std::iter::repeat(&0.0)))
                .map(|(c, g)| c - alpha * g)
                .collect();
            *poly = CalibrationPoly::with_coeffs_unchecked(c);
        }
    }
    out
}

/// One trainer update: the coefficient gradients are rescaled by
/// `coeff_rate / coeff_scale^(2l)`, the step is capped at `max_step`, then
/// a plain descent step with `learning_rate` is taken.
pub fn update_step(params: &ParamSet, grad: &Gradient, cfg: &TrainerConfig) -> ParamSet {
    let g = cap_step(
        precondition(grad, cfg.coeff_scale, cfg.coeff_rate),
        cfg.learning_rate,
        cfg.coeff_scale,
        cfg.max_step,
    );
    gd_step(params, &g, cfg.learning_rate)
}

/// Multiplies each coefficient gradient by `rate / scale^(2l)`.
fn precondition(grad: &Gradient, scale: f64, rate: f64) -> Gradient {
    if scale == 1.0 && rate == 1.0 {
        return grad.clone();
    }
    Gradient {
        coords: grad.coords.clone(),
        coeffs: grad
            .coeffs
            .iter()
            .map(|(id, g)| {
                (
                    id.clone(),
                    g.iter()
                        .enumerate()
                        .map(|(l, v)| v * rate / scale.powi(2 * l as i32))
                        .collect(),
                )
            })
            .collect(),
    }
}

/// Shrinks `grad` so that `alpha * grad` moves no scalar further than
/// `max_step` meters, measuring coefficient moves at distance `scale`.
fn cap_step(grad: Gradient, alpha: f64, scale: f64, max_step: Option<f64>) -> Gradient {
    let Some(cap) = max_step else { return grad };
    let coord = grad
        .coords
        .values()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let coeff = grad
        .coeffs
        .values()
        .flat_map(|g| g.iter().enumerate().map(|(l, v)| v.abs() * scale.powi(l as i32)))
        .fold(0.0f64, f64::max);
    let largest = alpha * coord.max(coeff);
    if largest > cap {
        grad.scaled(cap / largest)
    } else {
        grad
    }
}

// ---------------------------------------------------------------------------
// Flattened problem
// ---------------------------------------------------------------------------

/// Flat parameter layout: unknown AP coordinates `(x, y)` in id order, then
/// each device's coefficients in device-id order.
#[derive(Debug, Clone)]
pub(crate) struct Problem {
    index: ApIndex,
    anchors: Vec<Option<Point2>>,
    unknown_ids: Vec<String>,
    /// AP-table slot of each unknown AP.
    unknown_slots: Vec<usize>,
    pub devices: Vec<String>,
    coeff_offset: Vec<usize>,
    coeff_len: Vec<usize>,
    dim: usize,
}

impl Problem {
    pub fn new(scene: &Scene, params: &ParamSet) -> Result<Self, TrainError> {
        let index = ApIndex::new(scene);
        let mut anchors = vec![None; index.len()];
        let mut unknown_ids = Vec::new();
        let mut unknown_slots = Vec::new();
        for (slot, id) in index.ids.iter().enumerate() {
            match scene.get(id).expect("indexed from scene").kind {
                ApKind::Anchor(p) => anchors[slot] = Some(p),
                ApKind::Unknown { .. } => {
                    if !params.unknown_coords.contains_key(id) {
                        return Err(LocalizeError::MissingCoords(id.clone()).into());
                    }
                    unknown_ids.push(id.clone());
                    unknown_slots.push(slot);
                }
            }
        }
        let mut dim = 2 * unknown_ids.len();
        let mut devices = Vec::new();
        let mut coeff_offset = Vec::new();
        let mut coeff_len = Vec::new();
        for (id, poly) in &params.calib {
            devices.push(id.clone());
            coeff_offset.push(dim);
            coeff_len.push(poly.coeffs().len());
            dim += poly.coeffs().len();
        }
        Ok(Self {
            index,
            anchors,
            unknown_ids,
            unknown_slots,
            devices,
            coeff_offset,
            coeff_len,
            dim,
        })
    }

    pub fn n_unknown(&self) -> usize {
        self.unknown_ids.len()
    }

    pub fn theta(&self, params: &ParamSet) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.dim);
        for id in &self.unknown_ids {
            let p = params.unknown_coords[id];
            t.extend([p.x, p.y]);
        }
        for id in &self.devices {
            t.extend_from_slice(params.calib[id].coeffs());
        }
        t
    }

    pub fn params(&self, theta: &[f64]) -> ParamSet {
        let unknown_coords = self
            .unknown_ids
            .iter()
            .enumerate()
            .map(|(u, id)| (id.clone(), Point2::new(theta[2 * u], theta[2 * u + 1])))
            .collect();
        let calib = self
            .devices
            .iter()
            .enumerate()
            .map(|(k, id)| {
                let c = theta[self.coeff_offset[k]..self.coeff_offset[k] + self.coeff_len[k]].to_vec();
                (id.clone(), CalibrationPoly::with_coeffs_unchecked(c))
            })
            .collect();
        ParamSet { unknown_coords, calib }
    }

    pub fn gradient(&self, flat: &[f64]) -> Gradient {
        let p = self.params(flat);
        Gradient {
            coords: p.unknown_coords.into_iter().map(|(id, g)| (id, [g.x, g.y])).collect(),
            coeffs: p.calib.into_iter().map(|(id, c)| (id, c.coeffs().to_vec())).collect(),
        }
    }

    pub fn prepare(&self, tracks: &[DeviceTrack], std_floor: f64) -> Result<Vec<PreparedTrack>, TrainError> {
        self.devices
            .iter()
            .map(|id| {
                let t = tracks
                    .iter()
                    .find(|t| &t.device_id == id)
                    .ok_or_else(|| TrainError::InvalidConfig(format!("no track for device `{id}`")))?;
                Ok(PreparedTrack::new(t, &self.index, std_floor)?)
            })
            .collect()
    }

    fn positions<T: Real>(&self, theta: &[f64], var: impl Fn(usize, f64) -> T) -> Vec<P<T>> {
        let mut pos: Vec<P<T>> = self.anchors.iter().map(|a| P::cst(a.unwrap_or_default())).collect();
        for (u, &slot) in self.unknown_slots.iter().enumerate() {
            pos[slot] = P {
                x: var(2 * u, theta[2 * u]),
                y: var(2 * u + 1, theta[2 * u + 1]),
            };
        }
        pos
    }

    fn coeffs<'a>(&self, theta: &'a [f64], k: usize) -> &'a [f64] {
        &theta[self.coeff_offset[k]..self.coeff_offset[k] + self.coeff_len[k]]
    }

    /// Unified cost of device `k` at `theta`.
    pub fn device_cost(
        &self,
        theta: &[f64],
        k: usize,
        track: &PreparedTrack,
        cfg: &TrainerConfig,
    ) -> Result<f64, LocalizeError> {
        let aps = self.positions(theta, |_, v| v);
        let fixes = localize_prepared(track, &aps, self.coeffs(theta, k), &cfg.localizer)?;
        Ok(unified_t(&fixes, &aps, &cfg.weights, track.dt))
    }

    /// Flat indices that device `k`'s cost depends on.
    fn device_vars(&self, k: usize) -> impl Iterator<Item = usize> {
        (0..2 * self.n_unknown()).chain(self.coeff_offset[k]..self.coeff_offset[k] + self.coeff_len[k])
    }

    fn fd_step(&self, j: usize, cfg: &TrainerConfig) -> f64 {
        if j < 2 * self.n_unknown() {
            return cfg.fd_step;
        }
        let k = self
            .coeff_offset
            .iter()
            .rposition(|&o| o <= j)
            .expect("coefficient index");
        cfg.coeff_step(j - self.coeff_offset[k])
    }

    /// Device `k`'s gradient as `(flat index, value)` pairs via forward-mode
    /// dual numbers. Its own coefficients and all unknown coordinates are
    /// the seeded variables.
    fn device_grad_analytic(
        &self,
        theta: &[f64],
        k: usize,
        track: &PreparedTrack,
        cfg: &TrainerConfig,
    ) -> Result<Vec<(usize, f64)>, LocalizeError> {
        let nu = 2 * self.n_unknown();
        let dim = nu + self.coeff_len[k];
        let aps: Vec<P<Dual>> = self.positions(theta, |i, v| Dual::var(v, i, dim));
        let coeffs: Vec<Dual> = self
            .coeffs(theta, k)
            .iter()
            .enumerate()
            .map(|(l, &c)| Dual::var(c, nu + l, dim))
            .collect();
        let fixes = localize_prepared(track, &aps, &coeffs, &cfg.localizer)?;
        let cost = unified_t(&fixes, &aps, &cfg.weights, track.dt);
        Ok(self
            .device_vars(k)
            .enumerate()
            .map(|(local, global)| (global, cost.d(local)))
            .collect())
    }
}

/// Flat gradient, per-device costs and excluded devices.
type FlatGradient = (Vec<f64>, BTreeMap<String, f64>, Vec<String>);

/// Gradient of the summed device costs on `tracks` (aligned with
/// `problem.devices`). Devices without any fix, or whose gradient is not
/// finite, are left out and reported.
pub(crate) fn gradient_flat(
    problem: &Problem,
    theta: &[f64],
    tracks: &[PreparedTrack],
    cfg: &TrainerConfig,
) -> Result<FlatGradient, TrainError> {
    let ks: Vec<usize> = (0..problem.devices.len()).collect();
    let base: Vec<Result<f64, LocalizeError>> = cfg.exec.map(&ks, |&k| problem.device_cost(theta, k, &tracks[k], cfg));

    let per_device: Vec<Option<Vec<(usize, f64)>>> = match cfg.grad_mode {
        GradMode::Analytic => {
            let usable: Vec<usize> = ks.iter().copied().filter(|&k| base[k].is_ok()).collect();
            let grads = cfg.exec.map(&usable, |&k| {
                problem.device_grad_analytic(theta, k, &tracks[k], cfg).ok()
            });
            let mut out = vec![None; ks.len()];
            for (k, g) in usable.into_iter().zip(grads) {
                out[k] = g;
            }
            out
        }
        GradMode::FiniteDiff => {
            let tasks: Vec<(usize, usize)> = ks
                .iter()
                .filter(|&&k| base[k].is_ok())
                .flat_map(|&k| problem.device_vars(k).map(move |j| (k, j)))
                .collect();
            let diffs = cfg.exec.map(&tasks, |&(k, j)| {
                let h = problem.fd_step(j, cfg);
                let mut t = theta.to_vec();
                t[j] = theta[j] + h;
                let plus = problem.device_cost(&t, k, &tracks[k], cfg);
                t[j] = theta[j] - h;
                let minus = problem.device_cost(&t, k, &tracks[k], cfg);
                match (plus, minus) {
                    (Ok(p), Ok(m)) => (p - m) / (2.0 * h),
                    _ => f64::NAN,
                }
            });
            let mut out: Vec<Option<Vec<(usize, f64)>>> = ks.iter().map(|&k| base[k].is_ok().then(Vec::new)).collect();
            for (&(k, j), g) in tasks.iter().zip(diffs) {
                out[k].as_mut().expect("usable device").push((j, g));
            }
            out
        }
    };

    let mut grad = vec![0.0; theta.len()];
    let mut costs = BTreeMap::new();
    let mut excluded = Vec::new();
    for k in ks {
        let id = &problem.devices[k];
        match (&base[k], &per_device[k]) {
            (Ok(c), Some(g)) if g.iter().all(|(_, v)| v.is_finite()) => {
                for &(j, v) in g {
                    grad[j] += v;
                }
                costs.insert(id.clone(), *c);
            }
            (Err(LocalizeError::NoFixAvailable(_)), _) | (Ok(_), _) => {
                log::warn!("device `{id}` excluded from this gradient");
                excluded.push(id.clone());
            }
            (Err(e), _) => return Err(e.clone().into()),
        }
    }
    if costs.is_empty() {
        return Err(
            if excluded
                .iter()
                .any(|id| base[problem.devices.iter().position(|d| d == id).unwrap()].is_ok())
            {
                TrainError::NonFiniteGradient
            } else {
                TrainError::NoUsableDevice
            },
        );
    }
    Ok((grad, costs, excluded))
}

/// Gradient of the combined cost over `tracks` at `params`.
pub fn compute_gradient(
    tracks: &[DeviceTrack],
    scene: &Scene,
    params: &ParamSet,
    cfg: &TrainerConfig,
) -> Result<Gradient, TrainError> {
    let problem = Problem::new(scene, params)?;
    let prepared = problem.prepare(tracks, cfg.localizer.std_floor)?;
    let theta = problem.theta(params);
    let (flat, _, _) = gradient_flat(&problem, &theta, &prepared, cfg)?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    Ok(problem.gradient(&flat))
}

fn full_cost(
    problem: &Problem,
    theta: &[f64],
    tracks: &[PreparedTrack],
    cfg: &TrainerConfig,
) -> Result<crate::costs::CombinedCost, CostError> {
    let ks: Vec<usize> = (0..problem.devices.len()).collect();
    let results = cfg.exec.map(&ks, |&k| problem.device_cost(theta, k, &tracks[k], cfg));
    reduce_devices(&problem.devices, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Minibatch unified cost per device, before the update.
    pub minibatch_cost: BTreeMap<String, f64>,
    pub excluded: Vec<String>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of updates applied before this evaluation.
    pub iteration: usize,
    pub cost: f64,
    pub per_device: BTreeMap<String, f64>,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: Vec<IterationRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_iteration: usize,
    pub best_cost: f64,
    pub best_params: ParamSet,
}

impl TrainReport {
    pub fn initial_cost(&self) -> Option<f64> {
        self.evals.first().map(|e| e.cost)
    }

    /// Running minimum of the full-data cost over the evaluations.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.evals
            .iter()
            .scan(f64::INFINITY, |best, e| {
                *best = best.min(e.cost);
                Some(*best)
            })
            .collect()
    }
}

/// Trains from the anchor-centroid / identity-curve initialization.
pub fn train(
    tracks: &[DeviceTrack],
    scene: &Scene,
    cfg: &TrainerConfig,
) -> Result<(ParamSet, TrainReport), TrainError> {
    let mut devices: Vec<String> = tracks.iter().map(|t| t.device_id.clone()).collect();
    devices.sort();
    devices.dedup();
    let init = init_params_with_order(scene, &devices, cfg.poly_order)?;
    train_from(tracks, scene, init, cfg)
}

/// Trains from the given starting parameters.
pub fn train_from(
    tracks: &[DeviceTrack],
    scene: &Scene,
    init: ParamSet,
    cfg: &TrainerConfig,
) -> Result<(ParamSet, TrainReport), TrainError> {
    cfg.validate()?;
    if scene.anchors().next().is_none() {
        return Err(TrainError::NoAnchors);
    }
    if scene.unknown_ids().next().is_none() {
        return Err(TrainError::NoUnknowns);
    }
    for t in tracks {
        if t.len() < cfg.batch_len {
            return Err(TrainError::TrackTooShort {
                device: t.device_id.clone(),
                len: t.len(),
                batch_len: cfg.batch_len,
            });
        }
    }
    let problem = Problem::new(scene, &init)?;
    let full = problem.prepare(tracks, cfg.localizer.std_floor)?;
    let mut theta = problem.theta(&init);
    let mut rng = substream(cfg.seed, Substream::Minibatch, 0);
    let mut report = TrainReport::default();

    let evaluate = |theta: &[f64], iteration: usize, report: &mut TrainReport| -> Result<(), TrainError> {
        let c = full_cost(&problem, theta, &full, cfg)?;
        let params = problem.params(theta);
        if report.evals.is_empty() || c.total < report.best_cost {
            report.best_cost = c.total;
            report.best_iteration = iteration;
            report.best_params = params.clone();
        }
        report.evals.push(EvalRecord {
            iteration,
            cost: c.total,
            per_device: c.per_device,
            params,
        });
        Ok(())
    };
    evaluate(&theta, 0, &mut report)?;

    let abort = |iteration: usize, e: TrainError, report: TrainReport| TrainError::Aborted {
        iteration,
        reason: e.to_string(),
        report: Box::new(report),
    };

    for it in 1..=cfg.iterations {
        let batch: Vec<PreparedTrack> = full
            .iter()
            .map(|t| t.window(sample_start(t.steps.len(), cfg.batch_len, &mut rng), cfg.batch_len))
            .collect();
        match gradient_flat(&problem, &theta, &batch, cfg) {
            Ok((flat, costs, excluded)) => {
                let next = update_step(&problem.params(&theta), &problem.gradient(&flat), cfg);
                theta = problem.theta(&next);
                report.iterations.push(IterationRecord {
                    iteration: it,
                    minibatch_cost: costs,
                    excluded,
                    grad_norm: flat.iter().map(|v| v * v).sum::<f64>().sqrt(),
                });
            }
            Err(e @ (TrainError::NoUsableDevice | TrainError::NonFiniteGradient)) => {
                log::warn!("iteration {it}: {e}; no update applied");
                report.iterations.push(IterationRecord {
                    iteration: it,
                    minibatch_cost: BTreeMap::new(),
                    excluded: problem.devices.clone(),
                    grad_norm: f64::NAN,
                });
            }
            Err(e) => return Err(abort(it, e, report)),
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(abort(it, TrainError::NonFiniteGradient, report));
        }
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            if let Err(e) = evaluate(&theta, it, &mut report) {
                return Err(abort(it, e, report));
            }
        }
    }
    Ok((report.best_params.clone(), report))
}
