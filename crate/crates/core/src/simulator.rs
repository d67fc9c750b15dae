//! Synthetic scenes, walks and burst-mode FTM measurements with known
//! ground truth.
//!
//! All randomness derives from one seed. Each consumer draws from its own
//! ChaCha stream (see [`Substream`]), so re-running one device or one
//! component never shifts the numbers seen by another.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationPoly;
use crate::exec::Exec;
use crate::model::{distance, ApNode, DeviceTrack, ParamSet, Point2, RangingPair, RangingSnapshot, Scene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("forward distortion is not strictly increasing on [0, {max_range}] m")]
    NotMonotone { max_range: f64 },
    #[error("burst size must be at least 2, got {0}")]
    BurstTooSmall(usize),
    #[error("invalid simulation parameter: {0}")]
    Invalid(String),
    #[error("scene has no APs")]
    EmptyScene,
}

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Substream {
    Walk = 1,
    Noise = 2,
    Minibatch = 3,
    TestWalk = 4,
    TestNoise = 5,
}

/// Generator for `kind`, instance `index` (usually the device number).
pub fn substream(seed: u64, kind: Substream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 32) | (index & 0xffff_ffff));
    rng
}

/// Forward ranging distortion of one simulated device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionModel {
    /// `(e_0, e_1, e_2, ...)`: mean reported distance is `Σ e_l d^l`.
    pub forward: Vec<f64>,
    /// Per-sample Gaussian noise, meters.
    pub noise_sigma: f64,
    pub burst_size: usize,
    /// No measurement is produced beyond this true distance.
    pub range_limit: f64,
}

pub const DEFAULT_RANGE_LIMIT: f64 = 40.0;
pub const DEFAULT_BURST: usize = 8;

impl DistortionModel {
    pub fn new(forward: Vec<f64>, noise_sigma: f64, burst_size: usize, range_limit: f64) -> Result<Self, SimError> {
        let m = Self {
            forward,
            noise_sigma,
            burst_size,
            range_limit,
        };
        m.check(range_limit)?;
        Ok(m)
    }

    pub fn identity(noise_sigma: f64) -> Self {
        Self {
            forward: vec![0.0, 1.0, 0.0],
            noise_sigma,
            burst_size: DEFAULT_BURST,
            range_limit: DEFAULT_RANGE_LIMIT,
        }
    }

    /// Validates parameters and that the forward map increases on `[0, max_range]`.
    pub fn check(&self, max_range: f64) -> Result<(), SimError> {
        if self.burst_size < 2 {
            return Err(SimError::BurstTooSmall(self.burst_size));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SimError::Invalid(format!("noise sigma {}", self.noise_sigma)));
        }
        if !(self.range_limit > 0.0) {
            return Err(SimError::Invalid(format!("range limit {}", self.range_limit)));
        }
        if self.forward.is_empty() || self.forward.iter().any(|c| !c.is_finite()) {
            return Err(SimError::Invalid("forward polynomial".into()));
        }
        const SAMPLES: usize = 2000;
        let mut prev = self.mean_reading(0.0);
        for k in 1..=SAMPLES {
            let v = self.mean_reading(max_range * k as f64 / SAMPLES as f64);
            if !(v > prev) {
                return Err(SimError::NotMonotone { max_range });
            }
            prev = v;
        }
        Ok(())
    }

    /// Noise-free reported distance at true distance `d`.
    pub fn mean_reading(&self, d: f64) -> f64 {
        self.forward.iter().rev().fold(0.0, |acc, c| acc * d + c)
    }
}

/// Random-waypoint walk of `steps` points sampled every `dt` seconds.
pub fn gen_walk<R: Rng>(scene: &Scene, speed: f64, dt: f64, steps: usize, rng: &mut R) -> Vec<Point2> {
    let uniform = |rng: &mut R| Point2::new(rng.random::<f64>() * scene.width, rng.random::<f64>() * scene.height);
    let mut out = Vec::with_capacity(steps);
    if steps == 0 {
        return out;
    }
    let mut pos = uniform(rng);
    let mut target = uniform(rng);
    let stride = speed * dt;
    out.push(pos);
    while out.len() < steps {
        let gap = distance(pos, target);
        if gap <= stride {
            pos = target;
            target = uniform(rng);
        } else {
            let k = stride / gap;
            pos = Point2::new(pos.x + (target.x - pos.x) * k, pos.y + (target.y - pos.y) * k);
        }
        out.push(pos);
    }
    out
}

/// One burst-mode report at true distance `d_true`: mean of `burst_size`
/// noisy readings and their sample std-dev, or `None` beyond range.
pub fn measure<R: Rng>(d_true: f64, model: &DistortionModel, rng: &mut R) -> Option<(f64, f64)> {
    if d_true > model.range_limit {
        return None;
    }
    let mean_reading = model.mean_reading(d_true);
    let n = model.burst_size;
    let noise = Normal::new(0.0, model.noise_sigma).expect("sigma validated");
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            if model.noise_sigma > 0.0 {
                mean_reading + noise.sample(rng)
            } else {
                mean_reading
            }
        })
        .collect();
    // mean via deviations from the first sample keeps noiseless bursts exact
    let first = samples[0];
    let mean = first + samples.iter().map(|s| s - first).sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean, var.sqrt()))
}

/// Measures every in-range AP from every point of a walk.
pub fn measure_walk<R: Rng>(
    device_id: &str,
    walk: &[Point2],
    aps: &BTreeMap<String, Point2>,
    model: &DistortionModel,
    dt: f64,
    rng: &mut R,
) -> DeviceTrack {
    let snapshots = walk
        .iter()
        .enumerate()
        .map(|(step, &p)| RangingSnapshot {
            step,
            pairs: aps
                .iter()
                .filter_map(|(id, &a)| {
                    measure(distance(a, p), model, rng).map(|(d, s)| RangingPair::new(id.clone(), d, s))
                })
                .collect(),
        })
        .collect();
    DeviceTrack {
        device_id: device_id.to_string(),
        dt,
        snapshots,
        truth: Some(walk.to_vec()),
    }
}

/// Least-squares polynomial of `order` mapping reported distance to true
/// distance over the `(d_ftm, d_true)` samples.
pub fn fit_reference_calibration(samples: &[(f64, f64)], order: usize) -> Option<CalibrationPoly> {
    let cols = order + 1;
    if samples.len() < cols {
        return None;
    }
    let a = DMatrix::from_fn(samples.len(), cols, |r, c| samples[r].0.powi(c as i32));
    let b = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    let svd = a.svd(true, true);
    let x = svd.solve(&b, 1e-12).ok()?;
    CalibrationPoly::new(x.iter().copied().collect()).ok()
}

/// `(d_ftm, d_true)` for every measurement of a track with ground truth.
pub fn ranging_samples(track: &DeviceTrack, aps: &BTreeMap<String, Point2>) -> Vec<(f64, f64)> {
    let Some(truth) = &track.truth else { return Vec::new() };
    track
        .snapshots
        .iter()
        .zip(truth)
        .flat_map(|(snap, &p)| {
            snap.pairs
                .iter()
                .filter_map(move |pair| aps.get(&pair.ap_id).map(|&a| (pair.d_ftm, distance(a, p))))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub devices: usize,
    /// Training steps per device.
    pub steps: usize,
    /// Held-out test walk steps per device.
    pub test_steps: usize,
    pub dt: f64,
    pub speed: f64,
    pub model: DistortionModel,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            devices: 3,
            steps: 600,
            test_steps: 480,
            dt: 0.5,
            speed: 3.0 / 3.6,
            model: DistortionModel {
                forward: vec![3.0, 1.08, 0.003],
                noise_sigma: 1.0,
                burst_size: DEFAULT_BURST,
                range_limit: DEFAULT_RANGE_LIMIT,
            },
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn device_ids(&self) -> Vec<String> {
        (1..=self.devices).map(|k| format!("dev{k}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDataset {
    pub train: Vec<DeviceTrack>,
    pub test: Vec<DeviceTrack>,
    /// True unknown-AP coordinates plus the per-device reference calibration.
    pub truth: ParamSet,
}

/// Generates training and held-out test tracks for every device.
///
/// The reference calibration of each device is the MSE-optimal quadratic
/// over its observed training ranges.
pub fn simulate_dataset(scene: &Scene, cfg: &SimConfig, exec: Exec) -> Result<SimDataset, SimError> {
    if scene.aps.is_empty() {
        return Err(SimError::EmptyScene);
    }
    if !(cfg.dt > 0.0) || !(cfg.speed > 0.0) || cfg.steps == 0 || cfg.devices == 0 {
        return Err(SimError::Invalid(
            "devices, steps, dt and speed must be positive".into(),
        ));
    }
    cfg.model.check(scene.diagonal())?;
    let aps = scene
        .true_positions()
        .ok_or_else(|| SimError::Invalid("every AP needs true coordinates".into()))?;

    let ids = cfg.device_ids();
    let indexed: Vec<(u64, &String)> = ids.iter().enumerate().map(|(k, id)| (k as u64, id)).collect();
    let tracks = exec.map(&indexed, |&(k, id)| {
        let walk = gen_walk(
            scene,
            cfg.speed,
            cfg.dt,
            cfg.steps,
            &mut substream(cfg.seed, Substream::Walk, k),
        );
        let train = measure_walk(
            id,
            &walk,
            &aps,
            &cfg.model,
            cfg.dt,
            &mut substream(cfg.seed, Substream::Noise, k),
        );
        let test_walk = gen_walk(
            scene,
            cfg.speed,
            cfg.dt,
            cfg.test_steps,
            &mut substream(cfg.seed, Substream::TestWalk, k),
        );
        let test = measure_walk(
            id,
            &test_walk,
            &aps,
            &cfg.model,
            cfg.dt,
            &mut substream(cfg.seed, Substream::TestNoise, k),
        );
        (train, test)
    });

    let mut truth = ParamSet {
        unknown_coords: scene.unknown_truth(),
        calib: BTreeMap::new(),
    };
    let order = cfg.model.forward.len().saturating_sub(1).max(2);
    for (train, _) in &tracks {
        let samples = ranging_samples(train, &aps);
        let poly = fit_reference_calibration(&samples, order).unwrap_or_else(|| CalibrationPoly::identity(order));
        truth.calib.insert(train.device_id.clone(), poly);
    }
    let (train, test) = tracks.into_iter().unzip();
    Ok(SimDataset { train, test, truth })
}

/// The 56 m x 37 m office layout with ten APs; AP1, AP3, AP7 and AP9 sit
/// near the corners and are the anchors.
pub fn office_scene() -> Scene {
    let layout = [
        ("AP1", 4.0, 4.0, true),
        ("AP2", 28.0, 3.0, false),
        ("AP3", 52.0, 4.0, true),
        ("AP4", 10.0, 18.0, false),
        ("AP5", 28.0, 20.0, false),
        ("AP6", 46.0, 17.0, false),
        ("AP7", 4.0, 33.0, true),
        ("AP8", 22.0, 34.0, false),
        ("AP9", 52.0, 33.0, true),
        ("AP10", 38.0, 30.0, false),
    ];
    let aps = layout
        .iter()
        .map(|&(id, x, y, anchor)| {
            let p = Point2::new(x, y);
            if anchor {
                ApNode::anchor(id, p)
            } else {
                ApNode::unknown(id, Some(p))
            }
        })
        .collect();
    Scene::new(56.0, 37.0, aps).expect("static layout is valid")
}
