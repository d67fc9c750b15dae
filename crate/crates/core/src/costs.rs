//! Geometric, position-smoothness and velocity-smoothness costs.
//!
//! Costs are evaluated on a [`FixSeries`] using the AP sets recorded at
//! localization time. Smoothness terms only link fixes whose step indices
//! are consecutive; a skipped step breaks the chain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::exec::Exec;
use crate::model::{CostWeights, DeviceTrack, FixSeries, ParamSet, Scene};
use crate::trilateration::{localize_prepared, ApIndex, FixT, LocalizeError, LocalizerConfig, PreparedTrack, UsedT, P};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("AP `{0}` used in a fix is not in the scene")]
    UnknownAp(String),
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error("no device produced a usable fix series")]
    NoUsableDevice,
}

pub(crate) fn geometric_t<T: Real>(fixes: &[FixT<T>], aps: &[P<T>]) -> T {
    let mut acc = T::zero();
    for f in fixes {
        for u in &f.used {
            let r = (f.pos.dist(&aps[u.ap]) - u.d_hat.clone()) * (1.0 / u.s_hat);
            acc = acc + r.square();
        }
    }
    acc
}

pub(crate) fn position_t<T: Real>(fixes: &[FixT<T>]) -> T {
    let mut acc = T::zero();
    for w in fixes.windows(2) {
        if w[1].step == w[0].step + 1 {
            let dx = w[1].pos.x.clone() - w[0].pos.x.clone();
            let dy = w[1].pos.y.clone() - w[0].pos.y.clone();
            acc = acc + dx.square() + dy.square();
        }
    }
    acc
}

pub(crate) fn velocity_t<T: Real>(fixes: &[FixT<T>], dt: f64) -> T {
    let mut acc = T::zero();
    for w in fixes.windows(3) {
        if w[1].step == w[0].step + 1 && w[2].step == w[1].step + 1 {
            // (z2 - z1)/dt - (z1 - z0)/dt = (z2 - 2 z1 + z0)/dt
            let ax = w[2].pos.x.clone() - w[1].pos.x.clone() * 2.0 + w[0].pos.x.clone();
            let ay = w[2].pos.y.clone() - w[1].pos.y.clone() * 2.0 + w[0].pos.y.clone();
            acc = acc + (ax.square() + ay.square()) * (1.0 / (dt * dt));
        }
    }
    acc
}

pub(crate) fn unified_t<T: Real>(fixes: &[FixT<T>], aps: &[P<T>], w: &CostWeights, dt: f64) -> T {
    // zero weights skip the term entirely so masking is exact
    let mut acc = T::zero();
    if w.geometric != 0.0 {
        acc = acc + geometric_t(fixes, aps) * w.geometric;
    }
    if w.position != 0.0 {
        acc = acc + position_t(fixes) * w.position;
    }
    if w.velocity != 0.0 {
        acc = acc + velocity_t(fixes, dt) * w.velocity;
    }
    acc
}

fn to_internal(fixes: &FixSeries, index: &ApIndex) -> Result<Vec<FixT<f64>>, CostError> {
    fixes
        .fixes
        .iter()
        .map(|f| {
            let used = f
                .used
                .iter()
                .map(|u| {
                    let ap = index
                        .get(&u.ap_id)
                        .ok_or_else(|| CostError::UnknownAp(u.ap_id.clone()))?;
                    Ok(UsedT {
                        ap,
                        d_hat: u.d_hat,
                        s_hat: u.s_hat,
                    })
                })
                .collect::<Result<Vec<_>, CostError>>()?;
            Ok(FixT {
                step: f.step,
                pos: P::cst(f.position),
                used,
            })
        })
        .collect()
}

fn ap_table(scene: &Scene, params: &ParamSet) -> Result<(ApIndex, Vec<P<f64>>), CostError> {
    let index = ApIndex::new(scene);
    let pos = index.positions(scene, params)?.into_iter().map(P::cst).collect();
    Ok((index, pos))
}

/// Sum of squared std-normalized circle residuals at each fix.
pub fn geometric_cost(fixes: &FixSeries, scene: &Scene, params: &ParamSet) -> Result<f64, CostError> {
    let (index, aps) = ap_table(scene, params)?;
    Ok(geometric_t(&to_internal(fixes, &index)?, &aps))
}

/// Sum of squared displacements between consecutive fixes.
pub fn position_cost(fixes: &FixSeries) -> f64 {
    let internal: Vec<FixT<f64>> = fixes
        .fixes
        .iter()
        .map(|f| FixT {
            step: f.step,
            pos: P::cst(f.position),
            used: Vec::new(),
        })
        .collect();
    position_t(&internal)
}

/// Sum of squared velocity changes between consecutive fix pairs.
pub fn velocity_cost(fixes: &FixSeries, dt: f64) -> f64 {
    let internal: Vec<FixT<f64>> = fixes
        .fixes
        .iter()
        .map(|f| FixT {
            step: f.step,
            pos: P::cst(f.position),
            used: Vec::new(),
        })
        .collect();
    velocity_t(&internal, dt)
}

pub fn unified_cost(
    fixes: &FixSeries,
    scene: &Scene,
    params: &ParamSet,
    w: &CostWeights,
    dt: f64,
) -> Result<f64, CostError> {
    let (index, aps) = ap_table(scene, params)?;
    Ok(unified_t(&to_internal(fixes, &index)?, &aps, w, dt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedCost {
    pub total: f64,
    pub per_device: BTreeMap<String, f64>,
    /// Devices that produced no fix at all and were left out of `total`.
    pub excluded: Vec<String>,
}

/// Localizes and costs one device.
pub(crate) fn device_cost(
    track: &PreparedTrack,
    aps: &[P<f64>],
    coeffs: &[f64],
    w: &CostWeights,
    cfg: &LocalizerConfig,
) -> Result<f64, LocalizeError> {
    let fixes = localize_prepared(track, aps, coeffs, cfg)?;
    Ok(unified_t(&fixes, aps, w, track.dt))
}

/// Reduces per-device results in ascending device order.
pub(crate) fn reduce_devices(
    ids: &[String],
    results: Vec<Result<f64, LocalizeError>>,
) -> Result<CombinedCost, CostError> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let mut total = 0.0;
    let mut per_device = BTreeMap::new();
    let mut excluded = Vec::new();
    for i in order {
        match &results[i] {
            Ok(c) => {
                total += c;
                per_device.insert(ids[i].clone(), *c);
            }
            Err(LocalizeError::NoFixAvailable(dev)) => {
                log::warn!("device `{dev}` has no usable fix; excluded from the cost");
                excluded.push(dev.clone());
            }
            Err(e) => return Err(e.clone().into()),
        }
    }
    if per_device.is_empty() {
        return Err(CostError::NoUsableDevice);
    }
    Ok(CombinedCost {
        total,
        per_device,
        excluded,
    })
}

/// Multi-device cost: the per-device unified costs summed in ascending
/// device-id order, so the result does not depend on input order.
pub fn combined_cost(
    tracks: &[DeviceTrack],
    scene: &Scene,
    params: &ParamSet,
    w: &CostWeights,
    cfg: &LocalizerConfig,
    exec: Exec,
) -> Result<CombinedCost, CostError> {
    let (index, aps) = ap_table(scene, params)?;
    let prepared = tracks
        .iter()
        .map(|t| PreparedTrack::new(t, &index, cfg.std_floor))
        .collect::<Result<Vec<_>, _>>()?;
    let results = exec.map(&prepared, |t| {
        let poly = params
            .calib
            .get(&t.device_id)
            .ok_or_else(|| LocalizeError::MissingCalibration(t.device_id.clone()))?;
        device_cost(t, &aps, poly.coeffs(), w, cfg)
    });
    let ids: Vec<String> = tracks.iter().map(|t| t.device_id.clone()).collect();
    reduce_devices(&ids, results)
}
