//! Text formats for scenes, ranging logs, parameters, trajectories and
//! evaluation tables.
//!
//! Scene, log and parameter files start with a `<kind> <version>` line;
//! other versions are rejected. `#` starts a comment line in scene and
//! parameter files. Nothing is skipped silently: any line that is not a
//! comment, blank, or a valid record is an error.
//!
//! Scene:
//! ```text
//! apcal-scene 1
//! area 56 37
//! ap AP1 anchor 4 4
//! ap AP2 unknown 28 3     # true coordinates are optional
//! ap AP5 unknown
//! ```
//!
//! Ranging log (distances and std-devs in integer millimeters):
//! ```text
//! apcal-log 1
//! #interval_ms 500
//! device,step,ap,distance_mm,stddev_mm
//! dev1,0,AP1,24837,1137
//! ```
//!
//! Parameters:
//! ```text
//! apcal-params 1
//! [unknown_aps]
//! AP2 28.1 3.2
//! [devices]
//! dev1 -2.6 0.92 -0.0017
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::calibration::CalibrationPoly;
use crate::metrics::{CdfPoint, ErrorSummary};
use crate::model::{ApNode, DeviceTrack, FixSeries, ParamSet, Point2, RangingPair, RangingSnapshot, Scene, SceneError};

pub const SCENE_TAG: &str = "apcal-scene";
pub const LOG_TAG: &str = "apcal-log";
pub const PARAMS_TAG: &str = "apcal-params";
pub const FORMAT_VERSION: u32 = 1;

const LOG_HEADER: &str = "device,step,ap,distance_mm,stddev_mm";
const TRAJ_HEADER: &str = "device,step,x,y";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    In { path: PathBuf, source: Box<IoError> },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported format `{found}`, expected `{expected}`")]
    Version { found: String, expected: String },
    #[error("invalid scene: {0}")]
    Validation(String),
    #[error("line {line}: device `{device}` step {step} follows step {prev}")]
    NonMonotonicSteps {
        line: usize,
        device: String,
        step: usize,
        prev: usize,
    },
    #[error("line {line}: device `{device}` step {step} reports AP `{ap}` twice")]
    DuplicateMeasurement {
        line: usize,
        device: String,
        step: usize,
        ap: String,
    },
}

impl From<SceneError> for IoError {
    fn from(e: SceneError) -> Self {
        IoError::Validation(e.to_string())
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { line, msg: msg.into() }
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a sibling temp file so readers never see partial output.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), IoError> {
    let wrap = |source| IoError::File {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(wrap)?;
    fs::rename(&tmp, path).map_err(wrap)
}

fn in_file<T>(path: &Path, r: Result<T, IoError>) -> Result<T, IoError> {
    r.map_err(|e| IoError::In {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

/// Non-blank, non-comment lines with 1-based line numbers. Trailing `#`
/// comments are stripped.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn check_version(first: Option<(usize, &str)>, tag: &str) -> Result<(), IoError> {
    let expected = format!("{tag} {FORMAT_VERSION}");
    match first {
        Some((_, l)) if l.split_whitespace().eq(expected.split_whitespace()) => Ok(()),
        Some((_, l)) => Err(IoError::Version {
            found: l.to_string(),
            expected,
        }),
        None => Err(IoError::Version {
            found: String::new(),
            expected,
        }),
    }
}

fn num(line: usize, field: &str, s: &str) -> Result<f64, IoError> {
    let v: f64 = s
        .parse()
        .map_err(|_| parse_err(line, format!("{field}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{field}: `{s}` is not finite")));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

pub fn parse_scene(text: &str) -> Result<Scene, IoError> {
    let mut lines = records(text);
    check_version(lines.next(), SCENE_TAG)?;
    let mut area = None;
    let mut aps = Vec::new();
    for (n, l) in lines {
        let f: Vec<&str> = l.split_whitespace().collect();
        match f.as_slice() {
            ["area", w, h] => {
                if area.is_some() {
                    return Err(parse_err(n, "area declared twice"));
                }
                area = Some((num(n, "width", w)?, num(n, "height", h)?));
            }
            ["ap", id, "anchor", x, y] => aps.push(ApNode::anchor(*id, Point2::new(num(n, "x", x)?, num(n, "y", y)?))),
            ["ap", id, "anchor"] => return Err(IoError::Validation(format!("anchor AP `{id}` has no coordinates"))),
            ["ap", id, "unknown"] => aps.push(ApNode::unknown(*id, None)),
            ["ap", id, "unknown", x, y] => aps.push(ApNode::unknown(
                *id,
                Some(Point2::new(num(n, "x", x)?, num(n, "y", y)?)),
            )),
            _ => return Err(parse_err(n, format!("unrecognized scene record `{l}`"))),
        }
    }
    let (w, h) = area.ok_or_else(|| parse_err(0, "missing `area` record"))?;
    Ok(Scene::new(w, h, aps)?)
}

pub fn format_scene(scene: &Scene) -> String {
    let mut s = format!("{SCENE_TAG} {FORMAT_VERSION}\narea {} {}\n", scene.width, scene.height);
    for ap in &scene.aps {
        match (ap.is_anchor(), ap.true_coords()) {
            (true, Some(p)) => writeln!(s, "ap {} anchor {} {}", ap.id, p.x, p.y),
            (_, Some(p)) => writeln!(s, "ap {} unknown {} {}", ap.id, p.x, p.y),
            (_, None) => writeln!(s, "ap {} unknown", ap.id),
        }
        .expect("write to String");
    }
    s
}

pub fn load_scene(path: &Path) -> Result<Scene, IoError> {
    in_file(path, parse_scene(&read(path)?))
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &format_scene(scene))
}

// ---------------------------------------------------------------------------
// Ranging log
// ---------------------------------------------------------------------------

fn to_mm(m: f64) -> i64 {
    (m * 1000.0).round() as i64
}

fn from_mm(mm: i64) -> f64 {
    mm as f64 / 1000.0
}

/// Tracks in order of first appearance; records of one device must have
/// non-decreasing steps and may interleave with other devices.
pub fn parse_ranging_log(text: &str) -> Result<Vec<DeviceTrack>, IoError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    check_version(lines.next(), LOG_TAG)?;
    let mut dt = None;
    let mut header = false;
    let mut tracks: Vec<DeviceTrack> = Vec::new();
    let mut slot: BTreeMap<String, usize> = BTreeMap::new();
    let mut seen_ap: BTreeSet<(String, usize, String)> = BTreeSet::new();

    for (n, l) in lines {
        if let Some(rest) = l.strip_prefix('#') {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if let ["interval_ms", v] = f.as_slice() {
                let ms: u64 = v
                    .parse()
                    .map_err(|_| parse_err(n, format!("interval_ms: `{v}` is not an integer")))?;
                if ms == 0 {
                    return Err(parse_err(n, "interval_ms must be positive"));
                }
                dt = Some(ms as f64 / 1000.0);
            }
            continue;
        }
        if !header {
            if l != LOG_HEADER {
                return Err(parse_err(n, format!("expected header `{LOG_HEADER}`")));
            }
            header = true;
            continue;
        }
        let dt = dt.ok_or_else(|| parse_err(n, "record before `#interval_ms` header"))?;
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        let [device, step, ap, dist, std] = f.as_slice() else {
            return Err(parse_err(n, format!("expected 5 fields, found {}", f.len())));
        };
        if device.is_empty() || ap.is_empty() {
            return Err(parse_err(n, "empty device or AP id"));
        }
        let step: usize = step
            .parse()
            .map_err(|_| parse_err(n, format!("step: `{step}` is not an integer")))?;
        let dist: i64 = dist
            .parse()
            .map_err(|_| parse_err(n, format!("distance_mm: `{dist}` is not an integer")))?;
        let std: u64 = std
            .parse()
            .map_err(|_| parse_err(n, format!("stddev_mm: `{std}` is not an unsigned integer")))?;

        let k = *slot.entry(device.to_string()).or_insert_with(|| {
            tracks.push(DeviceTrack {
                device_id: device.to_string(),
                dt,
                snapshots: Vec::new(),
                truth: None,
            });
            tracks.len() - 1
        });
        let track = &mut tracks[k];
        match track.snapshots.last() {
            Some(last) if last.step > step => {
                return Err(IoError::NonMonotonicSteps {
                    line: n,
                    device: device.to_string(),
                    step,
                    prev: last.step,
                })
            }
            Some(last) if last.step == step => {}
            _ => track.snapshots.push(RangingSnapshot {
                step,
                pairs: Vec::new(),
            }),
        }
        if !seen_ap.insert((device.to_string(), step, ap.to_string())) {
            return Err(IoError::DuplicateMeasurement {
                line: n,
                device: device.to_string(),
                step,
                ap: ap.to_string(),
            });
        }
        let snap = track.snapshots.last_mut().expect("pushed above");
        snap.pairs
            .push(RangingPair::new(*ap, from_mm(dist), from_mm(std as i64)));
    }
    if !header {
        return Err(parse_err(0, format!("missing header `{LOG_HEADER}`")));
    }
    if dt.is_none() {
        return Err(parse_err(0, "missing `#interval_ms` header"));
    }
    Ok(tracks)
}

/// Formats tracks as a log. Values are rounded to whole millimeters; all
/// tracks must share one interval.
pub fn format_ranging_log(tracks: &[DeviceTrack], dt: f64) -> String {
    let mut s = format!(
        "{LOG_TAG} {FORMAT_VERSION}\n#interval_ms {}\n{LOG_HEADER}\n",
        (dt * 1000.0).round() as u64
    );
    for t in tracks {
        for snap in &t.snapshots {
            for p in &snap.pairs {
                writeln!(
                    s,
                    "{},{},{},{},{}",
                    t.device_id,
                    snap.step,
                    p.ap_id,
                    to_mm(p.d_ftm),
                    to_mm(p.s_ftm.max(0.0))
                )
                .expect("write to String");
            }
        }
    }
    s
}

pub fn load_ranging_log(path: &Path) -> Result<Vec<DeviceTrack>, IoError> {
    in_file(path, parse_ranging_log(&read(path)?))
}

pub fn save_ranging_log(tracks: &[DeviceTrack], dt: f64, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &format_ranging_log(tracks, dt))
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

pub fn parse_params(text: &str) -> Result<ParamSet, IoError> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Aps,
        Devices,
    }
    let mut lines = records(text);
    check_version(lines.next(), PARAMS_TAG)?;
    let mut section = Section::None;
    let mut saw_devices = false;
    let mut out = ParamSet::default();
    for (n, l) in lines {
        match l {
            "[unknown_aps]" => section = Section::Aps,
            "[devices]" => {
                section = Section::Devices;
                saw_devices = true;
            }
            _ => {
                let f: Vec<&str> = l.split_whitespace().collect();
                match section {
                    Section::None => return Err(parse_err(n, "record outside a section")),
                    Section::Aps => {
                        let [id, x, y] = f.as_slice() else {
                            return Err(parse_err(n, "expected `<ap> <x> <y>`"));
                        };
                        let p = Point2::new(num(n, "x", x)?, num(n, "y", y)?);
                        if out.unknown_coords.insert(id.to_string(), p).is_some() {
                            return Err(parse_err(n, format!("AP `{id}` listed twice")));
                        }
                    }
                    Section::Devices => {
                        let Some((id, cs)) = f.split_first().filter(|(_, cs)| !cs.is_empty()) else {
                            return Err(parse_err(n, "expected `<device> <c0> [c1 ...]`"));
                        };
                        let coeffs = cs
                            .iter()
                            .map(|c| num(n, "coefficient", c))
                            .collect::<Result<Vec<_>, _>>()?;
                        let poly = CalibrationPoly::new(coeffs).map_err(|e| parse_err(n, e.to_string()))?;
                        if out.calib.insert(id.to_string(), poly).is_some() {
                            return Err(parse_err(n, format!("device `{id}` listed twice")));
                        }
                    }
                }
            }
        }
    }
    if !saw_devices {
        return Err(parse_err(0, "missing `[devices]` section"));
    }
    Ok(out)
}

/// Shortest decimal text that parses back to the same doubles.
pub fn format_params(params: &ParamSet) -> String {
    let mut s = format!("{PARAMS_TAG} {FORMAT_VERSION}\n[unknown_aps]\n");
    for (id, p) in &params.unknown_coords {
        writeln!(s, "{id} {} {}", p.x, p.y).expect("write to String");
    }
    s.push_str("[devices]\n");
    for (id, poly) in &params.calib {
        let cs: Vec<String> = poly.coeffs().iter().map(|c| c.to_string()).collect();
        writeln!(s, "{id} {}", cs.join(" ")).expect("write to String");
    }
    s
}

pub fn load_params(path: &Path) -> Result<ParamSet, IoError> {
    in_file(path, parse_params(&read(path)?))
}

pub fn save_params(params: &ParamSet, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &format_params(params))
}

// ---------------------------------------------------------------------------
// Trajectories and fixes
// ---------------------------------------------------------------------------

/// Per-device `(step, position)` series.
pub type Trajectories = BTreeMap<String, Vec<(usize, Point2)>>;

pub fn format_trajectories(series: &Trajectories) -> String {
    let mut s = format!("{TRAJ_HEADER}\n");
    for (dev, pts) in series {
        for (step, p) in pts {
            writeln!(s, "{dev},{step},{},{}", p.x, p.y).expect("write to String");
        }
    }
    s
}

pub fn parse_trajectories(text: &str) -> Result<Trajectories, IoError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, TRAJ_HEADER)) => {}
        Some((n, _)) => return Err(parse_err(n, format!("expected header `{TRAJ_HEADER}`"))),
        None => return Err(parse_err(0, format!("missing header `{TRAJ_HEADER}`"))),
    }
    let mut out = Trajectories::new();
    for (n, l) in lines {
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        let [dev, step, x, y] = f.as_slice() else {
            return Err(parse_err(n, format!("expected 4 fields, found {}", f.len())));
        };
        let step: usize = step
            .parse()
            .map_err(|_| parse_err(n, format!("step: `{step}` is not an integer")))?;
        let series = out.entry(dev.to_string()).or_default();
        if let Some(&(prev, _)) = series.last() {
            if step <= prev {
                return Err(IoError::NonMonotonicSteps {
                    line: n,
                    device: dev.to_string(),
                    step,
                    prev,
                });
            }
        }
        series.push((step, Point2::new(num(n, "x", x)?, num(n, "y", y)?)));
    }
    Ok(out)
}

pub fn load_trajectories(path: &Path) -> Result<Trajectories, IoError> {
    in_file(path, parse_trajectories(&read(path)?))
}

pub fn save_trajectories(series: &Trajectories, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &format_trajectories(series))
}

pub fn fixes_to_series(fixes: &BTreeMap<String, FixSeries>) -> Trajectories {
    fixes
        .iter()
        .map(|(dev, f)| (dev.clone(), f.fixes.iter().map(|x| (x.step, x.position)).collect()))
        .collect()
}

/// Ground-truth walks of simulated tracks.
pub fn truth_series(tracks: &[DeviceTrack]) -> Trajectories {
    tracks
        .iter()
        .filter_map(|t| {
            let truth = t.truth.as_ref()?;
            Some((
                t.device_id.clone(),
                t.snapshots.iter().map(|s| s.step).zip(truth.iter().copied()).collect(),
            ))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Evaluation tables
// ---------------------------------------------------------------------------

pub fn format_metrics(rows: &[(String, ErrorSummary)]) -> String {
    let mut s = String::from("label,mae,rmse,max\n");
    for (label, m) in rows {
        writeln!(s, "{label},{},{},{}", m.mae, m.rmse, m.max).expect("write to String");
    }
    s
}

pub fn format_cdf(series: &[(String, Vec<CdfPoint>)]) -> String {
    let mut s = String::from("label,error,fraction\n");
    for (label, cdf) in series {
        for p in cdf {
            writeln!(s, "{label},{},{}", p.error, p.fraction).expect("write to String");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::office_scene;

    #[test]
    fn office_scene_round_trips() {
        let scene = office_scene();
        let back = parse_scene(&format_scene(&scene)).unwrap();
        assert_eq!(back, scene);
        assert_eq!(back.unknown_ids().count(), 6);
        let anchors: Vec<&str> = back.anchors().map(|(id, _)| id).collect();
        assert_eq!(anchors, ["AP1", "AP3", "AP7", "AP9"]);
    }

    #[test]
    fn minimal_scene_round_trips() {
        let scene = Scene::new(5.0, 5.0, vec![ApNode::anchor("a", Point2::new(1.0, 2.0))]).unwrap();
        assert_eq!(parse_scene(&format_scene(&scene)).unwrap(), scene);
    }

    #[test]
    fn scene_errors() {
        let err = parse_scene("apcal-scene 1\narea 10 10\nap A1 anchor\n").unwrap_err();
        assert!(matches!(&err, IoError::Validation(m) if m.contains("A1")), "{err}");
        assert!(matches!(
            parse_scene("apcal-scene 2\narea 1 1\n"),
            Err(IoError::Version { .. })
        ));
        assert!(matches!(
            parse_scene("apcal-scene 1\narea 10 10\nap a anchor 1 1\nap a unknown\n"),
            Err(IoError::Validation(_))
        ));
        assert!(matches!(
            parse_scene("apcal-scene 1\narea 10 10\nap a anchor 11 1\n"),
            Err(IoError::Validation(_))
        ));
        assert!(matches!(
            parse_scene("apcal-scene 1\narea 10 10\nap a anchor x 1\n"),
            Err(IoError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse_scene("apcal-scene 1\narea 10 10\nbogus\n"),
            Err(IoError::Parse { line: 3, .. })
        ));
    }

    const HEAD: &str = "apcal-log 1\n#interval_ms 500\ndevice,step,ap,distance_mm,stddev_mm\n";

    #[test]
    fn log_examples() {
        assert!(parse_ranging_log(HEAD).unwrap().is_empty());

        let t = parse_ranging_log(&format!("{HEAD}d,0,A,-350,20\n")).unwrap();
        assert_eq!(t[0].dt, 0.5);
        assert_eq!(t[0].snapshots[0].pairs[0], RangingPair::new("A", -0.35, 0.02));

        let dup = parse_ranging_log(&format!("{HEAD}d,0,A,1,1\nd,0,A,2,1\n")).unwrap_err();
        assert!(matches!(dup, IoError::DuplicateMeasurement { line: 5, .. }));

        let back = parse_ranging_log(&format!("{HEAD}d,3,A,1,1\nd,2,A,2,1\n")).unwrap_err();
        assert!(matches!(back, IoError::NonMonotonicSteps { step: 2, prev: 3, .. }));

        assert!(matches!(
            parse_ranging_log(&format!("{HEAD}d,0,A,1\n")),
            Err(IoError::Parse { line: 4, .. })
        ));
        assert!(matches!(
            parse_ranging_log(&format!("{HEAD}d,0,A,1,-5\n")),
            Err(IoError::Parse { .. })
        ));
        assert!(matches!(
            parse_ranging_log("apcal-log 9\n"),
            Err(IoError::Version { .. })
        ));
    }

    #[test]
    fn log_groups_interleaved_devices() {
        let t = parse_ranging_log(&format!(
            "{HEAD}a,0,X,1000,0\nb,0,X,2000,0\na,0,Y,3000,0\na,2,X,4000,0\n"
        ))
        .unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].snapshots.len(), 2);
        assert_eq!(t[0].snapshots[0].pairs.len(), 2);
        assert_eq!(t[0].snapshots[1].step, 2);
        assert_eq!(t[1].device_id, "b");
    }

    #[test]
    fn params_examples() {
        let mut p = ParamSet::default();
        p.calib.insert(
            "pixel1".into(),
            CalibrationPoly::new(vec![-2.3898, 0.8231, -0.0009]).unwrap(),
        );
        p.unknown_coords.insert("AP2".into(), Point2::new(0.1 + 0.2, -1e-300));
        assert_eq!(parse_params(&format_params(&p)).unwrap(), p);

        let err = parse_params("apcal-params 1\n[unknown_aps]\nAP2 1 2\n").unwrap_err();
        assert!(matches!(err, IoError::Parse { .. }));
        assert!(matches!(
            parse_params("apcal-params 1\n[devices]\nd\n"),
            Err(IoError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn trajectories_round_trip() {
        let mut t = Trajectories::new();
        t.insert(
            "d".into(),
            vec![(0, Point2::new(1.5, 2.0)), (3, Point2::new(-0.1, 1e9))],
        );
        assert_eq!(parse_trajectories(&format_trajectories(&t)).unwrap(), t);
        assert!(parse_trajectories("device,step,x,y\nd,1,0,0\nd,1,0,0\n").is_err());
    }
}
