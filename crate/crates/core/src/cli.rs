//! `apcal` command-line frontend.
//!
//! Exit codes: 0 when every output was written, 2 for bad arguments or
//! unreadable/invalid inputs, 1 when a pipeline stage fails.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::calibration::calibrate;
use crate::exec::Exec;
use crate::io::{self, IoError, Trajectories};
use crate::metrics::{empirical_cdf, summarize, CdfPoint, ErrorSummary};
use crate::model::{distance, CostWeights, DeviceTrack, FixSeries, ParamSet, Point2, Scene};
use crate::simulator::{office_scene, simulate_dataset, DistortionModel, SimConfig};
use crate::trainer::{train, GradMode, TrainError, TrainReport, TrainerConfig};
use crate::trilateration::{localize_track, Algo, LocalizerConfig};

#[derive(Debug, Parser)]
#[command(
    name = "apcal",
    version,
    about = "Unsupervised AP coordinate and FTM calibration estimation"
)]
pub struct Cli {
    /// Run every data-parallel loop on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate ranging logs and ground truth for a scene.
    Simulate(SimulateArgs),
    /// Estimate unknown AP coordinates and per-device calibrations.
    Train(TrainArgs),
    /// Localize every device of a log with given parameters.
    Locate(LocateArgs),
    /// Compute error tables and CDF series.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene file; the built-in 56 x 37 m office layout when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, short)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub devices: usize,
    /// Training steps per device.
    #[arg(long, default_value_t = 600)]
    pub steps: usize,
    /// Held-out test steps per device.
    #[arg(long, default_value_t = 480)]
    pub test_steps: usize,
    /// Measurement interval, seconds (whole milliseconds).
    #[arg(long, default_value_t = 0.5)]
    pub dt: f64,
    /// Walking speed, m/s.
    #[arg(long, default_value_t = 3.0 / 3.6)]
    pub speed: f64,
    #[arg(long, default_value_t = 8)]
    pub burst: usize,
    /// Per-reading noise std-dev, meters.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Forward distortion coefficients e0,e1,e2,...
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [3.0, 1.08, 0.003])]
    pub distortion: Vec<f64>,
    #[arg(long, default_value_t = 40.0)]
    pub range_limit: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct LocalizerArgs {
    #[arg(long, value_enum, default_value_t = Algo::Ekf)]
    pub algo: Algo,
    #[arg(long, default_value_t = 5)]
    pub k_max: usize,
    #[arg(long, default_value_t = 0.1)]
    pub std_floor: f64,
}

impl LocalizerArgs {
    fn config(&self) -> LocalizerConfig {
        LocalizerConfig {
            algo: self.algo,
            k_max: self.k_max,
            std_floor: self.std_floor,
            ..LocalizerConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Ranging logs; a device may appear in only one of them.
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
    /// Output parameter file.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Run report (JSON); defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 30)]
    pub batch_len: usize,
    /// Geometric, position and velocity cost weights.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.1, 0.1])]
    pub lambdas: Vec<f64>,
    #[command(flatten)]
    pub localizer: LocalizerArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub eval_every: usize,
    #[arg(long, value_enum, default_value_t = GradMode::FiniteDiff)]
    pub grad_mode: GradMode,
    /// Distance unit (m) of the calibration coefficients during descent.
    #[arg(long, default_value_t = 20.0)]
    pub coeff_scale: f64,
    /// Learning-rate multiplier for calibration coefficients.
    #[arg(long, default_value_t = 0.03)]
    pub coeff_rate: f64,
    /// Largest move of one iteration, meters.
    #[arg(long, default_value_t = 1.0)]
    pub max_step: f64,
    /// Apply raw gradient steps without the `--max-step` cap.
    #[arg(long)]
    pub no_step_cap: bool,
    #[arg(long, default_value_t = 2)]
    pub order: usize,
}

#[derive(Debug, Args)]
pub struct LocateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
    /// Output fixes file (`device,step,x,y`).
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub localizer: LocalizerArgs,
    /// Use the anchor APs only.
    #[arg(long)]
    pub anchors_only: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub which: EvalKind,
}

#[derive(Debug, Subcommand)]
pub enum EvalKind {
    /// Unknown-AP coordinate errors.
    ApCoords {
        /// Parameter file with true unknown-AP coordinates.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long, short)]
        out_dir: PathBuf,
    },
    /// Raw and calibrated ranging errors.
    Ranging {
        /// Scene with true coordinates for every AP.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        truth_traj: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, short)]
        out_dir: PathBuf,
    },
    /// Positioning errors of one or more fixes files.
    Positioning {
        #[arg(long)]
        truth_traj: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        fixes: Vec<PathBuf>,
        #[arg(long, short)]
        out_dir: PathBuf,
    },
}

/// A failed command: the stage that failed and whether it was an input
/// problem (exit 2) or a processing failure (exit 1).
#[derive(Debug)]
pub struct CliError {
    pub input: bool,
    pub msg: String,
}

impl CliError {
    fn input(stage: &str, e: impl fmt::Display) -> Self {
        Self {
            input: true,
            msg: format!("{stage}: {e}"),
        }
    }

    fn run(stage: &str, e: impl fmt::Display) -> Self {
        Self {
            input: false,
            msg: format!("{stage}: {e}"),
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.input {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

type Res<T> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("apcal: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Res<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match &cli.command {
        Command::Simulate(a) => simulate(a, exec),
        Command::Train(a) => train_cmd(a, exec),
        Command::Locate(a) => locate(a),
        Command::Eval(a) => eval(&a.which),
    }
}

fn load<T>(what: &str, r: Result<T, IoError>) -> Res<T> {
    r.map_err(|e| CliError::input(&format!("loading {what}"), e))
}

fn write(path: &Path, contents: &str) -> Res<()> {
    io::write_atomic(path, contents).map_err(|e| CliError::run("writing output", e))
}

fn make_dir(dir: &Path) -> Res<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::run("creating output directory", format!("{}: {e}", dir.display())))
}

fn interval_ms(dt: f64) -> Option<u64> {
    let ms = dt * 1000.0;
    (dt > 0.0 && (ms - ms.round()).abs() < 1e-9).then(|| ms.round() as u64)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn simulate(a: &SimulateArgs, exec: Exec) -> Res<()> {
    let scene = match &a.scene {
        Some(p) => load("scene", io::load_scene(p))?,
        None => office_scene(),
    };
    if interval_ms(a.dt).is_none() {
        return Err(CliError::input(
            "simulate",
            "--dt must be a positive whole number of milliseconds",
        ));
    }
    let model = DistortionModel::new(a.distortion.clone(), a.noise, a.burst, a.range_limit)
        .map_err(|e| CliError::input("simulate", e))?;
    let cfg = SimConfig {
        devices: a.devices,
        steps: a.steps,
        test_steps: a.test_steps,
        dt: a.dt,
        speed: a.speed,
        model,
        seed: a.seed,
    };
    let ds = simulate_dataset(&scene, &cfg, exec).map_err(|e| CliError::run("simulate", e))?;

    make_dir(&a.out_dir)?;
    let out = |name: &str| a.out_dir.join(name);
    write(&out("scene.txt"), &io::format_scene(&scene))?;
    write(&out("train.log"), &io::format_ranging_log(&ds.train, a.dt))?;
    write(&out("test.log"), &io::format_ranging_log(&ds.test, a.dt))?;
    write(
        &out("truth_train.csv"),
        &io::format_trajectories(&io::truth_series(&ds.train)),
    )?;
    write(
        &out("truth_test.csv"),
        &io::format_trajectories(&io::truth_series(&ds.test)),
    )?;
    write(&out("truth.params"), &io::format_params(&ds.truth))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_logs(paths: &[PathBuf]) -> Res<Vec<DeviceTrack>> {
    let mut tracks: Vec<DeviceTrack> = Vec::new();
    let mut seen = BTreeSet::new();
    for p in paths {
        for t in load("ranging log", io::load_ranging_log(p))? {
            if !seen.insert(t.device_id.clone()) {
                return Err(CliError::input(
                    "loading ranging log",
                    format!("device `{}` appears in more than one log", t.device_id),
                ));
            }
            tracks.push(t);
        }
    }
    Ok(tracks)
}

#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a TrainerConfig,
    status: String,
    report: &'a TrainReport,
}

fn train_config(a: &TrainArgs, exec: Exec) -> Res<TrainerConfig> {
    let [geometric, position, velocity] = a.lambdas[..] else {
        return Err(CliError::input("train", "--lambdas takes exactly three values"));
    };
    let cfg = TrainerConfig {
        learning_rate: a.alpha,
        iterations: a.iters,
        batch_len: a.batch_len,
        weights: CostWeights {
            geometric,
            position,
            velocity,
        },
        localizer: a.localizer.config(),
        seed: a.seed,
        grad_mode: a.grad_mode,
        eval_every: a.eval_every,
        coeff_scale: a.coeff_scale,
        coeff_rate: a.coeff_rate,
        max_step: (!a.no_step_cap).then_some(a.max_step),
        poly_order: a.order,
        exec,
        ..TrainerConfig::default()
    };
    cfg.validate().map_err(|e| CliError::input("train", e))?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs, exec: Exec) -> Res<()> {
    let cfg = train_config(a, exec)?;
    let scene = load("scene", io::load_scene(&a.scene))?;
    let tracks = load_logs(&a.logs)?;
    if tracks.is_empty() {
        return Err(CliError::input("train", "the logs contain no devices"));
    }
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    let write_report = |status: String, report: &TrainReport| -> Res<()> {
        let json = serde_json::to_string_pretty(&RunReport {
            config: &cfg,
            status,
            report,
        })
        .map_err(|e| CliError::run("writing report", e))?;
        write(&report_path, &(json + "\n"))
    };
    match train(&tracks, &scene, &cfg) {
        Ok((params, report)) => {
            write(&a.out, &io::format_params(&params))?;
            write_report("ok".into(), &report)
        }
        Err(TrainError::Aborted {
            iteration,
            reason,
            report,
        }) => {
            write_report(format!("aborted at iteration {iteration}: {reason}"), &report)?;
            Err(CliError::run(
                "train",
                format!("aborted at iteration {iteration}: {reason}"),
            ))
        }
        Err(e) => Err(CliError::run("train", e)),
    }
}

// ---------------------------------------------------------------------------
// locate
// ---------------------------------------------------------------------------

/// Localizes every track in device-id order.
pub fn locate_all(
    tracks: &[DeviceTrack],
    scene: &Scene,
    params: &ParamSet,
    cfg: &LocalizerConfig,
) -> Result<BTreeMap<String, FixSeries>, crate::trilateration::LocalizeError> {
    let mut out = BTreeMap::new();
    for t in tracks {
        out.insert(t.device_id.clone(), localize_track(t, scene, params, cfg)?);
    }
    Ok(out)
}

fn locate(a: &LocateArgs) -> Res<()> {
    let mut scene = load("scene", io::load_scene(&a.scene))?;
    let params = load("parameters", io::load_params(&a.params))?;
    let mut tracks = load("ranging log", io::load_ranging_log(&a.log))?;
    if a.anchors_only {
        scene = scene.anchors_only();
        let anchors: BTreeSet<String> = scene.anchors().map(|(id, _)| id.to_string()).collect();
        tracks = tracks.iter().map(|t| t.retain_aps(|ap| anchors.contains(ap))).collect();
    }
    let fixes = locate_all(&tracks, &scene, &params, &a.localizer.config()).map_err(|e| CliError::run("locate", e))?;
    write(&a.out, &io::format_trajectories(&io::fixes_to_series(&fixes)))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Default)]
struct Tables {
    rows: Vec<(String, ErrorSummary)>,
    cdfs: Vec<(String, Vec<CdfPoint>)>,
}

impl Tables {
    fn add(&mut self, label: String, errors: &[f64]) -> Res<()> {
        let s = summarize(errors).map_err(|e| CliError::run("eval", format!("{label}: {e}")))?;
        self.rows.push((label.clone(), s));
        self.cdfs.push((label, empirical_cdf(errors)));
        Ok(())
    }

    fn write(&self, dir: &Path, kind: &str) -> Res<()> {
        make_dir(dir)?;
        write(
            &dir.join(format!("{kind}_metrics.csv")),
            &io::format_metrics(&self.rows),
        )?;
        write(&dir.join(format!("{kind}_cdf.csv")), &io::format_cdf(&self.cdfs))
    }
}

fn step_lookup(truth: &Trajectories, device: &str) -> Res<BTreeMap<usize, Point2>> {
    truth
        .get(device)
        .map(|s| s.iter().copied().collect())
        .ok_or_else(|| CliError::run("eval", format!("no ground truth for device `{device}`")))
}

fn eval(which: &EvalKind) -> Res<()> {
    match which {
        EvalKind::ApCoords {
            truth,
            estimate,
            out_dir,
        } => {
            let truth = load("truth parameters", io::load_params(truth))?.unknown_coords;
            let est = load("estimated parameters", io::load_params(estimate))?.unknown_coords;
            crate::metrics::coord_errors(&est, &truth).map_err(|e| CliError::run("eval ap-coords", e))?;
            let mut t = Tables::default();
            let errors: Vec<f64> = est.iter().map(|(id, &p)| distance(p, truth[id])).collect();
            for ((id, _), e) in est.iter().zip(&errors) {
                t.add(id.clone(), &[*e])?;
            }
            t.add("all".into(), &errors)?;
            t.write(out_dir, "ap_coords")
        }
        EvalKind::Ranging {
            scene,
            log,
            truth_traj,
            params,
            out_dir,
        } => {
            let scene = load("scene", io::load_scene(scene))?;
            let aps = scene
                .true_positions()
                .ok_or_else(|| CliError::input("eval ranging", "scene must give true coordinates for every AP"))?;
            let tracks = load("ranging log", io::load_ranging_log(log))?;
            let truth = load("truth trajectories", io::load_trajectories(truth_traj))?;
            let params = load("parameters", io::load_params(params))?;
            let mut t = Tables::default();
            let (mut raw_all, mut cal_all) = (Vec::new(), Vec::new());
            for track in &tracks {
                let poly = params.calib.get(&track.device_id).ok_or_else(|| {
                    CliError::run(
                        "eval ranging",
                        format!("no calibration for device `{}`", track.device_id),
                    )
                })?;
                let at = step_lookup(&truth, &track.device_id)?;
                let (mut raw, mut cal) = (Vec::new(), Vec::new());
                for snap in &track.snapshots {
                    let p = at.get(&snap.step).ok_or_else(|| {
                        CliError::run(
                            "eval ranging",
                            format!("device `{}` step {} has no ground truth", track.device_id, snap.step),
                        )
                    })?;
                    for pair in &snap.pairs {
                        let a = aps.get(&pair.ap_id).ok_or_else(|| {
                            CliError::run("eval ranging", format!("AP `{}` is not in the scene", pair.ap_id))
                        })?;
                        let d = distance(*a, *p);
                        raw.push((pair.d_ftm - d).abs());
                        cal.push((calibrate(poly, pair.d_ftm) - d).abs());
                    }
                }
                t.add(format!("raw/{}", track.device_id), &raw)?;
                t.add(format!("calibrated/{}", track.device_id), &cal)?;
                raw_all.extend(raw);
                cal_all.extend(cal);
            }
            t.add("raw".into(), &raw_all)?;
            t.add("calibrated".into(), &cal_all)?;
            t.write(out_dir, "ranging")
        }
        EvalKind::Positioning {
            truth_traj,
            fixes,
            out_dir,
        } => {
            let truth = load("truth trajectories", io::load_trajectories(truth_traj))?;
            let mut t = Tables::default();
            for path in fixes {
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let series = load("fixes", io::load_trajectories(path))?;
                let mut all = Vec::new();
                for (dev, pts) in &series {
                    let at = step_lookup(&truth, dev)?;
                    let mut errors = Vec::with_capacity(pts.len());
                    for (step, p) in pts {
                        let q = at.get(step).ok_or_else(|| {
                            CliError::run(
                                "eval positioning",
                                format!("{label}: device `{dev}` step {step} has no ground truth"),
                            )
                        })?;
                        errors.push(distance(*p, *q));
                    }
                    t.add(format!("{label}/{dev}"), &errors)?;
                    all.extend(errors);
                }
                t.add(label, &all)?;
            }
            t.write(out_dir, "positioning")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_defaults_match_library_defaults() {
        let cli = Cli::try_parse_from(["apcal", "train", "--scene", "s", "-o", "p", "log"]).unwrap();
        let Command::Train(a) = cli.command else {
            panic!("train expected")
        };
        let cfg = train_config(&a, Exec::default()).unwrap();
        assert_eq!(cfg, TrainerConfig::default());
    }

    #[test]
    fn simulate_defaults_match_library_defaults() {
        let cli = Cli::try_parse_from(["apcal", "simulate", "-o", "d"]).unwrap();
        let Command::Simulate(a) = cli.command else {
            panic!("simulate expected")
        };
        let d = SimConfig::default();
        assert_eq!(
            (a.devices, a.steps, a.test_steps, a.dt, a.speed, a.seed),
            (d.devices, d.steps, d.test_steps, d.dt, d.speed, d.seed)
        );
        assert_eq!(
            (a.distortion, a.noise, a.burst, a.range_limit),
            (
                d.model.forward,
                d.model.noise_sigma,
                d.model.burst_size,
                d.model.range_limit
            )
        );
    }

    #[test]
    fn lambdas_need_three_values() {
        let cli =
            Cli::try_parse_from(["apcal", "train", "--scene", "s", "-o", "p", "--lambdas", "1,2", "log"]).unwrap();
        let Command::Train(a) = cli.command else {
            panic!("train expected")
        };
        assert_eq!(train_config(&a, Exec::Sequential).unwrap_err().exit_code(), 2);
    }
}
