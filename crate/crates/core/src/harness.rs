//! Scenario configuration, reference generation, metrics and the batch
//! runner behind the command-line tool.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{RobotParams, State};
use crate::estimator::{CompensationMode, EstimatorConfig};
use crate::gait::{GaitKind, GaitSpec};
use crate::mpc::{MpcWeights, ReferenceTrajectory};
use crate::qp::QpSettings;
use crate::sim::{run_episode, DisturbanceSpec, EpisodeSetup, SimConfig, SimError, TrajectoryLog, VX};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("t = {t} s is outside the profile [0, {end}] s")]
    TimeOutOfRange { t: f64, end: f64 },
    #[error("invalid velocity profile: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    ConfigParse(String),
    #[error("log is empty")]
    EmptyLog,
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// Constant commanded forward velocity over a stretch of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration: f64,
    pub v_x: f64,
    pub gait: GaitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityProfile {
    pub segments: Vec<Segment>,
}

impl VelocityProfile {
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.segments.is_empty() {
            return Err(ProfileError::Invalid("no segments".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.duration > 0.0) || !s.v_x.is_finite() {
                return Err(ProfileError::Invalid(format!(
                    "segment {i} needs a positive duration and finite velocity"
                )));
            }
            s.gait
                .validate()
                .map_err(|e| ProfileError::Invalid(format!("segment {i}: {e}")))?;
        }
        Ok(())
    }

    fn check(&self, t: f64) -> Result<(), ProfileError> {
        let end = self.duration();
        if !(t >= 0.0 && t <= end + 1e-9) {
            return Err(ProfileError::TimeOutOfRange { t, end });
        }
        Ok(())
    }

    /// Segment active at `t`. Segment starts belong to the new segment; the
    /// end of the profile belongs to the last one.
    pub fn segment_at(&self, t: f64) -> Result<&Segment, ProfileError> {
        self.check(t)?;
        Ok(self.segment_clamped(t))
    }

    fn segment_clamped(&self, t: f64) -> &Segment {
        let mut start = 0.0;
        for s in &self.segments {
            if t < start + s.duration {
                return s;
            }
            start += s.duration;
        }
        self.segments.last().expect("profile has segments")
    }

    /// Distance covered by the command from 0 to `t`. Past the end the last
    /// velocity continues.
    pub fn distance(&self, t: f64) -> f64 {
        let mut start = 0.0;
        let mut x = 0.0;
        for s in &self.segments {
            let span = (t - start).clamp(0.0, s.duration);
            x += s.v_x * span;
            start += s.duration;
        }
        if t > start {
            x += self.segments.last().map_or(0.0, |s| s.v_x) * (t - start);
        }
        x
    }

    fn state_unchecked(&self, t: f64, p: Vector3<f64>, yaw: f64) -> State {
        State {
            theta: Vector3::new(0.0, 0.0, yaw),
            p,
            omega: Vector3::zeros(),
            v: Vector3::new(self.segment_clamped(t).v_x, 0.0, 0.0),
        }
    }
}

/// Horizontal reference position at `t` for a run that started at `origin`:
/// the integrated command, kept within `leash` of the measured position `p`
/// per axis. `None` leaves it unbounded.
pub fn leashed_position(
    profile: &VelocityProfile,
    t: f64,
    origin: &Vector3<f64>,
    p: &Vector3<f64>,
    leash: Option<f64>,
) -> Vector3<f64> {
    let target = origin + Vector3::x() * profile.distance(t);
    match leash {
        None => target,
        Some(l) => Vector3::new(
            p.x + (target.x - p.x).clamp(-l, l),
            p.y + (target.y - p.y).clamp(-l, l),
            target.z,
        ),
    }
}

/// Reference state at `t`, positioned at `p` with heading `yaw` and the CoM
/// at `height`.
pub fn reference_state(
    profile: &VelocityProfile,
    t: f64,
    p: &Vector3<f64>,
    yaw: f64,
    height: f64,
) -> Result<State, ProfileError> {
    profile.check(t)?;
    Ok(profile.state_unchecked(t, Vector3::new(p.x, p.y, height), yaw))
}

/// Reference states at `t + i·dt`, `i = 1..=k`, starting from position `p`
/// at `t` and integrating the commanded velocity. The horizon may run past
/// the end of the profile; it then extrapolates the last segment.
pub fn generate_reference(
    profile: &VelocityProfile,
    t: f64,
    k: usize,
    dt: f64,
    p: &Vector3<f64>,
    yaw: f64,
    height: f64,
) -> Result<ReferenceTrajectory, ProfileError> {
    profile.check(t)?;
    let start = profile.distance(t);
    Ok(ReferenceTrajectory {
        states: (1..=k)
            .map(|i| {
                let ti = t + i as f64 * dt;
                let pi = Vector3::new(p.x + profile.distance(ti) - start, p.y, height);
                profile.state_unchecked(ti, pi, yaw).to_vector()
            })
            .collect(),
    })
}

/// Mean squared error of one state channel against its reference.
pub fn compute_mse(log: &TrajectoryLog, channel: usize) -> Result<f64, HarnessError> {
    if log.rows.is_empty() {
        return Err(HarnessError::EmptyLog);
    }
    let sum: f64 = log
        .rows
        .iter()
        .map(|r| (r.reference[channel] - r.state[channel]).powi(2))
        .sum();
    Ok(sum / log.rows.len() as f64)
}

/// Mean over samples of the squared full-state error.
pub fn compute_state_mse(log: &TrajectoryLog) -> Result<f64, HarnessError> {
    if log.rows.is_empty() {
        return Err(HarnessError::EmptyLog);
    }
    let sum: f64 = log
        .rows
        .iter()
        .map(|r| (r.reference - r.state).norm_squared())
        .sum();
    Ok(sum / log.rows.len() as f64)
}

/// Writes `t, vx_cmd, vx_meas`.
pub fn export_plot_data<W: Write>(log: &TrajectoryLog, writer: W) -> Result<(), HarnessError> {
    if log.rows.is_empty() {
        return Err(HarnessError::EmptyLog);
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "vx_cmd", "vx_meas"])?;
    for r in &log.rows {
        w.write_record([r.t.to_string(), r.reference[VX].to_string(), r.state[VX].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub disturbance: DisturbanceSpec,
}

impl Scenario {
    pub fn new(id: &str, frequency: f64, d_static: f64, amplitude: f64) -> Self {
        Scenario {
            id: id.to_string(),
            disturbance: DisturbanceSpec::along_x(frequency, d_static, amplitude),
        }
    }

    /// Static part projected on the disturbance axis, N.
    pub fn d_static(&self) -> f64 {
        self.disturbance.d_static.dot(&self.disturbance.axis)
    }
}

/// The six reference scenarios: (frequency Hz, static N, amplitude N).
pub fn default_scenarios() -> Vec<Scenario> {
    vec![
        Scenario::new("1", 0.33, 0.0, 15.0),
        Scenario::new("2", 0.33, 0.0, 10.0),
        Scenario::new("3", 0.33, -10.0, 0.0),
        Scenario::new("4", 0.33, -7.0, 10.0),
        Scenario::new("5", 0.33, -10.0, 15.0),
        Scenario::new("6", 0.5, -10.0, 15.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaitConfig {
    pub stand: GaitSpec,
    pub trot: GaitSpec,
}

impl Default for GaitConfig {
    fn default() -> Self {
        GaitConfig {
            stand: GaitSpec::stand(),
            trot: GaitSpec::trot(0.6, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSegment {
    pub duration: f64,
    pub v_x: f64,
    pub gait: GaitKind,
}

fn default_profile() -> Vec<ProfileSegment> {
    vec![
        ProfileSegment { duration: 10.0, v_x: 0.0, gait: GaitKind::Stand },
        ProfileSegment { duration: 10.0, v_x: 0.3, gait: GaitKind::Trot },
        ProfileSegment { duration: 10.0, v_x: 0.6, gait: GaitKind::Trot },
    ]
}

/// The whole experiment as one JSON document. Every field has a default, so
/// `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub robot: RobotParams,
    pub gait: GaitConfig,
    pub mpc: MpcWeights,
    pub qp: QpSettings,
    pub estimator: EstimatorConfig,
    pub sim: SimConfig,
    pub profile: Vec<ProfileSegment>,
    /// Largest horizontal lead of the position reference over the CoM, m.
    /// `null` integrates the command from the start position without bound.
    pub position_leash: Option<f64>,
    pub scenarios: Vec<Scenario>,
    /// Kept for reproducibility records; the pipeline is noise-free.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            robot: RobotParams::default(),
            gait: GaitConfig::default(),
            mpc: MpcWeights::default(),
            qp: QpSettings::default(),
            estimator: EstimatorConfig::default(),
            sim: SimConfig::default(),
            profile: default_profile(),
            position_leash: Some(0.05),
            scenarios: default_scenarios(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::ConfigParse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |e: String| HarnessError::ConfigParse(e);
        self.mpc.validate().map_err(|e| bad(e.to_string()))?;
        self.estimator.validate().map_err(|e| bad(e.to_string()))?;
        self.robot.inertia_inv().map_err(|e| bad(e.to_string()))?;
        self.velocity_profile().validate()?;
        self.sim.substeps(self.mpc.dt).map_err(|e| bad(e.to_string()))?;
        if self.position_leash.is_some_and(|l| !(l >= 0.0)) {
            return Err(bad("position_leash must be ≥ 0".into()));
        }
        if (self.estimator.dt - self.mpc.dt).abs() > 1e-12 {
            return Err(bad("estimator.dt must equal mpc.dt (one sample per control step)".into()));
        }
        let mut ids: Vec<&str> = self.scenarios.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("scenario ids must be unique".into()));
        }
        for s in &self.scenarios {
            s.disturbance.validate().map_err(|e| bad(format!("scenario {}: {e}", s.id)))?;
        }
        Ok(())
    }

    pub fn velocity_profile(&self) -> VelocityProfile {
        VelocityProfile {
            segments: self
                .profile
                .iter()
                .map(|s| Segment {
                    duration: s.duration,
                    v_x: s.v_x,
                    gait: match s.gait {
                        GaitKind::Stand => self.gait.stand.clone(),
                        GaitKind::Trot => self.gait.trot.clone(),
                    },
                })
                .collect(),
        }
    }

    pub fn episode_setup(&self, scenario: &Scenario) -> EpisodeSetup {
        EpisodeSetup {
            robot: self.robot.clone(),
            mpc: self.mpc.clone(),
            qp: self.qp,
            estimator: self.estimator.clone(),
            sim: self.sim.clone(),
            profile: self.velocity_profile(),
            position_leash: self.position_leash,
            disturbance: scenario.disturbance,
        }
    }

    pub fn scenario(&self, id: &str) -> Result<&Scenario, HarnessError> {
        self.scenarios
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| HarnessError::UnknownScenario(id.to_string()))
    }
}

/// One cell of the scenario × mode matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub frequency_hz: f64,
    pub d_static_n: f64,
    pub amplitude_n: f64,
    pub mode: CompensationMode,
    /// 1000 × MSE of forward velocity.
    pub mse_vx_x1000: f64,
    pub failed: bool,
    /// Full-state MSE with unit weights. Diagnostic only, not part of the
    /// forward-velocity comparison.
    pub diag_state_mse: f64,
}

impl MetricsRow {
    pub fn from_log(scenario: &Scenario, mode: CompensationMode, log: &TrajectoryLog) -> Result<Self, HarnessError> {
        Ok(MetricsRow {
            scenario: scenario.id.clone(),
            frequency_hz: scenario.disturbance.frequency,
            d_static_n: scenario.d_static(),
            amplitude_n: scenario.disturbance.amplitude,
            mode,
            mse_vx_x1000: 1000.0 * compute_mse(log, VX)?,
            failed: log.failed(),
            diag_state_mse: compute_state_mse(log)?,
        })
    }
}

pub fn episode_file(id: &str, mode: CompensationMode) -> String {
    format!("episode_{id}_{mode}.csv")
}

pub fn plot_file(id: &str, mode: CompensationMode) -> String {
    format!("plot_{id}_{mode}.csv")
}

pub const MATRIX_FILE: &str = "matrix.csv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Restrict to one scenario id.
    pub scenario: Option<String>,
    /// Restrict to one mode.
    pub mode: Option<CompensationMode>,
    /// Directory for matrix, episode and plot CSVs.
    pub out: Option<PathBuf>,
    /// Worker threads; 0 picks the rayon default.
    pub parallel: usize,
}

/// Runs every selected (scenario, mode) pair. Rows come back ordered by
/// scenario as configured, then off/static/periodic, regardless of the
/// thread count. A failed episode yields a flagged row and the run goes on.
pub fn run_scenario_matrix(
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<Vec<MetricsRow>, HarnessError> {
    config.validate()?;
    let scenarios: Vec<&Scenario> = match &options.scenario {
        Some(id) => vec![config.scenario(id)?],
        None => config.scenarios.iter().collect(),
    };
    let modes: Vec<CompensationMode> = match options.mode {
        Some(m) => vec![m],
        None => CompensationMode::ALL.to_vec(),
    };
    let jobs: Vec<(&Scenario, CompensationMode)> = scenarios
        .iter()
        .flat_map(|s| modes.iter().map(move |m| (*s, *m)))
        .collect();
    if let Some(dir) = &options.out {
        std::fs::create_dir_all(dir)?;
    }

    let run = || -> Result<Vec<MetricsRow>, HarnessError> {
        jobs.par_iter()
            .map(|(scenario, mode)| {
                let log = run_episode(&config.episode_setup(scenario), *mode)?;
                if let Some(dir) = &options.out {
                    log.save(&dir.join(episode_file(&scenario.id, *mode)))?;
                    if !log.rows.is_empty() {
                        let file = std::fs::File::create(dir.join(plot_file(&scenario.id, *mode)))?;
                        export_plot_data(&log, std::io::BufWriter::new(file))?;
                    }
                }
                MetricsRow::from_log(scenario, *mode, &log)
            })
            .collect()
    };
    let rows = if options.parallel > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallel)
            .build()
            .map_err(|e| HarnessError::ConfigParse(e.to_string()))?
            .install(run)?
    } else {
        run()?
    };

    if let Some(dir) = &options.out {
        let file = std::fs::File::create(dir.join(MATRIX_FILE))?;
        write_matrix_csv(&rows, std::io::BufWriter::new(file))?;
    }
    Ok(rows)
}

pub fn write_matrix_csv<W: Write>(rows: &[MetricsRow], writer: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record([
            "scenario", "frequency_hz", "d_static_n", "amplitude_n", "mode", "mse_vx_x1000", "failed",
            "diag_state_mse",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(reader: R) -> Result<Vec<MetricsRow>, HarnessError> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| HarnessError::Schema(e.to_string()))
}

/// Recomputes every row of `dir/matrix.csv` from the stored episode logs.
pub fn recompute_metrics(dir: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let file = std::fs::File::open(dir.join(MATRIX_FILE))?;
    let stored = read_matrix_csv(std::io::BufReader::new(file))?;
    stored
        .into_iter()
        .map(|row| {
            let log = TrajectoryLog::load(&dir.join(episode_file(&row.scenario, row.mode)))?;
            let scenario = Scenario::new(&row.scenario, row.frequency_hz, row.d_static_n, row.amplitude_n);
            MetricsRow::from_log(&scenario, row.mode, &log)
        })
        .collect()
}

/// Plain-text table, one line per scenario with the three modes side by side.
pub fn format_table(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>7} {:>8} {:>8} {:>10} {:>10} {:>10}",
        "scenario", "f [Hz]", "d [N]", "A [N]", "off", "static", "periodic"
    );
    let mut ids: Vec<&str> = Vec::new();
    for r in rows {
        if !ids.contains(&r.scenario.as_str()) {
            ids.push(&r.scenario);
        }
    }
    for id in ids {
        let group: Vec<&MetricsRow> = rows.iter().filter(|r| r.scenario == id).collect();
        let cell = |mode| {
            group
                .iter()
                .find(|r| r.mode == mode)
                .map_or("-".to_string(), |r| {
                    format!("{:.3}{}", r.mse_vx_x1000, if r.failed { "!" } else { "" })
                })
        };
        let g = group[0];
        let _ = writeln!(
            out,
            "{:<8} {:>7.2} {:>8.1} {:>8.1} {:>10} {:>10} {:>10}",
            id,
            g.frequency_hz,
            g.d_static_n,
            g.amplitude_n,
            cell(CompensationMode::Off),
            cell(CompensationMode::Static),
            cell(CompensationMode::Periodic)
        );
    }
    out
}

/// Smallest amplitude at which periodic compensation must win, N.
pub const ORDERING_MIN_AMPLITUDE: f64 = 10.0;
/// Required reduction of periodic over static.
pub const MIN_IMPROVEMENT_OVER_STATIC: f64 = 0.30;
/// Allowed excess of periodic over the best mode without a periodic part.
pub const STATIC_PARITY_TOLERANCE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn mse_of<'a>(rows: &'a [MetricsRow], id: &str, mode: CompensationMode) -> Option<&'a MetricsRow> {
    rows.iter().find(|r| r.scenario == id && r.mode == mode)
}

/// Ordering checks over a full matrix:
/// - every scenario with amplitude ≥ 10 N: periodic beats static by ≥ 30 %
///   and beats off;
/// - every scenario with a static part only: periodic within 25 % of the
///   best mode;
/// - scenarios sharing (d, A) at different frequencies: the static/periodic
///   ratio does not shrink as frequency grows.
pub fn check_orderings(rows: &[MetricsRow]) -> Vec<OrderingCheck> {
    use CompensationMode::*;
    let mut checks = Vec::new();
    let mut ids: Vec<&MetricsRow> = Vec::new();
    for r in rows {
        if !ids.iter().any(|x| x.scenario == r.scenario) {
            ids.push(r);
        }
    }
    let triple = |id: &str| -> Option<(f64, f64, f64, bool)> {
        let (o, s, p) = (mse_of(rows, id, Off)?, mse_of(rows, id, Static)?, mse_of(rows, id, Periodic)?);
        Some((o.mse_vx_x1000, s.mse_vx_x1000, p.mse_vx_x1000, o.failed || s.failed || p.failed))
    };

    for head in &ids {
        let id = head.scenario.as_str();
        let Some((off, stat, per, failed)) = triple(id) else { continue };
        if head.amplitude_n >= ORDERING_MIN_AMPLITUDE {
            let improvement = 1.0 - per / stat;
            let passed = !failed && per < stat && per < off && improvement >= MIN_IMPROVEMENT_OVER_STATIC;
            checks.push(OrderingCheck {
                name: format!("scenario {id}: periodic beats static by ≥30% and beats off"),
                passed,
                detail: format!(
                    "off {off:.3}, static {stat:.3}, periodic {per:.3}, improvement {:.1}%",
                    100.0 * improvement
                ),
            });
        } else if head.amplitude_n == 0.0 && head.d_static_n != 0.0 {
            let best = off.min(stat).min(per);
            let excess = per / best - 1.0;
            checks.push(OrderingCheck {
                name: format!("scenario {id}: periodic within 25% of best mode"),
                passed: !failed && excess <= STATIC_PARITY_TOLERANCE,
                detail: format!(
                    "off {off:.3}, static {stat:.3}, periodic {per:.3}, excess {:.1}%",
                    100.0 * excess
                ),
            });
        }
    }

    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            let same = a.d_static_n == b.d_static_n && a.amplitude_n == b.amplitude_n;
            if !same || a.amplitude_n < ORDERING_MIN_AMPLITUDE || a.frequency_hz == b.frequency_hz {
                continue;
            }
            let (lo, hi) = if a.frequency_hz < b.frequency_hz { (a, b) } else { (b, a) };
            let (Some(l), Some(h)) = (triple(&lo.scenario), triple(&hi.scenario)) else {
                continue;
            };
            let (f_lo, f_hi) = (l.1 / l.2, h.1 / h.2);
            checks.push(OrderingCheck {
                name: format!(
                    "scenarios {} vs {}: improvement factor grows with frequency",
                    lo.scenario, hi.scenario
                ),
                passed: !l.3 && !h.3 && f_hi >= f_lo,
                detail: format!(
                    "{:.2} Hz: {f_lo:.2}x, {:.2} Hz: {f_hi:.2}x",
                    lo.frequency_hz, hi.frequency_hz
                ),
            });
        }
    }
    checks
}
