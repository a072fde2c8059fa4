//! Rigid-body truth simulator and the closed control loop.
//!
//! The truth model keeps everything the MPC model drops: the gyroscopic
//! term, the exact attitude kinematics and the actual foot positions. Linear
//! motion uses semi-implicit Euler. Rotation is advanced through the world
//! angular momentum, which makes torque-free motion conserve it exactly.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DVector, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    euler_from_rotation, rotation_world_body, DiscreteModel, DynamicsError, RobotParams, State,
    StateVector, LEG_COUNT, STATE_DIM,
};
use crate::estimator::{CompensationMode, DisturbanceEstimator, EstimatorConfig, EstimatorError};
use crate::gait::{plan_footholds, ContactPlan, ContactStep, FootholdTracker};
use crate::harness::{generate_reference, reference_state, leashed_position, ProfileError, VelocityProfile};
use crate::mpc::{mpc_step, MpcError, MpcWeights};
use crate::qp::QpSettings;

/// Any state entry beyond this aborts the episode.
pub const BLOWUP_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("numerical blow-up at t = {t:.3} s")]
    NumericalBlowup { t: f64 },
    #[error("invalid simulation setup: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("log CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// `d_static + amplitude·sin(2π·frequency·t)·axis`, applied at the CoM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisturbanceSpec {
    /// World frame, N.
    pub d_static: Vector3<f64>,
    /// N.
    pub amplitude: f64,
    /// Hz.
    pub frequency: f64,
    pub axis: Vector3<f64>,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        DisturbanceSpec {
            d_static: Vector3::zeros(),
            amplitude: 0.0,
            frequency: 0.0,
            axis: Vector3::x(),
        }
    }
}

impl DisturbanceSpec {
    /// Force along world x with the given static part.
    pub fn along_x(frequency: f64, d_static: f64, amplitude: f64) -> Self {
        DisturbanceSpec {
            d_static: Vector3::new(d_static, 0.0, 0.0),
            amplitude,
            frequency,
            axis: Vector3::x(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.frequency >= 0.0) || !self.amplitude.is_finite() {
            return Err(SimError::InvalidConfig(
                "disturbance frequency must be ≥ 0 and amplitude finite".into(),
            ));
        }
        if (self.axis.norm() - 1.0).abs() > 1e-9 {
            return Err(SimError::InvalidConfig("disturbance axis must be a unit vector".into()));
        }
        Ok(())
    }
}

pub fn apply_disturbance(spec: &DisturbanceSpec, t: f64) -> Vector3<f64> {
    spec.d_static + spec.axis * (spec.amplitude * (std::f64::consts::TAU * spec.frequency * t).sin())
}

/// One truth step. `footholds` are world positions; swing feet must carry
/// zero force.
pub fn step_truth(
    x: &State,
    foot_forces: &[Vector3<f64>; LEG_COUNT],
    footholds: &[Vector3<f64>; LEG_COUNT],
    ext_force: &Vector3<f64>,
    params: &RobotParams,
    dt: f64,
) -> Result<State, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::Dynamics(DynamicsError::InvalidTimestep(dt)));
    }
    let inertia = params.inertia();
    let inertia_inv = params.inertia_inv()?;

    let mut force = *ext_force;
    let mut torque = Vector3::zeros();
    for (f, foot) in foot_forces.iter().zip(footholds) {
        force += f;
        torque += (foot - x.p).cross(f);
    }

    let v = x.v + (params.gravity + force / params.mass) * dt;
    let p = x.p + v * dt;

    let rot = rotation_world_body(&x.theta);
    let momentum = rot * (inertia * x.omega) + torque * dt;
    let omega_world = rot * inertia_inv * rot.transpose() * momentum;
    let rot_next = Rotation3::new(omega_world * dt).into_inner() * rot;
    let omega = inertia_inv * rot_next.transpose() * momentum;
    let mut theta = euler_from_rotation(&rot_next);
    // keep yaw continuous across ±π
    theta.z = x.theta.z + crate::estimator::wrap_angle(theta.z - x.theta.z);

    Ok(State { theta, p, omega, v })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Truth integration step, s.
    pub dt_sim: f64,
    /// Episode length, s. Zero means the length of the velocity profile.
    pub duration: f64,
    /// Starting state; `None` stands the robot at rest at the nominal height.
    pub initial: Option<State>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_sim: 1e-3,
            duration: 0.0,
            initial: None,
        }
    }
}

impl SimConfig {
    /// Truth steps per control step.
    pub fn substeps(&self, dt_mpc: f64) -> Result<usize, SimError> {
        let ratio = dt_mpc / self.dt_sim;
        let n = ratio.round();
        if !(self.dt_sim > 0.0) || n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(SimError::InvalidConfig(format!(
                "dt_sim = {} does not divide dt_mpc = {dt_mpc}",
                self.dt_sim
            )));
        }
        Ok(n as usize)
    }
}

/// Everything one closed-loop run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSetup {
    pub robot: RobotParams,
    pub mpc: MpcWeights,
    pub qp: QpSettings,
    pub estimator: EstimatorConfig,
    pub sim: SimConfig,
    pub profile: VelocityProfile,
    /// See [`crate::harness::ExperimentConfig::position_leash`].
    pub position_leash: Option<f64>,
    pub disturbance: DisturbanceSpec,
}

impl EpisodeSetup {
    pub fn duration(&self) -> f64 {
        if self.sim.duration > 0.0 {
            self.sim.duration
        } else {
            self.profile.duration()
        }
    }

    pub fn initial_state(&self) -> State {
        self.sim.initial.unwrap_or_else(|| {
            State::at_rest(Vector3::new(0.0, 0.0, self.robot.nominal_height))
        })
    }
}

/// One log sample, taken at the start of a control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub state: StateVector,
    pub reference: StateVector,
    pub grf: [Vector3<f64>; LEG_COUNT],
    pub disturbance: Vector3<f64>,
    pub xi: Vector6<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
    /// Why the episode stopped early, if it did.
    pub failure: Option<String>,
}

const STATE_NAMES: [&str; STATE_DIM] = [
    "roll", "pitch", "yaw", "px", "py", "pz", "wx", "wy", "wz", "vx", "vy", "vz",
];
const LEG_PREFIX: [&str; LEG_COUNT] = ["fl", "fr", "rl", "rr"];
const XI_NAMES: [&str; 6] = ["fx", "fy", "fz", "tx", "ty", "tz"];

/// Index of state channel `vx` in the state vector.
pub const VX: usize = 9;

impl TrajectoryLog {
    pub fn failed(&self) -> bool {
        self.failure.is_some() || self.rows.iter().any(|r| r.failed)
    }

    pub fn header() -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend(STATE_NAMES.iter().map(|s| s.to_string()));
        h.extend(STATE_NAMES.iter().map(|s| format!("ref_{s}")));
        for leg in LEG_PREFIX {
            h.extend(["fx", "fy", "fz"].iter().map(|c| format!("{leg}_{c}")));
        }
        h.extend(["dist_x", "dist_y", "dist_z"].iter().map(|s| s.to_string()));
        h.extend(XI_NAMES.iter().map(|s| format!("xi_{s}")));
        h.push("failed".into());
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::header())?;
        for row in &self.rows {
            let mut rec: Vec<String> = Vec::with_capacity(47);
            rec.push(row.t.to_string());
            rec.extend(row.state.iter().map(f64::to_string));
            rec.extend(row.reference.iter().map(f64::to_string));
            rec.extend(row.grf.iter().flat_map(|f| f.iter().map(f64::to_string).collect::<Vec<_>>()));
            rec.extend(row.disturbance.iter().map(f64::to_string));
            rec.extend(row.xi.iter().map(f64::to_string));
            rec.push(u8::from(row.failed).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, SimError> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != Self::header() {
            return Err(SimError::InvalidConfig("trajectory log header mismatch".into()));
        }
        let mut log = TrajectoryLog::default();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| SimError::InvalidConfig(format!("bad number in log: {e}")))?;
            let grf = std::array::from_fn(|l| Vector3::new(vals[25 + 3 * l], vals[26 + 3 * l], vals[27 + 3 * l]));
            log.rows.push(LogRow {
                t: vals[0],
                state: StateVector::from_column_slice(&vals[1..13]),
                reference: StateVector::from_column_slice(&vals[13..25]),
                grf,
                disturbance: Vector3::from_column_slice(&vals[37..40]),
                xi: Vector6::from_column_slice(&vals[40..46]),
                failed: vals[46] != 0.0,
            });
        }
        if log.rows.iter().any(|r| r.failed) {
            log.failure = Some("recorded as failed".into());
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Runs one episode. Failures end the episode early and are recorded in the
/// log rather than returned.
pub fn run_episode(setup: &EpisodeSetup, mode: CompensationMode) -> Result<TrajectoryLog, SimError> {
    setup.disturbance.validate()?;
    setup.mpc.validate()?;
    setup.profile.validate()?;
    let dt = setup.mpc.dt;
    let substeps = setup.sim.substeps(dt)?;
    let dt_sim = dt / substeps as f64;
    let steps = (setup.duration() / dt + 1e-9).floor() as usize;
    let params = &setup.robot;
    let horizon = setup.mpc.horizon;

    let mut estimator = DisturbanceEstimator::new(setup.estimator.clone())?;
    let mut x = setup.initial_state();
    let (origin, yaw0) = (x.p, x.theta.z);
    let height = params.nominal_height;
    let mut feet = FootholdTracker::planted(&x, params);
    let mut previous: Option<(State, DVector<f64>, DiscreteModel)> = None;
    let mut log = TrajectoryLog::default();

    for k in 0..steps {
        let t = k as f64 * dt;
        let p_ref = leashed_position(&setup.profile, t, &origin, &x.p, setup.position_leash);
        let yaw_ref = yaw0;
        let mut row = LogRow {
            t,
            state: x.to_vector(),
            reference: reference_state(&setup.profile, t, &p_ref, yaw_ref, height)?.to_vector(),
            grf: [Vector3::zeros(); LEG_COUNT],
            disturbance: apply_disturbance(&setup.disturbance, t),
            xi: estimator.latest(),
            failed: false,
        };

        let command = (|| -> Result<_, SimError> {
            if let Some((x_prev, u_prev, model)) = &previous {
                estimator.ingest(t - dt / 2.0, &x, x_prev, u_prev, model)?;
                row.xi = estimator.latest();
            }
            estimator.update(t)?;

            let plan = contact_plan(setup, &mut feet, &x, t)?;
            let reference = generate_reference(&setup.profile, t, horizon, dt, &p_ref, yaw_ref, height)?;
            let forecast = estimator.forecast(mode, t + dt / 2.0, horizon, dt);
            let out = mpc_step(&x, &reference, &plan, &setup.mpc, params, &forecast, &setup.qp)?;
            Ok(out)
        })();

        let out = match command {
            Ok(out) => out,
            Err(err) => {
                row.failed = true;
                log.rows.push(row);
                log.failure = Some(err.to_string());
                return Ok(log);
            }
        };
        row.grf = out.forces;
        log.rows.push(row);

        let x_start = x;
        for j in 0..substeps {
            let ts = t + j as f64 * dt_sim;
            let ext = apply_disturbance(&setup.disturbance, ts);
            x = step_truth(&x, &out.forces, &feet.positions, &ext, params, dt_sim)?;
            if !x.is_finite() || x.max_abs() > BLOWUP_LIMIT {
                let err = SimError::NumericalBlowup { t: ts + dt_sim };
                if let Some(last) = log.rows.last_mut() {
                    last.failed = true;
                }
                log.failure = Some(err.to_string());
                return Ok(log);
            }
        }
        previous = Some((x_start, out.u0, out.model));
    }
    Ok(log)
}

/// Contact plan over the horizon. Feet that stay down keep their planted
/// position; feet that touch down later land at the footholds planned for
/// the predicted CoM.
fn contact_plan(
    setup: &EpisodeSetup,
    feet: &mut FootholdTracker,
    x: &State,
    t: f64,
) -> Result<ContactPlan, SimError> {
    let params = &setup.robot;
    let dt = setup.mpc.dt;
    let segment = setup.profile.segment_at(t)?;
    let v_cmd = Vector3::new(segment.v_x, 0.0, 0.0);
    feet.update(segment.gait.stance_at(t), x, &v_cmd, &segment.gait, params);

    let mut planted = feet.stance;
    let mut steps = Vec::with_capacity(setup.mpc.horizon);
    for i in 0..setup.mpc.horizon {
        let ti = t + i as f64 * dt;
        let seg = setup.profile.segment_at(ti.min(setup.profile.duration()))?;
        let stance = seg.gait.stance_at(ti);
        let mut predicted = *x;
        predicted.p = x.p + v_cmd * (i as f64 * dt);
        predicted.v = Vector3::new(seg.v_x, 0.0, 0.0);
        let touchdown = plan_footholds(&predicted, &predicted.v, &seg.gait, params);
        let r = std::array::from_fn(|leg| {
            planted[leg] &= stance[leg];
            let foot = if planted[leg] { feet.positions[leg] } else { touchdown[leg] };
            foot - predicted.p
        });
        steps.push(ContactStep { stance, r });
    }
    Ok(ContactPlan { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{build_discrete_model, predict_next_state, Disturbance};
    use crate::gait::GaitSpec;
    use crate::harness::Segment;

    fn nominal_feet(params: &RobotParams, p: &Vector3<f64>) -> [Vector3<f64>; LEG_COUNT] {
        params.hip_offsets.map(|h| Vector3::new(p.x + h.x, p.y + h.y, 0.0))
    }

    #[test]
    fn disturbance_examples() {
        let spec = DisturbanceSpec::along_x(0.33, -10.0, 15.0);
        assert_eq!(apply_disturbance(&spec, 0.0), Vector3::new(-10.0, 0.0, 0.0));
        let peak = apply_disturbance(&spec, 1.0 / (4.0 * 0.33));
        assert!((peak - Vector3::new(5.0, 0.0, 0.0)).amax() < 1e-12);
        let flat = DisturbanceSpec::along_x(0.33, -10.0, 0.0);
        for t in [0.0, 0.7, 13.1] {
            assert_eq!(apply_disturbance(&flat, t), flat.d_static);
        }
        let bad = DisturbanceSpec {
            axis: Vector3::new(1.0, 1.0, 0.0),
            ..flat
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn free_fall() {
        let params = RobotParams::default();
        let mut x = State::at_rest(Vector3::new(0.0, 0.0, 1.0));
        let feet = nominal_feet(&params, &x.p);
        let dt = 1e-3;
        for k in 1..=500 {
            x = step_truth(&x, &[Vector3::zeros(); 4], &feet, &Vector3::zeros(), &params, dt).unwrap();
            assert!((x.v.z + 9.81 * k as f64 * dt).abs() < 1e-12 * k as f64);
        }
    }

    #[test]
    fn single_axis_spin_is_linear() {
        let params = RobotParams {
            gravity: Vector3::zeros(),
            ..RobotParams::default()
        };
        let mut x = State::at_rest(Vector3::zeros());
        let mut feet = [Vector3::zeros(); 4];
        feet[0] = Vector3::new(0.2, 0.0, 0.0);
        let mut forces = [Vector3::zeros(); 4];
        forces[0] = Vector3::new(0.0, 1.0, 0.0);
        let rate = 0.2 / params.inertia_diag.z;
        let dt = 1e-3;
        for k in 1..=200 {
            // keep the lever arm fixed relative to the CoM
            feet[0] = x.p + Vector3::new(0.2, 0.0, 0.0);
            x = step_truth(&x, &forces, &feet, &Vector3::zeros(), &params, dt).unwrap();
            assert!((x.omega.z - rate * k as f64 * dt).abs() < 1e-12);
            assert!(x.omega.xy().amax() < 1e-12);
        }
    }

    #[test]
    fn balanced_stance_holds() {
        let params = RobotParams::default();
        let x0 = State::at_rest(Vector3::new(0.0, 0.0, params.nominal_height));
        let feet = nominal_feet(&params, &x0.p);
        let f = Vector3::new(0.0, 0.0, params.weight() / 4.0);
        let mut x = x0;
        for _ in 0..100 {
            let next = step_truth(&x, &[f; 4], &feet, &Vector3::zeros(), &params, 1e-3).unwrap();
            assert!((next.to_vector() - x.to_vector()).amax() < 1e-10);
            x = next;
        }
    }

    #[test]
    fn momentum_conserved_without_wrench() {
        let params = RobotParams {
            gravity: Vector3::zeros(),
            ..RobotParams::default()
        };
        let mut x = State {
            theta: Vector3::new(0.1, -0.2, 0.3),
            p: Vector3::zeros(),
            omega: Vector3::new(1.5, -2.0, 3.0),
            v: Vector3::new(0.3, -0.1, 0.2),
        };
        let inertia = params.inertia();
        let momentum = |s: &State| rotation_world_body(&s.theta) * (inertia * s.omega);
        let feet = [Vector3::zeros(); 4];
        for _ in 0..1000 {
            let next = step_truth(&x, &[Vector3::zeros(); 4], &feet, &Vector3::zeros(), &params, 1e-3).unwrap();
            assert!(((next.v - x.v) * params.mass).amax() < 1e-9);
            assert!((momentum(&next) - momentum(&x)).amax() < 1e-9);
            x = next;
        }
    }

    #[test]
    fn truth_matches_model_to_second_order() {
        let params = RobotParams::default();
        let x = State {
            theta: Vector3::new(1e-4, -1e-4, 0.0),
            p: Vector3::new(0.0, 0.0, 0.28),
            omega: Vector3::new(1e-3, 2e-3, -1e-3),
            v: Vector3::new(0.3, 0.0, 0.0),
        };
        let feet = nominal_feet(&params, &x.p);
        let forces = [Vector3::new(1.0, 0.5, 25.0), Vector3::new(-1.0, 0.0, 30.0), Vector3::new(0.0, 1.0, 28.0), Vector3::new(0.5, -0.5, 27.0)];
        let ext = Vector3::new(-10.0, 0.0, 0.0);
        let error = |dt: f64| {
            let truth = step_truth(&x, &forces, &feet, &ext, &params, dt).unwrap();
            let contacts: Vec<_> = feet.iter().map(|f| (true, f - x.p)).collect();
            let model = build_discrete_model(&params, &x.theta, &contacts, dt).unwrap();
            let u = DVector::from_iterator(12, forces.iter().flat_map(|f| f.iter().copied()));
            let xi = Disturbance {
                force: -ext,
                torque: Vector3::zeros(),
            };
            let pred = predict_next_state(&model, &x, &u, &xi).unwrap();
            (truth.to_vector() - pred.to_vector()).amax()
        };
        let (e1, e2) = (error(2e-3), error(1e-3));
        assert!(e1 < 2e-3 * 2e-3 * 10.0, "{e1}");
        let ratio = e1 / e2;
        assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
    }

    #[test]
    fn substep_ratio_checked() {
        let cfg = SimConfig::default();
        assert_eq!(cfg.substeps(0.03).unwrap(), 30);
        let bad = SimConfig {
            dt_sim: 0.007,
            ..SimConfig::default()
        };
        assert!(bad.substeps(0.03).is_err());
    }

    fn stand_setup(seconds: f64) -> EpisodeSetup {
        EpisodeSetup {
            robot: RobotParams::default(),
            mpc: MpcWeights::default(),
            qp: QpSettings::default(),
            estimator: EstimatorConfig::default(),
            sim: SimConfig::default(),
            profile: VelocityProfile {
                segments: vec![Segment {
                    duration: seconds,
                    v_x: 0.0,
                    gait: GaitSpec::stand(),
                }],
            },
            position_leash: Some(0.05),
            disturbance: DisturbanceSpec::default(),
        }
    }

    #[test]
    fn standing_episode_holds_pose() {
        let setup = stand_setup(10.0);
        let log = run_episode(&setup, CompensationMode::Off).unwrap();
        assert!(!log.failed(), "{:?}", log.failure);
        assert_eq!(log.rows.len(), 333);
        let p0 = log.rows[0].state.fixed_rows::<3>(3).into_owned();
        for row in &log.rows {
            let drift = (row.state.fixed_rows::<3>(3) - p0).norm();
            assert!(drift < 0.01, "drift {drift} at {}", row.t);
        }
    }

    #[test]
    fn log_roundtrip_and_schema() {
        let mut setup = stand_setup(0.3);
        setup.disturbance = DisturbanceSpec::along_x(0.5, -3.0, 2.0);
        let log = run_episode(&setup, CompensationMode::Static).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap().split(',').count(), 47);
        assert_eq!(text.lines().count(), log.rows.len() + 1);
        let back = TrajectoryLog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, log);
        for row in &log.rows {
            assert_eq!(row.disturbance, apply_disturbance(&setup.disturbance, row.t));
        }
    }

    #[test]
    fn regressor_sees_applied_force() {
        let mut setup = stand_setup(1.0);
        setup.disturbance = DisturbanceSpec::along_x(0.0, -10.0, 0.0);
        let log = run_episode(&setup, CompensationMode::Off).unwrap();
        let late = &log.rows[log.rows.len() - 1];
        // ξ carries the sign convention of the model: −f_ext
        assert!((late.xi[0] - 10.0).abs() < 0.5, "{:?}", late.xi);
    }
}
