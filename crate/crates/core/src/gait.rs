//! Contact scheduling and foothold selection.
//!
//! Contact timing is fixed ahead of the MPC so the force problem stays a QP:
//! a leg is in stance at time `t` iff `frac(t / period + offset) < duty`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{RobotParams, State, LEG_COUNT};

/// Maximum horizontal distance between a foothold and its hip projection, m.
pub const MAX_FOOT_REACH: f64 = 0.15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaitError {
    #[error("gait period must be positive, got {0}")]
    InvalidPeriod(f64),
    #[error("duty factor must lie in (0, 1], got {0}")]
    InvalidDuty(f64),
    #[error("phase offsets must lie in [0, 1)")]
    InvalidPhase,
    #[error("stand gait requires duty factor 1")]
    StandDuty,
    #[error("trot requires diagonal pairs in phase and half a cycle apart")]
    TrotPhases,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaitKind {
    Stand,
    Trot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitSpec {
    pub kind: GaitKind,
    /// Cycle length, s.
    pub period: f64,
    /// Stance fraction of the cycle.
    pub duty_factor: f64,
    /// Per-leg phase in cycles (FL, FR, RL, RR).
    pub phase_offsets: [f64; LEG_COUNT],
    /// Raibert feedback gain on the velocity error, s. Zero keeps the pure
    /// `v·T_stance/2` placement.
    #[serde(default)]
    pub raibert_gain: f64,
}

impl GaitSpec {
    pub fn stand() -> Self {
        GaitSpec {
            kind: GaitKind::Stand,
            period: 0.6,
            duty_factor: 1.0,
            phase_offsets: [0.0; LEG_COUNT],
            raibert_gain: 0.0,
        }
    }

    pub fn trot(period: f64, duty_factor: f64) -> Self {
        GaitSpec {
            kind: GaitKind::Trot,
            period,
            duty_factor,
            phase_offsets: [0.0, 0.5, 0.5, 0.0],
            raibert_gain: 0.0,
        }
    }

    /// Stance duration per cycle, s.
    pub fn stance_time(&self) -> f64 {
        self.duty_factor * self.period
    }

    pub fn validate(&self) -> Result<(), GaitError> {
        if !(self.period > 0.0) {
            return Err(GaitError::InvalidPeriod(self.period));
        }
        if !(self.duty_factor > 0.0 && self.duty_factor <= 1.0) {
            return Err(GaitError::InvalidDuty(self.duty_factor));
        }
        if self.phase_offsets.iter().any(|o| !(0.0..1.0).contains(o)) {
            return Err(GaitError::InvalidPhase);
        }
        match self.kind {
            GaitKind::Stand if self.duty_factor != 1.0 => Err(GaitError::StandDuty),
            GaitKind::Trot => {
                let [fl, fr, rl, rr] = self.phase_offsets;
                let pair_gap = (fr - fl).rem_euclid(1.0);
                if fl != rr || fr != rl || (pair_gap - 0.5).abs() > 1e-12 {
                    Err(GaitError::TrotPhases)
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Stance flags of all legs at absolute time `t`.
    pub fn stance_at(&self, t: f64) -> [bool; LEG_COUNT] {
        let cycle = t / self.period;
        let mut flags = [false; LEG_COUNT];
        for (flag, offset) in flags.iter_mut().zip(self.phase_offsets) {
            *flag = (cycle + offset).rem_euclid(1.0) < self.duty_factor;
        }
        flags
    }
}

/// Stance flags for horizon steps `t + i·dt`, `i = 0..k`.
pub fn schedule_contacts(gait: &GaitSpec, t: f64, k: usize, dt_mpc: f64) -> Vec<[bool; LEG_COUNT]> {
    (0..k).map(|i| gait.stance_at(t + i as f64 * dt_mpc)).collect()
}

/// Contact state for one horizon step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactStep {
    pub stance: [bool; LEG_COUNT],
    /// CoM-to-foot vectors, world frame. Entries of swing legs are unused.
    pub r: [Vector3<f64>; LEG_COUNT],
}

impl ContactStep {
    /// `(stance, r)` pairs in leg order, as consumed by the model builder.
    pub fn contacts(&self) -> [(bool, Vector3<f64>); LEG_COUNT] {
        std::array::from_fn(|i| (self.stance[i], self.r[i]))
    }

    pub fn stance_count(&self) -> usize {
        self.stance.iter().filter(|s| **s).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContactPlan {
    pub steps: Vec<ContactStep>,
}

impl ContactPlan {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Hip position projected on the ground plane (z = 0), world frame.
pub fn hip_projection(state: &State, params: &RobotParams, leg: usize) -> Vector3<f64> {
    let (sy, cy) = state.theta.z.sin_cos();
    let h = params.hip_offsets[leg];
    Vector3::new(
        state.p.x + cy * h.x - sy * h.y,
        state.p.y + sy * h.x + cy * h.y,
        0.0,
    )
}

/// Raibert-style footholds: hip projection plus `v·T_stance/2`, with the
/// horizontal shift clamped to [`MAX_FOOT_REACH`].
pub fn plan_footholds(
    state: &State,
    v_cmd: &Vector3<f64>,
    gait: &GaitSpec,
    params: &RobotParams,
) -> [Vector3<f64>; LEG_COUNT] {
    let mut shift = state.v * (gait.stance_time() / 2.0) + (state.v - v_cmd) * gait.raibert_gain;
    shift.z = 0.0;
    let len = shift.norm();
    if len > MAX_FOOT_REACH {
        shift *= MAX_FOOT_REACH / len;
    }
    std::array::from_fn(|leg| hip_projection(state, params, leg) + shift)
}

pub fn relative_foot_vectors(
    footholds: &[Vector3<f64>; LEG_COUNT],
    p_com: &Vector3<f64>,
) -> [Vector3<f64>; LEG_COUNT] {
    footholds.map(|f| f - p_com)
}

/// Keeps touchdown positions fixed through stance and re-plans them while a
/// leg swings. Swing feet are not simulated; a foot lands wherever the
/// planner last put it.
#[derive(Debug, Clone, PartialEq)]
pub struct FootholdTracker {
    pub positions: [Vector3<f64>; LEG_COUNT],
    pub stance: [bool; LEG_COUNT],
}

impl FootholdTracker {
    /// All feet planted under the hips of `state`.
    pub fn planted(state: &State, params: &RobotParams) -> Self {
        FootholdTracker {
            positions: std::array::from_fn(|leg| hip_projection(state, params, leg)),
            stance: [true; LEG_COUNT],
        }
    }

    /// Advances to the contact flags `stance`. Legs that are swinging or
    /// touching down take the freshly planned foothold.
    pub fn update(
        &mut self,
        stance: [bool; LEG_COUNT],
        state: &State,
        v_cmd: &Vector3<f64>,
        gait: &GaitSpec,
        params: &RobotParams,
    ) {
        let planned = plan_footholds(state, v_cmd, gait, params);
        for leg in 0..LEG_COUNT {
            let keep = stance[leg] && self.stance[leg];
            if !keep {
                self.positions[leg] = planned[leg];
            }
        }
        self.stance = stance;
    }
}
