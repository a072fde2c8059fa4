//! Single-rigid-body model of the trunk and its linearized discrete-time form.
//!
//! The state is ordered `[θ, p, ω, v]`:
//!
//! ```text
//! θ  ZYX Euler angles (roll, pitch, yaw)     rows 0..3
//! p  CoM position, world frame               rows 3..6
//! ω  body angular velocity                   rows 6..9
//! v  CoM linear velocity, world frame        rows 9..12
//! ```
//!
//! The discrete model used by the MPC and the disturbance regressor is
//!
//! ```text
//! x_{k+1} = A_d x_k + B_d u_k + G_d + Q_d ξ_k
//! ```
//!
//! with `u_k` the stacked world-frame ground reaction forces of the stance
//! feet and `ξ = [f_unk; t_unk]` the unknown external wrench. The external
//! wrench enters with a negative sign (`v̇ = g + (Σf - f_unk)/m`).

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIM: usize = 12;
pub const LEG_COUNT: usize = 4;

/// Margin kept away from the ZYX singularity at |pitch| = π/2.
pub const GIMBAL_MARGIN: f64 = 1e-3;

pub type StateVector = SVector<f64, STATE_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("pitch {pitch} rad is too close to the Euler-rate singularity")]
    GimbalLock { pitch: f64 },
    #[error("timestep must be positive, got {0}")]
    InvalidTimestep(f64),
    #[error("inertia diagonal must be strictly positive, got {0:?}")]
    SingularInertia([f64; 3]),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Legs in the fixed column order used everywhere (FL, FR, RL, RR).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Leg {
    FrontLeft,
    FrontRight,
    RearLeft,
    RearRight,
}

impl Leg {
    pub const ALL: [Leg; LEG_COUNT] = [
        Leg::FrontLeft,
        Leg::FrontRight,
        Leg::RearLeft,
        Leg::RearRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Leg::FrontLeft => "FL",
            Leg::FrontRight => "FR",
            Leg::RearLeft => "RL",
            Leg::RearRight => "RR",
        }
    }
}

/// Floating-base state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    /// Euler angles (roll, pitch, yaw), rad.
    pub theta: Vector3<f64>,
    /// CoM position, m.
    pub p: Vector3<f64>,
    /// Body angular velocity, rad/s.
    pub omega: Vector3<f64>,
    /// CoM linear velocity, m/s.
    pub v: Vector3<f64>,
}

impl State {
    /// Robot at rest at position `p`.
    pub fn at_rest(p: Vector3<f64>) -> Self {
        State {
            p,
            ..Default::default()
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.theta);
        x.fixed_rows_mut::<3>(3).copy_from(&self.p);
        x.fixed_rows_mut::<3>(6).copy_from(&self.omega);
        x.fixed_rows_mut::<3>(9).copy_from(&self.v);
        x
    }

    pub fn from_vector(x: &StateVector) -> Self {
        State {
            theta: x.fixed_rows::<3>(0).into_owned(),
            p: x.fixed_rows::<3>(3).into_owned(),
            omega: x.fixed_rows::<3>(6).into_owned(),
            v: x.fixed_rows::<3>(9).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry, used for blow-up detection.
    pub fn max_abs(&self) -> f64 {
        self.to_vector().amax()
    }
}

/// Unknown external wrench `ξ = [f_unk; t_unk]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Disturbance {
    /// Force on the CoM, N.
    pub force: Vector3<f64>,
    /// Torque on the base, N·m.
    pub torque: Vector3<f64>,
}

impl Disturbance {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut xi = Vector6::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&self.force);
        xi.fixed_rows_mut::<3>(3).copy_from(&self.torque);
        xi
    }

    pub fn from_vector(xi: &Vector6<f64>) -> Self {
        Disturbance {
            force: xi.fixed_rows::<3>(0).into_owned(),
            torque: xi.fixed_rows::<3>(3).into_owned(),
        }
    }
}

/// How the wrench `ξ` is mapped into the ω and v rows of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceMap {
    /// `-Δt·I⁻¹` on the torque channels and `-Δt/m` on the force channels,
    /// so `ξ` is in newtons and newton-metres.
    #[default]
    Physical,
    /// Unit entries (force → v rows, torque → ω rows); `ξ` is then a raw
    /// per-step velocity increment.
    BareIdentity,
}

/// Physical parameters of the robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotParams {
    /// Total mass, kg.
    pub mass: f64,
    /// Diagonal of the body-frame inertia tensor, kg·m².
    pub inertia_diag: Vector3<f64>,
    /// Friction coefficient.
    pub mu: f64,
    /// Vertical force bounds per stance foot, N.
    pub fz_min: f64,
    pub fz_max: f64,
    /// Gravity vector, m/s².
    pub gravity: Vector3<f64>,
    /// Nominal foot positions relative to the CoM in the body frame (FL, FR, RL, RR).
    pub hip_offsets: [Vector3<f64>; LEG_COUNT],
    /// Nominal standing height of the CoM above the ground, m.
    pub nominal_height: f64,
    pub disturbance_map: DisturbanceMap,
}

impl Default for RobotParams {
    fn default() -> Self {
        let (hx, hy) = (0.18, 0.13);
        RobotParams {
            mass: 12.0,
            inertia_diag: Vector3::new(0.07, 0.26, 0.24),
            mu: 0.6,
            fz_min: 0.0,
            fz_max: 160.0,
            gravity: Vector3::new(0.0, 0.0, -9.81),
            hip_offsets: [
                Vector3::new(hx, hy, 0.0),
                Vector3::new(hx, -hy, 0.0),
                Vector3::new(-hx, hy, 0.0),
                Vector3::new(-hx, -hy, 0.0),
            ],
            nominal_height: 0.28,
            disturbance_map: DisturbanceMap::Physical,
        }
    }
}

impl RobotParams {
    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia_diag)
    }

    pub fn inertia_inv(&self) -> Result<Matrix3<f64>, DynamicsError> {
        let d = self.inertia_diag;
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(DynamicsError::SingularInertia([d.x, d.y, d.z]));
        }
        Ok(Matrix3::from_diagonal(&d.map(|v| 1.0 / v)))
    }

    /// Weight of the robot, N.
    pub fn weight(&self) -> f64 {
        self.mass * self.gravity.norm()
    }
}

/// Cross-product matrix `[r]ₓ` with `[r]ₓ f = r × f`.
pub fn skew(r: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0)
}

/// ZYX Euler-rate matrix `T(θ)` such that `θ̇ = T(θ) ω` for body-frame `ω`.
pub fn euler_rate_transform(theta: &Vector3<f64>) -> Result<Matrix3<f64>, DynamicsError> {
    let (roll, pitch) = (theta.x, theta.y);
    if !(pitch.abs() < std::f64::consts::FRAC_PI_2 - GIMBAL_MARGIN) {
        return Err(DynamicsError::GimbalLock { pitch });
    }
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let tp = sp / cp;
    Ok(Matrix3::new(
        1.0,
        sr * tp,
        cr * tp,
        0.0,
        cr,
        -sr,
        0.0,
        sr / cp,
        cr / cp,
    ))
}

/// Body-to-world rotation `R_wb = R_z(yaw) R_y(pitch) R_x(roll)`.
pub fn rotation_world_body(theta: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = theta.x.sin_cos();
    let (sp, cp) = theta.y.sin_cos();
    let (sy, cy) = theta.z.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Inverse of [`rotation_world_body`] for a proper rotation matrix.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Vector3::new(roll, pitch, yaw)
}

/// Linearized discrete-time dynamics for one MPC step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a: SMatrix<f64, STATE_DIM, STATE_DIM>,
    /// `12 × 3·n_c`, one column block per stance foot.
    pub b: DMatrix<f64>,
    pub g: StateVector,
    pub q: SMatrix<f64, STATE_DIM, 6>,
    pub dt: f64,
    /// Leg index behind each column block of `b`, in column order.
    pub stance_legs: Vec<usize>,
}

impl DiscreteModel {
    pub fn contact_count(&self) -> usize {
        self.b.ncols() / 3
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// Builds `(A_d, B_d, G_d, Q_d)` around orientation `theta`.
///
/// `contacts` holds one `(stance, r)` pair per foot where `r` is the
/// world-frame vector from the CoM to the foot. Only stance feet get
/// columns in `B_d`. Inertia is used unrotated (small roll/pitch).
pub fn build_discrete_model(
    params: &RobotParams,
    theta: &Vector3<f64>,
    contacts: &[(bool, Vector3<f64>)],
    dt: f64,
) -> Result<DiscreteModel, DynamicsError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DynamicsError::InvalidTimestep(dt));
    }
    let inertia_inv = params.inertia_inv()?;
    let t = euler_rate_transform(theta)?;

    let mut a = SMatrix::<f64, STATE_DIM, STATE_DIM>::identity();
    a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(t * dt));
    a.fixed_view_mut::<3, 3>(3, 9)
        .copy_from(&(Matrix3::identity() * dt));

    let stance_legs: Vec<usize> = contacts
        .iter()
        .enumerate()
        .filter_map(|(i, (stance, _))| stance.then_some(i))
        .collect();
    let mut b = DMatrix::zeros(STATE_DIM, 3 * stance_legs.len());
    let lin = Matrix3::identity() * (dt / params.mass);
    for (col, &leg) in stance_legs.iter().enumerate() {
        let r = &contacts[leg].1;
        let ang = inertia_inv * skew(r) * dt;
        b.fixed_view_mut::<3, 3>(6, 3 * col).copy_from(&ang);
        b.fixed_view_mut::<3, 3>(9, 3 * col).copy_from(&lin);
    }

    let mut g = StateVector::zeros();
    g.fixed_rows_mut::<3>(9).copy_from(&(params.gravity * dt));

    let mut q = SMatrix::<f64, STATE_DIM, 6>::zeros();
    match params.disturbance_map {
        DisturbanceMap::Physical => {
            q.fixed_view_mut::<3, 3>(9, 0)
                .copy_from(&(Matrix3::identity() * (-dt / params.mass)));
            q.fixed_view_mut::<3, 3>(6, 3)
                .copy_from(&(inertia_inv * -dt));
        }
        DisturbanceMap::BareIdentity => {
            q.fixed_view_mut::<3, 3>(9, 0)
                .copy_from(&Matrix3::identity());
            q.fixed_view_mut::<3, 3>(6, 3)
                .copy_from(&Matrix3::identity());
        }
    }

    Ok(DiscreteModel {
        a,
        b,
        g,
        q,
        dt,
        stance_legs,
    })
}

/// Evaluates `A_d x + B_d u + G_d + Q_d ξ`.
pub fn predict_next_state(
    model: &DiscreteModel,
    x: &State,
    u: &DVector<f64>,
    xi: &Disturbance,
) -> Result<State, DynamicsError> {
    if u.len() != model.input_dim() {
        return Err(DynamicsError::DimensionMismatch {
            expected: model.input_dim(),
            got: u.len(),
        });
    }
    let next = model.a * x.to_vector() + &model.b * u + model.g + model.q * xi.to_vector();
    Ok(State::from_vector(&StateVector::from_iterator(next.iter().copied())))
}
