//! Condensed force-level MPC.
//!
//! The horizon dynamics `x_{i+1} = A_i x_i + B_i u_i + G_i + Q_i ξ_i` are
//! forward-substituted so the decision vector holds only the stacked ground
//! reaction forces of the feet that are in stance at each step. Swing feet
//! have no variables at all. The cost is
//!
//! ```text
//! Σ_i ‖x_{i+1} − x_ref,i+1‖²_P + ‖u_i − u_nom,i‖²_R
//! ```
//!
//! where `u_nom,i` is either zero or the equal split of the force that holds
//! the body against gravity and the forecast external force at step `i`
//! (see [`EffortReference`]).

use nalgebra::{DMatrix, DVector, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    build_discrete_model, DiscreteModel, Disturbance, DynamicsError, RobotParams, State,
    StateVector, LEG_COUNT, STATE_DIM,
};
use crate::gait::ContactPlan;
use crate::qp::{solve_qp, QpError, QpProblem, QpSettings, QpSolution};

/// Friction rows plus one vertical-bound row per stance foot.
pub const ROWS_PER_FOOT: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// What the effort term penalizes deviations from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffortReference {
    /// `‖u‖²_R`.
    Zero,
    /// `‖u − u_nom‖²_R` with `u_nom` the equal split of the force balancing
    /// gravity and the forecast external force.
    #[default]
    Balance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcWeights {
    /// Diagonal of `P` over `[θ, p, ω, v]`.
    pub state: [f64; STATE_DIM],
    /// Diagonal of `R` per foot force component (x, y, z).
    pub effort: [f64; 3],
    pub effort_reference: EffortReference,
    /// Horizon length in steps.
    pub horizon: usize,
    /// Prediction step, s.
    pub dt: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        MpcWeights {
            state: [
                100.0, 100.0, 100.0, 100.0, 100.0, 200.0, 1.0, 1.0, 1.0, 10.0, 10.0, 10.0,
            ],
            effort: [1e-4; 3],
            effort_reference: EffortReference::Balance,
            horizon: 10,
            dt: 0.03,
        }
    }
}

impl MpcWeights {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.state.iter().any(|w| !(*w >= 0.0)) {
            return Err(MpcError::InvalidWeights("state weights must be ≥ 0".into()));
        }
        if self.effort.iter().any(|w| !(*w > 0.0)) {
            return Err(MpcError::InvalidWeights("effort weights must be > 0".into()));
        }
        if self.horizon == 0 {
            return Err(MpcError::InvalidWeights("horizon must be ≥ 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(MpcError::InvalidWeights("dt must be > 0".into()));
        }
        Ok(())
    }
}

/// Desired states for `x_1 … x_k`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReferenceTrajectory {
    pub states: Vec<StateVector>,
}

impl ReferenceTrajectory {
    /// Holds `x` over `k` steps.
    pub fn hold(x: &State, k: usize) -> Self {
        ReferenceTrajectory {
            states: vec![x.to_vector(); k],
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Columns of one horizon step in the decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLayout {
    pub offset: usize,
    pub legs: Vec<usize>,
}

impl StepLayout {
    pub fn width(&self) -> usize {
        3 * self.legs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub qp: QpProblem,
    pub layout: Vec<StepLayout>,
    /// Cost at `u = 0` so that `qp.objective(u) + constant` is the MPC cost.
    pub constant: f64,
}

impl MpcProblem {
    pub fn variable_count(&self) -> usize {
        self.qp.dim()
    }

    /// Per-leg forces of step `step`; swing legs get zero.
    pub fn scatter(&self, u: &DVector<f64>, step: usize) -> [Vector3<f64>; LEG_COUNT] {
        let mut forces = [Vector3::zeros(); LEG_COUNT];
        let layout = &self.layout[step];
        for (slot, &leg) in layout.legs.iter().enumerate() {
            let base = layout.offset + 3 * slot;
            forces[leg] = Vector3::new(u[base], u[base + 1], u[base + 2]);
        }
        forces
    }
}

/// Force that keeps the modelled velocity constant through step `model`
/// under forecast `xi`: `Σf = −(m/Δt)(G_v + Q_v ξ)`.
fn balancing_force(model: &DiscreteModel, params: &RobotParams, xi: &Disturbance) -> Vector3<f64> {
    let drift = model.g + model.q * xi.to_vector();
    -drift.fixed_rows::<3>(9).into_owned() * (params.mass / model.dt)
}

/// Condenses the horizon into a QP over the stacked stance-foot forces.
pub fn build_qp(
    x0: &State,
    reference: &ReferenceTrajectory,
    plan: &ContactPlan,
    models: &[DiscreteModel],
    weights: &MpcWeights,
    params: &RobotParams,
    xi_forecast: &[Disturbance],
) -> Result<MpcProblem, MpcError> {
    weights.validate()?;
    let k = plan.horizon();
    if k == 0 {
        return Err(MpcError::DimensionMismatch("empty contact plan".into()));
    }
    if reference.len() != k || models.len() != k || xi_forecast.len() != k {
        return Err(MpcError::DimensionMismatch(format!(
            "horizon {k}: reference {}, models {}, forecast {}",
            reference.len(),
            models.len(),
            xi_forecast.len()
        )));
    }

    let mut layout = Vec::with_capacity(k);
    let mut n = 0;
    for (i, (step, model)) in plan.steps.iter().zip(models).enumerate() {
        let legs: Vec<usize> = (0..LEG_COUNT).filter(|&l| step.stance[l]).collect();
        if legs != model.stance_legs {
            return Err(MpcError::DimensionMismatch(format!(
                "step {i}: model stance legs {:?} differ from plan {:?}",
                model.stance_legs, legs
            )));
        }
        let width = 3 * legs.len();
        layout.push(StepLayout { offset: n, legs });
        n += width;
    }

    let sqrt_p = SMatrix::<f64, STATE_DIM, STATE_DIM>::from_diagonal(
        &StateVector::from_iterator(weights.state.iter().map(|w| w.sqrt())),
    );
    let p_diag = StateVector::from_column_slice(&weights.state);

    let mut hessian = DMatrix::<f64>::zeros(n, n);
    let mut linear = DVector::<f64>::zeros(n);
    let mut constant = 0.0;

    // sensitivity of x_i to the decision vector; only the first `used`
    // columns are ever nonzero
    let mut sens = DMatrix::<f64>::zeros(STATE_DIM, n);
    let mut free = x0.to_vector();
    let mut used = 0;

    for i in 0..k {
        let model = &models[i];
        let lay = &layout[i];
        if used > 0 {
            let cols = sens.columns(0, used).into_owned();
            sens.columns_mut(0, used).copy_from(&(model.a * cols));
        }
        if lay.width() > 0 {
            sens.columns_mut(lay.offset, lay.width()).copy_from(&model.b);
        }
        used = lay.offset + lay.width();
        free = model.a * free + model.g + model.q * xi_forecast[i].to_vector();

        let err = free - reference.states[i];
        constant += err.dot(&p_diag.component_mul(&err));
        if used > 0 {
            let weighted = sqrt_p * sens.columns(0, used);
            let mut block = hessian.view_mut((0, 0), (used, used));
            block.gemm_tr(1.0, &weighted, &weighted, 1.0);
            let pe = p_diag.component_mul(&err);
            let mut lin = linear.rows_mut(0, used);
            lin.gemv_tr(1.0, &sens.columns(0, used), &pe, 1.0);
        }

        if lay.width() > 0 {
            let nominal = match weights.effort_reference {
                EffortReference::Zero => Vector3::zeros(),
                EffortReference::Balance => {
                    balancing_force(model, params, &xi_forecast[i]) / lay.legs.len() as f64
                }
            };
            for slot in 0..lay.legs.len() {
                for axis in 0..3 {
                    let col = lay.offset + 3 * slot + axis;
                    let w = weights.effort[axis];
                    hessian[(col, col)] += w;
                    linear[col] -= w * nominal[axis];
                    constant += w * nominal[axis] * nominal[axis];
                }
            }
        }
    }

    let hessian = &hessian + hessian.transpose();
    let linear = linear * 2.0;

    let stance_steps: usize = layout.iter().map(|l| l.legs.len()).sum();
    let m = ROWS_PER_FOOT * stance_steps;
    let mut rows = DMatrix::<f64>::zeros(m, n);
    let mut lower = DVector::<f64>::zeros(m);
    let mut upper = DVector::<f64>::zeros(m);
    let mu = params.mu;
    let mut row = 0;
    for lay in &layout {
        for slot in 0..lay.legs.len() {
            let base = lay.offset + 3 * slot;
            for axis in 0..2 {
                // f_t − μ f_z ≤ 0
                rows[(row, base + axis)] = 1.0;
                rows[(row, base + 2)] = -mu;
                lower[row] = f64::NEG_INFINITY;
                upper[row] = 0.0;
                row += 1;
                // f_t + μ f_z ≥ 0
                rows[(row, base + axis)] = 1.0;
                rows[(row, base + 2)] = mu;
                lower[row] = 0.0;
                upper[row] = f64::INFINITY;
                row += 1;
            }
            rows[(row, base + 2)] = 1.0;
            lower[row] = params.fz_min;
            upper[row] = params.fz_max;
            row += 1;
        }
    }

    Ok(MpcProblem {
        qp: QpProblem {
            hessian,
            linear,
            rows,
            lower,
            upper,
        },
        layout,
        constant,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcOutput {
    /// First-step force per leg, world frame; zero for swing legs.
    pub forces: [Vector3<f64>; LEG_COUNT],
    /// First-step stacked forces in the column order of `model`.
    pub u0: DVector<f64>,
    /// Model of the first step, as needed by the disturbance regressor.
    pub model: DiscreteModel,
    pub solution: QpSolution,
}

/// Builds the per-step models around the current attitude, solves the QP and
/// returns the first force command.
pub fn mpc_step(
    x: &State,
    reference: &ReferenceTrajectory,
    plan: &ContactPlan,
    weights: &MpcWeights,
    params: &RobotParams,
    xi_forecast: &[Disturbance],
    settings: &QpSettings,
) -> Result<MpcOutput, MpcError> {
    let models = plan
        .steps
        .iter()
        .map(|step| build_discrete_model(params, &x.theta, &step.contacts(), weights.dt))
        .collect::<Result<Vec<_>, _>>()?;
    let problem = build_qp(x, reference, plan, &models, weights, params, xi_forecast)?;
    let solution = solve_qp(&problem.qp, settings)?;
    let forces = problem.scatter(&solution.u, 0);
    let width = problem.layout[0].width();
    let u0 = solution.u.rows(0, width).into_owned();
    let model = models.into_iter().next().expect("horizon is non-empty");
    Ok(MpcOutput {
        forces,
        u0,
        model,
        solution,
    })
}
