use nalgebra::Vector3;
use proptest::prelude::*;

use quadmpc::dynamics::{Disturbance, RobotParams, State, LEG_COUNT};
use quadmpc::gait::{schedule_contacts, ContactPlan, ContactStep, GaitSpec};
use quadmpc::mpc::{mpc_step, MpcOutput, MpcWeights, ReferenceTrajectory};
use quadmpc::qp::QpSettings;

fn nominal_r(params: &RobotParams) -> [Vector3<f64>; LEG_COUNT] {
    params.hip_offsets.map(|h| Vector3::new(h.x, h.y, -params.nominal_height))
}

fn standing_plan(params: &RobotParams, k: usize) -> ContactPlan {
    ContactPlan {
        steps: vec![ContactStep { stance: [true; LEG_COUNT], r: nominal_r(params) }; k],
    }
}

fn solve(x: &State, plan: &ContactPlan, weights: &MpcWeights, xi: &[Disturbance]) -> MpcOutput {
    let params = RobotParams::default();
    let reference = ReferenceTrajectory::hold(
        &State::at_rest(Vector3::new(0.0, 0.0, params.nominal_height)),
        weights.horizon,
    );
    mpc_step(x, &reference, plan, weights, &params, xi, &QpSettings::default()).unwrap()
}

fn force(fx: f64, fy: f64, fz: f64) -> Disturbance {
    Disturbance { force: Vector3::new(fx, fy, fz), torque: Vector3::zeros() }
}

#[test]
fn single_step_standing_balance() {
    let params = RobotParams::default();
    let weights = MpcWeights { horizon: 1, ..MpcWeights::default() };
    let x = State::at_rest(Vector3::new(0.0, 0.0, params.nominal_height));
    let out = solve(&x, &standing_plan(&params, 1), &weights, &[Disturbance::zero()]);
    let total: f64 = out.forces.iter().map(|f| f.z).sum();
    assert!((total - params.weight()).abs() < 1e-6);
    for f in &out.forces {
        assert!((f.z - out.forces[0].z).abs() < 1e-9);
        assert!(f.x.abs() < 1e-9 && f.y.abs() < 1e-9);
    }
}

#[test]
fn extra_vertical_load_is_carried() {
    // ξ enters the model as −Δt/m·ξ in the velocity rows, so a load pulling
    // the body down by 12 N is ξ_z = +12
    let params = RobotParams::default();
    let weights = MpcWeights::default();
    let x = State::at_rest(Vector3::new(0.0, 0.0, params.nominal_height));
    let plan = standing_plan(&params, weights.horizon);
    let base = solve(&x, &plan, &weights, &vec![Disturbance::zero(); weights.horizon]);
    let loaded = solve(&x, &plan, &weights, &vec![force(0.0, 0.0, 12.0); weights.horizon]);
    let sum = |o: &MpcOutput| o.forces.iter().map(|f| f.z).sum::<f64>();
    assert!((sum(&loaded) - sum(&base) - 12.0).abs() < 1e-6);
    let lifted = solve(&x, &plan, &weights, &vec![force(0.0, 0.0, -12.0); weights.horizon]);
    assert!((sum(&base) - sum(&lifted) - 12.0).abs() < 1e-6);
}

#[test]
fn trot_swing_pair_gets_exact_zero() {
    let params = RobotParams::default();
    let weights = MpcWeights::default();
    let flags = schedule_contacts(&GaitSpec::trot(0.6, 0.5), 0.0, weights.horizon, weights.dt);
    let plan = ContactPlan {
        steps: flags.into_iter().map(|stance| ContactStep { stance, r: nominal_r(&params) }).collect(),
    };
    let x = State::at_rest(Vector3::new(0.0, 0.0, params.nominal_height));
    let out = solve(&x, &plan, &weights, &vec![Disturbance::zero(); weights.horizon]);
    assert_eq!(out.forces[1], Vector3::zeros());
    assert_eq!(out.forces[2], Vector3::zeros());
    assert!(out.forces[0].z > 0.0 && out.forces[3].z > 0.0);
}

#[test]
fn repeated_solves_are_bit_identical() {
    let params = RobotParams::default();
    let weights = MpcWeights::default();
    let mut x = State::at_rest(Vector3::new(0.01, -0.02, 0.27));
    x.v = Vector3::new(0.2, -0.05, 0.0);
    x.theta = Vector3::new(0.02, -0.03, 0.1);
    let plan = standing_plan(&params, weights.horizon);
    let xi = vec![force(-8.0, 1.0, 2.0); weights.horizon];
    let a = solve(&x, &plan, &weights, &xi);
    let b = solve(&x, &plan, &weights, &xi);
    assert_eq!(a, b);
}

fn perturbed(dp: [f64; 3], dv: [f64; 3], dtheta: [f64; 3]) -> State {
    State {
        theta: Vector3::from(dtheta),
        p: Vector3::new(dp[0], dp[1], 0.28 + dp[2]),
        omega: Vector3::zeros(),
        v: Vector3::from(dv),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feedforward_is_affine_without_active_rows(
        dp in proptest::array::uniform3(-0.01..0.01f64),
        dv in proptest::array::uniform3(-0.05..0.05f64),
        a in proptest::array::uniform3(-4.0..4.0f64),
        b in proptest::array::uniform3(-4.0..4.0f64),
    ) {
        let params = RobotParams::default();
        let weights = MpcWeights::default();
        let plan = standing_plan(&params, weights.horizon);
        let x = perturbed(dp, dv, [0.0; 3]);
        let k = weights.horizon;
        let zero = solve(&x, &plan, &weights, &vec![Disturbance::zero(); k]);
        let one = solve(&x, &plan, &weights, &vec![force(a[0], a[1], a[2]); k]);
        let two = solve(&x, &plan, &weights, &vec![force(b[0], b[1], b[2]); k]);
        let both = solve(&x, &plan, &weights, &vec![force(a[0] + b[0], a[1] + b[1], a[2] + b[2]); k]);
        let inactive = |o: &MpcOutput| o.solution.multipliers.iter().all(|l| *l == 0.0);
        prop_assume!(inactive(&zero) && inactive(&one) && inactive(&two) && inactive(&both));
        let lhs = &both.solution.u - &zero.solution.u;
        let rhs = (&one.solution.u - &zero.solution.u) + (&two.solution.u - &zero.solution.u);
        prop_assert!((lhs - rhs).amax() < 1e-8);
    }

    #[test]
    fn commands_respect_friction_and_bounds(
        dp in proptest::array::uniform3(-0.05..0.05f64),
        dv in proptest::array::uniform3(-1.0..1.0f64),
        dtheta in proptest::array::uniform3(-0.2..0.2f64),
        t in 0.0..0.6f64,
        push in -80.0..80.0f64,
    ) {
        let params = RobotParams::default();
        let weights = MpcWeights::default();
        let flags = schedule_contacts(&GaitSpec::trot(0.6, 0.5), t, weights.horizon, weights.dt);
        let plan = ContactPlan {
            steps: flags.iter().map(|&stance| ContactStep { stance, r: nominal_r(&params) }).collect(),
        };
        let x = perturbed(dp, dv, dtheta);
        let out = solve(&x, &plan, &weights, &vec![force(push, 0.0, 0.0); weights.horizon]);
        let tol = 1e-8 * (1.0 + params.fz_max);
        for (leg, f) in out.forces.iter().enumerate() {
            if !flags[0][leg] {
                prop_assert_eq!(*f, Vector3::zeros());
                continue;
            }
            prop_assert!(f.x.abs() <= params.mu * f.z + tol);
            prop_assert!(f.y.abs() <= params.mu * f.z + tol);
            prop_assert!(f.z >= params.fz_min - tol && f.z <= params.fz_max + tol);
        }
    }
}

#[test]
fn zero_effort_reference_misses_exact_balance() {
    use quadmpc::mpc::EffortReference;
    let params = RobotParams::default();
    let weights = MpcWeights { effort_reference: EffortReference::Zero, ..MpcWeights::default() };
    let x = State::at_rest(Vector3::new(0.0, 0.0, params.nominal_height));
    let out = solve(&x, &standing_plan(&params, weights.horizon), &weights, &vec![Disturbance::zero(); weights.horizon]);
    let total: f64 = out.forces.iter().map(|f| f.z).sum();
    let gap = (total - params.weight()).abs();
    assert!(gap > 1e-6 && gap < 1.0, "gap {gap}");
}
