//! Shared fixtures for the integration suites: the two built-in scenarios,
//! a third union-of-intersections lane scenario, and sampling helpers.

#![allow(dead_code)]

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use nscbf_core::dynamics::PiecewiseDynamics;
use nscbf_core::safeset::DnfForm;
use nscbf_core::scenario::{
    ComponentKind, ComponentSpec, ControllerKind, ControllerSpec, DomainSpec, DriftSpec,
    DynamicsSpec, ExprSpec, InputMatrixSpec, IntegratorSpec, ObjectiveConfig, PieceSpec,
    SafeSetSpec, Scenario, ScenarioConfig, SchemeSpec, SlidingSpec,
};
use nscbf_core::sim::Trajectory;

/// Two unit disks joined by a union, intersected with a half-plane: two
/// clauses, so the transition functions are nontrivial.
pub fn union_lane_config() -> ScenarioConfig {
    ScenarioConfig {
        name: "union-lane".into(),
        dynamics: DynamicsSpec {
            builtin: None,
            state_dim: 2,
            input_dim: 2,
            pieces: vec![PieceSpec {
                id: 1,
                drift: DriftSpec::Zero { dim: 2 },
                input: InputMatrixSpec::Identity { dim: 2 },
                guard: nscbf_core::scenario::GuardSpec::AlwaysInside,
            }],
            eps_guard: None,
        },
        safeset: SafeSetSpec {
            components: vec![
                ComponentSpec {
                    name: "left_disk".into(),
                    kind: ComponentKind::QuadraticNorm {
                        center: vec![-1.0, 0.0],
                        weights: None,
                        offset: 1.0,
                        scale: -1.0,
                    },
                },
                ComponentSpec {
                    name: "right_disk".into(),
                    kind: ComponentKind::QuadraticNorm {
                        center: vec![1.0, 0.0],
                        weights: None,
                        offset: 1.0,
                        scale: -1.0,
                    },
                },
                ComponentSpec {
                    name: "ceiling".into(),
                    kind: ComponentKind::Affine { a: vec![0.0, -1.0], b: 0.8 },
                },
            ],
            expr: ExprSpec::All {
                all: vec![
                    ExprSpec::Any {
                        any: vec![
                            ExprSpec::Leaf { leaf: "left_disk".into() },
                            ExprSpec::Leaf { leaf: "right_disk".into() },
                        ],
                    },
                    ExprSpec::Leaf { leaf: "ceiling".into() },
                ],
            },
        },
        controller: ControllerSpec {
            kind: ControllerKind::All,
            alpha: 1.0,
            transition_m: 50.0,
            c_alpha: 1.0,
            c_m: 100.0,
            q_alpha: 0.1,
            q_m: 0.1,
            eps_clause: 1e-9,
            eps_component: 1e-9,
            strict_pieces: false,
        },
        objective: ObjectiveConfig::Nominal { goal: vec![1.0, 0.0] },
        integrator: IntegratorSpec {
            dt: 0.01,
            t_final: 1.0,
            scheme: SchemeSpec::Euler,
            sliding: SlidingSpec::Chatter,
        },
        initial_states: vec![vec![-1.0, 0.0]],
        input_bounds: None,
        domain: DomainSpec { lower: vec![-2.5, -2.5], upper: vec![2.5, 2.5] },
    }
}

pub fn union_lane() -> Scenario {
    Scenario::from_config(union_lane_config()).expect("union-lane fixture is valid")
}

/// Uniform sample from the open ball of radius `radius` around `center`.
pub fn sample_ball(center: &DVector<f64>, radius: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let n = center.len();
    loop {
        let dir =
            DVector::from_iterator(n, (0..n).map(|_| rng.gen_range(-1.0f64..1.0)));
        if dir.norm() <= 1.0 && dir.norm() > 1e-12 {
            return center + dir * radius;
        }
    }
}

/// Minimum over trajectory steps and components of the relaxed barrier row
/// `∇h_i·(f_j + G_j u) + α h_i + β_i` with the min-guard piece at each step;
/// gains fall back to the supplied constants where the trajectory carries
/// none (non-adaptive controllers).
pub fn min_constraint_value(
    traj: &Trajectory,
    dnf: &DnfForm,
    dynamics: &PiecewiseDynamics,
    default_alpha: f64,
    default_m: f64,
) -> f64 {
    let mut worst = f64::INFINITY;
    for k in 0..traj.steps() {
        let x = &traj.states[k];
        let u = &traj.inputs[k];
        let alpha = traj.alphas[k].unwrap_or(default_alpha);
        let m = traj.transition_gains[k].unwrap_or(default_m);
        let eval = dnf.evaluate(x);
        let j = dynamics.select_piece(x);
        let (f, g) = dynamics.eval_dynamics(x, j).expect("piece evaluates");
        let field = f + g * u;
        for i in dnf.component_ids() {
            let grad = dnf.registry().get(i).expect("registered").gradient(x);
            let beta = dnf.transition_beta_from(i, &eval, m).expect("component in set");
            worst = worst.min(grad.dot(&field) + alpha * eval.values[i - 1] + beta);
        }
    }
    worst
}
