//! Closed-loop integration with sample-and-hold control and codimension-1
//! sliding handling.
//!
//! The controller is evaluated at the start of each step and held constant
//! over it. In `EquivalentControl` mode a state on a switching surface
//! (exactly two pieces within the guard band) advances along the tangent
//! convex combination of the two one-sided closed-loop fields, where each
//! side uses the controller limit from that side; mid-step crossings are
//! located by linear interpolation of the guard and the remainder of the
//! step slides with the held input when the surface attracts. `Chatter`
//! mode integrates the raw piecewise field and approximates sliding as the
//! step size shrinks.

use nalgebra::DVector;
use thiserror::Error;

use crate::controllers::{ControlError, Controller};
use crate::dynamics::{DynamicsError, DynamicsPiece, PiecewiseDynamics};
use crate::safeset::{active_clauses_from, active_components_from, DnfForm};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlidingMode {
    Chatter,
    EquivalentControl,
}

#[derive(Debug, Clone, Copy)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_final: f64,
    pub scheme: Scheme,
    pub sliding_mode: SlidingMode,
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) {
            return Err(SimError::Config("dt must be positive".into()));
        }
        if self.dt > self.t_final {
            return Err(SimError::Config("dt must not exceed t_final".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("integrator config: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("controller infeasible along probe path")]
    InfeasibleProbe,
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Optimal,
    InfeasibleFallback,
}

/// Time-indexed closed-loop record. All arrays have one entry per time
/// sample; step quantities (input, status, gains, sliding flag) at index `k`
/// describe the step leaving sample `k`, with the final index repeating the
/// last step.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub h_values: Vec<f64>,
    pub active_clauses: Vec<Vec<usize>>,
    pub active_components: Vec<Vec<usize>>,
    pub pieces: Vec<usize>,
    pub sliding: Vec<bool>,
    pub alphas: Vec<Option<f64>>,
    pub transition_gains: Vec<Option<f64>>,
    pub statuses: Vec<StepStatus>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    /// State component `i` at the sample closest to time `t`.
    pub fn state_at(&self, t: f64) -> Option<&DVector<f64>> {
        if self.times.is_empty() {
            return None;
        }
        let idx = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)?;
        self.states.get(idx)
    }
}

#[derive(Debug, Clone)]
pub struct SafetyReport {
    pub min_h: f64,
    pub first_violation_time: Option<f64>,
    pub violation_tol: f64,
    pub infeasible_steps: usize,
}

impl SafetyReport {
    pub fn violated(&self) -> bool {
        self.first_violation_time.is_some()
    }
}

/// Default tolerance separating genuine invariance failures from
/// discretization noise, in `h` units.
pub const DEFAULT_VIOLATION_TOL: f64 = 1e-3;

/// Min of the recorded barrier values and the first time it crosses below
/// `-tol`.
pub fn monitor_safety(traj: &Trajectory, tol: f64) -> SafetyReport {
    let min_h = traj.h_values.iter().copied().fold(f64::INFINITY, f64::min);
    let first_violation_time = traj
        .h_values
        .iter()
        .zip(&traj.times)
        .find(|(h, _)| **h < -tol)
        .map(|(_, t)| *t);
    let steps = traj.steps();
    let infeasible_steps = traj
        .statuses
        .iter()
        .take(steps)
        .filter(|s| **s == StepStatus::InfeasibleFallback)
        .count();
    SafetyReport { min_h, first_violation_time, violation_tol: tol, infeasible_steps }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub trajectory: Trajectory,
    pub report: SafetyReport,
    /// Message of the controller hard failure that aborted the run, if any.
    pub solver_failure: Option<String>,
    /// Steps where more than two pieces met and sliding fell back to the raw
    /// field.
    pub codim_fallbacks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("fields do not satisfy the sliding attraction condition")]
pub struct NotSliding;

/// Relative offset used to evaluate one-sided controller limits next to a
/// switching surface. Must clear the guard band (1e-9) while staying small
/// against the per-step constraint tolerances.
const SLIDING_NUDGE: f64 = 1e-7;

/// Central-difference gradient of a region guard.
fn guard_gradient(piece: &DynamicsPiece, x: &DVector<f64>) -> DVector<f64> {
    let step = 1e-6 * (1.0 + x.amax());
    let mut grad = DVector::zeros(x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += step;
        xm[k] -= step;
        grad[k] = (piece.guard(&xp) - piece.guard(&xm)) / (2.0 * step);
    }
    grad
}

/// Tangent convex combination of two fields on the surface `g_{j1} = 0`,
/// oriented from region `j1` (guard negative) to region `j2`. Requires the
/// attraction condition `∇g·F1 > 0 > ∇g·F2`; equal fields are returned
/// unchanged.
fn combine_fields(
    dynamics: &PiecewiseDynamics,
    x: &DVector<f64>,
    f1: &DVector<f64>,
    f2: &DVector<f64>,
    j1: usize,
) -> Result<(DVector<f64>, f64), NotSliding> {
    let scale = f1.amax().max(f2.amax()).max(1.0);
    if (f1 - f2).amax() <= 1e-14 * scale {
        return Ok((f1.clone(), 0.5));
    }
    let piece = dynamics.piece(j1).map_err(|_| NotSliding)?;
    let grad = guard_gradient(piece, x);
    let d1 = grad.dot(f1);
    let d2 = grad.dot(f2);
    if !(d1 > 0.0 && d2 < 0.0) {
        return Err(NotSliding);
    }
    let lambda = d2 / (d2 - d1);
    Ok((f1 * lambda + f2 * (1.0 - lambda), lambda))
}

/// Equivalent-control field on the codimension-1 surface shared by pieces
/// `j1` and `j2` with a single held input `u` on both sides. Errors with
/// [`NotSliding`] when the surface does not attract both fields.
pub fn filippov_sliding_field(
    dynamics: &PiecewiseDynamics,
    x: &DVector<f64>,
    u: &DVector<f64>,
    j1: usize,
    j2: usize,
) -> Result<DVector<f64>, NotSliding> {
    let f1 = dynamics.closed_loop_field(x, u, j1).map_err(|_| NotSliding)?;
    let f2 = dynamics.closed_loop_field(x, u, j2).map_err(|_| NotSliding)?;
    combine_fields(dynamics, x, &f1, &f2, j1).map(|(field, _)| field)
}

/// Sliding field with one-sided inputs, with the combination coefficient
/// clamped so intermediate integration stages remain defined.
fn sliding_field_clamped(
    dynamics: &PiecewiseDynamics,
    y: &DVector<f64>,
    u_minus: &DVector<f64>,
    u_plus: &DVector<f64>,
    j1: usize,
    j2: usize,
) -> Result<DVector<f64>, DynamicsError> {
    let f1 = dynamics.closed_loop_field(y, u_minus, j1)?;
    let f2 = dynamics.closed_loop_field(y, u_plus, j2)?;
    let scale = f1.amax().max(f2.amax()).max(1.0);
    if (&f1 - &f2).amax() <= 1e-14 * scale {
        return Ok(f1);
    }
    let grad = guard_gradient(dynamics.piece(j1)?, y);
    let d1 = grad.dot(&f1);
    let d2 = grad.dot(&f2);
    let denom = d2 - d1;
    if denom.abs() <= 1e-14 * scale {
        return Ok((f1 + f2) * 0.5);
    }
    let lambda = (d2 / denom).clamp(0.0, 1.0);
    Ok(f1 * lambda + f2 * (1.0 - lambda))
}

fn integrate<F>(x: &DVector<f64>, dt: f64, scheme: Scheme, field: F) -> Result<DVector<f64>, DynamicsError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, DynamicsError>,
{
    match scheme {
        Scheme::Euler => Ok(x + field(x)? * dt),
        Scheme::Rk4 => {
            let k1 = field(x)?;
            let k2 = field(&(x + &k1 * (dt / 2.0)))?;
            let k3 = field(&(x + &k2 * (dt / 2.0)))?;
            let k4 = field(&(x + &k3 * dt))?;
            Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
        }
    }
}

/// Pieces whose guards vanish at `x` (within the guard band).
fn surface_pieces(dynamics: &PiecewiseDynamics, x: &DVector<f64>) -> Vec<usize> {
    dynamics
        .pieces()
        .iter()
        .filter(|p| p.guard(x).abs() <= dynamics.eps_guard)
        .map(|p| p.id)
        .collect()
}

struct SlidingStart {
    u_minus: DVector<f64>,
    u_plus: DVector<f64>,
    u_equivalent: DVector<f64>,
    alpha: Option<f64>,
    gain: Option<f64>,
    j1: usize,
    j2: usize,
}

/// One-sided controller limits at a surface state, obtained by nudging the
/// state into each neighboring region along the guard normal.
fn one_sided_start(
    controller: &dyn Controller,
    dynamics: &PiecewiseDynamics,
    x: &DVector<f64>,
    j1: usize,
    j2: usize,
) -> Result<Option<SlidingStart>, ControlError> {
    let piece = dynamics.piece(j1)?;
    let grad = guard_gradient(piece, x);
    let norm = grad.norm();
    if norm <= 1e-12 {
        return Ok(None);
    }
    let nudge = SLIDING_NUDGE * (1.0 + x.amax());
    let dir = grad / norm;
    let x_minus = x - &dir * nudge;
    let x_plus = x + &dir * nudge;
    let res_minus = controller.control(&x_minus)?;
    let res_plus = controller.control(&x_plus)?;
    let (alpha, gain) = (res_minus.adaptive_alpha, res_minus.adaptive_m);
    let (Some(u_minus), Some(u_plus)) = (res_minus.input, res_plus.input) else {
        return Ok(None);
    };
    let f1 = dynamics.closed_loop_field(x, &u_minus, j1)?;
    let f2 = dynamics.closed_loop_field(x, &u_plus, j2)?;
    match combine_fields(dynamics, x, &f1, &f2, j1) {
        Ok((_, lambda)) => {
            let u_equivalent = &u_minus * lambda + &u_plus * (1.0 - lambda);
            Ok(Some(SlidingStart { u_minus, u_plus, u_equivalent, alpha, gain, j1, j2 }))
        }
        Err(NotSliding) => Ok(None),
    }
}

/// States exactly inside a surface band are nudged into the selected
/// piece's region before sampling the controller: the Filippov map ignores
/// the controller's values on the measure-zero surface, and using them can
/// trap the discretization in spurious orbits (the corner scenario closes a
/// four-step cycle that no Filippov solution follows).
fn controller_sample_state(dynamics: &PiecewiseDynamics, x: &DVector<f64>) -> DVector<f64> {
    if surface_pieces(dynamics, x).len() < 2 {
        return x.clone();
    }
    let j = dynamics.select_piece(x);
    let Ok(piece) = dynamics.piece(j) else {
        return x.clone();
    };
    let grad = guard_gradient(piece, x);
    let norm = grad.norm();
    if norm <= 1e-12 {
        return x.clone();
    }
    x - grad * (SLIDING_NUDGE * (1.0 + x.amax()) / norm)
}

/// When the step left the starting piece's region, locates the crossing by
/// linear interpolation of the guard and, if the surface attracts the
/// held-input fields, slides for the remainder of the step.
fn capture_crossing(
    dynamics: &PiecewiseDynamics,
    x: &DVector<f64>,
    x_end: DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    scheme: Scheme,
    codim_fallbacks: &mut usize,
) -> Result<DVector<f64>, DynamicsError> {
    let j0 = dynamics.select_piece(x);
    let guard0 = dynamics.piece(j0)?.guard(x);
    let guard_end = dynamics.piece(j0)?.guard(&x_end);
    if guard_end <= dynamics.eps_guard || guard_end <= guard0 {
        return Ok(x_end);
    }
    let theta = ((0.0 - guard0) / (guard_end - guard0)).clamp(0.0, 1.0);
    let x_cross = x + (&x_end - x) * theta;
    let partners: Vec<usize> = dynamics
        .pieces()
        .iter()
        .filter(|p| p.id != j0 && p.guard(&x_cross) <= dynamics.eps_guard)
        .map(|p| p.id)
        .collect();
    let [j2] = partners.as_slice() else {
        if partners.len() > 1 {
            *codim_fallbacks += 1;
        }
        return Ok(x_end);
    };
    let j2 = *j2;
    if filippov_sliding_field(dynamics, &x_cross, u, j0, j2).is_err() {
        return Ok(x_end);
    }
    let remaining = (1.0 - theta) * dt;
    integrate(&x_cross, remaining, scheme, |y| {
        sliding_field_clamped(dynamics, y, u, u, j0, j2)
    })
}

/// Integrates the closed loop from `x0` for `t_final` with sample-and-hold
/// control, recording diagnostics each step and monitoring safety. A
/// controller hard failure aborts with the partial trajectory in the
/// outcome; an infeasible program holds the last feasible input and is
/// counted, never fatal.
pub fn simulate(
    x0: &DVector<f64>,
    controller: &dyn Controller,
    dnf: &DnfForm,
    dynamics: &PiecewiseDynamics,
    cfg: &IntegratorConfig,
) -> Result<SimOutcome, SimError> {
    cfg.validate()?;
    let steps = ((cfg.t_final / cfg.dt).round() as usize).max(1);
    let tol = controller.tolerances();
    let m = dynamics.input_dim;

    let mut traj = Trajectory::default();
    let mut x = x0.clone();
    let mut last_u = DVector::zeros(m);
    let mut solver_failure = None;
    let mut codim_fallbacks = 0usize;

    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let eval = dnf.evaluate(&x);
        let clauses = active_clauses_from(&eval, &tol);
        let components = active_components_from(dnf, &eval, &tol);
        let piece = dynamics.select_piece(&x);

        let mut step_u: Option<DVector<f64>> = None;
        let mut next_x: Option<DVector<f64>> = None;
        let mut slid = false;
        let mut status = StepStatus::Optimal;
        let mut alpha = None;
        let mut gain = None;

        if cfg.sliding_mode == SlidingMode::EquivalentControl {
            let on_surface = surface_pieces(dynamics, &x);
            if on_surface.len() == 2 {
                let (j1, j2) = (on_surface[0], on_surface[1]);
                match one_sided_start(controller, dynamics, &x, j1, j2) {
                    Ok(Some(start)) => {
                        let xe = integrate(&x, cfg.dt, cfg.scheme, |y| {
                            sliding_field_clamped(
                                dynamics,
                                y,
                                &start.u_minus,
                                &start.u_plus,
                                start.j1,
                                start.j2,
                            )
                        })?;
                        step_u = Some(start.u_equivalent);
                        alpha = start.alpha;
                        gain = start.gain;
                        next_x = Some(xe);
                        slid = true;
                    }
                    Ok(None) => {}
                    Err(err) => {
                        solver_failure = Some(err.to_string());
                        break;
                    }
                }
            } else if on_surface.len() > 2 {
                codim_fallbacks += 1;
            }
        }

        if next_x.is_none() {
            let sample_state = controller_sample_state(dynamics, &x);
            let res = match controller.control(&sample_state) {
                Ok(res) => res,
                Err(err) => {
                    solver_failure = Some(err.to_string());
                    break;
                }
            };
            alpha = res.adaptive_alpha;
            gain = res.adaptive_m;
            let u = match res.input {
                Some(u) => u,
                None => {
                    status = StepStatus::InfeasibleFallback;
                    last_u.clone()
                }
            };
            let mut xe = integrate(&x, cfg.dt, cfg.scheme, |y| dynamics.field_at(y, &u))?;
            if cfg.sliding_mode == SlidingMode::EquivalentControl {
                xe = capture_crossing(
                    dynamics,
                    &x,
                    xe,
                    &u,
                    cfg.dt,
                    cfg.scheme,
                    &mut codim_fallbacks,
                )?;
            }
            step_u = Some(u);
            next_x = Some(xe);
        }

        let u = step_u.expect("step input set");
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.inputs.push(u.clone());
        traj.h_values.push(eval.h);
        traj.active_clauses.push(clauses);
        traj.active_components.push(components);
        traj.pieces.push(piece);
        traj.sliding.push(slid);
        traj.alphas.push(alpha);
        traj.transition_gains.push(gain);
        traj.statuses.push(status);

        last_u = u;
        x = next_x.expect("step state set");
    }

    // final sample; step quantities repeat the last step
    let t_end = traj.times.len() as f64 * cfg.dt;
    let eval = dnf.evaluate(&x);
    traj.times.push(t_end);
    traj.states.push(x.clone());
    traj.inputs.push(last_u.clone());
    traj.h_values.push(eval.h);
    traj.active_clauses.push(active_clauses_from(&eval, &tol));
    traj.active_components.push(active_components_from(dnf, &eval, &tol));
    traj.pieces.push(dynamics.select_piece(&x));
    traj.sliding.push(traj.sliding.last().copied().unwrap_or(false));
    traj.alphas.push(traj.alphas.last().copied().flatten());
    traj.transition_gains.push(traj.transition_gains.last().copied().flatten());
    traj.statuses.push(traj.statuses.last().copied().unwrap_or(StepStatus::Optimal));

    let report = monitor_safety(&traj, DEFAULT_VIOLATION_TOL);
    Ok(SimOutcome { trajectory: traj, report, solver_failure, codim_fallbacks })
}

/// Max consecutive input jump along a path at two sample resolutions.
#[derive(Debug, Clone, Copy)]
pub struct ContinuityReport {
    pub samples: usize,
    pub jump_coarse: f64,
    pub jump_fine: f64,
    /// `jump_coarse / jump_fine`; near 2 for a controller continuous along
    /// the path, near 1 across a genuine discontinuity.
    pub ratio: f64,
}

fn max_jump<P>(controller: &dyn Controller, path: &P, samples: usize) -> Result<f64, SimError>
where
    P: Fn(f64) -> DVector<f64>,
{
    let mut prev: Option<DVector<f64>> = None;
    let mut worst: f64 = 0.0;
    for k in 0..=samples {
        let s = k as f64 / samples as f64;
        let res = controller.control(&path(s))?;
        let u = res.input.ok_or(SimError::InfeasibleProbe)?;
        if let Some(p) = &prev {
            worst = worst.max((&u - p).norm());
        }
        prev = Some(u);
    }
    Ok(worst)
}

/// Evaluates the controller along `path` at `samples` and `2·samples`
/// subintervals and reports the max consecutive jump of each resolution.
pub fn continuity_probe<P>(
    controller: &dyn Controller,
    path: &P,
    samples: usize,
) -> Result<ContinuityReport, SimError>
where
    P: Fn(f64) -> DVector<f64>,
{
    assert!(samples >= 2, "need at least two subintervals");
    let jump_coarse = max_jump(controller, path, samples)?;
    let jump_fine = max_jump(controller, path, 2 * samples)?;
    let ratio = if jump_fine > 0.0 { jump_coarse / jump_fine } else { f64::INFINITY };
    Ok(ContinuityReport { samples, jump_coarse, jump_fine, ratio })
}
