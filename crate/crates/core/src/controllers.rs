//! Per-state safety-filter programs.
//!
//! Three controllers share one assembly pipeline:
//!
//! * [`ActiveComponentQp`] constrains only the components active at the
//!   current state (the classical QP filter lifted to nonsmooth sets);
//! * [`AllComponentsQp`] constrains every component, relaxing inactive ones
//!   through the transition function `β_i = M (h - max_{ℓ ∈ L_i} h^ℓ)`;
//! * [`AdaptiveQp`] additionally optimizes the gains `(α, M)` as decision
//!   variables subject to `α >= c_α`, `M >= c_M`.
//!
//! All three evaluate the dynamics of the min-guard piece at the state; an
//! optional strict mode constrains every active piece instead.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{DynamicsError, PiecewiseDynamics};
use crate::qp::{self, QpError, QpProblem, QpStatus};
use crate::safeset::{
    active_clauses_from, active_components_from, upper_active_components_from,
    ActivityTolerances, DnfEval, DnfForm, GradientFn, SafeSetError,
};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Solver(#[from] QpError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    SafeSet(#[from] SafeSetError),
    #[error("objective matrix must be {0}x{0}")]
    ObjectiveShape(usize),
}

pub type CostMatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Objective of the filter QP: either explicit `(Q(x), b(x))` or tracking of
/// a nominal input, which expands to `Q = I`, `b = -2 u_nom` so the cost is
/// `|u - u_nom|^2` up to a constant.
#[derive(Clone)]
pub enum ObjectiveSpec {
    Explicit { q: CostMatrixFn, b: GradientFn },
    TrackNominal { u_nom: GradientFn },
}

impl ObjectiveSpec {
    pub fn track(u_nom: GradientFn) -> Self {
        ObjectiveSpec::TrackNominal { u_nom }
    }

    pub fn cost_at(&self, x: &DVector<f64>, m: usize) -> Result<(DMatrix<f64>, DVector<f64>), ControlError> {
        match self {
            ObjectiveSpec::Explicit { q, b } => {
                let qm = q(x);
                if qm.nrows() != m || qm.ncols() != m {
                    return Err(ControlError::ObjectiveShape(m));
                }
                Ok((qm, b(x)))
            }
            ObjectiveSpec::TrackNominal { u_nom } => {
                let nominal = u_nom(x);
                if nominal.len() != m {
                    return Err(ControlError::ObjectiveShape(m));
                }
                Ok((DMatrix::identity(m, m), -2.0 * nominal))
            }
        }
    }

    pub fn nominal_at(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            ObjectiveSpec::TrackNominal { u_nom } => Some(u_nom(x)),
            ObjectiveSpec::Explicit { .. } => None,
        }
    }
}

/// Box input set `U`; entries may be infinite to mean unconstrained.
#[derive(Debug, Clone, Default)]
pub struct InputBounds {
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl InputBounds {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        let lo_ok = self
            .lower
            .as_ref()
            .is_none_or(|lo| u.iter().zip(lo.iter()).all(|(v, l)| *v >= l - tol));
        let hi_ok = self
            .upper
            .as_ref()
            .is_none_or(|hi| u.iter().zip(hi.iter()).all(|(v, h)| *v <= h + tol));
        lo_ok && hi_ok
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ActiveComponentConfig {
    pub alpha_gain: f64,
    pub tolerances: ActivityTolerances,
}

impl Default for ActiveComponentConfig {
    fn default() -> Self {
        Self { alpha_gain: 1.0, tolerances: ActivityTolerances::default() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AllComponentsConfig {
    pub alpha_gain: f64,
    pub transition_m: f64,
}

impl Default for AllComponentsConfig {
    fn default() -> Self {
        Self { alpha_gain: 1.0, transition_m: 1.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveConfig {
    pub c_alpha: f64,
    pub c_m: f64,
    pub q_alpha: f64,
    pub q_m: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self { c_alpha: 1.0, c_m: 100.0, q_alpha: 0.1, q_m: 0.1 }
    }
}

/// Diagnostics envelope returned by every controller evaluation.
#[derive(Debug, Clone)]
pub struct ControlResult {
    /// Minimizer when the program is feasible.
    pub input: Option<DVector<f64>>,
    pub adaptive_alpha: Option<f64>,
    pub adaptive_m: Option<f64>,
    /// Active component ids at the state (diagnostic).
    pub components: Vec<usize>,
    /// Active clause positions at the state (diagnostic).
    pub clauses: Vec<usize>,
    /// Pieces whose dynamics entered the constraint assembly.
    pub pieces: Vec<usize>,
    pub status: QpStatus,
    /// Slack of every assembled constraint row at the minimizer.
    pub margins: Vec<f64>,
    /// Remediation hint attached to infeasible results.
    pub suggestion: Option<String>,
}

impl ControlResult {
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Anything the simulator can query for an input at a state.
pub trait Controller: Send + Sync {
    fn control(&self, x: &DVector<f64>) -> Result<ControlResult, ControlError>;
    /// Activity tolerances used for diagnostics.
    fn tolerances(&self) -> ActivityTolerances {
        ActivityTolerances::default()
    }
}

/// Passes the nominal input through unfiltered. Baseline for tests and
/// convergence studies.
pub struct NominalController {
    pub u_nom: GradientFn,
}

impl Controller for NominalController {
    fn control(&self, x: &DVector<f64>) -> Result<ControlResult, ControlError> {
        Ok(ControlResult {
            input: Some((self.u_nom)(x)),
            adaptive_alpha: None,
            adaptive_m: None,
            components: Vec::new(),
            clauses: Vec::new(),
            pieces: Vec::new(),
            status: QpStatus::Optimal,
            margins: Vec::new(),
            suggestion: None,
        })
    }
}

fn assembly_pieces(
    dynamics: &PiecewiseDynamics,
    x: &DVector<f64>,
    strict: bool,
) -> Result<Vec<usize>, DynamicsError> {
    if strict {
        dynamics.active_pieces(x)
    } else {
        Ok(vec![dynamics.select_piece(x)])
    }
}

/// Sorts rows and removes exact duplicates (clause expansion produces many).
fn dedup_rows(rows: &mut Vec<(DVector<f64>, f64)>) {
    rows.sort_by(|a, b| {
        a.0.iter()
            .chain(std::iter::once(&a.1))
            .zip(b.0.iter().chain(std::iter::once(&b.1)))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
}

fn rows_to_problem(
    cost: DMatrix<f64>,
    lin: DVector<f64>,
    rows: &[(DVector<f64>, f64)],
    lower: Option<DVector<f64>>,
    upper: Option<DVector<f64>>,
) -> Result<QpProblem, QpError> {
    let d = lin.len();
    let mut a = DMatrix::zeros(rows.len(), d);
    let mut c = DVector::zeros(rows.len());
    for (i, (row, off)) in rows.iter().enumerate() {
        a.set_row(i, &row.transpose());
        c[i] = *off;
    }
    QpProblem::new(cost, lin, a, c)?.with_bounds(lower, upper)
}

fn solve_to_result(
    problem: &QpProblem,
    rows: &[(DVector<f64>, f64)],
    take_input: usize,
    adaptive: bool,
    eval: &DnfEval,
    dnf: &DnfForm,
    tol: &ActivityTolerances,
    pieces: Vec<usize>,
    infeasible_hint: Option<String>,
) -> Result<ControlResult, ControlError> {
    let solution = qp::solve_qp(problem, qp::DEFAULT_TOL)?;
    let components = active_components_from(dnf, eval, tol);
    let clauses = active_clauses_from(eval, tol);
    match solution.status {
        QpStatus::Optimal => {
            let z = &solution.minimizer;
            let margins: Vec<f64> = rows.iter().map(|(row, off)| row.dot(z) - off).collect();
            let input = DVector::from_iterator(take_input, (0..take_input).map(|k| z[k]));
            let (alpha, m) = if adaptive {
                (Some(z[take_input]), Some(z[take_input + 1]))
            } else {
                (None, None)
            };
            Ok(ControlResult {
                input: Some(input),
                adaptive_alpha: alpha,
                adaptive_m: m,
                components,
                clauses,
                pieces,
                status: QpStatus::Optimal,
                margins,
                suggestion: None,
            })
        }
        QpStatus::Infeasible => Ok(ControlResult {
            input: None,
            adaptive_alpha: None,
            adaptive_m: None,
            components,
            clauses,
            pieces,
            status: QpStatus::Infeasible,
            margins: Vec::new(),
            suggestion: infeasible_hint,
        }),
    }
}

/// Active-component QP: one row per `(i, j)` with `i` active at `x`,
/// `∇h_i · (f_j + G_j u) + α h_i >= 0`.
pub struct ActiveComponentQp {
    pub dnf: Arc<DnfForm>,
    pub dynamics: Arc<PiecewiseDynamics>,
    pub objective: ObjectiveSpec,
    pub config: ActiveComponentConfig,
    pub bounds: InputBounds,
    pub strict_pieces: bool,
}

impl Controller for ActiveComponentQp {
    fn control(&self, x: &DVector<f64>) -> Result<ControlResult, ControlError> {
        let m = self.dynamics.input_dim;
        let eval = self.dnf.evaluate(x);
        let tol = self.config.tolerances;
        let pieces = assembly_pieces(&self.dynamics, x, self.strict_pieces)?;
        let active = active_components_from(&self.dnf, &eval, &tol);

        let mut rows = Vec::new();
        for &j in &pieces {
            let (f, g) = self.dynamics.eval_dynamics(x, j)?;
            for &i in &active {
                let grad = self.dnf.registry().get(i)?.gradient(x);
                let row = g.transpose() * &grad;
                let off = -grad.dot(&f) - self.config.alpha_gain * eval.values[i - 1];
                rows.push((row, off));
            }
        }
        dedup_rows(&mut rows);

        let (q, b) = self.objective.cost_at(x, m)?;
        let problem =
            rows_to_problem(q, b, &rows, self.bounds.lower.clone(), self.bounds.upper.clone())?;
        solve_to_result(&problem, &rows, m, false, &eval, &self.dnf, &tol, pieces, None)
    }

    fn tolerances(&self) -> ActivityTolerances {
        self.config.tolerances
    }
}

/// All-components QP: one row per component `i` (per assembled piece),
/// `∇h_i · (f_j + G_j u) + α h_i + β_i >= 0` with the collapsed transition
/// term `β_i = M (h - max_{ℓ ∈ L_i} h^ℓ)`.
pub struct AllComponentsQp {
    pub dnf: Arc<DnfForm>,
    pub dynamics: Arc<PiecewiseDynamics>,
    pub objective: ObjectiveSpec,
    pub config: AllComponentsConfig,
    pub tolerances: ActivityTolerances,
    pub bounds: InputBounds,
    pub strict_pieces: bool,
}

impl Controller for AllComponentsQp {
    fn control(&self, x: &DVector<f64>) -> Result<ControlResult, ControlError> {
        let m = self.dynamics.input_dim;
        let eval = self.dnf.evaluate(x);
        let pieces = assembly_pieces(&self.dynamics, x, self.strict_pieces)?;

        let mut rows = Vec::new();
        for &j in &pieces {
            let (f, g) = self.dynamics.eval_dynamics(x, j)?;
            for i in self.dnf.component_ids() {
                let grad = self.dnf.registry().get(i)?.gradient(x);
                let beta = self.dnf.transition_beta_from(i, &eval, self.config.transition_m)?;
                let row = g.transpose() * &grad;
                let off = -grad.dot(&f) - self.config.alpha_gain * eval.values[i - 1] - beta;
                rows.push((row, off));
            }
        }
        dedup_rows(&mut rows);

        let (q, b) = self.objective.cost_at(x, m)?;
        let problem =
            rows_to_problem(q, b, &rows, self.bounds.lower.clone(), self.bounds.upper.clone())?;
        solve_to_result(
            &problem,
            &rows,
            m,
            false,
            &eval,
            &self.dnf,
            &self.tolerances,
            pieces,
            Some("all-components program infeasible; a larger transition gain M (with alpha) enlarges the feasible set".into()),
        )
    }

    fn tolerances(&self) -> ActivityTolerances {
        self.tolerances
    }
}

/// Adaptive QP over `(u, α, M)`: clause-expanded rows, one per `(ℓ, i)` with
/// `i ∈ I^ℓ`, linear in the decision vector since `h_i` and `h - h^ℓ` are
/// numbers at fixed `x`; gains bounded below by `(c_α, c_M)` and penalized
/// by `q_α α^2 + q_M M^2`.
pub struct AdaptiveQp {
    pub dnf: Arc<DnfForm>,
    pub dynamics: Arc<PiecewiseDynamics>,
    pub objective: ObjectiveSpec,
    pub config: AdaptiveConfig,
    pub tolerances: ActivityTolerances,
    pub bounds: InputBounds,
    pub strict_pieces: bool,
}

impl Controller for AdaptiveQp {
    fn control(&self, x: &DVector<f64>) -> Result<ControlResult, ControlError> {
        let m = self.dynamics.input_dim;
        let eval = self.dnf.evaluate(x);
        let pieces = assembly_pieces(&self.dynamics, x, self.strict_pieces)?;

        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for &j in &pieces {
            let (f, g) = self.dynamics.eval_dynamics(x, j)?;
            for (ell, clause) in self.dnf.clauses().iter().enumerate() {
                let gap = eval.h - eval.clause_values[ell];
                for &i in clause {
                    let grad = self.dnf.registry().get(i)?.gradient(x);
                    let gu = g.transpose() * &grad;
                    let mut row = DVector::zeros(m + 2);
                    for k in 0..m {
                        row[k] = gu[k];
                    }
                    row[m] = eval.values[i - 1];
                    row[m + 1] = gap;
                    rows.push((row, -grad.dot(&f)));
                }
            }
        }
        dedup_rows(&mut rows);

        let (q, b) = self.objective.cost_at(x, m)?;
        let mut cost = DMatrix::zeros(m + 2, m + 2);
        cost.view_mut((0, 0), (m, m)).copy_from(&q);
        cost[(m, m)] = self.config.q_alpha;
        cost[(m + 1, m + 1)] = self.config.q_m;
        let mut lin = DVector::zeros(m + 2);
        lin.rows_mut(0, m).copy_from(&b);

        let mut lower = DVector::from_element(m + 2, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(m + 2, f64::INFINITY);
        if let Some(lo) = &self.bounds.lower {
            lower.rows_mut(0, m).copy_from(lo);
        }
        if let Some(hi) = &self.bounds.upper {
            upper.rows_mut(0, m).copy_from(hi);
        }
        lower[m] = self.config.c_alpha;
        lower[m + 1] = self.config.c_m;

        let problem = rows_to_problem(cost, lin, &rows, Some(lower), Some(upper))?;
        solve_to_result(
            &problem,
            &rows,
            m,
            true,
            &eval,
            &self.dnf,
            &self.tolerances,
            pieces,
            Some("adaptive program infeasible at this state; outside the safe set the feasibility theorem gives no guarantee".into()),
        )
    }

    fn tolerances(&self) -> ActivityTolerances {
        self.tolerances
    }
}

/// Per-sample strict-feasibility margin of the boundary condition: existence
/// of `u ∈ U` with `∇h_i · (f_j + G_j u) > 0` for all upper-active `i` and
/// active pieces `j`.
#[derive(Debug, Clone)]
pub struct BoundarySample {
    pub state: DVector<f64>,
    pub h: f64,
    pub margin: f64,
    pub components: Vec<usize>,
    pub pieces: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BoundaryFeasibilityReport {
    pub samples: Vec<BoundarySample>,
    pub min_margin: f64,
    pub worst: Option<usize>,
    pub band: f64,
}

impl BoundaryFeasibilityReport {
    pub fn pass(&self) -> bool {
        self.min_margin > 0.0 && !self.samples.is_empty()
    }
}

/// Certifies the boundary condition on a list of samples expected to lie in
/// the band `|h| <= band` around the boundary. For each sample the strict
/// margin is maximized over the input set across all `(i, j)` pairs with
/// `i` upper-active and `j` an active piece.
pub fn verify_boundary_feasibility(
    dnf: &DnfForm,
    dynamics: &PiecewiseDynamics,
    samples: &[DVector<f64>],
    tol: &ActivityTolerances,
    bounds: &InputBounds,
    band: f64,
) -> Result<BoundaryFeasibilityReport, ControlError> {
    let m = dynamics.input_dim;
    let mut out = Vec::with_capacity(samples.len());
    let mut min_margin = f64::INFINITY;
    let mut worst = None;
    for (idx, x) in samples.iter().enumerate() {
        let eval = dnf.evaluate(x);
        debug_assert!(
            eval.h.abs() <= band * (1.0 + 1e-6),
            "boundary sample outside |h| <= {band}"
        );
        let components = upper_active_components_from(dnf, &eval, tol);
        let pieces = dynamics.active_pieces(x)?;
        let mut a = DMatrix::zeros(components.len() * pieces.len(), m);
        let mut c = DVector::zeros(components.len() * pieces.len());
        let mut r = 0;
        for &j in &pieces {
            let (f, g) = dynamics.eval_dynamics(x, j)?;
            for &i in &components {
                let grad = dnf.registry().get(i)?.gradient(x);
                let row = g.transpose() * &grad;
                a.set_row(r, &row.transpose());
                c[r] = -grad.dot(&f);
                r += 1;
            }
        }
        let (margin, _witness) =
            qp::max_strict_margin(&a, &c, bounds.lower.as_ref(), bounds.upper.as_ref())?;
        if margin < min_margin {
            min_margin = margin;
            worst = Some(idx);
        }
        out.push(BoundarySample { state: x.clone(), h: eval.h, margin, components, pieces });
    }
    Ok(BoundaryFeasibilityReport { samples: out, min_margin, worst, band })
}

/// Draws states with `|h| <= band` by bisecting segments between an inside
/// and an outside sample from `domain`. Gives up on a pair after the inside
/// or outside draw fails too often, so fewer than `count` samples can come
/// back for a degenerate set.
pub fn sample_boundary_states<R: rand::Rng>(
    dnf: &DnfForm,
    domain: &crate::BoxDomain,
    count: usize,
    band: f64,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let draw = |rng: &mut R, want_inside: bool| -> Option<DVector<f64>> {
        for _ in 0..2000 {
            let x = domain.sample(rng);
            let h = dnf.h(&x);
            if (want_inside && h > band) || (!want_inside && h < -band) {
                return Some(x);
            }
        }
        None
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (Some(mut inside), Some(mut outside)) = (draw(rng, true), draw(rng, false)) else {
            break;
        };
        for _ in 0..200 {
            let mid = (&inside + &outside) * 0.5;
            let h = dnf.h(&mid);
            if h.abs() <= 0.5 * band {
                out.push(mid);
                break;
            }
            if h > 0.0 {
                inside = mid;
            } else {
                outside = mid;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub enum ParamSearch {
    Found { alpha: f64, m: f64 },
    NotFound { worst_state: DVector<f64>, worst_margin: f64 },
}

/// Grid search for the smallest `(α, M)` (lexicographic, α outer) making the
/// all-components constraint set strictly feasible at every sample for every
/// active piece. Monotonicity of the feasible parameter set justifies the
/// ascending scan.
pub fn search_feasible_params(
    dnf: &DnfForm,
    dynamics: &PiecewiseDynamics,
    samples: &[DVector<f64>],
    alpha_grid: &[f64],
    m_grid: &[f64],
    bounds: &InputBounds,
) -> Result<ParamSearch, ControlError> {
    assert!(
        alpha_grid.windows(2).all(|w| w[0] < w[1]) && alpha_grid.iter().all(|&a| a > 0.0),
        "alpha grid must be strictly increasing and positive"
    );
    assert!(
        m_grid.windows(2).all(|w| w[0] < w[1]) && m_grid.iter().all(|&m| m > 0.0),
        "M grid must be strictly increasing and positive"
    );
    let m_dim = dynamics.input_dim;
    let mut worst_state = None;
    let mut worst_margin = f64::INFINITY;
    for &alpha in alpha_grid {
        for &gain in m_grid {
            let mut ok = true;
            for x in samples {
                let eval = dnf.evaluate(x);
                let pieces = dynamics.active_pieces(x)?;
                let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
                for &j in &pieces {
                    let (f, g) = dynamics.eval_dynamics(x, j)?;
                    for i in dnf.component_ids() {
                        let grad = dnf.registry().get(i)?.gradient(x);
                        let beta = dnf.transition_beta_from(i, &eval, gain)?;
                        let row = g.transpose() * &grad;
                        let off = -grad.dot(&f) - alpha * eval.values[i - 1] - beta;
                        rows.push((row, off));
                    }
                }
                let mut a = DMatrix::zeros(rows.len(), m_dim);
                let mut c = DVector::zeros(rows.len());
                for (i, (row, off)) in rows.iter().enumerate() {
                    a.set_row(i, &row.transpose());
                    c[i] = *off;
                }
                let (margin, _) =
                    qp::max_strict_margin(&a, &c, bounds.lower.as_ref(), bounds.upper.as_ref())?;
                if margin <= 0.0 {
                    ok = false;
                    if margin < worst_margin {
                        worst_margin = margin;
                        worst_state = Some(x.clone());
                    }
                    break;
                }
            }
            if ok {
                return Ok(ParamSearch::Found { alpha, m: gain });
            }
        }
    }
    Ok(ParamSearch::NotFound {
        worst_state: worst_state.unwrap_or_else(|| DVector::zeros(dynamics.state_dim)),
        worst_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{
        affine_guard, constant_drift, constant_input_matrix, DynamicsPiece,
    };
    use crate::safeset::{affine_component, ComponentRegistry, DnfForm, SafeSetExpr};
    use approx::assert_abs_diff_eq;

    fn corner_dnf() -> Arc<DnfForm> {
        let registry = Arc::new(
            ComponentRegistry::new(vec![
                affine_component(1, "upper_edge", vec![-1.0, 1.0], 1.0),
                affine_component(2, "lower_edge", vec![-1.0, -1.0], 1.0),
            ])
            .unwrap(),
        );
        let expr = SafeSetExpr::Intersection(vec![SafeSetExpr::Leaf(1), SafeSetExpr::Leaf(2)]);
        Arc::new(DnfForm::from_expr(&expr, registry).unwrap())
    }

    fn two_piece_planar() -> Arc<PiecewiseDynamics> {
        Arc::new(
            PiecewiseDynamics::new(
                vec![
                    DynamicsPiece::new(
                        1,
                        constant_drift(vec![1.0, 0.0]),
                        constant_input_matrix(2, 1, vec![-2.0, 1.0]),
                        affine_guard(vec![0.0, 1.0], 0.0),
                    ),
                    DynamicsPiece::new(
                        2,
                        constant_drift(vec![1.0, 0.0]),
                        constant_input_matrix(2, 1, vec![-2.0, -1.0]),
                        affine_guard(vec![0.0, -1.0], 0.0),
                    ),
                ],
                2,
                1,
            )
            .unwrap(),
        )
    }

    fn unit_objective() -> ObjectiveSpec {
        ObjectiveSpec::Explicit {
            q: Arc::new(|_x: &DVector<f64>| DMatrix::identity(1, 1)),
            b: Arc::new(|_x: &DVector<f64>| DVector::zeros(1)),
        }
    }

    fn act_controller() -> ActiveComponentQp {
        ActiveComponentQp {
            dnf: corner_dnf(),
            dynamics: two_piece_planar(),
            objective: unit_objective(),
            config: ActiveComponentConfig::default(),
            bounds: InputBounds::none(),
            strict_pieces: false,
        }
    }

    #[test]
    fn active_component_closed_form_lower_branch() {
        let ctrl = act_controller();
        let x = DVector::from_vec(vec![0.5, -0.2]);
        let res = ctrl.control(&x).unwrap();
        // u = -(1/3)(x2 - x1)
        assert_abs_diff_eq!(res.input.as_ref().unwrap()[0], 0.7 / 3.0, epsilon = 1e-9);
        assert_eq!(res.components, vec![1]);
        assert_eq!(res.pieces, vec![1]);
        assert!(res.min_margin() >= -1e-8);
    }

    #[test]
    fn active_component_closed_form_upper_branch() {
        let ctrl = act_controller();
        let x = DVector::from_vec(vec![0.5, 0.2]);
        let res = ctrl.control(&x).unwrap();
        // u = (1/3)(x2 + x1)
        assert_abs_diff_eq!(res.input.unwrap()[0], 0.7 / 3.0, epsilon = 1e-9);
        assert_eq!(res.components, vec![2]);
        assert_eq!(res.pieces, vec![2]);
    }

    #[test]
    fn deep_interior_returns_unconstrained_minimizer() {
        let ctrl = ActiveComponentQp {
            objective: ObjectiveSpec::Explicit {
                q: Arc::new(|_x| DMatrix::identity(1, 1)),
                b: Arc::new(|_x| DVector::from_vec(vec![-3.0])),
            },
            ..act_controller()
        };
        // far inside: constraint slack, minimizer = -Q^{-1} b / 2 = 1.5
        let x = DVector::from_vec(vec![-5.0, -0.5]);
        let res = ctrl.control(&x).unwrap();
        assert_abs_diff_eq!(res.input.unwrap()[0], 1.5, epsilon = 1e-9);
    }

    #[test]
    fn all_components_feasible_at_corner() {
        let ctrl = AllComponentsQp {
            dnf: corner_dnf(),
            dynamics: two_piece_planar(),
            objective: unit_objective(),
            config: AllComponentsConfig { alpha_gain: 1.0, transition_m: 10.0 },
            tolerances: ActivityTolerances::default(),
            bounds: InputBounds::none(),
            strict_pieces: false,
        };
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let res = ctrl.control(&x).unwrap();
        assert_eq!(res.status, QpStatus::Optimal);
        // both rows active with beta = 0: u >= x1/3 and u >= x1
        assert_abs_diff_eq!(res.input.as_ref().unwrap()[0], 1.0, epsilon = 1e-9);
        assert!(res.min_margin() >= -1e-8);
    }

    #[test]
    fn act_and_all_agree_on_smooth_single_component_set() {
        let registry = Arc::new(
            ComponentRegistry::new(vec![affine_component(1, "half_plane", vec![-1.0, 0.0], 1.0)])
                .unwrap(),
        );
        let dnf =
            Arc::new(DnfForm::from_expr(&SafeSetExpr::Leaf(1), registry).unwrap());
        let dynamics = two_piece_planar();
        let act = ActiveComponentQp {
            dnf: dnf.clone(),
            dynamics: dynamics.clone(),
            objective: unit_objective(),
            config: ActiveComponentConfig::default(),
            bounds: InputBounds::none(),
            strict_pieces: false,
        };
        let all = AllComponentsQp {
            dnf,
            dynamics,
            objective: unit_objective(),
            config: AllComponentsConfig { alpha_gain: 1.0, transition_m: 50.0 },
            tolerances: ActivityTolerances::default(),
            bounds: InputBounds::none(),
            strict_pieces: false,
        };
        for x in [[0.9, -0.4], [0.2, 0.3], [0.999, -0.001]] {
            let x = DVector::from_vec(x.to_vec());
            let ua = act.control(&x).unwrap().input.unwrap();
            let ub = all.control(&x).unwrap().input.unwrap();
            assert!((ua - ub).amax() <= 1e-8);
        }
    }

    #[test]
    fn adaptive_returns_floor_gains_when_slack() {
        let ctrl = AdaptiveQp {
            dnf: corner_dnf(),
            dynamics: two_piece_planar(),
            objective: ObjectiveSpec::track(Arc::new(|_x: &DVector<f64>| {
                DVector::from_vec(vec![0.25])
            })),
            config: AdaptiveConfig { c_alpha: 1.0, c_m: 100.0, q_alpha: 0.1, q_m: 0.1 },
            tolerances: ActivityTolerances::default(),
            bounds: InputBounds::none(),
            strict_pieces: false,
        };
        let x = DVector::from_vec(vec![-4.0, -0.3]);
        let res = ctrl.control(&x).unwrap();
        assert_abs_diff_eq!(res.input.unwrap()[0], 0.25, epsilon = 1e-8);
        assert_abs_diff_eq!(res.adaptive_alpha.unwrap(), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(res.adaptive_m.unwrap(), 100.0, epsilon = 1e-8);
    }

    #[test]
    fn adaptive_feasible_at_corner_steers_inward() {
        let ctrl = AdaptiveQp {
            dnf: corner_dnf(),
            dynamics: two_piece_planar(),
            objective: unit_objective(),
            config: AdaptiveConfig::default(),
            tolerances: ActivityTolerances::default(),
            bounds: InputBounds::none(),
            strict_pieces: false,
        };
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let res = ctrl.control(&x).unwrap();
        assert_eq!(res.status, QpStatus::Optimal);
        assert!(res.min_margin() >= -1e-8);
        // at the corner every constraint needs d/dt h_i >= 0
        let u = res.input.unwrap();
        let dnf = corner_dnf();
        let dynamics = two_piece_planar();
        let field = dynamics.closed_loop_field(&x, &u, 1).unwrap();
        for i in [1usize, 2] {
            let grad = dnf.registry().get(i).unwrap().gradient(&x);
            assert!(grad.dot(&field) >= -1e-8);
        }
    }

    #[test]
    fn infeasible_is_reported_not_thrown() {
        // zero input authority and outward drift
        let dynamics = Arc::new(
            PiecewiseDynamics::new(
                vec![DynamicsPiece::new(
                    1,
                    constant_drift(vec![1.0, 0.0]),
                    constant_input_matrix(2, 1, vec![0.0, 0.0]),
                    affine_guard(vec![0.0, 0.0], -1.0),
                )],
                2,
                1,
            )
            .unwrap(),
        );
        let ctrl = AllComponentsQp {
            dnf: corner_dnf(),
            dynamics,
            objective: unit_objective(),
            config: AllComponentsConfig::default(),
            tolerances: ActivityTolerances::default(),
            bounds: InputBounds::none(),
            strict_pieces: false,
        };
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let res = ctrl.control(&x).unwrap();
        assert_eq!(res.status, QpStatus::Infeasible);
        assert!(res.input.is_none());
        assert!(res.suggestion.is_some());
    }

    #[test]
    fn strict_piece_mode_constrains_every_active_piece() {
        // asymmetric second piece so the extra rows matter on the surface
        let dynamics = Arc::new(
            PiecewiseDynamics::new(
                vec![
                    DynamicsPiece::new(
                        1,
                        constant_drift(vec![1.0, 0.0]),
                        constant_input_matrix(2, 1, vec![-2.0, 1.0]),
                        affine_guard(vec![0.0, 1.0], 0.0),
                    ),
                    DynamicsPiece::new(
                        2,
                        constant_drift(vec![1.0, 0.0]),
                        constant_input_matrix(2, 1, vec![-2.0, -3.0]),
                        affine_guard(vec![0.0, -1.0], 0.0),
                    ),
                ],
                2,
                1,
            )
            .unwrap(),
        );
        let make = |strict_pieces: bool| ActiveComponentQp {
            dnf: corner_dnf(),
            dynamics: dynamics.clone(),
            objective: unit_objective(),
            config: ActiveComponentConfig::default(),
            bounds: InputBounds::none(),
            strict_pieces,
        };
        let loose = make(false);
        let strict = make(true);
        let x = DVector::from_vec(vec![0.5, 0.0]);
        let res = loose.control(&x).unwrap();
        assert_eq!(res.status, QpStatus::Optimal);
        assert_abs_diff_eq!(res.input.as_ref().unwrap()[0], 0.5, epsilon = 1e-9);
        assert_eq!(res.pieces, vec![1]);
        // the second piece's gradient row contradicts the first's here
        let res = strict.control(&x).unwrap();
        assert_eq!(res.status, QpStatus::Infeasible);
        assert_eq!(res.pieces, vec![1, 2]);
    }

    #[test]
    fn input_stays_inside_box_bounds() {
        let bounds = InputBounds {
            lower: Some(DVector::from_vec(vec![0.0])),
            upper: Some(DVector::from_vec(vec![1.0])),
        };
        let ctrl = ActiveComponentQp { bounds: bounds.clone(), ..act_controller() };
        let x = DVector::from_vec(vec![0.5, -0.2]);
        let res = ctrl.control(&x).unwrap();
        assert_eq!(res.status, QpStatus::Optimal);
        assert!(bounds.contains(res.input.as_ref().unwrap(), 1e-9));

        // tight box excludes every feasible input
        let tight = InputBounds {
            lower: Some(DVector::from_vec(vec![0.0])),
            upper: Some(DVector::from_vec(vec![0.1])),
        };
        let ctrl = ActiveComponentQp { bounds: tight, ..act_controller() };
        let res = ctrl.control(&x).unwrap();
        assert_eq!(res.status, QpStatus::Infeasible);
    }

    #[test]
    fn boundary_feasibility_corner_passes_zero_input_fails() {
        let dnf = corner_dnf();
        let dynamics = two_piece_planar();
        let samples = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.5, -0.5]),
            DVector::from_vec(vec![0.5, 0.5]),
        ];
        let tol = ActivityTolerances::default();
        let report = verify_boundary_feasibility(
            &dnf,
            &dynamics,
            &samples,
            &tol,
            &InputBounds::none(),
            1e-3,
        )
        .unwrap();
        assert!(report.pass(), "min margin {}", report.min_margin);

        let zero = InputBounds {
            lower: Some(DVector::zeros(1)),
            upper: Some(DVector::zeros(1)),
        };
        let report =
            verify_boundary_feasibility(&dnf, &dynamics, &samples, &tol, &zero, 1e-3).unwrap();
        assert!(!report.pass());
        assert!(report.min_margin < 0.0);
    }

    #[test]
    fn param_search_returns_first_feasible_pair() {
        let dnf = corner_dnf();
        let dynamics = two_piece_planar();
        let samples = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.6, -0.1]),
            DVector::from_vec(vec![0.2, 0.05]),
        ];
        let found = search_feasible_params(
            &dnf,
            &dynamics,
            &samples,
            &[1.0],
            &[1.0, 10.0, 100.0],
            &InputBounds::none(),
        )
        .unwrap();
        match found {
            ParamSearch::Found { alpha, m } => {
                assert_eq!(alpha, 1.0);
                assert_eq!(m, 1.0);
            }
            ParamSearch::NotFound { .. } => panic!("expected feasible parameters"),
        }

        let zero = InputBounds {
            lower: Some(DVector::zeros(1)),
            upper: Some(DVector::zeros(1)),
        };
        let missing =
            search_feasible_params(&dnf, &dynamics, &samples, &[1.0], &[1.0, 10.0], &zero)
                .unwrap();
        assert!(matches!(missing, ParamSearch::NotFound { .. }));
    }
}
