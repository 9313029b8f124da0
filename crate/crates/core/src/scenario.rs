//! Scenario configuration: a TOML schema over a small library of component
//! functions (affine, quadratic norm, pairwise distance) and dynamics pieces
//! (constant/zero drift, constant/identity input matrix, affine guards),
//! plus the two built-in scenarios `example1-corner` and
//! `multiagent-reconfig`.
//!
//! Loading validates references, dimensions, gradients (finite differences),
//! and guard coverage, reporting the offending field on failure.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{
    ActiveComponentConfig, ActiveComponentQp, AdaptiveConfig, AdaptiveQp, AllComponentsConfig,
    AllComponentsQp, Controller, InputBounds, ObjectiveSpec,
};
use crate::dynamics::{
    affine_guard, always_inside_guard, constant_drift, constant_input_matrix,
    identity_input_matrix, DynamicsPiece, PiecewiseDynamics,
};
use crate::safeset::{
    check_gradients_fd, ActivityTolerances, ComponentRegistry, DnfForm, SafeSetExpr,
    SmoothComponent,
};
use crate::sim::{IntegratorConfig, Scheme, SlidingMode};
use crate::BoxDomain;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid field `{field}`: {message}")]
    Validation { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation { field: field.to_string(), message: message.into() }
}

fn one() -> f64 {
    1.0
}

fn hundred() -> f64 {
    100.0
}

fn tenth() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-9
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub dynamics: DynamicsSpec,
    pub safeset: SafeSetSpec,
    pub controller: ControllerSpec,
    pub objective: ObjectiveConfig,
    pub integrator: IntegratorSpec,
    pub initial_states: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_bounds: Option<InputBoundsSpec>,
    pub domain: DomainSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DynamicsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default)]
    pub state_dim: usize,
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pieces: Vec<PieceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_guard: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PieceSpec {
    pub id: usize,
    pub drift: DriftSpec,
    pub input: InputMatrixSpec,
    pub guard: GuardSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    Constant { value: Vec<f64> },
    Zero { dim: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputMatrixSpec {
    Constant { rows: Vec<Vec<f64>> },
    Identity { dim: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuardSpec {
    Affine { a: Vec<f64>, b: f64 },
    AlwaysInside,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SafeSetSpec {
    pub components: Vec<ComponentSpec>,
    pub expr: ExprSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComponentSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ComponentKind,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentKind {
    /// `h(x) = a·x + b`
    Affine { a: Vec<f64>, b: f64 },
    /// `h(x) = scale (Σ_k w_k (x_k - center_k)^2 - offset)`
    QuadraticNorm {
        center: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
        offset: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `h(x) = |x_A - x_B|^2 - min_dist^2` over coordinate blocks starting
    /// at `first` and `second`
    PairwiseDistance { first: usize, second: usize, dim: usize, min_dist: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ExprSpec {
    Leaf { leaf: String },
    Any { any: Vec<ExprSpec> },
    All { all: Vec<ExprSpec> },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Act,
    All,
    Adp,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub transition_m: f64,
    #[serde(default = "one")]
    pub c_alpha: f64,
    #[serde(default = "hundred")]
    pub c_m: f64,
    #[serde(default = "tenth")]
    pub q_alpha: f64,
    #[serde(default = "tenth")]
    pub q_m: f64,
    #[serde(default = "default_eps")]
    pub eps_clause: f64,
    #[serde(default = "default_eps")]
    pub eps_component: f64,
    #[serde(default)]
    pub strict_pieces: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveConfig {
    Explicit { q: Vec<Vec<f64>>, b: Vec<f64> },
    /// Track `u_nom(x) = goal - x` (requires input_dim == state_dim).
    Nominal { goal: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IntegratorSpec {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default = "SchemeSpec::euler")]
    pub scheme: SchemeSpec,
    #[serde(default = "SlidingSpec::equivalent")]
    pub sliding: SlidingSpec,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSpec {
    Euler,
    Rk4,
}

impl SchemeSpec {
    fn euler() -> Self {
        SchemeSpec::Euler
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SlidingSpec {
    Chatter,
    Equivalent,
}

impl SlidingSpec {
    fn equivalent() -> Self {
        SlidingSpec::Equivalent
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InputBoundsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// A validated scenario, ready to simulate.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub registry: Arc<ComponentRegistry>,
    pub expr: SafeSetExpr,
    pub dnf: Arc<DnfForm>,
    pub dynamics: Arc<PiecewiseDynamics>,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.config.name)
            .field("components", &self.registry.len())
            .field("clauses", &self.dnf.clauses().len())
            .finish()
    }
}

pub const BUILTIN_NAMES: [&str; 2] = ["example1-corner", "multiagent-reconfig"];

/// Loads a scenario by built-in name or from a TOML file path. Validation
/// (including finite-difference gradient checks and guard coverage sampling)
/// runs before the scenario is returned.
pub fn load_scenario(source: &str) -> Result<Scenario, ScenarioError> {
    let config = match source {
        "example1-corner" => example1_corner_config(),
        "multiagent-reconfig" => multiagent_reconfig_config(),
        path => {
            let text = std::fs::read_to_string(Path::new(path))
                .map_err(|e| ScenarioError::Io { path: path.to_string(), source: e })?;
            parse_config(&text)?
        }
    };
    Scenario::from_config(config)
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
}

pub fn dump_config(config: &ScenarioConfig) -> Result<String, ScenarioError> {
    toml::to_string_pretty(config).map_err(|e| ScenarioError::Parse(e.to_string()))
}

impl Scenario {
    pub fn from_config(config: ScenarioConfig) -> Result<Self, ScenarioError> {
        let (dynamics, n, m) = build_dynamics(&config.dynamics)?;
        let registry = build_registry(&config.safeset, n)?;
        let expr = build_expr(&config.safeset, &registry)?;
        let dnf = DnfForm::from_expr(&expr, registry.clone())
            .map_err(|e| invalid("safeset.expr", e.to_string()))?;

        validate_domain(&config.domain, n)?;
        validate_objective(&config.objective, n, m)?;
        validate_integrator(&config.integrator)?;
        validate_controller(&config.controller)?;
        for (k, x0) in config.initial_states.iter().enumerate() {
            if x0.len() != n {
                return Err(invalid(
                    &format!("initial_states[{k}]"),
                    format!("length {} != state_dim {n}", x0.len()),
                ));
            }
        }
        if let Some(bounds) = &config.input_bounds {
            for (field, v) in
                [("input_bounds.lower", &bounds.lower), ("input_bounds.upper", &bounds.upper)]
            {
                if let Some(v) = v {
                    if v.len() != m {
                        return Err(invalid(field, format!("length {} != input_dim {m}", v.len())));
                    }
                }
            }
        }

        let scenario = Scenario { config, registry, expr, dnf: Arc::new(dnf), dynamics };
        scenario.run_load_checks()?;
        Ok(scenario)
    }

    /// Finite-difference gradient validation and guard coverage/disjointness
    /// probes over the scenario domain.
    fn run_load_checks(&self) -> Result<(), ScenarioError> {
        let domain = self.domain();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let x = domain.sample(&mut rng);
            for component in self.registry.iter() {
                let residual = check_gradients_fd(component, &x, 1e-5);
                if residual > 1e-5 {
                    return Err(invalid(
                        &format!("safeset.components.{}", component.name),
                        format!("gradient/value mismatch: finite-difference residual {residual:.3e}"),
                    ));
                }
            }
        }
        for k in 0..1000 {
            let x = domain.sample(&mut rng);
            if self.dynamics.active_pieces(&x).is_err() {
                return Err(invalid(
                    "dynamics.pieces",
                    format!("guards do not cover the domain (sample {k})"),
                ));
            }
            let strictly_inside = self
                .dynamics
                .pieces()
                .iter()
                .filter(|p| p.guard(&x) < -self.dynamics.eps_guard)
                .count();
            if strictly_inside > 1 {
                return Err(invalid(
                    "dynamics.pieces",
                    format!("open regions overlap (sample {k})"),
                ));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim
    }

    pub fn domain(&self) -> BoxDomain {
        BoxDomain::new(self.config.domain.lower.clone(), self.config.domain.upper.clone())
    }

    pub fn initial_states(&self) -> Vec<DVector<f64>> {
        self.config.initial_states.iter().map(|v| DVector::from_vec(v.clone())).collect()
    }

    pub fn tolerances(&self) -> ActivityTolerances {
        ActivityTolerances {
            eps_clause: self.config.controller.eps_clause,
            eps_component: self.config.controller.eps_component,
        }
    }

    pub fn bounds(&self) -> InputBounds {
        match &self.config.input_bounds {
            None => InputBounds::none(),
            Some(spec) => InputBounds {
                lower: spec.lower.as_ref().map(|v| DVector::from_vec(v.clone())),
                upper: spec.upper.as_ref().map(|v| DVector::from_vec(v.clone())),
            },
        }
    }

    pub fn objective(&self) -> ObjectiveSpec {
        match &self.config.objective {
            ObjectiveConfig::Explicit { q, b } => {
                let m = b.len();
                let qm = DMatrix::from_fn(m, m, |i, j| q[i][j]);
                let bv = DVector::from_vec(b.clone());
                ObjectiveSpec::Explicit {
                    q: Arc::new(move |_x: &DVector<f64>| qm.clone()),
                    b: Arc::new(move |_x: &DVector<f64>| bv.clone()),
                }
            }
            ObjectiveConfig::Nominal { goal } => {
                let goal = DVector::from_vec(goal.clone());
                ObjectiveSpec::TrackNominal {
                    u_nom: Arc::new(move |x: &DVector<f64>| &goal - x),
                }
            }
        }
    }

    pub fn integrator(&self) -> IntegratorConfig {
        let spec = &self.config.integrator;
        IntegratorConfig {
            dt: spec.dt,
            t_final: spec.t_final,
            scheme: match spec.scheme {
                SchemeSpec::Euler => Scheme::Euler,
                SchemeSpec::Rk4 => Scheme::Rk4,
            },
            sliding_mode: match spec.sliding {
                SlidingSpec::Chatter => SlidingMode::Chatter,
                SlidingSpec::Equivalent => SlidingMode::EquivalentControl,
            },
        }
    }

    pub fn controller(&self) -> Box<dyn Controller> {
        self.controller_of_kind(self.config.controller.kind)
    }

    pub fn controller_of_kind(&self, kind: ControllerKind) -> Box<dyn Controller> {
        let spec = &self.config.controller;
        let tolerances = self.tolerances();
        match kind {
            ControllerKind::Act => Box::new(ActiveComponentQp {
                dnf: self.dnf.clone(),
                dynamics: self.dynamics.clone(),
                objective: self.objective(),
                config: ActiveComponentConfig { alpha_gain: spec.alpha, tolerances },
                bounds: self.bounds(),
                strict_pieces: spec.strict_pieces,
            }),
            ControllerKind::All => Box::new(AllComponentsQp {
                dnf: self.dnf.clone(),
                dynamics: self.dynamics.clone(),
                objective: self.objective(),
                config: AllComponentsConfig {
                    alpha_gain: spec.alpha,
                    transition_m: spec.transition_m,
                },
                tolerances,
                bounds: self.bounds(),
                strict_pieces: spec.strict_pieces,
            }),
            ControllerKind::Adp => Box::new(AdaptiveQp {
                dnf: self.dnf.clone(),
                dynamics: self.dynamics.clone(),
                objective: self.objective(),
                config: AdaptiveConfig {
                    c_alpha: spec.c_alpha,
                    c_m: spec.c_m,
                    q_alpha: spec.q_alpha,
                    q_m: spec.q_m,
                },
                tolerances,
                bounds: self.bounds(),
                strict_pieces: spec.strict_pieces,
            }),
        }
    }
}

fn build_dynamics(
    spec: &DynamicsSpec,
) -> Result<(Arc<PiecewiseDynamics>, usize, usize), ScenarioError> {
    if let Some(builtin) = &spec.builtin {
        return match builtin.as_str() {
            "example1" => {
                let pieces = vec![
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
                ];
                let dynamics = PiecewiseDynamics::new(pieces, 2, 1)
                    .map_err(|e| invalid("dynamics.builtin", e.to_string()))?;
                Ok((Arc::new(dynamics), 2, 1))
            }
            other => Err(invalid("dynamics.builtin", format!("unknown builtin `{other}`"))),
        };
    }
    let n = spec.state_dim;
    let m = spec.input_dim;
    if n == 0 || m == 0 {
        return Err(invalid("dynamics", "state_dim and input_dim must be positive"));
    }
    if spec.pieces.is_empty() {
        return Err(invalid("dynamics.pieces", "need a builtin or at least one piece"));
    }
    let mut pieces = Vec::with_capacity(spec.pieces.len());
    for p in &spec.pieces {
        let field = format!("dynamics.pieces[{}]", p.id);
        let drift = match &p.drift {
            DriftSpec::Constant { value } => {
                if value.len() != n {
                    return Err(invalid(&field, format!("drift length {} != {n}", value.len())));
                }
                constant_drift(value.clone())
            }
            DriftSpec::Zero { dim } => {
                if *dim != n {
                    return Err(invalid(&field, format!("drift dim {dim} != {n}")));
                }
                constant_drift(vec![0.0; n])
            }
        };
        let input = match &p.input {
            InputMatrixSpec::Constant { rows } => {
                if rows.len() != n || rows.iter().any(|r| r.len() != m) {
                    return Err(invalid(&field, format!("input matrix must be {n}x{m}")));
                }
                constant_input_matrix(n, m, rows.iter().flatten().copied().collect())
            }
            InputMatrixSpec::Identity { dim } => {
                if *dim != n || n != m {
                    return Err(invalid(&field, "identity input needs input_dim == state_dim"));
                }
                identity_input_matrix(n)
            }
        };
        let guard = match &p.guard {
            GuardSpec::Affine { a, b } => {
                if a.len() != n {
                    return Err(invalid(&field, format!("guard length {} != {n}", a.len())));
                }
                affine_guard(a.clone(), *b)
            }
            GuardSpec::AlwaysInside => always_inside_guard(),
        };
        pieces.push(DynamicsPiece::new(p.id, drift, input, guard));
    }
    let mut dynamics = PiecewiseDynamics::new(pieces, n, m)
        .map_err(|e| invalid("dynamics.pieces", e.to_string()))?;
    if let Some(eps) = spec.eps_guard {
        dynamics = dynamics.with_eps_guard(eps);
    }
    Ok((Arc::new(dynamics), n, m))
}

fn build_registry(
    spec: &SafeSetSpec,
    n: usize,
) -> Result<Arc<ComponentRegistry>, ScenarioError> {
    if spec.components.is_empty() {
        return Err(invalid("safeset.components", "need at least one component"));
    }
    let mut components = Vec::with_capacity(spec.components.len());
    for (k, c) in spec.components.iter().enumerate() {
        let field = format!("safeset.components[{k}] ({})", c.name);
        if spec.components.iter().filter(|d| d.name == c.name).count() > 1 {
            return Err(invalid(&field, "duplicate component name"));
        }
        let id = k + 1;
        let component = match &c.kind {
            ComponentKind::Affine { a, b } => {
                if a.len() != n {
                    return Err(invalid(&field, format!("length {} != state_dim {n}", a.len())));
                }
                crate::safeset::affine_component(id, c.name.clone(), a.clone(), *b)
            }
            ComponentKind::QuadraticNorm { center, weights, offset, scale } => {
                if center.len() != n {
                    return Err(invalid(&field, format!("center length {} != {n}", center.len())));
                }
                let w = match weights {
                    Some(w) if w.len() != n => {
                        return Err(invalid(&field, format!("weights length {} != {n}", w.len())))
                    }
                    Some(w) => w.clone(),
                    None => vec![1.0; n],
                };
                quadratic_norm_component(id, c.name.clone(), center.clone(), w, *offset, *scale)
            }
            ComponentKind::PairwiseDistance { first, second, dim, min_dist } => {
                if first + dim > n || second + dim > n {
                    return Err(invalid(&field, "coordinate block exceeds state_dim"));
                }
                pairwise_distance_component(id, c.name.clone(), *first, *second, *dim, *min_dist)
            }
        };
        components.push(component);
    }
    ComponentRegistry::new(components)
        .map(Arc::new)
        .map_err(|e| invalid("safeset.components", e.to_string()))
}

fn build_expr(
    spec: &SafeSetSpec,
    registry: &ComponentRegistry,
) -> Result<SafeSetExpr, ScenarioError> {
    fn convert(
        e: &ExprSpec,
        names: &dyn Fn(&str) -> Option<usize>,
    ) -> Result<SafeSetExpr, ScenarioError> {
        match e {
            ExprSpec::Leaf { leaf } => names(leaf)
                .map(SafeSetExpr::Leaf)
                .ok_or_else(|| invalid("safeset.expr", format!("unknown component `{leaf}`"))),
            ExprSpec::Any { any } => {
                if any.is_empty() {
                    return Err(invalid("safeset.expr", "`any` needs at least one child"));
                }
                Ok(SafeSetExpr::Union(
                    any.iter().map(|c| convert(c, names)).collect::<Result<_, _>>()?,
                ))
            }
            ExprSpec::All { all } => {
                if all.is_empty() {
                    return Err(invalid("safeset.expr", "`all` needs at least one child"));
                }
                Ok(SafeSetExpr::Intersection(
                    all.iter().map(|c| convert(c, names)).collect::<Result<_, _>>()?,
                ))
            }
        }
    }
    let lookup = |name: &str| registry.iter().find(|c| c.name == name).map(|c| c.id);
    convert(&spec.expr, &lookup)
}

fn quadratic_norm_component(
    id: usize,
    name: String,
    center: Vec<f64>,
    weights: Vec<f64>,
    offset: f64,
    scale: f64,
) -> SmoothComponent {
    let c = DVector::from_vec(center);
    let w = DVector::from_vec(weights);
    let (cv, wv) = (c.clone(), w.clone());
    SmoothComponent::new(
        id,
        name,
        Arc::new(move |x: &DVector<f64>| {
            let d = x - &cv;
            scale * (d.component_mul(&d).dot(&wv) - offset)
        }),
        Arc::new(move |x: &DVector<f64>| {
            let d = x - &c;
            d.component_mul(&w) * (2.0 * scale)
        }),
    )
}

fn pairwise_distance_component(
    id: usize,
    name: String,
    first: usize,
    second: usize,
    dim: usize,
    min_dist: f64,
) -> SmoothComponent {
    SmoothComponent::new(
        id,
        name,
        Arc::new(move |x: &DVector<f64>| {
            let mut sum = 0.0;
            for k in 0..dim {
                let d = x[first + k] - x[second + k];
                sum += d * d;
            }
            sum - min_dist * min_dist
        }),
        Arc::new(move |x: &DVector<f64>| {
            let mut grad = DVector::zeros(x.len());
            for k in 0..dim {
                let d = x[first + k] - x[second + k];
                grad[first + k] = 2.0 * d;
                grad[second + k] = -2.0 * d;
            }
            grad
        }),
    )
}

fn validate_domain(spec: &DomainSpec, n: usize) -> Result<(), ScenarioError> {
    if spec.lower.len() != n || spec.upper.len() != n {
        return Err(invalid("domain", format!("bounds must have length {n}")));
    }
    if spec.lower.iter().zip(&spec.upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite())
    {
        return Err(invalid("domain", "need finite lower < upper per coordinate"));
    }
    Ok(())
}

fn validate_objective(spec: &ObjectiveConfig, n: usize, m: usize) -> Result<(), ScenarioError> {
    match spec {
        ObjectiveConfig::Explicit { q, b } => {
            if b.len() != m {
                return Err(invalid("objective.b", format!("length {} != input_dim {m}", b.len())));
            }
            if q.len() != m || q.iter().any(|row| row.len() != m) {
                return Err(invalid("objective.q", format!("must be {m}x{m}")));
            }
        }
        ObjectiveConfig::Nominal { goal } => {
            if goal.len() != n {
                return Err(invalid(
                    "objective.goal",
                    format!("length {} != state_dim {n}", goal.len()),
                ));
            }
            if m != n {
                return Err(invalid(
                    "objective",
                    "nominal goal tracking needs input_dim == state_dim",
                ));
            }
        }
    }
    Ok(())
}

fn validate_integrator(spec: &IntegratorSpec) -> Result<(), ScenarioError> {
    if !(spec.dt > 0.0) {
        return Err(invalid("integrator.dt", "must be positive"));
    }
    if spec.dt > spec.t_final {
        return Err(invalid("integrator.t_final", "must be at least dt"));
    }
    Ok(())
}

fn validate_controller(spec: &ControllerSpec) -> Result<(), ScenarioError> {
    if !(spec.alpha > 0.0) {
        return Err(invalid("controller.alpha", "must be positive"));
    }
    if spec.transition_m < 0.0 {
        return Err(invalid("controller.transition_m", "must be nonnegative"));
    }
    for (field, v) in [
        ("controller.c_alpha", spec.c_alpha),
        ("controller.c_m", spec.c_m),
        ("controller.q_alpha", spec.q_alpha),
        ("controller.q_m", spec.q_m),
    ] {
        if !(v > 0.0) {
            return Err(invalid(field, "must be positive"));
        }
    }
    if spec.eps_clause < 0.0 || spec.eps_component < 0.0 {
        return Err(invalid("controller.eps_clause", "tolerances must be nonnegative"));
    }
    Ok(())
}

/// Planar corner scenario: `h = min(h1, h2)` with the two-piece dynamics
/// switching on `x2 = 0`; the active-component filter is unsafe from the
/// corner while the all-components filter repairs it.
pub fn example1_corner_config() -> ScenarioConfig {
    ScenarioConfig {
        name: "example1-corner".into(),
        dynamics: DynamicsSpec {
            builtin: Some("example1".into()),
            state_dim: 2,
            input_dim: 1,
            pieces: Vec::new(),
            eps_guard: None,
        },
        safeset: SafeSetSpec {
            components: vec![
                ComponentSpec {
                    name: "upper_edge".into(),
                    kind: ComponentKind::Affine { a: vec![-1.0, 1.0], b: 1.0 },
                },
                ComponentSpec {
                    name: "lower_edge".into(),
                    kind: ComponentKind::Affine { a: vec![-1.0, -1.0], b: 1.0 },
                },
            ],
            expr: ExprSpec::All {
                all: vec![
                    ExprSpec::Leaf { leaf: "upper_edge".into() },
                    ExprSpec::Leaf { leaf: "lower_edge".into() },
                ],
            },
        },
        controller: ControllerSpec {
            kind: ControllerKind::Act,
            alpha: 1.0,
            transition_m: 1.0,
            c_alpha: 1.0,
            c_m: 100.0,
            q_alpha: 0.1,
            q_m: 0.1,
            eps_clause: 1e-9,
            eps_component: 1e-9,
            strict_pieces: false,
        },
        objective: ObjectiveConfig::Explicit { q: vec![vec![1.0]], b: vec![0.0] },
        integrator: IntegratorSpec {
            dt: 1e-3,
            t_final: 1.0,
            scheme: SchemeSpec::Euler,
            sliding: SlidingSpec::Equivalent,
        },
        initial_states: vec![vec![1.0, 0.0]],
        input_bounds: None,
        domain: DomainSpec { lower: vec![-2.0, -2.0], upper: vec![2.0, 2.0] },
    }
}

/// Five planar single-integrator agents crossing from the strip below the
/// obstacle to the half-plane right of it while avoiding pairwise
/// collisions; adaptive controller with the transition gain floor that lets
/// agents leave their starting region component.
pub fn multiagent_reconfig_config() -> ScenarioConfig {
    let agents = 5usize;
    let delta = 0.5f64;
    let n = 2 * agents;

    let mut components = Vec::new();
    for i in 0..agents {
        let mut a = vec![0.0; n];
        a[2 * i] = 1.0;
        components.push(ComponentSpec {
            name: format!("agent{}_right", i + 1),
            kind: ComponentKind::Affine { a, b: -delta },
        });
        let mut a = vec![0.0; n];
        a[2 * i + 1] = -1.0;
        components.push(ComponentSpec {
            name: format!("agent{}_below", i + 1),
            kind: ComponentKind::Affine { a, b: -delta },
        });
    }
    for i in 0..agents {
        for j in (i + 1)..agents {
            components.push(ComponentSpec {
                name: format!("sep_{}_{}", i + 1, j + 1),
                kind: ComponentKind::PairwiseDistance {
                    first: 2 * i,
                    second: 2 * j,
                    dim: 2,
                    min_dist: 2.0 * delta,
                },
            });
        }
    }

    let mut all = Vec::new();
    for i in 0..agents {
        all.push(ExprSpec::Any {
            any: vec![
                ExprSpec::Leaf { leaf: format!("agent{}_right", i + 1) },
                ExprSpec::Leaf { leaf: format!("agent{}_below", i + 1) },
            ],
        });
    }
    for i in 0..agents {
        for j in (i + 1)..agents {
            all.push(ExprSpec::Leaf { leaf: format!("sep_{}_{}", i + 1, j + 1) });
        }
    }

    // Starts sit in the strip below the obstacle (the below-component is
    // each agent's active choice), goals fan out in the right half-plane
    // with roughly equal travel distances so followers do not compress the
    // queue into contact at the corner.
    let starts = [[-6.0, -2.0], [-4.5, -2.0], [-3.0, -2.0], [-1.5, -2.0], [0.0, -2.0]];
    let goals = [[1.0, 1.0], [1.8, 2.2], [2.6, 3.4], [3.4, 4.6], [4.2, 5.8]];
    let initial: Vec<f64> = starts.iter().flatten().copied().collect();
    let goal: Vec<f64> = goals.iter().flatten().copied().collect();

    ScenarioConfig {
        name: "multiagent-reconfig".into(),
        dynamics: DynamicsSpec {
            builtin: None,
            state_dim: n,
            input_dim: n,
            pieces: vec![PieceSpec {
                id: 1,
                drift: DriftSpec::Zero { dim: n },
                input: InputMatrixSpec::Identity { dim: n },
                guard: GuardSpec::AlwaysInside,
            }],
            eps_guard: None,
        },
        safeset: SafeSetSpec { components, expr: ExprSpec::All { all } },
        controller: ControllerSpec {
            kind: ControllerKind::Adp,
            alpha: 1.0,
            transition_m: 100.0,
            c_alpha: 1.0,
            c_m: 100.0,
            q_alpha: 0.1,
            q_m: 0.1,
            eps_clause: 1e-9,
            eps_component: 1e-9,
            strict_pieces: false,
        },
        objective: ObjectiveConfig::Nominal { goal },
        integrator: IntegratorSpec {
            dt: 0.01,
            t_final: 20.0,
            scheme: SchemeSpec::Euler,
            sliding: SlidingSpec::Chatter,
        },
        initial_states: vec![initial],
        input_bounds: None,
        domain: DomainSpec {
            lower: [-7.0, -4.0].repeat(agents),
            upper: [6.0, 7.0].repeat(agents),
        },
    }
}
