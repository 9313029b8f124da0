//! Nonsmooth safe sets built from smooth components.
//!
//! A safe set is described by an expression tree of unions and intersections
//! over components `C_i = {x : h_i(x) >= 0}`. [`DnfForm`] holds the
//! union-of-intersections normal form `C = ∪_ℓ ∩_{i ∈ I^ℓ} C_i`, evaluates
//! the barrier value `h(x) = max_ℓ min_{i ∈ I^ℓ} h_i(x)`, and exposes the
//! activity index sets and transition functions the controllers consume.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::BoxDomain;

pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Debug, Error)]
pub enum SafeSetError {
    #[error("component id {0} is not registered")]
    UnknownComponent(usize),
    #[error("clause index {0} out of range ({1} clauses)")]
    UnknownClause(usize, usize),
    #[error("component id {0} appears in no clause")]
    ComponentNotInSet(usize),
    #[error("invalid safe set: {0}")]
    Invalid(String),
}

/// One smooth component `h_i` with its gradient, both user supplied.
#[derive(Clone)]
pub struct SmoothComponent {
    pub id: usize,
    pub name: String,
    value: ScalarFn,
    gradient: GradientFn,
}

impl SmoothComponent {
    pub fn new(id: usize, name: impl Into<String>, value: ScalarFn, gradient: GradientFn) -> Self {
        Self { id, name: name.into(), value, gradient }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(x)
    }
}

impl fmt::Debug for SmoothComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothComponent").field("id", &self.id).field("name", &self.name).finish()
    }
}

/// The component family `h_1, ..., h_r`, indexed by ids `1..=r`.
#[derive(Debug)]
pub struct ComponentRegistry {
    components: Vec<SmoothComponent>,
}

impl ComponentRegistry {
    /// Components must carry ids `1..=r` (any order).
    pub fn new(mut components: Vec<SmoothComponent>) -> Result<Self, SafeSetError> {
        components.sort_by_key(|c| c.id);
        for (k, c) in components.iter().enumerate() {
            if c.id != k + 1 {
                return Err(SafeSetError::Invalid(format!(
                    "component ids must be exactly 1..={}, got id {}",
                    components.len(),
                    c.id
                )));
            }
        }
        if components.is_empty() {
            return Err(SafeSetError::Invalid("registry needs at least one component".into()));
        }
        Ok(Self { components })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&SmoothComponent, SafeSetError> {
        self.components.get(id.wrapping_sub(1)).ok_or(SafeSetError::UnknownComponent(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &SmoothComponent> {
        self.components.iter()
    }

    /// All component values at `x`, dense by `id - 1`.
    pub fn values(&self, x: &DVector<f64>) -> Vec<f64> {
        self.components.iter().map(|c| c.value(x)).collect()
    }
}

/// Expression tree over component ids. `Union`/`Intersection` need at least
/// one child.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SafeSetExpr {
    Leaf(usize),
    Union(Vec<SafeSetExpr>),
    Intersection(Vec<SafeSetExpr>),
}

impl SafeSetExpr {
    pub fn validate(&self, registry: &ComponentRegistry) -> Result<(), SafeSetError> {
        match self {
            SafeSetExpr::Leaf(id) => registry.get(*id).map(|_| ()),
            SafeSetExpr::Union(children) | SafeSetExpr::Intersection(children) => {
                if children.is_empty() {
                    return Err(SafeSetError::Invalid(
                        "union/intersection needs at least one child".into(),
                    ));
                }
                children.iter().try_for_each(|c| c.validate(registry))
            }
        }
    }

    /// Min/max recursion over component values. Kept as an oracle independent
    /// of the normal form: membership in the set is `eval >= 0`.
    pub fn eval(&self, registry: &ComponentRegistry, x: &DVector<f64>) -> Result<f64, SafeSetError> {
        match self {
            SafeSetExpr::Leaf(id) => Ok(registry.get(*id)?.value(x)),
            SafeSetExpr::Union(children) => {
                let mut best = f64::NEG_INFINITY;
                for c in children {
                    best = best.max(c.eval(registry, x)?);
                }
                Ok(best)
            }
            SafeSetExpr::Intersection(children) => {
                let mut worst = f64::INFINITY;
                for c in children {
                    worst = worst.min(c.eval(registry, x)?);
                }
                Ok(worst)
            }
        }
    }

    pub fn component_ids(&self) -> BTreeSet<usize> {
        match self {
            SafeSetExpr::Leaf(id) => BTreeSet::from([*id]),
            SafeSetExpr::Union(children) | SafeSetExpr::Intersection(children) => {
                children.iter().flat_map(|c| c.component_ids()).collect()
            }
        }
    }
}

/// Tolerance bands replacing the exact value ties that define the activity
/// sets. `eps_clause` compares clause values against `h`, `eps_component`
/// compares component values against clause values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivityTolerances {
    pub eps_clause: f64,
    pub eps_component: f64,
}

impl Default for ActivityTolerances {
    fn default() -> Self {
        Self { eps_clause: 1e-9, eps_component: 1e-9 }
    }
}

/// All per-state values a controller needs, computed in one pass.
#[derive(Debug, Clone)]
pub struct DnfEval {
    /// Component values, dense by `id - 1`.
    pub values: Vec<f64>,
    /// `h^ℓ = min_{i ∈ I^ℓ} h_i`, by clause position.
    pub clause_values: Vec<f64>,
    /// `h = max_ℓ h^ℓ`.
    pub h: f64,
}

/// Union-of-intersections normal form of a safe-set expression.
///
/// Clauses are stored in a deterministic order; `component_clauses` is the
/// inverted index `L_i` mapping a component id to the clause positions it
/// appears in. Immutable after construction.
#[derive(Debug, Clone)]
pub struct DnfForm {
    clauses: Vec<BTreeSet<usize>>,
    component_clauses: BTreeMap<usize, Vec<usize>>,
    registry: Arc<ComponentRegistry>,
}

impl DnfForm {
    /// Distributes intersections over unions, then removes duplicate clauses
    /// and clauses that are supersets of other clauses.
    pub fn from_expr(
        expr: &SafeSetExpr,
        registry: Arc<ComponentRegistry>,
    ) -> Result<Self, SafeSetError> {
        expr.validate(&registry)?;
        let mut clauses = distribute(expr);
        normalize_clauses(&mut clauses);
        let mut component_clauses: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, clause) in clauses.iter().enumerate() {
            for &id in clause {
                component_clauses.entry(id).or_default().push(pos);
            }
        }
        Ok(Self { clauses, component_clauses, registry })
    }

    pub fn clauses(&self) -> &[BTreeSet<usize>] {
        &self.clauses
    }

    pub fn registry(&self) -> &ComponentRegistry {
        &self.registry
    }

    /// Clause positions containing component `i` (the inverted index `L_i`).
    pub fn clauses_of(&self, id: usize) -> &[usize] {
        self.component_clauses.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Component ids that appear in at least one clause.
    pub fn component_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.component_clauses.keys().copied()
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> DnfEval {
        let values = self.registry.values(x);
        let clause_values: Vec<f64> = self
            .clauses
            .iter()
            .map(|clause| clause.iter().map(|&id| values[id - 1]).fold(f64::INFINITY, f64::min))
            .collect();
        let h = clause_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        DnfEval { values, clause_values, h }
    }

    /// `h(x) = max_ℓ min_{i ∈ I^ℓ} h_i(x)`.
    pub fn h(&self, x: &DVector<f64>) -> f64 {
        self.evaluate(x).h
    }

    /// `h^ℓ(x)` for the clause at position `ell`.
    pub fn clause_value(&self, ell: usize, x: &DVector<f64>) -> Result<f64, SafeSetError> {
        if ell >= self.clauses.len() {
            return Err(SafeSetError::UnknownClause(ell, self.clauses.len()));
        }
        Ok(self.evaluate(x).clause_values[ell])
    }

    /// Clause positions with `h - h^ℓ <= eps_clause`. Never empty.
    pub fn active_clauses(&self, x: &DVector<f64>, tol: &ActivityTolerances) -> Vec<usize> {
        active_clauses_from(&self.evaluate(x), tol)
    }

    /// Active components: ids `i` lying in some active clause with
    /// `|h_i - h| <= eps_component`. Never empty.
    pub fn active_components(&self, x: &DVector<f64>, tol: &ActivityTolerances) -> Vec<usize> {
        active_components_from(self, &self.evaluate(x), tol)
    }

    /// Upper approximation of the active components: ids `i` with some clause
    /// `ℓ ∈ L_i` where `h = h^ℓ = h_i` up to the tolerances. Contains
    /// `active_components`.
    pub fn upper_active_components(
        &self,
        x: &DVector<f64>,
        tol: &ActivityTolerances,
    ) -> Vec<usize> {
        upper_active_components_from(self, &self.evaluate(x), tol)
    }

    /// Gradients `∇h_i(x)` of the active components; the generalized gradient
    /// of `h` at `x` is their convex hull.
    pub fn gradient_vertices(&self, x: &DVector<f64>, tol: &ActivityTolerances) -> Vec<DVector<f64>> {
        self.active_components(x, tol)
            .into_iter()
            .map(|id| self.registry.get(id).expect("registered id").gradient(x))
            .collect()
    }

    /// Transition function `β_i(x) = M (h(x) - max_{ℓ ∈ L_i} h^ℓ(x))`.
    /// Nonnegative, and zero whenever `i` is (upper-)active.
    pub fn transition_beta(&self, id: usize, x: &DVector<f64>, m: f64) -> Result<f64, SafeSetError> {
        let eval = self.evaluate(x);
        self.transition_beta_from(id, &eval, m)
    }

    /// As [`Self::transition_beta`] but reusing a precomputed evaluation.
    pub fn transition_beta_from(
        &self,
        id: usize,
        eval: &DnfEval,
        m: f64,
    ) -> Result<f64, SafeSetError> {
        let ells = self.component_clauses.get(&id).ok_or(SafeSetError::ComponentNotInSet(id))?;
        let best = ells.iter().map(|&l| eval.clause_values[l]).fold(f64::NEG_INFINITY, f64::max);
        Ok(m * (eval.h - best))
    }
}

pub fn active_clauses_from(eval: &DnfEval, tol: &ActivityTolerances) -> Vec<usize> {
    eval.clause_values
        .iter()
        .enumerate()
        .filter(|(_, &v)| eval.h - v <= tol.eps_clause)
        .map(|(l, _)| l)
        .collect()
}

pub fn active_components_from(dnf: &DnfForm, eval: &DnfEval, tol: &ActivityTolerances) -> Vec<usize> {
    let active = active_clauses_from(eval, tol);
    let mut out = BTreeSet::new();
    for &l in &active {
        for &id in &dnf.clauses[l] {
            if (eval.values[id - 1] - eval.h).abs() <= tol.eps_component {
                out.insert(id);
            }
        }
    }
    out.into_iter().collect()
}

pub fn upper_active_components_from(
    dnf: &DnfForm,
    eval: &DnfEval,
    tol: &ActivityTolerances,
) -> Vec<usize> {
    let mut out = Vec::new();
    for (&id, ells) in &dnf.component_clauses {
        let hit = ells.iter().any(|&l| {
            let hl = eval.clause_values[l];
            eval.h - hl <= tol.eps_clause && (eval.values[id - 1] - hl).abs() <= tol.eps_component
        });
        if hit {
            out.push(id);
        }
    }
    out
}

fn distribute(expr: &SafeSetExpr) -> Vec<BTreeSet<usize>> {
    match expr {
        SafeSetExpr::Leaf(id) => vec![BTreeSet::from([*id])],
        SafeSetExpr::Union(children) => {
            let mut clauses = Vec::new();
            for c in children {
                clauses.extend(distribute(c));
            }
            clauses
        }
        SafeSetExpr::Intersection(children) => {
            let mut acc: Vec<BTreeSet<usize>> = vec![BTreeSet::new()];
            for c in children {
                let child = distribute(c);
                let mut next = Vec::with_capacity(acc.len() * child.len());
                for a in &acc {
                    for b in &child {
                        let mut merged = a.clone();
                        merged.extend(b.iter().copied());
                        next.push(merged);
                    }
                }
                acc = next;
                // keep intermediate clause lists small
                normalize_clauses(&mut acc);
            }
            acc
        }
    }
}

/// Sort, deduplicate, and drop clauses that are supersets of other clauses
/// (absorption). The max-min value of `h` is unchanged by either step.
fn normalize_clauses(clauses: &mut Vec<BTreeSet<usize>>) {
    clauses.sort_by(|a, b| a.iter().cmp(b.iter()));
    clauses.dedup();
    let keep: Vec<bool> = clauses
        .iter()
        .map(|c| !clauses.iter().any(|other| other != c && other.is_subset(c)))
        .collect();
    let mut it = keep.iter();
    clauses.retain(|_| *it.next().unwrap());
}

/// Max relative discrepancy between the supplied gradient and central finite
/// differences of the value at `x`.
pub fn check_gradients_fd(component: &SmoothComponent, x: &DVector<f64>, step: f64) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    let grad = component.gradient(x);
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += step;
        xm[k] -= step;
        let fd = (component.value(&xp) - component.value(&xm)) / (2.0 * step);
        let denom = grad[k].abs().max(1.0);
        worst = worst.max((fd - grad[k]).abs() / denom);
    }
    worst
}

/// Pair of components whose values coincide too often to be distinguishable.
#[derive(Debug, Clone)]
pub struct CoincidentPair {
    pub first: usize,
    pub second: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone)]
pub struct DifferenceReport {
    pub samples: usize,
    pub flagged: Vec<CoincidentPair>,
}

impl DifferenceReport {
    pub fn ok(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Samples `samples` states in `domain` and flags component pairs with
/// `|h_i - h_i'| <= 1e-12` on more than 1% of them. Needs two components.
pub fn check_sufficiently_different(
    registry: &ComponentRegistry,
    domain: &BoxDomain,
    samples: usize,
    seed: u64,
) -> DifferenceReport {
    assert!(registry.len() >= 2, "need at least two components to compare");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = registry.len();
    let mut ties = vec![vec![0usize; r]; r];
    for _ in 0..samples {
        let x = domain.sample(&mut rng);
        let values = registry.values(&x);
        for i in 0..r {
            for j in (i + 1)..r {
                if (values[i] - values[j]).abs() <= 1e-12 {
                    ties[i][j] += 1;
                }
            }
        }
    }
    let mut flagged = Vec::new();
    for i in 0..r {
        for j in (i + 1)..r {
            let fraction = ties[i][j] as f64 / samples as f64;
            if fraction > 0.01 {
                flagged.push(CoincidentPair { first: i + 1, second: j + 1, fraction });
            }
        }
    }
    DifferenceReport { samples, flagged }
}

/// Affine component `h(x) = a·x + b` with exact gradient; the workhorse for
/// tests and the scenario component library.
pub fn affine_component(id: usize, name: impl Into<String>, a: Vec<f64>, b: f64) -> SmoothComponent {
    let a = DVector::from_vec(a);
    let grad = a.clone();
    SmoothComponent::new(
        id,
        name,
        Arc::new(move |x: &DVector<f64>| a.dot(x) + b),
        Arc::new(move |_x: &DVector<f64>| grad.clone()),
    )
}
