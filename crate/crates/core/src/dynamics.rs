//! Piecewise-continuous control-affine dynamics `ẋ = f(x) + G(x)u`.
//!
//! The state space is covered by finitely many regions, each carrying a
//! continuous pair `(f_j, G_j)` that extends continuously to the whole
//! domain. Regions are encoded by scalar guards: negative strictly inside,
//! positive strictly outside, zero on the boundary, so that codimension-1
//! switching surfaces are identifiable for sliding handling in the simulator.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::safeset::ScalarFn;

pub type DriftFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type InputMatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("piece id {0} out of range ({1} pieces)")]
    UnknownPiece(usize, usize),
    #[error("no piece covers the state (all guards > eps)")]
    CoverageViolation,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// One continuous piece `(f_j, G_j)` with region guard `g_j`.
#[derive(Clone)]
pub struct DynamicsPiece {
    pub id: usize,
    drift: DriftFn,
    input_matrix: InputMatrixFn,
    guard: ScalarFn,
}

impl DynamicsPiece {
    pub fn new(id: usize, drift: DriftFn, input_matrix: InputMatrixFn, guard: ScalarFn) -> Self {
        Self { id, drift, input_matrix, guard }
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.input_matrix)(x)
    }

    pub fn guard(&self, x: &DVector<f64>) -> f64 {
        (self.guard)(x)
    }
}

impl fmt::Debug for DynamicsPiece {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsPiece").field("id", &self.id).finish()
    }
}

/// Finite family of pieces with ids `1..=ω`, plus the boundary tolerance used
/// by the active-piece map.
pub struct PiecewiseDynamics {
    pieces: Vec<DynamicsPiece>,
    pub state_dim: usize,
    pub input_dim: usize,
    pub eps_guard: f64,
}

impl fmt::Debug for PiecewiseDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PiecewiseDynamics")
            .field("pieces", &self.pieces.len())
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .finish()
    }
}

impl PiecewiseDynamics {
    pub fn new(
        mut pieces: Vec<DynamicsPiece>,
        state_dim: usize,
        input_dim: usize,
    ) -> Result<Self, DynamicsError> {
        pieces.sort_by_key(|p| p.id);
        for (k, p) in pieces.iter().enumerate() {
            if p.id != k + 1 {
                return Err(DynamicsError::Dimension(format!(
                    "piece ids must be exactly 1..={}, got id {}",
                    pieces.len(),
                    p.id
                )));
            }
        }
        if pieces.is_empty() {
            return Err(DynamicsError::Dimension("need at least one piece".into()));
        }
        Ok(Self { pieces, state_dim, input_dim, eps_guard: 1e-9 })
    }

    pub fn with_eps_guard(mut self, eps: f64) -> Self {
        self.eps_guard = eps;
        self
    }

    pub fn pieces(&self) -> &[DynamicsPiece] {
        &self.pieces
    }

    pub fn piece(&self, id: usize) -> Result<&DynamicsPiece, DynamicsError> {
        self.pieces.get(id.wrapping_sub(1)).ok_or(DynamicsError::UnknownPiece(id, self.pieces.len()))
    }

    /// Active pieces `J(x) = {j : g_j(x) <= eps}`. Errors if empty, which
    /// means the guards fail to cover the domain.
    pub fn active_pieces(&self, x: &DVector<f64>) -> Result<Vec<usize>, DynamicsError> {
        let out: Vec<usize> = self
            .pieces
            .iter()
            .filter(|p| p.guard(x) <= self.eps_guard)
            .map(|p| p.id)
            .collect();
        if out.is_empty() {
            return Err(DynamicsError::CoverageViolation);
        }
        Ok(out)
    }

    /// The piece used for pointwise evaluation: smallest guard value, ties
    /// broken by lowest id. Strictly inside a region this is the unique
    /// active piece.
    pub fn select_piece(&self, x: &DVector<f64>) -> usize {
        let mut best_id = self.pieces[0].id;
        let mut best = self.pieces[0].guard(x);
        for p in &self.pieces[1..] {
            let g = p.guard(x);
            if g < best {
                best = g;
                best_id = p.id;
            }
        }
        best_id
    }

    /// Continuous extension of piece `j` at `x` (valid also outside its
    /// region).
    pub fn eval_dynamics(
        &self,
        x: &DVector<f64>,
        j: usize,
    ) -> Result<(DVector<f64>, DMatrix<f64>), DynamicsError> {
        let p = self.piece(j)?;
        Ok((p.drift(x), p.input_matrix(x)))
    }

    /// `f_j(x) + G_j(x) u`.
    pub fn closed_loop_field(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        j: usize,
    ) -> Result<DVector<f64>, DynamicsError> {
        if u.len() != self.input_dim {
            return Err(DynamicsError::Dimension(format!(
                "input has length {}, expected {}",
                u.len(),
                self.input_dim
            )));
        }
        let (f, g) = self.eval_dynamics(x, j)?;
        Ok(f + g * u)
    }

    /// Field of the min-guard piece at `x`.
    pub fn field_at(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        self.closed_loop_field(x, u, self.select_piece(x))
    }
}

/// Probes guard continuity by comparing values at `x` and at small random
/// perturbations; returns the worst ratio `|Δg| / |Δx|` seen (an empirical
/// local Lipschitz bound, infinite for a discontinuous guard in the limit).
pub fn probe_guard_continuity(
    piece: &DynamicsPiece,
    x: &DVector<f64>,
    radius: f64,
    probes: usize,
    rng: &mut impl rand::Rng,
) -> f64 {
    let g0 = piece.guard(x);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let dir = DVector::from_iterator(x.len(), (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)));
        let norm = dir.norm();
        if norm < 1e-12 {
            continue;
        }
        let y = x + dir * (radius / norm);
        worst = worst.max((piece.guard(&y) - g0).abs() / radius);
    }
    worst
}

/// Constant-coefficient helpers used by tests and the scenario library.
pub fn constant_drift(v: Vec<f64>) -> DriftFn {
    let v = DVector::from_vec(v);
    Arc::new(move |_x: &DVector<f64>| v.clone())
}

pub fn constant_input_matrix(rows: usize, cols: usize, entries: Vec<f64>) -> InputMatrixFn {
    let m = DMatrix::from_row_slice(rows, cols, &entries);
    Arc::new(move |_x: &DVector<f64>| m.clone())
}

pub fn identity_input_matrix(dim: usize) -> InputMatrixFn {
    Arc::new(move |_x: &DVector<f64>| DMatrix::identity(dim, dim))
}

pub fn affine_guard(a: Vec<f64>, b: f64) -> ScalarFn {
    let a = DVector::from_vec(a);
    Arc::new(move |x: &DVector<f64>| a.dot(x) + b)
}

/// Guard that is negative everywhere: a single piece covering the domain.
pub fn always_inside_guard() -> ScalarFn {
    Arc::new(|_x: &DVector<f64>| -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-piece planar system: f = (1,0), G_1 = (-2,1) for x2 < 0,
    /// G_2 = (-2,-1) for x2 > 0.
    pub(crate) fn two_piece_planar() -> PiecewiseDynamics {
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
        .unwrap()
    }

    #[test]
    fn active_pieces_by_region() {
        let dyn_ = two_piece_planar();
        let below = DVector::from_vec(vec![0.5, -0.2]);
        let surface = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(dyn_.active_pieces(&below).unwrap(), vec![1]);
        assert_eq!(dyn_.active_pieces(&surface).unwrap(), vec![1, 2]);
        assert_eq!(dyn_.select_piece(&below), 1);
        assert_eq!(dyn_.select_piece(&surface), 1); // tie -> lowest id
    }

    #[test]
    fn continuous_extensions_evaluate_anywhere() {
        let dyn_ = two_piece_planar();
        let above = DVector::from_vec(vec![0.0, 3.0]);
        let (f, g) = dyn_.eval_dynamics(&above, 1).unwrap();
        assert_eq!(f, DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(g, DMatrix::from_row_slice(2, 1, &[-2.0, 1.0]));
        assert!(matches!(dyn_.eval_dynamics(&above, 5), Err(DynamicsError::UnknownPiece(5, 2))));
    }

    #[test]
    fn closed_loop_field_arithmetic() {
        let dyn_ = two_piece_planar();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let u = DVector::from_vec(vec![1.0 / 3.0]);
        let field = dyn_.closed_loop_field(&x, &u, 1).unwrap();
        assert!((field - DVector::from_vec(vec![1.0 / 3.0, 1.0 / 3.0])).norm() < 1e-15);

        let drift_only = dyn_.closed_loop_field(&x, &DVector::zeros(1), 2).unwrap();
        assert_eq!(drift_only, DVector::from_vec(vec![1.0, 0.0]));

        assert!(dyn_.closed_loop_field(&x, &DVector::zeros(3), 1).is_err());
    }

    #[test]
    fn coverage_and_disjointness_sampled() {
        let dyn_ = two_piece_planar();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let x = DVector::from_vec(vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
            let active = dyn_.active_pieces(&x).unwrap();
            assert!(!active.is_empty());
            let strictly_inside = dyn_
                .pieces()
                .iter()
                .filter(|p| p.guard(&x) < -dyn_.eps_guard)
                .count();
            assert!(strictly_inside <= 1, "open regions must be disjoint");
        }
    }

    #[test]
    fn interior_matches_fast_path() {
        let dyn_ = two_piece_planar();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x = DVector::from_vec(vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]);
            for p in dyn_.pieces() {
                if p.guard(&x) < -dyn_.eps_guard {
                    assert_eq!(dyn_.select_piece(&x), p.id);
                }
            }
        }
    }

    #[test]
    fn uncovered_state_is_a_coverage_violation() {
        let dyn_ = PiecewiseDynamics::new(
            vec![DynamicsPiece::new(
                1,
                constant_drift(vec![0.0]),
                constant_input_matrix(1, 1, vec![1.0]),
                affine_guard(vec![1.0], 0.0), // covers only x <= 0
            )],
            1,
            1,
        )
        .unwrap();
        assert!(dyn_.active_pieces(&DVector::from_vec(vec![-1.0])).is_ok());
        assert!(matches!(
            dyn_.active_pieces(&DVector::from_vec(vec![1.0])),
            Err(DynamicsError::CoverageViolation)
        ));
    }

    #[test]
    fn guard_continuity_probe_is_finite_for_affine_guards() {
        let dyn_ = two_piece_planar();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DVector::from_vec(vec![0.3, -0.4]);
        let bound = probe_guard_continuity(&dyn_.pieces()[0], &x, 1e-6, 32, &mut rng);
        assert!(bound <= 1.0 + 1e-6);
    }
}
