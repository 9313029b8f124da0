//! Safety filtering for control-affine systems whose dynamics switch between
//! finitely many continuous pieces and whose safe set is built from nested
//! unions and intersections of smooth 0-superlevel sets.
//!
//! The crate provides:
//!
//! * [`safeset`] — safe-set expressions, their union-of-intersections normal
//!   form, the nonsmooth barrier value `h = max_ℓ min_i h_i`, activity sets,
//!   and transition functions;
//! * [`dynamics`] — piecewise-continuous control-affine dynamics with region
//!   guards;
//! * [`qp`] — a dense active-set solver for strictly convex quadratic
//!   programs with KKT verification and Farkas infeasibility certificates;
//! * [`controllers`] — the active-component, all-components, and adaptive
//!   safety-filter QPs, plus boundary feasibility verification;
//! * [`sim`] — closed-loop integration with equivalent-control sliding on
//!   switching surfaces, trajectory recording, and safety monitoring;
//! * [`scenario`] — TOML scenario configs, built-in scenarios, and loading;
//! * [`cli`] — the `run` / `verify` / `list-scenarios` / `dump-config`
//!   drivers behind the `nscbf` binary.

pub mod cli;
pub mod controllers;
pub mod dynamics;
pub mod qp;
pub mod safeset;
pub mod scenario;
pub mod sim;

use nalgebra::DVector;
use rand::Rng;

/// Axis-aligned box used for sampling states in verification and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len(), "box bounds must have equal length");
        assert!(
            lower.iter().zip(&upper).all(|(l, u)| l <= u && l.is_finite() && u.is_finite()),
            "box bounds must be finite with lower <= upper"
        );
        Self { lower, upper }
    }

    /// Cube `[-half, half]^dim`.
    pub fn centered(dim: usize, half: f64) -> Self {
        Self::new(vec![-half; dim], vec![half; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower.iter().zip(&self.upper).map(|(&l, &u)| rng.gen_range(l..=u)),
        )
    }
}
