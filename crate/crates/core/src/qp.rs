//! Dense strictly convex quadratic programs with linear inequality
//! constraints,
//!
//! ```text
//!     minimize    z' P z + q' z
//!     subject to  A z >= c,   lo <= z <= hi (optional per entry)
//! ```
//!
//! solved by the dual active-set method of Goldfarb and Idnani (1983).
//! Starting from the unconstrained minimum, violated constraints are added
//! one at a time while dual feasibility is maintained, so the method either
//! terminates at the unique KKT point or produces a Farkas certificate of
//! infeasibility (`A'λ = 0`, `λ >= 0`, `λ'c > 0` over the combined rows).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const ITERATION_CAP: usize = 100_000;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("cost matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("shape mismatch: {0}")]
    BadShape(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("active-set iteration cap {0} exceeded")]
    IterationLimit(usize),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

/// Strictly convex QP data. `constraint_matrix * z >= constraint_offset`;
/// bound entries may be infinite to mean "absent".
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub cost_matrix: DMatrix<f64>,
    pub cost_vector: DVector<f64>,
    pub constraint_matrix: DMatrix<f64>,
    pub constraint_offset: DVector<f64>,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl QpProblem {
    pub fn new(
        cost_matrix: DMatrix<f64>,
        cost_vector: DVector<f64>,
        constraint_matrix: DMatrix<f64>,
        constraint_offset: DVector<f64>,
    ) -> Result<Self, QpError> {
        let d = cost_vector.len();
        if cost_matrix.nrows() != d || cost_matrix.ncols() != d {
            return Err(QpError::BadShape(format!(
                "cost matrix is {}x{}, expected {d}x{d}",
                cost_matrix.nrows(),
                cost_matrix.ncols()
            )));
        }
        if constraint_matrix.ncols() != d && constraint_matrix.nrows() != 0 {
            return Err(QpError::BadShape(format!(
                "constraint matrix has {} columns, expected {d}",
                constraint_matrix.ncols()
            )));
        }
        if constraint_matrix.nrows() != constraint_offset.len() {
            return Err(QpError::BadShape(format!(
                "{} constraint rows but {} offsets",
                constraint_matrix.nrows(),
                constraint_offset.len()
            )));
        }
        if !cost_matrix.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("cost matrix"));
        }
        if !cost_vector.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("cost vector"));
        }
        if !constraint_matrix.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("constraint matrix"));
        }
        if !constraint_offset.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("constraint offset"));
        }
        let asym = (&cost_matrix - cost_matrix.transpose()).amax();
        if asym > 1e-12 {
            return Err(QpError::BadShape(format!("cost matrix asymmetry {asym} > 1e-12")));
        }
        Ok(Self {
            cost_matrix,
            cost_vector,
            constraint_matrix,
            constraint_offset,
            lower: None,
            upper: None,
        })
    }

    pub fn with_bounds(
        mut self,
        lower: Option<DVector<f64>>,
        upper: Option<DVector<f64>>,
    ) -> Result<Self, QpError> {
        let d = self.cost_vector.len();
        for b in [&lower, &upper].into_iter().flatten() {
            if b.len() != d {
                return Err(QpError::BadShape(format!("bound has length {}, expected {d}", b.len())));
            }
            if b.iter().any(|v| v.is_nan()) {
                return Err(QpError::NonFinite("bounds"));
            }
        }
        self.lower = lower;
        self.upper = upper;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.cost_vector.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        (z.transpose() * &self.cost_matrix * z)[(0, 0)] + self.cost_vector.dot(z)
    }

    /// Constraint rows plus finite bounds, as `(normal, offset, kind)` with
    /// `normal · z >= offset`.
    fn combined_rows(&self) -> Vec<(DVector<f64>, f64, RowKind)> {
        let d = self.dim();
        let mut rows = Vec::with_capacity(self.constraint_matrix.nrows());
        for i in 0..self.constraint_matrix.nrows() {
            rows.push((
                self.constraint_matrix.row(i).transpose(),
                self.constraint_offset[i],
                RowKind::Constraint(i),
            ));
        }
        if let Some(lo) = &self.lower {
            for k in 0..d {
                if lo[k].is_finite() {
                    let mut n = DVector::zeros(d);
                    n[k] = 1.0;
                    rows.push((n, lo[k], RowKind::Lower(k)));
                }
            }
        }
        if let Some(hi) = &self.upper {
            for k in 0..d {
                if hi[k].is_finite() {
                    let mut n = DVector::zeros(d);
                    n[k] = -1.0;
                    rows.push((n, -hi[k], RowKind::Upper(k)));
                }
            }
        }
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Constraint(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn within(&self, tol: f64) -> bool {
        self.stationarity <= tol && self.primal <= tol && self.complementarity <= tol
    }
}

/// Farkas certificate: multipliers `λ >= 0` over constraint rows and bounds
/// with `A'λ ≈ 0` and `λ'c > 0`.
#[derive(Debug, Clone)]
pub struct FarkasCertificate {
    pub constraint: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl FarkasCertificate {
    /// Returns `(|A'λ|_inf, λ'c)`; a valid certificate has the first tiny
    /// and the second strictly positive.
    pub fn check(&self, p: &QpProblem) -> (f64, f64) {
        let d = p.dim();
        let mut combo = DVector::zeros(d);
        let mut value = 0.0;
        for i in 0..p.constraint_matrix.nrows() {
            combo += p.constraint_matrix.row(i).transpose() * self.constraint[i];
            value += self.constraint[i] * p.constraint_offset[i];
        }
        if let Some(lo) = &p.lower {
            for k in 0..d {
                if lo[k].is_finite() {
                    combo[k] += self.lower[k];
                    value += self.lower[k] * lo[k];
                }
            }
        }
        if let Some(hi) = &p.upper {
            for k in 0..d {
                if hi[k].is_finite() {
                    combo[k] -= self.upper[k];
                    value -= self.upper[k] * hi[k];
                }
            }
        }
        (combo.amax(), value)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub minimizer: DVector<f64>,
    pub duals: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub status: QpStatus,
    pub objective: f64,
    pub kkt: Option<KktResiduals>,
    pub certificate: Option<FarkasCertificate>,
    pub iterations: usize,
}

/// Solves the QP to KKT residuals below `tol` or returns an infeasibility
/// certificate. Non-convergence within the iteration cap is an error, never
/// a silent wrong answer.
pub fn solve_qp(p: &QpProblem, tol: f64) -> Result<QpSolution, QpError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let d = p.dim();
    let g = 2.0 * &p.cost_matrix;
    let chol = Cholesky::new(g).ok_or(QpError::NotPositiveDefinite)?;

    let rows = p.combined_rows();
    let mut z = chol.solve(&(-&p.cost_vector));
    let mut duals = vec![0.0f64; rows.len()];
    let mut active: Vec<usize> = Vec::new();
    let mut iterations = 0usize;
    // diagonal scale of G^{-1}; dependence of an entering normal on the
    // active set is judged by its projected curvature relative to this
    let ginv_scale = (0..d)
        .map(|k| {
            let mut e = DVector::zeros(d);
            e[k] = 1.0;
            chol.solve(&e)[k].abs()
        })
        .fold(1.0f64, f64::max);

    'outer: loop {
        // most violated constraint
        let mut worst = -tol;
        let mut entering: Option<usize> = None;
        for (idx, (n, c, _)) in rows.iter().enumerate() {
            let s = n.dot(&z) - c;
            if s < worst {
                worst = s;
                entering = Some(idx);
            }
        }
        let Some(pin) = entering else {
            break 'outer;
        };
        let n_p = rows[pin].0.clone();
        let c_p = rows[pin].1;
        let mut u_p = 0.0f64;

        loop {
            iterations += 1;
            if iterations > ITERATION_CAP {
                return Err(QpError::IterationLimit(ITERATION_CAP));
            }
            let (z_dir, r) = step_directions(&chol, &rows, &active, &n_p)?;
            let curvature = n_p.dot(&z_dir);
            let dependent = curvature <= 1e-12 * (1.0 + n_p.norm_squared() * ginv_scale);

            // partial step: largest move keeping active duals nonnegative
            let mut t1 = f64::INFINITY;
            let mut blocking: Option<usize> = None;
            for (k, &row) in active.iter().enumerate() {
                if r[k] > 1e-13 {
                    let t = duals[row] / r[k];
                    if t < t1 {
                        t1 = t;
                        blocking = Some(k);
                    }
                }
            }

            if dependent {
                if blocking.is_none() {
                    // n_p = N r with r <= 0: Farkas certificate of infeasibility
                    let mut cert = vec![0.0f64; rows.len()];
                    cert[pin] = 1.0;
                    for (k, &row) in active.iter().enumerate() {
                        cert[row] = (-r[k]).max(0.0);
                    }
                    let certificate = split_certificate(p, &rows, &cert);
                    return Ok(QpSolution {
                        minimizer: z,
                        duals: DVector::zeros(p.constraint_matrix.nrows()),
                        lower_duals: DVector::zeros(d),
                        upper_duals: DVector::zeros(d),
                        status: QpStatus::Infeasible,
                        objective: f64::NAN,
                        kkt: None,
                        certificate: Some(certificate),
                        iterations,
                    });
                }
                // dual-only step
                let k = blocking.unwrap();
                for (kk, &row) in active.iter().enumerate() {
                    duals[row] -= t1 * r[kk];
                }
                u_p += t1;
                active.remove(k);
                continue;
            }

            let s_p = n_p.dot(&z) - c_p;
            let t2 = -s_p / curvature;
            let t = t1.min(t2);
            z += &z_dir * t;
            for (kk, &row) in active.iter().enumerate() {
                duals[row] -= t * r[kk];
            }
            u_p += t;
            if t2 <= t1 {
                duals[pin] = u_p;
                active.push(pin);
                break;
            }
            let k = blocking.expect("t1 finite implies a blocking constraint");
            active.remove(k);
        }
    }

    let mut constraint_duals = DVector::zeros(p.constraint_matrix.nrows());
    let mut lower_duals = DVector::zeros(d);
    let mut upper_duals = DVector::zeros(d);
    for (idx, (_, _, kind)) in rows.iter().enumerate() {
        match kind {
            RowKind::Constraint(i) => constraint_duals[*i] = duals[idx],
            RowKind::Lower(k) => lower_duals[*k] = duals[idx],
            RowKind::Upper(k) => upper_duals[*k] = duals[idx],
        }
    }
    let mut solution = QpSolution {
        objective: p.objective(&z),
        minimizer: z,
        duals: constraint_duals,
        lower_duals,
        upper_duals,
        status: QpStatus::Optimal,
        kkt: None,
        certificate: None,
        iterations,
    };
    let kkt = kkt_residuals(p, &solution);
    if !kkt.within(tol) {
        return Err(QpError::NumericalFailure(format!(
            "KKT residuals above tolerance: stationarity {:.3e}, primal {:.3e}, complementarity {:.3e}",
            kkt.stationarity, kkt.primal, kkt.complementarity
        )));
    }
    solution.kkt = Some(kkt);
    Ok(solution)
}

/// Directions for the entering normal `n_p` given the active set:
/// `r = (N' G^{-1} N)^{-1} N' G^{-1} n_p` and `z_dir = G^{-1} (n_p - N r)`.
fn step_directions(
    chol: &Cholesky<f64, Dyn>,
    rows: &[(DVector<f64>, f64, RowKind)],
    active: &[usize],
    n_p: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let ginv_np = chol.solve(n_p);
    if active.is_empty() {
        return Ok((ginv_np, DVector::zeros(0)));
    }
    let d = n_p.len();
    let k = active.len();
    let mut n_mat = DMatrix::zeros(d, k);
    for (col, &row) in active.iter().enumerate() {
        n_mat.set_column(col, &rows[row].0);
    }
    let ginv_n = chol.solve(&n_mat);
    let s = n_mat.transpose() * &ginv_n;
    let rhs = n_mat.transpose() * &ginv_np;
    let r = match Cholesky::new(s.clone()) {
        Some(c) => c.solve(&rhs),
        None => s
            .lu()
            .solve(&rhs)
            .ok_or_else(|| QpError::NumericalFailure("singular active-set system".into()))?,
    };
    let z_dir = ginv_np - ginv_n * &r;
    Ok((z_dir, r))
}

fn split_certificate(
    p: &QpProblem,
    rows: &[(DVector<f64>, f64, RowKind)],
    cert: &[f64],
) -> FarkasCertificate {
    let d = p.dim();
    let mut constraint = DVector::zeros(p.constraint_matrix.nrows());
    let mut lower = DVector::zeros(d);
    let mut upper = DVector::zeros(d);
    for (idx, (_, _, kind)) in rows.iter().enumerate() {
        match kind {
            RowKind::Constraint(i) => constraint[*i] = cert[idx],
            RowKind::Lower(k) => lower[*k] = cert[idx],
            RowKind::Upper(k) => upper[*k] = cert[idx],
        }
    }
    FarkasCertificate { constraint, lower, upper }
}

fn kkt_residuals(p: &QpProblem, s: &QpSolution) -> KktResiduals {
    let z = &s.minimizer;
    let d = p.dim();
    // stationarity: 2 P z + q - A'λ - λ_lo + λ_hi
    let mut grad = 2.0 * &p.cost_matrix * z + &p.cost_vector;
    for i in 0..p.constraint_matrix.nrows() {
        grad -= p.constraint_matrix.row(i).transpose() * s.duals[i];
    }
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..p.constraint_matrix.nrows() {
        let slack = p.constraint_matrix.row(i).dot(&z.transpose()) - p.constraint_offset[i];
        primal = primal.max(-slack);
        comp = comp.max((s.duals[i] * slack).abs());
    }
    if let Some(lo) = &p.lower {
        for k in 0..d {
            if lo[k].is_finite() {
                grad[k] -= s.lower_duals[k];
                let slack = z[k] - lo[k];
                primal = primal.max(-slack);
                comp = comp.max((s.lower_duals[k] * slack).abs());
            }
        }
    }
    if let Some(hi) = &p.upper {
        for k in 0..d {
            if hi[k].is_finite() {
                grad[k] += s.upper_duals[k];
                let slack = hi[k] - z[k];
                primal = primal.max(-slack);
                comp = comp.max((s.upper_duals[k] * slack).abs());
            }
        }
    }
    KktResiduals { stationarity: grad.amax(), primal: primal.max(0.0), complementarity: comp }
}

/// Recomputes the KKT residuals of an `Optimal` solution from scratch;
/// returns the verdict and the report.
pub fn verify_kkt(p: &QpProblem, s: &QpSolution, tol: f64) -> (bool, KktResiduals) {
    let res = kkt_residuals(p, s);
    (s.status == QpStatus::Optimal && res.within(tol), res)
}

/// Lagrangian dual objective at the solution's multipliers (equals the primal
/// objective at a KKT point).
pub fn dual_objective(p: &QpProblem, s: &QpSolution) -> f64 {
    let z = &s.minimizer;
    let mut val = p.objective(z);
    for i in 0..p.constraint_matrix.nrows() {
        let slack = p.constraint_matrix.row(i).dot(&z.transpose()) - p.constraint_offset[i];
        val -= s.duals[i] * slack;
    }
    let d = p.dim();
    if let Some(lo) = &p.lower {
        for k in 0..d {
            if lo[k].is_finite() {
                val -= s.lower_duals[k] * (z[k] - lo[k]);
            }
        }
    }
    if let Some(hi) = &p.upper {
        for k in 0..d {
            if hi[k].is_finite() {
                val -= s.upper_duals[k] * (hi[k] - z[k]);
            }
        }
    }
    val
}

/// Largest `t` (capped at 1) such that `A u >= c + t·1` admits a solution
/// with `u` inside the bounds, together with a witness attaining it.
///
/// Solved as a strictly convex QP in `(u, t)` with a tiny regularization
/// `1e-6 (|u|^2 + t^2)` added to `-t`; the cap keeps the program bounded
/// when the input set is unbounded. A positive margin certifies strict
/// feasibility of `A u >= c`.
pub fn max_strict_margin(
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    lower: Option<&DVector<f64>>,
    upper: Option<&DVector<f64>>,
) -> Result<(f64, DVector<f64>), QpError> {
    const REG: f64 = 1e-6;
    let d = a.ncols();
    let k = a.nrows();
    let mut ext = DMatrix::zeros(k + 1, d + 1);
    let mut off = DVector::zeros(k + 1);
    for i in 0..k {
        for j in 0..d {
            ext[(i, j)] = a[(i, j)];
        }
        ext[(i, d)] = -1.0;
        off[i] = c[i];
    }
    // cap: -t >= -1
    ext[(k, d)] = -1.0;
    off[k] = -1.0;

    let cost = DMatrix::identity(d + 1, d + 1) * REG;
    let mut lin = DVector::zeros(d + 1);
    lin[d] = -1.0;

    let mut lo = DVector::from_element(d + 1, f64::NEG_INFINITY);
    let mut hi = DVector::from_element(d + 1, f64::INFINITY);
    if let Some(l) = lower {
        for j in 0..d {
            lo[j] = l[j];
        }
    }
    if let Some(u) = upper {
        for j in 0..d {
            hi[j] = u[j];
        }
    }

    let problem = QpProblem::new(cost, lin, ext, off)?.with_bounds(Some(lo), Some(hi))?;
    let sol = solve_qp(&problem, DEFAULT_TOL)?;
    match sol.status {
        QpStatus::Optimal => {
            let margin = sol.minimizer[d];
            let witness = DVector::from_iterator(d, (0..d).map(|j| sol.minimizer[j]));
            Ok((margin, witness))
        }
        // unreachable for consistent bounds: t free below always admits a point
        QpStatus::Infeasible => Err(QpError::NumericalFailure(
            "margin program reported infeasible".into(),
        )),
    }
}
