//! Dense convex quadratic programs with equality constraints and box bounds:
//!
//! ```text
//! minimize    ½ xᵀ P x + qᵀ x
//! subject to  A_eq x = b_eq
//!             lower ≤ x ≤ upper
//! ```
//!
//! Solved by operator splitting (ADMM on the stacked constraint matrix
//! `C = [A_eq; I]`) with Ruiz equilibration, residual-balancing step size
//! adaptation, a primal infeasibility certificate and an optional active-set
//! polish. The factorization of `P + σI + Cᵀ R C` is cached inside
//! [`QpSolver`] and reused when only `q`, `b_eq` or the bounds change.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const INF_BOUND: f64 = 1e30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("P is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("lower bound exceeds upper bound for variable {0}")]
    BoundsInverted(usize),
    #[error("NaN or infinite entry in {0}")]
    NonFinite(&'static str),
    #[error("KKT system could not be factored")]
    Factorization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

fn dim_check(what: &'static str, expected: usize, got: usize) -> Result<(), QpError> {
    if expected == got {
        Ok(())
    } else {
        Err(QpError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

fn check_bounds(lower: &DVector<f64>, upper: &DVector<f64>) -> Result<(), QpError> {
    for i in 0..lower.len() {
        if lower[i].is_nan() || upper[i].is_nan() {
            return Err(QpError::NonFinite("bounds"));
        }
        if lower[i] > upper[i] {
            return Err(QpError::BoundsInverted(i));
        }
    }
    Ok(())
}

impl QpProblem {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        dim_check("P rows", n, p.nrows())?;
        dim_check("P cols", n, p.ncols())?;
        dim_check("A_eq cols", n, a_eq.ncols())?;
        dim_check("b_eq length", a_eq.nrows(), b_eq.len())?;
        dim_check("lower length", n, lower.len())?;
        dim_check("upper length", n, upper.len())?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("P"));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("q"));
        }
        if a_eq.iter().any(|v| !v.is_finite()) || b_eq.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("equality constraints"));
        }
        let asym = if n > 0 { (&p - p.transpose()).amax() } else { 0.0 };
        if asym > 1e-10 * p.amax().max(1.0) {
            return Err(QpError::NotSymmetric(asym));
        }
        check_bounds(&lower, &upper)?;
        Ok(Self {
            p,
            q,
            a_eq,
            b_eq,
            lower,
            upper,
        })
    }

    /// Problem with bounds only.
    pub fn boxed(
        p: DMatrix<f64>,
        q: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        Self::new(p, q, DMatrix::zeros(0, n), DVector::zeros(0), lower, upper)
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn a_eq(&self) -> &DMatrix<f64> {
        &self.a_eq
    }

    pub fn b_eq(&self) -> &DVector<f64> {
        &self.b_eq
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// `‖A_eq x − b_eq‖∞` combined with the largest bound violation.
    pub fn primal_residual(&self, x: &DVector<f64>) -> f64 {
        let eq = if self.num_eq() > 0 {
            (&self.a_eq * x - &self.b_eq).amax()
        } else {
            0.0
        };
        let mut bound: f64 = 0.0;
        for i in 0..x.len() {
            bound = bound.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
        }
        eq.max(bound)
    }

    /// `‖P x + q + A_eqᵀ y + z‖∞`.
    pub fn dual_residual(&self, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let mut r = &self.p * x + &self.q + z;
        if self.num_eq() > 0 {
            r += self.a_eq.transpose() * y;
        }
        r.amax()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub scaling_iters: usize,
    pub eps_prim_inf: f64,
    pub check_interval: usize,
    pub polish: bool,
    /// Active-set refinement rounds per polish attempt.
    pub polish_rounds: usize,
    /// Polishing is also attempted at this many ADMM iterations and at
    /// every doubling of it (0 polishes only at the end).
    pub polish_interval: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adaptive_rho_interval: 25,
            scaling_iters: 10,
            eps_prim_inf: 1e-5,
            check_interval: 5,
            polish: true,
            polish_rounds: 10,
            polish_interval: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Equality multipliers.
    pub y: DVector<f64>,
    /// Bound multipliers (negative at an active lower bound, positive at an
    /// active upper bound).
    pub z: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
    pub objective: f64,
}

/// Solves a single problem with fresh solver state.
pub fn solve(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    let mut solver = QpSolver::new(problem.clone(), settings.clone())?;
    Ok(solver.solve())
}

/// ADMM workspace. Holds the scaled problem data, the cached factorization
/// and the last iterate (used as the starting point of the next solve).
pub struct QpSolver {
    problem: QpProblem,
    settings: QpSettings,
    n: usize,
    m_eq: usize,
    // scaling: x = D x̄, constraint rows scaled by E (box rows by 1/D), cost by c
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    p_s: DMatrix<f64>,
    a_s: DMatrix<f64>,
    a_s_t: DMatrix<f64>,
    q_s: DVector<f64>,
    b_s: DVector<f64>,
    l_box: DVector<f64>,
    u_box: DVector<f64>,
    rho: f64,
    rho_box: DVector<f64>,
    factor: Option<Cholesky<f64, Dyn>>,
    // scaled iterates; y/z are stacked [eq rows; box rows]
    x: DVector<f64>,
    z_eq: DVector<f64>,
    z_box: DVector<f64>,
    y_eq: DVector<f64>,
    y_box: DVector<f64>,
}

impl QpSolver {
    pub fn new(problem: QpProblem, settings: QpSettings) -> Result<Self, QpError> {
        let n = problem.num_vars();
        let m_eq = problem.num_eq();
        let mut solver = Self {
            n,
            m_eq,
            d: DVector::from_element(n, 1.0),
            e: DVector::from_element(m_eq, 1.0),
            c: 1.0,
            p_s: problem.p.clone(),
            a_s: problem.a_eq.clone(),
            a_s_t: problem.a_eq.transpose(),
            q_s: problem.q.clone(),
            b_s: problem.b_eq.clone(),
            l_box: problem.lower.clone(),
            u_box: problem.upper.clone(),
            rho: settings.rho,
            rho_box: DVector::zeros(n),
            factor: None,
            x: DVector::zeros(n),
            z_eq: DVector::zeros(m_eq),
            z_box: DVector::zeros(n),
            y_eq: DVector::zeros(m_eq),
            y_box: DVector::zeros(n),
            problem,
            settings,
        };
        solver.equilibrate();
        solver.rescale_vectors();
        solver.set_rho_vectors();
        solver.factorize()?;
        Ok(solver)
    }

    pub fn problem(&self) -> &QpProblem {
        &self.problem
    }

    fn equilibrate(&mut self) {
        let n = self.n;
        let m = self.m_eq;
        for _ in 0..self.settings.scaling_iters {
            let mut dd = DVector::from_element(n, 1.0);
            for j in 0..n {
                let mut norm = self.p_s.column(j).amax();
                if m > 0 {
                    norm = norm.max(self.a_s.column(j).amax());
                }
                dd[j] = scale_factor(norm);
            }
            let mut ee = DVector::from_element(m, 1.0);
            for r in 0..m {
                ee[r] = scale_factor(self.a_s.row(r).amax());
            }
            for j in 0..n {
                for i in 0..n {
                    self.p_s[(i, j)] *= dd[i] * dd[j];
                }
                for r in 0..m {
                    self.a_s[(r, j)] *= ee[r] * dd[j];
                }
            }
            self.d.component_mul_assign(&dd);
            self.e.component_mul_assign(&ee);
            // cost scaling
            let mean_col = if n > 0 {
                (0..n).map(|j| self.p_s.column(j).amax()).sum::<f64>() / n as f64
            } else {
                0.0
            };
            let q_norm = self.problem.q.component_mul(&self.d).amax() * self.c;
            let f = scale_factor(mean_col.max(q_norm));
            let gamma = f * f;
            self.p_s *= gamma;
            self.c *= gamma;
        }
        self.a_s_t = self.a_s.transpose();
    }

    fn rescale_vectors(&mut self) {
        self.q_s = self.problem.q.component_mul(&self.d) * self.c;
        self.b_s = self.problem.b_eq.component_mul(&self.e);
        for i in 0..self.n {
            self.l_box[i] = scale_bound(self.problem.lower[i], self.d[i]);
            self.u_box[i] = scale_bound(self.problem.upper[i], self.d[i]);
        }
    }

    fn set_rho_vectors(&mut self) {
        for i in 0..self.n {
            let free = self.l_box[i] <= -INF_BOUND && self.u_box[i] >= INF_BOUND;
            self.rho_box[i] = if free { RHO_MIN } else { self.rho };
        }
    }

    fn rho_eq(&self) -> f64 {
        RHO_EQ_FACTOR * self.rho
    }

    fn factorize(&mut self) -> Result<(), QpError> {
        let mut k = self.p_s.clone();
        for i in 0..self.n {
            k[(i, i)] += self.settings.sigma + self.rho_box[i];
        }
        if self.m_eq > 0 {
            k += (&self.a_s_t * &self.a_s) * self.rho_eq();
        }
        self.factor = Some(Cholesky::new(k).ok_or(QpError::Factorization)?);
        Ok(())
    }

    pub fn update_q(&mut self, q: DVector<f64>) -> Result<(), QpError> {
        dim_check("q length", self.n, q.len())?;
        if q.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("q"));
        }
        self.problem.q = q;
        self.q_s = self.problem.q.component_mul(&self.d) * self.c;
        Ok(())
    }

    pub fn update_b_eq(&mut self, b_eq: DVector<f64>) -> Result<(), QpError> {
        dim_check("b_eq length", self.m_eq, b_eq.len())?;
        if b_eq.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("b_eq"));
        }
        self.problem.b_eq = b_eq;
        self.b_s = self.problem.b_eq.component_mul(&self.e);
        Ok(())
    }

    pub fn update_bounds(&mut self, lower: DVector<f64>, upper: DVector<f64>) -> Result<(), QpError> {
        dim_check("lower length", self.n, lower.len())?;
        dim_check("upper length", self.n, upper.len())?;
        check_bounds(&lower, &upper)?;
        self.problem.lower = lower;
        self.problem.upper = upper;
        for i in 0..self.n {
            self.l_box[i] = scale_bound(self.problem.lower[i], self.d[i]);
            self.u_box[i] = scale_bound(self.problem.upper[i], self.d[i]);
        }
        let old = self.rho_box.clone();
        self.set_rho_vectors();
        if old != self.rho_box {
            self.factorize()?;
        }
        Ok(())
    }

    /// Starting point for the next solve (unscaled primal and multipliers).
    pub fn warm_start(&mut self, x: &DVector<f64>, y: Option<&DVector<f64>>, z: Option<&DVector<f64>>) {
        if x.len() != self.n {
            return;
        }
        self.x = x.component_div(&self.d);
        if let Some(y) = y.filter(|y| y.len() == self.m_eq) {
            self.y_eq = y.component_div(&self.e) * self.c;
        }
        if let Some(z) = z.filter(|z| z.len() == self.n) {
            // box rows are scaled by 1/D
            self.y_box = z.component_mul(&self.d) * self.c;
        }
        self.z_eq = &self.a_s * &self.x;
        self.z_box = self.x.clone();
    }

    pub fn solve(&mut self) -> QpSolution {
        let s = self.settings.clone();
        let n = self.n;
        let m = self.m_eq;
        let mut rhs = DVector::zeros(n);
        let mut x_tilde;
        let mut z_tilde_eq = DVector::zeros(m);
        let mut delta_y_eq = DVector::zeros(m);
        let mut delta_y_box = DVector::zeros(n);
        let mut status = QpStatus::MaxIterations;
        let mut iterations = 0;
        let mut polished = None;
        if self.z_eq.len() != m {
            self.z_eq = DVector::zeros(m);
        }
        for iter in 1..=s.max_iter {
            iterations = iter;
            let rho_eq = self.rho_eq();
            // x̃ = (P + σI + Cᵀ R C)⁻¹ (σ x − q + Cᵀ(R z − y))
            rhs.copy_from(&self.x);
            rhs *= s.sigma;
            rhs -= &self.q_s;
            for i in 0..n {
                rhs[i] += self.rho_box[i] * self.z_box[i] - self.y_box[i];
            }
            if m > 0 {
                let w = &self.z_eq * rho_eq - &self.y_eq;
                rhs.gemv(1.0, &self.a_s_t, &w, 1.0);
            }
            x_tilde = rhs.clone();
            self.factor
                .as_ref()
                .expect("factorization present")
                .solve_mut(&mut x_tilde);
            if m > 0 {
                z_tilde_eq.gemv(1.0, &self.a_s, &x_tilde, 0.0);
            }
            let x_prev = self.x.clone();
            self.x = &x_tilde * s.alpha + &x_prev * (1.0 - s.alpha);
            // box rows
            for i in 0..n {
                let relaxed = s.alpha * x_tilde[i] + (1.0 - s.alpha) * self.z_box[i];
                let z_new =
                    (relaxed + self.y_box[i] / self.rho_box[i]).clamp(self.l_box[i], self.u_box[i]);
                delta_y_box[i] = self.rho_box[i] * (relaxed - z_new);
                self.y_box[i] += delta_y_box[i];
                self.z_box[i] = z_new;
            }
            // equality rows: projection onto {b}
            for r in 0..m {
                let relaxed = s.alpha * z_tilde_eq[r] + (1.0 - s.alpha) * self.z_eq[r];
                let z_new = self.b_s[r];
                delta_y_eq[r] = rho_eq * (relaxed - z_new);
                self.y_eq[r] += delta_y_eq[r];
                self.z_eq[r] = z_new;
            }
            if iter % s.check_interval != 0 && iter != s.max_iter {
                continue;
            }
            let res = self.residuals();
            if res.prim <= res.eps_prim && res.dual <= res.eps_dual {
                status = QpStatus::Optimal;
                break;
            }
            if s.polish && s.polish_interval > 0 && iter >= s.polish_interval {
                let r = iter / s.polish_interval;
                if iter % s.polish_interval == 0 && r.is_power_of_two() {
                    let sol = self.admm_solution(QpStatus::MaxIterations, iter);
                    if let Some(p) = self.polish(&sol) {
                        polished = Some(p);
                        status = QpStatus::Optimal;
                        break;
                    }
                }
            }
            if self.certifies_infeasibility(&delta_y_eq, &delta_y_box) {
                status = QpStatus::Infeasible;
                break;
            }
            if s.adaptive_rho && iter % s.adaptive_rho_interval == 0 {
                let ratio = (res.prim / res.prim_scale.max(1e-30)) / (res.dual / res.dual_scale.max(1e-30)).max(1e-30);
                let new_rho = (self.rho * libm::sqrt(ratio)).clamp(RHO_MIN, RHO_MAX);
                if new_rho > 5.0 * self.rho || new_rho < 0.2 * self.rho {
                    self.rho = new_rho;
                    self.set_rho_vectors();
                    if self.factorize().is_err() {
                        break;
                    }
                }
            }
        }
        self.finish(status, iterations, polished)
    }

    /// Unscaled residuals of the current iterate.
    fn residuals(&self) -> Residuals {
        let n = self.n;
        let m = self.m_eq;
        let x = self.x.component_mul(&self.d);
        // primal: C x − z
        let mut prim: f64 = 0.0;
        let mut cx_norm: f64 = 0.0;
        let mut z_norm: f64 = 0.0;
        for i in 0..n {
            let z = self.z_box[i] * self.d[i];
            prim = prim.max((x[i] - z).abs());
            cx_norm = cx_norm.max(x[i].abs());
            z_norm = z_norm.max(z.abs());
        }
        if m > 0 {
            let ax = &self.a_s * &self.x;
            for r in 0..m {
                let cx = ax[r] / self.e[r];
                let z = self.z_eq[r] / self.e[r];
                prim = prim.max((cx - z).abs());
                cx_norm = cx_norm.max(cx.abs());
                z_norm = z_norm.max(z.abs());
            }
        }
        // dual: P x + q + Cᵀ y, unscaled by (c D)⁻¹
        let px = &self.p_s * &self.x;
        let mut cty = self.y_box.clone();
        if m > 0 {
            cty.gemv(1.0, &self.a_s_t, &self.y_eq, 1.0);
        }
        let mut dual: f64 = 0.0;
        let mut px_norm: f64 = 0.0;
        let mut cty_norm: f64 = 0.0;
        let mut q_norm: f64 = 0.0;
        for i in 0..n {
            let k = 1.0 / (self.c * self.d[i]);
            dual = dual.max(((px[i] + self.q_s[i] + cty[i]) * k).abs());
            px_norm = px_norm.max((px[i] * k).abs());
            cty_norm = cty_norm.max((cty[i] * k).abs());
            q_norm = q_norm.max((self.q_s[i] * k).abs());
        }
        let prim_scale = cx_norm.max(z_norm);
        let dual_scale = px_norm.max(cty_norm).max(q_norm);
        Residuals {
            prim,
            dual,
            eps_prim: self.settings.eps_abs + self.settings.eps_rel * prim_scale,
            eps_dual: self.settings.eps_abs + self.settings.eps_rel * dual_scale,
            prim_scale,
            dual_scale,
        }
    }

    /// Primal infeasibility: `Cᵀ δy ≈ 0` with `uᵀ δy⁺ + lᵀ δy⁻ < 0`.
    fn certifies_infeasibility(&self, dy_eq: &DVector<f64>, dy_box: &DVector<f64>) -> bool {
        let eps = self.settings.eps_prim_inf;
        // unscale δy: y = E ȳ / c
        let mut norm: f64 = 0.0;
        let dy_eq_u: Vec<f64> = (0..self.m_eq).map(|r| dy_eq[r] * self.e[r] / self.c).collect();
        let dy_box_u: Vec<f64> = (0..self.n).map(|i| dy_box[i] / (self.d[i] * self.c)).collect();
        for v in dy_eq_u.iter().chain(dy_box_u.iter()) {
            norm = norm.max(v.abs());
        }
        if norm < 1e-12 {
            return false;
        }
        // Cᵀ δy in unscaled space
        let mut cty = DVector::from_column_slice(&dy_box_u);
        if self.m_eq > 0 {
            cty.gemv(1.0, &self.problem.a_eq.transpose(), &DVector::from_column_slice(&dy_eq_u), 1.0);
        }
        if cty.amax() > eps * norm {
            return false;
        }
        let mut support = 0.0;
        for (r, &v) in dy_eq_u.iter().enumerate() {
            support += self.problem.b_eq[r] * v;
        }
        for (i, &v) in dy_box_u.iter().enumerate() {
            if v > 0.0 {
                if self.problem.upper[i] >= INF_BOUND {
                    if v > eps * norm {
                        return false;
                    }
                } else {
                    support += self.problem.upper[i] * v;
                }
            } else if v < 0.0 {
                if self.problem.lower[i] <= -INF_BOUND {
                    if -v > eps * norm {
                        return false;
                    }
                } else {
                    support += self.problem.lower[i] * v;
                }
            }
        }
        support < -eps * norm
    }

    fn admm_solution(&self, status: QpStatus, iterations: usize) -> QpSolution {
        let n = self.n;
        // report the projected point so bounds hold exactly
        let x = DVector::from_fn(n, |i, _| {
            (self.z_box[i] * self.d[i]).clamp(self.problem.lower[i], self.problem.upper[i])
        });
        let y = DVector::from_fn(self.m_eq, |r, _| self.y_eq[r] * self.e[r] / self.c);
        let z = DVector::from_fn(n, |i, _| self.y_box[i] / (self.d[i] * self.c));
        QpSolution {
            primal_residual: self.problem.primal_residual(&x),
            dual_residual: self.problem.dual_residual(&x, &y, &z),
            objective: self.problem.objective(&x),
            x,
            y,
            z,
            status,
            iterations,
            polished: false,
        }
    }

    fn finish(&mut self, status: QpStatus, iterations: usize, polished: Option<QpSolution>) -> QpSolution {
        let sol = match polished {
            Some(p) => p,
            None => {
                let sol = self.admm_solution(status, iterations);
                let retry = status != QpStatus::Infeasible && self.settings.polish;
                match retry.then(|| self.polish(&sol)).flatten() {
                    Some(p) => p,
                    None => sol,
                }
            }
        };
        if sol.status == QpStatus::Optimal {
            // continue from the reported solution next time
            self.x = sol.x.component_div(&self.d);
            self.z_box = self.x.clone();
            self.y_box = sol.z.component_mul(&self.d) * self.c;
            self.y_eq = sol.y.component_div(&self.e) * self.c;
            self.z_eq = &self.a_s * &self.x;
        }
        sol
    }

    /// Primal-dual active-set refinement started from the bounds the ADMM
    /// iterate marks as active. Each round solves the equality-constrained
    /// problem with the active variables fixed, then frees variables whose
    /// multiplier has the wrong sign and fixes free variables that left
    /// their box. Accepted once the set is stable and the residuals are small.
    fn polish(&self, sol: &QpSolution) -> Option<QpSolution> {
        let pr = &self.problem;
        let n = self.n;
        let mut fixed = vec![None; n];
        for i in 0..n {
            let zi = self.z_box[i];
            let yi = self.y_box[i];
            if pr.lower[i] > -INF_BOUND && zi - self.l_box[i] < -yi {
                fixed[i] = Some(pr.lower[i]);
            } else if pr.upper[i] < INF_BOUND && self.u_box[i] - zi < yi {
                fixed[i] = Some(pr.upper[i]);
            }
        }
        for _ in 0..self.settings.polish_rounds.max(1) {
            let (mut x, y, z) = self.reduced_solve(&fixed)?;
            let tol = 1e-9 * (1.0 + z.amax());
            let mut changed = false;
            for i in 0..n {
                match fixed[i] {
                    Some(v) => {
                        let at_lower = v == pr.lower[i];
                        let at_upper = v == pr.upper[i];
                        if at_lower && at_upper {
                            continue;
                        }
                        if (at_lower && z[i] > tol) || (at_upper && z[i] < -tol) {
                            fixed[i] = None;
                            changed = true;
                        }
                    }
                    None => {
                        let span = 1e-9 * (1.0 + x[i].abs());
                        if x[i] < pr.lower[i] - span {
                            fixed[i] = Some(pr.lower[i]);
                            changed = true;
                        } else if x[i] > pr.upper[i] + span {
                            fixed[i] = Some(pr.upper[i]);
                            changed = true;
                        }
                    }
                }
            }
            if changed {
                continue;
            }
            for i in 0..n {
                x[i] = x[i].clamp(pr.lower[i], pr.upper[i]);
            }
            let primal_residual = pr.primal_residual(&x);
            let dual_residual = pr.dual_residual(&x, &y, &z);
            let eq_scale = if self.m_eq > 0 { pr.b_eq.amax() } else { 0.0 };
            let prim_tol = self.settings.eps_abs + self.settings.eps_rel * x.amax().max(eq_scale);
            let dual_tol = self.settings.eps_abs
                + self.settings.eps_rel * (&pr.p * &x).amax().max(pr.q.amax()).max(z.amax());
            let ok = primal_residual <= prim_tol && dual_residual <= dual_tol;
            if !ok {
                return None;
            }
            return Some(QpSolution {
                objective: pr.objective(&x),
                x,
                y,
                z,
                status: QpStatus::Optimal,
                iterations: sol.iterations,
                primal_residual,
                dual_residual,
                polished: true,
            });
        }
        None
    }

    /// Minimizer with the variables in `fixed` held at their values; returns
    /// the primal point, equality multipliers and bound multipliers.
    fn reduced_solve(
        &self,
        fixed: &[Option<f64>],
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let pr = &self.problem;
        let n = self.n;
        let m = self.m_eq;
        let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
        let nf = free.len();
        let dim = nf + m;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        let x_fixed = DVector::from_fn(n, |i, _| fixed[i].unwrap_or(0.0));
        let px_fixed = &pr.p * &x_fixed;
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                kkt[(a, b)] = pr.p[(i, j)];
            }
            for r in 0..m {
                kkt[(a, nf + r)] = pr.a_eq[(r, i)];
                kkt[(nf + r, a)] = pr.a_eq[(r, i)];
            }
            rhs[a] = -pr.q[i] - px_fixed[i];
        }
        if m > 0 {
            let ax_fixed = &pr.a_eq * &x_fixed;
            for r in 0..m {
                rhs[nf + r] = pr.b_eq[r] - ax_fixed[r];
            }
        }
        let mut sol_vec = DVector::zeros(dim);
        if dim > 0 {
            // quasi-definite regularization plus iterative refinement
            let delta = 1e-9 * kkt.amax().max(1.0);
            let mut reg = kkt.clone();
            for a in 0..nf {
                reg[(a, a)] += delta;
            }
            for r in 0..m {
                reg[(nf + r, nf + r)] -= delta;
            }
            let lu = reg.lu();
            sol_vec = lu.solve(&rhs)?;
            for _ in 0..5 {
                let resid = &rhs - &kkt * &sol_vec;
                if let Some(corr) = lu.solve(&resid) {
                    sol_vec += corr;
                }
            }
        }
        if sol_vec.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut x = x_fixed;
        for (a, &i) in free.iter().enumerate() {
            x[i] = sol_vec[a];
        }
        let y = DVector::from_fn(m, |r, _| sol_vec[nf + r]);
        let mut grad = &pr.p * &x + &pr.q;
        if m > 0 {
            grad += pr.a_eq.transpose() * &y;
        }
        let z = DVector::from_fn(n, |i, _| if fixed[i].is_some() { -grad[i] } else { 0.0 });
        Some((x, y, z))
    }
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    prim_scale: f64,
    dual_scale: f64,
}

fn scale_factor(norm: f64) -> f64 {
    if norm < 1e-4 {
        1.0
    } else {
        (1.0 / libm::sqrt(norm)).clamp(1e-4, 1e4)
    }
}

fn scale_bound(v: f64, d: f64) -> f64 {
    if v <= -INF_BOUND {
        f64::NEG_INFINITY
    } else if v >= INF_BOUND {
        f64::INFINITY
    } else {
        v / d
    }
}
