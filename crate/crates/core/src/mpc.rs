//! Fractional model-predictive control.
//!
//! At step `k` the controller plans `H` moves `a[k..k+H)` and states
//! `s̄[k+1..=k+H]` subject to the fractional dynamics
//!
//! ```text
//! s̄[t] + Σ_{j=1..t} D(α,j) s̄[t−j] − A s̄[t−1] − B a[t−1] = μ + e[t−k−1]
//! ```
//!
//! with the observed history pinned, and minimizes a discounted quadratic
//! tracking cost. The rows above follow from
//! `Δ^α s̄[t] = A s̄[t−1] + B a[t−1] + μ + e`.
//!
//! Two formulations are available. [`Formulation::Sparse`] keeps states as
//! decision variables in the stacked order `[s̄[k+H] … s̄[k+1], a[k+H−1] …
//! a[k]]` (optionally with explicit history variables and pinning rows).
//! [`Formulation::Condensed`] substitutes the states through the impulse
//! response of the model, leaving only actions (and slacks); the Hessian is
//! then constant for a fixed model, so [`MpcController`] factors it once.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::gl::{GlWeightTable, StateTrajectory};
use crate::model::FracModel;
use crate::qp::{QpError, QpProblem, QpSettings, QpSolver, QpStatus};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpcError {
    #[error("invalid MPC configuration: {0}")]
    Config(&'static str),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("history is empty")]
    EmptyHistory,
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// How the state boxes `s_min ≤ s̄ ≤ s_max` enter the problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateBounds {
    Hard,
    /// Each future state gets a clamp variable `w ∈ [s_min, s_max]` and the
    /// cost `weight·‖s̄ − w‖²` (discounted like the tracking cost).
    Soft { weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    Sparse { explicit_pinning: bool },
    Condensed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub s_min: Vec<f64>,
    pub s_max: Vec<f64>,
    pub reference: Vec<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Per-dimension `(lower, upper)` action limits; `None` leaves actions free.
    pub action_bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub state_bounds: StateBounds,
    pub formulation: Formulation,
    pub qp: QpSettings,
}

impl MpcConfig {
    /// Unbounded tracking problem with identity weights on states and
    /// actions scaled by `r`.
    pub fn tracking(n: usize, p: usize, horizon: usize, reference: Vec<f64>, r: f64) -> Self {
        Self {
            horizon,
            gamma: 1.0,
            s_min: vec![f64::NEG_INFINITY; n],
            s_max: vec![f64::INFINITY; n],
            reference,
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(p, p) * r,
            action_bounds: None,
            state_bounds: StateBounds::Hard,
            formulation: Formulation::Condensed,
            qp: QpSettings::default(),
        }
    }

    pub fn validate(&self, n: usize, p: usize) -> Result<(), MpcError> {
        let dims = |what, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(MpcError::DimensionMismatch {
                    what,
                    expected,
                    got,
                })
            }
        };
        if self.horizon == 0 {
            return Err(MpcError::Config("horizon must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(MpcError::Config("gamma must lie in [0, 1]"));
        }
        dims("s_min length", n, self.s_min.len())?;
        dims("s_max length", n, self.s_max.len())?;
        dims("reference length", n, self.reference.len())?;
        dims("Q rows", n, self.q.nrows())?;
        dims("Q cols", n, self.q.ncols())?;
        dims("R rows", p, self.r.nrows())?;
        dims("R cols", p, self.r.ncols())?;
        for i in 0..n {
            if self.s_min[i].is_nan() || self.s_max[i].is_nan() || self.s_min[i] > self.s_max[i] {
                return Err(MpcError::Config("s_min must not exceed s_max"));
            }
        }
        if self.reference.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::Config("reference must be finite"));
        }
        if !is_sym_psd(&self.q) {
            return Err(MpcError::Config("Q must be symmetric positive semidefinite"));
        }
        if !is_sym_psd(&self.r) {
            return Err(MpcError::Config("R must be symmetric positive semidefinite"));
        }
        if let Some((lo, hi)) = &self.action_bounds {
            dims("action lower bound length", p, lo.len())?;
            dims("action upper bound length", p, hi.len())?;
            for c in 0..p {
                if lo[c].is_nan() || hi[c].is_nan() || lo[c] > hi[c] {
                    return Err(MpcError::Config("action lower bound exceeds upper bound"));
                }
            }
        }
        if let StateBounds::Soft { weight } = self.state_bounds {
            if !(weight.is_finite() && weight > 0.0) {
                return Err(MpcError::Config("soft bound weight must be positive"));
            }
        }
        Ok(())
    }

    fn discount(&self, l: usize) -> f64 {
        libm::pow(self.gamma, l as f64)
    }

    fn action_limits(&self, p: usize) -> (Vec<f64>, Vec<f64>) {
        match &self.action_bounds {
            Some((lo, hi)) => (lo.clone(), hi.clone()),
            None => (vec![f64::NEG_INFINITY; p], vec![f64::INFINITY; p]),
        }
    }
}

fn is_sym_psd(m: &DMatrix<f64>) -> bool {
    if m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return false;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min() >= -1e-9 * scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcStats {
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
    /// The QP failed and the zero action was substituted.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    pub action: Vec<f64>,
    /// `s̄[k+1], …, s̄[k+H]`.
    pub planned_states: Vec<Vec<f64>>,
    /// `a[k], …, a[k+H−1]`.
    pub planned_actions: Vec<Vec<f64>>,
    pub objective: f64,
    pub stats: MpcStats,
}

/// Position of every decision variable of the sparse formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariableLayout {
    pub n: usize,
    pub p: usize,
    pub horizon: usize,
    /// Index of the current state.
    pub k: usize,
    pub explicit_history: bool,
    pub slack: bool,
}

impl VariableLayout {
    fn history_vars(&self) -> usize {
        if self.explicit_history {
            (self.k + 1) * self.n
        } else {
            0
        }
    }

    fn actions_offset(&self) -> usize {
        self.horizon * self.n + self.history_vars()
    }

    fn slack_offset(&self) -> usize {
        self.actions_offset() + self.horizon * self.p
    }

    pub fn num_vars(&self) -> usize {
        self.slack_offset() + if self.slack { self.horizon * self.n } else { 0 }
    }

    /// Variable holding component `i` of `s̄[t]`, if `s̄[t]` is a variable.
    pub fn state_index(&self, t: usize, i: usize) -> Option<usize> {
        let (k, h, n) = (self.k, self.horizon, self.n);
        if t > k && t <= k + h {
            Some((k + h - t) * n + i)
        } else if t <= k && self.explicit_history {
            Some(h * n + (k - t) * n + i)
        } else {
            None
        }
    }

    /// Variable holding component `c` of `a[t]`, `k ≤ t < k + H`.
    pub fn action_index(&self, t: usize, c: usize) -> usize {
        debug_assert!(t >= self.k && t < self.k + self.horizon);
        self.actions_offset() + (self.k + self.horizon - 1 - t) * self.p + c
    }

    /// Clamp variable paired with `s̄[t]` under soft bounds.
    pub fn slack_index(&self, t: usize, i: usize) -> Option<usize> {
        if self.slack && t > self.k && t <= self.k + self.horizon {
            Some(self.slack_offset() + (self.k + self.horizon - t) * self.n + i)
        } else {
            None
        }
    }
}

/// Equality system and bounds of the sparse formulation.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledConstraints {
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub layout: VariableLayout,
}

fn check_inputs(
    model: &FracModel,
    history: &StateTrajectory,
    config: &MpcConfig,
    noise: &[Vec<f64>],
) -> Result<(), MpcError> {
    let n = model.state_dim();
    let p = model.action_dim();
    config.validate(n, p)?;
    if history.num_states() == 0 {
        return Err(MpcError::EmptyHistory);
    }
    if history.state_dim() != n {
        return Err(MpcError::DimensionMismatch {
            what: "history state dimension",
            expected: n,
            got: history.state_dim(),
        });
    }
    if noise.len() != config.horizon {
        return Err(MpcError::DimensionMismatch {
            what: "noise vectors",
            expected: config.horizon,
            got: noise.len(),
        });
    }
    if let Some(e) = noise.iter().find(|e| e.len() != n) {
        return Err(MpcError::DimensionMismatch {
            what: "noise vector length",
            expected: n,
            got: e.len(),
        });
    }
    Ok(())
}

/// Builds the dynamics rows (and, with `explicit_pinning`, the rows fixing
/// every `s̄[k′]`, `k′ ≤ k`, to the observed `s[k′]`).
pub fn assemble_constraints(
    model: &FracModel,
    history: &StateTrajectory,
    config: &MpcConfig,
    noise: &[Vec<f64>],
    explicit_pinning: bool,
) -> Result<AssembledConstraints, MpcError> {
    check_inputs(model, history, config, noise)?;
    let n = model.state_dim();
    let p = model.action_dim();
    let h = config.horizon;
    let k = history.num_states() - 1;
    let layout = VariableLayout {
        n,
        p,
        horizon: h,
        k,
        explicit_history: explicit_pinning,
        slack: matches!(config.state_bounds, StateBounds::Soft { .. }),
    };
    let weights = GlWeightTable::build(model.orders(), k + h);
    let pin_rows = if explicit_pinning { (k + 1) * n } else { 0 };
    let rows = h * n + pin_rows;
    let mut a_eq = DMatrix::zeros(rows, layout.num_vars());
    let mut b_eq = DVector::zeros(rows);
    for t in (k + 1..=k + h).rev() {
        let l = t - k - 1;
        for i in 0..n {
            let row = (k + h - t) * n + i;
            let mut rhs = model.mu()[i] + noise[l][i];
            a_eq[(row, layout.state_index(t, i).expect("future state"))] += 1.0;
            for j in 1..=t {
                let w = weights.get(i, j);
                match layout.state_index(t - j, i) {
                    Some(col) => a_eq[(row, col)] += w,
                    None => rhs -= w * history.state(t - j)[i],
                }
            }
            for c in 0..n {
                let coef = model.a()[(i, c)];
                match layout.state_index(t - 1, c) {
                    Some(col) => a_eq[(row, col)] -= coef,
                    None => rhs += coef * history.state(t - 1)[c],
                }
            }
            for c in 0..p {
                a_eq[(row, layout.action_index(t - 1, c))] -= model.b()[(i, c)];
            }
            b_eq[row] = rhs;
        }
    }
    if explicit_pinning {
        for t in (0..=k).rev() {
            for i in 0..n {
                let row = h * n + (k - t) * n + i;
                a_eq[(row, layout.state_index(t, i).expect("history variable"))] = 1.0;
                b_eq[row] = history.state(t)[i];
            }
        }
    }
    let nv = layout.num_vars();
    let mut lower = DVector::from_element(nv, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(nv, f64::INFINITY);
    let (a_lo, a_hi) = config.action_limits(p);
    for t in k..k + h {
        for c in 0..p {
            let idx = layout.action_index(t, c);
            lower[idx] = a_lo[c];
            upper[idx] = a_hi[c];
        }
    }
    for t in k + 1..=k + h {
        for i in 0..n {
            let idx = match config.state_bounds {
                StateBounds::Hard => layout.state_index(t, i).expect("future state"),
                StateBounds::Soft { .. } => layout.slack_index(t, i).expect("slack"),
            };
            lower[idx] = config.s_min[i];
            upper[idx] = config.s_max[i];
        }
    }
    Ok(AssembledConstraints {
        a_eq,
        b_eq,
        lower,
        upper,
        layout,
    })
}

/// Draws `H` vectors from `N(0, Σ)`.
pub fn sample_noise(model: &FracModel, horizon: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = model.state_dim();
    if model.sigma().iter().all(|&v| v == 0.0) {
        return vec![vec![0.0; n]; horizon];
    }
    let l = model.noise_factor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..horizon)
        .map(|_| {
            let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            (&l * xi).iter().copied().collect()
        })
        .collect()
}

/// States `s̄[k+1..=k+H]` produced by `actions` (chronological, `H·p`
/// entries) under the given noise realization.
pub fn rollout(
    model: &FracModel,
    history: &StateTrajectory,
    actions: &[f64],
    noise: &[Vec<f64>],
    weights: &GlWeightTable,
) -> Vec<Vec<f64>> {
    let n = model.state_dim();
    let p = model.action_dim();
    let k = history.num_states() - 1;
    let h = noise.len();
    let mut past: Vec<Vec<f64>> = (0..=k).map(|t| history.state(t).to_vec()).collect();
    for l in 0..h {
        let t = k + l + 1;
        let prev = past[t - 1].clone();
        let act = &actions[l * p..(l + 1) * p];
        let mut next = vec![0.0; n];
        for (i, out) in next.iter_mut().enumerate() {
            let mut v = model.mu()[i] + noise[l][i];
            for j in 1..=t {
                v -= weights.get(i, j) * past[t - j][i];
            }
            for c in 0..n {
                v += model.a()[(i, c)] * prev[c];
            }
            for c in 0..p {
                v += model.b()[(i, c)] * act[c];
            }
            *out = v;
        }
        past.push(next);
    }
    past.split_off(k + 1)
}

/// Discounted tracking cost of a plan, including the soft-bound penalty.
pub fn plan_cost(config: &MpcConfig, states: &[Vec<f64>], actions: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (l, (s, a)) in states.iter().zip(actions).enumerate() {
        let g = config.discount(l);
        let dev = DVector::from_fn(s.len(), |i, _| s[i] - config.reference[i]);
        let av = DVector::from_column_slice(a);
        let mut stage = dev.dot(&(&config.q * &dev)) + av.dot(&(&config.r * &av));
        if let StateBounds::Soft { weight } = config.state_bounds {
            for (i, &v) in s.iter().enumerate() {
                let d = v - v.clamp(config.s_min[i], config.s_max[i]);
                stage += weight * d * d;
            }
        }
        total += g * stage;
    }
    total
}

/// Block impulse responses `Y_d` (`n×p`, `d < H`): the effect of `a[m]` on
/// `s̄[m+d+1]` with everything else zero.
fn impulse_responses(model: &FracModel, weights: &GlWeightTable, horizon: usize) -> Vec<DMatrix<f64>> {
    let n = model.state_dim();
    let mut ys: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
    for d in 0..horizon {
        let y = if d == 0 {
            model.b().clone()
        } else {
            let mut y = model.a() * &ys[d - 1];
            for j in 1..=d {
                let prev = &ys[d - j];
                for i in 0..n {
                    let w = weights.get(i, j);
                    for c in 0..prev.ncols() {
                        y[(i, c)] -= w * prev[(i, c)];
                    }
                }
            }
            y
        };
        ys.push(y);
    }
    ys
}

fn toeplitz(ys: &[DMatrix<f64>], n: usize, p: usize) -> DMatrix<f64> {
    let h = ys.len();
    let mut g = DMatrix::zeros(h * n, h * p);
    for l in 0..h {
        for m in 0..=l {
            g.view_mut((l * n, m * p), (n, p)).copy_from(&ys[l - m]);
        }
    }
    g
}

fn block_diag(block: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let b = block.nrows();
    let mut out = DMatrix::zeros(weights.len() * b, weights.len() * b);
    for (l, &w) in weights.iter().enumerate() {
        out.view_mut((l * b, l * b), (b, b)).copy_from(&(block * w));
    }
    out
}

enum Cache {
    Condensed {
        g: DMatrix<f64>,
        solver: QpSolver,
    },
    SparseEliminated {
        solver: QpSolver,
    },
}

/// Receding-horizon controller for one model. Structures that do not depend
/// on the history are built on the first call and reused; each solve starts
/// from the shifted previous plan.
pub struct MpcController {
    model: FracModel,
    config: MpcConfig,
    weights: GlWeightTable,
    cache: Option<Cache>,
    last_plan: Option<Vec<f64>>,
}

impl MpcController {
    pub fn new(model: FracModel, config: MpcConfig) -> Result<Self, MpcError> {
        config.validate(model.state_dim(), model.action_dim())?;
        let weights = GlWeightTable::build(model.orders(), config.horizon);
        Ok(Self {
            model,
            config,
            weights,
            cache: None,
            last_plan: None,
        })
    }

    pub fn model(&self) -> &FracModel {
        &self.model
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    /// Plans from the end of `history` with model noise drawn from `seed`.
    pub fn act(&mut self, history: &StateTrajectory, seed: u64) -> Result<MpcStep, MpcError> {
        let noise = sample_noise(&self.model, self.config.horizon, seed);
        self.act_with_noise(history, &noise)
    }

    pub fn act_with_noise(
        &mut self,
        history: &StateTrajectory,
        noise: &[Vec<f64>],
    ) -> Result<MpcStep, MpcError> {
        check_inputs(&self.model, history, &self.config, noise)?;
        let k = history.num_states() - 1;
        if self.weights.horizon() < k + self.config.horizon {
            let target = (k + self.config.horizon).max(2 * self.weights.horizon());
            self.weights = GlWeightTable::build(self.model.orders(), target);
        }
        let solved = match self.config.formulation {
            Formulation::Condensed => self.solve_condensed(history, noise)?,
            Formulation::Sparse { explicit_pinning } => {
                self.solve_sparse(history, noise, explicit_pinning)?
            }
        };
        Ok(self.finish(history, noise, solved))
    }

    fn solve_condensed(
        &mut self,
        history: &StateTrajectory,
        noise: &[Vec<f64>],
    ) -> Result<Solved, MpcError> {
        let n = self.model.state_dim();
        let p = self.model.action_dim();
        let h = self.config.horizon;
        let zero = vec![0.0; h * p];
        let free = rollout(&self.model, history, &zero, noise, &self.weights);
        let v = DVector::from_iterator(h * n, free.iter().flatten().copied());
        let r = DVector::from_iterator(h * n, (0..h).flat_map(|_| self.config.reference.iter().copied()));
        let disc: Vec<f64> = (0..h).map(|l| self.config.discount(l)).collect();
        let q_bar = block_diag(&self.config.q, &disc);
        if self.cache.is_none() {
            let ys = impulse_responses(&self.model, &self.weights, h);
            let g = toeplitz(&ys, n, p);
            let problem = self.condensed_problem(&g, &v, &r, &q_bar, &disc)?;
            let solver = QpSolver::new(problem, self.config.qp.clone())?;
            self.cache = Some(Cache::Condensed { g, solver });
        }
        let Some(Cache::Condensed { g, solver }) = self.cache.as_mut() else {
            unreachable!("condensed cache")
        };
        let m = h * p;
        let gt = g.transpose();
        let mut q = DVector::zeros(solver.problem().num_vars());
        match self.config.state_bounds {
            StateBounds::Soft { weight } => {
                let omega: Vec<f64> = disc.iter().map(|d| d * weight).collect();
                let omega_v = DVector::from_fn(h * n, |idx, _| omega[idx / n] * v[idx]);
                let qa = &gt * (&q_bar * (&v - &r) + &omega_v) * 2.0;
                q.rows_mut(0, m).copy_from(&qa);
                q.rows_mut(m, h * n).copy_from(&(-omega_v * 2.0));
                solver.update_q(q)?;
            }
            StateBounds::Hard => {
                q.rows_mut(m, h * n).copy_from(&(&q_bar * &r * -2.0));
                solver.update_q(q)?;
                solver.update_b_eq(v.clone())?;
            }
        }
        if let Some(plan) = &self.last_plan {
            let mut x0 = DVector::zeros(solver.problem().num_vars());
            let shifted = shift(plan, p, h);
            x0.rows_mut(0, m).copy_from_slice(&shifted);
            let s0 = g.clone() * DVector::from_column_slice(&shifted) + &v;
            for idx in 0..h * n {
                let i = idx % n;
                x0[m + idx] = match self.config.state_bounds {
                    StateBounds::Soft { .. } => s0[idx].clamp(self.config.s_min[i], self.config.s_max[i]),
                    StateBounds::Hard => s0[idx],
                };
            }
            solver.warm_start(&x0, None, None);
        }
        let sol = solver.solve();
        Ok(Solved {
            actions: sol.x.rows(0, m).iter().copied().collect(),
            status: sol.status,
            iterations: sol.iterations,
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
            polished: sol.polished,
        })
    }

    /// Decision vector `[a; w]` (soft) or `[a; s̄]` with `s̄ − G a = v`
    /// (hard), all blocks in chronological order.
    fn condensed_problem(
        &self,
        g: &DMatrix<f64>,
        v: &DVector<f64>,
        r: &DVector<f64>,
        q_bar: &DMatrix<f64>,
        disc: &[f64],
    ) -> Result<QpProblem, MpcError> {
        let n = self.model.state_dim();
        let p = self.model.action_dim();
        let h = self.config.horizon;
        let m = h * p;
        let nv = m + h * n;
        let r_bar = block_diag(&self.config.r, disc);
        let (a_lo, a_hi) = self.config.action_limits(p);
        let mut lower = DVector::from_element(nv, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(nv, f64::INFINITY);
        for idx in 0..m {
            lower[idx] = a_lo[idx % p];
            upper[idx] = a_hi[idx % p];
        }
        for idx in 0..h * n {
            lower[m + idx] = self.config.s_min[idx % n];
            upper[m + idx] = self.config.s_max[idx % n];
        }
        let mut pm = DMatrix::zeros(nv, nv);
        let gt = g.transpose();
        match self.config.state_bounds {
            StateBounds::Soft { weight } => {
                let omega: Vec<f64> = disc.iter().map(|d| d * weight).collect();
                let om = block_diag(&DMatrix::identity(n, n), &omega);
                let aa = &gt * (q_bar + &om) * g + &r_bar;
                let aw = -(&gt * &om);
                pm.view_mut((0, 0), (m, m)).copy_from(&(aa * 2.0));
                pm.view_mut((0, m), (m, h * n)).copy_from(&(&aw * 2.0));
                pm.view_mut((m, 0), (h * n, m)).copy_from(&(aw.transpose() * 2.0));
                pm.view_mut((m, m), (h * n, h * n)).copy_from(&(om * 2.0));
                let p_sym = (&pm + pm.transpose()) * 0.5;
                let omega_v = DVector::from_fn(h * n, |idx, _| omega[idx / n] * v[idx]);
                let mut q = DVector::zeros(nv);
                q.rows_mut(0, m).copy_from(&(&gt * (q_bar * (v - r) + &omega_v) * 2.0));
                q.rows_mut(m, h * n).copy_from(&(-omega_v * 2.0));
                Ok(QpProblem::boxed(p_sym, q, lower, upper)?)
            }
            StateBounds::Hard => {
                pm.view_mut((0, 0), (m, m)).copy_from(&(&r_bar * 2.0));
                pm.view_mut((m, m), (h * n, h * n)).copy_from(&(q_bar * 2.0));
                let mut q = DVector::zeros(nv);
                q.rows_mut(m, h * n).copy_from(&(q_bar * r * -2.0));
                let mut a_eq = DMatrix::zeros(h * n, nv);
                a_eq.view_mut((0, 0), (h * n, m)).copy_from(&(-g));
                a_eq.view_mut((0, m), (h * n, h * n)).fill_with_identity();
                Ok(QpProblem::new(pm, q, a_eq, v.clone(), lower, upper)?)
            }
        }
    }

    fn solve_sparse(
        &mut self,
        history: &StateTrajectory,
        noise: &[Vec<f64>],
        explicit_pinning: bool,
    ) -> Result<Solved, MpcError> {
        let cons = assemble_constraints(&self.model, history, &self.config, noise, explicit_pinning)?;
        let layout = cons.layout;
        // with eliminated history only b_eq depends on k
        if !explicit_pinning {
            if let Some(Cache::SparseEliminated { solver }) = self.cache.as_mut() {
                solver.update_b_eq(cons.b_eq)?;
                let sol = solver.solve();
                return Ok(Solved::from_sparse(&layout, &sol.x, &sol));
            }
        }
        let (pm, q) = sparse_cost(&self.config, &layout);
        let problem = QpProblem::new(pm, q, cons.a_eq, cons.b_eq, cons.lower, cons.upper)?;
        let mut solver = QpSolver::new(problem, self.config.qp.clone())?;
        let sol = solver.solve();
        if !explicit_pinning {
            self.cache = Some(Cache::SparseEliminated { solver });
        }
        Ok(Solved::from_sparse(&layout, &sol.x, &sol))
    }

    fn finish(&mut self, history: &StateTrajectory, noise: &[Vec<f64>], solved: Solved) -> MpcStep {
        let p = self.model.action_dim();
        let h = self.config.horizon;
        let failed = solved.status == QpStatus::Infeasible || solved.actions.iter().any(|v| !v.is_finite());
        let actions: Vec<f64> = if failed {
            let (lo, hi) = self.config.action_limits(p);
            (0..h * p).map(|idx| 0.0f64.clamp(lo[idx % p], hi[idx % p])).collect()
        } else {
            let (lo, hi) = self.config.action_limits(p);
            solved
                .actions
                .iter()
                .enumerate()
                .map(|(idx, &v)| v.clamp(lo[idx % p], hi[idx % p]))
                .collect()
        };
        self.last_plan = if failed { None } else { Some(actions.clone()) };
        let planned_states = rollout(&self.model, history, &actions, noise, &self.weights);
        let planned_actions: Vec<Vec<f64>> = actions.chunks(p.max(1)).map(|c| c.to_vec()).collect();
        let planned_actions = if p == 0 { vec![Vec::new(); h] } else { planned_actions };
        let objective = plan_cost(&self.config, &planned_states, &planned_actions);
        MpcStep {
            action: planned_actions[0].clone(),
            planned_states,
            planned_actions,
            objective,
            stats: MpcStats {
                status: solved.status,
                iterations: solved.iterations,
                primal_residual: solved.primal_residual,
                dual_residual: solved.dual_residual,
                polished: solved.polished,
                fallback: failed,
            },
        }
    }
}

struct Solved {
    actions: Vec<f64>,
    status: QpStatus,
    iterations: usize,
    primal_residual: f64,
    dual_residual: f64,
    polished: bool,
}

impl Solved {
    fn from_sparse(layout: &VariableLayout, x: &DVector<f64>, sol: &crate::qp::QpSolution) -> Self {
        let mut actions = Vec::with_capacity(layout.horizon * layout.p);
        for t in layout.k..layout.k + layout.horizon {
            for c in 0..layout.p {
                actions.push(x[layout.action_index(t, c)]);
            }
        }
        Self {
            actions,
            status: sol.status,
            iterations: sol.iterations,
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
            polished: sol.polished,
        }
    }
}

fn shift(plan: &[f64], p: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * p);
    out.extend_from_slice(&plan[p.min(plan.len())..]);
    let tail = &plan[plan.len().saturating_sub(p)..];
    out.extend_from_slice(tail);
    out.truncate(h * p);
    out
}

/// Hessian and linear term of the sparse formulation (`½xᵀPx + qᵀx` equals
/// the plan cost up to a constant).
pub fn sparse_cost(config: &MpcConfig, layout: &VariableLayout) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p, h, k) = (layout.n, layout.p, layout.horizon, layout.k);
    let nv = layout.num_vars();
    let mut pm = DMatrix::zeros(nv, nv);
    let mut q = DVector::zeros(nv);
    let qr = &config.q * DVector::from_column_slice(&config.reference);
    for l in 0..h {
        let g = config.discount(l);
        let t = k + l + 1;
        for i in 0..n {
            let si = layout.state_index(t, i).expect("future state");
            for c in 0..n {
                let sc = layout.state_index(t, c).expect("future state");
                pm[(si, sc)] += 2.0 * g * config.q[(i, c)];
            }
            q[si] -= 2.0 * g * qr[i];
            if let StateBounds::Soft { weight } = config.state_bounds {
                let wi = layout.slack_index(t, i).expect("slack");
                pm[(si, si)] += 2.0 * g * weight;
                pm[(wi, wi)] += 2.0 * g * weight;
                pm[(si, wi)] -= 2.0 * g * weight;
                pm[(wi, si)] -= 2.0 * g * weight;
            }
        }
        for c in 0..p {
            let ac = layout.action_index(t - 1, c);
            for d in 0..p {
                pm[(ac, layout.action_index(t - 1, d))] += 2.0 * g * config.r[(c, d)];
            }
        }
    }
    (pm, q)
}

/// One receding-horizon decision; a pure function of its arguments.
pub fn mpc_action(
    model: &FracModel,
    history: &StateTrajectory,
    config: &MpcConfig,
    seed: u64,
) -> Result<MpcStep, MpcError> {
    MpcController::new(model.clone(), config.clone())?.act(history, seed)
}
