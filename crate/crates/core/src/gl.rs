//! Grünwald–Letnikov fractional differencing.
//!
//! The discrete fractional difference of order `α` is
//!
//! ```text
//! Δ^α x[k] = Σ_{j=0..k} ψ(α, j) · x[k − j],   ψ(α, j) = Γ(j − α) / (Γ(−α) Γ(j + 1))
//! ```
//!
//! Weights are always produced by the multiplicative recurrence
//! `ψ(α, 0) = 1`, `ψ(α, j) = ψ(α, j − 1) · (j − 1 − α) / j`, which stays finite
//! where `Γ(−α)` has poles (α = 0, 1).

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::model::FracModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GlError {
    #[error("fractional order {value} for dimension {index} is outside [0, 1]")]
    OrderOutOfRange { index: usize, value: f64 },
    #[error("time index {index} out of range for series of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dimension mismatch: expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("trajectory must contain at least one state")]
    EmptyTrajectory,
}

/// ψ(α, j) by the stable recurrence.
pub fn psi_weight(alpha: f64, j: usize) -> f64 {
    let mut w = 1.0;
    for i in 1..=j {
        w *= (i as f64 - 1.0 - alpha) / i as f64;
    }
    w
}

/// Fills `out` with ψ(α, 0..out.len()).
pub fn psi_weights_into(alpha: f64, out: &mut [f64]) {
    let mut w = 1.0;
    for (j, slot) in out.iter_mut().enumerate() {
        if j > 0 {
            w *= (j as f64 - 1.0 - alpha) / j as f64;
        }
        *slot = w;
    }
}

/// Per-dimension fractional orders, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalOrders(Vec<f64>);

impl FractionalOrders {
    pub fn new(alphas: Vec<f64>) -> Result<Self, GlError> {
        for (index, &value) in alphas.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(GlError::OrderOutOfRange { index, value });
            }
        }
        Ok(Self(alphas))
    }

    /// Same order on every dimension.
    pub fn uniform(n: usize, alpha: f64) -> Result<Self, GlError> {
        Self::new(vec![alpha; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Table of ψ(α_i, j) for every dimension `i` and lag `j = 0..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlWeightTable {
    dims: usize,
    horizon: usize,
    // row-major, dims × (horizon + 1)
    weights: Vec<f64>,
}

impl GlWeightTable {
    pub fn build(orders: &FractionalOrders, horizon: usize) -> Self {
        let dims = orders.len();
        let cols = horizon + 1;
        let mut weights = vec![0.0; dims * cols];
        for (i, &alpha) in orders.as_slice().iter().enumerate() {
            psi_weights_into(alpha, &mut weights[i * cols..(i + 1) * cols]);
        }
        Self {
            dims,
            horizon,
            weights,
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.horizon + 1;
        &self.weights[i * cols..(i + 1) * cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i)[j]
    }

    /// Diagonal of `D(α, j) = diag(ψ(α_1, j), …, ψ(α_n, j))`.
    pub fn diag(&self, j: usize) -> Vec<f64> {
        (0..self.dims).map(|i| self.get(i, j)).collect()
    }
}

/// `Σ_{j=0..k} ψ(α, j) · series[k − j]`.
pub fn frac_difference(series: &[f64], alpha: f64, k: usize) -> Result<f64, GlError> {
    frac_difference_truncated(series, alpha, k, None)
}

/// Fractional difference with the lag sum capped at `memory` lags (weights
/// beyond the cap are dropped without renormalisation).
pub fn frac_difference_truncated(
    series: &[f64],
    alpha: f64,
    k: usize,
    memory: Option<usize>,
) -> Result<f64, GlError> {
    if k >= series.len() {
        return Err(GlError::IndexOutOfRange {
            index: k,
            len: series.len(),
        });
    }
    let max_lag = memory.map_or(k, |m| m.min(k));
    let mut w = 1.0;
    let mut acc = series[k];
    for j in 1..=max_lag {
        w *= (j as f64 - 1.0 - alpha) / j as f64;
        acc += w * series[k - j];
    }
    Ok(acc)
}

/// Time-ordered states and the actions applied between them.
///
/// A trajectory with `K + 1` states carries exactly `K` actions: action `k`
/// moves the system from state `k` to state `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    n: usize,
    p: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    sampling_period: f64,
}

impl StateTrajectory {
    pub fn new(initial_state: &[f64], p: usize, sampling_period: f64) -> Result<Self, GlError> {
        if initial_state.is_empty() {
            return Err(GlError::EmptyTrajectory);
        }
        if initial_state.iter().any(|v| !v.is_finite()) {
            return Err(GlError::NonFinite("initial state"));
        }
        Ok(Self {
            n: initial_state.len(),
            p,
            states: initial_state.to_vec(),
            actions: Vec::new(),
            sampling_period,
        })
    }

    /// Builds a trajectory from flat row-major buffers.
    pub fn from_parts(
        n: usize,
        p: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        sampling_period: f64,
    ) -> Result<Self, GlError> {
        if n == 0 || states.is_empty() {
            return Err(GlError::EmptyTrajectory);
        }
        if states.len() % n != 0 {
            return Err(GlError::DimensionMismatch {
                what: "state buffer multiple",
                expected: n,
                got: states.len(),
            });
        }
        let k = states.len() / n - 1;
        if actions.len() != k * p {
            return Err(GlError::DimensionMismatch {
                what: "action entries",
                expected: k * p,
                got: actions.len(),
            });
        }
        if states.iter().chain(actions.iter()).any(|v| !v.is_finite()) {
            return Err(GlError::NonFinite("trajectory"));
        }
        Ok(Self {
            n,
            p,
            states,
            actions,
            sampling_period,
        })
    }

    pub fn push(&mut self, action: &[f64], next_state: &[f64]) -> Result<(), GlError> {
        if action.len() != self.p {
            return Err(GlError::DimensionMismatch {
                what: "action entries",
                expected: self.p,
                got: action.len(),
            });
        }
        if next_state.len() != self.n {
            return Err(GlError::DimensionMismatch {
                what: "state entries",
                expected: self.n,
                got: next_state.len(),
            });
        }
        if action.iter().chain(next_state).any(|v| !v.is_finite()) {
            return Err(GlError::NonFinite("transition"));
        }
        self.actions.extend_from_slice(action);
        self.states.extend_from_slice(next_state);
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn action_dim(&self) -> usize {
        self.p
    }

    pub fn sampling_period(&self) -> f64 {
        self.sampling_period
    }

    pub fn num_states(&self) -> usize {
        self.states.len() / self.n
    }

    pub fn num_transitions(&self) -> usize {
        self.num_states() - 1
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn action(&self, k: usize) -> &[f64] {
        &self.actions[k * self.p..(k + 1) * self.p]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.num_states() - 1)
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }

    pub fn actions_flat(&self) -> &[f64] {
        &self.actions
    }

    /// The `i`-th state component over time.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().skip(i).step_by(self.n).copied().collect()
    }

    /// Prefix containing states `0..=k`.
    pub fn prefix(&self, k: usize) -> Self {
        let k = k.min(self.num_transitions());
        Self {
            n: self.n,
            p: self.p,
            states: self.states[..(k + 1) * self.n].to_vec(),
            actions: self.actions[..k * self.p].to_vec(),
            sampling_period: self.sampling_period,
        }
    }
}

/// Conditional mean of `s[k + 1]` given states `s[0..=k]` and action `a[k]`.
///
/// Moving every lagged term of `Δ^α s[k+1]` to the right-hand side of
/// `Δ^α s[k+1] = A s[k] + B a[k] + μ` gives, per dimension `i`,
/// `−Σ_{j=1..k+1} ψ(α_i, j) s_i[k+1−j] + a_iᵀ s[k] + b_iᵀ a[k] + μ_i`.
pub fn predict_mean(
    model: &FracModel,
    history: &StateTrajectory,
    action: &[f64],
    k: usize,
) -> Result<Vec<f64>, GlError> {
    predict_mean_truncated(model, history, action, k, None)
}

pub fn predict_mean_truncated(
    model: &FracModel,
    history: &StateTrajectory,
    action: &[f64],
    k: usize,
    memory: Option<usize>,
) -> Result<Vec<f64>, GlError> {
    let n = model.state_dim();
    let p = model.action_dim();
    if history.state_dim() != n {
        return Err(GlError::DimensionMismatch {
            what: "state entries",
            expected: n,
            got: history.state_dim(),
        });
    }
    if action.len() != p {
        return Err(GlError::DimensionMismatch {
            what: "action entries",
            expected: p,
            got: action.len(),
        });
    }
    if k >= history.num_states() {
        return Err(GlError::IndexOutOfRange {
            index: k,
            len: history.num_states(),
        });
    }
    let max_lag = memory.map_or(k + 1, |m| m.min(k + 1));
    let current = history.state(k);
    let mut mean = vec![0.0; n];
    for (i, out) in mean.iter_mut().enumerate() {
        let alpha = model.orders().as_slice()[i];
        let mut w = 1.0;
        let mut lags = 0.0;
        for j in 1..=max_lag {
            w *= (j as f64 - 1.0 - alpha) / j as f64;
            lags += w * history.state(k + 1 - j)[i];
        }
        let mut v = -lags + model.mu()[i];
        for c in 0..n {
            v += model.a()[(i, c)] * current[c];
        }
        for c in 0..p {
            v += model.b()[(i, c)] * action[c];
        }
        *out = v;
    }
    Ok(mean)
}
