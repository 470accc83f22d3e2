//! Exact analysis of small history-dependent processes: policy values by
//! enumeration of the history tree, optimal and receding-horizon policies,
//! and empirical checks of the simulation bound and the MPC value-gap bound.
//!
//! A history at time `t` is the state sequence `s_0 … s_t`; `s_0` is fixed,
//! so histories of length `t` are indexed by `s_1 … s_t` read as a base-|S|
//! number. Values use absolute discounting, `V = E Σ_k γ^k c(s_k, a_k)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::seed::stream_rng;

pub const DEFAULT_NODE_CAP: usize = 1_000_000;
pub const THEORY_STREAM: &str = "theory";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("history tree has {nodes} nodes, above the cap of {cap}")]
    CapExceeded { nodes: usize, cap: usize },
    #[error("invalid process: {0}")]
    Invalid(&'static str),
}

/// History-dependent process with finite states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteHdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_state: usize,
    /// `transitions[t]` is laid out as `[history][action][next state]`.
    transitions: Vec<Vec<f64>>,
    cost: Vec<f64>,
    c_min: f64,
    c_max: f64,
}

fn pow_usize(base: usize, exp: usize) -> Option<usize> {
    let mut v: usize = 1;
    for _ in 0..exp {
        v = v.checked_mul(base)?;
    }
    Some(v)
}

/// Number of `(history, action)` nodes of a process.
pub fn tree_size(num_states: usize, num_actions: usize, horizon: usize) -> Option<usize> {
    let mut total: usize = 0;
    for t in 0..horizon {
        total = total.checked_add(pow_usize(num_states, t)?.checked_mul(num_actions)?)?;
    }
    Some(total)
}

impl FiniteHdp {
    /// `transition(t, history, action)` must return a distribution over the
    /// next state; `history` holds `s_0 … s_t`.
    pub fn from_fn(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_state: usize,
        cost: Vec<f64>,
        c_range: (f64, f64),
        cap: usize,
        mut transition: impl FnMut(usize, &[usize], usize) -> Vec<f64>,
    ) -> Result<Self, TheoryError> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(TheoryError::Invalid("states, actions and horizon must be positive"));
        }
        if initial_state >= num_states {
            return Err(TheoryError::Invalid("initial state out of range"));
        }
        let nodes = tree_size(num_states, num_actions, horizon).unwrap_or(usize::MAX);
        if nodes > cap {
            return Err(TheoryError::CapExceeded { nodes, cap });
        }
        let mut transitions = Vec::with_capacity(horizon);
        let mut path = vec![initial_state];
        for t in 0..horizon {
            let hists = pow_usize(num_states, t).expect("checked by cap");
            let mut table = Vec::with_capacity(hists * num_actions * num_states);
            for h in 0..hists {
                decode_history(initial_state, num_states, t, h, &mut path);
                for a in 0..num_actions {
                    let dist = transition(t, &path, a);
                    if dist.len() != num_states {
                        return Err(TheoryError::Invalid("distribution has the wrong length"));
                    }
                    table.extend_from_slice(&dist);
                }
            }
            transitions.push(table);
        }
        Self::new(
            num_states,
            num_actions,
            horizon,
            initial_state,
            transitions,
            cost,
            c_range,
        )
    }

    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_state: usize,
        transitions: Vec<Vec<f64>>,
        cost: Vec<f64>,
        (c_min, c_max): (f64, f64),
    ) -> Result<Self, TheoryError> {
        if transitions.len() != horizon {
            return Err(TheoryError::Invalid("one transition table per time step required"));
        }
        for (t, table) in transitions.iter().enumerate() {
            let hists = pow_usize(num_states, t).ok_or(TheoryError::Invalid("too many histories"))?;
            if table.len() != hists * num_actions * num_states {
                return Err(TheoryError::Invalid("transition table has the wrong size"));
            }
            for dist in table.chunks(num_states) {
                if dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    return Err(TheoryError::Invalid("probabilities must be finite and non-negative"));
                }
                if (dist.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(TheoryError::Invalid("distribution does not sum to 1"));
                }
            }
        }
        if cost.len() != num_states * num_actions {
            return Err(TheoryError::Invalid("cost table must have |S|·|A| entries"));
        }
        if !(c_min <= c_max) || cost.iter().any(|&c| !(c >= c_min && c <= c_max)) {
            return Err(TheoryError::Invalid("costs outside the declared range"));
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            initial_state,
            transitions,
            cost,
            c_min,
            c_max,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn cost_range(&self) -> (f64, f64) {
        (self.c_min, self.c_max)
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.num_actions + a]
    }

    pub fn costs(&self) -> &[f64] {
        &self.cost
    }

    pub fn num_histories(&self, t: usize) -> usize {
        pow_usize(self.num_states, t).expect("bounded by construction")
    }

    /// Next-state distribution after `action` at history `hist` of length `t`.
    pub fn distribution(&self, t: usize, hist: usize, action: usize) -> &[f64] {
        let s = self.num_states;
        let start = (hist * self.num_actions + action) * s;
        &self.transitions[t][start..start + s]
    }

    pub fn terminal_state(&self, t: usize, hist: usize) -> usize {
        if t == 0 {
            self.initial_state
        } else {
            hist % self.num_states
        }
    }

    fn child(&self, hist: usize, next: usize) -> usize {
        hist * self.num_states + next
    }

    /// Same process with a different cost table.
    pub fn with_costs(&self, cost: Vec<f64>, c_range: (f64, f64)) -> Result<Self, TheoryError> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.horizon,
            self.initial_state,
            self.transitions.clone(),
            cost,
            c_range,
        )
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.num_states == other.num_states
            && self.num_actions == other.num_actions
            && self.horizon == other.horizon
            && self.initial_state == other.initial_state
    }
}

fn decode_history(s0: usize, num_states: usize, t: usize, mut h: usize, out: &mut Vec<usize>) {
    out.clear();
    out.resize(t + 1, 0);
    out[0] = s0;
    for i in (1..=t).rev() {
        out[i] = h % num_states;
        h /= num_states;
    }
}

/// Deterministic history-dependent policy: `actions[t][history]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryPolicy {
    pub actions: Vec<Vec<usize>>,
}

impl HistoryPolicy {
    pub fn constant(hdp: &FiniteHdp, action: usize) -> Self {
        Self {
            actions: (0..hdp.horizon).map(|t| vec![action; hdp.num_histories(t)]).collect(),
        }
    }

    fn validate(&self, hdp: &FiniteHdp) -> Result<(), TheoryError> {
        if self.actions.len() != hdp.horizon {
            return Err(TheoryError::Invalid("policy horizon differs from the process"));
        }
        for (t, row) in self.actions.iter().enumerate() {
            if row.len() != hdp.num_histories(t) || row.iter().any(|&a| a >= hdp.num_actions) {
                return Err(TheoryError::Invalid("policy table has the wrong shape"));
            }
        }
        Ok(())
    }
}

fn discount(gamma: f64, k: usize) -> f64 {
    libm::pow(gamma, k as f64)
}

/// `Σ_{k<m} γ^k`, equal to `m` at γ = 1.
pub fn geometric_sum(gamma: f64, m: usize) -> f64 {
    if gamma == 1.0 {
        m as f64
    } else {
        (1.0 - discount(gamma, m)) / (1.0 - gamma)
    }
}

/// Expected discounted cost of `policy` from `(t, hist)` until `until`
/// (exclusive), with absolute discounting and costs from `cost`.
fn window_policy_value(
    hdp: &FiniteHdp,
    cost: &FiniteHdp,
    policy: &HistoryPolicy,
    gamma: f64,
    t: usize,
    hist: usize,
    until: usize,
) -> f64 {
    if t >= until {
        return 0.0;
    }
    let s = hdp.terminal_state(t, hist);
    let a = policy.actions[t][hist];
    let mut v = discount(gamma, t) * cost.cost(s, a);
    for (next, &p) in hdp.distribution(t, hist, a).iter().enumerate() {
        if p > 0.0 {
            v += p * window_policy_value(hdp, cost, policy, gamma, t + 1, hdp.child(hist, next), until);
        }
    }
    v
}

/// Value of `policy` from the initial state, by full enumeration.
pub fn exact_value(hdp: &FiniteHdp, policy: &HistoryPolicy, gamma: f64) -> Result<f64, TheoryError> {
    policy.validate(hdp)?;
    Ok(window_policy_value(hdp, hdp, policy, gamma, 0, 0, hdp.horizon))
}

/// Minimum expected discounted cost from `(t, hist)` until `until` and the
/// minimizing first action (smallest index on ties).
fn window_optimum(
    hdp: &FiniteHdp,
    cost: &FiniteHdp,
    gamma: f64,
    t: usize,
    hist: usize,
    until: usize,
) -> (f64, usize) {
    if t >= until {
        return (0.0, 0);
    }
    let s = hdp.terminal_state(t, hist);
    let mut best = (f64::INFINITY, 0);
    for a in 0..hdp.num_actions {
        let mut v = discount(gamma, t) * cost.cost(s, a);
        for (next, &p) in hdp.distribution(t, hist, a).iter().enumerate() {
            if p > 0.0 {
                v += p * window_optimum(hdp, cost, gamma, t + 1, hdp.child(hist, next), until).0;
            }
        }
        if v < best.0 {
            best = (v, a);
        }
    }
    best
}

/// Optimal value and an optimal policy by backward induction over the
/// history tree.
pub fn optimal_value(hdp: &FiniteHdp, gamma: f64) -> Result<(f64, HistoryPolicy), TheoryError> {
    let t_len = hdp.horizon;
    let mut values: Vec<f64> = vec![0.0; hdp.num_histories(t_len)];
    let mut actions = vec![Vec::new(); t_len];
    for t in (0..t_len).rev() {
        let hists = hdp.num_histories(t);
        let mut vt = vec![0.0; hists];
        let mut at = vec![0; hists];
        for h in 0..hists {
            let s = hdp.terminal_state(t, h);
            let mut best = (f64::INFINITY, 0);
            for a in 0..hdp.num_actions {
                let mut v = discount(gamma, t) * hdp.cost(s, a);
                for (next, &p) in hdp.distribution(t, h, a).iter().enumerate() {
                    v += p * values[hdp.child(h, next)];
                }
                if v < best.0 {
                    best = (v, a);
                }
            }
            vt[h] = best.0;
            at[h] = best.1;
        }
        values = vt;
        actions[t] = at;
    }
    Ok((values[0], HistoryPolicy { actions }))
}

/// Receding-horizon policy: at every history, the first action of an
/// optimal `H`-step plan under `approx` with costs `approx_cost`, the
/// window being cut at the process horizon.
pub fn mpc_policy(
    approx: &FiniteHdp,
    approx_cost: &[f64],
    horizon: usize,
    gamma: f64,
) -> Result<HistoryPolicy, TheoryError> {
    if horizon == 0 {
        return Err(TheoryError::Invalid("MPC horizon must be at least 1"));
    }
    let cost = approx.with_costs(approx_cost.to_vec(), cost_range(approx_cost))?;
    let t_len = approx.horizon;
    let mut actions = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let until = (t + horizon).min(t_len);
        actions.push(
            (0..approx.num_histories(t))
                .map(|h| window_optimum(approx, &cost, gamma, t, h, until).1)
                .collect(),
        );
    }
    Ok(HistoryPolicy { actions })
}

fn cost_range(cost: &[f64]) -> (f64, f64) {
    let lo = cost.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cost.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// True-model value of the receding-horizon policy built on `approx`.
pub fn mpc_policy_value(
    hdp: &FiniteHdp,
    approx: &FiniteHdp,
    approx_cost: &[f64],
    horizon: usize,
    gamma: f64,
) -> Result<f64, TheoryError> {
    if !hdp.same_shape(approx) {
        return Err(TheoryError::Invalid("approximate process has a different shape"));
    }
    let policy = mpc_policy(approx, approx_cost, horizon, gamma)?;
    exact_value(hdp, &policy, gamma)
}

/// Constants entering the value-gap bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    /// Growth exponent of the model gap with history length.
    pub q: f64,
    /// Model gap constant: L1 gap at history length `t` is at most `C·max(t,1)^q`.
    pub c: f64,
    /// Largest absolute cost error.
    pub epsilon: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub t_len: usize,
    pub c_min: f64,
    pub c_max: f64,
}

/// Bound on `|V(MPC) − V*|`:
/// `2·G_H·((c_max−c_min)/2)·H·C·T^q + 2ε·G_H·G_T` with `G_m = Σ_{k<m} γ^k`.
pub fn value_gap_bound(b: &BoundParams) -> f64 {
    let gh = geometric_sum(b.gamma, b.horizon);
    let gt = geometric_sum(b.gamma, b.t_len);
    let tq = libm::pow(b.t_len as f64, b.q);
    2.0 * gh * ((b.c_max - b.c_min) / 2.0) * b.horizon as f64 * b.c * tq + 2.0 * b.epsilon * gh * gt
}

/// Measured model-gap envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct GapEnvelope {
    /// Largest L1 gap over histories of length `t` and actions, `t < T`.
    pub gaps: Vec<f64>,
    pub q: f64,
    pub c: f64,
}

impl GapEnvelope {
    pub fn bound_at(&self, t: usize) -> f64 {
        self.c * libm::pow(t.max(1) as f64, self.q)
    }
}

/// Per-length L1 gaps, the log-log slope `q` (clamped at 0) and the
/// smallest `C` with `gap_t ≤ C·max(t,1)^q` for every `t`.
pub fn measure_envelope(hdp: &FiniteHdp, approx: &FiniteHdp) -> Result<GapEnvelope, TheoryError> {
    if !hdp.same_shape(approx) {
        return Err(TheoryError::Invalid("approximate process has a different shape"));
    }
    let mut gaps = Vec::with_capacity(hdp.horizon);
    for t in 0..hdp.horizon {
        let mut worst: f64 = 0.0;
        for h in 0..hdp.num_histories(t) {
            for a in 0..hdp.num_actions {
                let l1: f64 = hdp
                    .distribution(t, h, a)
                    .iter()
                    .zip(approx.distribution(t, h, a))
                    .map(|(p, q)| (p - q).abs())
                    .sum();
                worst = worst.max(l1);
            }
        }
        gaps.push(worst);
    }
    let pts: Vec<(f64, f64)> = gaps
        .iter()
        .enumerate()
        .filter(|(_, &g)| g > 0.0)
        .map(|(t, &g)| (libm::log(t.max(1) as f64), libm::log(g)))
        .collect();
    let q = slope(&pts).max(0.0);
    let c = gaps
        .iter()
        .enumerate()
        .map(|(t, &g)| g / libm::pow(t.max(1) as f64, q))
        .fold(0.0, f64::max);
    Ok(GapEnvelope { gaps, q, c })
}

fn slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return 0.0;
    }
    pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx
}

/// `max |ĉ − c|`.
pub fn cost_gap(hdp: &FiniteHdp, approx_cost: &[f64]) -> f64 {
    hdp.cost
        .iter()
        .zip(approx_cost)
        .map(|(c, d)| (c - d).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Compares `H`-step discounted costs of `policy` under the approximate and
/// the true process, maximized over histories of length `t`, against
/// `γ^t·H·((c_max−c_min)/2)·G_H·C·(t+H)^q + ε·γ^t·G_H`.
pub fn simulation_bound_check(
    hdp: &FiniteHdp,
    approx: &FiniteHdp,
    approx_cost: &[f64],
    policy: &HistoryPolicy,
    t: usize,
    horizon: usize,
    gamma: f64,
) -> Result<SimulationCheck, TheoryError> {
    policy.validate(hdp)?;
    if t >= hdp.horizon {
        return Err(TheoryError::Invalid("history length must be below the process horizon"));
    }
    let env = measure_envelope(hdp, approx)?;
    let eps = cost_gap(hdp, approx_cost);
    let cost = approx.with_costs(approx_cost.to_vec(), cost_range(approx_cost))?;
    let until = (t + horizon).min(hdp.horizon);
    let mut lhs: f64 = 0.0;
    for h in 0..hdp.num_histories(t) {
        let v_hat = window_policy_value(approx, &cost, policy, gamma, t, h, until);
        let v = window_policy_value(hdp, hdp, policy, gamma, t, h, until);
        lhs = lhs.max((v_hat - v).abs());
    }
    let (c_min, c_max) = hdp.cost_range();
    let gt = discount(gamma, t);
    let gh = geometric_sum(gamma, horizon);
    let rhs = gt * horizon as f64 * ((c_max - c_min) / 2.0) * gh * env.c * libm::pow((t + horizon) as f64, env.q)
        + eps * gt * gh;
    Ok(SimulationCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + BOUND_SLACK,
    })
}

/// Absolute slack for round-off in bound comparisons.
pub const BOUND_SLACK: f64 = 1e-12;

/// A true process, a perturbed model of it, perturbed costs and MPC
/// settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub hdp: FiniteHdp,
    pub approx: FiniteHdp,
    pub approx_cost: Vec<f64>,
    pub horizon: usize,
    pub gamma: f64,
}

/// Largest sizes drawn by [`random_instance_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceLimits {
    pub max_states: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        Self {
            max_states: 4,
            max_actions: 2,
            max_horizon: 4,
        }
    }
}

impl InstanceLimits {
    /// Rejects limits whose largest history tree exceeds `cap` nodes.
    pub fn validate(&self, cap: usize) -> Result<(), TheoryError> {
        if self.max_states < 2 || self.max_actions == 0 || self.max_horizon == 0 {
            return Err(TheoryError::Invalid("need at least 2 states, 1 action and horizon 1"));
        }
        let nodes = tree_size(self.max_states, self.max_actions, self.max_horizon).unwrap_or(usize::MAX);
        if nodes > cap {
            return Err(TheoryError::CapExceeded { nodes, cap });
        }
        Ok(())
    }
}

/// Random instance with `|S| ≤ 4`, `|A| ≤ 2`, `T ≤ 4`. The true process
/// mixes a Markov kernel with history-specific noise; the model mixes the
/// truth with another random kernel.
pub fn random_instance(seed: u64) -> Instance {
    random_instance_with(seed, &InstanceLimits::default())
}

pub fn random_instance_with(seed: u64, limits: &InstanceLimits) -> Instance {
    let mut rng = stream_rng(seed, THEORY_STREAM, 0);
    let s = rng.random_range(2..=limits.max_states);
    let a_n = rng.random_range(1..=limits.max_actions);
    let t_len = rng.random_range(1..=limits.max_horizon);
    let horizon = rng.random_range(1..=t_len);
    let gamma = if rng.random_bool(0.2) { 1.0 } else { rng.random_range(0.0..1.0) };
    let memory: f64 = rng.random_range(0.0..=1.0);
    let delta: f64 = rng.random_range(0.0..=0.5);
    let eps_max: f64 = rng.random_range(0.0..=0.2);
    let cost: Vec<f64> = (0..s * a_n).map(|_| rng.random_range(0.0..=1.0)).collect();
    let markov: Vec<Vec<f64>> = (0..s * a_n).map(|_| random_dist(&mut rng, s)).collect();
    let hdp = FiniteHdp::from_fn(s, a_n, t_len, 0, cost.clone(), (0.0, 1.0), DEFAULT_NODE_CAP, |_, h, a| {
        let base = &markov[h[h.len() - 1] * a_n + a];
        let noise = random_dist(&mut rng, s);
        mix(base, &noise, memory)
    })
    .expect("generated process is valid");
    let approx = FiniteHdp::from_fn(s, a_n, t_len, 0, cost.clone(), (0.0, 1.0), DEFAULT_NODE_CAP, |t, h, a| {
        let idx = encode(h, s);
        let truth = hdp.distribution(t, idx, a).to_vec();
        let other = random_dist(&mut rng, s);
        mix(&truth, &other, delta)
    })
    .expect("generated model is valid");
    let approx_cost = cost
        .iter()
        .map(|&c| c + rng.random_range(-1.0..=1.0) * eps_max)
        .collect();
    Instance {
        hdp,
        approx,
        approx_cost,
        horizon,
        gamma,
    }
}

fn encode(path: &[usize], s: usize) -> usize {
    path[1..].iter().fold(0, |acc, &x| acc * s + x)
}

fn random_dist<R: Rng>(rng: &mut R, s: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..s).map(|_| rng.random_range(1e-3..1.0)).collect();
    normalized(raw)
}

fn mix(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    normalized(a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect())
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= total;
    }
    // push the rounding residue into the largest entry
    let residue = 1.0 - v.iter().sum::<f64>();
    if let Some(i) = (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])) {
        v[i] += residue;
    }
    v
}

/// Outcome of both bound checks on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceReport {
    pub seed: u64,
    pub optimal: f64,
    pub mpc: f64,
    /// `|V(MPC) − V*|`.
    pub lhs: f64,
    /// Value-gap bound with the measured constants.
    pub rhs: f64,
    pub params: BoundParams,
    /// Smallest `rhs − lhs` of the simulation check over all `t` and both
    /// the MPC and the optimal policy.
    pub simulation_margin: f64,
    pub simulation_holds: bool,
}

impl InstanceReport {
    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }

    pub fn gap_bound_holds(&self) -> bool {
        self.lhs <= self.rhs + BOUND_SLACK
    }
}

pub fn check_instance(seed: u64, inst: &Instance) -> Result<InstanceReport, TheoryError> {
    let (optimal, opt_policy) = optimal_value(&inst.hdp, inst.gamma)?;
    let policy = mpc_policy(&inst.approx, &inst.approx_cost, inst.horizon, inst.gamma)?;
    let mpc = exact_value(&inst.hdp, &policy, inst.gamma)?;
    let env = measure_envelope(&inst.hdp, &inst.approx)?;
    let (c_min, c_max) = inst.hdp.cost_range();
    let params = BoundParams {
        q: env.q,
        c: env.c,
        epsilon: cost_gap(&inst.hdp, &inst.approx_cost),
        gamma: inst.gamma,
        horizon: inst.horizon,
        t_len: inst.hdp.horizon(),
        c_min,
        c_max,
    };
    let mut simulation_margin = f64::INFINITY;
    for pol in [&policy, &opt_policy] {
        for t in 0..inst.hdp.horizon() {
            let chk = simulation_bound_check(&inst.hdp, &inst.approx, &inst.approx_cost, pol, t, inst.horizon, inst.gamma)?;
            simulation_margin = simulation_margin.min(chk.rhs - chk.lhs);
        }
    }
    Ok(InstanceReport {
        seed,
        optimal,
        mpc,
        lhs: (mpc - optimal).abs(),
        rhs: value_gap_bound(&params),
        params,
        simulation_margin,
        simulation_holds: simulation_margin >= -BOUND_SLACK,
    })
}

/// Seed of instance `i` of a suite.
pub fn instance_seed(master: u64, i: u64) -> u64 {
    crate::seed::derive_seed(master, THEORY_STREAM, i)
}

pub fn run_suite(master: u64, count: usize) -> Result<Vec<InstanceReport>, TheoryError> {
    run_suite_with(master, count, &InstanceLimits::default())
}

pub fn run_suite_with(master: u64, count: usize, limits: &InstanceLimits) -> Result<Vec<InstanceReport>, TheoryError> {
    limits.validate(DEFAULT_NODE_CAP)?;
    (0..count as u64)
        .map(|i| {
            let seed = instance_seed(master, i);
            check_instance(seed, &random_instance_with(seed, limits))
        })
        .collect()
}
