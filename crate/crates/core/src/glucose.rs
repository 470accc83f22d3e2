//! Blood-glucose environments: the risk index, the meal protocol, two plants
//! and time-in-range metrics.
//!
//! Plant A is a fractional linear system driven by [`FracModel`] with meals
//! added to the state as impulses. Plant B is a Bergman-type minimal model
//! (glucose, remote insulin action, plasma insulin) with a two-compartment
//! gut, integrated by RK4 on 1 s substeps.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::gl::{predict_mean, StateTrajectory};
use crate::mbrl::{EnvError, Environment};
use crate::model::FracModel;

/// Lowest BG value the plants report, in mg/dL.
pub const BG_FLOOR: f64 = 1.0;
pub const SAMPLING_PERIOD_S: f64 = 300.0;
pub const HYPO_LIMIT: f64 = 70.0;
pub const HYPER_LIMIT: f64 = 180.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GlucoseError {
    #[error("blood glucose must be positive, got {0}")]
    NonPositive(f64),
    #[error("meal schedule invalid: {0}")]
    Schedule(&'static str),
    #[error("insulin dose must be non-negative and finite, got {0}")]
    Insulin(f64),
    #[error("plant state became non-finite")]
    NonFinite,
    #[error("invalid plant parameters: {0}")]
    Params(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskParams {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub scale: f64,
}

impl Default for RiskParams {
    fn default() -> Self {
        Self {
            c1: 1.509,
            c2: 1.084,
            c3: 5.381,
            scale: 10.0,
        }
    }
}

impl RiskParams {
    /// Glucose level at which the risk vanishes: `exp(c3^(1/c2))`.
    pub fn minimizer(&self) -> f64 {
        libm::exp(libm::pow(self.c3, 1.0 / self.c2))
    }

    /// `scale · (c1 · (ln(b)^c2 − c3))²`, with `b` raised to [`BG_FLOOR`].
    pub fn risk(&self, b: f64) -> Result<f64, GlucoseError> {
        if !(b > 0.0) || !b.is_finite() {
            return Err(GlucoseError::NonPositive(b));
        }
        let b = b.max(BG_FLOOR);
        let f = self.c1 * (libm::pow(libm::log(b), self.c2) - self.c3);
        Ok(self.scale * f * f)
    }
}

pub fn risk(b: f64) -> Result<f64, GlucoseError> {
    RiskParams::default().risk(b)
}

/// Cost of moving from `s_now` to `s_next`: `R(s_next) − R(s_now)`.
pub fn transition_cost(s_now: f64, s_next: f64) -> Result<f64, GlucoseError> {
    Ok(risk(s_next)? - risk(s_now)?)
}

/// Percent of samples below 70, within [70, 180] and above 180 mg/dL.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimeInRange {
    pub below: f64,
    pub within: f64,
    pub above: f64,
}

pub fn time_in_range(bg: &[f64]) -> Option<TimeInRange> {
    if bg.is_empty() {
        return None;
    }
    let mut below = 0usize;
    let mut above = 0usize;
    for &b in bg {
        if b < HYPO_LIMIT {
            below += 1;
        } else if b > HYPER_LIMIT {
            above += 1;
        }
    }
    let total = bg.len() as f64;
    let below = 100.0 * below as f64 / total;
    let above = 100.0 * above as f64 / total;
    Some(TimeInRange {
        below,
        within: 100.0 - below - above,
        above,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Meal {
    /// Seconds after the start of the episode.
    pub at_s: f64,
    pub grams: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MealSchedule {
    meals: Vec<Meal>,
    start_of_day_s: f64,
    duration_s: f64,
    period_s: f64,
}

impl MealSchedule {
    pub fn new(
        meals: Vec<Meal>,
        start_of_day_s: f64,
        duration_s: f64,
        period_s: f64,
    ) -> Result<Self, GlucoseError> {
        if !(period_s > 0.0) || !(duration_s >= period_s) {
            return Err(GlucoseError::Schedule("period must be positive and fit the episode"));
        }
        for (i, m) in meals.iter().enumerate() {
            if !(m.grams >= 0.0) || !m.grams.is_finite() {
                return Err(GlucoseError::Schedule("meal size must be non-negative"));
            }
            if !(m.at_s >= 0.0 && m.at_s < duration_s) {
                return Err(GlucoseError::Schedule("meal outside the episode window"));
            }
            if i > 0 && m.at_s <= meals[i - 1].at_s {
                return Err(GlucoseError::Schedule("meal times must be strictly increasing"));
            }
        }
        Ok(Self {
            meals,
            start_of_day_s,
            duration_s,
            period_s,
        })
    }

    /// Builds a schedule from `(day, minute of day, grams)` entries, day 0
    /// being the day the episode starts.
    pub fn from_clock(
        start_minute: u32,
        duration_s: f64,
        period_s: f64,
        entries: &[(u32, u32, f64)],
    ) -> Result<Self, GlucoseError> {
        let start = f64::from(start_minute) * 60.0;
        let meals = entries
            .iter()
            .map(|&(day, minute, grams)| Meal {
                at_s: f64::from(day) * 86_400.0 + f64::from(minute) * 60.0 - start,
                grams,
            })
            .collect();
        Self::new(meals, start, duration_s, period_s)
    }

    /// Two days from 06:00, 36 h at 5-minute sampling.
    pub fn protocol() -> Self {
        Self::from_clock(
            6 * 60,
            36.0 * 3600.0,
            SAMPLING_PERIOD_S,
            &[
                (0, 9 * 60, 50.0),
                (0, 13 * 60, 70.0),
                (0, 17 * 60 + 30, 90.0),
                (0, 20 * 60, 25.0),
                (1, 9 * 60, 50.0),
                (1, 13 * 60, 70.0),
            ],
        )
        .expect("protocol schedule is valid")
    }

    pub fn meals(&self) -> &[Meal] {
        &self.meals
    }

    pub fn start_of_day_s(&self) -> f64 {
        self.start_of_day_s
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn period_s(&self) -> f64 {
        self.period_s
    }

    /// Number of sampling periods in the episode.
    pub fn steps(&self) -> usize {
        libm::floor(self.duration_s / self.period_s) as usize
    }

    /// Grams eaten during step `k`, i.e. in `[k·period, (k+1)·period)`.
    pub fn grams_in_step(&self, k: usize) -> f64 {
        let from = k as f64 * self.period_s;
        let to = from + self.period_s;
        self.meals
            .iter()
            .filter(|m| m.at_s >= from && m.at_s < to)
            .map(|m| m.grams)
            .sum()
    }
}

/// Fractional linear plant. The observation is the full state.
#[derive(Debug, Clone)]
pub struct PlantA {
    model: FracModel,
    initial: Vec<f64>,
    /// State increment per gram of carbohydrate.
    meal_gain: Vec<f64>,
    noise_factor: nalgebra::DMatrix<f64>,
    history: StateTrajectory,
    rng: ChaCha8Rng,
}

impl PlantA {
    pub fn new(model: FracModel, initial: Vec<f64>, meal_gain: Vec<f64>) -> Result<Self, GlucoseError> {
        let n = model.state_dim();
        if initial.len() != n || meal_gain.len() != n {
            return Err(GlucoseError::Params("initial state and meal gain need one entry per state"));
        }
        let history = StateTrajectory::new(&initial, model.action_dim(), SAMPLING_PERIOD_S)
            .map_err(|_| GlucoseError::Params("initial state must be finite"))?;
        Ok(Self {
            noise_factor: model.noise_factor(),
            model,
            initial,
            meal_gain,
            history,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn model(&self) -> &FracModel {
        &self.model
    }

    pub fn reset(&mut self, seed: u64) {
        self.history = StateTrajectory::new(&self.initial, self.model.action_dim(), SAMPLING_PERIOD_S)
            .expect("initial state validated");
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn state(&self) -> &[f64] {
        self.history.last_state()
    }

    pub fn history(&self) -> &StateTrajectory {
        &self.history
    }

    pub fn step(&mut self, action: &[f64], meal_g: f64) -> Result<&[f64], GlucoseError> {
        let k = self.history.num_states() - 1;
        let mut next = predict_mean(&self.model, &self.history, action, k)
            .map_err(|_| GlucoseError::Params("action dimension does not match the model"))?;
        let n = next.len();
        if self.noise_factor.iter().any(|&v| v != 0.0) {
            let xi = DVector::from_fn(n, |_, _| self.rng.sample::<f64, _>(StandardNormal));
            let e = &self.noise_factor * xi;
            for i in 0..n {
                next[i] += e[i];
            }
        }
        for i in 0..n {
            next[i] += self.meal_gain[i] * meal_g;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(GlucoseError::NonFinite);
        }
        self.history.push(action, &next).map_err(|_| GlucoseError::NonFinite)?;
        Ok(self.history.last_state())
    }
}

/// Minimal-model parameters. Glucose in mg/dL, insulin in µU/mL, time in
/// minutes, doses in units per sampling period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantBParams {
    /// Basal glucose (mg/dL).
    pub gb: f64,
    /// Glucose effectiveness (1/min).
    pub p1: f64,
    /// Decay of remote insulin action (1/min).
    pub p2: f64,
    /// Insulin sensitivity gain (mL/µU/min²).
    pub p3: f64,
    /// Plasma insulin clearance (1/min).
    pub n: f64,
    /// Reference plasma insulin (µU/mL).
    pub ib: f64,
    /// Insulin distribution volume (mL).
    pub vi_ml: f64,
    /// Glucose distribution volume (dL).
    pub vg_dl: f64,
    /// Carbohydrate bioavailability.
    pub ag: f64,
    /// Gut absorption time constant (min).
    pub tau_meal: f64,
    pub initial_bg: f64,
    /// Insulin infused before the episode to set the initial plasma level
    /// (U per sampling period).
    pub initial_insulin_rate: f64,
    pub cgm_noise_sd: f64,
    pub cgm_rounding: bool,
    pub substep_s: f64,
}

impl Default for PlantBParams {
    fn default() -> Self {
        Self {
            gb: 120.0,
            p1: 0.015,
            p2: 0.025,
            p3: 1.3e-5,
            n: 0.0926,
            ib: 10.0,
            vi_ml: 12_000.0,
            vg_dl: 117.0,
            ag: 0.8,
            tau_meal: 40.0,
            initial_bg: 150.0,
            initial_insulin_rate: 0.0,
            cgm_noise_sd: 0.0,
            cgm_rounding: false,
            substep_s: 1.0,
        }
    }
}

impl PlantBParams {
    pub fn validate(&self) -> Result<(), GlucoseError> {
        let positive = [
            (self.gb, "gb"),
            (self.p1, "p1"),
            (self.p2, "p2"),
            (self.p3, "p3"),
            (self.n, "n"),
            (self.vi_ml, "vi_ml"),
            (self.vg_dl, "vg_dl"),
            (self.ag, "ag"),
            (self.tau_meal, "tau_meal"),
            (self.initial_bg, "initial_bg"),
            (self.substep_s, "substep_s"),
        ];
        for (v, name) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GlucoseError::Params(name));
            }
        }
        if !(self.ib >= 0.0) || !(self.initial_insulin_rate >= 0.0) || !(self.cgm_noise_sd >= 0.0) {
            return Err(GlucoseError::Params("ib, initial_insulin_rate and cgm_noise_sd must be non-negative"));
        }
        Ok(())
    }

    /// Dose per sampling period that holds plasma insulin at `ib`.
    pub fn basal_rate(&self, period_s: f64) -> f64 {
        self.n * self.ib * self.vi_ml * 1e-6 * period_s / 60.0
    }
}

/// `[G, X, I, Q1, Q2]`: glucose (mg/dL), remote insulin action (1/min),
/// plasma insulin (µU/mL) and gut carbohydrate (mg) in two compartments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantBState(pub [f64; 5]);

#[derive(Debug, Clone)]
pub struct PlantB {
    params: PlantBParams,
    state: PlantBState,
}

impl PlantB {
    pub fn new(params: PlantBParams) -> Result<Self, GlucoseError> {
        params.validate()?;
        let state = Self::initial_state(&params);
        Ok(Self { params, state })
    }

    fn initial_state(p: &PlantBParams) -> PlantBState {
        let i0 = p.initial_insulin_rate * 1e6 / (SAMPLING_PERIOD_S / 60.0) / (p.n * p.vi_ml);
        let x0 = p.p3 * (i0 - p.ib) / p.p2;
        PlantBState([p.initial_bg, x0, i0, 0.0, 0.0])
    }

    pub fn params(&self) -> &PlantBParams {
        &self.params
    }

    pub fn state(&self) -> PlantBState {
        self.state
    }

    pub fn reset(&mut self) {
        self.state = Self::initial_state(&self.params);
    }

    pub fn bg(&self) -> f64 {
        self.state.0[0].max(BG_FLOOR)
    }

    fn derivative(&self, s: &[f64; 5], infusion: f64) -> [f64; 5] {
        let p = &self.params;
        let [g, x, i, q1, q2] = *s;
        let ra = p.ag * q2 / p.tau_meal;
        [
            -(p.p1 + x) * g + p.p1 * p.gb + ra / p.vg_dl,
            -p.p2 * x + p.p3 * (i - p.ib),
            -p.n * i + infusion / p.vi_ml,
            -q1 / p.tau_meal,
            (q1 - q2) / p.tau_meal,
        ]
    }

    /// Advances by `elapsed_s` seconds with `insulin` units spread evenly
    /// over the interval and `meal_g` grams eaten at its start.
    pub fn step(&mut self, insulin: f64, meal_g: f64, elapsed_s: f64) -> Result<f64, GlucoseError> {
        if !(insulin >= 0.0) || !insulin.is_finite() {
            return Err(GlucoseError::Insulin(insulin));
        }
        let minutes = elapsed_s / 60.0;
        let infusion = if minutes > 0.0 { insulin * 1e6 / minutes } else { 0.0 };
        self.state.0[3] += meal_g * 1000.0;
        let substeps = libm::ceil(elapsed_s / self.params.substep_s).max(1.0) as usize;
        let h = minutes / substeps as f64;
        let mut s = self.state.0;
        for _ in 0..substeps {
            s = rk4(|y| self.derivative(y, infusion), &s, h);
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(GlucoseError::NonFinite);
        }
        s[0] = s[0].max(BG_FLOOR);
        self.state = PlantBState(s);
        Ok(self.bg())
    }
}

fn rk4<F: Fn(&[f64; 5]) -> [f64; 5]>(f: F, y: &[f64; 5], h: f64) -> [f64; 5] {
    let add = |a: &[f64; 5], b: &[f64; 5], c: f64| {
        let mut out = [0.0; 5];
        for i in 0..5 {
            out[i] = a[i] + c * b[i];
        }
        out
    };
    let k1 = f(y);
    let k2 = f(&add(y, &k1, h / 2.0));
    let k3 = f(&add(y, &k2, h / 2.0));
    let k4 = f(&add(y, &k3, h));
    let mut out = [0.0; 5];
    for i in 0..5 {
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

#[derive(Debug, Clone)]
pub enum Plant {
    A(PlantA),
    B(PlantB),
}

/// One row of an exported episode trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t_s: f64,
    pub bg: f64,
    pub insulin: f64,
    pub meal_g: f64,
}

/// A plant, the meal protocol and the CGM read-out, exposed through
/// [`Environment`].
#[derive(Debug, Clone)]
pub struct GlucoseEnv {
    plant: Plant,
    meals: MealSchedule,
    cgm_noise_sd: f64,
    cgm_rounding: bool,
    rng: ChaCha8Rng,
    step_index: usize,
    trace: Vec<TraceRow>,
}

impl GlucoseEnv {
    pub fn new(plant: Plant, meals: MealSchedule) -> Self {
        let (cgm_noise_sd, cgm_rounding) = match &plant {
            Plant::B(b) => (b.params.cgm_noise_sd, b.params.cgm_rounding),
            Plant::A(_) => (0.0, false),
        };
        Self {
            plant,
            meals,
            cgm_noise_sd,
            cgm_rounding,
            rng: ChaCha8Rng::seed_from_u64(0),
            step_index: 0,
            trace: Vec::new(),
        }
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn meals(&self) -> &MealSchedule {
        &self.meals
    }

    /// Rows recorded since the last reset.
    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    fn observe(&mut self) -> Vec<f64> {
        match &self.plant {
            Plant::A(a) => a.state().to_vec(),
            Plant::B(b) => {
                let mut bg = b.bg();
                if self.cgm_noise_sd > 0.0 {
                    bg += self.cgm_noise_sd * self.rng.sample::<f64, _>(StandardNormal);
                }
                if self.cgm_rounding {
                    bg = libm::round(bg);
                }
                vec![bg.max(BG_FLOOR)]
            }
        }
    }
}

impl Environment for GlucoseEnv {
    fn state_dim(&self) -> usize {
        match &self.plant {
            Plant::A(a) => a.model.state_dim(),
            Plant::B(_) => 1,
        }
    }

    fn action_dim(&self) -> usize {
        match &self.plant {
            Plant::A(a) => a.model.action_dim(),
            Plant::B(_) => 1,
        }
    }

    fn sampling_period(&self) -> f64 {
        self.meals.period_s
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        match &mut self.plant {
            Plant::A(a) => a.reset(seed ^ 0x5eed),
            Plant::B(b) => b.reset(),
        }
        self.step_index = 0;
        self.trace.clear();
        let obs = self.observe();
        self.trace.push(TraceRow {
            t_s: 0.0,
            bg: obs[0],
            insulin: 0.0,
            meal_g: 0.0,
        });
        Ok(obs)
    }

    fn step(&mut self, action: &[f64]) -> Result<Vec<f64>, EnvError> {
        if action.len() != self.action_dim() {
            return Err(EnvError::Action);
        }
        let meal = self.meals.grams_in_step(self.step_index);
        let period = self.meals.period_s;
        match &mut self.plant {
            Plant::A(a) => {
                a.step(action, meal).map_err(|_| EnvError::NonFinite)?;
            }
            Plant::B(b) => {
                b.step(action[0], meal, period).map_err(|e| match e {
                    GlucoseError::Insulin(_) => EnvError::Action,
                    _ => EnvError::NonFinite,
                })?;
            }
        }
        self.step_index += 1;
        let obs = self.observe();
        if let Some(last) = self.trace.last_mut() {
            last.insulin = action[0];
            last.meal_g = meal;
        }
        self.trace.push(TraceRow {
            t_s: self.step_index as f64 * period,
            bg: obs[0],
            insulin: 0.0,
            meal_g: 0.0,
        });
        Ok(obs)
    }
}
