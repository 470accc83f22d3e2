//! Model-based reinforcement learning: refit the fractional model on all data
//! collected so far, run one episode with the MPC policy, repeat.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::gl::StateTrajectory;
use crate::glucose::{time_in_range, RiskParams, TimeInRange, BG_FLOOR};
use crate::model::FracModel;
use crate::mpc::{MpcConfig, MpcController, MpcError};
use crate::qp::QpStatus;
use crate::seed::{derive_seed, stream_rng, ENV, EVAL, MODEL_NOISE, SEED_DATA};
use crate::sysid::{estimate_model, EpisodeDataset, Provenance, SysIdError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("action rejected by the environment")]
    Action,
    #[error("environment state became non-finite")]
    NonFinite,
}

/// What the learning loop needs from a system it controls.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn sampling_period(&self) -> f64;
    /// Returns to the initial condition; `seed` drives any randomness of the
    /// coming episode.
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError>;
    fn step(&mut self, action: &[f64]) -> Result<Vec<f64>, EnvError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    pub iter_max: usize,
    /// Episode length in steps.
    pub episode_len: usize,
    pub mpc: MpcConfig,
    pub seed: u64,
    /// Iterations between checkpoints handed to the observer (0 disables).
    pub snapshot_every: usize,
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RunErrorKind> {
        if self.iter_max == 0 {
            return Err(RunErrorKind::Config("iter_max must be at least 1"));
        }
        if self.episode_len == 0 {
            return Err(RunErrorKind::Config("episode_len must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRecord {
    pub iteration: usize,
    pub model_checksum: u64,
    /// Discounted sum of risk transition costs over the episode.
    pub episode_return: f64,
    pub tir: TimeInRange,
    /// Steps where the QP failed and the zero action was used.
    pub qp_failures: usize,
    /// Steps where the QP hit its iteration limit.
    pub qp_inaccurate: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunErrorKind {
    #[error("invalid run configuration: {0}")]
    Config(&'static str),
    #[error("model fit failed: {0}")]
    Fit(#[from] SysIdError),
    #[error("controller failed: {0}")]
    Mpc(#[from] MpcError),
    #[error("environment failed: {0}")]
    Env(#[from] EnvError),
    #[error("observer failed: {0}")]
    Observer(String),
}

/// Failure of [`run`] with the log of the iterations that completed.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("run aborted after {} iterations: {kind}", log.records.len())]
pub struct RunError {
    pub log: RunLog,
    pub kind: RunErrorKind,
}

/// Hooks called by [`run`] after every iteration.
pub trait RunObserver {
    fn iteration_done(
        &mut self,
        _record: &RunRecord,
        _model: &FracModel,
        _data: &EpisodeDataset,
    ) -> Result<(), String> {
        Ok(())
    }

    /// Called on iterations that are multiples of the snapshot cadence and
    /// on the last one.
    fn snapshot(&mut self, _iteration: usize, _model: &FracModel, _data: &EpisodeDataset) -> Result<(), String> {
        Ok(())
    }
}

impl RunObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub model: FracModel,
    pub log: RunLog,
    /// Seed data followed by every on-policy episode.
    pub data: EpisodeDataset,
}

/// Risk-based metrics of one trajectory, evaluated on state dimension 0
/// over the states reached after each action.
pub fn episode_metrics(traj: &StateTrajectory, gamma: f64) -> (f64, TimeInRange) {
    let risk = RiskParams::default();
    let bg: Vec<f64> = (0..traj.num_states()).map(|k| traj.state(k)[0]).collect();
    let r = |b: f64| risk.risk(b.max(BG_FLOOR)).unwrap_or(f64::NAN);
    let mut ret = 0.0;
    let mut discount = 1.0;
    for k in 0..bg.len().saturating_sub(1) {
        ret += discount * (r(bg[k + 1]) - r(bg[k]));
        discount *= gamma;
    }
    let outcomes = if bg.len() > 1 { &bg[1..] } else { &bg[..] };
    (ret, time_in_range(outcomes).unwrap_or_default())
}

struct EpisodeStats {
    trajectory: StateTrajectory,
    failures: usize,
    inaccurate: usize,
}

fn run_episode<E: Environment>(
    env: &mut E,
    len: usize,
    reset_seed: u64,
    mut policy: impl FnMut(&StateTrajectory, usize) -> Result<(Vec<f64>, Option<QpStatus>, bool), RunErrorKind>,
) -> Result<EpisodeStats, RunErrorKind> {
    let obs = env.reset(reset_seed)?;
    let mut traj = StateTrajectory::new(&obs, env.action_dim(), env.sampling_period())
        .map_err(|_| RunErrorKind::Env(EnvError::NonFinite))?;
    let mut failures = 0;
    let mut inaccurate = 0;
    for k in 0..len {
        let (action, status, fallback) = policy(&traj, k)?;
        if fallback {
            failures += 1;
        }
        if status == Some(QpStatus::MaxIterations) && !fallback {
            inaccurate += 1;
        }
        let next = env.step(&action)?;
        traj.push(&action, &next)
            .map_err(|_| RunErrorKind::Env(EnvError::NonFinite))?;
    }
    Ok(EpisodeStats {
        trajectory: traj,
        failures,
        inaccurate,
    })
}

fn mpc_episode<E: Environment>(
    env: &mut E,
    model: &FracModel,
    mpc: &MpcConfig,
    len: usize,
    reset_seed: u64,
    noise_seed: impl Fn(usize) -> u64,
) -> Result<EpisodeStats, RunErrorKind> {
    let mut controller = MpcController::new(model.clone(), mpc.clone())?;
    run_episode(env, len, reset_seed, |traj, k| {
        let step = controller.act(traj, noise_seed(k))?;
        Ok((step.action, Some(step.stats.status), step.stats.fallback))
    })
}

/// Alternates model fitting on all data with one on-policy MPC episode per
/// iteration.
pub fn run<E: Environment, O: RunObserver>(
    env: &mut E,
    seed_data: &EpisodeDataset,
    config: &RlConfig,
    observer: &mut O,
) -> Result<RunOutcome, RunError> {
    let mut log = RunLog::default();
    let fail = |log: &RunLog, kind: RunErrorKind| RunError {
        log: log.clone(),
        kind,
    };
    config.validate().map_err(|k| fail(&log, k))?;
    if seed_data.is_empty() {
        return Err(fail(&log, RunErrorKind::Fit(SysIdError::EmptyDataset)));
    }
    let mut data = seed_data.clone();
    let mut model = estimate_model(&data).map_err(|e| fail(&log, e.into()))?;
    for m in 1..=config.iter_max {
        if m > 1 {
            model = estimate_model(&data).map_err(|e| fail(&log, e.into()))?;
        }
        let t_len = config.episode_len as u64;
        let base = (m as u64 - 1) * t_len;
        let ep = mpc_episode(
            env,
            &model,
            &config.mpc,
            config.episode_len,
            derive_seed(config.seed, ENV, m as u64),
            |k| derive_seed(config.seed, MODEL_NOISE, base + k as u64),
        )
        .map_err(|k| fail(&log, k))?;
        let (episode_return, tir) = episode_metrics(&ep.trajectory, config.mpc.gamma);
        data.push(ep.trajectory, Provenance::OnPolicy)
            .map_err(|e| fail(&log, e.into()))?;
        let record = RunRecord {
            iteration: m,
            model_checksum: model.checksum(),
            episode_return,
            tir,
            qp_failures: ep.failures,
            qp_inaccurate: ep.inaccurate,
        };
        log.records.push(record);
        observer
            .iteration_done(&record, &model, &data)
            .map_err(|e| fail(&log, RunErrorKind::Observer(e)))?;
        let due = config.snapshot_every > 0 && m % config.snapshot_every == 0;
        if due || m == config.iter_max {
            observer
                .snapshot(m, &model, &data)
                .map_err(|e| fail(&log, RunErrorKind::Observer(e)))?;
        }
    }
    Ok(RunOutcome { model, log, data })
}

/// Episodes with actions drawn uniformly from `[lower, upper]`.
pub fn generate_seed_data<E: Environment>(
    env: &mut E,
    episodes: usize,
    len: usize,
    lower: &[f64],
    upper: &[f64],
    master_seed: u64,
) -> Result<EpisodeDataset, RunErrorKind> {
    let mut data = EpisodeDataset::new();
    for e in 0..episodes {
        let mut rng = stream_rng(master_seed, SEED_DATA, e as u64);
        let reset_seed = derive_seed(master_seed, ENV, 1_000_000 + e as u64);
        let ep = run_episode(env, len, reset_seed, |_, _| {
            Ok((uniform_action(&mut rng, lower, upper), None, false))
        })?;
        data.push(ep.trajectory, Provenance::Seed)?;
    }
    Ok(data)
}

fn uniform_action<R: Rng>(rng: &mut R, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    lower
        .iter()
        .zip(upper)
        .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub tir_mean: TimeInRange,
    pub tir_std: TimeInRange,
    pub return_mean: f64,
    pub return_std: f64,
    pub qp_failures: usize,
}

fn summarize(samples: &[(f64, TimeInRange)], failures: usize) -> EvalMetrics {
    let n = samples.len() as f64;
    let mean = |f: &dyn Fn(&(f64, TimeInRange)) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let std = |f: &dyn Fn(&(f64, TimeInRange)) -> f64, m: f64| {
        if samples.len() < 2 {
            0.0
        } else {
            libm::sqrt(samples.iter().map(|s| (f(s) - m) * (f(s) - m)).sum::<f64>() / (n - 1.0))
        }
    };
    let rm = mean(&|s| s.0);
    let bm = mean(&|s| s.1.below);
    let wm = mean(&|s| s.1.within);
    let am = mean(&|s| s.1.above);
    EvalMetrics {
        episodes: samples.len(),
        tir_mean: TimeInRange {
            below: bm,
            within: wm,
            above: am,
        },
        tir_std: TimeInRange {
            below: std(&|s| s.1.below, bm),
            within: std(&|s| s.1.within, wm),
            above: std(&|s| s.1.above, am),
        },
        return_mean: rm,
        return_std: std(&|s| s.0, rm),
        qp_failures: failures,
    }
}

/// Rolls out the frozen model's MPC policy for `episodes` episodes.
pub fn evaluate_policy<E: Environment>(
    env: &mut E,
    model: &FracModel,
    config: &RlConfig,
    episodes: usize,
) -> Result<EvalMetrics, RunErrorKind> {
    if episodes == 0 {
        return Err(RunErrorKind::Config("episodes must be at least 1"));
    }
    let mut samples = Vec::with_capacity(episodes);
    let mut failures = 0;
    for e in 0..episodes {
        let base = (e * config.episode_len) as u64;
        let ep = mpc_episode(
            env,
            model,
            &config.mpc,
            config.episode_len,
            derive_seed(config.seed, EVAL, e as u64),
            |k| derive_seed(config.seed, EVAL, 1_000_000 + base + k as u64),
        )?;
        failures += ep.failures;
        samples.push(episode_metrics(&ep.trajectory, config.mpc.gamma));
    }
    Ok(summarize(&samples, failures))
}

/// Metrics of the policy that draws every action uniformly from
/// `[lower, upper]`.
pub fn evaluate_random<E: Environment>(
    env: &mut E,
    lower: &[f64],
    upper: &[f64],
    episodes: usize,
    len: usize,
    gamma: f64,
    master_seed: u64,
) -> Result<EvalMetrics, RunErrorKind> {
    if episodes == 0 {
        return Err(RunErrorKind::Config("episodes must be at least 1"));
    }
    let mut samples = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut rng = stream_rng(master_seed, EVAL, 2_000_000 + e as u64);
        let ep = run_episode(env, len, derive_seed(master_seed, EVAL, e as u64), |_, _| {
            Ok((uniform_action(&mut rng, lower, upper), None, false))
        })?;
        samples.push(episode_metrics(&ep.trajectory, gamma));
    }
    Ok(summarize(&samples, 0))
}
