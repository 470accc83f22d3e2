//! Identification of θ = {α, A, B, μ, Σ} from episode data.
//!
//! The fractional orders come from a Haar wavelet-variance Hurst estimate on
//! each state component; the linear part is an ordinary least-squares fit of
//! `Δ^{α_i} s_i[k+1]` on `(s[k], a[k], 1)`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::gl::{psi_weights_into, FractionalOrders, GlError, StateTrajectory};
use crate::model::{FracModel, ModelError};

/// Shortest series accepted by the wavelet-variance routine.
pub const MIN_WAVELET_LEN: usize = 16;
/// Shortest series accepted by the Hurst estimator (three regression levels).
pub const MIN_HURST_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SysIdError {
    #[error("series too short: need at least {required} samples, got {got}")]
    TooShort { required: usize, got: usize },
    #[error("degenerate series: zero wavelet variance at level {level}")]
    Degenerate { level: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("not enough transitions for least squares: need at least {required}, have {available}")]
    NotEnoughTransitions { required: usize, available: usize },
    #[error("episode {index} has {states} states; at least 2 are required")]
    EpisodeTooShort { index: usize, states: usize },
    #[error("dimension mismatch: expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced while fitting")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Orders(#[from] GlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Seed,
    OnPolicy,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Seed => "seed",
            Provenance::OnPolicy => "on-policy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub trajectory: StateTrajectory,
    pub provenance: Provenance,
}

/// Append-only store of episodes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeDataset {
    episodes: Vec<Episode>,
}

impl EpisodeDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        trajectory: StateTrajectory,
        provenance: Provenance,
    ) -> Result<(), SysIdError> {
        if trajectory.num_states() < 2 {
            return Err(SysIdError::EpisodeTooShort {
                index: self.episodes.len(),
                states: trajectory.num_states(),
            });
        }
        if let Some(first) = self.episodes.first() {
            let (n, p) = (first.trajectory.state_dim(), first.trajectory.action_dim());
            if trajectory.state_dim() != n {
                return Err(SysIdError::DimensionMismatch {
                    what: "state entries",
                    expected: n,
                    got: trajectory.state_dim(),
                });
            }
            if trajectory.action_dim() != p {
                return Err(SysIdError::DimensionMismatch {
                    what: "action entries",
                    expected: p,
                    got: trajectory.action_dim(),
                });
            }
        }
        self.episodes.push(Episode {
            trajectory,
            provenance,
        });
        Ok(())
    }

    pub fn extend(&mut self, other: &EpisodeDataset) -> Result<(), SysIdError> {
        for ep in &other.episodes {
            self.push(ep.trajectory.clone(), ep.provenance)?;
        }
        Ok(())
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn transition_count(&self) -> usize {
        self.episodes
            .iter()
            .map(|e| e.trajectory.num_transitions())
            .sum()
    }

    pub fn transitions_with(&self, provenance: Provenance) -> usize {
        self.episodes
            .iter()
            .filter(|e| e.provenance == provenance)
            .map(|e| e.trajectory.num_transitions())
            .sum()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.episodes
            .first()
            .map(|e| (e.trajectory.state_dim(), e.trajectory.action_dim()))
    }
}

// ---------------------------------------------------------------------------
// Wavelet variance and Hurst estimation

/// Haar detail coefficients of the largest dyadic prefix, finest level first.
/// Level `j` holds `N / 2^j` coefficients; levels `1..=log2(N)` are returned.
fn haar_details(series: &[f64]) -> Vec<Vec<f64>> {
    let levels = usize::BITS - 1 - series.len().leading_zeros();
    let len = 1usize << levels;
    let mut approx = series[..len].to_vec();
    let mut out = Vec::with_capacity(levels as usize);
    let inv_sqrt2 = core::f64::consts::FRAC_1_SQRT_2;
    while approx.len() >= 2 {
        let half = approx.len() / 2;
        let mut detail = Vec::with_capacity(half);
        let mut next = Vec::with_capacity(half);
        for k in 0..half {
            let (x0, x1) = (approx[2 * k], approx[2 * k + 1]);
            detail.push((x0 - x1) * inv_sqrt2);
            next.push((x0 + x1) * inv_sqrt2);
        }
        out.push(detail);
        approx = next;
    }
    out
}

/// Number of usable detail levels for a series of this length
/// (`⌊log2 N⌋ − 2`), or zero when the series is too short.
fn usable_levels(len: usize) -> usize {
    if len < MIN_WAVELET_LEN {
        0
    } else {
        (usize::BITS - 1 - len.leading_zeros()) as usize - 2
    }
}

/// Mean squared Haar detail coefficient at levels `1..=⌊log2 N⌋ − 2`.
///
/// The second moment (not the mean-removed variance) is used: for zero-mean
/// detail coefficients the two agree, and it keeps all the energy of a
/// period-2 oscillation at level 1.
pub fn wavelet_variances(series: &[f64]) -> Result<Vec<f64>, SysIdError> {
    if series.len() < MIN_WAVELET_LEN {
        return Err(SysIdError::TooShort {
            required: MIN_WAVELET_LEN,
            got: series.len(),
        });
    }
    let levels = usable_levels(series.len());
    let details = haar_details(series);
    Ok(details[..levels]
        .iter()
        .map(|d| d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
        .collect())
}

/// Log-log regression of wavelet variance against level.
#[derive(Debug, Clone, PartialEq)]
pub struct HurstFit {
    /// Dyadic levels used in the regression.
    pub scales: Vec<usize>,
    pub log2_variances: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// `(slope + 1) / 2`.
    pub hurst: f64,
    /// `hurst − 0.5` clamped into `[0, 1]`.
    pub alpha: f64,
    pub alpha_unclamped: f64,
    pub clamped: bool,
}

/// Hurst exponent of a single series.
pub fn estimate_hurst(series: &[f64]) -> Result<HurstFit, SysIdError> {
    estimate_hurst_segments(&[series])
}

/// Hurst exponent from several independent segments (episodes). Wavelet
/// energies are pooled per level; no coefficient spans two segments.
pub fn estimate_hurst_segments(segments: &[&[f64]]) -> Result<HurstFit, SysIdError> {
    let longest = segments.iter().map(|s| s.len()).max().unwrap_or(0);
    if longest < MIN_HURST_LEN {
        return Err(SysIdError::TooShort {
            required: MIN_HURST_LEN,
            got: longest,
        });
    }
    let max_level = usable_levels(longest);
    let mut energy = vec![0.0; max_level];
    let mut count = vec![0usize; max_level];
    for seg in segments {
        let levels = usable_levels(seg.len());
        if levels == 0 {
            continue;
        }
        if seg.iter().any(|v| !v.is_finite()) {
            return Err(SysIdError::NonFinite);
        }
        for (j, d) in haar_details(seg).iter().take(levels).enumerate() {
            energy[j] += d.iter().map(|v| v * v).sum::<f64>();
            count[j] += d.len();
        }
    }
    // regression on levels 2..=max_level (finest level dropped)
    let mut scales = Vec::new();
    let mut log2_variances = Vec::new();
    for level in 2..=max_level {
        let var = energy[level - 1] / count[level - 1] as f64;
        if !(var > 0.0) {
            return Err(SysIdError::Degenerate { level });
        }
        scales.push(level);
        log2_variances.push(libm::log2(var));
    }
    let (slope, intercept) = ols_line(
        &scales.iter().map(|&s| s as f64).collect::<Vec<_>>(),
        &log2_variances,
    );
    let hurst = (slope + 1.0) / 2.0;
    let alpha_unclamped = hurst - 0.5;
    let alpha = alpha_unclamped.clamp(0.0, 1.0);
    let clamped = alpha != alpha_unclamped;
    if clamped {
        log::warn!(
            "Hurst estimate {hurst:.3} gives alpha {alpha_unclamped:.3}; clamped to {alpha:.3}"
        );
    }
    Ok(HurstFit {
        scales,
        log2_variances,
        slope,
        intercept,
        hurst,
        alpha,
        alpha_unclamped,
        clamped,
    })
}

fn ols_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

// ---------------------------------------------------------------------------
// Least squares

/// Diagnostics of a linear-parameter fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub model: FracModel,
    /// Root-mean-square residual per state dimension.
    pub residual_rms: Vec<f64>,
    pub transitions: usize,
}

/// Stacked regression problem: one row per transition.
struct Regression {
    /// rows × (n + p + 1): `[s[k]ᵀ, a[k]ᵀ, 1]`
    regressors: DMatrix<f64>,
    /// rows × n: `Δ^{α_i} s_i[k+1]`
    targets: DMatrix<f64>,
}

fn build_regression(
    data: &EpisodeDataset,
    orders: &FractionalOrders,
) -> Result<Regression, SysIdError> {
    let (n, p) = data.dims().ok_or(SysIdError::EmptyDataset)?;
    if orders.len() != n {
        return Err(SysIdError::DimensionMismatch {
            what: "fractional orders",
            expected: n,
            got: orders.len(),
        });
    }
    let rows = data.transition_count();
    let cols = n + p + 1;
    if rows < cols {
        return Err(SysIdError::NotEnoughTransitions {
            required: cols,
            available: rows,
        });
    }
    let mut regressors = DMatrix::zeros(rows, cols);
    let mut targets = DMatrix::zeros(rows, n);
    let longest = data
        .episodes()
        .iter()
        .map(|e| e.trajectory.num_states())
        .max()
        .unwrap_or(0);
    let mut weights = vec![vec![0.0; longest]; n];
    for (i, w) in weights.iter_mut().enumerate() {
        psi_weights_into(orders.as_slice()[i], w);
    }
    let mut row = 0;
    for ep in data.episodes() {
        let traj = &ep.trajectory;
        let comps: Vec<Vec<f64>> = (0..n).map(|i| traj.component(i)).collect();
        for k in 0..traj.num_transitions() {
            let s = traj.state(k);
            let a = traj.action(k);
            for c in 0..n {
                regressors[(row, c)] = s[c];
            }
            for c in 0..p {
                regressors[(row, n + c)] = a[c];
            }
            regressors[(row, n + p)] = 1.0;
            for i in 0..n {
                // Δ^α s_i[k+1], lags restricted to this episode
                let series = &comps[i];
                let w = &weights[i];
                let mut z = 0.0;
                for j in 0..=k + 1 {
                    z += w[j] * series[k + 1 - j];
                }
                targets[(row, i)] = z;
            }
            row += 1;
        }
    }
    Ok(Regression {
        regressors,
        targets,
    })
}

/// Minimum-norm least squares `argmin ‖X β − y‖` for every column of `y`,
/// computed by SVD of the column-equilibrated regressor matrix.
fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>, SysIdError> {
    let cols = x.ncols();
    let mut scaled = x.clone();
    let mut scale = vec![1.0; cols];
    for c in 0..cols {
        let norm = scaled.column(c).norm();
        if norm > 0.0 {
            scale[c] = norm;
            scaled.column_mut(c).scale_mut(1.0 / norm);
        }
    }
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-10 * (x.nrows().max(cols) as f64);
    let mut beta = svd.solve(y, eps).map_err(|_| SysIdError::NonFinite)?;
    for c in 0..cols {
        beta.row_mut(c).scale_mut(1.0 / scale[c]);
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(SysIdError::NonFinite);
    }
    Ok(beta)
}

/// Least-squares fit of `(A, B, μ)` for fixed orders; Σ is the empirical
/// covariance of the residuals.
pub fn fit_linear_params(
    data: &EpisodeDataset,
    orders: &FractionalOrders,
) -> Result<FracModel, SysIdError> {
    fit_linear_params_report(data, orders).map(|f| f.model)
}

pub fn fit_linear_params_report(
    data: &EpisodeDataset,
    orders: &FractionalOrders,
) -> Result<LinearFit, SysIdError> {
    let (n, p) = data.dims().ok_or(SysIdError::EmptyDataset)?;
    let reg = build_regression(data, orders)?;
    let beta = least_squares(&reg.regressors, &reg.targets)?;
    let residuals = &reg.targets - &reg.regressors * &beta;
    let rows = residuals.nrows();
    let sigma = (residuals.transpose() * &residuals) / rows as f64;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let residual_rms = (0..n)
        .map(|i| libm::sqrt(sigma[(i, i)]))
        .collect::<Vec<_>>();
    // beta is (n+p+1) × n; row i of A is column i of beta's first block
    let a = beta.rows(0, n).transpose();
    let b = beta.rows(n, p).transpose();
    let mu = DVector::from_iterator(n, beta.row(n + p).iter().copied());
    let model = FracModel::new(orders.clone(), a, b, mu, sigma)?;
    Ok(LinearFit {
        model,
        residual_rms,
        transitions: rows,
    })
}

/// Full identification result with per-dimension Hurst fits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEstimate {
    pub model: FracModel,
    pub hurst: Vec<HurstFit>,
    pub residual_rms: Vec<f64>,
    pub transitions: usize,
}

/// Fits α per dimension by wavelet variance, then the linear parameters.
pub fn estimate_model(data: &EpisodeDataset) -> Result<FracModel, SysIdError> {
    estimate_model_report(data).map(|e| e.model)
}

pub fn estimate_model_report(data: &EpisodeDataset) -> Result<ModelEstimate, SysIdError> {
    let (n, _) = data.dims().ok_or(SysIdError::EmptyDataset)?;
    let mut hurst = Vec::with_capacity(n);
    for i in 0..n {
        let comps: Vec<Vec<f64>> = data
            .episodes()
            .iter()
            .map(|e| e.trajectory.component(i))
            .collect();
        let segments: Vec<&[f64]> = comps.iter().map(|c| c.as_slice()).collect();
        hurst.push(estimate_hurst_segments(&segments)?);
    }
    let orders = FractionalOrders::new(hurst.iter().map(|h| h.alpha).collect())?;
    let fit = fit_linear_params_report(data, &orders)?;
    Ok(ModelEstimate {
        model: fit.model,
        hurst,
        residual_rms: fit.residual_rms,
        transitions: fit.transitions,
    })
}

/// Regressor matrix and targets, exposed for residual-orthogonality checks.
pub fn regression_system(
    data: &EpisodeDataset,
    orders: &FractionalOrders,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SysIdError> {
    build_regression(data, orders).map(|r| (r.regressors, r.targets))
}
