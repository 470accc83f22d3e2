#![allow(dead_code)]

use fracrl_core::gl::predict_mean;
use fracrl_core::qp::QpProblem;
use fracrl_core::{FracModel, StateTrajectory};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Autocovariance of unit-variance fractional Gaussian noise at lag `k`.
pub fn fgn_autocov(hurst: f64, k: usize) -> f64 {
    let h2 = 2.0 * hurst;
    let k = k as f64;
    0.5 * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2))
}

/// Exact fractional Gaussian noise by the Durbin–Levinson recursion on the
/// true autocovariance (Hosking's method).
pub fn fgn(hurst: f64, len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let gamma: Vec<f64> = (0..len).map(|k| fgn_autocov(hurst, k)).collect();
    let mut out = Vec::with_capacity(len);
    let mut phi: Vec<f64> = Vec::with_capacity(len);
    let mut prev: Vec<f64> = Vec::with_capacity(len);
    let mut v = gamma[0];
    out.push(v.sqrt() * r.sample::<f64, _>(StandardNormal));
    for t in 1..len {
        // φ_{t,t} from the partial autocorrelation
        let mut num = gamma[t];
        for j in 1..t {
            num -= phi[j - 1] * gamma[t - j];
        }
        let phi_tt = num / v;
        prev.clear();
        prev.extend_from_slice(&phi);
        for j in 1..t {
            phi[j - 1] = prev[j - 1] - phi_tt * prev[t - j - 1];
        }
        phi.push(phi_tt);
        v *= 1.0 - phi_tt * phi_tt;
        let mut mean = 0.0;
        for j in 1..=t {
            mean += phi[j - 1] * out[t - j];
        }
        out.push(mean + v.sqrt() * r.sample::<f64, _>(StandardNormal));
    }
    out
}

pub fn white_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| r.sample(StandardNormal)).collect()
}

pub fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    r.random_range(lo..hi)
}

/// Random model with orders drawn from `[0, 1]` and modest coefficients.
pub fn random_model(r: &mut ChaCha8Rng, n: usize, p: usize, with_noise: bool) -> FracModel {
    let alphas: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    random_model_with_orders(r, alphas, p, with_noise)
}

pub fn random_model_with_orders(
    r: &mut ChaCha8Rng,
    alphas: Vec<f64>,
    p: usize,
    with_noise: bool,
) -> FracModel {
    let n = alphas.len();
    let a: Vec<f64> = (0..n * n).map(|_| r.random_range(-0.3..0.3)).collect();
    let b: Vec<f64> = (0..n * p).map(|_| r.random_range(-1.0..1.0)).collect();
    let mu: Vec<f64> = (0..n).map(|_| r.random_range(-0.5..0.5)).collect();
    let mut sigma = vec![0.0; n * n];
    if with_noise {
        // L Lᵀ with a random lower-triangular L
        let l: Vec<f64> = (0..n * n)
            .map(|idx| if idx % n <= idx / n { r.random_range(-0.3..0.3) } else { 0.0 })
            .collect();
        for i in 0..n {
            for j in 0..n {
                sigma[i * n + j] = (0..n).map(|c| l[i * n + c] * l[j * n + c]).sum();
            }
        }
    }
    FracModel::from_flat(n, p, alphas, &a, &b, &mu, &sigma).unwrap()
}

pub fn random_history(r: &mut ChaCha8Rng, n: usize, p: usize, k: usize) -> StateTrajectory {
    let s0: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut h = StateTrajectory::new(&s0, p, 300.0).unwrap();
    for _ in 0..k {
        let a: Vec<f64> = (0..p).map(|_| r.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        h.push(&a, &s).unwrap();
    }
    h
}

/// GL weight from the gamma-function definition, evaluated through
/// log-gamma with explicit signs.
pub fn psi_lgamma(alpha: f64, j: usize) -> f64 {
    if j == 0 {
        return 1.0;
    }
    let (lg_num, s_num) = libm::lgamma_r(j as f64 - alpha);
    let (lg_den, s_den) = libm::lgamma_r(-alpha);
    let lg_fact = libm::lgamma(j as f64 + 1.0);
    (s_num * s_den) as f64 * (lg_num - lg_den - lg_fact).exp()
}

/// Strictly convex problem with `m` equalities; a strictly interior point is
/// feasible, and the unconstrained minimizer is pushed outside the box so
/// some bounds bind.
pub fn random_qp(r: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let mfac = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    let p = mfac.transpose() * &mfac / n as f64 + DMatrix::identity(n, n) * 0.1;
    let q = DVector::from_fn(n, |_, _| r.random_range(-3.0..3.0));
    let a = DMatrix::from_fn(m, n, |_, _| r.random_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| r.random_range(-0.5..0.5));
    let b = &a * &x0;
    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    for i in 0..n {
        match r.random_range(0..4) {
            0 => lower[i] = -1.0,
            1 => upper[i] = 1.0,
            2 => {
                lower[i] = -1.0;
                upper[i] = 1.0;
            }
            _ => {}
        }
    }
    QpProblem::new(p, q, a, b, lower, upper).unwrap()
}

/// KKT oracle: treat bounds the solver reports as active as equalities and
/// solve the resulting linear system directly, then confirm the active set
/// by primal feasibility and multiplier signs. Returns `None` when the
/// guessed active set fails verification.
pub fn kkt_oracle(prob: &QpProblem, guess: &DVector<f64>) -> Option<DVector<f64>> {
    let n = prob.num_vars();
    let m = prob.num_eq();
    let mut active = Vec::new();
    for i in 0..n {
        if (guess[i] - prob.lower()[i]).abs() < 1e-7 {
            active.push((i, prob.lower()[i], -1.0));
        } else if (guess[i] - prob.upper()[i]).abs() < 1e-7 {
            active.push((i, prob.upper()[i], 1.0));
        }
    }
    let dim = n + m + active.len();
    let mut k = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    k.view_mut((0, 0), (n, n)).copy_from(prob.p());
    k.view_mut((0, n), (n, m)).copy_from(&prob.a_eq().transpose());
    k.view_mut((n, 0), (m, n)).copy_from(prob.a_eq());
    rhs.rows_mut(0, n).copy_from(&(-prob.q()));
    rhs.rows_mut(n, m).copy_from(prob.b_eq());
    for (r, &(i, v, _)) in active.iter().enumerate() {
        k[(i, n + m + r)] = 1.0;
        k[(n + m + r, i)] = 1.0;
        rhs[n + m + r] = v;
    }
    let sol = k.lu().solve(&rhs)?;
    let x = sol.rows(0, n).into_owned();
    for i in 0..n {
        if x[i] < prob.lower()[i] - 1e-9 || x[i] > prob.upper()[i] + 1e-9 {
            return None;
        }
    }
    for (r, &(_, _, sign)) in active.iter().enumerate() {
        // z ≥ 0 at an upper bound, z ≤ 0 at a lower bound
        if sign * sol[n + m + r] < -1e-9 {
            return None;
        }
    }
    Some(x)
}

/// First action of a textbook unconstrained linear MPC for
/// `s[t+1] = M s[t] + B a[t] + c[t]`, built by condensing the horizon and
/// solving the normal equations.
pub fn classical_mpc_first_action(
    m: &DMatrix<f64>,
    b: &DMatrix<f64>,
    offsets: &[DVector<f64>],
    s0: &DVector<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    reference: &DVector<f64>,
    gamma: f64,
) -> DVector<f64> {
    let n = m.nrows();
    let p = b.ncols();
    let h = offsets.len();
    let mut powers = vec![DMatrix::identity(n, n)];
    for l in 1..=h {
        powers.push(m * &powers[l - 1]);
    }
    let mut gam = DMatrix::zeros(h * n, h * p);
    let mut free = DVector::zeros(h * n);
    for l in 0..h {
        let mut f = &powers[l + 1] * s0;
        for j in 0..=l {
            f += &powers[l - j] * &offsets[j];
            gam.view_mut((l * n, j * p), (n, p)).copy_from(&(&powers[l - j] * b));
        }
        free.rows_mut(l * n, n).copy_from(&f);
    }
    let mut w = DMatrix::zeros(h * n, h * n);
    let mut rr = DMatrix::zeros(h * p, h * p);
    let mut target = DVector::zeros(h * n);
    for l in 0..h {
        let g = gamma.powi(l as i32);
        w.view_mut((l * n, l * n), (n, n)).copy_from(&(q * g));
        rr.view_mut((l * p, l * p), (p, p)).copy_from(&(r * g));
        target.rows_mut(l * n, n).copy_from(reference);
    }
    let hess = gam.transpose() * &w * &gam + rr;
    let grad = gam.transpose() * &w * (free - target);
    let u = hess.lu().solve(&(-grad)).expect("strictly convex");
    u.rows(0, p).into_owned()
}

/// Rolls `model` for `steps` transitions under uniform actions in [-1, 1]
/// with i.i.d. N(0, sd²) noise on every state.
pub fn simulate(model: &FracModel, s0: &[f64], steps: usize, sd: f64, seed: u64) -> StateTrajectory {
    let mut r = rng(seed);
    let p = model.action_dim();
    let mut h = StateTrajectory::new(s0, p, 300.0).unwrap();
    for k in 0..steps {
        let a: Vec<f64> = (0..p).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut s = predict_mean(model, &h, &a, k).unwrap();
        for v in s.iter_mut() {
            *v += sd * r.sample::<f64, _>(StandardNormal);
        }
        h.push(&a, &s).unwrap();
    }
    h
}
