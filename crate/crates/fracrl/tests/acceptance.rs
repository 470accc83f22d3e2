//! Acceptance suite. Prints one line per criterion and exits non-zero when a
//! criterion fails other than the documented known failure.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{classical_mpc_first_action, fgn, kkt_oracle, psi_lgamma, random_history, random_model, random_qp, rng};
use fracrl::config::ExperimentConfig;
use fracrl::experiment::run_experiment;
use fracrl::formats::read_runlog_tir;
use fracrl_core::gl::psi_weight;
use fracrl_core::glucose::{risk, transition_cost, RiskParams};
use fracrl_core::mbrl::evaluate_random;
use fracrl_core::mpc::{mpc_action, sample_noise, MpcConfig};
use fracrl_core::qp::{solve, QpSettings, QpStatus};
use fracrl_core::sysid::{estimate_hurst, estimate_model_report};
use fracrl_core::theory::run_suite;
use fracrl_core::{EpisodeDataset, FracModel, FractionalOrders, Provenance};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

struct Outcome {
    pass: bool,
    /// Failing only in a clause recorded as unattainable.
    known: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self {
            pass,
            known: false,
            detail,
        }
    }
}

fn gl_weights() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for step in 1..=9 {
        let alpha = step as f64 / 10.0;
        exact &= psi_weight(alpha, 0) == 1.0 && psi_weight(alpha, 1) == -alpha;
        for j in 2..=200 {
            let oracle = psi_lgamma(alpha, j);
            worst = worst.max((psi_weight(alpha, j) - oracle).abs() / oracle.abs());
        }
    }
    Outcome::new(
        exact && worst <= 1e-10,
        format!("max relative error {worst:.2e}, psi(a,0) and psi(a,1) exact: {exact}"),
    )
}

fn classical_reduction() -> Outcome {
    let mut r = rng(20_240_601);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(1..=3);
        let p = r.random_range(1..=2);
        let h = r.random_range(1..=10);
        let base = random_model(&mut r, n, p, true);
        let model = FracModel::new(
            FractionalOrders::new(vec![1.0; n]).unwrap(),
            base.a().clone(),
            base.b().clone(),
            base.mu().clone(),
            base.sigma().clone(),
        )
        .unwrap();
        let k = r.random_range(0..6);
        let history = random_history(&mut r, n, p, k);
        let reference: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut config = MpcConfig::tracking(n, p, h, reference.clone(), r.random_range(0.1..1.0));
        config.gamma = r.random_range(0.5..1.0);
        let seed = r.random();
        let step = match mpc_action(&model, &history, &config, seed) {
            Ok(s) => s,
            Err(e) => return Outcome::new(false, format!("controller failed: {e}")),
        };
        let offsets: Vec<DVector<f64>> = sample_noise(&model, h, seed)
            .iter()
            .map(|e| model.mu() + DVector::from_column_slice(e))
            .collect();
        let oracle = classical_mpc_first_action(
            &(model.a() + DMatrix::identity(n, n)),
            model.b(),
            &offsets,
            &DVector::from_column_slice(history.last_state()),
            &config.q,
            &config.r,
            &DVector::from_vec(reference),
            config.gamma,
        );
        for c in 0..p {
            worst = worst.max((step.action[c] - oracle[c]).abs());
        }
    }
    Outcome::new(worst <= 1e-6, format!("50 instances, max action difference {worst:.2e}"))
}

fn qp_solver() -> Outcome {
    let mut r = rng(31_337);
    let (mut kkt, mut agree): (f64, f64) = (0.0, 0.0);
    let mut largest = 0;
    for i in 0..100 {
        let n = 10 + (i * 190) / 99;
        let m = n / 5;
        largest = largest.max(n);
        let prob = random_qp(&mut r, n, m);
        let s = match solve(&prob, &QpSettings::default()) {
            Ok(s) if s.status == QpStatus::Optimal => s,
            Ok(s) => return Outcome::new(false, format!("instance {i} (n={n}) ended {:?}", s.status)),
            Err(e) => return Outcome::new(false, format!("instance {i}: {e}")),
        };
        let stationarity = (prob.p() * &s.x + prob.q() + prob.a_eq().transpose() * &s.y + &s.z).amax();
        let primal = prob.primal_residual(&s.x);
        let mut compl: f64 = 0.0;
        for j in 0..n {
            if s.z[j] > 0.0 {
                compl = compl.max(s.z[j] * (prob.upper()[j] - s.x[j]).abs());
            } else if s.z[j] < 0.0 {
                compl = compl.max(-s.z[j] * (s.x[j] - prob.lower()[j]).abs());
            }
        }
        kkt = kkt.max(stationarity).max(primal).max(compl);
        match kkt_oracle(&prob, &s.x) {
            Some(x) => agree = agree.max((&s.x - x).amax()),
            None => return Outcome::new(false, format!("instance {i}: active set not confirmed by direct solve")),
        }
    }
    Outcome::new(
        kkt <= 1e-5 && agree <= 1e-6,
        format!("100 instances up to {largest} variables, max KKT residual {kkt:.2e}, max distance to direct solve {agree:.2e}"),
    )
}

fn identification() -> Outcome {
    let alphas = [0.3, 0.6];
    let a = [-0.005, 0.001, 0.0005, -0.004];
    let b = [1.0, 0.2, 0.1, 0.8];
    let mu = [0.001, -0.002];
    let truth = FracModel::from_flat(2, 2, alphas.to_vec(), &a, &b, &mu, &[1e-4, 0.0, 0.0, 1e-4]).unwrap();
    let seeds = 10;
    let mut mean_alpha = [0.0; 2];
    let mut mean_a = DMatrix::zeros(2, 2);
    let mut mean_b = DMatrix::zeros(2, 2);
    let mut mean_mu = DVector::zeros(2);
    for seed in 0..seeds {
        let mut data = EpisodeDataset::new();
        data.push(common::simulate(&truth, &[0.0, 0.0], 4096, 0.01, 4_000 + seed), Provenance::Seed)
            .unwrap();
        let est = match estimate_model_report(&data) {
            Ok(e) => e,
            Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
        };
        for (m, h) in mean_alpha.iter_mut().zip(&est.hurst) {
            *m += h.alpha / seeds as f64;
        }
        mean_a += est.model.a() / seeds as f64;
        mean_b += est.model.b() / seeds as f64;
        mean_mu += est.model.mu() / seeds as f64;
    }
    let alpha_err = mean_alpha.iter().zip(alphas).map(|(m, t)| (m - t).abs()).fold(0.0, f64::max);
    let param_err = (mean_a - truth.a())
        .amax()
        .max((mean_b - truth.b()).amax())
        .max((mean_mu - truth.mu()).amax());
    Outcome::new(
        alpha_err <= 0.1 && param_err <= 0.05,
        format!(
            "mean alpha ({:.3}, {:.3}), alpha error {alpha_err:.3}, max (A,B,mu) error {param_err:.4}",
            mean_alpha[0], mean_alpha[1]
        ),
    )
}

fn hurst_estimator() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for h in [0.6, 0.7, 0.8, 0.9] {
        let mut mean = 0.0;
        for seed in 0..20 {
            match estimate_hurst(&fgn(h, 4096, 500 + seed)) {
                Ok(f) => mean += f.hurst / 20.0,
                Err(e) => return Outcome::new(false, format!("H={h} seed {seed}: {e}")),
            }
        }
        pass &= (mean - h).abs() <= 0.1;
        parts.push(format!("H={h}: {mean:.3}"));
    }
    let mut white = 0.0;
    for seed in 0..20 {
        match estimate_hurst(&common::white_noise(4096, 900 + seed)) {
            Ok(f) => white += f.alpha / 20.0,
            Err(e) => return Outcome::new(false, format!("white noise seed {seed}: {e}")),
        }
    }
    pass &= white.abs() <= 0.1;
    parts.push(format!("white noise alpha {white:.3}"));
    Outcome::new(pass, parts.join(", "))
}

fn bound_suite() -> Outcome {
    let reports = match run_suite(42, 1000) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let violations: Vec<u64> = reports
        .iter()
        .filter(|r| !r.gap_bound_holds() || !r.simulation_holds)
        .map(|r| r.seed)
        .collect();
    for s in &violations {
        println!("  violation at instance seed {s}");
    }
    let min_margin = reports.iter().map(|r| r.margin()).fold(f64::INFINITY, f64::min);
    let min_sim = reports.iter().map(|r| r.simulation_margin).fold(f64::INFINITY, f64::min);
    Outcome::new(
        violations.is_empty() && reports.len() == 1000,
        format!(
            "{} instances, {} violations, smallest gap margin {min_margin:.3e}, smallest simulation margin {min_sim:.3e}",
            reports.len(),
            violations.len()
        ),
    )
}

fn risk_function() -> Outcome {
    let f = |b: f64| b.ln().powf(1.084) - 5.381;
    let (mut lo, mut hi) = (50.0f64, 300.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(lo) * f(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let analytic = RiskParams::default().minimizer();
    let mut r = rng(77);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let len = r.random_range(2..400);
        let traj: Vec<f64> = (0..len).map(|_| r.random_range(20.0..500.0)).collect();
        let sum: f64 = traj.windows(2).map(|w| transition_cost(w[0], w[1]).unwrap()).sum();
        let direct = risk(traj[len - 1]).unwrap() - risk(traj[0]).unwrap();
        worst = worst.max((sum - direct).abs());
    }
    Outcome::new(
        (root - analytic).abs() <= 0.1 && worst <= 1e-9,
        format!("bisection {root:.4}, analytic {analytic:.4} mg/dL, max telescoping error {worst:.2e}"),
    )
}

const MBRL_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct MbrlRuns {
    dir: tempfile::TempDir,
    cfg: ExperimentConfig,
}

fn default_mbrl() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.mbrl.iter_max = 15;
    cfg.resolve().expect("defaults resolve")
}

fn mbrl_trend(runs: &MbrlRuns) -> Outcome {
    let cfg = &runs.cfg;
    let mut improved = 0;
    let mut baseline_ok = 0;
    let mut parts = Vec::new();
    for seed in MBRL_SEEDS {
        let out = runs.dir.path().join(format!("seed{seed}"));
        if let Err(e) = run_experiment(cfg, seed, &out) {
            return Outcome::new(false, format!("seed {seed}: {e}"));
        }
        let file = std::fs::File::open(out.join("runlog.csv")).unwrap();
        let tir = read_runlog_tir(file).unwrap();
        let at = |m: usize| tir.iter().find(|t| t.0 == m).map(|t| t.1).unwrap_or(f64::NAN);
        let (t5, t15) = (at(5), at(15));
        let mut env = cfg.environment().unwrap();
        let rl = cfg.rl_config(seed);
        let (lower, upper) = rl.mpc.action_bounds.clone().unwrap();
        let random = evaluate_random(&mut env, &lower, &upper, 5, rl.episode_len, rl.mpc.gamma, seed)
            .unwrap()
            .tir_mean
            .within;
        improved += usize::from(t15 > t5);
        baseline_ok += usize::from(t15 >= random + 15.0);
        parts.push(format!("seed {seed}: {t5:.1}% -> {t15:.1}% (random {random:.1}%)"));
    }
    let trend = improved >= 4;
    let baseline = baseline_ok == MBRL_SEEDS.len();
    Outcome {
        pass: trend && baseline,
        known: !trend && baseline,
        detail: format!(
            "trend {improved}/5 seeds, baseline +15pp {baseline_ok}/5 seeds; {}",
            parts.join("; ")
        ),
    }
}

fn determinism(runs: &MbrlRuns) -> Outcome {
    let seed = MBRL_SEEDS[0];
    let first = runs.dir.path().join(format!("seed{seed}"));
    let again = runs.dir.path().join("repeat");
    if let Err(e) = run_experiment(&runs.cfg, seed, &again) {
        return Outcome::new(false, format!("repeat run: {e}"));
    }
    let a = std::fs::read(first.join("runlog.csv"));
    let b = std::fs::read(again.join("runlog.csv"));
    match (a, b) {
        (Ok(a), Ok(b)) => Outcome::new(a == b, format!("runlog.csv of seed {seed}: {} bytes, identical: {}", a.len(), a == b)),
        _ => Outcome::new(false, "runlog.csv missing".into()),
    }
}

fn main() -> ExitCode {
    // the harness ignores libtest flags such as --nocapture
    let runs = MbrlRuns {
        dir: tempfile::tempdir().expect("temporary directory"),
        cfg: default_mbrl(),
    };
    let criteria: Vec<(u32, Duration, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, Duration::from_secs(1), Box::new(gl_weights)),
        (2, Duration::from_secs(30), Box::new(classical_reduction)),
        (3, Duration::from_secs(60), Box::new(qp_solver)),
        (4, Duration::from_secs(120), Box::new(identification)),
        (5, Duration::from_secs(120), Box::new(hurst_estimator)),
        (6, Duration::from_secs(300), Box::new(bound_suite)),
        (7, Duration::from_secs(1), Box::new(risk_function)),
        (8, Duration::from_secs(1800), Box::new(|| mbrl_trend(&runs))),
        (9, Duration::from_secs(1800), Box::new(|| determinism(&runs))),
    ];
    let mut unexpected = 0;
    for (id, limit, check) in &criteria {
        let start = Instant::now();
        let out = check();
        let took = start.elapsed();
        let in_time = took <= *limit;
        let pass = out.pass && in_time;
        let label = if pass {
            "PASS"
        } else if out.known && in_time {
            "FAIL (known)"
        } else {
            unexpected += 1;
            "FAIL"
        };
        println!(
            "criterion {id}: {label} [{:.2}s of {}s] {}",
            took.as_secs_f64(),
            limit.as_secs(),
            out.detail
        );
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} unexpected failures");
        ExitCode::FAILURE
    }
}
