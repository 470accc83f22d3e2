mod common;

use common::{classical_mpc_first_action, random_history, random_model, rng};
use fracrl_core::gl::predict_mean;
use fracrl_core::mpc::{
    assemble_constraints, mpc_action, sample_noise, Formulation, MpcConfig, MpcController,
    StateBounds,
};
use fracrl_core::qp::QpStatus;
use fracrl_core::{FracModel, FractionalOrders, StateTrajectory};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

/// Open-loop simulation of `actions` through `predict_mean` plus `noise`.
fn simulate_open_loop(
    model: &FracModel,
    history: &StateTrajectory,
    actions: &[Vec<f64>],
    noise: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut h = history.clone();
    let mut out = Vec::new();
    for (a, e) in actions.iter().zip(noise) {
        let k = h.num_states() - 1;
        let mut s = predict_mean(model, &h, a, k).unwrap();
        for (v, ev) in s.iter_mut().zip(e) {
            *v += ev;
        }
        h.push(a, &s).unwrap();
        out.push(s);
    }
    out
}

fn with_orders(model: &FracModel, alphas: Vec<f64>) -> FracModel {
    FracModel::new(
        FractionalOrders::new(alphas).unwrap(),
        model.a().clone(),
        model.b().clone(),
        model.mu().clone(),
        model.sigma().clone(),
    )
    .unwrap()
}

#[test]
fn assembled_rows_reproduce_sequential_simulation() {
    let mut r = rng(1);
    for trial in 0..20 {
        let model = random_model(&mut r, 2, 2, true);
        let history = random_history(&mut r, 2, 2, 4);
        let mut config = MpcConfig::tracking(2, 2, 3, vec![0.0; 2], 1.0);
        if trial % 2 == 1 {
            config.state_bounds = StateBounds::Soft { weight: 10.0 };
        }
        let noise = sample_noise(&model, 3, trial);
        let actions: Vec<Vec<f64>> = (0..3).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let states = simulate_open_loop(&model, &history, &actions, &noise);
        for explicit in [false, true] {
            let sys = assemble_constraints(&model, &history, &config, &noise, explicit).unwrap();
            let lay = &sys.layout;
            let mut x = DVector::zeros(lay.num_vars());
            for l in 0..3 {
                for i in 0..2 {
                    x[lay.state_index(5 + l, i).unwrap()] = states[l][i];
                }
                for c in 0..2 {
                    x[lay.action_index(4 + l, c)] = actions[l][c];
                }
            }
            if explicit {
                for t in 0..=4 {
                    for i in 0..2 {
                        x[lay.state_index(t, i).unwrap()] = history.state(t)[i];
                    }
                }
            }
            let resid = (&sys.a_eq * &x - &sys.b_eq).amax();
            assert!(resid < 1e-10, "residual {resid}");
            // the state columns of the dynamics rows are unit lower
            // triangular, so the actions determine the states uniquely
            let future: Vec<usize> = (5..8).flat_map(|t| (0..2).map(move |i| (t, i))).map(|(t, i)| lay.state_index(t, i).unwrap()).collect();
            let sub = DMatrix::from_fn(6, 6, |row, col| sys.a_eq[(row, future[col])]);
            assert!(sub.determinant().abs() > 0.5);
        }
    }
}

#[test]
fn classical_case_matches_textbook_mpc() {
    let mut r = rng(2);
    for _ in 0..50 {
        let n = r.random_range(1..=3);
        let p = r.random_range(1..=2);
        let h = r.random_range(1..=10);
        let model = with_orders(&random_model(&mut r, n, p, true), vec![1.0; n]);
        let k = r.random_range(0..6);
        let history = random_history(&mut r, n, p, k);
        let reference: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut config = MpcConfig::tracking(n, p, h, reference.clone(), r.random_range(0.1..1.0));
        config.gamma = r.random_range(0.5..1.0);
        let seed = r.random();
        let step = mpc_action(&model, &history, &config, seed).unwrap();
        let noise = sample_noise(&model, h, seed);
        let offsets: Vec<DVector<f64>> = noise.iter().map(|e| model.mu() + DVector::from_column_slice(e)).collect();
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
            assert!((step.action[c] - oracle[c]).abs() < 1e-6, "{:?} vs {oracle}", step.action);
        }
    }
}

#[test]
fn grid_search_agrees_on_small_problem() {
    // scalar fractional plant, H = 2, actions boxed to [-1, 1]
    let model = FracModel::from_flat(1, 1, vec![0.6], &[-0.2], &[0.7], &[0.3], &[0.0]).unwrap();
    let mut history = StateTrajectory::new(&[2.0], 1, 300.0).unwrap();
    history.push(&[0.1], &[1.5]).unwrap();
    history.push(&[-0.2], &[1.7]).unwrap();
    let mut config = MpcConfig::tracking(1, 1, 2, vec![0.5], 0.3);
    config.gamma = 0.9;
    config.action_bounds = Some((vec![-1.0], vec![1.0]));
    let step = mpc_action(&model, &history, &config, 0).unwrap();

    let cost = |a0: f64, a1: f64| {
        let s1 = predict_mean(&model, &history, &[a0], 2).unwrap()[0];
        let mut h = history.clone();
        h.push(&[a0], &[s1]).unwrap();
        let s2 = predict_mean(&model, &h, &[a1], 3).unwrap()[0];
        (s1 - 0.5).powi(2) + 0.3 * a0 * a0 + 0.9 * ((s2 - 0.5).powi(2) + 0.3 * a1 * a1)
    };
    let search = |c0: f64, c1: f64, half: f64, step: f64| {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let count = (2.0 * half / step).round() as i64;
        for i in 0..=count {
            for j in 0..=count {
                let a0 = (c0 - half + i as f64 * step).clamp(-1.0, 1.0);
                let a1 = (c1 - half + j as f64 * step).clamp(-1.0, 1.0);
                let v = cost(a0, a1);
                if v < best.0 {
                    best = (v, a0, a1);
                }
            }
        }
        best
    };
    let coarse = search(0.0, 0.0, 1.0, 0.01);
    let fine = search(coarse.1, coarse.2, 0.02, 0.0001);
    assert!((step.action[0] - fine.1).abs() < 1e-3, "{} vs {}", step.action[0], fine.1);
    assert!((step.objective - fine.0).abs() < 1e-6);
}

#[test]
fn zero_discount_ignores_later_steps() {
    let mut r = rng(3);
    for _ in 0..10 {
        let model = random_model(&mut r, 2, 1, false);
        let history = random_history(&mut r, 2, 1, 3);
        let mut short = MpcConfig::tracking(2, 1, 1, vec![0.2, -0.1], 0.5);
        short.gamma = 0.0;
        short.action_bounds = Some((vec![-0.3], vec![0.3]));
        let a1 = mpc_action(&model, &history, &short, 0).unwrap().action;
        for h in [2, 5] {
            let mut long = short.clone();
            long.horizon = h;
            let ah = mpc_action(&model, &history, &long, 0).unwrap().action;
            assert!((a1[0] - ah[0]).abs() < 1e-6, "H={h}: {a1:?} vs {ah:?}");
        }
    }
}

#[test]
fn noiseless_models_ignore_the_seed() {
    let mut r = rng(4);
    let model = random_model(&mut r, 2, 2, false);
    let history = random_history(&mut r, 2, 2, 2);
    let config = MpcConfig::tracking(2, 2, 4, vec![0.0, 1.0], 0.2);
    let a = mpc_action(&model, &history, &config, 1).unwrap();
    let b = mpc_action(&model, &history, &config, 99).unwrap();
    assert_eq!(a.action, b.action);
}

#[test]
fn formulations_agree() {
    let mut r = rng(5);
    for _ in 0..10 {
        let model = random_model(&mut r, 2, 1, true);
        let history = random_history(&mut r, 2, 1, 5);
        let mut config = MpcConfig::tracking(2, 1, 6, vec![0.5, 0.5], 0.1);
        config.gamma = 0.95;
        config.s_min = vec![-0.2, -0.2];
        config.s_max = vec![0.6, 0.6];
        config.action_bounds = Some((vec![-1.0], vec![1.0]));
        config.state_bounds = StateBounds::Soft { weight: 50.0 };
        let mut actions = Vec::new();
        for f in [
            Formulation::Condensed,
            Formulation::Sparse { explicit_pinning: false },
            Formulation::Sparse { explicit_pinning: true },
        ] {
            config.formulation = f;
            let step = mpc_action(&model, &history, &config, 8).unwrap();
            assert_eq!(step.stats.status, QpStatus::Optimal);
            actions.push(step.action[0]);
        }
        assert!((actions[0] - actions[1]).abs() < 1e-5, "{actions:?}");
        assert!((actions[0] - actions[2]).abs() < 1e-5, "{actions:?}");
    }
}

#[test]
fn hard_bounds_plan_respects_boxes_and_rows() {
    let mut r = rng(6);
    let mut checked = 0;
    for _ in 0..10 {
        let model = random_model(&mut r, 2, 2, true);
        let history = random_history(&mut r, 2, 2, 3);
        let mut config = MpcConfig::tracking(2, 2, 5, vec![1.0, -1.0], 0.1);
        config.s_min = vec![-0.8, -0.8];
        config.s_max = vec![0.8, 0.8];
        config.action_bounds = Some((vec![-5.0; 2], vec![5.0; 2]));
        config.formulation = Formulation::Sparse { explicit_pinning: false };
        let step = mpc_action(&model, &history, &config, 3).unwrap();
        if step.stats.status != QpStatus::Optimal {
            continue;
        }
        for s in &step.planned_states {
            for &v in s {
                assert!((-0.8 - 1e-8..=0.8 + 1e-8).contains(&v), "{v}");
            }
        }
        let noise = sample_noise(&model, 5, 3);
        let sys = assemble_constraints(&model, &history, &config, &noise, true).unwrap();
        let lay = &sys.layout;
        let mut x = DVector::zeros(lay.num_vars());
        for l in 0..5 {
            for i in 0..2 {
                x[lay.state_index(4 + l, i).unwrap()] = step.planned_states[l][i];
            }
            for c in 0..2 {
                x[lay.action_index(3 + l, c)] = step.planned_actions[l][c];
            }
        }
        for t in 0..=3 {
            for i in 0..2 {
                x[lay.state_index(t, i).unwrap()] = history.state(t)[i];
            }
        }
        assert!((&sys.a_eq * &x - &sys.b_eq).amax() < 1e-6);
        checked += 1;
    }
    assert!(checked >= 5, "only {checked} feasible instances");
}

#[test]
fn noise_matches_covariance() {
    let sigma = [0.04, 0.01, 0.01, 0.09];
    let model = FracModel::from_flat(2, 1, vec![0.5, 0.5], &[0.0; 4], &[0.0; 2], &[0.0; 2], &sigma).unwrap();
    let draws = sample_noise(&model, 40_000, 12);
    let mut cov = [0.0; 4];
    for e in &draws {
        cov[0] += e[0] * e[0];
        cov[1] += e[0] * e[1];
        cov[3] += e[1] * e[1];
    }
    for v in cov.iter_mut() {
        *v /= draws.len() as f64;
    }
    assert!((cov[0] - 0.04).abs() < 0.002);
    assert!((cov[1] - 0.01).abs() < 0.002);
    assert!((cov[3] - 0.09).abs() < 0.004);
}

#[test]
fn controller_reuse_matches_fresh_solves() {
    let mut r = rng(7);
    let model = random_model(&mut r, 1, 1, true);
    let mut config = MpcConfig::tracking(1, 1, 8, vec![0.3], 0.2);
    config.action_bounds = Some((vec![-0.5], vec![0.5]));
    config.state_bounds = StateBounds::Soft { weight: 100.0 };
    config.s_min = vec![-0.1];
    config.s_max = vec![0.4];
    let mut ctrl = MpcController::new(model.clone(), config.clone()).unwrap();
    let mut h = StateTrajectory::new(&[0.0], 1, 300.0).unwrap();
    for k in 0..15 {
        let warm = ctrl.act(&h, k).unwrap();
        let cold = mpc_action(&model, &h, &config, k).unwrap();
        assert!((warm.action[0] - cold.action[0]).abs() < 1e-5);
        let s = predict_mean(&model, &h, &warm.action, k as usize).unwrap();
        h.push(&warm.action, &s).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn plan_replays_open_loop(seed in 0u64..u64::MAX, soft in any::<bool>()) {
        let mut r = rng(seed);
        let n = r.random_range(1..=2);
        let p = r.random_range(1..=2);
        let h = r.random_range(1..=6);
        let model = random_model(&mut r, n, p, true);
        let k = r.random_range(0..5);
        let history = random_history(&mut r, n, p, k);
        let mut config = MpcConfig::tracking(n, p, h, vec![0.3; n], 0.5);
        config.gamma = 0.9;
        config.action_bounds = Some((vec![-1.0; p], vec![1.0; p]));
        if soft {
            config.s_min = vec![-0.5; n];
            config.s_max = vec![0.5; n];
            config.state_bounds = StateBounds::Soft { weight: 20.0 };
        }
        let step = mpc_action(&model, &history, &config, seed).unwrap();
        let noise = sample_noise(&model, h, seed);
        let replay = simulate_open_loop(&model, &history, &step.planned_actions, &noise);
        for (a, b) in replay.iter().zip(&step.planned_states) {
            for i in 0..n {
                prop_assert!((a[i] - b[i]).abs() < 1e-8);
            }
        }
        for a in &step.planned_actions {
            for &v in a {
                prop_assert!((-1.0 - 1e-8..=1.0 + 1e-8).contains(&v));
            }
        }
    }
}
