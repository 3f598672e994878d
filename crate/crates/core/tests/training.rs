//! Gradient descent against independent references: finite-difference
//! steps, exactly linear models and the closed-form linearized dynamics.

use faer::{Mat, Side};
use rand::Rng;
use rnf_core::network::LayerSpec;
use rnf_core::seed::rng_from_seed;
use rnf_core::tangent::{empirical_ntk, KernelMode, LinearizedState, TimeMode};
use rnf_core::trainer::{
    auto_eta, compare_dynamics, label_matrix, mse_loss, params_hash, select_probes, sgd_train, EtaMode, Split,
    TrainConfig,
};
use rnf_core::{Activation, FactorKind, ModelConfig, NetworkModel};

fn inputs(n: usize, d: usize, seed: u64) -> Mat<f64> {
    let mut rng = rng_from_seed(seed);
    Mat::from_fn(n, d, |_, _| rng.gen::<f64>())
}

fn labels(n: usize) -> Vec<u8> {
    (0..n).map(|i| (i * 7 % 10) as u8 + 1).collect()
}

fn toy(model_id: u8, d: usize, width: usize, seed: u64) -> NetworkModel {
    let mut cfg = ModelConfig::new(model_id).with_width(width);
    cfg.input_dim = d;
    cfg.sigma.sigma_s = Some(0.1);
    NetworkModel::build(&cfg, seed).unwrap()
}

fn flat_params(net: &NetworkModel) -> Vec<f64> {
    let mut out = Vec::new();
    for l in 0..net.n_layers() {
        if let Some(p) = net.params(l) {
            for j in 0..p.n_out() {
                for i in 0..p.n_in() {
                    out.push(p.w_tilde[(i, j)]);
                }
            }
            out.extend_from_slice(&p.beta);
        }
    }
    out
}

fn set_params(net: &mut NetworkModel, values: &[f64]) {
    let mut it = values.iter();
    for l in 0..net.n_layers() {
        if let Some(p) = net.params_mut(l) {
            for j in 0..p.n_out() {
                for i in 0..p.n_in() {
                    p.w_tilde[(i, j)] = *it.next().unwrap();
                }
            }
            for b in p.beta.iter_mut() {
                *b = *it.next().unwrap();
            }
            p.refresh();
        }
    }
}

#[test]
fn one_step_moves_parameters_along_the_finite_difference_gradient() {
    for model_id in 1..=5u8 {
        let x = inputs(6, 10, 1);
        let y = labels(6);
        let ym = label_matrix(&y).unwrap();
        let mut net = toy(model_id, 10, 8, 2);
        let theta0 = flat_params(&net);
        let loss_at = |net: &mut NetworkModel, p: &[f64]| {
            set_params(net, p);
            mse_loss(&net.predict(x.as_ref()).unwrap(), &ym).unwrap()
        };
        let eps = 1e-5;
        let mut grad = vec![0.0; theta0.len()];
        let mut p = theta0.clone();
        for q in 0..theta0.len() {
            p[q] = theta0[q] + eps;
            let up = loss_at(&mut net, &p);
            p[q] = theta0[q] - eps;
            let down = loss_at(&mut net, &p);
            p[q] = theta0[q];
            grad[q] = (up - down) / (2.0 * eps);
        }
        set_params(&mut net, &theta0);

        let eta = 0.3;
        let split = Split { inputs: &x, labels: &y };
        let probes = select_probes(&x, &y);
        let cfg = TrainConfig { steps: 1, eta: EtaMode::Fixed(eta), ..Default::default() };
        sgd_train(&mut net, split, split, &probes, &cfg).unwrap();
        let theta1 = flat_params(&net);
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for q in 0..theta0.len() {
            let expected = theta0[q] - eta * grad[q];
            assert!(
                (theta1[q] - expected).abs() <= 1e-7 * eta * scale,
                "model {model_id} parameter {q}: {} vs {expected}",
                theta1[q]
            );
        }
    }
}

#[test]
fn zero_learning_rate_leaves_everything_fixed() {
    let x = inputs(5, 10, 3);
    let y = labels(5);
    let mut net = toy(2, 10, 8, 4);
    let before = params_hash(&net);
    let split = Split { inputs: &x, labels: &y };
    let cfg = TrainConfig { steps: 20, eta: EtaMode::Fixed(0.0), ..Default::default() };
    let hist = sgd_train(&mut net, split, split, &select_probes(&x, &y), &cfg).unwrap();
    assert_eq!(hist.final_params_hash, before);
    assert!(hist.train_loss.iter().all(|&l| l == hist.train_loss[0]));
    assert!(hist.probe_outputs.iter().all(|p| p == &hist.probe_outputs[0]));
}

#[test]
fn automatic_rate_rejected_by_the_trainer() {
    let x = inputs(3, 10, 5);
    let y = labels(3);
    let mut net = toy(5, 10, 8, 6);
    let split = Split { inputs: &x, labels: &y };
    let cfg = TrainConfig { steps: 2, ..Default::default() };
    assert!(sgd_train(&mut net, split, split, &select_probes(&x, &y), &cfg).is_err());
}

#[test]
fn linear_model_follows_the_discrete_linearized_dynamics_exactly() {
    let d = 12;
    let n = 10;
    let x = inputs(n, d, 7);
    let y = labels(n);
    let xv = inputs(4, d, 8);
    let yv = labels(4);
    let specs = vec![LayerSpec::dense(d, 10, Activation::Identity)];
    let mut net = NetworkModel::from_specs(specs, 1.0, 0.1, FactorKind::Auto, 9).unwrap();

    let theta = empirical_ntk(&net, x.as_ref(), None, KernelMode::Full).unwrap();
    let mut cfg = TrainConfig { steps: 400, log_points: 20, ..Default::default() };
    let (eta, _) = auto_eta(&theta, &cfg).unwrap();
    cfg.eta = EtaMode::Fixed(eta);
    let probes = select_probes(&xv, &yv);
    let theta_probe = empirical_ntk(&net, probes.inputs.as_ref(), Some(x.as_ref()), KernelMode::Full).unwrap();
    let f0 = net.predict(x.as_ref()).unwrap();
    let f0_probe = net.predict(probes.inputs.as_ref()).unwrap();
    let state = LinearizedState::new(&theta, &f0, &label_matrix(&y).unwrap(), eta, TimeMode::Discrete).unwrap();

    let hist = sgd_train(
        &mut net,
        Split { inputs: &x, labels: &y },
        Split { inputs: &xv, labels: &yv },
        &probes,
        &cfg,
    )
    .unwrap();
    let rep = compare_dynamics(&hist, &state, &theta_probe, &f0_probe).unwrap();
    assert!(rep.horizon_max() < 1e-11, "probe deviation {:e}", rep.horizon_max());
    for (l, dl) in hist.train_loss.iter().zip(&rep.loss_deviation) {
        assert!(*dl <= 1e-11 * l.max(1e-3), "loss deviation {dl:e} at loss {l:e}");
    }
    // the loss actually decreased, so the comparison is not vacuous
    assert!(hist.train_loss.last().unwrap() < &(0.5 * hist.train_loss[0]));
}

#[test]
fn linearized_loss_is_monotone_at_the_automatic_rate() {
    for model_id in [1u8, 2, 5] {
        let n = 8;
        let x = inputs(n, 16, 10 + model_id as u64);
        let y = label_matrix(&labels(n)).unwrap();
        let net = toy(model_id, 16, 12, 11);
        let theta = empirical_ntk(&net, x.as_ref(), None, KernelMode::Full).unwrap();
        let (eta, _) = auto_eta(&theta, &TrainConfig::default()).unwrap();
        let f0 = net.predict(x.as_ref()).unwrap();
        let state = LinearizedState::new(&theta, &f0, &y, eta, TimeMode::Discrete).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..2000 {
            let l = mse_loss(&state.train_output(t as f64), &y).unwrap();
            assert!(l <= prev * (1.0 + 1e-12), "model {model_id}: loss rose from {prev:e} to {l:e} at step {t}");
            prev = l;
        }
    }
}

#[test]
fn automatic_rate_matches_the_dense_eigensolver() {
    for model_id in 1..=5u8 {
        let x = inputs(7, 16, 20 + model_id as u64);
        let net = toy(model_id, 16, 12, 21);
        let theta = empirical_ntk(&net, x.as_ref(), None, KernelMode::Full).unwrap();
        let cfg = TrainConfig::default();
        let (eta, lambda) = auto_eta(&theta, &cfg).unwrap();
        let evd = theta.entries.self_adjoint_eigen(Side::Lower).unwrap();
        let top = evd.S().column_vector().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // the Rayleigh quotient error is of the order of the stopping tolerance
        assert!((lambda - top).abs() <= 1e-8 * top, "model {model_id}: {lambda} vs {top}");
        assert!((eta - 2.0 / top).abs() <= 1e-8 * eta);
    }
}
