mod common;

use dap_core::baselines::{
    dp_sgd_step, epochs_for_budget, fit_dp, fit_plain, fit_regularized, naive_epsilon_accountant, per_example_gradients,
    privatize, DpConfig, RegConfig,
};
use dap_core::data::{self, GaussianMixture};
use dap_core::eval::accuracy;
use dap_core::nn::{loss, ClassifierSpec, Mode};
use dap_core::seed;
use dap_core::train::fit_on;
use proptest::prelude::*;

use common::{lcg_values, nearest_centroid_accuracy, quick_train};

#[test]
fn plain_fit_on_separable_data() {
    let raw = GaussianMixture::new(2, 5, 300, 4.0).generate(1).unwrap();
    assert!(nearest_centroid_accuracy(&raw.train, &raw.test, 2) >= 0.95);
    let b = raw.standardized();
    let spec = ClassifierSpec::new(5, vec![16], 2);
    let fit = fit_plain(&spec, &b, &quick_train(30), 2).unwrap();
    let test = accuracy(&fit.model, &b.test).unwrap();
    let train = accuracy(&fit.model, &b.train).unwrap();
    assert!(test >= 0.95, "test {test}");
    assert!(train >= test - 0.02, "train {train} test {test}");
    let again = fit_plain(&spec, &b, &quick_train(30), 2).unwrap();
    assert_eq!(again.model.checksum(), fit.model.checksum());
}

#[test]
fn disabled_regularisation_is_plain_training() {
    let b = GaussianMixture::new(3, 4, 30, 1.5).generate(2).unwrap().standardized();
    let spec = ClassifierSpec::new(4, vec![12], 3);
    let plain = fit_plain(&spec, &b, &quick_train(8), 4).unwrap();
    let reg = fit_regularized(&spec, &b, &RegConfig::disabled(), &quick_train(8), 4).unwrap();
    assert_eq!(plain.model.checksum(), reg.model.checksum());
}

#[test]
fn regularised_model_is_deterministic_in_eval_mode() {
    let b = GaussianMixture::new(3, 4, 30, 1.5).generate(2).unwrap().standardized();
    let spec = ClassifierSpec::new(4, vec![12, 12], 3);
    let fit = fit_regularized(&spec, &b, &RegConfig::new(0.33, 0.01).unwrap(), &quick_train(5), 1).unwrap();
    assert!(fit.model.layers().iter().any(|l| l.name() == "dropout"));
    let x = data::features_tensor(&b.test, None).unwrap();
    assert_eq!(fit.model.forward(&x, Mode::Eval).unwrap(), fit.model.forward(&x, Mode::Eval).unwrap());
    assert!(RegConfig::new(0.25, 0.01).is_err());
    assert!(RegConfig::new(0.5, 0.05).is_err());
    assert_eq!(RegConfig::grid().len(), 9);
}

#[test]
fn clipping_example() {
    let mut rng = seed::rng(0);
    let (mean, norms) = privatize(&[vec![3.0, 4.0], vec![0.3, 0.4]], 1.0, 0.0, &mut rng).unwrap();
    assert!((mean[0] - 0.45).abs() < 1e-15 && (mean[1] - 0.6).abs() < 1e-15);
    assert!((norms[0] - 1.0).abs() < 1e-15 && (norms[1] - 0.5).abs() < 1e-15);
    assert!(privatize(&[vec![1.0]], 0.0, 0.0, &mut rng).is_err());
    assert!(privatize(&[vec![1.0]], -1.0, 0.0, &mut rng).is_err());
}

#[test]
fn noise_variance_matches_sigma_c_over_b() {
    let (sigma, c, b) = (1.0, 1.0, 100);
    let zeros = vec![vec![0.0; 4]; b];
    let mut rng = seed::rng(3);
    let draws: Vec<Vec<f64>> = (0..10_000)
        .map(|_| privatize(&zeros, c, sigma, &mut rng).unwrap().0)
        .collect();
    let expected = (sigma * c / b as f64).powi(2);
    for k in 0..4 {
        let col: Vec<f64> = draws.iter().map(|d| d[k]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
        assert!((var / expected - 1.0).abs() < 0.2, "coordinate {k}: {var} vs {expected}");
    }
}

#[test]
fn structured_step_matches_flat_clipping() {
    let b = GaussianMixture::new(3, 4, 20, 1.0).generate(5).unwrap();
    let net = ClassifierSpec::new(4, vec![6], 3).build(2).unwrap();
    let x = data::features_tensor(&b.train[..8], None).unwrap();
    let y = data::labels_of(&b.train[..8], None);
    let per = per_example_gradients(&net, &x, &y, None).unwrap();
    let (g, norms) = dp_sgd_step(&per, 0.05, 0.0, &mut seed::rng(0)).unwrap();
    assert!(norms.iter().all(|n| *n <= 0.05 + 1e-15));
    let flat = g.flatten();
    for k in 0..flat.len() {
        let oracle: f64 = per
            .iter()
            .map(|p| {
                let f = p.flatten();
                let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                f[k] * (0.05 / n).min(1.0)
            })
            .sum::<f64>()
            / 8.0;
        assert!((flat[k] - oracle).abs() < 1e-15);
    }
    let trace = net.forward_traced(&x, Mode::Eval).unwrap();
    let up = loss::cross_entropy_grad(trace.output(), &y).unwrap();
    let batch = net.backward(&trace, &up).unwrap().grads.flatten();
    let (unclipped, _) = dp_sgd_step(&per, f64::INFINITY, 0.0, &mut seed::rng(0)).unwrap();
    for (a, e) in unclipped.flatten().iter().zip(&batch) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn noiseless_unclipped_dp_is_plain_training() {
    let b = GaussianMixture::new(3, 4, 30, 1.5).generate(6).unwrap().standardized();
    let spec = ClassifierSpec::new(4, vec![8], 3);
    let dp = DpConfig {
        clip_norm: f64::INFINITY,
        noise_multiplier: 0.0,
        epochs: 1,
        ..Default::default()
    };
    let fit = fit_dp(&spec, &b, &dp, 7).unwrap();
    assert_eq!(fit.epsilon, f64::INFINITY);
    let plain = fit_on(spec.build(7).unwrap(), &b.train, &b.validation, &quick_train(1), 7, None).unwrap();
    let err = fit
        .model
        .flat_params()
        .iter()
        .zip(plain.model.flat_params())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-9, "max param difference {err}");
}

#[test]
fn dp_fit_clips_every_step_and_is_seeded() {
    let b = GaussianMixture::new(3, 4, 30, 1.5).generate(8).unwrap().standardized();
    let spec = ClassifierSpec::new(4, vec![8], 3);
    let dp = DpConfig {
        clip_norm: 0.1,
        epochs: 3,
        ..Default::default()
    };
    let fit = fit_dp(&spec, &b, &dp, 1).unwrap();
    assert_eq!(fit.steps, 3 * b.train.len().div_ceil(32));
    assert!(fit.max_clipped_norms.iter().all(|n| *n <= 0.1 + 1e-12));
    assert_eq!(fit.history.len(), 3);
    assert_eq!(fit_dp(&spec, &b, &dp, 1).unwrap().model.checksum(), fit.model.checksum());
    assert_ne!(fit_dp(&spec, &b, &dp, 2).unwrap().model.checksum(), fit.model.checksum());

    let longer = fit_dp(&spec, &b, &DpConfig { epochs: 6, ..dp.clone() }, 1).unwrap();
    assert!(longer.epsilon > fit.epsilon);
}

#[test]
fn accountant_hand_evaluation() {
    let delta = 1e-5;
    let sigma = (2.0 * (1.25f64 / delta).ln()).sqrt();
    let eps = naive_epsilon_accountant(sigma, 1, 1.0, delta).unwrap();
    let oracle = (2.0 * (1.0f64 / delta).ln()).sqrt() + (std::f64::consts::E - 1.0);
    assert!((eps - oracle).abs() < 1e-12);
    assert!((eps - 6.515).abs() < 0.01);
    assert_eq!(naive_epsilon_accountant(0.0, 5, 0.1, delta).unwrap(), f64::INFINITY);
    assert!(naive_epsilon_accountant(1.0, 0, 0.1, delta).is_err());
}

#[test]
fn budget_epochs_fit_inside_epsilon() {
    let e = epochs_for_budget(4.0, 4.0, 600, 32, 1e-5).unwrap();
    let per = 600usize.div_ceil(32);
    let q = 32.0 / 600.0;
    assert!(naive_epsilon_accountant(4.0, e * per, q, 1e-5).unwrap() <= 4.0);
    assert!(naive_epsilon_accountant(4.0, (e + 1) * per, q, 1e-5).unwrap() > 4.0);
    let cfg = DpConfig {
        noise_multiplier: 4.0,
        ..Default::default()
    }
    .for_budget(4.0, 600)
    .unwrap();
    assert_eq!(cfg.epochs, e);
    assert_eq!(cfg.epsilon, 4.0);
    assert!(epochs_for_budget(0.01, 0.5, 600, 32, 1e-5).is_err());
}

#[test]
fn invalid_dp_configs_rejected() {
    for bad in [
        DpConfig { clip_norm: 0.0, ..Default::default() },
        DpConfig { delta: 1.0, ..Default::default() },
        DpConfig { epsilon: 0.0, ..Default::default() },
        DpConfig { epochs: 0, ..Default::default() },
        DpConfig { noise_multiplier: -1.0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

proptest! {
    #[test]
    fn clipped_norms_never_exceed_c(seed in any::<u64>(), c in 0.01f64..5.0, scale in 0.1f64..50.0) {
        let v = lcg_values(seed, 60);
        let grads: Vec<Vec<f64>> = v.chunks(6).map(|g| g.iter().map(|x| x * scale).collect()).collect();
        let (_, norms) = privatize(&grads, c, 0.0, &mut seed::rng(seed)).unwrap();
        for n in norms {
            prop_assert!(n <= c * (1.0 + 1e-12));
        }
    }

    #[test]
    fn accountant_monotone(sigma in 0.3f64..10.0, t in 1usize..500, q in 0.001f64..1.0) {
        let e = naive_epsilon_accountant(sigma, t, q, 1e-5).unwrap();
        prop_assert!(naive_epsilon_accountant(sigma, t + 1, q, 1e-5).unwrap() > e);
        prop_assert!(naive_epsilon_accountant(sigma * 1.1, t, q, 1e-5).unwrap() < e);
    }
}
