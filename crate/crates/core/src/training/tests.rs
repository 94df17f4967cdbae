use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::snmm::{recursive_blip, residualize, BlipEvaluation};

fn random_panel(n: usize, t: usize, p: usize, k: usize, seed: u64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = (0..n)
        .map(|_| {
            let covariates: Vec<Vec<f64>> = (0..t).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let treatments: Vec<usize> = (0..t).map(|_| rng.random_range(0..k)).collect();
            let outcome = treatments.iter().map(|&z| z as f64).sum::<f64>() + covariates[0][0] + rng.random_range(-0.5..0.5);
            Trajectory {
                covariates,
                treatments,
                outcome,
                true_blips: None,
            }
        })
        .collect();
    Panel::new(units, k).unwrap()
}

fn small_arch(panel: &Panel) -> ArchConfig {
    ArchConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 8,
        dropout_p: 0.1,
        ..ArchConfig::for_panel(panel)
    }
}

#[test]
fn time_weight_examples() {
    assert_eq!(time_weights(TimeWeighting::Uniform, 5).unwrap(), vec![1.0; 5]);
    let h = time_weights(TimeWeighting::Hyperbolic, 3).unwrap();
    assert_eq!(h[..2], [10.0, 5.0]);
    assert!((h[2] - 10.0 / 3.0).abs() < 1e-15);
    assert!((time_weights(TimeWeighting::LinearDecay, 5).unwrap()[3] - 7.0).abs() < 1e-12);
    assert!((time_weights(TimeWeighting::Exponential, 3).unwrap()[2] - 6.4).abs() < 1e-12);
    assert!(time_weights(TimeWeighting::LinearDecay, 10).is_ok());
    assert!(time_weights(TimeWeighting::LinearDecay, 11).is_err());
    assert!(time_weights(TimeWeighting::Uniform, 0).is_err());
    assert_eq!("linear_decay".parse::<TimeWeighting>().unwrap(), TimeWeighting::LinearDecay);
    assert!("cosine".parse::<TimeWeighting>().is_err());
}

#[test]
fn default_lambdas_give_hte_focus_400() {
    let c = TrainConfig::default();
    assert_eq!(c.lambda_blip / c.lambda_prop, 400.0);
    assert_eq!(c.lambda_blip / c.lambda_cmu, 400.0);
    assert!(c.validate().is_ok());
}

#[test]
fn config_validation_names_the_key() {
    let mut c = TrainConfig::default();
    c.lambda_prop = 0.0;
    c.lambda_cmu = 0.0;
    c.lambda_blip = 0.0;
    assert!(c.validate().unwrap_err().to_string().contains("lambda"));
    let c = TrainConfig {
        beta2: 1.0,
        ..Default::default()
    };
    assert!(c.validate().unwrap_err().to_string().contains("beta2"));
    let c = TrainConfig {
        val_fraction: 0.0,
        ..Default::default()
    };
    assert!(c.validate().unwrap_err().to_string().contains("val_fraction"));
}

/// Hand-built head outputs, so the losses can be checked without a model.
fn manual_outputs(g: &mut Graph, n: usize, t: usize, k: usize, seed: u64) -> (ModelOutputs, Vec<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut leaf = |cols: usize| {
        let data = (0..n * t * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.param(&Tensor::new(vec![n * t, cols], data).unwrap()).unwrap()
    };
    let (logits, mu, blip) = (leaf(k), leaf(1), leaf(k - 1));
    let propensity = g.softmax_rows(logits).unwrap();
    (
        ModelOutputs {
            propensity_logits: logits,
            propensity,
            cond_mean: mu,
            blip,
            n_units: n,
            horizon: t,
        },
        vec![logits, mu, blip],
    )
}

#[test]
fn targets_match_panel_recursion() {
    let panel = random_panel(6, 4, 2, 3, 1);
    let units: Vec<&Trajectory> = panel.trajectories().iter().collect();
    let mut g = Graph::new();
    let (out, _) = manual_outputs(&mut g, 6, 4, 3, 2);
    let tg = recursion_targets(&g, &out, &units, 3);

    let blip = g.value(out.blip).data().to_vec();
    let ev = BlipEvaluation::from_fn(&panel, |i, t| {
        let r = i * 4 + t - 1;
        blip[r * 2..r * 2 + 2].to_vec()
    })
    .unwrap();
    let u = recursive_blip(&panel, &ev).unwrap();
    let e = g.value(out.propensity).data();
    let mu = g.value(out.cond_mean).data();
    for t in 1..=4 {
        let u_next: Vec<f64> = (0..6).map(|i| u[i][t]).collect();
        let mu_t: Vec<f64> = (0..6).map(|i| mu[i * 4 + t - 1]).collect();
        let z: Vec<usize> = (0..6).map(|i| panel.get(i).z(t)).collect();
        let e_t: Vec<Vec<f64>> = (0..6).map(|i| e[(i * 4 + t - 1) * 3..(i * 4 + t) * 3].to_vec()).collect();
        let (ut, it) = residualize(&u_next, &mu_t, &z, &e_t).unwrap();
        for i in 0..6 {
            let r = i * 4 + t - 1;
            assert!((tg.u_next[r] - u_next[i]).abs() < 1e-12);
            assert!((tg.u_tilde[r] - ut[i]).abs() < 1e-12);
            for a in 0..2 {
                assert!((tg.i_tilde[r * 2 + a] - it[i][a]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cmu_loss_vanishes_at_its_target() {
    let panel = random_panel(5, 3, 2, 2, 3);
    let units: Vec<&Trajectory> = panel.trajectories().iter().collect();
    let mut g = Graph::new();
    let (out, _) = manual_outputs(&mut g, 5, 3, 2, 4);
    let tg = recursion_targets(&g, &out, &units, 2);
    let mu = g.param(&Tensor::new(vec![15, 1], tg.u_next.clone()).unwrap()).unwrap();
    let out = ModelOutputs { cond_mean: mu, ..out };
    let l = joint_losses(&mut g, &out, &units, &[1.0, 1.0, 1.0], &TrainConfig::default()).unwrap();
    assert_eq!(g.value(l.cmu).data()[0], 0.0);
}

#[test]
fn prop_loss_falls_as_mass_moves_to_realised_arm() {
    let panel = random_panel(4, 2, 1, 3, 5);
    let units: Vec<&Trajectory> = panel.trajectories().iter().collect();
    let mut prev = f64::INFINITY;
    for boost in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let mut g = Graph::new();
        let (out, _) = manual_outputs(&mut g, 4, 2, 3, 6);
        let mut logits = g.value(out.propensity_logits).clone();
        for (r, z) in units.iter().flat_map(|u| u.treatments.iter()).enumerate() {
            logits.data_mut()[r * 3 + z] += boost;
        }
        let lv = g.param(&logits).unwrap();
        let out = ModelOutputs { propensity_logits: lv, ..out };
        let l = joint_losses(&mut g, &out, &units, &[1.0, 1.0], &TrainConfig::default()).unwrap();
        let v = g.value(l.prop).data()[0];
        assert!(v < prev);
        prev = v;
    }
}

#[test]
fn blip_loss_gradient_stops_at_targets() {
    let (n, t_len, k) = (5, 4, 3);
    let panel = random_panel(n, t_len, 2, k, 7);
    let units: Vec<&Trajectory> = panel.trajectories().iter().collect();
    let cfg = TrainConfig {
        lambda_prop: 0.0,
        lambda_cmu: 0.0,
        lambda_blip: 1.0,
        ..Default::default()
    };
    for t in 1..=t_len {
        let mut w = vec![0.0; t_len];
        w[t - 1] = 1.0;
        let mut g = Graph::new();
        let (out, leaves) = manual_outputs(&mut g, n, t_len, k, 8);
        let tg = recursion_targets(&g, &out, &units, k);
        let l = joint_losses(&mut g, &out, &units, &w, &cfg).unwrap();
        let grads = g.backward(l.total).unwrap();
        assert!(grads.get(leaves[0]).data().iter().all(|&v| v == 0.0), "propensity gets blip gradient");
        assert!(grads.get(leaves[1]).data().iter().all(|&v| v == 0.0), "mean gets blip gradient");
        let gb = grads.get(leaves[2]);
        let blip = g.value(out.blip).data();
        for i in 0..n {
            for s in 1..=t_len {
                let r = i * t_len + s - 1;
                let row = &gb.data()[r * (k - 1)..(r + 1) * (k - 1)];
                if s != t {
                    // later-time blips shape the target only as constants
                    assert!(row.iter().all(|&v| v == 0.0), "t={t}, s={s}");
                    continue;
                }
                let it = &tg.i_tilde[r * (k - 1)..(r + 1) * (k - 1)];
                let pred: f64 = it.iter().zip(&blip[r * (k - 1)..]).map(|(a, b)| a * b).sum();
                for a in 0..k - 1 {
                    let want = 2.0 / n as f64 * (pred - tg.u_tilde[r]) * it[a];
                    assert!((row[a] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn full_batch_losses_ignore_unit_order() {
    let panel = random_panel(12, 3, 2, 2, 9);
    let model = Terra::new(small_arch(&panel), Scaler::fit(&panel), 1).unwrap();
    let w = time_weights(TimeWeighting::Hyperbolic, 3).unwrap();
    let cfg = TrainConfig::default();
    let fwd: Vec<&Trajectory> = panel.trajectories().iter().collect();
    let rev: Vec<&Trajectory> = fwd.iter().rev().copied().collect();
    let a = evaluate_losses(&model, &fwd, &w, &cfg).unwrap();
    let b = evaluate_losses(&model, &rev, &w, &cfg).unwrap();
    assert!((a.prop - b.prop).abs() < 1e-12);
    assert!((a.cmu - b.cmu).abs() < 1e-12);
    assert!((a.blip - b.blip).abs() < 1e-12);
}

#[test]
fn split_is_seeded_and_disjoint() {
    let (a, b) = split_units(50, 0.2, 3).unwrap();
    assert_eq!((a.len(), b.len()), (40, 10));
    assert!(a.iter().all(|i| !b.contains(i)));
    assert_eq!(split_units(50, 0.2, 3).unwrap(), (a, b.clone()));
    assert_ne!(split_units(50, 0.2, 4).unwrap().1, b);
    assert!(split_units(2, 0.1, 0).is_err());
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 6,
        batch_size: 16,
        seed,
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic() {
    let panel = random_panel(60, 3, 2, 2, 10);
    let arch = small_arch(&panel);
    let run = || {
        let o = train(&panel, &arch, &quick_cfg(5)).unwrap();
        let mut buf = Vec::new();
        write_log_csv(&o.log, &mut buf).unwrap();
        (String::from_utf8(buf).unwrap(), o.model.params().clone())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.starts_with(LOG_HEADER));
    assert_eq!(a.lines().count(), 1 + 7);
}

#[test]
fn returned_model_is_the_best_validation_checkpoint() {
    let panel = random_panel(60, 3, 2, 2, 11);
    let cfg = quick_cfg(6);
    let o = train(&panel, &small_arch(&panel), &cfg).unwrap();
    let min = o.log.iter().map(|e| e.val.total(&cfg)).fold(f64::INFINITY, f64::min);
    assert_eq!(o.best_val_total, min);
    assert_eq!(o.log[o.best_epoch].val.total(&cfg), min);
    let (_, val_idx) = split_units(panel.len(), cfg.val_fraction, cfg.seed).unwrap();
    let val: Vec<&Trajectory> = val_idx.iter().map(|&i| panel.get(i)).collect();
    let w = time_weights(cfg.time_weighting, 3).unwrap();
    let again = evaluate_losses(&o.model, &val, &w, &cfg).unwrap().total(&cfg);
    assert!((again - min).abs() < 1e-12);
    for e in &o.log {
        assert!((0.0..=1.0).contains(&e.clipped_fraction));
    }
}

#[test]
fn early_stopping_respects_patience() {
    let panel = random_panel(40, 2, 1, 2, 12);
    let cfg = TrainConfig {
        max_epochs: 200,
        patience_early_stop: 2,
        lr: 1e-6,
        batch_size: 8,
        seed: 1,
        ..Default::default()
    };
    let o = train(&panel, &small_arch(&panel), &cfg).unwrap();
    let last = o.log.last().unwrap().epoch;
    if o.stopped_early {
        assert_eq!(last - o.best_epoch, 2);
    } else {
        assert_eq!(last, 200);
    }
}

#[test]
fn non_finite_outcomes_abort_with_diagnostics() {
    let mut panel = random_panel(20, 2, 1, 2, 13);
    let mut units = panel.trajectories().to_vec();
    for u in units.iter_mut() {
        u.outcome = 1e200;
    }
    units[0].outcome = -1e200;
    panel = Panel::new(units, 2).unwrap();
    let err = train(&panel, &small_arch(&panel), &quick_cfg(0)).unwrap_err();
    assert!(matches!(err, TerraError::Diverged { .. }), "{err}");
}

#[test]
fn propensity_only_training_learns_uniform_assignment() {
    let (n, t_len, k) = (1500, 3, 4);
    let panel = random_panel(n, t_len, 3, k, 14);
    let cfg = TrainConfig {
        lambda_prop: 1.0,
        lambda_cmu: 0.0,
        lambda_blip: 0.0,
        max_epochs: 20,
        lr: 1e-2,
        seed: 2,
        ..Default::default()
    };
    let o = train(&panel, &small_arch(&panel), &cfg).unwrap();
    let pred = o.model.predict_panel(&panel).unwrap();
    let mut mean = vec![0.0; k];
    for i in 0..n {
        for t in 1..=t_len {
            for (a, &e) in pred.propensity(i, t).iter().enumerate() {
                mean[a] += e / (n * t_len) as f64;
            }
        }
    }
    for m in mean {
        assert!((m - 0.25).abs() < 0.03, "mean ê per arm {m}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adamax_leaves_zero_gradient_params_alone(v in prop::collection::vec(-3.0f64..3.0, 1..10)) {
        let mut p = vec![Tensor::new(vec![v.len()], v.clone()).unwrap()];
        let mut s = OptimizerState::new(&p);
        let hp = AdamaxParams { lr: 0.1, beta1: 0.9, beta2: 0.999, weight_decay: 0.0, eps: 1e-8 };
        for _ in 0..3 {
            adamax_step(&mut s, &mut p, &[Tensor::zeros(&[v.len()])], &hp).unwrap();
        }
        prop_assert_eq!(p[0].data(), &v[..]);
    }
}
