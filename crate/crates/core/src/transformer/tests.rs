use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn toy_unit(rng: &mut ChaCha8Rng, t: usize, p: usize, k: usize) -> Trajectory {
    Trajectory {
        covariates: (0..t).map(|_| (0..p).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
        treatments: (0..t).map(|_| rng.random_range(0..k)).collect(),
        outcome: rng.random_range(-3.0..3.0),
        true_blips: None,
    }
}

fn toy_model(t: usize, p: usize, k: usize, seed: u64) -> Terra {
    let arch = ArchConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        dropout_p: 0.1,
        n_covariates: p,
        n_treatments: k,
        horizon: t,
    };
    let scaler = Scaler {
        x_mean: vec![0.1; p],
        x_scale: vec![1.5; p],
        y_mean: 0.3,
        y_scale: 2.0,
    };
    Terra::new(arch, scaler, seed).unwrap()
}

fn set(model: &mut Terra, name: &str, data: Vec<f64>) {
    let i = model.params().index_of(name).unwrap_or_else(|| panic!("no {name}"));
    let shape = model.params().tensors()[i].shape().to_vec();
    model.params_mut().tensors_mut()[i] = Tensor::new(shape, data).unwrap();
}

fn zero_all(model: &mut Terra) {
    for t in model.params_mut().tensors_mut() {
        t.data_mut().fill(0.0);
    }
}

#[test]
fn pos_encode_examples() {
    assert!((pos_encode(1, 0, 16) - 0.841471).abs() < 1e-6);
    assert_eq!(pos_encode(1, 0, 7), 1f64.sin());
    assert_eq!(pos_encode(1, 1, 64), 10000f64.powf(-1.0 / 64.0).cos());
    for t in 1..40 {
        for k in 0..32 {
            assert!(pos_encode(t, k, 32).abs() <= 1.0);
        }
    }
}

#[test]
fn arch_validation() {
    let mut a = ArchConfig::for_dims(5, 2, 5);
    assert!(a.validate().is_ok());
    a.n_heads = 3;
    assert!(a.validate().is_err());
    a.n_heads = 4;
    a.dropout_p = 1.0;
    assert!(a.validate().is_err());
    a.dropout_p = 0.0;
    a.n_treatments = 1;
    assert!(a.validate().is_err());
}

#[test]
fn parameter_count_matches_formula() {
    for (d, h, l, f, p, k) in [(32, 4, 2, 64, 5, 2), (8, 2, 1, 12, 3, 4), (16, 1, 3, 7, 9, 3)] {
        let arch = ArchConfig {
            d_model: d,
            n_heads: h,
            n_layers: l,
            d_ff: f,
            dropout_p: 0.0,
            n_covariates: p,
            n_treatments: k,
            horizon: 4,
        };
        let m = Terra::new(arch.clone(), Scaler::identity(p), 1).unwrap();
        // Independent tally of the documented layout.
        let enc = (k + 1) * d + d + p * d + d;
        let mh = 4 * (d * d + d);
        let blk = 4 * mh + 6 * 2 * d + 2 * (d * f + f + f * d + d);
        let heads = 3 * (2 * d * d + d) + (d * k + k) + (d + 1) + (d * (k - 1) + (k - 1));
        assert_eq!(m.params().scalar_count(), enc + l * blk + heads);
        assert_eq!(arch.param_count(), enc + l * blk + heads);
    }
}

#[test]
fn zero_weights_embed_to_positional_encoding() {
    let mut m = toy_model(4, 3, 3, 5);
    zero_all(&mut m);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let units = [toy_unit(&mut rng, 4, 3, 3), toy_unit(&mut rng, 4, 3, 3)];
    let refs: Vec<&Trajectory> = units.iter().collect();
    let mut g = Graph::new();
    let p = m.bind(&mut g).unwrap();
    let (z, x) = m.encode_sequences(&mut g, &p, &refs).unwrap();
    for v in [z, x] {
        let t = g.value(v);
        assert_eq!(t.shape(), &[8, 8]);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(t.get2(r, c), pos_encode(r % 4 + 1, c, 8));
            }
        }
    }
}

#[test]
fn identical_steps_differ_by_positional_encoding() {
    let m = toy_model(2, 3, 2, 9);
    let u = Trajectory {
        covariates: vec![vec![0.5, -1.0, 2.0]; 2],
        treatments: vec![1, 1],
        outcome: 0.0,
        true_blips: None,
    };
    let mut g = Graph::new();
    let p = m.bind(&mut g).unwrap();
    let (_, x) = m.encode_sequences(&mut g, &p, &[&u]).unwrap();
    let t = g.value(x);
    for c in 0..8 {
        let diff = t.get2(0, c) - t.get2(1, c);
        assert!((diff - (pos_encode(1, c, 8) - pos_encode(2, c, 8))).abs() < 1e-12);
    }
}

#[test]
fn hand_computed_embedding() {
    let arch = ArchConfig {
        d_model: 2,
        n_heads: 1,
        n_layers: 1,
        d_ff: 2,
        dropout_p: 0.0,
        n_covariates: 2,
        n_treatments: 2,
        horizon: 1,
    };
    let scaler = Scaler {
        x_mean: vec![1.0, 0.0],
        x_scale: vec![2.0, 1.0],
        y_mean: 0.0,
        y_scale: 1.0,
    };
    let mut m = Terra::new(arch, scaler, 0).unwrap();
    // rows: arm 0, arm 1, start token
    set(&mut m, "embed_z.weight", vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]);
    set(&mut m, "embed_z.bias", vec![0.1, 0.2]);
    set(&mut m, "embed_x.weight", vec![1.0, 0.0, 2.0, -1.0]);
    set(&mut m, "embed_x.bias", vec![0.0, 1.0]);
    let u = Trajectory {
        covariates: vec![vec![3.0, 0.5]],
        treatments: vec![1],
        outcome: 0.0,
        true_blips: None,
    };
    let mut g = Graph::new();
    let p = m.bind(&mut g).unwrap();
    let (z, x) = m.encode_sequences(&mut g, &p, &[&u]).unwrap();
    let (s, c) = (1f64.sin(), (10000f64.powf(-0.5)).cos());
    // start token row + bias + PE(1)
    assert_eq!(g.value(z).data(), &[0.5 + 0.1 + s, -0.5 + 0.2 + c]);
    // standardized x = (1, 0.5): [1*1 + 0.5*2, 0*1 + 0.5*(-1)] + (0, 1) + PE(1)
    let xd = g.value(x).data();
    assert!((xd[0] - (2.0 + s)).abs() < 1e-15);
    assert!((xd[1] - (0.5 + c)).abs() < 1e-15);
}

fn attn_model(t: usize, d: usize, heads: usize) -> Terra {
    let arch = ArchConfig {
        d_model: d,
        n_heads: heads,
        n_layers: 1,
        d_ff: 2,
        dropout_p: 0.0,
        n_covariates: 1,
        n_treatments: 2,
        horizon: t,
    };
    Terra::new(arch, Scaler::identity(1), 3).unwrap()
}

#[test]
fn single_step_attention_is_value_projection() {
    let m = attn_model(1, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut g = Graph::new();
    let p = m.bind(&mut g).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let a = m.layout.blocks[0].self_treat;
    let (out, w) = m.masked_multihead(&mut g, &p, a, xv, xv, 3).unwrap();
    for h in &w {
        assert!(g.value(*h).data().iter().all(|&v| v == 1.0));
    }
    // out = (x Wv + bv) Wo + bo
    let pv = |i: usize| m.params().tensors()[i].clone();
    let v = crate::tensor::matmul(&x, &pv(a.v.w)).unwrap();
    let bv = pv(a.v.b);
    let v = Tensor::new(vec![3, 4], v.data().iter().enumerate().map(|(i, e)| e + bv.data()[i % 4]).collect()).unwrap();
    let o = crate::tensor::matmul(&v, &pv(a.o.w)).unwrap();
    let bo = pv(a.o.b);
    for (i, e) in o.data().iter().enumerate() {
        assert!((g.value(out).data()[i] - (e + bo.data()[i % 4])).abs() < 1e-12);
    }
}

#[test]
fn hand_computed_two_step_attention() {
    let mut m = attn_model(2, 2, 1);
    let identity = vec![1.0, 0.0, 0.0, 1.0];
    for part in ["q", "k", "v", "o"] {
        set(&mut m, &format!("block0.self_treat.{part}.weight"), identity.clone());
        set(&mut m, &format!("block0.self_treat.{part}.bias"), vec![0.0, 0.0]);
    }
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
    let mut g = Graph::new();
    let p = m.bind(&mut g).unwrap();
    let xv = g.constant(x).unwrap();
    let a = m.layout.blocks[0].self_treat;
    let (out, w) = m.masked_multihead(&mut g, &p, a, xv, xv, 1).unwrap();
    // row 1 scores: q=(0,2)·k0=(1,0) -> 0, ·k1=(0,2) -> 4, scaled by 1/√2
    let e = (4.0 / 2f64.sqrt()).exp();
    let (w0, w1) = (1.0 / (1.0 + e), e / (1.0 + e));
    let wd = g.value(w[0]).data();
    assert_eq!(&wd[..2], &[1.0, 0.0]);
    assert!((wd[2] - w0).abs() < 1e-15 && (wd[3] - w1).abs() < 1e-15);
    let o = g.value(out).data();
    assert_eq!(&o[..2], &[1.0, 0.0]);
    assert!((o[2] - w0).abs() < 1e-15);
    assert!((o[3] - 2.0 * w1).abs() < 1e-15);
}

#[test]
fn attention_rows_are_causal_simplexes() {
    let m = toy_model(5, 3, 3, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let units: Vec<_> = (0..3).map(|_| toy_unit(&mut rng, 5, 3, 3)).collect();
    let refs: Vec<&Trajectory> = units.iter().collect();
    for w in m.first_layer_attention(&refs).unwrap() {
        assert_eq!(w.shape(), &[3, 5, 5]);
        for (r, row) in w.data().chunks(5).enumerate() {
            let t = r % 5;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[t + 1..].iter().all(|&v| v == 0.0));
        }
    }
}

fn ln_rows(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let m = r.iter().sum::<f64>() / d as f64;
            let v = r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            r.iter().map(move |a| (a - m) / (v + LN_EPS).sqrt()).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn zero_sublayers_reduce_block_to_layer_norms() {
    let mut m = toy_model(3, 2, 2, 8);
    let names: Vec<String> = m.params().names().to_vec();
    for (i, n) in names.iter().enumerate() {
        if n.starts_with("block0.") && !n.contains("norm") {
            m.params_mut().tensors_mut()[i].data_mut().fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tin: Vec<f64> = (0..6 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fin: Vec<f64> = (0..6 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let p = m.bind(&mut g).unwrap();
    let tv = g.constant(Tensor::new(vec![6, 8], tin.clone()).unwrap()).unwrap();
    let fv = g.constant(Tensor::new(vec![6, 8], fin.clone()).unwrap()).unwrap();
    let b = m.layout.blocks[0];
    let (t2, f2) = m.block(&mut g, &p, &b, tv, fv, 2).unwrap();
    let expect = |x: &[f64]| ln_rows(&ln_rows(&ln_rows(x, 8), 8), 8);
    for (got, want) in [(g.value(t2).data(), expect(&tin)), (g.value(f2).data(), expect(&fin))] {
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // applying the same block again is pure
    let (t3, _) = m.block(&mut g, &p, &b, tv, fv, 2).unwrap();
    assert_eq!(g.value(t2).data(), g.value(t3).data());
}

#[test]
fn head_shapes_and_simplexes() {
    let m = toy_model(4, 3, 2, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let units: Vec<_> = (0..5).map(|_| toy_unit(&mut rng, 4, 3, 2)).collect();
    let refs: Vec<&Trajectory> = units.iter().collect();
    let mut g = Graph::new();
    let p = m.bind(&mut g).unwrap();
    let out = m.forward(&mut g, &p, &refs).unwrap();
    assert_eq!(g.value(out.propensity).shape(), &[20, 2]);
    assert_eq!(g.value(out.blip).shape(), &[20, 1]);
    assert_eq!(g.value(out.cond_mean).shape(), &[20, 1]);
    let pred = Predictions::from_graph(&g, &out, 2);
    for u in 0..5 {
        for t in 1..=4 {
            let e = pred.propensity(u, t);
            assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(e.iter().all(|&v| v > 0.0));
            assert_eq!(pred.blip_for_arm(u, t, 0), 0.0);
        }
    }
}

#[test]
fn predict_chunks_match_single_batch() {
    let m = toy_model(3, 3, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let units: Vec<_> = (0..7).map(|_| toy_unit(&mut rng, 3, 3, 3)).collect();
    let refs: Vec<&Trajectory> = units.iter().collect();
    let a = m.predict(&refs, 100).unwrap();
    let b = m.predict(&refs, 3).unwrap();
    assert_eq!(a.n_units, 7);
    for u in 0..7 {
        for t in 1..=3 {
            assert!((a.cond_mean(u, t) - b.cond_mean(u, t)).abs() < 1e-12);
            for (x, y) in a.blip(u, t).iter().zip(b.blip(u, t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rejects_mismatched_units() {
    let m = toy_model(3, 3, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let short = toy_unit(&mut rng, 2, 3, 2);
    assert!(m.predict(&[&short], 8).is_err());
    let mut bad = toy_unit(&mut rng, 3, 3, 2);
    bad.treatments[0] = 7;
    assert!(m.predict(&[&bad], 8).is_err());
}

#[test]
fn forward_cost_grows_as_attention_plus_projection() {
    // Counted multiply-accumulates per forward pass, one unit.
    let macs = |t: usize, d: usize| {
        let arch = ArchConfig {
            d_model: d,
            n_heads: 2,
            n_layers: 1,
            d_ff: d,
            dropout_p: 0.0,
            n_covariates: 3,
            n_treatments: 2,
            horizon: t,
        };
        let m = Terra::new(arch, Scaler::identity(3), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = toy_unit(&mut rng, t, 3, 2);
        let mut g = Graph::new();
        let p = m.bind(&mut g).unwrap();
        m.forward(&mut g, &p, &[&u]).unwrap();
        g.forward_macs() as f64
    };
    // Exact count from the layout: 4 attentions × (4 projections T·d² + 2 bmm T²·d),
    // 2 FF × 2 T·d², encoders T·(K+1+p)·d, heads T·(3·2d·d + d·(K + 1 + K−1)).
    for (t, d) in [(4, 8), (16, 8), (4, 32), (32, 16)] {
        let (tf, df) = (t as f64, d as f64);
        let expected = 4.0 * (4.0 * tf * df * df + 2.0 * tf * tf * df)
            + 2.0 * 2.0 * tf * df * df
            + tf * (3.0 + 3.0) * df
            + tf * (6.0 * df * df + df * 4.0);
        assert_eq!(macs(t, d), expected, "T={t}, d={d}");
    }
    // Quadratic in T once T ≫ d, quadratic in d once d ≫ T.
    let r_t = macs(256, 4) / macs(128, 4);
    assert!(r_t > 3.5 && r_t <= 4.0, "{r_t}");
    let r_d = macs(2, 128) / macs(2, 64);
    assert!(r_d > 3.5 && r_d <= 4.0, "{r_d}");
}

#[test]
fn same_seed_same_model() {
    let a = toy_model(3, 2, 2, 99);
    let b = toy_model(3, 2, 2, 99);
    let c = toy_model(3, 2, 2, 100);
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn golden_forward_output() {
    // Regression pin for a fixed seed; regenerate only on a deliberate
    // architecture change.
    let m = toy_model(3, 2, 3, 2024);
    let units = [Trajectory {
        covariates: vec![vec![0.5, -1.0], vec![1.0, 0.0], vec![-0.5, 2.0]],
        treatments: vec![1, 0, 2],
        outcome: 1.0,
        true_blips: None,
    }];
    let refs: Vec<&Trajectory> = units.iter().collect();
    let pred = m.predict(&refs, 1).unwrap();
    let mut got = Vec::new();
    for t in 1..=3 {
        got.extend_from_slice(pred.propensity(0, t));
        got.push(pred.cond_mean(0, t));
        got.extend_from_slice(pred.blip(0, t));
    }
    let golden: Vec<f64> = include_str!("golden_forward.txt")
        .split_whitespace()
        .map(|w| w.parse().unwrap())
        .collect();
    if golden.is_empty() {
        panic!("golden values: {}", got.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" "));
    }
    assert_eq!(got.len(), golden.len());
    for (a, b) in got.iter().zip(&golden) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = toy_model(3, 2, 3, 7);
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with(CHECKPOINT_MAGIC));
    let back = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.scaler(), m.scaler());
    assert_eq!(back.arch(), m.arch());
}

#[test]
fn checkpoint_rejects_corruption() {
    let m = toy_model(2, 2, 2, 7);
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(read_checkpoint(text.replace("terra-checkpoint 1", "terra-checkpoint 9").as_bytes()).is_err());
    assert!(read_checkpoint(text.replace("embed_x.weight", "embed_y.weight").as_bytes()).is_err());
    let truncated: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
    assert!(read_checkpoint(truncated.as_bytes()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn heads_ignore_current_and_future_inputs(seed in 0u64..1000, t in 1usize..=4, dz in 0usize..3, dx in -3.0f64..3.0) {
        let horizon = 4;
        let m = toy_model(horizon, 3, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let base = toy_unit(&mut rng, horizon, 3, 3);
        let mut pert = base.clone();
        // Heads at t read positions < t: X_{t-1} is allowed, Z_t and X_s (s ≥ t) are not.
        pert.treatments[t - 1] = (pert.treatments[t - 1] + dz + 1) % 3;
        for s in t..horizon {
            pert.covariates[s][0] += dx;
            pert.treatments[s] = (pert.treatments[s] + 1) % 3;
        }
        let a = m.predict(&[&base], 1).unwrap();
        let b = m.predict(&[&pert], 1).unwrap();
        for s in 1..=t {
            prop_assert_eq!(a.propensity(0, s), b.propensity(0, s));
            prop_assert_eq!(a.cond_mean(0, s), b.cond_mean(0, s));
            prop_assert_eq!(a.blip(0, s), b.blip(0, s));
        }
    }
}
