use moase::backbone::{predict, BackboneConfig, FreezeMode, ModelConfig, ModelParams};
use moase::ctta::{
    adapt_step, consistency_loss, ema_update, hp_loss, pseudo_label, run_stream, AdaptConfig, AdaptState, Augmentation,
    AugmentationSet,
};
use moase::domains::{build_stream, CorruptionKind, StreamSpec};
use moase::error::Error;
use moase::moase::{MoaseConfig, MoaseParams, Toggles};
use moase::numerics::{mix_seed, rng_from, Graph, Tensor};
use moase::params::ParamTree;
use proptest::prelude::*;
use rand::Rng;

fn small() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            dim: 8,
            depth: 1,
            mlp_hidden: 16,
            ..BackboneConfig::default()
        },
        adapter: MoaseConfig {
            experts: 2,
            hidden: 4,
            ..MoaseConfig::default()
        },
    }
}

fn batch(b: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[b, 16, 16], 0.0, 1.0, &mut rng_from(&[seed]))
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn random_adapters(cfg: &ModelConfig, seed: u64, std: f64) -> Vec<MoaseParams> {
    let mut rng = rng_from(&[seed]);
    (0..cfg.backbone.depth)
        .map(|_| MoaseParams::random(cfg.backbone.dim, &cfg.adapter, std, &mut rng))
        .collect()
}

#[test]
fn identity_view_gives_plain_softmax() {
    let cfg = small();
    let mut teacher = ModelParams::init(&cfg, 1);
    teacher.adapters = random_adapters(&cfg, 2, 0.3);
    let x = batch(3, 3);
    let p = pseudo_label(&teacher, &x, &AugmentationSet::identity(), &cfg, 0).unwrap();
    let logits = predict(&teacher, &x, &cfg).unwrap().logits;
    let expected: Vec<f64> = logits.data().chunks(4).flat_map(softmax).collect();
    assert_eq!(p.probs.data(), &expected[..]);

    let twice = AugmentationSet {
        views: vec![Augmentation::IDENTITY, Augmentation::IDENTITY],
    };
    assert_eq!(pseudo_label(&teacher, &x, &twice, &cfg, 0).unwrap().probs, p.probs);
}

#[test]
fn flip_pair_is_the_average_of_both_passes() {
    let cfg = small();
    let teacher = ModelParams::init(&cfg, 4);
    let x = batch(2, 5);
    let flip = Augmentation {
        flip: true,
        ..Augmentation::IDENTITY
    };
    let augs = AugmentationSet {
        views: vec![Augmentation::IDENTITY, flip],
    };
    let p = pseudo_label(&teacher, &x, &augs, &cfg, 0).unwrap();
    let a = predict(&teacher, &x, &cfg).unwrap().logits;
    let b = predict(&teacher, &flip.apply(&x, 0).unwrap(), &cfg).unwrap().logits;
    for j in 0..2 {
        let (sa, sb) = (softmax(&a.data()[j * 4..j * 4 + 4]), softmax(&b.data()[j * 4..j * 4 + 4]));
        for c in 0..4 {
            assert!((p.probs.data()[j * 4 + c] - (sa[c] + sb[c]) / 2.0).abs() < 1e-12);
        }
        assert!((p.probs.data()[j * 4..j * 4 + 4].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_ne!(a.data()[..4], b.data()[..4], "input should not be mirror-symmetric");
    let empty = AugmentationSet { views: vec![] };
    assert!(matches!(pseudo_label(&teacher, &x, &empty, &cfg, 0), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn consistency_matches_direct_sum(b in 1usize..5, c in 2usize..6, seed in 0u64..1000) {
        let mut rng = rng_from(&[seed]);
        let logits = Tensor::randn(&[b, c], 2.0, &mut rng);
        let mut p = vec![0.0; b * c];
        for row in p.chunks_mut(c) {
            row.iter_mut().for_each(|v| *v = rng.random::<f64>());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let mut direct = 0.0;
        for j in 0..b {
            let z = &logits.data()[j * c..(j + 1) * c];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for k in 0..c {
                direct -= p[j * c + k] * (z[k] - lse);
            }
        }
        direct /= b as f64;
        let mut g = Graph::new();
        let lv = g.constant(logits);
        let loss = consistency_loss(&mut g, lv, &Tensor::new(&[b, c], p).unwrap()).unwrap();
        prop_assert!((g.value(loss).item().unwrap() - direct).abs() < 1e-12);
    }
}

#[test]
fn hp_loss_values_and_gradient() {
    let cfg = MoaseConfig {
        experts: 2,
        hidden: 1,
        ..MoaseConfig::default()
    };
    let mut rng = rng_from(&[7]);
    let zero = MoaseParams::init(1, &cfg, &mut rng).map("", &mut |_, t: &Tensor| Tensor::zeros(t.shape()));
    let mut one = zero.clone();
    one.experts[1].w_up.data_mut()[0] = 2.0;
    let mut g = Graph::new();
    let sv = vec![one.bind(&mut g, true)];
    let l = hp_loss(&mut g, &sv, &[zero.clone()], 1.0).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 2.0);
    let mut g = Graph::new();
    let sv = vec![zero.bind(&mut g, true)];
    let l = hp_loss(&mut g, &sv, &[zero.clone()], 1.0).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);

    let big = MoaseConfig::default();
    for mu in [1.0, 3.7] {
        let s = MoaseParams::random(6, &big, 1.0, &mut rng);
        let t = MoaseParams::random(6, &big, 1.0, &mut rng);
        let mut g = Graph::new();
        let sv = s.bind(&mut g, true);
        let l = hp_loss(&mut g, std::slice::from_ref(&sv), std::slice::from_ref(&t), mu).unwrap();
        let grads = g.backward(l).unwrap();
        for (e, (se, te)) in sv.experts.iter().zip(&t.experts).enumerate() {
            for ((&v, tv), sval) in se.leaves().into_iter().zip(te.leaves()).zip(s.experts[e].leaves()) {
                let gr = grads.get(v).unwrap();
                for i in 0..gr.len() {
                    let want = mu * (sval.data()[i] - tv.data()[i]);
                    assert!((gr.data()[i] - want).abs() < 1e-12);
                }
            }
        }
        for &v in sv.gate.leaves() {
            assert!(grads.get(v).is_none_or(|gr| gr.data().iter().all(|&x| x == 0.0)));
        }
    }
    let mut g = Graph::new();
    let sv = vec![zero.bind(&mut g, true)];
    assert!(matches!(hp_loss(&mut g, &sv, &[], 1.0), Err(Error::Shape(_))));
}

#[test]
fn ema_formula_fixed_point_and_decay() {
    let cfg = small();
    let base = ModelParams::init(&cfg, 3);
    let mut teacher = base.clone();
    teacher.adapters[0].experts[0].w_up.data_mut()[0] = 1.0;
    let student = base.clone();
    ema_update(&mut teacher, &student, 0.999, FreezeMode::AdapterOnly);
    assert_eq!(teacher.adapters[0].experts[0].w_up.data()[0], 0.999);

    let mut fixed = base.clone();
    ema_update(&mut fixed, &base, 0.999, FreezeMode::AdapterOnly);
    assert_eq!(fixed, base);

    let mut teacher = base.clone();
    teacher.adapters = random_adapters(&cfg, 8, 1.0);
    let mut constant = base.clone();
    constant.adapters = random_adapters(&cfg, 9, 1.0);
    let dist = |a: &ModelParams, b: &ModelParams| -> f64 {
        a.adapters.leaves().iter().zip(b.adapters.leaves()).map(|(x, y)| {
            x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
        }).sum::<f64>().sqrt()
    };
    let d0 = dist(&teacher, &constant);
    for t in 1..=200 {
        ema_update(&mut teacher, &constant, 0.999, FreezeMode::AdapterOnly);
        if t % 50 == 0 {
            let want = 0.999f64.powi(t) * d0;
            assert!((dist(&teacher, &constant) - want).abs() < 1e-9 * d0, "step {t}");
        }
    }
    assert_eq!(teacher.backbone, base.backbone);
}

#[test]
fn prediction_comes_from_the_pre_update_teacher() {
    let cfg = small();
    let ac = AdaptConfig {
        lr: 1e-2,
        ..AdaptConfig::default()
    };
    let mut state = AdaptState::new(ModelParams::init(&cfg, 5), &ac);
    for t in 0..4 {
        let x = batch(4, 20 + t);
        let before = state.teacher.clone();
        let student_before = state.student.clone();
        let expected = pseudo_label(&before, &x, &ac.augmentations, &cfg, mix_seed(&[11, t])).unwrap();
        let out = adapt_step(&mut state, &x, &cfg, &ac, 11).unwrap();
        assert_eq!(out.probs, expected.probs);
        assert_eq!(out.feature, expected.feature);
        // the teacher only moves through the EMA of the updated student
        let mut ema = before.clone();
        ema_update(&mut ema, &state.student, ac.alpha, ac.freeze);
        assert_eq!(state.teacher, ema);
        assert_ne!(state.student.adapters, student_before.adapters);
    }
}

#[test]
fn zero_learning_rate_is_the_frozen_source() {
    let cfg = small();
    let source = ModelParams::init(&cfg, 6);
    let ac = AdaptConfig {
        lr: 0.0,
        ..AdaptConfig::default()
    };
    let mut state = AdaptState::new(source.clone(), &ac);
    for t in 0..3 {
        let x = batch(4, 40 + t);
        let frozen = pseudo_label(&source.without_adapters(), &x, &ac.augmentations, &cfg, mix_seed(&[2, t])).unwrap();
        let out = adapt_step(&mut state, &x, &cfg, &ac, 2).unwrap();
        assert_eq!(out.probs, frozen.probs);
    }
    assert_eq!(state.student, source);
    assert_eq!(state.teacher, source);
}

#[test]
fn huge_mu_pulls_student_toward_teacher() {
    let cfg = small();
    let run = |mu: f64| {
        let ac = AdaptConfig {
            lr: 1e-2,
            mu,
            ..AdaptConfig::default()
        };
        let mut source = ModelParams::init(&cfg, 7);
        source.adapters = random_adapters(&cfg, 8, 0.2);
        let mut state = AdaptState::new(source, &ac);
        let mut rng = rng_from(&[9]);
        for e in state.student.adapters.iter_mut().flat_map(|a| a.experts.iter_mut()) {
            e.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05)));
        }
        adapt_step(&mut state, &batch(4, 50), &cfg, &ac, 3).unwrap();
        let mut sq = 0.0;
        for (s, t) in state.student.adapters.iter().zip(&state.teacher.adapters) {
            for (se, te) in s.experts.iter().zip(&t.experts) {
                for (a, b) in se.leaves().into_iter().zip(te.leaves()) {
                    sq += a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                }
            }
        }
        sq.sqrt()
    };
    assert!(run(1e6) < run(0.0));
}

fn tiny_stream(rounds: usize) -> StreamSpec {
    StreamSpec {
        kinds: vec![CorruptionKind::GaussianNoise, CorruptionKind::Contrast],
        severities: vec![3],
        per_domain: 16,
        source_count: 8,
        rounds,
    }
}

#[test]
fn stream_with_zero_lr_matches_baseline() {
    let mut cfg = small();
    cfg.adapter.toggles = Toggles::NONE;
    let stream = build_stream(&tiny_stream(2), 4).unwrap();
    let source = ModelParams::init(&cfg, 10).without_adapters();
    let ac = AdaptConfig {
        lr: 0.0,
        ..AdaptConfig::default()
    };
    let run = run_stream(&source, &stream, &cfg, &ac, 4).unwrap();
    assert_eq!(run.method.domain_errors(), run.baseline.domain_errors());
    assert_eq!(run.method.batches, run.baseline.batches);
    assert_eq!(run.method.bank, run.baseline.bank);
    assert_eq!(run.gain(), 0.0);
    assert_eq!(run.method.segments.len(), 4);
}

#[test]
fn stream_is_deterministic_and_gain_is_a_difference() {
    let cfg = small();
    let stream = build_stream(&tiny_stream(1), 5).unwrap();
    let source = ModelParams::init(&cfg, 11).without_adapters();
    let ac = AdaptConfig {
        lr: 1e-2,
        ..AdaptConfig::default()
    };
    let a = run_stream(&source, &stream, &cfg, &ac, 5).unwrap();
    let b = run_stream(&source, &stream, &cfg, &ac, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.gain(), a.baseline.mean_error() - a.method.mean_error());
    let errs = a.method.domain_errors();
    assert_eq!(a.method.mean_error(), errs.iter().map(|e| e.1).sum::<f64>() / errs.len() as f64);

    let mut empty = stream.clone();
    empty.domains.clear();
    assert!(matches!(run_stream(&source, &empty, &cfg, &ac, 5), Err(Error::Config(_))));
}
