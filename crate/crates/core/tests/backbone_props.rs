use moase::analysis::count_costs;
use moase::backbone::{
    decode_checkpoint, encode, encode_checkpoint, freeze_partition, predict, pretrain_source, soft_cross_entropy,
    BackboneConfig, FreezeMode, ModelConfig, ModelParams, PretrainConfig,
};
use moase::ctta::{adapt_step, AdaptConfig, AdaptState, AugmentationSet};
use moase::domains::{Dataset, Sample};
use moase::moase::{MoaseConfig, MoaseParams};
use moase::numerics::{finite_diff_check, flatten, rng_from, unflatten, Graph, Tensor};
use moase::params::ParamTree;
use rand::Rng;

fn tiny(image: usize, experts: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image,
            patch: 4,
            dim: 8,
            heads: 2,
            depth: 2,
            classes: 3,
            mlp_hidden: 12,
            adapter_scale: 0.1,
        },
        adapter: MoaseConfig {
            experts,
            hidden: 4,
            ..MoaseConfig::default()
        },
    }
}

fn images(b: usize, side: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[b, side, side], 0.0, 1.0, &mut rng_from(&[seed]))
}

#[test]
fn fresh_adapters_leave_logits_bit_identical() {
    for seed in 0..5 {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, seed);
        assert!(!params.adapters.is_empty());
        let x = images(3, 16, seed + 10);
        let with = predict(&params, &x, &cfg).unwrap();
        let without = predict(&params.without_adapters(), &x, &cfg).unwrap();
        assert_eq!(with.logits, without.logits);
        assert_eq!(with.feature, without.feature);
    }
}

#[test]
fn swapping_images_swaps_logit_rows() {
    let cfg = ModelConfig::default();
    let mut params = ModelParams::init(&cfg, 4);
    let mut rng = rng_from(&[5]);
    params.adapters = (0..cfg.backbone.depth)
        .map(|_| MoaseParams::random(cfg.backbone.dim, &cfg.adapter, 0.3, &mut rng))
        .collect();
    let x = images(4, 16, 6);
    let mut swapped = x.data().to_vec();
    let px = 16 * 16;
    for i in 0..px {
        swapped.swap(i, 2 * px + i);
    }
    let xs = Tensor::new(&[4, 16, 16], swapped).unwrap();
    let a = predict(&params, &x, &cfg).unwrap().logits;
    let b = predict(&params, &xs, &cfg).unwrap().logits;
    let c = cfg.backbone.classes;
    for (row, from) in [(0, 2), (1, 1), (2, 0), (3, 3)] {
        assert_eq!(&b.data()[row * c..(row + 1) * c], &a.data()[from * c..(from + 1) * c]);
    }
}

#[test]
fn small_images_give_five_tokens() {
    let cfg = tiny(8, 2);
    let params = ModelParams::init(&cfg, 1);
    let mut g = Graph::new();
    let x = g.constant(images(3, 8, 2));
    let pv = params.bind(&mut g, false, false);
    let enc = encode(&mut g, x, &pv, &cfg, None).unwrap();
    assert_eq!(g.shape(enc.tokens), &[3, 5, 8]);
    assert_eq!(g.shape(enc.feature), &[3, 8]);
    assert_eq!(g.shape(enc.logits), &[3, 3]);
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 8);
    let mut g = Graph::new();
    let x = g.constant(images(2, 16, 9));
    let pv = params.bind(&mut g, false, false);
    let enc = encode(&mut g, x, &pv, &cfg, None).unwrap();
    assert_eq!(enc.attention.len(), cfg.backbone.depth);
    for &att in &enc.attention {
        let n = cfg.backbone.tokens();
        assert_eq!(g.shape(att), &[2 * cfg.backbone.heads, n, n]);
        for row in g.value(att).data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn adapter_gradients_with_frozen_backbone() {
    let cfg = tiny(8, 2);
    let mut params = ModelParams::init(&cfg, 3);
    let mut rng = rng_from(&[4]);
    params.adapters = (0..cfg.backbone.depth)
        .map(|_| MoaseParams::random(cfg.backbone.dim, &cfg.adapter, 0.5, &mut rng))
        .collect();
    let x = images(2, 8, 5);
    let target = Tensor::new(&[2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
    let adapter_leaves = params.adapters.leaves();
    let (flat, shapes) = flatten(&adapter_leaves);
    let objective = |g: &mut Graph, flat| {
        let parts = unflatten(g, flat, &shapes)?;
        let mut it = parts.into_iter();
        let mut pv = params.bind(g, false, false);
        pv.adapters.iter_mut().for_each(|a| a.visit_mut("", &mut |_, v| *v = it.next().unwrap()));
        let xv = g.constant(x.clone());
        let enc = encode(g, xv, &pv, &cfg, None)?;
        soft_cross_entropy(g, enc.logits, &target)
    };
    let err = finite_diff_check(objective, &flat, 1e-6).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn trainable_count_matches_closed_form() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 1);
    let part = freeze_partition(&params, FreezeMode::AdapterOnly);
    assert_eq!(part.trainable_count(&params), count_costs(&cfg).trainable_params);
    assert_eq!(part.trainable_count(&params), 4944);
    assert!(part.trainable.iter().all(|n| n.starts_with("adapters.")));
    assert!(part.frozen.iter().all(|n| n.starts_with("backbone.")));
}

#[test]
fn no_adapter_means_nothing_to_update() {
    let cfg = tiny(8, 0);
    let params = ModelParams::init(&cfg, 2);
    assert!(freeze_partition(&params, FreezeMode::AdapterOnly).trainable.is_empty());
    let ac = AdaptConfig {
        lr: 0.1,
        augmentations: AugmentationSet::identity(),
        ..AdaptConfig::default()
    };
    let mut state = AdaptState::new(params.clone(), &ac);
    for i in 0..3 {
        adapt_step(&mut state, &images(4, 8, i), &cfg, &ac, 1).unwrap();
    }
    assert_eq!(state.student, params);
    assert_eq!(state.teacher, params);
}

#[test]
fn frozen_parameters_never_move() {
    let cfg = tiny(8, 2);
    let params = ModelParams::init(&cfg, 6);
    let ac = AdaptConfig {
        lr: 0.05,
        ..AdaptConfig::default()
    };
    let mut state = AdaptState::new(params.clone(), &ac);
    for i in 0..5 {
        adapt_step(&mut state, &images(4, 8, 100 + i), &cfg, &ac, 2).unwrap();
    }
    assert_eq!(state.student.backbone, params.backbone);
    assert_eq!(state.teacher.backbone, params.backbone);
    assert_ne!(state.student.adapters, params.adapters);
}

fn separable(n: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = rng_from(&[seed]);
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let base = if label == 0 { 0.2 } else { 0.8 };
            Sample {
                image: (0..side * side).map(|_| base + rng.random_range(-0.05..0.05)).collect(),
                label,
                mask: vec![true; side * side],
            }
        })
        .collect();
    Dataset { side, samples }
}

#[test]
fn separable_toy_pretrains_perfectly_and_deterministically() {
    let mut cfg = tiny(8, 0);
    cfg.backbone.classes = 2;
    let data = separable(60, 8, 3);
    let pc = PretrainConfig {
        epochs: 6,
        batch: 10,
        required_accuracy: 0.0,
        ..PretrainConfig::default()
    };
    let a = pretrain_source(&data, &cfg, &pc, 9).unwrap();
    assert_eq!(a.train_accuracy, 1.0);
    let b = pretrain_source(&data, &cfg, &pc, 9).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 12);
    let bytes = encode_checkpoint(&cfg, &params).unwrap();
    let (cfg2, params2) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(params2, params);
    assert_eq!(encode_checkpoint(&cfg2, &params2).unwrap(), bytes);
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(decode_checkpoint(&bad).is_err());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}
