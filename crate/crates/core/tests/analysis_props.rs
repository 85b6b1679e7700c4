use std::fs;

use moase::analysis::{
    count_costs, domain_distribution, files, instrumented_costs, inter_domain_js, intra_class_divergence, js_divergence,
    kl_divergence, make_report, saliency_split, write_json, AnalysisConfig, RunManifest, SaliencyMode, MANIFEST_VERSION,
};
use moase::backbone::{save_checkpoint, BackboneConfig, ModelConfig, ModelParams};
use moase::ctta::{write_metrics_csv, BankEntry, BatchRecord, FeatureBank, RunMetrics};
use moase::domains::generate_source;
use moase::error::Error;
use moase::moase::{MoaseConfig, SddAxis, Toggles};
use moase::numerics::rng_from;
use proptest::prelude::*;
use rand::Rng;

const LN2: f64 = std::f64::consts::LN_2;
const EPS: f64 = 1e-12;

/// Direct summation with `Q` smoothed by `EPS` and renormalised.
fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let z = 1.0 + EPS * q.len() as f64;
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s += p[i] * (p[i] / ((q[i] + EPS) / z)).ln();
        }
    }
    s
}

fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = (0..p.len()).map(|i| (p[i] + q[i]) / 2.0).collect();
    0.5 * kl_oracle(p, &m) + 0.5 * kl_oracle(q, &m)
}

fn distribution(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(&[seed]);
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn features(rows: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from(&[seed]);
    (0..rows).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

/// `IC = (1 / 2|C|^2) sum_i sum_j |f_i - f_j|^2`, equal to the centroid form.
fn ic_oracle(features: &[Vec<f64>], labels: &[usize], class: usize) -> f64 {
    let members: Vec<&Vec<f64>> = features.iter().zip(labels).filter(|(_, &l)| l == class).map(|(f, _)| f).collect();
    let n = members.len() as f64;
    let mut s = 0.0;
    for a in &members {
        for b in &members {
            s += a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    s / (2.0 * n * n)
}

#[test]
fn divergence_closed_forms() {
    assert_eq!(kl_divergence(&[0.25, 0.75], &[0.25, 0.75]).unwrap(), 0.0);
    assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN2).abs() < 1e-12);
    assert!((js_divergence(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap() - LN2).abs() < 1e-11);
    let js = js_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
    let m = [0.7, 0.3];
    let direct = 0.5 * (0.5 * (0.5f64 / m[0]).ln() + 0.5 * (0.5f64 / m[1]).ln())
        + 0.5 * (0.9 * (0.9f64 / m[0]).ln() + 0.1 * (0.1f64 / m[1]).ln());
    assert!((js - direct).abs() < 1e-11);
}

#[test]
fn divergence_rejects_invalid() {
    assert!(matches!(kl_divergence(&[0.5, 0.5], &[1.0]), Err(Error::Validation(_))));
    assert!(matches!(js_divergence(&[0.5, 0.4], &[0.5, 0.5]), Err(Error::Validation(_))));
    assert!(matches!(js_divergence(&[1.5, -0.5], &[0.5, 0.5]), Err(Error::Validation(_))));
}

proptest! {
    #[test]
    fn divergences_match_oracles(n in 2usize..12, s1 in 0u64..10_000, s2 in 0u64..10_000) {
        let p = distribution(n, s1);
        let q = distribution(n, s2 + 20_000);
        let kl = kl_divergence(&p, &q).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!((kl - kl_oracle(&p, &q)).abs() < 1e-12);
        let pq = js_divergence(&p, &q).unwrap();
        let qp = js_divergence(&q, &p).unwrap();
        prop_assert!((pq - qp).abs() < 1e-12);
        prop_assert!((0.0..=LN2).contains(&pq));
        prop_assert!((pq - js_oracle(&p, &q)).abs() < 1e-12);
    }

    #[test]
    fn domain_distribution_properties(rows in 1usize..20, d in 1usize..10, shift in -5.0f64..5.0, seed in 0u64..1000) {
        let f = features(rows, d, seed);
        let p = domain_distribution(&f).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        let shifted: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let ps = domain_distribution(&shifted).unwrap();
        for (a, b) in p.iter().zip(&ps) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn intra_class_matches_pairwise_oracle(seed in 0u64..1000, c in 0.1f64..4.0, t in -3.0f64..3.0) {
        let f = features(20, 8, seed);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let ic = intra_class_divergence(&f, &labels, 3).unwrap();
        for class in 0..3 {
            prop_assert!((ic.per_class[class] - ic_oracle(&f, &labels, class)).abs() < 1e-12);
        }
        prop_assert!((ic.mean - ic.per_class.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        let moved: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|v| c * v + t).collect()).collect();
        let ic2 = intra_class_divergence(&moved, &labels, 3).unwrap();
        prop_assert!((ic2.mean - c * c * ic.mean).abs() < 1e-9 * (1.0 + ic.mean));
    }
}

#[test]
fn inter_domain_examples() {
    let a = features(10, 6, 1);
    let b = features(10, 6, 2);
    let same = inter_domain_js(&[&a, &a, &a]).unwrap();
    assert_eq!(same, vec![0.0, 0.0]);
    let banks: Vec<Vec<Vec<f64>>> = (0..15).map(|i| features(5, 6, 100 + i)).collect();
    let views: Vec<&[Vec<f64>]> = banks.iter().map(Vec::as_slice).collect();
    let js = inter_domain_js(&views).unwrap();
    assert_eq!(js.len(), 14);
    assert!(js.iter().all(|v| (0.0..=LN2).contains(v)));
    assert!(inter_domain_js(&[&b]).is_err());
}

#[test]
fn intra_class_examples() {
    let same = vec![vec![1.0, 2.0]; 4];
    assert_eq!(intra_class_divergence(&same, &[0, 0, 1, 1], 2).unwrap().mean, 0.0);
    let two = intra_class_divergence(&[vec![-1.0], vec![1.0]], &[0, 0], 1).unwrap();
    assert_eq!(two.per_class, vec![1.0]);
    assert!(matches!(intra_class_divergence(&same, &[0, 0, 0, 0], 2), Err(Error::Validation(_))));
}

fn small_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image: 8,
            patch: 4,
            dim: 8,
            heads: 2,
            depth: 1,
            classes: 4,
            mlp_hidden: 16,
            adapter_scale: 0.1,
        },
        adapter: MoaseConfig {
            experts: 2,
            hidden: 4,
            ..MoaseConfig::default()
        },
    }
}

#[test]
fn saliency_trivial_cases() {
    let cfg = small_model();
    let params = ModelParams::init(&cfg, 3);
    let mut data = generate_source(6, 4);
    for s in &mut data.samples {
        s.image = moase::domains::resize_bilinear(&s.image, 16, 8);
        s.mask = vec![true; 64];
    }
    data.side = 8;
    let full = saliency_split(&params, &data, &cfg, SaliencyMode::HighOnly, 0.25).unwrap();
    assert!((full - 1.0).abs() < 1e-12);

    for s in &mut data.samples {
        s.mask = (0..64).map(|i| i % 3 == 0).collect();
    }
    let hi = saliency_split(&params, &data, &cfg, SaliencyMode::HighOnly, 1.0).unwrap();
    let lo = saliency_split(&params, &data, &cfg, SaliencyMode::LowOnly, 1.0).unwrap();
    assert_eq!(hi, lo);

    data.samples[2].mask.clear();
    assert!(matches!(
        saliency_split(&params, &data, &cfg, SaliencyMode::LowOnly, 0.5),
        Err(Error::Validation(_))
    ));
}

#[test]
fn cost_closed_form_matches_instrumented() {
    let mut rng = rng_from(&[77]);
    for i in 0..5 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                image: [8, 16][rng.random_range(0..2)],
                patch: 4,
                dim: heads * rng.random_range(2..6),
                heads,
                depth: rng.random_range(1..4),
                classes: rng.random_range(2..6),
                mlp_hidden: rng.random_range(4..20),
                adapter_scale: 0.1,
            },
            adapter: MoaseConfig {
                experts: 2 * rng.random_range(0..3),
                hidden: rng.random_range(2..10),
                axis: if i % 2 == 0 { SddAxis::Token } else { SddAxis::Channel },
                toggles: if i == 3 { Toggles::NONE } else { Toggles::FULL },
                ..MoaseConfig::default()
            },
        };
        let params = ModelParams::init(&cfg, i);
        assert_eq!(count_costs(&cfg), instrumented_costs(&params, &cfg).unwrap(), "config {i}: {cfg:?}");
    }
}

#[test]
fn cost_worked_example() {
    let cfg = ModelConfig::default();
    assert_eq!((cfg.adapter.experts, cfg.adapter.hidden, cfg.backbone.dim, cfg.backbone.depth), (4, 8, 32, 2));
    assert_eq!(count_costs(&cfg).trainable_params, 4944);
}

fn fake_metrics(cfg: &ModelConfig, offset: usize) -> RunMetrics {
    let names = ["gaussian_noise@5", "blur@5", "contrast@5"];
    let mut batches = Vec::new();
    let mut bank = FeatureBank::default();
    let mut rng = rng_from(&[offset as u64]);
    for (di, name) in names.iter().enumerate() {
        let mut entry = BankEntry {
            name: name.to_string(),
            domain: di,
            round: 0,
            features: Vec::new(),
            labels: Vec::new(),
        };
        for b in 0..2 {
            batches.push(BatchRecord {
                round: 0,
                domain: di,
                domain_name: name.to_string(),
                batch: b,
                size: 4,
                errors: (di + b + offset) % 5,
                consistency: 0.5,
                hp: 0.0,
            });
            for l in 0..4 {
                entry.features.push((0..cfg.backbone.dim).map(|_| rng.random_range(-1.0..1.0)).collect());
                entry.labels.push(l);
            }
        }
        bank.entries.push(entry);
    }
    moase::ctta::metrics_from_records(batches, bank)
}

#[test]
fn report_is_deterministic_and_names_missing_bank() {
    let dir = tempfile::tempdir().unwrap();
    // The saliency probe draws clean 16x16 images, so keep the default geometry.
    let cfg = ModelConfig::default();
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        label: "full".into(),
        seed: 5,
        model: cfg.clone(),
        analysis: AnalysisConfig {
            saliency_q: 0.25,
            saliency_samples: 4,
        },
    };
    write_json(&dir.path().join(files::MANIFEST), &manifest).unwrap();
    save_checkpoint(&dir.path().join(files::CHECKPOINT), &cfg, &ModelParams::init(&cfg, 1)).unwrap();
    let (m, b) = (fake_metrics(&cfg, 0), fake_metrics(&cfg, 1));
    write_metrics_csv(&dir.path().join(files::METRICS), &m).unwrap();
    write_metrics_csv(&dir.path().join(files::BASELINE_METRICS), &b).unwrap();
    write_json(&dir.path().join(files::BANK), &m.bank).unwrap();
    write_json(&dir.path().join(files::BASELINE_BANK), &b.bank).unwrap();

    let outputs = [files::REPORT, files::DIVERGENCE, files::IC, files::SERIES, files::SALIENCY];
    let r1 = make_report(dir.path()).unwrap();
    let first: Vec<Vec<u8>> = outputs.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    let r2 = make_report(dir.path()).unwrap();
    let second: Vec<Vec<u8>> = outputs.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    assert_eq!(first, second);
    assert_eq!(r1, r2);
    let mean = r1.errors.rows.iter().map(|r| r.method).sum::<f64>() / 3.0;
    assert_eq!(r1.errors.method_mean, mean);
    assert_eq!(r1.errors.gain, r1.errors.baseline_mean - r1.errors.method_mean);

    fs::remove_file(dir.path().join(files::BANK)).unwrap();
    let err = make_report(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Report(_)));
    assert!(err.to_string().contains("feature bank"), "{err}");
}
