use moase::domains::{build_stream, corrupt, generate_source, source_dataset, CorruptionKind, StreamSpec, MASK_COVERAGE};
use proptest::prelude::*;

#[test]
fn four_samples_cover_every_class() {
    let d = generate_source(4, 17);
    let mut labels = d.labels();
    labels.sort();
    assert_eq!(labels, vec![0, 1, 2, 3]);
    assert_eq!(generate_source(4, 17), d);
}

#[test]
fn masks_cover_between_five_and_sixty_percent() {
    let d = generate_source(400, 3);
    let px = (d.side * d.side) as f64;
    assert_eq!(MASK_COVERAGE, (0.05, 0.60));
    for s in &d.samples {
        let cover = s.mask.iter().filter(|&&m| m).count() as f64 / px;
        assert!((0.05..=0.60).contains(&cover), "coverage {cover}");
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn corruption_preserves_labels_masks_and_range(kind in 0usize..8, severity in 1u8..=5, seed in 0u64..500) {
        let kind = CorruptionKind::ALL[kind];
        let clean = generate_source(6, seed);
        let a = corrupt(&clean, kind, severity, seed).unwrap();
        prop_assert_eq!(a.labels(), clean.labels());
        for (x, y) in a.samples.iter().zip(&clean.samples) {
            prop_assert_eq!(&x.mask, &y.mask);
            prop_assert!(x.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let b = corrupt(&clean, kind, severity, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn repeated_rounds_visit_every_segment_in_order() {
    let spec = StreamSpec {
        kinds: vec![
            CorruptionKind::Blur,
            CorruptionKind::Contrast,
            CorruptionKind::ShotNoise,
            CorruptionKind::Pixelate,
        ],
        per_domain: 8,
        source_count: 8,
        rounds: 3,
        ..StreamSpec::default()
    };
    let stream = build_stream(&spec, 2).unwrap();
    let order: Vec<(usize, usize)> = stream.segments().map(|(r, i, _)| (r, i)).collect();
    let expected: Vec<(usize, usize)> = (0..3).flat_map(|r| (0..4).map(move |i| (r, i))).collect();
    assert_eq!(order, expected);
}

#[test]
fn default_stream_shape_and_disjointness() {
    let spec = StreamSpec::default();
    assert_eq!((spec.kinds.len(), spec.severities.clone(), spec.per_domain), (8, vec![5], 200));
    let stream = build_stream(&spec, 1).unwrap();
    assert_eq!(stream.domains.len(), 8);
    assert!(stream.domains.iter().all(|d| d.severity == 5 && d.data.len() == 200));
    assert_eq!(stream.source, source_dataset(spec.source_count, 1));
    let source: std::collections::HashSet<Vec<u64>> =
        stream.source.samples.iter().map(|s| s.image.iter().map(|v| v.to_bits()).collect()).collect();
    for d in &stream.domains {
        for s in &d.data.samples {
            let bits: Vec<u64> = s.image.iter().map(|v| v.to_bits()).collect();
            assert!(!source.contains(&bits), "{} reuses a source image", d.name());
        }
    }
}
