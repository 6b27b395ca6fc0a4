use std::collections::BTreeMap;

use mmda_core::md2a::fuse_modalities;
use mmda_core::metrics::{auc, ScoreRecord};
use mmda_core::synthdata::{apply_missing_mask, default_domains, generate_domain, DomainSpec, GeneratorConfig};
use mmda_core::types::{BatchSample, DomainLabel, EmbeddingBatch, Liveness, ModalityKind, ModalitySet};
use ndarray::{Array1, Array3};

fn cfg(strength: f64, n: usize) -> GeneratorConfig {
    GeneratorConfig {
        n_live: n,
        n_spoof: n,
        spoof_signature_strength: strength,
        ..GeneratorConfig::default()
    }
}

/// 8x8 block means of every channel of every modality.
fn features(s: &BatchSample) -> Array1<f64> {
    let mut f = Vec::new();
    for img in s.images.values() {
        let (h, w, c) = img.dim();
        for ch in 0..c {
            for by in (0..h).step_by(8) {
                for bx in (0..w).step_by(8) {
                    let mut acc = 0.0;
                    for y in by..(by + 8).min(h) {
                        for x in bx..(bx + 8).min(w) {
                            acc += img[[y, x, ch]] as f64;
                        }
                    }
                    f.push(acc / 64.0);
                }
            }
        }
    }
    Array1::from(f)
}

/// Difference-of-class-means probe: weights point from the live mean to the
/// spoof mean, so higher scores mean "more spoof-like".
fn fit_probe(train: &[BatchSample]) -> Array1<f64> {
    let mean = |l: Liveness| {
        let xs: Vec<Array1<f64>> = train.iter().filter(|s| s.label == l).map(features).collect();
        xs.iter().fold(Array1::zeros(xs[0].len()), |a, x| a + x) / xs.len() as f64
    };
    mean(Liveness::Spoof) - mean(Liveness::Live)
}

fn probe_auc(w: &Array1<f64>, test: &[BatchSample]) -> f64 {
    let recs: Vec<ScoreRecord> = test
        .iter()
        .map(|s| ScoreRecord {
            score: features(s).dot(w),
            label: s.label,
            domain: s.domain.clone(),
            modality_mask: s.present,
        })
        .collect();
    auc(&recs).unwrap()
}

#[test]
fn same_seed_is_bit_identical() {
    let spec = &default_domains(3)[1];
    let a = generate_domain(spec, &cfg(0.6, 5)).unwrap();
    let b = generate_domain(spec, &cfg(0.6, 5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 10);
    assert_eq!(a[0].sample_id, format!("{}-live-00000", spec.name));
    let other = DomainSpec { seed: spec.seed + 1, ..spec.clone() };
    assert_ne!(generate_domain(&other, &cfg(0.6, 5)).unwrap()[0].images, a[0].images);
}

#[test]
fn images_have_expected_shapes_and_range() {
    let spec = &default_domains(0)[0];
    for s in generate_domain(spec, &cfg(0.6, 3)).unwrap() {
        assert_eq!(s.present, ModalitySet::FULL);
        for (k, img) in &s.images {
            assert_eq!(img.dim(), (32, 32, k.channels()));
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn default_domains_are_four_distinct_presets() {
    let d = default_domains(0);
    assert_eq!(d.len(), 4);
    for i in 0..4 {
        assert!(d[i].validate().is_ok());
        for j in i + 1..4 {
            assert_ne!(d[i].name, d[j].name);
            assert_ne!(d[i].shift_vector, d[j].shift_vector);
            assert_ne!(d[i].seed, d[j].seed);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let ok = DomainSpec::neutral("A", 1);
    assert!(generate_domain(&DomainSpec { noise_sigma: 1.0, ..ok.clone() }, &cfg(0.5, 1)).is_err());
    assert!(generate_domain(&DomainSpec { noise_sigma: -0.1, ..ok.clone() }, &cfg(0.5, 1)).is_err());
    let bad_gain = DomainSpec {
        sensor_gain: [(ModalityKind::Ir, 0.0)].into_iter().collect(),
        ..ok.clone()
    };
    assert!(generate_domain(&bad_gain, &cfg(0.5, 1)).is_err());
    assert!(generate_domain(&DomainSpec { name: "a/b".into(), ..ok.clone() }, &cfg(0.5, 1)).is_err());
    assert!(generate_domain(&ok, &cfg(1.5, 1)).is_err());
    assert!(generate_domain(&ok, &cfg(0.5, 0)).is_err());
}

#[test]
fn neutral_domains_transfer_a_linear_probe() {
    let c = cfg(0.6, 60);
    let a = generate_domain(&DomainSpec::neutral("A", 11), &c).unwrap();
    let b = generate_domain(&DomainSpec::neutral("B", 12), &c).unwrap();
    let w = fit_probe(&a);
    let transfer = probe_auc(&w, &b);
    assert!(transfer > 0.95, "{transfer}");
}

#[test]
fn zero_strength_is_indistinguishable() {
    let c = cfg(0.0, 150);
    let mut total = 0.0;
    for seed in 0..5 {
        let train = generate_domain(&DomainSpec::neutral("A", 100 + seed), &c).unwrap();
        let test = generate_domain(&DomainSpec::neutral("B", 200 + seed), &c).unwrap();
        total += probe_auc(&fit_probe(&train), &test);
    }
    let mean = total / 5.0;
    assert!((0.45..=0.55).contains(&mean), "{mean}");
}

#[test]
fn separability_grows_with_strength() {
    let mut means = Vec::new();
    for strength in [0.0, 0.5, 1.0] {
        let c = cfg(strength, 40);
        let mut total = 0.0;
        for seed in 0..5 {
            let train = generate_domain(&DomainSpec::neutral("A", 300 + seed), &c).unwrap();
            let test = generate_domain(&DomainSpec::neutral("B", 400 + seed), &c).unwrap();
            total += probe_auc(&fit_probe(&train), &test);
        }
        means.push(total / 5.0);
    }
    assert!(means[0] <= means[1] && means[1] <= means[2], "{means:?}");
}

#[test]
fn large_shifts_move_the_domain_mean_beyond_sample_spread() {
    let c = cfg(0.6, 40);
    let a = generate_domain(&DomainSpec::neutral("A", 5), &c).unwrap();
    let shifted = DomainSpec {
        shift_vector: [(ModalityKind::Rgb, [0.4, 0.2, -0.2, 0.0])].into_iter().collect(),
        ..DomainSpec::neutral("B", 6)
    };
    let b = generate_domain(&shifted, &c).unwrap();
    let stack = |d: &[BatchSample]| {
        let imgs: Vec<&Array3<f32>> = d.iter().map(|s| &s.images[&ModalityKind::Rgb]).collect();
        let n = imgs.len() as f64;
        let mean = imgs.iter().fold(Array3::<f64>::zeros(imgs[0].dim()), |a, x| a + x.mapv(f64::from)) / n;
        let var = imgs
            .iter()
            .fold(Array3::<f64>::zeros(imgs[0].dim()), |a, x| a + (x.mapv(f64::from) - &mean).mapv(|v| v * v))
            / (n - 1.0);
        (mean, var.mapv(f64::sqrt))
    };
    let (ma, sa) = stack(&a);
    let (mb, _) = stack(&b);
    let diff = (&mb - &ma).mapv(f64::abs).mean().unwrap();
    let spread = sa.mean().unwrap();
    assert!(diff > spread, "{diff} vs {spread}");
}

#[test]
fn missing_masks() {
    let data = generate_domain(&DomainSpec::neutral("A", 1), &cfg(0.5, 2)).unwrap();
    let depth = ModalitySet::from_kinds([ModalityKind::Depth]);
    for s in apply_missing_mask(data.clone(), depth).unwrap() {
        assert!(!s.present.contains(ModalityKind::Depth));
        assert!(!s.images.contains_key(&ModalityKind::Depth));
    }
    assert_eq!(apply_missing_mask(data.clone(), ModalitySet::EMPTY).unwrap(), data);
    assert!(apply_missing_mask(data.clone(), ModalitySet::FULL).is_err());

    // Only RGB tokens reach the fused sequence once depth and IR are gone.
    let masked = apply_missing_mask(data, ModalitySet::from_kinds([ModalityKind::Depth, ModalityKind::Ir])).unwrap();
    let per: BTreeMap<ModalityKind, EmbeddingBatch> = ModalityKind::ALL
        .iter()
        .map(|&k| {
            let b = masked.len();
            let e = EmbeddingBatch::new(
                Array3::from_elem((b, 17, 4), 0.5),
                masked.iter().map(|s| s.label).collect(),
                vec![DomainLabel::new("A"); b],
                masked.iter().map(|s| s.sample_id.clone()).collect(),
                vec![ModalitySet::from_kinds([k]); b],
            )
            .unwrap();
            (k, e)
        })
        .collect();
    let present: Vec<ModalitySet> = masked.iter().map(|s| s.present).collect();
    assert_eq!(fuse_modalities(&per, &present).unwrap().n_tokens(), 17);
}
