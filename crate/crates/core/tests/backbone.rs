use mmda_core::backbone::{encode_caption, encode_image, encode_text, encode_visual, trigram_counts, FrozenEncoderParams};
use mmda_core::rng;
use mmda_core::types::{make_batch, BatchSample, CaptionSet, DomainLabel, Liveness, ModalityKind, ModalitySet};
use ndarray::{Array1, Array3};
use proptest::prelude::*;
use rand::Rng as _;

fn params() -> FrozenEncoderParams {
    FrozenEncoderParams::generate(7, 16, 8, 32, 32).unwrap()
}

fn random_image(g: &mut rng::Rng, kind: ModalityKind) -> Array3<f32> {
    Array3::from_shape_fn((32, 32, kind.channels()), |_| g.random::<f32>())
}

fn sample(img: Array3<f32>, kind: ModalityKind, id: &str) -> BatchSample {
    BatchSample {
        images: [(kind, img)].into_iter().collect(),
        present: ModalitySet::from_kinds([kind]),
        domain: DomainLabel::new("A"),
        label: Liveness::Live,
        sample_id: id.into(),
    }
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let m = v.sum() / v.len() as f64;
    let c = v.mapv(|x| x - m);
    let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    c / n
}

#[test]
fn token_count_and_unit_norm() {
    let p = params();
    assert_eq!(p.n_tokens(), 17);
    let mut g = rng::stream(1, &[&"backbone-it"]);
    for kind in ModalityKind::ALL {
        let batch = make_batch(vec![
            sample(random_image(&mut g, kind), kind, "a"),
            sample(random_image(&mut g, kind), kind, "b"),
        ])
        .unwrap();
        let e = encode_visual(&batch, kind, &p).unwrap();
        assert_eq!(e.tokens.dim(), (2, 17, 16));
        for tok in e.tokens.lanes(ndarray::Axis(2)) {
            assert!((tok.dot(&tok).sqrt() - 1.0).abs() < 1e-5);
        }
        assert_eq!(e.present, vec![ModalitySet::from_kinds([kind]); 2]);
    }
}

#[test]
fn zero_image_yields_normalized_position_embeddings() {
    let p = params();
    for kind in ModalityKind::ALL {
        let tokens = encode_image(&Array3::zeros((32, 32, kind.channels())), kind, &p).unwrap();
        for t in 0..17 {
            let want = unit(p.pos_embed.row(t).to_owned());
            let err = (&tokens.row(t) - &want).mapv(f64::abs).fold(0.0f64, |m, x| m.max(*x));
            assert!(err < 1e-12, "{kind} token {t}: {err}");
        }
    }
}

#[test]
fn deterministic_and_seed_dependent() {
    let mut g = rng::stream(2, &[&"backbone-it"]);
    let img = random_image(&mut g, ModalityKind::Rgb);
    let a = encode_image(&img, ModalityKind::Rgb, &params()).unwrap();
    let b = encode_image(&img, ModalityKind::Rgb, &params()).unwrap();
    assert_eq!(a, b);
    assert_eq!(params().to_bytes(), params().to_bytes());
    let other = FrozenEncoderParams::generate(8, 16, 8, 32, 32).unwrap();
    assert_ne!(encode_image(&img, ModalityKind::Rgb, &other).unwrap(), a);
    // Modalities use separate projections.
    assert_ne!(p_proj(ModalityKind::Depth), p_proj(ModalityKind::Ir));
}

fn p_proj(kind: ModalityKind) -> Vec<f64> {
    params().patch_proj[&kind].iter().cloned().collect()
}

#[test]
fn shape_errors() {
    assert!(FrozenEncoderParams::generate(1, 16, 8, 30, 32).is_err());
    assert!(FrozenEncoderParams::generate(1, 16, 0, 32, 32).is_err());
    let p = params();
    assert!(encode_image(&Array3::zeros((30, 32, 3)), ModalityKind::Rgb, &p).is_err());
    assert!(encode_image(&Array3::zeros((32, 32, 1)), ModalityKind::Rgb, &p).is_err());
    assert!(encode_image(&Array3::zeros((40, 40, 3)), ModalityKind::Rgb, &p).is_err());
    let batch = make_batch(vec![sample(Array3::zeros((32, 32, 1)), ModalityKind::Depth, "d")]).unwrap();
    assert!(encode_visual(&batch, ModalityKind::Rgb, &p).is_err());
}

#[test]
fn text_space_counts_and_norms() {
    let p = params();
    let ts = encode_text(&CaptionSet::default(), &p).unwrap();
    assert_eq!(ts.len(), 10);
    assert_eq!(ts.class_of.iter().filter(|c| **c == Liveness::Live).count(), 5);
    for row in ts.embeddings.rows() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
    }
    let twice = CaptionSet::new(vec!["a real face".into(), "a real face".into()], vec!["a mask".into()]).unwrap();
    let ts = encode_text(&twice, &p).unwrap();
    assert_eq!(ts.embeddings.row(0), ts.embeddings.row(1));
    assert!(trigram_counts("   ").is_err());
    assert!(encode_caption("", &p).is_err());
    assert!(CaptionSet::new(vec!["".into()], vec!["x".into()]).is_err());
}

#[test]
fn ten_caption_groups_give_distinct_spaces() {
    let p = params();
    let subjects = ["face", "person", "user", "subject", "visitor", "portrait", "head", "customer", "human", "individual"];
    let spaces: Vec<_> = subjects
        .iter()
        .map(|s| {
            let set = CaptionSet::new(
                vec![format!("a real {s}"), format!("this is a bonafide {s}")],
                vec![format!("a printed {s}"), format!("a replayed {s} on a screen")],
            )
            .unwrap();
            encode_text(&set, &p).unwrap()
        })
        .collect();
    for i in 0..spaces.len() {
        for j in i + 1..spaces.len() {
            let d = (&spaces[i].embeddings - &spaces[j].embeddings).mapv(f64::abs);
            for row in d.rows() {
                assert!(row.fold(0.0f64, |m, x| m.max(*x)) > 0.0, "groups {i} and {j}");
            }
        }
    }
}

#[test]
fn related_captions_are_closer_than_unrelated_ones() {
    let p = params();
    let a = encode_caption("This is an example of a real face", &p).unwrap();
    let b = encode_caption("This is an example of a spoof face", &p).unwrap();
    let c = encode_caption("zebra quantum marmalade", &p).unwrap();
    assert!(a.dot(&b) > a.dot(&c));
}

proptest! {
    #[test]
    fn every_caption_embeds_to_unit_norm(s in "[a-zA-Z ]{1,40}") {
        prop_assume!(!s.trim().is_empty());
        let e = encode_caption(&s, &params()).unwrap();
        prop_assert!((e.dot(&e).sqrt() - 1.0).abs() < 1e-5);
    }
}
