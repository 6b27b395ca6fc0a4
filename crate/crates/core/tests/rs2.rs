use mmda_core::autodiff::{Tape, Var};
use mmda_core::gradcheck;
use mmda_core::rng;
use mmda_core::rs2::{
    alignment_loss, classification_loss, min_cosine_distance, nearest_text, rs2_loss, rs2_on_tape, AlignmentVariant,
    DistanceMode, Reduction, Rs2Config, TextConstrainedClassifier,
};
use mmda_core::types::{Liveness, TextSpace};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

const DELTA: f64 = 1e-6;

fn randn(seed: u64, r: usize, c: usize) -> Array2<f64> {
    let mut g = rng::stream(seed, &[&"rs2-test"]);
    Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut g))
}

fn space(seed: u64, m: usize, n_d: usize) -> TextSpace {
    let class_of = (0..m).map(|i| if i % 2 == 0 { Liveness::Live } else { Liveness::Spoof }).collect();
    TextSpace::new(randn(seed, m, n_d), class_of).unwrap()
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Scalar restatement of one cross-entropy term with each log argument
/// floored at delta.
fn ce(t: f64, x: f64) -> f64 {
    -(t * (1.0 - x).clamp(DELTA, 1.0).ln() + (1.0 - t) * x.clamp(DELTA, 1.0).ln())
}

fn y(l: Liveness) -> f64 {
    if l == Liveness::Live {
        1.0
    } else {
        0.0
    }
}

fn smooth(t: f64, eps: f64) -> f64 {
    t * (1.0 - eps) + (1.0 - t) * eps
}

fn align_oracle(v: &Array2<f64>, labels: &[Liveness], ts: &TextSpace, mode: DistanceMode, eps: f64) -> f64 {
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let mut d = f64::INFINITY;
        for j in 0..ts.len() {
            if mode == DistanceMode::NearestOwnClass && ts.class_of[j] != l {
                continue;
            }
            d = d.min(cos_dist(&v.row(i).to_vec(), &ts.embeddings.row(j).to_vec()));
        }
        let target = if mode == DistanceMode::NearestOwnClass { 1.0 } else { y(l) };
        total += ce(smooth(target, eps), d);
    }
    total / labels.len() as f64
}

#[test]
fn distance_examples() {
    let ts = TextSpace::new(array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], vec![Liveness::Live, Liveness::Spoof]).unwrap();
    let d = min_cosine_distance(array![0.0, 3.0, 0.0].view(), &ts, DistanceMode::NearestAny, Liveness::Live).unwrap();
    assert!(d.abs() < 1e-15);
    let d = min_cosine_distance(array![0.0, 0.0, 1.0].view(), &ts, DistanceMode::NearestAny, Liveness::Live).unwrap();
    assert_eq!(d, 1.0);
    assert!(min_cosine_distance(array![0.0, 0.0, 0.0].view(), &ts, DistanceMode::NearestAny, Liveness::Live).is_err());
}

#[test]
fn distance_matches_loop_minimum_over_ten_rows() {
    let ts = space(1, 10, 6);
    let v = randn(2, 1, 6);
    let oracle = (0..10)
        .map(|j| cos_dist(&v.row(0).to_vec(), &ts.embeddings.row(j).to_vec()))
        .fold(f64::INFINITY, f64::min);
    let d = min_cosine_distance(v.row(0), &ts, DistanceMode::NearestAny, Liveness::Live).unwrap();
    assert!((d - oracle).abs() < 1e-12);
}

#[test]
fn analytic_alignment_points() {
    // One live sample with its own caption at cosine distance 0 and 0.5.
    let cfg = Rs2Config {
        label_smoothing: 0.0,
        ..Rs2Config::default()
    };
    let ts = TextSpace::new(array![[1.0, 0.0], [0.0, 1.0]], vec![Liveness::Live, Liveness::Spoof]).unwrap();
    let at_zero = alignment_loss(&array![[2.0, 0.0]], &[Liveness::Live], &ts, &cfg).unwrap();
    assert!(at_zero.abs() < 1e-12, "{at_zero}");
    let half = array![[0.5, 3f64.sqrt() / 2.0]];
    let at_half = alignment_loss(&half, &[Liveness::Live], &ts, &cfg).unwrap();
    assert!((at_half - std::f64::consts::LN_2).abs() < 1e-12, "{at_half}");
}

#[test]
fn smoothed_alignment_matches_scalar_loop() {
    let ts = space(3, 6, 5);
    let v = randn(4, 3, 5);
    let labels = [Liveness::Live, Liveness::Spoof, Liveness::Live];
    for mode in [DistanceMode::NearestOwnClass, DistanceMode::NearestAny] {
        let cfg = Rs2Config {
            label_smoothing: 0.1,
            distance_mode: mode,
            ..Rs2Config::default()
        };
        let got = alignment_loss(&v, &labels, &ts, &cfg).unwrap();
        assert!((got - align_oracle(&v, &labels, &ts, mode, 0.1)).abs() < 1e-12);
    }
}

#[test]
fn classification_matches_scalar_loop_over_visual_and_text() {
    let ts = space(5, 4, 5);
    let v = randn(6, 4, 5);
    let labels = [Liveness::Live, Liveness::Spoof, Liveness::Spoof, Liveness::Live];
    let clf = TextConstrainedClassifier {
        w: Array1::from(vec![0.3, -0.2, 0.5, 0.1, -0.4]),
        b: 0.05,
    };
    let cfg = Rs2Config::default();
    let mut terms = Vec::new();
    let rows = v.rows().into_iter().zip(labels.iter().copied()).chain(ts.embeddings.rows().into_iter().zip(ts.class_of.iter().copied()));
    for (e, l) in rows {
        let p = 1.0 / (1.0 + (-(e.dot(&clf.w) + clf.b)).exp());
        terms.push(ce(smooth(y(l), 0.1), p));
    }
    let oracle = terms.iter().sum::<f64>() / terms.len() as f64;
    let got = classification_loss(&v, &labels, &ts, &clf, &cfg).unwrap();
    assert!((got - oracle).abs() < 1e-12);
    let sum_cfg = Rs2Config {
        reduction: Reduction::Sum,
        ..cfg
    };
    let got_sum = classification_loss(&v, &labels, &ts, &clf, &sum_cfg).unwrap();
    assert!((got_sum - terms.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn classifier_contributions_at_the_edges() {
    // A text-free check through the term itself: y=1, p=0 contributes 0 and
    // y=0, p=0.5 contributes ln 2.
    assert_eq!(ce(1.0, 0.0), 0.0);
    assert!((ce(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(mmda_core::rs2::cross_entropy_term(1.0, 0.0), 0.0);
    assert!((mmda_core::rs2::cross_entropy_term(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn total_is_exact_sum_and_vanilla_drops_the_classifier() {
    let ts = space(7, 6, 4);
    let clf = TextConstrainedClassifier {
        w: Array1::from(vec![0.2, 0.1, -0.3, 0.4]),
        b: -0.1,
    };
    for seed in 0..50 {
        let v = randn(100 + seed, 3, 4);
        let labels = [Liveness::Spoof, Liveness::Live, Liveness::Spoof];
        let l = rs2_loss(&v, &labels, &ts, &clf, &Rs2Config::default()).unwrap();
        assert_eq!(l.total - (l.l_cls + l.l_align), 0.0);
    }
    let cfg = Rs2Config {
        variant: AlignmentVariant::Vanilla,
        ..Rs2Config::default()
    };
    let v = randn(8, 3, 4);
    let l = rs2_loss(&v, &[Liveness::Live, Liveness::Spoof, Liveness::Live], &ts, &clf, &cfg).unwrap();
    assert_eq!(l.l_cls, 0.0);
    assert_eq!(l.total, l.l_align);
    let mc = mmda_core::rs2::combine(0.3, 0.4);
    assert_eq!(mc.total, 0.7);
    assert_eq!(mmda_core::rs2::combine(0.0, 0.0).total, 0.0);
}

#[test]
fn vanilla_uses_hard_targets() {
    let ts = space(9, 4, 3);
    let v = randn(10, 2, 3);
    let labels = [Liveness::Live, Liveness::Spoof];
    let vanilla = Rs2Config {
        variant: AlignmentVariant::Vanilla,
        ..Rs2Config::default()
    };
    let got = alignment_loss(&v, &labels, &ts, &vanilla).unwrap();
    assert!((got - align_oracle(&v, &labels, &ts, DistanceMode::NearestOwnClass, 0.0)).abs() < 1e-12);
}

#[test]
fn rs2_gradients_match_central_differences() {
    let ts = space(11, 4, 4);
    let labels = [Liveness::Live, Liveness::Spoof, Liveness::Live];
    for variant in [AlignmentVariant::Rs2, AlignmentVariant::Smooth, AlignmentVariant::Vanilla] {
        let cfg = Rs2Config {
            variant,
            ..Rs2Config::default()
        };
        let inputs = vec![randn(12, 3, 4), randn(13, 4, 1) * 0.5, Array2::from_elem((1, 1), 0.2)];
        let r = gradcheck::check(&inputs, 1e-4, |t: &mut Tape, v: &[Var]| {
            rs2_on_tape(t, v[0], &labels, &ts, v[1], v[2], &cfg).unwrap().total
        });
        assert!(r.max_rel_err < 1e-3, "{variant:?}: {r:?}");
    }
}

#[test]
fn alignment_increases_with_distance_for_live_targets() {
    let cfg = Rs2Config {
        label_smoothing: 0.0,
        ..Rs2Config::default()
    };
    let ts = TextSpace::new(array![[1.0, 0.0], [0.0, 1.0]], vec![Liveness::Live, Liveness::Spoof]).unwrap();
    let mut prev = -1.0;
    for k in 1..40 {
        // Rotate away from the live caption: d = 1 - cos(theta) in (0, 1).
        let theta = k as f64 * std::f64::consts::FRAC_PI_2 / 40.0;
        let v = array![[theta.cos(), theta.sin()]];
        let l = alignment_loss(&v, &[Liveness::Live], &ts, &cfg).unwrap();
        assert!(l > prev);
        prev = l;
    }
}

proptest! {
    #[test]
    fn distance_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
        let ts = space(seed, 6, 4);
        let v = randn(seed + 1, 1, 4);
        let a = min_cosine_distance(v.row(0), &ts, DistanceMode::NearestAny, Liveness::Live).unwrap();
        let scaled = &v * c;
        let b = min_cosine_distance(scaled.row(0), &ts, DistanceMode::NearestAny, Liveness::Live).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn nearest_index_survives_text_rescaling(seed in 0u64..1000) {
        let ts = space(seed, 6, 4);
        let mut g = rng::stream(seed, &[&"rescale"]);
        let mut scaled = ts.embeddings.clone();
        for mut r in scaled.rows_mut() {
            let k: f64 = g.random_range(0.1..10.0);
            r.mapv_inplace(|x| x * k);
        }
        let ts2 = TextSpace::new(scaled, ts.class_of.clone()).unwrap();
        let v = randn(seed + 2, 1, 4);
        for mode in [DistanceMode::NearestAny, DistanceMode::NearestOwnClass] {
            let a = nearest_text(v.row(0), &ts, mode, Liveness::Spoof).unwrap().1;
            let b = nearest_text(v.row(0), &ts2, mode, Liveness::Spoof).unwrap().1;
            prop_assert_eq!(a, b);
        }
    }
}
