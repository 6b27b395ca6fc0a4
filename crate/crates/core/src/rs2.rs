//! Soft alignment of visual embeddings to a frozen text space.
//!
//! * distance: `d_i = min_j (1 - cos(v_i, t_j))` over the selected text rows;
//! * alignment loss: `-(y ln(1 - d) + (1 - y) ln d)` with smoothed targets;
//! * classification loss: the same cross-entropy form over `p = P(spoof)`
//!   from a single affine classifier shared by visual and text embeddings;
//! * total: `l_cls + l_align` with unit weights.
//!
//! Labels follow `y = 1` live, `y = 0` spoof, and `p` is the spoof
//! probability, so `y ln(1 - p)` rewards low spoof probability on live
//! samples.

use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{MmdaError, Result};
use crate::rng::Rng;
use crate::types::{Liveness, TextSpace};

/// Clamp applied to distances and probabilities before taking logs.
pub const CLAMP_DELTA: f64 = 1e-6;

/// Temperature of the text-similarity score used when no classifier is trained.
pub const ZERO_SHOT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Minimum over every text row, with the literal label target.
    NearestAny,
    /// Minimum over rows of the sample's own class; every sample is pulled
    /// toward its own class captions.
    #[default]
    NearestOwnClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentVariant {
    /// Hard alignment to the nearest text; no smoothing, no classifier term.
    Vanilla,
    /// Smoothed alignment only.
    Smooth,
    /// Smoothed alignment plus the text-constrained classifier.
    #[default]
    Rs2,
}

impl AlignmentVariant {
    pub fn uses_classifier(self) -> bool {
        self == AlignmentVariant::Rs2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rs2Config {
    pub variant: AlignmentVariant,
    pub label_smoothing: f64,
    pub distance_mode: DistanceMode,
    pub reduction: Reduction,
}

impl Default for Rs2Config {
    fn default() -> Self {
        Rs2Config {
            variant: AlignmentVariant::Rs2,
            label_smoothing: 0.1,
            distance_mode: DistanceMode::NearestOwnClass,
            reduction: Reduction::Mean,
        }
    }
}

impl Rs2Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(MmdaError::config("rs2.label_smoothing", "must lie in [0, 0.5)"));
        }
        Ok(())
    }

    /// Smoothing actually applied: the vanilla variant uses hard targets.
    pub fn effective_smoothing(&self) -> f64 {
        match self.variant {
            AlignmentVariant::Vanilla => 0.0,
            _ => self.label_smoothing,
        }
    }
}

/// Affine spoof classifier `p = sigmoid(w . e + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextConstrainedClassifier {
    pub w: Array1<f64>,
    pub b: f64,
}

impl TextConstrainedClassifier {
    pub fn init(n_d: usize, g: &mut Rng) -> Self {
        let n = Normal::new(0.0, 1.0 / (n_d as f64).sqrt()).expect("positive std");
        TextConstrainedClassifier {
            w: Array1::from_shape_fn(n_d, |_| n.sample(g)),
            b: 0.0,
        }
    }

    pub fn spoof_probability(&self, e: ArrayView1<f64>) -> f64 {
        1.0 / (1.0 + (-(e.dot(&self.w) + self.b)).exp())
    }
}

/// `y (1 - eps) + (1 - y) eps`.
pub fn smoothed_target(y: f64, eps: f64) -> f64 {
    y * (1.0 - eps) + (1.0 - y) * eps
}

/// One cross-entropy term `-(t ln(1 - x) + (1 - t) ln x)`. Each log
/// argument is floored at `delta` (and capped at 1), which equals clamping
/// `x` to `[delta, 1 - delta]` inside that range while keeping the exact
/// zero at `x = 0, t = 1`. Used for both distances and spoof probabilities.
pub fn cross_entropy_term(target: f64, x: f64) -> f64 {
    let live = (1.0 - x).clamp(CLAMP_DELTA, 1.0);
    let spoof = x.clamp(CLAMP_DELTA, 1.0);
    -(target * live.ln() + (1.0 - target) * spoof.ln())
}

/// Minimum cosine distance of `v` to the selected text rows, with the index
/// of the nearest row.
pub fn nearest_text(v: ArrayView1<f64>, ts: &TextSpace, mode: DistanceMode, own_class: Liveness) -> Result<(f64, usize)> {
    let nv = v.dot(&v).sqrt();
    if !(nv > 0.0) || !nv.is_finite() {
        return Err(MmdaError::numeric("visual embedding has zero or non-finite norm"));
    }
    let mut best: Option<(f64, usize)> = None;
    for (j, t) in ts.embeddings.rows().into_iter().enumerate() {
        if mode == DistanceMode::NearestOwnClass && ts.class_of[j] != own_class {
            continue;
        }
        let d = 1.0 - v.dot(&t) / (nv * t.dot(&t).sqrt());
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, j));
        }
    }
    best.ok_or_else(|| MmdaError::validation("no text rows selected"))
}

pub fn min_cosine_distance(v: ArrayView1<f64>, ts: &TextSpace, mode: DistanceMode, own_class: Liveness) -> Result<f64> {
    nearest_text(v, ts, mode, own_class).map(|(d, _)| d)
}

/// Alignment target before smoothing.
pub fn alignment_target(label: Liveness, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::NearestAny => label.target(),
        DistanceMode::NearestOwnClass => 1.0,
    }
}

fn reduce(tape: &mut Tape, terms: Var, r: Reduction) -> Var {
    match r {
        Reduction::Mean => tape.mean_all(terms),
        Reduction::Sum => tape.sum_all(terms),
    }
}

/// `-(t ln(1 - x) + (1 - t) ln x)` elementwise for an `n x 1` column.
fn ce_terms_on_tape(tape: &mut Tape, x: Var, targets: &[f64]) -> Var {
    let neg = tape.scale(x, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let one_minus = tape.clamp(one_minus, CLAMP_DELTA, 1.0);
    let ln_om = tape.ln(one_minus);
    let x = tape.clamp(x, CLAMP_DELTA, 1.0);
    let ln_x = tape.ln(x);
    let n = targets.len();
    let t = tape.leaf(Array2::from_shape_fn((n, 1), |(i, _)| targets[i]));
    let tc = tape.leaf(Array2::from_shape_fn((n, 1), |(i, _)| 1.0 - targets[i]));
    let a = tape.mul(ln_om, t);
    let b = tape.mul(ln_x, tc);
    let s = tape.add(a, b);
    tape.scale(s, -1.0)
}

/// Text rows scaled to unit norm.
pub fn unit_text_rows(ts: &TextSpace) -> Array2<f64> {
    let mut t = ts.embeddings.clone();
    for mut r in t.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|x| x / n);
    }
    t
}

/// Distances `[B x 1]` of `v` to the nearest selected text rows.
pub fn distances_on_tape(tape: &mut Tape, v: Var, labels: &[Liveness], ts: &TextSpace, mode: DistanceMode) -> Result<Var> {
    let vals = tape.value(v);
    if vals.rows().into_iter().any(|r| !(r.dot(&r) > 0.0) || !r.iter().all(|x| x.is_finite())) {
        return Err(MmdaError::numeric("visual embedding has zero or non-finite norm"));
    }
    let vn = tape.normalize_rows(v);
    let tn = tape.leaf(unit_text_rows(ts));
    let cos = tape.matmul_bt(vn, tn);
    let neg = tape.scale(cos, -1.0);
    let dist = tape.add_scalar(neg, 1.0);
    let dv = tape.value(dist);
    let idx: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let j = (0..ts.len())
                .filter(|&j| mode == DistanceMode::NearestAny || ts.class_of[j] == y)
                .fold(None::<usize>, |best, j| match best {
                    Some(b) if dv[[i, b]] <= dv[[i, j]] => Some(b),
                    _ => Some(j),
                })
                .expect("text space has both classes");
            (i, j)
        })
        .collect();
    Ok(tape.gather(dist, idx))
}

pub fn alignment_on_tape(tape: &mut Tape, v: Var, labels: &[Liveness], ts: &TextSpace, cfg: &Rs2Config) -> Result<Var> {
    let d = distances_on_tape(tape, v, labels, ts, cfg.distance_mode)?;
    let eps = cfg.effective_smoothing();
    let targets: Vec<f64> = labels
        .iter()
        .map(|&y| smoothed_target(alignment_target(y, cfg.distance_mode), eps))
        .collect();
    let terms = ce_terms_on_tape(tape, d, &targets);
    Ok(reduce(tape, terms, cfg.reduction))
}

/// Classifier loss over visual rows followed by every text row.
/// `w`: `n_d x 1`, `b`: `1 x 1`.
pub fn classification_on_tape(
    tape: &mut Tape,
    v: Var,
    labels: &[Liveness],
    ts: &TextSpace,
    w: Var,
    b: Var,
    cfg: &Rs2Config,
) -> Var {
    let t = tape.leaf(ts.embeddings.clone());
    let all = tape.concat_rows(&[v, t]);
    let logits = tape.matmul(all, w);
    let logits = tape.add_row(logits, b);
    let p = tape.sigmoid(logits);
    let eps = cfg.effective_smoothing();
    let targets: Vec<f64> = labels
        .iter()
        .chain(&ts.class_of)
        .map(|y| smoothed_target(y.target(), eps))
        .collect();
    let terms = ce_terms_on_tape(tape, p, &targets);
    reduce(tape, terms, cfg.reduction)
}

#[derive(Debug, Clone, Copy)]
pub struct Rs2Vars {
    pub total: Var,
    pub cls: Var,
    pub align: Var,
}

/// Combined loss on the tape. The classifier term is a constant zero unless
/// the variant uses it.
pub fn rs2_on_tape(
    tape: &mut Tape,
    v: Var,
    labels: &[Liveness],
    ts: &TextSpace,
    w: Var,
    b: Var,
    cfg: &Rs2Config,
) -> Result<Rs2Vars> {
    let align = alignment_on_tape(tape, v, labels, ts, cfg)?;
    let cls = if cfg.variant.uses_classifier() {
        classification_on_tape(tape, v, labels, ts, w, b, cfg)
    } else {
        tape.constant_scalar(0.0)
    };
    let total = tape.add(cls, align);
    Ok(Rs2Vars { total, cls, align })
}

/// Loss values with their components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rs2Loss {
    pub total: f64,
    pub l_cls: f64,
    pub l_align: f64,
}

fn check_rows(v: &Array2<f64>, labels: &[Liveness], ts: &TextSpace) -> Result<()> {
    if v.nrows() != labels.len() {
        return Err(MmdaError::shape("embedding rows and labels disagree"));
    }
    if v.ncols() != ts.dim() {
        return Err(MmdaError::shape(format!(
            "embedding width {} vs text width {}",
            v.ncols(),
            ts.dim()
        )));
    }
    Ok(())
}

pub fn alignment_loss(v: &Array2<f64>, labels: &[Liveness], ts: &TextSpace, cfg: &Rs2Config) -> Result<f64> {
    check_rows(v, labels, ts)?;
    let mut tape = Tape::new();
    let vv = tape.leaf(v.clone());
    let l = alignment_on_tape(&mut tape, vv, labels, ts, cfg)?;
    Ok(tape.scalar(l))
}

pub fn classification_loss(
    v: &Array2<f64>,
    labels: &[Liveness],
    ts: &TextSpace,
    clf: &TextConstrainedClassifier,
    cfg: &Rs2Config,
) -> Result<f64> {
    check_rows(v, labels, ts)?;
    let mut tape = Tape::new();
    let vv = tape.leaf(v.clone());
    let w = tape.leaf(clf.w.clone().insert_axis(ndarray::Axis(1)));
    let b = tape.constant_scalar(clf.b);
    let l = classification_on_tape(&mut tape, vv, labels, ts, w, b, cfg);
    Ok(tape.scalar(l))
}

/// Combines the two components; `total` is their plain sum.
pub fn combine(l_cls: f64, l_align: f64) -> Rs2Loss {
    Rs2Loss {
        total: l_cls + l_align,
        l_cls,
        l_align,
    }
}

pub fn rs2_loss(
    v: &Array2<f64>,
    labels: &[Liveness],
    ts: &TextSpace,
    clf: &TextConstrainedClassifier,
    cfg: &Rs2Config,
) -> Result<Rs2Loss> {
    let l_align = alignment_loss(v, labels, ts, cfg)?;
    let l_cls = if cfg.variant.uses_classifier() {
        classification_loss(v, labels, ts, clf, cfg)?
    } else {
        0.0
    };
    Ok(combine(l_cls, l_align))
}

/// Spoof score from text similarity alone:
/// `sigmoid((d_live - d_spoof) / temperature)`.
pub fn zero_shot_spoof_score(v: ArrayView1<f64>, ts: &TextSpace) -> Result<f64> {
    let d_live = min_cosine_distance(v, ts, DistanceMode::NearestOwnClass, Liveness::Live)?;
    let d_spoof = min_cosine_distance(v, ts, DistanceMode::NearestOwnClass, Liveness::Spoof)?;
    Ok(1.0 / (1.0 + (-(d_live - d_spoof) / ZERO_SHOT_TEMPERATURE).exp()))
}
