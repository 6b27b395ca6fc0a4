//! Modality-domain joint differential attention.
//!
//! Every sample is paired with a sample from the same domain and the two
//! token sequences are concatenated on the feature axis. One projection of the
//! joint sequence yields two query/key sets; the attention map from the second
//! set estimates the common (domain and modality) noise pattern and is
//! subtracted, weighted by `lambda`, from the first:
//!
//! ```text
//! out = (softmax(Q K^T s) - lambda * softmax(Q' K'^T s)) V,   s = 1 / sqrt(n_d)
//! ```
//!
//! Head outputs are concatenated, batch-normalized per feature over
//! (batch x tokens), and added to the first `n_d` input features.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{MmdaError, Result};
use crate::rng::{self, Rng};
use crate::types::{DomainLabel, EmbeddingBatch, ModalityKind, ModalitySet};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How a sample's partner is chosen among same-domain samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Uniform over the domain, including the sample itself.
    #[default]
    Uniform,
    /// Always the sample itself; reduces to plain differential attention.
    SelfOnly,
    /// Uniform over other same-domain samples; self only for singleton domains.
    DistinctOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Md2aConfig {
    pub lambda: f64,
    pub n_heads: usize,
    pub learnable_lambda: bool,
    pub pairing: Pairing,
}

impl Default for Md2aConfig {
    fn default() -> Self {
        Md2aConfig {
            lambda: 0.5,
            n_heads: 4,
            learnable_lambda: false,
            pairing: Pairing::Uniform,
        }
    }
}

impl Md2aConfig {
    pub fn validate(&self, n_d: usize) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(MmdaError::config("md2a.lambda", "must be finite and >= 0"));
        }
        if self.n_heads == 0 || n_d % self.n_heads != 0 {
            return Err(MmdaError::config(
                "md2a.n_heads",
                format!("{} does not divide n_d = {n_d}", self.n_heads),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    /// `[B x N_tok x 2 n_d]`: each sample's tokens followed by its partner's.
    pub joint_tokens: Array3<f64>,
    pub pair_index: Vec<usize>,
}

/// Draws a same-domain partner for every position.
pub fn pair_indices(domains: &[DomainLabel], rng_seed: u64, pairing: Pairing) -> Vec<usize> {
    let mut g: Rng = rng::stream(rng_seed, &[&"md2a.pairing"]);
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in domains.iter().enumerate() {
        groups.entry(d.as_str()).or_default().push(i);
    }
    let pairs: Vec<usize> = (0..domains.len())
        .map(|i| {
            let group = &groups[domains[i].as_str()];
            match pairing {
                Pairing::SelfOnly => i,
                Pairing::Uniform => group[g.random_range(0..group.len())],
                Pairing::DistinctOnly if group.len() == 1 => i,
                Pairing::DistinctOnly => {
                    let k = g.random_range(0..group.len() - 1);
                    let j = group[k];
                    if j >= i { group[k + 1] } else { j }
                }
            }
        })
        .collect();
    debug_assert!(pairs.iter().enumerate().all(|(i, &j)| domains[i] == domains[j]));
    pairs
}

/// Concatenates each sample's tokens with its partner's on the feature axis.
pub fn joint_from_pairs(tokens: &Array3<f64>, pair_index: &[usize]) -> Array3<f64> {
    let (b, n, d) = tokens.dim();
    let mut joint = Array3::zeros((b, n, 2 * d));
    for (i, &j) in pair_index.iter().enumerate() {
        let mut dst = joint.index_axis_mut(Axis(0), i);
        dst.slice_mut(ndarray::s![.., ..d]).assign(&tokens.index_axis(Axis(0), i));
        dst.slice_mut(ndarray::s![.., d..]).assign(&tokens.index_axis(Axis(0), j));
    }
    joint
}

/// Pairs every sample with a same-domain partner and builds joint tokens.
pub fn batch_reorganize(emb: &EmbeddingBatch, rng_seed: u64, pairing: Pairing) -> PairedBatch {
    let pair_index = pair_indices(&emb.domains, rng_seed, pairing);
    PairedBatch {
        joint_tokens: joint_from_pairs(&emb.tokens, &pair_index),
        pair_index,
    }
}

/// Projection weights of one head. `w_q`, `w_k`: `2 n_d x 2 d_k`;
/// `w_v`: `2 n_d x d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl HeadWeights {
    pub fn init(n_d: usize, n_heads: usize, g: &mut Rng) -> Self {
        let d_k = n_d / n_heads;
        let std = 1.0 / ((2 * n_d) as f64).sqrt();
        let n = Normal::new(0.0, std).expect("positive std");
        let mut m = |c| Array2::from_shape_fn((2 * n_d, c), |_| n.sample(g));
        HeadWeights {
            w_q: m(2 * d_k),
            w_k: m(2 * d_k),
            w_v: m(d_k),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Per-feature batch normalization over `n_d` features.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub running_mean: Array2<f64>,
    pub running_var: Array2<f64>,
}

impl BatchNormState {
    pub fn new(n_d: usize) -> Self {
        BatchNormState {
            gamma: Array2::ones((1, n_d)),
            beta: Array2::zeros((1, n_d)),
            running_mean: Array2::zeros((1, n_d)),
            running_var: Array2::ones((1, n_d)),
        }
    }
}

/// Batch statistics observed in a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Array2<f64>,
    /// Biased (population) variance.
    pub var: Array2<f64>,
    pub count: usize,
}

/// Exponential running-statistics update with unbiased variance.
pub fn update_running(mean: &mut Array2<f64>, var: &mut Array2<f64>, stats: &BnBatchStats) {
    let n = stats.count as f64;
    let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
    mean.zip_mut_with(&stats.mean, |r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
    var.zip_mut_with(&stats.var, |r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Differential attention of one sample for one head.
/// `joint`: `N x 2 n_d` slice; returns `N x d_v`.
pub fn head_attention_on_tape(tape: &mut Tape, q2: Var, k2: Var, v: Var, d_k: usize, n_d: usize, lambda: Var) -> Var {
    let s = 1.0 / (n_d as f64).sqrt();
    let q = tape.slice_cols(q2, 0, d_k);
    let qp = tape.slice_cols(q2, d_k, d_k);
    let k = tape.slice_cols(k2, 0, d_k);
    let kp = tape.slice_cols(k2, d_k, d_k);
    let a = tape.matmul_bt(q, k);
    let a = tape.scale(a, s);
    let a = tape.softmax_rows(a);
    let ap = tape.matmul_bt(qp, kp);
    let ap = tape.scale(ap, s);
    let ap = tape.softmax_rows(ap);
    let ap = tape.scale_var(ap, lambda);
    let diff = tape.sub(a, ap);
    tape.matmul(diff, v)
}

/// Runs every head over a stacked joint batch `[(B N) x 2 n_d]` and returns
/// the concatenated head outputs `[(B N) x n_heads d_v]`.
pub fn heads_on_tape(tape: &mut Tape, joint: Var, b: usize, n: usize, n_d: usize, heads: &[HeadVars], lambda: Var) -> Var {
    let d_k = n_d / heads.len();
    let mut outs = Vec::with_capacity(heads.len());
    for h in heads {
        let q2 = tape.matmul(joint, h.w_q);
        let k2 = tape.matmul(joint, h.w_k);
        let v = tape.matmul(joint, h.w_v);
        let per_sample: Vec<Var> = (0..b)
            .map(|i| {
                let qi = tape.slice_rows(q2, i * n, n);
                let ki = tape.slice_rows(k2, i * n, n);
                let vi = tape.slice_rows(v, i * n, n);
                head_attention_on_tape(tape, qi, ki, vi, d_k, n_d, lambda)
            })
            .collect();
        outs.push(tape.concat_rows(&per_sample));
    }
    tape.concat_cols(&outs)
}

/// Normalization statistics to use inside [`block_on_tape`].
pub enum BnSource<'a> {
    Batch,
    Running { mean: &'a Array2<f64>, var: &'a Array2<f64> },
}

/// Full block on the tape: heads, batch norm, residual from the first `n_d`
/// joint features. Returns output tokens `[(B N) x n_d]` and, in batch mode,
/// the observed statistics.
#[allow(clippy::too_many_arguments)]
pub fn block_on_tape(
    tape: &mut Tape,
    joint: Var,
    b: usize,
    n: usize,
    n_d: usize,
    heads: &[HeadVars],
    lambda: Var,
    gamma: Var,
    beta: Var,
    bn: BnSource<'_>,
) -> (Var, Option<BnBatchStats>) {
    let h = heads_on_tape(tape, joint, b, n, n_d, heads, lambda);
    let (normed, stats) = match bn {
        BnSource::Batch => {
            let mu = tape.mean_rows(h);
            let neg_mu = tape.scale(mu, -1.0);
            let xc = tape.add_row(h, neg_mu);
            let sq = tape.mul(xc, xc);
            let var = tape.mean_rows(sq);
            let shifted = tape.add_scalar(var, BN_EPS);
            let inv = tape.powf(shifted, -0.5);
            let stats = BnBatchStats {
                mean: tape.value(mu).clone(),
                var: tape.value(var).clone(),
                count: b * n,
            };
            (tape.mul_row(xc, inv), Some(stats))
        }
        BnSource::Running { mean, var } => {
            let neg_mu = tape.leaf(-mean);
            let inv = tape.leaf(var.mapv(|v| 1.0 / (v + BN_EPS).sqrt()));
            let xc = tape.add_row(h, neg_mu);
            (tape.mul_row(xc, inv), None)
        }
    };
    let scaled = tape.mul_row(normed, gamma);
    let shifted = tape.add_row(scaled, beta);
    let residual = tape.slice_cols(joint, 0, n_d);
    (tape.add(shifted, residual), stats)
}

fn stack_rows(a: &Array3<f64>) -> Array2<f64> {
    let (b, n, d) = a.dim();
    a.to_shape((b * n, d)).expect("contiguous").to_owned()
}

fn check_finite(a: &Array3<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MmdaError::numeric(format!("non-finite value in {what}")))
    }
}

/// One differential-attention head over a paired batch: `[B x N x d_v]`.
pub fn md2a_head(paired: &PairedBatch, head: &HeadWeights, lambda: f64) -> Result<Array3<f64>> {
    let (b, n, w) = paired.joint_tokens.dim();
    if w % 2 != 0 || head.w_q.nrows() != w || head.w_k.nrows() != w || head.w_v.nrows() != w {
        return Err(MmdaError::shape(format!(
            "joint width {w} does not match head projections ({}, {}, {})",
            head.w_q.nrows(),
            head.w_k.nrows(),
            head.w_v.nrows()
        )));
    }
    if head.w_q.ncols() != head.w_k.ncols() || head.w_q.ncols() % 2 != 0 {
        return Err(MmdaError::shape("w_q and w_k must share an even output width"));
    }
    check_finite(&paired.joint_tokens, "joint tokens")?;
    if !lambda.is_finite() {
        return Err(MmdaError::numeric("lambda is not finite"));
    }
    let n_d = w / 2;
    let d_k = head.w_q.ncols() / 2;
    let d_v = head.w_v.ncols();
    let mut tape = Tape::new();
    let joint = tape.leaf(stack_rows(&paired.joint_tokens));
    let hv = HeadVars {
        w_q: tape.leaf(head.w_q.clone()),
        w_k: tape.leaf(head.w_k.clone()),
        w_v: tape.leaf(head.w_v.clone()),
    };
    let lam = tape.constant_scalar(lambda);
    let q2 = tape.matmul(joint, hv.w_q);
    let k2 = tape.matmul(joint, hv.w_k);
    let v = tape.matmul(joint, hv.w_v);
    let mut out = Array3::zeros((b, n, d_v));
    for i in 0..b {
        let qi = tape.slice_rows(q2, i * n, n);
        let ki = tape.slice_rows(k2, i * n, n);
        let vi = tape.slice_rows(v, i * n, n);
        let o = head_attention_on_tape(&mut tape, qi, ki, vi, d_k, n_d, lam);
        out.index_axis_mut(Axis(0), i).assign(tape.value(o));
    }
    Ok(out)
}

/// Block parameters in plain form.
#[derive(Debug, Clone, PartialEq)]
pub struct Md2aParams {
    pub heads: Vec<HeadWeights>,
    pub lambda: f64,
    pub bn: BatchNormState,
}

impl Md2aParams {
    pub fn init(n_d: usize, cfg: &Md2aConfig, seed: u64) -> Result<Self> {
        cfg.validate(n_d)?;
        let heads = (0..cfg.n_heads)
            .map(|h| HeadWeights::init(n_d, cfg.n_heads, &mut rng::stream(seed, &[&"md2a.head", &h])))
            .collect();
        Ok(Md2aParams {
            heads,
            lambda: cfg.lambda,
            bn: BatchNormState::new(n_d),
        })
    }
}

/// Pairs, attends, normalizes and adds the residual. Training mode with a
/// batch of one sample falls back to running statistics.
pub fn md2a_block(
    emb: &EmbeddingBatch,
    params: &Md2aParams,
    pairing: Pairing,
    rng_seed: u64,
    mode: BnMode,
) -> Result<(EmbeddingBatch, Option<BnBatchStats>)> {
    let (b, n, n_d) = emb.tokens.dim();
    let n_heads = params.heads.len();
    if n_heads == 0 || n_d % n_heads != 0 || params.heads.iter().any(|h| h.w_v.ncols() * n_heads != n_d) {
        return Err(MmdaError::shape(format!(
            "{n_heads} heads cannot produce an output of width {n_d}"
        )));
    }
    let paired = batch_reorganize(emb, rng_seed, pairing);
    check_finite(&paired.joint_tokens, "joint tokens")?;
    let mut tape = Tape::new();
    let joint = tape.leaf(stack_rows(&paired.joint_tokens));
    let heads: Vec<HeadVars> = params
        .heads
        .iter()
        .map(|h| HeadVars {
            w_q: tape.leaf(h.w_q.clone()),
            w_k: tape.leaf(h.w_k.clone()),
            w_v: tape.leaf(h.w_v.clone()),
        })
        .collect();
    for h in &params.heads {
        if h.w_q.nrows() != 2 * n_d {
            return Err(MmdaError::shape("head projection rows must equal 2 n_d"));
        }
    }
    let lam = tape.constant_scalar(params.lambda);
    let gamma = tape.leaf(params.bn.gamma.clone());
    let beta = tape.leaf(params.bn.beta.clone());
    let source = if mode == BnMode::Train && b > 1 {
        BnSource::Batch
    } else {
        BnSource::Running {
            mean: &params.bn.running_mean,
            var: &params.bn.running_var,
        }
    };
    let (out, stats) = block_on_tape(&mut tape, joint, b, n, n_d, &heads, lam, gamma, beta, source);
    let tokens = tape
        .value(out)
        .to_shape((b, n, n_d))
        .expect("contiguous")
        .to_owned();
    let out = EmbeddingBatch::new(
        tokens,
        emb.labels.clone(),
        emb.domains.clone(),
        emb.sample_ids.clone(),
        emb.present.clone(),
    )?;
    Ok((out, stats))
}

/// Concatenates present modalities' tokens along the token axis in
/// [`ModalityKind`] order. All samples must share one present set so the
/// result stays rectangular.
pub fn fuse_modalities(
    per_modality: &BTreeMap<ModalityKind, EmbeddingBatch>,
    present: &[ModalitySet],
) -> Result<EmbeddingBatch> {
    let Some(&mask) = present.first() else {
        return Err(MmdaError::validation("empty batch"));
    };
    if let Some(i) = present.iter().position(|m| m.is_empty()) {
        return Err(MmdaError::validation(format!("sample {i} has no present modality")));
    }
    if present.iter().any(|m| *m != mask) {
        return Err(MmdaError::shape("samples in one fused batch must share a present-modality set"));
    }
    let parts: Vec<&EmbeddingBatch> = mask
        .iter()
        .map(|k| {
            per_modality
                .get(&k)
                .ok_or_else(|| MmdaError::validation(format!("modality {k} marked present but not encoded")))
        })
        .collect::<Result<_>>()?;
    let first = parts[0];
    for p in &parts[1..] {
        if p.len() != first.len() || p.dim() != first.dim() || p.sample_ids != first.sample_ids {
            return Err(MmdaError::shape("per-modality batches disagree on samples or width"));
        }
    }
    if first.len() != present.len() {
        return Err(MmdaError::shape("present mask length differs from batch size"));
    }
    let views: Vec<_> = parts.iter().map(|p| p.tokens.view()).collect();
    let tokens = ndarray::concatenate(Axis(1), &views).map_err(|e| MmdaError::shape(e.to_string()))?;
    EmbeddingBatch::new(
        tokens,
        first.labels.clone(),
        first.domains.clone(),
        first.sample_ids.clone(),
        present.to_vec(),
    )
}
