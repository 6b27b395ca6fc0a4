//! U-shaped dual space adaptation.
//!
//! A downward pass applies `d` adapters, `v_i = Adapt_i(v_{i-1})`, starting
//! from the input `v_0`. An upward pass then feeds deep features back:
//! `v'_d = v_d` and `v'_i = v_i + Remap_i(v'_{i+1})` for `i = d-1 .. 0`.
//! Every `v'_i` lives in the input space and is aligned separately; one of
//! them is picked as the exit layer at inference.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Tape, Var};
use crate::error::{MmdaError, Result};
use crate::metrics::{argmin_first, eer_threshold, hter, ScoreRecord};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::rs2::{self, Rs2Config, Rs2Loss, Rs2Vars};
use crate::types::{Liveness, TextSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    #[default]
    Dense,
    Moe,
}

/// Exit-layer policy: chosen on dev data, or pinned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExitPolicy {
    #[default]
    Auto,
    Fixed(usize),
}

impl fmt::Display for ExitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitPolicy::Auto => f.write_str("auto"),
            ExitPolicy::Fixed(i) => write!(f, "fixed:{i}"),
        }
    }
}

impl FromStr for ExitPolicy {
    type Err = MmdaError;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "auto" {
            return Ok(ExitPolicy::Auto);
        }
        s.strip_prefix("fixed:")
            .and_then(|i| i.parse().ok())
            .map(ExitPolicy::Fixed)
            .ok_or_else(|| MmdaError::config("udsa.exit", format!("expected 'auto' or 'fixed:<layer>', got '{s}'")))
    }
}

impl Serialize for ExitPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ExitPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UdsaConfig {
    pub depth: usize,
    pub adapter_kind: AdapterKind,
    pub n_experts: usize,
    pub top_k: usize,
    pub exit: ExitPolicy,
}

impl Default for UdsaConfig {
    fn default() -> Self {
        UdsaConfig {
            depth: 7,
            adapter_kind: AdapterKind::Dense,
            n_experts: 4,
            top_k: 2,
            exit: ExitPolicy::Auto,
        }
    }
}

impl UdsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(MmdaError::config("udsa.depth", "must be >= 1"));
        }
        if self.adapter_kind == AdapterKind::Moe {
            if self.n_experts < 2 {
                return Err(MmdaError::config("udsa.n_experts", "MoE adapters need at least 2 experts"));
            }
            if self.top_k == 0 || self.top_k > self.n_experts {
                return Err(MmdaError::config("udsa.top_k", "must lie in 1..=n_experts"));
            }
        }
        if let ExitPolicy::Fixed(i) = self.exit {
            if i > self.depth {
                return Err(MmdaError::config("udsa.exit", format!("layer {i} exceeds depth {}", self.depth)));
            }
        }
        Ok(())
    }
}

/// Two-layer square MLP `W2 gelu(x W1 + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl Mlp {
    pub fn init(n: usize, g: &mut Rng) -> Self {
        let dist = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("positive std");
        Mlp {
            w1: Array2::from_shape_fn((n, n), |_| dist.sample(g)),
            b1: Array2::zeros((1, n)),
            w2: Array2::from_shape_fn((n, n), |_| dist.sample(g)),
            b2: Array2::zeros((1, n)),
        }
    }

    pub fn identity(n: usize) -> Self {
        // gelu is not the identity, so an exact identity map routes through a
        // large positive shift: gelu(x + c) - c ~ x for x + c >> 0.
        let c = 40.0;
        Mlp {
            w1: Array2::eye(n),
            b1: Array2::from_elem((1, n), c),
            w2: Array2::eye(n),
            b2: Array2::from_elem((1, n), -c),
        }
    }

    pub fn zero(n: usize) -> Self {
        Mlp {
            w1: Array2::zeros((n, n)),
            b1: Array2::zeros((1, n)),
            w2: Array2::zeros((n, n)),
            b2: Array2::zeros((1, n)),
        }
    }

    fn register(&self, store: &mut ParamStore, prefix: &str) -> MlpIds {
        MlpIds {
            w1: store.add(format!("{prefix}.w1"), self.w1.clone()),
            b1: store.add(format!("{prefix}.b1"), self.b1.clone()),
            w2: store.add(format!("{prefix}.w2"), self.w2.clone()),
            b2: store.add(format!("{prefix}.b2"), self.b2.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeAdapter {
    pub experts: Vec<Mlp>,
    pub gate_w: Array2<f64>,
    pub gate_b: Array2<f64>,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Dense(Mlp),
    Moe(MoeAdapter),
}

/// `adapt[i - 1]` produces layer `i`; `remap[i]` feeds layer `i + 1` back into
/// layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct UdsaParams {
    pub adapt: Vec<Adapter>,
    pub remap: Vec<Mlp>,
}

impl UdsaParams {
    pub fn init(n: usize, cfg: &UdsaConfig, g: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let adapt = (0..cfg.depth)
            .map(|_| match cfg.adapter_kind {
                AdapterKind::Dense => Adapter::Dense(Mlp::init(n, g)),
                AdapterKind::Moe => {
                    let dist = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("positive std");
                    Adapter::Moe(MoeAdapter {
                        experts: (0..cfg.n_experts).map(|_| Mlp::init(n, g)).collect(),
                        gate_w: Array2::from_shape_fn((n, cfg.n_experts), |_| dist.sample(g)),
                        gate_b: Array2::zeros((1, cfg.n_experts)),
                        top_k: cfg.top_k,
                    })
                }
            })
            .collect();
        let remap = (0..cfg.depth).map(|_| Mlp::init(n, g)).collect();
        Ok(UdsaParams { adapt, remap })
    }

    pub fn depth(&self) -> usize {
        self.adapt.len()
    }

    pub fn register(&self, store: &mut ParamStore) -> UdsaIds {
        let adapt = self
            .adapt
            .iter()
            .enumerate()
            .map(|(i, a)| match a {
                Adapter::Dense(m) => AdapterIds::Dense(m.register(store, &format!("udsa.adapt{}", i + 1))),
                Adapter::Moe(moe) => AdapterIds::Moe {
                    experts: moe
                        .experts
                        .iter()
                        .enumerate()
                        .map(|(e, m)| m.register(store, &format!("udsa.adapt{}.expert{e}", i + 1)))
                        .collect(),
                    gate_w: store.add(format!("udsa.adapt{}.gate_w", i + 1), moe.gate_w.clone()),
                    gate_b: store.add(format!("udsa.adapt{}.gate_b", i + 1), moe.gate_b.clone()),
                    top_k: moe.top_k,
                },
            })
            .collect();
        let remap = self
            .remap
            .iter()
            .enumerate()
            .map(|(i, m)| m.register(store, &format!("udsa.remap{i}")))
            .collect();
        UdsaIds { adapt, remap }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub enum AdapterIds {
    Dense(MlpIds),
    Moe {
        experts: Vec<MlpIds>,
        gate_w: ParamId,
        gate_b: ParamId,
        top_k: usize,
    },
}

#[derive(Debug, Clone)]
pub struct UdsaIds {
    pub adapt: Vec<AdapterIds>,
    pub remap: Vec<MlpIds>,
}

impl UdsaIds {
    pub fn depth(&self) -> usize {
        self.adapt.len()
    }
}

pub fn mlp_on_tape(tape: &mut Tape, x: Var, m: &MlpIds, p: &Bound) -> Var {
    let h = tape.linear(x, p[m.w1], p[m.b1]);
    let h = tape.gelu(h);
    tape.linear(h, p[m.w2], p[m.b2])
}

/// Experts chosen per row: the `top_k` largest gate probabilities, earlier
/// experts first on ties.
pub fn top_k_mask(gates: &Array2<f64>, top_k: usize) -> Array2<f64> {
    let mut mask = Array2::zeros(gates.dim());
    for (i, row) in gates.rows().into_iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &e in order.iter().take(top_k) {
            mask[[i, e]] = 1.0;
        }
    }
    mask
}

/// Softmax gate, top-k selection and renormalized mixture of expert outputs.
pub fn moe_on_tape(tape: &mut Tape, x: Var, experts: &[MlpIds], gate_w: ParamId, gate_b: ParamId, top_k: usize, p: &Bound) -> Var {
    let logits = tape.linear(x, p[gate_w], p[gate_b]);
    let gates = tape.softmax_rows(logits);
    let mask = tape.leaf(top_k_mask(tape.value(gates), top_k));
    let kept = tape.mul(gates, mask);
    let norm = tape.sum_cols(kept);
    let weights = tape.div_col(kept, norm);
    let mut out: Option<Var> = None;
    for (e, m) in experts.iter().enumerate() {
        let y = mlp_on_tape(tape, x, m, p);
        let w = tape.slice_cols(weights, e, 1);
        let contrib = tape.mul_col(y, w);
        out = Some(match out {
            Some(acc) => tape.add(acc, contrib),
            None => contrib,
        });
    }
    out.expect("at least one expert")
}

fn adapter_on_tape(tape: &mut Tape, x: Var, a: &AdapterIds, p: &Bound) -> Var {
    match a {
        AdapterIds::Dense(m) => mlp_on_tape(tape, x, m, p),
        AdapterIds::Moe {
            experts,
            gate_w,
            gate_b,
            top_k,
        } => moe_on_tape(tape, x, experts, *gate_w, *gate_b, *top_k, p),
    }
}

/// Both passes on the tape; returns `v'_0 .. v'_d`.
pub fn forward_on_tape(tape: &mut Tape, v0: Var, ids: &UdsaIds, p: &Bound) -> Vec<Var> {
    let d = ids.depth();
    let mut v = Vec::with_capacity(d + 1);
    v.push(v0);
    for a in &ids.adapt {
        let prev = *v.last().expect("non-empty");
        v.push(adapter_on_tape(tape, prev, a, p));
    }
    let mut vp = v.clone();
    for i in (0..d).rev() {
        let back = mlp_on_tape(tape, vp[i + 1], &ids.remap[i], p);
        vp[i] = tape.add(v[i], back);
    }
    vp
}

/// Plain forward pass. Errors name the first layer that turned non-finite.
pub fn udsa_forward(v0: &Array2<f64>, params: &UdsaParams) -> Result<Vec<Array2<f64>>> {
    let mut store = ParamStore::new();
    let ids = params.register(&mut store);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let x = tape.leaf(v0.clone());
    let outs = forward_on_tape(&mut tape, x, &ids, &bound);
    outs.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let val = tape.value(v);
            if val.iter().all(|x| x.is_finite()) {
                Ok(val.clone())
            } else {
                Err(MmdaError::numeric(format!("non-finite output at U-DSA layer {i}")))
            }
        })
        .collect()
}

/// Standalone MoE adapter evaluation.
pub fn moe_adapt(x: &Array2<f64>, moe: &MoeAdapter) -> Array2<f64> {
    let mut store = ParamStore::new();
    let experts: Vec<MlpIds> = moe
        .experts
        .iter()
        .enumerate()
        .map(|(e, m)| m.register(&mut store, &format!("e{e}")))
        .collect();
    let gw = store.add("gate_w", moe.gate_w.clone());
    let gb = store.add("gate_b", moe.gate_b.clone());
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = moe_on_tape(&mut tape, xv, &experts, gw, gb, moe.top_k, &bound);
    tape.value(out).clone()
}

/// Unweighted mean of the RS2 loss over all layers. `total` is the sum of
/// the averaged components.
pub fn per_layer_rs2_on_tape(
    tape: &mut Tape,
    layers: &[Var],
    labels: &[Liveness],
    ts: &TextSpace,
    w: Var,
    b: Var,
    cfg: &Rs2Config,
) -> Result<Rs2Vars> {
    let mut cls = Vec::with_capacity(layers.len());
    let mut align = Vec::with_capacity(layers.len());
    for &v in layers {
        let l = rs2::rs2_on_tape(tape, v, labels, ts, w, b, cfg)?;
        cls.push(l.cls);
        align.push(l.align);
    }
    let k = 1.0 / layers.len() as f64;
    let c = tape.concat_rows(&cls);
    let c = tape.sum_all(c);
    let cls = tape.scale(c, k);
    let a = tape.concat_rows(&align);
    let a = tape.sum_all(a);
    let align = tape.scale(a, k);
    let total = tape.add(cls, align);
    Ok(Rs2Vars { total, cls, align })
}

pub fn per_layer_rs2(
    vprimes: &[Array2<f64>],
    labels: &[Liveness],
    ts: &TextSpace,
    clf: &rs2::TextConstrainedClassifier,
    cfg: &Rs2Config,
) -> Result<Rs2Loss> {
    if vprimes.is_empty() {
        return Err(MmdaError::validation("no layers to align"));
    }
    let mut tape = Tape::new();
    let layers: Vec<Var> = vprimes.iter().map(|v| tape.leaf(v.clone())).collect();
    let w = tape.leaf(clf.w.clone().insert_axis(ndarray::Axis(1)));
    let b = tape.constant_scalar(clf.b);
    let l = per_layer_rs2_on_tape(&mut tape, &layers, labels, ts, w, b, cfg)?;
    Ok(rs2::combine(tape.scalar(l.cls), tape.scalar(l.align)))
}

/// Dev HTER per layer, each at that layer's own EER threshold.
pub fn layer_hters(dev_scores: &[Vec<ScoreRecord>]) -> Result<Vec<f64>> {
    if dev_scores.is_empty() {
        return Err(MmdaError::validation("no layers to select from"));
    }
    dev_scores
        .iter()
        .map(|recs| {
            if recs.is_empty() {
                return Err(MmdaError::validation("empty score set"));
            }
            hter(recs, eer_threshold(recs)?)
        })
        .collect()
}

/// Layer with the lowest dev HTER; ties resolve to the shallowest layer.
pub fn select_exit_layer(dev_scores: &[Vec<ScoreRecord>]) -> Result<usize> {
    let h = layer_hters(dev_scores)?;
    Ok(argmin_first(&h).expect("non-empty"))
}
