//! The trainable part of the pipeline: MD2A block, U-DSA stack and the
//! text-constrained classifier, stored as named tensors in a [`ParamStore`].

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{encode_image, encode_text, FrozenEncoderParams};
use crate::error::{MmdaError, Result};
use crate::md2a::{self, BnBatchStats, BnSource, HeadVars, Md2aConfig, Md2aParams};
use crate::metrics::ScoreRecord;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng;
use crate::rs2::{self, Rs2Config, Rs2Vars, TextConstrainedClassifier};
use crate::types::{BatchSample, CaptionSet, DomainLabel, Liveness, ModalityKind, ModalitySet, TextSpace};
use crate::udsa::{self, UdsaConfig, UdsaIds, UdsaParams};

pub const RUNNING_MEAN: &str = "md2a.bn.running_mean";
pub const RUNNING_VAR: &str = "md2a.bn.running_var";
pub const LAMBDA: &str = "md2a.lambda";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_d: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub backbone_seed: u64,
    pub md2a: Md2aConfig,
    pub rs2: Rs2Config,
    pub udsa: UdsaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_d: 64,
            patch: 8,
            height: 32,
            width: 32,
            backbone_seed: 0,
            md2a: Md2aConfig::default(),
            rs2: Rs2Config::default(),
            udsa: UdsaConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_d == 0 {
            return Err(MmdaError::config("model.n_d", "must be positive"));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(MmdaError::config(
                "model.patch",
                format!("{}x{} images are not divisible into {} pixel patches", self.height, self.width, self.patch),
            ));
        }
        self.md2a.validate(self.n_d)?;
        self.rs2.validate()?;
        self.udsa.validate()
    }

    pub fn encoder(&self) -> Result<FrozenEncoderParams> {
        FrozenEncoderParams::generate(self.backbone_seed, self.n_d, self.patch, self.height, self.width)
    }
}

/// Frozen-encoder output of one sample, computed once and reused every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub sample_id: String,
    pub domain: DomainLabel,
    pub label: Liveness,
    pub present: ModalitySet,
    pub tokens: BTreeMap<ModalityKind, Array2<f64>>,
}

impl EncodedSample {
    /// Present modalities' tokens stacked in modality order.
    pub fn fused(&self) -> Array2<f64> {
        let views: Vec<_> = self.present.iter().map(|k| self.tokens[&k].view()).collect();
        concatenate(Axis(0), &views).expect("tokens share a width")
    }

    pub fn n_tokens(&self) -> usize {
        self.present.iter().map(|k| self.tokens[&k].nrows()).sum()
    }

    /// Drops modalities without re-encoding.
    pub fn without(&self, missing: ModalitySet) -> Result<Self> {
        let mut out = self.clone();
        for k in missing.iter() {
            out.present.remove(k);
            out.tokens.remove(&k);
        }
        if out.present.is_empty() {
            return Err(MmdaError::validation(format!("sample {} would have no modality left", self.sample_id)));
        }
        Ok(out)
    }
}

pub fn encode_samples(samples: &[BatchSample], enc: &FrozenEncoderParams) -> Result<Vec<EncodedSample>> {
    samples
        .iter()
        .map(|s| {
            s.validate()?;
            let tokens = s
                .images
                .iter()
                .map(|(k, img)| Ok((*k, encode_image(img, *k, enc)?)))
                .collect::<Result<_>>()?;
            Ok(EncodedSample {
                sample_id: s.sample_id.clone(),
                domain: s.domain.clone(),
                label: s.label,
                present: s.present,
                tokens,
            })
        })
        .collect()
}

pub fn text_space(captions: &CaptionSet, enc: &FrozenEncoderParams) -> Result<TextSpace> {
    encode_text(captions, enc)
}

#[derive(Debug, Clone)]
struct ModelIds {
    heads: Vec<[ParamId; 3]>,
    lambda: ParamId,
    gamma: ParamId,
    beta: ParamId,
    udsa: UdsaIds,
    clf_w: ParamId,
    clf_b: ParamId,
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub running_mean: Array2<f64>,
    pub running_var: Array2<f64>,
    ids: ModelIds,
}

/// Output of one forward pass on the tape.
pub struct Forward {
    /// Pooled `v'_0 .. v'_d`, each `B x n_d`.
    pub layers: Vec<Var>,
    pub bn_stats: Option<BnBatchStats>,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n_d = config.n_d;
        let md = Md2aParams::init(n_d, &config.md2a, rng::derive_seed(seed, &[&"md2a"]))?;
        let ud = UdsaParams::init(n_d, &config.udsa, &mut rng::stream(seed, &[&"udsa"]))?;
        let clf = TextConstrainedClassifier::init(n_d, &mut rng::stream(seed, &[&"classifier"]));
        let mut store = ParamStore::new();
        let heads = md
            .heads
            .iter()
            .enumerate()
            .map(|(h, w)| {
                [
                    store.add(format!("md2a.head{h}.w_q"), w.w_q.clone()),
                    store.add(format!("md2a.head{h}.w_k"), w.w_k.clone()),
                    store.add(format!("md2a.head{h}.w_v"), w.w_v.clone()),
                ]
            })
            .collect();
        let lambda = store.add(LAMBDA, Array2::from_elem((1, 1), md.lambda));
        let gamma = store.add("md2a.bn.gamma", md.bn.gamma.clone());
        let beta = store.add("md2a.bn.beta", md.bn.beta.clone());
        let udsa = ud.register(&mut store);
        let clf_w = store.add("classifier.w", clf.w.clone().insert_axis(Axis(1)));
        let clf_b = store.add("classifier.b", Array2::from_elem((1, 1), clf.b));
        Ok(Model {
            config: config.clone(),
            store,
            running_mean: md.bn.running_mean,
            running_var: md.bn.running_var,
            ids: ModelIds {
                heads,
                lambda,
                gamma,
                beta,
                udsa,
                clf_w,
                clf_b,
            },
        })
    }

    pub fn depth(&self) -> usize {
        self.ids.udsa.depth()
    }

    /// Whether the optimizer updates this parameter.
    pub fn is_trainable(&self, id: ParamId) -> bool {
        id != self.ids.lambda || self.config.md2a.learnable_lambda
    }

    pub fn lambda(&self) -> f64 {
        self.store.get(self.ids.lambda)[[0, 0]]
    }

    pub fn classifier(&self) -> TextConstrainedClassifier {
        TextConstrainedClassifier {
            w: self.store.get(self.ids.clf_w).column(0).to_owned(),
            b: self.store.get(self.ids.clf_b)[[0, 0]],
        }
    }

    /// Named tensors: trainable parameters then running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Array2<f64>)> {
        let mut out: Vec<(String, Array2<f64>)> = self
            .store
            .names()
            .iter()
            .cloned()
            .zip(self.store.values().iter().cloned())
            .collect();
        out.push((RUNNING_MEAN.to_owned(), self.running_mean.clone()));
        out.push((RUNNING_VAR.to_owned(), self.running_var.clone()));
        out
    }

    /// Loads tensors produced by [`Model::named_tensors`] into a model built
    /// from the same configuration.
    pub fn load_tensors(&mut self, tensors: &[(String, Array2<f64>)]) -> Result<()> {
        let mut rest = Vec::with_capacity(tensors.len());
        for stat in [RUNNING_MEAN, RUNNING_VAR] {
            if !tensors.iter().any(|(n, _)| n == stat) {
                return Err(MmdaError::validation(format!("checkpoint lacks tensor {stat}")));
            }
        }
        for (name, t) in tensors {
            let slot = match name.as_str() {
                RUNNING_MEAN => &mut self.running_mean,
                RUNNING_VAR => &mut self.running_var,
                _ => {
                    rest.push((name.clone(), t.clone()));
                    continue;
                }
            };
            if slot.dim() != t.dim() {
                return Err(MmdaError::validation(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.dim(),
                    slot.dim()
                )));
            }
            *slot = t.clone();
        }
        self.store.load_from(&rest)
    }

    /// Stacks fused tokens of `samples` with their partners' on the feature
    /// axis: `[(B N) x 2 n_d]`.
    pub fn joint_matrix(samples: &[&EncodedSample], partners: &[&EncodedSample]) -> Result<(Array2<f64>, usize)> {
        let n = samples[0].n_tokens();
        let mut blocks = Vec::with_capacity(samples.len());
        for (s, p) in samples.iter().zip(partners) {
            if s.n_tokens() != n || p.n_tokens() != n {
                return Err(MmdaError::shape(format!(
                    "samples {} and {} have different token counts; group by present modalities first",
                    s.sample_id, p.sample_id
                )));
            }
            let (a, b) = (s.fused(), p.fused());
            blocks.push(concatenate(Axis(1), &[a.view(), b.view()]).expect("same token count"));
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        Ok((concatenate(Axis(0), &views).expect("same width"), n))
    }

    /// Block, pooling and U-DSA on the tape. `joint` is `[(B N) x 2 n_d]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &Bound, joint: Array2<f64>, b: usize, n: usize, bn: BnSource<'_>) -> Forward {
        let n_d = self.config.n_d;
        let joint = tape.leaf(joint);
        let heads: Vec<HeadVars> = self
            .ids
            .heads
            .iter()
            .map(|[q, k, v]| HeadVars {
                w_q: p[*q],
                w_k: p[*k],
                w_v: p[*v],
            })
            .collect();
        let (tokens, bn_stats) = md2a::block_on_tape(
            tape,
            joint,
            b,
            n,
            n_d,
            &heads,
            p[self.ids.lambda],
            p[self.ids.gamma],
            p[self.ids.beta],
            bn,
        );
        let pool = tape.leaf(Array2::from_shape_fn((b, b * n), |(i, j)| {
            if j / n == i {
                1.0 / n as f64
            } else {
                0.0
            }
        }));
        let pooled = tape.matmul(pool, tokens);
        let layers = udsa::forward_on_tape(tape, pooled, &self.ids.udsa, p);
        Forward { layers, bn_stats }
    }

    pub fn loss_on_tape(&self, tape: &mut Tape, p: &Bound, layers: &[Var], labels: &[Liveness], ts: &TextSpace) -> Result<Rs2Vars> {
        udsa::per_layer_rs2_on_tape(tape, layers, labels, ts, p[self.ids.clf_w], p[self.ids.clf_b], &self.config.rs2)
    }

    /// Spoof probability of each row of a pooled layer output.
    pub fn scores(&self, v: &Array2<f64>, ts: &TextSpace) -> Result<Vec<f64>> {
        if self.config.rs2.variant.uses_classifier() {
            let clf = self.classifier();
            Ok(v.rows().into_iter().map(|r| clf.spoof_probability(r)).collect())
        } else {
            v.rows().into_iter().map(|r| rs2::zero_shot_spoof_score(r, ts)).collect()
        }
    }

    /// Eval-mode scores for every layer: `result[layer][sample]`, in input
    /// order. Partners are drawn within each (present set, domain) group with
    /// a fixed seed, so the output is a pure function of the inputs.
    pub fn score_layers(&self, samples: &[EncodedSample], ts: &TextSpace, pair_seed: u64) -> Result<Vec<Vec<ScoreRecord>>> {
        const CHUNK: usize = 64;
        let depth = self.depth();
        let mut out: Vec<Vec<Option<ScoreRecord>>> = vec![vec![None; samples.len()]; depth + 1];
        let mut groups: BTreeMap<ModalitySet, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            groups.entry(s.present).or_default().push(i);
        }
        for (mask, idx) in groups {
            let domains: Vec<DomainLabel> = idx.iter().map(|&i| samples[i].domain.clone()).collect();
            let pairs = md2a::pair_indices(&domains, rng::derive_seed(pair_seed, &[&"eval-pairing", &mask.to_string()]), self.config.md2a.pairing);
            for (c, chunk) in idx.chunks(CHUNK).enumerate() {
                let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let partners: Vec<&EncodedSample> = (0..chunk.len()).map(|j| &samples[idx[pairs[c * CHUNK + j]]]).collect();
                let (joint, n) = Self::joint_matrix(&batch, &partners)?;
                if joint.iter().any(|v| !v.is_finite()) {
                    return Err(MmdaError::numeric("non-finite encoder output"));
                }
                let mut tape = Tape::new();
                let bound = self.store.bind(&mut tape);
                let fwd = self.forward_on_tape(
                    &mut tape,
                    &bound,
                    joint,
                    batch.len(),
                    n,
                    BnSource::Running {
                        mean: &self.running_mean,
                        var: &self.running_var,
                    },
                );
                for (layer, v) in fwd.layers.iter().enumerate() {
                    let vals = tape.value(*v);
                    if vals.iter().any(|x| !x.is_finite()) {
                        return Err(MmdaError::numeric(format!("non-finite output at U-DSA layer {layer}")));
                    }
                    for (j, score) in self.scores(vals, ts)?.into_iter().enumerate() {
                        let s = batch[j];
                        out[layer][chunk[j]] = Some(ScoreRecord {
                            score,
                            label: s.label,
                            domain: s.domain.clone(),
                            modality_mask: s.present,
                        });
                    }
                }
            }
        }
        Ok(out
            .into_iter()
            .map(|layer| layer.into_iter().map(|r| r.expect("every sample scored")).collect())
            .collect())
    }
}
