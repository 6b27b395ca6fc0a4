//! Optimization loop: AdamW with decoupled weight decay, global-norm
//! clipping, and per-step derived random streams so a resumed run replays
//! the uninterrupted one exactly.

use log::{debug, info};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{MmdaError, Result};
use crate::md2a::{self, BnSource};
use crate::metrics::ScoreRecord;
use crate::model::{EncodedSample, Model};
use crate::rng;
use crate::types::{DomainLabel, Liveness, ModalitySet, TextSpace};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Maximum global gradient norm; `0` disables clipping.
    pub grad_clip: f64,
}

/// Desk-scale defaults; see [`TrainConfig::reference`] for the published
/// full-scale settings.
impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-3,
            epochs: 10,
            batch_size: 24,
            seed: 0,
            optimizer: Optimizer::Adamw,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    /// Settings used with full-size CLIP backbones.
    pub fn reference() -> Self {
        TrainConfig {
            lr: 5e-6,
            epochs: 80,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MmdaError::config("train.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(MmdaError::config("train.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(MmdaError::config("train.batch_size", "must be positive"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(MmdaError::config("train.grad_clip", "must be non-negative"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(params: &[Array2<f64>]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    /// One AdamW step on the parameters flagged in `trainable`.
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], trainable: &[bool], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            p.mapv_inplace(|x| x * (1.0 - lr * weight_decay));
            m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            });
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 {
        let coef = max_norm / (norm + 1e-6);
        if coef < 1.0 {
            for g in grads.iter_mut() {
                g.mapv_inplace(|x| x * coef);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    pub l_cls: f64,
    pub l_align: f64,
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub history: Vec<StepLog>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(model.store.values());
        TrainState {
            model,
            adam,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        }
    }

    /// Mean total loss of each completed epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for s in &self.history {
            if out.len() <= s.epoch {
                out.resize(s.epoch + 1, (0.0, 0));
            }
            out[s.epoch].0 += s.total;
            out[s.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

/// Runs epochs `state.epoch .. cfg.epochs`.
pub fn train(mut state: TrainState, data: &[EncodedSample], ts: &TextSpace, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MmdaError::validation("no training samples"));
    }
    let n_tok = data[0].n_tokens();
    if let Some(s) = data.iter().find(|s| s.n_tokens() != n_tok) {
        return Err(MmdaError::validation(format!(
            "training sample {} has a different modality set from {}",
            s.sample_id, data[0].sample_id
        )));
    }
    if let Some(s) = data.iter().find(|s| s.tokens.values().any(|t| t.ncols() != state.model.config.n_d)) {
        return Err(MmdaError::validation(format!(
            "sample {} was encoded with a width other than n_d = {}",
            s.sample_id, state.model.config.n_d
        )));
    }
    let trainable: Vec<bool> = state.model.store.ids().map(|id| state.model.is_trainable(id)).collect();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[&"shuffle", &epoch]));
        for chunk in order.chunks(cfg.batch_size) {
            let log = train_step(&mut state, data, chunk, ts, cfg, &trainable)?;
            debug!("epoch {epoch} step {} loss {:.6}", log.step, log.total);
            state.history.push(log);
        }
        state.epoch += 1;
        info!(
            "epoch {epoch}: mean loss {:.6}",
            state.epoch_means().get(epoch).copied().unwrap_or(f64::NAN)
        );
    }
    Ok(state)
}

/// Eval-mode scores from U-DSA layer `exit` after removing `missing`
/// modalities. Pairing uses `pair_seed`, so repeated calls agree exactly.
pub fn evaluate(
    model: &Model,
    data: &[EncodedSample],
    ts: &TextSpace,
    missing: ModalitySet,
    exit: usize,
    pair_seed: u64,
) -> Result<Vec<ScoreRecord>> {
    if exit > model.depth() {
        return Err(MmdaError::config(
            "udsa.exit",
            format!("layer {exit} exceeds model depth {}", model.depth()),
        ));
    }
    if let Some(s) = data.iter().find(|s| s.tokens.values().any(|t| t.ncols() != model.config.n_d)) {
        return Err(MmdaError::validation(format!(
            "sample {} has embedding width {} but the checkpoint expects n_d = {}",
            s.sample_id,
            s.tokens.values().next().map_or(0, |t| t.ncols()),
            model.config.n_d
        )));
    }
    let data: Vec<EncodedSample> = data.iter().map(|s| s.without(missing)).collect::<Result<_>>()?;
    Ok(model.score_layers(&data, ts, pair_seed)?.swap_remove(exit))
}

fn train_step(
    state: &mut TrainState,
    data: &[EncodedSample],
    chunk: &[usize],
    ts: &TextSpace,
    cfg: &TrainConfig,
    trainable: &[bool],
) -> Result<StepLog> {
    let (epoch, step) = (state.epoch, state.step);
    let model = &mut state.model;
    let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &data[i]).collect();
    let domains: Vec<DomainLabel> = batch.iter().map(|s| s.domain.clone()).collect();
    let labels: Vec<Liveness> = batch.iter().map(|s| s.label).collect();
    let pairs = md2a::pair_indices(&domains, rng::derive_seed(cfg.seed, &[&"pairing", &step]), model.config.md2a.pairing);
    let partners: Vec<&EncodedSample> = pairs.iter().map(|&j| batch[j]).collect();
    let (joint, n) = Model::joint_matrix(&batch, &partners)?;

    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let bn = if batch.len() > 1 {
        BnSource::Batch
    } else {
        BnSource::Running {
            mean: &model.running_mean,
            var: &model.running_var,
        }
    };
    let fwd = model.forward_on_tape(&mut tape, &bound, joint, batch.len(), n, bn);
    let loss = model.loss_on_tape(&mut tape, &bound, &fwd.layers, &labels, ts)?;
    let log = StepLog {
        epoch,
        step,
        total: tape.scalar(loss.total),
        l_cls: tape.scalar(loss.cls),
        l_align: tape.scalar(loss.align),
    };
    if !log.total.is_finite() {
        return Err(MmdaError::numeric(format!("non-finite loss at epoch {epoch}, step {step}")));
    }
    let grads = tape.backward(loss.total);
    let mut g: Vec<Array2<f64>> = bound
        .vars()
        .iter()
        .zip(model.store.values())
        .zip(trainable)
        .map(|((v, p), &t)| {
            if t {
                grads.get_or_zeros(*v, p.dim())
            } else {
                Array2::zeros(p.dim())
            }
        })
        .collect();
    if g.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(MmdaError::numeric(format!("non-finite gradient at epoch {epoch}, step {step}")));
    }
    clip_global_norm(&mut g, cfg.grad_clip);
    state
        .adam
        .step(model.store.values_mut(), &g, trainable, cfg.lr, cfg.weight_decay);
    if let Some(stats) = &fwd.bn_stats {
        md2a::update_running(&mut model.running_mean, &mut model.running_var, stats);
    }
    state.step += 1;
    Ok(log)
}
