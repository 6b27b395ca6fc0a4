//! Frozen stand-ins for the pretrained visual and text encoders.
//!
//! Visual: non-overlapping `P x P` patches are flattened, projected by a
//! per-modality linear map, offset by a positional embedding and normalized to
//! unit length. One summary token (mean of the patch projections) is
//! prepended. Text: hashed bag of character trigrams, a frozen projection and
//! unit normalization.
//!
//! Parameters are drawn once from a seed and never updated.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand_distr::{Distribution, Normal};

use crate::error::{MmdaError, Result};
use crate::rng;
use crate::tensor_io::RawTensor;
use crate::types::{Batch, CaptionSet, EmbeddingBatch, Liveness, ModalityKind, ModalitySet, TextSpace};

pub const HASH_BUCKETS: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoderParams {
    pub seed: u64,
    pub n_d: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub patch_proj: BTreeMap<ModalityKind, Array2<f64>>,
    pub pos_embed: Array2<f64>,
    pub text_hash_proj: Array2<f64>,
}

fn gaussian(rows: usize, cols: usize, std: f64, g: &mut rng::Rng) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(g))
}

impl FrozenEncoderParams {
    pub fn generate(seed: u64, n_d: usize, patch: usize, height: usize, width: usize) -> Result<Self> {
        if n_d == 0 || patch == 0 {
            return Err(MmdaError::validation("n_d and patch size must be positive"));
        }
        if height % patch != 0 || width % patch != 0 {
            return Err(MmdaError::shape(format!(
                "image {height}x{width} is not divisible by patch size {patch}"
            )));
        }
        let mut patch_proj = BTreeMap::new();
        for kind in ModalityKind::ALL {
            let fan_in = patch * patch * kind.channels();
            let mut g = rng::stream(seed, &[&"backbone.patch_proj", &kind.name()]);
            patch_proj.insert(kind, gaussian(fan_in, n_d, 1.0 / (fan_in as f64).sqrt(), &mut g));
        }
        let n_tok = (height / patch) * (width / patch) + 1;
        let pos_embed = gaussian(n_tok, n_d, 0.5, &mut rng::stream(seed, &[&"backbone.pos_embed"]));
        let text_hash_proj = gaussian(HASH_BUCKETS, n_d, 1.0, &mut rng::stream(seed, &[&"backbone.text"]));
        Ok(FrozenEncoderParams {
            seed,
            n_d,
            patch,
            height,
            width,
            patch_proj,
            pos_embed,
            text_hash_proj,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.pos_embed.nrows()
    }

    /// Canonical byte image of every parameter, used to prove frozen-ness.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.seed.to_le_bytes());
        for a in self
            .patch_proj
            .values()
            .chain([&self.pos_embed, &self.text_hash_proj])
        {
            out.extend(RawTensor::from_array2(a).encode().expect("valid dims"));
        }
        out
    }
}

/// Centers and scales a vector to unit L2 norm.
fn center_unit(mut z: Array1<f64>) -> Array1<f64> {
    let m = z.mean().unwrap_or(0.0);
    z.mapv_inplace(|v| v - m);
    let n = z.dot(&z).sqrt();
    if n > 0.0 {
        z.mapv_inplace(|v| v / n);
    }
    z
}

/// Token normalization applied to every visual token.
pub fn normalize_token(z: ArrayView1<f64>) -> Array1<f64> {
    center_unit(z.to_owned())
}

/// Encodes one image into `[N_tok x n_d]` tokens.
pub fn encode_image(img: &Array3<f32>, kind: ModalityKind, params: &FrozenEncoderParams) -> Result<Array2<f64>> {
    let (h, w, c) = img.dim();
    let p = params.patch;
    if h % p != 0 || w % p != 0 {
        return Err(MmdaError::shape(format!("image {h}x{w} is not divisible by patch size {p}")));
    }
    if (h, w) != (params.height, params.width) {
        return Err(MmdaError::shape(format!(
            "image {h}x{w} does not match encoder grid {}x{}",
            params.height, params.width
        )));
    }
    if c != kind.channels() {
        return Err(MmdaError::shape(format!("{kind} image has {c} channels")));
    }
    let proj = &params.patch_proj[&kind];
    let (gh, gw) = (h / p, w / p);
    let mut patches = Array2::<f64>::zeros((gh * gw, p * p * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = patches.row_mut(gy * gw + gx);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        row[k] = img[[gy * p + y, gx * p + x, ch]] as f64;
                        k += 1;
                    }
                }
            }
        }
    }
    let projected = patches.dot(proj);
    let summary = projected.mean_axis(Axis(0)).expect("at least one patch");
    let n_d = params.n_d;
    let mut tokens = Array2::zeros((gh * gw + 1, n_d));
    tokens
        .row_mut(0)
        .assign(&center_unit(&summary + &params.pos_embed.row(0)));
    for t in 0..gh * gw {
        let z = &projected.row(t) + &params.pos_embed.row(t + 1);
        tokens.row_mut(t + 1).assign(&center_unit(z));
    }
    Ok(tokens)
}

/// Encodes `modality` for every sample of `batch`.
pub fn encode_visual(batch: &Batch, modality: ModalityKind, params: &FrozenEncoderParams) -> Result<EmbeddingBatch> {
    let n_tok = params.n_tokens();
    let mut tokens = Array3::zeros((batch.len(), n_tok, params.n_d));
    for (i, s) in batch.samples().iter().enumerate() {
        let img = s.images.get(&modality).ok_or_else(|| {
            MmdaError::validation(format!("sample {} lacks modality {modality}", s.sample_id))
        })?;
        tokens
            .index_axis_mut(Axis(0), i)
            .assign(&encode_image(img, modality, params)?);
    }
    let s = batch.samples();
    EmbeddingBatch::new(
        tokens,
        s.iter().map(|x| x.label).collect(),
        s.iter().map(|x| x.domain.clone()).collect(),
        s.iter().map(|x| x.sample_id.clone()).collect(),
        vec![ModalitySet::from_kinds([modality]); s.len()],
    )
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashed character-trigram counts of a caption (lower-cased, with `^`/`$`
/// boundary markers).
pub fn trigram_counts(caption: &str) -> Result<Array1<f64>> {
    if caption.trim().is_empty() {
        return Err(MmdaError::validation("empty caption string"));
    }
    let chars: Vec<char> = std::iter::once('^')
        .chain(caption.trim().to_lowercase().chars())
        .chain(std::iter::once('$'))
        .collect();
    let mut counts = Array1::zeros(HASH_BUCKETS);
    for w in chars.windows(3) {
        let s: String = w.iter().collect();
        counts[(fnv1a(s.as_bytes()) % HASH_BUCKETS as u64) as usize] += 1.0;
    }
    Ok(counts)
}

pub fn encode_caption(caption: &str, params: &FrozenEncoderParams) -> Result<Array1<f64>> {
    let z = trigram_counts(caption)?.dot(&params.text_hash_proj);
    let n = z.dot(&z).sqrt();
    if n == 0.0 {
        return Err(MmdaError::numeric(format!("caption '{caption}' projects to zero")));
    }
    Ok(z / n)
}

pub fn encode_text(captions: &CaptionSet, params: &FrozenEncoderParams) -> Result<TextSpace> {
    captions.validate()?;
    let all: Vec<(&String, Liveness)> = captions
        .live_captions
        .iter()
        .map(|c| (c, Liveness::Live))
        .chain(captions.spoof_captions.iter().map(|c| (c, Liveness::Spoof)))
        .collect();
    let mut emb = Array2::zeros((all.len(), params.n_d));
    for (j, (c, _)) in all.iter().enumerate() {
        emb.row_mut(j).assign(&encode_caption(c, params)?);
    }
    TextSpace::new(emb, all.into_iter().map(|(_, l)| l).collect())
}
