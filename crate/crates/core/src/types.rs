//! Shared domain types and batch validation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{MmdaError, Result};

/// Sensor modality. The derived ordering fixes concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Rgb,
    Depth,
    Ir,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 3] = [ModalityKind::Rgb, ModalityKind::Depth, ModalityKind::Ir];

    pub fn channels(self) -> usize {
        match self {
            ModalityKind::Rgb => 3,
            ModalityKind::Depth | ModalityKind::Ir => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Rgb => "rgb",
            ModalityKind::Depth => "depth",
            ModalityKind::Ir => "ir",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" | "r" => Ok(ModalityKind::Rgb),
            "depth" | "d" => Ok(ModalityKind::Depth),
            "ir" | "i" | "infrared" => Ok(ModalityKind::Ir),
            other => Err(MmdaError::validation(format!("unknown modality '{other}'"))),
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Subset of modalities, stored as a 3-bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const FULL: ModalitySet = ModalitySet(0b111);

    pub fn from_kinds(kinds: impl IntoIterator<Item = ModalityKind>) -> Self {
        ModalitySet(kinds.into_iter().fold(0, |m, k| m | (1 << k.index())))
    }

    pub fn contains(self, k: ModalityKind) -> bool {
        self.0 & (1 << k.index()) != 0
    }

    pub fn insert(&mut self, k: ModalityKind) {
        self.0 |= 1 << k.index();
    }

    pub fn remove(&mut self, k: ModalityKind) {
        self.0 &= !(1 << k.index());
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn difference(self, other: ModalitySet) -> ModalitySet {
        ModalitySet(self.0 & !other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = ModalityKind> {
        ModalityKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }

    /// Parses "D,I", "depth+ir", "" and similar.
    pub fn parse(s: &str) -> Result<Self> {
        s.split([',', '+', '&', ' '])
            .filter(|p| !p.trim().is_empty())
            .map(ModalityKind::parse)
            .collect::<Result<Vec<_>>>()
            .map(ModalitySet::from_kinds)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(|k| k.name()).collect();
        write!(f, "{}", names.join("+"))
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let kinds = Vec::<ModalityKind>::deserialize(d)?;
        Ok(ModalitySet::from_kinds(kinds))
    }
}

/// Opaque domain identifier. Cloning shares the interned string.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainLabel(Arc<str>);

impl DomainLabel {
    pub fn new(s: &str) -> Self {
        DomainLabel(Arc::from(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn ptr_eq(&self, other: &DomainLabel) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for DomainLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for DomainLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(DomainLabel::new(&String::deserialize(d)?))
    }
}

/// Liveness label: live = 1, spoof = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Liveness {
    Spoof = 0,
    Live = 1,
}

impl Liveness {
    pub fn target(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Liveness::Spoof),
            1 => Ok(Liveness::Live),
            _ => Err(MmdaError::validation(format!("liveness label must be 0 or 1, got {v}"))),
        }
    }
}

impl Serialize for Liveness {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for Liveness {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Liveness::from_u8(u8::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// One multimodal capture. Images are `[H x W x C]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample {
    pub images: BTreeMap<ModalityKind, Array3<f32>>,
    pub present: ModalitySet,
    pub domain: DomainLabel,
    pub label: Liveness,
    pub sample_id: String,
}

impl BatchSample {
    /// Spatial size shared by every present modality.
    pub fn size(&self) -> Option<(usize, usize)> {
        self.images.values().next().map(|a| (a.shape()[0], a.shape()[1]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.present.is_empty() {
            return Err(MmdaError::validation(format!(
                "sample {} has no present modality",
                self.sample_id
            )));
        }
        let keys = ModalitySet::from_kinds(self.images.keys().copied());
        if keys != self.present {
            return Err(MmdaError::validation(format!(
                "sample {}: present flags [{}] disagree with stored images [{}]",
                self.sample_id, self.present, keys
            )));
        }
        let (h, w) = self.size().expect("non-empty");
        for (kind, img) in &self.images {
            let s = img.shape();
            if s[0] != h || s[1] != w {
                return Err(MmdaError::shape(format!(
                    "sample {}: {kind} is {}x{}, expected {h}x{w}",
                    self.sample_id, s[0], s[1]
                )));
            }
            if s[2] != kind.channels() {
                return Err(MmdaError::shape(format!(
                    "sample {}: {kind} has {} channels, expected {}",
                    self.sample_id,
                    s[2],
                    kind.channels()
                )));
            }
            if let Some(v) = img.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(MmdaError::validation(format!(
                    "sample {}: {kind} pixel {v} outside [0, 1]",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }
}

/// A validated, sample-id-ordered collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    samples: Vec<BatchSample>,
    domains: Vec<DomainLabel>,
}

impl Batch {
    pub fn samples(&self) -> &[BatchSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<BatchSample> {
        self.samples
    }

    /// Distinct domains in first-seen order.
    pub fn domains(&self) -> &[DomainLabel] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        self.samples[0].size().expect("validated")
    }
}

/// Validates and assembles samples into a [`Batch`]: shared spatial size,
/// interned domain labels, ordering by `sample_id`.
pub fn make_batch(samples: Vec<BatchSample>) -> Result<Batch> {
    if samples.is_empty() {
        return Err(MmdaError::validation("empty batch"));
    }
    for s in &samples {
        s.validate()?;
    }
    let size = samples[0].size();
    if let Some(bad) = samples.iter().find(|s| s.size() != size) {
        let (h0, w0) = size.unwrap();
        let (h, w) = bad.size().unwrap();
        return Err(MmdaError::shape(format!(
            "sample {} is {h}x{w}, batch is {h0}x{w0}",
            bad.sample_id
        )));
    }
    let mut samples = samples;
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    if let Some(w) = samples.windows(2).find(|w| w[0].sample_id == w[1].sample_id) {
        return Err(MmdaError::validation(format!("duplicate sample_id {}", w[0].sample_id)));
    }
    let mut interned: HashMap<String, DomainLabel> = HashMap::new();
    let mut domains = Vec::new();
    for s in samples.iter_mut() {
        let label = interned
            .entry(s.domain.as_str().to_owned())
            .or_insert_with(|| {
                domains.push(s.domain.clone());
                s.domain.clone()
            })
            .clone();
        s.domain = label;
    }
    Ok(Batch { samples, domains })
}

/// Token embeddings `[B x N_tok x n_d]` plus their token-mean `pooled`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub tokens: Array3<f64>,
    pub pooled: Array2<f64>,
    pub labels: Vec<Liveness>,
    pub domains: Vec<DomainLabel>,
    pub sample_ids: Vec<String>,
    pub present: Vec<ModalitySet>,
}

impl EmbeddingBatch {
    pub fn new(
        tokens: Array3<f64>,
        labels: Vec<Liveness>,
        domains: Vec<DomainLabel>,
        sample_ids: Vec<String>,
        present: Vec<ModalitySet>,
    ) -> Result<Self> {
        let b = tokens.shape()[0];
        if tokens.shape()[1] == 0 || tokens.shape()[2] == 0 {
            return Err(MmdaError::shape("embedding batch needs at least one token and n_d > 0"));
        }
        if labels.len() != b || domains.len() != b || sample_ids.len() != b || present.len() != b {
            return Err(MmdaError::shape(format!(
                "metadata lengths ({}, {}, {}, {}) disagree with batch size {b}",
                labels.len(),
                domains.len(),
                sample_ids.len(),
                present.len()
            )));
        }
        let pooled = tokens.mean_axis(Axis(1)).expect("non-empty token axis");
        Ok(EmbeddingBatch {
            tokens,
            pooled,
            labels,
            domains,
            sample_ids,
            present,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Largest deviation between `pooled` and the recomputed token mean.
    pub fn pooled_deviation(&self) -> f64 {
        let mean = self.tokens.mean_axis(Axis(1)).expect("non-empty token axis");
        mean.iter()
            .zip(self.pooled.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Live and spoof caption strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub live_captions: Vec<String>,
    pub spoof_captions: Vec<String>,
}

impl CaptionSet {
    pub fn new(live_captions: Vec<String>, spoof_captions: Vec<String>) -> Result<Self> {
        let set = CaptionSet {
            live_captions,
            spoof_captions,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.live_captions.is_empty() || self.spoof_captions.is_empty() {
            return Err(MmdaError::validation("caption set needs at least one live and one spoof caption"));
        }
        if self
            .live_captions
            .iter()
            .chain(&self.spoof_captions)
            .any(|c| c.trim().is_empty())
        {
            return Err(MmdaError::validation("empty caption string"));
        }
        Ok(())
    }

    /// Parses one caption per line, each prefixed with `live:` or `spoof:`.
    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut live = Vec::new();
        let mut spoof = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(c) = line.strip_prefix("live:") {
                live.push(c.trim().to_owned());
            } else if let Some(c) = line.strip_prefix("spoof:") {
                spoof.push(c.trim().to_owned());
            } else {
                return Err(MmdaError::format(format!(
                    "caption line {}: expected 'live:' or 'spoof:' prefix",
                    n + 1
                )));
            }
        }
        CaptionSet::new(live, spoof)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.live_captions {
            out.push_str(&format!("live: {c}\n"));
        }
        for c in &self.spoof_captions {
            out.push_str(&format!("spoof: {c}\n"));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.live_captions.len() + self.spoof_captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for CaptionSet {
    fn default() -> Self {
        let live = [
            "This is an example of a real face",
            "This is a bonafide face",
            "This is a real face",
            "This is how a real face looks like",
            "A photo of a real face",
        ];
        let spoof = [
            "This is an example of a spoof face",
            "This is an example of an attack face",
            "This is not a real face",
            "This is how a spoof face looks like",
            "A printed photo of a face",
        ];
        CaptionSet {
            live_captions: live.iter().map(|s| s.to_string()).collect(),
            spoof_captions: spoof.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Frozen text embeddings spanning the generalized representation space.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSpace {
    pub embeddings: Array2<f64>,
    pub class_of: Vec<Liveness>,
}

impl TextSpace {
    pub fn new(embeddings: Array2<f64>, class_of: Vec<Liveness>) -> Result<Self> {
        if embeddings.nrows() != class_of.len() {
            return Err(MmdaError::shape("text rows and class labels disagree"));
        }
        if !embeddings.iter().all(|v| v.is_finite()) {
            return Err(MmdaError::numeric("non-finite text embedding"));
        }
        for c in [Liveness::Live, Liveness::Spoof] {
            if !class_of.contains(&c) {
                return Err(MmdaError::validation(format!("text space lacks class {c:?}")));
            }
        }
        Ok(TextSpace {
            embeddings,
            class_of,
        })
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn rows_of(&self, class: Liveness) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.class_of[j] == class).collect()
    }
}
