//! Procedural multimodal captures with controllable domain shift.
//!
//! Live faces get a domed depth map and warm IR blobs; spoofs get a
//! near-planar depth map, attenuated IR and a faint moiré in RGB. Each domain
//! then applies its own low-frequency bias, sensor gain and pixel noise.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MmdaError, Result};
use crate::rng::{self, Rng};
use crate::types::{BatchSample, DomainLabel, Liveness, ModalityKind, ModalitySet};

/// Low-frequency bias basis: constant, horizontal ramp, vertical ramp, radial bowl.
pub const SHIFT_BASIS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Coefficients of the bias basis, per modality.
    pub shift_vector: BTreeMap<ModalityKind, [f64; SHIFT_BASIS]>,
    pub noise_sigma: f64,
    pub sensor_gain: BTreeMap<ModalityKind, f64>,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(MmdaError::validation(format!("invalid domain name '{}'", self.name)));
        }
        if !(0.0..1.0).contains(&self.noise_sigma) {
            return Err(MmdaError::validation(format!(
                "domain {}: noise_sigma {} outside [0, 1)",
                self.name, self.noise_sigma
            )));
        }
        for k in ModalityKind::ALL {
            let g = self.gain(k);
            if !(g > 0.0 && g.is_finite()) {
                return Err(MmdaError::validation(format!("domain {}: {k} gain must be positive", self.name)));
            }
        }
        if self.shift_vector.values().flatten().any(|c| !c.is_finite()) {
            return Err(MmdaError::validation(format!("domain {}: non-finite shift", self.name)));
        }
        Ok(())
    }

    pub fn gain(&self, k: ModalityKind) -> f64 {
        self.sensor_gain.get(&k).copied().unwrap_or(1.0)
    }

    pub fn shift(&self, k: ModalityKind) -> [f64; SHIFT_BASIS] {
        self.shift_vector.get(&k).copied().unwrap_or([0.0; SHIFT_BASIS])
    }

    /// A domain with no shift, unit gain and no noise.
    pub fn neutral(name: &str, seed: u64) -> Self {
        DomainSpec {
            name: name.to_owned(),
            shift_vector: BTreeMap::new(),
            noise_sigma: 0.0,
            sensor_gain: BTreeMap::new(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_live: usize,
    pub n_spoof: usize,
    pub height: usize,
    pub width: usize,
    /// Blend factor in `[0, 1]` from a live-like capture to the full spoof
    /// cue. Zero makes the classes indistinguishable.
    pub spoof_signature_strength: f64,
    pub modality_noise_sigma: BTreeMap<ModalityKind, f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_live: 60,
            n_spoof: 60,
            height: 32,
            width: 32,
            spoof_signature_strength: 0.6,
            modality_noise_sigma: ModalityKind::ALL.iter().map(|&k| (k, 0.03)).collect(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_live + self.n_spoof == 0 {
            return Err(MmdaError::config("data.n_live", "at least one sample per domain is required"));
        }
        if self.height < 2 || self.width < 2 {
            return Err(MmdaError::config("data.height", "images must be at least 2x2"));
        }
        if !(0.0..=1.0).contains(&self.spoof_signature_strength) {
            return Err(MmdaError::config("data.spoof_signature_strength", "must lie in [0, 1]"));
        }
        if self.modality_noise_sigma.values().any(|s| !(0.0..1.0).contains(s)) {
            return Err(MmdaError::config("data.modality_noise_sigma", "each sigma must lie in [0, 1)"));
        }
        Ok(())
    }

    fn modality_sigma(&self, k: ModalityKind) -> f64 {
        self.modality_noise_sigma.get(&k).copied().unwrap_or(0.0)
    }
}

/// The four preset domains, loosely modelled on four capture setups with
/// different sensors and lighting.
pub fn default_domains(base_seed: u64) -> Vec<DomainSpec> {
    use ModalityKind::{Depth, Ir, Rgb};
    let preset = |name: &str, shifts: [[f64; SHIFT_BASIS]; 3], gains: [f64; 3], noise: f64| DomainSpec {
        name: name.to_owned(),
        shift_vector: [(Rgb, shifts[0]), (Depth, shifts[1]), (Ir, shifts[2])].into_iter().collect(),
        noise_sigma: noise,
        sensor_gain: [(Rgb, gains[0]), (Depth, gains[1]), (Ir, gains[2])].into_iter().collect(),
        seed: rng::derive_seed(base_seed, &[&"domain", &name]),
    };
    vec![
        preset(
            "W-like",
            [[0.10, 0.08, 0.0, 0.0], [0.05, 0.0, 0.10, 0.0], [0.00, -0.08, 0.0, 0.06]],
            [1.10, 0.90, 1.20],
            0.04,
        ),
        preset(
            "C-like",
            [[-0.08, 0.0, 0.10, 0.05], [0.10, 0.10, 0.0, 0.0], [0.12, 0.0, 0.0, -0.05]],
            [0.85, 1.15, 0.80],
            0.06,
        ),
        preset(
            "P-like",
            [[0.05, -0.10, 0.0, 0.08], [-0.08, 0.0, -0.08, 0.06], [-0.10, 0.08, 0.05, 0.0]],
            [1.00, 1.25, 1.05],
            0.03,
        ),
        preset(
            "S-like",
            [[0.0, 0.05, -0.10, -0.06], [0.0, -0.12, 0.05, -0.05], [0.05, 0.0, -0.10, 0.10]],
            [0.95, 0.80, 0.90],
            0.05,
        ),
    ]
}

/// Per-sample face geometry, drawn identically for both classes.
struct Face {
    cx: f64,
    cy: f64,
    radius: f64,
    curvature: f64,
    tilt: (f64, f64),
    eye_gap: f64,
    ir_level: f64,
    skin: [f64; 3],
    texture: Vec<(f64, f64, f64, f64, usize)>,
    moire_angle: f64,
}

impl Face {
    fn draw(g: &mut Rng) -> Self {
        Face {
            cx: g.random_range(-0.15..0.15),
            cy: g.random_range(-0.15..0.15),
            radius: g.random_range(0.55..0.75),
            curvature: g.random_range(0.7..1.0),
            tilt: (g.random_range(-0.3..0.3), g.random_range(-0.3..0.3)),
            eye_gap: g.random_range(0.25..0.35),
            ir_level: g.random_range(0.8..1.0),
            skin: [g.random_range(0.55..0.7), g.random_range(0.4..0.5), g.random_range(0.3..0.4)],
            texture: (0..3)
                .map(|_| {
                    (
                        g.random_range(0.5..2.5),
                        g.random_range(0.5..2.5),
                        g.random_range(0.0..std::f64::consts::TAU),
                        g.random_range(0.02..0.06),
                        g.random_range(0..3usize),
                    )
                })
                .collect(),
            moire_angle: g.random_range(0.0..std::f64::consts::PI),
        }
    }

    fn dome(&self, u: f64, v: f64) -> f64 {
        let r2 = ((u - self.cx).powi(2) + (v - self.cy).powi(2)) / self.radius.powi(2);
        (1.0 - r2).max(0.0)
    }

    fn mask(&self, u: f64, v: f64) -> f64 {
        (-((u - self.cx).powi(2) + (v - self.cy).powi(2)) / self.radius.powi(2)).exp()
    }

    fn blob(&self, u: f64, v: f64, x: f64, y: f64, w: f64) -> f64 {
        (-((u - x).powi(2) + (v - y).powi(2)) / (w * w)).exp()
    }
}

fn coords(h: usize, w: usize, i: usize, j: usize) -> (f64, f64) {
    let u = if w > 1 { 2.0 * j as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
    let v = if h > 1 { 2.0 * i as f64 / (h - 1) as f64 - 1.0 } else { 0.0 };
    (u, v)
}

fn shift_at(c: &[f64; SHIFT_BASIS], u: f64, v: f64) -> f64 {
    c[0] + c[1] * u + c[2] * v + c[3] * (0.5 * (u * u + v * v) - 0.33)
}

/// Clean (pre-domain) content of every modality, in `[H x W x C]` f64.
fn render(face: &Face, label: Liveness, s: f64, h: usize, w: usize) -> BTreeMap<ModalityKind, Array3<f64>> {
    let spoof = if label == Liveness::Spoof { s } else { 0.0 };
    let live_depth = |u: f64, v: f64| 0.25 + 0.55 * face.curvature * face.dome(u, v);
    // The planar replacement keeps the live map's mean so only shape differs.
    let mean_live = {
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                let (u, v) = coords(h, w, i, j);
                acc += live_depth(u, v);
            }
        }
        acc / (h * w) as f64
    };
    let mut rgb = Array3::zeros((h, w, 3));
    let mut depth = Array3::zeros((h, w, 1));
    let mut ir = Array3::zeros((h, w, 1));
    for i in 0..h {
        for j in 0..w {
            let (u, v) = coords(h, w, i, j);
            let m = face.mask(u, v);
            let moire = 0.06 * spoof * (14.0 * (u * face.moire_angle.cos() + v * face.moire_angle.sin())).sin();
            for c in 0..3 {
                let mut x = 0.25 + (face.skin[c] - 0.25) * m;
                for &(fu, fv, ph, amp, ch) in &face.texture {
                    if ch == c {
                        x += amp * (fu * u * 3.0 + fv * v * 3.0 + ph).sin();
                    }
                }
                rgb[[i, j, c]] = x + moire;
            }
            let planar = mean_live + 0.15 * (face.tilt.0 * u + face.tilt.1 * v);
            depth[[i, j, 0]] = (1.0 - spoof) * live_depth(u, v) + spoof * planar;
            let eyes = face.blob(u, v, face.cx - face.eye_gap, face.cy - 0.2, 0.12)
                + face.blob(u, v, face.cx + face.eye_gap, face.cy - 0.2, 0.12);
            let warm = face.ir_level * (0.45 * m + 0.25 * eyes);
            ir[[i, j, 0]] = 0.15 + (1.0 - 0.6 * spoof) * warm;
        }
    }
    [(ModalityKind::Rgb, rgb), (ModalityKind::Depth, depth), (ModalityKind::Ir, ir)]
        .into_iter()
        .collect()
}

pub fn sample_id(domain: &str, label: Liveness, index: usize) -> String {
    let tag = match label {
        Liveness::Live => "live",
        Liveness::Spoof => "spoof",
    };
    format!("{domain}-{tag}-{index:05}")
}

/// One capture; a pure function of `(spec, cfg, label, index)`.
pub fn generate_sample(spec: &DomainSpec, cfg: &GeneratorConfig, label: Liveness, index: usize) -> BatchSample {
    let id = sample_id(&spec.name, label, index);
    let mut g = rng::stream(spec.seed, &[&"sample", &id.as_str()]);
    let face = Face::draw(&mut g);
    let (h, w) = (cfg.height, cfg.width);
    let clean = render(&face, label, cfg.spoof_signature_strength, h, w);
    let mut images = BTreeMap::new();
    for (kind, img) in clean {
        let sigma = (spec.noise_sigma.powi(2) + cfg.modality_sigma(kind).powi(2)).sqrt();
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        let gain = spec.gain(kind);
        let shift = spec.shift(kind);
        let out = Array3::from_shape_fn(img.dim(), |(i, j, c)| {
            let (u, v) = coords(h, w, i, j);
            let x = gain * img[[i, j, c]] + shift_at(&shift, u, v) + noise.sample(&mut g);
            x.clamp(0.0, 1.0) as f32
        });
        images.insert(kind, out);
    }
    BatchSample {
        images,
        present: ModalitySet::FULL,
        domain: DomainLabel::new(&spec.name),
        label,
        sample_id: id,
    }
}

/// All live then all spoof captures of one domain.
pub fn generate_domain(spec: &DomainSpec, cfg: &GeneratorConfig) -> Result<Vec<BatchSample>> {
    spec.validate()?;
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_live + cfg.n_spoof);
    out.extend((0..cfg.n_live).map(|i| generate_sample(spec, cfg, Liveness::Live, i)));
    out.extend((0..cfg.n_spoof).map(|i| generate_sample(spec, cfg, Liveness::Spoof, i)));
    Ok(out)
}

/// Drops the listed modalities from every sample.
pub fn apply_missing_mask(samples: Vec<BatchSample>, missing: ModalitySet) -> Result<Vec<BatchSample>> {
    if missing == ModalitySet::FULL {
        return Err(MmdaError::validation("cannot drop every modality"));
    }
    samples
        .into_iter()
        .map(|mut s| {
            for k in missing.iter() {
                s.present.remove(k);
                s.images.remove(&k);
            }
            if s.present.is_empty() {
                return Err(MmdaError::validation(format!(
                    "sample {} would have no modality left",
                    s.sample_id
                )));
            }
            Ok(s)
        })
        .collect()
}
