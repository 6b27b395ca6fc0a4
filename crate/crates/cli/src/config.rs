//! Run configuration: built-in defaults, overlaid by a TOML file, then by the
//! `MMDA_SEED` environment variable, then by `--section.key=value` flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mmda_core::error::{MmdaError, Result};
use mmda_core::fingerprint::json_hash;
use mmda_core::md2a::Md2aConfig;
use mmda_core::model::ModelConfig;
use mmda_core::protocol::ProtocolConfig;
use mmda_core::rng;
use mmda_core::rs2::Rs2Config;
use mmda_core::synthdata::{default_domains, DomainSpec, GeneratorConfig, SHIFT_BASIS};
use mmda_core::trainer::TrainConfig;
use mmda_core::types::{CaptionSet, ModalityKind};
use mmda_core::udsa::UdsaConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "MMDA_SEED";

/// Keys that exist but are derived from elsewhere, with the key to set instead.
const DERIVED_KEYS: &[(&str, &str)] = &[
    ("train.seed", "seed"),
    ("protocol.seed", "seed"),
    ("protocol.exit", "udsa.exit"),
];

/// Optional keys absent from the defaults.
const OPTIONAL_KEYS: &[&str] = &["data.domains", "data.captions"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    #[serde(default)]
    pub shift_vector: BTreeMap<ModalityKind, [f64; SHIFT_BASIS]>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub sensor_gain: BTreeMap<ModalityKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_live: usize,
    pub n_spoof: usize,
    pub height: usize,
    pub width: usize,
    pub spoof_signature_strength: f64,
    pub modality_noise_sigma: BTreeMap<ModalityKind, f64>,
    /// Explicit domains; the four presets when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domains: Option<Vec<DomainEntry>>,
    /// Caption file (`live:` / `spoof:` lines); the built-in set when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub captions: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        DataSection {
            n_live: g.n_live,
            n_spoof: g.n_spoof,
            height: g.height,
            width: g.width,
            spoof_signature_strength: g.spoof_signature_strength,
            modality_noise_sigma: g.modality_noise_sigma,
            domains: None,
            captions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_d: usize,
    pub patch: usize,
    pub backbone_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            n_d: m.n_d,
            patch: m.patch,
            backbone_seed: m.backbone_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: data, training, dev split and eval pairing all derive from it.
    pub seed: u64,
    /// Not part of the config hash.
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub md2a: Md2aConfig,
    pub rs2: Rs2Config,
    pub udsa: UdsaConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("mmda-out"),
            data: DataSection::default(),
            model: ModelSection::default(),
            md2a: Md2aConfig::default(),
            rs2: Rs2Config::default(),
            udsa: UdsaConfig::default(),
            train: TrainConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

/// Everything a command needs, with seeds applied.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub hash: String,
    pub generator: GeneratorConfig,
    pub domains: Vec<DomainSpec>,
    pub captions: CaptionSet,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
}

impl RunConfig {
    /// Layers `file`, the seed variable and `flags` (dotted key, raw value)
    /// over the defaults.
    pub fn load(file: Option<&Path>, env_seed: Option<&str>, flags: &[(String, String)]) -> Result<Self> {
        let defaults = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut table = defaults.clone();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| MmdaError::io(path, e))?;
            let file_table: toml::Table = toml::from_str(&text)
                .map_err(|e| MmdaError::format(format!("{}: {}", path.display(), e.message())))?;
            check_keys(&file_table, &defaults, "")?;
            merge(&mut table, file_table);
        }
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| MmdaError::config("seed", format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
            table.insert("seed".into(), toml::Value::Integer(to_toml_int(seed)?));
        }
        for (key, raw) in flags {
            set_dotted(&mut table, &defaults, key, parse_value(raw))?;
        }
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let key = e.path().to_string();
            let key = if key == "." { "config".to_owned() } else { key };
            MmdaError::config(key, e.into_inner().message())
        })
    }

    /// SHA-256 of the configuration without `out_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        json_hash(&v)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let generator = GeneratorConfig {
            n_live: self.data.n_live,
            n_spoof: self.data.n_spoof,
            height: self.data.height,
            width: self.data.width,
            spoof_signature_strength: self.data.spoof_signature_strength,
            modality_noise_sigma: self.data.modality_noise_sigma.clone(),
        };
        generator.validate()?;
        let domains = match &self.data.domains {
            None => default_domains(self.seed),
            Some(list) => {
                if list.is_empty() {
                    return Err(MmdaError::config("data.domains", "at least one domain is required"));
                }
                list.iter()
                    .map(|d| DomainSpec {
                        name: d.name.clone(),
                        shift_vector: d.shift_vector.clone(),
                        noise_sigma: d.noise_sigma,
                        sensor_gain: d.sensor_gain.clone(),
                        seed: rng::derive_seed(self.seed, &[&"domain", &d.name.as_str()]),
                    })
                    .collect()
            }
        };
        for (i, d) in domains.iter().enumerate() {
            d.validate().map_err(|e| MmdaError::config(format!("data.domains[{i}]"), e))?;
            if domains[..i].iter().any(|o| o.name == d.name) {
                return Err(MmdaError::config("data.domains", format!("duplicate domain '{}'", d.name)));
            }
        }
        let captions = match &self.data.captions {
            None => CaptionSet::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| MmdaError::io(p, e))?;
                CaptionSet::parse(&text).map_err(|e| MmdaError::config("data.captions", e))?
            }
        };
        let model = ModelConfig {
            n_d: self.model.n_d,
            patch: self.model.patch,
            height: self.data.height,
            width: self.data.width,
            backbone_seed: self.model.backbone_seed,
            md2a: self.md2a.clone(),
            rs2: self.rs2.clone(),
            udsa: self.udsa.clone(),
        };
        model.validate()?;
        let train = TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        };
        train.validate()?;
        let names: Vec<String> = domains.iter().map(|d| d.name.clone()).collect();
        let mut protocol = ProtocolConfig {
            seed: self.seed,
            exit: self.udsa.exit,
            ..self.protocol.clone()
        };
        // Splits follow the order in which domains are configured.
        if protocol.domains.is_empty() {
            protocol.domains = names.clone();
        }
        protocol.validate()?;
        protocol.subprotocols(&names)?;
        Ok(Resolved {
            config: self.clone(),
            hash: self.hash(),
            generator,
            domains,
            captions,
            model,
            train,
            protocol,
        })
    }
}

fn to_toml_int(v: u64) -> Result<i64> {
    i64::try_from(v).map_err(|_| MmdaError::config("seed", "must fit in a signed 64-bit integer"))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_owned()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Rejects keys that are neither in the defaults nor optional, naming the
/// full dotted path. Free-form maps (per-modality values) are not descended.
fn check_keys(table: &toml::Table, defaults: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in table {
        let path = join(prefix, k);
        if let Some((_, instead)) = DERIVED_KEYS.iter().find(|(key, _)| *key == path) {
            return Err(MmdaError::config(path, format!("derived from '{instead}'; set that key instead")));
        }
        match defaults.get(k) {
            Some(toml::Value::Table(d)) if !is_modality_map(d) => {
                if let toml::Value::Table(t) = v {
                    check_keys(t, d, &path)?;
                }
            }
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => return Err(MmdaError::config(path, "unknown configuration key")),
        }
    }
    Ok(())
}

fn is_modality_map(t: &toml::Table) -> bool {
    !t.is_empty() && t.keys().all(|k| ModalityKind::parse(k).is_ok())
}

fn set_dotted(table: &mut toml::Table, defaults: &toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(MmdaError::config(key, "malformed key"));
    }
    let mut nested = toml::Table::new();
    let mut leaf = value;
    for p in parts.iter().skip(1).rev() {
        nested.insert((*p).to_owned(), leaf);
        leaf = toml::Value::Table(std::mem::take(&mut nested));
    }
    let mut single = toml::Table::new();
    single.insert(parts[0].to_owned(), leaf);
    check_keys(&single, defaults, "")?;
    merge(table, single);
    Ok(())
}

/// Interprets a flag value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Splits `--section.key=value` (and `--seed=N`) flags out of the argument
/// list, returning the remaining arguments and the overrides. Known
/// subcommand options are left in place.
pub fn extract_overrides(args: Vec<String>, reserved: &[&str]) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let name = body.split('=').next().unwrap_or_default();
        if reserved.contains(&name) || !(name.contains('.') || name == "seed" || name == "out_dir") {
            rest.push(a);
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(MmdaError::config(name, "override flags take the form --section.key=value"));
        };
        overrides.push((key.to_owned(), value.to_owned()));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let t = toml::Table::try_from(RunConfig::default()).unwrap();
        let back: RunConfig = t.try_into().unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn flags_override_file_and_env() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 3\n[train]\nepochs = 4\n[md2a]\nlambda = 0.25\n").unwrap();
        let flags = vec![("train.epochs".to_owned(), "2".to_owned())];
        let c = RunConfig::load(Some(&p), Some("9"), &flags).unwrap();
        assert_eq!((c.seed, c.train.epochs, c.md2a.lambda), (9, 2, 0.25));
    }

    #[test]
    fn unknown_and_derived_keys_are_named() {
        let bad = |k: &str| match RunConfig::load(None, None, &[(k.to_owned(), "1".to_owned())]) {
            Err(MmdaError::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(bad("train.epoch"), "train.epoch");
        assert_eq!(bad("train.seed"), "train.seed");
    }

    #[test]
    fn modality_maps_accept_overrides() {
        let flags = vec![("data.modality_noise_sigma.ir".to_owned(), "0.05".to_owned())];
        let c = RunConfig::load(None, None, &flags).unwrap();
        assert_eq!(c.data.modality_noise_sigma[&ModalityKind::Ir], 0.05);
    }

    #[test]
    fn hash_ignores_out_dir_but_not_seed() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_protocol_domain_names_the_key() {
        let flags = vec![("protocol.domains".to_owned(), "[\"W-like\", \"nowhere\"]".to_owned())];
        let c = RunConfig::load(None, None, &flags).unwrap();
        match c.resolve() {
            Err(MmdaError::Config { key, .. }) => assert_eq!(key, "protocol.domains"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extracts_overrides_only() {
        let args: Vec<String> = ["mmda", "train", "--config", "c.toml", "--train.epochs=2", "--seed=4", "--resume"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, o) = extract_overrides(args, &["config"]).unwrap();
        assert_eq!(rest, ["mmda", "train", "--config", "c.toml", "--resume"]);
        assert_eq!(o, [("train.epochs".to_owned(), "2".to_owned()), ("seed".to_owned(), "4".to_owned())]);
    }
}
