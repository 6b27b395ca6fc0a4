//! Cross-domain evaluation protocols.
//!
//! * P1: leave one domain out; one row per held-out domain.
//! * P2: the P1 models evaluated with modalities removed at test time; one
//!   row per missing set, averaged over the leave-one-out splits.
//! * P3: two domains in, the other two out, in both directions.
//!
//! A stratified dev split carved from the training domains picks both the
//! exit layer and the decision threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{MmdaError, Result};
use crate::metrics::{auc, eer_threshold, far_frr, hter, ScoreRecord};
use crate::model::{EncodedSample, Model};
use crate::rng;
use crate::types::{Liveness, ModalityKind, ModalitySet, TextSpace};
use crate::udsa::{layer_hters, ExitPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    #[default]
    #[serde(alias = "p1")]
    P1Loo,
    #[serde(alias = "p2")]
    P2Missing,
    #[serde(alias = "p3")]
    P3Limited,
    /// Explicit `train_domains` / `test_domains`.
    Custom,
}

impl ProtocolKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "p1" | "p1_loo" => Ok(ProtocolKind::P1Loo),
            "p2" | "p2_missing" => Ok(ProtocolKind::P2Missing),
            "p3" | "p3_limited" => Ok(ProtocolKind::P3Limited),
            "custom" => Ok(ProtocolKind::Custom),
            other => Err(MmdaError::config("protocol.kind", format!("unknown protocol '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    #[default]
    DevEer,
    TestEer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    /// Domain order for P1–P3; empty means every available domain, sorted.
    pub domains: Vec<String>,
    pub train_domains: Vec<String>,
    pub test_domains: Vec<String>,
    /// Missing sets evaluated by P2 (and applied to the custom protocol).
    pub missing: Vec<ModalitySet>,
    pub threshold: ThresholdRule,
    pub exit: ExitPolicy,
    pub dev_fraction: f64,
    /// Seed of the dev split and of eval-time pairing.
    pub seed: u64,
    pub roc_plots: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        use ModalityKind::{Depth, Ir};
        ProtocolConfig {
            kind: ProtocolKind::P1Loo,
            domains: Vec::new(),
            train_domains: Vec::new(),
            test_domains: Vec::new(),
            missing: vec![
                ModalitySet::from_kinds([Depth]),
                ModalitySet::from_kinds([Ir]),
                ModalitySet::from_kinds([Depth, Ir]),
            ],
            threshold: ThresholdRule::DevEer,
            exit: ExitPolicy::Auto,
            dev_fraction: 0.1,
            seed: 0,
            roc_plots: false,
        }
    }
}

/// One train/test split of a protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subprotocol {
    pub name: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub missing: ModalitySet,
}

fn short_names(domains: &[String]) -> BTreeMap<String, String> {
    let initials: Vec<String> = domains.iter().map(|d| d.chars().take(1).collect()).collect();
    let mut unique = initials.clone();
    unique.sort();
    unique.dedup();
    let use_initials = unique.len() == initials.len();
    domains
        .iter()
        .zip(initials)
        .map(|(d, i)| (d.clone(), if use_initials { i } else { format!("{d}+") }))
        .collect()
}

fn split_name(short: &BTreeMap<String, String>, train: &[String], test: &[String]) -> String {
    let join = |ds: &[String]| ds.iter().map(|d| short[d].as_str()).collect::<String>().trim_end_matches('+').to_owned();
    format!("{}->{}", join(train), join(test))
}

pub fn missing_name(missing: ModalitySet) -> String {
    if missing.is_empty() {
        return "Full".into();
    }
    let parts: Vec<&str> = missing
        .iter()
        .map(|k| match k {
            ModalityKind::Rgb => "R",
            ModalityKind::Depth => "D",
            ModalityKind::Ir => "I",
        })
        .collect();
    format!("Missing {}", parts.join("&"))
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(MmdaError::config("protocol.dev_fraction", "must lie in (0, 1)"));
        }
        if self.missing.contains(&ModalitySet::FULL) {
            return Err(MmdaError::config("protocol.missing", "cannot drop every modality"));
        }
        if self.kind == ProtocolKind::Custom {
            if self.train_domains.is_empty() || self.test_domains.is_empty() {
                return Err(MmdaError::config("protocol.train_domains", "custom protocols need train and test domains"));
            }
            if let Some(d) = self.train_domains.iter().find(|d| self.test_domains.contains(d)) {
                return Err(MmdaError::config("protocol.test_domains", format!("domain '{d}' is both a train and a test domain")));
            }
        }
        Ok(())
    }

    fn ordered_domains(&self, available: &[String]) -> Result<Vec<String>> {
        let order = if self.domains.is_empty() {
            let mut d = available.to_vec();
            d.sort();
            d
        } else {
            self.domains.clone()
        };
        for d in order.iter().chain(&self.train_domains).chain(&self.test_domains) {
            if !available.contains(d) {
                return Err(MmdaError::config("protocol.domains", format!("unknown domain '{d}'")));
            }
        }
        Ok(order)
    }

    /// Expands the protocol into its train/test splits. P2 splits carry
    /// their missing set; rows group them by it.
    pub fn subprotocols(&self, available: &[String]) -> Result<Vec<Subprotocol>> {
        self.validate()?;
        let domains = self.ordered_domains(available)?;
        let short = short_names(&domains);
        let loo = |missing: ModalitySet| -> Result<Vec<Subprotocol>> {
            if domains.len() < 2 {
                return Err(MmdaError::config("protocol.domains", "leave-one-out needs at least two domains"));
            }
            Ok(domains
                .iter()
                .map(|test| {
                    let train: Vec<String> = domains.iter().filter(|d| *d != test).cloned().collect();
                    let test = vec![test.clone()];
                    Subprotocol {
                        name: split_name(&short, &train, &test),
                        train,
                        test,
                        missing,
                    }
                })
                .collect())
        };
        match self.kind {
            ProtocolKind::P1Loo => loo(ModalitySet::EMPTY),
            ProtocolKind::P2Missing => {
                let mut out = Vec::new();
                for &m in &self.missing {
                    out.extend(loo(m)?);
                }
                Ok(out)
            }
            ProtocolKind::P3Limited => {
                if domains.len() != 4 {
                    return Err(MmdaError::config("protocol.domains", "the limited-source protocol needs exactly four domains"));
                }
                let a = vec![domains[1].clone(), domains[0].clone()];
                let b = vec![domains[2].clone(), domains[3].clone()];
                Ok(vec![
                    Subprotocol {
                        name: split_name(&short, &a, &b),
                        train: a.clone(),
                        test: b.clone(),
                        missing: ModalitySet::EMPTY,
                    },
                    Subprotocol {
                        name: split_name(&short, &b, &a),
                        train: b,
                        test: a,
                        missing: ModalitySet::EMPTY,
                    },
                ])
            }
            ProtocolKind::Custom => {
                let short = short_names(&domains);
                let missing = self.missing.first().copied().unwrap_or(ModalitySet::EMPTY);
                let mut sp = Subprotocol {
                    name: String::new(),
                    train: self.train_domains.clone(),
                    test: self.test_domains.clone(),
                    missing,
                };
                sp.name = if sp.train.iter().chain(&sp.test).all(|d| short.contains_key(d)) {
                    split_name(&short, &sp.train, &sp.test)
                } else {
                    format!("{}->{}", sp.train.join("+"), sp.test.join("+"))
                };
                Ok(vec![sp])
            }
        }
    }

    /// Distinct training-domain sets, in first-use order.
    pub fn training_sets(&self, available: &[String]) -> Result<Vec<Vec<String>>> {
        let mut out: Vec<Vec<String>> = Vec::new();
        for sp in self.subprotocols(available)? {
            if !out.contains(&sp.train) {
                out.push(sp.train);
            }
        }
        Ok(out)
    }
}

/// Stable file-name key for a training-domain set.
pub fn train_set_key(train: &[String]) -> String {
    let mut d = train.to_vec();
    d.sort();
    d.join("+")
}

/// Splits samples into (train, dev), holding out `fraction` of every
/// (domain, label) stratum, at least one sample when the stratum has two or
/// more.
pub fn split_dev(samples: &[EncodedSample], fraction: f64, seed: u64) -> (Vec<EncodedSample>, Vec<EncodedSample>) {
    let mut strata: BTreeMap<(String, Liveness), Vec<&EncodedSample>> = BTreeMap::new();
    for s in samples {
        strata.entry((s.domain.as_str().to_owned(), s.label)).or_default().push(s);
    }
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for ((domain, label), mut group) in strata {
        group.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        group.shuffle(&mut rng::stream(seed, &[&"dev-split", &domain.as_str(), &(label as u64)]));
        let k = if group.len() >= 2 {
            ((group.len() as f64 * fraction).round() as usize).clamp(1, group.len() - 1)
        } else {
            0
        };
        dev.extend(group[..k].iter().map(|s| (*s).clone()));
        train.extend(group[k..].iter().map(|s| (*s).clone()));
    }
    train.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    dev.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    (train, dev)
}

pub fn gather(data: &BTreeMap<String, Vec<EncodedSample>>, domains: &[String]) -> Result<Vec<EncodedSample>> {
    let mut out = Vec::new();
    for d in domains {
        let s = data
            .get(d)
            .ok_or_else(|| MmdaError::config("protocol.domains", format!("no data for domain '{d}'")))?;
        out.extend(s.iter().cloned());
    }
    Ok(out)
}

pub fn with_missing(samples: &[EncodedSample], missing: ModalitySet) -> Result<Vec<EncodedSample>> {
    samples.iter().map(|s| s.without(missing)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub subprotocol: String,
    /// Percent.
    pub hter: f64,
    /// Percent.
    pub auc: f64,
    pub tau: Option<f64>,
    pub exit_layer: Option<usize>,
    /// Dev HTER of every layer, for exit-layer statistics.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dev_layer_hter: Vec<f64>,
    /// Per-split rows behind an aggregated row.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ProtocolRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: ProtocolKind,
    pub config_hash: String,
    pub threshold: ThresholdRule,
    pub exit: ExitPolicy,
    pub rows: Vec<ProtocolRow>,
    pub average: ProtocolRow,
}

/// Scores and metrics for one split with a trained model.
pub struct SplitResult {
    pub row: ProtocolRow,
    pub test_records: Vec<ScoreRecord>,
}

/// Evaluates a trained model on one split: exit layer and threshold from
/// the dev samples, metrics on the (possibly modality-reduced) test samples.
pub fn evaluate_split(
    name: &str,
    model: &Model,
    dev: &[EncodedSample],
    test: &[EncodedSample],
    ts: &TextSpace,
    cfg: &ProtocolConfig,
) -> Result<SplitResult> {
    let pair_seed = rng::derive_seed(cfg.seed, &[&"eval-pairing"]);
    let dev_layers = model.score_layers(dev, ts, pair_seed)?;
    let dev_hters = layer_hters(&dev_layers)?;
    let exit = match cfg.exit {
        ExitPolicy::Auto => crate::metrics::argmin_first(&dev_hters).expect("non-empty"),
        ExitPolicy::Fixed(i) if i <= model.depth() => i,
        ExitPolicy::Fixed(i) => {
            return Err(MmdaError::config("udsa.exit", format!("layer {i} exceeds model depth {}", model.depth())));
        }
    };
    let test_layers = model.score_layers(test, ts, pair_seed)?;
    let test_records = test_layers.into_iter().nth(exit).expect("exit within depth");
    let tau = match cfg.threshold {
        ThresholdRule::DevEer => eer_threshold(&dev_layers[exit])?,
        ThresholdRule::TestEer => eer_threshold(&test_records)?,
    };
    let row = ProtocolRow {
        subprotocol: name.to_owned(),
        hter: 100.0 * hter(&test_records, tau)?,
        auc: 100.0 * auc(&test_records)?,
        tau: Some(tau),
        exit_layer: Some(exit),
        dev_layer_hter: dev_hters.iter().map(|h| 100.0 * h).collect(),
        components: Vec::new(),
    };
    Ok(SplitResult { row, test_records })
}

fn mean_row(name: &str, rows: &[ProtocolRow], keep: bool) -> ProtocolRow {
    let n = rows.len().max(1) as f64;
    ProtocolRow {
        subprotocol: name.to_owned(),
        hter: rows.iter().map(|r| r.hter).sum::<f64>() / n,
        auc: rows.iter().map(|r| r.auc).sum::<f64>() / n,
        tau: None,
        exit_layer: None,
        dev_layer_hter: Vec::new(),
        components: if keep { rows.to_vec() } else { Vec::new() },
    }
}

/// Per-split outputs kept alongside the report for plotting.
pub struct ProtocolOutcome {
    pub report: ProtocolReport,
    pub records: Vec<(String, Vec<ScoreRecord>)>,
}

/// Runs every split. `models` returns the trained model for a training-domain
/// set (trained on the non-dev part of those domains).
pub fn run_protocol(
    cfg: &ProtocolConfig,
    data: &BTreeMap<String, Vec<EncodedSample>>,
    ts: &TextSpace,
    config_hash: &str,
    models: &mut dyn FnMut(&[String]) -> Result<Model>,
) -> Result<ProtocolOutcome> {
    let available: Vec<String> = data.keys().cloned().collect();
    let splits = cfg.subprotocols(&available)?;
    let mut cache: BTreeMap<Vec<String>, Model> = BTreeMap::new();
    let mut split_rows: Vec<(Subprotocol, ProtocolRow)> = Vec::new();
    let mut records = Vec::new();
    for sp in &splits {
        if !cache.contains_key(&sp.train) {
            cache.insert(sp.train.clone(), models(&sp.train)?);
        }
        let model = &cache[&sp.train];
        let (_, dev) = split_dev(&gather(data, &sp.train)?, cfg.dev_fraction, cfg.seed);
        // The dev split sees the same missing modalities as the test set, so
        // exit layer and threshold are picked under matching conditions.
        let dev = with_missing(&dev, sp.missing)?;
        let test = with_missing(&gather(data, &sp.test)?, sp.missing)?;
        let r = evaluate_split(&sp.name, model, &dev, &test, ts, cfg)?;
        info!("{} [{}]: HTER {:.2}% AUC {:.2}%", sp.name, missing_name(sp.missing), r.row.hter, r.row.auc);
        let key = if sp.missing.is_empty() {
            sp.name.clone()
        } else {
            format!("{} {}", missing_name(sp.missing), sp.name)
        };
        records.push((key, r.test_records));
        split_rows.push((sp.clone(), r.row));
    }
    let rows: Vec<ProtocolRow> = if cfg.kind == ProtocolKind::P2Missing {
        cfg.missing
            .iter()
            .map(|&m| {
                let part: Vec<ProtocolRow> = split_rows.iter().filter(|(sp, _)| sp.missing == m).map(|(_, r)| r.clone()).collect();
                mean_row(&missing_name(m), &part, true)
            })
            .collect()
    } else {
        split_rows.into_iter().map(|(_, r)| r).collect()
    };
    let average = mean_row("Average", &rows, false);
    Ok(ProtocolOutcome {
        report: ProtocolReport {
            protocol: cfg.kind,
            config_hash: config_hash.to_owned(),
            threshold: cfg.threshold,
            exit: cfg.exit,
            rows,
            average,
        },
        records,
    })
}

impl ProtocolReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subprotocol,HTER%,AUC%,tau,exit_layer\n");
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{},{}",
                r.subprotocol,
                r.hter,
                r.auc,
                opt(r.tau.map(|t| format!("{t:.6}"))),
                opt(r.exit_layer.map(|e| e.to_string()))
            );
        }
        let _ = writeln!(out, "# config_hash={}", self.config_hash);
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MmdaError::io(dir, e))?;
        for (name, body) in [("report.json", self.to_json()), ("report.csv", self.to_csv())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| MmdaError::io(&p, e))?;
        }
        Ok(())
    }
}

/// ROC curve (TPR = live accepted, FPR = spoof accepted) as a standalone SVG.
pub fn roc_svg(title: &str, records: &[ScoreRecord]) -> Result<String> {
    let mut taus: Vec<f64> = records.iter().map(|r| r.score).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let mut pts = vec![(0.0, 0.0)];
    let below = taus.first().map(|t| t - 1.0).unwrap_or(0.0);
    for tau in std::iter::once(below).chain(taus) {
        let (far, frr) = far_frr(records, tau)?;
        pts.push((far, 1.0 - frr));
    }
    pts.push((1.0, 1.0));
    let (size, pad) = (320.0, 30.0);
    let map = |(x, y): (f64, f64)| (pad + x * size, pad + (1.0 - y) * size);
    let path: Vec<String> = pts
        .iter()
        .map(|&p| {
            let (x, y) = map(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let total = size + 2.0 * pad;
    Ok(format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total}\" height=\"{total}\">\n\
         <rect x=\"{pad}\" y=\"{pad}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"#888\"/>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{pad}\" stroke=\"#ccc\" stroke-dasharray=\"4\"/>\n\
         <polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{pts}\"/>\n\
         <text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"12\">{title} (AUC {auc:.4})</text>\n\
         </svg>\n",
        y0 = pad + size,
        x1 = pad + size,
        pts = path.join(" "),
        auc = auc(records)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        ["W-like", "C-like", "P-like", "S-like"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn protocol_layouts() {
        let mut cfg = ProtocolConfig {
            domains: names(),
            ..ProtocolConfig::default()
        };
        let p1 = cfg.subprotocols(&names()).unwrap();
        assert_eq!(p1.len(), 4);
        assert_eq!(p1[0].name, "CPS->W");
        cfg.kind = ProtocolKind::P2Missing;
        assert_eq!(cfg.subprotocols(&names()).unwrap().len(), 12);
        assert_eq!(cfg.training_sets(&names()).unwrap().len(), 4);
        cfg.kind = ProtocolKind::P3Limited;
        let p3 = cfg.subprotocols(&names()).unwrap();
        assert_eq!(p3.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["CW->PS", "PS->CW"]);
    }

    #[test]
    fn custom_rejects_overlap_and_unknown_domains() {
        let cfg = ProtocolConfig {
            kind: ProtocolKind::Custom,
            train_domains: vec!["W-like".into()],
            test_domains: vec!["W-like".into()],
            ..ProtocolConfig::default()
        };
        assert!(cfg.subprotocols(&names()).is_err());
        let cfg = ProtocolConfig {
            kind: ProtocolKind::Custom,
            train_domains: vec!["X".into()],
            test_domains: vec!["W-like".into()],
            ..ProtocolConfig::default()
        };
        let err = cfg.subprotocols(&names()).unwrap_err();
        assert!(err.to_string().contains("protocol.domains"), "{err}");
    }

    #[test]
    fn missing_names() {
        use ModalityKind::*;
        assert_eq!(missing_name(ModalitySet::from_kinds([Depth, Ir])), "Missing D&I");
        assert_eq!(missing_name(ModalitySet::from_kinds([Ir])), "Missing I");
    }
}
