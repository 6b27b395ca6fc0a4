//! The five subcommands. Each takes a resolved configuration and writes its
//! artifacts under the output directory:
//!
//! ```text
//! <out>/data/<domain>/manifest.json      gen-data
//! <out>/checkpoints/<train-set>.ckpt     train
//! <out>/checkpoints/<train-set>.loss.csv train
//! <out>/reports/<protocol>/report.json   eval (plus report.csv, roc-*.svg)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mmda_core::checkpoint;
use mmda_core::dataset::{read_manifest, write_manifest};
use mmda_core::error::{MmdaError, Result};
use mmda_core::model::{encode_samples, text_space, EncodedSample, Model, ModelConfig};
use mmda_core::protocol::{gather, roc_svg, run_protocol, split_dev, train_set_key, ProtocolKind, ProtocolReport};
use mmda_core::selftest;
use mmda_core::synthdata::generate_domain;
use mmda_core::trainer::{train, TrainState};
use mmda_core::types::TextSpace;
use mmda_core::udsa::ExitPolicy;

use crate::config::Resolved;

pub fn data_dir(cfg: &Resolved) -> PathBuf {
    cfg.config.out_dir.join("data")
}

pub fn checkpoint_dir(cfg: &Resolved) -> PathBuf {
    cfg.config.out_dir.join("checkpoints")
}

pub fn report_dir(cfg: &Resolved) -> PathBuf {
    let name = match cfg.protocol.kind {
        ProtocolKind::P1Loo => "p1",
        ProtocolKind::P2Missing => "p2",
        ProtocolKind::P3Limited => "p3",
        ProtocolKind::Custom => "custom",
    };
    cfg.config.out_dir.join("reports").join(name)
}

pub fn checkpoint_path(cfg: &Resolved, train_domains: &[String]) -> PathBuf {
    checkpoint_dir(cfg).join(format!("{}.ckpt", train_set_key(train_domains)))
}

/// Writes one manifest per configured domain; returns the manifest paths.
pub fn gen_data(cfg: &Resolved) -> Result<Vec<PathBuf>> {
    let root = data_dir(cfg);
    cfg.domains
        .iter()
        .map(|d| {
            let samples = generate_domain(d, &cfg.generator)?;
            let path = write_manifest(&root.join(&d.name), &samples, Some(&cfg.hash))?;
            info!("{}: {} samples -> {}", d.name, samples.len(), path.display());
            Ok(path)
        })
        .collect()
}

/// Loaded and encoded samples of every configured domain.
pub struct Workspace {
    pub data: BTreeMap<String, Vec<EncodedSample>>,
    pub text: TextSpace,
}

pub fn load_workspace(cfg: &Resolved, data_root: &Path) -> Result<Workspace> {
    let enc = cfg.model.encoder()?;
    let mut data = BTreeMap::new();
    for d in &cfg.domains {
        let dir = data_root.join(&d.name);
        let samples = read_manifest(&dir)?;
        if let Some(s) = samples
            .iter()
            .find(|s| s.size() != Some((cfg.model.height, cfg.model.width)))
        {
            return Err(MmdaError::config(
                "data.height",
                format!("sample {} does not match the configured image size", s.sample_id),
            ));
        }
        data.insert(d.name.clone(), encode_samples(&samples, &enc)?);
    }
    let text = text_space(&cfg.captions, &enc)?;
    Ok(Workspace { data, text })
}

fn loss_csv(state: &TrainState, hash: &str) -> String {
    let mut out = String::from("step,epoch,total,l_cls,l_align\n");
    for l in &state.history {
        let _ = writeln!(out, "{},{},{:.17e},{:.17e},{:.17e}", l.step, l.epoch, l.total, l.l_cls, l.l_align);
    }
    let _ = writeln!(out, "# config_hash={hash}");
    out
}

/// Models match when they agree on everything but the exit policy, which
/// only matters at evaluation time.
fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    let strip = |m: &ModelConfig| {
        let mut m = m.clone();
        m.udsa.exit = ExitPolicy::Auto;
        m
    };
    strip(a) == strip(b)
}

/// Trains one model per training-domain set of the protocol, on the non-dev
/// part of those domains. With `resume`, existing checkpoints continue from
/// their saved epoch.
pub fn train_all(cfg: &Resolved, ws: &Workspace, resume: bool) -> Result<Vec<PathBuf>> {
    let names: Vec<String> = ws.data.keys().cloned().collect();
    let mut written = Vec::new();
    for set in cfg.protocol.training_sets(&names)? {
        let path = checkpoint_path(cfg, &set);
        let state = if resume && path.exists() {
            let ck = checkpoint::load(&path)?;
            if !same_architecture(&ck.header.model, &cfg.model) {
                return Err(MmdaError::validation(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            info!("resuming {} at epoch {} step {}", path.display(), ck.state.epoch, ck.state.step);
            ck.state
        } else {
            TrainState::new(Model::init(&cfg.model, cfg.train.seed)?)
        };
        let (train_part, _) = split_dev(&gather(&ws.data, &set)?, cfg.protocol.dev_fraction, cfg.protocol.seed);
        info!("training on {} ({} samples)", train_set_key(&set), train_part.len());
        let state = train(state, &train_part, &ws.text, &cfg.train)?;
        checkpoint::save(&path, &state, &cfg.train, &cfg.hash)?;
        let csv = path.with_extension("loss.csv");
        fs::write(&csv, loss_csv(&state, &cfg.hash)).map_err(|e| MmdaError::io(&csv, e))?;
        written.push(path);
    }
    Ok(written)
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Scores the protocol with the saved checkpoints and writes the report.
pub fn eval(cfg: &Resolved, ws: &Workspace) -> Result<ProtocolReport> {
    let outcome = run_protocol(&cfg.protocol, &ws.data, &ws.text, &cfg.hash, &mut |set| {
        let path = checkpoint_path(cfg, set);
        if !path.exists() {
            return Err(MmdaError::validation(format!(
                "missing checkpoint {}; run `mmda train` first",
                path.display()
            )));
        }
        let ck = checkpoint::load(&path)?;
        if !same_architecture(&ck.header.model, &cfg.model) {
            return Err(MmdaError::validation(format!(
                "{} does not match the configured model dimensions",
                path.display()
            )));
        }
        Ok(ck.state.model)
    })?;
    let dir = report_dir(cfg);
    outcome.report.write(&dir)?;
    if cfg.protocol.roc_plots {
        for (name, recs) in &outcome.records {
            let p = dir.join(format!("roc-{}.svg", file_safe(name)));
            fs::write(&p, roc_svg(name, recs)?).map_err(|e| MmdaError::io(&p, e))?;
        }
    }
    info!("report written to {}", dir.display());
    Ok(outcome.report)
}

/// Mean and sample standard deviation per row across several reports.
pub fn aggregate(paths: &[PathBuf], force: bool) -> Result<String> {
    if paths.is_empty() {
        return Err(MmdaError::validation("no reports given"));
    }
    let mut reports = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join("report.json") } else { p.clone() };
        let text = fs::read_to_string(&file).map_err(|e| MmdaError::io(&file, e))?;
        let r: ProtocolReport =
            serde_json::from_str(&text).map_err(|e| MmdaError::format(format!("{}: {e}", file.display())))?;
        reports.push((file, r));
    }
    let first = &reports[0].1;
    for (file, r) in &reports[1..] {
        if r.config_hash != first.config_hash {
            if !force {
                return Err(MmdaError::validation(format!(
                    "{} has config hash {} but {} has {}; pass --force to aggregate anyway",
                    file.display(),
                    r.config_hash,
                    reports[0].0.display(),
                    first.config_hash
                )));
            }
            warn!("aggregating reports with different config hashes");
        }
        let names = |r: &ProtocolReport| r.rows.iter().map(|x| x.subprotocol.clone()).collect::<Vec<_>>();
        if names(r) != names(first) {
            return Err(MmdaError::validation(format!("{} has different rows", file.display())));
        }
    }
    let stats = |v: Vec<f64>| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        (mean, sd)
    };
    let mut out = String::from("subprotocol,runs,HTER%_mean,HTER%_sd,AUC%_mean,AUC%_sd\n");
    let rows = first.rows.len();
    for i in 0..=rows {
        let pick = |r: &ProtocolReport| if i < rows { r.rows[i].clone() } else { r.average.clone() };
        let (h, hs) = stats(reports.iter().map(|(_, r)| pick(r).hter).collect());
        let (a, as_) = stats(reports.iter().map(|(_, r)| pick(r).auc).collect());
        let _ = writeln!(out, "{},{},{h:.4},{hs:.4},{a:.4},{as_:.4}", pick(first).subprotocol, reports.len());
    }
    let mut hashes: Vec<&str> = reports.iter().map(|(_, r)| r.config_hash.as_str()).collect();
    hashes.dedup();
    let _ = writeln!(out, "# config_hash={}", hashes.join(";"));
    Ok(out)
}

/// Runs the analytic suite; returns one line per check and whether all passed.
pub fn selftest() -> (Vec<String>, bool) {
    let checks = selftest::run();
    let ok = checks.iter().all(|c| c.passed);
    let lines = checks
        .iter()
        .map(|c| format!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
        .collect();
    (lines, ok)
}
