use std::collections::BTreeMap;

use mmda_core::model::{encode_samples, text_space, EncodedSample, Model, ModelConfig};
use mmda_core::protocol::{
    roc_svg, run_protocol, split_dev, train_set_key, ProtocolConfig, ProtocolKind, ProtocolReport, ThresholdRule,
};
use mmda_core::synthdata::{default_domains, generate_domain, GeneratorConfig};
use mmda_core::types::{CaptionSet, Liveness, ModalityKind, ModalitySet, TextSpace};
use mmda_core::udsa::{ExitPolicy, UdsaConfig};

fn names() -> Vec<String> {
    default_domains(0).into_iter().map(|d| d.name).collect()
}

fn ordered(kind: ProtocolKind) -> ProtocolConfig {
    ProtocolConfig {
        kind,
        domains: names(),
        ..ProtocolConfig::default()
    }
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        n_d: 16,
        udsa: UdsaConfig {
            depth: 2,
            ..UdsaConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn dataset() -> (BTreeMap<String, Vec<EncodedSample>>, TextSpace) {
    let cfg = model_cfg();
    let enc = cfg.encoder().unwrap();
    let gen = GeneratorConfig {
        n_live: 10,
        n_spoof: 10,
        ..GeneratorConfig::default()
    };
    let data = default_domains(0)
        .iter()
        .map(|d| (d.name.clone(), encode_samples(&generate_domain(d, &gen).unwrap(), &enc).unwrap()))
        .collect();
    (data, text_space(&CaptionSet::default(), &enc).unwrap())
}

fn run(cfg: &ProtocolConfig) -> (ProtocolReport, Vec<(String, Vec<mmda_core::metrics::ScoreRecord>)>, Vec<Vec<String>>) {
    let (data, ts) = dataset();
    let mut asked = Vec::new();
    let out = run_protocol(cfg, &data, &ts, "h", &mut |set| {
        asked.push(set.to_vec());
        Model::init(&model_cfg(), set.len() as u64)
    })
    .unwrap();
    (out.report, out.records, asked)
}

#[test]
fn table_layouts() {
    let p1 = ordered(ProtocolKind::P1Loo).subprotocols(&names()).unwrap();
    let p1_names: Vec<&str> = p1.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(p1_names, ["CPS->W", "WPS->C", "WCS->P", "WCP->S"]);
    for sp in &p1 {
        assert_eq!(sp.train.len(), 3);
        assert!(!sp.train.contains(&sp.test[0]));
    }
    let p3 = ordered(ProtocolKind::P3Limited).subprotocols(&names()).unwrap();
    let p3_names: Vec<&str> = p3.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(p3_names, ["CW->PS", "PS->CW"]);
    let p2 = ordered(ProtocolKind::P2Missing).subprotocols(&names()).unwrap();
    assert_eq!(p2.len(), 12);
    assert_eq!(ordered(ProtocolKind::P2Missing).training_sets(&names()).unwrap().len(), 4);
}

#[test]
fn p1_report_has_four_rows_and_an_average() {
    let (report, records, asked) = run(&ordered(ProtocolKind::P1Loo));
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.average.subprotocol, "Average");
    let mean = report.rows.iter().map(|r| r.auc).sum::<f64>() / 4.0;
    assert!((report.average.auc - mean).abs() < 1e-12);
    assert_eq!(records.len(), 4);
    assert_eq!(asked.len(), 4);
    for r in &report.rows {
        assert!((0.0..=100.0).contains(&r.hter) && (0.0..=100.0).contains(&r.auc));
        assert!(r.exit_layer.unwrap() <= 2);
        assert_eq!(r.dev_layer_hter.len(), 3);
    }
    let csv = report.to_csv();
    assert!(csv.starts_with("subprotocol,HTER%,AUC%,tau,exit_layer\n"));
    assert_eq!(csv.lines().count(), 1 + 5 + 1);
    let back: ProtocolReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn p2_groups_missing_scenarios_and_reuses_models() {
    let (report, records, asked) = run(&ordered(ProtocolKind::P2Missing));
    let rows: Vec<&str> = report.rows.iter().map(|r| r.subprotocol.as_str()).collect();
    assert_eq!(rows, ["Missing D", "Missing I", "Missing D&I"]);
    assert!(report.rows.iter().all(|r| r.components.len() == 4));
    // One model per training set, shared by the three scenarios.
    assert_eq!(asked.len(), 4);
    let (name, recs) = records.iter().find(|(n, _)| n.starts_with("Missing D&I")).unwrap();
    let rgb = ModalitySet::from_kinds([ModalityKind::Rgb]);
    assert!(recs.iter().all(|r| r.modality_mask == rgb), "{name}");
}

#[test]
fn reports_are_deterministic_and_exit_policy_changes_only_exit_fields() {
    let cfg = ordered(ProtocolKind::P1Loo);
    let (a, _, _) = run(&cfg);
    let (b, _, _) = run(&cfg);
    assert_eq!(a.to_json(), b.to_json());

    let fixed = ProtocolConfig {
        exit: ExitPolicy::Fixed(0),
        ..cfg.clone()
    };
    let (f, _, _) = run(&fixed);
    assert_eq!(f.rows.len(), a.rows.len());
    for (x, y) in f.rows.iter().zip(&a.rows) {
        assert_eq!(x.subprotocol, y.subprotocol);
        assert_eq!(x.exit_layer, Some(0));
        assert_eq!(x.dev_layer_hter, y.dev_layer_hter);
        if y.exit_layer == Some(0) {
            assert_eq!(x, y);
        }
    }
    let too_deep = ProtocolConfig {
        exit: ExitPolicy::Fixed(3),
        ..cfg
    };
    let (data, ts) = dataset();
    assert!(run_protocol(&too_deep, &data, &ts, "h", &mut |_| Model::init(&model_cfg(), 0)).is_err());
}

#[test]
fn test_eer_rule_uses_the_test_threshold() {
    let cfg = ProtocolConfig {
        threshold: ThresholdRule::TestEer,
        ..ordered(ProtocolKind::P1Loo)
    };
    let (report, records, _) = run(&cfg);
    for (row, (_, recs)) in report.rows.iter().zip(&records) {
        assert_eq!(row.tau.unwrap(), mmda_core::metrics::eer_threshold(recs).unwrap());
    }
}

#[test]
fn dev_split_is_stratified_disjoint_and_seeded() {
    let (data, _) = dataset();
    let all: Vec<EncodedSample> = data.values().flatten().cloned().collect();
    let (train, dev) = split_dev(&all, 0.1, 3);
    assert_eq!(train.len() + dev.len(), all.len());
    assert_eq!(dev.len(), 8);
    for d in &dev {
        assert!(train.iter().all(|t| t.sample_id != d.sample_id));
    }
    for name in names() {
        for l in [Liveness::Live, Liveness::Spoof] {
            assert_eq!(dev.iter().filter(|s| s.domain.as_str() == name && s.label == l).count(), 1);
        }
    }
    assert_eq!(split_dev(&all, 0.1, 3).1, dev);
    assert_ne!(split_dev(&all, 0.1, 4).1, dev);
}

#[test]
fn configuration_errors() {
    let overlap = ProtocolConfig {
        kind: ProtocolKind::Custom,
        train_domains: vec![names()[0].clone(), names()[1].clone()],
        test_domains: vec![names()[1].clone()],
        ..ProtocolConfig::default()
    };
    assert!(overlap.subprotocols(&names()).is_err());
    let custom = ProtocolConfig {
        test_domains: vec![names()[2].clone()],
        ..overlap
    };
    assert_eq!(custom.subprotocols(&names()).unwrap()[0].name, "WC->P");
    assert!(ordered(ProtocolKind::P3Limited).subprotocols(&names()[..3]).is_err());
    assert!(ProtocolConfig {
        dev_fraction: 0.0,
        ..ProtocolConfig::default()
    }
    .validate()
    .is_err());
    assert!(ProtocolConfig {
        missing: vec![ModalitySet::FULL],
        ..ProtocolConfig::default()
    }
    .validate()
    .is_err());
    assert!(ProtocolKind::parse("p4").is_err());
    assert_eq!(ProtocolKind::parse("P2").unwrap(), ProtocolKind::P2Missing);
    assert_eq!(train_set_key(&["b".into(), "a".into()]), "a+b");
}

#[test]
fn roc_plot_is_svg() {
    let (_, records, _) = run(&ordered(ProtocolKind::P1Loo));
    let svg = roc_svg("x", &records[0].1).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}
