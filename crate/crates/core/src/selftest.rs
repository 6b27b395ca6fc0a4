//! Analytic invariant suite behind `mmda selftest`: degeneracy of the
//! attention block, gradient checks, the U-shaped recursion, metric oracles
//! and loss algebra, each against a direct scalar reimplementation.

use ndarray::{Array1, Array2, Array3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::gradcheck;
use crate::md2a::{self, HeadWeights, PairedBatch, Pairing};
use crate::metrics::{auc, eer_threshold, far_frr, hter, ScoreRecord};
use crate::rng::{self, Rng};
use crate::rs2::{self, cross_entropy_term, Rs2Config, TextConstrainedClassifier};
use crate::types::{DomainLabel, Liveness, ModalitySet, TextSpace};
use crate::udsa::{self, Adapter, Mlp, UdsaConfig, UdsaParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> Check {
    Check {
        name,
        passed: worst < tol,
        detail: format!("worst {worst:.3e} (tolerance {tol:.0e})"),
    }
}

fn randn(g: &mut Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| StandardNormal.sample(g))
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `softmax(q k^T s) v` on plain matrices.
fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, s: f64) -> Array2<f64> {
    let n = q.nrows();
    let mut out = Array2::zeros((n, v.ncols()));
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| q.row(i).dot(&k.row(j)) * s).collect();
        let a = softmax(&logits);
        for (j, w) in a.iter().enumerate() {
            out.row_mut(i).scaled_add(*w, &v.row(j));
        }
    }
    out
}

fn degeneracy(g: &mut Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (b, n, n_d, d_k, d_v) = (g.random_range(1..4), g.random_range(2..5), 4, 2, 3);
        let tokens = Array3::from_shape_fn((b, n, n_d), |_| StandardNormal.sample(g));
        let head = HeadWeights {
            w_q: randn(g, 2 * n_d, 2 * d_k),
            w_k: randn(g, 2 * n_d, 2 * d_k),
            w_v: randn(g, 2 * n_d, d_v),
        };
        let domains = vec![DomainLabel::new("d"); b];
        let pairs = md2a::pair_indices(&domains, g.random(), Pairing::Uniform);
        let s = 1.0 / (n_d as f64).sqrt();
        for (pair_index, lambda) in [(pairs, 0.0), ((0..b).collect::<Vec<_>>(), 0.7)] {
            let joint = md2a::joint_from_pairs(&tokens, &pair_index);
            let paired = PairedBatch {
                joint_tokens: joint.clone(),
                pair_index,
            };
            let got = md2a::md2a_head(&paired, &head, lambda).expect("valid head");
            for i in 0..b {
                let x = joint.index_axis(ndarray::Axis(0), i).to_owned();
                let q2 = x.dot(&head.w_q);
                let k2 = x.dot(&head.w_k);
                let v = x.dot(&head.w_v);
                let cols = |m: &Array2<f64>, a: usize| m.slice(ndarray::s![.., a..a + d_k]).to_owned();
                let a1 = attention(&cols(&q2, 0), &cols(&k2, 0), &v, s);
                let a2 = attention(&cols(&q2, d_k), &cols(&k2, d_k), &v, s);
                let want = a1 - a2 * lambda;
                let diff = (&got.index_axis(ndarray::Axis(0), i) - &want).mapv(f64::abs);
                worst = worst.max(diff.fold(0.0, |m: f64, x| m.max(*x)));
            }
        }
    }
    check("md2a degeneracy (plain / differential attention)", worst, 1e-6)
}

fn text_space(g: &mut Rng, m: usize, n_d: usize) -> TextSpace {
    let class_of = (0..m)
        .map(|i| if i % 2 == 0 { Liveness::Live } else { Liveness::Spoof })
        .collect();
    TextSpace::new(randn(g, m, n_d), class_of).expect("valid text space")
}

fn gradients(g: &mut Rng) -> Check {
    let mut worst: f64 = 0.0;
    let (n, n_d, d_k) = (3, 4, 2);
    let inputs = vec![
        randn(g, n, 2 * n_d),
        randn(g, 2 * n_d, 2 * d_k),
        randn(g, 2 * n_d, 2 * d_k),
        randn(g, 2 * n_d, 3),
    ];
    let r = gradcheck::check(&inputs, 1e-4, |t: &mut Tape, v: &[Var]| {
        let lam = t.constant_scalar(0.5);
        let q = t.matmul(v[0], v[1]);
        let k = t.matmul(v[0], v[2]);
        let vv = t.matmul(v[0], v[3]);
        let o = md2a::head_attention_on_tape(t, q, k, vv, d_k, n_d, lam);
        let o = t.powf(o, 2.0);
        t.sum_all(o)
    });
    worst = worst.max(r.max_rel_err);

    let ts = text_space(g, 4, n_d);
    let labels = [Liveness::Live, Liveness::Spoof, Liveness::Live];
    let cfg = Rs2Config::default();
    let cfg_udsa = UdsaConfig {
        depth: 2,
        ..UdsaConfig::default()
    };
    let params = UdsaParams::init(n_d, &cfg_udsa, g).expect("valid config");
    let mut store = crate::params::ParamStore::new();
    let ids = params.register(&mut store);
    let mut values: Vec<Array2<f64>> = vec![randn(g, 3, n_d), randn(g, n_d, 1), Array2::from_elem((1, 1), 0.1)];
    values.extend(store.values().iter().cloned());
    let r = gradcheck::check(&values, 1e-4, |t: &mut Tape, v: &[Var]| {
        let bound = crate::params::Bound::from_vars(v[3..].to_vec());
        let layers = udsa::forward_on_tape(t, v[0], &ids, &bound);
        udsa::per_layer_rs2_on_tape(t, &layers, &labels, &ts, v[1], v[2], &cfg)
            .expect("valid shapes")
            .total
    });
    worst = worst.max(r.max_rel_err);
    check("gradients vs central differences", worst, 1e-3)
}

fn mlp_scalar(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = (0..m.w1.ncols())
        .map(|j| {
            let z = (0..x.len()).map(|i| x[i] * m.w1[[i, j]]).sum::<f64>() + m.b1[[0, j]];
            0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z * z * z)).tanh())
        })
        .collect();
    (0..m.w2.ncols())
        .map(|j| (0..hidden.len()).map(|i| hidden[i] * m.w2[[i, j]]).sum::<f64>() + m.b2[[0, j]])
        .collect()
}

fn u_shape(g: &mut Rng) -> Check {
    let mut worst: f64 = 0.0;
    let mut structural = true;
    for _ in 0..50 {
        let (d, n) = (g.random_range(1..5), 3);
        let cfg = UdsaConfig {
            depth: d,
            ..UdsaConfig::default()
        };
        let params = UdsaParams::init(n, &cfg, g).expect("valid config");
        structural &= params.adapt.len() == d && params.remap.len() == d;
        let v0 = randn(g, 2, n);
        let got = udsa::udsa_forward(&v0, &params).expect("finite");
        for r in 0..v0.nrows() {
            let mut v = vec![v0.row(r).to_vec()];
            for a in &params.adapt {
                let Adapter::Dense(m) = a else { unreachable!("dense config") };
                let next = mlp_scalar(m, v.last().expect("non-empty"));
                v.push(next);
            }
            let mut vp = v.clone();
            for i in (0..d).rev() {
                let back = mlp_scalar(&params.remap[i], &vp[i + 1]);
                vp[i] = v[i].iter().zip(&back).map(|(a, b)| a + b).collect();
            }
            for (layer, row) in vp.iter().enumerate() {
                for (c, x) in row.iter().enumerate() {
                    worst = worst.max((got[layer][[r, c]] - x).abs());
                }
            }
        }
    }
    let mut c = check("u-shaped recursion vs scalar two-pass loop", worst, 1e-6);
    c.passed &= structural;
    c
}

fn record(score: f64, live: bool) -> ScoreRecord {
    ScoreRecord {
        score,
        label: if live { Liveness::Live } else { Liveness::Spoof },
        domain: DomainLabel::new("d"),
        modality_mask: ModalitySet::FULL,
    }
}

fn metrics(g: &mut Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = g.random_range(2..=100);
        let mut recs: Vec<ScoreRecord> = (0..n)
            .map(|_| record((g.random_range(0..20) as f64) / 20.0, g.random()))
            .collect();
        recs[0].label = Liveness::Live;
        recs[1].label = Liveness::Spoof;
        let live: Vec<f64> = recs.iter().filter(|r| r.label == Liveness::Live).map(|r| r.score).collect();
        let spoof: Vec<f64> = recs.iter().filter(|r| r.label == Liveness::Spoof).map(|r| r.score).collect();
        let mut wins = 0.0;
        for l in &live {
            for s in &spoof {
                wins += if l < s {
                    1.0
                } else if l == s {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let oracle = wins / (live.len() * spoof.len()) as f64;
        worst = worst.max((auc(&recs).expect("two classes") - oracle).abs());
        let tau = eer_threshold(&recs).expect("two classes");
        let far = spoof.iter().filter(|s| **s <= tau).count() as f64 / spoof.len() as f64;
        let frr = live.iter().filter(|l| **l > tau).count() as f64 / live.len() as f64;
        worst = worst.max((hter(&recs, tau).expect("two classes") - (far + frr) / 2.0).abs());
        let (f2, r2) = far_frr(&recs, tau).expect("two classes");
        worst = worst.max((f2 - far).abs()).max((r2 - frr).abs());
        let warped: Vec<ScoreRecord> = recs.iter().map(|r| record((3.0 * r.score).exp(), r.label == Liveness::Live)).collect();
        worst = worst.max((auc(&warped).expect("two classes") - oracle).abs());
    }
    check("auc / hter vs pairwise and counting oracles", worst, 1e-9)
}

fn loss_algebra(g: &mut Rng) -> Check {
    let mut worst: f64 = 0.0;
    worst = worst.max(cross_entropy_term(1.0, 0.0).abs());
    worst = worst.max((cross_entropy_term(1.0, 0.5) - std::f64::consts::LN_2).abs());
    worst = worst.max((cross_entropy_term(0.0, 0.5) - std::f64::consts::LN_2).abs());
    let ts = text_space(g, 6, 5);
    for _ in 0..20 {
        let v = randn(g, 4, 5);
        let labels: Vec<Liveness> = (0..4).map(|i| if i % 2 == 0 { Liveness::Live } else { Liveness::Spoof }).collect();
        let clf = TextConstrainedClassifier {
            w: Array1::from_shape_fn(5, |_| StandardNormal.sample(g)),
            b: g.random_range(-1.0..1.0),
        };
        let l = rs2::rs2_loss(&v, &labels, &ts, &clf, &Rs2Config::default()).expect("valid shapes");
        if l.total != l.l_cls + l.l_align {
            worst = f64::INFINITY;
        }
    }
    check("loss additivity and analytic points", worst, 1e-12)
}

/// Runs every check with a fixed seed.
pub fn run() -> Vec<Check> {
    let mut g = rng::stream(0x5e1f, &[&"selftest"]);
    vec![
        degeneracy(&mut g),
        gradients(&mut g),
        u_shape(&mut g),
        metrics(&mut g),
        loss_algebra(&mut g),
    ]
}
