//! Biometric metrics over spoof scores.
//!
//! Scores are `P(spoof)`. A sample is accepted as live when `score <= tau`.
//! FAR is the fraction of spoof samples accepted, FRR the fraction of live
//! samples rejected.

use serde::{Deserialize, Serialize};

use crate::error::{MmdaError, Result};
use crate::types::{DomainLabel, Liveness, ModalitySet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub score: f64,
    pub label: Liveness,
    pub domain: DomainLabel,
    pub modality_mask: ModalitySet,
}

fn split(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut live = Vec::new();
    let mut spoof = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(MmdaError::numeric("non-finite score"));
        }
        match r.label {
            Liveness::Live => live.push(r.score),
            Liveness::Spoof => spoof.push(r.score),
        }
    }
    if live.is_empty() || spoof.is_empty() {
        return Err(MmdaError::validation("metrics need both live and spoof records"));
    }
    Ok((live, spoof))
}

/// Probability that a random live sample looks more live (lower spoof score)
/// than a random spoof sample; ties count one half. Computed by a sort-merge
/// over the two classes.
pub fn auc(records: &[ScoreRecord]) -> Result<f64> {
    let (mut live, mut spoof) = split(records)?;
    live.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    // half-units: 2 per strict win, 1 per tie
    let mut half_units: u128 = 0;
    let (mut lo, mut hi) = (0usize, 0usize);
    for &s in &spoof {
        while lo < live.len() && live[lo] < s {
            lo += 1;
        }
        while hi < live.len() && live[hi] <= s {
            hi += 1;
        }
        half_units += 2 * lo as u128 + (hi - lo) as u128;
    }
    let pairs = live.len() as f64 * spoof.len() as f64;
    Ok((half_units as f64 / 2.0) / pairs)
}

/// False acceptance and false rejection rates at `tau`.
pub fn far_frr(records: &[ScoreRecord], tau: f64) -> Result<(f64, f64)> {
    let (live, spoof) = split(records)?;
    let far = spoof.iter().filter(|&&s| s <= tau).count() as f64 / spoof.len() as f64;
    let frr = live.iter().filter(|&&s| s > tau).count() as f64 / live.len() as f64;
    Ok((far, frr))
}

pub fn hter(records: &[ScoreRecord], tau: f64) -> Result<f64> {
    let (far, frr) = far_frr(records, tau)?;
    Ok((far + frr) / 2.0)
}

/// Candidate thresholds: midpoints of consecutive distinct scores, or the
/// single score itself when all scores coincide.
pub fn candidate_thresholds(records: &[ScoreRecord]) -> Vec<f64> {
    let mut s: Vec<f64> = records.iter().map(|r| r.score).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    if s.len() == 1 {
        return s;
    }
    s.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect()
}

/// Threshold minimizing `|FAR - FRR|` over [`candidate_thresholds`]; ties go
/// to the smaller threshold.
pub fn eer_threshold(records: &[ScoreRecord]) -> Result<f64> {
    let (mut live, mut spoof) = split(records)?;
    live.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let (nl, ns) = (live.len() as f64, spoof.len() as f64);
    let mut best: Option<(f64, f64)> = None;
    let (mut li, mut si) = (0usize, 0usize);
    for tau in candidate_thresholds(records) {
        while li < live.len() && live[li] <= tau {
            li += 1;
        }
        while si < spoof.len() && spoof[si] <= tau {
            si += 1;
        }
        let far = si as f64 / ns;
        let frr = (live.len() - li) as f64 / nl;
        let gap = (far - frr).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, tau));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Index of the smallest value; ties resolve to the lowest index.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}
