//! Key-diversity scoring and TopK retention for a single slot.
//!
//! A token's score is the negative cosine similarity between its normalized
//! key and the plain mean of all normalized candidate keys in the slot.
//! Tokens far from the mean are geometrically distinct and are kept.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::kvcache::{KeyView, TieBreak};
use crate::numerics::{cos_sim_f64, is_zero};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredToken {
    pub insert_seq: u64,
    pub score: f64,
}

/// Per-slot scores, one per current candidate. Higher means keep.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotScores {
    pub layer: usize,
    pub head: usize,
    pub scores: Vec<ScoredToken>,
    /// Mean of the normalized candidate keys; only diversity scoring sets it.
    pub mean_key: Option<Vec<f64>>,
}

impl SlotScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Arithmetic mean of the normalized keys, not renormalized.
pub fn mean_key(candidates: &KeyView<'_>) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut mu = vec![0.0f64; candidates.d_k];
    for unit in candidates.units() {
        for (m, &x) in mu.iter_mut().zip(unit) {
            *m += x as f64;
        }
    }
    let n = candidates.len() as f64;
    for m in &mut mu {
        *m /= n;
    }
    Ok(mu)
}

/// Scores every candidate against `mu`. Zero-sentinel keys get -1.
pub fn diversity_scores(
    layer: usize,
    head: usize,
    candidates: &KeyView<'_>,
    mu: &[f64],
) -> Result<SlotScores> {
    if mu.len() != candidates.d_k {
        return Err(Error::LengthMismatch { left: mu.len(), right: candidates.d_k });
    }
    let scores = candidates
        .units()
        .zip(candidates.meta)
        .map(|(unit, m)| {
            let score = if is_zero(unit) { -1.0 } else { -cos_sim_f64(mu, unit)? };
            Ok(ScoredToken { insert_seq: m.insert_seq, score })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SlotScores { layer, head, scores, mean_key: Some(mu.to_vec()) })
}

/// Mean key plus diversity scores; `None` when the slot has no candidates.
pub fn score_slot(layer: usize, head: usize, candidates: &KeyView<'_>) -> Result<Option<SlotScores>> {
    if candidates.is_empty() {
        return Ok(None);
    }
    let mu = mean_key(candidates)?;
    diversity_scores(layer, head, candidates, &mu).map(Some)
}

/// Ordering where "less" means "more worth keeping".
fn keep_order(tiebreak: TieBreak) -> impl Fn(&ScoredToken, &ScoredToken) -> Ordering {
    move |a, b| {
        b.score.total_cmp(&a.score).then_with(|| match tiebreak {
            TieBreak::RecentFirst => b.insert_seq.cmp(&a.insert_seq),
            TieBreak::StableIndex => a.insert_seq.cmp(&b.insert_seq),
        })
    }
}

/// The `budget` highest-scoring tokens, returned sorted by insert_seq.
pub fn select_topk(scores: &SlotScores, budget: usize, tiebreak: TieBreak) -> Vec<u64> {
    let mut keep: Vec<u64> = if scores.len() <= budget {
        scores.scores.iter().map(|s| s.insert_seq).collect()
    } else if budget == 0 {
        Vec::new()
    } else {
        let mut work = scores.scores.clone();
        work.select_nth_unstable_by(budget - 1, keep_order(tiebreak));
        work[..budget].iter().map(|s| s.insert_seq).collect()
    };
    keep.sort_unstable();
    keep
}

pub fn slot_mean_diversity(scores: &SlotScores) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(scores.scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64)
}
