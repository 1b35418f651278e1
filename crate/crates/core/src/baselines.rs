//! Competing eviction policies: an attention-weight oracle, uniform random
//! eviction and a recency window.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{HeadCache, TokenMeta};
use crate::numerics::{dot, Matrix};
use crate::retention::{ScoredToken, SlotScores};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Diversity,
    #[serde(rename = "attn-oracle")]
    AttentionOracle,
    Random,
    Recency,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] =
        [PolicyKind::Diversity, PolicyKind::AttentionOracle, PolicyKind::Random, PolicyKind::Recency];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Diversity => "diversity",
            PolicyKind::AttentionOracle => "attn-oracle",
            PolicyKind::Random => "random",
            PolicyKind::Recency => "recency",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}

/// Importance of each candidate as the summed attention weight it receives
/// from the current frame's queries. Materializes the whole `P x N` weight
/// matrix over anchors and candidates.
pub fn attention_oracle_scores(slot: &HeadCache, queries: &Matrix, scale: f32) -> Result<SlotScores> {
    if queries.rows() == 0 {
        return Err(Error::EmptyQueries);
    }
    let n_anchor = slot.anchor.len();
    let n = n_anchor + slot.candidates.len();
    if n == 0 {
        return Err(Error::EmptyContext);
    }
    let scale = scale as f64;
    let keys: Vec<&[f32]> = (0..n_anchor)
        .map(|i| slot.anchor.key(i))
        .chain((0..slot.candidates.len()).map(|i| slot.candidates.key(i)))
        .collect();

    let mut weights = vec![0.0f64; queries.rows() * n];
    for (i, row) in weights.chunks_exact_mut(n).enumerate() {
        let q = queries.row(i);
        for (w, k) in row.iter_mut().zip(&keys) {
            *w = scale * dot(q, k);
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for w in row.iter_mut() {
            *w = (*w - max).exp();
            sum += *w;
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
    }

    let scores = slot
        .candidates
        .meta()
        .iter()
        .enumerate()
        .map(|(j, m)| ScoredToken {
            insert_seq: m.insert_seq,
            score: weights.chunks_exact(n).map(|row| row[n_anchor + j]).sum(),
        })
        .collect();
    Ok(SlotScores { layer: slot.layer, head: slot.head, scores, mean_key: None })
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based seed for one (run, slot, prune event) triple.
pub fn event_seed(run_seed: u64, slot: usize, event: u64) -> u64 {
    mix(mix(mix(run_seed) ^ slot as u64) ^ event)
}

/// Uniform random subset of size `min(budget, n)`, sorted by insert_seq.
pub fn random_keep(candidates: &[TokenMeta], budget: usize, seed: u64) -> Vec<u64> {
    if budget >= candidates.len() {
        return candidates.iter().map(|m| m.insert_seq).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<u64> =
        sample(&mut rng, candidates.len(), budget).into_iter().map(|i| candidates[i].insert_seq).collect();
    keep.sort_unstable();
    keep
}

/// The `budget` newest candidates.
pub fn recency_keep(candidates: &[TokenMeta], budget: usize) -> Vec<u64> {
    let mut seqs: Vec<u64> = candidates.iter().map(|m| m.insert_seq).collect();
    seqs.sort_unstable();
    let start = seqs.len().saturating_sub(budget);
    seqs.split_off(start)
}
