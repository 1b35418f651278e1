//! Runs a frame's queries over the cached context of every slot.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kvcache::CacheState;
use crate::numerics::{
    attend_naive, attend_streaming_with_stats, relative_frobenius, KvRows, Matrix, StreamingStats,
};

/// Per-slot query matrices (`P x d_k`), layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameQueries {
    pub frame_id: u32,
    pub slots: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutputs {
    pub frame_id: u32,
    pub slots: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Streaming,
    Naive,
}

fn check_queries(cache: &CacheState, queries: &FrameQueries) -> Result<()> {
    let cfg = cache.config();
    if queries.slots.len() != cfg.slots() {
        return Err(Error::Shape(format!(
            "{} query blocks for {} slots",
            queries.slots.len(),
            cfg.slots()
        )));
    }
    if let Some(q) = queries.slots.iter().find(|q| q.cols() != cfg.d_k) {
        return Err(Error::Shape(format!("query width {} vs d_k {}", q.cols(), cfg.d_k)));
    }
    if let Some(slot) = cache.slots().iter().find(|s| s.is_empty()) {
        return Err(Error::NoContext { layer: slot.layer, head: slot.head });
    }
    Ok(())
}

/// Attention of each slot's queries over `[anchor; candidates]`.
pub fn forward_frame(cache: &CacheState, queries: &FrameQueries, mode: AttentionMode) -> Result<FrameOutputs> {
    forward_frame_with_stats(cache, queries, mode).map(|(out, _)| out)
}

/// As [`forward_frame`], also returning the largest per-slot transient
/// buffer of the streaming path (zero in naive mode).
pub fn forward_frame_with_stats(
    cache: &CacheState,
    queries: &FrameQueries,
    mode: AttentionMode,
) -> Result<(FrameOutputs, StreamingStats)> {
    check_queries(cache, queries)?;
    let cfg = cache.config();
    let scale = cfg.scale();
    let block = cfg.block_size;
    let results = cache
        .slots()
        .par_iter()
        .zip(&queries.slots)
        .map(|(slot, q)| match mode {
            AttentionMode::Streaming => attend_streaming_with_stats(q, slot, block, scale),
            AttentionMode::Naive => attend_naive(q, slot, scale).map(|m| (m, StreamingStats::default())),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = StreamingStats::default();
    let mut slots = Vec::with_capacity(results.len());
    for (m, s) in results {
        stats.peak_transient = stats.peak_transient.max(s.peak_transient);
        stats.tiles += s.tiles;
        slots.push(m);
    }
    Ok((FrameOutputs { frame_id: queries.frame_id, slots }, stats))
}

/// Relative Frobenius error of each slot, averaged over slots.
pub fn fidelity_error(pruned: &FrameOutputs, full: &FrameOutputs) -> Result<f64> {
    if pruned.slots.len() != full.slots.len() || pruned.slots.is_empty() {
        return Err(Error::Shape(format!(
            "{} vs {} output slots",
            pruned.slots.len(),
            full.slots.len()
        )));
    }
    let mut total = 0.0;
    for (p, f) in pruned.slots.iter().zip(&full.slots) {
        total += relative_frobenius(p, f)?;
    }
    Ok(total / full.slots.len() as f64)
}
