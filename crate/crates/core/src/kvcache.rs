//! Rolling-memory KV store.
//!
//! Every (layer, head) slot keeps two segments: an anchor segment filled
//! during warm-up and never touched again, and a candidate segment that the
//! retention policies shrink back to budget after each prune event.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normalize, KvRows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Larger insert_seq wins a tie.
    RecentFirst,
    /// Smaller insert_seq wins a tie.
    StableIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerAllocation {
    Adaptive,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Tokens contributed by each frame to every slot.
    pub tokens_per_frame: usize,
    pub b_init_per_head: usize,
    pub tau: f64,
    pub anchor_frame_count: u32,
    pub anchor_enabled: bool,
    /// Frames between prune events.
    pub prune_interval: u32,
    /// Zero means "one frame of tokens".
    pub min_head_budget: usize,
    pub tiebreak: TieBreak,
    pub layer_allocation: LayerAllocation,
    /// Reuse the first budget plan for the rest of the stream.
    pub freeze_after_first: bool,
    /// Tile width for streaming attention.
    pub block_size: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 2,
            d_k: 32,
            d_v: 32,
            tokens_per_frame: 16,
            b_init_per_head: 256,
            tau: 1.0,
            anchor_frame_count: 1,
            anchor_enabled: true,
            prune_interval: 1,
            min_head_budget: 0,
            tiebreak: TieBreak::RecentFirst,
            layer_allocation: LayerAllocation::Adaptive,
            freeze_after_first: false,
            block_size: 512,
        }
    }
}

impl EngineConfig {
    /// Shape of the 24-layer, 16-head aggregator the engine is modelled on.
    pub fn vggt_shaped() -> Self {
        Self { layers: 24, heads: 16, d_k: 64, d_v: 64, tokens_per_frame: 782, b_init_per_head: 1564, ..Self::default() }
    }

    pub fn slots(&self) -> usize {
        self.layers * self.heads
    }

    pub fn effective_min_head_budget(&self) -> usize {
        if self.min_head_budget == 0 {
            self.tokens_per_frame
        } else {
            self.min_head_budget
        }
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.d_k as f32).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("tokens_per_frame", self.tokens_per_frame),
            ("b_init_per_head", self.b_init_per_head),
            ("anchor_frame_count", self.anchor_frame_count as usize),
            ("prune_interval", self.prune_interval as usize),
            ("block_size", self.block_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        let floor = self.effective_min_head_budget();
        if self.b_init_per_head < floor {
            return Err(Error::Config(format!(
                "b_init_per_head {} is below min_head_budget {floor}",
                self.b_init_per_head
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenMeta {
    pub frame_id: u32,
    pub token_idx: u32,
    pub insert_seq: u64,
}

/// Borrowed view of one cached token.
#[derive(Debug, Clone, Copy)]
pub struct TokenEntry<'a> {
    pub key: &'a [f32],
    pub key_unit: &'a [f32],
    pub value: &'a [f32],
    pub frame_id: u32,
    pub token_idx: u32,
    pub insert_seq: u64,
}

/// Normalized keys plus token identities, without values. Scorers only ever
/// see this view.
#[derive(Debug, Clone, Copy)]
pub struct KeyView<'a> {
    pub d_k: usize,
    pub key_units: &'a [f32],
    pub meta: &'a [TokenMeta],
}

impl<'a> KeyView<'a> {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn unit(&self, i: usize) -> &'a [f32] {
        &self.key_units[i * self.d_k..(i + 1) * self.d_k]
    }

    pub fn units(&self) -> impl Iterator<Item = &'a [f32]> + '_ {
        self.key_units.chunks_exact(self.d_k)
    }
}

/// Struct-of-arrays token storage ordered by insert_seq.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    d_k: usize,
    d_v: usize,
    keys: Vec<f32>,
    key_units: Vec<f32>,
    values: Vec<f32>,
    meta: Vec<TokenMeta>,
}

impl Segment {
    pub fn new(d_k: usize, d_v: usize) -> Self {
        Self {
            d_k,
            d_v,
            keys: Vec::new(),
            key_units: Vec::new(),
            values: Vec::new(),
            meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self) -> &[TokenMeta] {
        &self.meta
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.d_k..(i + 1) * self.d_k]
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * self.d_v..(i + 1) * self.d_v]
    }

    pub fn get(&self, i: usize) -> TokenEntry<'_> {
        let m = self.meta[i];
        TokenEntry {
            key: self.key(i),
            key_unit: &self.key_units[i * self.d_k..(i + 1) * self.d_k],
            value: self.value(i),
            frame_id: m.frame_id,
            token_idx: m.token_idx,
            insert_seq: m.insert_seq,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenEntry<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn key_view(&self) -> KeyView<'_> {
        KeyView { d_k: self.d_k, key_units: &self.key_units, meta: &self.meta }
    }

    fn push(&mut self, key: &[f32], key_unit: &[f32], value: &[f32], meta: TokenMeta) {
        debug_assert!(self.meta.last().is_none_or(|m| m.insert_seq < meta.insert_seq));
        self.keys.extend_from_slice(key);
        self.key_units.extend_from_slice(key_unit);
        self.values.extend_from_slice(value);
        self.meta.push(meta);
    }

    fn position(&self, seq: u64) -> Option<usize> {
        self.meta.binary_search_by_key(&seq, |m| m.insert_seq).ok()
    }

    /// Keeps rows whose flag is set, preserving order.
    fn retain_mask(&mut self, keep: &[bool]) {
        let (d_k, d_v) = (self.d_k, self.d_v);
        let mut w = 0;
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                continue;
            }
            if w != r {
                self.keys.copy_within(r * d_k..(r + 1) * d_k, w * d_k);
                self.key_units.copy_within(r * d_k..(r + 1) * d_k, w * d_k);
                self.values.copy_within(r * d_v..(r + 1) * d_v, w * d_v);
                self.meta[w] = self.meta[r];
            }
            w += 1;
        }
        self.keys.truncate(w * d_k);
        self.key_units.truncate(w * d_k);
        self.values.truncate(w * d_v);
        self.meta.truncate(w);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    pub layer: usize,
    pub head: usize,
    pub anchor: Segment,
    pub candidates: Segment,
}

impl HeadCache {
    fn new(layer: usize, head: usize, d_k: usize, d_v: usize) -> Self {
        Self {
            layer,
            head,
            anchor: Segment::new(d_k, d_v),
            candidates: Segment::new(d_k, d_v),
        }
    }
}

/// Anchor rows first, then candidates.
impl KvRows for HeadCache {
    fn len(&self) -> usize {
        self.anchor.len() + self.candidates.len()
    }

    fn key(&self, j: usize) -> &[f32] {
        let a = self.anchor.len();
        if j < a {
            self.anchor.key(j)
        } else {
            self.candidates.key(j - a)
        }
    }

    fn value(&self, j: usize) -> &[f32] {
        let a = self.anchor.len();
        if j < a {
            self.anchor.value(j)
        } else {
            self.candidates.value(j - a)
        }
    }
}

/// Per-frame increment: one key and one value matrix (`P` rows) per slot,
/// in layer-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameKV {
    pub frame_id: u32,
    pub slots: Vec<SlotKV>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotKV {
    pub keys: Matrix,
    pub values: Matrix,
}

impl FrameKV {
    pub fn tokens(&self) -> usize {
        self.slots.first().map_or(0, |s| s.keys.rows())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SlotCounts {
    pub anchor_count: usize,
    pub candidate_count: usize,
}

/// Tokens dropped by one [`CacheState::apply_retention`] call, per slot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvictionReport {
    /// `(frame_id, token_idx)` pairs in slot order.
    pub evicted: Vec<Vec<(u32, u32)>>,
}

impl EvictionReport {
    pub fn total(&self) -> usize {
        self.evicted.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

#[derive(Debug, Clone)]
pub struct CacheState {
    config: EngineConfig,
    grid: Vec<HeadCache>,
    frames_seen: u32,
    next_seq: u64,
}

impl CacheState {
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let grid = (0..config.layers)
            .flat_map(|l| (0..config.heads).map(move |h| (l, h)))
            .map(|(l, h)| HeadCache::new(l, h, config.d_k, config.d_v))
            .collect();
        Ok(Self { config, grid, frames_seen: 0, next_seq: 0 })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn frames_seen(&self) -> u32 {
        self.frames_seen
    }

    pub fn slots(&self) -> &[HeadCache] {
        &self.grid
    }

    pub fn slot(&self, layer: usize, head: usize) -> &HeadCache {
        &self.grid[layer * self.config.heads + head]
    }

    pub fn resident_tokens(&self) -> usize {
        self.grid.iter().map(|s| s.anchor.len() + s.candidates.len()).sum()
    }

    pub fn candidate_tokens(&self) -> usize {
        self.grid.iter().map(|s| s.candidates.len()).sum()
    }

    fn check_frame(&self, frame: &FrameKV) -> Result<()> {
        if frame.frame_id != self.frames_seen {
            return Err(Error::NonCausalAppend { expected: self.frames_seen, got: frame.frame_id });
        }
        let c = &self.config;
        if frame.slots.len() != c.slots() {
            return Err(Error::Shape(format!(
                "frame has {} slots, cache has {}",
                frame.slots.len(),
                c.slots()
            )));
        }
        let p = frame.tokens();
        if p != c.tokens_per_frame {
            return Err(Error::Shape(format!(
                "frame has {p} tokens per slot, config expects {}",
                c.tokens_per_frame
            )));
        }
        for s in &frame.slots {
            if s.keys.rows() != p || s.values.rows() != p || s.keys.cols() != c.d_k || s.values.cols() != c.d_v {
                return Err(Error::Shape(format!(
                    "slot block {}x{} / {}x{} does not match P={p}, d_k={}, d_v={}",
                    s.keys.rows(),
                    s.keys.cols(),
                    s.values.rows(),
                    s.values.cols(),
                    c.d_k,
                    c.d_v
                )));
            }
            crate::numerics::ensure_finite(s.values.as_slice())?;
        }
        Ok(())
    }

    /// Appends one frame to every slot. Frames must arrive in order.
    pub fn append_frame(&mut self, frame: &FrameKV) -> Result<()> {
        self.check_frame(frame)?;
        // normalize everything before touching the grid so a bad key leaves
        // the cache unchanged
        let units = frame
            .slots
            .iter()
            .map(|s| {
                (0..s.keys.rows())
                    .map(|i| normalize(s.keys.row(i)).map(|u| u.into_inner()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let to_anchor =
            self.config.anchor_enabled && frame.frame_id < self.config.anchor_frame_count;
        let base = self.next_seq;
        for ((slot, block), units) in self.grid.iter_mut().zip(&frame.slots).zip(&units) {
            let seg = if to_anchor { &mut slot.anchor } else { &mut slot.candidates };
            for (i, unit) in units.iter().enumerate() {
                let meta = TokenMeta {
                    frame_id: frame.frame_id,
                    token_idx: i as u32,
                    insert_seq: base + i as u64,
                };
                seg.push(block.keys.row(i), unit, block.values.row(i), meta);
            }
        }
        self.next_seq += frame.tokens() as u64;
        self.frames_seen += 1;
        Ok(())
    }

    /// Shrinks each slot's candidates to the given insert_seq keep set.
    /// Either every slot is updated or, on error, none is.
    pub fn apply_retention(&mut self, keep: &[Vec<u64>]) -> Result<EvictionReport> {
        if keep.len() != self.grid.len() {
            return Err(Error::Shape(format!(
                "{} keep sets for {} slots",
                keep.len(),
                self.grid.len()
            )));
        }
        let masks = self
            .grid
            .par_iter()
            .zip(keep)
            .enumerate()
            .map(|(slot_idx, (slot, keep))| {
                let mut mask = vec![false; slot.candidates.len()];
                for &seq in keep {
                    match slot.candidates.position(seq) {
                        Some(i) => mask[i] = true,
                        None => return Err(Error::IllegalEvictionTarget { slot: slot_idx, seq }),
                    }
                }
                Ok(mask)
            })
            .collect::<Result<Vec<_>>>()?;

        let evicted = self
            .grid
            .par_iter_mut()
            .zip(masks)
            .map(|(slot, mask)| {
                let dropped: Vec<(u32, u32)> = slot
                    .candidates
                    .meta
                    .iter()
                    .zip(&mask)
                    .filter(|(_, &k)| !k)
                    .map(|(m, _)| (m.frame_id, m.token_idx))
                    .collect();
                if !dropped.is_empty() {
                    slot.candidates.retain_mask(&mask);
                }
                dropped
            })
            .collect();
        Ok(EvictionReport { evicted })
    }

    pub fn snapshot_counts(&self) -> Vec<SlotCounts> {
        self.grid
            .iter()
            .map(|s| SlotCounts { anchor_count: s.anchor.len(), candidate_count: s.candidates.len() })
            .collect()
    }
}
