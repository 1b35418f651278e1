//! Synthetic camera-drift streams.
//!
//! Every slot owns a small window of unit cluster centers. Each frame the
//! centers rotate by `drift_angle` inside a fixed random plane, and with
//! probability `novelty_rho` a fresh center enters the window while the
//! oldest leaves it. Tokens are noisy samples around the active centers, so
//! consecutive frames are highly redundant. Values are a fixed linear
//! readout of the key plus noise; queries are samples from the same clusters
//! seen through a fixed random rotation.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::FrameQueries;
use crate::baselines::event_seed;
use crate::error::{Error, Result};
use crate::kvcache::{FrameKV, SlotKV};
use crate::numerics::{cos_sim, Matrix};

pub mod trace;

pub use trace::{read_trace, write_trace, TraceHeader, TraceReader, TraceWriter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub layers: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub tokens_per_frame: usize,
    pub n_frames: u32,
    pub m_clusters: usize,
    /// Per-layer override of `m_clusters`; empty means no override.
    pub layer_clusters: Vec<usize>,
    /// Radians per frame.
    pub drift_angle: f64,
    /// Expected norm of the noise added to a center before normalization.
    pub noise_sigma: f64,
    pub novelty_rho: f64,
    /// Logit scale of queries: logits are `query_gain * cos(q, k)`.
    pub query_gain: f64,
    /// Blend between a query aimed at its own cluster (0) and the same
    /// query under a fixed random rotation (1).
    pub query_mix: f64,
    /// Relative weight of the key-independent part of each value.
    pub value_noise: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self::calibration()
    }
}

impl StreamSpec {
    /// Default redundancy preset: four clusters drifting by 0.01 rad/frame.
    pub fn calibration() -> Self {
        Self {
            layers: 4,
            heads: 2,
            d_k: 32,
            d_v: 32,
            tokens_per_frame: 16,
            n_frames: 2000,
            m_clusters: 4,
            layer_clusters: Vec::new(),
            drift_angle: 0.01,
            noise_sigma: 0.05,
            novelty_rho: 0.02,
            query_gain: 12.0,
            query_mix: 1.0,
            value_noise: 0.25,
            seed: 0,
        }
    }

    pub fn slots(&self) -> usize {
        self.layers * self.heads
    }

    pub fn clusters_for_layer(&self, layer: usize) -> usize {
        self.layer_clusters.get(layer).copied().unwrap_or(self.m_clusters)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_v", self.d_v),
            ("tokens_per_frame", self.tokens_per_frame),
            ("m_clusters", self.m_clusters),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_k < 2 {
            return Err(Error::Config("d_k must be at least 2".into()));
        }
        if !self.layer_clusters.is_empty() {
            if self.layer_clusters.len() != self.layers {
                return Err(Error::Config(format!(
                    "layer_clusters has {} entries for {} layers",
                    self.layer_clusters.len(),
                    self.layers
                )));
            }
            if self.layer_clusters.contains(&0) {
                return Err(Error::Config("layer_clusters entries must be positive".into()));
            }
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.novelty_rho) {
            return Err(Error::Config("novelty_rho must lie in [0, 1]".into()));
        }
        if !self.drift_angle.is_finite() || !self.query_gain.is_finite() {
            return Err(Error::Config("drift_angle and query_gain must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.query_mix) {
            return Err(Error::Config("query_mix must lie in [0, 1]".into()));
        }
        if self.value_noise < 0.0 || !self.value_noise.is_finite() {
            return Err(Error::Config("value_noise must be >= 0".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d);
        if v.iter().any(|&x| x != 0.0) {
            return unit(v);
        }
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt on gaussian vectors: rows form an orthonormal basis.
fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v = gaussian(rng, d);
        for b in &basis {
            let p = dot64(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = dot64(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

struct SlotGen {
    rng: ChaCha8Rng,
    window: usize,
    centers: VecDeque<Vec<f64>>,
    plane: [Vec<f64>; 2],
    query_rotation: Vec<Vec<f64>>,
    value_map: Vec<Vec<f64>>,
}

impl SlotGen {
    fn new(spec: &StreamSpec, slot: usize, window: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(event_seed(spec.seed, slot, 0));
        let d = spec.d_k;
        let centers = (0..window).map(|_| random_unit(&mut rng, d)).collect();
        let [u, w]: [Vec<f64>; 2] = random_orthonormal(&mut rng, 2, d).try_into().expect("two rows");
        let query_rotation = random_orthonormal(&mut rng, d, d);
        let inv = 1.0 / (d as f64).sqrt();
        let value_map = (0..spec.d_v).map(|_| gaussian(&mut rng, d).into_iter().map(|x| x * inv).collect()).collect();
        Self { rng, window, centers, plane: [u, w], query_rotation, value_map }
    }

    fn advance(&mut self, spec: &StreamSpec) {
        let (sin, cos) = spec.drift_angle.sin_cos();
        let [u, w] = &self.plane;
        for c in &mut self.centers {
            let a = dot64(c, u);
            let b = dot64(c, w);
            let da = a * cos - b * sin - a;
            let db = a * sin + b * cos - b;
            for ((x, &ui), &wi) in c.iter_mut().zip(u).zip(w) {
                *x += da * ui + db * wi;
            }
        }
        if spec.novelty_rho > 0.0 && self.rng.random_bool(spec.novelty_rho) {
            let fresh = random_unit(&mut self.rng, spec.d_k);
            self.centers.push_back(fresh);
            while self.centers.len() > self.window {
                self.centers.pop_front();
            }
        }
    }

    fn sample_near(&mut self, center: usize, spec: &StreamSpec) -> Vec<f64> {
        let d = spec.d_k;
        let s = spec.noise_sigma / (d as f64).sqrt();
        let noise = gaussian(&mut self.rng, d);
        let c = &self.centers[center];
        unit(c.iter().zip(noise).map(|(x, n)| x + s * n).collect())
    }

    fn frame(&mut self, spec: &StreamSpec) -> Result<(SlotKV, Matrix)> {
        let (p, d, d_v) = (spec.tokens_per_frame, spec.d_k, spec.d_v);
        let mut keys = Vec::with_capacity(p * d);
        let mut values = Vec::with_capacity(p * d_v);
        let mut queries = Vec::with_capacity(p * d);
        let q_norm = spec.query_gain * (d as f64).sqrt();
        for _ in 0..p {
            let c = self.rng.random_range(0..self.centers.len());
            let k = self.sample_near(c, spec);
            let noise = gaussian(&mut self.rng, d_v);
            let v: Vec<f64> =
                self.value_map.iter().zip(noise).map(|(row, n)| dot64(row, &k) + spec.value_noise * n).collect();
            let rms = (v.iter().map(|x| x * x).sum::<f64>() / d_v as f64).sqrt();
            let x = self.sample_near(c, spec);
            keys.extend(k.iter().map(|&x| x as f32));
            values.extend(v.iter().map(|&x| if rms > 0.0 { (x / rms) as f32 } else { 0.0 }));
            let w = spec.query_mix;
            let q = unit(self.query_rotation.iter().zip(&x).map(|(row, xi)| w * dot64(row, &x) + (1.0 - w) * xi).collect());
            queries.extend(q.iter().map(|&v| (q_norm * v) as f32));
        }
        Ok((
            SlotKV { keys: Matrix::from_vec(p, d, keys)?, values: Matrix::from_vec(p, d_v, values)? },
            Matrix::from_vec(p, d, queries)?,
        ))
    }
}

/// Deterministic frame iterator for a [`StreamSpec`].
pub struct StreamGenerator {
    spec: StreamSpec,
    slots: Vec<SlotGen>,
    next_frame: u32,
}

impl StreamGenerator {
    pub fn new(spec: StreamSpec) -> Result<Self> {
        spec.validate()?;
        let slots = (0..spec.slots())
            .map(|s| SlotGen::new(&spec, s, spec.clusters_for_layer(s / spec.heads)))
            .collect();
        Ok(Self { spec, slots, next_frame: 0 })
    }

    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader::for_spec(&self.spec)
    }

    fn next_frame(&mut self) -> Result<(FrameKV, FrameQueries)> {
        let frame_id = self.next_frame;
        let mut kv = Vec::with_capacity(self.slots.len());
        let mut qs = Vec::with_capacity(self.slots.len());
        for slot in &mut self.slots {
            if frame_id > 0 {
                slot.advance(&self.spec);
            }
            let (block, q) = slot.frame(&self.spec)?;
            kv.push(block);
            qs.push(q);
        }
        self.next_frame += 1;
        Ok((FrameKV { frame_id, slots: kv }, FrameQueries { frame_id, slots: qs }))
    }
}

impl Iterator for StreamGenerator {
    type Item = (FrameKV, FrameQueries);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_frame >= self.spec.n_frames {
            return None;
        }
        // shapes are fixed by the validated spec, so construction cannot fail
        Some(self.next_frame().expect("generator shapes are consistent"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.spec.n_frames - self.next_frame) as usize;
        (left, Some(left))
    }
}

pub fn generate(spec: &StreamSpec) -> Result<StreamGenerator> {
    StreamGenerator::new(spec.clone())
}

/// Mean over slots of the mean, over tokens of `cur`, of the best cosine
/// match among the tokens of `prev`.
pub fn frame_pair_similarity(prev: &FrameKV, cur: &FrameKV) -> Result<f64> {
    if prev.slots.len() != cur.slots.len() || cur.slots.is_empty() {
        return Err(Error::Shape("frames disagree on slot count".into()));
    }
    let mut total = 0.0;
    for (a, b) in prev.slots.iter().zip(&cur.slots) {
        let mut slot_sum = 0.0;
        for i in 0..b.keys.rows() {
            let mut best = f64::NEG_INFINITY;
            for j in 0..a.keys.rows() {
                best = best.max(cos_sim(b.keys.row(i), a.keys.row(j))?);
            }
            slot_sum += best;
        }
        total += slot_sum / b.keys.rows() as f64;
    }
    Ok(total / cur.slots.len() as f64)
}

pub fn adjacent_frame_similarity(frames: &[FrameKV], t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::FrameIndex);
    }
    if t >= frames.len() {
        return Err(Error::Shape(format!("frame {t} beyond stream of {}", frames.len())));
    }
    frame_pair_similarity(&frames[t - 1], &frames[t])
}

/// Average of [`frame_pair_similarity`] over every adjacent pair of a
/// generated stream, computed without holding the whole stream.
pub fn mean_adjacent_similarity(spec: &StreamSpec) -> Result<f64> {
    let mut prev: Option<FrameKV> = None;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (kv, _) in generate(spec)? {
        if let Some(p) = &prev {
            total += frame_pair_similarity(p, &kv)?;
            pairs += 1;
        }
        prev = Some(kv);
    }
    if pairs == 0 {
        return Err(Error::FrameIndex);
    }
    Ok(total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normalize;

    fn is_unit_or_zero(v: &[f32]) -> bool {
        normalize(v).map(|u| u.is_zero() || (crate::numerics::norm(v) - 1.0).abs() < 1e-5).unwrap_or(false)
    }

    fn tiny() -> StreamSpec {
        StreamSpec { layers: 2, heads: 2, d_k: 8, d_v: 6, tokens_per_frame: 5, n_frames: 12, ..StreamSpec::calibration() }
    }

    #[test]
    fn degenerate_stream_repeats_one_key() {
        let spec = StreamSpec {
            m_clusters: 1,
            noise_sigma: 0.0,
            drift_angle: 0.0,
            novelty_rho: 0.0,
            ..tiny()
        };
        let frames: Vec<_> = generate(&spec).unwrap().collect();
        assert_eq!(frames.len(), 12);
        for s in 0..spec.slots() {
            let first = frames[0].0.slots[s].keys.row(0).to_vec();
            for (kv, _) in &frames {
                for i in 0..5 {
                    assert_eq!(kv.slots[s].keys.row(i), &first[..]);
                }
            }
        }
        assert!((adjacent_frame_similarity(&frames.iter().map(|f| f.0.clone()).collect::<Vec<_>>(), 3).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn generation_is_deterministic() {
        let a: Vec<_> = generate(&tiny()).unwrap().collect();
        let b: Vec<_> = generate(&tiny()).unwrap().collect();
        assert_eq!(a, b);
        let c: Vec<_> = generate(&StreamSpec { seed: 1, ..tiny() }).unwrap().collect();
        assert_ne!(a, c);
    }

    #[test]
    fn keys_are_unit_and_values_unit_rms() {
        for (kv, q) in generate(&tiny()).unwrap() {
            assert_eq!(q.frame_id, kv.frame_id);
            for (block, qm) in kv.slots.iter().zip(&q.slots) {
                assert_eq!(qm.rows(), 5);
                for i in 0..5 {
                    assert!(is_unit_or_zero(block.keys.row(i)));
                    let rms = (block.values.row(i).iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / 6.0).sqrt();
                    assert!((rms - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn similarity_of_orthogonal_frames_is_zero() {
        // P=2 tokens, d_k=4 >= 2P: standard basis vectors split across frames
        let e = |i: usize| {
            let mut v = vec![0.0f32; 4];
            v[i] = 1.0;
            v
        };
        let frame = |id: u32, a: usize, b: usize| FrameKV {
            frame_id: id,
            slots: vec![SlotKV {
                keys: Matrix::from_vec(2, 4, [e(a), e(b)].concat()).unwrap(),
                values: Matrix::zeros(2, 1),
            }],
        };
        let frames = vec![frame(0, 0, 1), frame(1, 2, 3), frame(2, 2, 3)];
        assert!(adjacent_frame_similarity(&frames, 1).unwrap().abs() < 1e-6);
        assert!((adjacent_frame_similarity(&frames, 2).unwrap() - 1.0).abs() < 1e-6);
        assert!(matches!(adjacent_frame_similarity(&frames, 0), Err(Error::FrameIndex)));
    }

    #[test]
    fn spec_validation() {
        assert!(StreamSpec { d_k: 1, ..tiny() }.validate().is_err());
        assert!(StreamSpec { m_clusters: 0, ..tiny() }.validate().is_err());
        assert!(StreamSpec { novelty_rho: 1.5, ..tiny() }.validate().is_err());
        assert!(StreamSpec { layer_clusters: vec![1], ..tiny() }.validate().is_err());
        assert!(StreamSpec { layer_clusters: vec![1, 3], ..tiny() }.validate().is_ok());
    }

    #[test]
    fn layer_cluster_override_sets_window() {
        let spec = StreamSpec { layer_clusters: vec![1, 6], ..tiny() };
        let g = StreamGenerator::new(spec).unwrap();
        assert_eq!(g.slots[0].centers.len(), 1);
        assert_eq!(g.slots[3].centers.len(), 6);
    }
}
