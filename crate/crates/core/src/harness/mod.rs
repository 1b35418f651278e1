//! Experiment driver: stream source -> cache -> policy -> metrics.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{fidelity_error, forward_frame, AttentionMode, FrameQueries};
use crate::baselines::{attention_oracle_scores, event_seed, random_keep, recency_keep, PolicyKind};
use crate::budget::{allocate, layer_diversity, BudgetPlan};
use crate::error::{Error, Result};
use crate::kvcache::{CacheState, EngineConfig, EvictionReport, FrameKV, LayerAllocation};
use crate::numerics::{norm, Matrix};
use crate::retention::{score_slot, select_topk, slot_mean_diversity, SlotScores};
use crate::synth::{StreamGenerator, StreamSpec, TraceHeader, TraceReader};

pub mod compare;
pub mod config;
pub mod report;

pub use compare::{compare, ArmSummary, Comparison};
pub use report::{FidelitySample, RunMetrics, SlotSummary, Timing};

#[derive(Debug, Clone, PartialEq)]
pub enum StreamSource {
    Synthetic(StreamSpec),
    Trace(PathBuf),
}

/// Which queries drive fidelity sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Probe {
    /// The frame's own queries.
    #[default]
    Current,
    /// Frame 0's keys, rescaled to the norms of frame 0's queries and
    /// replayed at every sampled frame. Targets the anchor tokens directly.
    Anchor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub source: StreamSource,
    pub policy: PolicyKind,
    /// Seeds the random policy.
    pub seed: u64,
    /// Sample fidelity every k frames; 0 disables fidelity and the shadow
    /// cache.
    pub fidelity_every: u32,
    pub probe: Probe,
    /// Largest shadow (unpruned) cache, in tokens per slot, before fidelity
    /// sampling is switched off.
    pub shadow_cap: usize,
    /// Also compute the attention-oracle keep sets at each prune event and
    /// record their Jaccard overlap with this policy's choice.
    pub track_oracle_overlap: bool,
}

impl RunConfig {
    pub fn synthetic(engine: EngineConfig, spec: StreamSpec, policy: PolicyKind) -> Self {
        Self {
            engine,
            seed: spec.seed,
            source: StreamSource::Synthetic(spec),
            policy,
            fidelity_every: 0,
            probe: Probe::Current,
            shadow_cap: 1 << 20,
            track_oracle_overlap: false,
        }
    }
}

/// Frames from either a generator or a trace file.
pub enum FrameSource {
    Generator(StreamGenerator),
    Trace(TraceReader<BufReader<File>>),
}

impl FrameSource {
    pub fn open(source: &StreamSource) -> Result<Self> {
        match source {
            StreamSource::Synthetic(spec) => Ok(FrameSource::Generator(StreamGenerator::new(spec.clone())?)),
            StreamSource::Trace(path) => Ok(FrameSource::Trace(TraceReader::open(path)?)),
        }
    }

    pub fn header(&self) -> TraceHeader {
        match self {
            FrameSource::Generator(g) => g.header(),
            FrameSource::Trace(r) => *r.header(),
        }
    }
}

impl Iterator for FrameSource {
    type Item = Result<(FrameKV, FrameQueries)>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            FrameSource::Generator(g) => g.next().map(Ok),
            FrameSource::Trace(r) => r.next(),
        }
    }
}

pub fn check_dimensions(engine: &EngineConfig, header: &TraceHeader) -> Result<()> {
    let pairs = [
        ("layers", engine.layers, header.layers as usize),
        ("heads", engine.heads, header.heads as usize),
        ("d_k", engine.d_k, header.d_k as usize),
        ("d_v", engine.d_v, header.d_v as usize),
        ("tokens_per_frame", engine.tokens_per_frame, header.tokens_per_frame as usize),
    ];
    for (name, cfg, stream) in pairs {
        if cfg != stream {
            return Err(Error::Config(format!("{name}: engine has {cfg}, stream has {stream}")));
        }
    }
    Ok(())
}

/// Result of one score -> allocate -> retain cycle.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub plan: BudgetPlan,
    pub keep: Vec<Vec<u64>>,
    pub report: EvictionReport,
}

/// Stateful prune driver; holds the frozen plan and the event counter.
#[derive(Debug, Clone)]
pub struct Pruner {
    policy: PolicyKind,
    seed: u64,
    events: u64,
    frozen: Option<BudgetPlan>,
}

impl Pruner {
    pub fn new(policy: PolicyKind, seed: u64) -> Self {
        Self { policy, seed, events: 0, frozen: None }
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    fn diversity_scores(cache: &CacheState) -> Result<Vec<Option<SlotScores>>> {
        cache
            .slots()
            .par_iter()
            .map(|s| score_slot(s.layer, s.head, &s.candidates.key_view()))
            .collect()
    }

    fn plan(&mut self, cache: &CacheState, scores: Option<&[Option<SlotScores>]>) -> Result<BudgetPlan> {
        if let Some(plan) = &self.frozen {
            return Ok(plan.clone());
        }
        let cfg = cache.config();
        let s_layer = match scores {
            Some(scores) => {
                let means = scores
                    .iter()
                    .map(|s| s.as_ref().map(slot_mean_diversity).transpose())
                    .collect::<Result<Vec<_>>>()?;
                layer_diversity(&means, cfg.layers, cfg.heads)?
            }
            None => vec![0.0; cfg.layers],
        };
        let plan = allocate(&s_layer, cfg)?;
        if cfg.freeze_after_first {
            self.frozen = Some(plan.clone());
        }
        Ok(plan)
    }

    /// Keep sets the policy would choose for the current cache, without
    /// applying them.
    pub fn choose(&mut self, cache: &CacheState, queries: &FrameQueries) -> Result<(BudgetPlan, Vec<Vec<u64>>)> {
        let cfg = cache.config();
        let needs_diversity = self.policy == PolicyKind::Diversity
            || (cfg.layer_allocation == LayerAllocation::Adaptive && self.frozen.is_none());
        let scores = if needs_diversity { Some(Self::diversity_scores(cache)?) } else { None };
        // barrier: every slot is scored before the layer budgets are fixed
        let plan = self.plan(cache, scores.as_deref())?;
        let event = self.events;
        self.events += 1;
        let heads = cfg.heads;
        let keep = choose_keep_sets(self.policy, cache, queries, &plan, scores.as_deref(), self.seed, event, heads)?;
        Ok((plan, keep))
    }

    pub fn prune(&mut self, cache: &mut CacheState, queries: &FrameQueries) -> Result<PruneOutcome> {
        let (plan, keep) = self.choose(cache, queries)?;
        let report = cache.apply_retention(&keep)?;
        Ok(PruneOutcome { plan, keep, report })
    }
}

#[allow(clippy::too_many_arguments)]
fn choose_keep_sets(
    policy: PolicyKind,
    cache: &CacheState,
    queries: &FrameQueries,
    plan: &BudgetPlan,
    scores: Option<&[Option<SlotScores>]>,
    seed: u64,
    event: u64,
    heads: usize,
) -> Result<Vec<Vec<u64>>> {
    let cfg = cache.config();
    let scale = cfg.scale();
    let tiebreak = cfg.tiebreak;
    cache
        .slots()
        .par_iter()
        .enumerate()
        .map(|(i, slot)| {
            let budget = plan.head_budget(i / heads, i % heads);
            let meta = slot.candidates.meta();
            if meta.is_empty() {
                return Ok(Vec::new());
            }
            Ok(match policy {
                PolicyKind::Diversity => {
                    let s = scores.and_then(|s| s[i].as_ref()).expect("diversity scores present");
                    select_topk(s, budget, tiebreak)
                }
                PolicyKind::AttentionOracle => {
                    if meta.len() <= budget {
                        meta.iter().map(|m| m.insert_seq).collect()
                    } else {
                        let s = attention_oracle_scores(slot, &queries.slots[i], scale)?;
                        select_topk(&s, budget, tiebreak)
                    }
                }
                PolicyKind::Random => random_keep(meta, budget, event_seed(seed, i, event)),
                PolicyKind::Recency => recency_keep(meta, budget),
            })
        })
        .collect()
}

fn jaccard(a: &[u64], b: &[u64]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    // both sorted
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Processes every frame of the configured stream and collects metrics.
pub fn run(config: &RunConfig) -> Result<RunMetrics> {
    let mut out = run_arms(std::slice::from_ref(config))?;
    Ok(out.pop().expect("one arm in, one report out"))
}

/// Runs several arms over one stream in lockstep. The stream is read once
/// and the unpruned reference cache and its outputs are shared. Every arm
/// must agree on the stream, the engine shape and the fidelity settings.
pub fn run_arms(configs: &[RunConfig]) -> Result<Vec<RunMetrics>> {
    let first = configs.first().ok_or_else(|| Error::Config("no arms to run".into()))?;
    for c in configs {
        c.engine.validate()?;
    }
    let source = FrameSource::open(&first.source)?;
    for c in configs {
        check_dimensions(&c.engine, &source.header())?;
    }
    run_frames_arms(configs, source)
}

/// As [`run`], over an arbitrary frame iterator.
pub fn run_frames<I>(config: &RunConfig, frames: I) -> Result<RunMetrics>
where
    I: IntoIterator<Item = Result<(FrameKV, FrameQueries)>>,
{
    let mut out = run_frames_arms(std::slice::from_ref(config), frames)?;
    Ok(out.pop().expect("one arm in, one report out"))
}

/// Queries pointing along a frame's own keys, one per token, with the
/// norms of that frame's queries.
pub fn anchor_probe(kv: &FrameKV, queries: &FrameQueries) -> Result<FrameQueries> {
    if kv.slots.len() != queries.slots.len() {
        return Err(Error::Shape("keys and queries disagree on slot count".into()));
    }
    let slots = kv
        .slots
        .iter()
        .zip(&queries.slots)
        .map(|(block, q)| {
            let keys = &block.keys;
            if keys.rows() != q.rows() || keys.cols() != q.cols() {
                return Err(Error::Shape("query and key blocks differ in shape".into()));
            }
            let mut out = Matrix::zeros(keys.rows(), keys.cols());
            for i in 0..keys.rows() {
                let k = keys.row(i);
                let kn = norm(k);
                let gain = if kn > 0.0 { norm(q.row(i)) / kn } else { 0.0 };
                for (o, &x) in out.row_mut(i).iter_mut().zip(k) {
                    *o = (x as f64 * gain) as f32;
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameQueries { frame_id: queries.frame_id, slots })
}

/// Per-arm state of a lockstep run.
struct Arm {
    config: RunConfig,
    cache: CacheState,
    pruner: Pruner,
    oracle: Pruner,
    track_overlap: bool,
    metrics: RunMetrics,
    count_sums: Vec<u64>,
    count_max: Vec<usize>,
    last_plan: Option<BudgetPlan>,
    busy: Duration,
}

impl Arm {
    fn new(config: &RunConfig) -> Result<Self> {
        let slots = config.engine.slots();
        Ok(Self {
            cache: CacheState::new(config.engine.clone())?,
            pruner: Pruner::new(config.policy, config.seed),
            oracle: Pruner::new(PolicyKind::AttentionOracle, config.seed),
            track_overlap: config.track_oracle_overlap && config.policy != PolicyKind::AttentionOracle,
            metrics: RunMetrics::new(config),
            count_sums: vec![0; slots],
            count_max: vec![0; slots],
            last_plan: None,
            busy: Duration::ZERO,
            config: config.clone(),
        })
    }

    fn step(&mut self, kv: &FrameKV, queries: &FrameQueries) -> Result<()> {
        let started = Instant::now();
        let engine = &self.config.engine;
        let t = kv.frame_id;
        let slots = engine.slots();
        let cache = &mut self.cache;
        let metrics = &mut self.metrics;
        cache.append_frame(kv)?;
        metrics.peak_resident_tokens = metrics.peak_resident_tokens.max(cache.resident_tokens());

        if (t + 1).is_multiple_of(engine.prune_interval) {
            let overlap_keep = if self.track_overlap {
                let mut o = self.oracle.clone();
                o.frozen = self.pruner.frozen.clone();
                Some(o.choose(cache, queries)?.1)
            } else {
                None
            };
            metrics.prune_frames.push(t);
            metrics.prune_input_tokens.push(cache.resident_tokens());
            let clock = Instant::now();
            let outcome = self.pruner.prune(cache, queries)?;
            metrics.timing.prune_ns.push(clock.elapsed().as_nanos() as u64);
            self.oracle.events += 1;

            metrics.prune_events += 1;
            metrics.evicted_tokens += outcome.report.total() as u64;
            for (i, c) in cache.snapshot_counts().iter().enumerate() {
                if c.candidate_count > outcome.plan.head_budget(i / engine.heads, i % engine.heads) {
                    metrics.budget_violations += 1;
                }
            }
            if let Some(oracle_keep) = overlap_keep {
                let j: f64 =
                    oracle_keep.iter().zip(&outcome.keep).map(|(a, b)| jaccard(a, b)).sum::<f64>() / slots as f64;
                metrics.oracle_overlap.push(j);
            }
            self.last_plan = Some(outcome.plan);
        }

        for (i, c) in cache.snapshot_counts().iter().enumerate() {
            self.count_sums[i] += c.candidate_count as u64;
            self.count_max[i] = self.count_max[i].max(c.candidate_count);
        }
        metrics.resident_after_frame.push(cache.resident_tokens());
        metrics.frames += 1;
        self.busy += started.elapsed();
        Ok(())
    }

    fn finish(mut self) -> RunMetrics {
        let engine = &self.config.engine;
        let frames = self.metrics.frames.max(1) as f64;
        let plan = &self.last_plan;
        self.metrics.slots = self
            .cache
            .snapshot_counts()
            .iter()
            .enumerate()
            .map(|(i, c)| SlotSummary {
                layer: i / engine.heads,
                head: i % engine.heads,
                anchor_count: c.anchor_count,
                final_candidates: c.candidate_count,
                mean_candidates: self.count_sums[i] as f64 / frames,
                max_candidates: self.count_max[i],
                budget: plan.as_ref().map(|p| p.head_budget(i / engine.heads, i % engine.heads)),
            })
            .collect();
        self.metrics.final_plan = self.last_plan;
        self.metrics.finish(self.busy, engine.tokens_per_frame * engine.slots());
        self.metrics
    }
}

fn run_frames_arms<I>(configs: &[RunConfig], frames: I) -> Result<Vec<RunMetrics>>
where
    I: IntoIterator<Item = Result<(FrameKV, FrameQueries)>>,
{
    let first = configs.first().ok_or_else(|| Error::Config("no arms to run".into()))?;
    for c in configs {
        if (c.fidelity_every, c.probe, c.shadow_cap) != (first.fidelity_every, first.probe, first.shadow_cap) {
            return Err(Error::Config("arms disagree on fidelity settings".into()));
        }
    }
    let mut arms = configs.iter().map(Arm::new).collect::<Result<Vec<_>>>()?;
    let every = first.fidelity_every;
    let mut shadow = if every > 0 { Some(CacheState::new(first.engine.clone())?) } else { None };
    let mut probe: Option<FrameQueries> = None;
    let slots = first.engine.slots();

    for item in frames {
        let (kv, queries) = item?;
        let t = kv.frame_id;
        if first.probe == Probe::Anchor && probe.is_none() {
            probe = Some(anchor_probe(&kv, &queries)?);
        }

        if let Some(full) = &shadow {
            if t > 0 && t % every == 0 {
                let q = match (first.probe, &probe) {
                    (Probe::Anchor, Some(p)) => p,
                    _ => &queries,
                };
                let full_out = forward_frame(full, q, AttentionMode::Streaming)?;
                for arm in &mut arms {
                    let pruned_out = forward_frame(&arm.cache, q, AttentionMode::Streaming)?;
                    let error = fidelity_error(&pruned_out, &full_out)?;
                    arm.metrics.fidelity.push(FidelitySample { frame: t, error });
                }
            }
        }

        for arm in &mut arms {
            arm.step(&kv, &queries)?;
        }

        if let Some(full) = &mut shadow {
            full.append_frame(&kv)?;
            if full.resident_tokens() / slots > first.shadow_cap {
                shadow = None;
                let notice = format!(
                    "shadow cache exceeded {} tokens per slot at frame {t}; fidelity sampling stopped",
                    first.shadow_cap
                );
                for arm in &mut arms {
                    arm.metrics.notices.push(notice.clone());
                }
            }
        }
    }

    Ok(arms.into_iter().map(Arm::finish).collect())
}
