//! Run metrics and their JSON / CSV renderings.
//!
//! Everything outside the `timing` block is a pure function of the run
//! configuration; two identical runs differ only there.

use std::io::Write;
use std::time::Duration;

use serde::Serialize;

use crate::baselines::PolicyKind;
use crate::budget::BudgetPlan;
use crate::error::Result;

use super::RunConfig;

/// Bumped whenever a JSON key or CSV column changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const FRAME_CSV_COLUMNS: [&str; 4] = ["frame", "resident_tokens", "fidelity_error", "prune_ns"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FidelitySample {
    pub frame: u32,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotSummary {
    pub layer: usize,
    pub head: usize,
    pub anchor_count: usize,
    pub final_candidates: usize,
    pub mean_candidates: f64,
    pub max_candidates: usize,
    pub budget: Option<usize>,
}

/// Wall-clock measurements, excluded from determinism checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub prune_ns: Vec<u64>,
    pub prune_p50_ns: u64,
    pub prune_p95_ns: u64,
    pub prune_max_ns: u64,
    pub wall_ns: u64,
    pub tokens_per_sec: f64,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(sample: &[u64], q: f64) -> u64 {
    if sample.is_empty() {
        return 0;
    }
    let mut s = sample.to_vec();
    s.sort_unstable();
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub policy: PolicyKind,
    pub b_init_per_head: usize,
    pub frames: u32,
    pub prune_events: u64,
    pub evicted_tokens: u64,
    pub budget_violations: u64,
    pub peak_resident_tokens: usize,
    pub fidelity: Vec<FidelitySample>,
    pub mean_fidelity_error: Option<f64>,
    pub oracle_overlap: Vec<f64>,
    pub mean_oracle_overlap: Option<f64>,
    pub slots: Vec<SlotSummary>,
    pub final_plan: Option<BudgetPlan>,
    pub resident_after_frame: Vec<usize>,
    /// Frame after which each prune event ran.
    pub prune_frames: Vec<u32>,
    /// Resident tokens at the start of each prune event.
    pub prune_input_tokens: Vec<usize>,
    pub notices: Vec<String>,
    pub timing: Timing,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> Option<f64> {
    let n = xs.len();
    (n > 0).then(|| xs.sum::<f64>() / n as f64)
}

impl RunMetrics {
    pub(crate) fn new(config: &RunConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            policy: config.policy,
            b_init_per_head: config.engine.b_init_per_head,
            frames: 0,
            prune_events: 0,
            evicted_tokens: 0,
            budget_violations: 0,
            peak_resident_tokens: 0,
            fidelity: Vec::new(),
            mean_fidelity_error: None,
            oracle_overlap: Vec::new(),
            mean_oracle_overlap: None,
            slots: Vec::new(),
            final_plan: None,
            resident_after_frame: Vec::new(),
            prune_frames: Vec::new(),
            prune_input_tokens: Vec::new(),
            notices: Vec::new(),
            timing: Timing::default(),
        }
    }

    pub(crate) fn finish(&mut self, wall: Duration, tokens_per_frame: usize) {
        self.mean_fidelity_error = mean(self.fidelity.iter().map(|s| s.error));
        self.mean_oracle_overlap = mean(self.oracle_overlap.iter().copied());
        let t = &mut self.timing;
        t.prune_p50_ns = percentile(&t.prune_ns, 0.50);
        t.prune_p95_ns = percentile(&t.prune_ns, 0.95);
        t.prune_max_ns = t.prune_ns.iter().copied().max().unwrap_or(0);
        t.wall_ns = wall.as_nanos() as u64;
        let secs = wall.as_secs_f64();
        t.tokens_per_sec = if secs > 0.0 { (self.frames as usize * tokens_per_frame) as f64 / secs } else { 0.0 };
    }

    /// Latencies of prune events that started with at least `min_tokens`
    /// resident tokens.
    pub fn prune_ns_at_or_above(&self, min_tokens: usize) -> Vec<u64> {
        self.timing
            .prune_ns
            .iter()
            .zip(&self.prune_input_tokens)
            .filter(|(_, &n)| n >= min_tokens)
            .map(|(&ns, _)| ns)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self).map_err(std::io::Error::other)?)
    }

    /// JSON with the `timing` block removed.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(std::io::Error::other)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        Ok(serde_json::to_string_pretty(&v).map_err(std::io::Error::other)?)
    }

    /// One row per frame; empty cells where nothing was measured.
    pub fn write_frame_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(FRAME_CSV_COLUMNS).map_err(csv_err)?;
        let mut fid = self.fidelity.iter().peekable();
        let mut prunes = self.prune_frames.iter().zip(&self.timing.prune_ns).peekable();
        for (frame, resident) in self.resident_after_frame.iter().enumerate() {
            let f = match fid.peek() {
                Some(s) if s.frame as usize == frame => fid.next().map(|s| s.error.to_string()),
                _ => None,
            };
            let prune = match prunes.peek() {
                Some((&pf, _)) if pf as usize == frame => prunes.next().map(|(_, ns)| ns.to_string()),
                _ => None,
            };
            w.write_record([
                frame.to_string(),
                resident.to_string(),
                f.unwrap_or_default(),
                prune.unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}
