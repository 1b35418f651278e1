//! Multi-arm comparison over one shared stream.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::baselines::PolicyKind;
use crate::error::{Error, Result};

use super::report::{csv_err, percentile, RunMetrics, SCHEMA_VERSION};
use super::{run_arms, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub name: String,
    pub policy: PolicyKind,
    pub mean_fidelity_error: Option<f64>,
    pub max_fidelity_error: Option<f64>,
    pub mean_oracle_overlap: Option<f64>,
    pub peak_resident_tokens: usize,
    pub evicted_tokens: u64,
    pub budget_violations: u64,
    pub prune_p50_ns: u64,
    pub prune_p95_ns: u64,
    pub prune_max_ns: u64,
}

impl ArmSummary {
    fn new(name: &str, m: &RunMetrics) -> Self {
        Self {
            name: name.to_string(),
            policy: m.policy,
            mean_fidelity_error: m.mean_fidelity_error,
            max_fidelity_error: m.fidelity.iter().map(|s| s.error).reduce(f64::max),
            mean_oracle_overlap: m.mean_oracle_overlap,
            peak_resident_tokens: m.peak_resident_tokens,
            evicted_tokens: m.evicted_tokens,
            budget_violations: m.budget_violations,
            prune_p50_ns: percentile(&m.timing.prune_ns, 0.50),
            prune_p95_ns: percentile(&m.timing.prune_ns, 0.95),
            prune_max_ns: m.timing.prune_max_ns,
        }
    }
}

/// Fidelity of every arm at one sampled frame; `None` where an arm did not
/// sample that frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedFrame {
    pub frame: u32,
    pub fidelity_error: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub arms: Vec<ArmSummary>,
    pub paired: Vec<PairedFrame>,
    /// Metric name -> arm names, best first. Arms without a value are left
    /// out.
    pub ordering: BTreeMap<String, Vec<String>>,
    #[serde(skip)]
    pub runs: Vec<RunMetrics>,
}

fn same_stream(a: &RunConfig, b: &RunConfig) -> bool {
    let (ea, eb) = (&a.engine, &b.engine);
    a.source == b.source
        && ea.layers == eb.layers
        && ea.heads == eb.heads
        && ea.d_k == eb.d_k
        && ea.d_v == eb.d_v
        && ea.tokens_per_frame == eb.tokens_per_frame
}

/// Arm names ranked by `key`, smaller first unless `descending`.
fn rank(arms: &[ArmSummary], key: impl Fn(&ArmSummary) -> Option<f64>, descending: bool) -> Vec<String> {
    let mut v: Vec<(f64, &str)> = arms.iter().filter_map(|a| key(a).map(|k| (k, a.name.as_str()))).collect();
    v.sort_by(|x, y| {
        let o = x.0.total_cmp(&y.0);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    v.into_iter().map(|(_, n)| n.to_string()).collect()
}

/// Runs every arm over the same stream in lockstep.
pub fn compare(arms: &[(String, RunConfig)]) -> Result<Comparison> {
    let Some((_, first)) = arms.first() else {
        return Err(Error::Config("compare needs at least one arm".into()));
    };
    for (name, cfg) in arms {
        if !same_stream(first, cfg) {
            return Err(Error::SpecMismatch(format!("arm {name:?} uses a different stream or engine shape")));
        }
    }
    let mut names: Vec<&str> = arms.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("arm names must be unique".into()));
    }
    let has_oracle = arms.iter().any(|(_, c)| c.policy == PolicyKind::AttentionOracle);

    let configs: Vec<RunConfig> = arms
        .iter()
        .map(|(_, c)| RunConfig { track_oracle_overlap: c.track_oracle_overlap || has_oracle, ..c.clone() })
        .collect();
    let runs = run_arms(&configs)?;
    let summaries: Vec<ArmSummary> = arms.iter().zip(&runs).map(|((n, _), m)| ArmSummary::new(n, m)).collect();

    let mut frames: BTreeMap<u32, Vec<Option<f64>>> = BTreeMap::new();
    for (i, m) in runs.iter().enumerate() {
        for s in &m.fidelity {
            frames.entry(s.frame).or_insert_with(|| vec![None; runs.len()])[i] = Some(s.error);
        }
    }
    let paired = frames.into_iter().map(|(frame, fidelity_error)| PairedFrame { frame, fidelity_error }).collect();

    let mut ordering = BTreeMap::new();
    ordering.insert("mean_fidelity_error".into(), rank(&summaries, |a| a.mean_fidelity_error, false));
    ordering.insert("mean_oracle_overlap".into(), rank(&summaries, |a| a.mean_oracle_overlap, true));
    ordering.insert("prune_p50_ns".into(), rank(&summaries, |a| Some(a.prune_p50_ns as f64), false));
    ordering.insert("peak_resident_tokens".into(), rank(&summaries, |a| Some(a.peak_resident_tokens as f64), false));

    Ok(Comparison { schema_version: SCHEMA_VERSION, arms: summaries, paired, ordering, runs })
}

impl Comparison {
    pub fn arm(&self, name: &str) -> Option<(&ArmSummary, &RunMetrics)> {
        self.arms.iter().position(|a| a.name == name).map(|i| (&self.arms[i], &self.runs[i]))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self).map_err(std::io::Error::other)?)
    }

    /// Paired per-frame fidelity: a `frame` column then one column per arm.
    pub fn write_paired_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header = std::iter::once("frame".to_string()).chain(self.arms.iter().map(|a| a.name.clone()));
        w.write_record(header).map_err(csv_err)?;
        for row in &self.paired {
            let cells = std::iter::once(row.frame.to_string())
                .chain(row.fidelity_error.iter().map(|e| e.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(cells).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per arm with the aggregate columns.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for a in &self.arms {
            w.serialize(a).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}
