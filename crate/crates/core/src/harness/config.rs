//! TOML run configuration with dotted-key overrides.
//!
//! ```toml
//! policy = "diversity"      # diversity | attn-oracle | random | recency
//! seed = 0                  # random policy; also the stream seed unless stream.seed is set
//! fidelity_every = 10       # 0 disables fidelity sampling
//! probe = "current"         # current | anchor
//! shadow_cap = 1048576      # tokens per slot in the reference cache
//! track_oracle_overlap = false
//! trace = "run.rkv"         # optional; replaces [stream]
//!
//! [engine]                  # any EngineConfig field; missing dims come from the stream
//! b_init_per_head = 256
//!
//! [stream]                  # any StreamSpec field
//! n_frames = 2000
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::{Table, Value};

use crate::baselines::PolicyKind;
use crate::error::{Error, Result};
use crate::kvcache::EngineConfig;
use crate::synth::{StreamSpec, TraceReader};

use super::{Probe, RunConfig, StreamSource};

const DIMS: [&str; 5] = ["layers", "heads", "d_k", "d_v", "tokens_per_frame"];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopLevel {
    #[serde(default = "default_policy")]
    policy: PolicyKind,
    seed: Option<u64>,
    #[serde(default)]
    fidelity_every: u32,
    #[serde(default)]
    probe: Probe,
    #[serde(default = "default_shadow_cap")]
    shadow_cap: usize,
    #[serde(default)]
    track_oracle_overlap: bool,
    trace: Option<PathBuf>,
    #[serde(default)]
    engine: Table,
    #[serde(default)]
    stream: Table,
}

fn default_policy() -> PolicyKind {
    PolicyKind::Diversity
}

fn default_shadow_cap() -> usize {
    1 << 20
}

/// An unresolved configuration document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigDoc {
    table: Table,
}

/// Parses a flag value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self { table: toml::from_str(text).map_err(config_err)? })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets `a.b.c` to `raw`, creating intermediate tables.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        self.set_value(key, parse_value(raw))
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad key {key:?}")));
        }
        let (last, path) = parts.split_last().expect("split yields at least one part");
        let mut table = &mut self.table;
        for p in path {
            let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            table = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{p} is not a table")))?;
        }
        table.insert(last.to_string(), value);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v.trim())
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.table.get(key)
    }

    /// Stream spec from the `[stream]` table, with the top-level seed applied
    /// when the table has none.
    pub fn stream_spec(&self) -> Result<StreamSpec> {
        let mut stream = self.get("stream").and_then(Value::as_table).cloned().unwrap_or_default();
        if !stream.contains_key("seed") {
            if let Some(seed) = self.get("seed") {
                stream.insert("seed".into(), seed.clone());
            }
        }
        let spec: StreamSpec = Value::Table(stream).try_into().map_err(config_err)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Resolves the document. A trace source is opened to read its header.
    pub fn resolve(&self) -> Result<RunConfig> {
        let top: TopLevel = Value::Table(self.table.clone()).try_into().map_err(config_err)?;
        let (source, dims): (StreamSource, [usize; 5]) = match &top.trace {
            Some(path) => {
                if !top.stream.is_empty() {
                    return Err(Error::Config("give either trace or [stream], not both".into()));
                }
                let h = *TraceReader::open(path)?.header();
                let dims = [h.layers, h.heads, h.d_k, h.d_v, h.tokens_per_frame].map(|x| x as usize);
                (StreamSource::Trace(path.clone()), dims)
            }
            None => {
                let spec = self.stream_spec()?;
                let dims = [spec.layers, spec.heads, spec.d_k, spec.d_v, spec.tokens_per_frame];
                (StreamSource::Synthetic(spec), dims)
            }
        };
        let mut engine_table = top.engine;
        for (name, value) in DIMS.iter().zip(dims) {
            engine_table.entry(name.to_string()).or_insert(Value::Integer(value as i64));
        }
        let engine: EngineConfig = Value::Table(engine_table).try_into().map_err(config_err)?;
        engine.validate()?;
        let seed = match (&source, top.seed) {
            (_, Some(s)) => s,
            (StreamSource::Synthetic(spec), None) => spec.seed,
            (StreamSource::Trace(_), None) => 0,
        };
        Ok(RunConfig {
            engine,
            source,
            policy: top.policy,
            seed,
            fidelity_every: top.fidelity_every,
            probe: top.probe,
            shadow_cap: top.shadow_cap,
            track_oracle_overlap: top.track_oracle_overlap,
        })
    }
}
