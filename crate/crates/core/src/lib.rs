//! Bounded-memory KV cache for streaming attention.
//!
//! Each frame appends keys and values to every (layer, head) slot. After a
//! frame the cache is pruned back to a fixed token budget: the first frame
//! is kept as an anchor, the rest are ranked by key diversity, and the
//! global budget is shared across layers by a softmax over their mean
//! diversity. The [`harness`] module drives synthetic or recorded streams
//! through the cache and measures attention fidelity against an unpruned
//! reference.

pub mod attention;
pub mod baselines;
pub mod budget;
pub mod error;
pub mod harness;
pub mod kvcache;
pub mod numerics;
pub mod retention;
pub mod synth;

pub use attention::{fidelity_error, forward_frame, AttentionMode, FrameOutputs, FrameQueries};
pub use baselines::PolicyKind;
pub use budget::{allocate, layer_diversity, BudgetPlan};
pub use error::{Error, Result};
pub use harness::{run, RunConfig, RunMetrics};
pub use kvcache::{CacheState, EngineConfig, FrameKV, LayerAllocation, SlotKV, TieBreak};
pub use numerics::Matrix;
pub use retention::{score_slot, select_topk, ScoredToken, SlotScores};
pub use synth::{StreamGenerator, StreamSpec};
