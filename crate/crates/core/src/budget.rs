//! Layer-wise budget allocation.
//!
//! Layers with a higher mean diversity score receive a larger share of the
//! total token budget via a temperature softmax. Each layer's share is then
//! split evenly across its heads, and a per-head floor keeps any slot from
//! starving.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kvcache::{EngineConfig, LayerAllocation};
use crate::numerics::softmax;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetPlan {
    pub p_layer: Vec<f64>,
    pub b_layer: Vec<usize>,
    /// `b_head[layer][head]`
    pub b_head: Vec<Vec<usize>>,
    pub b_total: usize,
    pub tau: f64,
}

impl BudgetPlan {
    pub fn head_budget(&self, layer: usize, head: usize) -> usize {
        self.b_head[layer][head]
    }

    pub fn assigned(&self) -> usize {
        self.b_layer.iter().sum()
    }
}

/// Mean of the per-slot mean diversities within each layer. Empty slots
/// (`None`) are skipped; a layer with no scored slot gets -1.
pub fn layer_diversity(slot_means: &[Option<f64>], layers: usize, heads: usize) -> Result<Vec<f64>> {
    if slot_means.len() != layers * heads {
        return Err(Error::Shape(format!(
            "{} slot means for {layers}x{heads} slots",
            slot_means.len()
        )));
    }
    Ok(slot_means
        .chunks_exact(heads)
        .map(|layer| {
            let scored: Vec<f64> = layer.iter().flatten().copied().collect();
            if scored.is_empty() {
                -1.0
            } else {
                scored.iter().sum::<f64>() / scored.len() as f64
            }
        })
        .collect())
}

pub fn total_budget(config: &EngineConfig) -> usize {
    config.b_init_per_head * config.layers * config.heads
}

pub fn layer_proportions(s_layer: &[f64], config: &EngineConfig) -> Result<Vec<f64>> {
    if config.tau.is_nan() || config.tau <= 0.0 {
        return Err(Error::BadTemperature(config.tau));
    }
    if s_layer.len() != config.layers {
        return Err(Error::Shape(format!(
            "{} layer scores for {} layers",
            s_layer.len(),
            config.layers
        )));
    }
    match config.layer_allocation {
        LayerAllocation::Uniform => Ok(vec![1.0 / config.layers as f64; config.layers]),
        LayerAllocation::Adaptive => softmax(s_layer, config.tau),
    }
}

/// Integer layer budgets before the per-head floor: floor of each quota,
/// then the leftover tokens to the largest fractional parts (ties by larger
/// share, then lower layer index).
pub fn split_layers(p_layer: &[f64], b_total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = p_layer.iter().map(|p| p * b_total as f64).collect();
    let mut b: Vec<i64> = quotas.iter().map(|q| q.floor() as i64).collect();
    let mut order: Vec<usize> = (0..p_layer.len()).collect();
    let frac = |i: usize| quotas[i] - quotas[i].floor();
    order.sort_by(|&i, &j| {
        frac(j)
            .total_cmp(&frac(i))
            .then(p_layer[j].total_cmp(&p_layer[i]))
            .then(i.cmp(&j))
    });
    let mut leftover = b_total as i64 - b.iter().sum::<i64>();
    let mut k = 0;
    while leftover > 0 {
        b[order[k % order.len()]] += 1;
        leftover -= 1;
        k += 1;
    }
    // rounding can overshoot when the shares sum slightly above one
    let mut k = order.len();
    while leftover < 0 {
        k -= 1;
        let i = order[k % order.len()];
        if b[i] > 0 {
            b[i] -= 1;
            leftover += 1;
        }
        if k == 0 {
            k = order.len();
        }
    }
    b.into_iter().map(|x| x as usize).collect()
}

/// Even split across heads, remainder to the lowest head indices.
fn split_heads(b_layer: usize, heads: usize) -> Vec<usize> {
    let base = b_layer / heads;
    let rem = b_layer % heads;
    (0..heads).map(|h| base + usize::from(h < rem)).collect()
}

/// Raises every entry to `floor`, paying for it one token at a time from the
/// currently largest entry (lowest index first on ties).
fn apply_floor(b_head: &mut [usize], floor: usize) {
    let mut deficit: usize = b_head.iter().map(|&b| floor.saturating_sub(b)).sum();
    if deficit == 0 {
        return;
    }
    for b in b_head.iter_mut() {
        *b = (*b).max(floor);
    }
    let mut heap: BinaryHeap<(usize, Reverse<usize>)> =
        b_head.iter().enumerate().filter(|(_, &b)| b > floor).map(|(i, &b)| (b, Reverse(i))).collect();
    while deficit > 0 {
        let Some((b, Reverse(i))) = heap.pop() else { break };
        b_head[i] = b - 1;
        deficit -= 1;
        if b - 1 > floor {
            heap.push((b - 1, Reverse(i)));
        }
    }
}

pub fn allocate(s_layer: &[f64], config: &EngineConfig) -> Result<BudgetPlan> {
    let p_layer = layer_proportions(s_layer, config)?;
    let b_total = total_budget(config);
    let pre_floor = split_layers(&p_layer, b_total);

    let heads = config.heads;
    let mut flat: Vec<usize> = pre_floor.iter().flat_map(|&b| split_heads(b, heads)).collect();
    apply_floor(&mut flat, config.effective_min_head_budget());

    let b_head: Vec<Vec<usize>> = flat.chunks_exact(heads).map(<[usize]>::to_vec).collect();
    let b_layer = b_head.iter().map(|h| h.iter().sum()).collect();
    Ok(BudgetPlan { p_layer, b_layer, b_head, b_total, tau: config.tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(layers: usize, heads: usize, b_init: usize, min: usize) -> EngineConfig {
        EngineConfig {
            layers,
            heads,
            b_init_per_head: b_init,
            min_head_budget: min,
            tokens_per_frame: min,
            ..EngineConfig::default()
        }
    }

    #[test]
    fn layer_diversity_examples() {
        assert_eq!(layer_diversity(&[Some(-0.5), Some(-0.7)], 1, 2).unwrap(), vec![-0.6]);
        assert_eq!(layer_diversity(&[Some(-1.0); 6], 3, 2).unwrap(), vec![-1.0; 3]);
        assert_eq!(layer_diversity(&[None, Some(-0.4)], 1, 2).unwrap(), vec![-0.4]);
        assert_eq!(layer_diversity(&[None, None, Some(0.1), Some(0.3)], 2, 2).unwrap()[0], -1.0);
        assert!(layer_diversity(&[Some(0.0)], 1, 2).is_err());
    }

    #[test]
    fn equal_scores_reproduce_initial_budget() {
        let plan = allocate(&[-0.3; 4], &config(4, 2, 100, 16)).unwrap();
        assert_eq!(plan.b_total, 800);
        assert!(plan.b_head.iter().flatten().all(|&b| b == 100));
        let plan = allocate(&[0.2; 3], &config(3, 5, 77, 16)).unwrap();
        assert!(plan.b_head.iter().flatten().all(|&b| b == 77));
    }

    #[test]
    fn two_layer_softmax_split() {
        // p = (e/(e+1), 1/(e+1)) = (0.7311, 0.2689); quotas 146.2 / 53.8
        let plan = allocate(&[1.0, 0.0], &config(2, 1, 100, 1)).unwrap();
        let e = std::f64::consts::E;
        assert!((plan.p_layer[0] - e / (e + 1.0)).abs() < 1e-12);
        assert_eq!(plan.b_total, 200);
        assert_eq!(plan.b_layer, vec![146, 54]);
    }

    #[test]
    fn uniform_allocation_ignores_scores() {
        let mut cfg = config(4, 2, 64, 16);
        cfg.layer_allocation = LayerAllocation::Uniform;
        let plan = allocate(&[3.0, -1.0, 0.0, 0.5], &cfg).unwrap();
        assert!(plan.p_layer.iter().all(|&p| p == 0.25));
        assert!(plan.b_head.iter().flatten().all(|&b| b == 64));
    }

    #[test]
    fn rejects_bad_tau() {
        let mut cfg = config(2, 1, 10, 1);
        cfg.tau = 0.0;
        assert!(matches!(allocate(&[0.0, 0.0], &cfg), Err(Error::BadTemperature(_))));
    }

    #[test]
    fn floor_funded_from_largest() {
        let mut b = vec![0, 10, 4, 10];
        apply_floor(&mut b, 3);
        assert_eq!(b, vec![3, 8, 4, 9]);
        assert_eq!(b.iter().sum::<usize>(), 24);
    }

    #[test]
    fn cold_temperature_gives_argmax_everything_feasible() {
        let mut cfg = config(4, 2, 64, 16);
        cfg.tau = 1e-6;
        let plan = allocate(&[0.1, 0.3, -0.2, 0.0], &cfg).unwrap();
        let floors = 16 * 2 * 3;
        assert_eq!(plan.b_layer[1], plan.b_total - floors);
        for l in [0, 2, 3] {
            assert_eq!(plan.b_layer[l], 32);
        }
    }

    #[test]
    fn hot_temperature_is_near_uniform() {
        let mut cfg = config(5, 3, 100, 10);
        cfg.tau = 1e6;
        let plan = allocate(&[0.9, -0.9, 0.1, 0.0, -0.5], &cfg).unwrap();
        for &b in &plan.b_layer {
            assert!((b as i64 - 300).abs() <= 1);
        }
    }

    proptest! {
        #[test]
        fn prop_plan_invariants(
            s in prop::collection::vec(-1.0f64..1.0, 1..8),
            heads in 1usize..6,
            min in 1usize..20,
            extra in 0usize..200,
            tau in 0.01f64..5.0,
            shift in -5.0f64..5.0,
        ) {
            let mut cfg = config(s.len(), heads, min + extra, min);
            cfg.tau = tau;
            let plan = allocate(&s, &cfg).unwrap();
            prop_assert!((plan.p_layer.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(plan.assigned() <= plan.b_total);
            prop_assert_eq!(plan.assigned(), plan.b_total);
            for (l, heads) in plan.b_head.iter().enumerate() {
                prop_assert_eq!(heads.iter().sum::<usize>(), plan.b_layer[l]);
                prop_assert!(heads.iter().all(|&b| b >= min));
            }
            let shifted: Vec<f64> = s.iter().map(|x| x + shift).collect();
            let again = allocate(&shifted, &cfg).unwrap();
            prop_assert_eq!(&again.b_head, &plan.b_head);
            prop_assert_eq!(allocate(&s, &cfg).unwrap(), plan);
        }

        #[test]
        fn prop_raising_a_layer_never_lowers_its_budget(
            s in prop::collection::vec(-1.0f64..1.0, 2..8),
            which in 0usize..8,
            bump in 0.0f64..2.0,
            b_total in 1usize..5000,
            tau in 0.05f64..3.0,
        ) {
            let l = which % s.len();
            let cfg = EngineConfig { layers: s.len(), tau, ..EngineConfig::default() };
            let before = split_layers(&layer_proportions(&s, &cfg).unwrap(), b_total);
            let mut raised = s.clone();
            raised[l] += bump;
            let after = split_layers(&layer_proportions(&raised, &cfg).unwrap(), b_total);
            prop_assert!(after[l] >= before[l]);
            prop_assert_eq!(before.iter().sum::<usize>(), b_total);
        }
    }
}
