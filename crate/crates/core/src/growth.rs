//! Adaptive subdivision driven by the screen-space mean gradient.
//!
//! Statistics are only collected on leaves at the finest level currently in
//! the forest. Every `step_k` fitting iterations the leaves whose mean
//! per-view gradient norm exceeds `epsilon` are split, subject to the
//! coarse-to-fine depth cap.

use serde::{Deserialize, Serialize};

use crate::forest::{Forest, NodeId};
use crate::render::SplatStats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowthConfig {
    /// Iterations between growth events.
    pub step_k: u32,
    /// Threshold on the mean per-view `|dL/dmean2d|` in normalized device
    /// coordinates.
    pub epsilon: f64,
    pub max_level: u8,
    /// Iterations between depth-cap increments.
    pub cap_schedule: u32,
    pub initial_cap: u8,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        Self {
            step_k: 50,
            epsilon: 2e-4,
            max_level: 4,
            cap_schedule: 500,
            initial_cap: 1,
        }
    }
}

impl GrowthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.step_k == 0 {
            return Err("growth.step_k must be at least 1".into());
        }
        if self.cap_schedule == 0 {
            return Err("growth.cap_schedule must be at least 1".into());
        }
        if !(self.epsilon >= 0.0) {
            return Err("growth.epsilon must be nonnegative".into());
        }
        if self.initial_cap < 1 {
            return Err("growth.initial_cap must be at least 1".into());
        }
        if self.max_level < self.initial_cap {
            return Err("growth.max_level must be >= growth.initial_cap".into());
        }
        Ok(())
    }
}

/// Adds per-view statistics to the finest-level leaves. Each entry of `views`
/// holds the stats of the splats that were projected in that view.
pub fn accumulate<'a>(forest: &mut Forest, views: impl IntoIterator<Item = &'a [SplatStats]>) {
    let finest = forest.max_level_present();
    let eligible: Vec<bool> = forest
        .nodes()
        .iter()
        .map(|n| n.is_leaf() && n.level == finest)
        .collect();
    for stats in views {
        for s in stats {
            if !eligible.get(s.node_id as usize).copied().unwrap_or(false) {
                continue;
            }
            let node = forest.node_mut(s.node_id).expect("eligible node exists");
            node.grad_accum += s.grad2d;
            node.grad_samples += 1;
        }
    }
}

/// Finest-level leaves that qualify for a split under `config`.
pub fn growth_candidates(forest: &Forest, config: &GrowthConfig) -> Vec<NodeId> {
    let cap = forest.depth_cap().min(config.max_level);
    forest
        .leaves_at_finest()
        .into_iter()
        .filter(|&id| {
            let n = &forest.nodes()[id as usize];
            n.grad_samples > 0 && n.grad_accum / n.grad_samples as f64 > config.epsilon && n.level < cap
        })
        .collect()
}

/// Splits every qualifying leaf, then clears all accumulators. Returns the
/// split node ids in ascending order.
pub fn growth_step(forest: &mut Forest, config: &GrowthConfig) -> Vec<NodeId> {
    let selected = growth_candidates(forest, config);
    for &id in &selected {
        forest.subdivide(id).expect("candidate is a leaf below the depth cap");
    }
    forest.reset_growth_stats();
    selected
}

/// `min(max_level, initial_cap + iteration / cap_schedule)`.
pub fn cap_at(config: &GrowthConfig, iteration: u32) -> u8 {
    let steps = iteration / config.cap_schedule.max(1);
    let cap = config.initial_cap as u64 + steps as u64;
    cap.min(config.max_level as u64) as u8
}

/// Sets the forest's depth cap for `iteration` and returns it.
pub fn advance_cap(forest: &mut Forest, config: &GrowthConfig, iteration: u32) -> u8 {
    let cap = cap_at(config, iteration);
    forest.set_depth_cap(cap);
    forest.depth_cap()
}
