//! Planned runs for the architecture and training-process sweeps.

use serde::{Deserialize, Serialize};

use crate::policy::PathConditioning;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedRun {
    pub tag: String,
    /// Config overrides applied on top of the base experiment.
    pub overrides: Vec<String>,
}

/// The four path-encoder variants; raw concatenation first as the reference.
pub fn arch_sweep() -> Vec<PlannedRun> {
    [
        PathConditioning::RawConcat,
        PathConditioning::SelfAttn,
        PathConditioning::CrossAttnFixedQuery,
        PathConditioning::CrossAttnLearnedQuery,
    ]
    .into_iter()
    .map(|c| PlannedRun {
        tag: c.tag().to_string(),
        overrides: vec![format!("policy.path_encoder=\"{}\"", c.tag())],
    })
    .collect()
}

/// Training-process rows, from the plain path follower to the full model.
/// Sub-optimal paths come from the biased planner mixture, noise from waypoint
/// perturbation, and the shortcut term from its reward weight.
pub fn training_sweep() -> Vec<PlannedRun> {
    let row = |tag: &str, suboptimal: bool, noise: bool, shortcut: bool| {
        let mut o = Vec::new();
        if !suboptimal {
            o.push("roadmap.sampler.p_astar=1.0".to_string());
        }
        if !noise {
            o.push("roadmap.sampler.noise_prob=0.0".to_string());
        }
        if !shortcut {
            o.push("reward.alpha_shortcut=0.0".to_string());
        }
        PlannedRun {
            tag: tag.to_string(),
            overrides: o,
        }
    };
    vec![
        row("path-follower", false, false, false),
        row("reward-and-noise-ablation", true, false, false),
        row("reward-ablation", true, true, false),
        row("noise-ablation", true, false, true),
        row("full-model", true, true, true),
    ]
}
