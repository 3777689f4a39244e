//! Goal-driven reward stack: task, regularization, penalty and shortcut terms,
//! combined as `α₁·task + α₂·reg + α₃·pen + α₄·shortcut`.
//!
//! The reference path enters only through the shortcut term's Δp.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha_task: f64,
    pub alpha_reg: f64,
    pub alpha_pen: f64,
    pub alpha_shortcut: f64,
    /// Goal-distance normalization, meters.
    pub sigma: f64,
    /// Episode horizon in policy steps.
    pub t_max: usize,
    /// Terminal reward window in policy steps.
    pub t_r: usize,
    pub delta_check: f64,
    pub beta_smooth: f64,
    pub beta_accel: f64,
    /// Momentum factor of the action filter.
    pub lambda: f64,
    pub eta_collision: f64,
    pub eta_incline: f64,
    /// Radians.
    pub theta_safe: f64,
    /// Shortcut threshold as a fraction of path length.
    pub epsilon_shortcut: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha_task: 5.0,
            alpha_reg: -0.05,
            alpha_pen: -1.0,
            alpha_shortcut: 2.0,
            sigma: 5.0,
            t_max: 300,
            t_r: 30,
            delta_check: 0.05,
            beta_smooth: 1.0,
            beta_accel: 0.1,
            lambda: 0.5,
            eta_collision: 1.0,
            eta_incline: 1.0,
            theta_safe: 0.5,
            epsilon_shortcut: 0.05,
            gamma: 0.99,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("reward.{m}")));
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(self.sigma > 0.0) {
            return fail(format!("sigma must be > 0, got {}", self.sigma));
        }
        if self.t_max == 0 {
            return fail("t_max must be > 0".into());
        }
        if self.t_r > self.t_max {
            return fail(format!("t_r ({}) must not exceed t_max ({})", self.t_r, self.t_max));
        }
        if !(0.0..1.0).contains(&self.epsilon_shortcut) {
            return fail(format!("epsilon_shortcut must be in [0, 1), got {}", self.epsilon_shortcut));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.delta_check) {
            return fail(format!("delta_check must be in [0, 1], got {}", self.delta_check));
        }
        Ok(())
    }
}

/// Per-step reward terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub task: f64,
    pub reg: f64,
    pub pen: f64,
    pub shortcut: f64,
    pub total: f64,
}

/// Indicator of the task reward at step `t` (1-based) given a uniform draw `u`.
pub fn task_indicator(t: usize, u: f64, cfg: &RewardConfig) -> bool {
    t + cfg.t_r > cfg.t_max || u < cfg.delta_check
}

/// `1(t > T_max − T_r ∨ u < δ_check) / (1 + ‖p_t / σ‖)`.
pub fn task_reward<R: Rng + ?Sized>(goal_rel: [f64; 3], t: usize, rng: &mut R, cfg: &RewardConfig) -> f64 {
    let u: f64 = rng.random();
    task_reward_with_draw(goal_rel, t, u, cfg)
}

pub fn task_reward_with_draw(goal_rel: [f64; 3], t: usize, u: f64, cfg: &RewardConfig) -> f64 {
    if !task_indicator(t, u, cfg) {
        return 0.0;
    }
    let n = (goal_rel[0] * goal_rel[0] + goal_rel[1] * goal_rel[1] + goal_rel[2] * goal_rel[2]).sqrt();
    1.0 / (1.0 + n / cfg.sigma)
}

/// Expected discounted task reward an agent would keep collecting by resting
/// on the goal from step `t` until the horizon. Granted when an episode is cut
/// short by success so that early arrival is never worth less than waiting.
pub fn goal_completion_bonus(t: usize, cfg: &RewardConfig) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for k in (t + 1)..=cfg.t_max {
        discount *= cfg.gamma;
        let p = if k + cfg.t_r > cfg.t_max { 1.0 } else { cfg.delta_check };
        total += discount * p;
    }
    total
}

/// Momentum filter state and the last two actions for the acceleration proxy.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActionFilter {
    pub filtered: [f64; 3],
    prev: [f64; 3],
    prev2: [f64; 3],
}

impl ActionFilter {
    /// Second finite difference of commanded actions, standing in for joint accelerations.
    pub fn accel_proxy(&self, action: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| action[k] - 2.0 * self.prev[k] + self.prev2[k])
    }

    /// Computes the regularization term for `action` and advances the filter.
    pub fn step(&mut self, action: [f64; 3], cfg: &RewardConfig) -> f64 {
        let accel = self.accel_proxy(action);
        let (value, filtered) = regularization(action, self.filtered, accel, cfg);
        self.filtered = filtered;
        self.prev2 = self.prev;
        self.prev = action;
        value
    }
}

/// `β₁‖a_t − a_t^m‖₁ + β₂‖accel‖₁` with `a_t^m = λ a_{t−1}^m + (1 − λ) a_t`.
/// Returns the value and the updated filtered action.
pub fn regularization(
    action: [f64; 3],
    prev_filtered: [f64; 3],
    accel: [f64; 3],
    cfg: &RewardConfig,
) -> (f64, [f64; 3]) {
    let filtered: [f64; 3] =
        std::array::from_fn(|k| cfg.lambda * prev_filtered[k] + (1.0 - cfg.lambda) * action[k]);
    let smooth: f64 = (0..3).map(|k| (action[k] - filtered[k]).abs()).sum();
    let acc: f64 = accel.iter().map(|v| v.abs()).sum();
    (cfg.beta_smooth * smooth + cfg.beta_accel * acc, filtered)
}

/// `η₁·1(collision) + η₂·max(0, |θ| − θ_safe)`; θ is identically 0 in the plane.
pub fn penalty(collision: bool, theta: f64, cfg: &RewardConfig) -> f64 {
    let c = if collision { cfg.eta_collision } else { 0.0 };
    c + cfg.eta_incline * (theta.abs() - cfg.theta_safe).max(0.0)
}

/// Δp if it exceeds the threshold, else 0.
pub fn shortcut_reward(dp: f64, cfg: &RewardConfig) -> f64 {
    if dp > cfg.epsilon_shortcut {
        dp
    } else {
        0.0
    }
}

pub fn total_reward(task: f64, reg: f64, pen: f64, shortcut: f64, cfg: &RewardConfig) -> RewardBreakdown {
    RewardBreakdown {
        task,
        reg,
        pen,
        shortcut,
        total: cfg.alpha_task * task + cfg.alpha_reg * reg + cfg.alpha_pen * pen + cfg.alpha_shortcut * shortcut,
    }
}
