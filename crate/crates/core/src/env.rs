//! Episodic navigation environment shared by training and evaluation.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::pathrep::{encode_path, norm3, relative_goal, to_egocentric, EncodedPath, PathRepConfig, ProgressTracker};
use crate::policy::{Observation, PRIVILEGED_FEATURES};
use crate::reward::{
    goal_completion_bonus, penalty, shortcut_reward, task_reward, total_reward, ActionFilter, RewardBreakdown,
    RewardConfig,
};
use crate::roadmap::ReferencePath;
use crate::world::{raycast_scan, step_agent, AgentConfig, AgentState, OccupancyWorld, SensorConfig, Twist};

/// Simulation settings that do not change between episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub agent: AgentConfig,
    pub sensor: SensorConfig,
    pub pathrep: PathRepConfig,
    pub reward: RewardConfig,
    pub n_waypoints: usize,
    /// Std of additive noise on normalized ranges.
    pub scan_noise: f64,
    /// Std of additive noise on normalized velocities.
    pub proprio_noise: f64,
    /// Replace every scan with zeros.
    pub zero_scan: bool,
}

/// Everything that defines one episode.
#[derive(Debug, Clone)]
pub struct EpisodeSpec {
    pub world: Arc<OccupancyWorld>,
    pub start: AgentState,
    pub goal: Vec2,
    /// Observed reference path; `None` yields an all-zero encoding and no shortcut reward.
    pub path: Option<ReferencePath>,
    /// Planner-optimal path used only for privileged critic features.
    pub optimal: Option<ReferencePath>,
    pub t_max: usize,
    pub goal_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    pub done: bool,
    pub success: bool,
    pub collision: bool,
    pub progress_delta: f64,
}

#[derive(Debug, Clone)]
pub struct NavEnv {
    spec: EpisodeSpec,
    state: AgentState,
    t: usize,
    tracker: Option<ProgressTracker>,
    optimal_tracker: Option<ProgressTracker>,
    filter: ActionFilter,
    done: bool,
    success: bool,
    traveled: f64,
    collisions: usize,
    trajectory: Vec<Vec2>,
}

impl NavEnv {
    pub fn new(spec: EpisodeSpec, sim: &SimConfig) -> Self {
        let window = sim.pathrep.progress_window;
        let tracker = spec.path.as_ref().map(|p| ProgressTracker::new(p, window));
        let optimal_tracker = spec.optimal.as_ref().map(|p| ProgressTracker::new(p, window));
        let state = spec.start;
        Self {
            tracker,
            optimal_tracker,
            state,
            t: 0,
            filter: ActionFilter::default(),
            done: false,
            success: false,
            traveled: 0.0,
            collisions: 0,
            trajectory: vec![state.position],
            spec,
        }
    }

    /// Starts the clock at `t` instead of 0, clamped below the horizon.
    pub fn with_elapsed(mut self, t: usize) -> Self {
        self.t = t.min(self.spec.t_max.saturating_sub(1));
        self
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    /// Policy steps taken so far.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn succeeded(&self) -> bool {
        self.success
    }

    pub fn traveled(&self) -> f64 {
        self.traveled
    }

    pub fn collisions(&self) -> usize {
        self.collisions
    }

    pub fn trajectory(&self) -> &[Vec2] {
        &self.trajectory
    }

    pub fn goal_distance(&self) -> f64 {
        self.state.position.distance(self.spec.goal)
    }

    fn encoded_path(&self, sim: &SimConfig) -> EncodedPath {
        match &self.spec.path {
            Some(p) => encode_path(&to_egocentric(p, &self.state), sim.pathrep.epsilon),
            None => EncodedPath::zeros(sim.n_waypoints),
        }
    }

    /// Current observation. Noise draws come from `rng`.
    pub fn observe<R: Rng + ?Sized>(&self, sim: &SimConfig, rng: &mut R) -> Observation {
        let n = sim.sensor.n_rays;
        let scan = if sim.zero_scan {
            vec![0.0; n]
        } else {
            let s = raycast_scan(
                &self.spec.world,
                &self.state,
                n,
                sim.sensor.fov_deg.to_radians(),
                sim.sensor.max_range,
            );
            let mut v: Vec<f64> = s.ranges.iter().map(|r| r / sim.sensor.max_range).collect();
            if sim.scan_noise > 0.0 {
                let d = Normal::new(0.0, sim.scan_noise).expect("finite noise std");
                for x in &mut v {
                    *x = (*x + d.sample(rng)).clamp(0.0, 1.0);
                }
            }
            v
        };
        let lim = sim.agent.max_command;
        let mut proprio = [
            self.state.lin_vel.x / lim[0],
            self.state.lin_vel.y / lim[1],
            self.state.ang_vel / lim[2],
        ];
        if sim.proprio_noise > 0.0 {
            let d = Normal::new(0.0, sim.proprio_noise).expect("finite noise std");
            for x in &mut proprio {
                *x += d.sample(rng);
            }
        }
        Observation {
            scan,
            goal: relative_goal(&self.state, self.spec.goal),
            proprio,
            path: self.encoded_path(sim),
        }
    }

    /// Ground-truth features for the critic.
    pub fn privileged(&self, sim: &SimConfig) -> [f64; PRIVILEGED_FEATURES] {
        let progress = self.tracker.as_ref().map_or(0.0, |t| t.progress());
        let clearance = self.spec.world.point_clearance(self.state.position, 2.0);
        let remaining = match &self.optimal_tracker {
            Some(t) => t.total_length() * (1.0 - t.progress()),
            None => self.goal_distance(),
        };
        let g = relative_goal(&self.state, self.spec.goal);
        [
            progress,
            clearance / 2.0,
            remaining / 10.0,
            g[0] / 10.0,
            g[1] / 10.0,
            self.t as f64 / sim.reward.t_max.max(1) as f64,
        ]
    }

    /// Applies one policy action. Stepping a finished episode is a no-op
    /// reporting zero reward.
    pub fn step<R: Rng + ?Sized>(&mut self, action: [f64; 3], sim: &SimConfig, rng: &mut R) -> StepOutcome {
        if self.done {
            return StepOutcome {
                reward: RewardBreakdown::default(),
                done: true,
                success: self.success,
                collision: false,
                progress_delta: 0.0,
            };
        }
        let already_there = self.goal_distance() < self.spec.goal_radius;
        let cmd = sim.agent.clamp(Twist::new(action[0], action[1], action[2]));
        let (next, collision) = step_agent(&self.spec.world, &self.state, cmd, sim.agent.dt, &sim.agent);
        let finite = next.position.is_finite() && next.heading.is_finite();
        if finite {
            self.traveled += next.position.distance(self.state.position);
            self.state = next;
            self.trajectory.push(next.position);
        }
        self.t += 1;
        if collision {
            self.collisions += 1;
        }

        let goal_rel = relative_goal(&self.state, self.spec.goal);
        let success = already_there || norm3(goal_rel) < self.spec.goal_radius;
        let mut task = task_reward(goal_rel, self.t, rng, &sim.reward);
        if success {
            task += goal_completion_bonus(self.t, &sim.reward);
        }
        let reg = self.filter.step(cmd.as_array(), &sim.reward);
        let pen = penalty(collision, 0.0, &sim.reward);
        let dp = match &mut self.tracker {
            Some(t) => t.update(self.state.position),
            None => 0.0,
        };
        if let Some(t) = &mut self.optimal_tracker {
            t.update(self.state.position);
        }
        let shortcut = shortcut_reward(dp, &sim.reward);
        let reward = total_reward(task, reg, pen, shortcut, &sim.reward);

        let done = success || self.t >= self.spec.t_max || !finite;
        self.done = done;
        self.success = success;
        StepOutcome {
            reward,
            done,
            success,
            collision,
            progress_delta: dp,
        }
    }
}

/// Per-environment random streams derived from one master seed.
pub fn env_rng(master: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(stream + 1);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadmap::Provenance;
    use rand::SeedableRng;

    fn sim() -> SimConfig {
        SimConfig {
            agent: AgentConfig::default(),
            sensor: SensorConfig::default(),
            pathrep: PathRepConfig::default(),
            reward: RewardConfig::default(),
            n_waypoints: 15,
            scan_noise: 0.0,
            proprio_noise: 0.0,
            zero_scan: false,
        }
    }

    fn spec(start: Vec2, goal: Vec2, path: Option<ReferencePath>) -> EpisodeSpec {
        EpisodeSpec {
            world: Arc::new(OccupancyWorld::empty(12.0, 12.0, 0.1, 0).unwrap()),
            start: AgentState::at(start, 0.0),
            goal,
            path,
            optimal: None,
            t_max: 300,
            goal_radius: 0.5,
        }
    }

    #[test]
    fn start_at_goal_is_single_step_success() {
        let s = sim();
        let mut env = NavEnv::new(spec(Vec2::new(5.0, 5.0), Vec2::new(5.1, 5.0), None), &s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = env.step([0.0; 3], &s, &mut rng);
        assert!(out.done && out.success);
        assert_eq!(env.t(), 1);
    }

    #[test]
    fn horizon_ends_episode_without_success() {
        let s = sim();
        let mut sp = spec(Vec2::new(2.0, 2.0), Vec2::new(9.0, 9.0), None);
        sp.t_max = 3;
        let mut env = NavEnv::new(sp, &s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let outs: Vec<_> = (0..3).map(|_| env.step([0.0; 3], &s, &mut rng)).collect();
        assert!(!outs[1].done && outs[2].done && !outs[2].success);
    }

    #[test]
    fn reward_ignores_path_without_shortcut_weight() {
        let mut s = sim();
        s.reward.alpha_shortcut = 0.0;
        let p1 = ReferencePath::new(vec![Vec2::new(2.0, 2.0), Vec2::new(9.0, 2.0)], Provenance::Optimal);
        let p2 = ReferencePath::new(vec![Vec2::new(2.0, 2.0), Vec2::new(2.0, 9.0)], Provenance::Optimal);
        let run = |p: ReferencePath| {
            let mut env = NavEnv::new(spec(Vec2::new(2.0, 2.0), Vec2::new(9.0, 2.0), Some(p)), &s);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            (0..20)
                .map(|_| env.step([1.0, 0.0, 0.0], &s, &mut rng).reward.total.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(p1), run(p2));
    }

    #[test]
    fn zero_scan_and_missing_path_give_zero_features() {
        let mut s = sim();
        s.zero_scan = true;
        let env = NavEnv::new(spec(Vec2::new(2.0, 2.0), Vec2::new(9.0, 2.0), None), &s);
        let o = env.observe(&s, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(o.scan.iter().all(|&v| v == 0.0));
        assert!(o.path.is_zero());
    }
}
