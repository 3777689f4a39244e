//! Egocentric path representation and progress tracking.
//!
//! Each waypoint `p_i` (body frame) becomes a 4-vector
//! `[p_i / d_i, log(1 + d_i) / c]` with `d_i = ‖p_i‖` and
//! `c = max_i log(1 + d_i)`. Waypoints closer than `epsilon` to the robot get a
//! zero direction.

use serde::{Deserialize, Serialize};

use crate::geometry::{project_onto_segment, Vec2};
use crate::roadmap::ReferencePath;
use crate::world::AgentState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathRepConfig {
    /// Division guard, meters.
    pub epsilon: f64,
    /// Look-ahead window for progress projection, meters.
    pub progress_window: f64,
}

impl Default for PathRepConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            progress_window: 3.0,
        }
    }
}

/// World point expressed in the body frame of `state`, with a zero z component.
pub fn point_to_egocentric(p: Vec2, state: &AgentState) -> [f64; 3] {
    let local = (p - state.position).rotate(-state.heading);
    [local.x, local.y, 0.0]
}

pub fn point_from_egocentric(p: [f64; 3], state: &AgentState) -> Vec2 {
    Vec2::new(p[0], p[1]).rotate(state.heading) + state.position
}

pub fn to_egocentric(path: &ReferencePath, state: &AgentState) -> Vec<[f64; 3]> {
    path.waypoints()
        .iter()
        .map(|&p| point_to_egocentric(p, state))
        .collect()
}

pub fn relative_goal(state: &AgentState, goal: Vec2) -> [f64; 3] {
    point_to_egocentric(goal, state)
}

pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// N×4 waypoint features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedPath {
    pub rows: Vec<[f64; 4]>,
}

impl EncodedPath {
    pub fn zeros(n: usize) -> Self {
        Self {
            rows: vec![[0.0; 4]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flat_map(|r| r.iter().copied())
    }

    pub fn is_zero(&self) -> bool {
        self.flat().all(|v| v == 0.0)
    }
}

pub fn encode_path(relative: &[[f64; 3]], epsilon: f64) -> EncodedPath {
    let dists: Vec<f64> = relative.iter().map(|&p| norm3(p)).collect();
    let c = dists.iter().map(|d| d.ln_1p()).fold(0.0_f64, f64::max);
    let rows = relative
        .iter()
        .zip(&dists)
        .map(|(p, &d)| {
            let mut row = [0.0; 4];
            if d >= epsilon && d > 0.0 {
                row[0] = p[0] / d;
                row[1] = p[1] / d;
                row[2] = p[2] / d;
            }
            if c > 0.0 {
                row[3] = d.ln_1p() / c;
            }
            row
        })
        .collect();
    EncodedPath { rows }
}

/// Monotone arclength progress along a reference path.
#[derive(Debug, Clone)]
pub struct ProgressTracker {
    waypoints: Vec<Vec2>,
    cumulative: Vec<f64>,
    total: f64,
    progress: f64,
    window: f64,
}

impl ProgressTracker {
    pub fn new(path: &ReferencePath, window: f64) -> Self {
        Self {
            waypoints: path.waypoints().to_vec(),
            cumulative: path.cumulative_arclength().to_vec(),
            total: path.length(),
            progress: 0.0,
            window,
        }
    }

    /// Fraction of total arclength in [0, 1].
    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn total_length(&self) -> f64 {
        self.total
    }

    /// Projects `position` onto the part of the path within `window` meters ahead
    /// of the current progress point and advances progress monotonically.
    /// Returns the increase Δp ≥ 0.
    pub fn update(&mut self, position: Vec2) -> f64 {
        if !(self.total > 0.0) {
            return 0.0;
        }
        let s0 = self.progress * self.total;
        let s1 = (s0 + self.window).min(self.total);
        let mut best: Option<(f64, f64)> = None;
        for k in 0..self.waypoints.len().saturating_sub(1) {
            let (c0, c1) = (self.cumulative[k], self.cumulative[k + 1]);
            let seg_len = c1 - c0;
            if c1 < s0 || c0 > s1 || seg_len <= 0.0 {
                continue;
            }
            let lo = (s0.max(c0) - c0) / seg_len;
            let hi = (s1.min(c1) - c0) / seg_len;
            let (a, b) = (self.waypoints[k], self.waypoints[k + 1]);
            let pa = a.lerp(b, lo);
            let pb = a.lerp(b, hi);
            let t = project_onto_segment(position, pa, pb);
            let q = pa.lerp(pb, t);
            let s = c0 + seg_len * (lo + (hi - lo) * t);
            let d = position.distance(q);
            let better = match best {
                None => true,
                Some((bd, bs)) => d < bd || (d == bd && s < bs),
            };
            if better {
                best = Some((d, s));
            }
        }
        let Some((_, s)) = best else { return 0.0 };
        let next = (s / self.total).clamp(0.0, 1.0).max(self.progress);
        let dp = next - self.progress;
        self.progress = next;
        dp
    }
}
