//! Reference-path generation on a probabilistic roadmap.
//!
//! Optimal paths come from A* with the Euclidean heuristic. Deliberately
//! sub-optimal paths come from greedy best-first search whose heuristic blends
//! the distance to the goal with the distance to a random detour point:
//! `h = β·d_goal + (1 − β)·d_detour`. Either kind is then shortcut by
//! line-of-sight smoothing, resampled to a fixed waypoint count and
//! optionally perturbed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::world::OccupancyWorld;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadmapConfig {
    pub n_samples: usize,
    pub connect_radius: f64,
    /// Clearance used for node sampling and edge validation (agent radius).
    pub clearance: f64,
    /// Node-count multiplier for the evaluation roadmap that measures optimal lengths.
    pub eval_density_factor: usize,
    pub sampler: PathSamplerConfig,
}

impl Default for RoadmapConfig {
    fn default() -> Self {
        Self {
            n_samples: 800,
            connect_radius: 2.5,
            clearance: 0.3,
            eval_density_factor: 2,
            sampler: PathSamplerConfig::default(),
        }
    }
}

/// Mixture over planners plus post-processing for training paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSamplerConfig {
    /// Probability of using A*; GBFS with the biased heuristic otherwise.
    pub p_astar: f64,
    pub beta: f64,
    pub noise_prob: f64,
    /// Meters.
    pub noise_magnitude: f64,
    pub n_waypoints: usize,
}

impl Default for PathSamplerConfig {
    fn default() -> Self {
        Self {
            p_astar: 0.5,
            beta: 0.1,
            noise_prob: 0.1,
            noise_magnitude: 1.0,
            n_waypoints: 15,
        }
    }
}

impl PathSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("roadmap.sampler.{name} must be in [0, 1], got {v}")))
            }
        };
        unit("p_astar", self.p_astar)?;
        unit("beta", self.beta)?;
        unit("noise_prob", self.noise_prob)?;
        if !(self.noise_magnitude >= 0.0) {
            return Err(Error::Config("roadmap.sampler.noise_magnitude must be >= 0".into()));
        }
        if self.n_waypoints < 2 {
            return Err(Error::Config("roadmap.sampler.n_waypoints must be >= 2".into()));
        }
        Ok(())
    }
}

/// Where a reference path came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Optimal,
    Biased { beta: f64, detour: Vec2 },
    Perturbed { source: Box<Provenance> },
}

impl Provenance {
    /// The planner that produced the path, looking through perturbation.
    pub fn planner(&self) -> &Provenance {
        match self {
            Provenance::Perturbed { source } => source.planner(),
            other => other,
        }
    }

    fn parse(s: &str) -> Option<Provenance> {
        let s = s.trim();
        if s == "optimal" {
            return Some(Provenance::Optimal);
        }
        if let Some(inner) = s.strip_prefix("perturbed(").and_then(|r| r.strip_suffix(')')) {
            return Some(Provenance::Perturbed {
                source: Box::new(Provenance::parse(inner)?),
            });
        }
        let rest = s.strip_prefix("biased ")?;
        let mut beta = None;
        let mut detour = None;
        for tok in rest.split_whitespace() {
            if let Some(v) = tok.strip_prefix("beta=") {
                beta = v.parse().ok();
            } else if let Some(v) = tok.strip_prefix("detour=") {
                let (x, y) = v.split_once(',')?;
                detour = Some(Vec2::new(x.parse().ok()?, y.parse().ok()?));
            }
        }
        Some(Provenance::Biased {
            beta: beta?,
            detour: detour?,
        })
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Optimal => write!(f, "optimal"),
            Provenance::Biased { beta, detour } => {
                write!(f, "biased beta={beta} detour={},{}", detour.x, detour.y)
            }
            Provenance::Perturbed { source } => write!(f, "perturbed({source})"),
        }
    }
}

/// Ordered waypoints in the world frame with cumulative arclength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePath {
    waypoints: Vec<Vec2>,
    cumulative: Vec<f64>,
    pub provenance: Provenance,
}

impl ReferencePath {
    pub fn new(waypoints: Vec<Vec2>, provenance: Provenance) -> Self {
        let mut cumulative = Vec::with_capacity(waypoints.len());
        let mut acc = 0.0;
        for (k, p) in waypoints.iter().enumerate() {
            if k > 0 {
                acc += waypoints[k - 1].distance(*p);
            }
            cumulative.push(acc);
        }
        Self {
            waypoints,
            cumulative,
            provenance,
        }
    }

    pub fn waypoints(&self) -> &[Vec2] {
        &self.waypoints
    }

    pub fn cumulative_arclength(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Line-oriented text: a `# provenance:` header, then one `x y` pair per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("# provenance: {}\n", self.provenance);
        for p in &self.waypoints {
            out.push_str(&format!("{} {}\n", p.x, p.y));
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut provenance = None;
        let mut points = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(p) = rest.trim().strip_prefix("provenance:") {
                    provenance = Some(
                        Provenance::parse(p)
                            .ok_or_else(|| Error::parse(origin, ln + 1, format!("bad provenance `{}`", p.trim())))?,
                    );
                }
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(x), Some(y), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::parse(origin, ln + 1, "expected `x y`"));
            };
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::parse(origin, ln + 1, format!("`{s}`: {e}")))
            };
            points.push(Vec2::new(parse(x)?, parse(y)?));
        }
        let provenance =
            provenance.ok_or_else(|| Error::parse(origin, 1, "missing `# provenance:` header"))?;
        if points.is_empty() {
            return Err(Error::parse(origin, 1, "path has no waypoints"));
        }
        Ok(ReferencePath::new(points, provenance))
    }
}

/// Roadmap over free space; nodes keep `clearance` from obstacles and every
/// edge passes the inflated line-of-sight test.
#[derive(Debug, Clone)]
pub struct RoadmapGraph {
    world: Arc<OccupancyWorld>,
    nodes: Vec<Vec2>,
    adjacency: Vec<Vec<(usize, f64)>>,
    connect_radius: f64,
    clearance: f64,
}

impl RoadmapGraph {
    pub fn nodes(&self) -> &[Vec2] {
        &self.nodes
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adjacency[node]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn world(&self) -> &Arc<OccupancyWorld> {
        &self.world
    }

    pub fn clearance(&self) -> f64 {
        self.clearance
    }

    pub fn connect_radius(&self) -> f64 {
        self.connect_radius
    }

    /// Attaches `start` and `goal` to the roadmap: each links to every visible
    /// node within the connection radius, or to the nearest visible node when
    /// none is in range. The pair is linked directly when visible and in range.
    pub fn query(&self, start: Vec2, goal: Vec2) -> Result<Query<'_>> {
        let start_links = self.link(start);
        let goal_links = self.link(goal);
        let n = self.nodes.len();
        let direct = (start.distance(goal) <= self.connect_radius
            && self.world.line_of_sight(start, goal, self.clearance))
        .then(|| start.distance(goal));
        if direct.is_none() && (start_links.is_empty() || goal_links.is_empty()) {
            return Err(Error::NoPath);
        }
        let mut goal_cost = vec![f64::INFINITY; n];
        for &(k, c) in &goal_links {
            goal_cost[k] = c;
        }
        let mut start_cost = vec![f64::INFINITY; n];
        for &(k, c) in &start_links {
            start_cost[k] = c;
        }
        Ok(Query {
            graph: self,
            start,
            goal,
            start_links,
            start_cost,
            goal_cost,
            goal_links_len: goal_links.len(),
            direct,
        })
    }

    fn link(&self, p: Vec2) -> Vec<(usize, f64)> {
        let mut within: Vec<(usize, f64)> = Vec::new();
        for (k, &q) in self.nodes.iter().enumerate() {
            let d = p.distance(q);
            if d <= self.connect_radius && self.world.line_of_sight(p, q, self.clearance) {
                within.push((k, d));
            }
        }
        if within.is_empty() {
            let mut order: Vec<(usize, f64)> =
                self.nodes.iter().enumerate().map(|(k, q)| (k, p.distance(*q))).collect();
            order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some(&hit) = order
                .iter()
                .find(|(k, _)| self.world.line_of_sight(p, self.nodes[*k], self.clearance))
            {
                within.push(hit);
            }
        }
        within
    }
}

/// A roadmap augmented with a start node (index `n`) and goal node (index `n + 1`).
pub struct Query<'g> {
    graph: &'g RoadmapGraph,
    pub start: Vec2,
    pub goal: Vec2,
    start_links: Vec<(usize, f64)>,
    start_cost: Vec<f64>,
    goal_cost: Vec<f64>,
    goal_links_len: usize,
    direct: Option<f64>,
}

impl Query<'_> {
    pub fn start_id(&self) -> usize {
        self.graph.nodes.len()
    }

    pub fn goal_id(&self) -> usize {
        self.graph.nodes.len() + 1
    }

    pub fn node_count(&self) -> usize {
        self.graph.nodes.len() + 2
    }

    pub fn point(&self, id: usize) -> Vec2 {
        let n = self.graph.nodes.len();
        match id {
            k if k < n => self.graph.nodes[k],
            k if k == n => self.start,
            _ => self.goal,
        }
    }

    /// Outgoing edges of `id` in the augmented graph.
    pub fn neighbors(&self, id: usize) -> Vec<(usize, f64)> {
        let n = self.graph.nodes.len();
        let (s, g) = (n, n + 1);
        let mut out = Vec::new();
        if id == s {
            out.extend(self.start_links.iter().copied());
            if let Some(d) = self.direct {
                out.push((g, d));
            }
        } else if id == g {
            for (k, &c) in self.goal_cost.iter().enumerate() {
                if c.is_finite() {
                    out.push((k, c));
                }
            }
            if let Some(d) = self.direct {
                out.push((s, d));
            }
        } else {
            out.extend(self.graph.adjacency[id].iter().copied());
            if self.start_cost[id].is_finite() {
                out.push((s, self.start_cost[id]));
            }
            if self.goal_cost[id].is_finite() {
                out.push((g, self.goal_cost[id]));
            }
        }
        out
    }

    pub fn has_goal_links(&self) -> bool {
        self.goal_links_len > 0 || self.direct.is_some()
    }

    fn reconstruct(&self, parent: &[usize], provenance: Provenance) -> ReferencePath {
        let mut ids = vec![self.goal_id()];
        let mut cur = self.goal_id();
        while cur != self.start_id() {
            cur = parent[cur];
            ids.push(cur);
        }
        ids.reverse();
        ReferencePath::new(ids.into_iter().map(|k| self.point(k)).collect(), provenance)
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    key: f64,
    node: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    // Min-heap on (key, node): lower key first, lower node index on ties.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .key
            .total_cmp(&self.key)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Builds a PRM with `n_samples` nodes drawn uniformly from free space.
pub fn build_prm<R: Rng + ?Sized>(
    world: Arc<OccupancyWorld>,
    n_samples: usize,
    connect_radius: f64,
    clearance: f64,
    rng: &mut R,
) -> Result<RoadmapGraph> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be > 0".into()));
    }
    if !(connect_radius > 0.0) {
        return Err(Error::Config("connect_radius must be > 0".into()));
    }
    let max_attempts = 200 * n_samples;
    let mut nodes = Vec::with_capacity(n_samples);
    let mut attempts = 0;
    while nodes.len() < n_samples {
        if attempts >= max_attempts {
            return Err(Error::Generation(format!(
                "placed only {} of {n_samples} roadmap nodes after {max_attempts} attempts",
                nodes.len()
            )));
        }
        attempts += 1;
        if let Some(p) = world.sample_free_point(rng, clearance, 1) {
            nodes.push(p);
        }
    }
    let mut adjacency = vec![Vec::new(); nodes.len()];
    for a in 0..nodes.len() {
        for b in (a + 1)..nodes.len() {
            let d = nodes[a].distance(nodes[b]);
            if d <= connect_radius && world.line_of_sight(nodes[a], nodes[b], clearance) {
                adjacency[a].push((b, d));
                adjacency[b].push((a, d));
            }
        }
    }
    Ok(RoadmapGraph {
        world,
        nodes,
        adjacency,
        connect_radius,
        clearance,
    })
}

/// Minimum-cost path with the Euclidean heuristic.
pub fn astar(graph: &RoadmapGraph, start: Vec2, goal: Vec2) -> Result<ReferencePath> {
    let q = graph.query(start, goal)?;
    let n = q.node_count();
    let goal_id = q.goal_id();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    g[q.start_id()] = 0.0;
    heap.push(Entry {
        key: start.distance(goal),
        node: q.start_id(),
    });
    while let Some(Entry { node, .. }) = heap.pop() {
        if closed[node] {
            continue;
        }
        if node == goal_id {
            return Ok(q.reconstruct(&parent, Provenance::Optimal));
        }
        closed[node] = true;
        for (next, w) in q.neighbors(node) {
            if closed[next] {
                continue;
            }
            let cand = g[node] + w;
            if cand < g[next] {
                g[next] = cand;
                parent[next] = node;
                heap.push(Entry {
                    key: cand + q.point(next).distance(goal),
                    node: next,
                });
            }
        }
    }
    Err(Error::NoPath)
}

/// Biased heuristic `β·d_goal + (1 − β)·d_detour`.
pub fn biased_heuristic(d_goal: f64, d_detour: f64, beta: f64) -> f64 {
    beta * d_goal + (1.0 - beta) * d_detour
}

/// Greedy best-first search ordered by the biased heuristic alone; returns the
/// first path that reaches the goal. Ties go to the lower node index.
pub fn gbfs_biased(
    graph: &RoadmapGraph,
    start: Vec2,
    goal: Vec2,
    detour: Vec2,
    beta: f64,
) -> Result<ReferencePath> {
    let q = graph.query(start, goal)?;
    let n = q.node_count();
    let goal_id = q.goal_id();
    let h = |p: Vec2| biased_heuristic(p.distance(goal), p.distance(detour), beta);
    let mut parent = vec![usize::MAX; n];
    let mut discovered = vec![false; n];
    let mut heap = BinaryHeap::new();
    discovered[q.start_id()] = true;
    heap.push(Entry {
        key: h(start),
        node: q.start_id(),
    });
    while let Some(Entry { node, .. }) = heap.pop() {
        if node == goal_id {
            return Ok(q.reconstruct(&parent, Provenance::Biased { beta, detour }));
        }
        for (next, _) in q.neighbors(node) {
            if !discovered[next] {
                discovered[next] = true;
                parent[next] = node;
                heap.push(Entry {
                    key: h(q.point(next)),
                    node: next,
                });
            }
        }
    }
    Err(Error::NoPath)
}

/// Greedy forward shortcutting: from each kept waypoint jump to the last later
/// waypoint that is still visible (falling back to the next one).
pub fn smooth_path(world: &OccupancyWorld, path: &ReferencePath, clearance: f64) -> ReferencePath {
    let pts = path.waypoints();
    if pts.len() <= 2 {
        return path.clone();
    }
    let mut out = vec![pts[0]];
    let mut i = 0;
    while i < pts.len() - 1 {
        let mut next = i + 1;
        for j in (i + 2..pts.len()).rev() {
            if world.line_of_sight(pts[i], pts[j], clearance) {
                next = j;
                break;
            }
        }
        out.push(pts[next]);
        i = next;
    }
    ReferencePath::new(out, path.provenance.clone())
}

/// `n` waypoints at uniform arclength spacing along the polyline.
pub fn resample_fixed(path: &ReferencePath, n: usize) -> Result<ReferencePath> {
    if n < 2 {
        return Err(Error::Config(format!("resample count must be >= 2, got {n}")));
    }
    if path.len() < 2 {
        return Err(Error::DegeneratePath("need at least two waypoints".into()));
    }
    let total = path.length();
    if !(total > 0.0) {
        return Err(Error::DegeneratePath("zero-length path".into()));
    }
    let pts = path.waypoints();
    let cum = path.cumulative_arclength();
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        if k == 0 {
            out.push(pts[0]);
            continue;
        }
        if k == n - 1 {
            out.push(*pts.last().unwrap());
            continue;
        }
        let s = total * k as f64 / (n - 1) as f64;
        while seg + 2 < pts.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let t = if seg_len > 0.0 { ((s - cum[seg]) / seg_len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(pts[seg].lerp(pts[seg + 1], t));
    }
    Ok(ReferencePath::new(out, path.provenance.clone()))
}

/// Each waypoint is displaced with probability `prob` by a vector drawn
/// uniformly from the disc of radius `magnitude`.
pub fn perturb_waypoints<R: Rng + ?Sized>(
    path: &ReferencePath,
    magnitude: f64,
    prob: f64,
    rng: &mut R,
) -> ReferencePath {
    let mut moved = false;
    let pts = path
        .waypoints()
        .iter()
        .map(|&p| {
            if prob > 0.0 && rng.random::<f64>() < prob {
                let r = magnitude * rng.random::<f64>().sqrt();
                let a = rng.random::<f64>() * std::f64::consts::TAU;
                moved = true;
                p + Vec2::new(r * a.cos(), r * a.sin())
            } else {
                p
            }
        })
        .collect();
    let provenance = if moved {
        Provenance::Perturbed {
            source: Box::new(path.provenance.clone()),
        }
    } else {
        path.provenance.clone()
    };
    ReferencePath::new(pts, provenance)
}

/// Smooth then resample to `n` waypoints.
pub fn postprocess(world: &OccupancyWorld, raw: &ReferencePath, clearance: f64, n: usize) -> Result<ReferencePath> {
    let smoothed = smooth_path(world, raw, clearance);
    resample_fixed(&smoothed, n)
}

/// Draws one training path: A* with probability `p_astar`, otherwise biased
/// GBFS toward a detour point sampled from free space; then smoothing,
/// resampling and waypoint noise.
pub fn sample_training_path<R: Rng + ?Sized>(
    world: &OccupancyWorld,
    graph: &RoadmapGraph,
    start: Vec2,
    goal: Vec2,
    cfg: &PathSamplerConfig,
    rng: &mut R,
) -> Result<ReferencePath> {
    let raw = if rng.random::<f64>() < cfg.p_astar {
        astar(graph, start, goal)?
    } else {
        let detour = world
            .sample_free_point(rng, graph.clearance(), 10_000)
            .ok_or_else(|| Error::Generation("no free space for a detour point".into()))?;
        gbfs_biased(graph, start, goal, detour, cfg.beta)?
    };
    let fixed = if raw.length() > 0.0 {
        postprocess(world, &raw, graph.clearance(), cfg.n_waypoints)?
    } else {
        ReferencePath::new(vec![start; cfg.n_waypoints], raw.provenance.clone())
    };
    Ok(perturb_waypoints(&fixed, cfg.noise_magnitude, cfg.noise_prob, rng))
}

pub fn save_path(path: &ReferencePath, file: &Path) -> Result<()> {
    crate::io::write_atomic(file, path.to_text().as_bytes())
}

pub fn load_path(file: &Path) -> Result<ReferencePath> {
    let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
    ReferencePath::from_text(&text, file)
}
