//! SR/SPL evaluation on held-out terrains under several reference-path scenarios.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::env::{env_rng, EpisodeSpec, NavEnv, SimConfig};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::policy::{ObsBatch, Observation, PolicyNetwork, Tensor};
use crate::roadmap::{astar, build_prm, gbfs_biased, perturb_waypoints, postprocess, smooth_path, ReferencePath, RoadmapGraph};
use crate::trainer::sim_config;
use crate::world::{generate_maze, random_heading, AgentState, OccupancyWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_terrains: usize,
    pub episodes_per_terrain: usize,
    /// Held-out terrains use seeds `world_seed_base + k`; keep disjoint from training seeds.
    pub world_seed_base: u64,
    /// Policy steps; twice the training horizon.
    pub t_max: usize,
    pub goal_radius: f64,
    pub min_goal_distance: f64,
    /// Width of the optimal-length buckets in meters.
    pub bucket_width: f64,
    /// Buckets before the open-ended overflow bucket.
    pub n_buckets: usize,
    /// Accepted length ratio range of degraded paths before noise.
    pub degraded_ratio: [f64; 2],
    pub degraded_beta: f64,
    /// Waypoint displacement bound for degraded paths, meters.
    pub degraded_noise: f64,
    pub degraded_noise_prob: f64,
    pub max_rejections: usize,
    /// Instances per run on which the roadmap length oracle is compared to grid Dijkstra.
    pub oracle_checks: usize,
    /// Obstacle-free terrains instead of generated mazes.
    pub open_arena: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_terrains: 25,
            episodes_per_terrain: 20,
            world_seed_base: 1_000_000,
            t_max: 600,
            goal_radius: 0.5,
            min_goal_distance: 2.0,
            bucket_width: 2.5,
            n_buckets: 6,
            degraded_ratio: [1.25, 3.33],
            degraded_beta: 0.1,
            degraded_noise: 2.0,
            degraded_noise_prob: 0.2,
            max_rejections: 50,
            oracle_checks: 20,
            open_arena: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("eval.{m}")));
        if self.n_terrains == 0 || self.episodes_per_terrain == 0 {
            return fail("n_terrains and episodes_per_terrain must be > 0");
        }
        if self.t_max == 0 || !(self.goal_radius > 0.0) {
            return fail("t_max and goal_radius must be > 0");
        }
        if !(self.bucket_width > 0.0) || self.n_buckets == 0 {
            return fail("bucket_width and n_buckets must be > 0");
        }
        let [lo, hi] = self.degraded_ratio;
        if !(lo >= 1.0 && hi > lo) {
            return fail("degraded_ratio must satisfy 1 <= lo < hi");
        }
        if !(0.0..=1.0).contains(&self.degraded_beta) || !(0.0..=1.0).contains(&self.degraded_noise_prob) {
            return fail("degraded_beta and degraded_noise_prob must be in [0, 1]");
        }
        if !(self.degraded_noise >= 0.0) || self.max_rejections == 0 {
            return fail("degraded_noise must be >= 0 and max_rejections > 0");
        }
        Ok(())
    }

    pub fn bucket_edges(&self) -> Vec<f64> {
        (0..=self.n_buckets).map(|k| k as f64 * self.bucket_width).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Optimal,
    Degraded,
    ZeroPath,
    ZeroPerception,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Optimal,
        Scenario::Degraded,
        Scenario::ZeroPath,
        Scenario::ZeroPerception,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Scenario::Optimal => "optimal",
            Scenario::Degraded => "degraded",
            Scenario::ZeroPath => "zero-path",
            Scenario::ZeroPerception => "zero-perception",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL.into_iter().find(|v| v.tag() == s).ok_or_else(|| {
            let tags: Vec<_> = Scenario::ALL.iter().map(|v| v.tag()).collect();
            Error::Config(format!("unknown scenario `{s}`; valid: {}", tags.join(", ")))
        })
    }
}

/// What a path provider sees for one episode.
pub struct Instance<'a> {
    pub world: &'a OccupancyWorld,
    pub graph: &'a RoadmapGraph,
    pub start: Vec2,
    pub goal: Vec2,
    pub n_waypoints: usize,
}

/// Supplies the observed reference path of each evaluation episode.
pub trait PathProvider {
    fn scenario(&self) -> Scenario;

    /// `Ok(None)` means the episode runs without a path; `Err(reason)` skips it.
    fn provide(&mut self, inst: &Instance<'_>, rng: &mut ChaCha8Rng) -> std::result::Result<Option<ReferencePath>, String>;

    fn zero_scan(&self) -> bool {
        false
    }

    /// Pre-noise length ratios of accepted degraded paths.
    fn accepted_ratios(&self) -> &[f64] {
        &[]
    }
}

fn optimal_processed(inst: &Instance<'_>) -> std::result::Result<ReferencePath, String> {
    let raw = astar(inst.graph, inst.start, inst.goal).map_err(|e| format!("optimal path: {e}"))?;
    if !(raw.length() > 0.0) {
        return Err("start and goal coincide".into());
    }
    postprocess(inst.world, &raw, inst.graph.clearance(), inst.n_waypoints).map_err(|e| format!("optimal path: {e}"))
}

pub struct OptimalPaths {
    zero_scan: bool,
}

impl PathProvider for OptimalPaths {
    fn scenario(&self) -> Scenario {
        if self.zero_scan {
            Scenario::ZeroPerception
        } else {
            Scenario::Optimal
        }
    }

    fn provide(&mut self, inst: &Instance<'_>, _rng: &mut ChaCha8Rng) -> std::result::Result<Option<ReferencePath>, String> {
        optimal_processed(inst).map(Some)
    }

    fn zero_scan(&self) -> bool {
        self.zero_scan
    }
}

pub struct DegradedPaths {
    pub ratio: [f64; 2],
    pub beta: f64,
    pub noise: f64,
    pub noise_prob: f64,
    pub max_rejections: usize,
    accepted: Vec<f64>,
}

impl PathProvider for DegradedPaths {
    fn scenario(&self) -> Scenario {
        Scenario::Degraded
    }

    fn provide(&mut self, inst: &Instance<'_>, rng: &mut ChaCha8Rng) -> std::result::Result<Option<ReferencePath>, String> {
        let optimal = optimal_processed(inst)?.length();
        let clearance = inst.graph.clearance();
        for _ in 0..self.max_rejections {
            let Some(detour) = inst.world.sample_free_point(rng, clearance, 10_000) else {
                return Err("no free space for a detour point".into());
            };
            let Ok(raw) = gbfs_biased(inst.graph, inst.start, inst.goal, detour, self.beta) else { continue };
            let Ok(path) = postprocess(inst.world, &raw, clearance, inst.n_waypoints) else { continue };
            let r = path.length() / optimal;
            if r >= self.ratio[0] && r <= self.ratio[1] {
                self.accepted.push(r);
                return Ok(Some(perturb_waypoints(&path, self.noise, self.noise_prob, rng)));
            }
        }
        Err(format!(
            "no sub-optimal path with length ratio in [{}, {}] after {} attempts",
            self.ratio[0], self.ratio[1], self.max_rejections
        ))
    }

    fn accepted_ratios(&self) -> &[f64] {
        &self.accepted
    }
}

pub struct NoPaths;

impl PathProvider for NoPaths {
    fn scenario(&self) -> Scenario {
        Scenario::ZeroPath
    }

    fn provide(&mut self, _inst: &Instance<'_>, _rng: &mut ChaCha8Rng) -> std::result::Result<Option<ReferencePath>, String> {
        Ok(None)
    }
}

/// Wraps a provider and counts how many reference paths it hands out.
pub struct CountingProvider<P> {
    pub inner: P,
    pub paths_served: usize,
    pub calls: usize,
}

impl<P: PathProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            paths_served: 0,
            calls: 0,
        }
    }
}

impl<P: PathProvider> PathProvider for CountingProvider<P> {
    fn scenario(&self) -> Scenario {
        self.inner.scenario()
    }

    fn provide(&mut self, inst: &Instance<'_>, rng: &mut ChaCha8Rng) -> std::result::Result<Option<ReferencePath>, String> {
        self.calls += 1;
        let out = self.inner.provide(inst, rng);
        if matches!(out, Ok(Some(_))) {
            self.paths_served += 1;
        }
        out
    }

    fn zero_scan(&self) -> bool {
        self.inner.zero_scan()
    }

    fn accepted_ratios(&self) -> &[f64] {
        self.inner.accepted_ratios()
    }
}

pub fn build_scenario(scenario: Scenario, cfg: &EvalConfig) -> Box<dyn PathProvider> {
    match scenario {
        Scenario::Optimal => Box::new(OptimalPaths { zero_scan: false }),
        Scenario::ZeroPerception => Box::new(OptimalPaths { zero_scan: true }),
        Scenario::ZeroPath => Box::new(NoPaths),
        Scenario::Degraded => Box::new(DegradedPaths {
            ratio: cfg.degraded_ratio,
            beta: cfg.degraded_beta,
            noise: cfg.degraded_noise,
            noise_prob: cfg.degraded_noise_prob,
            max_rejections: cfg.max_rejections,
            accepted: Vec::new(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub terrain: usize,
    pub episode: usize,
    pub success: bool,
    /// Optimal length L_i.
    pub optimal_length: f64,
    /// Traveled length l_i.
    pub traveled: f64,
    pub steps: usize,
    pub collisions: usize,
    pub scenario: Scenario,
    pub trajectory: Vec<Vec2>,
}

impl EpisodeResult {
    pub fn synthetic(success: bool, optimal_length: f64, traveled: f64) -> Self {
        Self {
            terrain: 0,
            episode: 0,
            success,
            optimal_length,
            traveled,
            steps: 0,
            collisions: 0,
            scenario: Scenario::Optimal,
            trajectory: Vec::new(),
        }
    }

    pub fn spl_term(&self) -> f64 {
        if self.success {
            self.optimal_length / self.traveled.max(self.optimal_length)
        } else {
            0.0
        }
    }
}

pub fn sr(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// Success weighted by path length.
pub fn spl(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    Ok(results.iter().map(EpisodeResult::spl_term).sum::<f64>() / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub lo: f64,
    /// `None` for the open-ended last bucket.
    pub hi: Option<f64>,
    pub episodes: usize,
    pub sr: Option<f64>,
    pub spl: Option<f64>,
}

impl BucketStats {
    fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("{}-{}", self.lo, hi),
            None => format!("{}+", self.lo),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub terrain: usize,
    pub episode: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub roadmap_length: f64,
    pub grid_length: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub n_terrains: usize,
    pub episodes_per_terrain: usize,
    pub world_seed_base: u64,
    pub seed: u64,
    pub zero_path: bool,
    pub zero_perception: bool,
    pub open_arena: bool,
    pub skipped: Vec<SkipRecord>,
    pub degraded_ratios: Vec<f64>,
    pub oracle_checks: Vec<OracleCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub bucket_edges: Vec<f64>,
    pub buckets: Vec<BucketStats>,
    pub aggregate: BucketStats,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    /// Buckets by optimal length: `[e_k, e_{k+1})` for consecutive edges, then `[e_last, ∞)`.
    pub fn from_results(scenario: &str, edges: &[f64], results: &[EpisodeResult], metadata: EvalMetadata) -> Result<Self> {
        if edges.is_empty() || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("bucket edges must be nonempty and increasing".into()));
        }
        let stats = |lo: f64, hi: Option<f64>, members: Vec<EpisodeResult>| BucketStats {
            lo,
            hi,
            episodes: members.len(),
            sr: sr(&members).ok(),
            spl: spl(&members).ok(),
        };
        let mut buckets = Vec::with_capacity(edges.len());
        for (k, &lo) in edges.iter().enumerate() {
            let hi = edges.get(k + 1).copied();
            let members: Vec<EpisodeResult> = results
                .iter()
                .filter(|r| {
                    let first = k == 0 && r.optimal_length < lo;
                    (first || r.optimal_length >= lo) && hi.is_none_or(|h| r.optimal_length < h)
                })
                .cloned()
                .collect();
            buckets.push(stats(lo, hi, members));
        }
        if results.is_empty() {
            return Err(Error::EmptyResults);
        }
        Ok(Self {
            scenario: scenario.to_string(),
            bucket_edges: edges.to_vec(),
            buckets,
            aggregate: stats(edges[0], None, results.to_vec()),
            metadata,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket,lo,hi,episodes,sr,spl\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for b in &self.buckets {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.label(),
                b.lo,
                b.hi.map(|h| h.to_string()).unwrap_or_default(),
                b.episodes,
                opt(b.sr),
                opt(b.spl)
            ));
        }
        let a = &self.aggregate;
        s.push_str(&format!("all,,,{},{},{}\n", a.episodes, opt(a.sr), opt(a.spl)));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub bucket: String,
    pub episodes_candidate: usize,
    pub episodes_reference: usize,
    pub d_sr: Option<f64>,
    pub d_spl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDiff {
    pub candidate: String,
    pub reference: String,
    pub rows: Vec<DiffRow>,
    pub aggregate: DiffRow,
}

impl ReportDiff {
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:+.4}")).unwrap_or_else(|| "n/a".into());
        let mut s = format!("{} vs {}\n{:<12} {:>6} {:>6} {:>9} {:>9}\n", self.candidate, self.reference, "bucket", "n_a", "n_b", "dSR", "dSPL");
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            s.push_str(&format!(
                "{:<12} {:>6} {:>6} {:>9} {:>9}\n",
                r.bucket,
                r.episodes_candidate,
                r.episodes_reference,
                opt(r.d_sr),
                opt(r.d_spl)
            ));
        }
        s
    }
}

/// Per-bucket and aggregate `candidate − reference`.
pub fn compare_reports(candidate: &EvalReport, reference: &EvalReport) -> Result<ReportDiff> {
    if candidate.bucket_edges != reference.bucket_edges || candidate.buckets.len() != reference.buckets.len() {
        return Err(Error::Incompatible(format!(
            "bucket edges differ: {:?} vs {:?}",
            candidate.bucket_edges, reference.bucket_edges
        )));
    }
    let diff = |label: String, a: &BucketStats, b: &BucketStats| DiffRow {
        bucket: label,
        episodes_candidate: a.episodes,
        episodes_reference: b.episodes,
        d_sr: a.sr.zip(b.sr).map(|(x, y)| x - y),
        d_spl: a.spl.zip(b.spl).map(|(x, y)| x - y),
    };
    Ok(ReportDiff {
        candidate: candidate.scenario.clone(),
        reference: reference.scenario.clone(),
        rows: candidate
            .buckets
            .iter()
            .zip(&reference.buckets)
            .map(|(a, b)| diff(a.label(), a, b))
            .collect(),
        aggregate: diff("all".into(), &candidate.aggregate, &reference.aggregate),
    })
}

/// Shortest 8-connected path length between the cells of `a` and `b` on the
/// grid inflated by `clearance`, with straight legs from the points to the cell centers.
pub fn grid_shortest_path(world: &OccupancyWorld, clearance: f64, a: Vec2, b: Vec2) -> Option<f64> {
    let free = world.inflated_free(clearance);
    let (nx, ny) = world.grid_size();
    let (si, sj) = world.cell_of(a)?;
    let (gi, gj) = world.cell_of(b)?;
    let (s, g) = (sj * nx + si, gj * nx + gi);
    if !free[s] || !free[g] {
        return None;
    }
    let res = world.resolution();
    let mut dist = vec![f64::INFINITY; nx * ny];
    let mut heap = BinaryHeap::new();
    dist[s] = 0.0;
    heap.push((Reverse(OrdF64(0.0)), s));
    while let Some((Reverse(OrdF64(d)), u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        if u == g {
            break;
        }
        let (ui, uj) = ((u % nx) as i64, (u / nx) as i64);
        for (di, dj) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
            let (vi, vj) = (ui + di, uj + dj);
            if vi < 0 || vj < 0 || vi >= nx as i64 || vj >= ny as i64 {
                continue;
            }
            let v = vj as usize * nx + vi as usize;
            if !free[v] {
                continue;
            }
            // no corner cutting
            if di != 0 && dj != 0 && (!free[uj as usize * nx + vi as usize] || !free[vj as usize * nx + ui as usize]) {
                continue;
            }
            let w = if di != 0 && dj != 0 { res * std::f64::consts::SQRT_2 } else { res };
            if d + w < dist[v] {
                dist[v] = d + w;
                heap.push((Reverse(OrdF64(d + w)), v));
            }
        }
    }
    dist[g]
        .is_finite()
        .then(|| dist[g] + a.distance(world.cell_center(si, sj)) + b.distance(world.cell_center(gi, gj)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// One line of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub terrain: usize,
    pub episode: usize,
    pub world_seed: u64,
    pub scenario: Scenario,
    pub success: bool,
    pub start: Vec2,
    pub goal: Vec2,
    pub path: Option<Vec<Vec2>>,
    pub trajectory: Vec<Vec2>,
}

pub fn trajectories_jsonl(records: &[TrajectoryRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("trajectory serializes"));
        s.push('\n');
    }
    s
}

pub struct EvalOutput {
    pub report: EvalReport,
    pub results: Vec<EpisodeResult>,
    pub trajectories: Vec<TrajectoryRecord>,
}

/// Terrain `k` of the held-out set with its fixed start and random streams.
pub struct Terrain {
    pub seed: u64,
    pub world: Arc<OccupancyWorld>,
    /// Roadmap at evaluation density; used for optimal lengths and scenario paths.
    pub dense: RoadmapGraph,
    pub start: Vec2,
}

pub fn build_terrain(cfg: &ExperimentConfig, k: usize) -> Result<Terrain> {
    let e = &cfg.eval;
    let seed = e.world_seed_base + k as u64;
    let world = Arc::new(if e.open_arena {
        OccupancyWorld::empty(cfg.world.width, cfg.world.height, cfg.world.maze.resolution, seed)?
    } else {
        generate_maze(seed, cfg.world.width, cfg.world.height, &cfg.world.maze)?
    });
    let r = &cfg.roadmap;
    let mut rng = env_rng(seed, 0x5445_5252);
    let dense = build_prm(
        world.clone(),
        r.n_samples * r.eval_density_factor,
        r.connect_radius,
        r.clearance,
        &mut rng,
    )?;
    // The fixed start must see most of the free space, not a sealed pocket.
    let free = world.inflated_free(r.clearance);
    let total = free.iter().filter(|&&f| f).count();
    let mut start = None;
    for _ in 0..100 {
        let Some(p) = world.sample_free_point(&mut rng, r.clearance, 10_000) else { break };
        let region = world.flood_fill(&free, p).iter().filter(|&&f| f).count();
        if 2 * region >= total {
            start = Some(p);
            break;
        }
    }
    let start = start.ok_or_else(|| Error::Generation(format!("no well-connected start on terrain {seed}")))?;
    Ok(Terrain {
        seed,
        world,
        dense,
        start,
    })
}

struct Pending {
    episode: usize,
    env: NavEnv,
    optimal_length: f64,
    path: Option<Vec<Vec2>>,
}

/// Rolls out the deterministic policy on every held-out terrain.
pub fn run_eval(net: &PolicyNetwork, cfg: &ExperimentConfig, provider: &mut dyn PathProvider) -> Result<EvalOutput> {
    cfg.validate()?;
    if net.io != cfg.io_spec() {
        return Err(Error::Incompatible(format!(
            "checkpoint io {:?} does not match config {:?}",
            net.io,
            cfg.io_spec()
        )));
    }
    let e = &cfg.eval;
    let scenario = provider.scenario();
    let mut sim: SimConfig = sim_config(cfg);
    sim.scan_noise = 0.0;
    sim.proprio_noise = 0.0;
    sim.zero_scan = provider.zero_scan();
    let clearance = cfg.roadmap.clearance;
    let mut meta = EvalMetadata {
        n_terrains: e.n_terrains,
        episodes_per_terrain: e.episodes_per_terrain,
        world_seed_base: e.world_seed_base,
        seed: cfg.seed,
        zero_path: scenario == Scenario::ZeroPath,
        zero_perception: sim.zero_scan,
        open_arena: e.open_arena,
        ..Default::default()
    };
    let mut results = Vec::new();
    let mut trajectories = Vec::new();
    for k in 0..e.n_terrains {
        let terrain = build_terrain(cfg, k)?;
        let free = terrain.world.inflated_free(clearance);
        let reach = terrain.world.flood_fill(&free, terrain.start);
        let (nx, _) = terrain.world.grid_size();
        let mut pending = Vec::with_capacity(e.episodes_per_terrain);
        for ep in 0..e.episodes_per_terrain {
            let mut rng = env_rng(cfg.seed ^ terrain.seed.rotate_left(20), ep as u64);
            let skip = |reason: String| SkipRecord {
                terrain: k,
                episode: ep,
                reason,
            };
            let goal = (0..1000).find_map(|_| {
                let g = terrain.world.sample_free_point(&mut rng, clearance, 1000)?;
                let (i, j) = terrain.world.cell_of(g)?;
                (g.distance(terrain.start) >= e.min_goal_distance && reach[j * nx + i]).then_some(g)
            });
            let Some(goal) = goal else {
                meta.skipped.push(skip("no reachable goal".into()));
                continue;
            };
            let optimal = match astar(&terrain.dense, terrain.start, goal) {
                Ok(p) => smooth_path(&terrain.world, &p, clearance),
                Err(err) => {
                    meta.skipped.push(skip(format!("length oracle: {err}")));
                    continue;
                }
            };
            if meta.oracle_checks.len() < e.oracle_checks {
                if let Some(grid) = grid_shortest_path(&terrain.world, clearance, terrain.start, goal) {
                    meta.oracle_checks.push(OracleCheck {
                        roadmap_length: optimal.length(),
                        grid_length: grid,
                    });
                }
            }
            let inst = Instance {
                world: &terrain.world,
                graph: &terrain.dense,
                start: terrain.start,
                goal,
                n_waypoints: cfg.roadmap.sampler.n_waypoints,
            };
            let path = match provider.provide(&inst, &mut rng) {
                Ok(p) => p,
                Err(reason) => {
                    meta.skipped.push(skip(reason));
                    continue;
                }
            };
            let spec = EpisodeSpec {
                world: terrain.world.clone(),
                start: AgentState::at(terrain.start, random_heading(&mut rng)),
                goal,
                path: path.clone(),
                optimal: Some(optimal.clone()),
                t_max: e.t_max,
                goal_radius: e.goal_radius,
            };
            pending.push(Pending {
                episode: ep,
                env: NavEnv::new(spec, &sim),
                optimal_length: optimal.length(),
                path: path.map(|p| p.waypoints().to_vec()),
            });
        }
        rollout_deterministic(net, &sim, &mut pending)?;
        for p in pending {
            let env = &p.env;
            results.push(EpisodeResult {
                terrain: k,
                episode: p.episode,
                success: env.succeeded(),
                optimal_length: p.optimal_length,
                traveled: env.traveled(),
                steps: env.t(),
                collisions: env.collisions(),
                scenario,
                trajectory: env.trajectory().to_vec(),
            });
            trajectories.push(TrajectoryRecord {
                terrain: k,
                episode: p.episode,
                world_seed: terrain.seed,
                scenario,
                success: env.succeeded(),
                start: env.spec().start.position,
                goal: env.spec().goal,
                path: p.path,
                trajectory: env.trajectory().to_vec(),
            });
        }
    }
    meta.degraded_ratios = provider.accepted_ratios().to_vec();
    let report = EvalReport::from_results(scenario.tag(), &e.bucket_edges(), &results, meta)?;
    Ok(EvalOutput {
        report,
        results,
        trajectories,
    })
}

/// Steps all episodes in lockstep with the distribution mean until each is done.
fn rollout_deterministic(net: &PolicyNetwork, sim: &SimConfig, eps: &mut [Pending]) -> Result<()> {
    if eps.is_empty() {
        return Ok(());
    }
    // Noise is off, so this stream is never drawn from except by the sparse task reward.
    let mut rngs: Vec<ChaCha8Rng> = eps.iter().map(|p| env_rng(p.episode as u64, 0xe7a1)).collect();
    let mut hidden = Tensor::zeros(eps.len(), net.hidden_dim());
    while eps.iter().any(|p| !p.env.is_done()) {
        let obs: Vec<Observation> = eps
            .iter()
            .zip(rngs.iter_mut())
            .map(|(p, r)| p.env.observe(sim, r))
            .collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        let out = net.act(&ObsBatch::new(&refs, &[])?, &hidden)?;
        for (b, (p, r)) in eps.iter_mut().zip(rngs.iter_mut()).enumerate() {
            if !p.env.is_done() {
                let m = out.mean.row(b);
                p.env.step([m[0], m[1], m[2]], sim, r);
            }
        }
        hidden = out.hidden;
    }
    Ok(())
}
