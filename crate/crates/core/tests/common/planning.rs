//! Maze/roadmap fixtures and independent oracles shared by the planning tests
//! and the acceptance suite.

use std::sync::Arc;

use pathnav::config::ExperimentConfig;
use pathnav::eval::{build_scenario, EvalConfig, Instance, Scenario};
use pathnav::roadmap::{astar, build_prm, gbfs_biased, Query, RoadmapGraph};
use pathnav::world::{generate_maze, OccupancyWorld};
use pathnav::{Error, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn maze(seed: u64) -> Arc<OccupancyWorld> {
    let cfg = ExperimentConfig::default();
    Arc::new(generate_maze(seed, cfg.world.width, cfg.world.height, &cfg.world.maze).unwrap())
}

pub fn prm(world: &Arc<OccupancyWorld>, seed: u64) -> RoadmapGraph {
    let r = ExperimentConfig::default().roadmap;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 5);
    build_prm(world.clone(), r.n_samples, r.connect_radius, r.clearance, &mut rng).unwrap()
}

pub fn clearance() -> f64 {
    ExperimentConfig::default().roadmap.clearance
}

/// Two free points at least `min_dist` apart. The extra cell of margin keeps
/// each point's own grid cell free on the inflated grid.
pub fn free_pair<R: Rng>(world: &OccupancyWorld, rng: &mut R, min_dist: f64) -> (Vec2, Vec2) {
    let margin = clearance() + world.resolution();
    loop {
        let a = world.sample_free_point(rng, margin, 10_000).unwrap();
        let b = world.sample_free_point(rng, margin, 10_000).unwrap();
        if a.distance(b) >= min_dist {
            return (a, b);
        }
    }
}

/// Array-scan Dijkstra over the augmented query graph; no heap, no heuristic.
pub fn dijkstra_cost(q: &Query<'_>) -> Option<f64> {
    let n = q.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    dist[q.start_id()] = 0.0;
    loop {
        let mut best = None;
        for k in 0..n {
            if !done[k] && dist[k].is_finite() && best.is_none_or(|b: usize| dist[k] < dist[b]) {
                best = Some(k);
            }
        }
        let u = best?;
        if u == q.goal_id() {
            return Some(dist[u]);
        }
        done[u] = true;
        for (v, c) in q.neighbors(u) {
            if dist[u] + c < dist[v] {
                dist[v] = dist[u] + c;
            }
        }
    }
}

pub struct OracleRun {
    pub instances: usize,
    pub max_abs_diff: f64,
    pub disagreements: usize,
}

/// A* against Dijkstra on `n` random (world, roadmap, start, goal) instances.
pub fn search_oracle(n: usize) -> OracleRun {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = OracleRun {
        instances: 0,
        max_abs_diff: 0.0,
        disagreements: 0,
    };
    let mut seed = 0;
    while out.instances < n {
        seed += 1;
        let world = maze(seed);
        let graph = prm(&world, seed);
        for _ in 0..5 {
            if out.instances == n {
                break;
            }
            let (s, g) = free_pair(&world, &mut rng, 1.0);
            let oracle = graph.query(s, g).ok().and_then(|q| dijkstra_cost(&q));
            let found = match astar(&graph, s, g) {
                Ok(p) => Some(p.length()),
                Err(Error::NoPath) => None,
                Err(e) => panic!("astar: {e}"),
            };
            match (found, oracle) {
                (Some(a), Some(d)) => out.max_abs_diff = out.max_abs_diff.max((a - d).abs()),
                (None, None) => {}
                _ => out.disagreements += 1,
            }
            out.instances += 1;
        }
    }
    out
}

pub struct BiasedRun {
    /// Median gbfs/astar cost ratio per β, in the order given.
    pub medians: Vec<f64>,
    /// Smallest ratio seen over all instances and β.
    pub min_ratio: f64,
    pub instances: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// `n` connected instances, each with one detour point shared across all β.
pub fn biased_ratios(n: usize, betas: &[f64]) -> BiasedRun {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); betas.len()];
    let mut min_ratio = f64::INFINITY;
    let mut count = 0;
    let mut seed = 500;
    while count < n {
        seed += 1;
        let world = maze(seed);
        let graph = prm(&world, seed);
        for _ in 0..10 {
            if count == n {
                break;
            }
            let (s, g) = free_pair(&world, &mut rng, 2.0);
            let Ok(opt) = astar(&graph, s, g) else { continue };
            let detour = world.sample_free_point(&mut rng, clearance(), 10_000).unwrap();
            let found: Vec<f64> = betas
                .iter()
                .map(|&b| gbfs_biased(&graph, s, g, detour, b).unwrap().length() / opt.length())
                .collect();
            for (k, r) in found.into_iter().enumerate() {
                min_ratio = min_ratio.min(r);
                ratios[k].push(r);
            }
            count += 1;
        }
    }
    BiasedRun {
        medians: ratios.into_iter().map(median).collect(),
        min_ratio,
        instances: count,
    }
}

/// Pre-noise length ratios of every path the degraded-scenario builder accepted,
/// plus the number of instances where it gave up.
pub fn degraded_ratios(n: usize) -> (Vec<f64>, usize) {
    let cfg = EvalConfig::default();
    let n_wp = ExperimentConfig::default().roadmap.sampler.n_waypoints;
    let mut provider = build_scenario(Scenario::Degraded, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut given_up = 0;
    let mut tried = 0;
    let mut seed = 900;
    while tried < n {
        seed += 1;
        let world = maze(seed);
        let graph = prm(&world, seed);
        for _ in 0..10 {
            if tried == n {
                break;
            }
            let (s, g) = free_pair(&world, &mut rng, 2.0);
            if astar(&graph, s, g).is_err() {
                continue;
            }
            let inst = Instance {
                world: &world,
                graph: &graph,
                start: s,
                goal: g,
                n_waypoints: n_wp,
            };
            if provider.provide(&inst, &mut rng).is_err() {
                given_up += 1;
            }
            tried += 1;
        }
    }
    (provider.accepted_ratios().to_vec(), given_up)
}

/// Breadth-first search over 4-connected free cells, written independently of
/// the world's own flood fill.
pub fn grid_connected(world: &OccupancyWorld, free: &[bool], a: Vec2, b: Vec2) -> bool {
    let (nx, ny) = world.grid_size();
    let (Some((ai, aj)), Some((bi, bj))) = (world.cell_of(a), world.cell_of(b)) else {
        return false;
    };
    let idx = |i: usize, j: usize| j * nx + i;
    if !free[idx(ai, aj)] || !free[idx(bi, bj)] {
        return false;
    }
    let mut seen = vec![false; nx * ny];
    let mut queue = std::collections::VecDeque::from([(ai, aj)]);
    seen[idx(ai, aj)] = true;
    while let Some((i, j)) = queue.pop_front() {
        if (i, j) == (bi, bj) {
            return true;
        }
        let cand = [
            (i.wrapping_sub(1), j),
            (i + 1, j),
            (i, j.wrapping_sub(1)),
            (i, j + 1),
        ];
        for (u, v) in cand {
            if u < nx && v < ny && free[idx(u, v)] && !seen[idx(u, v)] {
                seen[idx(u, v)] = true;
                queue.push_back((u, v));
            }
        }
    }
    false
}

pub struct ConnectivityRun {
    pub prm_fraction: f64,
    pub grid_fraction: f64,
    pub agreement: f64,
}

/// One start–goal pair on each of `n` worlds: does A* on the default PRM find a
/// path exactly when the inflated grid connects the two points?
pub fn prm_vs_grid(n: usize) -> ConnectivityRun {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut prm_ok, mut grid_ok, mut agree) = (0, 0, 0);
    for seed in 0..n as u64 {
        let world = maze(2000 + seed);
        let graph = prm(&world, seed);
        let free = world.inflated_free(clearance());
        let (s, g) = free_pair(&world, &mut rng, 1.0);
        let p = astar(&graph, s, g).is_ok();
        let c = grid_connected(&world, &free, s, g);
        prm_ok += p as usize;
        grid_ok += c as usize;
        agree += (p == c) as usize;
    }
    ConnectivityRun {
        prm_fraction: prm_ok as f64 / n as f64,
        grid_fraction: grid_ok as f64 / n as f64,
        agreement: agree as f64 / n as f64,
    }
}
