mod common;

use common::planning::*;
use pathnav::config::ExperimentConfig;
use pathnav::roadmap::{astar, sample_training_path, smooth_path, Provenance};
use pathnav::Vec2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn astar_matches_dijkstra() {
    let run = search_oracle(100);
    assert_eq!(run.disagreements, 0);
    assert!(run.max_abs_diff <= 1e-9, "max diff {}", run.max_abs_diff);
}

#[test]
fn biased_paths_are_never_shorter_and_sub_optimality_falls_with_beta() {
    // Pure greedy search (beta = 1) is itself sub-optimal in mazes, so the
    // full sweep is left to the acceptance suite; here only the detour-driven range.
    let run = biased_ratios(300, &[0.0, 0.1, 0.5]);
    assert!(run.min_ratio >= 1.0 - 1e-9, "gbfs beat astar: {}", run.min_ratio);
    assert!(run.medians[1] > 1.05, "{:?}", run.medians);
    for w in run.medians.windows(2) {
        assert!(w[0] >= w[1], "medians not monotone: {:?}", run.medians);
    }
}

#[test]
fn degraded_builder_only_accepts_ratios_in_range() {
    let (ratios, given_up) = degraded_ratios(60);
    assert!(ratios.len() + given_up == 60);
    assert!(ratios.len() >= 20, "only {} accepted", ratios.len());
    for r in ratios {
        assert!((1.25..=3.33).contains(&r), "{r}");
    }
}

#[test]
fn prm_connectivity_tracks_the_grid() {
    let run = prm_vs_grid(100);
    assert!(
        (run.prm_fraction - run.grid_fraction).abs() <= 0.05,
        "prm {} grid {}",
        run.prm_fraction,
        run.grid_fraction
    );
    assert!(run.agreement >= 0.95, "agreement {}", run.agreement);
}

#[test]
fn maze_goals_are_reachable_from_spawn() {
    let p = ExperimentConfig::default().world.maze;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = 0;
    for seed in 1..=100 {
        let w = maze(seed);
        let free = w.inflated_free(p.clearance);
        let spawn = Vec2::new(p.spawn[0] * w.width(), p.spawn[1] * w.height());
        let goal = w.sample_free_point(&mut rng, p.clearance, 10_000).unwrap();
        ok += grid_connected(&w, &free, spawn, goal) as usize;
    }
    assert!(ok >= 95, "{ok} of 100 connected");
}

#[test]
fn smoothing_never_lengthens() {
    let sampler = ExperimentConfig::default().roadmap.sampler;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    let mut seed = 3000;
    while checked < 1000 {
        seed += 1;
        let world = maze(seed);
        let graph = prm(&world, seed);
        for _ in 0..20 {
            let (s, g) = free_pair(&world, &mut rng, 1.0);
            let Ok(raw) = astar(&graph, s, g) else { continue };
            let biased = {
                let d = world.sample_free_point(&mut rng, clearance(), 10_000).unwrap();
                pathnav::roadmap::gbfs_biased(&graph, s, g, d, sampler.beta).unwrap()
            };
            for path in [raw, biased] {
                let out = smooth_path(&world, &path, clearance());
                assert!(out.length() <= path.length() + 1e-12);
                for w in out.waypoints().windows(2) {
                    assert!(world.line_of_sight(w[0], w[1], clearance()));
                }
                checked += 1;
            }
        }
    }
}

#[test]
fn planner_mixture_matches_p_astar() {
    let cfg = ExperimentConfig::default().roadmap.sampler;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let world = maze(4000);
    let graph = prm(&world, 4000);
    let (mut astar_count, mut draws) = (0usize, 0usize);
    while draws < 1000 {
        let (s, g) = free_pair(&world, &mut rng, 2.0);
        let Ok(path) = sample_training_path(&world, &graph, s, g, &cfg, &mut rng) else { continue };
        assert_eq!(path.len(), cfg.n_waypoints);
        if *path.provenance.planner() == Provenance::Optimal {
            astar_count += 1;
        }
        draws += 1;
    }
    let frac = astar_count as f64 / draws as f64;
    assert!((frac - cfg.p_astar).abs() <= 0.03, "A* fraction {frac}");
}
