//! The `pathnav` command line.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ablation::{arch_sweep, training_sweep, PlannedRun};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{build_scenario, compare_reports, run_eval, trajectories_jsonl, EvalReport, Scenario};
use crate::geometry::Vec2;
use crate::io::write_atomic;
use crate::plot::{curves_svg, read_metrics, read_trajectories, trajectory_svg, CurveSeries};
use crate::policy::{load_checkpoint, PolicyNetwork};
use crate::roadmap::{astar, build_prm, gbfs_biased, postprocess, sample_training_path, save_path};
use crate::trainer::train_with;
use crate::world::{generate_maze, load_world, save_world, OccupancyWorld};

#[derive(Debug, Parser)]
#[command(name = "pathnav", version, about = "Path-conditioned RL local planner: train, evaluate, ablate, plot")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and write checkpoints and a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one reference-path scenario.
    Eval(EvalArgs),
    /// Run the architecture and/or training-process sweeps.
    Ablate(AblateArgs),
    /// Render trajectory dumps or metrics logs as SVG.
    Plot(PlotArgs),
    /// Generate a procedural world and save it as a grid file.
    GenWorld(GenWorldArgs),
    /// Plan a reference path on a saved world.
    GenPath(GenPathArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set trainer.iterations=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.set),
            None => ExperimentConfig::from_overrides(&self.set),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One of: optimal, degraded, zero-path, zero-perception.
    #[arg(long, default_value = "optimal")]
    pub scenario: String,
    /// Experiment config; the snapshot stored in the checkpoint is used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// The four path-encoder variants.
    #[arg(long)]
    pub arch_sweep: bool,
    /// The five training-process rows.
    #[arg(long)]
    pub training_sweep: bool,
    /// Print the planned runs and exit.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, default_value = "optimal")]
    pub scenario: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Trajectories,
    Curves,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// Trajectory dump, or metrics logs as `[label=]path`. Repeating a label groups seeds into one band.
    #[arg(required = true)]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Saved world grid drawn under trajectories.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Only trajectories from this terrain index; defaults to the first record's terrain.
    #[arg(long)]
    pub terrain: Option<usize>,
    /// Cap on the number of trajectories drawn.
    #[arg(long, default_value_t = 100)]
    pub max: usize,
    /// Metrics field plotted by `--kind curves`.
    #[arg(long, default_value = "mean_reward")]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Obstacle-free arena instead of a maze.
    #[arg(long)]
    pub open: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Planner {
    Astar,
    Biased,
    Training,
}

#[derive(Debug, Args)]
pub struct GenPathArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long, value_parser = parse_point)]
    pub start: Vec2,
    #[arg(long, value_parser = parse_point)]
    pub goal: Vec2,
    #[arg(long, value_enum, default_value = "astar")]
    pub planner: Planner,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_point(s: &str) -> std::result::Result<Vec2, String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected x,y, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok(Vec2::new(p(x)?, p(y)?))
}

/// 1 for usage and configuration problems, 2 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Incompatible(_) => 1,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Plot(a) => cmd_plot(&a),
        Command::GenWorld(a) => cmd_gen_world(&a),
        Command::GenPath(a) => cmd_gen_path(&a),
    }
}

fn write_snapshot(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    write_atomic(path, cfg.to_toml().as_bytes())
}

fn sibling_snapshot(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.toml");
    out.with_file_name(name)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut overrides = a.cfg.set.clone();
    if let Some(n) = a.iterations {
        overrides.push(format!("trainer.iterations={n}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    let base = ConfigArgs {
        config: a.cfg.config.clone(),
        set: overrides,
    };
    let mut cfg = base.load()?;
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    train_into(&cfg, a.quiet)
}

fn train_into(cfg: &ExperimentConfig, quiet: bool) -> Result<()> {
    let out = cfg.output_dir.clone();
    write_snapshot(cfg, &out.join("config.toml"))?;
    let total = cfg.trainer.iterations;
    train_with(cfg, Some(&out), |m| {
        if !quiet {
            eprintln!(
                "iter {}/{} reward {:+.4} episodes {} success {}",
                m.iteration,
                total,
                m.mean_reward,
                m.episodes,
                m.success_rate.map(|s| format!("{s:.2}")).unwrap_or_else(|| "-".into())
            );
        }
    })?;
    if !quiet {
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

/// Loads a checkpoint with either the given config or its own snapshot.
pub fn checkpoint_and_config(
    checkpoint: &Path,
    config: Option<&Path>,
    set: &[String],
) -> Result<(PolicyNetwork, ExperimentConfig)> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p, set)?,
        None => {
            let snap: ExperimentConfig = serde_json::from_value(ck.experiment.clone())
                .map_err(|e| Error::Checkpoint(format!("{}: experiment snapshot: {e}", checkpoint.display())))?;
            snap.with_overrides(set)?
        }
    };
    let net = PolicyNetwork::from_checkpoint(&ck)?;
    if net.io != cfg.io_spec() {
        return Err(Error::Incompatible(format!(
            "checkpoint {} expects {:?}, config gives {:?}",
            checkpoint.display(),
            net.io,
            cfg.io_spec()
        )));
    }
    Ok((net, cfg))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let scenario: Scenario = a.scenario.parse()?;
    let (net, cfg) = checkpoint_and_config(&a.checkpoint, a.config.as_deref(), &a.set)?;
    let report = eval_into(&net, &cfg, scenario, &a.out)?;
    print_summary(&report);
    Ok(())
}

fn eval_into(net: &PolicyNetwork, cfg: &ExperimentConfig, scenario: Scenario, out: &Path) -> Result<EvalReport> {
    write_snapshot(cfg, &out.join("config.toml"))?;
    let mut provider = build_scenario(scenario, &cfg.eval);
    let res = run_eval(net, cfg, provider.as_mut())?;
    write_atomic(&out.join("report.csv"), res.report.to_csv().as_bytes())?;
    write_atomic(&out.join("report.json"), res.report.to_json().as_bytes())?;
    write_atomic(&out.join("trajectories.jsonl"), trajectories_jsonl(&res.trajectories).as_bytes())?;
    Ok(res.report)
}

fn print_summary(r: &EvalReport) {
    let a = &r.aggregate;
    println!(
        "{}: episodes {} skipped {} SR {} SPL {}",
        r.scenario,
        a.episodes,
        r.metadata.skipped.len(),
        a.sr.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
        a.spl.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
    );
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    if !a.arch_sweep && !a.training_sweep {
        return Err(Error::Config("ablate needs --arch-sweep and/or --training-sweep".into()));
    }
    let scenario: Scenario = a.scenario.parse()?;
    let base = a.cfg.load()?;
    let mut sweeps: Vec<(&str, Vec<PlannedRun>)> = Vec::new();
    if a.arch_sweep {
        sweeps.push(("arch", arch_sweep()));
    }
    if a.training_sweep {
        sweeps.push(("training", training_sweep()));
    }
    // Resolve every run up front so a bad override fails before any training.
    let mut plans = Vec::new();
    for (sweep, runs) in &sweeps {
        for run in runs {
            let mut cfg = base.with_overrides(&run.overrides)?;
            cfg.output_dir = a.out.join(sweep).join(&run.tag);
            plans.push((*sweep, run.clone(), cfg));
        }
    }
    if a.dry_run {
        for (sweep, run, cfg) in &plans {
            println!("{sweep}/{} -> {} [{}]", run.tag, cfg.output_dir.display(), run.overrides.join(" "));
        }
        return Ok(());
    }
    for (sweep, _) in &sweeps {
        let mut reports: Vec<(String, EvalReport)> = Vec::new();
        for (_, run, cfg) in plans.iter().filter(|p| p.0 == *sweep) {
            eprintln!("{sweep}/{}: training", run.tag);
            let outcome = crate::trainer::train(cfg, Some(&cfg.output_dir))?;
            write_snapshot(cfg, &cfg.output_dir.join("config.toml"))?;
            let report = eval_into(&outcome.network, cfg, scenario, &cfg.output_dir.join(format!("eval-{scenario}")))?;
            print_summary(&report);
            reports.push((run.tag.clone(), report));
        }
        let (ref_tag, reference) = &reports[0];
        let mut table = String::new();
        let mut diffs = Vec::new();
        for (tag, rep) in &reports[1..] {
            let mut d = compare_reports(rep, reference)?;
            d.candidate = tag.clone();
            d.reference = ref_tag.clone();
            table.push_str(&d.to_table());
            table.push('\n');
            diffs.push(d);
        }
        println!("{table}");
        let dir = a.out.join(sweep);
        write_atomic(&dir.join("comparison.txt"), table.as_bytes())?;
        write_atomic(
            &dir.join("comparison.json"),
            serde_json::to_string_pretty(&diffs).expect("diffs serialize").as_bytes(),
        )?;
    }
    Ok(())
}

pub fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let svg = match a.kind {
        PlotKind::Trajectories => {
            let [input] = a.inputs.as_slice() else {
                return Err(Error::Config("trajectory plots take exactly one dump".into()));
            };
            let records = read_trajectories(Path::new(input))?;
            let terrain = a.terrain.unwrap_or(records[0].terrain);
            let chosen: Vec<_> = records.into_iter().filter(|r| r.terrain == terrain).take(a.max).collect();
            if chosen.is_empty() {
                return Err(Error::Config(format!("no trajectories for terrain {terrain} in {input}")));
            }
            let world = a.world.as_deref().map(load_world).transpose()?;
            trajectory_svg(world.as_ref(), &chosen)?
        }
        PlotKind::Curves => {
            let mut series: Vec<CurveSeries> = Vec::new();
            for input in &a.inputs {
                let (label, path) = match input.split_once('=') {
                    Some((l, p)) => (l.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(input);
                        let label = p
                            .parent()
                            .and_then(|d| d.file_name())
                            .map(|n| n.to_string_lossy().into_owned())
                            .unwrap_or_else(|| input.clone());
                        (label, p)
                    }
                };
                let metrics = read_metrics(&path)?;
                let run = metrics
                    .iter()
                    .map(|m| {
                        let v = serde_json::to_value(m).expect("metrics serialize");
                        let y = v
                            .get(&a.metric)
                            .or_else(|| v.get("loss").and_then(|l| l.get(&a.metric)))
                            .and_then(|x| x.as_f64())
                            .ok_or_else(|| Error::Config(format!("unknown or empty metric `{}`", a.metric)))?;
                        Ok((m.iteration as f64, y))
                    })
                    .collect::<Result<Vec<_>>>()?;
                match series.iter_mut().find(|s| s.label == label) {
                    Some(s) => s.runs.push(run),
                    None => series.push(CurveSeries { label, runs: vec![run] }),
                }
            }
            curves_svg(&series, &a.metric)?
        }
    };
    write_atomic(&a.out, svg.as_bytes())
}

pub fn cmd_gen_world(a: &GenWorldArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let w = &cfg.world;
    let world = if a.open {
        OccupancyWorld::empty(w.width, w.height, w.maze.resolution, a.seed)?
    } else {
        generate_maze(a.seed, w.width, w.height, &w.maze)?
    };
    write_snapshot(&cfg, &sibling_snapshot(&a.out))?;
    save_world(&world, &a.out)
}

pub fn cmd_gen_path(a: &GenPathArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let world = Arc::new(load_world(&a.world)?);
    let r = &cfg.roadmap;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let graph = build_prm(world.clone(), r.n_samples * r.eval_density_factor, r.connect_radius, r.clearance, &mut rng)?;
    let n = r.sampler.n_waypoints;
    let path = match a.planner {
        Planner::Astar => postprocess(&world, &astar(&graph, a.start, a.goal)?, r.clearance, n)?,
        Planner::Biased => {
            let detour = world
                .sample_free_point(&mut rng, r.clearance, 10_000)
                .ok_or_else(|| Error::Generation("no free space for a detour point".into()))?;
            let raw = gbfs_biased(&graph, a.start, a.goal, detour, r.sampler.beta)?;
            postprocess(&world, &raw, r.clearance, n)?
        }
        Planner::Training => sample_training_path(&world, &graph, a.start, a.goal, &r.sampler, &mut rng)?,
    };
    write_snapshot(&cfg, &sibling_snapshot(&a.out))?;
    save_path(&path, &a.out)
}
