//! Small experiment configurations and CLI helpers.

use std::path::Path;

use clap::Parser;
use pathnav::cli::{run, Cli};

/// Seconds-scale training and evaluation for pipeline tests.
pub fn tiny() -> Vec<String> {
    [
        "trainer.iterations=2",
        "trainer.n_envs=4",
        "trainer.steps_per_iter=8",
        "trainer.chunk_len=8",
        "trainer.epochs=1",
        "trainer.minibatches=1",
        "trainer.n_worlds=2",
        "trainer.checkpoint_every=1",
        "policy.scan_dim=16",
        "policy.hidden_dim=16",
        "policy.head_dim=16",
        "policy.critic_dim=16",
        "policy.waypoint_dim=8",
        "policy.query_dim=8",
        "policy.path_embed_dim=8",
        "eval.n_terrains=2",
        "eval.episodes_per_terrain=3",
        "eval.t_max=40",
        "eval.oracle_checks=2",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

/// The reduced network and batch used for the desk-scale learning criteria.
pub fn compact() -> Vec<String> {
    [
        "trainer.n_envs=32",
        "trainer.steps_per_iter=32",
        "trainer.epochs=3",
        "trainer.minibatches=2",
        "trainer.learning_rate=1e-3",
        "trainer.n_worlds=16",
        "policy.scan_dim=32",
        "policy.hidden_dim=64",
        "policy.head_dim=64",
        "policy.critic_dim=64",
        "policy.waypoint_dim=16",
        "policy.query_dim=32",
        "policy.path_embed_dim=32",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

/// Parses and runs a `pathnav` command line.
pub fn pathnav(args: &[&str]) -> pathnav::Result<()> {
    let mut argv = vec!["pathnav"];
    argv.extend_from_slice(args);
    run(Cli::try_parse_from(argv).expect("valid command line"))
}

pub fn with_sets<'a>(mut args: Vec<&'a str>, sets: &'a [String]) -> Vec<&'a str> {
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    args
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}
