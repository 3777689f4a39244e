//! Experiment configuration: one TOML document with a table per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::pathrep::PathRepConfig;
use crate::policy::{IoSpec, PolicyConfig};
use crate::reward::RewardConfig;
use crate::roadmap::RoadmapConfig;
use crate::trainer::TrainerConfig;
use crate::world::{AgentConfig, MazeParams, SensorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub width: f64,
    pub height: f64,
    pub maze: MazeParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 12.0,
            height: 12.0,
            maze: MazeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub agent: AgentConfig,
    pub sensor: SensorConfig,
    pub roadmap: RoadmapConfig,
    pub pathrep: PathRepConfig,
    pub policy: PolicyConfig,
    pub reward: RewardConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            agent: AgentConfig::default(),
            sensor: SensorConfig::default(),
            roadmap: RoadmapConfig::default(),
            pathrep: PathRepConfig::default(),
            policy: PolicyConfig::default(),
            reward: RewardConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        Self::from_toml_with_overrides(text, origin, &[])
    }

    /// Parses `text`, then applies `key=value` overrides with dotted keys
    /// (`trainer.iterations=10`). Values are TOML literals; anything that does
    /// not parse as one is taken as a string.
    pub fn from_toml_with_overrides(text: &str, origin: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: origin.to_path_buf(),
                line,
                msg: e.message().to_string(),
            }
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("{}: {}", origin.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_with_overrides(&text, path, overrides)
    }

    /// Defaults plus overrides, without a file.
    pub fn from_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_toml_with_overrides("", Path::new("<defaults>"), overrides)
    }

    /// A copy of `self` with `overrides` applied and validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_with_overrides(&self.to_toml(), Path::new("<resolved>"), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn io_spec(&self) -> IoSpec {
        IoSpec {
            n_rays: self.sensor.n_rays,
            n_waypoints: self.roadmap.sampler.n_waypoints,
            action_limits: self.agent.max_command,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        if !(w.width >= 2.0 && w.height >= 2.0 && w.width.is_finite() && w.height.is_finite()) {
            return Err(config_err(format!(
                "world.width and world.height must be finite and >= 2, got {} x {}",
                w.width, w.height
            )));
        }
        if !(w.maze.resolution > 0.0) {
            return Err(config_err("world.maze.resolution must be > 0"));
        }
        if !(0.0..1.0).contains(&w.maze.obstacle_density) {
            return Err(config_err("world.maze.obstacle_density must be in [0, 1)"));
        }
        let a = &self.agent;
        if !(a.radius > 0.0) || !(a.dt > 0.0) || a.substeps == 0 {
            return Err(config_err("agent.radius and agent.dt must be > 0 and agent.substeps >= 1"));
        }
        if a.max_command.iter().any(|&m| !(m > 0.0)) {
            return Err(config_err("agent.max_command entries must be > 0"));
        }
        let s = &self.sensor;
        if s.n_rays < 2 || !(s.fov_deg > 0.0 && s.fov_deg <= 360.0) || !(s.max_range > 0.0) {
            return Err(config_err(
                "sensor.n_rays must be >= 2, sensor.fov_deg in (0, 360] and sensor.max_range > 0",
            ));
        }
        let r = &self.roadmap;
        if r.n_samples < 2 || !(r.connect_radius > 0.0) || !(r.clearance >= 0.0) || r.eval_density_factor == 0 {
            return Err(config_err(
                "roadmap.n_samples must be >= 2, connect_radius > 0, clearance >= 0, eval_density_factor >= 1",
            ));
        }
        r.sampler.validate()?;
        if !(self.pathrep.epsilon > 0.0) || !(self.pathrep.progress_window > 0.0) {
            return Err(config_err("pathrep.epsilon and pathrep.progress_window must be > 0"));
        }
        self.policy.validate()?;
        self.reward.validate()?;
        self.trainer.validate()?;
        self.eval.validate()?;
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_value(raw);
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
