use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{GruCell, Linear, PathEncoder, PathEncoderDims, PathEncoderKind, WAYPOINT_FEATURES};
use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::pathrep::{norm3, EncodedPath};

pub const GOAL_FEATURES: usize = 4;
pub const PROPRIO_FEATURES: usize = 3;
/// progress, clearance, remaining optimal length, true goal (x, y), time fraction.
pub const PRIVILEGED_FEATURES: usize = 6;
pub const ACTION_DIM: usize = 3;

/// Which path encoder, if any, conditions the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathConditioning {
    None,
    RawConcat,
    SelfAttn,
    CrossAttnFixedQuery,
    CrossAttnLearnedQuery,
}

impl PathConditioning {
    pub fn encoder(self) -> Option<PathEncoderKind> {
        match self {
            PathConditioning::None => None,
            PathConditioning::RawConcat => Some(PathEncoderKind::RawConcat),
            PathConditioning::SelfAttn => Some(PathEncoderKind::SelfAttn),
            PathConditioning::CrossAttnFixedQuery => Some(PathEncoderKind::CrossAttnFixedQuery),
            PathConditioning::CrossAttnLearnedQuery => Some(PathEncoderKind::CrossAttnLearnedQuery),
        }
    }

    pub fn tag(self) -> &'static str {
        self.encoder().map_or("none", |k| k.tag())
    }
}

impl From<PathEncoderKind> for PathConditioning {
    fn from(k: PathEncoderKind) -> Self {
        match k {
            PathEncoderKind::RawConcat => PathConditioning::RawConcat,
            PathEncoderKind::SelfAttn => PathConditioning::SelfAttn,
            PathEncoderKind::CrossAttnFixedQuery => PathConditioning::CrossAttnFixedQuery,
            PathEncoderKind::CrossAttnLearnedQuery => PathConditioning::CrossAttnLearnedQuery,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub path_encoder: PathConditioning,
    pub waypoint_dim: usize,
    pub heads: usize,
    pub n_queries: usize,
    pub query_dim: usize,
    pub path_embed_dim: usize,
    pub positional_embedding: bool,
    pub scan_dim: usize,
    pub goal_embed_dim: usize,
    pub proprio_embed_dim: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub critic_dim: usize,
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            path_encoder: PathConditioning::CrossAttnLearnedQuery,
            waypoint_dim: 32,
            heads: 2,
            n_queries: 1,
            query_dim: 64,
            path_embed_dim: 64,
            positional_embedding: true,
            scan_dim: 64,
            goal_embed_dim: 16,
            proprio_embed_dim: 16,
            hidden_dim: 128,
            head_dim: 64,
            critic_dim: 64,
            init_log_std: -0.5,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("waypoint_dim", self.waypoint_dim),
            ("heads", self.heads),
            ("n_queries", self.n_queries),
            ("query_dim", self.query_dim),
            ("path_embed_dim", self.path_embed_dim),
            ("scan_dim", self.scan_dim),
            ("goal_embed_dim", self.goal_embed_dim),
            ("proprio_embed_dim", self.proprio_embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("head_dim", self.head_dim),
            ("critic_dim", self.critic_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("policy.{name} must be > 0")));
            }
        }
        if self.waypoint_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "policy.waypoint_dim ({}) must be divisible by policy.heads ({})",
                self.waypoint_dim, self.heads
            )));
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::Config("policy.init_log_std must be finite".into()));
        }
        Ok(())
    }

    pub fn encoder_dims(&self, n_waypoints: usize) -> PathEncoderDims {
        PathEncoderDims {
            n_waypoints,
            waypoint_dim: self.waypoint_dim,
            heads: self.heads,
            n_queries: self.n_queries,
            query_dim: self.query_dim,
            embed_dim: self.path_embed_dim,
            positional: self.positional_embedding,
        }
    }
}

/// Input and output sizes fixed by the simulator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoSpec {
    pub n_rays: usize,
    pub n_waypoints: usize,
    pub action_limits: [f64; 3],
}

/// One agent's observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Ranges divided by the sensor maximum.
    pub scan: Vec<f64>,
    /// Egocentric goal vector, meters.
    pub goal: [f64; 3],
    /// Body velocities divided by command limits.
    pub proprio: [f64; 3],
    pub path: EncodedPath,
}

/// `[p / max(d, ε), log(1 + d)]`.
pub fn goal_features(goal: [f64; 3]) -> [f64; GOAL_FEATURES] {
    let d = norm3(goal);
    let s = d.max(0.05);
    [goal[0] / s, goal[1] / s, goal[2] / s, d.ln_1p()]
}

/// Row-stacked observations of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsBatch {
    pub batch: usize,
    pub scan: Tensor,
    pub goal: Tensor,
    pub proprio: Tensor,
    /// `[batch·N, 4]`, sample-major.
    pub path: Tensor,
    pub privileged: Tensor,
}

impl ObsBatch {
    /// `privileged` may be empty, in which case zeros are used.
    pub fn new(obs: &[&Observation], privileged: &[[f64; PRIVILEGED_FEATURES]]) -> Result<Self> {
        let b = obs.len();
        if b == 0 {
            return Err(Error::Shape("empty observation batch".into()));
        }
        if !privileged.is_empty() && privileged.len() != b {
            return Err(Error::Shape(format!(
                "{} privileged rows for {b} observations",
                privileged.len()
            )));
        }
        let n_rays = obs[0].scan.len();
        let n_wp = obs[0].path.len();
        let mut scan = Vec::with_capacity(b * n_rays);
        let mut goal = Vec::with_capacity(b * GOAL_FEATURES);
        let mut proprio = Vec::with_capacity(b * PROPRIO_FEATURES);
        let mut path = Vec::with_capacity(b * n_wp * WAYPOINT_FEATURES);
        for o in obs {
            if o.scan.len() != n_rays || o.path.len() != n_wp {
                return Err(Error::Shape("inconsistent observation sizes in batch".into()));
            }
            scan.extend_from_slice(&o.scan);
            goal.extend_from_slice(&goal_features(o.goal));
            proprio.extend_from_slice(&o.proprio);
            path.extend(o.path.flat());
        }
        let priv_data = if privileged.is_empty() {
            vec![0.0; b * PRIVILEGED_FEATURES]
        } else {
            privileged.iter().flat_map(|r| r.iter().copied()).collect()
        };
        Ok(Self {
            batch: b,
            scan: Tensor::from_vec(b, n_rays, scan),
            goal: Tensor::from_vec(b, GOAL_FEATURES, goal),
            proprio: Tensor::from_vec(b, PROPRIO_FEATURES, proprio),
            path: Tensor::from_vec(b * n_wp, WAYPOINT_FEATURES, path),
            privileged: Tensor::from_vec(b, PRIVILEGED_FEATURES, priv_data),
        })
    }
}

/// Graph nodes produced by a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub mean: Var,
    pub value: Var,
    /// Hidden state after the step, or every step's hidden state for sequences.
    pub hidden: Var,
    pub path_embedding: Option<Var>,
    pub privileged: Var,
}

/// Plain-value output of [`PolicyNetwork::act`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub mean: Tensor,
    pub value: Vec<f64>,
    pub hidden: Tensor,
}

/// Recurrent actor-critic conditioned on an optional path embedding.
#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    pub config: PolicyConfig,
    pub io: IoSpec,
    pub store: ParamStore,
    scan1: Linear,
    scan2: Linear,
    goal: Linear,
    proprio: Linear,
    gru: GruCell,
    path: Option<PathEncoder>,
    actor1: Linear,
    actor_out: Linear,
    log_std: ParamId,
    critic1: Linear,
    critic_out: Linear,
}

impl PolicyNetwork {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, io: IoSpec, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if io.n_rays == 0 || io.n_waypoints == 0 {
            return Err(Error::Config("network needs at least one ray and one waypoint".into()));
        }
        let c = &config;
        let mut store = ParamStore::new();
        let scan1 = Linear::new(&mut store, "scan.0", io.n_rays, c.scan_dim, 1.0, rng);
        let scan2 = Linear::new(&mut store, "scan.1", c.scan_dim, c.scan_dim, 1.0, rng);
        let goal = Linear::new(&mut store, "goal", GOAL_FEATURES, c.goal_embed_dim, 1.0, rng);
        let proprio = Linear::new(&mut store, "proprio", PROPRIO_FEATURES, c.proprio_embed_dim, 1.0, rng);
        let rec_in = c.scan_dim + c.goal_embed_dim + c.proprio_embed_dim;
        let gru = GruCell::new(&mut store, "gru", rec_in, c.hidden_dim, rng);
        let path = match c.path_encoder.encoder() {
            Some(kind) => Some(PathEncoder::new(kind, &c.encoder_dims(io.n_waypoints), &mut store, rng)?),
            None => None,
        };
        let fused = c.hidden_dim + path.as_ref().map_or(0, |p| p.embed_dim());
        let actor1 = Linear::new(&mut store, "actor.0", fused, c.head_dim, 1.0, rng);
        let actor_out = Linear::new(&mut store, "actor.1", c.head_dim, ACTION_DIM, 0.1, rng);
        let log_std = store.register("actor.log_std", Tensor::filled(1, ACTION_DIM, c.init_log_std), true);
        let critic1 = Linear::new(&mut store, "critic.0", fused + PRIVILEGED_FEATURES, c.critic_dim, 1.0, rng);
        let critic_out = Linear::new(&mut store, "critic.1", c.critic_dim, 1, 1.0, rng);
        Ok(Self {
            config,
            io,
            store,
            scan1,
            scan2,
            goal,
            proprio,
            gru,
            path,
            actor1,
            actor_out,
            log_std,
            critic1,
            critic_out,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn zero_hidden(&self, batch: usize) -> Tensor {
        Tensor::zeros(batch, self.config.hidden_dim)
    }

    pub fn log_std_id(&self) -> ParamId {
        self.log_std
    }

    pub fn log_std(&self) -> [f64; 3] {
        let v = self.store.value(self.log_std);
        [v.data[0], v.data[1], v.data[2]]
    }

    pub fn path_encoder(&self) -> Option<&PathEncoder> {
        self.path.as_ref()
    }

    /// Parameters read by the critic only.
    pub fn critic_params(&self) -> Vec<ParamId> {
        vec![self.critic1.w, self.critic1.b, self.critic_out.w, self.critic_out.b]
    }

    fn check_obs(&self, obs: &ObsBatch) -> Result<()> {
        let b = obs.batch;
        let ok = obs.scan.shape() == (b, self.io.n_rays)
            && obs.goal.shape() == (b, GOAL_FEATURES)
            && obs.proprio.shape() == (b, PROPRIO_FEATURES)
            && obs.path.shape() == (b * self.io.n_waypoints, WAYPOINT_FEATURES)
            && obs.privileged.shape() == (b, PRIVILEGED_FEATURES);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "observation batch does not match network io {:?}",
                self.io
            )))
        }
    }

    /// Features entering the recurrent cell: scan, goal and proprioception embeddings.
    fn recurrent_input(&self, g: &mut Graph, obs: &ObsBatch) -> Var {
        let s = g.input(obs.scan.clone());
        let s = self.scan1.forward(g, s);
        let s = g.tanh(s);
        let s = self.scan2.forward(g, s);
        let s = g.tanh(s);
        let goal = g.input(obs.goal.clone());
        let goal = self.goal.forward(g, goal);
        let goal = g.tanh(goal);
        let p = g.input(obs.proprio.clone());
        let p = self.proprio.forward(g, p);
        let p = g.tanh(p);
        g.concat_cols(&[s, goal, p])
    }

    fn heads(&self, g: &mut Graph, h: Var, obs: &ObsBatch) -> Result<ForwardVars> {
        let path_embedding = match &self.path {
            Some(enc) => {
                let p = g.input(obs.path.clone());
                Some(enc.forward(g, p, obs.batch)?)
            }
            None => None,
        };
        let fused = match path_embedding {
            Some(e) => g.concat_cols(&[h, e]),
            None => h,
        };
        let a = self.actor1.forward(g, fused);
        let a = g.tanh(a);
        let a = self.actor_out.forward(g, a);
        let a = g.tanh(a);
        let mean = g.scale_cols(a, self.io.action_limits.to_vec());
        let privileged = g.input(obs.privileged.clone());
        let detached = g.detach(fused);
        let c = g.concat_cols(&[detached, privileged]);
        let c = self.critic1.forward(g, c);
        let c = g.tanh(c);
        let value = self.critic_out.forward(g, c);
        Ok(ForwardVars {
            mean,
            value,
            hidden: h,
            path_embedding,
            privileged,
        })
    }

    /// Single step for a batch of agents.
    pub fn forward(&self, g: &mut Graph, obs: &ObsBatch, hidden: Var) -> Result<ForwardVars> {
        self.check_obs(obs)?;
        let x = self.recurrent_input(g, obs);
        let h = self.gru.step(g, x, hidden)?;
        self.heads(g, h, obs)
    }

    /// Unrolls `steps` time steps. `obs` rows are time-major (`t·B + b`) and
    /// `keep[t]` multiplies the incoming hidden state of step `t` (0 at
    /// episode starts). Returned `hidden` stacks every step's new state.
    pub fn forward_sequence(
        &self,
        g: &mut Graph,
        obs: &ObsBatch,
        steps: usize,
        h0: Var,
        keep: &[Vec<f64>],
    ) -> Result<ForwardVars> {
        self.check_obs(obs)?;
        if steps == 0 || obs.batch % steps != 0 || keep.len() != steps {
            return Err(Error::Shape("sequence layout mismatch".into()));
        }
        let b = obs.batch / steps;
        let hd = self.config.hidden_dim;
        let x_all = self.recurrent_input(g, obs);
        let mut h = h0;
        let mut hs = Vec::with_capacity(steps);
        for (t, k) in keep.iter().enumerate() {
            if k.len() != b {
                return Err(Error::Shape("reset mask length mismatch".into()));
            }
            if k.iter().any(|&v| v != 1.0) {
                let mask = Tensor::from_vec(b, hd, k.iter().flat_map(|&v| std::iter::repeat_n(v, hd)).collect());
                h = g.mul_const(h, mask);
            }
            let x = g.slice_rows(x_all, t * b, b);
            h = self.gru.step(g, x, h)?;
            hs.push(h);
        }
        let h_all = g.concat_rows(&hs);
        self.heads(g, h_all, obs)
    }

    /// Forward pass returning plain values.
    pub fn act(&self, obs: &ObsBatch, hidden: &Tensor) -> Result<ActOutput> {
        let mut g = Graph::new(&self.store);
        let h = g.input(hidden.clone());
        let f = self.forward(&mut g, obs, h)?;
        Ok(ActOutput {
            mean: g.value(f.mean).clone(),
            value: g.value(f.value).data.clone(),
            hidden: g.value(f.hidden).clone(),
        })
    }
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), s)| {
            let z = (a - m) / s.exp();
            -0.5 * z * z - s - 0.5 * ln2pi
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    let c = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    log_std.iter().map(|s| s + c).sum()
}
