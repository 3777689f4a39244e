//! Rollout collection, advantage estimation and clipped-surrogate PPO with an
//! asymmetric critic.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::env::{env_rng, EpisodeSpec, NavEnv, SimConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::policy::checkpoint::save_checkpoint;
use crate::policy::{
    gaussian_entropy, gaussian_log_prob, Adam, AdamConfig, Graph, ObsBatch, Observation, PathConditioning,
    PolicyNetwork, Tensor, ACTION_DIM, PRIVILEGED_FEATURES,
};
use crate::reward::RewardBreakdown;
use crate::roadmap::{astar, build_prm, sample_training_path, PathSamplerConfig, RoadmapGraph};
use crate::world::{generate_maze, random_heading, AgentState, OccupancyWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub iterations: usize,
    pub n_envs: usize,
    /// Policy steps per environment per iteration.
    pub steps_per_iter: usize,
    pub epochs: usize,
    pub minibatches: usize,
    /// Length of the recurrent sequence chunks used for back-propagation through time.
    pub chunk_len: usize,
    pub clip: f64,
    pub lambda_gae: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// Number of procedurally generated training worlds.
    pub n_worlds: usize,
    /// Training worlds use seeds `world_seed_base + k`.
    pub world_seed_base: u64,
    pub goal_radius: f64,
    pub min_goal_distance: f64,
    pub scan_noise: f64,
    pub proprio_noise: f64,
    /// Iterations between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Start each env's first episode at a uniformly random elapsed time so
    /// that horizons do not end in lockstep.
    pub random_initial_elapsed: bool,
    /// Divide rewards by a running std of the discounted return before GAE.
    pub normalize_rewards: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            n_envs: 64,
            steps_per_iter: 64,
            epochs: 4,
            minibatches: 4,
            chunk_len: 16,
            clip: 0.2,
            lambda_gae: 0.95,
            entropy_coef: 0.005,
            value_coef: 0.5,
            learning_rate: 3e-4,
            max_grad_norm: 1.0,
            n_worlds: 32,
            world_seed_base: 0,
            goal_radius: 0.5,
            min_goal_distance: 2.0,
            scan_noise: 0.02,
            proprio_noise: 0.05,
            checkpoint_every: 50,
            random_initial_elapsed: true,
            normalize_rewards: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("trainer.{m}")));
        for (name, v) in [
            ("n_envs", self.n_envs),
            ("steps_per_iter", self.steps_per_iter),
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("chunk_len", self.chunk_len),
            ("n_worlds", self.n_worlds),
        ] {
            if v == 0 {
                return fail(format!("{name} must be > 0"));
            }
        }
        if self.steps_per_iter % self.chunk_len != 0 {
            return fail(format!(
                "steps_per_iter ({}) must be a multiple of chunk_len ({})",
                self.steps_per_iter, self.chunk_len
            ));
        }
        let units = self.n_envs * self.steps_per_iter / self.chunk_len;
        if self.minibatches > units {
            return fail(format!("minibatches ({}) exceeds the {units} sequence chunks per batch", self.minibatches));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return fail(format!("clip must be in (0, 1), got {}", self.clip));
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return fail(format!("lambda_gae must be in [0, 1], got {}", self.lambda_gae));
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return fail("learning_rate and max_grad_norm must be > 0".into());
        }
        if !(self.goal_radius > 0.0) {
            return fail("goal_radius must be > 0".into());
        }
        if !(self.scan_noise >= 0.0 && self.proprio_noise >= 0.0) {
            return fail("noise levels must be >= 0".into());
        }
        Ok(())
    }
}

/// A generated world with its roadmap.
#[derive(Debug, Clone)]
pub struct PlanningWorld {
    pub world: Arc<OccupancyWorld>,
    pub graph: RoadmapGraph,
}

impl PlanningWorld {
    pub fn generate(cfg: &ExperimentConfig, seed: u64, n_samples: usize) -> Result<Self> {
        let w = &cfg.world;
        let world = Arc::new(generate_maze(seed, w.width, w.height, &w.maze)?);
        let mut rng = env_rng(seed, 0x5052_4d00);
        let r = &cfg.roadmap;
        let graph = build_prm(world.clone(), n_samples, r.connect_radius, r.clearance, &mut rng)?;
        Ok(Self { world, graph })
    }
}

/// Samples training episodes over a fixed pool of worlds.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    pub worlds: Vec<PlanningWorld>,
    pub sampler: PathSamplerConfig,
    pub with_path: bool,
    pub clearance: f64,
    pub min_goal_distance: f64,
    pub t_max: usize,
    pub goal_radius: f64,
}

impl EpisodeSampler {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let t = &cfg.trainer;
        let worlds = (0..t.n_worlds as u64)
            .map(|k| PlanningWorld::generate(cfg, t.world_seed_base + k, cfg.roadmap.n_samples))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            worlds,
            sampler: cfg.roadmap.sampler.clone(),
            with_path: cfg.policy.path_encoder != PathConditioning::None,
            clearance: cfg.roadmap.clearance,
            min_goal_distance: t.min_goal_distance,
            t_max: cfg.reward.t_max,
            goal_radius: t.goal_radius,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<EpisodeSpec> {
        for _ in 0..100 {
            let pw = &self.worlds[rng.random_range(0..self.worlds.len())];
            // A roadmap path doubles as the reachability test.
            let (Some(start), Some(goal)) = (
                pw.world.sample_free_point(rng, self.clearance, 1000),
                pw.world.sample_free_point(rng, self.clearance, 1000),
            ) else {
                continue;
            };
            if start.distance(goal) < self.min_goal_distance {
                continue;
            }
            let Ok(optimal) = astar(&pw.graph, start, goal) else { continue };
            let path = if self.with_path {
                match sample_training_path(&pw.world, &pw.graph, start, goal, &self.sampler, rng) {
                    Ok(p) => Some(p),
                    Err(Error::NoPath) | Err(Error::DegeneratePath(_)) => continue,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            return Ok(EpisodeSpec {
                world: pw.world.clone(),
                start: AgentState::at(start, random_heading(rng)),
                goal,
                path,
                optimal: Some(optimal),
                t_max: self.t_max,
                goal_radius: self.goal_radius,
            });
        }
        Err(Error::Generation("no plannable training episode after 100 attempts".into()))
    }
}

/// Time-major transitions: index `t·n_envs + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub steps: usize,
    pub obs: Vec<Observation>,
    pub privileged: Vec<[f64; PRIVILEGED_FEATURES]>,
    /// Hidden state entering each step, `hidden_dim` values per transition.
    pub hidden: Vec<f64>,
    pub hidden_dim: usize,
    pub episode_start: Vec<bool>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<RewardBreakdown>,
    pub dones: Vec<bool>,
    pub successes: Vec<bool>,
    /// Critic estimate of the state after the last step, per env.
    pub last_values: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn total_rewards(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.total).collect()
    }
}

/// Live environments with their recurrent state and random streams.
pub struct EnvPool {
    pub envs: Vec<NavEnv>,
    pub hidden: Tensor,
    rngs: Vec<ChaCha8Rng>,
    fresh: Vec<bool>,
    episode_return: Vec<f64>,
    /// (return, success) of episodes finished since the last drain.
    finished: Vec<(f64, bool)>,
}

impl EnvPool {
    pub fn new(
        sampler: &EpisodeSampler,
        sim: &SimConfig,
        n_envs: usize,
        hidden_dim: usize,
        seed: u64,
        random_elapsed: bool,
    ) -> Result<Self> {
        let mut rngs: Vec<ChaCha8Rng> = (0..n_envs as u64).map(|e| env_rng(seed, e)).collect();
        let envs = rngs
            .iter_mut()
            .map(|r| {
                let spec = sampler.sample(r)?;
                let t0 = if random_elapsed { r.random_range(0..spec.t_max) } else { 0 };
                Ok(NavEnv::new(spec, sim).with_elapsed(t0))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            envs,
            hidden: Tensor::zeros(n_envs, hidden_dim),
            rngs,
            fresh: vec![true; n_envs],
            episode_return: vec![0.0; n_envs],
            finished: Vec::new(),
        })
    }

    pub fn drain_finished(&mut self) -> Vec<(f64, bool)> {
        std::mem::take(&mut self.finished)
    }
}

/// Steps every env `steps` times with sampled actions, resetting finished
/// episodes from `sampler`.
pub fn collect_rollouts(
    net: &PolicyNetwork,
    pool: &mut EnvPool,
    sampler: &EpisodeSampler,
    sim: &SimConfig,
    steps: usize,
) -> Result<RolloutBatch> {
    let n = pool.envs.len();
    let hd = net.hidden_dim();
    let cap = n * steps;
    let mut batch = RolloutBatch {
        n_envs: n,
        steps,
        obs: Vec::with_capacity(cap),
        privileged: Vec::with_capacity(cap),
        hidden: Vec::with_capacity(cap * hd),
        hidden_dim: hd,
        episode_start: Vec::with_capacity(cap),
        actions: Vec::with_capacity(cap),
        log_probs: Vec::with_capacity(cap),
        values: Vec::with_capacity(cap),
        rewards: Vec::with_capacity(cap),
        dones: Vec::with_capacity(cap),
        successes: Vec::with_capacity(cap),
        last_values: Vec::new(),
    };
    let log_std = net.log_std();
    for _ in 0..steps {
        let obs: Vec<Observation> = (0..n).map(|e| pool.envs[e].observe(sim, &mut pool.rngs[e])).collect();
        let privileged: Vec<_> = pool.envs.iter().map(|env| env.privileged(sim)).collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        let ob = ObsBatch::new(&refs, &privileged)?;
        let out = net.act(&ob, &pool.hidden)?;
        batch.hidden.extend_from_slice(&pool.hidden.data);
        for e in 0..n {
            let rng = &mut pool.rngs[e];
            let mean = out.mean.row(e);
            let action: [f64; 3] = std::array::from_fn(|k| {
                let z: f64 = StandardNormal.sample(rng);
                mean[k] + log_std[k].exp() * z
            });
            let logp = gaussian_log_prob(&action, mean, &log_std);
            let step = pool.envs[e].step(action, sim, rng);
            if !step.reward.total.is_finite() {
                return Err(Error::NonFinite(format!("reward {:?} in env {e}", step.reward)));
            }
            batch.episode_start.push(pool.fresh[e]);
            batch.actions.push(action);
            batch.log_probs.push(logp);
            batch.values.push(out.value[e]);
            batch.rewards.push(step.reward);
            batch.dones.push(step.done);
            batch.successes.push(step.success);
            pool.episode_return[e] += step.reward.total;
            pool.fresh[e] = false;
            if step.done {
                pool.finished.push((pool.episode_return[e], step.success));
                pool.episode_return[e] = 0.0;
                pool.envs[e] = NavEnv::new(sampler.sample(rng)?, sim);
                pool.fresh[e] = true;
            }
        }
        pool.hidden = out.hidden;
        for e in 0..n {
            if pool.fresh[e] {
                pool.hidden.row_mut(e).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        batch.obs.extend(obs);
        batch.privileged.extend(privileged);
    }
    // Bootstrap values for the cut-off; the peeked observations reuse each env's
    // stream, so they are drawn exactly as the next iteration would draw them.
    let obs: Vec<Observation> = (0..n)
        .map(|e| {
            let mut peek = pool.rngs[e].clone();
            pool.envs[e].observe(sim, &mut peek)
        })
        .collect();
    let privileged: Vec<_> = pool.envs.iter().map(|env| env.privileged(sim)).collect();
    let refs: Vec<&Observation> = obs.iter().collect();
    let out = net.act(&ObsBatch::new(&refs, &privileged)?, &pool.hidden)?;
    batch.last_values = out.value;
    Ok(batch)
}

/// Running variance of per-env discounted returns, used to scale rewards.
#[derive(Debug, Clone)]
pub struct ReturnNormalizer {
    returns: Vec<f64>,
    count: f64,
    mean: f64,
    m2: f64,
    gamma: f64,
}

impl ReturnNormalizer {
    pub fn new(n_envs: usize, gamma: f64) -> Self {
        Self {
            returns: vec![0.0; n_envs],
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
            gamma,
        }
    }

    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            (self.m2 / self.count).sqrt().max(1e-4)
        }
    }

    /// Folds a time-major batch into the statistics, then returns the rewards
    /// divided by the updated std.
    pub fn scale(&mut self, rewards: &[f64], dones: &[bool]) -> Vec<f64> {
        let n = self.returns.len();
        for (i, (&r, &d)) in rewards.iter().zip(dones).enumerate() {
            let e = i % n;
            self.returns[e] = self.returns[e] * self.gamma + r;
            self.count += 1.0;
            let delta = self.returns[e] - self.mean;
            self.mean += delta / self.count;
            self.m2 += delta * (self.returns[e] - self.mean);
            if d {
                self.returns[e] = 0.0;
            }
        }
        let s = self.std();
        rewards.iter().map(|r| r / s).collect()
    }
}

/// Generalized advantage estimation over time-major arrays.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_values: &[f64],
    n_envs: usize,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let len = rewards.len();
    assert!(n_envs > 0 && len % n_envs == 0, "rollout length not a multiple of n_envs");
    assert_eq!(values.len(), len);
    assert_eq!(dones.len(), len);
    assert_eq!(last_values.len(), n_envs);
    let steps = len / n_envs;
    let mut adv = vec![0.0; len];
    for e in 0..n_envs {
        let mut gae = 0.0;
        for t in (0..steps).rev() {
            let i = t * n_envs + e;
            let next_value = if t + 1 == steps { last_values[e] } else { values[i + n_envs] };
            let live = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_value * live - values[i];
            gae = delta + gamma * lambda * live * gae;
            adv[i] = gae;
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit variance (population variance).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoSample {
    pub action: [f64; ACTION_DIM],
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Loss value and its gradient w.r.t. the network outputs.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub loss: f64,
    pub stats: LossStats,
    pub ratios: Vec<f64>,
    /// `[N, 3]`.
    pub d_mean: Tensor,
    pub d_log_std: [f64; ACTION_DIM],
    /// `[N, 1]`.
    pub d_value: Tensor,
    /// Contribution of the surrogate alone to `d_mean`.
    pub d_mean_policy: Tensor,
}

/// `−mean(min(ρA, clip(ρ)A)) + c_v·mean(½(V − R)²) − c_H·H`, with gradients.
pub fn ppo_loss(
    mean: &Tensor,
    log_std: [f64; ACTION_DIM],
    values: &[f64],
    samples: &[PpoSample],
    clip: f64,
    value_coef: f64,
    entropy_coef: f64,
) -> LossGradients {
    let n = samples.len();
    assert_eq!(mean.shape(), (n, ACTION_DIM));
    assert_eq!(values.len(), n);
    let inv_n = 1.0 / n as f64;
    let var: [f64; 3] = std::array::from_fn(|k| (2.0 * log_std[k]).exp());
    let mut d_mean = Tensor::zeros(n, ACTION_DIM);
    let mut d_value = Tensor::zeros(n, 1);
    let mut d_log_std = [0.0; ACTION_DIM];
    let mut ratios = Vec::with_capacity(n);
    let (mut pl, mut vl, mut kl, mut clipped) = (0.0, 0.0, 0.0, 0usize);
    for (i, s) in samples.iter().enumerate() {
        let mu = mean.row(i);
        let logp = gaussian_log_prob(&s.action, mu, &log_std);
        let log_ratio = logp - s.old_log_prob;
        let ratio = log_ratio.exp();
        ratios.push(ratio);
        let a = s.advantage;
        let unclipped = ratio * a;
        let clipped_obj = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        pl -= unclipped.min(clipped_obj) * inv_n;
        kl += ((ratio - 1.0) - log_ratio) * inv_n;
        let flat = (a >= 0.0 && ratio > 1.0 + clip) || (a < 0.0 && ratio < 1.0 - clip);
        if (ratio - 1.0).abs() > clip {
            clipped += 1;
        }
        if !flat {
            // d(−ρA)/dlogp = −ρA
            let g = -unclipped * inv_n;
            for k in 0..ACTION_DIM {
                let diff = s.action[k] - mu[k];
                d_mean.data[i * ACTION_DIM + k] += g * diff / var[k];
                d_log_std[k] += g * (diff * diff / var[k] - 1.0);
            }
        }
        let err = values[i] - s.ret;
        vl += 0.5 * err * err * inv_n;
        d_value.data[i] = value_coef * err * inv_n;
    }
    let d_mean_policy = d_mean.clone();
    let entropy = gaussian_entropy(&log_std);
    for d in &mut d_log_std {
        *d -= entropy_coef;
    }
    LossGradients {
        loss: pl + value_coef * vl - entropy_coef * entropy,
        stats: LossStats {
            policy_loss: pl,
            value_loss: vl,
            entropy,
            approx_kl: kl,
            clip_fraction: clipped as f64 * inv_n,
            grad_norm: 0.0,
        },
        ratios,
        d_mean,
        d_log_std,
        d_value,
        d_mean_policy,
    }
}

/// Knobs of one PPO update.
#[derive(Debug, Clone, Copy)]
pub struct PpoParams {
    pub epochs: usize,
    pub minibatches: usize,
    pub chunk_len: usize,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
}

impl From<&TrainerConfig> for PpoParams {
    fn from(t: &TrainerConfig) -> Self {
        Self {
            epochs: t.epochs,
            minibatches: t.minibatches,
            chunk_len: t.chunk_len,
            clip: t.clip,
            value_coef: t.value_coef,
            entropy_coef: t.entropy_coef,
            max_grad_norm: t.max_grad_norm,
        }
    }
}

/// Several epochs over shuffled minibatches of sequence chunks. Returns
/// statistics averaged over minibatches.
pub fn ppo_update<R: Rng + ?Sized>(
    net: &mut PolicyNetwork,
    opt: &mut Adam,
    batch: &RolloutBatch,
    advantages: &[f64],
    returns: &[f64],
    p: &PpoParams,
    rng: &mut R,
) -> Result<LossStats> {
    if batch.is_empty() {
        return Err(Error::Shape("empty rollout batch".into()));
    }
    let (n, l, hd) = (batch.n_envs, p.chunk_len, batch.hidden_dim);
    if batch.steps % l != 0 {
        return Err(Error::Config("rollout length must be a multiple of chunk_len".into()));
    }
    let chunks = batch.steps / l;
    let mut units: Vec<(usize, usize)> = (0..n).flat_map(|e| (0..chunks).map(move |c| (e, c))).collect();
    let per_mb = units.len().div_ceil(p.minibatches);
    let mut sum = LossStats::default();
    let mut count = 0usize;
    for _ in 0..p.epochs {
        units.shuffle(rng);
        for mb in units.chunks(per_mb) {
            let b = mb.len();
            let idx: Vec<usize> = (0..l)
                .flat_map(|t| mb.iter().map(move |&(e, c)| (c * l + t) * n + e))
                .collect();
            let obs: Vec<&Observation> = idx.iter().map(|&i| &batch.obs[i]).collect();
            let privileged: Vec<_> = idx.iter().map(|&i| batch.privileged[i]).collect();
            let ob = ObsBatch::new(&obs, &privileged)?;
            let mut h0 = Tensor::zeros(b, hd);
            for (u, &(e, c)) in mb.iter().enumerate() {
                let i = (c * l) * n + e;
                h0.row_mut(u).copy_from_slice(&batch.hidden[i * hd..(i + 1) * hd]);
            }
            let keep: Vec<Vec<f64>> = (0..l)
                .map(|t| {
                    (0..b)
                        .map(|u| if t > 0 && batch.episode_start[idx[t * b + u]] { 0.0 } else { 1.0 })
                        .collect()
                })
                .collect();
            let samples: Vec<PpoSample> = idx
                .iter()
                .map(|&i| PpoSample {
                    action: batch.actions[i],
                    old_log_prob: batch.log_probs[i],
                    advantage: advantages[i],
                    ret: returns[i],
                })
                .collect();

            let (grads, stats) = {
                let mut g = Graph::new(&net.store);
                let hv = g.input(h0);
                let f = net.forward_sequence(&mut g, &ob, l, hv, &keep)?;
                let lg = ppo_loss(
                    g.value(f.mean),
                    net.log_std(),
                    &g.value(f.value).data,
                    &samples,
                    p.clip,
                    p.value_coef,
                    p.entropy_coef,
                );
                if !lg.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "PPO loss {} (policy {}, value {}, entropy {})",
                        lg.loss, lg.stats.policy_loss, lg.stats.value_loss, lg.stats.entropy
                    )));
                }
                let mut grads = g.backward(&[(f.mean, lg.d_mean.clone()), (f.value, lg.d_value.clone())]).params;
                let ls = grads.get_mut(net.log_std_id());
                for k in 0..ACTION_DIM {
                    ls.data[k] += lg.d_log_std[k];
                }
                (grads, lg.stats)
            };
            let mut grads = grads;
            if !grads.is_finite() {
                return Err(Error::NonFinite("non-finite gradient in PPO update".into()));
            }
            let norm = grads.clip_global_norm(p.max_grad_norm);
            opt.step(&mut net.store, &grads);
            sum.policy_loss += stats.policy_loss;
            sum.value_loss += stats.value_loss;
            sum.entropy += stats.entropy;
            sum.approx_kl += stats.approx_kl;
            sum.clip_fraction += stats.clip_fraction;
            sum.grad_norm += norm;
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    Ok(LossStats {
        policy_loss: sum.policy_loss / c,
        value_loss: sum.value_loss / c,
        entropy: sum.entropy / c,
        approx_kl: sum.approx_kl / c,
        clip_fraction: sum.clip_fraction / c,
        grad_norm: sum.grad_norm / c,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps: usize,
    /// Mean per-step total reward over the batch.
    pub mean_reward: f64,
    pub mean_task: f64,
    pub mean_reg: f64,
    pub mean_pen: f64,
    pub mean_shortcut: f64,
    pub episodes: usize,
    pub mean_episode_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub loss: LossStats,
}

pub fn sim_config(cfg: &ExperimentConfig) -> SimConfig {
    SimConfig {
        agent: cfg.agent.clone(),
        sensor: cfg.sensor.clone(),
        pathrep: cfg.pathrep.clone(),
        reward: cfg.reward.clone(),
        n_waypoints: cfg.roadmap.sampler.n_waypoints,
        scan_noise: cfg.trainer.scan_noise,
        proprio_noise: cfg.trainer.proprio_noise,
        zero_scan: false,
    }
}

pub fn build_network(cfg: &ExperimentConfig) -> Result<PolicyNetwork> {
    let io = cfg.io_spec();
    let mut rng = env_rng(cfg.seed, 0x4e45_5400);
    PolicyNetwork::new(cfg.policy.clone(), io, &mut rng)
}

pub struct TrainOutcome {
    pub network: PolicyNetwork,
    pub metrics: Vec<IterationMetrics>,
}

pub fn metrics_jsonl(metrics: &[IterationMetrics]) -> String {
    let mut s = String::new();
    for m in metrics {
        s.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        s.push('\n');
    }
    s
}

/// Runs the collect/update loop. With `out`, writes `metrics.jsonl`,
/// periodic checkpoints under `checkpoints/` and the final `checkpoint.json`.
pub fn train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, out, |_| {})
}

/// As [`train`], calling `observe` after each iteration.
pub fn train_with(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    mut observe: impl FnMut(&IterationMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.trainer;
    let sim = sim_config(cfg);
    let mut net = build_network(cfg)?;
    let snapshot = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let save = |net: &PolicyNetwork, it: usize, name: &str| -> Result<()> {
        if let Some(dir) = out {
            save_checkpoint(&dir.join(name), &net.to_checkpoint(it, snapshot.clone()))?;
        }
        Ok(())
    };
    save(&net, 0, "checkpoint.json")?;
    let mut metrics = Vec::with_capacity(t.iterations);
    if let Some(dir) = out {
        write_atomic(&dir.join("metrics.jsonl"), b"")?;
    }
    if t.iterations == 0 {
        return Ok(TrainOutcome { network: net, metrics });
    }
    let sampler = EpisodeSampler::from_config(cfg)?;
    let mut pool = EnvPool::new(&sampler, &sim, t.n_envs, net.hidden_dim(), cfg.seed, t.random_initial_elapsed)?;
    let mut normalizer = ReturnNormalizer::new(t.n_envs, cfg.reward.gamma);
    let mut opt = Adam::new(
        &net.store,
        AdamConfig {
            lr: t.learning_rate,
            ..Default::default()
        },
    );
    let mut update_rng = env_rng(cfg.seed, 0x5050_4f00);
    let params = PpoParams::from(t);
    for it in 1..=t.iterations {
        let batch = collect_rollouts(&net, &mut pool, &sampler, &sim, t.steps_per_iter)?;
        let rewards = if t.normalize_rewards {
            normalizer.scale(&batch.total_rewards(), &batch.dones)
        } else {
            batch.total_rewards()
        };
        let (mut adv, ret) = compute_gae(
            &rewards,
            &batch.values,
            &batch.dones,
            &batch.last_values,
            batch.n_envs,
            cfg.reward.gamma,
            t.lambda_gae,
        );
        normalize_advantages(&mut adv);
        let loss = ppo_update(&mut net, &mut opt, &batch, &adv, &ret, &params, &mut update_rng)?;
        if !net.store.is_finite() {
            return Err(Error::NonFinite(format!("parameters after iteration {it}")));
        }
        let finished = pool.drain_finished();
        let len = batch.len() as f64;
        let mean_of = |f: fn(&RewardBreakdown) -> f64| batch.rewards.iter().map(f).sum::<f64>() / len;
        let m = IterationMetrics {
            iteration: it,
            env_steps: it * t.n_envs * t.steps_per_iter,
            mean_reward: mean_of(|r| r.total),
            mean_task: mean_of(|r| r.task),
            mean_reg: mean_of(|r| r.reg),
            mean_pen: mean_of(|r| r.pen),
            mean_shortcut: mean_of(|r| r.shortcut),
            episodes: finished.len(),
            mean_episode_return: (!finished.is_empty())
                .then(|| finished.iter().map(|f| f.0).sum::<f64>() / finished.len() as f64),
            success_rate: (!finished.is_empty())
                .then(|| finished.iter().filter(|f| f.1).count() as f64 / finished.len() as f64),
            loss,
        };
        observe(&m);
        metrics.push(m);
        if let Some(dir) = out {
            write_atomic(&dir.join("metrics.jsonl"), metrics_jsonl(&metrics).as_bytes())?;
            if t.checkpoint_every > 0 && it % t.checkpoint_every == 0 {
                save(&net, it, &format!("checkpoints/iter_{it:06}.json"))?;
            }
        }
    }
    save(&net, t.iterations, "checkpoint.json")?;
    Ok(TrainOutcome { network: net, metrics })
}
