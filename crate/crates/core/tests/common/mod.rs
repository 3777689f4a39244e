#![allow(dead_code)]

use pathnav::policy::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-5)`. The floor keeps structurally zero
/// gradients (e.g. key biases under softmax shift invariance) from being
/// judged on finite-difference roundoff alone.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn weighted_loss(g: &Graph, outs: &[Var], weights: &[Tensor]) -> f64 {
    outs.iter()
        .zip(weights)
        .map(|(&o, w)| g.value(o).data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn eval<F>(store: &ParamStore, inputs: &[Tensor], f: &F, weights: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Vec<Var>,
{
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let outs = f(&mut g, &vars);
    weighted_loss(&g, &outs, weights)
}

fn pick<R: Rng>(len: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Compares reverse-mode gradients of `Σ W ⊙ f(inputs)` with central
/// differences for every input tensor and every parameter, sampling at most
/// `per_tensor` entries of each. Returns the largest relative error.
pub fn gradcheck<F>(store: &mut ParamStore, inputs: &mut [Tensor], f: F, seed: u64, per_tensor: usize) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Vec<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let n = inputs.len();
    gradcheck_subset(store, inputs, f, seed, per_tensor, n, &ids)
}

/// As [`gradcheck`] but probes only the first `n_inputs` inputs and the given parameters.
pub fn gradcheck_subset<F>(
    store: &mut ParamStore,
    inputs: &mut [Tensor],
    f: F,
    seed: u64,
    per_tensor: usize,
    n_inputs: usize,
    params: &[ParamId],
) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Vec<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (weights, input_grads, param_grads) = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let outs = f(&mut g, &vars);
        let weights: Vec<Tensor> = outs
            .iter()
            .map(|&o| {
                let (r, c) = g.shape(o);
                Tensor::normal(r, c, 1.0, &mut rng)
            })
            .collect();
        let seeds: Vec<(Var, Tensor)> = outs.iter().copied().zip(weights.iter().cloned()).collect();
        let grads = g.backward(&seeds);
        let ig: Vec<Tensor> = vars
            .iter()
            .zip(inputs.iter())
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
            .collect();
        (weights, ig, grads.params)
    };
    let mut worst = 0.0_f64;
    for i in 0..n_inputs {
        for k in pick(inputs[i].len(), per_tensor, &mut rng) {
            let x0 = inputs[i].data[k];
            inputs[i].data[k] = x0 + FD_STEP;
            let lp = eval(store, inputs, &f, &weights);
            inputs[i].data[k] = x0 - FD_STEP;
            let lm = eval(store, inputs, &f, &weights);
            inputs[i].data[k] = x0;
            let num = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(input_grads[i].data[k], num));
        }
    }
    for &id in params {
        for k in pick(store.value(id).len(), per_tensor, &mut rng) {
            let x0 = store.value(id).data[k];
            store.value_mut(id).data[k] = x0 + FD_STEP;
            let lp = eval(store, inputs, &f, &weights);
            store.value_mut(id).data[k] = x0 - FD_STEP;
            let lm = eval(store, inputs, &f, &weights);
            store.value_mut(id).data[k] = x0;
            let num = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(param_grads.get(id).data[k], num));
        }
    }
    worst
}

pub mod encoding;
pub mod planning;
pub mod runs;

pub mod blocks {
    use super::*;
    use pathnav::pathrep::EncodedPath;
    use pathnav::policy::{
        CrossAttention, GruCell, IoSpec, Linear, ObsBatch, Observation, PathConditioning, PolicyConfig,
        PolicyNetwork, SelfAttention,
    };

    const PER_TENSOR: usize = 12;

    pub fn linear(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, i, o) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..9));
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", i, o, 1.0, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let (r, c) = store.value(id).shape();
            *store.value_mut(id) = Tensor::normal(r, c, 0.5, &mut rng);
        }
        let mut inputs = vec![Tensor::normal(b, i, 1.0, &mut rng)];
        gradcheck(&mut store, &mut inputs, |g, v| vec![lin.forward(g, v[0])], seed, PER_TENSOR)
    }

    pub fn gru_three_steps(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, i, h) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7));
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", i, h, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let (r, c) = store.value(id).shape();
            *store.value_mut(id) = Tensor::normal(r, c, 0.5, &mut rng);
        }
        let mut inputs = vec![
            Tensor::normal(b, i, 1.0, &mut rng),
            Tensor::normal(b, i, 1.0, &mut rng),
            Tensor::normal(b, i, 1.0, &mut rng),
            Tensor::uniform(b, h, 0.9, &mut rng),
        ];
        gradcheck(
            &mut store,
            &mut inputs,
            |g, v| {
                let mut hs = v[3];
                let mut outs = Vec::new();
                for &x in &v[..3] {
                    hs = cell.step(g, x, hs).unwrap();
                    outs.push(hs);
                }
                outs
            },
            seed,
            PER_TENSOR,
        )
    }

    pub fn self_attention(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.random_range(1..4);
        let d = heads * rng.random_range(1..4);
        let (n, groups) = (rng.random_range(1..7), rng.random_range(1..4));
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", d, heads, &mut rng).unwrap();
        let mut inputs = vec![Tensor::normal(groups * n, d, 1.0, &mut rng)];
        gradcheck(
            &mut store,
            &mut inputs,
            |g, v| vec![sa.forward(g, v[0], groups).unwrap().out],
            seed,
            PER_TENSOR,
        )
    }

    pub fn cross_attention_learned_query(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.random_range(1..4);
        let d = heads * rng.random_range(1..4);
        let (dq, dc) = (rng.random_range(1..7), rng.random_range(1..7));
        let (m, n, groups) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..4));
        let mut store = ParamStore::new();
        let query = store.register("query", Tensor::normal(m, dq, 1.0, &mut rng), true);
        let ca = CrossAttention::new(&mut store, "ca", dq, dc, d, heads, &mut rng).unwrap();
        let mut inputs = vec![Tensor::normal(groups * n, dc, 1.0, &mut rng)];
        gradcheck(
            &mut store,
            &mut inputs,
            |g, v| {
                let q = g.param(query);
                let q = g.tile_rows(q, groups);
                vec![ca.forward(g, q, v[0], groups).unwrap().out]
            },
            seed,
            PER_TENSOR,
        )
    }

    fn random_obs<R: Rng>(rng: &mut R, n_rays: usize, n_wp: usize) -> Observation {
        Observation {
            scan: (0..n_rays).map(|_| rng.random()).collect(),
            goal: [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), 0.0],
            proprio: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            path: EncodedPath {
                rows: (0..n_wp)
                    .map(|_| {
                        let a: f64 = rng.random_range(-3.2..3.2);
                        [a.cos(), a.sin(), 0.0, rng.random()]
                    })
                    .collect(),
            },
        }
    }

    /// Full recurrent actor-critic unrolled over two steps with a reset in between.
    pub fn policy_forward(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let variants = [
            PathConditioning::None,
            PathConditioning::RawConcat,
            PathConditioning::SelfAttn,
            PathConditioning::CrossAttnFixedQuery,
            PathConditioning::CrossAttnLearnedQuery,
        ];
        let heads = rng.random_range(1..3);
        let cfg = PolicyConfig {
            path_encoder: variants[(seed % 5) as usize],
            waypoint_dim: heads * rng.random_range(1..4),
            heads,
            n_queries: rng.random_range(1..3),
            query_dim: rng.random_range(2..6),
            path_embed_dim: rng.random_range(2..6),
            positional_embedding: rng.random(),
            scan_dim: rng.random_range(2..6),
            goal_embed_dim: rng.random_range(2..5),
            proprio_embed_dim: rng.random_range(2..5),
            hidden_dim: rng.random_range(2..7),
            head_dim: rng.random_range(2..6),
            critic_dim: rng.random_range(2..6),
            init_log_std: -0.5,
        };
        let io = IoSpec {
            n_rays: rng.random_range(3..9),
            n_waypoints: rng.random_range(2..6),
            action_limits: [1.0, 0.5, 1.0],
        };
        let (steps, b) = (2, rng.random_range(1..4));
        let mut net = PolicyNetwork::new(cfg, io.clone(), &mut rng).unwrap();
        let obs: Vec<Observation> = (0..steps * b).map(|_| random_obs(&mut rng, io.n_rays, io.n_waypoints)).collect();
        let privileged: Vec<[f64; 6]> = (0..steps * b).map(|_| std::array::from_fn(|_| rng.random())).collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        let batch = ObsBatch::new(&refs, &privileged).unwrap();
        let keep: Vec<Vec<f64>> = vec![vec![1.0; b], (0..b).map(|i| if i == 0 { 0.0 } else { 1.0 }).collect()];
        let mut inputs = vec![Tensor::uniform(b, net.hidden_dim(), 0.9, &mut rng)];
        let critic = net.critic_params();
        let mut store = std::mem::take(&mut net.store);
        let all: Vec<ParamId> = store.ids().collect();
        let actor = gradcheck_subset(
            &mut store,
            &mut inputs,
            |g, v| {
                let f = net.forward_sequence(g, &batch, steps, v[0], &keep).unwrap();
                vec![f.mean, f.hidden]
            },
            seed,
            6,
            1,
            &all,
        );
        // The critic reads a stop-gradient copy of the fused features, so its
        // output is checked against critic parameters only.
        let value = gradcheck_subset(
            &mut store,
            &mut inputs,
            |g, v| {
                let f = net.forward_sequence(g, &batch, steps, v[0], &keep).unwrap();
                vec![f.value]
            },
            seed + 1,
            6,
            0,
            &critic,
        );
        let err = actor.max(value);
        net.store = store;
        err
    }
}
