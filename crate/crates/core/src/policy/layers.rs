use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(rows, cols, bound, rng)
}

fn shape_err(what: &str, expected: impl fmt::Debug, got: impl fmt::Debug) -> Error {
    Error::Shape(format!("{what}: expected {expected:?}, got {got:?}"))
}

/// `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.register(format!("{name}.w"), xavier(in_dim, out_dim, gain, rng), true);
        let b = store.register(format!("{name}.b"), Tensor::zeros(1, out_dim), true);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        assert_eq!(g.shape(x).1, self.in_dim, "linear input width");
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Gated recurrent cell with reset gate applied to the hidden projection.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wi: ParamId,
    pub wh: ParamId,
    pub bi: ParamId,
    pub bh: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let wi = store.register(format!("{name}.wi"), xavier(in_dim, 3 * hidden, 1.0, rng), true);
        let wh = store.register(format!("{name}.wh"), xavier(hidden, 3 * hidden, 1.0, rng), true);
        let bi = store.register(format!("{name}.bi"), Tensor::zeros(1, 3 * hidden), true);
        let bh = store.register(format!("{name}.bh"), Tensor::zeros(1, 3 * hidden), true);
        Self {
            wi,
            wh,
            bi,
            bh,
            in_dim,
            hidden,
        }
    }

    /// `h' = (1 − z) ⊙ n + z ⊙ h`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let (xb, xd) = g.shape(x);
        let (hb, hd) = g.shape(h);
        if xd != self.in_dim || hd != self.hidden || xb != hb {
            return Err(shape_err(
                "gru step",
                (xb, self.in_dim, self.hidden),
                (xb, xd, (hb, hd)),
            ));
        }
        let hs = self.hidden;
        let (wi, wh, bi, bh) = (g.param(self.wi), g.param(self.wh), g.param(self.bi), g.param(self.bh));
        let gi = g.matmul(x, wi);
        let gi = g.add_row(gi, bi);
        let gh = g.matmul(h, wh);
        let gh = g.add_row(gh, bh);
        let (ir, iz, inn) = (g.slice_cols(gi, 0, hs), g.slice_cols(gi, hs, hs), g.slice_cols(gi, 2 * hs, hs));
        let (hr, hz, hn) = (g.slice_cols(gh, 0, hs), g.slice_cols(gh, hs, hs), g.slice_cols(gh, 2 * hs, hs));
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);
        let z = g.add(iz, hz);
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn);
        let n = g.add(inn, rn);
        let n = g.tanh(n);
        let keep = g.one_minus(z);
        let a = g.mul(keep, n);
        let b = g.mul(z, h);
        Ok(g.add(a, b))
    }
}

/// Output of an attention block together with the node holding its weights.
#[derive(Debug, Clone, Copy)]
pub struct AttnOut {
    pub out: Var,
    pub weights: Var,
}

/// Multi-head self-attention with a residual connection over groups of rows.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Shape(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            dim,
            heads,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, 1.0, rng),
        })
    }

    /// `x` holds `groups` consecutive sets of rows; rows attend within their set.
    pub fn forward(&self, g: &mut Graph, x: Var, groups: usize) -> Result<AttnOut> {
        let (rows, cols) = g.shape(x);
        if cols != self.dim || groups == 0 || rows % groups != 0 {
            return Err(shape_err("self-attention input", ("k·groups", self.dim), (rows, cols)));
        }
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let weights = g.attention(q, k, v, groups, self.heads);
        let o = self.o.forward(g, weights);
        Ok(AttnOut {
            out: g.add(x, o),
            weights,
        })
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.o.param_count()
    }
}

/// Multi-head cross-attention: query rows attend over context rows.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub query_dim: usize,
    pub context_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Shape(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query_dim,
            context_dim,
            dim,
            heads,
            q: Linear::new(store, &format!("{name}.q"), query_dim, dim, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), context_dim, dim, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), context_dim, dim, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, query_dim, 1.0, rng),
        })
    }

    /// `query` is `[groups·M, query_dim]`, `context` is `[groups·N, context_dim]`.
    pub fn forward(&self, g: &mut Graph, query: Var, context: Var, groups: usize) -> Result<AttnOut> {
        let (qr, qc) = g.shape(query);
        let (cr, cc) = g.shape(context);
        if qc != self.query_dim || cc != self.context_dim || groups == 0 || qr % groups != 0 || cr % groups != 0 {
            return Err(shape_err(
                "cross-attention inputs",
                (self.query_dim, self.context_dim),
                ((qr, qc), (cr, cc)),
            ));
        }
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let weights = g.attention(q, k, v, groups, self.heads);
        Ok(AttnOut {
            out: self.o.forward(g, weights),
            weights,
        })
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.o.param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathEncoderKind {
    RawConcat,
    SelfAttn,
    CrossAttnFixedQuery,
    CrossAttnLearnedQuery,
}

impl PathEncoderKind {
    pub const ALL: [PathEncoderKind; 4] = [
        PathEncoderKind::RawConcat,
        PathEncoderKind::SelfAttn,
        PathEncoderKind::CrossAttnFixedQuery,
        PathEncoderKind::CrossAttnLearnedQuery,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            PathEncoderKind::RawConcat => "raw-concat",
            PathEncoderKind::SelfAttn => "self-attn",
            PathEncoderKind::CrossAttnFixedQuery => "cross-attn-fixed-query",
            PathEncoderKind::CrossAttnLearnedQuery => "cross-attn-learned-query",
        }
    }
}

impl fmt::Display for PathEncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PathEncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == s).ok_or_else(|| {
            let valid: Vec<_> = Self::ALL.iter().map(|k| k.tag()).collect();
            Error::Config(format!("unknown path encoder '{s}', expected one of {}", valid.join(", ")))
        })
    }
}

/// Dimensions shared by all path encoder variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEncoderDims {
    pub n_waypoints: usize,
    pub waypoint_dim: usize,
    pub heads: usize,
    pub n_queries: usize,
    pub query_dim: usize,
    pub embed_dim: usize,
    pub positional: bool,
}

impl Default for PathEncoderDims {
    fn default() -> Self {
        Self {
            n_waypoints: 15,
            waypoint_dim: 32,
            heads: 2,
            n_queries: 1,
            query_dim: 64,
            embed_dim: 64,
            positional: true,
        }
    }
}

/// Maps `[B·N, 4]` waypoint features to a `[B, embed_dim]` embedding.
#[derive(Debug, Clone)]
pub struct PathEncoder {
    pub kind: PathEncoderKind,
    pub dims: PathEncoderDims,
    in_proj: Option<Linear>,
    pos: Option<ParamId>,
    self_attn: Option<SelfAttention>,
    query: Option<ParamId>,
    cross: Option<CrossAttention>,
    out: Linear,
}

pub const WAYPOINT_FEATURES: usize = 4;

/// Builds a path encoder from its tag.
pub fn build_variant<R: Rng + ?Sized>(
    tag: &str,
    dims: &PathEncoderDims,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<PathEncoder> {
    PathEncoder::new(tag.parse()?, dims, store, rng)
}

impl PathEncoder {
    pub fn new<R: Rng + ?Sized>(
        kind: PathEncoderKind,
        dims: &PathEncoderDims,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.n_waypoints == 0 || dims.embed_dim == 0 {
            return Err(Error::Config("path encoder dims must be positive".into()));
        }
        let n = dims.n_waypoints;
        let dw = dims.waypoint_dim;
        let mut enc = Self {
            kind,
            dims: dims.clone(),
            in_proj: None,
            pos: None,
            self_attn: None,
            query: None,
            cross: None,
            out: Linear {
                w: ParamId(0),
                b: ParamId(0),
                in_dim: 0,
                out_dim: 0,
            },
        };
        let pooled = match kind {
            PathEncoderKind::RawConcat => n * WAYPOINT_FEATURES,
            _ => {
                enc.in_proj = Some(Linear::new(store, "path.in", WAYPOINT_FEATURES, dw, 1.0, rng));
                if dims.positional {
                    enc.pos = Some(store.register("path.pos", Tensor::normal(n, dw, 0.1, rng), true));
                }
                enc.self_attn = Some(SelfAttention::new(store, "path.self", dw, dims.heads, rng)?);
                if kind == PathEncoderKind::SelfAttn {
                    dw
                } else {
                    let learned = kind == PathEncoderKind::CrossAttnLearnedQuery;
                    if dims.n_queries == 0 {
                        return Err(Error::Config("n_queries must be positive".into()));
                    }
                    let q = Tensor::normal(dims.n_queries, dims.query_dim, 1.0, rng);
                    enc.query = Some(store.register("path.query", q, learned));
                    enc.cross = Some(CrossAttention::new(
                        store,
                        "path.cross",
                        dims.query_dim,
                        dw,
                        dw,
                        dims.heads,
                        rng,
                    )?);
                    dims.query_dim
                }
            }
        };
        enc.out = Linear::new(store, "path.out", pooled, dims.embed_dim, 1.0, rng);
        Ok(enc)
    }

    pub fn embed_dim(&self) -> usize {
        self.dims.embed_dim
    }

    /// Linear pre-activation of the final projection.
    pub fn pre_activation(&self, g: &mut Graph, path: Var, batch: usize) -> Result<Var> {
        let n = self.dims.n_waypoints;
        let (rows, cols) = g.shape(path);
        if cols != WAYPOINT_FEATURES || rows != batch * n {
            return Err(shape_err("path features", (batch * n, WAYPOINT_FEATURES), (rows, cols)));
        }
        let pooled = match self.kind {
            PathEncoderKind::RawConcat => g.reshape(path, batch, n * WAYPOINT_FEATURES),
            _ => {
                let mut x = self.in_proj.as_ref().expect("projection").forward(g, path);
                if let Some(pos) = self.pos {
                    let p = g.param(pos);
                    let p = g.tile_rows(p, batch);
                    x = g.add(x, p);
                }
                let ctx = self.self_attn.as_ref().expect("self-attention").forward(g, x, batch)?.out;
                match &self.cross {
                    None => g.group_mean(ctx, n),
                    Some(cross) => {
                        let q = g.param(self.query.expect("query"));
                        let q = g.tile_rows(q, batch);
                        let out = cross.forward(g, q, ctx, batch)?.out;
                        g.group_mean(out, self.dims.n_queries)
                    }
                }
            }
        };
        Ok(self.out.forward(g, pooled))
    }

    pub fn forward(&self, g: &mut Graph, path: Var, batch: usize) -> Result<Var> {
        let pre = self.pre_activation(g, path, batch)?;
        Ok(g.tanh(pre))
    }

    /// Number of scalar parameters including frozen ones.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        let mut ids = vec![self.out.w, self.out.b];
        if let Some(l) = &self.in_proj {
            ids.extend([l.w, l.b]);
        }
        if let Some(p) = self.pos {
            ids.push(p);
        }
        if let Some(q) = self.query {
            ids.push(q);
        }
        for l in self
            .self_attn
            .iter()
            .flat_map(|a| [&a.q, &a.k, &a.v, &a.o])
            .chain(self.cross.iter().flat_map(|a| [&a.q, &a.k, &a.v, &a.o]))
        {
            ids.extend([l.w, l.b]);
        }
        ids.iter().map(|&id| store.value(id).len()).sum()
    }

    pub fn query_param(&self) -> Option<ParamId> {
        self.query
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identical_rows_stay_identical() {
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 8, 2, &mut rng()).unwrap();
        let row: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let data: Vec<f64> = (0..5).flat_map(|_| row.clone()).collect();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_vec(5, 8, data));
        let out = sa.forward(&mut g, x, 1).unwrap();
        let y = g.value(out.out);
        for r in 1..5 {
            assert_eq!(y.row(r), y.row(0));
        }
        let w = g.attention_probs(out.weights).unwrap();
        for chunk in w.chunks(5) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        assert!(SelfAttention::new(&mut store, "sa", 6, 4, &mut rng()).is_err());
    }

    #[test]
    fn attention_rejects_bad_width() {
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 8, 2, &mut rng()).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(3, 6));
        assert!(sa.forward(&mut g, x, 1).is_err());
    }

    #[test]
    fn cross_attention_shape_independent_of_context_length() {
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut store, "ca", 12, 8, 8, 2, &mut rng()).unwrap();
        for n in [5, 15, 50] {
            let mut g = Graph::new(&store);
            let q = g.input(Tensor::normal(3, 12, 1.0, &mut rng()));
            let c = g.input(Tensor::normal(n, 8, 1.0, &mut rng()));
            let out = ca.forward(&mut g, q, c, 1).unwrap();
            assert_eq!(g.shape(out.out), (3, 12));
        }
    }

    #[test]
    fn zero_gru_stays_zero() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 5, 7, &mut rng());
        for id in store.ids().collect::<Vec<_>>() {
            let v = store.value_mut(id);
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(2, 5));
        let h = g.input(Tensor::zeros(2, 7));
        let h2 = cell.step(&mut g, x, h).unwrap();
        assert!(g.value(h2).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_tag_is_rejected() {
        let mut store = ParamStore::new();
        assert!(build_variant("lstm", &PathEncoderDims::default(), &mut store, &mut rng()).is_err());
        for k in PathEncoderKind::ALL {
            assert_eq!(k.tag().parse::<PathEncoderKind>().unwrap(), k);
        }
    }
}
