//! Transformer pointer policy with neighbourhood-masked attention.

pub mod tape;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aoi_graph::AoiGraph;
use crate::environment::{action_mask, deadend_check, CoverageEnv, EnvState, Reachability, RewardConfig};
use tape::{Mat, Tape, Var};

pub const SIGNAL_DIM: usize = 6;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid dimensions: {0}")]
    Dims(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no allowed action")]
    EmptyMask,
    #[error("replay: {0}")]
    Replay(#[from] crate::environment::EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyDims {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub glimpses: usize,
    pub k_hop: usize,
    /// Logit clip constant C.
    pub clip: f64,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self { d: 32, layers: 2, heads: 4, glimpses: 2, k_hop: 1, clip: 10.0 }
    }
}

impl PolicyDims {
    pub fn full_scale() -> Self {
        Self { d: 128, layers: 3, heads: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(PolicyError::Dims(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads)));
        }
        if self.k_hop == 0 {
            return Err(PolicyError::Dims("k_hop must be at least 1".into()));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(PolicyError::Dims("clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zero,
    One,
}

/// Named view of the flat parameter vector, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    slots: BTreeMap<String, Slot>,
    order: Vec<(String, Init)>,
    total: usize,
}

impl Layout {
    pub fn new(dims: &PolicyDims) -> Self {
        let d = dims.d;
        let mut l = Layout { slots: BTreeMap::new(), order: Vec::new(), total: 0 };
        l.add("embed.w", 4, d, Init::Xavier);
        l.add("embed.b", 1, d, Init::Zero);
        for i in 0..dims.layers {
            let p = format!("enc{i}");
            l.add(&format!("{p}.ln1.g"), 1, d, Init::One);
            l.add(&format!("{p}.ln1.b"), 1, d, Init::Zero);
            for w in ["wq", "wk", "wv", "wo"] {
                l.add(&format!("{p}.{w}"), d, d, Init::Xavier);
            }
            l.add(&format!("{p}.ln2.g"), 1, d, Init::One);
            l.add(&format!("{p}.ln2.b"), 1, d, Init::Zero);
            l.add(&format!("{p}.ff.w1"), d, 4 * d, Init::Xavier);
            l.add(&format!("{p}.ff.b1"), 1, 4 * d, Init::Zero);
            l.add(&format!("{p}.ff.w2"), 4 * d, d, Init::Xavier);
            l.add(&format!("{p}.ff.b2"), 1, d, Init::Zero);
        }
        l.add("enc.ln.g", 1, d, Init::One);
        l.add("enc.ln.b", 1, d, Init::Zero);
        l.add("sig.w", SIGNAL_DIM, d, Init::Xavier);
        l.add("sig.b", 1, d, Init::Zero);
        l.add("ctx.w", 4 * d, d, Init::Xavier);
        l.add("ctx.b", 1, d, Init::Zero);
        l.add("ctx.mlp.w1", d, d, Init::Xavier);
        l.add("ctx.mlp.b1", 1, d, Init::Zero);
        l.add("ctx.mlp.w2", d, d, Init::Xavier);
        l.add("ctx.mlp.b2", 1, d, Init::Zero);
        for k in 0..dims.glimpses {
            for w in ["wq", "wk", "wv", "wo"] {
                l.add(&format!("glimpse{k}.{w}"), d, d, Init::Xavier);
            }
        }
        l.add("ptr.wq", d, d, Init::Xavier);
        l.add("ptr.wk", d, d, Init::Xavier);
        l.add("ptr.wb", d, d, Init::Xavier);
        l.add("ptr.v", 1, d, Init::Xavier);
        l.add("ptr.alpha", 1, 1, Init::One);
        l
    }

    fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) {
        self.slots.insert(name.to_string(), Slot { offset: self.total, rows, cols });
        self.order.push((name.to_string(), init));
        self.total += rows * cols;
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn slot(&self, name: &str) -> Slot {
        self.slots[name]
    }

    /// Names in flat-vector order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|(n, _)| n.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub layout: Layout,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    /// Xavier-uniform weights, unit gains, zero biases, α = 1.
    pub fn init(dims: PolicyDims, seed: u64) -> Result<Self, PolicyError> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; layout.total()];
        for (name, init) in &layout.order {
            let s = layout.slots[name];
            let dst = &mut theta[s.offset..s.offset + s.len()];
            match init {
                Init::Zero => {}
                Init::One => dst.iter_mut().for_each(|v| *v = 1.0),
                Init::Xavier => {
                    let a = (6.0 / (s.rows + s.cols) as f64).sqrt();
                    dst.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
                }
            }
        }
        Ok(Self { dims, layout, theta })
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn get(&self, name: &str) -> &[f64] {
        let s = self.layout.slot(name);
        &self.theta[s.offset..s.offset + s.len()]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        let s = self.layout.slot(name);
        &mut self.theta[s.offset..s.offset + s.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

/// Decoder environment signals: coverage, heading (x, y), unvisited
/// neighbours of the current node / 6, cells with at most one unvisited
/// neighbour / |V|, reachability flag.
pub fn signals(state: &EnvState, graph: &AoiGraph) -> [f64; SIGNAL_DIM] {
    let n = graph.num_cells();
    let unvisited_nb = |c: usize| graph.neighbors(c).iter().filter(|&&j| j < n && !state.visited[j]).count();
    let cur_free = unvisited_nb(state.current) as f64 / 6.0;
    let fragile = (0..n).filter(|&c| !state.visited[c] && unvisited_nb(c) <= 1).count() as f64 / n as f64;
    // Features are a uniform scaling of positions, so the physical heading
    // is also the heading in the feature frame.
    let (hx, hy) = match state.heading {
        Some(h) if h.norm() > 0.0 => (h.x / h.norm(), h.y / h.norm()),
        _ => (0.0, 0.0),
    };
    let reach = if deadend_check(state, graph) == Reachability::Ok { 1.0 } else { 0.0 };
    [state.coverage(), hx, hy, cur_free, fragile, reach]
}

/// Tape nodes for one graph's encoding plus the decoder projections that
/// depend on it alone.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub tape: Tape,
    pub embeddings: Var,
    pub graph_mean: Var,
    glimpse_kv: Vec<(Var, Var)>,
    ptr_keys: Var,
    n_nodes: usize,
    base: usize,
}

/// Per-step outputs recorded on the tape.
#[derive(Debug, Clone)]
pub struct StepVars {
    /// Clipped pre-mask logits (1×N).
    pub logits: Var,
    /// Masked log-probabilities at the step temperature (1×N).
    pub logp: Var,
    pub mask: Vec<bool>,
}

fn p(tape: &mut Tape, params: &PolicyParams, name: &str) -> Var {
    let s = params.layout.slot(name);
    tape.param(&params.theta, s.offset, s.rows, s.cols)
}

/// `mask[i][j]` is true when j lies within `k` hops of i (self included).
pub fn hop_mask(graph: &AoiGraph, k: usize) -> Vec<bool> {
    let n = graph.num_nodes();
    let mut out = vec![false; n * n];
    for s in 0..n {
        let mut dist = vec![usize::MAX; n];
        dist[s] = 0;
        let mut frontier = vec![s];
        for h in 1..=k {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in graph.neighbors(u) {
                    if dist[v] == usize::MAX {
                        dist[v] = h;
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        for v in 0..n {
            out[s * n + v] = dist[v] != usize::MAX;
        }
    }
    out
}

/// Encoder: embedding, L pre-norm masked attention layers, final norm.
pub fn encode(params: &PolicyParams, graph: &AoiGraph) -> Encoded {
    let feats: Vec<f64> = graph.features().iter().flat_map(|f| f.to_array()).collect();
    encode_features(params, graph, feats)
}

/// As [`encode`] with an explicit N×4 row-major feature matrix.
pub fn encode_features(params: &PolicyParams, graph: &AoiGraph, feats: Vec<f64>) -> Encoded {
    let dims = params.dims;
    let (d, nh) = (dims.d, dims.heads);
    let dh = d / nh;
    let n = graph.num_nodes();
    let mut t = Tape::new();
    let x = t.constant(Mat::from_vec(n, 4, feats));
    let mask = hop_mask(graph, dims.k_hop);
    let (ew, eb) = (p(&mut t, params, "embed.w"), p(&mut t, params, "embed.b"));
    let h0 = t.matmul(x, ew);
    let mut h = t.add_row(h0, eb);
    for l in 0..dims.layers {
        let name = |s: &str| format!("enc{l}.{s}");
        let (g1, b1) = (p(&mut t, params, &name("ln1.g")), p(&mut t, params, &name("ln1.b")));
        let z = t.layer_norm(h, g1, b1);
        let (wq, wk, wv, wo) = (
            p(&mut t, params, &name("wq")),
            p(&mut t, params, &name("wk")),
            p(&mut t, params, &name("wv")),
            p(&mut t, params, &name("wo")),
        );
        let (q, k, v) = (t.matmul(z, wq), t.matmul(z, wk), t.matmul(z, wv));
        let mut heads = Vec::with_capacity(nh);
        for hd in 0..nh {
            let qh = t.slice_cols(q, hd * dh, dh);
            let kh = t.slice_cols(k, hd * dh, dh);
            let vh = t.slice_cols(v, hd * dh, dh);
            let s = t.matmul_t(qh, kh);
            let s = t.scale(s, 1.0 / (dh as f64).sqrt());
            let a = t.softmax_rows(s, mask.clone());
            heads.push(t.matmul(a, vh));
        }
        let cat = t.concat_cols(&heads);
        let o = t.matmul(cat, wo);
        h = t.add(h, o);
        let (g2, b2) = (p(&mut t, params, &name("ln2.g")), p(&mut t, params, &name("ln2.b")));
        let z2 = t.layer_norm(h, g2, b2);
        let (w1, fb1) = (p(&mut t, params, &name("ff.w1")), p(&mut t, params, &name("ff.b1")));
        let (w2, fb2) = (p(&mut t, params, &name("ff.w2")), p(&mut t, params, &name("ff.b2")));
        let f = t.matmul(z2, w1);
        let f = t.add_row(f, fb1);
        let f = t.relu(f);
        let f = t.matmul(f, w2);
        let f = t.add_row(f, fb2);
        h = t.add(h, f);
    }
    let (gf, bf) = (p(&mut t, params, "enc.ln.g"), p(&mut t, params, "enc.ln.b"));
    let hf = t.layer_norm(h, gf, bf);
    let mean = t.mean_rows(hf);
    let mut glimpse_kv = Vec::with_capacity(dims.glimpses);
    for k in 0..dims.glimpses {
        let wk = p(&mut t, params, &format!("glimpse{k}.wk"));
        let wv = p(&mut t, params, &format!("glimpse{k}.wv"));
        glimpse_kv.push((t.matmul(hf, wk), t.matmul(hf, wv)));
    }
    let pk = p(&mut t, params, "ptr.wk");
    let ptr_keys = t.matmul(hf, pk);
    Encoded {
        tape: t,
        embeddings: hf,
        graph_mean: mean,
        glimpse_kv,
        ptr_keys,
        n_nodes: n,
        base: graph.base(),
    }
}

impl Encoded {
    /// Context query, glimpse refinement and pointer logits for one state.
    pub fn decode_step(&mut self, params: &PolicyParams, state: &EnvState, graph: &AoiGraph, temperature: f64) -> Result<StepVars, PolicyError> {
        let mask = action_mask(state, graph);
        if !mask.iter().any(|&m| m) {
            return Err(PolicyError::EmptyMask);
        }
        let sig = signals(state, graph);
        let visited: Vec<f64> = (0..self.n_nodes).map(|j| if state.is_visited(j) { 1.0 } else { 0.0 }).collect();
        let logits = self.pointer(params, state.current, &sig, &visited, &mask);
        let logp = self.tape.log_softmax(logits, mask.clone(), temperature);
        Ok(StepVars { logits, logp, mask })
    }

    fn pointer(&mut self, params: &PolicyParams, current: usize, sig: &[f64; SIGNAL_DIM], visited: &[f64], mask: &[bool]) -> Var {
        let d = params.dims.d;
        let t = &mut self.tape;
        let h_cur = t.row(self.embeddings, current);
        let h_base = t.row(self.embeddings, self.base);
        let s = t.constant(Mat::from_vec(1, SIGNAL_DIM, sig.to_vec()));
        let (sw, sb) = (p(t, params, "sig.w"), p(t, params, "sig.b"));
        let s = t.matmul(s, sw);
        let s = t.add_row(s, sb);
        let c = t.concat_cols(&[h_cur, h_base, self.graph_mean, s]);
        let (cw, cb) = (p(t, params, "ctx.w"), p(t, params, "ctx.b"));
        let q0 = t.matmul(c, cw);
        let q0 = t.add_row(q0, cb);
        let (w1, b1, w2, b2) = (
            p(t, params, "ctx.mlp.w1"),
            p(t, params, "ctx.mlp.b1"),
            p(t, params, "ctx.mlp.w2"),
            p(t, params, "ctx.mlp.b2"),
        );
        let m = t.matmul(q0, w1);
        let m = t.add_row(m, b1);
        let m = t.relu(m);
        let m = t.matmul(m, w2);
        let m = t.add_row(m, b2);
        let mut q = t.add(q0, m);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for (k, &(gk, gv)) in self.glimpse_kv.iter().enumerate() {
            let wq = p(t, params, &format!("glimpse{k}.wq"));
            let wo = p(t, params, &format!("glimpse{k}.wo"));
            let qk = t.matmul(q, wq);
            let sc = t.matmul_t(qk, gk);
            let sc = t.scale(sc, inv_sqrt_d);
            let a = t.softmax_rows(sc, mask.to_vec());
            let g = t.matmul(a, gv);
            let g = t.matmul(g, wo);
            q = t.add(q, g);
        }
        let (wq, wb, v, alpha) = (
            p(t, params, "ptr.wq"),
            p(t, params, "ptr.wb"),
            p(t, params, "ptr.v"),
            p(t, params, "ptr.alpha"),
        );
        let qp = t.matmul(q, wq);
        let pre = t.add_row(self.ptr_keys, qp);
        let wb0 = t.row(wb, 0);
        let gate = t.scale_by(wb0, alpha);
        let vis = t.constant(Mat::from_vec(self.n_nodes, 1, visited.to_vec()));
        let bias = t.matmul(vis, gate);
        let pre = t.add(pre, bias);
        let pre = t.scale(pre, inv_sqrt_d);
        let act = t.tanh(pre);
        let raw = t.matmul_t(v, act);
        let squashed = t.tanh(raw);
        t.scale(squashed, params.dims.clip)
    }
}

/// Replays a fixed action sequence, recording every decision on one tape.
pub fn replay(
    params: &PolicyParams,
    graph: &AoiGraph,
    actions: &[usize],
    temperature: f64,
) -> Result<(Encoded, Vec<StepVars>), PolicyError> {
    let mut enc = encode(params, graph);
    let mut env = CoverageEnv::new(graph, RewardConfig::default());
    let mut steps = Vec::with_capacity(actions.len());
    for &a in actions {
        let sv = enc.decode_step(params, env.state(), graph, temperature)?;
        steps.push(sv);
        env.step(a)?;
    }
    Ok((enc, steps))
}

/// Softmax over allowed entries of `logits / temperature`; forbidden
/// entries get probability exactly 0.
pub fn masked_policy(logits: &[f64], mask: &[bool], temperature: f64) -> Result<Vec<f64>, PolicyError> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &a)| a)
        .map(|(l, _)| l / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(PolicyError::EmptyMask);
    }
    let e: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, &a)| if a { (l / temperature - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Adam moments saved alongside parameters so resumed runs are exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dims: PolicyDims,
    pub seed: u64,
    pub epoch: usize,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
    /// Best validation success rate so far and epochs without improvement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: &PolicyParams, seed: u64, epoch: usize) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                dims: params.dims,
                seed,
                epoch,
                param_count: params.len(),
            },
            params: params.theta.clone(),
            optimizer: None,
            progress: None,
        }
    }

    pub fn to_params(&self) -> Result<PolicyParams, PolicyError> {
        if self.header.format_version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported version {}", self.header.format_version)));
        }
        self.header.dims.validate()?;
        let layout = Layout::new(&self.header.dims);
        if layout.total() != self.params.len() || self.header.param_count != self.params.len() {
            return Err(PolicyError::Checkpoint(format!(
                "parameter count {} does not match dims ({})",
                self.params.len(),
                layout.total()
            )));
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Checkpoint("non-finite parameter".into()));
        }
        Ok(PolicyParams { dims: self.header.dims, layout, theta: self.params.clone() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoints always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, PolicyError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PolicyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests;
