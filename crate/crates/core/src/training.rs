//! Critic-free GRPO: grouped rollouts, group-standardised advantages and a
//! per-step clipped surrogate with an entropy bonus.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aoi_graph::AoiGraph;
use crate::dataset::instance_seed;
use crate::geometry::Point;
use crate::inference::{run_episode, stream_seed, Decoding, Episode};
use crate::instance::AoiInstance;
use crate::policy::tape::Mat;
use crate::policy::{replay, Checkpoint, OptimizerState, PolicyDims, PolicyError, PolicyParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite probability ratio on instance {instance} step {step}")]
    NonFiniteRatio { instance: String, step: usize },
    #[error("non-finite parameters after update in epoch {epoch}")]
    NonFiniteParams { epoch: usize },
    #[error("checkpoint does not match the training config: {0}")]
    Resume(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Rollouts per instance (G).
    pub group_size: usize,
    /// Inner optimisation epochs per batch (K).
    pub inner_epochs: usize,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    /// Instances per batch (B).
    pub batch_size: usize,
    /// Trajectories per minibatch.
    pub minibatch: usize,
    pub grad_clip: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub p_aug: f64,
    pub temp_init: f64,
    pub temp_final: f64,
    pub temp_epochs: usize,
    pub adv_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub dims: PolicyDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            inner_epochs: 4,
            clip_eps: 0.2,
            entropy_coef: 0.02,
            lr: 3e-5,
            batch_size: 32,
            minibatch: 8,
            grad_clip: 0.5,
            max_epochs: 300,
            patience: 4,
            p_aug: 0.9,
            temp_init: 1.5,
            temp_final: 1.0,
            temp_epochs: 10,
            adv_eps: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            dims: PolicyDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.inner_epochs == 0 || self.batch_size == 0 || self.minibatch == 0 {
            return bad("inner_epochs, batch_size and minibatch must be positive");
        }
        if !(self.clip_eps > 0.0) || !(self.lr >= 0.0) || !(self.grad_clip > 0.0) || !(self.entropy_coef >= 0.0) {
            return bad("clip_eps and grad_clip must be positive, lr and entropy_coef non-negative");
        }
        if !(0.0..=1.0).contains(&self.p_aug) {
            return bad("p_aug must lie in [0, 1]");
        }
        if !(self.temp_init > 0.0 && self.temp_final > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(self.adv_eps >= 0.0) {
            return bad("adv_eps must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        self.dims.validate()?;
        Ok(())
    }

    /// Sampling temperature, linear from `temp_init` to `temp_final`.
    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.temp_epochs == 0 || epoch >= self.temp_epochs {
            return self.temp_final;
        }
        let u = epoch as f64 / self.temp_epochs as f64;
        self.temp_init + (self.temp_final - self.temp_init) * u
    }

    /// Learning rate, linear from `lr` down to zero at `max_epochs`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.max_epochs == 0 {
            return self.lr;
        }
        self.lr * (1.0 - epoch as f64 / self.max_epochs as f64).max(0.0)
    }
}

/// `(R − μ) / (σ + ε)` with the population standard deviation.
pub fn advantages(returns: &[f64], eps: f64) -> Vec<f64> {
    let g = returns.len() as f64;
    let mu = returns.iter().sum::<f64>() / g;
    let var = returns.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / g;
    let sigma = var.sqrt();
    returns.iter().map(|r| (r - mu) / (sigma + eps)).collect()
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)` and its derivative with respect to r.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Scales `grad` in place to norm at most `cap`; returns the factor used.
pub fn clip_grad_norm(grad: &mut [f64], cap: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm <= cap || norm == 0.0 {
        return 1.0;
    }
    let k = cap / norm;
    grad.iter_mut().for_each(|g| *g *= k);
    k
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            state: OptimizerState { step: 0, m: vec![0.0; n], v: vec![0.0; n] },
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        let s = &mut self.state;
        s.step += 1;
        let t = s.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..theta.len() {
            s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * grad[i];
            s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = s.m[i] / c1;
            let vh = s.v[i] / c2;
            theta[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Element of the hexagonal dihedral group plus an optional axis swap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Symmetry {
    /// Rotation by `rotation · 60°`.
    pub rotation: u8,
    /// Mirror across the x axis before rotating.
    pub reflect: bool,
    /// Exchange x and y after mirroring.
    pub swap: bool,
}

impl Symmetry {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Self { rotation: rng.gen_range(0..6), reflect: rng.gen(), swap: rng.gen() }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, p: Point, centre: Point) -> Point {
        let mut v = p.sub(centre);
        if self.reflect {
            v = Point::new(v.x, -v.y);
        }
        if self.swap {
            v = Point::new(v.y, v.x);
        }
        if !self.rotation.is_multiple_of(6) {
            v = v.rotate(f64::from(self.rotation % 6) * std::f64::consts::FRAC_PI_3);
        }
        v.add(centre)
    }
}

fn graph_centre(graph: &AoiGraph) -> Point {
    let n = graph.num_cells();
    let s = (0..n).fold(Point::new(0.0, 0.0), |acc, i| acc.add(graph.position(i)));
    s.scale(1.0 / n as f64)
}

/// Transforms node positions about the cell centroid; features are
/// recomputed, topology is untouched.
pub fn augment_graph(graph: &AoiGraph, sym: Symmetry) -> AoiGraph {
    if sym.is_identity() {
        return graph.clone();
    }
    let c = graph_centre(graph);
    graph.map_positions(|p| sym.apply(p, c))
}

/// Applies the same transform to the graph and the AOI polygon.
pub fn augment(instance: &AoiInstance, sym: Symmetry) -> AoiInstance {
    if sym.is_identity() {
        return instance.clone();
    }
    let c = graph_centre(&instance.graph);
    AoiInstance {
        graph: instance.graph.map_positions(|p| sym.apply(p, c)),
        polygon: instance.polygon.map_points(|p| sym.apply(p, c)),
        ..instance.clone()
    }
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub instance_id: String,
    /// The (possibly augmented) graph the rollouts ran on.
    pub graph: AoiGraph,
    /// Trajectories with per-step log-probabilities under θ_old.
    pub episodes: Vec<Episode>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.ret).collect()
    }
}

/// Samples `g` trajectories at `temperature`, each from its own seed stream.
pub fn collect_group(
    instance_id: &str,
    graph: &AoiGraph,
    params: &PolicyParams,
    temperature: f64,
    g: usize,
    seed: u64,
    adv_eps: f64,
) -> Result<RolloutGroup, PolicyError> {
    let episodes = (0..g)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, k as u64));
            run_episode(params, graph, temperature, Decoding::Sample(&mut rng))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let returns: Vec<f64> = episodes.iter().map(|e| e.ret).collect();
    Ok(RolloutGroup {
        instance_id: instance_id.to_string(),
        graph: graph.clone(),
        advantages: advantages(&returns, adv_eps),
        episodes,
    })
}

/// One trajectory inside a minibatch.
#[derive(Debug, Clone, Copy)]
pub struct TrajRef<'a> {
    pub instance_id: &'a str,
    pub graph: &'a AoiGraph,
    pub episode: &'a Episode,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub steps: usize,
    pub mean_entropy: f64,
    /// Fraction of steps where the clipped branch was active.
    pub clip_fraction: f64,
}

struct TrajTerms {
    surrogate: f64,
    entropy: f64,
    clipped: usize,
    grad: Vec<f64>,
}

/// Negative mean per-step clipped surrogate minus the entropy bonus, with
/// gradients. Every valid step of every trajectory weighs equally.
pub fn grpo_loss(params: &PolicyParams, batch: &[TrajRef<'_>], cfg: &TrainConfig, temperature: f64) -> Result<LossOutput, TrainError> {
    let steps: usize = batch.iter().map(|t| t.episode.logp.len()).sum();
    if steps == 0 {
        return Ok(LossOutput { loss: 0.0, grad: vec![0.0; params.len()], steps, mean_entropy: 0.0, clip_fraction: 0.0 });
    }
    let inv = 1.0 / steps as f64;
    let terms = batch
        .par_iter()
        .map(|tr| -> Result<TrajTerms, TrainError> {
            let actions = tr.episode.actions();
            let (enc, svs) = replay(params, tr.graph, actions, temperature)?;
            let mut tape = enc.tape;
            let mut seeds = Vec::with_capacity(2 * actions.len());
            let mut out = TrajTerms { surrogate: 0.0, entropy: 0.0, clipped: 0, grad: vec![0.0; params.len()] };
            for (k, (sv, &a)) in svs.iter().zip(actions).enumerate() {
                let lp = tape.pick(sv.logp, a);
                let h = tape.entropy(sv.logp);
                let ratio = (tape.scalar(lp) - tr.episode.logp[k]).exp();
                if !ratio.is_finite() {
                    return Err(TrainError::NonFiniteRatio { instance: tr.instance_id.to_string(), step: k });
                }
                let (s, ds_dr) = clipped_surrogate(ratio, tr.advantage, cfg.clip_eps);
                out.surrogate += s;
                out.entropy += tape.scalar(h);
                if ds_dr == 0.0 && tr.advantage != 0.0 {
                    out.clipped += 1;
                }
                seeds.push((lp, Mat::from_vec(1, 1, vec![-ds_dr * ratio * inv])));
                seeds.push((h, Mat::from_vec(1, 1, vec![-cfg.entropy_coef * inv])));
            }
            tape.backward(&seeds, &mut out.grad);
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut grad = vec![0.0; params.len()];
    let (mut sur, mut ent, mut clipped) = (0.0, 0.0, 0);
    for t in &terms {
        grad.iter_mut().zip(&t.grad).for_each(|(g, v)| *g += v);
        sur += t.surrogate;
        ent += t.entropy;
        clipped += t.clipped;
    }
    Ok(LossOutput {
        loss: -sur * inv - cfg.entropy_coef * ent * inv,
        grad,
        steps,
        mean_entropy: ent * inv,
        clip_fraction: clipped as f64 * inv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_sr: f64,
    pub mean_return: f64,
    pub entropy: f64,
    pub lr: f64,
    pub temperature: f64,
}

/// One pass over the training split.
pub fn train_epoch(
    train: &[AoiInstance],
    params: &mut PolicyParams,
    adam: &mut Adam,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    let temperature = cfg.temperature(epoch);
    let lr = cfg.learning_rate(epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(cfg.seed ^ 0x6772_706f, epoch as u64));
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let (mut done, mut total, mut ret_sum, mut ent_sum, mut ent_n) = (0usize, 0usize, 0.0, 0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let jobs: Vec<(usize, Symmetry, u64)> = chunk
            .iter()
            .map(|&i| {
                let sym = if rng.gen::<f64>() < cfg.p_aug { Symmetry::random(&mut rng) } else { Symmetry::default() };
                (i, sym, rng.gen())
            })
            .collect();
        let groups = jobs
            .par_iter()
            .map(|&(i, sym, seed)| {
                let inst = &train[i];
                let g = augment_graph(&inst.graph, sym);
                collect_group(&inst.id, &g, params, temperature, cfg.group_size, seed, cfg.adv_eps)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut flat = Vec::new();
        for grp in &groups {
            for (e, &a) in grp.episodes.iter().zip(&grp.advantages) {
                flat.push(TrajRef { instance_id: &grp.instance_id, graph: &grp.graph, episode: e, advantage: a });
                total += 1;
                done += usize::from(e.completed());
                ret_sum += e.ret;
                ent_sum += e.entropy.iter().sum::<f64>();
                ent_n += e.entropy.len();
            }
        }
        for _ in 0..cfg.inner_epochs {
            flat.shuffle(&mut rng);
            for mb in flat.chunks(cfg.minibatch) {
                let mut out = grpo_loss(params, mb, cfg, temperature)?;
                clip_grad_norm(&mut out.grad, cfg.grad_clip);
                adam.step(&mut params.theta, &out.grad, lr);
                if !params.all_finite() {
                    return Err(TrainError::NonFiniteParams { epoch });
                }
            }
        }
    }
    let frac = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    Ok(EpochStats {
        train_sr: frac(done as f64, total),
        mean_return: frac(ret_sum, total),
        entropy: frac(ent_sum, ent_n),
        lr,
        temperature,
    })
}

/// Fraction of instances that greedy decoding covers without revisits.
pub fn greedy_success_rate(instances: &[AoiInstance], params: &PolicyParams) -> Result<f64, PolicyError> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let hits = instances
        .par_iter()
        .map(|inst| run_episode(params, &inst.graph, 1.0, Decoding::Greedy).map(|e| usize::from(e.completed())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / instances.len() as f64)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_sr: f64,
    pub val_sr: f64,
    pub mean_return: f64,
    pub entropy: f64,
    pub lr: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    best_val: Option<f64>,
    best_epoch: Option<usize>,
    stale: usize,
    best_params: Vec<f64>,
}

/// Training loop state: parameters, optimiser moments and early stopping.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: PolicyParams,
    pub adam: Adam,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: PolicyParams,
    pub stale: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let params = PolicyParams::init(cfg.dims, cfg.seed)?;
        Ok(Self {
            adam: Adam::new(params.len(), &cfg),
            best_params: params.clone(),
            params,
            cfg,
            epoch: 0,
            best_val: None,
            best_epoch: None,
            stale: 0,
        })
    }

    /// Restores a run saved by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        cfg.validate()?;
        if ckpt.header.dims != cfg.dims || ckpt.header.seed != cfg.seed {
            return Err(TrainError::Resume("dims or seed differ".into()));
        }
        let params = ckpt.to_params()?;
        let mut t = Self::new(cfg)?;
        if let Some(opt) = &ckpt.optimizer {
            if opt.m.len() != params.len() || opt.v.len() != params.len() {
                return Err(TrainError::Resume("optimizer state size".into()));
            }
            t.adam.state = opt.clone();
        }
        if let Some(p) = &ckpt.progress {
            let p: Progress = serde_json::from_value(p.clone()).map_err(|e| TrainError::Resume(e.to_string()))?;
            if p.best_params.len() != params.len() {
                return Err(TrainError::Resume("best parameter count".into()));
            }
            t.best_val = p.best_val;
            t.best_epoch = p.best_epoch;
            t.stale = p.stale;
            t.best_params = PolicyParams { theta: p.best_params, ..params.clone() };
        } else {
            t.best_params = params.clone();
        }
        t.params = params;
        t.epoch = ckpt.header.epoch;
        Ok(t)
    }

    /// Full resumable state; `header.epoch` is the next epoch to run.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(&self.params, self.cfg.seed, self.epoch);
        c.optimizer = Some(self.adam.state.clone());
        let progress = Progress {
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            stale: self.stale,
            best_params: self.best_params.theta.clone(),
        };
        c.progress = Some(serde_json::to_value(progress).expect("progress serializes"));
        c
    }

    /// The retained best-validation parameters as a plain checkpoint.
    pub fn best_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.best_params, self.cfg.seed, self.best_epoch.map_or(0, |e| e + 1))
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.max_epochs || self.stale >= self.cfg.patience
    }

    /// Trains one epoch, validates greedily and updates early stopping.
    pub fn run_epoch(&mut self, train: &[AoiInstance], val: &[AoiInstance]) -> Result<EpochLog, TrainError> {
        let epoch = self.epoch;
        let stats = train_epoch(train, &mut self.params, &mut self.adam, &self.cfg, epoch)?;
        let val_sr = greedy_success_rate(val, &self.params)?;
        if self.best_val.is_none_or(|b| val_sr > b) {
            self.best_val = Some(val_sr);
            self.best_epoch = Some(epoch);
            self.best_params = self.params.clone();
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch,
            train_sr: stats.train_sr,
            val_sr,
            mean_return: stats.mean_return,
            entropy: stats.entropy,
            lr: stats.lr,
            temperature: stats.temperature,
        })
    }

    /// Runs epochs until the cap or early stopping, reporting each one.
    pub fn fit(
        &mut self,
        train: &[AoiInstance],
        val: &[AoiInstance],
        mut on_epoch: impl FnMut(&Trainer, &EpochLog),
    ) -> Result<Vec<EpochLog>, TrainError> {
        let mut logs = Vec::new();
        while !self.finished() {
            let log = self.run_epoch(train, val)?;
            on_epoch(self, &log);
            logs.push(log);
        }
        Ok(logs)
    }
}
