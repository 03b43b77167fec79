//! Test-time decoding: greedy, best-of-K sampling and adjacency-preserving
//! 2-opt refinement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aoi_graph::AoiGraph;
use crate::environment::{heading_change, turn_penalty, CoverageEnv, Outcome, RewardConfig};
use crate::heuristics::Route;
use crate::policy::{encode, PolicyError, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Greedy,
    Bok,
    Bok2opt,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Greedy => "greedy",
            Mode::Bok => "bok",
            Mode::Bok2opt => "bok_2opt",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Mode::Greedy),
            "bok" => Ok(Mode::Bok),
            "bok_2opt" | "bok2opt" => Ok(Mode::Bok2opt),
            _ => Err(format!("unknown mode '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: Mode,
    pub k: usize,
    pub temperature: f64,
    pub two_opt_max_passes: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { mode: Mode::Bok2opt, k: 16, temperature: 1.0, two_opt_max_passes: 50, seed: 0 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err("temperature must be positive".into());
        }
        Ok(())
    }
}

/// How each action is chosen during an episode.
pub enum Decoding<'a> {
    Greedy,
    Sample(&'a mut ChaCha8Rng),
}

/// One policy episode with the per-step quantities training needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Base first, then every chosen node.
    pub nodes: Vec<usize>,
    /// Log-probability of each chosen action.
    pub logp: Vec<f64>,
    /// Entropy of each step's action distribution.
    pub entropy: Vec<f64>,
    pub ret: f64,
    pub outcome: Outcome,
    pub covered: usize,
    /// Physical path length in NM.
    pub length: f64,
}

impl Episode {
    pub fn actions(&self) -> &[usize] {
        &self.nodes[1..]
    }

    pub fn completed(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    pub fn route(&self, graph: &AoiGraph) -> Route {
        Route::from_nodes(graph, self.nodes.clone())
    }
}

/// Categorical draw from log-probabilities; forbidden entries are −∞.
fn sample_index(logp: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &l) in logp.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        acc += l.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn argmax_allowed(values: &[f64], mask: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in values.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best.expect("non-empty mask")
}

/// Runs the policy until completion or dead end.
pub fn run_episode(
    params: &PolicyParams,
    graph: &AoiGraph,
    temperature: f64,
    mut decoding: Decoding<'_>,
) -> Result<Episode, PolicyError> {
    let mut enc = encode(params, graph);
    let mut env = CoverageEnv::new(graph, RewardConfig::default());
    let mut ep = Episode {
        nodes: vec![graph.base()],
        logp: Vec::new(),
        entropy: Vec::new(),
        ret: 0.0,
        outcome: Outcome::Running,
        covered: 0,
        length: 0.0,
    };
    while !env.state().done() {
        let sv = enc.decode_step(params, env.state(), graph, temperature)?;
        let logp = &enc.tape.value(sv.logp).data;
        let a = match &mut decoding {
            Decoding::Greedy => argmax_allowed(&enc.tape.value(sv.logits).data, &sv.mask),
            Decoding::Sample(rng) => sample_index(logp, rng),
        };
        ep.logp.push(logp[a]);
        ep.entropy.push(
            -logp
                .iter()
                .filter(|l| l.is_finite())
                .map(|&l| l.exp() * l)
                .sum::<f64>(),
        );
        let from = env.state().current;
        ep.ret += env.step(a)?.reward;
        ep.length += graph.travel_cost(from, a);
        ep.nodes.push(a);
    }
    ep.outcome = env.state().outcome;
    ep.covered = env.state().visited_count;
    Ok(ep)
}

/// Masked-uniform random policy episode.
pub fn random_episode(graph: &AoiGraph, rng: &mut ChaCha8Rng) -> Episode {
    let mut env = CoverageEnv::new(graph, RewardConfig::default());
    let mut ep = Episode {
        nodes: vec![graph.base()],
        logp: Vec::new(),
        entropy: Vec::new(),
        ret: 0.0,
        outcome: Outcome::Running,
        covered: 0,
        length: 0.0,
    };
    while !env.state().done() {
        let allowed: Vec<usize> = env.mask().iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        let k = allowed.len() as f64;
        let a = allowed[rng.gen_range(0..allowed.len())];
        ep.logp.push(-k.ln());
        ep.entropy.push(k.ln());
        let from = env.state().current;
        ep.ret += env.step(a).expect("sampled from the mask").reward;
        ep.length += graph.travel_cost(from, a);
        ep.nodes.push(a);
    }
    ep.outcome = env.state().outcome;
    ep.covered = env.state().visited_count;
    ep
}

/// Argmax decoding; ties go to the lowest node index.
pub fn greedy(graph: &AoiGraph, params: &PolicyParams) -> Result<Route, PolicyError> {
    Ok(run_episode(params, graph, 1.0, Decoding::Greedy)?.route(graph))
}

/// Per-candidate stream seed.
pub fn stream_seed(seed: u64, k: u64) -> u64 {
    crate::dataset::instance_seed(seed, k)
}

/// The K candidate episodes of best-of-K. With K ≥ 2 candidate 0 is the
/// greedy rollout and the rest are seeded samples.
pub fn candidates(graph: &AoiGraph, params: &PolicyParams, cfg: &InferenceConfig) -> Result<Vec<Episode>, PolicyError> {
    (0..cfg.k)
        .into_par_iter()
        .map(|k| {
            if k == 0 && cfg.k > 1 {
                run_episode(params, graph, 1.0, Decoding::Greedy)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, k as u64));
                run_episode(params, graph, cfg.temperature, Decoding::Sample(&mut rng))
            }
        })
        .collect()
}

/// Index of the winning episode: the highest-return completion, else the
/// widest coverage with the shortest length. Earlier candidates win ties.
pub fn select_best(episodes: &[Episode]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in episodes.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let o = &episodes[b];
                match (e.completed(), o.completed()) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => e.ret > o.ret,
                    (false, false) => e.covered > o.covered || (e.covered == o.covered && e.length < o.length),
                }
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

pub fn best_of_k(graph: &AoiGraph, params: &PolicyParams, cfg: &InferenceConfig) -> Result<Route, PolicyError> {
    let eps = candidates(graph, params, cfg)?;
    let i = select_best(&eps).expect("k >= 1");
    Ok(eps[i].route(graph))
}

/// Decodes with the configured mode.
pub fn solve(graph: &AoiGraph, params: &PolicyParams, cfg: &InferenceConfig) -> Result<Route, PolicyError> {
    match cfg.mode {
        Mode::Greedy => greedy(graph, params),
        Mode::Bok => best_of_k(graph, params, cfg),
        Mode::Bok2opt => {
            let r = best_of_k(graph, params, cfg)?;
            Ok(if r.hamiltonian { two_opt(&r, graph, &RewardConfig::default(), cfg.two_opt_max_passes) } else { r })
        }
    }
}

/// Path cost with the reward's relative weighting: density-scaled distance
/// plus `|turn_coeff| / |dist_coeff|` times the turn penalties.
pub fn path_cost(graph: &AoiGraph, nodes: &[usize], cfg: &RewardConfig) -> f64 {
    let env = CoverageEnv::new(graph, *cfg);
    let w = cfg.turn_coeff.abs() / cfg.dist_coeff.abs();
    let mut cost = 0.0;
    let mut heading = None;
    for s in nodes.windows(2) {
        cost += env.scaled_distance(s[0], s[1]);
        let mv = graph.position(s[1]).sub(graph.position(s[0]));
        if mv.norm() == 0.0 {
            continue;
        }
        if let Some(prev) = heading {
            cost += w * turn_penalty(heading_change(prev, mv), cfg.c_base).expect("angle in range");
        }
        heading = Some(mv);
    }
    cost
}

/// First-improvement segment reversal. A reversal of `nodes[i..=j]` is
/// accepted only when both new junctions are graph edges and the cost
/// strictly drops. Each scan counts as one pass.
pub fn two_opt(route: &Route, graph: &AoiGraph, cfg: &RewardConfig, max_passes: usize) -> Route {
    if !route.hamiltonian {
        return route.clone();
    }
    let mut nodes = route.nodes.clone();
    let last = nodes.len() - 1;
    let mut cost = path_cost(graph, &nodes, cfg);
    let mut cand = nodes.clone();
    for _ in 0..max_passes {
        let mut improved = false;
        'scan: for i in 1..last {
            for j in (i + 1)..last {
                if !graph.are_adjacent(nodes[i - 1], nodes[j]) || !graph.are_adjacent(nodes[i], nodes[j + 1]) {
                    continue;
                }
                cand.copy_from_slice(&nodes);
                cand[i..=j].reverse();
                let c = path_cost(graph, &cand, cfg);
                if c < cost {
                    std::mem::swap(&mut nodes, &mut cand);
                    cost = c;
                    improved = true;
                    break 'scan;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Route::from_nodes(graph, nodes)
}
