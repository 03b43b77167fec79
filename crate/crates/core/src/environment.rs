//! Coverage MDP over an [`AoiGraph`]: masking, dense/episodic reward and
//! the BFS dead-end look-ahead.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aoi_graph::AoiGraph;
use crate::geometry::Point;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("action {action} is not allowed from node {current}")]
    Disallowed { action: usize, current: usize },
    #[error("episode already finished")]
    Finished,
    #[error("turn angle {0} outside [0, π]")]
    AngleRange(f64),
}

/// Reward weights. Defaults are the calibrated values used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub r_step: f64,
    pub hex_coeff: f64,
    pub dist_coeff: f64,
    pub turn_coeff: f64,
    pub r_complete: f64,
    pub r_death: f64,
    pub c_base: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_step: 2.0,
            hex_coeff: 0.5,
            dist_coeff: -1.0,
            turn_coeff: -0.25,
            r_complete: 100.0,
            r_death: -40.0,
            c_base: 1.0 / 12.0,
        }
    }
}

/// Heading changes below this are straight-line motion.
pub const STRAIGHT_TOL: f64 = 1e-9;

/// Turn penalty `f(θ)`: zero for straight motion, otherwise a fixed
/// activation cost plus a quadratic term, both doubled.
pub fn turn_penalty(theta: f64, c_base: f64) -> Result<f64, EnvError> {
    if !(-STRAIGHT_TOL..=PI + STRAIGHT_TOL).contains(&theta) {
        return Err(EnvError::AngleRange(theta));
    }
    if theta <= 0.0 {
        return Ok(0.0);
    }
    let u = theta.min(PI) / PI;
    Ok(2.0 * (u * u + c_base))
}

/// Unsigned angle between two movement vectors, snapped to 0 when the
/// vectors are parallel within [`STRAIGHT_TOL`].
pub fn heading_change(prev: Point, next: Point) -> f64 {
    let theta = prev.cross(next).atan2(prev.dot(next)).abs();
    if theta < STRAIGHT_TOL {
        0.0
    } else {
        theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Running,
    Completed,
    DeadEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub current: usize,
    /// Visited flags over cell nodes.
    pub visited: Vec<bool>,
    pub visited_count: usize,
    /// Unit vector of the last move.
    pub heading: Option<Point>,
    pub step: usize,
    pub outcome: Outcome,
}

impl EnvState {
    pub fn done(&self) -> bool {
        self.outcome != Outcome::Running
    }

    pub fn coverage(&self) -> f64 {
        if self.visited.is_empty() {
            0.0
        } else {
            self.visited_count as f64 / self.visited.len() as f64
        }
    }

    pub fn is_visited(&self, node: usize) -> bool {
        self.visited.get(node).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardComponents {
    pub step: f64,
    pub hex: f64,
    pub dist: f64,
    pub turn: f64,
    pub episodic: f64,
}

impl RewardComponents {
    /// Sum in a fixed order.
    pub fn total(&self) -> f64 {
        self.step + self.hex + self.dist + self.turn + self.episodic
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub components: RewardComponents,
    pub mask_next: Vec<bool>,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeadEndCause {
    /// This unvisited cell cannot be reached without revisits.
    UnreachableCell(usize),
    TerminalUnreachable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reachability {
    Ok,
    DeadEnd(DeadEndCause),
}

pub fn reset(graph: &AoiGraph) -> EnvState {
    EnvState {
        current: graph.base(),
        visited: vec![false; graph.num_cells()],
        visited_count: 0,
        heading: None,
        step: 0,
        outcome: Outcome::Running,
    }
}

/// Allowed next nodes: unvisited cell neighbours of the current node, and
/// the terminal once every cell has been visited.
pub fn action_mask(state: &EnvState, graph: &AoiGraph) -> Vec<bool> {
    let mut mask = vec![false; graph.num_nodes()];
    if state.done() {
        return mask;
    }
    let all = state.visited_count == graph.num_cells();
    for &j in graph.neighbors(state.current) {
        if graph.is_cell(j) {
            mask[j] = !state.visited[j];
        } else if j == graph.terminal() {
            mask[j] = all;
        }
    }
    mask
}

/// BFS from the current node through unvisited cells. Dead end when some
/// unvisited cell, or the terminal, cannot be reached that way.
pub fn deadend_check(state: &EnvState, graph: &AoiGraph) -> Reachability {
    deadend_check_visited(state.current, &state.visited, state.visited_count, graph)
}

pub(crate) fn deadend_check_visited(
    current: usize,
    visited: &[bool],
    visited_count: usize,
    graph: &AoiGraph,
) -> Reachability {
    let n = graph.num_cells();
    let terminal = graph.terminal();
    let mut seen = vec![false; n];
    let mut reached = 0usize;
    let mut terminal_ok = graph.are_adjacent(current, terminal);
    let mut queue = VecDeque::new();
    for &j in graph.neighbors(current) {
        if j < n && !visited[j] && !seen[j] {
            seen[j] = true;
            reached += 1;
            queue.push_back(j);
        }
    }
    while let Some(u) = queue.pop_front() {
        for &v in graph.neighbors(u) {
            if v < n {
                if !visited[v] && !seen[v] {
                    seen[v] = true;
                    reached += 1;
                    queue.push_back(v);
                }
            } else if v == terminal {
                terminal_ok = true;
            }
        }
    }
    if reached + visited_count < n {
        let cell = (0..n).find(|&c| !visited[c] && !seen[c]).expect("an unreached cell exists");
        return Reachability::DeadEnd(DeadEndCause::UnreachableCell(cell));
    }
    if !terminal_ok {
        return Reachability::DeadEnd(DeadEndCause::TerminalUnreachable);
    }
    Reachability::Ok
}

fn unit(v: Point) -> Option<Point> {
    let n = v.norm();
    (n > 0.0).then(|| v.scale(1.0 / n))
}

/// One coverage episode on a borrowed graph.
#[derive(Debug, Clone)]
pub struct CoverageEnv<'g> {
    graph: &'g AoiGraph,
    cfg: RewardConfig,
    state: EnvState,
    density: f64,
}

impl<'g> CoverageEnv<'g> {
    pub fn new(graph: &'g AoiGraph, cfg: RewardConfig) -> Self {
        Self {
            graph,
            cfg,
            state: reset(graph),
            density: (graph.num_cells() as f64).sqrt(),
        }
    }

    pub fn reset(&mut self) -> Vec<bool> {
        self.state = reset(self.graph);
        self.mask()
    }

    pub fn graph(&self) -> &'g AoiGraph {
        self.graph
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn config(&self) -> &RewardConfig {
        &self.cfg
    }

    pub fn mask(&self) -> Vec<bool> {
        action_mask(&self.state, self.graph)
    }

    /// Density-scaled distance between two nodes in feature coordinates.
    pub fn scaled_distance(&self, a: usize, b: usize) -> f64 {
        let f = self.graph.features();
        (f[a].x - f[b].x).hypot(f[a].y - f[b].y) * self.density
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        if self.state.done() {
            return Err(EnvError::Finished);
        }
        let g = self.graph;
        let from = self.state.current;
        if action >= g.num_nodes() || !action_mask(&self.state, g)[action] {
            return Err(EnvError::Disallowed { action, current: from });
        }
        let cfg = self.cfg;
        let mut c = RewardComponents::default();
        let n = g.num_cells();
        let is_cell = g.is_cell(action);
        if is_cell {
            c.step = cfg.r_step;
            let decay = 1.0 - self.state.step as f64 / n as f64;
            c.hex = cfg.hex_coeff * g.hexscore(action) * decay;
        }
        c.dist = -cfg.dist_coeff.abs() * self.scaled_distance(from, action);
        let mv = g.position(action).sub(g.position(from));
        if let (Some(prev), Some(next)) = (self.state.heading, unit(mv)) {
            let f = turn_penalty(heading_change(prev, next), cfg.c_base)?;
            c.turn = -cfg.turn_coeff.abs() * f;
        }
        if let Some(u) = unit(mv) {
            self.state.heading = Some(u);
        }
        self.state.current = action;
        self.state.step += 1;
        if is_cell {
            self.state.visited[action] = true;
            self.state.visited_count += 1;
            if let Reachability::DeadEnd(_) = deadend_check(&self.state, g) {
                c.episodic = cfg.r_death;
                self.state.outcome = Outcome::DeadEnd;
            }
        } else {
            c.episodic = cfg.r_complete;
            self.state.outcome = Outcome::Completed;
        }
        Ok(StepOutcome {
            reward: c.total(),
            components: c,
            mask_next: self.mask(),
            done: self.state.done(),
        })
    }
}

/// One logged transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub from: usize,
    pub to: usize,
    pub reward: f64,
    pub components: RewardComponents,
    pub mask_size: usize,
    pub outcome: Outcome,
}

/// Trajectory log document written one JSON object per step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub instance_id: String,
    pub steps: Vec<StepLog>,
}

impl TrajectoryLog {
    pub fn record(&mut self, from: usize, to: usize, mask_size: usize, out: &StepOutcome, outcome: Outcome) {
        self.steps.push(StepLog {
            from,
            to,
            reward: out.reward,
            components: out.components,
            mask_size,
            outcome,
        });
    }

    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aoi_graph::fixtures::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn turn_penalty_values() {
        let c = 1.0 / 12.0;
        assert_eq!(turn_penalty(0.0, c).unwrap(), 0.0);
        assert!((turn_penalty(PI, c).unwrap() - 13.0 / 6.0).abs() < 1e-12);
        let f60 = turn_penalty(PI / 3.0, c).unwrap();
        assert!((f60 - 2.0 * (1.0 / 9.0 + 1.0 / 12.0)).abs() < 1e-12);
        assert!((f60 - 0.38889).abs() < 1e-5);
        assert!(turn_penalty(1e-6, c).unwrap() >= 2.0 * c);
        assert!(turn_penalty(4.0, c).is_err());
        assert!(turn_penalty(-0.5, c).is_err());
    }

    #[test]
    fn turn_penalty_monotone() {
        let c = 1.0 / 12.0;
        let mut last = 0.0;
        for k in 1..=1000 {
            let v = turn_penalty(PI * k as f64 / 1000.0, c).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn reset_masks_terminal_and_allows_base_cells() {
        let g = flower();
        let s = reset(&g);
        let m = action_mask(&s, &g);
        assert_eq!(m.iter().filter(|&&b| b).count(), 3);
        assert!(!m[g.terminal()]);
        assert_eq!(reset(&g), s);
    }

    #[test]
    fn terminal_unlocks_only_at_full_coverage() {
        let g = corridor(3);
        let mut env = CoverageEnv::new(&g, RewardConfig::default());
        env.step(0).unwrap();
        env.step(1).unwrap();
        let out = env.step(2).unwrap();
        let allowed: Vec<usize> = (0..g.num_nodes()).filter(|&i| out.mask_next[i]).collect();
        assert_eq!(allowed, vec![g.terminal()]);
        let fin = env.step(g.terminal()).unwrap();
        assert_eq!(fin.components.episodic, 100.0);
        assert!(fin.done);
        assert_eq!(env.state().step, g.num_cells() + 1);
    }

    #[test]
    fn disallowed_action_is_an_error() {
        let g = corridor(3);
        let mut env = CoverageEnv::new(&g, RewardConfig::default());
        assert!(matches!(env.step(1), Err(EnvError::Disallowed { .. })));
        assert!(matches!(env.step(g.terminal()), Err(EnvError::Disallowed { .. })));
    }

    #[test]
    fn corridor_trap_is_dead_end() {
        // A–B–C–D, B and C visited, agent at A: D is cut off.
        let g = corridor(4);
        let s = EnvState {
            current: 0,
            visited: vec![true, true, true, false],
            visited_count: 3,
            heading: Some(Point::new(-1.0, 0.0)),
            step: 3,
            outcome: Outcome::Running,
        };
        assert_eq!(deadend_check(&s, &g), Reachability::DeadEnd(DeadEndCause::UnreachableCell(3)));
    }

    #[test]
    fn bisection_fires_on_the_isthmus_step() {
        // Two 2×3 lobes joined by one isthmus cell.
        let mut cells = Vec::new();
        for r in 0..2 {
            for q in 0..3 {
                cells.push((q, r));
            }
        }
        cells.push((3, 0));
        for r in 0..2 {
            for q in 4..7 {
                cells.push((q, r));
            }
        }
        let g = axial_graph(&cells, &[(0, 0), (1, 0), (2, 0), (4, 0), (5, 0), (6, 0)]);
        let pos = |c: (i32, i32)| cells.iter().position(|&x| x == c).unwrap();
        let mut env = CoverageEnv::new(&g, RewardConfig::default());
        for c in [(0, 0), (1, 0), (2, 0)] {
            assert!(!env.step(pos(c)).unwrap().done);
        }
        // On the isthmus the left lobe's top row is still reachable.
        assert!(!env.step(pos((3, 0))).unwrap().done);
        // Crossing into the right lobe strands it.
        let out = env.step(pos((4, 0))).unwrap();
        assert!(out.done);
        assert_eq!(out.components.episodic, -40.0);
        assert_eq!(env.state().outcome, Outcome::DeadEnd);
    }

    #[test]
    fn straight_step_reward_matches_hand_computation() {
        let g = corridor(6);
        let mut env = CoverageEnv::new(&g, RewardConfig::default());
        env.step(0).unwrap();
        env.step(1).unwrap();
        let out = env.step(2).unwrap();
        let f = g.features();
        let ell = (f[1].x - f[2].x).hypot(f[1].y - f[2].y);
        let expect = 2.0 - 1.0 * ell * 6f64.sqrt();
        assert_eq!(out.components.turn, 0.0);
        assert!((out.reward - expect).abs() < 1e-12);
    }

    #[test]
    fn sixty_degree_turn_component() {
        let g = flower();
        let mut env = CoverageEnv::new(&g, RewardConfig::default());
        // Petal (0,-1) → centre → petal (1,0) is a 60° turn.
        let idx = |q, r| g.cells().iter().position(|a| a.q == q && a.r == r).unwrap();
        env.step(idx(0, -1)).unwrap();
        env.step(idx(0, 0)).unwrap();
        let out = env.step(idx(1, 0)).unwrap();
        assert!((out.components.turn + 0.25 * 0.388_888_888_888_888_9).abs() < 1e-9);
        assert!((out.components.turn - (-0.0972)).abs() < 1e-4);
    }

    #[test]
    fn random_rollouts_respect_mask_and_reward_sums() {
        let g = block(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..2_000 {
            let mut env = CoverageEnv::new(&g, RewardConfig::default());
            let mut mask = env.reset();
            let mut seen = vec![false; g.num_cells()];
            let (mut completes, mut deaths) = (0, 0);
            loop {
                let allowed: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
                assert!(!allowed.is_empty());
                let a = allowed[rng.gen_range(0..allowed.len())];
                if g.is_cell(a) {
                    assert!(!seen[a]);
                    seen[a] = true;
                } else {
                    assert!(seen.iter().all(|&v| v));
                }
                let out = env.step(a).unwrap();
                assert_eq!(out.reward, out.components.total());
                completes += (out.components.episodic == 100.0) as u32;
                deaths += (out.components.episodic == -40.0) as u32;
                if out.done {
                    break;
                }
                mask = out.mask_next;
            }
            assert_eq!(completes + deaths, 1);
            if env.state().outcome == Outcome::Completed {
                assert_eq!(env.state().step, g.num_cells() + 1);
            }
        }
    }
}
