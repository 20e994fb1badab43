//! Episode metrics (progress, SPL, PPL), the five per-node distance metrics
//! for retained/forgotten analysis, histograms, and the CSV exports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::sim::{distance_field, shortest_path, Cell, GridWorld};

/// Fraction of goals reached.
pub fn progress(reached: &[bool]) -> f64 {
    if reached.is_empty() {
        return 0.0;
    }
    reached.iter().filter(|&&r| r).count() as f64 / reached.len() as f64
}

/// `weight · l / max(p, l)` for one episode.
pub fn path_weighted(weight: f64, oracle_len: f64, agent_len: f64) -> Result<f64> {
    if !(oracle_len > 0.0) {
        return Err(Error::Domain(format!("oracle length {oracle_len} must be positive")));
    }
    if !(agent_len >= 0.0) {
        return Err(Error::Domain(format!("agent path length {agent_len} must be non-negative")));
    }
    Ok(weight * oracle_len / agent_len.max(oracle_len))
}

/// Mean over episodes of `progress · l / max(p, l)`; `records` are `(progress, l, p)`.
pub fn compute_ppl(records: &[(f64, f64, f64)]) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &(pr, l, p) in records {
        sum += path_weighted(pr, l, p)?;
    }
    Ok(sum / records.len() as f64)
}

/// [`compute_ppl`] with the success indicator as the weight; records are `(success, l, p)`.
pub fn compute_spl(records: &[(bool, f64, f64)]) -> Result<f64> {
    let as_weight: Vec<(f64, f64, f64)> = records.iter().map(|&(s, l, p)| (if s { 1.0 } else { 0.0 }, l, p)).collect();
    compute_ppl(&as_weight)
}

/// Chained BFS length start→g1→…→gk in meters, and the per-leg lengths.
pub fn oracle_length(world: &GridWorld, spec: &EpisodeSpec) -> Result<(f64, Vec<f64>)> {
    let mut legs = Vec::with_capacity(spec.goals.len());
    let mut from = spec.start.cell();
    for &g in &spec.goals {
        let sp = shortest_path(world, from, g)?;
        if !sp.is_connected() {
            return Err(Error::Validation(format!("episode {}: goal {g} unreachable from {from}", spec.id)));
        }
        legs.push(sp.length_m);
        from = g;
    }
    Ok((legs.iter().sum(), legs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    WrongStop,
    Timeout,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::WrongStop => "wrong_stop",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub difficulty: usize,
    pub progress: f64,
    pub spl: f64,
    pub ppl: f64,
    /// Agent path length in meters.
    pub p_i: f64,
    /// Chained oracle length in meters.
    pub l_i: f64,
    pub steps: usize,
    pub outcome: Outcome,
}

impl EpisodeMetrics {
    pub fn new(episode: usize, reached: &[bool], oracle_len: f64, agent_len: f64, steps: usize, outcome: Outcome) -> Result<Self> {
        let pr = progress(reached);
        let success = !reached.is_empty() && reached.iter().all(|&r| r);
        Ok(Self {
            episode,
            difficulty: reached.len(),
            progress: pr,
            spl: path_weighted(if success { 1.0 } else { 0.0 }, oracle_len, agent_len)?,
            ppl: path_weighted(pr, oracle_len, agent_len)?,
            p_i: agent_len,
            l_i: oracle_len,
            steps,
            outcome,
        })
    }

    pub fn success(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub sr: f64,
    pub spl: f64,
    pub pr: f64,
    pub ppl: f64,
}

impl Aggregate {
    pub fn of(records: &[EpisodeMetrics]) -> Self {
        let n = records.len();
        let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            episodes: n,
            sr: mean(&|r| if r.success() { 1.0 } else { 0.0 }),
            spl: mean(&|r| r.spl),
            pr: mean(&|r| r.progress),
            ppl: mean(&|r| r.ppl),
        }
    }
}

pub const METRICS_HEADER: &str = "episode,difficulty,progress,spl,ppl,p_i,l_i,steps,outcome";

pub fn metrics_csv(records: &[EpisodeMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.episode,
            r.difficulty,
            r.progress,
            r.spl,
            r.ppl,
            r.p_i,
            r.l_i,
            r.steps,
            r.outcome.name()
        );
    }
    out
}

/// Per-node distances in meters: to the agent (a), the goal (b), the
/// oracle path (c), its agent-side half (d) and its goal-side half (e).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceMetrics {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Geodesic,
    Euclidean,
}

/// Precomputed context for scoring many nodes at one step.
#[derive(Debug, Clone)]
pub struct DistanceContext<'a> {
    world: &'a GridWorld,
    kind: DistanceKind,
    agent: Cell,
    goal: Cell,
    /// Oracle path from the agent to the goal; split after the midpoint cell.
    path: Vec<Cell>,
    split: usize,
}

impl<'a> DistanceContext<'a> {
    /// The oracle path runs from `agent` to `goal`.
    pub fn new(world: &'a GridWorld, agent: Cell, goal: Cell, kind: DistanceKind) -> Result<Self> {
        let sp = shortest_path(world, agent, goal)?;
        if !sp.is_connected() {
            return Err(Error::Domain(format!("no oracle path from {agent} to {goal}")));
        }
        Self::with_path(world, sp.cells, kind)
    }

    pub fn with_path(world: &'a GridWorld, path: Vec<Cell>, kind: DistanceKind) -> Result<Self> {
        let (Some(&agent), Some(&goal)) = (path.first(), path.last()) else {
            return Err(Error::Domain("oracle path is empty".into()));
        };
        // cells 0..=mid belong to the agent half, the midpoint included
        let split = (path.len() - 1) / 2 + 1;
        Ok(Self {
            world,
            kind,
            agent,
            goal,
            path,
            split,
        })
    }

    pub fn measure(&self, node: Cell) -> DistanceMetrics {
        let cs = self.world.cell_size;
        let dist: Box<dyn Fn(Cell) -> f64> = match self.kind {
            DistanceKind::Geodesic => {
                let field = distance_field(self.world, &[node]);
                let w = self.world;
                Box::new(move |c: Cell| match field[w.index(c)] {
                    Some(h) => h as f64 * cs,
                    None => f64::INFINITY,
                })
            }
            DistanceKind::Euclidean => Box::new(move |c: Cell| node.euclidean_cells(c) * cs),
        };
        let min_over = |cells: &[Cell]| cells.iter().map(|&c| dist(c)).fold(f64::INFINITY, f64::min);
        let goal_half = if self.split < self.path.len() { &self.path[self.split..] } else { &self.path[self.path.len() - 1..] };
        DistanceMetrics {
            a: dist(self.agent),
            b: dist(self.goal),
            c: min_over(&self.path),
            d: min_over(&self.path[..self.split]),
            e: min_over(goal_half),
        }
    }
}

pub const DISTANCE_HEADER: &str = "episode,goal_index,step,node_id,status,m_a,m_b,m_c,m_d,m_e";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub episode: usize,
    pub goal_index: usize,
    pub step: usize,
    pub node_id: usize,
    /// `retained` or `forgotten`.
    pub status: String,
    pub m: DistanceMetrics,
}

pub fn distance_csv(rows: &[DistanceRow]) -> String {
    let mut out = String::from(DISTANCE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.episode, r.goal_index, r.step, r.node_id, r.status, r.m.a, r.m.b, r.m.c, r.m.d, r.m.e
        );
    }
    out
}

pub const LTM_DELTA_HEADER: &str = "episode,goal_index,step,ltm_delta_l2";

/// Rows are `(episode, goal_index, step, delta)`.
pub fn ltm_delta_csv(rows: &[(usize, usize, usize, f64)]) -> String {
    let mut out = String::from(LTM_DELTA_HEADER);
    out.push('\n');
    for (e, g, s, v) in rows {
        let _ = writeln!(out, "{e},{g},{s},{v}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub bin_width: f64,
    pub counts: Vec<usize>,
    /// Values below `lo`.
    pub underflow: usize,
    /// Values at or above the last edge, and non-finite values.
    pub overflow: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }
}

/// Left-closed, right-open bins of `bin_width` covering `[lo, hi)`.
pub fn histogram(values: &[f64], bin_width: f64, lo: f64, hi: f64) -> Result<Histogram> {
    if !(bin_width > 0.0) || !(hi > lo) {
        return Err(Error::Domain(format!("histogram needs bin_width > 0 and hi > lo, got {bin_width}, [{lo}, {hi})")));
    }
    let bins = ((hi - lo) / bin_width - 1e-9).ceil().max(1.0) as usize;
    let mut h = Histogram {
        lo,
        bin_width,
        counts: vec![0; bins],
        underflow: 0,
        overflow: 0,
    };
    for &v in values {
        if v < lo {
            h.underflow += 1;
            continue;
        }
        let k = ((v - lo) / bin_width).floor();
        if k.is_finite() && (k as usize) < bins {
            h.counts[k as usize] += 1;
        } else {
            h.overflow += 1;
        }
    }
    Ok(h)
}
