//! Imitation learning against the BFS teacher: teacher-driven rollouts,
//! BPTT through the recorded episodes, clipped SGD with momentum, and
//! held-out evaluation for checkpoint selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{run_episode, ActionSource, AgentConfig, Mode};
use crate::artifacts::{config_hash, write_atomic};
use crate::encoders::{ObservationEncoder, DEFAULT_PROJECTION_SEED};
use crate::episodes::{generate_dataset, generate_episode, generate_fit_world, Dataset, DatasetConfig, EpisodeRules};
use crate::error::{Error, Result};
use crate::eval::{EvalPolicy, Evaluator};
use crate::model::{backward_trace, init_params, ModelConfig, Trace};
use crate::rng::{derive_seed, stream, Stream};
use crate::sim::{distance_field, success_check, Action, AgentPose, Cell, GridWorld, Heading, ObserveConfig};
use crate::tensor::{encode_checkpoint, ParamStore, Scalar, Tensor2D};

/// BFS-following teacher for one goal.
#[derive(Debug, Clone)]
pub struct Expert<'w> {
    world: &'w GridWorld,
    goal: Cell,
    radius_m: f64,
    field: Vec<Option<u32>>,
}

impl<'w> Expert<'w> {
    pub fn new(world: &'w GridWorld, goal: Cell, radius_m: f64) -> Result<Self> {
        if !world.in_bounds(goal) || world.is_blocked(goal) {
            return Err(Error::Domain(format!("teacher goal {goal} is not a free cell")));
        }
        Ok(Self {
            world,
            goal,
            radius_m,
            field: distance_field(world, &[goal]),
        })
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn hops(&self, c: Cell) -> Option<u32> {
        self.world.in_bounds(c).then(|| self.field[self.world.index(c)]).flatten()
    }

    fn descends(&self, from: Cell, h: Heading, d: u32) -> bool {
        let (dx, dy) = h.delta();
        from.offset(dx, dy).and_then(|c| self.hops(c)).is_some_and(|n| n < d)
    }

    /// STOP inside the success radius; otherwise forward onto a BFS-descending
    /// cell, else turn toward one (left first), else turn left.
    pub fn action(&self, pose: AgentPose) -> Result<Action> {
        let cell = pose.cell();
        if success_check(cell, self.goal, self.world.cell_size, self.radius_m) {
            return Ok(Action::Stop);
        }
        let Some(d) = self.hops(cell) else {
            return Err(Error::Domain(format!("goal {} unreachable from {cell}", self.goal)));
        };
        Ok(if self.descends(cell, pose.heading, d) {
            Action::MoveForward
        } else if self.descends(cell, pose.heading.left(), d) {
            Action::TurnLeft
        } else if self.descends(cell, pose.heading.right(), d) {
            Action::TurnRight
        } else {
            Action::TurnLeft
        })
    }
}

pub fn expert_action(world: &GridWorld, pose: AgentPose, goal: Cell, radius_m: f64) -> Result<Action> {
    Expert::new(world, goal, radius_m)?.action(pose)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub momentum: f64,
    /// Episodes per update.
    pub batch: usize,
    pub updates: usize,
    pub clip: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub density: f64,
    pub rules: EpisodeRules,
    /// Long-term toggle used for rollouts and evaluation.
    pub ltm_enabled: bool,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_worlds: usize,
    /// Forgetting settings for held-out evaluation.
    pub eval_forget: bool,
    pub eval_p: f64,
    pub projection_seed: u64,
    pub observe: ObserveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-3,
            momentum: 0.9,
            batch: 8,
            updates: 2000,
            clip: 5.0,
            seed: 0,
            width: 15,
            height: 15,
            density: 0.2,
            rules: EpisodeRules::default(),
            ltm_enabled: true,
            eval_every: 100,
            eval_episodes: 50,
            eval_worlds: 10,
            eval_forget: true,
            eval_p: 0.2,
            projection_seed: DEFAULT_PROJECTION_SEED,
            observe: ObserveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.clip];
        if positive.iter().any(|v| !(*v > 0.0)) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!(
                "lr {} and clip {} must be positive, momentum {} in [0, 1)",
                self.lr, self.clip, self.momentum
            )));
        }
        if self.batch == 0 || self.updates == 0 || self.eval_every == 0 || self.eval_episodes == 0 || self.eval_worlds == 0 {
            return Err(Error::Validation("batch, updates, eval_every and the held-out sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> ObservationEncoder {
        ObservationEncoder::new(self.model.d, self.observe, self.projection_seed)
    }

    pub fn eval_agent(&self) -> AgentConfig {
        AgentConfig {
            forget_enabled: self.eval_forget,
            p: self.eval_p,
            ltm_enabled: self.ltm_enabled,
            ..AgentConfig::default()
        }
    }

    /// The fixed 1-goal held-out set used for checkpoint selection.
    pub fn held_out(&self) -> Result<(Dataset, Vec<GridWorld>)> {
        generate_dataset(&DatasetConfig {
            worlds: self.eval_worlds,
            width: self.width,
            height: self.height,
            density: self.density,
            goals: 1,
            episodes: self.eval_episodes,
            seed: derive_seed(self.seed, Stream::HeldOut, 0),
            rules: self.rules,
        })
    }
}

/// Rolls out one teacher-driven 1-goal episode on a fresh world.
pub fn teacher_rollout<T: Scalar>(cfg: &TrainConfig, params: &ParamStore<T>, encoder: &ObservationEncoder, index: u64) -> Result<Trace<T>> {
    let world = generate_fit_world(derive_seed(cfg.seed, Stream::World, index), cfg.width, cfg.height, cfg.density, 1, &cfg.rules)?;
    let mut rng = stream(cfg.seed, Stream::Episode, index);
    let spec = generate_episode(&world, 1, &cfg.rules, &mut rng, index as usize, 0)?;
    let agent = AgentConfig {
        ltm_enabled: cfg.ltm_enabled,
        ..AgentConfig::train()
    };
    debug_assert_eq!(agent.mode, Mode::Train);
    let r = run_episode(&world, &spec, params, &cfg.model, encoder, &agent, &mut ActionSource::Teacher, true)?;
    if r.forget_calls != 0 {
        return Err(Error::Training(format!("training rollout {index} called forget {} times", r.forget_calls)));
    }
    Ok(r.trace.expect("trace requested"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    /// Mean NLL per step over the batch.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// SGD with momentum; the velocity lives alongside the parameters.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub lr: T,
    pub momentum: T,
    pub clip: T,
    velocity: Vec<Tensor2D<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, momentum: f64, clip: f64) -> Self {
        Self {
            lr: T::of(lr),
            momentum: T::of(momentum),
            clip: T::of(clip),
            velocity: params.iter().map(|(_, p)| Tensor2D::zeros(p.value.rows(), p.value.cols())).collect(),
        }
    }

    /// One step on the gradients stored in `grads`, after clipping them.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &mut ParamStore<T>) -> T {
        let norm = grads.clip_grad_norm(self.clip);
        for (((_, p), (_, g)), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.grad.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= self.lr * *vi;
            }
        }
        norm
    }
}

/// Backpropagates the mean per-step NLL of `traces` and takes one optimizer step.
pub fn imitation_update<T: Scalar>(
    params: &mut ParamStore<T>,
    opt: &mut Optimizer<T>,
    model: &ModelConfig,
    traces: &[Trace<T>],
) -> Result<UpdateStats> {
    let total: usize = traces.iter().map(Trace::len).sum();
    if total == 0 {
        return Err(Error::Training("update batch has no steps".into()));
    }
    let scale = T::one() / T::of(total as f64);
    let snapshot = &*params;
    let parts: Vec<(T, ParamStore<T>)> = traces
        .par_iter()
        .map(|t| {
            let mut g = snapshot.clone();
            g.zero_grads();
            let nll = backward_trace(snapshot, &mut g, model, t, scale);
            (nll, g)
        })
        .collect();
    let mut grads = params.clone();
    grads.zero_grads();
    let mut nll = T::zero();
    for (l, g) in &parts {
        nll += *l;
        grads.accumulate_grads(g)?;
    }
    let loss = (nll / T::of(total as f64)).as_f64();
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Training(format!("non-finite loss {loss} or gradient over {total} steps")));
    }
    let grad_norm = opt.step(params, &mut grads).as_f64();
    Ok(UpdateStats { loss, grad_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub update: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub eval_sr: Option<f64>,
    pub eval_spl: Option<f64>,
}

pub const TRAIN_LOG_HEADER: &str = "update,loss,grad_norm,eval_sr,eval_spl";

pub fn train_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.update, r.loss, r.grad_norm, opt(r.eval_sr), opt(r.eval_spl));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainResult<T> {
    pub best: ParamStore<T>,
    pub best_update: usize,
    pub best_sr: f64,
    pub last: ParamStore<T>,
    pub log: Vec<LogRow>,
}

/// Full training run; `on_row` sees every log row as it is produced.
pub fn train_loop<T: Scalar>(cfg: &TrainConfig, mut on_row: impl FnMut(&LogRow)) -> Result<TrainResult<T>> {
    cfg.validate()?;
    let encoder = cfg.encoder();
    let (held, held_worlds) = cfg.held_out()?;
    let mut params: ParamStore<T> = init_params(&cfg.model, cfg.seed);
    let mut opt = Optimizer::new(&params, cfg.lr, cfg.momentum, cfg.clip);
    let mut log = Vec::with_capacity(cfg.updates);
    let mut best: Option<(usize, f64, ParamStore<T>)> = None;
    for u in 1..=cfg.updates {
        let base = ((u - 1) * cfg.batch) as u64;
        let traces = (0..cfg.batch as u64)
            .into_par_iter()
            .map(|b| teacher_rollout(cfg, &params, &encoder, base + b))
            .collect::<Result<Vec<_>>>()?;
        let stats = imitation_update(&mut params, &mut opt, &cfg.model, &traces)?;
        let mut row = LogRow {
            update: u,
            loss: stats.loss,
            grad_norm: stats.grad_norm,
            eval_sr: None,
            eval_spl: None,
        };
        if u % cfg.eval_every == 0 || u == cfg.updates {
            let ev = Evaluator {
                params: &params,
                model: &cfg.model,
                encoder: &encoder,
                agent: cfg.eval_agent(),
                policy: EvalPolicy::Greedy,
            };
            let agg = ev.run(&held, &held_worlds, rayon::current_num_threads())?.aggregate;
            row.eval_sr = Some(agg.sr);
            row.eval_spl = Some(agg.spl);
            if best.as_ref().is_none_or(|b| agg.sr > b.1) {
                best = Some((u, agg.sr, params.clone()));
            }
        }
        on_row(&row);
        log.push(row);
    }
    let (best_update, best_sr, best) = best.expect("the last update is always evaluated");
    Ok(TrainResult {
        best,
        best_update,
        best_sr,
        last: params,
        log,
    })
}

/// Everything needed to rebuild the pipeline around a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub d: usize,
    pub d_h: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Seed of the frozen observation projection.
    pub r_seed: u64,
    pub model: ModelConfig,
    pub observe: ObserveConfig,
    pub ltm_enabled: bool,
    pub best_update: usize,
    pub best_eval_sr: f64,
}

impl ModelSidecar {
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "model sidecar",
            detail: e.to_string(),
        })
    }

    pub fn encoder(&self) -> ObservationEncoder {
        ObservationEncoder::new(self.d, self.observe, self.r_seed)
    }
}

/// Writes `model.ckpt` (best), its sidecar, `last.ckpt` and `train_log.csv` into `dir`.
pub fn write_training_outputs<T: Scalar>(dir: &Path, cfg: &TrainConfig, result: &TrainResult<T>) -> Result<PathBuf> {
    let ckpt = dir.join("model.ckpt");
    write_atomic(&ckpt, &encode_checkpoint(&result.best))?;
    write_atomic(&dir.join("last.ckpt"), &encode_checkpoint(&result.last))?;
    let sidecar = ModelSidecar {
        d: cfg.model.d,
        d_h: cfg.model.d_h,
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
        r_seed: cfg.projection_seed,
        model: cfg.model,
        observe: cfg.observe,
        ltm_enabled: cfg.ltm_enabled,
        best_update: result.best_update,
        best_eval_sr: result.best_sr,
    };
    write_atomic(&ModelSidecar::path_for(&ckpt), (serde_json::to_string_pretty(&sidecar)? + "\n").as_bytes())?;
    write_atomic(&dir.join("train_log.csv"), train_log_csv(&result.log).as_bytes())?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor() -> GridWorld {
        GridWorld::from_rows(&["############", "#..........#", "#..........#", "############"], 0.25).unwrap()
    }

    #[test]
    fn stop_inside_radius() {
        let w = corridor();
        let pose = AgentPose::new(Cell::new(1, 1), Heading::W);
        assert_eq!(expert_action(&w, pose, Cell::new(5, 1), 1.0).unwrap(), Action::Stop);
    }

    #[test]
    fn forward_when_next_cell_ahead() {
        let w = corridor();
        let pose = AgentPose::new(Cell::new(1, 1), Heading::E);
        assert_eq!(expert_action(&w, pose, Cell::new(10, 1), 1.0).unwrap(), Action::MoveForward);
    }

    #[test]
    fn turn_left_when_next_cell_behind() {
        let w = GridWorld::from_rows(&["############", "#..........#", "############"], 0.25).unwrap();
        let pose = AgentPose::new(Cell::new(1, 1), Heading::W);
        assert_eq!(expert_action(&w, pose, Cell::new(10, 1), 1.0).unwrap(), Action::TurnLeft);
    }

    #[test]
    fn turns_toward_the_side_that_descends() {
        let w = corridor();
        // goal is east; facing north the east cell is on the right
        let pose = AgentPose::new(Cell::new(1, 2), Heading::N);
        assert_eq!(expert_action(&w, pose, Cell::new(10, 2), 1.0).unwrap(), Action::TurnRight);
        let pose = AgentPose::new(Cell::new(1, 2), Heading::S);
        assert_eq!(expert_action(&w, pose, Cell::new(10, 2), 1.0).unwrap(), Action::TurnLeft);
    }

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig { d: 16, d_h: 16, ..Default::default() },
            batch: 2,
            updates: 4,
            eval_every: 2,
            eval_episodes: 3,
            eval_worlds: 2,
            width: 11,
            height: 11,
            ..Default::default()
        }
    }

    #[test]
    fn first_batch_loss_is_ln_four() {
        let mut first = None;
        train_loop::<f64>(&TrainConfig { updates: 1, ..tiny() }, |r| first = Some(r.loss)).unwrap();
        assert!((first.unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn training_is_reproducible() {
        let a = train_loop::<f64>(&tiny(), |_| {}).unwrap();
        let b = train_loop::<f64>(&tiny(), |_| {}).unwrap();
        assert_eq!(train_log_csv(&a.log), train_log_csv(&b.log));
        assert_eq!(a.best, b.best);
        assert_eq!(a.log.iter().filter(|r| r.eval_sr.is_some()).count(), 2);
    }

    #[test]
    fn outputs_round_trip() {
        let cfg = tiny();
        let r = train_loop::<f64>(&cfg, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = write_training_outputs(dir.path(), &cfg, &r).unwrap();
        let back: ParamStore<f64> = crate::tensor::load_checkpoint(&ckpt).unwrap();
        assert_eq!(back, r.best);
        let side = ModelSidecar::load(&ModelSidecar::path_for(&ckpt)).unwrap();
        assert_eq!(side.model, cfg.model);
        assert_eq!(side.config_hash.len(), 64);
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert!(log.starts_with(TRAIN_LOG_HEADER));
        assert_eq!(log.lines().count(), 5);
    }

    #[test]
    fn momentum_step_matches_hand_computation() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor2D::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        let mut opt = Optimizer::new(&p, 0.1, 0.9, 100.0);
        let mut g = p.clone();
        g.grad_mut("w").data_mut().copy_from_slice(&[1.0, 2.0]);
        opt.step(&mut p, &mut g.clone());
        opt.step(&mut p, &mut g);
        // v1 = g, v2 = 1.9 g; w = w0 - 0.1 * 2.9 g
        assert!((p.value("w").data()[0] - (1.0 - 0.29)).abs() < 1e-15);
        assert!((p.value("w").data()[1] - (-1.0 - 0.58)).abs() < 1e-15);
    }

    #[test]
    fn unreachable_goal_is_domain_error() {
        let w = GridWorld::from_rows(&["#######", "#..#..#", "#######"], 0.25).unwrap();
        let pose = AgentPose::new(Cell::new(1, 1), Heading::E);
        assert!(matches!(expert_action(&w, pose, Cell::new(5, 1), 0.0), Err(Error::Domain(_))));
    }
}
