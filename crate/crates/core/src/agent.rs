//! The per-step navigation loop and the multi-goal episode driver.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoders::ObservationEncoder;
use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::memory::{AttentionScores, MapConfig, MapSnapshot, TopoMap};
use crate::metrics::{oracle_length, EpisodeMetrics, Outcome};
use crate::model::{forward_step, initial_ltm, ModelConfig, StepInput, Trace};
use crate::policy::{ActionDist, PolicyState};
use crate::rng::Rng;
use crate::sim::{apply_action, observe, success_check, Action, AgentPose, Cell, GridWorld, Heading, Panorama};
use crate::tensor::{l2_distance, ParamStore, Scalar};
use crate::train::Expert;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub forget_enabled: bool,
    /// Fraction of active nodes forgotten per step.
    pub p: f64,
    pub ltm_enabled: bool,
    pub step_budget: usize,
    pub success_radius_m: f64,
    pub mode: Mode,
    /// A STOP away from the goal ends the episode.
    pub strict_stop: bool,
    pub record_scores: bool,
    pub record_snapshots: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            forget_enabled: true,
            p: 0.2,
            ltm_enabled: true,
            step_budget: 500,
            success_radius_m: 1.0,
            mode: Mode::Eval,
            strict_stop: true,
            record_scores: false,
            record_snapshots: false,
        }
    }
}

impl AgentConfig {
    pub fn train() -> Self {
        Self {
            forget_enabled: false,
            mode: Mode::Train,
            ..Self::default()
        }
    }

    fn forgetting_active(&self) -> bool {
        self.mode == Mode::Eval && self.forget_enabled
    }
}

/// What one step produced before an action was chosen.
#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub dist: ActionDist<T>,
    pub node_id: usize,
    pub evicted: Vec<usize>,
    pub newly_forgotten: Vec<usize>,
    pub ltm_delta_l2: f64,
    /// Goal-decoder scores over the active nodes, renormalized.
    pub scores: AttentionScores<T>,
}

pub struct Agent<'a, T: Scalar> {
    params: &'a ParamStore<T>,
    model: &'a ModelConfig,
    config: AgentConfig,
    map: TopoMap<T>,
    policy: PolicyState<T>,
    e_goal: Vec<T>,
    pending: Option<AttentionScores<T>>,
    goal_index: usize,
    goals: usize,
    step: usize,
    trace: Option<Trace<T>>,
}

impl<'a, T: Scalar> Agent<'a, T> {
    /// A fresh agent heading for the first of `goals` goals.
    pub fn new(params: &'a ParamStore<T>, model: &'a ModelConfig, config: AgentConfig, e_goal: Vec<T>, goals: usize, keep_trace: bool) -> Result<Self> {
        if e_goal.len() != model.d {
            return Err(Error::dim("agent goal embedding", e_goal.len(), model.d));
        }
        let mut map = TopoMap::new(MapConfig::new(model.d));
        map.reset(Some(&initial_ltm(params, model)));
        Ok(Self {
            params,
            model,
            config,
            map,
            policy: PolicyState::zeros(model.d_h),
            e_goal,
            pending: None,
            goal_index: 0,
            goals,
            step: 0,
            trace: keep_trace.then(|| Trace {
                steps: Vec::new(),
                targets: Vec::new(),
                ltm_enabled: config.ltm_enabled,
            }),
        })
    }

    pub fn map(&self) -> &TopoMap<T> {
        &self.map
    }

    pub fn map_mut(&mut self) -> &mut TopoMap<T> {
        &mut self.map
    }

    pub fn policy_state(&self) -> &PolicyState<T> {
        &self.policy
    }

    pub fn pending_scores(&self) -> Option<&AttentionScores<T>> {
        self.pending.as_ref()
    }

    /// Zero-based index of the current goal.
    pub fn goal_index(&self) -> usize {
        self.goal_index
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    /// Scores from the previous step restricted to the current active set.
    /// Nodes that were not scored (new or just revisited) take the maximum
    /// score, so they are kept.
    fn reconcile(&self, prev: &AttentionScores<T>) -> AttentionScores<T> {
        let top = prev.scores.values().copied().fold(T::zero(), |a, b| if b > a { b } else { a });
        let scores = self
            .map
            .active_ids()
            .into_iter()
            .map(|id| (id, prev.scores.get(&id).copied().unwrap_or(top)))
            .collect();
        AttentionScores {
            scores,
            ltm: prev.ltm,
            step: prev.step,
        }
        .renormalized()
    }

    /// Localize, forget on the previous step's scores, build the working
    /// memory, decode and run the policy.
    pub fn step(&mut self, place: &[T], view: &[T], pose: AgentPose) -> Result<StepOutcome<T>> {
        let node_id = self.map.localize_and_update(place, pose, self.step)?;
        let evicted = self.map.evict_if_full();
        let mut newly_forgotten = Vec::new();
        if self.config.forgetting_active() {
            if let Some(prev) = self.pending.take() {
                let scores = self.reconcile(&prev);
                newly_forgotten = self.map.forget(&scores, self.config.p)?;
            }
        }
        let sub = self.map.active_subgraph();
        let n = sub.len();
        let input = StepInput {
            sub,
            e_goal: self.e_goal.clone(),
            e_cur: view.to_vec(),
        };
        let ltm_prev = self.map.ltm_read().to_vec();
        let (out, cache) = forward_step(self.params, self.model, &input, &self.policy, &ltm_prev, self.config.ltm_enabled)?;
        let ltm_delta_l2 = match &out.ltm_next {
            Some(next) => {
                self.map.ltm_write(next)?;
                l2_distance(&ltm_prev, next).as_f64()
            }
            None => 0.0,
        };
        let scores = AttentionScores::from_rows(&input.sub.ids, &out.goal_scores[..n], out.goal_scores[n], self.step).renormalized();
        self.pending = Some(scores.clone());
        self.policy = out.policy;
        if let Some(t) = &mut self.trace {
            t.steps.push(cache);
        }
        self.step += 1;
        Ok(StepOutcome {
            dist: out.dist,
            node_id,
            evicted,
            newly_forgotten,
            ltm_delta_l2,
            scores,
        })
    }

    /// Records the action taken for the last step (the imitation target in traces).
    pub fn record_action(&mut self, a: Action) {
        if let Some(t) = &mut self.trace {
            t.targets.push(a);
        }
    }

    /// Restores every forgotten node and switches to the next goal; policy
    /// and long-term state carry over.
    pub fn on_goal_reached(&mut self, next_goal: Vec<T>) -> Result<()> {
        if self.goal_index + 1 >= self.goals {
            return Err(Error::Sequencing(format!("goal {} was the last of {}", self.goal_index + 1, self.goals)));
        }
        if next_goal.len() != self.model.d {
            return Err(Error::dim("agent goal embedding", next_goal.len(), self.model.d));
        }
        self.map.restore_all();
        self.pending = None;
        self.e_goal = next_goal;
        self.goal_index += 1;
        Ok(())
    }

    pub fn into_trace(self) -> Option<Trace<T>> {
        self.trace
    }
}

/// How actions are chosen in [`run_episode`].
pub enum ActionSource<'r> {
    Greedy,
    Sample(&'r mut Rng),
    /// Uniform over the four actions, ignoring the policy.
    Uniform(&'r mut Rng),
    Teacher,
    /// Replays a fixed sequence, then STOPs.
    Scripted(Vec<Action>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: usize,
    /// One-based.
    pub goal_index: usize,
    pub step: usize,
    pub pose: AgentPose,
    pub action: Action,
    pub node_id: usize,
    pub n_active: usize,
    /// Every node forgotten at this step, not only the new ones.
    pub forgotten_ids: Vec<usize>,
    pub newly_forgotten: Vec<usize>,
    pub ltm_delta_l2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stm_scores: Option<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub episode: usize,
    pub goal_index: usize,
    pub step: usize,
    pub snapshot: MapSnapshot,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult<T> {
    pub episode: usize,
    pub outcome: Outcome,
    pub reached: Vec<bool>,
    pub steps: usize,
    pub path_len_m: f64,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<SnapshotRecord>,
    pub forget_calls: usize,
    /// Forgotten-node count right after each goal was reached, before the next step.
    pub forgotten_after_goal: Vec<usize>,
    pub trace: Option<Trace<T>>,
}

impl<T> EpisodeResult<T> {
    pub fn metrics(&self, world: &GridWorld, spec: &EpisodeSpec) -> Result<EpisodeMetrics> {
        let (l, _) = oracle_length(world, spec)?;
        EpisodeMetrics::new(spec.id, &self.reached, l, self.path_len_m, self.steps, self.outcome)
    }
}

/// Heading-invariant embedding of a goal cell.
pub fn goal_embedding<T: Scalar>(world: &GridWorld, encoder: &ObservationEncoder, goal: Cell) -> Vec<T> {
    encoder.encode_place(&observe(world, AgentPose::new(goal, Heading::N), encoder.observe_config()))
}

fn check_spec(world: &GridWorld, spec: &EpisodeSpec) -> Result<()> {
    let free = |c: Cell| world.in_bounds(c) && world.is_free(c);
    if spec.goals.is_empty() {
        return Err(Error::Validation(format!("episode {} has no goals", spec.id)));
    }
    if !free(spec.start.cell()) {
        return Err(Error::Validation(format!("episode {} starts on blocked cell {}", spec.id, spec.start.cell())));
    }
    if let Some(g) = spec.goals.iter().find(|&&g| !free(g)) {
        return Err(Error::Validation(format!("episode {} has blocked goal {g}", spec.id)));
    }
    Ok(())
}

/// Observation embeddings of one pose: `(place, view)`.
pub fn embed_pose<T: Scalar>(world: &GridWorld, encoder: &ObservationEncoder, pose: AgentPose) -> (Vec<T>, Vec<T>) {
    let pano: Panorama = observe(world, pose, encoder.observe_config());
    (encoder.encode_place(&pano), encoder.encode_view(&pano))
}

/// Drives the agent through every goal of `spec` until success, a wrong
/// STOP (strict mode) or the step budget.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<T: Scalar>(
    world: &GridWorld,
    spec: &EpisodeSpec,
    params: &ParamStore<T>,
    model: &ModelConfig,
    encoder: &ObservationEncoder,
    config: &AgentConfig,
    source: &mut ActionSource<'_>,
    keep_trace: bool,
) -> Result<EpisodeResult<T>> {
    check_spec(world, spec)?;
    let k = spec.goals.len();
    let mut agent = Agent::new(params, model, *config, goal_embedding(world, encoder, spec.goals[0]), k, keep_trace)?;
    let mut teacher = match source {
        ActionSource::Teacher => Some(Expert::new(world, spec.goals[0], config.success_radius_m)?),
        _ => None,
    };
    let mut pose = spec.start;
    let mut reached = vec![false; k];
    let mut path_len_m = 0.0;
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut forgotten_after_goal = Vec::new();
    let mut outcome = Outcome::Timeout;
    while agent.steps_taken() < config.step_budget {
        let (place, view) = embed_pose::<T>(world, encoder, pose);
        let step = agent.steps_taken();
        let out = agent.step(&place, &view, pose)?;
        let action = match source {
            ActionSource::Greedy => out.dist.greedy(),
            ActionSource::Sample(rng) => out.dist.sample(rng),
            ActionSource::Uniform(rng) => Action::ALL[rng.random_range(0..Action::COUNT)],
            ActionSource::Teacher => teacher.as_ref().expect("teacher built for this source").action(pose)?,
            ActionSource::Scripted(seq) => seq.get(step).copied().unwrap_or(Action::Stop),
        };
        agent.record_action(action);
        let g = agent.goal_index();
        records.push(StepRecord {
            episode: spec.id,
            goal_index: g + 1,
            step,
            pose,
            action,
            node_id: out.node_id,
            n_active: agent.map().num_active(),
            forgotten_ids: agent.map().forgotten_ids(),
            newly_forgotten: out.newly_forgotten,
            ltm_delta_l2: out.ltm_delta_l2,
            stm_scores: config
                .record_scores
                .then(|| out.scores.scores.iter().map(|(&id, v)| (id, v.as_f64())).collect()),
        });
        if config.record_snapshots {
            snapshots.push(SnapshotRecord {
                episode: spec.id,
                goal_index: g + 1,
                step,
                snapshot: agent.map().snapshot(step, false),
            });
        }
        if action == Action::Stop {
            if success_check(pose.cell(), spec.goals[g], world.cell_size, config.success_radius_m) {
                reached[g] = true;
                if g + 1 == k {
                    outcome = Outcome::Success;
                    break;
                }
                agent.on_goal_reached(goal_embedding(world, encoder, spec.goals[g + 1]))?;
                forgotten_after_goal.push(agent.map().forgotten_ids().len());
                if teacher.is_some() {
                    teacher = Some(Expert::new(world, spec.goals[g + 1], config.success_radius_m)?);
                }
            } else if config.strict_stop {
                outcome = Outcome::WrongStop;
                break;
            }
        } else {
            let next = apply_action(world, pose, action);
            if next.cell() != pose.cell() {
                path_len_m += world.cell_size;
            }
            pose = next;
        }
    }
    let steps = agent.steps_taken();
    let forget_calls = agent.map().forget_calls();
    Ok(EpisodeResult {
        episode: spec.id,
        outcome,
        reached,
        steps,
        path_len_m,
        records,
        snapshots,
        forget_calls,
        forgotten_after_goal,
        trace: agent.into_trace(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{generate_episode, EpisodeRules};
    use crate::model::{fixture::perturbed_params, init_params};
    use crate::rng::{stream, Stream};
    use crate::sim::{generate_world, ObserveConfig};
    use crate::tensor::normalize;

    struct Setup {
        world: GridWorld,
        model: ModelConfig,
        params: ParamStore<f64>,
        encoder: ObservationEncoder,
    }

    fn setup(seed: u64) -> Setup {
        let model = ModelConfig { d: 16, d_h: 16, ..Default::default() };
        Setup {
            world: generate_world(seed, 15, 15, 0.2).unwrap(),
            params: perturbed_params(&model, seed),
            encoder: ObservationEncoder::new(model.d, ObserveConfig::default(), 7),
            model,
        }
    }

    fn spec(s: &Setup, goals: usize, seed: u64) -> EpisodeSpec {
        let mut rng = stream(seed, Stream::Episode, 0);
        generate_episode(&s.world, goals, &EpisodeRules::default(), &mut rng, seed as usize, 0).unwrap()
    }

    fn run(s: &Setup, spec: &EpisodeSpec, cfg: &AgentConfig, source: &mut ActionSource<'_>) -> EpisodeResult<f64> {
        run_episode(&s.world, spec, &s.params, &s.model, &s.encoder, cfg, source, false).unwrap()
    }

    #[test]
    fn teacher_reaches_every_goal() {
        let s = setup(1);
        for seed in 0..20 {
            let e = spec(&s, 3, seed);
            let r = run(&s, &e, &AgentConfig::default(), &mut ActionSource::Teacher);
            assert_eq!(r.outcome, Outcome::Success, "episode {seed}");
            assert_eq!(r.metrics(&s.world, &e).unwrap().progress, 1.0);
        }
    }

    #[test]
    fn p_zero_matches_forgetting_off() {
        let s = setup(2);
        for seed in 0..5 {
            let e = spec(&s, 2, seed);
            let on = AgentConfig { p: 0.0, ..Default::default() };
            let off = AgentConfig { forget_enabled: false, ..Default::default() };
            let a = run(&s, &e, &on, &mut ActionSource::Teacher);
            let b = run(&s, &e, &off, &mut ActionSource::Teacher);
            assert_eq!(a.records, b.records);
            let mut ra = stream(seed, Stream::Sampling, 0);
            let mut rb = stream(seed, Stream::Sampling, 0);
            let a = run(&s, &e, &on, &mut ActionSource::Sample(&mut ra));
            let b = run(&s, &e, &off, &mut ActionSource::Sample(&mut rb));
            assert_eq!(a.records, b.records);
        }
    }

    #[test]
    fn no_forgetting_on_first_step_of_a_goal() {
        let s = setup(3);
        let e = spec(&s, 3, 4);
        let cfg = AgentConfig { p: 0.5, ..Default::default() };
        let r = run(&s, &e, &cfg, &mut ActionSource::Teacher);
        let mut prev_goal = 0;
        for rec in &r.records {
            if rec.goal_index != prev_goal {
                assert!(rec.newly_forgotten.is_empty());
                prev_goal = rec.goal_index;
            }
        }
        assert!(r.records.iter().any(|rec| !rec.newly_forgotten.is_empty()));
        assert!(r.forgotten_after_goal.iter().all(|&n| n == 0));
    }

    #[test]
    fn train_mode_never_forgets() {
        let s = setup(4);
        let e = spec(&s, 2, 1);
        let cfg = AgentConfig { p: 0.5, mode: Mode::Train, ..Default::default() };
        let r = run(&s, &e, &cfg, &mut ActionSource::Teacher);
        assert_eq!(r.forget_calls, 0);
        assert!(r.records.iter().all(|rec| rec.forgotten_ids.is_empty()));
    }

    #[test]
    fn lag_uses_previous_step_scores() {
        let s = setup(5);
        let e = spec(&s, 1, 2);
        let cfg = AgentConfig { p: 0.3, record_scores: true, ..Default::default() };
        let r = run(&s, &e, &cfg, &mut ActionSource::Teacher);
        let mut checked = 0;
        for w in r.records.windows(2) {
            let (prev, cur) = (&w[0], &w[1]);
            let scores = prev.stm_scores.as_ref().unwrap();
            // survivors of the previous step, ranked by their scores then id
            let mut ranked: Vec<(usize, f64)> = scores
                .iter()
                .copied()
                .filter(|(id, _)| *id != cur.node_id)
                .collect();
            ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<usize> = ranked.iter().take(cur.newly_forgotten.len()).map(|x| x.0).collect();
            let mut got = cur.newly_forgotten.clone();
            got.sort_by(|a, b| {
                let sa = scores.iter().find(|x| x.0 == *a).unwrap().1;
                let sb = scores.iter().find(|x| x.0 == *b).unwrap().1;
                sa.partial_cmp(&sb).unwrap().then(a.cmp(b))
            });
            assert_eq!(got, want, "step {}", cur.step);
            checked += usize::from(!got.is_empty());
        }
        assert!(checked > 0);
    }

    #[test]
    fn twelve_node_map_forgets_two_on_second_step() {
        let s = setup(6);
        let d = s.model.d;
        let mut agent: Agent<f64> = Agent::new(&s.params, &s.model, AgentConfig::default(), vec![0.0; d], 1, false).unwrap();
        let basis = |i: usize| {
            let mut v = vec![0.0; d];
            v[i] = 1.0;
            v
        };
        let pose = AgentPose::new(Cell::new(1, 1), Heading::N);
        for i in 0..11 {
            agent.map_mut().localize_and_update(&basis(i), pose, 0).unwrap();
        }
        let mut view = basis(13);
        view[14] = 0.5;
        normalize(&mut view);
        let first = agent.step(&basis(11), &view, pose).unwrap();
        assert!(first.newly_forgotten.is_empty());
        assert_eq!(agent.map().num_active(), 12);
        // revisit node 11, so the active set is unchanged
        let second = agent.step(&basis(11), &view, pose).unwrap();
        assert_eq!(second.newly_forgotten.len(), 2);
        assert_eq!(agent.map().num_active(), 10);
    }

    #[test]
    fn goal_boundary_restores_and_keeps_ltm() {
        let s = setup(7);
        let d = s.model.d;
        let mut agent: Agent<f64> = Agent::new(&s.params, &s.model, AgentConfig { p: 0.5, ..Default::default() }, vec![0.0; d], 2, false).unwrap();
        for i in 0..6 {
            let pose = AgentPose::new(Cell::new(1, 1), Heading::N);
            let mut f = vec![0.0; d];
            f[i] = 1.0;
            agent.step(&f, &f, pose).unwrap();
        }
        assert!(!agent.map().forgotten_ids().is_empty());
        let ltm = agent.map().ltm_read().to_vec();
        let h = agent.policy_state().clone();
        agent.on_goal_reached(vec![0.0; d]).unwrap();
        assert!(agent.map().forgotten_ids().is_empty());
        assert!(agent.pending_scores().is_none());
        assert_eq!(agent.map().ltm_read(), &ltm[..]);
        assert_eq!(agent.policy_state(), &h);
        assert!(matches!(agent.on_goal_reached(vec![0.0; d]), Err(Error::Sequencing(_))));
    }

    #[test]
    fn immediate_stop_inside_radius_counts() {
        let s = setup(8);
        let mut e = spec(&s, 1, 0);
        e.start = AgentPose::new(e.goals[0], Heading::E);
        let r = run(&s, &e, &AgentConfig::default(), &mut ActionSource::Scripted(vec![]));
        assert_eq!(r.outcome, Outcome::Success);
        assert_eq!(r.path_len_m, 0.0);
        assert_eq!(r.steps, 1);
    }

    #[test]
    fn never_stopping_times_out_at_budget() {
        let s = setup(9);
        let e = spec(&s, 1, 0);
        let never = vec![Action::TurnLeft; 600];
        let r = run(&s, &e, &AgentConfig::default(), &mut ActionSource::Scripted(never));
        assert_eq!(r.outcome, Outcome::Timeout);
        assert_eq!(r.steps, 500);
    }

    #[test]
    fn wrong_stop_ends_episode_unless_lenient() {
        let s = setup(10);
        let e = spec(&s, 2, 3);
        let strict = run(&s, &e, &AgentConfig::default(), &mut ActionSource::Scripted(vec![]));
        assert_eq!(strict.outcome, Outcome::WrongStop);
        assert_eq!(strict.steps, 1);
        let lenient = AgentConfig { strict_stop: false, step_budget: 20, ..Default::default() };
        let r = run(&s, &e, &lenient, &mut ActionSource::Scripted(vec![]));
        assert_eq!(r.outcome, Outcome::Timeout);
        assert_eq!(r.steps, 20);
    }

    #[test]
    fn uniform_init_policy_is_uniform() {
        let s = setup(11);
        let params: ParamStore<f64> = init_params(&s.model, 0);
        let e = spec(&s, 1, 1);
        let r = run_episode(&s.world, &e, &params, &s.model, &s.encoder, &AgentConfig::train(), &mut ActionSource::Teacher, true).unwrap();
        let trace = r.trace.unwrap();
        assert_eq!(trace.len(), r.steps);
        assert!((trace.nll() / trace.len() as f64 - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn replay_is_deterministic() {
        let s = setup(12);
        let e = spec(&s, 3, 5);
        let a = run(&s, &e, &AgentConfig::default(), &mut ActionSource::Greedy);
        let b = run(&s, &e, &AgentConfig::default(), &mut ActionSource::Greedy);
        assert_eq!(a.records, b.records);
    }
}
