//! The trainable pipeline for one step: goal-fused working memory, the two
//! decoders and the policy, with backpropagation through time over a
//! recorded episode (policy state and long-term state both carry gradient).

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::{
    decode, decode_backward, decoder_param_shapes, wm_backward, wm_forward, wm_param_shapes, DecoderCache,
    DecoderConfig, WmCache, WmConfig,
};
use crate::error::{Error, Result};
use crate::memory::ActiveSubgraph;
use crate::policy::{policy_backward, policy_param_shapes, policy_step, ActionDist, PolicyCache, PolicyState};
use crate::rng::{stream, Stream};
use crate::sim::Action;
use crate::tensor::{axpy, ParamStore, Scalar, Tensor2D};

pub const LTM_INIT: &str = "enc.ltm_init";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_h: usize,
    pub wm: WmConfig,
    pub decoder: DecoderConfig,
    /// Start each episode's long-term state from a trained vector instead of zeros.
    pub trainable_ltm_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_h: 64,
            wm: WmConfig::default(),
            decoder: DecoderConfig::default(),
            trainable_ltm_init: false,
        }
    }
}

impl ModelConfig {
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = wm_param_shapes(self.d, &self.wm);
        out.extend(decoder_param_shapes("enc.dec_cur", self.d, &self.decoder));
        out.extend(decoder_param_shapes("enc.dec_goal", self.d, &self.decoder));
        out.extend(policy_param_shapes(self.d, self.d_h));
        if self.trainable_ltm_init {
            out.push((LTM_INIT.into(), self.d, 1));
        }
        out
    }

    /// Checks that `p` holds exactly this configuration's parameters.
    pub fn check_params<T: Scalar>(&self, p: &ParamStore<T>) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != p.len() {
            return Err(Error::Consistency(format!(
                "checkpoint has {} tensors, model expects {}",
                p.len(),
                shapes.len()
            )));
        }
        for (name, r, c) in shapes {
            let v = &p.param(&name)?.value;
            if v.shape() != (r, c) {
                return Err(Error::dim("check_params", format!("{name} {v}"), format!("{r}x{c}")));
            }
        }
        Ok(())
    }
}

/// Fan-in scaled Gaussian weights, zero biases, unit norm gains, LSTM forget
/// bias 1 and a zero output layer, so the first action distribution is uniform.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = stream(seed, Stream::Init, 0);
    let mut p = ParamStore::new();
    for (name, rows, cols) in cfg.param_shapes() {
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        let t = if leaf.ends_with("_g") {
            Tensor2D::from_fn(rows, cols, |_, _| T::one())
        } else if cols == 1 && leaf != "a" || name == "pol.w_out" {
            let mut t = Tensor2D::zeros(rows, cols);
            if name == "pol.lstm.b" {
                let d_h = rows / 4;
                for r in d_h..2 * d_h {
                    t.set(r, 0, T::one());
                }
            }
            t
        } else {
            let fan_in = if leaf == "a" { rows } else { cols };
            let scale = 1.0 / (fan_in as f64).sqrt();
            Tensor2D::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z * scale)
            })
        };
        p.insert(name, t);
    }
    p
}

/// Everything one step consumes besides parameters and recurrent state.
#[derive(Debug, Clone)]
pub struct StepInput<T> {
    pub sub: ActiveSubgraph<T>,
    pub e_goal: Vec<T>,
    pub e_cur: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub dist: ActionDist<T>,
    /// Goal-decoder attention over the working-memory rows (STM rows then the long-term row).
    pub goal_scores: Vec<T>,
    pub cur_scores: Vec<T>,
    pub ltm_next: Option<Vec<T>>,
    pub policy: PolicyState<T>,
}

#[derive(Debug, Clone)]
pub struct StepCache<T> {
    wm: WmCache<T>,
    dec_cur: DecoderCache<T>,
    dec_goal: DecoderCache<T>,
    policy: PolicyCache<T>,
    rows: usize,
}

pub fn forward_step<T: Scalar>(
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    input: &StepInput<T>,
    state: &PolicyState<T>,
    ltm_prev: &[T],
    ltm_enabled: bool,
) -> Result<(StepOutput<T>, StepCache<T>)> {
    let (wm, wm_cache) = wm_forward(p, &cfg.wm, &input.sub, &input.e_goal, ltm_prev, ltm_enabled)?;
    let (cur, dec_cur) = decode(p, "enc.dec_cur", &cfg.decoder, &input.e_cur, &wm.wm.rows)?;
    let (goal, dec_goal) = decode(p, "enc.dec_goal", &cfg.decoder, &input.e_goal, &wm.wm.rows)?;
    let (dist, next, pol) = policy_step(p, state, &cur.feature, &goal.feature, &input.e_cur)?;
    Ok((
        StepOutput {
            dist,
            goal_scores: goal.scores,
            cur_scores: cur.scores,
            ltm_next: wm.ltm_next,
            policy: next,
        },
        StepCache {
            wm: wm_cache,
            dec_cur,
            dec_goal,
            policy: pol,
            rows: wm.wm.rows.rows(),
        },
    ))
}

/// Caches and teacher targets of one recorded episode.
#[derive(Debug, Clone, Default)]
pub struct Trace<T> {
    pub steps: Vec<StepCache<T>>,
    pub targets: Vec<Action>,
    pub ltm_enabled: bool,
}

impl<T: Scalar> Trace<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Summed negative log-likelihood of the targets.
    pub fn nll(&self) -> T {
        self.steps
            .iter()
            .zip(&self.targets)
            .map(|(s, a)| -s.policy.dist.prob(*a).ln())
            .sum()
    }
}

/// Backpropagates `scale · Σ_t −log p(target_t)` through the recorded
/// episode, accumulating into `g`. Returns the unscaled summed NLL.
pub fn backward_trace<T: Scalar>(p: &ParamStore<T>, g: &mut ParamStore<T>, cfg: &ModelConfig, trace: &Trace<T>, scale: T) -> T {
    let d_h = cfg.d_h;
    let mut dh = vec![T::zero(); d_h];
    let mut dc = vec![T::zero(); d_h];
    let mut dltm: Option<Vec<T>> = None;
    for (cache, &target) in trace.steps.iter().zip(&trace.targets).rev() {
        let mut dlogits: Vec<T> = cache.policy.dist.probs.iter().map(|&v| v * scale).collect();
        dlogits[target.index()] -= scale;
        let pg = policy_backward(p, g, &cache.policy, &dlogits, &dh, &dc);
        dh = pg.h_prev;
        dc = pg.c_prev;
        let (_, mut dwm) = decode_backward(p, g, "enc.dec_cur", &cache.dec_cur, &pg.f_cur);
        let (_, dwm_goal) = decode_backward(p, g, "enc.dec_goal", &cache.dec_goal, &pg.f_goal);
        dwm.add_assign(&dwm_goal).expect("same memory");
        debug_assert_eq!(dwm.rows(), cache.rows);
        let dprev = wm_backward(p, g, &cache.wm, &dwm, dltm.as_deref());
        dltm = trace.ltm_enabled.then_some(dprev);
    }
    if let (true, Some(dl)) = (cfg.trainable_ltm_init, dltm) {
        axpy(g.grad_mut(LTM_INIT).data_mut(), T::one(), &dl);
    }
    trace.nll()
}

/// The long-term state an episode starts from.
pub fn initial_ltm<T: Scalar>(p: &ParamStore<T>, cfg: &ModelConfig) -> Vec<T> {
    if cfg.trainable_ltm_init {
        p.value(LTM_INIT).data().to_vec()
    } else {
        vec![T::zero(); cfg.d]
    }
}

/// Runs a fixed sequence of step inputs from a fresh state and returns the
/// mean NLL of `targets` with the trace for [`backward_trace`].
pub fn replay<T: Scalar>(
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    inputs: &[StepInput<T>],
    targets: &[Action],
    ltm_enabled: bool,
) -> Result<(T, Trace<T>)> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::dim("replay", inputs.len(), targets.len()));
    }
    let mut state = PolicyState::zeros(cfg.d_h);
    let mut ltm = initial_ltm(p, cfg);
    let mut trace = Trace {
        steps: Vec::with_capacity(inputs.len()),
        targets: targets.to_vec(),
        ltm_enabled,
    };
    for input in inputs {
        let (out, cache) = forward_step(p, cfg, input, &state, &ltm, ltm_enabled)?;
        state = out.policy;
        if let Some(next) = out.ltm_next {
            ltm = next;
        }
        trace.steps.push(cache);
    }
    let loss = trace.nll() / T::of(inputs.len() as f64);
    if !loss.is_finite() {
        return Err(Error::Evaluation(format!("replay loss {loss}")));
    }
    Ok((loss, trace))
}

/// A frozen three-step episode over five map nodes for end-to-end gradient checks.
pub mod fixture {
    use super::*;
    use crate::encoders::wm_forward;
    use crate::memory::{AttentionScores, MapConfig, TopoMap};
    use crate::sim::{AgentPose, Cell, Heading};
    use crate::tensor::normalize;

    fn gaussian(rng: &mut crate::rng::Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect()
    }

    fn unit(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
        let mut v = gaussian(rng, n, 1.0);
        normalize(&mut v);
        v
    }

    /// The map grows from three to five nodes; the last step closes a loop.
    pub fn mini_episode(seed: u64, d: usize) -> (Vec<StepInput<f64>>, Vec<Action>) {
        let mut rng = stream(seed, Stream::HeldOut, 0);
        let feats: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut rng, d)).collect();
        let goal = unit(&mut rng, d);
        let sub = |n: usize, edges: Vec<(usize, usize)>| ActiveSubgraph {
            features: Tensor2D::from_rows(&feats[..n], d).expect("unit rows"),
            ids: (0..n).collect(),
            edges,
        };
        let inputs = vec![
            StepInput { sub: sub(3, vec![(0, 1), (1, 2)]), e_goal: goal.clone(), e_cur: unit(&mut rng, d) },
            StepInput { sub: sub(4, vec![(0, 1), (1, 2), (2, 3)]), e_goal: goal.clone(), e_cur: unit(&mut rng, d) },
            StepInput {
                sub: sub(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]),
                e_goal: goal,
                e_cur: unit(&mut rng, d),
            },
        ];
        (inputs, vec![Action::MoveForward, Action::TurnLeft, Action::Stop])
    }

    /// Initialized weights plus Gaussian noise (0.1, and 1.0 on the output
    /// layer) so that every parameter receives gradient.
    pub fn perturbed_params(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
        let mut p = init_params(cfg, seed);
        let mut rng = stream(seed, Stream::HeldOut, 1);
        for (name, prm) in p.iter_mut() {
            let scale = if name == "pol.w_out" { 1.0 } else { 0.1 };
            let noise = gaussian(&mut rng, prm.value.len(), scale);
            axpy(prm.value.data_mut(), 1.0, &noise);
        }
        p
    }

    /// Parameters carrying the analytic gradient of the mean NLL, and the objective.
    pub fn analytic(
        cfg: &ModelConfig,
        seed: u64,
        ltm: bool,
    ) -> Result<(ParamStore<f64>, impl Fn(&ParamStore<f64>) -> Result<f64> + '_)> {
        let p = perturbed_params(cfg, seed);
        let (inputs, targets) = mini_episode(seed, cfg.d);
        let (_, trace) = replay(&p, cfg, &inputs, &targets, ltm)?;
        let mut g = p.clone();
        g.zero_grads();
        backward_trace(&p, &mut g, cfg, &trace, 1.0 / inputs.len() as f64);
        let mut out = p;
        out.zero_grads();
        out.accumulate_grads(&g)?;
        Ok((out, move |q: &ParamStore<f64>| replay(q, cfg, &inputs, &targets, ltm).map(|r| r.0)))
    }

    /// Cross-component sensitivity through the long-term row.
    ///
    /// A six-node chain loses its middle node to forgetting, leaving
    /// components {0, 1} and {3, 4, 5}. Node 0's feature is nudged by `delta`
    /// at step t only; the return value is the largest change in the second
    /// component's encoded rows at step t+1.
    pub fn ltm_bypath_sensitivity(cfg: &ModelConfig, seed: u64, ltm_enabled: bool, delta: f64) -> Result<f64> {
        let d = cfg.d;
        let p = perturbed_params(cfg, seed);
        let mut rng = stream(seed, Stream::HeldOut, 2);
        let mut map = TopoMap::new(MapConfig::new(d));
        for i in 0..6 {
            map.localize_and_update(&unit(&mut rng, d), AgentPose::new(Cell::new(i, 0), Heading::N), i)?;
        }
        let ids = map.active_ids();
        let weights = [0.2, 0.2, 0.01, 0.2, 0.2, 0.19];
        let forgotten = map.forget(&AttentionScores::from_rows(&ids, &weights, 0.0, 6), 0.2)?;
        if forgotten != [2] {
            return Err(Error::Consistency(format!("expected node 2 forgotten, got {forgotten:?}")));
        }
        let sub = map.active_subgraph();
        let goal = unit(&mut rng, d);
        let ltm0 = gaussian(&mut rng, d, 0.5);
        let second: Vec<usize> = sub.ids.iter().enumerate().filter(|(_, &id)| id >= 3).map(|(r, _)| r).collect();
        let run = |perturb: f64| -> Result<Tensor2D<f64>> {
            let mut first = sub.clone();
            first.features.row_mut(0)[0] += perturb;
            let (out, _) = wm_forward(&p, &cfg.wm, &first, &goal, &ltm0, ltm_enabled)?;
            let ltm1 = out.ltm_next.unwrap_or_else(|| ltm0.clone());
            let (out, _) = wm_forward(&p, &cfg.wm, &sub, &goal, &ltm1, ltm_enabled)?;
            Ok(out.wm.rows)
        };
        let (a, b) = (run(0.0)?, run(delta)?);
        Ok(second
            .iter()
            .flat_map(|&r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }
}
