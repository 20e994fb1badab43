//! Dataset evaluation across a worker pool, merged in episode order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{run_episode, ActionSource, AgentConfig, EpisodeResult, SnapshotRecord, StepRecord};
use crate::encoders::ObservationEncoder;
use crate::episodes::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{Aggregate, EpisodeMetrics};
use crate::model::ModelConfig;
use crate::rng::{stream, Stream};
use crate::sim::GridWorld;
use crate::tensor::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPolicy {
    Greedy,
    /// Policy sampling, seeded per episode.
    Sample { seed: u64 },
    /// Uniform random actions, seeded per episode.
    Uniform { seed: u64 },
    /// The shortest-path teacher.
    Teacher,
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub metrics: Vec<EpisodeMetrics>,
    pub aggregate: Aggregate,
    /// Per episode, in dataset order.
    pub trajectories: Vec<Vec<StepRecord>>,
    pub snapshots: Vec<Vec<SnapshotRecord>>,
    pub forget_calls: usize,
    /// Forgotten-node counts observed right after each reached goal.
    pub forgotten_after_goal: Vec<usize>,
}

pub struct Evaluator<'a, T: Scalar> {
    pub params: &'a ParamStore<T>,
    pub model: &'a ModelConfig,
    pub encoder: &'a ObservationEncoder,
    pub agent: AgentConfig,
    pub policy: EvalPolicy,
}

impl<T: Scalar> Evaluator<'_, T> {
    fn run_one(&self, world: &GridWorld, spec: &crate::episodes::EpisodeSpec) -> Result<(EpisodeMetrics, EpisodeResult<T>)> {
        let mut rng;
        let mut source = match self.policy {
            EvalPolicy::Greedy => ActionSource::Greedy,
            EvalPolicy::Sample { seed } => {
                rng = stream(seed, Stream::Sampling, spec.id as u64);
                ActionSource::Sample(&mut rng)
            }
            EvalPolicy::Uniform { seed } => {
                rng = stream(seed, Stream::Sampling, spec.id as u64);
                ActionSource::Uniform(&mut rng)
            }
            EvalPolicy::Teacher => ActionSource::Teacher,
        };
        let r = run_episode(world, spec, self.params, self.model, self.encoder, &self.agent, &mut source, false)?;
        Ok((r.metrics(world, spec)?, r))
    }

    /// Runs every episode of `dataset` on `workers` threads. Results do not
    /// depend on the worker count.
    pub fn run(&self, dataset: &Dataset, worlds: &[GridWorld], workers: usize) -> Result<EvalRun> {
        if worlds.len() != dataset.header.world_files.len() {
            return Err(Error::Consistency(format!(
                "dataset lists {} worlds, {} loaded",
                dataset.header.world_files.len(),
                worlds.len()
            )));
        }
        let job = |spec: &crate::episodes::EpisodeSpec| self.run_one(&worlds[spec.world], spec);
        let results: Vec<Result<(EpisodeMetrics, EpisodeResult<T>)>> = if workers <= 1 {
            dataset.episodes.iter().map(job).collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Evaluation(format!("worker pool: {e}")))?;
            pool.install(|| dataset.episodes.par_iter().map(job).collect())
        };
        let mut run = EvalRun {
            metrics: Vec::with_capacity(results.len()),
            aggregate: Aggregate::of(&[]),
            trajectories: Vec::with_capacity(results.len()),
            snapshots: Vec::with_capacity(results.len()),
            forget_calls: 0,
            forgotten_after_goal: Vec::new(),
        };
        for r in results {
            let (m, ep) = r?;
            run.metrics.push(m);
            run.trajectories.push(ep.records);
            run.snapshots.push(ep.snapshots);
            run.forget_calls += ep.forget_calls;
            run.forgotten_after_goal.extend(ep.forgotten_after_goal);
        }
        run.aggregate = Aggregate::of(&run.metrics);
        Ok(run)
    }
}

/// One JSON object per line.
pub fn to_jsonl<S: Serialize>(items: impl IntoIterator<Item = S>) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(&it)?);
        out.push('\n');
    }
    Ok(out)
}
