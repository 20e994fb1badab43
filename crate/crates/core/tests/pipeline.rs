use navmem::agent::{run_episode, ActionSource, AgentConfig};
use navmem::encoders::ObservationEncoder;
use navmem::episodes::{generate_dataset, write_dataset, Dataset, DatasetConfig};
use navmem::eval::{EvalPolicy, Evaluator};
use navmem::metrics::{compute_ppl, compute_spl, metrics_csv, Outcome};
use navmem::model::{fixture::perturbed_params, init_params, ModelConfig};
use navmem::sim::ObserveConfig;
use navmem::train::{train_log_csv, train_loop, TrainConfig};
use navmem::Params;

fn small_model() -> ModelConfig {
    ModelConfig { d: 16, d_h: 16, ..Default::default() }
}

fn dataset(goals: usize, episodes: usize, seed: u64) -> (Dataset, Vec<navmem::sim::GridWorld>) {
    generate_dataset(&DatasetConfig {
        worlds: 4,
        goals,
        episodes,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn teacher_completes_every_generated_episode() {
    let model = small_model();
    let params: Params = init_params(&model, 0);
    let enc = ObservationEncoder::new(model.d, ObserveConfig::default(), 7);
    for goals in 1..=4 {
        let (ds, worlds) = dataset(goals, 12, 40 + goals as u64);
        let run = Evaluator {
            params: &params,
            model: &model,
            encoder: &enc,
            agent: AgentConfig::default(),
            policy: EvalPolicy::Teacher,
        }
        .run(&ds, &worlds, 1)
        .unwrap();
        for m in &run.metrics {
            assert_eq!(m.progress, 1.0, "episode {} with {goals} goals", m.episode);
            assert_eq!(m.outcome, Outcome::Success);
        }
    }
}

#[test]
fn forgotten_set_is_empty_after_every_reached_goal() {
    let model = small_model();
    let params = perturbed_params(&model, 1);
    let enc = ObservationEncoder::new(model.d, ObserveConfig::default(), 7);
    let (ds, worlds) = dataset(3, 10, 3);
    let agent = AgentConfig { p: 0.4, ..Default::default() };
    let mut saw_forgetting = false;
    for spec in &ds.episodes {
        let r = run_episode(&worlds[spec.world], spec, &params, &model, &enc, &agent, &mut ActionSource::Teacher, false).unwrap();
        assert_eq!(r.forgotten_after_goal.len(), 2, "two intermediate goals");
        assert!(r.forgotten_after_goal.iter().all(|&n| n == 0));
        saw_forgetting |= r.records.iter().any(|s| !s.forgotten_ids.is_empty());
    }
    assert!(saw_forgetting);
}

#[test]
fn path_weighted_metrics_stay_below_their_unweighted_forms() {
    let model = small_model();
    let params = perturbed_params(&model, 2);
    let enc = ObservationEncoder::new(model.d, ObserveConfig::default(), 7);
    for goals in [1, 3] {
        let (ds, worlds) = dataset(goals, 10, 70 + goals as u64);
        for policy in [EvalPolicy::Teacher, EvalPolicy::Uniform { seed: 1 }, EvalPolicy::Greedy] {
            let agent = AgentConfig { step_budget: 150, ..Default::default() };
            let run = Evaluator { params: &params, model: &model, encoder: &enc, agent, policy }.run(&ds, &worlds, 1).unwrap();
            for m in &run.metrics {
                assert!(m.ppl <= m.progress + 1e-15);
                assert!(m.spl <= if m.success() { 1.0 } else { 0.0 });
            }
            if goals == 1 {
                let ppl: Vec<_> = run.metrics.iter().map(|m| (m.progress, m.l_i, m.p_i)).collect();
                let spl: Vec<_> = run.metrics.iter().map(|m| (m.success(), m.l_i, m.p_i)).collect();
                assert_eq!(compute_ppl(&ppl).unwrap(), compute_spl(&spl).unwrap());
            }
        }
    }
}

#[test]
fn dataset_files_round_trip_into_identical_evaluations() {
    let model = small_model();
    let params = perturbed_params(&model, 4);
    let enc = ObservationEncoder::new(model.d, ObserveConfig::default(), 7);
    let (ds, worlds) = dataset(2, 8, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = write_dataset(dir.path(), &ds, &worlds).unwrap();
    let (back, back_worlds) = Dataset::load_with_worlds(&path).unwrap();
    assert_eq!(back, ds);
    let ev = |d: &Dataset, w: &[navmem::sim::GridWorld]| {
        let agent = AgentConfig { step_budget: 100, ..Default::default() };
        let r = Evaluator { params: &params, model: &model, encoder: &enc, agent, policy: EvalPolicy::Sample { seed: 2 } }.run(d, w, 2).unwrap();
        metrics_csv(&r.metrics)
    };
    assert_eq!(ev(&ds, &worlds), ev(&back, &back_worlds));
}

#[test]
fn loss_falls_over_the_first_hundred_updates() {
    let cfg = TrainConfig {
        updates: 100,
        eval_every: 100,
        eval_episodes: 5,
        eval_worlds: 2,
        ..Default::default()
    };
    let r = train_loop::<f64>(&cfg, |_| {}).unwrap();
    assert!((r.log[0].loss - 4f64.ln()).abs() < 0.05);
    let mean = |rows: &[navmem::train::LogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    let (first, second) = r.log.split_at(50);
    assert!(mean(second) < mean(first), "{} vs {}", mean(first), mean(second));
    let again = train_loop::<f64>(&cfg, |_| {}).unwrap();
    assert_eq!(train_log_csv(&r.log), train_log_csv(&again.log));
}

#[test]
fn single_precision_pipeline_runs() {
    let model = small_model();
    let params: navmem::Params32 = perturbed_params(&model, 5).cast();
    let enc = ObservationEncoder::new(model.d, ObserveConfig::default(), 7);
    let (ds, worlds) = dataset(2, 4, 12);
    let agent = AgentConfig { step_budget: 80, ..Default::default() };
    let run = Evaluator { params: &params, model: &model, encoder: &enc, agent, policy: EvalPolicy::Greedy }.run(&ds, &worlds, 1).unwrap();
    assert_eq!(run.metrics.len(), 4);
    assert!(run.metrics.iter().all(|m| m.progress.is_finite() && m.ppl <= m.progress));
}
