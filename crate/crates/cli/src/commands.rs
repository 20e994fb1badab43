use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;

use navmem::agent::{AgentConfig, Mode, SnapshotRecord, StepRecord};
use navmem::artifacts::write_atomic;
use navmem::encoders::{ObservationEncoder, WmConfig, WmKind};
use navmem::episodes::{generate_dataset, validate_episode, Dataset, DatasetConfig, EpisodeRules, MAX_GOALS};
use navmem::eval::{to_jsonl, EvalPolicy, EvalRun, Evaluator};
use navmem::memory::NodeStatus;
use navmem::metrics::{distance_csv, ltm_delta_csv, metrics_csv, Aggregate, DistanceContext, DistanceKind, DistanceRow, EpisodeMetrics};
use navmem::model::ModelConfig;
use navmem::sim::{GridWorld, ObserveConfig};
use navmem::tensor::{load_checkpoint, ParamStore};
use navmem::train::{train_loop, write_training_outputs, ModelSidecar, TrainConfig};

use crate::args::*;
use crate::{CliError, CliResult, RunManifest};

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::SweepP(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn kind(w: WmArg) -> WmKind {
    match w {
        WmArg::Gatv2 => WmKind::Gatv2,
        WmArg::Gcn => WmKind::Gcn,
    }
}

fn generate(a: &GenerateArgs) -> CliResult<()> {
    let started = Instant::now();
    if !(1..=MAX_GOALS).contains(&a.goals) {
        return Err(CliError::Usage(format!("--goals must be in 1..={MAX_GOALS}")));
    }
    if a.worlds == 0 || a.size.width < 5 || a.size.height < 5 || !(0.0..=0.4).contains(&a.density) {
        return Err(CliError::Usage("need --worlds >= 1, --size at least 5x5 and --density in [0, 0.4]".into()));
    }
    let cfg = DatasetConfig {
        worlds: a.worlds,
        width: a.size.width,
        height: a.size.height,
        density: a.density,
        goals: a.goals,
        episodes: a.episodes,
        seed: a.seed,
        rules: EpisodeRules::default(),
    };
    let (ds, worlds) = generate_dataset(&cfg)?;
    for spec in &ds.episodes {
        let report = validate_episode(&worlds[spec.world], spec, &cfg.rules);
        if !report.passed() {
            return Err(CliError::Core(navmem::error::Error::Generation(format!(
                "episode {} failed validation: {:?}",
                spec.id, report.rules
            ))));
        }
    }
    let path = navmem::episodes::write_dataset(&a.out, &ds, &worlds)?;
    let mut m = RunManifest::new("generate", a, a.seed)?;
    m.outputs.push(path.clone());
    m.outputs.extend(ds.header.world_files.iter().map(|f| a.out.join(f)));
    m.finish(RunManifest::path_in(&a.out), started)?;
    println!(
        "wrote {} {}-goal episodes on {} worlds to {}",
        ds.episodes.len(),
        a.goals,
        worlds.len(),
        path.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let started = Instant::now();
    if a.d == 0 || a.d_h == 0 || a.heads == 0 {
        return Err(CliError::Usage("--d, --d-h and --heads must be positive".into()));
    }
    let cfg = TrainConfig {
        model: ModelConfig {
            d: a.d,
            d_h: a.d_h,
            wm: WmConfig {
                kind: kind(a.wm),
                heads: a.heads,
            },
            ..Default::default()
        },
        lr: a.lr,
        momentum: a.momentum,
        batch: a.batch,
        updates: a.updates,
        clip: a.clip,
        seed: a.seed,
        width: a.size.width,
        height: a.size.height,
        density: a.density,
        rules: EpisodeRules::default(),
        ltm_enabled: a.ltm.on(),
        eval_every: a.eval_every,
        eval_episodes: a.eval_episodes,
        eval_worlds: a.eval_worlds,
        eval_forget: a.forget.on(),
        eval_p: a.p,
        projection_seed: a.projection_seed,
        observe: ObserveConfig::default(),
    };
    cfg.validate()?;
    let result = train_loop::<f64>(&cfg, |r| {
        if let (Some(sr), Some(spl)) = (r.eval_sr, r.eval_spl) {
            eprintln!("update {:>5}  loss {:.4}  grad {:.3}  held-out SR {:.3}  SPL {:.3}", r.update, r.loss, r.grad_norm, sr, spl);
        }
    })?;
    let ckpt = write_training_outputs(&a.out, &cfg, &result)?;
    let mut m = RunManifest::new("train", a, a.seed)?;
    m.outputs = vec![
        ckpt.clone(),
        ModelSidecar::path_for(&ckpt),
        a.out.join("last.ckpt"),
        a.out.join("train_log.csv"),
    ];
    m.finish(RunManifest::path_in(&a.out), started)?;
    println!(
        "best checkpoint from update {} (held-out SR {:.3}): {}",
        result.best_update,
        result.best_sr,
        ckpt.display()
    );
    Ok(())
}

struct Model {
    params: ParamStore<f64>,
    sidecar: ModelSidecar,
    encoder: ObservationEncoder,
}

fn load_model(ckpt: &Path) -> CliResult<Model> {
    if !ckpt.is_file() {
        return Err(CliError::Missing(ckpt.to_owned()));
    }
    let side_path = ModelSidecar::path_for(ckpt);
    if !side_path.is_file() {
        return Err(CliError::Missing(side_path));
    }
    let sidecar = ModelSidecar::load(&side_path)?;
    let params: ParamStore<f64> = load_checkpoint(ckpt)?;
    sidecar
        .model
        .check_params(&params)
        .map_err(|e| CliError::Malformed(format!("{}: {e}", ckpt.display())))?;
    let encoder = sidecar.encoder();
    Ok(Model { params, sidecar, encoder })
}

fn load_dataset(path: &Path) -> CliResult<(Dataset, Vec<GridWorld>)> {
    if !path.is_file() {
        return Err(CliError::Missing(path.to_owned()));
    }
    Ok(Dataset::load_with_worlds(path)?)
}

fn agent_config(o: &EvalOptions, model: &Model) -> CliResult<AgentConfig> {
    if let Some(w) = o.wm {
        if kind(w) != model.sidecar.model.wm.kind {
            return Err(CliError::Usage(format!(
                "--wm {w:?} does not match the checkpoint's {:?} working memory",
                model.sidecar.model.wm.kind
            )));
        }
    }
    if o.workers == 0 || o.step_budget == 0 || !(o.radius > 0.0) {
        return Err(CliError::Usage("--workers, --step-budget and --radius must be positive".into()));
    }
    Ok(AgentConfig {
        forget_enabled: o.forget.on(),
        p: o.p,
        ltm_enabled: o.ltm.map_or(model.sidecar.ltm_enabled, Toggle::on),
        step_budget: o.step_budget,
        success_radius_m: o.radius,
        mode: Mode::Eval,
        strict_stop: o.strict_stop.on(),
        record_scores: false,
        record_snapshots: false,
    })
}

fn policy(o: &EvalOptions) -> EvalPolicy {
    match o.policy {
        PolicyArg::Greedy => EvalPolicy::Greedy,
        PolicyArg::Sample => EvalPolicy::Sample { seed: o.seed },
        PolicyArg::Uniform => EvalPolicy::Uniform { seed: o.seed },
        PolicyArg::Teacher => EvalPolicy::Teacher,
    }
}

fn evaluate(model: &Model, agent: AgentConfig, o: &EvalOptions, ds: &Dataset, worlds: &[GridWorld]) -> CliResult<EvalRun> {
    let ev = Evaluator {
        params: &model.params,
        model: &model.sidecar.model,
        encoder: &model.encoder,
        agent,
        policy: policy(o),
    };
    Ok(ev.run(ds, worlds, o.workers)?)
}

fn aggregate_line(a: &Aggregate) -> String {
    format!(
        "episodes {}  SR {:.4}  SPL {:.4}  PR {:.4}  PPL {:.4}",
        a.episodes, a.sr, a.spl, a.pr, a.ppl
    )
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    aggregate: &'a Aggregate,
    agent: &'a AgentConfig,
    policy: EvalPolicy,
    forget_calls: usize,
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let started = Instant::now();
    let model = load_model(&a.ckpt)?;
    let mut agent = agent_config(&a.opts, &model)?;
    agent.record_scores = a.scores.on();
    agent.record_snapshots = a.snapshots.on();
    let (ds, worlds) = load_dataset(&a.dataset)?;
    let run = evaluate(&model, agent, &a.opts, &ds, &worlds)?;

    let metrics = a.out.join("metrics.csv");
    write_text(&metrics, &metrics_csv(&run.metrics))?;
    let traj = a.out.join("trajectories.jsonl");
    write_text(&traj, &to_jsonl(run.trajectories.iter().flatten())?)?;
    let summary = a.out.join("summary.json");
    let s = EvalSummary {
        aggregate: &run.aggregate,
        agent: &agent,
        policy: policy(&a.opts),
        forget_calls: run.forget_calls,
    };
    write_text(&summary, &(serde_json::to_string_pretty(&s).map_err(navmem::error::Error::from)? + "\n"))?;
    let mut m = RunManifest::new("eval", a, a.opts.seed)?;
    m.inputs = vec![a.ckpt.clone(), a.dataset.clone()];
    m.outputs = vec![metrics, traj, summary];
    if a.snapshots.on() {
        let snaps = a.out.join("snapshots.jsonl");
        write_text(&snaps, &to_jsonl(run.snapshots.iter().flatten())?)?;
        m.outputs.push(snaps);
    }
    m.finish(RunManifest::path_in(&a.out), started)?;
    println!("{}", aggregate_line(&run.aggregate));
    Ok(())
}

pub const SWEEP_HEADER: &str = "p,difficulty,episodes,sr,spl,pr,ppl";

fn by_difficulty(metrics: &[EpisodeMetrics]) -> BTreeMap<usize, Vec<EpisodeMetrics>> {
    let mut groups: BTreeMap<usize, Vec<EpisodeMetrics>> = BTreeMap::new();
    for m in metrics {
        groups.entry(m.difficulty).or_default().push(m.clone());
    }
    groups
}

fn sweep(a: &SweepArgs) -> CliResult<()> {
    let started = Instant::now();
    let model = load_model(&a.ckpt)?;
    let base = agent_config(&a.opts, &model)?;
    let sets = a.dataset.iter().map(|p| load_dataset(p)).collect::<CliResult<Vec<_>>>()?;
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for &p in &a.p_grid {
        let agent = AgentConfig {
            forget_enabled: true,
            p,
            ..base
        };
        let mut all = Vec::new();
        for (ds, worlds) in &sets {
            all.extend(evaluate(&model, agent, &a.opts, ds, worlds)?.metrics);
        }
        for (difficulty, group) in by_difficulty(&all) {
            let g = Aggregate::of(&group);
            let _ = writeln!(out, "{p},{difficulty},{},{},{},{},{}", g.episodes, g.sr, g.spl, g.pr, g.ppl);
            println!("p {p:<4} goals {difficulty}  {}", aggregate_line(&g));
        }
    }
    write_text(&a.out, &out)?;
    let mut m = RunManifest::new("sweep-p", a, a.opts.seed)?;
    m.inputs = std::iter::once(a.ckpt.clone()).chain(a.dataset.iter().cloned()).collect();
    m.outputs = vec![a.out.clone()];
    m.finish(RunManifest::path_beside(&a.out), started)?;
    Ok(())
}

pub const ABLATION_HEADER: &str = "row,wm,forget,ltm,p,episodes,sr,spl,pr,ppl";

/// Working memory, forgetting, long-term memory.
pub const ABLATION_GRID: [(WmKind, bool, bool); 6] = [
    (WmKind::Gcn, false, false),
    (WmKind::Gcn, true, false),
    (WmKind::Gatv2, false, false),
    (WmKind::Gatv2, true, false),
    (WmKind::Gatv2, false, true),
    (WmKind::Gatv2, true, true),
];

fn ablate(a: &AblateArgs) -> CliResult<()> {
    let started = Instant::now();
    let gat = load_model(&a.ckpt_gatv2)?;
    let gcn = load_model(&a.ckpt_gcn)?;
    for (m, want) in [(&gat, WmKind::Gatv2), (&gcn, WmKind::Gcn)] {
        if m.sidecar.model.wm.kind != want {
            return Err(CliError::Usage(format!("checkpoint for {want:?} holds a {:?} model", m.sidecar.model.wm.kind)));
        }
    }
    let opts = EvalOptions { wm: None, ..a.opts.clone() };
    let (ds, worlds) = load_dataset(&a.dataset)?;
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for (i, &(wm, forget, ltm)) in ABLATION_GRID.iter().enumerate() {
        let model = if wm == WmKind::Gatv2 { &gat } else { &gcn };
        let agent = AgentConfig {
            forget_enabled: forget,
            ltm_enabled: ltm,
            ..agent_config(&opts, model)?
        };
        let g = evaluate(model, agent, &opts, &ds, &worlds)?.aggregate;
        let wm_name = if wm == WmKind::Gatv2 { "gatv2" } else { "gcn" };
        let onoff = |b: bool| if b { "on" } else { "off" };
        let _ = writeln!(
            out,
            "{},{wm_name},{},{},{},{},{},{},{},{}",
            i + 1,
            onoff(forget),
            onoff(ltm),
            opts.p,
            g.episodes,
            g.sr,
            g.spl,
            g.pr,
            g.ppl
        );
        println!("{} {wm_name:<5} forget {:<3} ltm {:<3} {}", i + 1, onoff(forget), onoff(ltm), aggregate_line(&g));
    }
    write_text(&a.out, &out)?;
    let mut m = RunManifest::new("ablate", a, a.opts.seed)?;
    m.inputs = vec![a.ckpt_gatv2.clone(), a.ckpt_gcn.clone(), a.dataset.clone()];
    m.outputs = vec![a.out.clone()];
    m.finish(RunManifest::path_beside(&a.out), started)?;
    Ok(())
}

/// Parses one JSON value per non-blank line, reporting the first bad line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|_| CliError::Missing(path.to_owned()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| CliError::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub const DISTANCE_SUMMARY_HEADER: &str = "goal_index,status,count,mean_m_a,mean_m_b,mean_m_c,mean_m_d,mean_m_e";

fn distance_summary(rows: &[DistanceRow]) -> String {
    let mut groups: BTreeMap<(usize, &str), (usize, [f64; 5])> = BTreeMap::new();
    for r in rows {
        let e = groups.entry((r.goal_index, r.status.as_str())).or_default();
        e.0 += 1;
        for (s, v) in e.1.iter_mut().zip([r.m.a, r.m.b, r.m.c, r.m.d, r.m.e]) {
            *s += v;
        }
    }
    let mut out = String::from(DISTANCE_SUMMARY_HEADER);
    out.push('\n');
    for ((g, status), (n, sums)) in groups {
        let m = sums.map(|s| s / n as f64);
        let _ = writeln!(out, "{g},{status},{n},{},{},{},{},{}", m[0], m[1], m[2], m[3], m[4]);
    }
    out
}

fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    let started = Instant::now();
    let (ds, worlds) = load_dataset(&a.dataset)?;
    let steps: Vec<StepRecord> = read_jsonl(&a.trajectories)?;
    let ltm: Vec<_> = steps.iter().map(|r| (r.episode, r.goal_index, r.step, r.ltm_delta_l2)).collect();
    let dist_kind = match a.distance {
        DistanceArg::Geodesic => DistanceKind::Geodesic,
        DistanceArg::Euclidean => DistanceKind::Euclidean,
    };
    let specs: HashMap<usize, &navmem::episodes::EpisodeSpec> = ds.episodes.iter().map(|s| (s.id, s)).collect();
    let mut rows = Vec::new();
    let mut inputs: Vec<PathBuf> = vec![a.dataset.clone(), a.trajectories.clone()];
    if let Some(path) = &a.snapshots {
        inputs.push(path.clone());
        let snaps: Vec<SnapshotRecord> = read_jsonl(path)?;
        for s in &snaps {
            let nodes = &s.snapshot.nodes;
            if a.only_forgetting.on() && nodes.iter().all(|n| n.status == NodeStatus::Active) {
                continue;
            }
            let spec = specs
                .get(&s.episode)
                .ok_or_else(|| CliError::Malformed(format!("snapshot for episode {} not in the dataset", s.episode)))?;
            let goal = *spec
                .goals
                .get(s.goal_index.wrapping_sub(1))
                .ok_or_else(|| CliError::Malformed(format!("episode {} has no goal {}", s.episode, s.goal_index)))?;
            let Some(agent) = s.snapshot.current_node.and_then(|c| nodes.iter().find(|n| n.id == c)) else {
                continue;
            };
            let ctx = DistanceContext::new(&worlds[spec.world], agent.pose.cell(), goal, dist_kind)?;
            for n in nodes {
                rows.push(DistanceRow {
                    episode: s.episode,
                    goal_index: s.goal_index,
                    step: s.step,
                    node_id: n.id,
                    status: if n.status == NodeStatus::Active { "retained" } else { "forgotten" }.to_owned(),
                    m: ctx.measure(n.pose.cell()),
                });
            }
        }
    }
    let dist = a.out.join("distance.csv");
    let summary = a.out.join("distance_summary.csv");
    let delta = a.out.join("ltm_delta.csv");
    write_text(&dist, &distance_csv(&rows))?;
    write_text(&summary, &distance_summary(&rows))?;
    write_text(&delta, &ltm_delta_csv(&ltm))?;
    let mut m = RunManifest::new("analyze", a, ds.header.seed)?;
    m.inputs = inputs;
    m.outputs = vec![dist, summary, delta];
    m.finish(RunManifest::path_in(&a.out), started)?;
    println!("{} distance rows, {} long-term deltas", rows.len(), ltm.len());
    Ok(())
}
