//! End-to-end stages: profile → synthesize → train (sft, bopo) → eval.
//!
//! Every stage derives its random streams from the master seed and a stage
//! label, and every file it writes is a deterministic function of the
//! configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::cost::{boundary_costs, CostBoundaries};
use crate::decode::{single_turn_examples, train_single_turn_classifier, PolicySpec};
use crate::env::{generate_task, Task};
use crate::error::{Error, Result};
use crate::harness::{
    budget_allocation_report, frontier_sweep, hard_budget_eval, AllocationRow, FrontierPoint,
    HardBudgetResult,
};
use crate::io::{self, ExpertLine};
use crate::policy::RouterParams;
use crate::seeding::stream_seed;
use crate::synth::{build_sft_dataset, ExpertRecord, SynthOutput};
use crate::taxonomy::{partition_dataset, profile_task, DifficultyProfile, Taxonomy};
use crate::train::{train_bopo, train_bosft, TrainLogRecord, TrainingSet, Variant};

/// First id of the held-out evaluation tasks.
pub const EVAL_ID_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub tasks: u64,
    pub profile: u64,
    pub synth: u64,
    pub sft: u64,
    pub eval: u64,
    pub single_turn: u64,
}

impl StageSeeds {
    pub fn new(master: u64) -> Self {
        StageSeeds {
            tasks: stream_seed(master, "tasks", &[]),
            profile: stream_seed(master, "profile", &[]),
            synth: stream_seed(master, "synth", &[]),
            sft: stream_seed(master, "sft", &[]),
            eval: stream_seed(master, "eval", &[]),
            single_turn: stream_seed(master, "single-turn", &[]),
        }
    }

    pub fn bopo(master: u64, lambda: f64, variant: Variant) -> u64 {
        let tag = match variant {
            Variant::Bopo => "bopo",
            Variant::Vanilla => "vanilla",
        };
        stream_seed(master, tag, &[lambda.to_bits()])
    }
}

pub fn train_tasks(cfg: &ExperimentConfig) -> Result<Vec<Task>> {
    let seed = StageSeeds::new(cfg.seed).tasks;
    (0..cfg.taxonomy.tasks as u64)
        .map(|id| generate_task(&cfg.env, seed, id))
        .collect()
}

pub fn eval_tasks(cfg: &ExperimentConfig) -> Result<Vec<Task>> {
    let seed = StageSeeds::new(cfg.seed).tasks;
    (0..cfg.eval.tasks as u64)
        .map(|i| generate_task(&cfg.env, seed, EVAL_ID_OFFSET + i))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Profiled {
    pub profiles: Vec<DifficultyProfile>,
    pub taxonomy: Taxonomy,
    pub bounds: BTreeMap<u64, CostBoundaries>,
}

pub fn profile_tasks(tasks: &[Task], cfg: &ExperimentConfig) -> Result<Profiled> {
    let master = StageSeeds::new(cfg.seed).profile;
    let profiles: Vec<DifficultyProfile> = tasks
        .par_iter()
        .map(|t| profile_task(t, cfg.taxonomy.trials, &cfg.cost, master))
        .collect::<Result<_>>()?;
    let taxonomy = partition_dataset(&profiles)?;
    let bounds = profiles
        .iter()
        .map(|p| Ok((p.task_id, boundary_costs(p)?)))
        .collect::<Result<_>>()?;
    Ok(Profiled {
        profiles,
        taxonomy,
        bounds,
    })
}

pub fn synthesize(tasks: &[Task], taxonomy: &Taxonomy, cfg: &ExperimentConfig) -> Result<SynthOutput> {
    let seeds = StageSeeds::new(cfg.seed);
    build_sft_dataset(tasks, taxonomy, &cfg.synth, &cfg.cost, seeds.profile, seeds.synth)
}

pub fn training_set(tasks: Vec<Task>, profiled: &Profiled, experts: &[ExpertRecord]) -> TrainingSet {
    TrainingSet {
        tasks,
        taxonomy: profiled.taxonomy.clone(),
        bounds: profiled.bounds.clone(),
        experts: experts.iter().map(|e| (e.task_id, e.clone())).collect(),
    }
}

/// In-memory run of the whole training side of the pipeline.
#[derive(Debug, Clone)]
pub struct Lab {
    pub config: ExperimentConfig,
    pub train: TrainingSet,
    pub profiled: Profiled,
    pub synth: SynthOutput,
    pub sft: RouterParams,
}

impl Lab {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let tasks = train_tasks(&config)?;
        let profiled = profile_tasks(&tasks, &config)?;
        let synth = synthesize(&tasks, &profiled.taxonomy, &config)?;
        let sft = train_bosft(&synth.dataset, &config.bopo, StageSeeds::new(config.seed).sft)?;
        let train = training_set(tasks, &profiled, &synth.experts);
        Ok(Lab {
            config,
            train,
            profiled,
            synth,
            sft,
        })
    }

    pub fn train_lambda(&self, lambda: f64, variant: Variant) -> Result<(RouterParams, Vec<TrainLogRecord>)> {
        let mut set = self.train.clone();
        let bopo = crate::train::BopoConfig {
            variant,
            ..self.config.bopo
        };
        train_bopo(
            &self.sft,
            &self.sft,
            0,
            &mut set,
            &self.config.cost,
            &bopo,
            &self.config.reward.reward_config(lambda),
            StageSeeds::bopo(self.config.seed, lambda, variant),
        )
    }
}

fn out(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

pub fn bopo_checkpoint_path(cfg: &ExperimentConfig, lambda: f64) -> PathBuf {
    out(cfg, &format!("checkpoints/bopo_lambda_{lambda}.ckpt"))
}

fn bopo_log_path(cfg: &ExperimentConfig, lambda: f64) -> PathBuf {
    out(cfg, &format!("logs/bopo_lambda_{lambda}.jsonl"))
}

fn sft_checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    out(cfg, "checkpoints/bosft.ckpt")
}

/// Profiles training and evaluation tasks and writes the taxonomy tables.
pub fn cmd_profile(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if cfg.taxonomy.tasks == 0 {
        return Err(Error::InvalidConfig("taxonomy.tasks is 0: nothing to profile".into()));
    }
    let train = profile_tasks(&train_tasks(cfg)?, cfg)?;
    let eval = profile_tasks(&eval_tasks(cfg)?, cfg)?;
    let files = vec![
        (out(cfg, "taxonomy.csv"), io::taxonomy_csv(&train.taxonomy)?),
        (out(cfg, "boundaries.csv"), io::boundaries_csv(&train.bounds)?),
        (out(cfg, "eval_taxonomy.csv"), io::taxonomy_csv(&eval.taxonomy)?),
        (
            out(cfg, "profile_trajectories.jsonl"),
            io::to_jsonl(train.profiles.iter().flat_map(|p| {
                p.small_trajectories
                    .iter()
                    .chain(&p.large_trajectories)
                    .map(io::TrajectoryLine::from)
            })),
        ),
    ];
    write_all(files)
}

fn write_all(files: Vec<(PathBuf, String)>) -> Result<Vec<PathBuf>> {
    files
        .into_iter()
        .map(|(p, text)| {
            io::write_file(&p, text)?;
            Ok(p)
        })
        .collect()
}

fn load_taxonomy(path: &Path) -> Result<Taxonomy> {
    io::parse_taxonomy_csv(&io::read_file(path, "taxonomy table (run `profile` first)")?)
}

/// Builds expert records and the SFT manifest from the stored taxonomy.
pub fn cmd_synthesize(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let taxonomy = load_taxonomy(&out(cfg, "taxonomy.csv"))?;
    let tasks = train_tasks(cfg)?;
    let synth = synthesize(&tasks, &taxonomy, cfg)?;
    let manifest = serde_json::json!({
        "examples": synth.dataset.len(),
        "experts": synth.experts.len(),
        "dropped_hard_tasks": synth.dropped.len(),
        "hard_share": synth.dataset.hard_share,
        "class_counts": synth
            .dataset
            .class_counts
            .iter()
            .map(|(l, c)| (l.to_string(), *c))
            .collect::<BTreeMap<_, _>>(),
        "class_weights": class_weights(&synth),
    });
    let files = vec![
        (
            out(cfg, "experts.jsonl"),
            io::to_jsonl(synth.experts.iter().map(ExpertLine::from)),
        ),
        (
            out(cfg, "sft_manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
        ),
        (
            out(cfg, "dropped_hard_tasks.txt"),
            synth.dropped.iter().map(|id| format!("{id}\n")).collect(),
        ),
    ];
    write_all(files)
}

fn class_weights(synth: &SynthOutput) -> BTreeMap<String, f64> {
    let mut w = BTreeMap::new();
    for (e, weight) in synth.dataset.examples.iter().zip(&synth.dataset.weights) {
        *w.entry(e.label.to_string()).or_insert(0.0) += weight;
    }
    w
}

fn load_experts(cfg: &ExperimentConfig, tasks: &[Task]) -> Result<Vec<ExpertRecord>> {
    let text = io::read_file(&out(cfg, "experts.jsonl"), "expert records (run `synthesize` first)")?;
    let by_id: BTreeMap<u64, &Task> = tasks.iter().map(|t| (t.task_id, t)).collect();
    io::from_jsonl::<ExpertLine>(&text, "expert record")?
        .into_iter()
        .map(|line| {
            let task = by_id.get(&line.trajectory.task_id).ok_or(Error::Parse {
                what: "expert record",
                detail: format!("unknown task {}", line.trajectory.task_id),
            })?;
            Ok(ExpertRecord {
                task_id: line.trajectory.task_id,
                label: line.label,
                expert: line.trajectory.restore(task, &cfg.cost)?,
                reward_anchor: None,
                source: line.source,
            })
        })
        .collect()
}

fn load_params(path: &Path, what: &'static str) -> Result<RouterParams> {
    RouterParams::from_checkpoint(&io::read_file(path, what)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Sft,
    Bopo,
}

/// Trains the SFT reference or one BoPO policy per configured λ. With
/// `resume`, a partially trained BoPO checkpoint continues from its
/// recorded iteration.
pub fn cmd_train(cfg: &ExperimentConfig, stage: TrainStage, resume: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let tasks = train_tasks(cfg)?;
    let experts = load_experts(cfg, &tasks)?;
    match stage {
        TrainStage::Sft => {
            let taxonomy = load_taxonomy(&out(cfg, "taxonomy.csv"))?;
            let examples: Vec<_> = experts
                .iter()
                .flat_map(|r| {
                    let task = &tasks[r.task_id as usize];
                    crate::synth::unroll_expert(task, r.label, &r.expert, &cfg.cost)
                })
                .collect();
            debug_assert!(examples.iter().all(|e| taxonomy.label(e.task_id).is_some()));
            let dataset = crate::synth::SftDataset::new(examples, cfg.synth.hard_share)?;
            let params = train_bosft(&dataset, &cfg.bopo, StageSeeds::new(cfg.seed).sft)?;
            let (loss, _) = crate::train::sft_loss_and_grad(
                &params,
                dataset.examples.iter().map(|e| (&e.features, e.target)),
            )?;
            let log = serde_json::json!({ "steps": cfg.bopo.sft_steps, "final_loss": loss });
            write_all(vec![
                (sft_checkpoint_path(cfg), params.to_checkpoint()),
                (out(cfg, "logs/bosft.jsonl"), format!("{log}\n")),
            ])
        }
        TrainStage::Bopo => {
            let reference = load_params(&sft_checkpoint_path(cfg), "SFT checkpoint (run `train --stage sft` first)")?;
            let taxonomy = load_taxonomy(&out(cfg, "taxonomy.csv"))?;
            let bounds = io::parse_boundaries_csv(&io::read_file(&out(cfg, "boundaries.csv"), "boundary table")?)?;
            let mut set = TrainingSet {
                tasks,
                taxonomy,
                bounds,
                experts: experts.into_iter().map(|e| (e.task_id, e)).collect(),
            };
            let mut written = Vec::new();
            for &lambda in &cfg.reward.lambdas {
                let ckpt = bopo_checkpoint_path(cfg, lambda);
                let log_path = bopo_log_path(cfg, lambda);
                let (start, first, mut log) = if resume && ckpt.exists() {
                    let text = io::read_file(&ckpt, "BoPO checkpoint")?;
                    let first = io::checkpoint_iteration(&text).unwrap_or(cfg.bopo.iterations);
                    let prior: Vec<TrainLogRecord> = if log_path.exists() {
                        io::from_jsonl(&io::read_file(&log_path, "training log")?, "training log")?
                    } else {
                        Vec::new()
                    };
                    let prior = prior.into_iter().filter(|r| r.iteration < first).collect();
                    (RouterParams::from_checkpoint(&text)?, first, prior)
                } else {
                    (reference.clone(), 0, Vec::new())
                };
                let (params, new_log) = train_bopo(
                    &start,
                    &reference,
                    first,
                    &mut set,
                    &cfg.cost,
                    &cfg.bopo,
                    &cfg.reward.reward_config(lambda),
                    StageSeeds::bopo(cfg.seed, lambda, Variant::Bopo),
                )?;
                log.extend(new_log);
                let iteration = first.max(cfg.bopo.iterations);
                written.extend(write_all(vec![
                    (ckpt, io::checkpoint_with_iteration(&params, iteration)),
                    (log_path, io::train_log_jsonl(&log)),
                ])?);
            }
            Ok(written)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Frontier,
    HardBudget,
    Allocation,
}

fn learned(params: RouterParams) -> PolicySpec {
    PolicySpec::Learned { params }
}

fn load_bopo_policies(cfg: &ExperimentConfig) -> Result<Vec<(f64, RouterParams)>> {
    cfg.reward
        .lambdas
        .iter()
        .map(|&l| {
            Ok((
                l,
                load_params(&bopo_checkpoint_path(cfg, l), "BoPO checkpoint (run `train --stage bopo` first)")?,
            ))
        })
        .collect()
}

pub fn single_turn_classifier(cfg: &ExperimentConfig) -> Result<RouterParams> {
    let tasks = train_tasks(cfg)?;
    let data = single_turn_examples(
        &tasks,
        &cfg.cost,
        cfg.eval.single_turn_cutoff,
        StageSeeds::new(cfg.seed).single_turn,
    )?;
    train_single_turn_classifier(&data, cfg.bopo.sft_learning_rate, cfg.bopo.sft_steps / 10)
}

pub fn frontier_points(cfg: &ExperimentConfig, sft: &RouterParams, bopo: &[(f64, RouterParams)]) -> Result<Vec<FrontierPoint>> {
    let tasks = eval_tasks(cfg)?;
    let seeds = StageSeeds::new(cfg.seed);
    let n = cfg.eval.seeds;
    let risk = cfg.env.q_large - cfg.env.q_small;
    let classifier = single_turn_classifier(cfg)?;
    let mut points = Vec::new();
    let mut sweep = |name: &str, knobs: &[f64], make: &dyn Fn(f64) -> PolicySpec| -> Result<()> {
        points.extend(frontier_sweep(name, knobs, |k, _| Ok(make(k)), &tasks, &cfg.cost, seeds.eval, n)?);
        Ok(())
    };
    sweep("always_small", &[0.0], &|_| PolicySpec::AlwaysSmall)?;
    sweep("always_large", &[1.0], &|_| PolicySpec::AlwaysLarge)?;
    sweep("random_p", &cfg.eval.random_p, &|p| PolicySpec::RandomP { p })?;
    let ks: Vec<f64> = cfg.eval.first_large_k.iter().map(|&k| k as f64).collect();
    sweep("first_large", &ks, &|k| PolicySpec::FirstLarge { k: k as usize })?;
    sweep("cascade", &cfg.eval.cascade_thresholds, &|t| PolicySpec::Cascade { threshold: t, risk })?;
    sweep("single_turn", &cfg.eval.single_turn_thresholds, &|t| PolicySpec::SingleTurn {
        classifier: classifier.clone(),
        threshold: t,
    })?;
    sweep("bosft", &[0.0], &|_| learned(sft.clone()))?;
    for (lambda, params) in bopo {
        sweep("bopo", &[*lambda], &|_| learned(params.clone()))?;
    }
    Ok(points)
}

pub fn hard_budget_rows(cfg: &ExperimentConfig, sft: &RouterParams, bopo: &[(f64, RouterParams)]) -> Result<Vec<HardBudgetResult>> {
    let tasks = eval_tasks(cfg)?;
    let seeds = StageSeeds::new(cfg.seed);
    let risk = cfg.env.q_large - cfg.env.q_small;
    let classifier = single_turn_classifier(cfg)?;
    let mut rows = Vec::new();
    for &k in &cfg.eval.k_values {
        let mut methods: Vec<(String, PolicySpec)> = vec![
            ("always_small".into(), PolicySpec::AlwaysSmall),
            ("always_large".into(), PolicySpec::AlwaysLarge),
            ("random_p(0.5)".into(), PolicySpec::RandomP { p: 0.5 }),
            (format!("first_large({k})"), PolicySpec::FirstLarge { k }),
            ("cascade(0.5)".into(), PolicySpec::Cascade { threshold: 0.5, risk }),
            ("single_turn(0.5)".into(), PolicySpec::SingleTurn {
                classifier: classifier.clone(),
                threshold: 0.5,
            }),
            ("bosft".into(), learned(sft.clone())),
        ];
        methods.extend(bopo.iter().map(|(l, p)| (format!("bopo(lambda={l})"), learned(p.clone()))));
        rows.extend(hard_budget_eval(&methods, &[k], &tasks, &cfg.cost, seeds.eval, cfg.eval.seeds)?);
    }
    Ok(rows)
}

pub fn allocation_rows(cfg: &ExperimentConfig, params: &RouterParams, eval_taxonomy: &Taxonomy) -> Result<Vec<AllocationRow>> {
    let tasks = eval_tasks(cfg)?;
    budget_allocation_report(
        &learned(params.clone()),
        &tasks,
        eval_taxonomy,
        &cfg.cost,
        StageSeeds::new(cfg.seed).eval,
        cfg.eval.seeds,
    )
}

pub fn cmd_eval(cfg: &ExperimentConfig, mode: EvalMode) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let sft = load_params(&sft_checkpoint_path(cfg), "SFT checkpoint (run `train --stage sft` first)")?;
    let bopo = load_bopo_policies(cfg)?;
    match mode {
        EvalMode::Frontier => {
            let points = frontier_points(cfg, &sft, &bopo)?;
            write_all(vec![(out(cfg, "reports/frontier.csv"), io::frontier_csv(&points)?)])
        }
        EvalMode::HardBudget => {
            let rows = hard_budget_rows(cfg, &sft, &bopo)?;
            write_all(vec![(out(cfg, "reports/hard_budget.csv"), io::hard_budget_csv(&rows)?)])
        }
        EvalMode::Allocation => {
            let eval_tax = load_taxonomy(&out(cfg, "eval_taxonomy.csv"))?;
            let lambda = cfg.eval.allocation_lambda;
            let params = bopo
                .iter()
                .find(|(l, _)| *l == lambda)
                .map(|(_, p)| p.clone())
                .ok_or_else(|| Error::InvalidConfig(format!("eval.allocation_lambda {lambda} is not in reward.lambdas")))?;
            let rows = allocation_rows(cfg, &params, &eval_tax)?;
            write_all(vec![(out(cfg, "reports/allocation.csv"), io::allocation_csv(&rows)?)])
        }
    }
}
