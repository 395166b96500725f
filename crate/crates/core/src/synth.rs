//! Boundary-guided SFT data: stratified rollouts, min-cost expert
//! selection and the Hard-oversampled decision dataset.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::decode::{replay, run_episode, PolicySpec};
use crate::env::{Task, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{FeatureVector, RouterAction};
use crate::seeding;
use crate::taxonomy::{profile_seed, DifficultyLabel, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_stratified: usize,
    pub hard_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_stratified: 20,
            hard_share: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertSource {
    SmallBoundary,
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub task_id: u64,
    pub label: DifficultyLabel,
    pub expert: Trajectory,
    /// Reward of the expert under the current training λ; set by training.
    pub reward_anchor: Option<f64>,
    pub source: ExpertSource,
}

pub fn stratified_seed(master: u64, task_id: u64, k: usize) -> u64 {
    seeding::stream_seed(master, "stratified", &[task_id, k as u64])
}

/// Rollout `k` (1-based) routes LARGE i.i.d. per step with probability `k / n`.
pub fn stratified_rollouts(task: &Task, n: usize, costs: &CostModel, master_seed: u64) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::InvalidConfig("synth.n_stratified must be at least 1".into()));
    }
    (1..=n)
        .map(|k| {
            let spec = PolicySpec::RandomP {
                p: k as f64 / n as f64,
            };
            run_episode(&spec, task, costs, stratified_seed(master_seed, task.task_id, k))
        })
        .collect()
}

/// Cheapest successful rollout; ties go to fewer LARGE calls, then the
/// earliest index.
pub fn select_expert(rollouts: &[Trajectory]) -> Option<&Trajectory> {
    rollouts
        .iter()
        .enumerate()
        .filter(|(_, t)| t.success)
        .min_by(|(ia, a), (ib, b)| {
            a.total_cost
                .total_cmp(&b.total_cost)
                .then(a.large_calls.cmp(&b.large_calls))
                .then(ia.cmp(ib))
        })
        .map(|(_, t)| t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub task_id: u64,
    pub label: DifficultyLabel,
    pub features: FeatureVector,
    pub target: RouterAction,
}

#[derive(Debug, Clone)]
pub struct SftDataset {
    pub examples: Vec<SftExample>,
    /// Decision examples per label.
    pub class_counts: BTreeMap<DifficultyLabel, usize>,
    /// Per-example sampling weights (sum to 1).
    pub weights: Vec<f64>,
    pub hard_share: f64,
}

impl SftDataset {
    pub fn new(examples: Vec<SftExample>, hard_share: f64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut class_counts: BTreeMap<DifficultyLabel, usize> =
            DifficultyLabel::ALL.iter().map(|&l| (l, 0)).collect();
        for e in &examples {
            *class_counts.entry(e.label).or_default() += 1;
        }
        let n_hard = class_counts[&DifficultyLabel::Hard];
        let n_other = examples.len() - n_hard;
        let weights = if n_hard == 0 || n_other == 0 {
            vec![1.0 / examples.len() as f64; examples.len()]
        } else {
            examples
                .iter()
                .map(|e| {
                    if e.label == DifficultyLabel::Hard {
                        hard_share / n_hard as f64
                    } else {
                        (1.0 - hard_share) / n_other as f64
                    }
                })
                .collect()
        };
        Ok(SftDataset {
            examples,
            class_counts,
            weights,
            hard_share,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.weights).expect("weights are positive and finite")
    }

    /// Draws a batch of example indices with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        sampler: &WeightedIndex<f64>,
        size: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        (0..size).map(|_| sampler.sample(rng)).collect()
    }
}

/// Unrolls an expert trajectory into one example per decision.
pub fn unroll_expert(task: &Task, label: DifficultyLabel, expert: &Trajectory, costs: &CostModel) -> Vec<SftExample> {
    let actions: Vec<RouterAction> = expert.actions().collect();
    let (replayed, features) = replay(task, costs, expert.seed, &actions);
    debug_assert_eq!(&replayed, expert);
    features
        .into_iter()
        .zip(actions)
        .map(|(features, target)| SftExample {
            task_id: task.task_id,
            label,
            features,
            target,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: SftDataset,
    pub experts: Vec<ExpertRecord>,
    /// Hard tasks without any successful stratified rollout.
    pub dropped: Vec<u64>,
}

/// Easy and Intractable tasks reuse the first always-small profiling run as
/// the expert; Hard tasks use the cheapest successful stratified rollout.
pub fn build_sft_dataset(
    tasks: &[Task],
    taxonomy: &Taxonomy,
    config: &SynthConfig,
    costs: &CostModel,
    profile_master: u64,
    synth_master: u64,
) -> Result<SynthOutput> {
    use rayon::prelude::*;

    let per_task: Vec<Result<Option<ExpertRecord>>> = tasks
        .par_iter()
        .map(|task| {
            let label = taxonomy.label(task.task_id).ok_or(Error::MissingInput {
                what: "taxonomy entry",
                path: format!("task {}", task.task_id).into(),
            })?;
            Ok(match label {
                DifficultyLabel::Easy | DifficultyLabel::Intractable => {
                    let seed = profile_seed(profile_master, false, task.task_id, 0);
                    let expert = run_episode(&PolicySpec::AlwaysSmall, task, costs, seed)?;
                    Some(ExpertRecord {
                        task_id: task.task_id,
                        label,
                        expert,
                        reward_anchor: None,
                        source: ExpertSource::SmallBoundary,
                    })
                }
                DifficultyLabel::Hard => {
                    let rollouts = stratified_rollouts(task, config.n_stratified, costs, synth_master)?;
                    select_expert(&rollouts).map(|expert| ExpertRecord {
                        task_id: task.task_id,
                        label,
                        expert: expert.clone(),
                        reward_anchor: None,
                        source: ExpertSource::Stratified,
                    })
                }
            })
        })
        .collect();

    let mut experts = Vec::new();
    let mut dropped = Vec::new();
    let mut examples = Vec::new();
    for (task, rec) in tasks.iter().zip(per_task) {
        match rec? {
            Some(rec) => {
                examples.extend(unroll_expert(task, rec.label, &rec.expert, costs));
                experts.push(rec);
            }
            None => {
                log::info!("task {}: no successful stratified rollout, dropped from SFT", task.task_id);
                dropped.push(task.task_id);
            }
        }
    }
    let dataset = SftDataset::new(examples, config.hard_share)?;
    Ok(SynthOutput {
        dataset,
        experts,
        dropped,
    })
}
