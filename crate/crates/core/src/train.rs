//! Behaviour cloning (BoSFT) and boundary-guided policy optimization (BoPO).
//!
//! The surrogate maximized by [`bopo_update`] for a set of groups is
//!
//! ```text
//! J(θ) = mean over groups g, members i of
//!          mean over decisions t of [ clip(r_t, 1-c, 1+c) · A_i − β · KL(π_θ(·|s_t) ‖ π_ref(·|s_t)) ]
//! r_t  = exp(log π_θ(a_t|s_t) − log π_old(a_t|s_t))
//! ```
//!
//! with per-decision importance ratios (trajectory-level products are
//! numerically useless over twenty-odd steps) and the Bernoulli KL of
//! [`decision_kl`].

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{normalized_cost, CostBoundaries, CostModel, DEFAULT_NORM_EPSILON};
use crate::decode::{run_episode_logged, PolicySpec};
use crate::env::{Task, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{self, decision_kl, decision_kl_dp, logistic, FeatureVector, RouterAction, RouterParams};
use crate::seeding;
use crate::synth::{ExpertRecord, SftDataset};
use crate::taxonomy::{DifficultyLabel, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub r_success: f64,
    pub r_hard: f64,
    pub lambda: f64,
    pub epsilon_norm: f64,
    pub epsilon_adv: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            r_success: 1.0,
            r_hard: 0.5,
            lambda: 0.5,
            epsilon_norm: DEFAULT_NORM_EPSILON,
            epsilon_adv: 1e-8,
        }
    }
}

impl RewardConfig {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }
}

/// Reward and baseline family used by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Boundary-relative reward, Hard bonus, reference-guided baseline.
    Bopo,
    /// `I(success) − λ·C(τ)` on raw cost with a group-mean baseline only.
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BopoConfig {
    pub group_size: usize,
    pub beta_kl: f64,
    pub learning_rate: f64,
    pub sft_learning_rate: f64,
    pub ratio_clip: f64,
    pub iterations: usize,
    pub tasks_per_batch: usize,
    pub update_epochs: usize,
    /// Global gradient-norm cap on each BoPO step; `None` disables it.
    pub max_grad_norm: Option<f64>,
    pub sft_steps: usize,
    pub sft_batch_size: usize,
    pub variant: Variant,
}

impl Default for BopoConfig {
    fn default() -> Self {
        BopoConfig {
            group_size: 8,
            beta_kl: 0.04,
            learning_rate: 1e-6,
            sft_learning_rate: 2e-5,
            ratio_clip: 0.2,
            iterations: 200,
            tasks_per_batch: 8,
            update_epochs: 1,
            max_grad_norm: Some(1.0),
            sft_steps: 2000,
            sft_batch_size: 64,
            variant: Variant::Bopo,
        }
    }
}

impl BopoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("bopo.group_size must be at least 2");
        }
        if !(self.learning_rate > 0.0) || !(self.sft_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.ratio_clip > 0.0) {
            return bad("bopo.ratio_clip must be positive");
        }
        if self.beta_kl < 0.0 {
            return bad("bopo.beta_kl must be non-negative");
        }
        if self.tasks_per_batch == 0 || self.sft_batch_size == 0 || self.update_epochs == 0 {
            return bad("batch sizes and update_epochs must be positive");
        }
        if matches!(self.max_grad_norm, Some(g) if !(g > 0.0)) {
            return bad("bopo.max_grad_norm must be positive");
        }
        Ok(())
    }
}

fn check_finite(what: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Divergence(format!("{what} is {x}")))
    }
}

/// Mean negative log-likelihood of the targets and its gradient.
pub fn sft_loss_and_grad<'a>(
    params: &RouterParams,
    batch: impl IntoIterator<Item = (&'a FeatureVector, RouterAction)>,
) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.dim()];
    let mut n = 0usize;
    for (f, target) in batch {
        let (lp, g) = policy::logprob_and_grad(params, f, target)?;
        loss -= lp;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc -= gi;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// Mini-batch gradient descent on the weighted SFT sampler.
pub fn train_bosft(dataset: &SftDataset, config: &BopoConfig, seed: u64) -> Result<RouterParams> {
    config.validate()?;
    let mut rng = seeding::stream(seed, "bosft", &[]);
    let sampler = dataset.sampler();
    let mut params = RouterParams::zeros();
    for step in 0..config.sft_steps {
        let idx = dataset.sample_batch(&sampler, config.sft_batch_size, &mut rng);
        let (loss, grad) = sft_loss_and_grad(
            &params,
            idx.iter().map(|&i| {
                let e = &dataset.examples[i];
                (&e.features, e.target)
            }),
        )?;
        check_finite(&format!("SFT loss at step {step}"), loss)?;
        for (w, g) in params.weights.iter_mut().zip(&grad) {
            *w -= config.sft_learning_rate * g;
        }
        if !params.is_finite() {
            return Err(Error::Divergence(format!("non-finite SFT weights at step {step}")));
        }
    }
    Ok(params.with_version("bosft"))
}

/// `(success ? r_success : 0) + (success ∧ Hard ? r_hard : 0) − λ·C_norm`.
pub fn boundary_relative_reward(
    traj: &Trajectory,
    label: DifficultyLabel,
    bounds: &CostBoundaries,
    rc: &RewardConfig,
) -> f64 {
    let mut r = 0.0;
    if traj.success {
        r += rc.r_success;
        if label == DifficultyLabel::Hard {
            r += rc.r_hard;
        }
    }
    r - rc.lambda * normalized_cost(traj.total_cost, bounds, rc.epsilon_norm)
}

pub fn vanilla_reward(traj: &Trajectory, lambda: f64) -> f64 {
    (if traj.success { 1.0 } else { 0.0 }) - lambda * traj.total_cost
}

/// `A_g = (R_g − max(μ, R_ref)) / (σ + ε)` with population σ; the baseline
/// is the group mean alone when no reference is given.
pub fn reference_guided_advantage(rewards: &[f64], reference: Option<f64>, eps: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    let baseline = match reference {
        Some(r) => mean.max(r),
        None => mean,
    };
    let denom = var.sqrt() + eps;
    rewards.iter().map(|r| (r - baseline) / denom).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub features: FeatureVector,
    pub action: RouterAction,
    pub old_logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember {
    pub trajectory: Trajectory,
    pub steps: Vec<RolloutStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    pub task_id: u64,
    pub members: Vec<GroupMember>,
    pub rewards: Vec<f64>,
    pub reference_reward: Option<f64>,
    pub advantages: Vec<f64>,
}

pub fn rollout_seed(master: u64, iteration: usize, slot: usize, member: usize) -> u64 {
    seeding::stream_seed(master, "bopo-rollout", &[iteration as u64, slot as u64, member as u64])
}

/// Samples `size` trajectories from `params`, storing per-decision log-probs.
pub fn sample_group(
    params: &RouterParams,
    task: &Task,
    costs: &CostModel,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<GroupMember>> {
    let spec = PolicySpec::Learned {
        params: params.clone(),
    };
    seeds
        .into_iter()
        .map(|seed| {
            let (trajectory, decisions) = run_episode_logged(&spec, task, costs, seed)?;
            let steps = decisions
                .into_iter()
                .map(|d| RolloutStep {
                    old_logprob: if d.action.is_large() {
                        d.prob_large.ln()
                    } else {
                        (1.0 - d.prob_large).ln()
                    },
                    features: d.features,
                    action: d.action,
                })
                .collect();
            Ok(GroupMember { trajectory, steps })
        })
        .collect()
}

impl GroupRollout {
    pub fn new(task_id: u64, members: Vec<GroupMember>, rewards: Vec<f64>, reference_reward: Option<f64>, eps_adv: f64) -> Self {
        let advantages = reference_guided_advantage(&rewards, reference_reward, eps_adv);
        GroupRollout {
            task_id,
            members,
            rewards,
            reference_reward,
            advantages,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateValue {
    pub objective: f64,
    pub mean_kl: f64,
}

/// Surrogate objective and its gradient with respect to `params`.
pub fn surrogate_and_grad(
    params: &RouterParams,
    reference: &RouterParams,
    groups: &[GroupRollout],
    config: &BopoConfig,
) -> Result<(SurrogateValue, Vec<f64>)> {
    let mut objective = 0.0;
    let mut kl_total = 0.0;
    let mut grad = vec![0.0; params.dim()];
    let mut members = 0usize;
    let (lo, hi) = (1.0 - config.ratio_clip, 1.0 + config.ratio_clip);
    for group in groups {
        for (member, &adv) in group.members.iter().zip(&group.advantages) {
            members += 1;
            let n = member.steps.len();
            if n == 0 {
                continue;
            }
            let inv_n = 1.0 / n as f64;
            for step in &member.steps {
                let (logp, glogp) = policy::logprob_and_grad(params, &step.features, step.action)?;
                let ratio = (logp - step.old_logprob).exp();
                let clipped = ratio.clamp(lo, hi);
                objective += inv_n * clipped * adv;
                if ratio > lo && ratio < hi {
                    for (acc, g) in grad.iter_mut().zip(&glogp) {
                        *acc += inv_n * adv * ratio * g;
                    }
                }
                let z = params.logit(&step.features)?;
                let p = logistic(z);
                let q = policy::prob_large(reference, &step.features)?;
                let kl = decision_kl(p, q);
                kl_total += inv_n * kl;
                objective -= inv_n * config.beta_kl * kl;
                if z.abs() < policy::LOGIT_CLAMP {
                    let dkl = decision_kl_dp(p, q) * p * (1.0 - p);
                    for (acc, x) in grad.iter_mut().zip(step.features.as_slice()) {
                        *acc -= inv_n * config.beta_kl * dkl * x;
                    }
                }
            }
        }
    }
    if members == 0 {
        return Ok((
            SurrogateValue {
                objective: 0.0,
                mean_kl: 0.0,
            },
            grad,
        ));
    }
    let inv_m = 1.0 / members as f64;
    grad.iter_mut().for_each(|g| *g *= inv_m);
    Ok((
        SurrogateValue {
            objective: objective * inv_m,
            mean_kl: kl_total * inv_m,
        },
        grad,
    ))
}

/// One gradient-ascent step on the surrogate, optionally norm-capped.
pub fn bopo_update(
    params: &RouterParams,
    reference: &RouterParams,
    groups: &[GroupRollout],
    config: &BopoConfig,
) -> Result<(RouterParams, SurrogateValue)> {
    let (value, mut grad) = surrogate_and_grad(params, reference, groups, config)?;
    check_finite("BoPO surrogate", value.objective)?;
    if let Some(cap) = config.max_grad_norm {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cap {
            let s = cap / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    let mut next = params.clone();
    for (w, g) in next.weights.iter_mut().zip(&grad) {
        *w += config.learning_rate * g;
    }
    if !next.is_finite() {
        return Err(Error::Divergence("non-finite BoPO weights".into()));
    }
    Ok((next, value))
}

/// Everything the optimizer needs to know about the training tasks.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub tasks: Vec<Task>,
    pub taxonomy: Taxonomy,
    pub bounds: BTreeMap<u64, CostBoundaries>,
    pub experts: BTreeMap<u64, ExpertRecord>,
}

impl TrainingSet {
    fn label(&self, task_id: u64) -> Result<DifficultyLabel> {
        self.taxonomy.label(task_id).ok_or(Error::MissingInput {
            what: "taxonomy entry",
            path: format!("task {task_id}").into(),
        })
    }

    fn bounds(&self, task_id: u64) -> Result<&CostBoundaries> {
        self.bounds.get(&task_id).ok_or(Error::MissingBoundaryRuns(task_id))
    }

    /// Scores every stored expert under `rc` (the current λ).
    pub fn rescore_anchors(&mut self, rc: &RewardConfig) -> Result<()> {
        let mut anchors = Vec::with_capacity(self.experts.len());
        for (&id, rec) in &self.experts {
            anchors.push((id, boundary_relative_reward(&rec.expert, rec.label, self.bounds(id)?, rc)));
        }
        for (id, a) in anchors {
            if let Some(rec) = self.experts.get_mut(&id) {
                rec.reward_anchor = Some(a);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub mean_cost: f64,
    pub mean_kl: f64,
    pub lambda: f64,
}

/// Runs BoPO (or the vanilla variant) from `start` for `config.iterations`
/// iterations, beginning at `first_iteration` so that a resumed run draws
/// the same streams as an uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn train_bopo(
    start: &RouterParams,
    reference: &RouterParams,
    first_iteration: usize,
    set: &mut TrainingSet,
    costs: &CostModel,
    config: &BopoConfig,
    rc: &RewardConfig,
    master_seed: u64,
) -> Result<(RouterParams, Vec<TrainLogRecord>)> {
    use rayon::prelude::*;

    config.validate()?;
    if set.tasks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    set.rescore_anchors(rc)?;
    let mut params = start.clone();
    let mut log = Vec::with_capacity(config.iterations.saturating_sub(first_iteration));
    for it in first_iteration..config.iterations {
        let mut batch_rng = seeding::stream(master_seed, "bopo-batch", &[it as u64]);
        let picks: Vec<usize> = (0..config.tasks_per_batch)
            .map(|_| batch_rng.gen_range(0..set.tasks.len()))
            .collect();
        let set_ref: &TrainingSet = set;
        let groups: Vec<GroupRollout> = picks
            .par_iter()
            .enumerate()
            .map(|(slot, &ti)| -> Result<GroupRollout> {
                let task = &set_ref.tasks[ti];
                let members = sample_group(
                    &params,
                    task,
                    costs,
                    (0..config.group_size).map(|g| rollout_seed(master_seed, it, slot, g)),
                )?;
                let (rewards, reference_reward) = match config.variant {
                    Variant::Bopo => {
                        let label = set_ref.label(task.task_id)?;
                        let bounds = set_ref.bounds(task.task_id)?;
                        let rewards = members
                            .iter()
                            .map(|m| boundary_relative_reward(&m.trajectory, label, bounds, rc))
                            .collect();
                        let anchor = set_ref.experts.get(&task.task_id).and_then(|e| e.reward_anchor);
                        (rewards, anchor)
                    }
                    Variant::Vanilla => (
                        members
                            .iter()
                            .map(|m| vanilla_reward(&m.trajectory, rc.lambda))
                            .collect(),
                        None,
                    ),
                };
                Ok(GroupRollout::new(task.task_id, members, rewards, reference_reward, rc.epsilon_adv))
            })
            .collect::<Result<_>>()?;

        let n: usize = groups.iter().map(|g| g.members.len()).sum();
        let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / n as f64;
        let trajs = || groups.iter().flat_map(|g| g.members.iter().map(|m| &m.trajectory));
        let success_rate = trajs().filter(|t| t.success).count() as f64 / n as f64;
        let mean_cost = trajs().map(|t| t.total_cost).sum::<f64>() / n as f64;

        let mut first_kl = None;
        for _ in 0..config.update_epochs {
            let (next, value) = bopo_update(&params, reference, &groups, config)?;
            first_kl.get_or_insert(value.mean_kl);
            params = next;
        }
        log.push(TrainLogRecord {
            iteration: it,
            mean_reward,
            success_rate,
            mean_cost,
            mean_kl: first_kl.unwrap_or(0.0),
            lambda: rc.lambda,
        });
    }
    let tag = match config.variant {
        Variant::Bopo => format!("bopo-l{}", rc.lambda),
        Variant::Vanilla => format!("vanilla-l{}", rc.lambda),
    };
    Ok((params.with_version(tag), log))
}
