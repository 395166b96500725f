//! Inference-time routing policies and budget-constrained decoding.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::env::{observe, EpisodeState, Task, Trajectory};
use crate::error::Result;
use crate::policy::{self, FeatureVector, RouterAction, RouterParams};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetUnit {
    Money,
    LargeCalls,
}

/// Episode-local residual budget `b_t = B_max - spent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetState {
    pub b_max: f64,
    pub spent: f64,
    pub unit: BudgetUnit,
}

impl BudgetState {
    pub fn new(b_max: f64, unit: BudgetUnit) -> Self {
        BudgetState {
            b_max,
            spent: 0.0,
            unit,
        }
    }

    pub fn large_calls(cap: f64) -> Self {
        Self::new(cap, BudgetUnit::LargeCalls)
    }

    pub fn money(cap: f64) -> Self {
        Self::new(cap, BudgetUnit::Money)
    }

    pub fn remaining(&self) -> f64 {
        self.b_max - self.spent
    }

    pub fn after_spending(mut self, amount: f64) -> Self {
        self.spent += amount;
        self
    }

    /// Price of `action` in this budget's unit.
    pub fn price(&self, action: RouterAction, costs: &CostModel) -> f64 {
        match self.unit {
            BudgetUnit::Money => costs.price(action),
            BudgetUnit::LargeCalls => {
                if action.is_large() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn charge(&mut self, action: RouterAction, costs: &CostModel) {
        self.spent += self.price(action, costs);
    }
}

/// Forces SMALL whenever the LARGE price is at least the residual budget.
pub fn bcd_filter(base_prob_large: f64, budget: &BudgetState, c_large: f64) -> f64 {
    if c_large >= budget.remaining() {
        0.0
    } else {
        base_prob_large
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    AlwaysSmall,
    AlwaysLarge,
    RandomP {
        p: f64,
    },
    FirstLarge {
        k: usize,
    },
    /// Escalates when the small model's confidence falls below `threshold`.
    /// Confidence is 1 without a struggle signal and `1 - risk` with one.
    Cascade {
        threshold: f64,
        risk: f64,
    },
    /// Greedy per-step classifier: LARGE iff its probability exceeds `threshold`.
    SingleTurn {
        classifier: RouterParams,
        threshold: f64,
    },
    Learned {
        params: RouterParams,
    },
    Bcd {
        base: Box<PolicySpec>,
        b_max: f64,
        unit: BudgetUnit,
    },
}

impl PolicySpec {
    pub fn with_bcd(self, b_max: f64, unit: BudgetUnit) -> Self {
        PolicySpec::Bcd {
            base: Box::new(self),
            b_max,
            unit,
        }
    }

    pub fn name(&self) -> String {
        match self {
            PolicySpec::AlwaysSmall => "always_small".into(),
            PolicySpec::AlwaysLarge => "always_large".into(),
            PolicySpec::RandomP { p } => format!("random_p({p})"),
            PolicySpec::FirstLarge { k } => format!("first_large({k})"),
            PolicySpec::Cascade { threshold, .. } => format!("cascade({threshold})"),
            PolicySpec::SingleTurn { threshold, .. } => format!("single_turn({threshold})"),
            PolicySpec::Learned { params } => format!("learned[{}]", params.version),
            PolicySpec::Bcd { base, b_max, .. } => format!("{}+bcd({b_max})", base.name()),
        }
    }

    fn base_prob_large(
        &self,
        state: &EpisodeState<'_>,
        budget: Option<&BudgetState>,
    ) -> Result<f64> {
        Ok(match self {
            PolicySpec::AlwaysSmall => 0.0,
            PolicySpec::AlwaysLarge => 1.0,
            PolicySpec::RandomP { p } => *p,
            PolicySpec::FirstLarge { k } => {
                if state.current_step < *k {
                    1.0
                } else {
                    0.0
                }
            }
            PolicySpec::Cascade { threshold, risk } => {
                let confidence = if state.struggle_signal { 1.0 - risk } else { 1.0 };
                if confidence < *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            PolicySpec::SingleTurn {
                classifier,
                threshold,
            } => {
                let p = policy::prob_large(classifier, &observe(state, budget, None))?;
                if p > *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            PolicySpec::Learned { params } => {
                policy::prob_large(params, &observe(state, budget, None))?
            }
            PolicySpec::Bcd { base, .. } => base.base_prob_large(state, budget)?,
        })
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

pub fn first_large_policy(k: usize) -> PolicySpec {
    PolicySpec::FirstLarge { k }
}

pub fn cascade_policy(threshold: f64, risk: f64) -> PolicySpec {
    PolicySpec::Cascade { threshold, risk }
}

pub fn single_turn_policy(classifier: RouterParams) -> PolicySpec {
    PolicySpec::SingleTurn {
        classifier,
        threshold: 0.5,
    }
}

/// Per-decision log of a stochastic rollout, used by policy optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub features: FeatureVector,
    pub action: RouterAction,
    pub prob_large: f64,
}

/// Runs `spec` on `task`. The environment and policy streams are both
/// derived from `seed`, so a trajectory is replayable from its seed.
pub fn run_episode(spec: &PolicySpec, task: &Task, costs: &CostModel, seed: u64) -> Result<Trajectory> {
    run_episode_logged(spec, task, costs, seed).map(|(t, _)| t)
}

pub fn run_episode_logged(
    spec: &PolicySpec,
    task: &Task,
    costs: &CostModel,
    seed: u64,
) -> Result<(Trajectory, Vec<Decision>)> {
    let mut env_rng = seeding::stream(seed, "env", &[]);
    let mut policy_rng = seeding::stream(seed, "policy", &[]);
    let mut budget = match spec {
        PolicySpec::Bcd { b_max, unit, .. } => Some(BudgetState::new(*b_max, *unit)),
        _ => None,
    };
    let mut state = EpisodeState::reset(task, &mut env_rng);
    let mut records = Vec::with_capacity(task.horizon);
    let mut decisions = Vec::with_capacity(task.horizon);
    while !state.is_terminated() {
        let mut p = spec.base_prob_large(&state, budget.as_ref())?;
        if let Some(b) = &budget {
            p = bcd_filter(p, b, b.price(RouterAction::Large, costs));
        }
        let action = policy::sample_with_prob(p, &mut policy_rng);
        if matches!(spec, PolicySpec::Learned { .. }) {
            decisions.push(Decision {
                features: observe(&state, None, None),
                action,
                prob_large: p,
            });
        }
        if let Some(b) = budget.as_mut() {
            b.charge(action, costs);
        }
        records.push(state.step(action, costs, &mut env_rng));
    }
    let success = state.is_solved();
    Ok((
        Trajectory::from_records(task.task_id, seed, records, success),
        decisions,
    ))
}

/// Re-executes a recorded action string from its seed, returning the
/// trajectory and the feature vector seen before each decision.
pub fn replay(
    task: &Task,
    costs: &CostModel,
    seed: u64,
    actions: &[RouterAction],
) -> (Trajectory, Vec<FeatureVector>) {
    let mut env_rng = seeding::stream(seed, "env", &[]);
    let mut state = EpisodeState::reset(task, &mut env_rng);
    let mut records = Vec::with_capacity(actions.len());
    let mut features = Vec::with_capacity(actions.len());
    for &a in actions {
        if state.is_terminated() {
            break;
        }
        features.push(observe(&state, None, None));
        records.push(state.step(a, costs, &mut env_rng));
    }
    let success = state.is_solved();
    (
        Trajectory::from_records(task.task_id, seed, records, success),
        features,
    )
}

/// Step-level training example for the single-turn classifier: LARGE iff
/// the step is critical and the small model's clear probability is below
/// `cutoff`.
pub fn single_turn_examples(
    tasks: &[Task],
    costs: &CostModel,
    cutoff: f64,
    master_seed: u64,
) -> Result<Vec<(FeatureVector, RouterAction)>> {
    let behaviour = PolicySpec::RandomP { p: 0.5 };
    let mut out = Vec::new();
    for task in tasks {
        let seed = seeding::stream_seed(master_seed, "single-turn-data", &[task.task_id]);
        let traj = run_episode(&behaviour, task, costs, seed)?;
        let actions: Vec<RouterAction> = traj.actions().collect();
        let (_, features) = replay(task, costs, seed, &actions);
        for (t, f) in features.into_iter().enumerate() {
            let useful = task.is_critical(t) && task.clear_small < cutoff;
            out.push((
                f,
                if useful {
                    RouterAction::Large
                } else {
                    RouterAction::Small
                },
            ));
        }
    }
    Ok(out)
}

/// Full-batch logistic regression on step-level examples.
pub fn train_single_turn_classifier(
    examples: &[(FeatureVector, RouterAction)],
    learning_rate: f64,
    steps: usize,
) -> Result<RouterParams> {
    let mut params = RouterParams::zeros();
    for _ in 0..steps {
        let (_, grad) = crate::train::sft_loss_and_grad(&params, examples.iter().map(|(f, a)| (f, *a)))?;
        for (w, g) in params.weights.iter_mut().zip(&grad) {
            *w -= learning_rate * g;
        }
    }
    if !params.is_finite() {
        return Err(crate::error::Error::Divergence("single-turn classifier".into()));
    }
    Ok(params.with_version("single-turn"))
}
