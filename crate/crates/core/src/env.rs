//! Synthetic long-horizon agent environment.
//!
//! A task is a sequence of `solve_length` steps, some of which are critical.
//! A critical step is cleared with a per-model probability; a miss is
//! permanent. The episode succeeds as soon as the last solution step has been
//! taken with every critical step cleared. After a miss the agent either stops
//! (`TerminateOnFail`) or flounders until the horizon (`RunToHorizon`), with
//! every further step counted as a miss.
//!
//! Each step consumes exactly two uniforms from the environment stream (clear
//! draw, hint-noise draw) independent of the action, so two policies fed the
//! same stream see coupled outcomes: LARGE clears whenever SMALL would.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::decode::BudgetState;
use crate::error::{Error, Result};
use crate::policy::{FeatureVector, RouterAction, FEATURE_DIM};
use crate::seeding;
use crate::taxonomy::DifficultyLabel;

pub const ENUMERATION_GUARD: usize = 12;
pub const DEFAULT_HISTORY_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailMode {
    TerminateOnFail,
    RunToHorizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub horizon: usize,
    /// Inclusive range of solution lengths; every task needs this many
    /// steps to succeed and `solve_length <= horizon`.
    pub solve_length_range: [usize; 2],
    pub n_critical_range: [usize; 2],
    pub q_small: f64,
    pub q_large: f64,
    pub q_large_intractable: f64,
    pub intractable_fraction: f64,
    pub hint_noise: f64,
    pub fail_mode: FailMode,
    pub history_window: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 30,
            solve_length_range: [4, 10],
            n_critical_range: [0, 4],
            q_small: 0.1,
            q_large: 0.95,
            q_large_intractable: 0.0,
            intractable_fraction: 0.15,
            hint_noise: 0.2,
            fail_mode: FailMode::RunToHorizon,
            history_window: DEFAULT_HISTORY_WINDOW,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.horizon == 0 {
            return bad("env.horizon must be at least 1".into());
        }
        let [lo, hi] = self.solve_length_range;
        if lo == 0 || lo > hi || hi > self.horizon {
            return bad(format!(
                "env.solve_length_range {:?} must be non-empty within [1, horizon={}]",
                self.solve_length_range, self.horizon
            ));
        }
        let [clo, chi] = self.n_critical_range;
        if clo > chi {
            return bad(format!(
                "env.n_critical_range {:?} is empty",
                self.n_critical_range
            ));
        }
        if clo > lo {
            return bad(format!(
                "env.n_critical_range lower bound {clo} exceeds the shortest solve length {lo}"
            ));
        }
        for (name, p) in [
            ("q_small", self.q_small),
            ("q_large", self.q_large),
            ("q_large_intractable", self.q_large_intractable),
            ("intractable_fraction", self.intractable_fraction),
            ("hint_noise", self.hint_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("env.{name} = {p} is not a probability"));
            }
        }
        if self.q_large < self.q_small {
            return bad(format!(
                "env.q_large ({}) must be at least env.q_small ({})",
                self.q_large, self.q_small
            ));
        }
        if self.history_window == 0 {
            return bad("env.history_window must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: u64,
    pub horizon: usize,
    pub solve_length: usize,
    /// Sorted, distinct indices in `[0, solve_length)`.
    pub critical_steps: Vec<usize>,
    pub is_intractable_draw: bool,
    pub clear_small: f64,
    pub clear_large: f64,
    pub hint_noise: f64,
    pub fail_mode: FailMode,
    pub history_window: usize,
}

impl Task {
    pub fn is_critical(&self, step: usize) -> bool {
        self.critical_steps.binary_search(&step).is_ok()
    }

    pub fn clear_prob(&self, action: RouterAction) -> f64 {
        match action {
            RouterAction::Small => self.clear_small,
            RouterAction::Large => self.clear_large,
        }
    }
}

pub fn generate_task(config: &EnvConfig, seed: u64, task_id: u64) -> Result<Task> {
    config.validate()?;
    let mut rng = seeding::stream(seed, "task", &[task_id]);
    let is_intractable_draw = rng.gen::<f64>() < config.intractable_fraction;
    let [lo, hi] = config.solve_length_range;
    let solve_length = rng.gen_range(lo..=hi);
    let [clo, chi] = config.n_critical_range;
    let n_critical = rng.gen_range(clo..=chi).min(solve_length);
    let mut critical_steps = index::sample(&mut rng, solve_length, n_critical).into_vec();
    critical_steps.sort_unstable();
    let (clear_small, clear_large) = if is_intractable_draw {
        (
            config.q_small.min(config.q_large_intractable),
            config.q_large_intractable,
        )
    } else {
        (config.q_small, config.q_large)
    };
    Ok(Task {
        task_id,
        horizon: config.horizon,
        solve_length,
        critical_steps,
        is_intractable_draw,
        clear_small,
        clear_large,
        hint_noise: config.hint_noise,
        fail_mode: config.fail_mode,
        history_window: config.history_window,
    })
}

pub fn generate_tasks(config: &EnvConfig, seed: u64, ids: impl IntoIterator<Item = u64>) -> Result<Vec<Task>> {
    ids.into_iter()
        .map(|id| generate_task(config, seed, id))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Cleared,
    Missed,
    NonCritical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub action: RouterAction,
    pub cost: f64,
    pub outcome: StepOutcome,
    /// Hint emitted for the following step.
    pub struggle_emitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: u64,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub success: bool,
    pub total_cost: f64,
    pub large_calls: usize,
}

impl Trajectory {
    pub fn from_records(task_id: u64, seed: u64, records: Vec<StepRecord>, success: bool) -> Self {
        let total_cost = records.iter().map(|r| r.cost).sum();
        let large_calls = records.iter().filter(|r| r.action.is_large()).count();
        Trajectory {
            task_id,
            seed,
            records,
            success,
            total_cost,
            large_calls,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = RouterAction> + '_ {
        self.records.iter().map(|r| r.action)
    }

    pub fn action_string(&self) -> String {
        self.actions().map(RouterAction::as_char).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeState<'t> {
    pub task: &'t Task,
    pub current_step: usize,
    pub cleared: Vec<usize>,
    pub failed: bool,
    /// Noisy indicator that the current step is critical.
    pub struggle_signal: bool,
    pub history: VecDeque<StepRecord>,
}

impl<'t> EpisodeState<'t> {
    /// Fresh episode; draws the hint for step 0 from `rng`.
    pub fn reset<R: Rng + ?Sized>(task: &'t Task, rng: &mut R) -> Self {
        let struggle_signal = noisy_hint(task, 0, rng);
        EpisodeState {
            task,
            current_step: 0,
            cleared: Vec::new(),
            failed: false,
            struggle_signal,
            history: VecDeque::with_capacity(task.history_window),
        }
    }

    pub fn is_solved(&self) -> bool {
        !self.failed && self.current_step >= self.task.solve_length
    }

    pub fn is_terminated(&self) -> bool {
        self.current_step >= self.task.horizon
            || self.is_solved()
            || (self.failed && self.task.fail_mode == FailMode::TerminateOnFail)
    }

    /// Advances one step. Panics if the episode has already terminated.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        action: RouterAction,
        costs: &CostModel,
        rng: &mut R,
    ) -> StepRecord {
        assert!(!self.is_terminated(), "stepping a terminated episode");
        let t = self.current_step;
        let u_clear: f64 = rng.gen();
        let outcome = if self.failed {
            StepOutcome::Missed
        } else if self.task.is_critical(t) {
            if u_clear < self.task.clear_prob(action) {
                self.cleared.push(t);
                StepOutcome::Cleared
            } else {
                self.failed = true;
                StepOutcome::Missed
            }
        } else {
            StepOutcome::NonCritical
        };
        self.current_step += 1;
        let next_hint = noisy_hint(self.task, self.current_step, rng);
        self.struggle_signal = next_hint;
        let record = StepRecord {
            step_index: t,
            action,
            cost: costs.price(action),
            outcome,
            struggle_emitted: next_hint,
        };
        if self.history.len() == self.task.history_window {
            self.history.pop_front();
        }
        self.history.push_back(record.clone());
        record
    }

    pub fn window_misses(&self) -> usize {
        self.history
            .iter()
            .filter(|r| r.outcome == StepOutcome::Missed)
            .count()
    }
}

fn noisy_hint<R: Rng + ?Sized>(task: &Task, step: usize, rng: &mut R) -> bool {
    let flip = rng.gen::<f64>() < task.hint_noise;
    task.is_critical(step) ^ flip
}

/// True iff every critical step of `task` has a `Cleared` record.
pub fn is_success(traj: &Trajectory, task: &Task) -> bool {
    task.critical_steps.iter().all(|&c| {
        traj.records
            .iter()
            .any(|r| r.step_index == c && r.outcome == StepOutcome::Cleared)
    })
}

fn remaining_budget_fraction(budget: Option<&BudgetState>) -> f64 {
    match budget {
        None => 1.0,
        Some(b) if b.b_max.is_infinite() => 1.0,
        Some(b) if b.b_max <= 0.0 => 0.0,
        Some(b) => (b.remaining() / b.b_max).clamp(0.0, 1.0),
    }
}

pub fn taxonomy_hint_value(label: DifficultyLabel) -> f64 {
    match label {
        DifficultyLabel::Easy => -1.0,
        DifficultyLabel::Hard => 1.0,
        DifficultyLabel::Intractable => -0.5,
    }
}

/// Feature vector in [`crate::policy::FEATURE_NAMES`] order.
pub fn observe(
    state: &EpisodeState<'_>,
    budget: Option<&BudgetState>,
    hint: Option<DifficultyLabel>,
) -> FeatureVector {
    let w = state.task.history_window as f64;
    let recent_large = if state.history.is_empty() {
        0.0
    } else {
        state.history.iter().filter(|r| r.action.is_large()).count() as f64
            / state.history.len() as f64
    };
    let f = vec![
        1.0,
        state.current_step as f64 / state.task.horizon as f64,
        if state.struggle_signal { 1.0 } else { 0.0 },
        state.window_misses() as f64 / w,
        recent_large,
        remaining_budget_fraction(budget),
        hint.map_or(0.0, taxonomy_hint_value),
    ];
    debug_assert_eq!(f.len(), FEATURE_DIM);
    FeatureVector(f)
}

/// A fixed action per step index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicSchedule(pub Vec<RouterAction>);

impl DeterministicSchedule {
    pub fn constant(action: RouterAction, horizon: usize) -> Self {
        DeterministicSchedule(vec![action; horizon])
    }

    pub fn alternating(horizon: usize) -> Self {
        DeterministicSchedule(
            (0..horizon)
                .map(|t| {
                    if t % 2 == 0 {
                        RouterAction::Small
                    } else {
                        RouterAction::Large
                    }
                })
                .collect(),
        )
    }

    pub fn action(&self, step: usize) -> RouterAction {
        self.0[step]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub success_probability: f64,
    pub expected_cost: f64,
}

/// Exact success probability and expected cost of a fixed schedule,
/// by enumerating every clear/miss pattern over the critical steps.
pub fn exact_episode_stats(
    task: &Task,
    schedule: &DeterministicSchedule,
    costs: &CostModel,
) -> Result<EpisodeStats> {
    if task.horizon > ENUMERATION_GUARD {
        return Err(Error::EnumerationGuard {
            horizon: task.horizon,
            guard: ENUMERATION_GUARD,
        });
    }
    if schedule.0.len() < task.horizon {
        return Err(Error::InvalidConfig(format!(
            "schedule covers {} steps, task horizon is {}",
            schedule.0.len(),
            task.horizon
        )));
    }
    let prefix_cost = |len: usize| -> f64 {
        schedule.0[..len].iter().map(|&a| costs.price(a)).sum()
    };
    let crit = &task.critical_steps;
    let mut success_probability = 0.0;
    let mut expected_cost = 0.0;
    for mask in 0u32..(1u32 << crit.len()) {
        let mut prob = 1.0;
        for (i, &c) in crit.iter().enumerate() {
            let q = task.clear_prob(schedule.action(c));
            prob *= if mask & (1 << i) != 0 { q } else { 1.0 - q };
        }
        if prob == 0.0 {
            continue;
        }
        // The first miss in step order ends progress; later bits in a
        // pattern only split its probability mass.
        let first_miss = crit
            .iter()
            .enumerate()
            .find(|(i, _)| mask & (1 << i) == 0)
            .map(|(_, &c)| c);
        let length = match (first_miss, task.fail_mode) {
            (None, _) => task.solve_length,
            (Some(_), FailMode::RunToHorizon) => task.horizon,
            (Some(c), FailMode::TerminateOnFail) => c + 1,
        };
        if first_miss.is_none() {
            success_probability += prob;
        }
        expected_cost += prob * prefix_cost(length);
    }
    Ok(EpisodeStats {
        success_probability,
        expected_cost,
    })
}

/// Runs a fixed schedule to termination.
pub fn run_schedule<R: Rng + ?Sized>(
    task: &Task,
    schedule: &DeterministicSchedule,
    costs: &CostModel,
    seed: u64,
    rng: &mut R,
) -> Trajectory {
    let mut state = EpisodeState::reset(task, rng);
    let mut records = Vec::with_capacity(task.horizon);
    while !state.is_terminated() {
        let a = schedule.action(state.current_step);
        records.push(state.step(a, costs, rng));
    }
    let success = state.is_solved();
    Trajectory::from_records(task.task_id, seed, records, success)
}
