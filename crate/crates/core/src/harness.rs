//! Experiment harness: frontier sweeps, hard-budget tables and
//! budget-allocation reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::decode::{run_episode, BudgetUnit, PolicySpec};
use crate::env::{Task, Trajectory};
use crate::error::{Error, Result};
use crate::seeding;
use crate::taxonomy::{DifficultyLabel, Taxonomy};

pub fn eval_seed(master: u64, seed_index: usize, task_id: u64) -> u64 {
    seeding::stream_seed(master, "eval", &[seed_index as u64, task_id])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub avg_cost: f64,
    pub avg_large_calls: f64,
    pub max_large_calls: usize,
}

/// Runs `spec` once on every task; episode seeds depend only on
/// `(master, seed_index, task_id)`, so every method sees the same streams.
pub fn evaluate_trajectories(
    spec: &PolicySpec,
    tasks: &[Task],
    costs: &CostModel,
    master: u64,
    seed_index: usize,
) -> Result<Vec<Trajectory>> {
    tasks
        .par_iter()
        .map(|t| run_episode(spec, t, costs, eval_seed(master, seed_index, t.task_id)))
        .collect()
}

pub fn summarize(trajs: &[Trajectory]) -> EvalSummary {
    let n = trajs.len().max(1) as f64;
    EvalSummary {
        success_rate: trajs.iter().filter(|t| t.success).count() as f64 / n,
        avg_cost: trajs.iter().map(|t| t.total_cost).sum::<f64>() / n,
        avg_large_calls: trajs.iter().map(|t| t.large_calls as f64).sum::<f64>() / n,
        max_large_calls: trajs.iter().map(|t| t.large_calls).max().unwrap_or(0),
    }
}

pub fn evaluate(
    spec: &PolicySpec,
    tasks: &[Task],
    costs: &CostModel,
    master: u64,
    seed_index: usize,
) -> Result<EvalSummary> {
    Ok(summarize(&evaluate_trajectories(spec, tasks, costs, master, seed_index)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub method: String,
    pub knob: f64,
    pub seed_count: usize,
    pub success_rate: f64,
    pub success_stderr: f64,
    pub avg_cost: f64,
    pub cost_stderr: f64,
    pub avg_large_calls: f64,
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn aggregate_point(method: &str, knob: f64, per_seed: &[EvalSummary]) -> FrontierPoint {
    let sr: Vec<f64> = per_seed.iter().map(|s| s.success_rate).collect();
    let cost: Vec<f64> = per_seed.iter().map(|s| s.avg_cost).collect();
    let (success_rate, success_stderr) = mean_stderr(&sr);
    let (avg_cost, cost_stderr) = mean_stderr(&cost);
    FrontierPoint {
        method: method.to_string(),
        knob,
        seed_count: per_seed.len(),
        success_rate,
        success_stderr,
        avg_cost,
        cost_stderr,
        avg_large_calls: per_seed.iter().map(|s| s.avg_large_calls).sum::<f64>() / per_seed.len() as f64,
    }
}

/// Evaluates `make_policy(knob, seed_index)` for every knob and seed.
/// Learned methods train inside `make_policy`; baselines just build a spec.
pub fn frontier_sweep<F>(
    method: &str,
    knobs: &[f64],
    mut make_policy: F,
    tasks: &[Task],
    costs: &CostModel,
    eval_master: u64,
    seeds: usize,
) -> Result<Vec<FrontierPoint>>
where
    F: FnMut(f64, usize) -> Result<PolicySpec>,
{
    if knobs.is_empty() || seeds == 0 {
        return Err(Error::InvalidConfig(
            "frontier sweep needs at least one knob value and one seed".into(),
        ));
    }
    knobs
        .iter()
        .map(|&knob| {
            let per_seed = (0..seeds)
                .map(|s| {
                    let spec = make_policy(knob, s)?;
                    evaluate(&spec, tasks, costs, eval_master, s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(aggregate_point(method, knob, &per_seed))
        })
        .collect()
}

fn dominates(a: &FrontierPoint, b: &FrontierPoint) -> bool {
    a.success_rate >= b.success_rate
        && a.avg_cost <= b.avg_cost
        && (a.success_rate > b.success_rate || a.avg_cost < b.avg_cost)
}

/// Points not dominated in (higher success, lower cost), ordered by cost.
pub fn pareto_filter(points: &[FrontierPoint]) -> Vec<FrontierPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].avg_cost.total_cmp(&points[b].avg_cost));
    let mut kept = Vec::new();
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let cost = points[order[i]].avg_cost;
        let mut j = i;
        while j < order.len() && points[order[j]].avg_cost == cost {
            j += 1;
        }
        let group = &order[i..j];
        let group_best = group
            .iter()
            .map(|&k| points[k].success_rate)
            .fold(f64::NEG_INFINITY, f64::max);
        if group_best > best_cheaper {
            kept.extend(
                group
                    .iter()
                    .filter(|&&k| points[k].success_rate == group_best)
                    .map(|&k| points[k].clone()),
            );
            best_cheaper = group_best;
        }
        i = j;
    }
    kept
}

/// O(n²) dominance check, kept for verifying [`pareto_filter`].
pub fn pareto_filter_bruteforce(points: &[FrontierPoint]) -> Vec<FrontierPoint> {
    let mut kept: Vec<FrontierPoint> = points
        .iter()
        .filter(|p| !points.iter().any(|q| dominates(q, p)))
        .cloned()
        .collect();
    kept.sort_by(|a, b| a.avg_cost.total_cmp(&b.avg_cost));
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardBudgetResult {
    pub method: String,
    pub k: usize,
    pub sr: f64,
    /// `100 · (mean LARGE calls) / K`.
    pub use_pct: f64,
    pub max_large_calls: usize,
}

/// Success rate and large-model usage under call caps. BCD wraps every
/// method except the always-large reference.
pub fn hard_budget_eval(
    methods: &[(String, PolicySpec)],
    k_values: &[usize],
    tasks: &[Task],
    costs: &CostModel,
    eval_master: u64,
    seeds: usize,
) -> Result<Vec<HardBudgetResult>> {
    let mut out = Vec::new();
    for (name, spec) in methods {
        for &k in k_values {
            if k == 0 {
                return Err(Error::InvalidConfig("hard-budget K must be positive".into()));
            }
            let wrapped = match spec {
                PolicySpec::AlwaysLarge => spec.clone(),
                other => other.clone().with_bcd(k as f64, BudgetUnit::LargeCalls),
            };
            let per_seed = (0..seeds)
                .map(|s| evaluate(&wrapped, tasks, costs, eval_master, s))
                .collect::<Result<Vec<_>>>()?;
            let n = per_seed.len() as f64;
            let sr = per_seed.iter().map(|s| s.success_rate).sum::<f64>() / n;
            let calls = per_seed.iter().map(|s| s.avg_large_calls).sum::<f64>() / n;
            out.push(HardBudgetResult {
                method: name.clone(),
                k,
                sr,
                use_pct: 100.0 * calls / k as f64,
                max_large_calls: per_seed.iter().map(|s| s.max_large_calls).max().unwrap_or(0),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub label: DifficultyLabel,
    pub count_share: f64,
    pub cost_share: f64,
}

/// Share of total spend and of task count per difficulty label.
pub fn allocation_from_trajectories(trajs: &[Trajectory], taxonomy: &Taxonomy) -> Result<Vec<AllocationRow>> {
    let mut counts = [0usize; 3];
    let mut spend = [0f64; 3];
    for t in trajs {
        let label = taxonomy.label(t.task_id).ok_or(Error::MissingInput {
            what: "taxonomy entry",
            path: format!("task {}", t.task_id).into(),
        })?;
        let i = DifficultyLabel::ALL.iter().position(|&l| l == label).unwrap();
        counts[i] += 1;
        spend[i] += t.total_cost;
    }
    let n: usize = counts.iter().sum();
    let total: f64 = spend.iter().sum();
    Ok(DifficultyLabel::ALL
        .iter()
        .enumerate()
        .map(|(i, &label)| AllocationRow {
            label,
            count_share: if n == 0 { 0.0 } else { counts[i] as f64 / n as f64 },
            cost_share: if total > 0.0 { spend[i] / total } else { 0.0 },
        })
        .collect())
}

pub fn budget_allocation_report(
    spec: &PolicySpec,
    tasks: &[Task],
    taxonomy: &Taxonomy,
    costs: &CostModel,
    eval_master: u64,
    seeds: usize,
) -> Result<Vec<AllocationRow>> {
    let mut all = Vec::new();
    for s in 0..seeds {
        all.extend(evaluate_trajectories(spec, tasks, costs, eval_master, s)?);
    }
    allocation_from_trajectories(&all, taxonomy)
}

/// Number of length-`t` SMALL/LARGE strings with at most `k` LARGE entries.
pub fn count_feasible_sequences(t: usize, k: usize) -> Result<u64> {
    if t > 62 {
        return Err(Error::CountOverflow { t });
    }
    if k > t {
        return Err(Error::InvalidConfig(format!("K={k} exceeds T={t}")));
    }
    let mut total: u64 = 0;
    let mut binom: u128 = 1;
    for i in 0..=k {
        if i > 0 {
            binom = binom * (t - i + 1) as u128 / i as u128;
        }
        total += binom as u64;
    }
    Ok(total)
}
