mod common;

use proptest::prelude::*;
use routelab::cost::CostModel;
use routelab::decode::{
    cascade_policy, first_large_policy, run_episode, single_turn_examples, train_single_turn_classifier,
    BudgetUnit, PolicySpec,
};
use routelab::env::{generate_tasks, EnvConfig, FailMode, StepOutcome, Task};
use routelab::harness::{
    aggregate_point, allocation_from_trajectories, evaluate, evaluate_trajectories, hard_budget_eval,
    EvalSummary,
};
use routelab::policy::{prob_large, RouterParams};
use routelab::taxonomy::{DifficultyLabel, Taxonomy, TaxonomyEntry};

const MASTER: u64 = 77;

fn tasks(cfg: &EnvConfig, n: u64) -> Vec<Task> {
    generate_tasks(cfg, MASTER, 0..n).unwrap()
}

fn trained_single_turn(hint_noise: f64) -> (RouterParams, EnvConfig) {
    let cfg = EnvConfig {
        hint_noise,
        ..EnvConfig::default()
    };
    let train = generate_tasks(&cfg, 5, 0..300).unwrap();
    let examples = single_turn_examples(&train, &CostModel::default(), 1.0, 9).unwrap();
    (train_single_turn_classifier(&examples, 1.0, 2000).unwrap(), cfg)
}

#[test]
fn noiseless_single_turn_routes_exactly_on_critical_steps() {
    let (clf, cfg) = trained_single_turn(0.0);
    let spec = PolicySpec::SingleTurn {
        classifier: clf,
        threshold: 0.5,
    };
    let costs = CostModel::default();
    let mut checked = 0;
    for task in generate_tasks(&cfg, 123, 0..200).unwrap() {
        let traj = run_episode(&spec, &task, &costs, task.task_id).unwrap();
        for r in &traj.records {
            assert_eq!(r.action.is_large(), task.is_critical(r.step_index), "task {}", task.task_id);
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn pure_noise_hint_gives_chance_balanced_accuracy() {
    let (clf, cfg) = trained_single_turn(0.5);
    let held_out = generate_tasks(&cfg, 321, 0..300).unwrap();
    let examples = single_turn_examples(&held_out, &CostModel::default(), 1.0, 17).unwrap();
    let (mut tp, mut pos, mut tn, mut neg) = (0.0, 0.0, 0.0, 0.0);
    for (f, target) in &examples {
        let says_large = prob_large(&clf, f).unwrap() > 0.5;
        if target.is_large() {
            pos += 1.0;
            tp += says_large as u8 as f64;
        } else {
            neg += 1.0;
            tn += (!says_large) as u8 as f64;
        }
    }
    let balanced = 0.5 * (tp / pos + tn / neg);
    assert!((balanced - 0.5).abs() < 0.1, "balanced accuracy {balanced}");
}

#[test]
fn random_half_mixture_matches_binomial() {
    let cfg = EnvConfig {
        fail_mode: FailMode::RunToHorizon,
        ..EnvConfig::default()
    };
    let costs = CostModel::default();
    let spec = PolicySpec::RandomP { p: 0.5 };
    let (mut large, mut steps) = (0usize, 0usize);
    let mut id = 0;
    while steps < 100_000 {
        let task = routelab::env::generate_task(&cfg, MASTER, id).unwrap();
        let t = run_episode(&spec, &task, &costs, 1000 + id).unwrap();
        large += t.large_calls;
        steps += t.len();
        id += 1;
    }
    let n = steps as f64;
    let sigma = (0.25 / n).sqrt();
    let frac = large as f64 / n;
    assert!((frac - 0.5).abs() < 3.0 * sigma, "fraction {frac} sigma {sigma}");
}

#[test]
fn always_large_under_call_cap_uses_min_of_cap_and_length() {
    let costs = CostModel::default();
    let spec = PolicySpec::AlwaysLarge.with_bcd(5.0, BudgetUnit::LargeCalls);
    let ts = tasks(&EnvConfig::default(), 100);
    for i in 0..10_000u64 {
        let task = &ts[(i % 100) as usize];
        let t = run_episode(&spec, task, &costs, i).unwrap();
        // BCD forbids the call that would exhaust the budget, so the fifth
        // call is never made.
        assert_eq!(t.large_calls, 4.min(t.len()));
    }
}

#[test]
fn cascade_usage_is_monotone_in_threshold() {
    let costs = CostModel::default();
    let ts = tasks(&EnvConfig::default(), 200);
    let mut last = -1.0;
    for th in [0.0, 0.5, 1.0, 1.0 + 1e-9] {
        let s = evaluate(&cascade_policy(th, 0.5), &ts, &costs, MASTER, 0).unwrap();
        assert!(s.avg_large_calls >= last, "threshold {th}");
        last = s.avg_large_calls;
    }
    let always = evaluate(&cascade_policy(1.0 + 1e-9, 0.5), &ts, &costs, MASTER, 0).unwrap();
    assert!(always.avg_large_calls > 0.0);
    let never = evaluate(&cascade_policy(0.0, 0.5), &ts, &costs, MASTER, 0).unwrap();
    assert_eq!(never.avg_large_calls, 0.0);
}

#[test]
fn mid_threshold_cascade_is_large_exactly_on_struggle() {
    let costs = CostModel::default();
    for task in tasks(&EnvConfig::default(), 50) {
        let t = run_episode(&cascade_policy(0.75, 0.5), &task, &costs, 5).unwrap();
        // struggle_emitted on record i is the hint shown before step i + 1.
        for w in t.records.windows(2) {
            assert_eq!(w[1].action.is_large(), w[0].struggle_emitted);
        }
    }
}

#[test]
fn hard_budget_table_invariants() {
    let costs = CostModel::default();
    let ts = tasks(&EnvConfig::default(), 100);
    let methods = vec![
        ("always_small".to_string(), PolicySpec::AlwaysSmall),
        ("first_large".to_string(), first_large_policy(10)),
        ("random".to_string(), PolicySpec::RandomP { p: 0.5 }),
    ];
    let rows = hard_budget_eval(&methods, &[5, 10, 15], &ts, &costs, MASTER, 2).unwrap();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        assert!(r.max_large_calls <= r.k, "{r:?}");
        assert!(r.use_pct <= 100.0);
        if r.method == "always_small" {
            assert_eq!(r.use_pct, 0.0);
        }
    }
}

#[test]
fn random_p_endpoints_are_the_boundary_policies() {
    let costs = CostModel::default();
    let ts = tasks(&EnvConfig::default(), 100);
    for s in 0..2 {
        let a = evaluate(&PolicySpec::RandomP { p: 0.0 }, &ts, &costs, MASTER, s).unwrap();
        let b = evaluate(&PolicySpec::AlwaysSmall, &ts, &costs, MASTER, s).unwrap();
        assert_eq!(a, b);
        let a = evaluate(&PolicySpec::RandomP { p: 1.0 }, &ts, &costs, MASTER, s).unwrap();
        let b = evaluate(&PolicySpec::AlwaysLarge, &ts, &costs, MASTER, s).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn random_p_cost_is_monotone_when_failures_end_episodes() {
    // With failures running to the horizon an early success can shorten an
    // episode enough to lower its cost, so the check uses terminate-on-fail.
    let cfg = EnvConfig {
        fail_mode: FailMode::TerminateOnFail,
        ..EnvConfig::default()
    };
    let costs = CostModel::default();
    let ts = tasks(&cfg, 400);
    let mut last = 0.0;
    for i in 0..=10 {
        let p = i as f64 / 10.0;
        let c: f64 = (0..3)
            .map(|s| evaluate(&PolicySpec::RandomP { p }, &ts, &costs, MASTER, s).unwrap().avg_cost)
            .sum::<f64>()
            / 3.0;
        assert!(c >= last, "p={p} cost {c} < {last}");
        last = c;
    }
}

#[test]
fn seed_aggregation_matches_hand_computation() {
    let mk = |sr: f64, cost: f64| EvalSummary {
        success_rate: sr,
        avg_cost: cost,
        avg_large_calls: cost / 2.0,
        max_large_calls: 0,
    };
    let p = aggregate_point("m", 0.3, &[mk(0.2, 4.0), mk(0.4, 6.0), mk(0.6, 8.0)]);
    assert!((p.success_rate - 0.4).abs() < 1e-12);
    // sample sd 0.2 over sqrt(3)
    assert!((p.success_stderr - 0.2 / 3f64.sqrt()).abs() < 1e-12);
    assert!((p.avg_cost - 6.0).abs() < 1e-12);
    assert!((p.cost_stderr - 2.0 / 3f64.sqrt()).abs() < 1e-12);
    assert!((p.avg_large_calls - 3.0).abs() < 1e-12);
    let single = aggregate_point("m", 0.0, &[mk(0.5, 1.0)]);
    assert_eq!((single.success_stderr, single.cost_stderr), (0.0, 0.0));
}

fn label_all(ts: &[Task], label_of: impl Fn(u64) -> DifficultyLabel) -> Taxonomy {
    let mut tax = Taxonomy::default();
    for t in ts {
        tax.insert(TaxonomyEntry {
            task_id: t.task_id,
            trials_k: 1,
            small_successes: 0,
            large_successes: 0,
            label: label_of(t.task_id),
        })
        .unwrap();
    }
    tax
}

#[test]
fn always_small_allocation_is_proportional_to_length() {
    let costs = CostModel::new(1.0, 5.0).unwrap();
    let ts = tasks(&EnvConfig::default(), 300);
    let tax = label_all(&ts, |id| DifficultyLabel::ALL[(id % 3) as usize]);
    let trajs = evaluate_trajectories(&PolicySpec::AlwaysSmall, &ts, &costs, MASTER, 0).unwrap();
    let mut steps = [0usize; 3];
    for t in &trajs {
        steps[(t.task_id % 3) as usize] += t.len();
    }
    let total: usize = steps.iter().sum();
    let rows = allocation_from_trajectories(&trajs, &tax).unwrap();
    let cost_sum: f64 = rows.iter().map(|r| r.cost_share).sum();
    let count_sum: f64 = rows.iter().map(|r| r.count_share).sum();
    assert!((cost_sum - 1.0).abs() < 1e-12 && (count_sum - 1.0).abs() < 1e-12);
    for (i, r) in rows.iter().enumerate() {
        assert!((r.cost_share - steps[i] as f64 / total as f64).abs() < 1e-12);
    }
}

#[test]
fn single_label_allocation_is_total() {
    let costs = CostModel::default();
    let ts = tasks(&EnvConfig::default(), 50);
    let tax = label_all(&ts, |_| DifficultyLabel::Hard);
    let trajs = evaluate_trajectories(&PolicySpec::RandomP { p: 0.3 }, &ts, &costs, MASTER, 0).unwrap();
    for r in allocation_from_trajectories(&trajs, &tax).unwrap() {
        let expect = if r.label == DifficultyLabel::Hard { 1.0 } else { 0.0 };
        assert_eq!((r.count_share, r.cost_share), (expect, expect));
    }
}

fn any_spec() -> impl Strategy<Value = PolicySpec> {
    prop_oneof![
        Just(PolicySpec::AlwaysSmall),
        Just(PolicySpec::AlwaysLarge),
        (0.0..=1.0f64).prop_map(|p| PolicySpec::RandomP { p }),
        (0usize..40).prop_map(first_large_policy),
        (0.0..1.2f64, 0.0..1.0f64).prop_map(|(t, r)| cascade_policy(t, r)),
        proptest::collection::vec(-4.0..4.0f64, 7)
            .prop_map(|w| PolicySpec::Learned { params: RouterParams::from_weights(w) }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bcd_never_exceeds_a_call_cap(spec in any_spec(), k in 1usize..20, id in 0u64..500, seed in any::<u64>()) {
        let task = routelab::env::generate_task(&EnvConfig::default(), MASTER, id).unwrap();
        let t = run_episode(&spec.with_bcd(k as f64, BudgetUnit::LargeCalls), &task, &CostModel::default(), seed).unwrap();
        prop_assert!(t.large_calls <= k);
    }

    #[test]
    fn bcd_never_exceeds_a_money_cap(spec in any_spec(), cap in 0.0..120.0f64, id in 0u64..500, seed in any::<u64>()) {
        let task = routelab::env::generate_task(&EnvConfig::default(), MASTER, id).unwrap();
        let costs = CostModel::default();
        let t = run_episode(&spec.with_bcd(cap, BudgetUnit::Money), &task, &costs, seed).unwrap();
        let large_spend = t.large_calls as f64 * costs.large;
        // Every LARGE call was made with strictly more than its price left.
        prop_assert!(large_spend <= cap.max(0.0) || t.large_calls == 0);
    }

    #[test]
    fn first_large_uses_at_most_k(k in 0usize..40, id in 0u64..500, seed in any::<u64>()) {
        let task = routelab::env::generate_task(&EnvConfig::default(), MASTER, id).unwrap();
        let t = run_episode(&first_large_policy(k), &task, &CostModel::default(), seed).unwrap();
        prop_assert_eq!(t.large_calls, k.min(t.len()));
        prop_assert!(t.records.iter().all(|r| r.action.is_large() == (r.step_index < k)));
        prop_assert!(t.records.iter().all(|r| r.outcome != StepOutcome::Cleared || task.is_critical(r.step_index)));
    }
}
