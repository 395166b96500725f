#![allow(dead_code)]

use rand::Rng;
use routelab::cost::CostModel;
use routelab::env::{
    exact_episode_stats, generate_task, run_schedule, DeterministicSchedule, EnvConfig, FailMode, Task,
};
use routelab::policy::{logprob_and_grad, FeatureVector, RouterAction, RouterParams, FEATURE_DIM};
use routelab::seeding::{stream, StreamRng};
use routelab::train::{sample_group, sft_loss_and_grad, surrogate_and_grad, BopoConfig, GroupRollout};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(label: &str) -> StreamRng {
    stream(20_240_601, label, &[])
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

pub fn random_params<R: Rng>(rng: &mut R, scale: f64) -> RouterParams {
    RouterParams::from_weights((0..FEATURE_DIM).map(|_| rng.gen_range(-scale..scale)).collect())
}

pub fn random_features<R: Rng>(rng: &mut R) -> FeatureVector {
    let mut f: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.gen_range(0.0..1.0)).collect();
    f[0] = 1.0;
    f[2] = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    FeatureVector(f)
}

pub fn random_action<R: Rng>(rng: &mut R) -> RouterAction {
    if rng.gen_bool(0.5) {
        RouterAction::Large
    } else {
        RouterAction::Small
    }
}

/// Max relative error of `grad` against central differences of `f`.
pub fn fd_max_rel_err(params: &RouterParams, grad: &[f64], f: impl Fn(&RouterParams) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..params.dim() {
        let mut up = params.clone();
        up.weights[i] += FD_STEP;
        let mut down = params.clone();
        down.weights[i] -= FD_STEP;
        let numeric = (f(&up) - f(&down)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grad[i], numeric));
    }
    worst
}

pub fn policy_grad_check<R: Rng>(rng: &mut R) -> f64 {
    let params = random_params(rng, 2.0);
    let f = random_features(rng);
    let a = random_action(rng);
    let (_, g) = logprob_and_grad(&params, &f, a).unwrap();
    fd_max_rel_err(&params, &g, |p| logprob_and_grad(p, &f, a).unwrap().0)
}

pub fn sft_grad_check<R: Rng>(rng: &mut R) -> f64 {
    let params = random_params(rng, 2.0);
    let n = rng.gen_range(1..40);
    let batch: Vec<(FeatureVector, RouterAction)> = (0..n).map(|_| (random_features(rng), random_action(rng))).collect();
    let loss = |p: &RouterParams| sft_loss_and_grad(p, batch.iter().map(|(f, a)| (f, *a))).unwrap();
    let (_, g) = loss(&params);
    fd_max_rel_err(&params, &g, |p| loss(p).0)
}

pub fn small_env() -> EnvConfig {
    EnvConfig {
        horizon: 12,
        solve_length_range: [3, 8],
        n_critical_range: [1, 3],
        ..EnvConfig::default()
    }
}

/// Frozen batch sampled under `old`, evaluated at a nearby point so every
/// ratio sits well inside the clip range.
pub fn surrogate_grad_check<R: Rng>(rng: &mut R, id: u64) -> f64 {
    let old = random_params(rng, 1.5);
    let reference = random_params(rng, 1.5);
    let mut params = old.clone();
    for w in params.weights.iter_mut() {
        *w += rng.gen_range(-0.01..0.01);
    }
    let costs = CostModel::default();
    let config = BopoConfig {
        beta_kl: rng.gen_range(0.0..0.5),
        ..BopoConfig::default()
    };
    let task = generate_task(&small_env(), 99, id).unwrap();
    let mut groups = Vec::new();
    for g in 0..2u64 {
        let members = sample_group(&old, &task, &costs, (0..4).map(|m| 1000 * id + 10 * g + m)).unwrap();
        let rewards: Vec<f64> = (0..members.len()).map(|_| rng.gen_range(-1.0..1.5)).collect();
        let reference_reward = if g == 0 { Some(rng.gen_range(0.0..1.5)) } else { None };
        groups.push(GroupRollout::new(task.task_id, members, rewards, reference_reward, 1e-8));
    }
    let (_, grad) = surrogate_and_grad(&params, &reference, &groups, &config).unwrap();
    fd_max_rel_err(&params, &grad, |p| surrogate_and_grad(p, &reference, &groups, &config).unwrap().0.objective)
}

/// A random task with horizon at most `max_horizon` and random clear
/// probabilities.
pub fn random_small_task<R: Rng>(rng: &mut R, id: u64, max_horizon: usize) -> Task {
    let horizon = rng.gen_range(1..=max_horizon);
    let q_small = rng.gen_range(0.0..1.0);
    let cfg = EnvConfig {
        horizon,
        solve_length_range: [1, horizon],
        n_critical_range: [0, horizon.min(4)],
        q_small,
        q_large: rng.gen_range(q_small..=1.0),
        q_large_intractable: 0.0,
        intractable_fraction: 0.1,
        hint_noise: 0.2,
        fail_mode: if rng.gen_bool(0.5) {
            FailMode::RunToHorizon
        } else {
            FailMode::TerminateOnFail
        },
        history_window: 10,
    };
    generate_task(&cfg, rng.gen(), id).unwrap()
}

#[derive(Debug)]
pub struct OracleComparison {
    pub exact: f64,
    pub empirical: f64,
    pub sigma: f64,
}

impl OracleComparison {
    pub fn within(&self, k: f64) -> bool {
        (self.exact - self.empirical).abs() <= k * self.sigma + 1e-12
    }
}

pub fn mc_success(task: &Task, schedule: &DeterministicSchedule, episodes: usize, seed: u64) -> OracleComparison {
    let costs = CostModel::default();
    let exact = exact_episode_stats(task, schedule, &costs).unwrap().success_probability;
    let mut rng = stream(seed, "oracle-mc", &[task.task_id]);
    let wins = (0..episodes)
        .filter(|_| run_schedule(task, schedule, &costs, seed, &mut rng).success)
        .count();
    let n = episodes as f64;
    OracleComparison {
        exact,
        empirical: wins as f64 / n,
        sigma: (exact * (1.0 - exact) / n).sqrt(),
    }
}

pub fn schedules(horizon: usize) -> [DeterministicSchedule; 3] {
    [
        DeterministicSchedule::constant(RouterAction::Small, horizon),
        DeterministicSchedule::constant(RouterAction::Large, horizon),
        DeterministicSchedule::alternating(horizon),
    ]
}

pub fn brute_force_count(t: usize, k: usize) -> u64 {
    (0u64..(1u64 << t)).filter(|m| m.count_ones() as usize <= k).count() as u64
}

/// Small end-to-end configuration writing into `dir`.
pub fn tiny_pipeline_config(dir: &std::path::Path) -> routelab::config::ExperimentConfig {
    let mut cfg = routelab::config::ExperimentConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.taxonomy.tasks = 60;
    cfg.eval.tasks = 40;
    cfg.eval.seeds = 2;
    cfg.bopo.iterations = 20;
    cfg.bopo.tasks_per_batch = 8;
    cfg.bopo.sft_steps = 200;
    cfg
}

/// profile → synthesize → train (sft, bopo) → every eval mode.
pub fn run_pipeline(cfg: &routelab::config::ExperimentConfig) {
    use routelab::pipeline::{cmd_eval, cmd_profile, cmd_synthesize, cmd_train, EvalMode, TrainStage};
    cmd_profile(cfg).unwrap();
    cmd_synthesize(cfg).unwrap();
    cmd_train(cfg, TrainStage::Sft, false).unwrap();
    cmd_train(cfg, TrainStage::Bopo, false).unwrap();
    for mode in [EvalMode::Frontier, EvalMode::HardBudget, EvalMode::Allocation] {
        cmd_eval(cfg, mode).unwrap();
    }
}
