//! MAML over traffic-density tasks, the pretrained multi-task baseline, and
//! few-step adaptation.
//!
//! Every rollout is identified by one `u64` seed: the traffic stream uses it
//! directly and the action sampler uses `derive_seed(seed, "policy")`.
//! Seeds for training rollouts are derived from the master seed by name,
//! e.g. `meta/{iteration}/{task}/tr`, so results do not depend on how the
//! work is scheduled.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{MetaHyper, MetaMode, PpoHyper, RunConfig, ScenarioConfig};
use crate::env::HighwayEnv;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::nn::{
    adam_step, clip_grad_norm, hessian_vector_product, loss_and_grad, save_checkpoint, sgd_step, AdamState,
    NetworkShape, PolicyParams,
};
use crate::ppo::{collect_rollout, compute_gae, ppo_stats, PpoLoss, PpoStats, RolloutBuffer, RolloutOptions};
use crate::reward::RewardBreakdown;
use crate::seed::{derive_seed, rng_for};
use crate::sim::{Simulator, TrafficTask};

/// Training densities and the held-out test density.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub train: Vec<f64>,
    pub test: f64,
}

impl TaskSet {
    pub fn new(train: Vec<f64>, test: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Invalid("task set needs at least one training task".into()));
        }
        for &f in train.iter().chain(std::iter::once(&test)) {
            TrafficTask::new(f, 0)?;
        }
        if train.contains(&test) {
            return Err(Error::Invalid(format!(
                "test density {test} is also a training density"
            )));
        }
        Ok(Self { train, test })
    }
}

/// Everything a training or adaptation run needs besides seeds.
#[derive(Debug, Clone)]
pub struct Setup {
    pub sim: Simulator,
    pub shape: NetworkShape,
    pub ppo: PpoHyper,
    pub meta: MetaHyper,
    pub shield: bool,
}

impl Setup {
    pub fn new(scenario: ScenarioConfig, run: &RunConfig) -> Result<Self> {
        run.validate()?;
        Ok(Self {
            sim: Simulator::new(scenario)?,
            shape: NetworkShape::policy(run.network.hidden, run.network.critic),
            ppo: run.ppo.clone(),
            meta: run.meta.clone(),
            shield: run.shield,
        })
    }

    pub fn init_params(&self, master_seed: u64) -> PolicyParams {
        PolicyParams::init(self.shape, &mut rng_for(master_seed, "init"))
    }

    /// One stochastic rollout of `horizon` steps with advantages filled in.
    pub fn rollout(&self, params: &PolicyParams, release_prob: f64, seed: u64) -> Result<RolloutBuffer> {
        let mut env = HighwayEnv::new(self.sim.clone(), TrafficTask::new(release_prob, seed)?)?;
        let opts = RolloutOptions {
            shield: self.shield,
            greedy: false,
        };
        let mut buf = collect_rollout(&mut env, params, self.ppo.horizon, &mut rng_for(seed, "policy"), opts)?;
        compute_gae(&mut buf, self.ppo.gamma, self.ppo.lambda);
        Ok(buf)
    }

    fn objective<'a>(&'a self, buffer: &'a RolloutBuffer) -> Result<PpoObjective<'a>> {
        Ok(PpoObjective {
            shape: self.shape,
            loss: PpoLoss::new(buffer, &self.ppo)?,
            indices: (0..buffer.len()).collect(),
        })
    }
}

/// A differentiable inner-loop objective on flat parameters.
pub trait InnerObjective {
    fn grad(&self, params: &[f64]) -> Result<Vec<f64>>;
    fn hvp(&self, params: &[f64], v: &[f64]) -> Result<Vec<f64>>;
}

/// The full-batch PPO loss on one buffer.
pub struct PpoObjective<'a> {
    shape: NetworkShape,
    loss: PpoLoss<'a>,
    indices: Vec<usize>,
}

impl PpoObjective<'_> {
    fn params(&self, p: &[f64]) -> Result<PolicyParams> {
        PolicyParams::from_flat(self.shape, p.to_vec())
    }

    pub fn stats(&self, p: &PolicyParams) -> Result<PpoStats> {
        ppo_stats(p, &self.loss, &self.indices)
    }
}

impl InnerObjective for PpoObjective<'_> {
    fn grad(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(loss_and_grad(&self.params(p)?, &self.loss, &self.indices)?.1)
    }

    fn hvp(&self, p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        hessian_vector_product(&self.params(p)?, &self.loss, &self.indices, v)
    }
}

/// `phi_{k+1} = phi_k - alpha * grad(phi_k)`; returns `phi_0 ..= phi_steps`.
pub fn inner_sgd_chain<O: InnerObjective>(obj: &O, theta: &[f64], alpha: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
    let mut points = vec![theta.to_vec()];
    for _ in 0..steps {
        let mut next = points.last().unwrap().clone();
        let g = obj.grad(&next)?;
        sgd_step(&mut next, &g, alpha)?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged("inner step produced non-finite parameters".into()));
        }
        points.push(next);
    }
    Ok(points)
}

/// Pull `d L / d phi_n` back through the SGD chain to `d L / d theta`:
/// `v <- (I - alpha H(phi_k)) v` for `k = n-1 .. 0`.
pub fn chain_backprop<O: InnerObjective>(
    obj: &O,
    points: &[Vec<f64>],
    alpha: f64,
    outer_grad: Vec<f64>,
) -> Result<Vec<f64>> {
    let mut v = outer_grad;
    for phi in points[..points.len().saturating_sub(1)].iter().rev() {
        let hv = obj.hvp(phi, &v)?;
        for (vi, h) in v.iter_mut().zip(&hv) {
            *vi -= alpha * h;
        }
    }
    Ok(v)
}

/// Seeds of the two rollouts of one task in one meta-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSeeds {
    pub train: u64,
    pub validation: u64,
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub phi: PolicyParams,
    /// `phi_0 = theta, ..., phi_n = phi`.
    pub chain: Vec<Vec<f64>>,
    pub d_tr: RolloutBuffer,
    pub d_vd: RolloutBuffer,
}

/// Collect `D_tr` with `theta`, take `inner_steps` SGD steps on its PPO
/// loss, then collect `D_vd` with the adapted parameters.
pub fn inner_adapt(setup: &Setup, theta: &PolicyParams, release_prob: f64, seeds: TaskSeeds) -> Result<Adapted> {
    if !theta.is_finite() {
        return Err(Error::Diverged("non-finite parameters".into()));
    }
    let d_tr = setup.rollout(theta, release_prob, seeds.train)?;
    let chain = inner_sgd_chain(
        &setup.objective(&d_tr)?,
        theta.as_slice(),
        setup.meta.inner_lr,
        setup.meta.inner_steps,
    )?;
    let phi = PolicyParams::from_flat(setup.shape, chain.last().unwrap().clone())?;
    let d_vd = setup.rollout(&phi, release_prob, seeds.validation)?;
    Ok(Adapted { phi, chain, d_tr, d_vd })
}

/// Per-task record of one meta or baseline step.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub release_prob: f64,
    /// PPO statistics of the evaluated parameters on the outer-loss buffer.
    pub stats: PpoStats,
    pub reward: RewardBreakdown,
    pub interventions: usize,
    pub env_steps: u64,
    /// Adapted parameters (meta) or the shared parameters (baseline).
    pub params: PolicyParams,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub params: PolicyParams,
    pub adam: AdamState,
    pub tasks: Vec<TaskReport>,
    pub warnings: Vec<String>,
    pub env_steps: u64,
    pub grad_norm: f64,
}

enum TaskOutcome {
    Done(Vec<f64>, TaskReport),
    Skipped(String, u64),
}

fn task_meta_gradient(setup: &Setup, theta: &PolicyParams, f: f64, seeds: TaskSeeds) -> Result<TaskOutcome> {
    let adapted = match inner_adapt(setup, theta, f, seeds) {
        Ok(a) => a,
        Err(Error::Diverged(msg)) => {
            return Ok(TaskOutcome::Skipped(
                format!("task f={f}: {msg}"),
                setup.ppo.horizon as u64,
            ))
        }
        Err(e) => return Err(e),
    };
    let steps = (adapted.d_tr.len() + adapted.d_vd.len()) as u64;
    let outer = setup.objective(&adapted.d_vd)?;
    let result = outer.grad(adapted.phi.as_slice()).and_then(|g| match setup.meta.mode {
        MetaMode::First => Ok(g),
        MetaMode::Second => chain_backprop(&setup.objective(&adapted.d_tr)?, &adapted.chain, setup.meta.inner_lr, g),
    });
    let grad = match result {
        Ok(g) => g,
        Err(Error::Diverged(msg)) => return Ok(TaskOutcome::Skipped(format!("task f={f}: {msg}"), steps)),
        Err(e) => return Err(e),
    };
    let report = TaskReport {
        release_prob: f,
        stats: outer.stats(&adapted.phi)?,
        reward: adapted.d_vd.mean_breakdown(),
        interventions: adapted.d_vd.intervention_count(),
        env_steps: steps,
        params: adapted.phi,
    };
    Ok(TaskOutcome::Done(grad, report))
}

fn task_joint_gradient(setup: &Setup, theta: &PolicyParams, f: f64, seed: u64) -> Result<TaskOutcome> {
    let buf = setup.rollout(theta, f, seed)?;
    let obj = setup.objective(&buf)?;
    match obj.grad(theta.as_slice()) {
        Ok(g) => Ok(TaskOutcome::Done(
            g,
            TaskReport {
                release_prob: f,
                stats: obj.stats(theta)?,
                reward: buf.mean_breakdown(),
                interventions: buf.intervention_count(),
                env_steps: buf.len() as u64,
                params: theta.clone(),
            },
        )),
        Err(Error::Diverged(msg)) => Ok(TaskOutcome::Skipped(format!("task f={f}: {msg}"), buf.len() as u64)),
        Err(e) => Err(e),
    }
}

/// Sum task gradients in task order, clip, and take one Adam step.
fn reduce_and_step(
    setup: &Setup,
    theta: &PolicyParams,
    adam: &AdamState,
    lr: f64,
    outcomes: Vec<TaskOutcome>,
) -> Result<StepResult> {
    let mut sum = vec![0.0; theta.len()];
    let mut tasks = Vec::new();
    let mut warnings = Vec::new();
    let mut env_steps = 0;
    for o in outcomes {
        match o {
            TaskOutcome::Done(g, report) => {
                sum.iter_mut().zip(&g).for_each(|(s, gi)| *s += gi);
                env_steps += report.env_steps;
                tasks.push(report);
            }
            TaskOutcome::Skipped(w, steps) => {
                env_steps += steps;
                warnings.push(w);
            }
        }
    }
    if tasks.is_empty() {
        return Err(Error::MetaBatchEmpty);
    }
    let grad_norm = clip_grad_norm(&mut sum, setup.ppo.max_grad_norm);
    let mut params = theta.clone();
    let mut adam = adam.clone();
    adam_step(params.as_mut_slice(), &sum, &mut adam, lr)?;
    if !params.is_finite() {
        return Err(Error::Diverged("outer step produced non-finite parameters".into()));
    }
    Ok(StepResult {
        params,
        adam,
        tasks,
        warnings,
        env_steps,
        grad_norm,
    })
}

/// One outer step: adapt to every task in parallel, sum the post-adaptation
/// gradients in task order and apply Adam at rate `lr`.
pub fn meta_update(
    setup: &Setup,
    theta: &PolicyParams,
    adam: &AdamState,
    tasks: &[(f64, TaskSeeds)],
    lr: f64,
) -> Result<StepResult> {
    let outcomes = tasks
        .par_iter()
        .map(|&(f, seeds)| task_meta_gradient(setup, theta, f, seeds))
        .collect::<Result<Vec<_>>>()?;
    reduce_and_step(setup, theta, adam, lr, outcomes)
}

/// One baseline step: a joint PPO gradient over one rollout per task.
pub fn pretrained_update(
    setup: &Setup,
    theta: &PolicyParams,
    adam: &AdamState,
    tasks: &[(f64, u64)],
    lr: f64,
) -> Result<StepResult> {
    let outcomes = tasks
        .par_iter()
        .map(|&(f, seed)| task_joint_gradient(setup, theta, f, seed))
        .collect::<Result<Vec<_>>>()?;
    reduce_and_step(setup, theta, adam, lr, outcomes)
}

/// Outer learning rate at step `k` of `total`.
pub fn annealed_lr(base: f64, k: usize, total: usize, anneal: bool) -> f64 {
    if anneal && total > 0 {
        base * (1.0 - k as f64 / total as f64)
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Meta,
    Pretrained,
}

impl Agent {
    pub fn as_str(self) -> &'static str {
        match self {
            Agent::Meta => "meta",
            Agent::Pretrained => "pretrained",
        }
    }
}

/// One row of the training log: one task at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub agent: Agent,
    pub task: f64,
    pub reward: f64,
    pub comfort: f64,
    pub efficiency: f64,
    pub safety: f64,
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub interventions: usize,
    pub env_steps: u64,
    pub lr: f64,
    /// Greedy evaluation of the logged parameters, on logging iterations.
    pub success_rate: Option<f64>,
    pub collision_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: PolicyParams,
    pub adam: AdamState,
    pub log: Vec<TrainLogRow>,
    pub env_steps: u64,
    pub warnings: Vec<String>,
}

impl TrainResult {
    /// Mean logged success rate per logging iteration, in order.
    pub fn success_curve(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for row in &self.log {
            if let Some(s) = row.success_rate {
                match out.last_mut() {
                    Some(last) if last.0 == row.iteration => {
                        last.1 += s;
                        last.2 += 1;
                    }
                    _ => out.push((row.iteration, s, 1)),
                }
            }
        }
        out.into_iter().map(|(i, s, n)| (i, s / n as f64)).collect()
    }

    /// Mean logged (success, collision) at the last logging iteration.
    pub fn final_rates(&self) -> Option<(f64, f64)> {
        let last = self.log.iter().rev().find(|r| r.success_rate.is_some())?.iteration;
        let rows: Vec<&TrainLogRow> = self
            .log
            .iter()
            .filter(|r| r.iteration == last && r.success_rate.is_some())
            .collect();
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.success_rate.unwrap()).sum::<f64>() / n,
            rows.iter().map(|r| r.collision_rate.unwrap()).sum::<f64>() / n,
        ))
    }
}

/// Where training writes checkpoints and logs.
#[derive(Debug, Clone, Copy)]
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
}

#[allow(clippy::too_many_arguments)]
fn log_rows(
    setup: &Setup,
    agent: Agent,
    iteration: usize,
    step: &StepResult,
    env_steps: u64,
    lr: f64,
    evaluate_now: bool,
    eval_seed: u64,
) -> Result<Vec<TrainLogRow>> {
    let evals: Vec<Option<(f64, f64)>> = step
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if !evaluate_now {
                return Ok(None);
            }
            let seed = derive_seed(eval_seed, &format!("{}/{iteration}/{i}", agent.as_str()));
            let rec = evaluate(
                &setup.sim,
                &t.params,
                t.release_prob,
                setup.meta.log_episodes,
                seed,
                setup.shield,
            )?
            .0;
            Ok(Some((rec.success_rate, rec.collision_rate)))
        })
        .collect::<Result<_>>()?;
    Ok(step
        .tasks
        .iter()
        .zip(evals)
        .map(|(t, e)| TrainLogRow {
            iteration,
            agent,
            task: t.release_prob,
            reward: t.reward.total,
            comfort: t.reward.comfort,
            efficiency: t.reward.efficiency,
            safety: t.reward.safety,
            loss: t.stats.loss,
            policy_loss: t.stats.policy_loss,
            value_loss: t.stats.value_loss,
            entropy: t.stats.entropy,
            mean_ratio: t.stats.mean_ratio,
            interventions: t.interventions,
            env_steps,
            lr,
            success_rate: e.map(|x| x.0),
            collision_rate: e.map(|x| x.1),
        })
        .collect())
}

fn should_log(setup: &Setup, iteration: usize, total: usize) -> bool {
    setup.meta.log_every > 0
        && setup.meta.log_episodes > 0
        && (iteration.is_multiple_of(setup.meta.log_every) || iteration + 1 == total)
}

pub fn write_log<W: std::io::Write>(writer: W, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn save_progress(
    out: Option<TrainOutput>,
    name: &str,
    iteration: usize,
    every: usize,
    params: &PolicyParams,
    adam: &AdamState,
) -> Result<()> {
    if let Some(out) = out {
        if every > 0 && iteration.is_multiple_of(every) {
            let dir = out.dir.join("checkpoints");
            std::fs::create_dir_all(&dir)?;
            save_checkpoint(&dir.join(format!("{name}-{iteration:06}.ckpt")), params, Some(adam))?;
        }
    }
    Ok(())
}

fn finish(out: Option<TrainOutput>, name: &str, result: &TrainResult) -> Result<()> {
    if let Some(out) = out {
        std::fs::create_dir_all(out.dir)?;
        save_checkpoint(
            &out.dir.join(format!("{name}.ckpt")),
            &result.params,
            Some(&result.adam),
        )?;
        write_log(
            std::fs::File::create(out.dir.join(format!("{name}-train.csv")))?,
            &result.log,
        )?;
    }
    Ok(())
}

/// Meta-train from the seeded initialization for `meta.iterations` steps.
///
/// Checkpoints are written every `meta.checkpoint_every` iterations; on a
/// non-finite update the run stops with an error and the last checkpoint
/// stays on disk.
pub fn train_meta(setup: &Setup, tasks: &TaskSet, master_seed: u64, out: Option<TrainOutput>) -> Result<TrainResult> {
    let total = setup.meta.iterations;
    let mut params = setup.init_params(master_seed);
    let mut adam = AdamState::new(params.len());
    let mut result = TrainResult {
        params: params.clone(),
        adam: adam.clone(),
        log: Vec::new(),
        env_steps: 0,
        warnings: Vec::new(),
    };
    let eval_seed = derive_seed(master_seed, "train-eval");
    save_progress(out, "meta", 0, setup.meta.checkpoint_every, &params, &adam)?;
    for k in 0..total {
        let batch: Vec<(f64, TaskSeeds)> = tasks
            .train
            .iter()
            .cycle()
            .skip(k * setup.meta.tasks_per_batch % tasks.train.len())
            .take(setup.meta.tasks_per_batch)
            .enumerate()
            .map(|(i, &f)| {
                (
                    f,
                    TaskSeeds {
                        train: derive_seed(master_seed, &format!("meta/{k}/{i}/tr")),
                        validation: derive_seed(master_seed, &format!("meta/{k}/{i}/vd")),
                    },
                )
            })
            .collect();
        let lr = annealed_lr(setup.meta.outer_lr, k, total, setup.meta.anneal);
        let step = meta_update(setup, &params, &adam, &batch, lr)?;
        result.env_steps += step.env_steps;
        result.log.extend(log_rows(
            setup,
            Agent::Meta,
            k,
            &step,
            result.env_steps,
            lr,
            should_log(setup, k, total),
            eval_seed,
        )?);
        result.warnings.extend(step.warnings);
        params = step.params;
        adam = step.adam;
        save_progress(out, "meta", k + 1, setup.meta.checkpoint_every, &params, &adam)?;
    }
    result.params = params;
    result.adam = adam;
    finish(out, "meta", &result)?;
    Ok(result)
}

/// Number of baseline steps per meta-iteration that equalizes the
/// environment-step budget: a meta step collects two rollouts per task, a
/// baseline step one.
pub const PRETRAINED_STEPS_PER_ITERATION: usize = 2;

/// Multi-task baseline: joint PPO gradient steps on rollouts from every
/// training task in turn, with the same step budget as [`train_meta`].
pub fn train_pretrained(
    setup: &Setup,
    tasks: &TaskSet,
    master_seed: u64,
    out: Option<TrainOutput>,
) -> Result<TrainResult> {
    let iterations = setup.meta.iterations;
    let total = iterations * PRETRAINED_STEPS_PER_ITERATION;
    let mut params = setup.init_params(master_seed);
    let mut adam = AdamState::new(params.len());
    let mut result = TrainResult {
        params: params.clone(),
        adam: adam.clone(),
        log: Vec::new(),
        env_steps: 0,
        warnings: Vec::new(),
    };
    let eval_seed = derive_seed(master_seed, "train-eval");
    save_progress(out, "pretrained", 0, setup.meta.checkpoint_every, &params, &adam)?;
    let mut step_index = 0;
    for k in 0..iterations {
        for j in 0..PRETRAINED_STEPS_PER_ITERATION {
            let batch: Vec<(f64, u64)> = tasks
                .train
                .iter()
                .cycle()
                .skip(k * setup.meta.tasks_per_batch % tasks.train.len())
                .take(setup.meta.tasks_per_batch)
                .enumerate()
                .map(|(i, &f)| (f, derive_seed(master_seed, &format!("pretrained/{k}/{j}/{i}"))))
                .collect();
            let lr = annealed_lr(setup.meta.outer_lr, step_index, total, setup.meta.anneal);
            let step = pretrained_update(setup, &params, &adam, &batch, lr)?;
            result.env_steps += step.env_steps;
            if j + 1 == PRETRAINED_STEPS_PER_ITERATION {
                result.log.extend(log_rows(
                    setup,
                    Agent::Pretrained,
                    k,
                    &step,
                    result.env_steps,
                    lr,
                    should_log(setup, k, iterations),
                    eval_seed,
                )?);
            }
            result.warnings.extend(step.warnings);
            params = step.params;
            adam = step.adam;
            step_index += 1;
        }
        save_progress(out, "pretrained", k + 1, setup.meta.checkpoint_every, &params, &adam)?;
    }
    result.params = params;
    result.adam = adam;
    finish(out, "pretrained", &result)?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct AdaptTrace {
    /// Parameters after 0, 1, ... gradient steps.
    pub params: Vec<PolicyParams>,
    pub warning: Option<String>,
}

/// Few-step adaptation: each step collects a fresh rollout with the current
/// parameters and applies one SGD step at `meta.inner_lr` on its PPO loss.
pub fn adapt(setup: &Setup, start: &PolicyParams, release_prob: f64, steps: usize, seed: u64) -> Result<AdaptTrace> {
    if start.shape() != &setup.shape {
        return Err(Error::Checkpoint(
            "checkpoint shape does not match the network config".into(),
        ));
    }
    let mut trace = AdaptTrace {
        params: vec![start.clone()],
        warning: None,
    };
    for s in 0..steps {
        let current = trace.params.last().unwrap();
        let buf = setup.rollout(current, release_prob, derive_seed(seed, &format!("adapt/{s}")))?;
        let step = inner_sgd_chain(&setup.objective(&buf)?, current.as_slice(), setup.meta.inner_lr, 1);
        match step {
            Ok(mut chain) => trace
                .params
                .push(PolicyParams::from_flat(setup.shape, chain.pop().unwrap())?),
            Err(Error::Diverged(msg)) => {
                trace.warning = Some(format!("adaptation stopped after {s} steps: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests;
