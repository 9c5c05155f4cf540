//! Success/collision metrics, the meta-vs-pretrained adaptation study, and
//! report files.
//!
//! File schemas (fixed column order):
//!
//! - `adaptation.csv`: `step,agent,success_mean,success_std,collision_mean,
//!   collision_std,comfort_mean,efficiency_mean,safety_mean,reward_mean,episodes,seeds`
//! - `summary.csv`: `step,meta_success,pretrained_success,meta_collision,pretrained_collision`
//! - `success.svg`, `collision.svg`, `reward.svg`: one `<path>` per agent.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, HighwayEnv};
use crate::error::{Error, Result};
use crate::maml::{adapt, Agent, Setup};
use crate::nn::PolicyParams;
use crate::ppo::argmax;
use crate::reward::RewardBreakdown;
use crate::seed::derive_seed;
use crate::sim::{JointAction, Simulator, TerminalFlag, TraceWriter, TrafficTask};

/// Steps reported in `summary.csv`.
pub const SUMMARY_STEPS: [usize; 3] = [5, 20, 40];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub result: TerminalFlag,
    pub steps: u32,
    /// Reward components summed over the episode.
    pub reward: RewardBreakdown,
    pub interventions: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub gradient_step: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub exit_missed_rate: f64,
    /// Per-episode reward sums averaged over episodes.
    pub comfort: f64,
    pub efficiency: f64,
    pub safety: f64,
    pub reward: f64,
    pub episodes: usize,
}

impl MetricRecord {
    pub fn from_outcomes(gradient_step: usize, outcomes: &[EpisodeOutcome]) -> Self {
        let n = outcomes.len() as f64;
        let rate = |flag| outcomes.iter().filter(|o| o.result == flag).count() as f64 / n;
        let mean = |f: fn(&RewardBreakdown) -> f64| outcomes.iter().map(|o| f(&o.reward)).sum::<f64>() / n;
        Self {
            gradient_step,
            success_rate: rate(TerminalFlag::Success),
            collision_rate: rate(TerminalFlag::Collision),
            exit_missed_rate: rate(TerminalFlag::ExitMissed),
            comfort: mean(|r| r.comfort),
            efficiency: mean(|r| r.efficiency),
            safety: mean(|r| r.safety),
            reward: mean(|r| r.total),
            episodes: outcomes.len(),
        }
    }
}

/// Seed of evaluation episode `i` under `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &format!("episode/{i}"))
}

/// Chooses an action from the current observation of an environment.
pub trait Policy: Sync {
    fn act(&self, env: &HighwayEnv) -> JointAction;
}

/// Argmax over the network's logits.
pub struct Greedy<'a>(pub &'a PolicyParams);

impl Policy for Greedy<'_> {
    fn act(&self, env: &HighwayEnv) -> JointAction {
        let obs = env.current().expect("episode is running");
        JointAction::ALL[argmax(&self.0.forward(&obs).logits)]
    }
}

/// Run one episode to its end, optionally tracing every state.
pub fn run_episode<P: Policy, W: Write>(
    sim: &Simulator,
    policy: &P,
    release_prob: f64,
    seed: u64,
    shield: bool,
    mut trace: Option<(&mut TraceWriter<W>, u32)>,
) -> Result<EpisodeOutcome> {
    let mut env = HighwayEnv::new(sim.clone(), TrafficTask::new(release_prob, seed)?)?;
    env.reset()?;
    let mut out = EpisodeOutcome {
        result: TerminalFlag::Running,
        steps: 0,
        reward: RewardBreakdown::default(),
        interventions: 0,
    };
    if let Some((w, ep)) = trace.as_mut() {
        w.record(*ep, env.state().unwrap())?;
    }
    while out.result == TerminalFlag::Running {
        let proposed = policy.act(&env);
        let action = if shield { env.shield(proposed)? } else { proposed };
        if action != proposed {
            out.interventions += 1;
        }
        let t = env.step(action)?;
        out.steps += 1;
        out.reward.comfort += t.reward.comfort;
        out.reward.efficiency += t.reward.efficiency;
        out.reward.safety += t.reward.safety;
        out.reward.total += t.reward.total;
        out.result = t.outcome;
        if let Some((w, ep)) = trace.as_mut() {
            w.record(*ep, env.state().unwrap())?;
        }
    }
    Ok(out)
}

/// Evaluate `policy` over `n_episodes` seeded episodes in parallel.
pub fn evaluate_policy<P: Policy>(
    sim: &Simulator,
    policy: &P,
    release_prob: f64,
    n_episodes: usize,
    seed: u64,
    shield: bool,
) -> Result<(MetricRecord, Vec<EpisodeOutcome>)> {
    if n_episodes == 0 {
        return Err(Error::Invalid("need at least one evaluation episode".into()));
    }
    let outcomes = (0..n_episodes)
        .into_par_iter()
        .map(|i| run_episode::<_, std::io::Sink>(sim, policy, release_prob, episode_seed(seed, i), shield, None))
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricRecord::from_outcomes(0, &outcomes), outcomes))
}

/// Greedy evaluation of network parameters.
pub fn evaluate(
    sim: &Simulator,
    params: &PolicyParams,
    release_prob: f64,
    n_episodes: usize,
    seed: u64,
    shield: bool,
) -> Result<(MetricRecord, Vec<EpisodeOutcome>)> {
    evaluate_policy(sim, &Greedy(params), release_prob, n_episodes, seed, shield)
}

/// Same episodes as [`evaluate`], run sequentially and written to a trace.
pub fn evaluate_traced<W: Write>(
    sim: &Simulator,
    params: &PolicyParams,
    release_prob: f64,
    n_episodes: usize,
    seed: u64,
    shield: bool,
    trace: &mut TraceWriter<W>,
) -> Result<(MetricRecord, Vec<EpisodeOutcome>)> {
    if n_episodes == 0 {
        return Err(Error::Invalid("need at least one evaluation episode".into()));
    }
    let outcomes = (0..n_episodes)
        .map(|i| {
            run_episode(
                sim,
                &Greedy(params),
                release_prob,
                episode_seed(seed, i),
                shield,
                Some((&mut *trace, i as u32)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricRecord::from_outcomes(0, &outcomes), outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPoint {
    pub seed: usize,
    pub agent: Agent,
    pub record: MetricRecord,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyOptions {
    pub release_prob: f64,
    pub steps: usize,
    pub eval_every: usize,
    pub episodes: usize,
    pub seeds: usize,
    pub shield: bool,
}

/// Gradient steps at which the adapted parameters are evaluated.
pub fn eval_steps(steps: usize, eval_every: usize) -> Vec<usize> {
    (0..=steps)
        .filter(|s| s % eval_every.max(1) == 0 || *s == steps || SUMMARY_STEPS.contains(s))
        .collect()
}

/// Adapt both agents on the test task from several seeds and evaluate them
/// along the way. Both agents see the same rollout and evaluation seeds.
pub fn adaptation_study(
    setup: &Setup,
    meta: &PolicyParams,
    pretrained: &PolicyParams,
    opts: StudyOptions,
    master_seed: u64,
) -> Result<Vec<StudyPoint>> {
    if meta.shape() != pretrained.shape() {
        return Err(Error::Checkpoint(
            "meta and pretrained checkpoints have different shapes".into(),
        ));
    }
    let steps = eval_steps(opts.steps, opts.eval_every);
    let mut points = Vec::new();
    for seed in 0..opts.seeds {
        let adapt_seed = derive_seed(master_seed, &format!("study/{seed}/adapt"));
        for (agent, start) in [(Agent::Meta, meta), (Agent::Pretrained, pretrained)] {
            let trace = adapt(setup, start, opts.release_prob, opts.steps, adapt_seed)?;
            if let Some(w) = &trace.warning {
                eprintln!("warning: {} seed {seed}: {w}", agent.as_str());
            }
            for &s in &steps {
                let Some(params) = trace.params.get(s) else { break };
                let eval_seed = derive_seed(master_seed, &format!("study/{seed}/eval/{s}"));
                let (mut record, _) = evaluate(
                    &setup.sim,
                    params,
                    opts.release_prob,
                    opts.episodes,
                    eval_seed,
                    opts.shield,
                )?;
                record.gradient_step = s;
                points.push(StudyPoint { seed, agent, record });
            }
        }
    }
    Ok(points)
}

/// Mean and population standard deviation across seeds at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub agent: Agent,
    pub success_mean: f64,
    pub success_std: f64,
    pub collision_mean: f64,
    pub collision_std: f64,
    pub comfort_mean: f64,
    pub efficiency_mean: f64,
    pub safety_mean: f64,
    pub reward_mean: f64,
    pub episodes: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub step: usize,
    pub meta_success: f64,
    pub pretrained_success: f64,
    pub meta_collision: f64,
    pub pretrained_collision: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Aggregate study points into per-(step, agent) curve rows, ordered by
/// step then agent.
pub fn curve(points: &[StudyPoint]) -> Vec<CurveRow> {
    let mut keys: Vec<(usize, Agent)> = points.iter().map(|p| (p.record.gradient_step, p.agent)).collect();
    keys.sort_by_key(|&(s, a)| (s, a as u8));
    keys.dedup();
    keys.into_iter()
        .map(|(step, agent)| {
            let recs: Vec<&MetricRecord> = points
                .iter()
                .filter(|p| p.agent == agent && p.record.gradient_step == step)
                .map(|p| &p.record)
                .collect();
            let col = |f: fn(&MetricRecord) -> f64| recs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (success_mean, success_std) = mean_std(&col(|r| r.success_rate));
            let (collision_mean, collision_std) = mean_std(&col(|r| r.collision_rate));
            CurveRow {
                step,
                agent,
                success_mean,
                success_std,
                collision_mean,
                collision_std,
                comfort_mean: mean_std(&col(|r| r.comfort)).0,
                efficiency_mean: mean_std(&col(|r| r.efficiency)).0,
                safety_mean: mean_std(&col(|r| r.safety)).0,
                reward_mean: mean_std(&col(|r| r.reward)).0,
                episodes: recs.iter().map(|r| r.episodes).sum(),
                seeds: recs.len(),
            }
        })
        .collect()
}

/// Rows at [`SUMMARY_STEPS`] where both agents have a value.
pub fn summary(rows: &[CurveRow]) -> Vec<SummaryRow> {
    let find = |step, agent| rows.iter().find(|r| r.step == step && r.agent == agent);
    SUMMARY_STEPS
        .iter()
        .filter_map(|&step| {
            let m = find(step, Agent::Meta)?;
            let p = find(step, Agent::Pretrained)?;
            Some(SummaryRow {
                step,
                meta_success: m.success_mean,
                pretrained_success: p.success_mean,
                meta_collision: m.collision_mean,
                pretrained_collision: p.collision_mean,
            })
        })
        .collect()
}

fn write_csv<T: Serialize, P: AsRef<Path>>(path: P, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const CURVE_HEADER: [&str; 12] = [
    "step",
    "agent",
    "success_mean",
    "success_std",
    "collision_mean",
    "collision_std",
    "comfort_mean",
    "efficiency_mean",
    "safety_mean",
    "reward_mean",
    "episodes",
    "seeds",
];

pub const SUMMARY_HEADER: [&str; 5] = [
    "step",
    "meta_success",
    "pretrained_success",
    "meta_collision",
    "pretrained_collision",
];

/// Polyline chart of one metric per agent as a standalone SVG document.
#[allow(clippy::type_complexity)]
pub fn svg_chart(title: &str, rows: &[CurveRow], metric: fn(&CurveRow) -> f64) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    let series: Vec<(Agent, &str, Vec<(f64, f64)>)> = [(Agent::Meta, "#1f77b4"), (Agent::Pretrained, "#d62728")]
        .into_iter()
        .map(|(a, color)| {
            let pts = rows
                .iter()
                .filter(|r| r.agent == a)
                .map(|r| (r.step as f64, metric(r)))
                .collect();
            (a, color, pts)
        })
        .collect();
    let all = series.iter().flat_map(|s| s.2.iter());
    let x_max = all.clone().map(|p| p.0).fold(1.0, f64::max);
    let (mut y_min, mut y_max) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-9 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let sx = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y_min) / (y_max - y_min) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        s,
        r#"<polyline points="{PAD},{PAD} {PAD},{} {},{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="10">{y_min:.3}</text>"#,
        H - PAD + 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{}" font-family="sans-serif" font-size="10">{y_max:.3}</text>"#,
        PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10">step {x_max}</text>"#,
        W - PAD - 30.0,
        H - PAD + 12.0
    );
    for (i, (agent, color, pts)) in series.iter().enumerate() {
        let mut d = String::new();
        for (k, (x, y)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2}", if k == 0 { "M" } else { " L" }, sx(*x), sy(*y));
        }
        let _ = writeln!(
            s,
            r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="2"><title>{}</title></path>"#,
            agent.as_str()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}" font-family="sans-serif" font-size="11">{}</text>"#,
            W - PAD - 70.0,
            PAD + 14.0 * i as f64,
            agent.as_str()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `adaptation.csv`, `summary.csv` and the three SVG plots.
pub fn emit_outputs(rows: &[CurveRow], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_csv(out_dir.join("adaptation.csv"), &CURVE_HEADER, rows)?;
    write_csv(out_dir.join("summary.csv"), &SUMMARY_HEADER, &summary(rows))?;
    std::fs::write(
        out_dir.join("success.svg"),
        svg_chart("success rate", rows, |r| r.success_mean),
    )?;
    std::fs::write(
        out_dir.join("collision.svg"),
        svg_chart("collision rate", rows, |r| r.collision_mean),
    )?;
    std::fs::write(
        out_dir.join("reward.svg"),
        svg_chart("episode reward", rows, |r| r.reward_mean),
    )?;
    Ok(())
}

/// Read `adaptation.csv` back.
pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mann-Kendall trend statistic `S` and its normal score `z` (no tie
/// correction for `S`, tie-corrected variance).
pub fn mann_kendall(xs: &[f64]) -> (i64, f64) {
    let n = xs.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += match xs[j].partial_cmp(&xs[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * (t - 1.0) * (2.0 * t + 5.0);
        i = j + 1;
    }
    let nf = n as f64;
    let var = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - ties) / 18.0;
    let z = if var <= 0.0 {
        0.0
    } else if s > 0 {
        (s as f64 - 1.0) / var.sqrt()
    } else if s < 0 {
        (s as f64 + 1.0) / var.sqrt()
    } else {
        0.0
    };
    (s, z)
}

/// One-sided 95% test for an increasing trend.
pub fn increasing_trend(xs: &[f64]) -> bool {
    mann_kendall(xs).1 > 1.6448536269514722
}
