//! `lanemeta` command-line entry point.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lanemeta::config::{parse_override, resolve, RunConfig, ScenarioConfig};
use lanemeta::eval::{
    adaptation_study, curve, emit_outputs, eval_steps, evaluate, evaluate_traced, MetricRecord, StudyOptions,
};
use lanemeta::maml::{adapt, train_meta, train_pretrained, Setup, TaskSet, TrainOutput, TrainResult};
use lanemeta::nn::{load_checkpoint, save_checkpoint, PolicyParams};
use lanemeta::seed::derive_seed;
use lanemeta::sim::TraceWriter;

#[derive(Parser, Debug)]
#[command(
    name = "lanemeta",
    version,
    about = "Meta-RL lane-change training, adaptation and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train a policy over the training densities.
    TrainMeta(Common),
    /// Train the multi-task baseline with the same step budget.
    TrainPretrained(Common),
    /// Adapt a checkpoint to the test density and evaluate along the way.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Release probability to evaluate on; defaults to the test density.
        #[arg(long)]
        task: Option<f64>,
        /// Also write a per-step trace CSV.
        #[arg(long)]
        trace: bool,
    },
    /// Meta-vs-pretrained adaptation study with CSV and SVG output.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Mode {
    Fo,
    So,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario TOML (road, IDM, reward, timing).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Run TOML (tasks, network, PPO, meta, eval).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Meta-iterations when training, gradient steps when adapting.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long, value_enum)]
    shield: Option<Toggle>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// `key=value` override; keys under `scenario.` go to the scenario.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

struct Resolved {
    run: RunConfig,
    scenario: ScenarioConfig,
    out: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn resolve_config(c: &Common, steps_key: &str) -> Result<Resolved> {
    let mut run_set = Vec::new();
    let mut scenario_set = Vec::new();
    let mut flag = |k: &str, v: String| run_set.push((k.to_string(), v));
    if let Some(p) = &c.scenario {
        flag("scenario", format!("{:?}", p.display().to_string()));
    }
    if let Some(o) = &c.out {
        flag("output_dir", format!("{:?}", o.display().to_string()));
    }
    if let Some(s) = c.seed {
        flag("master_seed", s.to_string());
    }
    if let Some(s) = c.steps {
        flag(steps_key, s.to_string());
    }
    if let Some(n) = c.eval_episodes {
        flag("eval.episodes", n.to_string());
    }
    if let Some(t) = c.shield {
        let on = matches!(t, Toggle::On).to_string();
        flag("shield", on.clone());
        flag("eval.shield", on);
    }
    if let Some(m) = c.mode {
        flag(
            "meta.mode",
            if matches!(m, Mode::Fo) { "\"fo\"" } else { "\"so\"" }.to_string(),
        );
    }
    if let Some(w) = c.workers {
        flag("workers", w.to_string());
    }
    for raw in &c.set {
        let (k, v) = parse_override(raw)?;
        match k.strip_prefix("scenario.") {
            Some(rest) => scenario_set.push((rest.to_string(), v)),
            None => run_set.push((k, v)),
        }
    }
    let file = c.config.as_deref().map(read).transpose()?;
    let run: RunConfig = resolve(file.as_deref(), &run_set)?;
    run.validate()?;
    let scenario_text = if run.scenario.is_empty() {
        None
    } else {
        Some(read(Path::new(&run.scenario))?)
    };
    let scenario: ScenarioConfig = resolve(scenario_text.as_deref(), &scenario_set)?;
    scenario.validate()?;
    Ok(Resolved {
        out: PathBuf::from(&run.output_dir),
        run,
        scenario,
    })
}

fn load(path: &Path) -> Result<PolicyParams> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(load_checkpoint(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))?
        .params)
}

fn report_training(name: &str, r: &TrainResult) {
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    match r.final_rates() {
        Some((s, c)) => println!(
            "{name}: {} env steps, final success {s:.3}, collision {c:.3}",
            r.env_steps
        ),
        None => println!("{name}: {} env steps", r.env_steps),
    }
}

fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (name, common) = match &cli.command {
        Command::TrainMeta(c) => ("train-meta", c),
        Command::TrainPretrained(c) => ("train-pretrained", c),
        Command::Adapt { common, .. } => ("adapt", common),
        Command::Eval { common, .. } => ("eval", common),
        Command::Report { common, .. } => ("report", common),
    };
    let steps_key = match &cli.command {
        Command::TrainMeta(_) | Command::TrainPretrained(_) => "meta.iterations",
        _ => "eval.adapt_steps",
    };
    let cfg = resolve_config(common, steps_key)?;
    if cfg.run.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.workers)
            .build_global()
            .context("cannot size the worker pool")?;
    }
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create {}", cfg.out.display()))?;
    let setup = Setup::new(cfg.scenario.clone(), &cfg.run)?;
    let tasks = TaskSet::new(cfg.run.train_tasks.clone(), cfg.run.test_task)?;
    let seed = cfg.run.master_seed;
    let out = TrainOutput { dir: &cfg.out };

    match &cli.command {
        Command::TrainMeta(_) => report_training("meta", &train_meta(&setup, &tasks, seed, Some(out))?),
        Command::TrainPretrained(_) => {
            report_training("pretrained", &train_pretrained(&setup, &tasks, seed, Some(out))?)
        }
        Command::Adapt { checkpoint, .. } => {
            let start = load(checkpoint)?;
            let trace = adapt(
                &setup,
                &start,
                tasks.test,
                cfg.run.eval.adapt_steps,
                derive_seed(seed, "cli/adapt"),
            )?;
            if let Some(w) = &trace.warning {
                eprintln!("warning: {w}");
            }
            let mut records = Vec::new();
            for s in eval_steps(cfg.run.eval.adapt_steps, cfg.run.eval.eval_every) {
                let Some(p) = trace.params.get(s) else { break };
                let eval_seed = derive_seed(seed, &format!("cli/adapt/eval/{s}"));
                let (mut rec, _) = evaluate(
                    &setup.sim,
                    p,
                    tasks.test,
                    cfg.run.eval.episodes,
                    eval_seed,
                    cfg.run.eval.shield,
                )?;
                rec.gradient_step = s;
                println!(
                    "step {s}: success {:.3}, collision {:.3}",
                    rec.success_rate, rec.collision_rate
                );
                records.push(rec);
            }
            write_metrics(&cfg.out.join("adapt-metrics.csv"), &records)?;
            save_checkpoint(&cfg.out.join("adapted.ckpt"), trace.params.last().unwrap(), None)?;
        }
        Command::Eval {
            checkpoint,
            task,
            trace,
            ..
        } => {
            let params = load(checkpoint)?;
            let f = task.unwrap_or(tasks.test);
            let eval_seed = derive_seed(seed, "cli/eval");
            let (rec, _) = if *trace {
                let file = std::fs::File::create(cfg.out.join("trace.csv"))?;
                let mut w = TraceWriter::new(std::io::BufWriter::new(file));
                let r = evaluate_traced(
                    &setup.sim,
                    &params,
                    f,
                    cfg.run.eval.episodes,
                    eval_seed,
                    cfg.run.eval.shield,
                    &mut w,
                )?;
                w.finish()?;
                r
            } else {
                evaluate(
                    &setup.sim,
                    &params,
                    f,
                    cfg.run.eval.episodes,
                    eval_seed,
                    cfg.run.eval.shield,
                )?
            };
            println!(
                "f={f}: success {:.3}, collision {:.3}, exit missed {:.3} over {} episodes",
                rec.success_rate, rec.collision_rate, rec.exit_missed_rate, rec.episodes
            );
            write_metrics(&cfg.out.join("eval.csv"), &[rec])?;
        }
        Command::Report { meta, pretrained, .. } => {
            let opts = StudyOptions {
                release_prob: tasks.test,
                steps: cfg.run.eval.adapt_steps,
                eval_every: cfg.run.eval.eval_every,
                episodes: cfg.run.eval.episodes,
                seeds: cfg.run.eval.seeds,
                shield: cfg.run.eval.shield,
            };
            let rows = curve(&adaptation_study(&setup, &load(meta)?, &load(pretrained)?, opts, seed)?);
            emit_outputs(&rows, &cfg.out)?;
            for r in lanemeta::eval::summary(&rows) {
                println!(
                    "step {}: success meta {:.3} / pretrained {:.3}, collision meta {:.3} / pretrained {:.3}",
                    r.step, r.meta_success, r.pretrained_success, r.meta_collision, r.pretrained_collision
                );
            }
        }
    }
    manifest::write(&cfg.out, name, &cfg.run, &cfg.scenario)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
