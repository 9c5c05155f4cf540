//! Scenario and run configuration.
//!
//! Both files are TOML. Values resolve in three layers: built-in defaults,
//! then the file, then `key=value` overrides using dotted paths
//! (`ppo.horizon=256`). Keys that do not exist in the defaults are rejected
//! with an error naming the key.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{IdmParams, TrafficTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadConfig {
    pub lanes: usize,
    pub lane_width: f64,
    /// Distance from the ego start to the exit (m).
    pub exit_distance: f64,
    pub exit_lane: usize,
    pub ego_start_lane: usize,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub v_max: f64,
    /// Background vehicles are removed this far past the exit (m).
    pub removal_margin: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self {
            lanes: 3,
            lane_width: 3.75,
            exit_distance: 800.0,
            exit_lane: 0,
            ego_start_lane: 2,
            vehicle_length: 5.0,
            vehicle_width: 2.0,
            v_max: 33.3,
            removal_margin: 100.0,
        }
    }
}

impl RoadConfig {
    pub fn road_width(&self) -> f64 {
        self.lanes as f64 * self.lane_width
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        lane as f64 * self.lane_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub w_comfort: f64,
    pub w_efficiency: f64,
    pub w_safety: f64,
    pub collision_penalty: f64,
    /// Per-step time cost inside the efficiency term.
    pub time_cost: f64,
    /// Longitudinal distance below which the near-collision term is active (m).
    pub d_near: f64,
    /// Shield gap threshold (m).
    pub d_crit: f64,
    /// Jerk normaliser for the comfort term (m/s^3).
    pub jerk_max: f64,
    /// Efficiency bonus on the transition that completes the exit-lane change.
    pub success_bonus: f64,
    /// Efficiency penalty when the exit is passed without reaching the exit lane.
    pub exit_missed_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_comfort: 0.2,
            w_efficiency: 0.4,
            w_safety: 0.4,
            collision_penalty: 10.0,
            time_cost: 0.01,
            d_near: 10.0,
            d_crit: 2.0,
            jerk_max: 10.0,
            success_bonus: 50.0,
            exit_missed_penalty: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub road: RoadConfig,
    pub idm: IdmParams,
    pub dt: f64,
    pub lane_change_duration: f64,
    /// Seconds of traffic simulated before the ego is inserted.
    pub warmup_seconds: f64,
    /// Hard cap; an episode that reaches it ends as a missed exit.
    pub max_episode_steps: u32,
    pub reward: RewardConfig,
    pub task: TrafficTask,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            road: RoadConfig::default(),
            idm: IdmParams::default(),
            dt: 0.1,
            lane_change_duration: 3.0,
            warmup_seconds: 30.0,
            max_episode_steps: 1500,
            reward: RewardConfig::default(),
            task: TrafficTask {
                release_prob: 0.5,
                seed: 0,
            },
        }
    }
}

impl ScenarioConfig {
    pub fn steps_per_second(&self) -> u32 {
        (1.0 / self.dt).round() as u32
    }

    pub fn lane_change_ticks(&self) -> u32 {
        (self.lane_change_duration / self.dt).round() as u32
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.road;
        if r.lanes < 2 {
            return Err(Error::config("road.lanes", "need at least two lanes"));
        }
        if r.exit_lane >= r.lanes || r.ego_start_lane >= r.lanes {
            return Err(Error::config("road.exit_lane", "lane index out of range"));
        }
        if r.exit_lane == r.ego_start_lane {
            return Err(Error::config("road.ego_start_lane", "must differ from the exit lane"));
        }
        for (key, v) in [
            ("road.lane_width", r.lane_width),
            ("road.exit_distance", r.exit_distance),
            ("road.vehicle_length", r.vehicle_length),
            ("road.vehicle_width", r.vehicle_width),
            ("road.v_max", r.v_max),
            ("dt", self.dt),
            ("lane_change_duration", self.lane_change_duration),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, "must be finite and positive"));
            }
        }
        let sps = 1.0 / self.dt;
        if (sps - sps.round()).abs() > 1e-9 {
            return Err(Error::config("dt", "1/dt must be an integer"));
        }
        let ticks = self.lane_change_duration / self.dt;
        if (ticks - ticks.round()).abs() > 1e-9 {
            return Err(Error::config("lane_change_duration", "must be a whole number of steps"));
        }
        self.idm.validate()?;
        self.task.validate()?;
        let w = &self.reward;
        if w.d_near <= 0.0 || w.d_crit < 0.0 || w.jerk_max <= 0.0 {
            return Err(Error::config("reward", "thresholds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticMode {
    Shared,
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub critic: CriticMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            critic: CriticMode::Shared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoHyper {
    pub horizon: usize,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            horizon: 512,
            clip: 0.2,
            epochs: 10,
            minibatch: 64,
            gamma: 0.99,
            lambda: 0.95,
            lr: 1e-4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 10.0,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config("ppo.clip", "must lie in (0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("ppo.gamma", "must lie in (0, 1]"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::config("ppo.lambda", "must lie in (0, 1]"));
        }
        if self.horizon == 0 {
            return Err(Error::config("ppo.horizon", "must be positive"));
        }
        if self.minibatch == 0 || !self.horizon.is_multiple_of(self.minibatch) {
            return Err(Error::config("ppo.minibatch", "must divide the rollout horizon"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaMode {
    #[serde(alias = "fo")]
    First,
    #[serde(alias = "so")]
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaHyper {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub tasks_per_batch: usize,
    pub iterations: usize,
    pub mode: MetaMode,
    /// Linear decay of the outer learning rate to zero over the run.
    pub anneal: bool,
    pub checkpoint_every: usize,
    /// Greedy evaluation of the adapted parameters every this many iterations.
    pub log_every: usize,
    pub log_episodes: usize,
}

impl Default for MetaHyper {
    fn default() -> Self {
        Self {
            inner_lr: 1e-4,
            outer_lr: 1e-4,
            inner_steps: 1,
            tasks_per_batch: 3,
            iterations: 300,
            mode: MetaMode::First,
            anneal: true,
            checkpoint_every: 50,
            log_every: 10,
            log_episodes: 10,
        }
    }
}

impl MetaHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::config("meta.inner_lr", "must be non-negative"));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::config("meta.outer_lr", "must be positive"));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("meta.inner_steps", "must be at least 1"));
        }
        if self.tasks_per_batch == 0 {
            return Err(Error::config("meta.tasks_per_batch", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seeds: usize,
    pub adapt_steps: usize,
    pub eval_every: usize,
    pub shield: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            seeds: 5,
            adapt_steps: 40,
            eval_every: 1,
            shield: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Path of the scenario file; empty means built-in defaults.
    pub scenario: String,
    pub output_dir: String,
    pub master_seed: u64,
    pub train_tasks: Vec<f64>,
    pub test_task: f64,
    /// Shield during training and adaptation rollouts.
    pub shield: bool,
    pub workers: usize,
    pub network: NetworkConfig,
    pub ppo: PpoHyper,
    pub meta: MetaHyper,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: String::new(),
            output_dir: "out".into(),
            master_seed: 0,
            train_tasks: vec![0.3, 0.4, 0.5],
            test_task: 0.7,
            shield: true,
            workers: 0,
            network: NetworkConfig::default(),
            ppo: PpoHyper::default(),
            meta: MetaHyper::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.meta.validate()?;
        if self.train_tasks.is_empty() {
            return Err(Error::config("train_tasks", "need at least one task"));
        }
        for &f in self.train_tasks.iter().chain(std::iter::once(&self.test_task)) {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config("train_tasks", "release probability outside [0, 1]"));
            }
        }
        if self.train_tasks.contains(&self.test_task) {
            return Err(Error::config(
                "test_task",
                "test density must not be a training density",
            ));
        }
        if self.network.hidden == 0 {
            return Err(Error::config("network.hidden", "must be positive"));
        }
        if self.eval.episodes == 0 {
            return Err(Error::config("eval.episodes", "must be at least 1"));
        }
        if self.eval.eval_every == 0 {
            return Err(Error::config("eval.eval_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// Resolve a configuration from defaults, optional file text and overrides.
pub fn resolve<T>(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut tree = toml::Value::try_from(T::default()).map_err(|e| Error::config("<defaults>", e.to_string()))?;
    if let Some(text) = file_text {
        let file: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::config("<file>", e.to_string()))?;
        merge(&mut tree, file, "")?;
    }
    for (key, raw) in overrides {
        apply_override(&mut tree, key, raw)?;
    }
    tree.try_into()
        .map_err(|e: toml::de::Error| Error::config(error_key(&e), e.to_string()))
}

/// Split `key=value`.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::config(arg, "override must have the form key=value")),
    }
}

fn error_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`').nth(1).unwrap_or("<config>").to_string()
}

fn merge(base: &mut toml::Value, incoming: toml::Value, path: &str) -> Result<()> {
    match (base, incoming) {
        (toml::Value::Table(base), toml::Value::Table(incoming)) => {
            for (k, v) in incoming {
                let key = join(path, &k);
                match base.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::config(key, "unknown key")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn apply_override(tree: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| Error::config(key, "not a table"))?;
        let next = table.get_mut(*part).ok_or_else(|| Error::config(key, "unknown key"))?;
        if i + 1 == parts.len() {
            *next = parse_scalar(raw, next);
            return Ok(());
        }
        node = next;
    }
    Err(Error::config(key, "empty key"))
}

fn parse_scalar(raw: &str, current: &toml::Value) -> toml::Value {
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (parsed, current) {
        // Integers are accepted where floats are expected.
        (Some(toml::Value::Integer(i)), toml::Value::Float(_)) => toml::Value::Float(i as f64),
        (Some(v), _) => v,
        (None, _) => toml::Value::String(raw.to_string()),
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_resolution() {
        let cfg: RunConfig = resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let scen: ScenarioConfig = resolve(None, &[]).unwrap();
        assert_eq!(scen, ScenarioConfig::default());
        scen.validate().unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn three_layer_precedence() {
        let file = "[ppo]\nhorizon = 256\nclip = 0.3\n";
        let over = vec![parse_override("ppo.clip=0.1").unwrap()];
        let cfg: RunConfig = resolve(Some(file), &over).unwrap();
        // override beats file
        assert_eq!(cfg.ppo.clip, 0.1);
        // file beats default
        assert_eq!(cfg.ppo.horizon, 256);
        // default survives
        assert_eq!(cfg.ppo.epochs, 10);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = resolve::<RunConfig>(Some("[ppo]\nhorizn = 3\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("ppo.horizn"), "{err}");
        let err = resolve::<RunConfig>(None, &[parse_override("meta.alpha=1").unwrap()]).unwrap_err();
        assert!(err.to_string().contains("meta.alpha"), "{err}");
    }

    #[test]
    fn malformed_value_is_rejected() {
        let over = vec![parse_override("ppo.horizon=abc").unwrap()];
        assert!(resolve::<RunConfig>(None, &over).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn integer_override_for_float_field() {
        let over = vec![parse_override("meta.outer_lr=1").unwrap()];
        let cfg: RunConfig = resolve(None, &over).unwrap();
        assert_eq!(cfg.meta.outer_lr, 1.0);
    }

    #[test]
    fn mode_aliases() {
        let over = vec![parse_override("meta.mode=\"so\"").unwrap()];
        let cfg: RunConfig = resolve(None, &over).unwrap();
        assert_eq!(cfg.meta.mode, MetaMode::Second);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.ppo.minibatch = 100;
        assert!(cfg.validate().is_err());
        cfg = RunConfig {
            test_task: 0.4,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let scen = ScenarioConfig {
            dt: 0.3,
            ..ScenarioConfig::default()
        };
        assert!(scen.validate().is_err());
    }
}
