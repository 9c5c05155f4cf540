//! Episode-level environment interface used by rollouts and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::reward::{compute_reward, shield, RewardBreakdown};
use crate::sim::{EnvState, JointAction, Observation, Simulator, TerminalFlag, TrafficTask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    pub outcome: TerminalFlag,
}

impl Transition {
    pub fn done(&self) -> bool {
        self.outcome != TerminalFlag::Running
    }
}

pub trait Environment {
    fn reset(&mut self) -> Result<Observation>;
    /// Observation of the running episode, if there is one.
    fn current(&self) -> Option<Observation>;
    fn step(&mut self, action: JointAction) -> Result<Transition>;
    /// Action actually executed for `proposed` when the shield is on.
    fn shield(&self, proposed: JointAction) -> Result<JointAction> {
        Ok(proposed)
    }
}

/// The highway simulator on one traffic task.
///
/// The random stream is seeded from `task.seed`; episodes continue the same
/// stream, so a fresh `HighwayEnv` replays the same sequence of episodes.
#[derive(Debug, Clone)]
pub struct HighwayEnv {
    sim: Simulator,
    task: TrafficTask,
    rng: ChaCha8Rng,
    state: Option<EnvState>,
}

impl HighwayEnv {
    pub fn new(sim: Simulator, task: TrafficTask) -> Result<Self> {
        task.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(task.seed),
            sim,
            task,
            state: None,
        })
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    /// Continue from an explicit state instead of a fresh reset.
    pub fn set_state(&mut self, state: EnvState) {
        self.state = Some(state);
    }

    pub fn task(&self) -> &TrafficTask {
        &self.task
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }
}

impl Environment for HighwayEnv {
    fn reset(&mut self) -> Result<Observation> {
        let state = self.sim.reset(&self.task, &mut self.rng)?;
        let obs = self.sim.observe(&state);
        self.state = Some(state);
        Ok(obs)
    }

    fn current(&self) -> Option<Observation> {
        self.state
            .as_ref()
            .filter(|s| s.terminal == TerminalFlag::Running)
            .map(|s| self.sim.observe(s))
    }

    fn step(&mut self, action: JointAction) -> Result<Transition> {
        let state = self.state.as_ref().ok_or(Error::EpisodeFinished)?;
        let (next, events) = self.sim.step(state, action, &self.task, &mut self.rng)?;
        let reward = compute_reward(&next, &events, self.sim.config());
        let t = Transition {
            observation: self.sim.observe(&next),
            reward,
            outcome: next.terminal,
        };
        self.state = Some(next);
        Ok(t)
    }

    fn shield(&self, proposed: JointAction) -> Result<JointAction> {
        let state = self.state.as_ref().ok_or(Error::EpisodeFinished)?;
        Ok(shield(&self.sim, state, proposed)?.0)
    }
}
