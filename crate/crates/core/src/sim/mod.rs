//! Three-lane highway simulator.
//!
//! Background vehicles follow the IDM in their own lane and never change
//! lanes. The ego vehicle starts in `road.ego_start_lane` at the entry and
//! must reach `road.exit_lane` before `road.exit_distance`. Lane indices grow
//! away from the exit lane, and `lat_pos` is measured from the lane-0
//! centerline.
//!
//! Positions are front-bumper positions; a vehicle occupies
//! `[long_pos - length, long_pos] x [lat_pos - width/2, lat_pos + width/2]`.

mod idm;
mod neighbors;
mod trace;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use idm::{idm_accel, IdmParams, NO_LEADER_GAP};
pub use neighbors::{surrounding, Neighbors, Slot};
pub use trace::{TraceRow, TraceWriter};

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};

pub const OBS_DIM: usize = 21;
pub const NUM_ACTIONS: usize = 6;

/// Scale for relative longitudinal positions in the observation (m).
const OBS_POS_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficTask {
    /// Probability that a vehicle is released at the entry in a given second.
    pub release_prob: f64,
    pub seed: u64,
}

impl TrafficTask {
    pub fn new(release_prob: f64, seed: u64) -> Result<Self> {
        let task = Self { release_prob, seed };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.release_prob) {
            return Err(Error::config(
                "task.release_prob",
                format!("{} outside [0, 1]", self.release_prob),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub id: u32,
    pub lane: usize,
    pub long_pos: f64,
    pub lat_pos: f64,
    pub speed: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LaneChangePhase {
    None,
    Changing,
    Aborting,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoState {
    pub base: VehicleState,
    /// Destination lane of the current (or most recent) maneuver.
    pub target_lane: usize,
    pub phase: LaneChangePhase,
    /// Maneuver progress in whole simulation steps.
    pub lc_ticks: u32,
    pub lc_total_ticks: u32,
    pub prev_accel: f64,
    pub prev_lat_speed: f64,
    pub prev_lat_accel: f64,
}

impl EgoState {
    pub fn lc_progress(&self) -> f64 {
        self.lc_ticks as f64 / self.lc_total_ticks as f64
    }

    /// Lane the ego is moving into, or would move into with a change action.
    pub fn maneuver_lane(&self, exit_lane: usize) -> Option<usize> {
        if self.phase != LaneChangePhase::None {
            Some(self.target_lane)
        } else {
            next_lane_toward(self.base.lane, exit_lane)
        }
    }

    /// Lanes physically claimed by the ego body.
    pub fn occupies(&self, lane: usize) -> bool {
        lane == self.base.lane || (self.phase != LaneChangePhase::None && lane == self.target_lane)
    }
}

fn next_lane_toward(lane: usize, exit_lane: usize) -> Option<usize> {
    use std::cmp::Ordering::*;
    match lane.cmp(&exit_lane) {
        Greater => Some(lane - 1),
        Less => Some(lane + 1),
        Equal => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalFlag {
    Running,
    Success,
    Collision,
    ExitMissed,
}

impl TerminalFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminalFlag::Running => "running",
            TerminalFlag::Success => "success",
            TerminalFlag::Collision => "collision",
            TerminalFlag::ExitMissed => "exit_missed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub ego: EgoState,
    pub others: Vec<VehicleState>,
    pub sim_time: f64,
    pub step_count: u32,
    pub terminal: TerminalFlag,
    pub next_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lateral {
    Keep,
    Change,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Longitudinal {
    CurrentLeader,
    TargetLeader,
}

/// Factorised action: `index = 2 * lateral + longitudinal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JointAction(u8);

impl JointAction {
    pub const ALL: [JointAction; NUM_ACTIONS] = [
        JointAction(0),
        JointAction(1),
        JointAction(2),
        JointAction(3),
        JointAction(4),
        JointAction(5),
    ];

    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_ACTIONS {
            Ok(JointAction(index as u8))
        } else {
            Err(Error::Invalid(format!("action index {index} out of range")))
        }
    }

    pub fn from_parts(lateral: Lateral, longitudinal: Longitudinal) -> Self {
        let lat = match lateral {
            Lateral::Keep => 0,
            Lateral::Change => 1,
            Lateral::Abort => 2,
        };
        let lon = match longitudinal {
            Longitudinal::CurrentLeader => 0,
            Longitudinal::TargetLeader => 1,
        };
        JointAction(lat * 2 + lon)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn lateral(self) -> Lateral {
        match self.0 / 2 {
            0 => Lateral::Keep,
            1 => Lateral::Change,
            _ => Lateral::Abort,
        }
    }

    pub fn longitudinal(self) -> Longitudinal {
        if self.0.is_multiple_of(2) {
            Longitudinal::CurrentLeader
        } else {
            Longitudinal::TargetLeader
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Per-step quantities consumed by the reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvents {
    pub collision: bool,
    /// `|long_pos(ego) - long_pos(C_i)|` after the step for C0..C3, if present.
    pub near: [Option<f64>; 4],
    pub long_jerk: f64,
    pub lat_jerk: f64,
    /// Lateral mode the ego is in after the step, used to select the
    /// near-collision row: none -> keep, changing -> change, aborting -> abort.
    pub lateral_mode: Lateral,
}

/// Ego kinematics after one step, shared by the simulator and the shield.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoUpdate {
    pub ego: EgoState,
    pub long_jerk: f64,
    pub lat_jerk: f64,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: ScenarioConfig,
}

impl Simulator {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    /// Fresh episode: warm up background traffic, then insert the ego at the
    /// entry of its start lane.
    pub fn reset<R: Rng>(&self, task: &TrafficTask, rng: &mut R) -> Result<EnvState> {
        let road = &self.cfg.road;
        let idm = &self.cfg.idm;
        let sps = self.cfg.steps_per_second();
        let mut others = Vec::new();
        let mut next_id = 1u32;

        let warmup_steps = (self.cfg.warmup_seconds * sps as f64).round() as u32;
        let extra_limit = 60 * sps;
        let mut step = 0u32;
        let ego_speed = rng.gen_range(0.7..=1.0) * idm.desired_speed;
        loop {
            let entry_free = self.entry_free(&others, None, road.ego_start_lane, ego_speed);
            if step >= warmup_steps && (entry_free || step >= warmup_steps + extra_limit) {
                break;
            }
            self.advance_traffic(&mut others, None)?;
            step += 1;
            if step.is_multiple_of(sps) {
                self.spawn_into(rng, task, &mut others, None, &mut next_id);
            }
        }
        // Anything still blocking the entry is dropped.
        let lane = road.ego_start_lane;
        let clear = road.vehicle_length + idm.min_gap;
        others.retain(|v| !(v.lane == lane && v.long_pos < clear));

        let mut base = VehicleState {
            id: 0,
            lane,
            long_pos: 0.0,
            lat_pos: road.lane_center(lane),
            speed: ego_speed,
            accel: 0.0,
        };
        let leader = others
            .iter()
            .filter(|v| v.lane == lane && v.long_pos > 0.0)
            .min_by(|a, b| a.long_pos.total_cmp(&b.long_pos));
        base.accel = self.accel_behind(&base, leader)?;
        let ego = EgoState {
            base,
            target_lane: next_lane_toward(lane, road.exit_lane).unwrap_or(lane),
            phase: LaneChangePhase::None,
            lc_ticks: 0,
            lc_total_ticks: self.cfg.lane_change_ticks(),
            prev_accel: base.accel,
            prev_lat_speed: 0.0,
            prev_lat_accel: 0.0,
        };
        Ok(EnvState {
            ego,
            others,
            sim_time: 0.0,
            step_count: 0,
            terminal: TerminalFlag::Running,
            next_id,
        })
    }

    /// One release opportunity at the entry.
    ///
    /// Exactly three random draws are consumed per call (release, lane,
    /// speed) whether or not a vehicle is inserted.
    pub fn spawn_traffic<R: Rng>(&self, rng: &mut R, task: &TrafficTask, state: &mut EnvState) {
        let ego = state.ego;
        self.spawn_into(rng, task, &mut state.others, Some(&ego), &mut state.next_id);
    }

    fn spawn_into<R: Rng>(
        &self,
        rng: &mut R,
        task: &TrafficTask,
        others: &mut Vec<VehicleState>,
        ego: Option<&EgoState>,
        next_id: &mut u32,
    ) {
        let release = rng.gen::<f64>() < task.release_prob;
        let lane = rng.gen_range(0..self.cfg.road.lanes);
        let speed = rng.gen_range(0.7..=1.0) * self.cfg.idm.desired_speed;
        if release && self.entry_free(others, ego, lane, speed) {
            others.push(VehicleState {
                id: *next_id,
                lane,
                long_pos: 0.0,
                lat_pos: self.cfg.road.lane_center(lane),
                speed,
                accel: 0.0,
            });
            *next_id += 1;
        }
    }

    /// The entry of `lane` is free when every vehicle in it leaves at least
    /// the IDM equilibrium gap in front of a vehicle released at `speed`.
    fn entry_free(&self, others: &[VehicleState], ego: Option<&EgoState>, lane: usize, speed: f64) -> bool {
        let need = self.cfg.idm.min_gap + speed * self.cfg.idm.time_headway;
        let len = self.cfg.road.vehicle_length;
        let blocked = |pos: f64| pos - len < need;
        if others.iter().any(|v| v.lane == lane && blocked(v.long_pos)) {
            return false;
        }
        !matches!(ego, Some(e) if e.occupies(lane) && blocked(e.base.long_pos))
    }

    fn accel_behind(&self, follower: &VehicleState, leader: Option<&VehicleState>) -> Result<f64> {
        let (gap, v_lead) = match leader {
            Some(l) => (
                (l.long_pos - self.cfg.road.vehicle_length - follower.long_pos).max(0.1),
                l.speed,
            ),
            None => (NO_LEADER_GAP, follower.speed),
        };
        idm_accel(follower.speed, v_lead, gap, &self.cfg.idm)
    }

    /// Synchronous IDM update of background vehicles; the ego (if any) acts
    /// as a leader in every lane it occupies.
    fn advance_traffic(&self, others: &mut Vec<VehicleState>, ego: Option<&EgoState>) -> Result<()> {
        let lanes = self.cfg.road.lanes;
        let dt = self.cfg.dt;
        // per lane: (long_pos, index into others or usize::MAX for the ego)
        let mut order: Vec<Vec<(f64, usize)>> = vec![Vec::new(); lanes];
        for (i, v) in others.iter().enumerate() {
            order[v.lane].push((v.long_pos, i));
        }
        if let Some(e) = ego {
            for (lane, list) in order.iter_mut().enumerate() {
                if e.occupies(lane) {
                    list.push((e.base.long_pos, usize::MAX));
                }
            }
        }
        let mut accels = vec![0.0; others.len()];
        for list in order.iter_mut() {
            list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for k in 0..list.len() {
                let idx = list[k].1;
                if idx == usize::MAX {
                    continue;
                }
                let leader = list[..k]
                    .iter()
                    .rev()
                    .find(|(pos, _)| *pos > others[idx].long_pos)
                    .map(|&(_, j)| if j == usize::MAX { ego.unwrap().base } else { others[j] });
                accels[idx] = self.accel_behind(&others[idx], leader.as_ref())?;
            }
        }
        for (v, a) in others.iter_mut().zip(accels) {
            let (pos, speed) = integrate(v.long_pos, v.speed, a, dt);
            v.long_pos = pos;
            v.speed = speed;
            v.accel = a;
        }
        let limit = self.cfg.road.exit_distance + self.cfg.road.removal_margin;
        others.retain(|v| v.long_pos <= limit);
        Ok(())
    }

    /// Ego kinematics for `action` from `state`. Background vehicles are not
    /// touched, so the shield reuses this for its lookahead.
    pub fn advance_ego(&self, state: &EnvState, nb: &Neighbors, action: JointAction) -> Result<EgoUpdate> {
        let road = &self.cfg.road;
        let dt = self.cfg.dt;
        let old = state.ego;
        let mut ego = old;

        let leader = match action.longitudinal() {
            Longitudinal::CurrentLeader => nb.current_leader,
            Longitudinal::TargetLeader => {
                if old.maneuver_lane(road.exit_lane).is_some() {
                    nb.target_leader
                } else {
                    nb.current_leader
                }
            }
        };
        let accel = self.accel_behind(&old.base, leader.as_ref())?;
        let (pos, speed) = integrate(old.base.long_pos, old.base.speed, accel, dt);
        ego.base.long_pos = pos;
        ego.base.speed = speed;
        ego.base.accel = accel;

        match (action.lateral(), old.phase) {
            (Lateral::Change, LaneChangePhase::None) => {
                if let Some(target) = next_lane_toward(old.base.lane, road.exit_lane) {
                    ego.target_lane = target;
                    ego.phase = LaneChangePhase::Changing;
                    ego.lc_ticks = 1;
                }
            }
            (Lateral::Change, _) => {
                ego.phase = LaneChangePhase::Changing;
                ego.lc_ticks = old.lc_ticks + 1;
            }
            (Lateral::Abort, LaneChangePhase::None) | (Lateral::Keep, _) => {}
            (Lateral::Abort, _) => {
                ego.phase = LaneChangePhase::Aborting;
                ego.lc_ticks = old.lc_ticks - 1;
            }
        }
        if ego.phase != LaneChangePhase::None {
            if ego.lc_ticks >= ego.lc_total_ticks {
                ego.lc_ticks = ego.lc_total_ticks;
                ego.base.lane = ego.target_lane;
                ego.phase = LaneChangePhase::None;
            } else if ego.lc_ticks == 0 {
                ego.phase = LaneChangePhase::None;
            }
        }
        ego.base.lat_pos = self.lateral_position(&ego);

        let lat_speed = (ego.base.lat_pos - old.base.lat_pos) / dt;
        let lat_accel = (lat_speed - old.prev_lat_speed) / dt;
        let lat_jerk = (lat_accel - old.prev_lat_accel) / dt;
        let long_jerk = (accel - old.prev_accel) / dt;
        ego.prev_accel = accel;
        ego.prev_lat_speed = lat_speed;
        ego.prev_lat_accel = lat_accel;
        Ok(EgoUpdate {
            ego,
            long_jerk,
            lat_jerk,
        })
    }

    fn lateral_position(&self, ego: &EgoState) -> f64 {
        let road = &self.cfg.road;
        let from = road.lane_center(ego.base.lane);
        if ego.phase == LaneChangePhase::None {
            return from;
        }
        let to = road.lane_center(ego.target_lane);
        from + smoothstep(ego.lc_progress()) * (to - from)
    }

    pub fn step<R: Rng>(
        &self,
        state: &EnvState,
        action: JointAction,
        task: &TrafficTask,
        rng: &mut R,
    ) -> Result<(EnvState, StepEvents)> {
        if state.terminal != TerminalFlag::Running {
            return Err(Error::EpisodeFinished);
        }
        let nb = self.surrounding(state);
        let update = self.advance_ego(state, &nb, action)?;

        let mut next = state.clone();
        self.advance_traffic(&mut next.others, Some(&state.ego))?;
        next.ego = update.ego;
        next.step_count += 1;
        next.sim_time = next.step_count as f64 * self.cfg.dt;

        let collision = self.ego_collides(&next);
        if !collision && next.step_count.is_multiple_of(self.cfg.steps_per_second()) {
            self.spawn_traffic(rng, task, &mut next);
        }

        let road = &self.cfg.road;
        let ego = &next.ego;
        next.terminal = if collision {
            TerminalFlag::Collision
        } else if ego.phase == LaneChangePhase::None
            && ego.base.lane == road.exit_lane
            && ego.base.long_pos < road.exit_distance
        {
            TerminalFlag::Success
        } else if ego.base.long_pos >= road.exit_distance || next.step_count >= self.cfg.max_episode_steps {
            TerminalFlag::ExitMissed
        } else {
            TerminalFlag::Running
        };

        let after = self.surrounding(&next);
        let dist = |v: Option<VehicleState>| v.map(|v| (v.long_pos - ego.base.long_pos).abs());
        let events = StepEvents {
            collision,
            near: [
                dist(after.current_leader),
                dist(after.target_leader),
                dist(after.current_follower),
                dist(after.target_follower),
            ],
            long_jerk: update.long_jerk,
            lat_jerk: update.lat_jerk,
            lateral_mode: match ego.phase {
                LaneChangePhase::None => Lateral::Keep,
                LaneChangePhase::Changing => Lateral::Change,
                LaneChangePhase::Aborting => Lateral::Abort,
            },
        };
        Ok((next, events))
    }

    pub fn ego_collides(&self, state: &EnvState) -> bool {
        let road = &self.cfg.road;
        let e = &state.ego.base;
        state.others.iter().any(|v| {
            let long_overlap = (v.long_pos - e.long_pos).abs() < road.vehicle_length;
            let lat_overlap = (v.lat_pos - e.lat_pos).abs() < road.vehicle_width;
            long_overlap && lat_overlap
        })
    }

    pub fn surrounding(&self, state: &EnvState) -> Neighbors {
        surrounding(state, self.cfg.road.exit_lane, self.cfg.road.lanes)
    }

    /// 21-element observation; every entry lies in `[-1, 1]`.
    ///
    /// Layout: ego speed / v_max, ego lateral position / road width,
    /// remaining distance / exit distance, then (relative position / 100,
    /// relative speed / v_max, presence) for the leader and follower in the
    /// left, current and right lanes. "Left" is the lane with the next
    /// higher index.
    pub fn observe(&self, state: &EnvState) -> Observation {
        let road = &self.cfg.road;
        let ego = &state.ego.base;
        let mut obs = [0.0; OBS_DIM];
        obs[0] = (ego.speed / road.v_max).clamp(-1.0, 1.0);
        obs[1] = (ego.lat_pos / road.road_width()).clamp(-1.0, 1.0);
        obs[2] = ((road.exit_distance - ego.long_pos) / road.exit_distance).clamp(-1.0, 1.0);
        let lanes = [
            ego.lane.checked_add(1).filter(|&l| l < road.lanes),
            Some(ego.lane),
            ego.lane.checked_sub(1),
        ];
        for (k, lane) in lanes.into_iter().enumerate() {
            let (leader, follower) = match lane {
                Some(l) => neighbors::nearest_in_lane(&state.others, l, ego.long_pos),
                None => (None, None),
            };
            let base = 3 + k * 6;
            self.encode_slot(&mut obs[base..base + 3], ego, leader, 1.0);
            self.encode_slot(&mut obs[base + 3..base + 6], ego, follower, -1.0);
        }
        Observation(obs)
    }

    fn encode_slot(&self, out: &mut [f64], ego: &VehicleState, other: Option<VehicleState>, absent: f64) {
        match other {
            Some(v) => {
                out[0] = ((v.long_pos - ego.long_pos) / OBS_POS_SCALE).clamp(-1.0, 1.0);
                out[1] = ((v.speed - ego.speed) / self.cfg.road.v_max).clamp(-1.0, 1.0);
                out[2] = 1.0;
            }
            None => {
                out[0] = absent;
                out[1] = 0.0;
                out[2] = 0.0;
            }
        }
    }
}

/// Ballistic update with a hard stop at zero speed.
pub fn integrate(pos: f64, speed: f64, accel: f64, dt: f64) -> (f64, f64) {
    let v_next = speed + accel * dt;
    if v_next >= 0.0 {
        (pos + speed * dt + 0.5 * accel * dt * dt, v_next)
    } else {
        // stops inside the step
        (pos + speed * speed / (-2.0 * accel), 0.0)
    }
}

fn smoothstep(p: f64) -> f64 {
    p * p * (3.0 - 2.0 * p)
}
