//! Comfort/efficiency/safety reward and the one-step safety shield.

use crate::config::{RewardConfig, ScenarioConfig};
use crate::error::Result;
use crate::sim::{
    integrate, EnvState, JointAction, LaneChangePhase, Lateral, Neighbors, Simulator, Slot, StepEvents, TerminalFlag,
    VehicleState,
};

/// Offset inside the near-collision term; also fixes its floor at -1/offset.
const NEAR_OFFSET: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardBreakdown {
    pub comfort: f64,
    pub efficiency: f64,
    pub safety: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(comfort: f64, efficiency: f64, safety: f64, w: &RewardConfig) -> Self {
        Self {
            comfort,
            efficiency,
            safety,
            total: w.w_comfort * comfort + w.w_efficiency * efficiency + w.w_safety * safety,
        }
    }
}

/// `F(C_e, C_i) = -1 / (|P_e - P_i| + 0.1)` on the longitudinal separation.
pub fn near_collision_term(separation: f64) -> f64 {
    -1.0 / (separation.abs() + NEAR_OFFSET)
}

/// Near-collision penalty from the separations to C0..C3 (`None` = absent).
///
/// | lateral | active vehicles |
/// |---------|-----------------|
/// | keep    | C1              |
/// | change  | min over C1, C3 |
/// | abort   | min over C0, C2 |
///
/// Vehicles at or beyond `d_near` contribute 0.
pub fn penalty_from_separations(lateral: Lateral, near: &[Option<f64>; 4], d_near: f64) -> f64 {
    let term = |slot: usize| match near[slot] {
        Some(d) if d.abs() < d_near => near_collision_term(d),
        _ => 0.0,
    };
    match lateral {
        Lateral::Keep => term(1),
        Lateral::Change => term(1).min(term(3)),
        Lateral::Abort => term(0).min(term(2)),
    }
}

pub fn near_collision_penalty(lateral: Lateral, ego: &VehicleState, nb: &Neighbors, d_near: f64) -> f64 {
    let sep = |slot| nb.get(slot).map(|v: VehicleState| (v.long_pos - ego.long_pos).abs());
    let near = [
        sep(Slot::CurrentLeader),
        sep(Slot::TargetLeader),
        sep(Slot::CurrentFollower),
        sep(Slot::TargetFollower),
    ];
    penalty_from_separations(lateral, &near, d_near)
}

/// Reward for the transition that produced `next` with `events`.
///
/// The near-collision row follows the ego's lateral mode after the step
/// (changing counts as the change row even when the agent held position).
pub fn compute_reward(next: &EnvState, events: &StepEvents, cfg: &ScenarioConfig) -> RewardBreakdown {
    let w = &cfg.reward;
    let road = &cfg.road;
    let ego = &next.ego.base;

    let comfort = (-(events.long_jerk.abs() + events.lat_jerk.abs()) / w.jerk_max).clamp(-1.0, 0.0);

    let lateral_error = (ego.lat_pos - road.lane_center(road.exit_lane)).abs() / road.road_width();
    let mut efficiency = -lateral_error.min(1.0) - w.time_cost + (ego.speed / road.v_max).clamp(0.0, 1.0);
    match next.terminal {
        TerminalFlag::Success => efficiency += w.success_bonus,
        TerminalFlag::ExitMissed => efficiency -= w.exit_missed_penalty,
        _ => {}
    }

    let mut safety = penalty_from_separations(events.lateral_mode, &events.near, w.d_near) / 10.0;
    if events.collision {
        safety -= w.collision_penalty;
    }
    RewardBreakdown::new(comfort, efficiency, safety, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RiskLabel {
    pub catastrophic: bool,
    pub risk_vehicle: Option<Slot>,
}

impl RiskLabel {
    pub const SAFE: RiskLabel = RiskLabel {
        catastrophic: false,
        risk_vehicle: None,
    };
}

/// Outcome of simulating one action for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookahead {
    /// Smallest bumper-to-bumper gap to a relevant C0..C3 vehicle
    /// (negative on overlap, infinite when none is relevant).
    pub min_gap: f64,
    pub closest: Option<Slot>,
}

/// One-step lookahead with the other vehicles' accelerations frozen.
///
/// Current-lane vehicles (C0, C2) are always relevant. Target-lane vehicles
/// (C1, C3) become relevant once the ego claims the target lane: when it
/// changes, or is anywhere inside a maneuver after the step.
pub fn lookahead(sim: &Simulator, state: &EnvState, nb: &Neighbors, action: JointAction) -> Result<Lookahead> {
    let cfg = sim.config();
    let update = sim.advance_ego(state, nb, action)?;
    let ego = update.ego;
    let claims_target = ego.phase != LaneChangePhase::None || ego.base.lane != state.ego.base.lane;
    let mut best = Lookahead {
        min_gap: f64::INFINITY,
        closest: None,
    };
    for slot in Slot::RISK {
        let target_slot = matches!(slot, Slot::TargetLeader | Slot::TargetFollower);
        if target_slot && !claims_target {
            continue;
        }
        if let Some(v) = nb.get(slot) {
            let (pos, _) = integrate(v.long_pos, v.speed, v.accel, cfg.dt);
            let gap = (pos - ego.base.long_pos).abs() - cfg.road.vehicle_length;
            if gap < best.min_gap {
                best = Lookahead {
                    min_gap: gap,
                    closest: Some(slot),
                };
            }
        }
    }
    Ok(best)
}

/// Replace a catastrophic proposal with the safest alternative.
///
/// Returns the executed action and the risk label of the *proposed* one.
/// Among safe actions the one with the largest lookahead gap wins; ties go
/// to lateral keep, then to the lower index. If nothing is safe the
/// proposal passes through.
pub fn shield(sim: &Simulator, state: &EnvState, proposed: JointAction) -> Result<(JointAction, RiskLabel)> {
    let d_crit = sim.config().reward.d_crit;
    let nb = sim.surrounding(state);
    let look = lookahead(sim, state, &nb, proposed)?;
    if look.min_gap >= d_crit {
        return Ok((proposed, RiskLabel::SAFE));
    }
    let label = RiskLabel {
        catastrophic: true,
        risk_vehicle: look.closest,
    };
    let mut best: Option<(JointAction, f64)> = None;
    for action in JointAction::ALL {
        let gap = lookahead(sim, state, &nb, action)?.min_gap;
        if gap < d_crit {
            continue;
        }
        let better = match best {
            None => true,
            Some((b, bg)) => {
                gap > bg || (gap == bg && action.lateral() == Lateral::Keep && b.lateral() != Lateral::Keep)
            }
        };
        if better {
            best = Some((action, gap));
        }
    }
    Ok((best.map_or(proposed, |(a, _)| a), label))
}
