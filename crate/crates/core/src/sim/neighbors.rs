use super::{EnvState, VehicleState};

/// Named neighbour slots. C0..C3 follow the near-collision table naming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    /// C0
    CurrentLeader,
    /// C1
    TargetLeader,
    /// C2
    CurrentFollower,
    /// C3
    TargetFollower,
    FarLeader,
    FarFollower,
}

impl Slot {
    pub const RISK: [Slot; 4] = [
        Slot::CurrentLeader,
        Slot::TargetLeader,
        Slot::CurrentFollower,
        Slot::TargetFollower,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Slot::CurrentLeader => "C0",
            Slot::TargetLeader => "C1",
            Slot::CurrentFollower => "C2",
            Slot::TargetFollower => "C3",
            Slot::FarLeader => "far_leader",
            Slot::FarFollower => "far_follower",
        }
    }
}

/// Nearest vehicles around the ego. The target lane is the lane of the
/// ongoing maneuver (or the next lane toward the exit); the far lane is the
/// adjacent lane on the opposite side.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Neighbors {
    pub current_leader: Option<VehicleState>,
    pub target_leader: Option<VehicleState>,
    pub current_follower: Option<VehicleState>,
    pub target_follower: Option<VehicleState>,
    pub far_leader: Option<VehicleState>,
    pub far_follower: Option<VehicleState>,
}

impl Neighbors {
    pub fn get(&self, slot: Slot) -> Option<VehicleState> {
        match slot {
            Slot::CurrentLeader => self.current_leader,
            Slot::TargetLeader => self.target_leader,
            Slot::CurrentFollower => self.current_follower,
            Slot::TargetFollower => self.target_follower,
            Slot::FarLeader => self.far_leader,
            Slot::FarFollower => self.far_follower,
        }
    }
}

/// Leader has strictly greater `long_pos`, follower strictly smaller; among
/// equally near candidates the lower id wins.
pub(crate) fn nearest_in_lane(
    others: &[VehicleState],
    lane: usize,
    pos: f64,
) -> (Option<VehicleState>, Option<VehicleState>) {
    let mut leader: Option<VehicleState> = None;
    let mut follower: Option<VehicleState> = None;
    for v in others.iter().filter(|v| v.lane == lane) {
        let d = v.long_pos - pos;
        if d > 0.0 {
            let better = match leader {
                None => true,
                Some(l) => {
                    let dl = l.long_pos - pos;
                    d < dl || (d == dl && v.id < l.id)
                }
            };
            if better {
                leader = Some(*v);
            }
        } else if d < 0.0 {
            let better = match follower {
                None => true,
                Some(f) => {
                    let df = pos - f.long_pos;
                    -d < df || (-d == df && v.id < f.id)
                }
            };
            if better {
                follower = Some(*v);
            }
        }
    }
    (leader, follower)
}

pub fn surrounding(state: &EnvState, exit_lane: usize, lanes: usize) -> Neighbors {
    let ego = &state.ego;
    let pos = ego.base.long_pos;
    let lane = ego.base.lane;
    let (current_leader, current_follower) = nearest_in_lane(&state.others, lane, pos);
    let target = ego.maneuver_lane(exit_lane);
    let (target_leader, target_follower) = match target {
        Some(t) => nearest_in_lane(&state.others, t, pos),
        None => (None, None),
    };
    let far = match target {
        Some(t) if t < lane => Some(lane + 1).filter(|&l| l < lanes),
        Some(_) => lane.checked_sub(1),
        None => None,
    };
    let (far_leader, far_follower) = match far {
        Some(f) => nearest_in_lane(&state.others, f, pos),
        None => (None, None),
    };
    Neighbors {
        current_leader,
        target_leader,
        current_follower,
        target_follower,
        far_leader,
        far_follower,
    }
}
