use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gap used when a vehicle has no leader; large enough that the
/// interaction term vanishes below any double-precision resolution.
pub const NO_LEADER_GAP: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub min_gap: f64,
    pub time_headway: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub accel_exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 33.3,
            min_gap: 2.0,
            time_headway: 1.5,
            max_accel: 2.0,
            comfort_decel: 3.0,
            accel_exponent: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("idm.desired_speed", self.desired_speed),
            ("idm.min_gap", self.min_gap),
            ("idm.time_headway", self.time_headway),
            ("idm.max_accel", self.max_accel),
            ("idm.comfort_decel", self.comfort_decel),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, "must be finite and positive"));
            }
        }
        if !(self.accel_exponent.is_finite() && self.accel_exponent >= 1.0) {
            return Err(Error::config("idm.accel_exponent", "must be at least 1"));
        }
        Ok(())
    }

    /// Desired dynamic gap `s*`.
    pub fn desired_gap(&self, v: f64, v_lead: f64) -> f64 {
        let dv = v - v_lead;
        self.min_gap + v * self.time_headway + v * dv / (2.0 * (self.max_accel * self.comfort_decel).sqrt())
    }
}

/// Intelligent-driver-model acceleration, clamped to `[-2b, a_max]`.
///
/// A missing leader is encoded as `gap = NO_LEADER_GAP`, `v_lead = v`.
pub fn idm_accel(v: f64, v_lead: f64, gap: f64, p: &IdmParams) -> Result<f64> {
    if !(v.is_finite() && v_lead.is_finite() && gap.is_finite()) {
        return Err(Error::InvalidKinematics(format!("v={v}, v_lead={v_lead}, gap={gap}")));
    }
    if gap <= 0.0 {
        return Err(Error::InvalidKinematics(format!("non-positive gap {gap}")));
    }
    let free = 1.0 - (v / p.desired_speed).powf(p.accel_exponent);
    let interaction = (p.desired_gap(v, v_lead) / gap).powi(2);
    let a = p.max_accel * (free - interaction);
    Ok(a.clamp(-2.0 * p.comfort_decel, p.max_accel))
}
