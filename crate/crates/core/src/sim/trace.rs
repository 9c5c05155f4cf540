//! Episode trace export.
//!
//! One CSV row per vehicle per step, ego first:
//! `episode,step,sim_time,id,role,lane,long_pos,lat_pos,speed,event`. `event` is
//! empty except on the ego row of the final step, where it holds the
//! terminal flag (`success`, `collision`, `exit_missed`).

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::EnvState;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: u32,
    pub step: u32,
    pub sim_time: f64,
    pub id: u32,
    pub role: String,
    pub lane: usize,
    pub long_pos: f64,
    pub lat_pos: f64,
    pub speed: f64,
    pub event: String,
}

pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(writer: W) -> Self {
        Self {
            inner: csv::Writer::from_writer(writer),
        }
    }

    pub fn record(&mut self, episode: u32, state: &EnvState) -> Result<()> {
        let event = match state.terminal {
            super::TerminalFlag::Running => String::new(),
            other => other.as_str().to_string(),
        };
        let ego = &state.ego.base;
        self.inner.serialize(TraceRow {
            episode,
            step: state.step_count,
            sim_time: state.sim_time,
            id: ego.id,
            role: "ego".into(),
            lane: ego.lane,
            long_pos: ego.long_pos,
            lat_pos: ego.lat_pos,
            speed: ego.speed,
            event,
        })?;
        for v in &state.others {
            self.inner.serialize(TraceRow {
                episode,
                step: state.step_count,
                sim_time: state.sim_time,
                id: v.id,
                role: "other".into(),
                lane: v.lane,
                long_pos: v.long_pos,
                lat_pos: v.lat_pos,
                speed: v.speed,
                event: String::new(),
            })?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| crate::Error::Io(e.into_error()))
    }
}
