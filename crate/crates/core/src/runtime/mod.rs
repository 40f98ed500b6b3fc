//! Dual-stream execution engine.
//!
//! A discrete-event scheduler advances simulated time through a 10 Hz
//! perception stream, whose results appear after an inference latency, and a
//! 50 Hz control stream that never waits for perception. The two streams are
//! joined by a sliding-window spline over joint-space anchors and a
//! timestamp gate that pairs each frame with the nearest robot state. A
//! synchronous baseline mode, in which control waits for each result, is
//! provided for comparison.

mod engine;
mod softsync;
mod spline;
mod trace;

use crate::textio::LineError;

pub use engine::{
    flip_goal, latest_anchor_frame_age, resting_pose, run_episode, settle_pose, EpisodeSetup, RuntimeConfig,
};
pub use softsync::{soft_sync, SyncPair, SyncStatus, TimestampedSample};
pub use spline::{SplineSample, SplineWindow};
pub use trace::{parse_trace, write_trace, ControlRecord, EpisodeTrace, EventRecord, TraceHeader, VisionRecord};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuntimeError {
    #[error("spline window has {anchors} anchors, needs 4")]
    ColdWindow { anchors: usize },
    #[error("t = {t} lies outside the evaluation segment [{start}, {end}]")]
    OutOfSegment { t: f64, start: f64, end: f64 },
    #[error("state buffer is empty")]
    EmptyBuffer,
    #[error("invalid runtime configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("t = {0} s lies outside the recorded episode")]
    OutsideEpisode(f64),
    #[error(transparent)]
    Parse(#[from] LineError),
}

/// Control scheduling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Control ticks stream spline commands regardless of perception.
    Async,
    /// Each command waits for the in-flight perception result.
    Sync,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Async => "Async",
            Mode::Sync => "Sync",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Async" => Some(Mode::Async),
            "Sync" => Some(Mode::Sync),
            _ => None,
        }
    }
}

/// Stream timing, all in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyConfig {
    pub t_inf_us: i64,
    pub perception_period_us: i64,
    pub control_period_us: i64,
    pub eps_sync_us: i64,
    /// Bound of the uniform jitter added to every capture timestamp.
    pub clock_skew_us: i64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            t_inf_us: 92_000,
            perception_period_us: 100_000,
            control_period_us: 20_000,
            eps_sync_us: 10_000,
            clock_skew_us: 0,
        }
    }
}

impl LatencyConfig {
    /// Builds from the scenario-file units (ms and Hz).
    pub fn from_file_units(
        t_inf_ms: f64,
        perception_hz: f64,
        control_hz: f64,
        eps_sync_ms: f64,
        clock_skew_ms: f64,
    ) -> Result<Self, RuntimeError> {
        let us = |ms: f64| (ms * 1000.0).round() as i64;
        let period = |hz: f64| {
            if hz.is_finite() && hz > 0.0 {
                Ok((1e6 / hz).round() as i64)
            } else {
                Err(RuntimeError::InvalidConfig("rates must be positive".into()))
            }
        };
        if ![t_inf_ms, eps_sync_ms, clock_skew_ms].iter().all(|v| v.is_finite() && v.abs() < 1e9) {
            return Err(RuntimeError::InvalidConfig("latencies must be finite".into()));
        }
        let l = Self {
            t_inf_us: us(t_inf_ms),
            perception_period_us: period(perception_hz)?,
            control_period_us: period(control_hz)?,
            eps_sync_us: us(eps_sync_ms),
            clock_skew_us: us(clock_skew_ms),
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.perception_period_us <= 0 || self.control_period_us <= 0 || self.eps_sync_us <= 0 {
            return Err(RuntimeError::InvalidConfig("periods and eps_sync must be positive".into()));
        }
        if self.t_inf_us < 0 || self.clock_skew_us < 0 {
            return Err(RuntimeError::InvalidConfig("t_inf and clock_skew must be non-negative".into()));
        }
        Ok(())
    }

    pub fn t_inf(&self) -> f64 {
        self.t_inf_us as f64 * 1e-6
    }

    pub fn perception_period(&self) -> f64 {
        self.perception_period_us as f64 * 1e-6
    }

    pub fn control_period(&self) -> f64 {
        self.control_period_us as f64 * 1e-6
    }
}
