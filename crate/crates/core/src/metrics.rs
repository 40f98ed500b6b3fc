//! Episode metrics computed purely from an [`EpisodeTrace`].
//!
//! Conventions: jitter is the RMS residual of the TCP path against a centred
//! 5-tick moving average; jerk is the peak magnitude of the third difference
//! of TCP position; success compares the final part pose to the goal with
//! strict tolerances.

use std::fmt::Write;

use nalgebra::{Point2, Vector3};
use thiserror::Error;

use crate::kinematics::{manipulability_q, ArmModel, Pose};
use crate::primitives::Phase;
use crate::runtime::{EpisodeTrace, SyncStatus};

/// Centred moving-average window for jitter, in ticks.
pub const JITTER_WINDOW: usize = 5;
/// Minimum number of control ticks for jitter.
pub const MIN_JITTER_TICKS: usize = 50;
/// Penetration below the table tolerated before a collision is logged, mm.
pub const COLLISION_TOL_MM: f64 = 0.5;
pub const DEFAULT_TOL_ROT_DEG: f64 = 5.0;
pub const DEFAULT_TOL_POS_MM: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trace too short: need {needed} control ticks, have {available}")]
    TraceTooShort { needed: usize, available: usize },
    #[error("malformed {kind} event: {msg}")]
    BadEvent { kind: String, msg: String },
}

fn tcp_path(trace: &EpisodeTrace) -> Vec<Vector3<f64>> {
    trace.control.iter().map(|c| c.tcp.translation).collect()
}

/// Residual of each interior tick against the centred moving average.
fn jitter_residuals(path: &[Vector3<f64>]) -> Vec<(usize, f64)> {
    let h = JITTER_WINDOW / 2;
    (h..path.len().saturating_sub(h))
        .map(|i| {
            let avg = path[i - h..=i + h].iter().sum::<Vector3<f64>>() / JITTER_WINDOW as f64;
            (i, (path[i] - avg).norm_squared())
        })
        .collect()
}

/// TCP jitter in mm.
pub fn tcp_jitter(trace: &EpisodeTrace) -> Result<f64, MetricsError> {
    let n = trace.control.len();
    if n < MIN_JITTER_TICKS {
        return Err(MetricsError::TraceTooShort { needed: MIN_JITTER_TICKS, available: n });
    }
    let r = jitter_residuals(&tcp_path(trace));
    Ok((r.iter().map(|(_, e)| e).sum::<f64>() / r.len() as f64).sqrt())
}

/// Jitter restricted to the ticks of each phase, in phase order of first
/// appearance. Windows still span neighbouring ticks of other phases.
pub fn tcp_jitter_by_phase(trace: &EpisodeTrace) -> Result<Vec<(Phase, f64)>, MetricsError> {
    tcp_jitter(trace)?;
    let mut acc: Vec<(Phase, f64, usize)> = Vec::new();
    for (i, e) in jitter_residuals(&tcp_path(trace)) {
        let ph = trace.control[i].phase;
        match acc.iter_mut().find(|(p, _, _)| *p == ph) {
            Some(slot) => {
                slot.1 += e;
                slot.2 += 1;
            }
            None => acc.push((ph, e, 1)),
        }
    }
    Ok(acc.into_iter().map(|(p, s, k)| (p, (s / k as f64).sqrt())).collect())
}

/// Peak TCP jerk in m/s³.
pub fn peak_jerk(trace: &EpisodeTrace) -> Result<f64, MetricsError> {
    let p = tcp_path(trace);
    if p.len() < 4 {
        return Err(MetricsError::TraceTooShort { needed: 4, available: p.len() });
    }
    let dt = trace.header.latency.control_period();
    Ok(p.windows(4)
        .map(|w| (w[3] - 3.0 * w[2] + 3.0 * w[1] - w[0]).norm() * 1e-3 / dt.powi(3))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollisionBody {
    Gripper,
    Object,
}

impl CollisionBody {
    pub fn as_str(&self) -> &'static str {
        match self {
            CollisionBody::Gripper => "gripper",
            CollisionBody::Object => "object",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionEvent {
    pub t_us: i64,
    pub body: CollisionBody,
    pub phase: Phase,
    /// Deepest penetration below the table over the contact interval, mm.
    pub depth_mm: f64,
}

/// Table penetrations outside intended-contact phases (Grasp, Rotate). Each
/// contiguous interval of penetration by one body counts once, and an
/// interval that began during intended contact stays whitelisted until it
/// ends.
pub fn collision_check(
    trace: &EpisodeTrace,
    table_z: f64,
    bounds: (Point2<f64>, Point2<f64>),
    thickness: f64,
) -> Vec<CollisionEvent> {
    #[derive(Clone, Copy)]
    enum Contact {
        Free,
        Intended,
        Event(usize),
    }
    let (lo, hi) = bounds;
    let corners: Vec<Vector3<f64>> = (0..8)
        .map(|i| {
            Vector3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { 0.0 } else { thickness },
            )
        })
        .collect();
    let mut out: Vec<CollisionEvent> = Vec::new();
    let mut state = [Contact::Free; 2];
    for c in &trace.control {
        let exempt = matches!(c.phase, Phase::Grasp | Phase::Rotate);
        let grip_depth = table_z - c.tcp.translation.z;
        let obj_depth = if c.held {
            corners
                .iter()
                .map(|p| table_z - c.object.transform_point(p).z)
                .fold(f64::NEG_INFINITY, f64::max)
        } else {
            f64::NEG_INFINITY
        };
        for (slot, body, depth) in [(0, CollisionBody::Gripper, grip_depth), (1, CollisionBody::Object, obj_depth)] {
            state[slot] = match (state[slot], depth > COLLISION_TOL_MM) {
                (_, false) => Contact::Free,
                (Contact::Free, true) if exempt => Contact::Intended,
                (Contact::Free, true) => {
                    out.push(CollisionEvent { t_us: c.t_us, body, phase: c.phase, depth_mm: depth });
                    Contact::Event(out.len() - 1)
                }
                (Contact::Event(k), true) => {
                    out[k].depth_mm = out[k].depth_mm.max(depth);
                    Contact::Event(k)
                }
                (Contact::Intended, true) => Contact::Intended,
            };
        }
    }
    out
}

/// Percentage of control ticks whose actual configuration has
/// σ_min(J) < threshold.
pub fn singularity_rate(trace: &EpisodeTrace, arm: &ArmModel, threshold: f64) -> f64 {
    if trace.control.is_empty() {
        return 0.0;
    }
    let hits = trace.control.iter().filter(|c| manipulability_q(&c.q_act, arm) < threshold).count();
    100.0 * hits as f64 / trace.control.len() as f64
}

/// Final part pose, if the trace has any control records.
pub fn final_object_pose(trace: &EpisodeTrace) -> Option<&Pose> {
    trace.control.last().map(|c| &c.object)
}

/// Strict success test on the final part pose.
pub fn success(trace: &EpisodeTrace, goal: &Pose, tol_rot_deg: f64, tol_pos_mm: f64) -> bool {
    match final_object_pose(trace) {
        Some(f) => {
            let rot = f.angle_to(goal).to_degrees();
            let pos = (f.translation - goal.translation).xy().norm();
            rot < tol_rot_deg && pos < tol_pos_mm
        }
        None => false,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SyncStats {
    pub aligned: usize,
    pub rejected: usize,
    pub stale: usize,
}

pub fn sync_stats(trace: &EpisodeTrace) -> SyncStats {
    let mut s = SyncStats::default();
    for c in &trace.control {
        match c.sync {
            SyncStatus::Aligned => s.aligned += 1,
            SyncStatus::Rejected => s.rejected += 1,
            SyncStatus::Stale => s.stale += 1,
        }
    }
    s
}

/// Peak arm torques about the pivot line, as recorded by the planner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorqueSummary {
    pub pivot_peak_nm: f64,
    pub direct_peak_nm: f64,
}

impl TorqueSummary {
    /// Fraction of the direct-lift peak saved by pivoting.
    pub fn reduction(&self) -> f64 {
        if self.direct_peak_nm > 0.0 {
            1.0 - self.pivot_peak_nm / self.direct_peak_nm
        } else {
            0.0
        }
    }
}

fn event_values(trace: &EpisodeTrace, kind: &str, n: usize) -> Result<Option<Vec<f64>>, MetricsError> {
    let Some(e) = trace.events_of(kind).last() else {
        return Ok(None);
    };
    let bad = |msg: String| MetricsError::BadEvent { kind: kind.to_string(), msg };
    if e.args.len() != n {
        return Err(bad(format!("expected {n} values, found {}", e.args.len())));
    }
    e.args
        .iter()
        .map(|a| a.parse::<f64>().map_err(|_| bad(format!("not a number: {a}"))))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

/// RMS distance between the actual TCP and the planned reference, mm.
pub fn tracking_rms(trace: &EpisodeTrace) -> f64 {
    if trace.control.is_empty() {
        return 0.0;
    }
    let s: f64 = trace.control.iter().map(|c| (c.tcp.translation - c.reference).norm_squared()).sum();
    (s / trace.control.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub success: bool,
    /// Simulated time of the last control tick, s.
    pub exec_time: f64,
    pub tcp_jitter: f64,
    pub jitter_by_phase: Vec<(Phase, f64)>,
    pub peak_jerk: f64,
    pub collisions: Vec<CollisionEvent>,
    pub singularity_rate: f64,
    pub torque: Option<TorqueSummary>,
    pub sync: SyncStats,
    pub tracking_rms: f64,
    pub abort: Option<String>,
    pub slips: usize,
    pub tol_rot_deg: f64,
    pub tol_pos_mm: f64,
}

/// Computes the full report. Success tolerances come from a `thresholds`
/// event if present, else the defaults. An aborted episode never succeeds.
pub fn evaluate(trace: &EpisodeTrace) -> Result<EpisodeReport, MetricsError> {
    let (tol_rot_deg, tol_pos_mm) = match event_values(trace, "thresholds", 2)? {
        Some(v) => (v[0], v[1]),
        None => (DEFAULT_TOL_ROT_DEG, DEFAULT_TOL_POS_MM),
    };
    let torque = event_values(trace, "torque", 2)?
        .map(|v| TorqueSummary { pivot_peak_nm: v[0], direct_peak_nm: v[1] });
    let h = &trace.header;
    Ok(EpisodeReport {
        success: !trace.aborted() && success(trace, &h.goal, tol_rot_deg, tol_pos_mm),
        exec_time: trace.control.last().map_or(0.0, |c| c.t_us as f64 * 1e-6),
        tcp_jitter: tcp_jitter(trace)?,
        jitter_by_phase: tcp_jitter_by_phase(trace)?,
        peak_jerk: peak_jerk(trace)?,
        collisions: collision_check(trace, h.table_z, h.object_bounds, h.object_thickness),
        singularity_rate: singularity_rate(trace, &h.arm, h.arm.sigma_min()),
        torque,
        sync: sync_stats(trace),
        tracking_rms: tracking_rms(trace),
        abort: trace.events_of("abort").next().map(|e| e.args.join(" ")),
        slips: trace.events_of("slip").count(),
        tol_rot_deg,
        tol_pos_mm,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

/// Flat `key=value` rendering.
pub fn report_text(r: &EpisodeReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "success={}", r.success);
    let _ = writeln!(s, "exec_time_s={:.6}", r.exec_time);
    let _ = writeln!(s, "tcp_jitter_mm={:.6}", r.tcp_jitter);
    for (p, j) in &r.jitter_by_phase {
        let _ = writeln!(s, "tcp_jitter_mm.{}={j:.6}", p.as_str());
    }
    let _ = writeln!(s, "peak_jerk_m_s3={:.6}", r.peak_jerk);
    let _ = writeln!(s, "collisions={}", r.collisions.len());
    for c in &r.collisions {
        let _ = writeln!(
            s,
            "collision={:.6} {} {} {:.6}",
            c.t_us as f64 * 1e-6,
            c.body.as_str(),
            c.phase.as_str(),
            c.depth_mm
        );
    }
    let _ = writeln!(s, "singularity_rate_pct={:.6}", r.singularity_rate);
    let _ = writeln!(s, "torque_pivot_peak_nm={}", opt(r.torque.map(|t| t.pivot_peak_nm)));
    let _ = writeln!(s, "torque_direct_peak_nm={}", opt(r.torque.map(|t| t.direct_peak_nm)));
    let _ = writeln!(s, "sync_aligned={}", r.sync.aligned);
    let _ = writeln!(s, "sync_rejected={}", r.sync.rejected);
    let _ = writeln!(s, "sync_stale={}", r.sync.stale);
    let _ = writeln!(s, "tracking_rms_mm={:.6}", r.tracking_rms);
    let _ = writeln!(s, "slips={}", r.slips);
    let _ = writeln!(s, "abort={}", r.abort.as_deref().unwrap_or("none"));
    s
}

pub const CSV_HEADER: &str = "name,success,exec_time_s,tcp_jitter_mm,peak_jerk_m_s3,collisions,singularity_rate_pct,\
torque_pivot_peak_nm,torque_direct_peak_nm,sync_aligned,sync_rejected,sync_stale,tracking_rms_mm,slips,abort";

/// One CSV row matching [`CSV_HEADER`].
pub fn csv_row(name: &str, r: &EpisodeReport) -> String {
    format!(
        "{name},{},{:.6},{:.6},{:.6},{},{:.6},{},{},{},{},{},{:.6},{},{}",
        u8::from(r.success),
        r.exec_time,
        r.tcp_jitter,
        r.peak_jerk,
        r.collisions.len(),
        r.singularity_rate,
        opt(r.torque.map(|t| t.pivot_peak_nm)),
        opt(r.torque.map(|t| t.direct_peak_nm)),
        r.sync.aligned,
        r.sync.rejected,
        r.sync.stale,
        r.tracking_rms,
        r.slips,
        r.abort.as_deref().unwrap_or("none").replace(' ', ":"),
    )
}

/// Mean and standard-deviation rows over the numeric columns of
/// [`CSV_HEADER`]; unavailable values are skipped.
pub fn csv_summary_rows(reports: &[EpisodeReport]) -> String {
    let cols: Vec<Vec<Option<f64>>> = reports
        .iter()
        .map(|r| {
            vec![
                Some(f64::from(u8::from(r.success))),
                Some(r.exec_time),
                Some(r.tcp_jitter),
                Some(r.peak_jerk),
                Some(r.collisions.len() as f64),
                Some(r.singularity_rate),
                r.torque.map(|t| t.pivot_peak_nm),
                r.torque.map(|t| t.direct_peak_nm),
                Some(r.sync.aligned as f64),
                Some(r.sync.rejected as f64),
                Some(r.sync.stale as f64),
                Some(r.tracking_rms),
                Some(r.slips as f64),
            ]
        })
        .collect();
    let width = 13;
    let stats: Vec<Option<(f64, f64)>> = (0..width)
        .map(|j| {
            let xs: Vec<f64> = cols.iter().filter_map(|c| c[j]).collect();
            (!xs.is_empty()).then(|| mean_sd(&xs))
        })
        .collect();
    let row = |name: &str, pick: fn((f64, f64)) -> f64| {
        let vals: Vec<String> = stats.iter().map(|s| opt(s.map(pick))).collect();
        format!("{name},{},{}", vals.join(","), reports.iter().filter(|r| r.abort.is_some()).count())
    };
    format!("{}\n{}\n", row("mean", |s| s.0), row("sd", |s| s.1))
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 { (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, sd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub episodes: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub jitter: (f64, f64),
    pub jerk: (f64, f64),
    pub exec_time: (f64, f64),
    pub singularity_rate: (f64, f64),
}

/// Aggregates episodes; rates are percentages of episodes.
pub fn aggregate(reports: &[EpisodeReport]) -> Aggregate {
    let n = reports.len();
    let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
    let col = |f: fn(&EpisodeReport) -> f64| mean_sd(&reports.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        episodes: n,
        success_rate: pct(reports.iter().filter(|r| r.success).count()),
        collision_rate: pct(reports.iter().filter(|r| !r.collisions.is_empty()).count()),
        jitter: col(|r| r.tcp_jitter),
        jerk: col(|r| r.peak_jerk),
        exec_time: col(|r| r.exec_time),
        singularity_rate: col(|r| r.singularity_rate),
    }
}
