//! Line-delimited episode trace.
//!
//! ```text
//! H <key> <values...>              header, before any record
//! C t issued q_cmd[6] q_act[6] tcp[12] ref[3] obj[12] held frame sync phase gripper
//! V frame capture available cls ax ay unit status delta
//! E t kind [args...]
//! ```
//!
//! Timestamps are seconds with six decimals. Poses are row-major rotation
//! followed by translation. `frame` is `-` when no anchor frame is active.

use std::fmt::Write as _;

use nalgebra::{Point2, Vector3, Vector6};

use super::{LatencyConfig, Mode, RuntimeError, SyncStatus};
use crate::geometry::{AffordanceClass, AnchorUnit};
use crate::kinematics::{ArmModel, Pose};
use crate::primitives::{Gripper, Phase};
use crate::textio::{content_lines, fmt_micros, parse_f64, parse_micros, parse_num, LineError};

/// Episode-wide settings needed to recompute every metric from the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub mode: Mode,
    pub latency: LatencyConfig,
    pub seed: u64,
    pub lead_in_us: i64,
    pub table_z: f64,
    pub arm: ArmModel,
    pub object_mass: f64,
    pub object_thickness: f64,
    /// Local silhouette bounds `(min, max)`, mm.
    pub object_bounds: (Point2<f64>, Point2<f64>),
    pub goal: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlRecord {
    pub t_us: i64,
    /// False for ticks that held the previous command (Sync mode waits).
    pub issued: bool,
    pub q_cmd: Vector6<f64>,
    pub q_act: Vector6<f64>,
    pub tcp: Pose,
    /// Planned TCP position at the same wall time.
    pub reference: Vector3<f64>,
    pub object: Pose,
    pub held: bool,
    pub frame: Option<u64>,
    pub sync: SyncStatus,
    pub phase: Phase,
    pub gripper: Gripper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionRecord {
    pub frame: u64,
    pub capture_us: i64,
    pub available_us: i64,
    pub cls: AffordanceClass,
    pub anchor: Point2<f64>,
    pub unit: AnchorUnit,
    pub status: SyncStatus,
    pub delta_us: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub t_us: i64,
    pub kind: String,
    pub args: Vec<String>,
}

impl EventRecord {
    pub fn new(t_us: i64, kind: &str, args: &[f64]) -> Self {
        Self { t_us, kind: kind.to_string(), args: args.iter().map(|v| v.to_string()).collect() }
    }

    pub fn with_words(t_us: i64, kind: &str, args: &[&str]) -> Self {
        Self { t_us, kind: kind.to_string(), args: args.iter().map(|s| s.to_string()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub header: TraceHeader,
    pub control: Vec<ControlRecord>,
    pub vision: Vec<VisionRecord>,
    pub events: Vec<EventRecord>,
}

impl EpisodeTrace {
    pub fn events_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a EventRecord> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn aborted(&self) -> bool {
        self.events_of("abort").next().is_some()
    }

    pub fn vision_frame(&self, frame: u64) -> Option<&VisionRecord> {
        self.vision
            .binary_search_by_key(&frame, |v| v.frame)
            .ok()
            .map(|i| &self.vision[i])
    }
}

fn push(out: &mut String, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        let _ = write!(out, " {v}");
    }
}

pub fn write_trace(trace: &EpisodeTrace) -> String {
    let h = &trace.header;
    let l = &h.latency;
    let mut out = String::from("# edgeflip trace v1\n");
    let _ = writeln!(out, "H mode {}", h.mode.as_str());
    let _ = writeln!(
        out,
        "H latency {} {} {} {} {}",
        fmt_micros(l.t_inf_us),
        fmt_micros(l.perception_period_us),
        fmt_micros(l.control_period_us),
        fmt_micros(l.eps_sync_us),
        fmt_micros(l.clock_skew_us)
    );
    let _ = writeln!(out, "H seed {}", h.seed);
    let _ = writeln!(out, "H lead_in {}", fmt_micros(h.lead_in_us));
    let _ = writeln!(out, "H table_z {}", h.table_z);
    for line in h.arm.to_config_string().lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let _ = writeln!(out, "H arm {line}");
    }
    let (lo, hi) = h.object_bounds;
    let _ = writeln!(out, "H object {} {} {} {} {} {}", h.object_mass, h.object_thickness, lo.x, lo.y, hi.x, hi.y);
    out.push_str("H goal");
    push(&mut out, h.goal.to_array());
    out.push('\n');

    // Records are emitted in time order across streams.
    let mut c = trace.control.iter().peekable();
    let mut v = trace.vision.iter().peekable();
    let mut e = trace.events.iter().peekable();
    loop {
        let tc = c.peek().map(|r| r.t_us);
        let tv = v.peek().map(|r| r.available_us);
        let te = e.peek().map(|r| r.t_us);
        let next = [tc, tv, te].into_iter().flatten().min();
        let Some(t) = next else { break };
        if tc == Some(t) {
            write_control(&mut out, c.next().expect("peeked"));
        } else if tv == Some(t) {
            write_vision(&mut out, v.next().expect("peeked"));
        } else {
            let r = e.next().expect("peeked");
            let _ = write!(out, "E {} {}", fmt_micros(r.t_us), r.kind);
            for a in &r.args {
                let _ = write!(out, " {a}");
            }
            out.push('\n');
        }
    }
    out
}

fn write_control(out: &mut String, r: &ControlRecord) {
    let _ = write!(out, "C {} {}", fmt_micros(r.t_us), u8::from(r.issued));
    push(out, r.q_cmd.iter().copied());
    push(out, r.q_act.iter().copied());
    push(out, r.tcp.to_array());
    push(out, r.reference.iter().copied());
    push(out, r.object.to_array());
    let frame = r.frame.map_or_else(|| "-".to_string(), |f| f.to_string());
    let _ = writeln!(
        out,
        " {} {frame} {} {} {}",
        u8::from(r.held),
        r.sync.as_str(),
        r.phase.as_str(),
        r.gripper.as_str()
    );
}

fn write_vision(out: &mut String, r: &VisionRecord) {
    let _ = writeln!(
        out,
        "V {} {} {} {} {} {} {} {} {}",
        r.frame,
        fmt_micros(r.capture_us),
        fmt_micros(r.available_us),
        r.cls.as_str(),
        r.anchor.x,
        r.anchor.y,
        r.unit.as_str(),
        r.status.as_str(),
        fmt_micros(r.delta_us)
    );
}

struct Toks<'a> {
    it: std::str::SplitWhitespace<'a>,
    line: usize,
}

impl<'a> Toks<'a> {
    fn word(&mut self, what: &str) -> Result<&'a str, LineError> {
        self.it.next().ok_or_else(|| LineError::new(self.line, format!("missing {what}")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, LineError> {
        let w = self.word(what)?;
        parse_f64(w, self.line, what)
    }

    fn micros(&mut self, what: &str) -> Result<i64, LineError> {
        let w = self.word(what)?;
        parse_micros(w, self.line)
    }

    fn vec6(&mut self, what: &str) -> Result<Vector6<f64>, LineError> {
        let mut v = Vector6::zeros();
        for i in 0..6 {
            v[i] = self.f64(what)?;
        }
        Ok(v)
    }

    fn pose(&mut self, what: &str) -> Result<Pose, LineError> {
        let mut a = [0.0; 12];
        for x in &mut a {
            *x = self.f64(what)?;
        }
        Ok(Pose::from_array(&a))
    }

    fn flag(&mut self, what: &str) -> Result<bool, LineError> {
        match self.word(what)? {
            "0" => Ok(false),
            "1" => Ok(true),
            w => Err(LineError::new(self.line, format!("invalid {what}: {w:?}"))),
        }
    }

    fn named<T>(&mut self, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T, LineError> {
        let w = self.word(what)?;
        parse(w).ok_or_else(|| LineError::new(self.line, format!("invalid {what}: {w:?}")))
    }

    fn end(&mut self) -> Result<(), LineError> {
        match self.it.next() {
            None => Ok(()),
            Some(w) => Err(LineError::new(self.line, format!("unexpected trailing token {w:?}"))),
        }
    }
}

#[derive(Default)]
struct HeaderParts {
    mode: Option<Mode>,
    latency: Option<LatencyConfig>,
    seed: Option<u64>,
    lead_in_us: Option<i64>,
    table_z: Option<f64>,
    arm: String,
    object: Option<(f64, f64, Point2<f64>, Point2<f64>)>,
    goal: Option<Pose>,
}

fn parse_header(parts: &mut HeaderParts, t: &mut Toks<'_>, rest: &str) -> Result<(), LineError> {
    let line = t.line;
    match t.word("header key")? {
        "mode" => parts.mode = Some(t.named("mode", Mode::parse)?),
        "latency" => {
            let l = LatencyConfig {
                t_inf_us: t.micros("t_inf")?,
                perception_period_us: t.micros("perception period")?,
                control_period_us: t.micros("control period")?,
                eps_sync_us: t.micros("eps_sync")?,
                clock_skew_us: t.micros("clock skew")?,
            };
            l.validate().map_err(|e| LineError::new(line, e.to_string()))?;
            parts.latency = Some(l);
        }
        "seed" => parts.seed = Some(parse_num(t.word("seed")?, line, "seed")?),
        "lead_in" => parts.lead_in_us = Some(t.micros("lead_in")?),
        "table_z" => parts.table_z = Some(t.f64("table_z")?),
        "arm" => {
            let payload = rest.trim_start().strip_prefix("arm").unwrap_or("");
            parts.arm.push_str(payload.trim());
            parts.arm.push('\n');
            while t.it.next().is_some() {}
        }
        "object" => {
            let (m, th) = (t.f64("mass")?, t.f64("thickness")?);
            let lo = Point2::new(t.f64("bounds")?, t.f64("bounds")?);
            let hi = Point2::new(t.f64("bounds")?, t.f64("bounds")?);
            parts.object = Some((m, th, lo, hi));
        }
        "goal" => parts.goal = Some(t.pose("goal")?),
        k => return Err(LineError::new(line, format!("unknown header key {k:?}"))),
    }
    t.end()
}

pub fn parse_trace(text: &str) -> Result<EpisodeTrace, RuntimeError> {
    let mut parts = HeaderParts::default();
    let mut header: Option<TraceHeader> = None;
    let mut control: Vec<ControlRecord> = Vec::new();
    let mut vision: Vec<VisionRecord> = Vec::new();
    let mut events: Vec<EventRecord> = Vec::new();
    let mut last_line = 0;

    for (line, raw) in content_lines(text) {
        last_line = line;
        let mut t = Toks { it: raw.split_whitespace(), line };
        let tag = t.word("record tag")?;
        if tag == "H" {
            if header.is_some() {
                return Err(LineError::new(line, "header after records").into());
            }
            parse_header(&mut parts, &mut t, &raw[1..])?;
            continue;
        }
        if header.is_none() {
            header = Some(finish_header(&mut parts, line)?);
        }
        match tag {
            "C" => {
                let r = ControlRecord {
                    t_us: t.micros("t")?,
                    issued: t.flag("issued")?,
                    q_cmd: t.vec6("q_cmd")?,
                    q_act: t.vec6("q_act")?,
                    tcp: t.pose("tcp")?,
                    reference: Vector3::new(t.f64("ref")?, t.f64("ref")?, t.f64("ref")?),
                    object: t.pose("object")?,
                    held: t.flag("held")?,
                    frame: match t.word("frame")? {
                        "-" => None,
                        w => Some(parse_num(w, line, "frame")?),
                    },
                    sync: t.named("sync status", SyncStatus::parse)?,
                    phase: t.named("phase", Phase::parse)?,
                    gripper: t.named("gripper", Gripper::parse)?,
                };
                t.end()?;
                if control.last().is_some_and(|p| p.t_us >= r.t_us) {
                    return Err(LineError::new(line, "control records must be strictly increasing in time").into());
                }
                control.push(r);
            }
            "V" => {
                let r = VisionRecord {
                    frame: parse_num(t.word("frame")?, line, "frame")?,
                    capture_us: t.micros("capture")?,
                    available_us: t.micros("available")?,
                    cls: t.named("class", AffordanceClass::parse)?,
                    anchor: Point2::new(t.f64("anchor")?, t.f64("anchor")?),
                    unit: t.named("unit", AnchorUnit::parse)?,
                    status: t.named("sync status", SyncStatus::parse)?,
                    delta_us: t.micros("delta")?,
                };
                t.end()?;
                if r.available_us < r.capture_us || r.capture_us < 0 {
                    return Err(LineError::new(line, "vision timestamps out of order").into());
                }
                if vision.last().is_some_and(|p| p.frame >= r.frame) {
                    return Err(LineError::new(line, "frame ids must be strictly increasing").into());
                }
                vision.push(r);
            }
            "E" => {
                let t_us = t.micros("t")?;
                let kind = t.word("event kind")?.to_string();
                let args = t.it.by_ref().map(str::to_string).collect();
                events.push(EventRecord { t_us, kind, args });
            }
            other => return Err(LineError::new(line, format!("unknown record tag {other:?}")).into()),
        }
    }
    let header = match header {
        Some(h) => h,
        None => finish_header(&mut parts, last_line + 1)?,
    };
    Ok(EpisodeTrace { header, control, vision, events })
}

fn finish_header(p: &mut HeaderParts, line: usize) -> Result<TraceHeader, RuntimeError> {
    let miss = |k: &str| RuntimeError::from(LineError::new(line, format!("header is missing {k}")));
    let arm = ArmModel::parse(&p.arm).map_err(|e| LineError::new(line, format!("header arm: {e}")))?;
    let (object_mass, object_thickness, lo, hi) = p.object.ok_or_else(|| miss("object"))?;
    Ok(TraceHeader {
        mode: p.mode.ok_or_else(|| miss("mode"))?,
        latency: p.latency.ok_or_else(|| miss("latency"))?,
        seed: p.seed.ok_or_else(|| miss("seed"))?,
        lead_in_us: p.lead_in_us.ok_or_else(|| miss("lead_in"))?,
        table_z: p.table_z.ok_or_else(|| miss("table_z"))?,
        arm,
        object_mass,
        object_thickness,
        object_bounds: (lo, hi),
        goal: p.goal.ok_or_else(|| miss("goal"))?,
    })
}
