//! Discrete-event episode simulation.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::f64::consts::PI;

use nalgebra::{Matrix6, Point2, Rotation3, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::softsync::{soft_sync, SyncStatus, TimestampedSample};
use super::spline::SplineWindow;
use super::trace::{ControlRecord, EpisodeTrace, EventRecord, TraceHeader, VisionRecord};
use super::{LatencyConfig, Mode, RuntimeError};
use crate::dynamics::RigidObject;
use crate::geometry::{AffordanceClass, AnchorUnit};
use crate::kinematics::{fk_q, jacobian_q, manipulability_q, orthonormalize, ArmModel, Pose};
use crate::primitives::{Gripper, Phase, PrimitivePlan};
use crate::textio::fmt_micros;

/// Everything an episode needs besides timing: the arm, the plan with its
/// joint-space path, the part and where it should end up.
#[derive(Debug, Clone)]
pub struct EpisodeSetup {
    pub arm: ArmModel,
    pub plan: PrimitivePlan,
    pub joint_path: Vec<Vector6<f64>>,
    pub object: RigidObject,
    pub table_z: f64,
    pub goal: Pose,
    pub cls: AffordanceClass,
}

impl EpisodeSetup {
    /// Solves the plan's joint path from `seed_q`.
    pub fn new(
        arm: ArmModel,
        plan: PrimitivePlan,
        seed_q: &Vector6<f64>,
        object: RigidObject,
        table_z: f64,
        goal: Pose,
        cls: AffordanceClass,
    ) -> Result<Self, RuntimeError> {
        let joint_path = plan.joint_path(&arm, seed_q).map_err(|e| RuntimeError::Scenario(e.to_string()))?;
        Ok(Self { arm, plan, joint_path, object, table_z, goal, cls })
    }

    /// Joint-space plan position at plan time `s`, clamped to the plan span.
    fn plan_q(&self, s: f64) -> Vector6<f64> {
        let w = &self.plan.waypoints;
        let q = &self.joint_path;
        if s <= w[0].t {
            return q[0];
        }
        if s >= w[w.len() - 1].t {
            return q[q.len() - 1];
        }
        let i = w.partition_point(|p| p.t <= s) - 1;
        let f = (s - w[i].t) / (w[i + 1].t - w[i].t);
        q[i].lerp(&q[i + 1], f)
    }
}

/// Plant, gripper and safety settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    /// Joint tracking time constant, s.
    pub tau_track: f64,
    /// Standard deviation of the Cartesian anchor noise, mm.
    pub anchor_noise_mm: f64,
    /// Largest inertial load the fingers hold before the part slips, N.
    pub grip_capacity_n: f64,
    /// The part attaches when the closing TCP is this close to it, mm.
    pub attach_radius_mm: f64,
    /// Protective stop when the TCP is this far below the table, mm.
    pub penetration_abort_mm: f64,
    /// Extra simulated time after the last command, s.
    pub settle_time: f64,
    /// Gripper actuation delay, s.
    pub gripper_delay: f64,
    /// Pace events against the host clock instead of running flat out.
    pub wall_clock: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            tau_track: 0.04,
            anchor_noise_mm: 0.1,
            grip_capacity_n: 6.0,
            attach_radius_mm: 5.0,
            penetration_abort_mm: 5.0,
            settle_time: 0.5,
            gripper_delay: 0.2,
            wall_clock: false,
        }
    }
}

impl RuntimeConfig {
    fn validate(&self) -> Result<(), RuntimeError> {
        let pos = [self.tau_track, self.grip_capacity_n, self.attach_radius_mm, self.penetration_abort_mm];
        let nonneg = [self.anchor_noise_mm, self.settle_time, self.gripper_delay];
        if pos.iter().all(|v| v.is_finite() && *v > 0.0) && nonneg.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(RuntimeError::InvalidConfig("runtime constants must be finite and positive".into()))
        }
    }
}

/// Pose of a part lying on the table in its shape frame.
pub fn resting_pose(obj: &RigidObject, table_z: f64) -> Pose {
    let f = obj.shape.frame();
    Pose::new(
        *Rotation3::from_axis_angle(&Vector3::z_axis(), f.theta).matrix(),
        Vector3::new(f.x, f.y, table_z),
    )
}

fn box_corners(obj: &RigidObject) -> [Vector3<f64>; 8] {
    let (lo, hi) = obj.shape.local_bounds();
    let mut out = [Vector3::zeros(); 8];
    for (i, c) in out.iter_mut().enumerate() {
        *c = Vector3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { 0.0 } else { obj.thickness },
        );
    }
    out
}

/// Where a released part comes to rest: tilted onto the nearer face, then
/// lowered or raised onto the table, keeping its centre above the same point.
pub fn settle_pose(pose: &Pose, obj: &RigidObject, table_z: f64) -> Pose {
    let zw = pose.rotation * Vector3::z();
    let target = if zw.z >= 0.0 { Vector3::z() } else { -Vector3::z() };
    let align = Rotation3::rotation_between(&zw, &target).unwrap_or_else(Rotation3::identity);
    let (lo, hi) = obj.shape.local_bounds();
    let center = Vector3::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0, obj.thickness / 2.0);
    let center_w = pose.transform_point(&center);
    let r = orthonormalize(&(align.matrix() * pose.rotation));
    let mut t = center_w - r * center;
    let min_z = box_corners(obj).iter().map(|c| (r * c + t).z).fold(f64::INFINITY, f64::min);
    t.z += table_z - min_z;
    Pose::new(r, t)
}

/// Goal pose after turning the resting part over the support line through
/// `foot` with direction `dir`.
pub fn flip_goal(obj: &RigidObject, foot: Point2<f64>, dir: Vector2<f64>, table_z: f64) -> Pose {
    let start = resting_pose(obj, table_z);
    let axis = nalgebra::Unit::new_normalize(Vector3::new(dir.x, dir.y, 0.0));
    let r = Rotation3::from_axis_angle(&axis, PI);
    let f = Vector3::new(foot.x, foot.y, table_z);
    let turned = Pose::new(r * start.rotation, f + r * (start.translation - f));
    settle_pose(&turned, obj, table_z)
}

/// Distance from a world point to the part placed at `pose`, mm.
fn distance_to_part(obj: &RigidObject, pose: &Pose, p: &Vector3<f64>) -> f64 {
    let local = pose.inverse().transform_point(p);
    let dxy = obj.shape.distance_to_region_local(Point2::new(local.x, local.y));
    let dz = if local.z < 0.0 {
        -local.z
    } else if local.z > obj.thickness {
        local.z - obj.thickness
    } else {
        0.0
    };
    dxy.hypot(dz)
}

/// Event kinds in tie-break priority order: control before perception.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Tick,
    Capture,
    Ready,
}

struct Frame {
    stamp_us: i64,
    ready_us: i64,
    q: Vector6<f64>,
    gripper: Gripper,
    phase: Phase,
    target: Point2<f64>,
    sync: Option<(SyncStatus, i64)>,
    written: bool,
}

/// Damping for mapping Cartesian anchor noise into joint space.
const NOISE_DAMPING: f64 = 0.1;
/// Cap on the joint-space noise per anchor, rad.
const NOISE_CAP: f64 = 2e-3;
/// Snapshots kept for soft sync.
const STATE_BUFFER: usize = 512;

struct Sim<'a> {
    setup: &'a EpisodeSetup,
    lat: LatencyConfig,
    lead_in_us: i64,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    frames: Vec<Frame>,
    states: VecDeque<TimestampedSample<()>>,
    heap: BinaryHeap<Reverse<(i64, EventKind, u64, u64)>>,
    seq: u64,
    vision: Vec<VisionRecord>,
    events: Vec<EventRecord>,
}

impl Sim<'_> {
    fn push(&mut self, t: i64, kind: EventKind, frame: u64) {
        self.seq += 1;
        self.heap.push(Reverse((t, kind, self.seq, frame)));
    }

    fn jitter(&mut self) -> i64 {
        let s = self.lat.clock_skew_us;
        if s == 0 {
            0
        } else {
            self.rng.random_range(-s..=s)
        }
    }

    fn capture(&mut self, t: i64) -> u64 {
        let id = self.frames.len() as u64;
        let ready_us = t + self.lat.t_inf_us;
        let stamp_us = (t + self.jitter()).clamp(0, ready_us);
        let s = (t - self.lead_in_us) as f64 * 1e-6;
        let mut q = self.setup.plan_q(s);
        if let Some(n) = self.noise {
            let dx = Vector6::new(n.sample(&mut self.rng), n.sample(&mut self.rng), n.sample(&mut self.rng), 0.0, 0.0, 0.0);
            let j = jacobian_q(&q, &self.setup.arm);
            let jjt = j * j.transpose() + Matrix6::identity() * NOISE_DAMPING * NOISE_DAMPING;
            if let Some(inv) = jjt.try_inverse() {
                let dq = j.transpose() * inv * dx;
                q += dq.map(|v| v.clamp(-NOISE_CAP, NOISE_CAP));
            }
        }
        let (_, gripper, phase) = self.setup.plan.sample(s);
        let p = fk_q(&q, &self.setup.arm).translation;
        self.frames.push(Frame {
            stamp_us,
            ready_us,
            q,
            gripper,
            phase,
            target: Point2::new(p.x, p.y),
            sync: None,
            written: false,
        });
        self.push(ready_us, EventKind::Ready, id);
        id
    }

    /// Pairs a frame with the state buffer once; later calls reuse the result.
    fn resolve(&mut self, id: u64) -> SyncStatus {
        let f = &self.frames[id as usize];
        if let Some((s, _)) = f.sync {
            return s;
        }
        let states = self.states.make_contiguous();
        let r = match soft_sync(f.stamp_us, states, self.lat.eps_sync_us) {
            Ok(p) => (p.status, p.delta_us),
            Err(_) => (SyncStatus::Rejected, i64::MAX / 4),
        };
        self.frames[id as usize].sync = Some(r);
        r.0
    }

    fn write_vision(&mut self, id: u64) {
        self.resolve(id);
        let f = &mut self.frames[id as usize];
        if f.written {
            return;
        }
        f.written = true;
        let (status, delta_us) = f.sync.expect("resolved");
        self.vision.push(VisionRecord {
            frame: id,
            capture_us: f.stamp_us,
            available_us: f.ready_us,
            cls: self.setup.cls,
            anchor: f.target,
            unit: AnchorUnit::Millimeter,
            status,
            delta_us,
        });
    }

    fn event(&mut self, t: i64, kind: &str, args: &[f64]) {
        self.events.push(EventRecord::new(t, kind, args));
    }
}

/// Command chosen at one control tick.
struct Command {
    q: Vector6<f64>,
    issued: bool,
    frame: Option<u64>,
    gripper: Gripper,
    phase: Phase,
}

/// Runs one episode and returns its trace. Deterministic for a given seed.
pub fn run_episode(
    setup: &EpisodeSetup,
    mode: Mode,
    latency: &LatencyConfig,
    seed: u64,
    cfg: &RuntimeConfig,
) -> Result<EpisodeTrace, RuntimeError> {
    latency.validate()?;
    cfg.validate()?;
    if setup.plan.waypoints.is_empty() || setup.joint_path.len() != setup.plan.waypoints.len() {
        return Err(RuntimeError::Scenario("plan and joint path must be non-empty and aligned".into()));
    }
    let lat = *latency;
    let (p_us, c_us) = (lat.perception_period_us, lat.control_period_us);
    let lead_in_us = 3 * p_us;
    let plan_us = (setup.plan.duration() * 1e6).round() as i64;
    let settle_us = (cfg.settle_time * 1e6).round() as i64;
    let end_us = lead_in_us + plan_us + 2 * lat.t_inf_us.max(p_us) + 2 * p_us + settle_us;
    let delay_us = p_us + lat.t_inf_us;
    let grip_delay_us = (cfg.gripper_delay * 1e6).round() as i64;
    let dt = c_us as f64 * 1e-6;
    let decay = (-dt / cfg.tau_track).exp();
    let noise = (cfg.anchor_noise_mm > 0.0).then(|| Normal::new(0.0, cfg.anchor_noise_mm).expect("finite sigma"));

    let mut sim = Sim {
        setup,
        lat,
        lead_in_us,
        rng: ChaCha8Rng::seed_from_u64(seed),
        noise,
        frames: Vec::new(),
        states: VecDeque::with_capacity(STATE_BUFFER),
        heap: BinaryHeap::new(),
        seq: 0,
        vision: Vec::new(),
        events: Vec::new(),
    };
    let mut t = 0;
    while t <= end_us {
        sim.push(t, EventKind::Tick, 0);
        t += c_us;
    }
    if mode == Mode::Async {
        let mut t = 0;
        while t <= end_us {
            sim.push(t, EventKind::Capture, 0);
            t += p_us;
        }
    }

    let q0 = setup.joint_path[0];
    let w0 = setup.plan.waypoints[0];
    let mut q_act = q0;
    let mut q_cmd = q0;
    let mut last = Command { q: q0, issued: false, frame: None, gripper: w0.gripper, phase: w0.phase };
    let mut inflight: Option<u64> = None;
    let mut grip_cmds: VecDeque<(i64, Gripper)> = VecDeque::new();
    let mut grip_actual = Gripper::Open;
    let mut grip_last = Gripper::Open;
    let mut obj_pose = resting_pose(&setup.object, setup.table_z);
    let mut held: Option<Pose> = None;
    let mut held_ticks = 0usize;
    let mut tcp_hist: VecDeque<Vector3<f64>> = VecDeque::with_capacity(3);
    let mut control: Vec<ControlRecord> = Vec::new();
    let mut phase_seen: Option<Phase> = None;
    let wall_start = std::time::Instant::now();

    while let Some(Reverse((t, kind, _, frame))) = sim.heap.pop() {
        if cfg.wall_clock {
            let due = std::time::Duration::from_micros(t.max(0) as u64);
            if let Some(wait) = due.checked_sub(wall_start.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        match kind {
            EventKind::Capture => {
                sim.capture(t);
            }
            EventKind::Ready => sim.write_vision(frame),
            EventKind::Tick => {
                if t > 0 {
                    q_act = q_cmd + (q_act - q_cmd) * decay;
                }
                let stamp = t + sim.jitter();
                if sim.states.len() == STATE_BUFFER {
                    sim.states.pop_front();
                }
                sim.states.push_back(TimestampedSample { capture_us: stamp, value: () });

                let cmd = match mode {
                    Mode::Async => async_command(&mut sim, t - delay_us, t, q0, &w0),
                    Mode::Sync => {
                        if inflight.is_none() {
                            inflight = Some(sim.capture(t));
                        }
                        match inflight {
                            Some(id) if sim.frames[id as usize].ready_us <= t => {
                                inflight = Some(sim.capture(t));
                                let f = &sim.frames[id as usize];
                                Command { q: f.q, issued: true, frame: Some(id), gripper: f.gripper, phase: f.phase }
                            }
                            _ => Command { issued: false, ..last },
                        }
                    }
                };
                q_cmd = cmd.q;
                let sync = match cmd.frame {
                    Some(id) => sim.resolve(id),
                    None => SyncStatus::Stale,
                };
                if phase_seen != Some(cmd.phase) {
                    phase_seen = Some(cmd.phase);
                    sim.events.push(EventRecord::with_words(t, "phase", &[cmd.phase.as_str()]));
                }
                if grip_last != cmd.gripper {
                    grip_last = cmd.gripper;
                    grip_cmds.push_back((t, cmd.gripper));
                }

                let tcp = fk_q(&q_act, &setup.arm);
                if tcp_hist.len() == 3 {
                    tcp_hist.pop_front();
                }
                tcp_hist.push_back(tcp.translation);

                while grip_cmds.front().is_some_and(|g| g.0 + grip_delay_us <= t) {
                    let (_, g) = grip_cmds.pop_front().expect("checked");
                    if g == grip_actual {
                        continue;
                    }
                    grip_actual = g;
                    match g {
                        Gripper::Closed => {
                            let d = distance_to_part(&setup.object, &obj_pose, &tcp.translation);
                            if d <= cfg.attach_radius_mm {
                                held = Some(tcp.inverse().compose(&obj_pose));
                                held_ticks = 0;
                                sim.event(t, "attach", &[d]);
                            } else {
                                sim.event(t, "grasp_miss", &[d]);
                            }
                        }
                        Gripper::Open => {
                            if held.take().is_some() {
                                obj_pose = settle_pose(&obj_pose, &setup.object, setup.table_z);
                                sim.event(t, "release", &[]);
                            }
                        }
                    }
                }
                if let Some(rel) = held {
                    obj_pose = tcp.compose(&rel);
                    held_ticks += 1;
                    if held_ticks >= 3 && tcp_hist.len() == 3 {
                        let a = (tcp_hist[2] - 2.0 * tcp_hist[1] + tcp_hist[0]) / (dt * dt);
                        let load = setup.object.mass * a.norm() * 1e-3;
                        if load > cfg.grip_capacity_n {
                            held = None;
                            obj_pose = settle_pose(&obj_pose, &setup.object, setup.table_z);
                            sim.event(t, "slip", &[load]);
                        }
                    }
                }

                let sigma = manipulability_q(&q_act, &setup.arm);
                let depth = setup.table_z - tcp.translation.z;
                let abort = if sigma < setup.arm.sigma_min() {
                    Some(("singularity", sigma))
                } else if depth > cfg.penetration_abort_mm {
                    Some(("penetration", depth))
                } else {
                    None
                };
                if abort.is_some() && held.take().is_some() {
                    obj_pose = settle_pose(&obj_pose, &setup.object, setup.table_z);
                }

                let (reference, _, _) = setup.plan.sample((t - lead_in_us) as f64 * 1e-6);
                control.push(ControlRecord {
                    t_us: t,
                    issued: cmd.issued,
                    q_cmd,
                    q_act,
                    tcp,
                    reference: reference.translation,
                    object: obj_pose,
                    held: held.is_some(),
                    frame: cmd.frame,
                    sync,
                    phase: cmd.phase,
                    gripper: cmd.gripper,
                });
                last = cmd;
                if let Some((why, v)) = abort {
                    sim.events.push(EventRecord::new(t, "abort", &[v]));
                    sim.events.last_mut().expect("pushed").args.insert(0, why.to_string());
                    break;
                }
            }
        }
    }

    // Frames already visible to control at the last tick still get a record.
    let last_t = control.last().map_or(0, |c| c.t_us);
    for id in 0..sim.frames.len() as u64 {
        if sim.frames[id as usize].ready_us <= last_t {
            sim.write_vision(id);
        }
    }
    let (lo, hi) = setup.object.shape.local_bounds();
    let final_args = obj_pose.to_array();
    sim.event(last_t, "final", &final_args);
    let header = TraceHeader {
        mode,
        latency: lat,
        seed,
        lead_in_us,
        table_z: setup.table_z,
        arm: setup.arm.clone(),
        object_mass: setup.object.mass,
        object_thickness: setup.object.thickness,
        object_bounds: (lo, hi),
        goal: setup.goal,
    };
    Ok(EpisodeTrace { header, control, vision: sim.vision, events: sim.events })
}

/// Spline command for playback time `tau`, or a hold while the window is cold.
fn async_command(sim: &mut Sim<'_>, tau: i64, t: i64, q0: Vector6<f64>, w0: &crate::primitives::Waypoint) -> Command {
    let p = sim.lat.perception_period_us;
    let hold = Command { q: q0, issued: true, frame: None, gripper: w0.gripper, phase: w0.phase };
    if tau <= 0 {
        return hold;
    }
    let k = (tau + p - 1) / p;
    if k < 3 || (k as usize) >= sim.frames.len() || sim.frames[k as usize].ready_us > t {
        return hold;
    }
    let anchors: Vec<(f64, Vector6<f64>)> = (k - 3..=k)
        .map(|j| ((j * p) as f64 * 1e-6, sim.frames[j as usize].q))
        .collect();
    let Ok(w) = SplineWindow::new(&anchors) else { return hold };
    let u = (tau - (k - 1) * p) as f64 / p as f64;
    let tag = &sim.frames[(if u < 0.5 { k - 2 } else { k - 1 }) as usize];
    Command { q: w.eval_u(u).pos, issued: true, frame: Some(k as u64), gripper: tag.gripper, phase: tag.phase }
}

/// Age of the anchor frame driving control at time `t` (seconds), measured
/// from that frame's capture timestamp.
pub fn latest_anchor_frame_age(trace: &EpisodeTrace, t: f64) -> Result<f64, RuntimeError> {
    let t_us = (t * 1e6).round() as i64;
    let i = trace.control.partition_point(|c| c.t_us <= t_us);
    if i == 0 || t_us > trace.control[trace.control.len() - 1].t_us {
        return Err(RuntimeError::OutsideEpisode(t));
    }
    let frame = trace.control[i - 1].frame.ok_or(RuntimeError::ColdWindow { anchors: 0 })?;
    let v = trace
        .vision_frame(frame)
        .ok_or_else(|| RuntimeError::Scenario(format!("frame {frame} has no vision record at {}", fmt_micros(t_us))))?;
    Ok((t_us - v.capture_us) as f64 * 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{perceive, plan_for, scenario_goal, RunOptions};
    use crate::runtime::{parse_trace, write_trace};
    use crate::scenario::Archetype;
    use proptest::prelude::*;

    fn setup(a: Archetype) -> EpisodeSetup {
        let cfg = a.config();
        let opts = RunOptions::default();
        let obj = cfg.object().unwrap();
        let seen = perceive(&cfg, &opts).unwrap();
        let goal = scenario_goal(&cfg, &obj).unwrap();
        let planned = plan_for(&cfg, &obj, &seen, &goal, &opts.planner).unwrap();
        EpisodeSetup::new(ArmModel::default_ur5(), planned.plan, &opts.planner.home_q, obj, 0.0, goal, cfg.face).unwrap()
    }

    fn latency(t_inf_ms: i64, skew_ms: i64) -> LatencyConfig {
        LatencyConfig { t_inf_us: t_inf_ms * 1000, clock_skew_us: skew_ms * 1000, ..LatencyConfig::default() }
    }

    fn run(s: &EpisodeSetup, mode: Mode, lat: LatencyConfig, seed: u64) -> EpisodeTrace {
        run_episode(s, mode, &lat, seed, &RuntimeConfig::default()).unwrap()
    }

    fn issued_times(tr: &EpisodeTrace) -> Vec<i64> {
        tr.control.iter().filter(|c| c.issued).map(|c| c.t_us).collect()
    }

    #[test]
    fn async_issues_on_every_tick() {
        let s = setup(Archetype::Calculator);
        for t_inf in [0, 92, 300, 835] {
            let tr = run(&s, Mode::Async, latency(t_inf, 0), 1);
            assert!(tr.control.iter().all(|c| c.issued));
            assert!(tr.control.windows(2).all(|w| w[1].t_us - w[0].t_us == 20_000));
            assert_eq!(tr.control[0].t_us, 0);
        }
    }

    #[test]
    fn sync_without_latency_matches_async_ticks() {
        let s = setup(Archetype::Phone);
        let a = run(&s, Mode::Async, latency(0, 0), 3);
        let y = run(&s, Mode::Sync, latency(0, 0), 3);
        assert_eq!(issued_times(&a), issued_times(&y));
    }

    #[test]
    fn sync_interval_follows_latency() {
        let s = setup(Archetype::Phone);
        let tr = run(&s, Mode::Sync, latency(300, 0), 3);
        let t = issued_times(&tr);
        assert!(t.len() > 10);
        for w in t.windows(2) {
            let d = w[1] - w[0];
            assert!((300_000..=320_000).contains(&d), "{d}");
        }
    }

    #[test]
    fn cold_start_holds_first_configuration() {
        let s = setup(Archetype::Calculator);
        let tr = run(&s, Mode::Async, latency(92, 0), 1);
        let cold: Vec<_> = tr.control.iter().take_while(|c| c.frame.is_none()).collect();
        assert!(!cold.is_empty());
        assert!(cold.iter().all(|c| c.sync == SyncStatus::Stale && c.q_cmd == s.joint_path[0]));
        let first = tr.control[cold.len()].frame.unwrap();
        assert_eq!(first, 3);
    }

    #[test]
    fn anchor_age_is_bounded_by_latency_plus_period() {
        let s = setup(Archetype::Pcb);
        for t_inf in [0, 92, 300] {
            let tr = run(&s, Mode::Async, latency(t_inf, 0), 2);
            let (lo, hi) = (t_inf as f64 * 1e-3, t_inf as f64 * 1e-3 + 0.1);
            for c in tr.control.iter().filter(|c| c.frame.is_some()) {
                let age = latest_anchor_frame_age(&tr, c.t_us as f64 * 1e-6).unwrap();
                assert!(age >= lo - 1e-9 && age < hi + 1e-9, "T_inf {t_inf}: age {age}");
            }
        }
        let tr = run(&s, Mode::Async, latency(92, 0), 2);
        assert!(matches!(latest_anchor_frame_age(&tr, 0.0), Err(RuntimeError::ColdWindow { .. })));
        assert!(matches!(latest_anchor_frame_age(&tr, 1e4), Err(RuntimeError::OutsideEpisode(_))));
    }

    #[test]
    fn aligned_pairs_respect_epsilon_under_skew() {
        let s = setup(Archetype::Pcb);
        for seed in 0..3 {
            let tr = run(&s, Mode::Async, latency(92, 50), seed);
            assert!(tr.vision.iter().any(|v| v.status == SyncStatus::Rejected));
            for v in &tr.vision {
                if v.status == SyncStatus::Aligned {
                    assert!(v.delta_us.abs() < tr.header.latency.eps_sync_us);
                }
            }
        }
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let s = setup(Archetype::Battery);
        let a = write_trace(&run(&s, Mode::Async, latency(92, 5), 11));
        let b = write_trace(&run(&s, Mode::Async, latency(92, 5), 11));
        let c = write_trace(&run(&s, Mode::Async, latency(92, 5), 12));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn trace_file_round_trips() {
        let s = setup(Archetype::Battery);
        for mode in [Mode::Async, Mode::Sync] {
            let tr = run(&s, mode, latency(92, 20), 4);
            let text = write_trace(&tr);
            let back = parse_trace(&text).unwrap();
            assert_eq!(back, tr);
            assert_eq!(write_trace(&back), text);
        }
    }

    #[test]
    fn trace_parse_errors_name_the_line() {
        let s = setup(Archetype::Calculator);
        let text = write_trace(&run(&s, Mode::Async, latency(92, 0), 1));
        let lines: Vec<&str> = text.lines().collect();
        let c = lines.iter().position(|l| l.starts_with("C ")).unwrap();

        let mut bad = lines.clone();
        bad[c + 1] = "Z what";
        let e = parse_trace(&bad.join("\n")).unwrap_err();
        assert!(e.to_string().contains(&format!("{}", c + 2)), "{e}");

        let mut swapped = lines.clone();
        let d = lines.iter().skip(c + 1).position(|l| l.starts_with("C ")).unwrap() + c + 1;
        swapped.swap(c, d);
        assert!(parse_trace(&swapped.join("\n")).is_err());
    }

    #[test]
    fn settle_and_flip_goal_rest_on_the_table() {
        let s = setup(Archetype::Battery);
        let g = &s.goal;
        assert!((g.rotation * Vector3::z()).z < -0.999);
        assert!((g.translation.z - s.object.thickness).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn trace_parser_never_panics(line in 0usize..400, junk in "[ -~]{0,40}", cut in 0usize..20_000) {
            let text = fixture_text();
            let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
            let i = line % lines.len();
            lines[i] = junk;
            let _ = parse_trace(&lines.join("\n"));
            let end = text.char_indices().nth(cut).map_or(text.len(), |(k, _)| k);
            let _ = parse_trace(&text[..end]);
        }
    }

    fn fixture_text() -> &'static str {
        use std::sync::OnceLock;
        static TEXT: OnceLock<String> = OnceLock::new();
        TEXT.get_or_init(|| {
            let s = setup(Archetype::Pcb);
            let mut tr = run(&s, Mode::Sync, latency(92, 10), 1);
            tr.control.truncate(200);
            write_trace(&tr)
        })
    }
}
