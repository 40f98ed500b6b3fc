//! Action primitives: the affordance-to-primitive mapping and the
//! Cartesian plans for pick-and-place, pivot flip and the aerial flip baseline.
//!
//! Plans are lists of timed TCP waypoints. Every plan is checked against the
//! arm's inverse kinematics before it is returned.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3, Vector6};

use crate::dynamics::{quasi_static_flip_rollout, DynamicsError, PivotConfig, RigidObject, DEFAULT_MU, DEFAULT_STEPS};
use crate::geometry::{AffordanceClass, AffordanceObservation};
use crate::kinematics::{inverse_kinematics, ArmModel, KinematicsError, Pose, RobotState};
use crate::textio::{content_lines, parse_f64, LineError};

/// Largest joint change tolerated between consecutive waypoints before the
/// IK solution is treated as a branch jump.
const MAX_JOINT_STEP: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("unreachable in {phase:?} at t = {t:.3} s: {source}")]
    Unreachable { phase: Phase, t: f64, source: KinematicsError },
    #[error("flip infeasible in {phase:?} at theta = {theta:.4} rad")]
    InfeasibleFlip { phase: Phase, theta: f64 },
    #[error("invalid plan parameters: {0}")]
    InvalidParams(String),
    #[error("plan file {0}")]
    Parse(#[from] LineError),
    #[error(transparent)]
    Dynamics(DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveId {
    StablePickPlace,
    PivotFlip,
    /// Unsupported in-air flip, kept as the comparison baseline.
    DirectFlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gripper {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Approach,
    Grasp,
    Transit,
    Rotate,
    Retract,
    Place,
}

macro_rules! name_enum {
    ($t:ty { $($v:ident),* }) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$v => stringify!($v)),* }
            }
            pub fn parse(s: &str) -> Option<Self> {
                match s { $(stringify!($v) => Some(Self::$v),)* _ => None }
            }
        }
    };
}

name_enum!(PrimitiveId { StablePickPlace, PivotFlip, DirectFlip });
name_enum!(Gripper { Open, Closed });
name_enum!(Phase { Approach, Grasp, Transit, Rotate, Retract, Place });

/// Maps an affordance class to its primitive. The anchor plays no part.
pub fn select_primitive(obs: &AffordanceObservation) -> PrimitiveId {
    match obs.cls {
        AffordanceClass::Front => PrimitiveId::StablePickPlace,
        AffordanceClass::Back => PrimitiveId::PivotFlip,
    }
}

/// Rest-to-rest trapezoidal velocity profile over distance `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapezoidProfile {
    pub d: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub t_total: f64,
    t_acc: f64,
    v_peak: f64,
}

pub fn trapezoid_profile(d: f64, v_max: f64, a_max: f64) -> TrapezoidProfile {
    assert!(d >= 0.0 && v_max > 0.0 && a_max > 0.0, "trapezoid needs d >= 0 and positive limits");
    if d < v_max * v_max / a_max {
        let v_peak = (d * a_max).sqrt();
        let t_acc = v_peak / a_max;
        TrapezoidProfile { d, v_max, a_max, t_total: 2.0 * t_acc, t_acc, v_peak }
    } else {
        TrapezoidProfile { d, v_max, a_max, t_total: d / v_max + v_max / a_max, t_acc: v_max / a_max, v_peak: v_max }
    }
}

impl TrapezoidProfile {
    pub fn is_triangular(&self) -> bool {
        self.v_peak < self.v_max
    }

    pub fn peak_velocity(&self) -> f64 {
        self.v_peak
    }

    pub fn s(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.t_total);
        let (ta, a, vp) = (self.t_acc, self.a_max, self.v_peak);
        if t <= ta {
            0.5 * a * t * t
        } else if t <= self.t_total - ta {
            0.5 * a * ta * ta + vp * (t - ta)
        } else {
            let r = self.t_total - t;
            self.d - 0.5 * a * r * r
        }
    }

    pub fn v(&self, t: f64) -> f64 {
        if t <= 0.0 || t >= self.t_total {
            return 0.0;
        }
        let ta = self.t_acc;
        if t <= ta {
            self.a_max * t
        } else if t <= self.t_total - ta {
            self.v_peak
        } else {
            self.a_max * (self.t_total - t)
        }
    }
}

/// Timed TCP target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub t: f64,
    pub pose: Pose,
    pub gripper: Gripper,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotPlanParams {
    pub theta_pre: f64,
    /// Rim tangent at the anchor, unit, table plane.
    pub tangent: Vector2<f64>,
    /// Point on the pivot line at table height, world mm.
    pub pivot_point: Vector3<f64>,
    pub pivot_dir: Vector2<f64>,
    pub rotate_rate: f64,
    pub friction_mu: f64,
}

impl PivotPlanParams {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.theta_pre > 0.0 && self.theta_pre < PI / 2.0) {
            return Err(PlanError::InvalidParams("pre-tilt must lie in (0, pi/2)".into()));
        }
        if (self.tangent.norm() - 1.0).abs() > 1e-9 || (self.pivot_dir.norm() - 1.0).abs() > 1e-9 {
            return Err(PlanError::InvalidParams("tangent and pivot direction must be unit vectors".into()));
        }
        if !(self.rotate_rate.is_finite() && self.rotate_rate > 0.0) {
            return Err(PlanError::InvalidParams("rotate rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanParams {
    PickPlace { v_max: f64, a_max: f64 },
    Pivot(PivotPlanParams),
    Direct { lift: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimitivePlan {
    pub id: PrimitiveId,
    pub waypoints: Vec<Waypoint>,
    pub params: PlanParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub v_max: f64,
    pub a_max: f64,
    pub approach_height: f64,
    /// Height the aerial baseline lifts the part before rolling it.
    pub direct_lift: f64,
    pub gripper_delay: f64,
    pub rotate_rate: f64,
    pub theta_pre: f64,
    pub waypoint_dt: f64,
    pub table_z: f64,
    pub arm: ArmModel,
    pub home_q: Vector6<f64>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            v_max: 100.0,
            a_max: 200.0,
            approach_height: 80.0,
            direct_lift: 200.0,
            gripper_delay: 0.2,
            rotate_rate: 0.5,
            theta_pre: 10f64.to_radians(),
            waypoint_dt: 0.1,
            table_z: 0.0,
            arm: ArmModel::default_ur5(),
            home_q: Vector6::new(0.0, -PI / 2.0, PI / 2.0, -PI / 2.0, -PI / 2.0, 0.0),
        }
    }
}

impl PlannerConfig {
    fn dwell(&self) -> f64 {
        self.gripper_delay + self.waypoint_dt
    }
}

/// Tool pointing straight down.
pub fn tool_down() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

fn rot(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// Rigidly rotates `pose` by `angle` about the line through `point` along `axis`.
fn rotate_about_line(pose: &Pose, point: &Vector3<f64>, axis: &Vector3<f64>, angle: f64) -> Pose {
    let r = rot(axis, angle);
    Pose { rotation: r * pose.rotation, translation: point + r * (pose.translation - point) }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

struct Builder<'a> {
    cfg: &'a PlannerConfig,
    wps: Vec<Waypoint>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a PlannerConfig, start: Pose, phase: Phase) -> Self {
        Self { cfg, wps: vec![Waypoint { t: 0.0, pose: start, gripper: Gripper::Open, phase }] }
    }

    fn last(&self) -> Waypoint {
        *self.wps.last().expect("builder starts with a waypoint")
    }

    /// Samples `f(τ)` for τ in (0, duration] at the waypoint rate, always
    /// including the exact endpoint.
    fn segment(&mut self, duration: f64, phase: Phase, gripper: Gripper, f: impl Fn(f64) -> Pose) {
        if duration <= 0.0 {
            return;
        }
        let t0 = self.last().t;
        let dt = self.cfg.waypoint_dt;
        let mut k = 1;
        while (k as f64) * dt < duration - 1e-9 {
            let tau = k as f64 * dt;
            self.wps.push(Waypoint { t: t0 + tau, pose: f(tau), gripper, phase });
            k += 1;
        }
        self.wps.push(Waypoint { t: t0 + duration, pose: f(duration), gripper, phase });
    }

    fn dwell(&mut self, duration: f64, phase: Phase, gripper: Gripper) {
        let p = self.last().pose;
        self.segment(duration, phase, gripper, |_| p);
    }

    /// Straight-line move with a trapezoidal speed profile and orientation
    /// slerped on the same normalized progress.
    fn move_to(&mut self, target: Pose, phase: Phase, gripper: Gripper) {
        let start = self.last().pose;
        let d = start.distance_to(&target);
        let angle = start.angle_to(&target);
        let prof = trapezoid_profile(d, self.cfg.v_max, self.cfg.a_max);
        let t_rot = angle / self.cfg.rotate_rate * 1.5;
        let duration = prof.t_total.max(t_rot);
        if duration <= 0.0 {
            return;
        }
        let r0 = Rotation3::from_matrix_unchecked(start.rotation);
        let r1 = Rotation3::from_matrix_unchecked(target.rotation);
        let stretch = prof.t_total / duration;
        self.segment(duration, phase, gripper, |tau| {
            let sigma = if d > 0.0 { prof.s(tau * stretch) / d } else { smoothstep(tau / duration) };
            Pose {
                rotation: r0.slerp(&r1, sigma).into_inner(),
                translation: start.translation + (target.translation - start.translation) * sigma,
            }
        });
    }

    /// Constant-rate rotation of the current pose about a line.
    fn arc(&mut self, point: Vector3<f64>, axis: Vector3<f64>, angle: f64, rate: f64, phase: Phase, gripper: Gripper) {
        let base = self.last().pose;
        self.segment(angle.abs() / rate, phase, gripper, |tau| {
            rotate_about_line(&base, &point, &axis, angle.signum() * rate * tau)
        });
    }

    /// Moves one joint by `delta` at the rotate rate, emitting the resulting
    /// forward-kinematics poses.
    fn joint_sweep(&mut self, q0: Vector6<f64>, joint: usize, delta: f64, phase: Phase, gripper: Gripper) {
        let rate = self.cfg.rotate_rate;
        let arm = self.cfg.arm.clone();
        self.segment(delta.abs() / rate, phase, gripper, |tau| {
            let mut q = q0;
            q[joint] += delta.signum() * rate * tau;
            crate::kinematics::fk_q(&q, &arm)
        });
    }

    fn finish(self, id: PrimitiveId, params: PlanParams) -> Result<PrimitivePlan, PlanError> {
        let plan = PrimitivePlan { id, waypoints: self.wps, params };
        plan.joint_path(&self.cfg.arm, &self.cfg.home_q)?;
        Ok(plan)
    }
}

impl PrimitivePlan {
    pub fn duration(&self) -> f64 {
        self.waypoints.last().map_or(0.0, |w| w.t)
    }

    pub fn phases(&self) -> Vec<Phase> {
        let mut out: Vec<Phase> = Vec::new();
        for w in &self.waypoints {
            if out.last() != Some(&w.phase) {
                out.push(w.phase);
            }
        }
        out
    }

    /// Interpolated TCP pose and the gripper/phase tags of the waypoint at or
    /// before `t` (clamped to the plan's span).
    pub fn sample(&self, t: f64) -> (Pose, Gripper, Phase) {
        let w = &self.waypoints;
        if t <= w[0].t {
            return (w[0].pose, w[0].gripper, w[0].phase);
        }
        let last = w[w.len() - 1];
        if t >= last.t {
            return (last.pose, last.gripper, last.phase);
        }
        let i = w.partition_point(|p| p.t <= t) - 1;
        let (a, b) = (w[i], w[i + 1]);
        let s = (t - a.t) / (b.t - a.t);
        let ra = Rotation3::from_matrix_unchecked(a.pose.rotation);
        let rb = Rotation3::from_matrix_unchecked(b.pose.rotation);
        let pose = Pose {
            rotation: ra.slerp(&rb, s).into_inner(),
            translation: a.pose.translation.lerp(&b.pose.translation, s),
        };
        (pose, a.gripper, a.phase)
    }

    /// Sequential IK over every waypoint, seeded from `seed`. Fails on the
    /// first unreachable waypoint or on a joint-space jump between neighbours.
    pub fn joint_path(&self, arm: &ArmModel, seed: &Vector6<f64>) -> Result<Vec<Vector6<f64>>, PlanError> {
        let mut out = Vec::with_capacity(self.waypoints.len());
        let mut q = *seed;
        for (i, w) in self.waypoints.iter().enumerate() {
            let s = inverse_kinematics(&w.pose, &RobotState::at_rest(q), arm)
                .map_err(|source| PlanError::Unreachable { phase: w.phase, t: w.t, source })?;
            if i > 0 && (s.q - q).amax() > MAX_JOINT_STEP {
                return Err(PlanError::Unreachable {
                    phase: w.phase,
                    t: w.t,
                    source: KinematicsError::NoConvergence { residual_mm: 0.0, residual_deg: 0.0 },
                });
            }
            q = s.q;
            out.push(q);
        }
        Ok(out)
    }

    /// Largest TCP speed between consecutive waypoints, mm/s.
    pub fn peak_waypoint_speed(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|p| p[0].pose.distance_to(&p[1].pose) / (p[1].t - p[0].t))
            .fold(0.0, f64::max)
    }
}

fn check_cfg(cfg: &PlannerConfig) -> Result<(), PlanError> {
    let pos = [cfg.v_max, cfg.a_max, cfg.rotate_rate, cfg.waypoint_dt];
    if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(PlanError::InvalidParams("speeds, accelerations and rates must be positive".into()));
    }
    if !(cfg.approach_height >= 0.0 && cfg.gripper_delay >= 0.0) {
        return Err(PlanError::InvalidParams("approach height and gripper delay must be non-negative".into()));
    }
    Ok(())
}

/// Top-down pick at `anchor_world`, carry to `goal` (TCP pose at release).
pub fn plan_pick_place(anchor_world: &Vector3<f64>, goal: &Pose, cfg: &PlannerConfig) -> Result<PrimitivePlan, PlanError> {
    check_cfg(cfg)?;
    let up = Vector3::new(0.0, 0.0, cfg.approach_height);
    let grasp = Pose::new(tool_down(), *anchor_world);
    let mut b = Builder::new(cfg, Pose::new(tool_down(), anchor_world + up), Phase::Approach);
    b.move_to(grasp, Phase::Approach, Gripper::Open);
    b.dwell(cfg.dwell(), Phase::Grasp, Gripper::Closed);
    let same = grasp.distance_to(goal) < 1e-9 && grasp.angle_to(goal) < 1e-12;
    if !same {
        b.move_to(Pose::new(grasp.rotation, grasp.translation + up), Phase::Transit, Gripper::Closed);
        b.move_to(Pose::new(goal.rotation, goal.translation + up), Phase::Transit, Gripper::Closed);
        b.move_to(*goal, Phase::Transit, Gripper::Closed);
    }
    b.dwell(cfg.dwell(), Phase::Place, Gripper::Open);
    let end = b.last().pose;
    b.move_to(Pose::new(end.rotation, end.translation + up), Phase::Retract, Gripper::Open);
    b.finish(PrimitiveId::StablePickPlace, PlanParams::PickPlace { v_max: cfg.v_max, a_max: cfg.a_max })
}

/// Flip-plane frame of a pivot flip: foot of the grasp on the pivot line,
/// lifting rotation axis and the tool orientation at θ = 0.
struct FlipFrame {
    foot: Vector3<f64>,
    axis: Vector3<f64>,
    grasp_pose: Pose,
}

fn flip_frame(anchor_world: &Vector3<f64>, params: &PivotPlanParams) -> Result<FlipFrame, PlanError> {
    let d = Vector3::new(params.pivot_dir.x, params.pivot_dir.y, 0.0);
    let rel = anchor_world - params.pivot_point;
    let foot = params.pivot_point + d * rel.dot(&d);
    let radial = anchor_world - foot;
    let lever = radial.norm();
    if lever < 1e-9 {
        return Err(PlanError::InvalidParams("anchor lies on the pivot line".into()));
    }
    let u = radial / lever;
    let axis = u.cross(&Vector3::z());
    let z = -u;
    let y = axis.normalize();
    let x = y.cross(&z);
    Ok(FlipFrame { foot, axis: y, grasp_pose: Pose::new(Matrix3::from_columns(&[x, y, z]), *anchor_world) })
}

/// Four-phase flip about a support line: tangential approach, pivoting
/// grasp with pre-tilt, leverage rotation to π, release and vertical retract.
pub fn plan_pivot_flip(
    anchor_world: &Vector3<f64>,
    params: &PivotPlanParams,
    obj: &RigidObject,
    cfg: &PlannerConfig,
) -> Result<PrimitivePlan, PlanError> {
    check_cfg(cfg)?;
    params.validate()?;
    let ff = flip_frame(anchor_world, params)?;
    let lever = (anchor_world - ff.foot).norm();
    if lever * params.rotate_rate > cfg.v_max + 1e-9 {
        return Err(PlanError::InvalidParams(format!(
            "rim speed {:.1} mm/s exceeds v_max",
            lever * params.rotate_rate
        )));
    }

    let local = obj.shape.frame().inverse_apply(nalgebra::Point2::new(anchor_world.x, anchor_world.y));
    let pc = PivotConfig {
        pivot_point: params.pivot_point,
        pivot_dir: params.pivot_dir,
        grasp_point: Vector3::new(local.x, local.y, anchor_world.z - params.pivot_point.z),
        friction_mu: params.friction_mu,
        theta: 0.0,
        torque_margin: crate::dynamics::DEFAULT_TORQUE_MARGIN,
    };
    match quasi_static_flip_rollout(obj, &pc, DEFAULT_STEPS, None) {
        Ok(_) => {}
        Err(DynamicsError::FrictionConeViolation { theta }) => {
            let phase = if theta < params.theta_pre { Phase::Grasp } else { Phase::Rotate };
            return Err(PlanError::InfeasibleFlip { phase, theta });
        }
        Err(e) => return Err(PlanError::Dynamics(e)),
    }

    let t3 = Vector3::new(params.tangent.x, params.tangent.y, 0.0);
    let dir = t3 * params.theta_pre.cos() - Vector3::z() * params.theta_pre.sin();
    let start = Pose::new(ff.grasp_pose.rotation, anchor_world - dir * cfg.approach_height);
    let mut b = Builder::new(cfg, start, Phase::Approach);
    b.move_to(ff.grasp_pose, Phase::Approach, Gripper::Open);
    b.dwell(cfg.dwell(), Phase::Grasp, Gripper::Closed);
    b.arc(ff.foot, ff.axis, params.theta_pre, params.rotate_rate, Phase::Grasp, Gripper::Closed);
    b.arc(ff.foot, ff.axis, PI - params.theta_pre, params.rotate_rate, Phase::Rotate, Gripper::Closed);
    b.dwell(cfg.dwell(), Phase::Place, Gripper::Open);
    let end = b.last().pose;
    b.move_to(
        Pose::new(end.rotation, end.translation + Vector3::new(0.0, 0.0, cfg.approach_height)),
        Phase::Retract,
        Gripper::Open,
    );
    b.finish(PrimitiveId::PivotFlip, PlanParams::Pivot(*params))
}

/// Aerial flip baseline: top grasp at the anchor, lift, turn the part over
/// with the wrist (joint 5 swept through π, which passes the aligned-wrist
/// configuration), yaw π with joint 6, then set down with the TCP at `goal`.
pub fn plan_direct_flip(anchor_world: &Vector3<f64>, goal: &Vector3<f64>, cfg: &PlannerConfig) -> Result<PrimitivePlan, PlanError> {
    check_cfg(cfg)?;
    let up = Vector3::new(0.0, 0.0, cfg.approach_height);
    let lift = Vector3::new(0.0, 0.0, cfg.direct_lift);
    let grasp = Pose::new(tool_down(), *anchor_world);
    let mut b = Builder::new(cfg, Pose::new(tool_down(), anchor_world + up), Phase::Approach);
    b.move_to(grasp, Phase::Approach, Gripper::Open);
    b.dwell(cfg.dwell(), Phase::Grasp, Gripper::Closed);
    b.move_to(Pose::new(grasp.rotation, grasp.translation + lift), Phase::Transit, Gripper::Closed);
    let partial = PrimitivePlan { id: PrimitiveId::DirectFlip, waypoints: b.wps.clone(), params: PlanParams::Direct { lift: cfg.direct_lift } };
    let q0 = *partial.joint_path(&cfg.arm, &cfg.home_q)?.last().expect("plan has waypoints");
    // Sweep toward and through zero so the wrist passes its aligned configuration.
    let wrist = if q0[4] <= 0.0 { PI } else { -PI };
    b.joint_sweep(q0, 4, wrist, Phase::Rotate, Gripper::Closed);
    let mut q1 = q0;
    q1[4] += wrist;
    b.joint_sweep(q1, 5, PI, Phase::Rotate, Gripper::Closed);
    let held = b.last().pose;
    b.move_to(Pose::new(held.rotation, goal + lift), Phase::Transit, Gripper::Closed);
    b.move_to(Pose::new(held.rotation, *goal), Phase::Transit, Gripper::Closed);
    b.dwell(cfg.dwell(), Phase::Place, Gripper::Open);
    let end = b.last().pose;
    b.move_to(Pose::new(end.rotation, end.translation + up), Phase::Retract, Gripper::Open);
    b.finish(PrimitiveId::DirectFlip, PlanParams::Direct { lift: cfg.direct_lift })
}

impl PivotPlanParams {
    /// Derives the flip parameters from the part: rim tangent at the anchor
    /// and the support line behind the centroid.
    pub fn from_object(obj: &RigidObject, anchor: nalgebra::Point2<f64>, table_z: f64, cfg: &PlannerConfig) -> Result<Self, PlanError> {
        let tangent = crate::geometry::rim_tangent(&obj.shape, anchor)
            .map_err(|e| PlanError::Dynamics(DynamicsError::Geometry(e)))?;
        let (p, d) = crate::dynamics::place_pivot(&obj.shape, anchor).map_err(PlanError::Dynamics)?;
        Ok(Self {
            theta_pre: cfg.theta_pre,
            tangent,
            pivot_point: Vector3::new(p.x, p.y, table_z),
            pivot_dir: d,
            rotate_rate: cfg.rotate_rate,
            friction_mu: DEFAULT_MU,
        })
    }
}

/// One header line (`plan <id>`), one `params` line, then one line per
/// waypoint: `t r00 r01 r02 r10 r11 r12 r20 r21 r22 x y z gripper phase`.
pub fn write_plan(plan: &PrimitivePlan) -> String {
    let mut out = format!("plan {}\n", plan.id.as_str());
    match plan.params {
        PlanParams::PickPlace { v_max, a_max } => {
            let _ = writeln!(out, "params pick {v_max} {a_max}");
        }
        PlanParams::Pivot(p) => {
            let _ = writeln!(
                out,
                "params pivot {} {} {} {} {} {} {} {} {} {}",
                p.theta_pre, p.tangent.x, p.tangent.y, p.pivot_point.x, p.pivot_point.y, p.pivot_point.z,
                p.pivot_dir.x, p.pivot_dir.y, p.rotate_rate, p.friction_mu
            );
        }
        PlanParams::Direct { lift } => {
            let _ = writeln!(out, "params direct {lift}");
        }
    }
    for w in &plan.waypoints {
        let _ = write!(out, "{}", w.t);
        for v in w.pose.to_array() {
            let _ = write!(out, " {v}");
        }
        let _ = writeln!(out, " {} {}", w.gripper.as_str(), w.phase.as_str());
    }
    out
}

pub fn parse_plan(text: &str) -> Result<PrimitivePlan, PlanError> {
    let mut lines = content_lines(text);
    let (ln, head) = lines.next().ok_or_else(|| LineError::new(1, "empty plan"))?;
    let id = head
        .strip_prefix("plan ")
        .and_then(|s| PrimitiveId::parse(s.trim()))
        .ok_or_else(|| LineError::new(ln, "expected `plan <id>`"))?;
    let (ln, pl) = lines.next().ok_or_else(|| LineError::new(ln, "missing params line"))?;
    let toks: Vec<&str> = pl.split_whitespace().collect();
    let nums = |n: usize| -> Result<Vec<f64>, LineError> {
        if toks.len() != n + 2 {
            return Err(LineError::new(ln, format!("params line needs {n} values")));
        }
        toks[2..].iter().map(|t| parse_f64(t, ln, "parameter")).collect()
    };
    let params = match (toks.first().copied(), toks.get(1).copied()) {
        (Some("params"), Some("pick")) => {
            let v = nums(2)?;
            PlanParams::PickPlace { v_max: v[0], a_max: v[1] }
        }
        (Some("params"), Some("pivot")) => {
            let v = nums(10)?;
            PlanParams::Pivot(PivotPlanParams {
                theta_pre: v[0],
                tangent: Vector2::new(v[1], v[2]),
                pivot_point: Vector3::new(v[3], v[4], v[5]),
                pivot_dir: Vector2::new(v[6], v[7]),
                rotate_rate: v[8],
                friction_mu: v[9],
            })
        }
        (Some("params"), Some("direct")) => {
            let v = nums(1)?;
            PlanParams::Direct { lift: v[0] }
        }
        _ => return Err(LineError::new(ln, "expected `params pick|pivot|direct ...`").into()),
    };
    let mut waypoints: Vec<Waypoint> = Vec::new();
    for (ln, l) in lines {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 15 {
            return Err(LineError::new(ln, "waypoint needs 15 fields").into());
        }
        let t = parse_f64(toks[0], ln, "time")?;
        let mut a = [0.0; 12];
        for (i, slot) in a.iter_mut().enumerate() {
            *slot = parse_f64(toks[1 + i], ln, "pose")?;
        }
        let pose = Pose::from_array(&a);
        if pose.orthonormality_error() > 1e-6 {
            return Err(LineError::new(ln, "rotation is not orthonormal").into());
        }
        let gripper = Gripper::parse(toks[13]).ok_or_else(|| LineError::new(ln, "gripper must be Open or Closed"))?;
        let phase = Phase::parse(toks[14]).ok_or_else(|| LineError::new(ln, "unknown phase"))?;
        if waypoints.last().is_some_and(|w| w.t >= t) {
            return Err(LineError::new(ln, "waypoint times must increase").into());
        }
        waypoints.push(Waypoint { t, pose, gripper, phase });
    }
    if waypoints.is_empty() {
        return Err(LineError::new(ln, "plan has no waypoints").into());
    }
    Ok(PrimitivePlan { id, waypoints, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{centroid, rect_polygon, AnchorUnit, PlanarShape, Pose2};
    use crate::kinematics::fk_q;
    use nalgebra::Point2;

    fn obs(cls: AffordanceClass, x: f64, y: f64) -> AffordanceObservation {
        AffordanceObservation { cls, anchor: Point2::new(x, y), unit: AnchorUnit::Millimeter, timestamp: 0.0 }
    }

    /// A reachable spot in front of the default arm at home.
    fn workspace_point(cfg: &PlannerConfig) -> Vector3<f64> {
        let p = fk_q(&cfg.home_q, &cfg.arm).translation;
        Vector3::new(p.x, p.y, cfg.table_z)
    }

    #[test]
    fn selection_follows_class_only() {
        assert_eq!(select_primitive(&obs(AffordanceClass::Front, 120.0, 80.0)), PrimitiveId::StablePickPlace);
        assert_eq!(select_primitive(&obs(AffordanceClass::Back, 10.0, 200.0)), PrimitiveId::PivotFlip);
        for (x, y) in [(0.0, 0.0), (-5.0, 1e6), (3.0, -7.0)] {
            assert_eq!(select_primitive(&obs(AffordanceClass::Back, x, y)), PrimitiveId::PivotFlip);
        }
    }

    #[test]
    fn trapezoid_closed_forms() {
        let z = trapezoid_profile(0.0, 50.0, 100.0);
        assert_eq!(z.t_total, 0.0);
        assert_eq!(z.s(1.0), 0.0);
        let p = trapezoid_profile(100.0, 50.0, 100.0);
        assert!(!p.is_triangular());
        assert!((p.t_total - 2.5).abs() < 1e-12);
        assert!((p.s(p.t_total) - 100.0).abs() < 1e-12);
        let t = trapezoid_profile(10.0, 50.0, 100.0);
        assert!(t.is_triangular());
        assert!((t.peak_velocity() - 1000f64.sqrt()).abs() < 1e-12);
        assert!((t.peak_velocity() - 31.62).abs() < 0.01);
    }

    #[test]
    fn trapezoid_limits_hold() {
        for &(d, v, a) in &[(100.0, 50.0, 100.0), (10.0, 50.0, 100.0), (333.0, 80.0, 35.0)] {
            let p = trapezoid_profile(d, v, a);
            let n = 2000;
            let h = p.t_total / n as f64;
            assert_eq!(p.v(0.0), 0.0);
            assert_eq!(p.v(p.t_total), 0.0);
            let mut prev_v = 0.0;
            for k in 1..=n {
                let t = k as f64 * h;
                let ds = (p.s(t) - p.s(t - h)) / h;
                assert!(ds <= v + 1e-9);
                assert!(p.v(t) <= v + 1e-12);
                assert!(((p.v(t) - prev_v) / h).abs() <= a * (1.0 + 1e-9) + 1e-6);
                prev_v = p.v(t);
            }
        }
    }

    #[test]
    fn pick_place_basic_properties() {
        let cfg = PlannerConfig::default();
        let a = workspace_point(&cfg);
        let goal = Pose::new(tool_down(), a + Vector3::new(0.0, 120.0, 0.0));
        let plan = plan_pick_place(&a, &goal, &cfg).unwrap();
        assert_eq!(plan.phases(), vec![Phase::Approach, Phase::Grasp, Phase::Transit, Phase::Place, Phase::Retract]);
        assert!(plan.peak_waypoint_speed() <= cfg.v_max + 1e-9);
        assert!(plan.waypoints.windows(2).all(|w| w[1].t > w[0].t));
        let first_contact = plan.waypoints.iter().find(|w| w.phase == Phase::Grasp).unwrap();
        assert!((first_contact.pose.translation - a).norm() < 1e-9);
        plan.joint_path(&cfg.arm, &cfg.home_q).unwrap();
    }

    #[test]
    fn pick_place_in_place_has_no_transit() {
        let cfg = PlannerConfig::default();
        let a = workspace_point(&cfg);
        let plan = plan_pick_place(&a, &Pose::new(tool_down(), a), &cfg).unwrap();
        assert_eq!(plan.phases(), vec![Phase::Approach, Phase::Grasp, Phase::Place, Phase::Retract]);
    }

    #[test]
    fn pick_place_above_centroid() {
        let cfg = PlannerConfig::default();
        let w = workspace_point(&cfg);
        let s = PlanarShape::from_polygon(rect_polygon(-40.0, -20.0, 40.0, 20.0), vec![], 1.0)
            .unwrap()
            .with_frame(Pose2::new(w.x, w.y, 0.4));
        let c = centroid(&s).unwrap().c_geo;
        let a = Vector3::new(c.x, c.y, 10.0);
        let plan = plan_pick_place(&a, &Pose::new(tool_down(), a + Vector3::new(50.0, 0.0, 0.0)), &cfg).unwrap();
        let first = plan.waypoints[0].pose.translation;
        assert!((first.x - c.x).abs() < 1e-9 && (first.y - c.y).abs() < 1e-9);
    }

    fn battery_like(cfg: &PlannerConfig) -> (RigidObject, Vector3<f64>, PivotPlanParams) {
        let w = workspace_point(cfg);
        // Part along the base-radial direction, grasp end nearest the base.
        let radial = Vector2::new(w.x, w.y).normalize();
        let yaw = (-radial.y).atan2(-radial.x);
        let s = PlanarShape::from_polygon(rect_polygon(0.0, -25.0, 150.0, 25.0), vec![], 1.0)
            .unwrap()
            .with_frame(Pose2::new(w.x + radial.x * 75.0, w.y + radial.y * 75.0, yaw));
        let obj = RigidObject::new(s, 1.2, Vector3::new(30.0, 0.0, 15.0), 30.0).unwrap();
        let anchor = obj.shape.frame().apply(Point2::new(150.0, 0.0));
        let params = PivotPlanParams::from_object(&obj, anchor, cfg.table_z, cfg).unwrap();
        (obj, Vector3::new(anchor.x, anchor.y, cfg.table_z), params)
    }

    #[test]
    fn pivot_flip_phases_arc_and_timing() {
        let cfg = PlannerConfig::default();
        let (obj, anchor, params) = battery_like(&cfg);
        let plan = plan_pivot_flip(&anchor, &params, &obj, &cfg).unwrap();
        let phases = plan.phases();
        assert_eq!(phases[0], Phase::Approach);
        let pos = |p: Phase| phases.iter().position(|&x| x == p).unwrap();
        assert!(pos(Phase::Approach) < pos(Phase::Grasp) && pos(Phase::Grasp) < pos(Phase::Rotate) && pos(Phase::Rotate) < pos(Phase::Retract));

        let rot: Vec<&Waypoint> = plan.waypoints.iter().filter(|w| w.phase == Phase::Rotate).collect();
        assert!(rot.iter().all(|w| w.gripper == Gripper::Closed));
        let d = Vector3::new(params.pivot_dir.x, params.pivot_dir.y, 0.0);
        let dist = |p: &Vector3<f64>| (p - params.pivot_point).cross(&d).norm();
        let (lo, hi) = rot.iter().map(|w| dist(&w.pose.translation)).fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(x), b.max(x)));
        assert!(hi - lo <= 0.1);

        let start = plan.waypoints.iter().rposition(|w| w.phase == Phase::Grasp).unwrap();
        let dur = rot.last().unwrap().t - plan.waypoints[start].t;
        assert!((dur - (PI - 10f64.to_radians()) / 0.5).abs() < 1e-9);
        assert!((dur - 5.93).abs() < 0.01);

        let a0 = plan.waypoints[0].pose.translation;
        let a1 = plan.waypoints.iter().rfind(|w| w.phase == Phase::Approach).unwrap().pose.translation;
        let h = Vector2::new(a1.x - a0.x, a1.y - a0.y).normalize();
        assert!((h.x * params.tangent.y - h.y * params.tangent.x).abs() < 1e-9);

        let last = plan.waypoints.len() - 1;
        let lift = plan.waypoints[last].pose.translation - plan.waypoints[last - 1].pose.translation;
        assert!(lift.x.abs() < 1e-9 && lift.y.abs() < 1e-9 && lift.z > 0.0);
    }

    #[test]
    fn pivot_flip_rejects_slipping_contact() {
        let cfg = PlannerConfig::default();
        let (obj, anchor, mut params) = battery_like(&cfg);
        params.friction_mu = 0.0;
        assert!(matches!(plan_pivot_flip(&anchor, &params, &obj, &cfg), Err(PlanError::InfeasibleFlip { .. })));
    }

    #[test]
    fn direct_flip_passes_wrist_alignment() {
        let cfg = PlannerConfig::default();
        let (_, anchor, _) = battery_like(&cfg);
        let top = anchor + Vector3::new(0.0, 0.0, 30.0);
        let plan = plan_direct_flip(&top, &top, &cfg).unwrap();
        let qs = plan.joint_path(&cfg.arm, &cfg.home_q).unwrap();
        let worst = qs.iter().map(|q| crate::kinematics::manipulability_q(q, &cfg.arm)).fold(f64::INFINITY, f64::min);
        assert!(worst < cfg.arm.sigma_min(), "{worst}");
        let first = plan.waypoints.iter().find(|w| w.phase == Phase::Grasp).unwrap().pose;
        let last = plan.waypoints.iter().rfind(|w| w.phase == Phase::Rotate).unwrap().pose;
        // Wrist flip plus yaw leaves the tool pointing up.
        assert!(first.rotation[(2, 2)] < -0.999 && last.rotation[(2, 2)] > 0.999);
        assert_eq!(parse_plan(&write_plan(&plan)).unwrap(), plan);
    }

    #[test]
    fn out_of_reach_is_unreachable() {
        let cfg = PlannerConfig::default();
        let far = Vector3::new(3000.0, 0.0, 0.0);
        assert!(matches!(plan_pick_place(&far, &Pose::new(tool_down(), far), &cfg), Err(PlanError::Unreachable { .. })));
    }

    #[test]
    fn plans_round_trip_bit_exact() {
        let cfg = PlannerConfig::default();
        let (obj, anchor, params) = battery_like(&cfg);
        let plan = plan_pivot_flip(&anchor, &params, &obj, &cfg).unwrap();
        let text = write_plan(&plan);
        let back = parse_plan(&text).unwrap();
        assert_eq!(back, plan);
        assert_eq!(write_plan(&back), text);
        let again = plan_pivot_flip(&anchor, &params, &obj, &cfg).unwrap();
        assert_eq!(write_plan(&again), text);
    }

    #[test]
    fn parse_plan_errors() {
        assert!(parse_plan("").is_err());
        assert!(parse_plan("plan Nope\nparams pick 1 2\n").is_err());
        assert!(parse_plan("plan PivotFlip\nparams pick 1 2\n").is_err());
        let wp = "0 1 0 0 0 1 0 0 0 1 0 0 0 Open Approach";
        assert!(parse_plan(&format!("plan StablePickPlace\nparams pick 1 2\n{wp}\n{wp}\n")).is_err());
        assert!(parse_plan(&format!("plan StablePickPlace\nparams pick 1 2\n{wp}\n")).is_ok());
    }
}
