//! Quasi-static torque bookkeeping for flipping a part about a support line.
//!
//! Everything is reduced to the vertical plane perpendicular to the pivot
//! line. In that plane `u` is horizontal, pointing from the pivot into the
//! part, and `z` is up. The part rotates counterclockwise (its body rises)
//! as the flip angle θ goes from 0 (flat) to π (turned over). Moments are
//! taken about the pivot axis; a positive gravity torque resists the flip.

use std::fmt::Write as _;

use nalgebra::{Point2, Vector2, Vector3};

use crate::geometry::{centroid, GeometryError, PlanarShape};
use crate::kinematics::{contact_jacobian, ArmModel, RobotState};

pub const GRAVITY: f64 = 9.81;
pub const DEFAULT_MU: f64 = 0.5;
pub const DEFAULT_TORQUE_MARGIN: f64 = 0.05;
pub const DEFAULT_STEPS: usize = 360;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("friction cone violated at theta = {theta:.4} rad")]
    FrictionConeViolation { theta: f64 },
    #[error("grasp lies on the pivot axis")]
    ZeroLeverArm,
    #[error("support reaction is pulling (normal {normal:.4} N)")]
    NegativeNormal { normal: f64 },
    #[error("invalid object: {0}")]
    InvalidObject(String),
    #[error("invalid pivot config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Prismatic part: top-view silhouette extruded by `thickness`. Object frame
/// is the silhouette frame with `z` up from the bottom face.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidObject {
    pub shape: PlanarShape,
    pub mass: f64,
    pub com: Vector3<f64>,
    pub thickness: f64,
}

impl RigidObject {
    pub fn new(shape: PlanarShape, mass: f64, com: Vector3<f64>, thickness: f64) -> Result<Self, DynamicsError> {
        if !(mass.is_finite() && mass >= 0.0) {
            return Err(DynamicsError::InvalidObject("mass must be non-negative".into()));
        }
        if !(thickness.is_finite() && thickness > 0.0) {
            return Err(DynamicsError::InvalidObject("thickness must be positive".into()));
        }
        let (lo, hi) = shape.local_bounds();
        let tol = 1e-9;
        if com.x < lo.x - tol || com.x > hi.x + tol || com.y < lo.y - tol || com.y > hi.y + tol || com.z < -tol || com.z > thickness + tol {
            return Err(DynamicsError::InvalidObject("centre of mass lies outside the bounding box".into()));
        }
        Ok(Self { shape, mass, com, thickness })
    }

    /// Uniform-density part: centre of mass at the silhouette centroid, mid-height.
    pub fn uniform(shape: PlanarShape, mass: f64, thickness: f64) -> Result<Self, DynamicsError> {
        let c = shape.frame().inverse_apply(centroid(&shape)?.c_geo);
        Self::new(shape, mass, Vector3::new(c.x, c.y, thickness / 2.0), thickness)
    }

    /// World position of an object-frame point, with the bottom face at `table_z`.
    pub fn to_world(&self, p: &Vector3<f64>, table_z: f64) -> Vector3<f64> {
        let w = self.shape.frame().apply(Point2::new(p.x, p.y));
        Vector3::new(w.x, w.y, table_z + p.z)
    }
}

/// Pivot line, grasp and contact parameters for one flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotConfig {
    /// A point on the pivot line, world mm; its `z` is the support height.
    pub pivot_point: Vector3<f64>,
    /// Horizontal unit direction of the pivot line.
    pub pivot_dir: Vector2<f64>,
    /// Grasp point in the object frame, mm.
    pub grasp_point: Vector3<f64>,
    pub friction_mu: f64,
    pub theta: f64,
    pub torque_margin: f64,
}

impl PivotConfig {
    pub fn new(pivot_point: Vector3<f64>, pivot_dir: Vector2<f64>, grasp_point: Vector3<f64>) -> Self {
        Self {
            pivot_point,
            pivot_dir: pivot_dir.normalize(),
            grasp_point,
            friction_mu: DEFAULT_MU,
            theta: 0.0,
            torque_margin: DEFAULT_TORQUE_MARGIN,
        }
    }

    pub fn at(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(0.0..=std::f64::consts::PI).contains(&self.theta) {
            return Err(DynamicsError::InvalidConfig("theta must lie in [0, pi]".into()));
        }
        if !(self.friction_mu.is_finite() && self.friction_mu >= 0.0) {
            return Err(DynamicsError::InvalidConfig("friction coefficient must be non-negative".into()));
        }
        if !(self.torque_margin.is_finite() && self.torque_margin >= 0.0) {
            return Err(DynamicsError::InvalidConfig("torque margin must be non-negative".into()));
        }
        if !(self.pivot_dir.norm() - 1.0).abs().lt(&1e-9) {
            return Err(DynamicsError::InvalidConfig("pivot direction must be a unit vector".into()));
        }
        Ok(())
    }

    /// Horizontal unit vector perpendicular to the pivot line, pointing into the part.
    pub fn flip_axis_u(&self, obj: &RigidObject) -> Vector2<f64> {
        let n = Vector2::new(-self.pivot_dir.y, self.pivot_dir.x);
        let c = obj.to_world(&obj.com, self.pivot_point.z);
        let rel = Vector2::new(c.x - self.pivot_point.x, c.y - self.pivot_point.y);
        if rel.dot(&n) < 0.0 {
            -n
        } else {
            n
        }
    }

    /// Flip-plane coordinates `(u, z)` of an object-frame point while flat.
    pub fn plane_coords(&self, obj: &RigidObject, p: &Vector3<f64>) -> Vector2<f64> {
        let w = obj.to_world(p, self.pivot_point.z);
        let u = self.flip_axis_u(obj);
        Vector2::new(
            (w.x - self.pivot_point.x) * u.x + (w.y - self.pivot_point.y) * u.y,
            w.z - self.pivot_point.z,
        )
    }

    /// World-frame horizontal axis whose right-hand rotation lifts the body
    /// (`axis = u × z`, so a quarter turn carries `u` onto `z`).
    pub fn rotation_axis(&self, obj: &RigidObject) -> Vector3<f64> {
        let u = self.flip_axis_u(obj);
        Vector3::new(u.y, -u.x, 0.0)
    }
}

/// Rotates a flip-plane vector by θ (counterclockwise, body rising).
pub fn rotate_plane(v: Vector2<f64>, theta: f64) -> Vector2<f64> {
    let (s, c) = theta.sin_cos();
    Vector2::new(v.x * c - v.y * s, v.x * s + v.y * c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorqueBreakdown {
    pub tau_gravity: f64,
    pub tau_support: f64,
    pub tau_arm_required: f64,
    pub tau_net: f64,
}

/// Support reaction at the pivot, resolved in the flip plane (N).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reaction {
    pub normal: f64,
    pub tangential: f64,
}

impl Reaction {
    pub fn magnitude(&self) -> f64 {
        self.normal.hypot(self.tangential)
    }
}

/// `m g` times the horizontal COM lever about the pivot, N·m.
pub fn gravity_torque(obj: &RigidObject, cfg: &PivotConfig) -> f64 {
    let c = rotate_plane(cfg.plane_coords(obj, &obj.com), cfg.theta);
    obj.mass * GRAVITY * c.x / 1000.0
}

fn grasp_lever(obj: &RigidObject, cfg: &PivotConfig) -> Result<(Vector2<f64>, f64), DynamicsError> {
    let g = rotate_plane(cfg.plane_coords(obj, &cfg.grasp_point), cfg.theta);
    let l = g.norm();
    if l < 1e-9 {
        return Err(DynamicsError::ZeroLeverArm);
    }
    Ok((g, l))
}

fn balance(obj: &RigidObject, cfg: &PivotConfig) -> Result<(TorqueBreakdown, Reaction), DynamicsError> {
    cfg.validate()?;
    let (g, l) = grasp_lever(obj, cfg)?;
    let tau_gravity = gravity_torque(obj, cfg);
    // The support reaction acts through the pivot, so it has no moment about it.
    let tau_support = 0.0;
    let tau_arm_required = tau_gravity - tau_support + cfg.torque_margin;
    let tau_net = tau_arm_required + tau_support - tau_gravity;
    // The margin is a bound on the drive, not a load; the contact carries the balancing force.
    let force = (tau_gravity - tau_support) / (l / 1000.0);
    let n = Vector2::new(-g.y, g.x) / l;
    let r = -n * force + Vector2::new(0.0, obj.mass * GRAVITY);
    Ok((
        TorqueBreakdown { tau_gravity, tau_support, tau_arm_required, tau_net },
        Reaction { normal: r.y, tangential: r.x },
    ))
}

/// Minimal arm torque at the grasp (force perpendicular to the pivot-grasp
/// radius) that keeps the flip moving with the configured margin.
pub fn required_arm_torque_pivot(obj: &RigidObject, cfg: &PivotConfig) -> Result<TorqueBreakdown, DynamicsError> {
    let (tb, r) = balance(obj, cfg)?;
    match friction_cone_check(r, cfg.friction_mu) {
        Ok(true) => Ok(tb),
        _ => Err(DynamicsError::FrictionConeViolation { theta: cfg.theta }),
    }
}

/// Wrist torque for turning the part in the air about the grasp, with the
/// rotation carried out in the same vertical plane as the pivot flip.
pub fn required_wrist_torque_direct(obj: &RigidObject, cfg: &PivotConfig) -> f64 {
    let d = cfg.plane_coords(obj, &obj.com) - cfg.plane_coords(obj, &cfg.grasp_point);
    obj.mass * GRAVITY * rotate_plane(d, cfg.theta).x / 1000.0
}

/// Peak of [`required_wrist_torque_direct`] over a full turn (grasp-COM segment horizontal).
pub fn peak_wrist_torque_direct(obj: &RigidObject, cfg: &PivotConfig) -> f64 {
    let d = cfg.plane_coords(obj, &obj.com) - cfg.plane_coords(obj, &cfg.grasp_point);
    obj.mass * GRAVITY * d.norm() / 1000.0
}

/// Coulomb test on a planar reaction.
pub fn friction_cone_check(reaction: Reaction, mu: f64) -> Result<bool, DynamicsError> {
    if reaction.normal < 0.0 {
        return Err(DynamicsError::NegativeNormal { normal: reaction.normal });
    }
    Ok(reaction.tangential.abs() <= mu * reaction.normal)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileRow {
    pub theta: f64,
    pub torques: TorqueBreakdown,
    pub reaction: Reaction,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlipProfile {
    pub rows: Vec<ProfileRow>,
    /// Largest |arm torque| over the sweep, N·m.
    pub peak_arm_torque: f64,
    pub peak_reaction: f64,
    /// Angles where the contact would slip or separate.
    pub violations: Vec<f64>,
    /// Largest speed of the held material point at the pivot, mm/s.
    pub peak_contact_speed: Option<f64>,
}

impl FlipProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta_rad,tau_gravity,tau_support,tau_arm,reaction_normal,reaction_tangential,feasible\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.theta,
                r.torques.tau_gravity,
                r.torques.tau_support,
                r.torques.tau_arm_required,
                r.reaction.normal,
                r.reaction.tangential,
                r.feasible
            );
        }
        out
    }
}

/// Sweeps θ from `cfg.theta` to π with `steps` samples (both ends
/// included), recording every step even when the contact is infeasible.
pub fn flip_profile(obj: &RigidObject, cfg: &PivotConfig, steps: usize) -> Result<FlipProfile, DynamicsError> {
    if steps < 2 {
        return Err(DynamicsError::InvalidConfig("need at least 2 steps".into()));
    }
    cfg.validate()?;
    let (t0, t1) = (cfg.theta, std::f64::consts::PI);
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let theta = if k + 1 == steps { t1 } else { t0 + (t1 - t0) * k as f64 / (steps - 1) as f64 };
        let (torques, reaction) = balance(obj, &cfg.at(theta))?;
        let feasible = friction_cone_check(reaction, cfg.friction_mu).unwrap_or(false);
        rows.push(ProfileRow { theta, torques, reaction, feasible });
    }
    let peak_arm_torque = rows.iter().map(|r| r.torques.tau_arm_required.abs()).fold(0.0, f64::max);
    let peak_reaction = rows.iter().map(|r| r.reaction.magnitude()).fold(0.0, f64::max);
    let violations = rows.iter().filter(|r| !r.feasible).map(|r| r.theta).collect();
    Ok(FlipProfile { rows, peak_arm_torque, peak_reaction, violations, peak_contact_speed: None })
}

/// Like [`flip_profile`] but fails at the first infeasible step. When a
/// joint trajectory is supplied, also reports the peak contact speed.
pub fn quasi_static_flip_rollout(
    obj: &RigidObject,
    cfg: &PivotConfig,
    steps: usize,
    trajectory: Option<(&[RobotState], &ArmModel)>,
) -> Result<FlipProfile, DynamicsError> {
    let mut p = flip_profile(obj, cfg, steps)?;
    if let Some(&theta) = p.violations.first() {
        return Err(DynamicsError::FrictionConeViolation { theta });
    }
    if let Some((traj, model)) = trajectory {
        p.peak_contact_speed = Some(peak_contact_speed(traj, model, &cfg.pivot_point));
    }
    Ok(p)
}

/// Largest `‖J_C(q) q̇‖` over the trajectory for the held point at `contact`.
pub fn peak_contact_speed(traj: &[RobotState], model: &ArmModel, contact: &Vector3<f64>) -> f64 {
    traj.iter()
        .map(|s| (contact_jacobian(s, model, contact) * s.qdot).norm())
        .fold(0.0, f64::max)
}

/// Support line for a flip toward `anchor`: perpendicular to the direction
/// from the centroid to the anchor, through the silhouette point farthest
/// behind the centroid. Returns a point on the line and its direction.
pub fn place_pivot(shape: &PlanarShape, anchor: Point2<f64>) -> Result<(Point2<f64>, Vector2<f64>), DynamicsError> {
    let c = centroid(shape)?.c_geo;
    let d = anchor - c;
    if d.norm() < 1e-9 {
        return Err(DynamicsError::ZeroLeverArm);
    }
    let u = d.normalize();
    let back = crate::geometry::boundary(shape)?
        .into_iter()
        .min_by(|a, b| (a - c).dot(&u).total_cmp(&(b - c).dot(&u)))
        .ok_or(GeometryError::EmptyShape)?;
    let foot = c + u * (back - c).dot(&u);
    Ok((foot, Vector2::new(-u.y, u.x)))
}
