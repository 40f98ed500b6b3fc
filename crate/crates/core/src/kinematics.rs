//! Six-axis serial arm: forward kinematics, geometric Jacobian, contact
//! Jacobian and damped least-squares inverse kinematics.
//!
//! Lengths are millimetres, angles radians. Links follow the standard
//! Denavit-Hartenberg chain `Rz(θ) · Tz(d) · Tx(a) · Rx(α)`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::textio::{content_lines, parse_f64, LineError};

/// Config shipped with the crate: UR5-class geometry.
pub const DEFAULT_ARM_CONFIG: &str = include_str!("../data/arm_default.txt");

pub const IK_MAX_ITER: usize = 200;
/// Acceptance bound on the IK translation residual, mm.
pub const IK_TOL_MM: f64 = 0.1;
/// Acceptance bound on the IK rotation residual, degrees.
pub const IK_TOL_DEG: f64 = 0.1;
const IK_FINE_MM: f64 = 1e-3;
const IK_FINE_RAD: f64 = 1e-5;
const IK_MAX_STEP_RAD: f64 = 0.5;
const LIMIT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KinematicsError {
    #[error("IK did not converge (residual {residual_mm:.4} mm, {residual_deg:.4} deg)")]
    NoConvergence { residual_mm: f64, residual_deg: f64 },
    #[error("joint {joint} at {value:.6} rad is outside its limits")]
    JointLimitViolation { joint: usize, value: f64 },
    #[error("invalid arm model: {0}")]
    InvalidModel(String),
    #[error("arm config {0}")]
    Parse(#[from] LineError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub twist: f64,
    pub length: f64,
    pub offset: f64,
    pub angle_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    links: [Link; 6],
    limits: [(f64, f64); 6],
    sigma_min: f64,
}

impl ArmModel {
    pub fn new(links: [Link; 6], limits: [(f64, f64); 6], sigma_min: f64) -> Result<Self, KinematicsError> {
        for (i, l) in links.iter().enumerate() {
            if ![l.twist, l.length, l.offset, l.angle_offset].iter().all(|v| v.is_finite()) {
                return Err(KinematicsError::InvalidModel(format!("link {i} has non-finite parameters")));
            }
        }
        for (i, &(lo, hi)) in limits.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(KinematicsError::InvalidModel(format!("joint {i} limits must satisfy min < max")));
            }
        }
        if !(sigma_min.is_finite() && sigma_min > 0.0) {
            return Err(KinematicsError::InvalidModel("sigma_min must be positive".into()));
        }
        let m = Self { links, limits, sigma_min };
        if m.characteristic_length() <= 0.0 {
            return Err(KinematicsError::InvalidModel("arm has no extent".into()));
        }
        Ok(m)
    }

    pub fn default_ur5() -> Self {
        Self::parse(DEFAULT_ARM_CONFIG).expect("bundled arm config is valid")
    }

    /// Parses the arm config table: six rows of
    /// `twist length offset angle_offset limit_lo limit_hi`, then `sigma_min`.
    pub fn parse(text: &str) -> Result<Self, KinematicsError> {
        let rows: Vec<(usize, &str)> = content_lines(text).collect();
        if rows.len() != 7 {
            let line = rows.last().map_or(1, |r| r.0);
            return Err(LineError::new(line, format!("expected 6 joint rows and a threshold, found {} lines", rows.len())).into());
        }
        let mut links = [Link { twist: 0.0, length: 0.0, offset: 0.0, angle_offset: 0.0 }; 6];
        let mut limits = [(0.0, 0.0); 6];
        for (i, &(ln, row)) in rows[..6].iter().enumerate() {
            let toks: Vec<&str> = row.split_whitespace().collect();
            if toks.len() != 6 {
                return Err(LineError::new(ln, "joint row needs 6 values").into());
            }
            let v = toks
                .iter()
                .map(|t| parse_f64(t, ln, "joint parameter"))
                .collect::<Result<Vec<_>, _>>()?;
            links[i] = Link { twist: v[0], length: v[1], offset: v[2], angle_offset: v[3] };
            limits[i] = (v[4], v[5]);
        }
        let (ln, last) = rows[6];
        let sigma_min = parse_f64(last, ln, "sigma_min")?;
        Self::new(links, limits, sigma_min)
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::from("# twist_rad length_mm offset_mm angle_offset_rad limit_lo_rad limit_hi_rad\n");
        for (l, (lo, hi)) in self.links.iter().zip(&self.limits) {
            out.push_str(&format!("{} {} {} {} {} {}\n", l.twist, l.length, l.offset, l.angle_offset, lo, hi));
        }
        out.push_str(&format!("{}\n", self.sigma_min));
        out
    }

    pub fn links(&self) -> &[Link; 6] {
        &self.links
    }

    pub fn limits(&self) -> &[(f64, f64); 6] {
        &self.limits
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn with_sigma_min(mut self, sigma_min: f64) -> Self {
        self.sigma_min = sigma_min;
        self
    }

    /// Copy with every length and offset multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut m = self.clone();
        for l in &mut m.links {
            l.length *= k;
            l.offset *= k;
        }
        m
    }

    /// Upper bound on reach: the sum of link extents. Used to make the
    /// Jacobian dimensionless.
    pub fn characteristic_length(&self) -> f64 {
        self.links.iter().map(|l| l.length.hypot(l.offset)).sum()
    }

    pub fn within_limits(&self, q: &Vector6<f64>) -> Result<(), KinematicsError> {
        for i in 0..6 {
            let (lo, hi) = self.limits[i];
            if !(q[i] >= lo - LIMIT_SLACK && q[i] <= hi + LIMIT_SLACK) {
                return Err(KinematicsError::JointLimitViolation { joint: i, value: q[i] });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub q: Vector6<f64>,
    pub qdot: Vector6<f64>,
    pub timestamp: f64,
}

impl RobotState {
    pub fn at_rest(q: Vector6<f64>) -> Self {
        Self { q, qdot: Vector6::zeros(), timestamp: 0.0 }
    }
}

/// Rigid transform of a frame: `p_world = rotation · p + translation` (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Geodesic angle between the two orientations, radians.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        rotation_log(&(other.rotation * self.rotation.transpose())).norm()
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)], t.x, t.y, t.z]
    }

    pub fn from_array(a: &[f64; 12]) -> Pose {
        Pose {
            rotation: Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]),
            translation: Vector3::new(a[9], a[10], a[11]),
        }
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max()
            .max((self.rotation.determinant() - 1.0).abs())
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation vector (axis times angle) of `r`.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-15 {
        return 2.0 * v;
    }
    v * (2.0 * s.atan2(w) / s)
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        out = u2 * vt;
    }
    out
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

fn link_transform(l: &Link, theta: f64) -> Pose {
    let (st, ct) = (theta + l.angle_offset).sin_cos();
    let (sa, ca) = l.twist.sin_cos();
    Pose {
        rotation: Matrix3::new(ct, -st * ca, st * sa, st, ct * ca, -ct * sa, 0.0, sa, ca),
        translation: Vector3::new(l.length * ct, l.length * st, l.offset),
    }
}

/// Frames 0..=6 (base through flange).
fn frames(q: &Vector6<f64>, model: &ArmModel) -> [Pose; 7] {
    let mut out = [Pose::identity(); 7];
    for i in 0..6 {
        out[i + 1] = out[i].compose(&link_transform(&model.links[i], q[i]));
    }
    out
}

pub fn forward_kinematics(state: &RobotState, model: &ArmModel) -> Pose {
    fk_q(&state.q, model)
}

pub fn fk_q(q: &Vector6<f64>, model: &ArmModel) -> Pose {
    let mut p = frames(q, model)[6];
    if p.orthonormality_error() > 1e-12 {
        p.rotation = orthonormalize(&p.rotation);
    }
    debug_assert!(p.orthonormality_error() < 1e-9);
    p
}

/// Geometric Jacobian at the TCP: rows 0..3 linear (mm/rad), rows 3..6 angular.
pub fn jacobian(state: &RobotState, model: &ArmModel) -> Matrix6<f64> {
    jacobian_q(&state.q, model)
}

pub fn jacobian_q(q: &Vector6<f64>, model: &ArmModel) -> Matrix6<f64> {
    let f = frames(q, model);
    let tcp = f[6].translation;
    let mut j = Matrix6::zeros();
    for i in 0..6 {
        let z = f[i].rotation.column(2).into_owned();
        let lin = z.cross(&(tcp - f[i].translation));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    j
}

fn normalized_jacobian(q: &Vector6<f64>, model: &ArmModel) -> Matrix6<f64> {
    let mut j = jacobian_q(q, model);
    let l = model.characteristic_length();
    j.fixed_rows_mut::<3>(0).scale_mut(1.0 / l);
    j
}

/// Smallest singular value of the length-normalized Jacobian.
pub fn manipulability(state: &RobotState, model: &ArmModel) -> f64 {
    manipulability_q(&state.q, model)
}

pub fn manipulability_q(q: &Vector6<f64>, model: &ArmModel) -> f64 {
    normalized_jacobian(q, model).singular_values().min()
}

pub fn is_singular(q: &Vector6<f64>, model: &ArmModel) -> bool {
    manipulability_q(q, model) < model.sigma_min
}

/// Singular values of the unnormalized linear block, descending.
pub fn linear_singular_values(state: &RobotState, model: &ArmModel) -> Vector3<f64> {
    let jv = jacobian(state, model).fixed_rows::<3>(0).into_owned();
    let mut s: Vec<f64> = jv.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Vector3::new(s[0], s[1], s[2])
}

/// Maps joint velocity to the velocity of the end-effector-fixed point
/// currently located at `contact_point` (world, mm).
pub fn contact_jacobian(state: &RobotState, model: &ArmModel, contact_point: &Vector3<f64>) -> Matrix3x6<f64> {
    let j = jacobian(state, model);
    let tcp = fk_q(&state.q, model).translation;
    let jv = j.fixed_rows::<3>(0).into_owned();
    let jw = j.fixed_rows::<3>(3).into_owned();
    jv - skew(&(contact_point - tcp)) * jw
}

fn pose_error(target: &Pose, current: &Pose) -> (Vector3<f64>, Vector3<f64>) {
    (
        target.translation - current.translation,
        rotation_log(&(target.rotation * current.rotation.transpose())),
    )
}

/// Damped least-squares IK. Returns the solution and the iteration count.
pub fn inverse_kinematics_iters(
    target: &Pose,
    seed: &RobotState,
    model: &ArmModel,
) -> Result<(RobotState, usize), KinematicsError> {
    let l = model.characteristic_length();
    let mut q = seed.q;
    let mut iters = 0;
    loop {
        let (dp, dw) = pose_error(target, &fk_q(&q, model));
        if dp.norm() < IK_FINE_MM && dw.norm() < IK_FINE_RAD {
            break;
        }
        if iters == IK_MAX_ITER {
            if dp.norm() < IK_TOL_MM && dw.norm().to_degrees() < IK_TOL_DEG {
                break;
            }
            return Err(KinematicsError::NoConvergence {
                residual_mm: dp.norm(),
                residual_deg: dw.norm().to_degrees(),
            });
        }
        let j = normalized_jacobian(&q, model);
        let sigma = j.singular_values().min();
        let lambda: f64 = if sigma > 0.1 { 0.01 } else { 0.1 };
        let mut e = Vector6::zeros();
        e.fixed_rows_mut::<3>(0).copy_from(&(dp / l));
        e.fixed_rows_mut::<3>(3).copy_from(&dw);
        let a = j * j.transpose() + Matrix6::identity() * lambda * lambda;
        let y = a.cholesky().ok_or_else(|| KinematicsError::NoConvergence {
            residual_mm: dp.norm(),
            residual_deg: dw.norm().to_degrees(),
        })?.solve(&e);
        let mut dq = j.transpose() * y;
        let n = dq.norm();
        if n > IK_MAX_STEP_RAD {
            dq *= IK_MAX_STEP_RAD / n;
        }
        if !dq.iter().all(|v| v.is_finite()) {
            return Err(KinematicsError::NoConvergence { residual_mm: dp.norm(), residual_deg: dw.norm().to_degrees() });
        }
        q += dq;
        iters += 1;
    }
    if iters == 0 {
        return Ok((RobotState { q: seed.q, qdot: Vector6::zeros(), timestamp: seed.timestamp }, 0));
    }
    // Keep each joint on the branch nearest the seed so trajectories stay continuous.
    for i in 0..6 {
        q[i] = seed.q[i] + wrap_angle(q[i] - seed.q[i]);
        let (lo, hi) = model.limits[i];
        if q[i] > hi + LIMIT_SLACK && q[i] - 2.0 * PI >= lo - LIMIT_SLACK {
            q[i] -= 2.0 * PI;
        } else if q[i] < lo - LIMIT_SLACK && q[i] + 2.0 * PI <= hi + LIMIT_SLACK {
            q[i] += 2.0 * PI;
        }
    }
    model.within_limits(&q)?;
    Ok((RobotState { q, qdot: Vector6::zeros(), timestamp: seed.timestamp }, iters))
}

pub fn inverse_kinematics(target: &Pose, seed: &RobotState, model: &ArmModel) -> Result<RobotState, KinematicsError> {
    inverse_kinematics_iters(target, seed, model).map(|(s, _)| s)
}
