//! Sliding-window joint-space spline.
//!
//! Each evaluation segment is a uniform cubic B-spline segment over the four
//! newest anchors. Consecutive windows share three anchors, so position,
//! velocity and acceleration agree exactly at every knot no matter what the
//! next anchor turns out to be. Interpolating constructions that carry
//! derivatives forward are C² as well but amplify anchor noise by roughly
//! 2 + √3 per segment, which is unusable on a live perception stream.

use nalgebra::Vector6;

use super::RuntimeError;

/// Four anchors with uniformly spaced knot times, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineWindow {
    anchors: [Vector6<f64>; 4],
    knots: [f64; 4],
}

/// Joint command with its first two time derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineSample {
    pub pos: Vector6<f64>,
    pub vel: Vector6<f64>,
    pub acc: Vector6<f64>,
}

/// Allowed deviation of knot spacing from uniform, seconds.
const KNOT_TOL: f64 = 1e-3;

impl SplineWindow {
    /// Builds a window from the last four `(knot_time, anchor)` pairs.
    pub fn new(recent: &[(f64, Vector6<f64>)]) -> Result<Self, RuntimeError> {
        if recent.len() < 4 {
            return Err(RuntimeError::ColdWindow { anchors: recent.len() });
        }
        let w = &recent[recent.len() - 4..];
        let knots = [w[0].0, w[1].0, w[2].0, w[3].0];
        let h = knots[3] - knots[2];
        if !(h > 0.0) || knots.windows(2).any(|k| ((k[1] - k[0]) - h).abs() > KNOT_TOL) {
            return Err(RuntimeError::InvalidConfig("spline knots must be uniformly spaced".into()));
        }
        Ok(Self { anchors: [w[0].1, w[1].1, w[2].1, w[3].1], knots })
    }

    pub fn knots(&self) -> &[f64; 4] {
        &self.knots
    }

    pub fn spacing(&self) -> f64 {
        self.knots[3] - self.knots[2]
    }

    /// Evaluation segment `[knot of p_{k-1}, knot of p_k]`.
    pub fn segment(&self) -> (f64, f64) {
        (self.knots[2], self.knots[3])
    }

    /// Evaluates at `t` inside the evaluation segment.
    pub fn eval(&self, t: f64) -> Result<SplineSample, RuntimeError> {
        let (a, b) = self.segment();
        let h = self.spacing();
        if t < a - 1e-12 || t > b + 1e-12 {
            return Err(RuntimeError::OutOfSegment { t, start: a, end: b });
        }
        Ok(self.eval_u(((t - a) / h).clamp(0.0, 1.0)))
    }

    /// Evaluates at normalized segment parameter `u ∈ [0, 1]`.
    pub fn eval_u(&self, u: f64) -> SplineSample {
        let h = self.spacing();
        let [p0, p1, p2, p3] = &self.anchors;
        let (u2, u3) = (u * u, u * u * u);
        let b0 = (1.0 - u).powi(3) / 6.0;
        let b1 = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0;
        let b2 = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0;
        let b3 = u3 / 6.0;
        let d0 = -(1.0 - u).powi(2) / 2.0;
        let d1 = (3.0 * u2 - 4.0 * u) / 2.0;
        let d2 = (-3.0 * u2 + 2.0 * u + 1.0) / 2.0;
        let d3 = u2 / 2.0;
        let a0 = 1.0 - u;
        let a1 = 3.0 * u - 2.0;
        let a2 = -3.0 * u + 1.0;
        let a3 = u;
        SplineSample {
            pos: p0 * b0 + p1 * b1 + p2 * b2 + p3 * b3,
            vel: (p0 * d0 + p1 * d1 + p2 * d2 + p3 * d3) / h,
            acc: (p0 * a0 + p1 * a1 + p2 * a2 + p3 * a3) / (h * h),
        }
    }

    /// Velocity at the left end of the evaluation segment.
    pub fn boundary_vel(&self) -> Vector6<f64> {
        self.eval_u(0.0).vel
    }

    /// Acceleration at the left end of the evaluation segment.
    pub fn boundary_acc(&self) -> Vector6<f64> {
        self.eval_u(0.0).acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(ps: &[Vector6<f64>], h: f64) -> SplineWindow {
        let pairs: Vec<(f64, Vector6<f64>)> = ps.iter().enumerate().map(|(i, p)| (i as f64 * h, *p)).collect();
        SplineWindow::new(&pairs).unwrap()
    }

    #[test]
    fn constant_anchors_reproduce_constant() {
        let p = Vector6::new(0.1, -0.2, 0.3, 1.0, -1.0, 2.0);
        let w = window(&[p; 4], 0.1);
        for k in 0..=10 {
            let s = w.eval_u(k as f64 / 10.0);
            assert!((s.pos - p).norm() < 1e-15);
            assert!(s.vel.norm() < 1e-12 && s.acc.norm() < 1e-9);
        }
    }

    #[test]
    fn line_is_reproduced_with_one_knot_lag() {
        let h = 0.1;
        let a = Vector6::new(0.3, 0.0, -0.1, 0.2, 0.5, -0.4);
        let b = Vector6::new(1.0, -2.0, 0.5, 0.0, 3.0, 0.25);
        let line = |t: f64| a + b * t;
        let anchors: Vec<(f64, Vector6<f64>)> = (0..8).map(|i| (i as f64 * h, line(i as f64 * h))).collect();
        for end in 4..=8 {
            let w = SplineWindow::new(&anchors[..end]).unwrap();
            let (s, e) = w.segment();
            for k in 0..=20 {
                let t = s + (e - s) * k as f64 / 20.0;
                let v = w.eval(t).unwrap();
                assert!((v.pos - line(t - h)).norm() < 1e-9);
                assert!((v.vel - b).norm() < 1e-9);
                assert!(v.acc.norm() < 1e-6);
            }
        }
    }

    #[test]
    fn knot_continuity_two_sided() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 0.1;
        let anchors: Vec<(f64, Vector6<f64>)> = (0..40)
            .map(|i| (i as f64 * h, Vector6::from_fn(|_, _| rng.random_range(-3.0..3.0))))
            .collect();
        for end in 4..40 {
            let left = SplineWindow::new(&anchors[..end]).unwrap().eval_u(1.0);
            let right = SplineWindow::new(&anchors[..end + 1]).unwrap().eval_u(0.0);
            assert!((left.pos - right.pos).amax() < 1e-9);
            assert!((left.vel - right.vel).amax() < 1e-9);
            assert!((left.acc - right.acc).amax() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        let p = Vector6::zeros();
        assert_eq!(SplineWindow::new(&[(0.0, p); 3]), Err(RuntimeError::ColdWindow { anchors: 3 }));
        let bad = [(0.0, p), (0.1, p), (0.2, p), (0.5, p)];
        assert!(SplineWindow::new(&bad).is_err());
        let w = window(&[p; 4], 0.1);
        assert!(matches!(w.eval(0.05), Err(RuntimeError::OutOfSegment { .. })));
        assert!(w.eval(0.25).is_ok());
    }
}
