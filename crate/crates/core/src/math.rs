//! Small fixed-size algebra shared by the simulator, solver and learners.
//!
//! Quaternions are scalar-first `(w, x, y, z)` with the Hamilton product.
//! `UnitQuaternion` keeps its norm at 1 after every operation that returns one.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Componentwise clamp to `[-limit, limit]`.
    pub fn clamp_abs(self, limit: f64) -> Vec3 {
        Vec3::new(
            self.x.clamp(-limit, limit),
            self.y.clamp(-limit, limit),
            self.z.clamp(-limit, limit),
        )
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Attitude quaternion, scalar first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(w, x, y, z)`. A zero quaternion maps to the identity.
    pub fn new_normalize(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Self::IDENTITY;
        }
        UnitQuaternion {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn from_array_normalize(a: [f64; 4]) -> Self {
        Self::new_normalize(a[0], a[1], a[2], a[3])
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new_normalize(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Idempotent up to rounding.
    pub fn renormalize(self) -> Self {
        Self::new_normalize(self.w, self.x, self.y, self.z)
    }

    pub fn conjugate(self) -> Self {
        UnitQuaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self ⊗ o`.
    pub fn mul(self, o: UnitQuaternion) -> UnitQuaternion {
        let p = hamilton(self.to_array(), o.to_array());
        Self::from_array_normalize(p)
    }

    pub fn dot(self, o: UnitQuaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Rotates a body-frame vector into the inertial frame.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        quat_rotate(self, v)
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Raw Hamilton product on 4-arrays.
pub fn hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// `q ⊙ v`: body-to-inertial rotation, `q (0, v) q*`.
pub fn quat_rotate(q: UnitQuaternion, v: Vec3) -> Vec3 {
    // v + 2 w (u × v) + 2 u × (u × v), u the vector part
    let u = Vec3::new(q.x, q.y, q.z);
    let t = 2.0 * u.cross(v);
    v + q.w * t + u.cross(t)
}

/// The 4×4 matrix `Λ(ω)` with `Λ(ω) q = q ⊗ (0, ω)` (body rates).
pub fn omega_matrix(omega: Vec3) -> [[f64; 4]; 4] {
    let Vec3 {
        x: wx,
        y: wy,
        z: wz,
    } = omega;
    [
        [0.0, -wx, -wy, -wz],
        [wx, 0.0, wz, -wy],
        [wy, -wz, 0.0, wx],
        [wz, wy, -wx, 0.0],
    ]
}

/// Attitude rate `½ Λ(ω) q`.
pub fn quat_derivative(q: UnitQuaternion, omega: Vec3) -> [f64; 4] {
    let m = omega_matrix(omega);
    let qa = q.to_array();
    let mut out = [0.0; 4];
    for (o, row) in out.iter_mut().zip(m.iter()) {
        *o = 0.5 * row.iter().zip(qa.iter()).map(|(a, b)| a * b).sum::<f64>();
    }
    out
}

/// State vectors that can be advanced by the fixed-step integrators.
pub trait OdeState: Clone {
    /// `self + h * rate`, where `rate` has the same layout as `self`.
    fn add_scaled(&self, rate: &Self, h: f64) -> Self;
    /// Post-step projection back onto the state manifold.
    fn project(self) -> Self {
        self
    }
    fn all_finite(&self) -> bool;
}

impl<const N: usize> OdeState for [f64; N] {
    fn add_scaled(&self, rate: &Self, h: f64) -> Self {
        let mut out = *self;
        for (o, r) in out.iter_mut().zip(rate.iter()) {
            *o += h * r;
        }
        out
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl OdeState for Vec<f64> {
    fn add_scaled(&self, rate: &Self, h: f64) -> Self {
        self.iter()
            .zip(rate.iter())
            .map(|(a, b)| a + h * b)
            .collect()
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Classical fourth-order Runge–Kutta step.
///
/// `f(x, u)` returns the time derivative in the same layout as `x`. The
/// result is passed through [`OdeState::project`], which renormalizes the
/// quaternion block of a drone state.
pub fn rk4_step<S, U, F>(f: F, x: &S, u: &U, d: f64) -> Result<S>
where
    S: OdeState,
    F: Fn(&S, &U) -> S,
{
    if !(d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {d}"
        )));
    }
    let k1 = f(x, u);
    let k2 = f(&x.add_scaled(&k1, 0.5 * d), u);
    let k3 = f(&x.add_scaled(&k2, 0.5 * d), u);
    let k4 = f(&x.add_scaled(&k3, d), u);
    for k in [&k1, &k2, &k3, &k4] {
        if !k.all_finite() {
            return Err(Error::Integration("non-finite derivative".into()));
        }
    }
    let out = x
        .add_scaled(&k1, d / 6.0)
        .add_scaled(&k2, d / 3.0)
        .add_scaled(&k3, d / 3.0)
        .add_scaled(&k4, d / 6.0)
        .project();
    Ok(out)
}

/// Forward-Euler step with the same projection as [`rk4_step`].
pub fn euler_step<S, U, F>(f: F, x: &S, u: &U, d: f64) -> Result<S>
where
    S: OdeState,
    F: Fn(&S, &U) -> S,
{
    if !(d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {d}"
        )));
    }
    let k = f(x, u);
    if !k.all_finite() {
        return Err(Error::Integration("non-finite derivative".into()));
    }
    Ok(x.add_scaled(&k, d).project())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    // Rotation matrix built directly from quaternion entries.
    fn rotation_matrix(q: UnitQuaternion) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    fn mat_vec(m: [[f64; 3]; 3], v: Vec3) -> Vec3 {
        let a = v.to_array();
        let r: Vec<f64> = m
            .iter()
            .map(|row| row.iter().zip(a.iter()).map(|(p, q)| p * q).sum())
            .collect();
        Vec3::new(r[0], r[1], r[2])
    }

    #[test]
    fn rotate_identity_and_half_turn() {
        let v = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(quat_rotate(UnitQuaternion::IDENTITY, v), v);
        let q = UnitQuaternion::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), std::f64::consts::PI);
        let r = quat_rotate(q, v);
        assert_abs_diff_eq!(r.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.z, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(
            quat_derivative(UnitQuaternion::IDENTITY, Vec3::ZERO),
            [0.0; 4]
        );
        let q = UnitQuaternion::new_normalize(0.3, -0.2, 0.5, 0.7);
        assert_eq!(quat_derivative(q, Vec3::ZERO), [0.0; 4]);
        let r = quat_derivative(UnitQuaternion::IDENTITY, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(r, [0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn derivative_matches_exponential_map_slope() {
        let q = UnitQuaternion::new_normalize(0.8, 0.1, -0.4, 0.3);
        let w = Vec3::new(0.7, -1.3, 2.1);
        let dt = 1e-6;
        // exact body-rate propagation: q ⊗ exp(½ ω dt)
        let dq = UnitQuaternion::from_axis_angle(w, w.norm() * dt);
        let next = hamilton(q.to_array(), dq.to_array());
        let rate = quat_derivative(q, w);
        for i in 0..4 {
            let fd = (next[i] - q.to_array()[i]) / dt;
            assert!(
                (fd - rate[i]).abs() < 1e-5,
                "component {i}: {fd} vs {}",
                rate[i]
            );
        }
    }

    #[test]
    fn rk4_zero_field_and_constant_acceleration() {
        let x = [1.0, 2.0];
        let y = rk4_step(|_: &[f64; 2], _: &()| [0.0, 0.0], &x, &(), 0.02).unwrap();
        assert_eq!(y, x);

        // state (p, v), constant a
        let a = 3.0;
        let d = 0.02;
        let x = [0.5, 1.5];
        let y = rk4_step(|s: &[f64; 2], _: &()| [s[1], a], &x, &(), d).unwrap();
        assert_abs_diff_eq!(y[1], 1.5 + a * d, epsilon = 1e-14);
        assert_abs_diff_eq!(y[0], 0.5 + 1.5 * d + 0.5 * a * d * d, epsilon = 1e-14);
    }

    #[test]
    fn rk4_rejects_bad_step_and_nan() {
        assert!(rk4_step(|_: &[f64; 1], _: &()| [0.0], &[0.0], &(), 0.0).is_err());
        assert!(matches!(
            rk4_step(|_: &[f64; 1], _: &()| [f64::NAN], &[0.0], &(), 0.1),
            Err(Error::Integration(_))
        ));
    }

    #[test]
    fn rk4_global_error_is_fourth_order() {
        // harmonic oscillator, exact solution is a rotation
        let f = |s: &[f64; 2], _: &()| [s[1], -s[0]];
        let err = |d: f64| {
            let steps = (1.0 / d).round() as usize;
            let mut x = [1.0, 0.0];
            for _ in 0..steps {
                x = rk4_step(f, &x, &(), d).unwrap();
            }
            let t = steps as f64 * d;
            ((x[0] - t.cos()).powi(2) + (x[1] + t.sin()).powi(2)).sqrt()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 0.3 * 16.0, "ratio {ratio}");
    }

    fn arb_quat() -> impl Strategy<Value = UnitQuaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(a, b, c, d)| {
                a * a + b * b + c * c + d * d > 1e-3
            })
            .prop_map(|(a, b, c, d)| UnitQuaternion::new_normalize(a, b, c, d))
    }

    fn arb_vec() -> impl Strategy<Value = Vec3> {
        (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(a, b, c)| Vec3::new(a, b, c))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rotation_matches_matrix_and_preserves_norm(q in arb_quat(), v in arb_vec()) {
            let r = quat_rotate(q, v);
            let m = mat_vec(rotation_matrix(q), v);
            prop_assert!((r - m).norm() < 1e-12);
            prop_assert!((r.norm() - v.norm()).abs() < 1e-12);
        }

        #[test]
        fn renormalize_is_idempotent(q in arb_quat()) {
            let a = q.renormalize();
            let b = a.renormalize();
            prop_assert!((a.norm() - 1.0).abs() < 1e-12);
            prop_assert!((a.w - b.w).abs() < 1e-15 && (a.x - b.x).abs() < 1e-15);
        }
    }
}
