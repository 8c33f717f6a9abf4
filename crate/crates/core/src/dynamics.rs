//! Drone point-mass/attitude model and the swinging-gate ground truth.
//!
//! The drone state is `x = [p, v, q]` (10 numbers) driven by collective
//! mass-normalized thrust `c` and body rates `ω`. The controller integrates it
//! with forward Euler, the simulator with RK4.
//!
//! The gate is a rigid pendulum swinging in the y–z plane about a fixed pivot;
//! its face normal stays along +x. Controllers only ever see
//! [`GateObservation`]s, never the pendulum angle.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math::{
    euler_step, quat_derivative, quat_rotate, rk4_step, OdeState, UnitQuaternion, Vec3,
};

pub const STATE_DIM: usize = 10;
pub const CONTROL_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroneState {
    pub p: Vec3,
    pub v: Vec3,
    pub q: UnitQuaternion,
}

impl Default for DroneState {
    fn default() -> Self {
        DroneState {
            p: Vec3::ZERO,
            v: Vec3::ZERO,
            q: UnitQuaternion::IDENTITY,
        }
    }
}

impl DroneState {
    pub fn at_rest(p: Vec3) -> Self {
        DroneState {
            p,
            ..Default::default()
        }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.p.x, self.p.y, self.p.z, self.v.x, self.v.y, self.v.z, self.q.w, self.q.x,
            self.q.y, self.q.z,
        ]
    }

    /// Builds a state from a raw vector; the quaternion block is normalized.
    pub fn from_array(a: &[f64; STATE_DIM]) -> Self {
        DroneState {
            p: Vec3::new(a[0], a[1], a[2]),
            v: Vec3::new(a[3], a[4], a[5]),
            q: UnitQuaternion::new_normalize(a[6], a[7], a[8], a[9]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.is_finite() && self.v.is_finite() && self.q.is_finite()
    }
}

/// Raw 10-vector used while integrating; projection renormalizes `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroneVector(pub [f64; STATE_DIM]);

impl OdeState for DroneVector {
    fn add_scaled(&self, rate: &Self, h: f64) -> Self {
        DroneVector(self.0.add_scaled(&rate.0, h))
    }

    fn project(self) -> Self {
        DroneVector(DroneState::from_array(&self.0).to_array())
    }

    fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Mass-normalized collective thrust, m/s².
    pub c: f64,
    /// Body rates, rad/s.
    pub omega: Vec3,
}

impl ControlInput {
    pub fn new(c: f64, omega: Vec3) -> Self {
        ControlInput { c, omega }
    }

    pub fn hover(g: f64) -> Self {
        ControlInput {
            c: g,
            omega: Vec3::ZERO,
        }
    }

    pub fn to_array(&self) -> [f64; CONTROL_DIM] {
        [self.c, self.omega.x, self.omega.y, self.omega.z]
    }

    pub fn from_array(a: &[f64; CONTROL_DIM]) -> Self {
        ControlInput {
            c: a[0],
            omega: Vec3::new(a[1], a[2], a[3]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DroneLimits {
    pub c_min: f64,
    pub c_max: f64,
    pub omega_max: f64,
    pub g: f64,
    /// Thrust cap applied on the plant side only (thrust degradation).
    pub sim_c_max: f64,
}

impl Default for DroneLimits {
    fn default() -> Self {
        DroneLimits {
            c_min: 2.0,
            c_max: 20.0,
            omega_max: 6.0,
            g: 9.81,
            sim_c_max: 20.0,
        }
    }
}

impl DroneLimits {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0 <= self.c_min && self.c_min < self.c_max) {
            return Err(format!(
                "need 0 <= c_min < c_max, got [{}, {}]",
                self.c_min, self.c_max
            ));
        }
        if !(self.omega_max > 0.0) {
            return Err("omega_max must be positive".into());
        }
        if !(self.sim_c_max > self.c_min) {
            return Err("sim_c_max must exceed c_min".into());
        }
        Ok(())
    }

    /// Box bounds on `[c, ωx, ωy, ωz]` as seen by the planner.
    pub fn control_bounds(&self) -> ([f64; CONTROL_DIM], [f64; CONTROL_DIM]) {
        let w = self.omega_max;
        ([self.c_min, -w, -w, -w], [self.c_max, w, w, w])
    }
}

/// `ẋ = f(x, u)`: `ṗ = v`, `v̇ = q ⊙ (0,0,c) − (0,0,g)`, `q̇ = ½ Λ(ω) q`.
pub fn drone_derivative(x: &DroneState, u: &ControlInput, g: f64) -> [f64; STATE_DIM] {
    let acc = quat_rotate(x.q, Vec3::new(0.0, 0.0, u.c)) - Vec3::new(0.0, 0.0, g);
    let qd = quat_derivative(x.q, u.omega);
    [
        x.v.x, x.v.y, x.v.z, acc.x, acc.y, acc.z, qd[0], qd[1], qd[2], qd[3],
    ]
}

fn vector_field(g: f64) -> impl Fn(&DroneVector, &ControlInput) -> DroneVector {
    move |x, u| {
        // Intermediate RK stages need not be unit; the model uses the raw entries.
        let s = raw_state(&x.0);
        DroneVector(drone_derivative(&s, u, g))
    }
}

fn raw_state(a: &[f64; STATE_DIM]) -> DroneState {
    DroneState {
        p: Vec3::new(a[0], a[1], a[2]),
        v: Vec3::new(a[3], a[4], a[5]),
        q: UnitQuaternion {
            w: a[6],
            x: a[7],
            y: a[8],
            z: a[9],
        },
    }
}

/// Controller-side model: one forward-Euler step plus quaternion renormalization.
pub fn drone_step_euler(x: &DroneState, u: &ControlInput, d: f64, g: f64) -> Result<DroneState> {
    let out = euler_step(vector_field(g), &DroneVector(x.to_array()), u, d)?;
    Ok(DroneState::from_array(&out.0))
}

/// Plant-side integration (RK4).
pub fn drone_step_rk4(x: &DroneState, u: &ControlInput, d: f64, g: f64) -> Result<DroneState> {
    let out = rk4_step(vector_field(g), &DroneVector(x.to_array()), u, d)?;
    Ok(DroneState::from_array(&out.0))
}

/// Clamps `c` to `[c_min, sim_c_max]` and `ω` to `±ω_max`.
pub fn apply_plant_limits(u: &ControlInput, limits: &DroneLimits) -> ControlInput {
    ControlInput {
        c: u.c.clamp(limits.c_min, limits.sim_c_max),
        omega: u.omega.clamp_abs(limits.omega_max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GateState {
    /// Angle from the downward vertical, rad.
    pub theta: f64,
    pub theta_dot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateGeometry {
    pub pivot: Vec3,
    pub arm_length: f64,
    pub height: f64,
    pub width: f64,
    /// Unit normal of the gate plane.
    pub alpha: Vec3,
}

impl Default for GateGeometry {
    fn default() -> Self {
        GateGeometry {
            pivot: Vec3::new(2.0, 0.0, 3.0),
            arm_length: 2.0,
            height: 0.8,
            width: 1.0,
            alpha: Vec3::new(1.0, 0.0, 0.0),
        }
    }
}

/// Hidden pendulum law of the gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pendulum {
    pub length: f64,
    pub gravity: f64,
    /// Viscous damping coefficient, 1/s.
    pub damping: f64,
}

impl Pendulum {
    pub fn new(length: f64, gravity: f64, damping: f64) -> Self {
        Pendulum {
            length,
            gravity,
            damping,
        }
    }

    /// `E = ½ L² θ̇² − g L cos θ` (per unit mass).
    pub fn energy(&self, s: &GateState) -> f64 {
        0.5 * self.length * self.length * s.theta_dot * s.theta_dot
            - self.gravity * self.length * s.theta.cos()
    }
}

/// One RK4 step of `θ̈ = −(g/L) sin θ − b θ̇`.
pub fn gate_step(s: &GateState, pendulum: &Pendulum, d: f64) -> Result<GateState> {
    let k = pendulum.gravity / pendulum.length;
    let b = pendulum.damping;
    let f = |x: &[f64; 2], _: &()| [x[1], -k * x[0].sin() - b * x[1]];
    let out = rk4_step(f, &[s.theta, s.theta_dot], &(), d)?;
    Ok(GateState {
        theta: out[0],
        theta_dot: out[1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GateObservation {
    pub center: Vec3,
    pub center_vel: Vec3,
}

impl GateObservation {
    pub fn to_array(&self) -> [f64; 6] {
        let (c, v) = (self.center, self.center_vel);
        [c.x, c.y, c.z, v.x, v.y, v.z]
    }

    pub fn from_array(a: &[f64]) -> Self {
        GateObservation {
            center: Vec3::new(a[0], a[1], a[2]),
            center_vel: Vec3::new(a[3], a[4], a[5]),
        }
    }
}

/// Gate center and velocity for a given pendulum state.
pub fn gate_observe(s: &GateState, geo: &GateGeometry) -> GateObservation {
    let (sin, cos) = s.theta.sin_cos();
    let l = geo.arm_length;
    GateObservation {
        center: geo.pivot + Vec3::new(0.0, l * sin, -l * cos),
        center_vel: Vec3::new(0.0, l * s.theta_dot * cos, l * s.theta_dot * sin),
    }
}
