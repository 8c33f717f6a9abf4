//! Hybrid follow/pass cost over a single-shooting trajectory.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, DroneState, GateObservation, CONTROL_DIM, STATE_DIM};
use crate::math::UnitQuaternion;

use super::MpcRequest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    /// Input weights on `(c − g, ωx, ωy, ωz)`.
    pub q_u: [f64; CONTROL_DIM],
    /// Gate-following weights over `(p, v, q)`.
    pub q_f: [f64; STATE_DIM],
    /// Gate-passing weights over `(p, v, q)`.
    pub q_p: [f64; STATE_DIM],
    /// Terminal weights to the target.
    pub q_g: [f64; STATE_DIM],
    /// Peak of the temporal spread weights.
    pub eta: f64,
    /// When false the temporal spread collapses to the constant `eta`.
    pub temporal_spread: bool,
    /// Sharpness `κ` of `η exp(−κ (t − anchor)²)`, 1/s².
    pub spread_rate: f64,
}

const TRACKING: [f64; STATE_DIM] = [100.0, 100.0, 100.0, 10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0];
/// Like `TRACKING` but leaves the velocity along the default traversal axis free.
const PASSING: [f64; STATE_DIM] = [100.0, 100.0, 100.0, 0.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0];

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            q_u: [0.1; CONTROL_DIM],
            q_f: TRACKING,
            q_p: PASSING,
            q_g: TRACKING,
            eta: 10.0,
            temporal_spread: true,
            spread_rate: 100.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = self
            .q_u
            .iter()
            .chain(&self.q_f)
            .chain(&self.q_p)
            .chain(&self.q_g);
        if all.clone().any(|w| !(*w >= 0.0)) {
            return Err("cost weights must be nonnegative".into());
        }
        if !(self.eta > 0.0) {
            return Err("eta must be positive".into());
        }
        if !(self.spread_rate >= 0.0) {
            return Err("spread_rate must be nonnegative".into());
        }
        Ok(())
    }

    /// `η exp(−κ (t − anchor)²)`, or `η` without temporal spread.
    pub fn spread(&self, t: f64, anchor: f64) -> f64 {
        if self.temporal_spread {
            self.eta * (-self.spread_rate * (t - anchor).powi(2)).exp()
        } else {
            self.eta
        }
    }
}

/// Drone-state reference for a gate observation: the gate's center and
/// velocity with a level attitude.
pub fn gate_reference_embed(obs: &GateObservation) -> DroneState {
    DroneState {
        p: obs.center,
        v: obs.center_vel,
        q: UnitQuaternion::IDENTITY,
    }
}

/// Borrowed trajectory: `H + 1` states and `H` controls.
#[derive(Debug, Clone, Copy)]
pub struct Trajectory<'a> {
    pub states: &'a [DroneState],
    pub controls: &'a [ControlInput],
}

/// State error with the reference quaternion flipped into the same hemisphere.
pub(crate) fn state_error(x: &[f64; STATE_DIM], r: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
    let dot: f64 = (6..10).map(|i| x[i] * r[i]).sum();
    let sign = if dot < 0.0 { -1.0 } else { 1.0 };
    let mut e = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        e[i] = if i < 6 {
            x[i] - r[i]
        } else {
            x[i] - sign * r[i]
        };
    }
    e
}

pub(crate) fn quad_form(e: &[f64], q: &[f64]) -> f64 {
    e.iter().zip(q).map(|(a, w)| w * a * a).sum()
}

pub(crate) fn control_error(u: &[f64; CONTROL_DIM], g: f64) -> [f64; CONTROL_DIM] {
    [u[0] - g, u[1], u[2], u[3]]
}

fn control_cost(controls: &[ControlInput], w: &CostWeights, g: f64) -> f64 {
    controls
        .iter()
        .map(|u| quad_form(&control_error(&u.to_array(), g), &w.q_u))
        .sum()
}

/// Gate-following cost: input regularization plus spread-weighted tracking of
/// the current gate over states `0..=H`.
pub fn cost_follow(traj: Trajectory, req: &MpcRequest, w: &CostWeights, d: f64, g: f64) -> f64 {
    let r = gate_reference_embed(&req.gate_now).to_array();
    let tracking: f64 = traj
        .states
        .iter()
        .enumerate()
        .map(|(k, x)| {
            w.spread(k as f64 * d, req.t_f) * quad_form(&state_error(&x.to_array(), &r), &w.q_f)
        })
        .sum();
    control_cost(traj.controls, w, g) + tracking
}

/// Gate-passing cost: running tracking of the predicted gate over states
/// `0..H`, plus the terminal pull to the target.
pub fn cost_pass(traj: Trajectory, req: &MpcRequest, w: &CostWeights, d: f64, g: f64) -> f64 {
    let r = gate_reference_embed(&req.gate_pred).to_array();
    let h = traj.states.len() - 1;
    let running: f64 = traj.states[..h]
        .iter()
        .enumerate()
        .map(|(k, x)| {
            w.spread(k as f64 * d, req.t_p) * quad_form(&state_error(&x.to_array(), &r), &w.q_p)
        })
        .sum();
    let terminal = quad_form(
        &state_error(&traj.states[h].to_array(), &req.x_target.to_array()),
        &w.q_g,
    );
    control_cost(traj.controls, w, g) + running + terminal
}

/// `λ c_follow + (1 − λ) c_pass`.
pub fn hybrid_cost(traj: Trajectory, req: &MpcRequest, w: &CostWeights, d: f64, g: f64) -> f64 {
    req.lambda * cost_follow(traj, req, w, d, g)
        + (1.0 - req.lambda) * cost_pass(traj, req, w, d, g)
}

/// One weighted quadratic pull `coef · (x − r)ᵀ diag(q) (x − r)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StateTerm {
    pub coef: f64,
    pub diag: [f64; STATE_DIM],
    pub reference: [f64; STATE_DIM],
}

/// Per-stage state terms of the hybrid cost, precomputed for a request.
#[derive(Debug, Clone)]
pub(crate) struct StageCosts {
    /// `terms[k]` applies to state `k`, `k = 0..=H`.
    pub terms: Vec<Vec<StateTerm>>,
    pub q_u: [f64; CONTROL_DIM],
    pub g: f64,
}

impl StageCosts {
    pub fn new(req: &MpcRequest, w: &CostWeights, horizon: usize, d: f64, g: f64) -> Self {
        let follow = gate_reference_embed(&req.gate_now).to_array();
        let pass = gate_reference_embed(&req.gate_pred).to_array();
        let target = req.x_target.to_array();
        let lam = req.lambda;
        let terms = (0..=horizon)
            .map(|k| {
                let t = k as f64 * d;
                let mut v = vec![StateTerm {
                    coef: lam * w.spread(t, req.t_f),
                    diag: w.q_f,
                    reference: follow,
                }];
                if k < horizon {
                    v.push(StateTerm {
                        coef: (1.0 - lam) * w.spread(t, req.t_p),
                        diag: w.q_p,
                        reference: pass,
                    });
                } else {
                    v.push(StateTerm {
                        coef: 1.0 - lam,
                        diag: w.q_g,
                        reference: target,
                    });
                }
                v.retain(|term| term.coef != 0.0);
                v
            })
            .collect();
        StageCosts {
            terms,
            q_u: w.q_u,
            g,
        }
    }

    // Mirrors `hybrid_cost` term by term.
    pub fn total(&self, states: &[[f64; STATE_DIM]], controls: &[[f64; CONTROL_DIM]]) -> f64 {
        let u: f64 = controls
            .iter()
            .map(|u| quad_form(&control_error(u, self.g), &self.q_u))
            .sum();
        let x: f64 = states
            .iter()
            .zip(&self.terms)
            .map(|(x, terms)| {
                terms
                    .iter()
                    .map(|t| t.coef * quad_form(&state_error(x, &t.reference), &t.diag))
                    .sum::<f64>()
            })
            .sum();
        u + x
    }

    /// Gradient and (diagonal) Hessian of the state cost at stage `k`.
    pub fn state_derivatives(
        &self,
        k: usize,
        x: &[f64; STATE_DIM],
    ) -> ([f64; STATE_DIM], [f64; STATE_DIM]) {
        let mut grad = [0.0; STATE_DIM];
        let mut hess = [0.0; STATE_DIM];
        for t in &self.terms[k] {
            let e = state_error(x, &t.reference);
            for i in 0..STATE_DIM {
                grad[i] += 2.0 * t.coef * t.diag[i] * e[i];
                hess[i] += 2.0 * t.coef * t.diag[i];
            }
        }
        (grad, hess)
    }

    pub fn control_derivatives(
        &self,
        u: &[f64; CONTROL_DIM],
    ) -> ([f64; CONTROL_DIM], [f64; CONTROL_DIM]) {
        let e = control_error(u, self.g);
        let mut grad = [0.0; CONTROL_DIM];
        let mut hess = [0.0; CONTROL_DIM];
        for i in 0..CONTROL_DIM {
            grad[i] = 2.0 * self.q_u[i] * e[i];
            hess[i] = 2.0 * self.q_u[i];
        }
        (grad, hess)
    }
}
