//! Measurements shared by the focused integration tests and the acceptance run.
#![allow(dead_code)]

use std::f64::consts::PI;

use hympc_core::dynamics::{gate_observe, gate_step, GateGeometry, GateState, Pendulum};
use hympc_core::predictor::{GateHistory, GatePredictor, PredictorConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const G: f64 = 9.81;
pub const D: f64 = 0.02;

/// One-second-ahead forecast errors after five seconds of online training.
#[derive(Debug, Clone, Copy)]
pub struct PredictorScore {
    pub learned: f64,
    pub hold: f64,
}

pub fn predictor_score(seed: u64, cfg: PredictorConfig) -> PredictorScore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = GateGeometry::default();
    let pend = Pendulum::new(geo.arm_length, G, 0.0);
    let mut s = GateState {
        theta: rng.gen_range(-PI / 4.0..=PI / 4.0),
        theta_dot: rng.gen_range(-PI / 20.0..=PI / 20.0),
    };
    let train_ticks = (5.0 / D).round() as usize;
    let ahead = (1.0 / D).round() as usize;
    let eval_ticks = 100;
    let mut obs = Vec::with_capacity(train_ticks + eval_ticks + ahead + 1);
    for _ in 0..=train_ticks + eval_ticks + ahead {
        obs.push(gate_observe(&s, &geo));
        s = gate_step(&s, &pend, D).unwrap();
    }

    let cfg = PredictorConfig { seed, ..cfg };
    let mut hist = GateHistory::new(cfg.history_capacity);
    let mut p = GatePredictor::new(cfg).unwrap();
    for (k, o) in obs.iter().enumerate().take(train_ticks + 1) {
        hist.push(k as f64 * D, *o).unwrap();
        p.observe_and_train(&hist).unwrap();
    }

    let (mut learned, mut hold) = (0.0, 0.0);
    for k in train_ticks..train_ticks + eval_ticks {
        let truth = obs[k + ahead].center;
        let f = p.predict(&obs[k - 1], &obs[k], 1.0);
        learned += (f.center - truth).norm();
        hold += (obs[k].center - truth).norm();
    }
    PredictorScore {
        learned: learned / eval_ticks as f64,
        hold: hold / eval_ticks as f64,
    }
}

use hympc_core::dynamics::{
    drone_step_euler, drone_step_rk4, ControlInput, DroneState, GateObservation,
};
use hympc_core::math::{UnitQuaternion, Vec3};
use hympc_core::mpc::{hybrid_cost, solve, MpcConfig, MpcRequest, Trajectory};
use hympc_core::nnet::{Mlp, TrainBatch};
use hympc_core::search::{
    classify, em_update, reward, RewardConfig, TrajectoryVerdict, VerdictClass,
};

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return Vec3::new(v.x / n, v.y / n, v.z / n);
        }
    }
}

/// Largest gap between quaternion rotation and the Rodrigues rotation matrix.
pub fn quat_rotation_max_err(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let k = unit(&mut rng);
        let angle = rng.gen_range(-PI..PI);
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let (s, c) = angle.sin_cos();
        // R v = v cos θ + (k × v) sin θ + k (k·v)(1 − cos θ)
        let kxv = k.cross(v);
        let kv = k.dot(v);
        let expect = [
            v.x * c + kxv.x * s + k.x * kv * (1.0 - c),
            v.y * c + kxv.y * s + k.y * kv * (1.0 - c),
            v.z * c + kxv.z * s + k.z * kv * (1.0 - c),
        ];
        let got = UnitQuaternion::from_axis_angle(k, angle)
            .rotate(v)
            .to_array();
        for i in 0..3 {
            worst = worst.max((got[i] - expect[i]).abs());
        }
    }
    worst
}

fn fly(x0: &DroneState, u: &ControlInput, d: f64, t: f64) -> DroneState {
    let n = (t / d).round() as usize;
    (0..n).fold(*x0, |x, _| drone_step_rk4(&x, u, d, G).unwrap())
}

/// `e(d) / e(d/2)` for the drone RK4 integrator against a fine reference.
pub fn rk4_error_ratio() -> f64 {
    let x0 = DroneState {
        p: Vec3::new(0.0, 0.0, 1.0),
        v: Vec3::new(1.0, -0.5, 0.2),
        q: UnitQuaternion::from_axis_angle(Vec3::new(0.2, 1.0, -0.3), 0.4),
    };
    let u = ControlInput::new(12.0, Vec3::new(1.5, -2.0, 0.7));
    let t = 1.0;
    let truth = fly(&x0, &u, 0.1 / 256.0, t).to_array();
    let err = |d: f64| {
        let x = fly(&x0, &u, d, t).to_array();
        x.iter()
            .zip(&truth)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    err(0.1) / err(0.05)
}

/// Largest relative energy drift of the undamped gate over ten seconds.
pub fn pendulum_energy_drift() -> f64 {
    let pend = Pendulum::new(2.0, G, 0.0);
    let mut worst: f64 = 0.0;
    for (theta, theta_dot) in [(PI / 4.0, PI / 20.0), (-0.5, 0.0), (0.1, -0.3)] {
        let mut s = GateState { theta, theta_dot };
        let e0 = pend.energy(&s);
        for _ in 0..(10.0 / D) as usize {
            s = gate_step(&s, &pend, D).unwrap();
            worst = worst.max(((pend.energy(&s) - e0) / e0).abs());
        }
    }
    worst
}

/// `‖g − g_fd‖ / ‖g_fd‖` for backprop against central differences.
pub fn mlp_grad_rel_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new_random(&[5, 8, 7, 3], seed).unwrap();
    let rows = |n: usize, m: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect()
    };
    let x = rows(6, 5, &mut rng);
    let y = rows(6, 3, &mut rng);
    let batch = TrainBatch::from_rows(&x, &y).unwrap();
    let (_, grads) = net.gradients(&batch).unwrap();
    let analytic: Vec<f64> = grads
        .layers
        .iter()
        .flat_map(|l| {
            l.weights
                .iter()
                .chain(l.biases.iter())
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    let p0 = net.params_flat();
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(p0.len());
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] = p0[i] + h;
        net.set_params_flat(&p).unwrap();
        let up = net.loss(&batch).unwrap();
        p[i] = p0[i] - h;
        net.set_params_flat(&p).unwrap();
        let down = net.loss(&batch).unwrap();
        numeric.push((up - down) / (2.0 * h));
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm
}

#[derive(Debug, Default, Clone, Copy)]
pub struct MpcContracts {
    pub instances: usize,
    pub replay_err: f64,
    pub box_violation: f64,
    pub cost_increases: usize,
    pub affine_err: f64,
}

pub fn random_request(rng: &mut ChaCha8Rng, t_h: f64) -> MpcRequest {
    let gate = |rng: &mut ChaCha8Rng| GateObservation {
        center: Vec3::new(2.0, rng.gen_range(-1.0..1.0), rng.gen_range(0.6..1.4)),
        center_vel: Vec3::new(0.0, rng.gen_range(-2.0..2.0), rng.gen_range(-0.5..0.5)),
    };
    let x0 = DroneState {
        p: Vec3::new(
            rng.gen_range(-4.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.5..2.0),
        ),
        v: Vec3::new(
            rng.gen_range(0.0..6.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ),
        q: UnitQuaternion::from_axis_angle(unit(rng), rng.gen_range(-0.5..0.5)),
    };
    MpcRequest {
        x0,
        gate_now: gate(rng),
        gate_pred: gate(rng),
        t_p: (rng.gen_range(1..=10) as f64 * 0.1).min(t_h),
        t_f: t_h,
        x_target: DroneState::at_rest(Vec3::new(4.0, 0.0, 1.0)),
        lambda: rng.gen_range(0.0..=1.0),
    }
}

pub fn mpc_contracts(instances: usize, seed: u64) -> MpcContracts {
    let cfg = MpcConfig::default();
    let (lo, hi) = cfg.limits.control_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MpcContracts {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let req = random_request(&mut rng, cfg.horizon_time());
        let sol = solve(&req, &cfg, None).unwrap();

        let mut x = req.x0;
        for (k, u) in sol.controls.iter().enumerate() {
            x = drone_step_euler(&x, u, cfg.dt, cfg.limits.g).unwrap();
            let (a, b) = (x.to_array(), sol.states[k + 1].to_array());
            for i in 0..a.len() {
                out.replay_err = out.replay_err.max((a[i] - b[i]).abs());
            }
            let u = u.to_array();
            for i in 0..u.len() {
                out.box_violation = out.box_violation.max(lo[i] - u[i]).max(u[i] - hi[i]);
            }
        }
        out.cost_increases += sol.cost_history.windows(2).filter(|w| w[1] > w[0]).count();

        let traj = Trajectory {
            states: &sol.states,
            controls: &sol.controls,
        };
        let at = |lambda: f64| {
            hybrid_cost(
                traj,
                &MpcRequest { lambda, ..req },
                &cfg.weights,
                cfg.dt,
                cfg.limits.g,
            )
        };
        let (j0, j5, j1) = (at(0.0), at(0.5), at(1.0));
        let scale = j0.abs().max(j1.abs()).max(1.0);
        out.affine_err = out.affine_err.max((j5 - 0.5 * (j0 + j1)).abs() / scale);
    }
    out
}

/// Maximizes `f` on `[a, b]` by golden-section search.
pub fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-12 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct EmReport {
    pub sets: usize,
    pub mu_err: f64,
    pub sigma_err: f64,
    pub shift_err: f64,
    pub hull_violations: usize,
}

/// Compares the closed-form update with a numerical maximizer of
/// `Σ wᵢ log N(λᵢ; μ, σ²)` on random sample sets.
pub fn em_report(sets: usize, seed: u64) -> EmReport {
    let zeta = 3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = EmReport {
        sets,
        ..Default::default()
    };
    for _ in 0..sets {
        let n = rng.gen_range(2..=8);
        let samples: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(0.0..=1.0), rng.gen_range(-1.0..0.0)))
            .collect();
        let p = em_update(&samples, zeta, 1e-9).unwrap();

        let r_max = samples
            .iter()
            .map(|s| s.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = samples
            .iter()
            .map(|s| (zeta * (s.1 - r_max)).exp())
            .collect();
        let loglik = |mu: f64, sigma: f64| -> f64 {
            samples
                .iter()
                .zip(&w)
                .map(|(s, wi)| wi * (-(s.0 - mu).powi(2) / (2.0 * sigma * sigma) - sigma.ln()))
                .sum()
        };
        let lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let hi = samples
            .iter()
            .map(|s| s.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let mu_ml = golden_max(|m| loglik(m, 0.3), lo, hi);
        let log_sigma = golden_max(|ls| loglik(mu_ml, ls.exp()), -12.0, 2.0);
        let sigma_ml = log_sigma.exp();
        let v1: f64 = w.iter().sum();
        let v2: f64 = w.iter().map(|x| x * x).sum();
        let sigma_expect = sigma_ml * (v1 * v1 / (v1 * v1 - v2)).sqrt();
        out.mu_err = out.mu_err.max((p.mu - mu_ml).abs());
        out.sigma_err = out.sigma_err.max((p.sigma - sigma_expect).abs());

        let shift = rng.gen_range(-50.0..50.0);
        let shifted: Vec<(f64, f64)> = samples.iter().map(|s| (s.0, s.1 + shift)).collect();
        let q = em_update(&shifted, zeta, 1e-9).unwrap();
        out.shift_err = out
            .shift_err
            .max((p.mu - q.mu).abs())
            .max((p.sigma - q.sigma).abs());
        if p.mu < lo || p.mu > hi {
            out.hull_violations += 1;
        }
    }
    out
}

fn straight(xs: &[f64], y: f64) -> Vec<DroneState> {
    xs.iter()
        .map(|&x| DroneState::at_rest(Vec3::new(x, y, 1.0)))
        .collect()
}

fn verdict(xs: &[f64], y: f64) -> TrajectoryVerdict {
    let gates = vec![
        GateObservation {
            center: Vec3::new(2.0, 0.0, 1.0),
            center_vel: Vec3::ZERO
        };
        xs.len()
    ];
    classify(&straight(xs, y), &gates, Vec3::new(1.0, 0.0, 0.0), 0.3).unwrap()
}

/// Named constructed cases for the plane-crossing detector.
pub fn classification_cases() -> Vec<(&'static str, bool)> {
    let eps = 0.3f64;
    let at_eps = verdict(&[1.9, 2.0], eps);
    vec![
        (
            "before plane",
            verdict(&[1.0, 1.5, 1.9], 0.0).class == VerdictClass::NotReached,
        ),
        ("landing on plane", {
            let v = verdict(&[1.8, 1.9, 2.0], 0.0);
            v.class == VerdictClass::Success && v.crossing == Some(2)
        }),
        ("passing through", {
            let v = verdict(&[1.8, 1.95, 2.05, 2.2], 0.1);
            v.class == VerdictClass::Success
                && v.crossing == Some(2)
                && (v.error.unwrap() - 0.0125f64.sqrt()).abs() < 1e-12
        }),
        (
            "starting past plane",
            verdict(&[2.5, 3.0, 3.5], 0.0).class == VerdictClass::NotReached,
        ),
        (
            "just inside radius",
            verdict(&[1.9, 2.0], eps - 1e-9).class == VerdictClass::Success,
        ),
        ("radius is strict", {
            let e = at_eps.error.unwrap();
            (e >= eps) == (at_eps.class == VerdictClass::Failure)
        }),
        (
            "just outside radius",
            verdict(&[1.9, 2.0], eps + 1e-9).class == VerdictClass::Failure,
        ),
    ]
}

/// Identical on-target Success trajectories score strictly better with earlier `t_p`.
pub fn traversal_time_monotone() -> bool {
    let gates = vec![
        GateObservation {
            center: Vec3::new(2.0, 0.0, 1.0),
            center_vel: Vec3::ZERO
        };
        51
    ];
    let states: Vec<DroneState> = gates
        .iter()
        .map(|g| DroneState::at_rest(g.center))
        .collect();
    let v = TrajectoryVerdict {
        class: VerdictClass::Success,
        crossing: Some(1),
        error: Some(0.0),
    };
    let cfg = RewardConfig::default();
    let r: Vec<f64> = (1..=10)
        .map(|i| reward(&states, &gates, &v, i as f64 * 0.1, &cfg, D))
        .collect();
    r.windows(2).all(|w| w[0] > w[1])
}
