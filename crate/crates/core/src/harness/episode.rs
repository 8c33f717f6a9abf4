use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ControllerKind, ScenarioConfig};
use crate::deep::{DeepPolicy, Observation};
use crate::dynamics::{
    apply_plant_limits, drone_step_rk4, gate_observe, gate_step, ControlInput, DroneState,
    GateGeometry, GateObservation, GateState, Pendulum,
};
use crate::error::{Error, Result};
use crate::math::{quat_rotate, Vec3};
use crate::mpc::{solve, MpcConfig, MpcRequest, MpcSolution};
use crate::predictor::{GateForecast, GateHistory, GatePredictor, OracleForecast};
use crate::search::{classify, search, SearchConfig, SearchProblem, VerdictClass};

/// `‖p − g‖ / ‖p₀ − g₀‖` over positions, clamped to `[0, 1]`.
pub fn manual_lambda(
    drone: &DroneState,
    gate_now: &GateObservation,
    drone0: &DroneState,
    gate0: &GateObservation,
) -> f64 {
    let initial = (drone0.p - gate0.center).norm();
    if initial == 0.0 {
        return 0.0;
    }
    ((drone.p - gate_now.center).norm() / initial).clamp(0.0, 1.0)
}

/// Per-episode seeds drawn from one master seed.
pub fn spawn_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.gen()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Traversed,
    Timeout,
    Crashed,
    SolverFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub gate: usize,
    pub success: bool,
    pub error: f64,
    /// Time since episode start, s.
    pub time: f64,
}

/// One row of the per-episode log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub gate_index: usize,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub c: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
    pub gate_x: f64,
    pub gate_y: f64,
    pub gate_z: f64,
    pub gate_vx: f64,
    pub gate_vy: f64,
    pub gate_vz: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub lambda: f64,
    pub t_p: f64,
    /// One-tick-ahead forecast error of the gate center, m.
    pub predictor_error: Option<f64>,
    pub solver_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub controller: ControllerKind,
    pub outcome: Outcome,
    /// Every gate crossed, each within the success radius.
    pub success: bool,
    /// Error at the last crossing.
    pub traversal_error: Option<f64>,
    /// Time of the last crossing.
    pub traversal_time: Option<f64>,
    pub gates: Vec<GateResult>,
    pub ticks: usize,
    pub mean_solver_iterations: f64,
    #[serde(skip)]
    pub log: Vec<TickRecord>,
}

impl EpisodeMetrics {
    pub fn write_log_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.log {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Randomized initial conditions of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSetup {
    pub seed: u64,
    pub drone: DroneState,
    pub gates: Vec<(GateGeometry, GateState)>,
}

impl EpisodeSetup {
    /// `num_gates` gates spaced along the first gate's normal, each with an
    /// independent random pendulum state.
    pub fn sample(cfg: &ScenarioConfig, seed: u64, num_gates: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = cfg.gate_init;
        let gates = (0..num_gates)
            .map(|j| {
                let mut geo = cfg.gate;
                geo.pivot = geo.pivot + geo.alpha * (cfg.sweeps.gate_spacing * j as f64);
                let s = GateState {
                    theta: rng.gen_range(-init.theta_max..=init.theta_max),
                    theta_dot: rng.gen_range(-init.theta_dot_max..=init.theta_dot_max),
                };
                (geo, s)
            })
            .collect();
        EpisodeSetup {
            seed,
            drone: DroneState::at_rest(cfg.drone_start),
            gates,
        }
    }
}

/// What the controller saw and chose on one tick; handed to the tick hook.
#[derive(Debug, Clone, Copy)]
pub struct TickInfo {
    pub t: f64,
    pub drone: DroneState,
    pub gate: GateObservation,
    pub lambda: f64,
    pub t_p: f64,
}

struct Decision {
    lambda: f64,
    t_p: f64,
    solution: MpcSolution,
}

struct Controller<'a> {
    kind: ControllerKind,
    cfg: &'a ScenarioConfig,
    mpc_spread_off: MpcConfig,
    deep: Option<&'a DeepPolicy>,
    rng: ChaCha8Rng,
    mpc: MpcConfig,
}

impl Controller<'_> {
    #[allow(clippy::too_many_arguments)]
    fn decide(
        &mut self,
        x0: DroneState,
        gate_now: GateObservation,
        track: &[GateObservation],
        target: DroneState,
        alpha: Vec3,
        start: (DroneState, GateObservation),
        warm: Option<&MpcSolution>,
    ) -> Result<Decision> {
        let cfg = self.cfg;
        let h = cfg.mpc.horizon;
        let d = cfg.mpc.dt;
        let problem = SearchProblem {
            x0,
            gate_now,
            gate_track: track,
            x_target: target,
            alpha,
            warm_start: warm,
        };
        let direct = |lambda: f64, t_p: f64, mpc: &MpcConfig| -> Result<Decision> {
            let j = ((t_p / d).round() as usize).min(h);
            let req = MpcRequest {
                x0,
                gate_now,
                gate_pred: track[j],
                t_p,
                t_f: mpc.horizon_time(),
                x_target: target,
                lambda,
            };
            Ok(Decision {
                lambda,
                t_p,
                solution: solve(&req, mpc, warm)?,
            })
        };
        match self.kind {
            ControllerKind::HympcGaussian | ControllerKind::OracleDynamics => {
                let out = search(&problem, &cfg.search, &self.mpc, &cfg.reward, &mut self.rng)?;
                Ok(Decision {
                    lambda: out.lambda,
                    t_p: out.t_p,
                    solution: out.best.solution,
                })
            }
            ControllerKind::ManualMpc => {
                let lambda = manual_lambda(&x0, &gate_now, &start.0, &start.1);
                let scfg = SearchConfig {
                    fixed_lambda: Some(lambda),
                    ..cfg.search.clone()
                };
                let out = search(&problem, &scfg, &self.mpc, &cfg.reward, &mut self.rng)?;
                Ok(Decision {
                    lambda,
                    t_p: out.t_p,
                    solution: out.best.solution,
                })
            }
            ControllerKind::StandardMpc => {
                direct(0.5, cfg.mpc.horizon_time(), &self.mpc_spread_off)
            }
            ControllerKind::HympcDeep => {
                let policy = self
                    .deep
                    .ok_or_else(|| Error::Config("hympc-deep needs a trained policy".into()))?;
                let (lambda, t_p) = policy.infer(&Observation::new(&x0, &gate_now));
                direct(lambda, t_p, &self.mpc)
            }
        }
    }
}

impl Controller<'_> {
    /// Lowers the planning thrust bound to the thrust the plant actually
    /// delivered when a command visibly fell short.
    fn observe_thrust(
        &mut self,
        x: &DroneState,
        commanded: f64,
        expected: &DroneState,
        actual: &DroneState,
        d: f64,
    ) {
        let axis = quat_rotate(x.q, Vec3::new(0.0, 0.0, 1.0));
        let delivered = commanded + ((actual.v - expected.v) * (1.0 / d)).dot(axis);
        if commanded - delivered > THRUST_SHORTFALL {
            let cap = delivered.max(self.mpc.limits.c_min + THRUST_SHORTFALL);
            if cap < self.mpc.limits.c_max {
                self.mpc.limits.c_max = cap;
                self.mpc_spread_off.limits.c_max = cap;
            }
        }
    }
}

const THRUST_SHORTFALL: f64 = 0.5;

fn out_of_bounds(p: Vec3, bound: f64) -> bool {
    p.z < 0.0 || p.to_array().iter().any(|c| c.abs() > bound)
}

/// Runs one closed-loop episode. Only configuration problems are errors;
/// solver failures end the episode with [`Outcome::SolverFailure`].
pub fn run_episode(
    cfg: &ScenarioConfig,
    kind: ControllerKind,
    seed: u64,
    deep: Option<&DeepPolicy>,
) -> Result<EpisodeMetrics> {
    let setup = EpisodeSetup::sample(cfg, seed, 1);
    run_episode_with(cfg, kind, &setup, deep, &mut |_| {})
}

/// Runs a multi-gate episode with `cfg.sweeps.num_gates` gates.
pub fn run_multigate_episode(
    cfg: &ScenarioConfig,
    kind: ControllerKind,
    seed: u64,
    deep: Option<&DeepPolicy>,
) -> Result<EpisodeMetrics> {
    let setup = EpisodeSetup::sample(cfg, seed, cfg.sweeps.num_gates);
    run_episode_with(cfg, kind, &setup, deep, &mut |_| {})
}

/// Closed loop from an explicit setup; `hook` sees every tick's decision.
pub fn run_episode_with(
    cfg: &ScenarioConfig,
    kind: ControllerKind,
    setup: &EpisodeSetup,
    deep: Option<&DeepPolicy>,
    hook: &mut dyn FnMut(&TickInfo),
) -> Result<EpisodeMetrics> {
    cfg.validate()?;
    if kind == ControllerKind::HympcDeep && deep.is_none() {
        return Err(Error::Config("hympc-deep needs a trained policy".into()));
    }
    let d = cfg.mpc.dt;
    let h = cfg.mpc.horizon;
    let pendulum = Pendulum::new(cfg.gate.arm_length, cfg.mpc.limits.g, cfg.gate_damping);
    let mut spread_off = cfg.mpc.clone();
    spread_off.weights.temporal_spread = false;
    let mut controller = Controller {
        kind,
        cfg,
        mpc_spread_off: spread_off,
        deep,
        rng: ChaCha8Rng::seed_from_u64(setup.seed ^ 0x5eed_5eed),
        mpc: cfg.mpc.clone(),
    };
    let uses_predictor = kind != ControllerKind::OracleDynamics;

    let mut gate_states: Vec<GateState> = setup.gates.iter().map(|g| g.1).collect();
    let geometries: Vec<GateGeometry> = setup.gates.iter().map(|g| g.0).collect();
    let mut histories: Vec<GateHistory> = geometries
        .iter()
        .map(|_| GateHistory::new(cfg.predictor.history_capacity))
        .collect();
    let mut predictors = Vec::new();
    if uses_predictor {
        for j in 0..geometries.len() {
            let mut pc = cfg.predictor.clone();
            pc.seed = setup
                .seed
                .wrapping_add(j as u64)
                .wrapping_mul(0x2545_f491_4f6c_dd1d);
            predictors.push(GatePredictor::new(pc)?);
        }
    }

    let mut t = -cfg.observe_before_start;
    while t < -1e-9 {
        for (j, (s, g)) in gate_states.iter_mut().zip(&geometries).enumerate() {
            histories[j].push(t, gate_observe(s, g))?;
            if uses_predictor {
                predictors[j].observe_and_train(&histories[j])?;
            }
            *s = gate_step(s, &pendulum, d)?;
        }
        t += d;
    }
    t = 0.0;

    let mut x = setup.drone;
    let mut current = 0;
    let mut since_crossing = 0.0;
    let mut warm: Option<MpcSolution> = None;
    let mut results = Vec::new();
    let mut log = Vec::new();
    let mut iters_total = 0usize;
    let mut ticks = 0usize;
    let mut last_forecast: Option<Vec3> = None;
    let mut start_ref = (x, gate_observe(&gate_states[0], &geometries[0]));

    let outcome = loop {
        let observations: Vec<GateObservation> = gate_states
            .iter()
            .zip(&geometries)
            .map(|(s, g)| gate_observe(s, g))
            .collect();
        for (j, obs) in observations.iter().enumerate() {
            histories[j].push(t, *obs)?;
            if uses_predictor {
                predictors[j].observe_and_train(&histories[j])?;
            }
        }
        let gate_now = observations[current];
        let geo = geometries[current];
        let track = if uses_predictor {
            let (prev, cur) = histories[current]
                .latest_pair()
                .unwrap_or((gate_now, gate_now));
            predictors[current].predict_track(&prev, &cur, d, h)
        } else {
            OracleForecast {
                state: gate_states[current],
                pendulum,
                geometry: geo,
            }
            .track(d, h)
        };
        let predictor_error = last_forecast.map(|p| (p - gate_now.center).norm());
        last_forecast = Some(track[1].center);

        let target = if geometries.len() == 1 {
            cfg.default_target()
        } else {
            cfg.target_for(&geo)
        };
        let decision = match controller.decide(
            x,
            gate_now,
            &track,
            target,
            geo.alpha,
            start_ref,
            warm.as_ref(),
        ) {
            Ok(dec) => dec,
            Err(e) => break Outcome::SolverFailure(e.to_string()),
        };
        hook(&TickInfo {
            t,
            drone: x,
            gate: gate_now,
            lambda: decision.lambda,
            t_p: decision.t_p,
        });

        let commanded = decision.solution.first_control();
        let u = apply_plant_limits(&commanded, &cfg.mpc.limits);
        iters_total += decision.solution.iterations;
        ticks += 1;
        if cfg.record_log {
            log.push(tick_record(
                t,
                current,
                &x,
                &u,
                &gate_now,
                &gate_states[current],
                &decision,
                predictor_error,
            ));
        }

        let x_next = match drone_step_rk4(&x, &u, d, cfg.mpc.limits.g) {
            Ok(s) => s,
            Err(e) => break Outcome::SolverFailure(e.to_string()),
        };
        if cfg.thrust_adaptation {
            if let Ok(expected) = drone_step_rk4(&x, &commanded, d, cfg.mpc.limits.g) {
                controller.observe_thrust(&x, commanded.c, &expected, &x_next, d);
            }
        }
        for s in gate_states.iter_mut() {
            *s = gate_step(s, &pendulum, d)?;
        }
        t += d;
        since_crossing += d;
        warm = Some(decision.solution.shifted());

        let gate_next = gate_observe(&gate_states[current], &geo);
        let verdict = classify(
            &[x, x_next],
            &[gate_now, gate_next],
            geo.alpha,
            cfg.reward.success_radius,
        )?;
        x = x_next;
        if verdict.class != VerdictClass::NotReached {
            results.push(GateResult {
                gate: current,
                success: verdict.class == VerdictClass::Success,
                error: verdict.error.unwrap_or(f64::NAN),
                time: t,
            });
            current += 1;
            since_crossing = 0.0;
            last_forecast = None;
            if current == geometries.len() {
                break Outcome::Traversed;
            }
            start_ref = (x, gate_observe(&gate_states[current], &geometries[current]));
            continue;
        }
        if !x.is_finite() || out_of_bounds(x.p, cfg.crash_bound) {
            break Outcome::Crashed;
        }
        if since_crossing >= cfg.episode_timeout - 1e-9 {
            break Outcome::Timeout;
        }
    };

    let success = outcome == Outcome::Traversed && results.iter().all(|r| r.success);
    let last = results.last();
    Ok(EpisodeMetrics {
        seed: setup.seed,
        controller: kind,
        outcome,
        success,
        traversal_error: last.map(|r| r.error),
        traversal_time: last.map(|r| r.time),
        gates: results,
        ticks,
        mean_solver_iterations: if ticks > 0 {
            iters_total as f64 / ticks as f64
        } else {
            0.0
        },
        log,
    })
}

#[allow(clippy::too_many_arguments)]
fn tick_record(
    t: f64,
    gate_index: usize,
    x: &DroneState,
    u: &ControlInput,
    g: &GateObservation,
    s: &GateState,
    dec: &Decision,
    predictor_error: Option<f64>,
) -> TickRecord {
    TickRecord {
        t,
        gate_index,
        px: x.p.x,
        py: x.p.y,
        pz: x.p.z,
        vx: x.v.x,
        vy: x.v.y,
        vz: x.v.z,
        qw: x.q.w,
        qx: x.q.x,
        qy: x.q.y,
        qz: x.q.z,
        c: u.c,
        wx: u.omega.x,
        wy: u.omega.y,
        wz: u.omega.z,
        gate_x: g.center.x,
        gate_y: g.center.y,
        gate_z: g.center.z,
        gate_vx: g.center_vel.x,
        gate_vy: g.center_vel.y,
        gate_vz: g.center_vel.z,
        theta: s.theta,
        theta_dot: s.theta_dot,
        lambda: dec.lambda,
        t_p: dec.t_p,
        predictor_error,
        solver_iterations: dec.solution.iterations,
    }
}
