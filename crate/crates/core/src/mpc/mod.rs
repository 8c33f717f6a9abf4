//! Parameterized model-predictive controller.
//!
//! Single shooting: the decision variables are the `H` control inputs, the
//! states follow from the Euler model, so the dynamics hold by construction.
//! Each iteration computes the exact gradient by an adjoint sweep, a
//! Gauss–Newton step by a Riccati recursion (controls pinned at an active bound
//! are held fixed), and a projected Armijo backtracking line search. If the
//! Gauss–Newton step fails the line search, a projected gradient step is tried.

mod cost;

use std::io::Write;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use cost::StageCosts;
pub use cost::{
    cost_follow, cost_pass, gate_reference_embed, hybrid_cost, CostWeights, Trajectory,
};

use crate::dynamics::{
    ControlInput, DroneLimits, DroneState, GateObservation, CONTROL_DIM, STATE_DIM,
};
use crate::error::{Error, Result};

type Sv = SVector<f64, STATE_DIM>;
type Cv = SVector<f64, CONTROL_DIM>;
type Amat = SMatrix<f64, STATE_DIM, STATE_DIM>;
type Bmat = SMatrix<f64, STATE_DIM, CONTROL_DIM>;
type Kmat = SMatrix<f64, CONTROL_DIM, STATE_DIM>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop when the projected gradient's ∞-norm falls below this.
    pub grad_tol: f64,
    /// Also stop when an iteration lowers the cost by less than this fraction; 0 disables.
    pub rel_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Levenberg term added to the reduced input Hessian.
    pub regularization: f64,
    /// Keep `(iteration, cost, gradient norm)` per iteration.
    pub trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 50,
            grad_tol: 1e-4,
            rel_tol: 0.0,
            armijo: 1e-4,
            max_backtracks: 30,
            regularization: 1e-9,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub limits: DroneLimits,
    pub weights: CostWeights,
    pub solver: SolverConfig,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 50,
            dt: 0.02,
            limits: DroneLimits::default(),
            weights: CostWeights::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl MpcConfig {
    /// `t_H = H · d`.
    pub fn horizon_time(&self) -> f64 {
        self.horizon as f64 * self.dt
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.horizon < 2 {
            return Err("horizon must be at least 2 steps".into());
        }
        if !(self.dt > 0.0) {
            return Err("dt must be positive".into());
        }
        self.limits.validate()?;
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcRequest {
    pub x0: DroneState,
    /// Follow reference: the gate as observed now.
    pub gate_now: GateObservation,
    /// Pass waypoint: the gate forecast at `t_p`.
    pub gate_pred: GateObservation,
    pub t_p: f64,
    pub t_f: f64,
    pub x_target: DroneState,
    pub lambda: f64,
}

impl MpcRequest {
    pub fn validate(&self, t_h: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(0.0..=t_h + 1e-9).contains(&self.t_p) {
            return Err(Error::InvalidArgument(format!(
                "t_p {} outside [0, {t_h}]",
                self.t_p
            )));
        }
        if !self.x0.is_finite() {
            return Err(Error::InvalidArgument("non-finite initial state".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub states: Vec<DroneState>,
    pub controls: Vec<ControlInput>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Projected-gradient ∞-norm at the returned controls.
    pub grad_norm: f64,
    /// Cost before the first iteration and after each accepted step.
    pub cost_history: Vec<f64>,
    pub trace: Vec<IterationRecord>,
}

impl MpcSolution {
    /// The control to execute now.
    pub fn first_control(&self) -> ControlInput {
        self.controls[0]
    }

    /// Controls advanced by one tick, last input repeated; for warm starts.
    pub fn shifted(&self) -> MpcSolution {
        let mut s = self.clone();
        if s.controls.len() > 1 {
            s.controls.rotate_left(1);
            let n = s.controls.len();
            s.controls[n - 1] = s.controls[n - 2];
        }
        s
    }

    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.trace {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Euler model step on raw vectors with its Jacobians.
struct Linearization {
    a: Amat,
    b: Bmat,
}

impl Linearization {
    /// `m · A`, touching only the structural nonzeros of `A`: the identity,
    /// the position–velocity coupling and the columns fed by the quaternion.
    fn right_a(&self, m: &Amat) -> Amat {
        let a = &self.a;
        let mut out = *m;
        for k in 0..3 {
            let (src, dst) = (m.column(k), 3 + k);
            out.column_mut(dst).axpy(a[(k, dst)], &src, 1.0);
        }
        let rows = m.fixed_view::<STATE_DIM, 7>(0, 3);
        let blk = a.fixed_view::<7, 4>(3, 6);
        out.fixed_view_mut::<STATE_DIM, 4>(0, 6)
            .copy_from(&(rows * blk));
        out
    }

    /// `m · B`; only the thrust column of the velocity rows and the rate
    /// block of the quaternion rows are nonzero.
    fn right_b(&self, m: &Amat) -> Bmat {
        let b = &self.b;
        let mut out = Bmat::zeros();
        out.column_mut(0)
            .copy_from(&(m.fixed_view::<STATE_DIM, 3>(0, 3) * b.fixed_view::<3, 1>(3, 0)));
        out.fixed_view_mut::<STATE_DIM, 3>(0, 1)
            .copy_from(&(m.fixed_view::<STATE_DIM, 4>(0, 6) * b.fixed_view::<4, 3>(6, 1)));
        out
    }
}

fn euler_step_raw(
    x: &[f64; STATE_DIM],
    u: &[f64; CONTROL_DIM],
    d: f64,
    g: f64,
) -> [f64; STATE_DIM] {
    let (c, wx, wy, wz) = (u[0], u[1], u[2], u[3]);
    let (qw, qx, qy, qz) = (x[6], x[7], x[8], x[9]);
    let acc = [
        2.0 * c * (qx * qz + qw * qy),
        2.0 * c * (qy * qz - qw * qx),
        c * (1.0 - 2.0 * (qx * qx + qy * qy)) - g,
    ];
    let qd = [
        0.5 * (-wx * qx - wy * qy - wz * qz),
        0.5 * (wx * qw + wz * qy - wy * qz),
        0.5 * (wy * qw - wz * qx + wx * qz),
        0.5 * (wz * qw + wy * qx - wx * qy),
    ];
    let mut y = *x;
    for i in 0..3 {
        y[i] += d * x[3 + i];
        y[3 + i] += d * acc[i];
    }
    for i in 0..4 {
        y[6 + i] += d * qd[i];
    }
    let n = (y[6] * y[6] + y[7] * y[7] + y[8] * y[8] + y[9] * y[9]).sqrt();
    for v in &mut y[6..] {
        *v /= n;
    }
    y
}

fn linearize(x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM], d: f64) -> Linearization {
    let (c, wx, wy, wz) = (u[0], u[1], u[2], u[3]);
    let (qw, qx, qy, qz) = (x[6], x[7], x[8], x[9]);

    // Jacobian of y = x + d f(x, u), before normalization
    let mut a = Amat::identity();
    for i in 0..3 {
        a[(i, 3 + i)] = d;
    }
    // ∂v̇/∂q
    let dacc = [
        [2.0 * c * qy, 2.0 * c * qz, 2.0 * c * qw, 2.0 * c * qx],
        [-2.0 * c * qx, -2.0 * c * qw, 2.0 * c * qz, 2.0 * c * qy],
        [0.0, -4.0 * c * qx, -4.0 * c * qy, 0.0],
    ];
    for i in 0..3 {
        for j in 0..4 {
            a[(3 + i, 6 + j)] = d * dacc[i][j];
        }
    }
    // ∂q̇/∂q = ½ Λ(ω)
    let lam = crate::math::omega_matrix(crate::math::Vec3::new(wx, wy, wz));
    for i in 0..4 {
        for j in 0..4 {
            a[(6 + i, 6 + j)] += 0.5 * d * lam[i][j];
        }
    }
    let mut b = Bmat::zeros();
    let rz = [
        2.0 * (qx * qz + qw * qy),
        2.0 * (qy * qz - qw * qx),
        1.0 - 2.0 * (qx * qx + qy * qy),
    ];
    for i in 0..3 {
        b[(3 + i, 0)] = d * rz[i];
    }
    // ∂q̇/∂ω = ½ Ξ(q)
    let xi = [[-qx, -qy, -qz], [qw, -qz, qy], [qz, qw, -qx], [-qy, qx, qw]];
    for i in 0..4 {
        for j in 0..3 {
            b[(6 + i, 1 + j)] = 0.5 * d * xi[i][j];
        }
    }

    // normalization of the quaternion block: (I − q'q'ᵀ)/|q̃|
    let mut qt = [0.0; 4];
    for (i, v) in qt.iter_mut().enumerate() {
        *v = (0..4).map(|j| a[(6 + i, 6 + j)] * x[6 + j]).sum();
    }
    let nrm = qt.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut p = SMatrix::<f64, 4, 4>::identity();
    for i in 0..4 {
        for j in 0..4 {
            p[(i, j)] -= qt[i] * qt[j] / (nrm * nrm);
        }
    }
    p /= nrm;
    let aq = p * a.fixed_view::<4, STATE_DIM>(6, 0);
    a.fixed_view_mut::<4, STATE_DIM>(6, 0).copy_from(&aq);
    let bq = p * b.fixed_view::<4, CONTROL_DIM>(6, 0);
    b.fixed_view_mut::<4, CONTROL_DIM>(6, 0).copy_from(&bq);
    Linearization { a, b }
}

fn rollout(
    x0: &[f64; STATE_DIM],
    controls: &[[f64; CONTROL_DIM]],
    d: f64,
    g: f64,
) -> Vec<[f64; STATE_DIM]> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x0);
    for u in controls {
        let next = euler_step_raw(states.last().expect("nonempty"), u, d, g);
        states.push(next);
    }
    states
}

fn project(u: &mut [f64; CONTROL_DIM], lo: &[f64; CONTROL_DIM], hi: &[f64; CONTROL_DIM]) {
    for i in 0..CONTROL_DIM {
        u[i] = u[i].clamp(lo[i], hi[i]);
    }
}

struct Problem<'a> {
    x0: [f64; STATE_DIM],
    costs: StageCosts,
    cfg: &'a MpcConfig,
    lo: [f64; CONTROL_DIM],
    hi: [f64; CONTROL_DIM],
}

impl Problem<'_> {
    fn cost(&self, controls: &[[f64; CONTROL_DIM]]) -> (f64, Vec<[f64; STATE_DIM]>) {
        let states = rollout(&self.x0, controls, self.cfg.dt, self.cfg.limits.g);
        (self.costs.total(&states, controls), states)
    }

    /// Exact gradient dJ/du plus the linearization along the trajectory.
    fn gradient(
        &self,
        states: &[[f64; STATE_DIM]],
        controls: &[[f64; CONTROL_DIM]],
    ) -> (Vec<Cv>, Vec<Linearization>) {
        let h = controls.len();
        let d = self.cfg.dt;
        let lins: Vec<Linearization> = (0..h)
            .map(|k| linearize(&states[k], &controls[k], d))
            .collect();
        let mut grads = vec![Cv::zeros(); h];
        let (gx, _) = self.costs.state_derivatives(h, &states[h]);
        let mut adj = Sv::from_column_slice(&gx);
        for k in (0..h).rev() {
            let (gu, _) = self.costs.control_derivatives(&controls[k]);
            grads[k] = Cv::from_column_slice(&gu) + lins[k].b.transpose() * adj;
            let (gx, _) = self.costs.state_derivatives(k, &states[k]);
            adj = Sv::from_column_slice(&gx) + lins[k].a.transpose() * adj;
        }
        (grads, lins)
    }

    /// Gauss–Newton step with inputs in `active` held at zero.
    fn gauss_newton_step(
        &self,
        states: &[[f64; STATE_DIM]],
        controls: &[[f64; CONTROL_DIM]],
        lins: &[Linearization],
        active: &[[bool; CONTROL_DIM]],
    ) -> Option<Vec<Cv>> {
        let h = controls.len();
        let (gx, hx) = self.costs.state_derivatives(h, &states[h]);
        let mut vmat = Amat::from_diagonal(&Sv::from_column_slice(&hx));
        let mut vvec = Sv::from_column_slice(&gx);
        let mut ff = vec![Cv::zeros(); h];
        let mut fb = vec![Kmat::zeros(); h];
        let reg = self.cfg.solver.regularization;
        for k in (0..h).rev() {
            let lin = &lins[k];
            let (gx, hx) = self.costs.state_derivatives(k, &states[k]);
            let (gu, hu) = self.costs.control_derivatives(&controls[k]);
            let vb = lin.right_b(&vmat);
            let va = lin.right_a(&vmat);
            let va_t = va.transpose();
            let qx = Sv::from_column_slice(&gx) + lin.a.tr_mul(&vvec);
            let qu = Cv::from_column_slice(&gu) + lin.b.tr_mul(&vvec);
            let mut qxx = lin.right_a(&va_t).transpose();
            for i in 0..STATE_DIM {
                qxx[(i, i)] += hx[i];
            }
            let mut quu = lin.b.tr_mul(&vb);
            for i in 0..CONTROL_DIM {
                quu[(i, i)] += hu[i] + reg;
            }
            let qux = lin.right_b(&va_t).transpose();

            let mut quu_r = quu;
            let mut qu_r = qu;
            let mut qux_r = qux;
            for i in 0..CONTROL_DIM {
                if active[k][i] {
                    quu_r.row_mut(i).fill(0.0);
                    quu_r.column_mut(i).fill(0.0);
                    quu_r[(i, i)] = 1.0;
                    qu_r[i] = 0.0;
                    qux_r.row_mut(i).fill(0.0);
                }
            }
            let chol = quu_r.cholesky().or_else(|| {
                let mut m = quu_r;
                let shift = 1e-6 * (1.0 + m.diagonal().amax());
                for i in 0..CONTROL_DIM {
                    m[(i, i)] += shift;
                }
                m.cholesky()
            })?;
            let kff = -chol.solve(&qu_r);
            let kfb = -chol.solve(&qux_r);
            // The gain's free block zeroes the Kᵀ terms, leaving V = Qxx + QuxᵀK.
            let qux_t = qux.transpose();
            vmat = qxx + qux_t * kfb;
            vmat = 0.5 * (vmat + vmat.transpose());
            vvec = qx + qux_t * kff;
            ff[k] = kff;
            fb[k] = kfb;
        }
        let mut dx = Sv::zeros();
        let mut du = vec![Cv::zeros(); h];
        for k in 0..h {
            du[k] = ff[k] + fb[k] * dx;
            dx = lins[k].a * dx + lins[k].b * du[k];
        }
        Some(du)
    }

    fn projected_grad_norm(&self, controls: &[[f64; CONTROL_DIM]], grads: &[Cv]) -> f64 {
        let mut m: f64 = 0.0;
        for (u, g) in controls.iter().zip(grads) {
            for i in 0..CONTROL_DIM {
                let stepped = (u[i] - g[i]).clamp(self.lo[i], self.hi[i]);
                m = m.max((u[i] - stepped).abs());
            }
        }
        m
    }

    /// Projected backtracking along `dir`; returns the accepted point.
    fn line_search(
        &self,
        controls: &[[f64; CONTROL_DIM]],
        cost: f64,
        grads: &[Cv],
        dir: &[Cv],
        alpha0: f64,
        iteration: usize,
    ) -> Result<Option<(Vec<[f64; CONTROL_DIM]>, f64, Vec<[f64; STATE_DIM]>)>> {
        let mut alpha = alpha0;
        for _ in 0..=self.cfg.solver.max_backtracks {
            let mut trial = controls.to_vec();
            let mut decrease = 0.0;
            for k in 0..trial.len() {
                for i in 0..CONTROL_DIM {
                    trial[k][i] += alpha * dir[k][i];
                }
                project(&mut trial[k], &self.lo, &self.hi);
                for i in 0..CONTROL_DIM {
                    decrease += grads[k][i] * (trial[k][i] - controls[k][i]);
                }
            }
            let (c, states) = self.cost(&trial);
            if !c.is_finite() {
                return Err(Error::Solver {
                    iteration,
                    reason: format!("non-finite cost during line search (step {alpha:e})"),
                });
            }
            if decrease < 0.0 && c <= cost + self.cfg.solver.armijo * decrease {
                return Ok(Some((trial, c, states)));
            }
            alpha *= 0.5;
        }
        Ok(None)
    }
}

/// Solves one hybrid-cost MPC problem from `req.x0`.
///
/// Starts from `warm_start`'s controls (projected into the box) or from hover.
/// The returned cost never exceeds the starting cost.
pub fn solve(
    req: &MpcRequest,
    cfg: &MpcConfig,
    warm_start: Option<&MpcSolution>,
) -> Result<MpcSolution> {
    req.validate(cfg.horizon_time())?;
    let h = cfg.horizon;
    let (lo, hi) = cfg.limits.control_bounds();
    let g = cfg.limits.g;
    let problem = Problem {
        x0: req.x0.to_array(),
        costs: StageCosts::new(req, &cfg.weights, h, cfg.dt, g),
        cfg,
        lo,
        hi,
    };

    let hover = ControlInput::hover(g).to_array();
    let mut controls: Vec<[f64; CONTROL_DIM]> = match warm_start {
        Some(ws) if ws.controls.len() == h => ws.controls.iter().map(|u| u.to_array()).collect(),
        _ => vec![hover; h],
    };
    controls.iter_mut().for_each(|u| project(u, &lo, &hi));

    let (mut cost, mut states) = problem.cost(&controls);
    if !cost.is_finite() {
        return Err(Error::Solver {
            iteration: 0,
            reason: "non-finite initial cost".into(),
        });
    }
    let mut history = vec![cost];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;

    for it in 0..cfg.solver.max_iters {
        let (grads, lins) = problem.gradient(&states, &controls);
        grad_norm = problem.projected_grad_norm(&controls, &grads);
        if cfg.solver.trace {
            trace.push(IterationRecord {
                iteration: it,
                cost,
                grad_norm,
            });
        }
        if grad_norm < cfg.solver.grad_tol {
            converged = true;
            break;
        }
        let active: Vec<[bool; CONTROL_DIM]> = controls
            .iter()
            .zip(&grads)
            .map(|(u, gk)| {
                let mut a = [false; CONTROL_DIM];
                for i in 0..CONTROL_DIM {
                    a[i] = (u[i] <= lo[i] + 1e-12 && gk[i] > 0.0)
                        || (u[i] >= hi[i] - 1e-12 && gk[i] < 0.0);
                }
                a
            })
            .collect();

        let mut accepted = None;
        if let Some(dir) = problem.gauss_newton_step(&states, &controls, &lins, &active) {
            accepted = problem.line_search(&controls, cost, &grads, &dir, 1.0, it)?;
        }
        if accepted.is_none() {
            let dir: Vec<Cv> = grads.iter().map(|g| -g).collect();
            let gmax = grads.iter().map(|g| g.amax()).fold(0.0, f64::max).max(1.0);
            accepted = problem.line_search(&controls, cost, &grads, &dir, 1.0 / gmax, it)?;
        }
        iterations = it + 1;
        match accepted {
            Some((u, c, x)) => {
                let small = cost - c <= cfg.solver.rel_tol * cost.abs();
                controls = u;
                cost = c;
                states = x;
                history.push(cost);
                if small {
                    break;
                }
            }
            // no descent possible at working precision
            None => break,
        }
    }

    if iterations == cfg.solver.max_iters && !converged {
        let (grads, _) = problem.gradient(&states, &controls);
        grad_norm = problem.projected_grad_norm(&controls, &grads);
        converged = grad_norm < cfg.solver.grad_tol;
    }

    Ok(MpcSolution {
        states: states.iter().map(DroneState::from_array).collect(),
        controls: controls.iter().map(ControlInput::from_array).collect(),
        cost,
        iterations,
        converged,
        grad_norm,
        cost_history: history,
        trace,
    })
}

/// Gradient of the hybrid cost with respect to the flattened controls; exposed
/// for derivative checks.
pub fn cost_gradient(
    req: &MpcRequest,
    cfg: &MpcConfig,
    controls: &[ControlInput],
) -> (f64, Vec<f64>) {
    let (lo, hi) = cfg.limits.control_bounds();
    let problem = Problem {
        x0: req.x0.to_array(),
        costs: StageCosts::new(req, &cfg.weights, controls.len(), cfg.dt, cfg.limits.g),
        cfg,
        lo,
        hi,
    };
    let u: Vec<[f64; CONTROL_DIM]> = controls.iter().map(|u| u.to_array()).collect();
    let (c, states) = problem.cost(&u);
    let (grads, _) = problem.gradient(&states, &u);
    (
        c,
        grads
            .iter()
            .flat_map(|g| g.iter().copied().collect::<Vec<_>>())
            .collect(),
    )
}

/// Cost of a control sequence under the request, via the Euler rollout.
pub fn rollout_cost(
    req: &MpcRequest,
    cfg: &MpcConfig,
    controls: &[ControlInput],
) -> (f64, Vec<DroneState>) {
    let costs = StageCosts::new(req, &cfg.weights, controls.len(), cfg.dt, cfg.limits.g);
    let u: Vec<[f64; CONTROL_DIM]> = controls.iter().map(|u| u.to_array()).collect();
    let states = rollout(&req.x0.to_array(), &u, cfg.dt, cfg.limits.g);
    (
        costs.total(&states, &u),
        states.iter().map(DroneState::from_array).collect(),
    )
}
