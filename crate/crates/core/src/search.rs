//! Episode-based search over the mixing variable λ and the traversal time.
//!
//! Each iteration samples `N` values of λ from a Gaussian, solves the MPC for
//! every candidate traversal time, keeps the best reward per λ, and refits the
//! Gaussian in closed form with soft-max weights `exp(ζ (R − max R))`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DroneState, GateObservation};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mpc::{solve, MpcConfig, MpcRequest, MpcSolution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for GaussianPolicy {
    fn default() -> Self {
        GaussianPolicy {
            mu: 0.5,
            sigma: 0.3,
        }
    }
}

impl GaussianPolicy {
    /// A draw clamped to `[0, 1]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let n = Normal::new(self.mu, self.sigma.max(f64::MIN_POSITIVE)).expect("finite policy");
        n.sample(rng).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Inverse temperature of the soft-max weights.
    pub zeta: f64,
    /// Planning-time traversal accuracy threshold, m.
    pub epsilon: f64,
    /// Penalty for trajectories that cross the plane off target.
    pub omega: f64,
    /// Temporal spread of the tracking weights.
    pub varrho: f64,
    /// Episode-level success bound on traversal error, m.
    pub success_radius: f64,
    /// Charge trajectories that stay short of the plane the full horizon
    /// time, as if they crossed at its end.
    pub not_reached_time: bool,
    /// Score tracking only up to the crossing step for crossed trajectories.
    pub truncate_at_crossing: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            zeta: 3.0,
            epsilon: 0.3,
            omega: 99_999.0,
            varrho: 10.0,
            success_radius: 0.4,
            not_reached_time: true,
            truncate_at_crossing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub num_samples: usize,
    /// Candidate traversal times, s from now.
    pub candidate_times: Vec<f64>,
    pub max_iters: usize,
    pub mu_tol: f64,
    pub min_sigma: f64,
    pub initial_policy: GaussianPolicy,
    /// Skip sampling and search only the traversal time at this λ.
    pub fixed_lambda: Option<f64>,
    /// Iteration cap for the MPC solves made while searching.
    pub solver_iters: Option<usize>,
    /// Carry the best evaluation so far into each iteration's sample set.
    pub keep_elite: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            num_samples: 5,
            candidate_times: (1..=10).map(|i| i as f64 * 0.1).collect(),
            max_iters: 10,
            mu_tol: 1e-3,
            min_sigma: 1e-3,
            initial_policy: GaussianPolicy::default(),
            fixed_lambda: None,
            solver_iters: Some(10),
            keep_elite: true,
        }
    }
}

impl SearchConfig {
    /// `stride · d` spaced candidates over `(0, horizon]`.
    pub fn with_stride(mut self, stride: usize, d: f64, horizon: f64) -> Self {
        let n = (horizon / (stride as f64 * d) + 1e-9).floor() as usize;
        self.candidate_times = (1..=n).map(|i| i as f64 * stride as f64 * d).collect();
        self
    }

    pub fn validate(&self, t_h: f64) -> std::result::Result<(), String> {
        if self.num_samples < 2 {
            return Err("num_samples must be at least 2".into());
        }
        if self.candidate_times.is_empty() {
            return Err("candidate_times must be nonempty".into());
        }
        if self
            .candidate_times
            .iter()
            .any(|t| !(0.0..=t_h + 1e-9).contains(t))
        {
            return Err(format!("candidate times must lie in [0, {t_h}]"));
        }
        if !(self.min_sigma > 0.0) {
            return Err("min_sigma must be positive".into());
        }
        if self.solver_iters == Some(0) {
            return Err("solver_iters must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictClass {
    NotReached,
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryVerdict {
    pub class: VerdictClass,
    /// Index `i` of the first state past the plane.
    pub crossing: Option<usize>,
    pub error: Option<f64>,
}

/// Plane-crossing test between consecutive drone states against the gate
/// track, then the traversal error at the crossing step.
pub fn classify(
    states: &[DroneState],
    gates: &[GateObservation],
    alpha: Vec3,
    epsilon: f64,
) -> Result<TrajectoryVerdict> {
    if states.len() != gates.len() {
        return Err(Error::DimensionMismatch {
            expected: states.len(),
            got: gates.len(),
        });
    }
    for i in 1..states.len() {
        let g = gates[i - 1].center;
        let before = (g - states[i - 1].p).dot(alpha);
        let after = (g - states[i].p).dot(alpha);
        if before * after <= 0.0 {
            let error = (states[i].p - gates[i].center).norm();
            let class = if error < epsilon {
                VerdictClass::Success
            } else {
                VerdictClass::Failure
            };
            return Ok(TrajectoryVerdict {
                class,
                crossing: Some(i),
                error: Some(error),
            });
        }
    }
    Ok(TrajectoryVerdict {
        class: VerdictClass::NotReached,
        crossing: None,
        error: None,
    })
}

/// Trajectory reward; states and gates are indexed by step `k` at time `k·d`.
pub fn reward(
    states: &[DroneState],
    gates: &[GateObservation],
    verdict: &TrajectoryVerdict,
    t_p: f64,
    cfg: &RewardConfig,
    d: f64,
) -> f64 {
    let t_h = (states.len() - 1) as f64 * d;
    let anchor = match verdict.class {
        VerdictClass::NotReached => t_h,
        _ => t_p,
    };
    let last = match (verdict.crossing, cfg.truncate_at_crossing) {
        (Some(i), true) => i,
        _ => states.len() - 1,
    };
    let tracking: f64 = states
        .iter()
        .zip(gates)
        .enumerate()
        .take(last + 1)
        .skip(1)
        .map(|(k, (x, g))| {
            let t = k as f64 * d;
            (-cfg.varrho * (t - anchor).powi(2)).exp() * (x.p - g.center).norm_squared()
        })
        .sum();
    match verdict.class {
        VerdictClass::Success => -tracking - t_p,
        VerdictClass::Failure => -cfg.omega - tracking - t_p,
        VerdictClass::NotReached if cfg.not_reached_time => -tracking - t_h,
        VerdictClass::NotReached => -tracking,
    }
}

/// Closed-form reward-weighted refit of the Gaussian over `(λ_i, R_i)`.
pub fn em_update(samples: &[(f64, f64)], zeta: f64, min_sigma: f64) -> Result<GaussianPolicy> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let r_max = samples
        .iter()
        .map(|s| s.1)
        .fold(f64::NEG_INFINITY, f64::max);
    if !r_max.is_finite() {
        return Err(Error::InvalidArgument("non-finite reward".into()));
    }
    let w: Vec<f64> = samples
        .iter()
        .map(|s| (zeta * (s.1 - r_max)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    let sum_sq: f64 = w.iter().map(|x| x * x).sum();
    let mu = samples.iter().zip(&w).map(|(s, wi)| wi * s.0).sum::<f64>() / sum;
    let delta = (sum * sum - sum_sq) / sum;
    let sigma = if delta <= f64::EPSILON * sum {
        min_sigma
    } else {
        let spread: f64 = samples
            .iter()
            .zip(&w)
            .map(|(s, wi)| wi * (s.0 - mu).powi(2))
            .sum();
        (spread / delta).sqrt().max(min_sigma)
    };
    Ok(GaussianPolicy { mu, sigma })
}

/// Inputs shared by every rollout of one search call.
#[derive(Debug, Clone)]
pub struct SearchProblem<'a> {
    pub x0: DroneState,
    pub gate_now: GateObservation,
    /// Gate forecast at `0, d, …, H·d`.
    pub gate_track: &'a [GateObservation],
    pub x_target: DroneState,
    pub alpha: Vec3,
    pub warm_start: Option<&'a MpcSolution>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub lambda: f64,
    pub t_p: f64,
    pub reward: f64,
    pub verdict: TrajectoryVerdict,
    pub solution: MpcSolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchIteration {
    pub iteration: usize,
    pub mu: f64,
    pub sigma: f64,
    pub best_reward: f64,
    pub best_t_p: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub lambda: f64,
    pub t_p: f64,
    pub policy: GaussianPolicy,
    /// Best candidate at the returned λ.
    pub best: Evaluation,
    pub trace: Vec<SearchIteration>,
    pub solves: usize,
}

fn time_index(t: f64, d: f64) -> usize {
    (t / d).round() as usize
}

/// Solves and scores one `(λ, t_p)` pair.
pub fn evaluate(
    problem: &SearchProblem,
    lambda: f64,
    t_p: f64,
    mpc: &MpcConfig,
    reward_cfg: &RewardConfig,
) -> Result<Evaluation> {
    let h = mpc.horizon;
    if problem.gate_track.len() != h + 1 {
        return Err(Error::DimensionMismatch {
            expected: h + 1,
            got: problem.gate_track.len(),
        });
    }
    let j = time_index(t_p, mpc.dt).min(h);
    let req = MpcRequest {
        x0: problem.x0,
        gate_now: problem.gate_now,
        gate_pred: problem.gate_track[j],
        t_p,
        t_f: mpc.horizon_time(),
        x_target: problem.x_target,
        lambda,
    };
    let solution = solve(&req, mpc, problem.warm_start)?;
    let verdict = classify(
        &solution.states,
        problem.gate_track,
        problem.alpha,
        reward_cfg.epsilon,
    )?;
    let r = reward(
        &solution.states,
        problem.gate_track,
        &verdict,
        t_p,
        reward_cfg,
        mpc.dt,
    );
    Ok(Evaluation {
        lambda,
        t_p,
        reward: r,
        verdict,
        solution,
    })
}

/// Best candidate time for one λ; solver failures drop the candidate.
fn best_over_times(
    problem: &SearchProblem,
    lambda: f64,
    cfg: &SearchConfig,
    mpc: &MpcConfig,
    reward_cfg: &RewardConfig,
) -> Option<Evaluation> {
    cfg.candidate_times
        .par_iter()
        .filter_map(|&t| evaluate(problem, lambda, t, mpc, reward_cfg).ok())
        .collect::<Vec<_>>()
        .into_iter()
        // first maximum wins ties, so earlier times are preferred
        .fold(None, |best: Option<Evaluation>, e| match best {
            Some(b) if b.reward >= e.reward => Some(b),
            _ => Some(e),
        })
}

/// Runs the search and returns λ*, the best traversal time at λ*, and the
/// refit policy.
pub fn search<R: Rng + ?Sized>(
    problem: &SearchProblem,
    cfg: &SearchConfig,
    mpc: &MpcConfig,
    reward_cfg: &RewardConfig,
    rng: &mut R,
) -> Result<SearchOutcome> {
    let per_lambda = cfg.candidate_times.len();
    let mut capped = mpc.clone();
    if let Some(n) = cfg.solver_iters {
        capped.solver.max_iters = capped.solver.max_iters.min(n);
    }
    let mpc = &capped;
    let mut policy = cfg.initial_policy;
    let mut trace = Vec::new();
    let mut solves = 0;

    if let Some(lambda) = cfg.fixed_lambda {
        let lambda = lambda.clamp(0.0, 1.0);
        let best = best_over_times(problem, lambda, cfg, mpc, reward_cfg)
            .ok_or_else(|| Error::Search("every MPC solve failed".into()))?;
        return Ok(SearchOutcome {
            lambda,
            t_p: best.t_p,
            policy: GaussianPolicy {
                mu: lambda,
                sigma: cfg.min_sigma,
            },
            best,
            trace,
            solves: per_lambda,
        });
    }

    let mut elite: Option<Evaluation> = None;
    for it in 0..cfg.max_iters {
        let lambdas: Vec<f64> = (0..cfg.num_samples).map(|_| policy.sample(rng)).collect();
        let mut results: Vec<Evaluation> = lambdas
            .iter()
            .filter_map(|&l| best_over_times(problem, l, cfg, mpc, reward_cfg))
            .collect();
        solves += lambdas.len() * per_lambda;
        if it == 0 && results.is_empty() {
            return Err(Error::Search("every MPC solve failed".into()));
        }
        results.extend(elite.take());
        if results.len() < 2 {
            break;
        }
        let samples: Vec<(f64, f64)> = results.iter().map(|e| (e.lambda, e.reward)).collect();
        let next = em_update(&samples, reward_cfg.zeta, cfg.min_sigma)?;
        let best = results
            .into_iter()
            .reduce(|b, e| if b.reward >= e.reward { b } else { e })
            .expect("at least two samples");
        trace.push(SearchIteration {
            iteration: it,
            mu: next.mu,
            sigma: next.sigma,
            best_reward: best.reward,
            best_t_p: best.t_p,
        });
        if cfg.keep_elite {
            elite = Some(best);
        }
        let moved = (next.mu - policy.mu).abs();
        policy = next;
        if moved < cfg.mu_tol {
            break;
        }
    }

    let lambda = policy.mu.clamp(0.0, 1.0);
    let best = best_over_times(problem, lambda, cfg, mpc, reward_cfg)
        .ok_or_else(|| Error::Search("every MPC solve failed at the final policy".into()))?;
    solves += per_lambda;
    Ok(SearchOutcome {
        lambda,
        t_p: best.t_p,
        policy,
        best,
        trace,
        solves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate_at(x: f64) -> GateObservation {
        GateObservation {
            center: Vec3::new(x, 0.0, 1.0),
            center_vel: Vec3::ZERO,
        }
    }

    fn line(xs: &[f64], y: f64) -> Vec<DroneState> {
        xs.iter()
            .map(|&x| DroneState::at_rest(Vec3::new(x, y, 1.0)))
            .collect()
    }

    const ALPHA: Vec3 = Vec3 {
        x: 1.0,
        y: 0.0,
        z: 0.0,
    };

    #[test]
    fn classify_before_plane() {
        let states = line(&[0.0, 0.5, 0.9, 1.0], 0.0);
        let gates = vec![gate_at(2.0); 4];
        let v = classify(&states, &gates, ALPHA, 0.3).unwrap();
        assert_eq!(v.class, VerdictClass::NotReached);
        assert_eq!(v.error, None);
    }

    #[test]
    fn classify_success_and_failure() {
        let gates = vec![gate_at(2.0); 4];
        let v = classify(&line(&[1.0, 1.5, 2.0, 2.5], 0.0), &gates, ALPHA, 0.3).unwrap();
        assert_eq!(v.class, VerdictClass::Success);
        assert_eq!(v.crossing, Some(2));
        assert_eq!(v.error, Some(0.0));

        let v = classify(&line(&[1.0, 1.5, 2.0, 2.5], 0.35), &gates, ALPHA, 0.3).unwrap();
        assert_eq!(v.class, VerdictClass::Failure);
        assert!((v.error.unwrap() - 0.35).abs() < 1e-12);

        // exactly at the threshold is a failure
        let v = classify(&line(&[1.0, 2.0], 0.3), &gates[..2], ALPHA, 0.3).unwrap();
        assert_eq!(v.class, VerdictClass::Failure);

        assert!(classify(&line(&[1.0], 0.0), &gates, ALPHA, 0.3).is_err());
    }

    #[test]
    fn classify_ignores_normal_scale() {
        let gates = vec![gate_at(2.0); 4];
        let states = line(&[1.0, 1.7, 2.2, 2.5], 0.1);
        let a = classify(&states, &gates, ALPHA, 0.3).unwrap();
        let b = classify(&states, &gates, ALPHA * 7.5, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reward_branches() {
        let cfg = RewardConfig::default();
        let gates = vec![gate_at(2.0); 51];
        let states: Vec<DroneState> = gates
            .iter()
            .map(|g| DroneState::at_rest(g.center))
            .collect();
        let success = TrajectoryVerdict {
            class: VerdictClass::Success,
            crossing: Some(1),
            error: Some(0.0),
        };
        assert_eq!(reward(&states, &gates, &success, 1.0, &cfg, 0.02), -1.0);
        let failure = TrajectoryVerdict {
            class: VerdictClass::Failure,
            ..success
        };
        assert_eq!(
            reward(&states, &gates, &failure, 1.0, &cfg, 0.02),
            -99_999.0 - 1.0
        );
    }

    #[test]
    fn reward_not_reached_two_steps() {
        let cfg = RewardConfig {
            not_reached_time: false,
            ..Default::default()
        };
        let gates = vec![gate_at(2.0); 3];
        let states = line(&[1.9, 1.9, 1.9], 0.0);
        let v = TrajectoryVerdict {
            class: VerdictClass::NotReached,
            crossing: None,
            error: None,
        };
        let r = reward(&states, &gates, &v, 0.5, &cfg, 0.02);
        let expected = -0.01 * ((-10.0f64 * 0.0004).exp() + 1.0);
        assert!((r - expected).abs() < 1e-15, "{r} vs {expected}");
        let timed = reward(&states, &gates, &v, 0.5, &RewardConfig::default(), 0.02);
        assert!((timed - (expected - 0.04)).abs() < 1e-15);
    }

    #[test]
    fn tracking_stops_at_crossing() {
        let gates = vec![gate_at(2.0); 4];
        let states = line(&[1.9, 2.1, 3.0, 4.0], 0.0);
        let v = TrajectoryVerdict {
            class: VerdictClass::Success,
            crossing: Some(1),
            error: Some(0.1),
        };
        let cut = reward(&states, &gates, &v, 0.02, &RewardConfig::default(), 0.02);
        assert!((cut - (-0.01 - 0.02)).abs() < 1e-15, "{cut}");
        let full_cfg = RewardConfig {
            truncate_at_crossing: false,
            ..Default::default()
        };
        let full = reward(&states, &gates, &v, 0.02, &full_cfg, 0.02);
        assert!(full < cut - 1.0);
    }

    #[test]
    fn shorter_traversal_time_wins() {
        let cfg = RewardConfig::default();
        let gates = vec![gate_at(2.0); 51];
        let states: Vec<DroneState> = gates
            .iter()
            .map(|g| DroneState::at_rest(g.center))
            .collect();
        let v = TrajectoryVerdict {
            class: VerdictClass::Success,
            crossing: Some(1),
            error: Some(0.0),
        };
        assert!(
            reward(&states, &gates, &v, 0.4, &cfg, 0.02)
                > reward(&states, &gates, &v, 0.6, &cfg, 0.02)
        );
    }

    #[test]
    fn em_uniform_and_degenerate() {
        let p = em_update(&[(0.1, -2.0), (0.4, -2.0), (0.7, -2.0)], 3.0, 1e-3).unwrap();
        assert!((p.mu - 0.4).abs() < 1e-15);
        let p = em_update(&[(0.5, -1.0), (0.5, -3.0), (0.5, -7.0)], 3.0, 1e-3).unwrap();
        assert_eq!(
            p,
            GaussianPolicy {
                mu: 0.5,
                sigma: 1e-3
            }
        );
        // all weight on one sample
        let p = em_update(&[(0.2, -1.0), (0.9, -99_999.0)], 3.0, 1e-3).unwrap();
        assert_eq!(
            p,
            GaussianPolicy {
                mu: 0.2,
                sigma: 1e-3
            }
        );
        assert!(em_update(&[(0.2, -1.0)], 3.0, 1e-3).is_err());
    }

    #[test]
    fn em_weighted_example() {
        // weights 1 and 3: R difference of ln(3)/ζ
        let zeta = 3.0;
        let p = em_update(&[(0.2, -(3.0f64).ln() / zeta), (0.8, 0.0)], zeta, 1e-3).unwrap();
        assert!((p.mu - 0.65).abs() < 1e-12);
        assert!((p.sigma - 0.18f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn policy_samples_are_clamped() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = GaussianPolicy {
            mu: 0.9,
            sigma: 2.0,
        };
        assert!((0..1000)
            .map(|_| p.sample(&mut rng))
            .all(|l| (0.0..=1.0).contains(&l)));
    }

    #[test]
    fn candidate_grid() {
        let c = SearchConfig::default().with_stride(5, 0.02, 1.0);
        assert_eq!(c.candidate_times.len(), 10);
        assert!((c.candidate_times[9] - 1.0).abs() < 1e-12);
    }
}
