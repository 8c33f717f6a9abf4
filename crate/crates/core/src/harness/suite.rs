use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ControllerKind, ScenarioConfig};
use super::episode::{run_episode, run_multigate_episode, spawn_seeds, EpisodeMetrics};
use crate::deep::DeepPolicy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    Compare,
    DistanceSweep,
    Robustness,
    Multigate,
}

impl SuiteKind {
    pub fn name(self) -> &'static str {
        match self {
            SuiteKind::Compare => "compare",
            SuiteKind::DistanceSweep => "distance-sweep",
            SuiteKind::Robustness => "robustness",
            SuiteKind::Multigate => "multigate",
        }
    }
}

impl fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SuiteKind::Compare,
            SuiteKind::DistanceSweep,
            SuiteKind::Robustness,
            SuiteKind::Multigate,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateAggregate {
    pub gate: usize,
    pub success_rate: f64,
    pub mean_error: Option<f64>,
    pub mean_time: Option<f64>,
}

/// Summary over a group of episodes. Errors and times average over the
/// episodes that crossed the gate plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub crossed: usize,
    pub mean_error: Option<f64>,
    pub std_error: Option<f64>,
    pub mean_time: Option<f64>,
    pub per_gate: Vec<GateAggregate>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl Aggregate {
    pub fn from_episodes(eps: &[EpisodeMetrics]) -> Self {
        let n = eps.len();
        let successes = eps.iter().filter(|e| e.success).count();
        let errors: Vec<f64> = eps.iter().filter_map(|e| e.traversal_error).collect();
        let times: Vec<f64> = eps.iter().filter_map(|e| e.traversal_time).collect();
        let mean_error = mean(&errors);
        let std_error = mean_error.map(|m| {
            (errors.iter().map(|e| (e - m).powi(2)).sum::<f64>() / errors.len() as f64).sqrt()
        });
        let num_gates = eps.iter().map(|e| e.gates.len()).max().unwrap_or(0);
        let per_gate = (0..num_gates)
            .map(|j| {
                let rs: Vec<_> = eps.iter().filter_map(|e| e.gates.get(j)).collect();
                let errs: Vec<f64> = rs.iter().map(|r| r.error).collect();
                let ts: Vec<f64> = rs.iter().map(|r| r.time).collect();
                GateAggregate {
                    gate: j,
                    success_rate: if n == 0 {
                        0.0
                    } else {
                        rs.iter().filter(|r| r.success).count() as f64 / n as f64
                    },
                    mean_error: mean(&errs),
                    mean_time: mean(&ts),
                }
            })
            .collect();
        Aggregate {
            episodes: n,
            successes,
            success_rate: if n == 0 {
                0.0
            } else {
                successes as f64 / n as f64
            },
            crossed: errors.len(),
            mean_error,
            std_error,
            mean_time: mean(&times),
            per_gate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub label: String,
    pub controller: ControllerKind,
    /// Swept parameter value, when the suite sweeps one.
    pub param: Option<f64>,
    pub aggregate: Aggregate,
    pub episodes: Vec<EpisodeMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: SuiteKind,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub groups: Vec<GroupReport>,
    pub notes: Vec<String>,
}

impl SuiteReport {
    pub fn group(&self, label: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.label == label)
    }

    /// Writes `<suite>.json` and one CSV per logged episode into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join(format!("{}.json", self.suite)),
            serde_json::to_string_pretty(self)?,
        )?;
        for g in &self.groups {
            for e in g.episodes.iter().filter(|e| !e.log.is_empty()) {
                let name = format!("{}_{}.csv", g.label, e.seed);
                e.write_log_csv(std::fs::File::create(dir.join(name))?)?;
            }
        }
        Ok(())
    }
}

/// Runs one controller over `seeds`, in parallel on the current rayon pool.
pub fn run_group(
    cfg: &ScenarioConfig,
    kind: ControllerKind,
    seeds: &[u64],
    multigate: bool,
    deep: Option<&DeepPolicy>,
) -> Result<Vec<EpisodeMetrics>> {
    seeds
        .par_iter()
        .map(|&s| {
            let m = if multigate {
                run_multigate_episode(cfg, kind, s, deep)?
            } else {
                run_episode(cfg, kind, s, deep)?
            };
            log::info!(
                "{kind} seed {s}: {:?} success={} error={:?} time={:?}",
                m.outcome,
                m.success,
                m.traversal_error,
                m.traversal_time
            );
            Ok(m)
        })
        .collect()
}

fn group(
    label: String,
    kind: ControllerKind,
    param: Option<f64>,
    episodes: Vec<EpisodeMetrics>,
) -> GroupReport {
    GroupReport {
        label,
        controller: kind,
        param,
        aggregate: Aggregate::from_episodes(&episodes),
        episodes,
    }
}

/// Runs a suite over `cfg.num_trials` seeds spawned from `cfg.seed`.
///
/// * `compare`: every controller kind on identical seeds; `hympc-deep` is
///   skipped without a policy.
/// * `distance-sweep`: `cfg.controller` and the oracle without the follow
///   term (λ = 0) at each distance in `cfg.sweeps.distances`.
/// * `robustness`: `cfg.controller` at each plant thrust cap.
/// * `multigate`: `cfg.controller` through `cfg.sweeps.num_gates` gates.
pub fn run_suite(
    kind: SuiteKind,
    cfg: &ScenarioConfig,
    deep: Option<&DeepPolicy>,
) -> Result<SuiteReport> {
    cfg.validate()?;
    let seeds = spawn_seeds(cfg.seed, cfg.num_trials);
    let mut groups = Vec::new();
    let mut notes = Vec::new();
    match kind {
        SuiteKind::Compare => {
            for k in ControllerKind::ALL {
                if k == ControllerKind::HympcDeep && deep.is_none() {
                    notes.push("hympc-deep skipped: no trained policy".into());
                    continue;
                }
                groups.push(group(
                    k.name().into(),
                    k,
                    None,
                    run_group(cfg, k, &seeds, false, deep)?,
                ));
            }
        }
        SuiteKind::DistanceSweep => {
            for &dist in &cfg.sweeps.distances {
                let mut c = cfg.clone();
                c.drone_start = cfg.start_at_distance(dist);
                let eps = run_group(&c, cfg.controller, &seeds, false, deep)?;
                groups.push(group(
                    format!("{}_d{dist}", cfg.controller),
                    cfg.controller,
                    Some(dist),
                    eps,
                ));
                if !cfg.sweeps.oracle_baseline {
                    continue;
                }
                c.search.fixed_lambda = Some(0.0);
                let oracle = ControllerKind::OracleDynamics;
                let eps = run_group(&c, oracle, &seeds, false, None)?;
                groups.push(group(
                    format!("{oracle}-no-follow_d{dist}"),
                    oracle,
                    Some(dist),
                    eps,
                ));
            }
        }
        SuiteKind::Robustness => {
            for &cap in &cfg.sweeps.thrust_caps {
                let mut c = cfg.clone();
                c.mpc.limits.sim_c_max = cap;
                let eps = run_group(&c, cfg.controller, &seeds, false, deep)?;
                groups.push(group(
                    format!("{}_c{cap}", cfg.controller),
                    cfg.controller,
                    Some(cap),
                    eps,
                ));
            }
        }
        SuiteKind::Multigate => {
            let eps = run_group(cfg, cfg.controller, &seeds, true, deep)?;
            groups.push(group(
                cfg.controller.name().into(),
                cfg.controller,
                None,
                eps,
            ));
        }
    }
    Ok(SuiteReport {
        suite: kind,
        master_seed: cfg.seed,
        seeds,
        groups,
        notes,
    })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mx = rx.iter().sum::<f64>() / rx.len() as f64;
    let my = ry.iter().sum::<f64>() / ry.len() as f64;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::episode::{GateResult, Outcome};
    use proptest::prelude::*;

    fn ep(seed: u64, err: Option<f64>) -> EpisodeMetrics {
        EpisodeMetrics {
            seed,
            controller: ControllerKind::StandardMpc,
            outcome: if err.is_some() {
                Outcome::Traversed
            } else {
                Outcome::Timeout
            },
            success: err.is_some_and(|e| e < 0.4),
            traversal_error: err,
            traversal_time: err.map(|e| 1.0 + e),
            gates: err
                .map(|e| {
                    vec![GateResult {
                        gate: 0,
                        success: e < 0.4,
                        error: e,
                        time: 1.0 + e,
                    }]
                })
                .unwrap_or_default(),
            ticks: 10,
            mean_solver_iterations: 3.0,
            log: Vec::new(),
        }
    }

    #[test]
    fn aggregate_counts() {
        let a = Aggregate::from_episodes(&[ep(0, Some(0.1)), ep(1, Some(0.5)), ep(2, None)]);
        assert_eq!((a.episodes, a.successes, a.crossed), (3, 1, 2));
        assert!((a.mean_error.unwrap() - 0.3).abs() < 1e-12);
        assert!((a.per_gate[0].success_rate - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(Aggregate::from_episodes(&[]).mean_error, None);
    }

    proptest! {
        #[test]
        fn aggregate_ignores_order(errs in prop::collection::vec(prop::option::of(0.0f64..1.0), 1..12), rot in 0usize..12) {
            let eps: Vec<_> = errs.iter().enumerate().map(|(i, e)| ep(i as u64, *e)).collect();
            let mut shuffled = eps.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let (a, b) = (Aggregate::from_episodes(&eps), Aggregate::from_episodes(&shuffled));
            prop_assert_eq!(a.successes, b.successes);
            prop_assert_eq!(a.crossed, b.crossed);
            match (a.mean_error, b.mean_error) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    #[test]
    fn suite_names_parse() {
        for k in [
            SuiteKind::Compare,
            SuiteKind::DistanceSweep,
            SuiteKind::Robustness,
            SuiteKind::Multigate,
        ] {
            assert_eq!(k.name().parse::<SuiteKind>().unwrap(), k);
        }
    }
}
