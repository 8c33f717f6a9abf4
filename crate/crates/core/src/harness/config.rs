use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::deep::DeepConfig;
use crate::dynamics::{DroneState, GateGeometry};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mpc::MpcConfig;
use crate::predictor::PredictorConfig;
use crate::search::{RewardConfig, SearchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    HympcGaussian,
    HympcDeep,
    OracleDynamics,
    StandardMpc,
    ManualMpc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [
        ControllerKind::HympcGaussian,
        ControllerKind::HympcDeep,
        ControllerKind::OracleDynamics,
        ControllerKind::StandardMpc,
        ControllerKind::ManualMpc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::HympcGaussian => "hympc-gaussian",
            ControllerKind::HympcDeep => "hympc-deep",
            ControllerKind::OracleDynamics => "oracle-dynamics",
            ControllerKind::StandardMpc => "standard-mpc",
            ControllerKind::ManualMpc => "manual-mpc",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown controller kind {s:?}")))
    }
}

/// Uniform ranges for the pendulum's initial state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateInit {
    pub theta_max: f64,
    pub theta_dot_max: f64,
}

impl Default for GateInit {
    fn default() -> Self {
        GateInit {
            theta_max: std::f64::consts::FRAC_PI_4,
            theta_dot_max: std::f64::consts::PI / 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Axial start distances from the gate plane, m.
    pub distances: Vec<f64>,
    /// Plant thrust caps for the robustness study.
    pub thrust_caps: Vec<f64>,
    pub num_gates: usize,
    pub gate_spacing: f64,
    /// Target offset behind each gate along its normal.
    pub target_behind: f64,
    /// Also fly the ground-truth-dynamics baseline without the follow term in the distance sweep.
    pub oracle_baseline: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            distances: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            thrust_caps: (12..=20).map(f64::from).collect(),
            num_gates: 3,
            gate_spacing: 4.0,
            target_behind: 2.0,
            oracle_baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub drone_start: Vec3,
    pub gate: GateGeometry,
    pub gate_init: GateInit,
    pub gate_damping: f64,
    /// Defaults to a point `target_behind` past the gate's lowest point.
    pub target: Option<Vec3>,
    pub mpc: MpcConfig,
    pub search: SearchConfig,
    pub reward: RewardConfig,
    pub predictor: PredictorConfig,
    pub deep: DeepConfig,
    pub sweeps: SweepConfig,
    /// Seconds the gates swing (and predictors train) before the drone is released.
    pub observe_before_start: f64,
    /// Let the controller lower its planning thrust bound after observing the
    /// plant deliver less than commanded.
    pub thrust_adaptation: bool,
    pub episode_timeout: f64,
    pub crash_bound: f64,
    pub num_trials: usize,
    pub seed: u64,
    pub controller: ControllerKind,
    /// Directory holding trained policies for `hympc-deep`.
    pub policy_dir: Option<PathBuf>,
    /// Keep the per-tick log in the episode metrics.
    pub record_log: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            drone_start: Vec3::new(-5.0, 0.0, 1.5),
            gate: GateGeometry::default(),
            gate_init: GateInit::default(),
            gate_damping: 0.0,
            target: None,
            mpc: MpcConfig::default(),
            search: SearchConfig::default(),
            reward: RewardConfig::default(),
            predictor: PredictorConfig::default(),
            deep: DeepConfig::default(),
            sweeps: SweepConfig::default(),
            observe_before_start: 2.0,
            thrust_adaptation: true,
            episode_timeout: 10.0,
            crash_bound: 20.0,
            num_trials: 20,
            seed: 0,
            controller: ControllerKind::HympcGaussian,
            policy_dir: None,
            record_log: false,
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ScenarioConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        self.mpc.validate().or_else(err)?;
        self.search.validate(self.mpc.horizon_time()).or_else(err)?;
        self.deep.validate().or_else(err)?;
        if !(self.gate.arm_length > 0.0) {
            return err("gate arm_length must be positive".into());
        }
        if (self.gate.alpha.norm() - 1.0).abs() > 1e-9 {
            return err("gate alpha must be a unit vector".into());
        }
        if !(self.observe_before_start >= 0.0) {
            return err("observe_before_start must be nonnegative".into());
        }
        if !(self.episode_timeout > 0.0) || !(self.crash_bound > 0.0) {
            return err("episode_timeout and crash_bound must be positive".into());
        }
        if self.gate_init.theta_max < 0.0 || self.gate_init.theta_dot_max < 0.0 {
            return err("gate_init ranges must be nonnegative".into());
        }
        if !(self.reward.epsilon > 0.0 && self.reward.success_radius > 0.0) {
            return err("reward thresholds must be positive".into());
        }
        if self.sweeps.num_gates == 0 {
            return err("num_gates must be at least 1".into());
        }
        Ok(())
    }

    /// Target state for a gate: `target_behind` past its lowest point, at rest.
    pub fn target_for(&self, gate: &GateGeometry) -> DroneState {
        let low = gate.pivot - Vec3::new(0.0, 0.0, gate.arm_length);
        DroneState::at_rest(low + gate.alpha * self.sweeps.target_behind)
    }

    pub fn default_target(&self) -> DroneState {
        match self.target {
            Some(p) => DroneState::at_rest(p),
            None => self.target_for(&self.gate),
        }
    }

    /// Drone start `distance` meters before the gate plane, at the gate's lowest height.
    pub fn start_at_distance(&self, distance: f64) -> Vec3 {
        let low = self.gate.pivot - Vec3::new(0.0, 0.0, self.gate.arm_length);
        Vec3::new(
            low.x - distance * self.gate.alpha.x,
            self.drone_start.y,
            self.drone_start.z,
        )
    }
}
