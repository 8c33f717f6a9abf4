//! Distilled policies: supervision collected from the Gaussian search, two
//! MLPs trained on it, and a serving path with one forward pass per net.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DroneState, GateObservation};
use crate::error::{Error, Result};
use crate::harness::{
    run_episode_with, spawn_seeds, ControllerKind, EpisodeSetup, Outcome, ScenarioConfig,
};
use crate::math::Vec3;
use crate::nnet::{Mlp, Sgd, Standardizer, TrainBatch};

pub const OBS_DIM: usize = 6;

/// Gate center and velocity relative to the drone's position and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn new(drone: &DroneState, gate: &GateObservation) -> Self {
        let dp = gate.center - drone.p;
        let dv = gate.center_vel - drone.v;
        Observation([dp.x, dp.y, dp.z, dv.x, dv.y, dv.z])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferRecord {
    pub o1: f64,
    pub o2: f64,
    pub o3: f64,
    pub o4: f64,
    pub o5: f64,
    pub o6: f64,
    pub lambda: f64,
    pub t_p: f64,
    pub t: f64,
}

impl BufferRecord {
    pub fn new(o: &Observation, lambda: f64, t_p: f64, t: f64) -> Self {
        let [o1, o2, o3, o4, o5, o6] = o.0;
        BufferRecord {
            o1,
            o2,
            o3,
            o4,
            o5,
            o6,
            lambda,
            t_p,
            t,
        }
    }

    pub fn observation(&self) -> Observation {
        Observation([self.o1, self.o2, self.o3, self.o4, self.o5, self.o6])
    }
}

/// Fixed-capacity supervision buffer; pushes beyond capacity are dropped.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayBuffer {
    pub records: Vec<BufferRecord>,
    pub capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            records: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.records.len() >= self.capacity
    }

    pub fn push(&mut self, r: BufferRecord) -> bool {
        if self.is_full() {
            return false;
        }
        self.records.push(r);
        true
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let records = rd
            .deserialize()
            .collect::<std::result::Result<Vec<BufferRecord>, _>>()?;
        Ok(ReplayBuffer {
            capacity: records.len(),
            records,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepConfig {
    pub num_samples: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm cap per batch.
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Axial start distance range for collection flights, m.
    pub start_distance: [f64; 2],
    pub start_lateral: f64,
    pub start_height: [f64; 2],
}

impl Default for DeepConfig {
    fn default() -> Self {
        DeepConfig {
            num_samples: 3000,
            hidden: vec![256, 256],
            epochs: 100,
            lr: 0.01,
            momentum: 0.9,
            max_grad_norm: 3.0,
            batch_size: 64,
            val_fraction: 0.1,
            seed: 0,
            start_distance: [1.0, 7.0],
            start_lateral: 0.5,
            start_height: [1.0, 2.0],
        }
    }
}

impl DeepConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.num_samples == 0 {
            return Err("deep.num_samples must be positive".into());
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err("deep.lr and deep.batch_size must be positive".into());
        }
        if !(self.max_grad_norm > 0.0) {
            return Err("deep.max_grad_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err("deep.val_fraction must lie in [0, 1)".into());
        }
        if self.start_distance[0] > self.start_distance[1]
            || self.start_height[0] > self.start_height[1]
        {
            return Err("deep start ranges must be ordered".into());
        }
        Ok(())
    }
}

/// Flies Gaussian-search episodes from randomized starts until `num_samples`
/// ticks are stored. Crashed or failed episodes are skipped.
pub fn collect(num_samples: usize, cfg: &ScenarioConfig, seed: u64) -> Result<ReplayBuffer> {
    if num_samples == 0 {
        return Err(Error::InvalidArgument(
            "num_samples must be positive".into(),
        ));
    }
    let mut buf = ReplayBuffer::new(num_samples);
    let chunk = rayon::current_num_threads().max(1);
    let mut round = 0u64;
    while !buf.is_full() {
        let seeds = spawn_seeds(seed.wrapping_add(round), chunk);
        round += 1;
        let episodes: Vec<Result<(Outcome, Vec<BufferRecord>)>> = seeds
            .par_iter()
            .map(|&s| {
                let setup = randomized_setup(cfg, s);
                let mut recs = Vec::new();
                let m = run_episode_with(
                    cfg,
                    ControllerKind::HympcGaussian,
                    &setup,
                    None,
                    &mut |tick| {
                        recs.push(BufferRecord::new(
                            &Observation::new(&tick.drone, &tick.gate),
                            tick.lambda,
                            tick.t_p,
                            tick.t,
                        ));
                    },
                )?;
                Ok((m.outcome, recs))
            })
            .collect();
        for (s, ep) in seeds.iter().zip(episodes) {
            let (outcome, recs) = ep?;
            match outcome {
                Outcome::Crashed | Outcome::SolverFailure(_) => {
                    log::warn!("collection episode {s} diverged ({outcome:?}); skipped");
                }
                _ => {
                    for r in recs {
                        buf.push(r);
                    }
                }
            }
            if buf.is_full() {
                break;
            }
        }
        log::info!("collected {}/{num_samples}", buf.len());
    }
    Ok(buf)
}

fn randomized_setup(cfg: &ScenarioConfig, seed: u64) -> EpisodeSetup {
    let mut setup = EpisodeSetup::sample(cfg, seed, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc011_ec7);
    let dc = &cfg.deep;
    let dist = rng.gen_range(dc.start_distance[0]..=dc.start_distance[1]);
    let base = cfg.start_at_distance(dist);
    let y = rng.gen_range(-dc.start_lateral..=dc.start_lateral);
    let z = rng.gen_range(dc.start_height[0]..=dc.start_height[1]);
    setup.drone = DroneState::at_rest(Vec3::new(base.x, y, z));
    setup
}

/// Two regressors sharing one input standardization.
#[derive(Debug)]
pub struct DeepPolicy {
    pub lambda_net: Mlp,
    pub tp_net: Mlp,
    pub norm: Standardizer,
    pub t_min: f64,
    pub t_max: f64,
    lambda_calls: AtomicUsize,
    tp_calls: AtomicUsize,
}

impl Clone for DeepPolicy {
    fn clone(&self) -> Self {
        DeepPolicy::new(
            self.lambda_net.clone(),
            self.tp_net.clone(),
            self.norm.clone(),
            self.t_min,
            self.t_max,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicySidecar {
    format: String,
    version: u32,
    mean: Vec<f64>,
    std: Vec<f64>,
    t_min: f64,
    t_max: f64,
}

const SIDECAR_FORMAT: &str = "hympc-policy";

impl DeepPolicy {
    pub fn new(lambda_net: Mlp, tp_net: Mlp, norm: Standardizer, t_min: f64, t_max: f64) -> Self {
        DeepPolicy {
            lambda_net,
            tp_net,
            norm,
            t_min,
            t_max,
            lambda_calls: AtomicUsize::new(0),
            tp_calls: AtomicUsize::new(0),
        }
    }

    /// `(λ, t_p)` with λ clamped to `[0, 1]` and `t_p` to `[t_min, t_max]`.
    pub fn infer(&self, o: &Observation) -> (f64, f64) {
        let x = self.norm.apply(Array1::from(o.0.to_vec()).view());
        let l = self.lambda_net.forward(&x).expect("policy input width");
        self.lambda_calls.fetch_add(1, Ordering::Relaxed);
        let t = self.tp_net.forward(&x).expect("policy input width");
        self.tp_calls.fetch_add(1, Ordering::Relaxed);
        (
            clamp_finite(l[0], 0.0, 1.0),
            clamp_finite(t[0], self.t_min, self.t_max),
        )
    }

    /// Forward passes so far, `(λ net, t_p net)`.
    pub fn forward_counts(&self) -> (usize, usize) {
        (
            self.lambda_calls.load(Ordering::Relaxed),
            self.tp_calls.load(Ordering::Relaxed),
        )
    }

    /// Writes `lambda_net.json`, `tp_net.json` and `policy.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.lambda_net.save(dir.join("lambda_net.json"))?;
        self.tp_net.save(dir.join("tp_net.json"))?;
        let side = PolicySidecar {
            format: SIDECAR_FORMAT.into(),
            version: 1,
            mean: self.norm.mean.clone(),
            std: self.norm.std.clone(),
            t_min: self.t_min,
            t_max: self.t_max,
        };
        std::fs::write(
            dir.join("policy.json"),
            serde_json::to_string_pretty(&side)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let side: PolicySidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.join("policy.json"))?)?;
        if side.format != SIDECAR_FORMAT || side.version != 1 {
            return Err(Error::Format(format!(
                "unsupported policy sidecar {} v{}",
                side.format, side.version
            )));
        }
        let lambda_net = Mlp::load(dir.join("lambda_net.json"))?;
        let tp_net = Mlp::load(dir.join("tp_net.json"))?;
        for net in [&lambda_net, &tp_net] {
            if net.input_dim() != OBS_DIM || net.output_dim() != 1 || side.mean.len() != OBS_DIM {
                return Err(Error::Format(
                    "policy nets must map 6 inputs to 1 output".into(),
                ));
            }
        }
        Ok(DeepPolicy::new(
            lambda_net,
            tp_net,
            Standardizer {
                mean: side.mean,
                std: side.std,
            },
            side.t_min,
            side.t_max,
        ))
    }
}

fn clamp_finite(v: f64, lo: f64, hi: f64) -> f64 {
    if v.is_nan() {
        lo
    } else {
        v.clamp(lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub lambda_epochs: Vec<EpochLoss>,
    pub tp_epochs: Vec<EpochLoss>,
    pub train_loss_lambda: f64,
    pub train_loss_tp: f64,
    pub val_mse_lambda: Option<f64>,
    pub val_mse_tp: Option<f64>,
    /// Label variance on the validation split.
    pub val_var_lambda: Option<f64>,
    pub val_mae_lambda: Option<f64>,
    pub train_size: usize,
    pub val_size: usize,
}

fn fit_net(
    x: &Array2<f64>,
    y: &Array2<f64>,
    cfg: &DeepConfig,
    seed: u64,
) -> Result<(Mlp, Vec<EpochLoss>)> {
    let mut sizes = vec![OBS_DIM];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mut net = Mlp::new_random(&sizes, seed)?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum).with_max_grad_norm(cfg.max_grad_norm);
    let full = TrainBatch::new(x.clone(), y.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let before = net.loss(&full)?;
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch = TrainBatch::new(
                x.select(ndarray::Axis(0), idx),
                y.select(ndarray::Axis(0), idx),
            )?;
            sgd.step(&mut net, &batch)?;
        }
        let after = net.loss(&full)?;
        if !after.is_finite() {
            return Err(Error::Training(format!("non-finite loss {after}")));
        }
        epochs.push(EpochLoss { before, after });
    }
    Ok((net, epochs))
}

/// Trains both nets on a shuffled split of the buffer; the last
/// `val_fraction` of records is held out.
pub fn train(
    buf: &ReplayBuffer,
    cfg: &DeepConfig,
    t_min: f64,
    t_max: f64,
) -> Result<(DeepPolicy, TrainReport)> {
    if buf.is_empty() {
        return Err(Error::InvalidArgument("empty replay buffer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = buf.records.clone();
    records.shuffle(&mut rng);
    let n_val = ((records.len() as f64) * cfg.val_fraction).floor() as usize;
    let n_val = n_val.min(records.len() - 1);
    let (train_recs, val_recs) = records.split_at(records.len() - n_val);

    let to_x = |rs: &[BufferRecord]| {
        Array2::from_shape_fn((rs.len(), OBS_DIM), |(i, j)| rs[i].observation().0[j])
    };
    let x_raw = to_x(train_recs);
    let norm = Standardizer::fit(x_raw.view());
    let x = norm.apply_rows(x_raw.view());
    let y_l = Array2::from_shape_fn((train_recs.len(), 1), |(i, _)| train_recs[i].lambda);
    let y_t = Array2::from_shape_fn((train_recs.len(), 1), |(i, _)| train_recs[i].t_p);

    let (lambda_net, lambda_epochs) = fit_net(&x, &y_l, cfg, cfg.seed.wrapping_add(1))?;
    let (tp_net, tp_epochs) = fit_net(&x, &y_t, cfg, cfg.seed.wrapping_add(2))?;
    let train_loss_lambda = lambda_net.loss(&TrainBatch::new(x.clone(), y_l)?)?;
    let train_loss_tp = tp_net.loss(&TrainBatch::new(x, y_t)?)?;
    let policy = DeepPolicy::new(lambda_net, tp_net, norm, t_min, t_max);

    let (mut val_mse_lambda, mut val_mse_tp, mut val_var_lambda, mut val_mae_lambda) =
        (None, None, None, None);
    if !val_recs.is_empty() {
        let n = val_recs.len() as f64;
        let preds: Vec<(f64, f64)> = val_recs
            .iter()
            .map(|r| raw_predict(&policy, &r.observation()))
            .collect();
        val_mse_lambda = Some(
            val_recs
                .iter()
                .zip(&preds)
                .map(|(r, p)| (p.0 - r.lambda).powi(2))
                .sum::<f64>()
                / n,
        );
        val_mse_tp = Some(
            val_recs
                .iter()
                .zip(&preds)
                .map(|(r, p)| (p.1 - r.t_p).powi(2))
                .sum::<f64>()
                / n,
        );
        val_mae_lambda = Some(
            val_recs
                .iter()
                .zip(&preds)
                .map(|(r, p)| (p.0.clamp(0.0, 1.0) - r.lambda).abs())
                .sum::<f64>()
                / n,
        );
        let mean = val_recs.iter().map(|r| r.lambda).sum::<f64>() / n;
        val_var_lambda = Some(
            val_recs
                .iter()
                .map(|r| (r.lambda - mean).powi(2))
                .sum::<f64>()
                / n,
        );
    }
    let report = TrainReport {
        lambda_epochs,
        tp_epochs,
        train_loss_lambda,
        train_loss_tp,
        val_mse_lambda,
        val_mse_tp,
        val_var_lambda,
        val_mae_lambda,
        train_size: train_recs.len(),
        val_size: val_recs.len(),
    };
    Ok((policy, report))
}

/// Unclamped outputs, without touching the serving counters.
fn raw_predict(policy: &DeepPolicy, o: &Observation) -> (f64, f64) {
    let x = policy.norm.apply(Array1::from(o.0.to_vec()).view());
    let l = policy.lambda_net.forward(&x).expect("policy input width");
    let t = policy.tp_net.forward(&x).expect("policy input width");
    (l[0], t[0])
}
