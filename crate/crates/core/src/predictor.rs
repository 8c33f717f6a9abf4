//! Online-learned gate motion model.
//!
//! The network sees the two most recent observations and a query offset `Δt`
//! and outputs an average rate; the forecast is `cur + Δt · net(prev, cur, Δt)`.
//! At `Δt = 0` this returns `cur` exactly, whatever the parameters.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    gate_observe, gate_step, GateGeometry, GateObservation, GateState, Pendulum,
};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::nnet::{Mlp, Sgd, TrainBatch};

pub const OBS_DIM: usize = 6;
pub const INPUT_DIM: usize = 2 * OBS_DIM + 1;

/// Time-stamped gate observations, oldest first.
#[derive(Debug, Clone)]
pub struct GateHistory {
    capacity: usize,
    entries: VecDeque<(f64, GateObservation)>,
}

impl GateHistory {
    pub fn new(capacity: usize) -> Self {
        GateHistory {
            capacity: capacity.max(2),
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends an observation; timestamps must strictly increase.
    pub fn push(&mut self, time: f64, obs: GateObservation) -> Result<()> {
        if let Some(&(last, _)) = self.entries.back() {
            if !(time > last) {
                return Err(Error::InvalidArgument(format!(
                    "timestamp {time} not after {last}"
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((time, obs));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&(f64, GateObservation)> {
        self.entries.get(i)
    }

    pub fn latest(&self) -> Option<GateObservation> {
        self.entries.back().map(|e| e.1)
    }

    /// `(prev, cur)`; with a single entry both are that entry.
    pub fn latest_pair(&self) -> Option<(GateObservation, GateObservation)> {
        let n = self.entries.len();
        match n {
            0 => None,
            1 => Some((self.entries[0].1, self.entries[0].1)),
            _ => Some((self.entries[n - 2].1, self.entries[n - 1].1)),
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub momentum: f64,
    /// SGD steps per call to `observe_and_train`.
    pub steps_per_tick: usize,
    pub batch_size: usize,
    /// Largest training offset, in ticks.
    pub max_offset: usize,
    pub history_capacity: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            hidden: vec![64, 64],
            lr: 0.03,
            momentum: 0.9,
            steps_per_tick: 4,
            batch_size: 64,
            max_offset: 50,
            history_capacity: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatePredictor {
    net: Mlp,
    sgd: Sgd,
    cfg: PredictorConfig,
    rng: ChaCha8Rng,
    /// Position origin for the network inputs, frozen at the first observation.
    origin: Option<Vec3>,
}

impl GatePredictor {
    pub fn new(cfg: PredictorConfig) -> Result<Self> {
        let mut sizes = vec![INPUT_DIM];
        sizes.extend(cfg.hidden.iter().copied());
        sizes.push(OBS_DIM);
        let mut net = Mlp::new_random(&sizes, cfg.seed)?;
        // Start from a zero output layer so the untrained forecast is "stay put".
        if let Some(last) = net.layers_mut().last_mut() {
            last.weights.fill(0.0);
            last.biases.fill(0.0);
        }
        Ok(Self::with_net(net, cfg))
    }

    pub fn with_net(net: Mlp, cfg: PredictorConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        GatePredictor {
            sgd: Sgd::new(cfg.lr, cfg.momentum),
            net,
            cfg,
            rng,
            origin: None,
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    fn features(&self, prev: &GateObservation, cur: &GateObservation, dt: f64) -> [f64; INPUT_DIM] {
        let o = self.origin.unwrap_or(cur.center);
        let mut x = [0.0; INPUT_DIM];
        let (p, c) = (prev.to_array(), cur.to_array());
        for i in 0..OBS_DIM {
            let shift = if i < 3 { o.to_array()[i] } else { 0.0 };
            x[i] = p[i] - shift;
            x[OBS_DIM + i] = c[i] - shift;
        }
        x[2 * OBS_DIM] = dt;
        x
    }

    /// Forecast of the gate `dt` seconds after `cur`.
    pub fn predict(
        &self,
        prev: &GateObservation,
        cur: &GateObservation,
        dt: f64,
    ) -> GateObservation {
        if dt == 0.0 {
            return *cur;
        }
        let rate = self
            .net
            .forward(&self.features(prev, cur, dt))
            .expect("predictor input has fixed width");
        let c = cur.to_array();
        let out: Vec<f64> = c.iter().zip(rate.iter()).map(|(v, r)| v + dt * r).collect();
        GateObservation::from_array(&out)
    }

    /// Forecasts at `0, d, 2d, …, steps·d`, one batched forward pass.
    pub fn predict_track(
        &self,
        prev: &GateObservation,
        cur: &GateObservation,
        d: f64,
        steps: usize,
    ) -> Vec<GateObservation> {
        let mut x = Array2::zeros((steps + 1, INPUT_DIM));
        for k in 0..=steps {
            let f = self.features(prev, cur, k as f64 * d);
            x.row_mut(k)
                .iter_mut()
                .zip(f.iter())
                .for_each(|(a, b)| *a = *b);
        }
        let rates = self
            .net
            .forward_batch(x.view())
            .expect("predictor input has fixed width");
        let c = cur.to_array();
        (0..=steps)
            .map(|k| {
                if k == 0 {
                    return *cur;
                }
                let dt = k as f64 * d;
                let out: Vec<f64> = (0..OBS_DIM).map(|i| c[i] + dt * rates[[k, i]]).collect();
                GateObservation::from_array(&out)
            })
            .collect()
    }

    /// Trains on `(prev, cur, future)` triples drawn from the history at offsets
    /// of 1..=`max_offset` ticks. Returns the mean pre-step prediction loss, or
    /// `None` (predictor untouched) when fewer than three entries exist.
    pub fn observe_and_train(&mut self, hist: &GateHistory) -> Result<Option<f64>> {
        let n = hist.len();
        if n < 3 {
            return Ok(None);
        }
        if self.origin.is_none() {
            self.origin = hist.get(0).map(|e| e.1.center);
        }
        // anchors i in 1..n-1, offsets m with i + m < n
        let mut pairs = Vec::new();
        for i in 1..n - 1 {
            let max_m = self.cfg.max_offset.min(n - 1 - i);
            for m in 1..=max_m {
                pairs.push((i, m));
            }
        }
        let b = self.cfg.batch_size.min(pairs.len()).max(1);
        let mut total = 0.0;
        for _ in 0..self.cfg.steps_per_tick.max(1) {
            let mut x = Array2::zeros((b, INPUT_DIM));
            let mut y = Array2::zeros((b, OBS_DIM));
            let mut w = Vec::with_capacity(b);
            for r in 0..b {
                let (i, m) = pairs[self.rng.gen_range(0..pairs.len())];
                let prev = hist.entries[i - 1].1;
                let (t_cur, cur) = hist.entries[i];
                let (t_fut, fut) = hist.entries[i + m];
                let dt = t_fut - t_cur;
                let f = self.features(&prev, &cur, dt);
                x.row_mut(r)
                    .iter_mut()
                    .zip(f.iter())
                    .for_each(|(a, b)| *a = *b);
                let (c, fu) = (cur.to_array(), fut.to_array());
                for j in 0..OBS_DIM {
                    y[[r, j]] = (fu[j] - c[j]) / dt;
                }
                // ‖cur + dt·rate − fut‖² = dt² ‖rate − target‖²
                w.push(dt * dt);
            }
            let batch = TrainBatch::new(x, y)?;
            total += self.sgd.step_weighted(&mut self.net, &batch, Some(&w))?;
        }
        Ok(Some(total / self.cfg.steps_per_tick.max(1) as f64))
    }
}

/// Anything that can forecast the gate over the planning horizon.
pub trait GateForecast {
    /// Forecasts at `0, d, …, steps·d` from now.
    fn track(&self, d: f64, steps: usize) -> Vec<GateObservation>;
}

/// Forecast from the learned model and the two latest observations.
pub struct LearnedForecast<'a> {
    pub predictor: &'a GatePredictor,
    pub prev: GateObservation,
    pub cur: GateObservation,
}

impl GateForecast for LearnedForecast<'_> {
    fn track(&self, d: f64, steps: usize) -> Vec<GateObservation> {
        self.predictor
            .predict_track(&self.prev, &self.cur, d, steps)
    }
}

/// Ground-truth forecast from the hidden pendulum state.
pub struct OracleForecast {
    pub state: GateState,
    pub pendulum: Pendulum,
    pub geometry: GateGeometry,
}

impl GateForecast for OracleForecast {
    fn track(&self, d: f64, steps: usize) -> Vec<GateObservation> {
        let mut s = self.state;
        let mut out = Vec::with_capacity(steps + 1);
        out.push(gate_observe(&s, &self.geometry));
        for _ in 0..steps {
            s = gate_step(&s, &self.pendulum, d).expect("positive step");
            out.push(gate_observe(&s, &self.geometry));
        }
        out
    }
}
