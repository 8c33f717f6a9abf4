//! Dense fully-connected networks: ELU hidden layers, linear output layer.
//!
//! Training minimizes `mean_i ‖net(x_i) − y_i‖²` (sum over outputs, mean over
//! samples) with plain or momentum SGD. Parameters serialize to a versioned JSON
//! document.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "hympc-mlp";
pub const FORMAT_VERSION: u32 = 1;

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
}

/// Paired inputs and regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl TrainBatch {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                got: targets.nrows(),
            });
        }
        Ok(TrainBatch { inputs, targets })
    }

    pub fn from_rows(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        let to_array = |rows: &[Vec<f64>]| -> Result<Array2<f64>> {
            let cols = rows.first().map_or(0, |r| r.len());
            let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
            Array2::from_shape_vec((rows.len(), cols), flat)
                .map_err(|e| Error::InvalidArgument(format!("ragged rows: {e}")))
        };
        Self::new(to_array(inputs)?, to_array(targets)?)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradient of the loss for every layer, laid out like [`Mlp`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[1], w[0])),
                biases: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    /// Uniform He-style initialization `U(±√(6/fan_in))`, zero biases.
    pub fn new_random(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let bound = (6.0 / layer.weights.ncols() as f64).sqrt();
            layer.weights.mapv_inplace(|_| rng.gen_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let mut sizes = Vec::with_capacity(layers.len() + 1);
        for (i, l) in layers.iter().enumerate() {
            if i == 0 {
                sizes.push(l.weights.ncols());
            } else if l.weights.ncols() != sizes[i] {
                return Err(Error::DimensionMismatch {
                    expected: sizes[i],
                    got: l.weights.ncols(),
                });
            }
            if l.biases.len() != l.weights.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: l.weights.nrows(),
                    got: l.biases.len(),
                });
            }
            sizes.push(l.weights.nrows());
        }
        check_sizes(&sizes)?;
        Ok(Mlp { sizes, layers })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("nonempty sizes")
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut h = Array1::from(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.dot(&h) + &layer.biases;
            if i < last {
                z.mapv_inplace(elu);
            }
            h = z;
        }
        Ok(h.to_vec())
    }

    /// Row-wise forward pass over a `batch × input` matrix.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let (_, acts) = self.forward_cached(x);
        Ok(acts.into_iter().last().expect("output layer"))
    }

    // pre-activations and activations per layer (activation 0 is the input)
    fn forward_cached(&self, x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts = vec![x.to_owned()];
        for (i, layer) in self.layers.iter().enumerate() {
            let z = acts[i].dot(&layer.weights.t()) + &layer.biases;
            let a = if i < last { z.mapv(elu) } else { z.clone() };
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }

    /// Mean squared error over the batch.
    pub fn loss(&self, batch: &TrainBatch) -> Result<f64> {
        self.check_batch(batch)?;
        let out = self.forward_batch(batch.inputs.view())?;
        Ok(mse(out.view(), batch.targets.view()))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn gradients(&self, batch: &TrainBatch) -> Result<(f64, Gradients)> {
        self.gradients_weighted(batch, None)
    }

    /// Like [`Mlp::gradients`] for the loss `mean_i w_i ‖net(x_i) − y_i‖²`.
    pub fn gradients_weighted(
        &self,
        batch: &TrainBatch,
        weights: Option<&[f64]>,
    ) -> Result<(f64, Gradients)> {
        self.check_batch(batch)?;
        if let Some(w) = weights {
            if w.len() != batch.len() {
                return Err(Error::DimensionMismatch {
                    expected: batch.len(),
                    got: w.len(),
                });
            }
        }
        let n = batch.len().max(1) as f64;
        let (pre, acts) = self.forward_cached(batch.inputs.view());
        let out = acts.last().expect("output");

        let mut delta = out - &batch.targets;
        if let Some(w) = weights {
            for (mut row, &wi) in delta.rows_mut().into_iter().zip(w) {
                row *= wi.sqrt();
            }
        }
        let loss = delta.iter().map(|e| e * e).sum::<f64>() / n;
        if let Some(w) = weights {
            for (mut row, &wi) in delta.rows_mut().into_iter().zip(w) {
                row *= wi.sqrt();
            }
        }
        delta *= 2.0 / n;
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let gw = delta.t().dot(&acts[i]);
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights);
                Zip::from(&mut back)
                    .and(&pre[i - 1])
                    .for_each(|b, &z| *b *= elu_grad(z));
                delta = back;
            }
            grads.push(Layer {
                weights: gw,
                biases: gb,
            });
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    /// One plain gradient step; returns the loss before the step.
    pub fn train_step(&mut self, batch: &TrainBatch, lr: f64) -> Result<f64> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let (loss, grads) = self.gradients(batch)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss}")));
        }
        for (layer, g) in self.layers.iter_mut().zip(grads.layers.iter()) {
            layer.weights.scaled_add(-lr, &g.weights);
            layer.biases.scaled_add(-lr, &g.biases);
        }
        Ok(loss)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.biases.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weights
                .iter_mut()
                .for_each(|w| *w = it.next().unwrap_or_default());
            l.biases
                .iter_mut()
                .for_each(|b| *b = it.next().unwrap_or_default());
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.biases.iter().all(|v| v.is_finite())
        })
    }

    fn check_batch(&self, batch: &TrainBatch) -> Result<()> {
        if batch.inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: batch.inputs.ncols(),
            });
        }
        if batch.targets.ncols() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: batch.targets.ncols(),
            });
        }
        Ok(())
    }

    pub fn to_file(&self) -> MlpFile {
        MlpFile {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            sizes: self.sizes.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    weights: l.weights.iter().copied().collect(),
                    biases: l.biases.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: MlpFile) -> Result<Self> {
        if file.format != FORMAT_TAG {
            return Err(Error::Format(format!("unexpected tag {:?}", file.format)));
        }
        if file.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {}",
                file.version
            )));
        }
        check_sizes(&file.sizes)?;
        if file.layers.len() + 1 != file.sizes.len() {
            return Err(Error::Format("layer count does not match sizes".into()));
        }
        let layers = file
            .sizes
            .windows(2)
            .zip(file.layers)
            .map(|(w, l)| {
                let weights = Array2::from_shape_vec((w[1], w[0]), l.weights)
                    .map_err(|e| Error::Format(format!("weight shape: {e}")))?;
                if l.biases.len() != w[1] {
                    return Err(Error::Format("bias length".into()));
                }
                Ok(Layer {
                    weights,
                    biases: Array1::from(l.biases),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Mlp {
            sizes: file.sizes,
            layers,
        };
        if !net.all_finite() {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.to_file())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_file(serde_json::from_reader(f)?)
    }
}

/// On-disk parameter layout. Weights are row-major `out × in`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpFile {
    pub format: String,
    pub version: u32,
    pub sizes: Vec<usize>,
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFile {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
    }
    Ok(())
}

fn mse(out: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    let n = out.nrows().max(1) as f64;
    Zip::from(out)
        .and(target)
        .fold(0.0, |acc, &o, &t| acc + (o - t) * (o - t))
        / n
}

/// SGD with optional classical momentum and gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub max_grad_norm: Option<f64>,
    velocity: Option<Vec<Layer>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            max_grad_norm: None,
            velocity: None,
        }
    }

    pub fn with_max_grad_norm(mut self, max: f64) -> Self {
        self.max_grad_norm = Some(max);
        self
    }

    /// Returns the pre-step loss.
    pub fn step(&mut self, net: &mut Mlp, batch: &TrainBatch) -> Result<f64> {
        self.step_weighted(net, batch, None)
    }

    pub fn step_weighted(
        &mut self,
        net: &mut Mlp,
        batch: &TrainBatch,
        weights: Option<&[f64]>,
    ) -> Result<f64> {
        let (loss, grads) = net.gradients_weighted(batch, weights)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss}")));
        }
        let scale = match self.max_grad_norm {
            Some(max) => {
                let norm = grads
                    .layers
                    .iter()
                    .map(|g| {
                        g.weights
                            .iter()
                            .chain(&g.biases)
                            .map(|v| v * v)
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let step = self.lr * scale;
        let vel = self.velocity.get_or_insert_with(|| {
            net.layers
                .iter()
                .map(|l| Layer {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    biases: Array1::zeros(l.biases.len()),
                })
                .collect()
        });
        for ((layer, v), g) in net
            .layers
            .iter_mut()
            .zip(vel.iter_mut())
            .zip(grads.layers.iter())
        {
            v.weights *= self.momentum;
            v.weights.scaled_add(-step, &g.weights);
            v.biases *= self.momentum;
            v.biases.scaled_add(-step, &g.biases);
            layer.weights += &v.weights;
            layer.biases += &v.biases;
        }
        Ok(loss)
    }
}

/// Per-feature affine standardization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics of the rows of `x`; near-constant features keep unit scale.
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
        let std = (0..x.ncols())
            .map(|j| {
                let var = x
                    .column(j)
                    .iter()
                    .map(|v| (v - mean[j]).powi(2))
                    .sum::<f64>()
                    / n;
                let s = var.sqrt();
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}
