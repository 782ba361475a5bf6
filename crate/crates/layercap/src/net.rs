//! Small fully-connected networks with analytic backprop and an Adam
//! training loop. These stand in for the per-point decoder and the
//! per-pixel blend/refinement predictors; everything is f64 so gradient
//! checks against central differences hold tightly.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
    Linear,
}

/// Loss kinds for [`train`] / [`gradient`]. The gradient-penalty variant
/// adds a squared penalty on mismatches between consecutive output-component
/// differences, a stand-in for image-gradient losses on patch outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    Mse,
    L1,
    L1GradPenalty { lambda: f64 },
}

/// Feed-forward dense network: ReLU hidden layers, configurable output
/// activation, and optional input skip connections (the raw input vector is
/// concatenated to the inputs of the listed hidden layers).
#[derive(Debug, Clone)]
pub struct DenseNet {
    pub widths: Vec<usize>,
    pub output: OutputActivation,
    /// Hidden-layer indices (0-based) whose input gets the network input
    /// concatenated.
    pub skip_layers: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl DenseNet {
    /// Uniform Glorot-style init in ±sqrt(6/(fan_in+fan_out)), seeded.
    pub fn new(
        widths: &[usize],
        output: OutputActivation,
        skip_layers: &[usize],
        seed: u64,
    ) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        for &s in skip_layers {
            assert!(s + 1 < widths.len(), "skip layer {s} out of range");
            assert!(s > 0, "skip into the first layer is a no-op; not supported");
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let input_width = widths[0];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let fan_in = widths[l] + if skip_layers.contains(&l) { input_width } else { 0 };
            let fan_out = widths[l + 1];
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = DMatrix::from_fn(fan_out, fan_in, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * bound);
            weights.push(w);
            biases.push(DVector::zeros(fan_out));
        }
        Self {
            widths: widths.to_vec(),
            output,
            skip_layers: skip_layers.to_vec(),
            weights,
            biases,
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn layer_input(&self, l: usize, activation: &DVector<f64>, input: &DVector<f64>) -> DVector<f64> {
        if self.skip_layers.contains(&l) {
            let mut v = DVector::zeros(activation.len() + input.len());
            v.rows_mut(0, activation.len()).copy_from(activation);
            v.rows_mut(activation.len(), input.len()).copy_from(input);
            v
        } else {
            activation.clone()
        }
    }

    /// Plain forward pass.
    pub fn forward(&self, input: &DVector<f64>) -> DVector<f64> {
        self.forward_trace(input).output
    }

    /// Forward pass retaining intermediates for backprop.
    pub fn forward_trace(&self, input: &DVector<f64>) -> Trace {
        assert_eq!(
            input.len(),
            self.input_width(),
            "input length {} does not match network input width {}",
            input.len(),
            self.input_width()
        );
        let layers = self.weights.len();
        let mut layer_inputs = Vec::with_capacity(layers);
        let mut pre_activations = Vec::with_capacity(layers);
        let mut activation = input.clone();
        for l in 0..layers {
            let x = self.layer_input(l, &activation, input);
            let z = &self.weights[l] * &x + &self.biases[l];
            layer_inputs.push(x);
            activation = if l + 1 < layers { z.map(relu) } else { z.clone() };
            pre_activations.push(z);
        }
        let output = apply_output(&pre_activations[layers - 1], self.output);
        Trace { input: input.clone(), layer_inputs, pre_activations, output }
    }

    /// Backprop from d(loss)/d(output) to parameter and input gradients.
    pub fn backward(&self, trace: &Trace, d_output: &DVector<f64>) -> Gradients {
        let layers = self.weights.len();
        // Through the output activation.
        let mut delta = match self.output {
            OutputActivation::Linear => d_output.clone(),
            OutputActivation::Sigmoid => {
                let y = &trace.output;
                DVector::from_fn(y.len(), |i, _| d_output[i] * y[i] * (1.0 - y[i]))
            }
            OutputActivation::Softmax => {
                let y = &trace.output;
                let dot = d_output.dot(y);
                DVector::from_fn(y.len(), |i, _| y[i] * (d_output[i] - dot))
            }
        };
        let mut d_weights = Vec::with_capacity(layers);
        let mut d_biases = Vec::with_capacity(layers);
        let mut d_input = DVector::zeros(self.input_width());
        for l in (0..layers).rev() {
            let x = &trace.layer_inputs[l];
            d_weights.push(&delta * x.transpose());
            d_biases.push(delta.clone());
            let d_x = self.weights[l].transpose() * &delta;
            // Split off the skip part, if any.
            let main_width = self.widths[l];
            let d_main = d_x.rows(0, main_width).into_owned();
            if self.skip_layers.contains(&l) {
                d_input += d_x.rows(main_width, self.input_width()).into_owned();
            }
            if l == 0 {
                d_input += d_main;
            } else {
                let z_prev = &trace.pre_activations[l - 1];
                delta = DVector::from_fn(main_width, |i, _| {
                    if z_prev[i] > 0.0 {
                        d_main[i]
                    } else {
                        0.0
                    }
                });
            }
        }
        d_weights.reverse();
        d_biases.reverse();
        Gradients { d_weights, d_biases, d_input }
    }

    pub fn zeroed_gradients(&self) -> Gradients {
        Gradients {
            d_weights: self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            d_biases: self.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            d_input: DVector::zeros(self.input_width()),
        }
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for w in &self.weights {
            out.extend(w.iter());
        }
        for b in &self.biases {
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat_parameters(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.parameter_count());
        let mut i = 0;
        for w in &mut self.weights {
            for v in w.iter_mut() {
                *v = flat[i];
                i += 1;
            }
        }
        for b in &mut self.biases {
            for v in b.iter_mut() {
                *v = flat[i];
                i += 1;
            }
        }
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn apply_output(z: &DVector<f64>, activation: OutputActivation) -> DVector<f64> {
    match activation {
        OutputActivation::Linear => z.clone(),
        OutputActivation::Sigmoid => z.map(|v| 1.0 / (1.0 + (-v).exp())),
        OutputActivation::Softmax => {
            let max = z.max();
            let exp = z.map(|v| (v - max).exp());
            let sum: f64 = exp.iter().sum();
            exp / sum
        }
    }
}

/// Intermediates of one forward pass.
pub struct Trace {
    pub input: DVector<f64>,
    layer_inputs: Vec<DVector<f64>>,
    pre_activations: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

/// Parameter gradients mirroring the network's weight/bias shapes.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weights: Vec<DMatrix<f64>>,
    pub d_biases: Vec<DVector<f64>>,
    pub d_input: DVector<f64>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            *a += b;
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            *a += b;
        }
        self.d_input += &other.d_input;
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.d_weights {
            *w *= s;
        }
        for b in &mut self.d_biases {
            *b *= s;
        }
        self.d_input *= s;
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for w in &self.d_weights {
            out.extend(w.iter());
        }
        for b in &self.d_biases {
            out.extend(b.iter());
        }
        out
    }
}

/// Scalar loss and its gradient with respect to the network output.
pub fn loss_and_grad(
    output: &DVector<f64>,
    target: &DVector<f64>,
    loss: LossKind,
) -> (f64, DVector<f64>) {
    assert_eq!(output.len(), target.len(), "output/target length mismatch");
    let n = output.len() as f64;
    match loss {
        LossKind::Mse => {
            let diff = output - target;
            let value = diff.dot(&diff) / n;
            (value, diff * (2.0 / n))
        }
        LossKind::L1 => {
            let mut value = 0.0;
            let mut grad = DVector::zeros(output.len());
            for i in 0..output.len() {
                let d = output[i] - target[i];
                value += d.abs();
                grad[i] = d.signum();
            }
            (value / n, grad / n)
        }
        LossKind::L1GradPenalty { lambda } => {
            let (l1, mut grad) = loss_and_grad(output, target, LossKind::L1);
            let mut value = l1;
            for i in 1..output.len() {
                let g = (output[i] - output[i - 1]) - (target[i] - target[i - 1]);
                value += lambda * g * g;
                grad[i] += 2.0 * lambda * g;
                grad[i - 1] -= 2.0 * lambda * g;
            }
            (value, grad)
        }
    }
}

/// Analytic gradient of the per-sample loss with respect to every parameter.
pub fn gradient(
    net: &DenseNet,
    input: &DVector<f64>,
    target: &DVector<f64>,
    loss: LossKind,
) -> (f64, Gradients) {
    let trace = net.forward_trace(input);
    let (value, d_output) = loss_and_grad(&trace.output, target, loss);
    (value, net.backward(&trace, &d_output))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Total optimizer steps (each consumes one batch).
    pub steps: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 && self.learning_rate != 0.0 {
            return Err(Error::InvalidInput("negative learning rate".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 32, steps: 2000, seed: 0, loss: LossKind::Mse }
    }
}

/// Adam state (β1 = 0.9, β2 = 0.999, ε = 1e-8).
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub learning_rate: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(parameter_count: usize, learning_rate: f64) -> Self {
        Self { m: vec![0.0; parameter_count], v: vec![0.0; parameter_count], t: 0, learning_rate }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grads[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.learning_rate * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Trains on (input, target) pairs with seeded batch sampling. Returns the
/// per-step loss curve. Errors out if the loss goes non-finite.
pub fn train(
    net: &mut DenseNet,
    dataset: &[(DVector<f64>, DVector<f64>)],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut adam = Adam::new(net.parameter_count(), config.learning_rate);
    let mut params = net.flat_parameters();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut total = net.zeroed_gradients();
        let mut loss_sum = 0.0;
        for _ in 0..config.batch_size {
            let idx = rng.gen_range(0..dataset.len());
            let (input, target) = &dataset[idx];
            let (value, grads) = gradient(net, input, target, config.loss);
            loss_sum += value;
            total.add_assign(&grads);
        }
        let batch_loss = loss_sum / config.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged(format!("loss {batch_loss} at step {step}")));
        }
        total.scale(1.0 / config.batch_size as f64);
        adam.step(&mut params, &total.flat());
        net.set_flat_parameters(&params);
        curve.push(batch_loss);
    }
    Ok(curve)
}

/// Mean loss over a dataset without updating the network.
pub fn evaluate(
    net: &DenseNet,
    dataset: &[(DVector<f64>, DVector<f64>)],
    loss: LossKind,
) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for (input, target) in dataset {
        let out = net.forward(input);
        sum += loss_and_grad(&out, target, loss).0;
    }
    sum / dataset.len() as f64
}

// --- checkpoint format -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    widths: Vec<usize>,
    output: OutputActivation,
    skip_layers: Vec<usize>,
    seed: u64,
    parameter_count: usize,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DNET";

/// Writes a JSON header followed by the flat little-endian f32 parameter
/// blob.
pub fn save_checkpoint(net: &DenseNet, seed: u64, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        widths: net.widths.clone(),
        output: net.output,
        skip_layers: net.skip_layers.clone(),
        seed,
        parameter_count: net.parameter_count(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let write = |file: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(header_json.len() as u32).to_le_bytes())?;
        file.write_all(&header_json)?;
        for p in net.flat_parameters() {
            file.write_all(&(p as f32).to_le_bytes())?;
        }
        Ok(())
    };
    write(&mut file).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DenseNet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a network checkpoint"));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])?;
    let mut net = DenseNet::new(&header.widths, header.output, &header.skip_layers, header.seed);
    let blob = &bytes[8 + header_len..];
    if blob.len() != header.parameter_count * 4 {
        return Err(Error::format(path, "parameter blob size mismatch"));
    }
    let params: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    net.set_flat_parameters(&params);
    Ok(net)
}
