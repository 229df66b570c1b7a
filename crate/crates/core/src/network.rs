//! Dense feed-forward Q-network with hand-written backpropagation.
//!
//! Hidden layers use ReLU, the output layer is linear with one unit per action. Weight
//! matrices are stored row-major as `fan_out x fan_in`. Every parameter carries an
//! accumulator of decayed squared gradients that scales its step size.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{derive, phase, stream};

/// Layer sizes of the shipped three-class agent.
pub const SHIPPED_DIMS: [usize; 4] = [6, 128, 128, 2];
pub const ACCUMULATOR_DECAY: f64 = 0.95;
pub const STABILIZER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub weight_acc: Vec<f64>,
    pub bias_acc: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
            weight_acc: vec![0.0; fan_in * fan_out],
            bias_acc: vec![0.0; fan_out],
        }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.fan_in..(o + 1) * self.fan_in]
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64], relu: bool) {
        for (o, y) in out.iter_mut().enumerate() {
            let v = self.bias[o] + dot(self.row(o), x);
            *y = if relu && v < 0.0 { 0.0 } else { v };
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    layers: Vec<Dense>,
}

/// Gradient of the loss with respect to every weight and bias, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &QNetwork) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).for_each(|v| v.fill(0.0));
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().chain(self.biases.iter().flatten())
    }
}

/// Inputs, chosen actions and regression targets for one gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub input_dim: usize,
    /// Row-major, `len() = input_dim * actions.len()`.
    pub inputs: Vec<f64>,
    pub actions: Vec<usize>,
    pub targets: Vec<f64>,
}

impl TrainingBatch {
    pub fn new(input_dim: usize) -> Self {
        Self { input_dim, inputs: Vec::new(), actions: Vec::new(), targets: Vec::new() }
    }

    pub fn push(&mut self, input: &[f64], action: usize, target: f64) {
        debug_assert_eq!(input.len(), self.input_dim);
        self.inputs.extend_from_slice(input);
        self.actions.push(action);
        self.targets.push(target);
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.actions.clear();
        self.targets.clear();
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Reusable per-sample buffers for forward and backward passes.
#[derive(Debug, Clone)]
pub struct Scratch {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Scratch {
    pub fn new(net: &QNetwork) -> Self {
        let dims = net.dims();
        let widest = dims.iter().copied().max().unwrap_or(0);
        Self {
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
        }
    }
}

impl QNetwork {
    /// All-zero network with the given layer sizes (at least input and output).
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {dims:?}")));
        }
        Ok(Self { layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() })
    }

    /// He-scaled normal weights (std `sqrt(2 / fan_in)`), zero biases and accumulators.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let mut rng = stream(derive(seed, phase::INIT, 0));
        for layer in &mut net.layers {
            let scale = (2.0 / layer.fan_in as f64).sqrt();
            for w in &mut layer.weights {
                let z: f64 = rng.sample(StandardNormal);
                *w = scale * z;
            }
        }
        Ok(net)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].fan_in];
        d.extend(self.layers.iter().map(|l| l.fan_out));
        d
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Forward pass through `scratch`; returns the output layer. No input validation.
    pub fn forward_with<'s>(&self, x: &[f64], scratch: &'s mut Scratch) -> &'s [f64] {
        scratch.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = scratch.acts.split_at_mut(l + 1);
            layer.forward_into(&head[l], &mut tail[0], l < last);
        }
        &scratch.acts[last + 1]
    }

    /// Checked forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!("expected {} inputs, got {}", self.input_dim(), x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        let mut scratch = Scratch::new(self);
        Ok(self.forward_with(x, &mut scratch).to_vec())
    }

    /// Hidden-layer activations for `x`, one vector per hidden layer.
    pub fn hidden_activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut scratch = Scratch::new(self);
        self.forward_with(x, &mut scratch);
        scratch.acts[1..self.layers.len()].to_vec()
    }

    /// Adds the gradient of the batch loss into `grads` and returns the loss.
    ///
    /// Loss is `(1/B) * sum_i (Q(x_i)[a_i] - target_i)^2`.
    pub fn accumulate_gradients(&self, batch: &TrainingBatch, grads: &mut Gradients, scratch: &mut Scratch) -> f64 {
        let b = batch.len();
        if b == 0 {
            return 0.0;
        }
        let inv_b = 1.0 / b as f64;
        let mut loss = 0.0;
        let last = self.layers.len() - 1;
        for i in 0..b {
            let q = self.forward_with(batch.input(i), scratch);
            let a = batch.actions[i];
            let err = q[a] - batch.targets[i];
            loss += err * err * inv_b;

            let out_dim = self.layers[last].fan_out;
            scratch.delta[..out_dim].fill(0.0);
            scratch.delta[a] = 2.0 * err * inv_b;

            for l in (0..=last).rev() {
                let layer = &self.layers[l];
                let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
                let gw = &mut grads.weights[l];
                let gb = &mut grads.biases[l];
                let prev = &scratch.acts[l];
                if l > 0 {
                    scratch.delta_prev[..fan_in].fill(0.0);
                }
                for o in 0..fan_out {
                    let d = scratch.delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    axpy(d, prev, &mut gw[o * fan_in..(o + 1) * fan_in]);
                    if l > 0 {
                        axpy(d, layer.row(o), &mut scratch.delta_prev[..fan_in]);
                    }
                }
                if l > 0 {
                    for (dp, &act) in scratch.delta_prev[..fan_in].iter_mut().zip(prev) {
                        if act <= 0.0 {
                            *dp = 0.0;
                        }
                    }
                    std::mem::swap(&mut scratch.delta, &mut scratch.delta_prev);
                }
            }
        }
        loss
    }

    /// Mean squared TD loss over `batch` and its exact gradient.
    pub fn td_gradients(&self, batch: &TrainingBatch) -> Result<(Gradients, f64)> {
        if batch.is_empty() {
            return Err(Error::Shape("empty training batch".into()));
        }
        if batch.input_dim != self.input_dim() || batch.inputs.len() != batch.len() * batch.input_dim {
            return Err(Error::Shape("training batch does not match network input".into()));
        }
        if batch.actions.iter().any(|&a| a >= self.output_dim()) {
            return Err(Error::Shape("action index out of range".into()));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut scratch = Scratch::new(self);
        let loss = self.accumulate_gradients(batch, &mut grads, &mut scratch);
        Ok((grads, loss))
    }

    /// Batch loss without gradients.
    pub fn loss(&self, batch: &TrainingBatch) -> f64 {
        let mut scratch = Scratch::new(self);
        let inv_b = 1.0 / batch.len() as f64;
        (0..batch.len())
            .map(|i| {
                let q = self.forward_with(batch.input(i), &mut scratch);
                let e = q[batch.actions[i]] - batch.targets[i];
                e * e * inv_b
            })
            .sum()
    }

    /// One adaptive step: `acc = decay*acc + (1-decay)*g^2; p -= rate * g / (sqrt(acc) + eps)`.
    pub fn apply_update(&mut self, grads: &Gradients, base_rate: f64) -> Result<()> {
        if grads.weights.len() != self.layers.len()
            || self
                .layers
                .iter()
                .zip(grads.weights.iter().zip(&grads.biases))
                .any(|(l, (w, b))| l.weights.len() != w.len() || l.bias.len() != b.len())
        {
            return Err(Error::Shape("gradients do not match network".into()));
        }
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            adaptive_step(&mut layer.weights, &mut layer.weight_acc, &grads.weights[l], base_rate);
            adaptive_step(&mut layer.bias, &mut layer.bias_acc, &grads.biases[l], base_rate);
        }
        Ok(())
    }

    /// Copies parameters from `other`, leaving this network's accumulators untouched.
    pub fn copy_parameters_from(&mut self, other: &QNetwork) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.weights.copy_from_slice(&src.weights);
            dst.bias.copy_from_slice(&src.bias);
        }
    }

    pub fn write_weights<W: Write>(&self, mut sink: W) -> Result<()> {
        let dims: Vec<String> = self.dims().iter().map(usize::to_string).collect();
        writeln!(sink, "layers {}", dims.join(" "))?;
        for layer in &self.layers {
            writeln!(sink, "W {} {}", layer.fan_out, layer.fan_in)?;
            for o in 0..layer.fan_out {
                write_row(&mut sink, layer.row(o))?;
            }
            writeln!(sink, "b {}", layer.fan_out)?;
            write_row(&mut sink, &layer.bias)?;
        }
        sink.flush()?;
        Ok(())
    }

    /// Parses any well-formed weights file. Accumulators start at zero.
    pub fn read_weights<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = source.lines();
        let mut next = |what: &str| -> Result<String> {
            match lines.next() {
                Some(line) => Ok(line?),
                None => Err(Error::Weights(format!("unexpected end of file, expected {what}"))),
            }
        };
        let header = next("header")?;
        let dims = header
            .strip_prefix("layers ")
            .ok_or_else(|| Error::Weights(format!("bad header {header:?}")))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| Error::Weights(format!("bad layer size {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&dims).map_err(|e| Error::Weights(e.to_string()))?;
        for layer in &mut net.layers {
            let w_header = next("weight header")?;
            let expect = format!("W {} {}", layer.fan_out, layer.fan_in);
            if w_header.trim() != expect {
                return Err(Error::Weights(format!("expected {expect:?}, found {w_header:?}")));
            }
            for o in 0..layer.fan_out {
                let row = parse_row(&next("weight row")?, layer.fan_in)?;
                layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in].copy_from_slice(&row);
            }
            let b_header = next("bias header")?;
            let expect = format!("b {}", layer.fan_out);
            if b_header.trim() != expect {
                return Err(Error::Weights(format!("expected {expect:?}, found {b_header:?}")));
            }
            layer.bias = parse_row(&next("bias row")?, layer.fan_out)?;
        }
        Ok(net)
    }

    /// Reads a weights file and checks it matches the shipped architecture.
    pub fn load_weights<R: BufRead>(source: R) -> Result<Self> {
        let net = Self::read_weights(source)?;
        if net.dims() != SHIPPED_DIMS {
            return Err(Error::Weights(format!("layer sizes {:?} do not match {:?}", net.dims(), SHIPPED_DIMS)));
        }
        Ok(net)
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_weights(std::io::BufWriter::new(file))
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::load_weights(std::io::BufReader::new(file))
    }
}

fn adaptive_step(params: &mut [f64], acc: &mut [f64], grads: &[f64], rate: f64) {
    for ((p, a), &g) in params.iter_mut().zip(acc.iter_mut()).zip(grads) {
        *a = ACCUMULATOR_DECAY * *a + (1.0 - ACCUMULATOR_DECAY) * g * g;
        *p -= rate * g / (a.sqrt() + STABILIZER);
    }
}

fn write_row<W: Write>(sink: &mut W, values: &[f64]) -> std::io::Result<()> {
    let mut first = true;
    for v in values {
        if !first {
            sink.write_all(b" ")?;
        }
        first = false;
        // `{:?}` keeps a trailing ".0" and round-trips exactly.
        write!(sink, "{v:?}")?;
    }
    sink.write_all(b"\n")
}

fn parse_row(line: &str, expected: usize) -> Result<Vec<f64>> {
    let row = line
        .split_whitespace()
        .map(|t| match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::Weights(format!("bad number {t:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if row.len() != expected {
        return Err(Error::Weights(format!("expected {expected} values, found {}", row.len())));
    }
    Ok(row)
}

/// Deliberate corruption of analytic gradients, used to prove the checker can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientFault {
    FlipLayerSign(usize),
}

pub const GRADCHECK_SAMPLES: usize = 1200;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Maximum relative error between analytic and central-difference gradients over a random
/// subset of parameters of a randomly initialised shipped-size network.
pub fn gradient_check(seed: u64) -> f64 {
    gradient_check_with(seed, None)
}

pub fn gradient_check_with(seed: u64, fault: Option<GradientFault>) -> f64 {
    let mut net = QNetwork::init(&SHIPPED_DIMS, seed).expect("shipped dims are valid");
    let mut rng = stream(derive(seed, phase::CHECKS, 0));
    // Non-zero biases so no unit sits exactly at a kink.
    for layer in net.layers_mut() {
        for b in &mut layer.bias {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let mut batch = TrainingBatch::new(SHIPPED_DIMS[0]);
    for _ in 0..16 {
        let mut x = [0.0; 6];
        for v in x.iter_mut().take(5) {
            *v = rng.random_range(0.0..1.0);
        }
        x[5] = 1.0;
        batch.push(&x, rng.random_range(0..2), rng.random_range(-2.0..2.0));
    }
    let (mut grads, _) = net.td_gradients(&batch).expect("valid batch");
    if let Some(GradientFault::FlipLayerSign(l)) = fault {
        grads.weights[l].iter_mut().chain(grads.biases[l].iter_mut()).for_each(|g| *g = -*g);
    }

    // Enumerate (layer, is_bias, index) and sample with replacement.
    let sizes: Vec<(usize, usize)> = net.layers.iter().map(|l| (l.weights.len(), l.bias.len())).collect();
    let total: usize = sizes.iter().map(|(w, b)| w + b).sum();
    let mut worst: f64 = 0.0;
    for s in 0..GRADCHECK_SAMPLES.max(sizes.len() * 2) {
        // Guarantee every layer's weights and biases are visited at least once.
        let (l, is_bias, idx) = if s < sizes.len() * 2 {
            let l = s / 2;
            let is_bias = s % 2 == 1;
            let len = if is_bias { sizes[l].1 } else { sizes[l].0 };
            (l, is_bias, rng.random_range(0..len))
        } else {
            let mut r = rng.random_range(0..total);
            let mut pick = (0, false, 0);
            for (l, &(w, b)) in sizes.iter().enumerate() {
                if r < w {
                    pick = (l, false, r);
                    break;
                }
                r -= w;
                if r < b {
                    pick = (l, true, r);
                    break;
                }
                r -= b;
            }
            pick
        };
        let analytic = if is_bias { grads.biases[l][idx] } else { grads.weights[l][idx] };
        let original = param(&net, l, is_bias, idx);
        *param_mut(&mut net, l, is_bias, idx) = original + GRADCHECK_STEP;
        let up = net.loss(&batch);
        *param_mut(&mut net, l, is_bias, idx) = original - GRADCHECK_STEP;
        let down = net.loss(&batch);
        *param_mut(&mut net, l, is_bias, idx) = original;
        let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}

/// `|a - n| / max(|a| + |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn param(net: &QNetwork, l: usize, is_bias: bool, idx: usize) -> f64 {
    if is_bias {
        net.layers[l].bias[idx]
    } else {
        net.layers[l].weights[idx]
    }
}

fn param_mut(net: &mut QNetwork, l: usize, is_bias: bool, idx: usize) -> &mut f64 {
    if is_bias {
        &mut net.layers[l].bias[idx]
    } else {
        &mut net.layers[l].weights[idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_input() -> [f64; 6] {
        [2.0 / 3.0, 0.025, 0.25, 0.25, 0.04, 1.0]
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = QNetwork::zeros(&SHIPPED_DIMS).unwrap();
        assert_eq!(net.forward(&sample_input()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn output_layer_scaling_is_linear() {
        let mut net = QNetwork::init(&SHIPPED_DIMS, 3).unwrap();
        net.layers_mut().last_mut().unwrap().bias = vec![0.12, -0.4];
        let base = net.forward(&sample_input()).unwrap();
        let out = net.layers_mut().last_mut().unwrap();
        out.weights.iter_mut().chain(out.bias.iter_mut()).for_each(|w| *w *= 2.5);
        let got = net.forward(&sample_input()).unwrap();
        for (g, b) in got.iter().zip(&base) {
            assert!((g - 2.5 * b).abs() < 1e-12 * g.abs().max(1.0));
        }
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let a = QNetwork::init(&SHIPPED_DIMS, 17).unwrap();
        assert_eq!(a, QNetwork::init(&SHIPPED_DIMS, 17).unwrap());
        assert_ne!(a, QNetwork::init(&SHIPPED_DIMS, 18).unwrap());
        let hidden = &a.layers()[1].weights;
        let n = hidden.len() as f64;
        let mean = hidden.iter().sum::<f64>() / n;
        let sd = (hidden.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let want = (2.0f64 / 128.0).sqrt();
        assert!((sd - want).abs() < 0.1 * want, "sd {sd}");
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert!(a.layers().iter().all(|l| l.weight_acc.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_rejects_non_finite() {
        let net = QNetwork::init(&SHIPPED_DIMS, 1).unwrap();
        let mut x = sample_input();
        x[2] = f64::NAN;
        assert!(matches!(net.forward(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matched_targets_give_zero_loss_and_gradient() {
        let net = QNetwork::init(&SHIPPED_DIMS, 5).unwrap();
        let mut batch = TrainingBatch::new(6);
        for (i, a) in [(0.1, 0), (0.7, 1), (0.4, 0)] {
            let x = [i, 0.1, 0.2, 0.3, 0.4, 1.0];
            let q = net.forward(&x).unwrap();
            batch.push(&x, a, q[a]);
        }
        let (g, loss) = net.td_gradients(&batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_gradient_by_hand() {
        let mut net = QNetwork::zeros(&[3, 2]).unwrap();
        net.layers_mut()[0].weights = vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75];
        let x = [0.2, 0.4, 1.0];
        let q = net.forward(&x).unwrap();
        let mut batch = TrainingBatch::new(3);
        batch.push(&x, 1, 3.0);
        let (g, loss) = net.td_gradients(&batch).unwrap();
        let err = q[1] - 3.0;
        assert!((loss - err * err).abs() < 1e-15);
        assert_eq!(&g.weights[0][..3], &[0.0, 0.0, 0.0]);
        for (gi, xi) in g.weights[0][3..].iter().zip(x) {
            assert!((gi - 2.0 * err * xi).abs() < 1e-15);
        }
        assert!((g.biases[0][1] - 2.0 * err).abs() < 1e-15);
    }

    #[test]
    fn gradient_check_passes_and_detects_faults() {
        let healthy = gradient_check(7);
        assert!(healthy < 1e-4, "max relative error {healthy}");
        assert_eq!(healthy, gradient_check(7));
        let broken = gradient_check_with(7, Some(GradientFault::FlipLayerSign(1)));
        assert!(broken > 1e-1, "mutation not detected: {broken}");
    }

    #[test]
    fn update_rule_single_parameter() {
        let mut net = QNetwork::zeros(&[1, 1]).unwrap();
        let grads = Gradients { weights: vec![vec![1.0]], biases: vec![vec![0.0]] };
        net.apply_update(&grads, 1e-3).unwrap();
        let want = -1e-3 / (0.05f64.sqrt() + 1e-8);
        assert!((net.layers()[0].weights[0] - want).abs() < 1e-12 * want.abs());
        assert_eq!(net.layers()[0].bias[0], 0.0);
    }

    #[test]
    fn accumulator_stays_non_negative_and_decays() {
        let mut net = QNetwork::zeros(&[1, 1]).unwrap();
        let step = |g: f64| Gradients { weights: vec![vec![g]], biases: vec![vec![-g]] };
        net.apply_update(&step(3.0), 1e-3).unwrap();
        let peak = net.layers()[0].weight_acc[0];
        assert!((peak - 0.05 * 9.0).abs() < 1e-15);
        net.apply_update(&step(0.1), 1e-3).unwrap();
        let after = net.layers()[0].weight_acc[0];
        // Follows the decayed update, so a small gradient lowers it.
        assert!(after >= 0.0 && after < peak);
        assert_eq!(net.layers()[0].bias_acc[0], after);
    }

    #[test]
    fn update_zero_gradient_is_fixed_point() {
        let mut net = QNetwork::init(&SHIPPED_DIMS, 2).unwrap();
        let before = net.clone();
        net.apply_update(&Gradients::zeros_like(&net), 1e-3).unwrap();
        assert_eq!(net.layers()[2].weights, before.layers()[2].weights);
    }

    #[test]
    fn constant_gradient_step_approaches_rate() {
        let mut net = QNetwork::zeros(&[1, 1]).unwrap();
        let grads = Gradients { weights: vec![vec![-0.3]], biases: vec![vec![0.0]] };
        let mut last = 0.0;
        for _ in 0..500 {
            let before = net.layers()[0].weights[0];
            net.apply_update(&grads, 1e-3).unwrap();
            last = net.layers()[0].weights[0] - before;
        }
        assert!((last - 1e-3).abs() < 1e-9, "step {last}");
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut net = QNetwork::zeros(&[2, 1]).unwrap();
        let grads = Gradients { weights: vec![vec![f64::INFINITY, 0.0]], biases: vec![vec![0.0]] };
        assert!(net.apply_update(&grads, 1e-3).is_err());
        assert_eq!(net, QNetwork::zeros(&[2, 1]).unwrap());
    }

    #[test]
    fn weights_round_trip_and_validation() {
        let net = QNetwork::init(&SHIPPED_DIMS, 9).unwrap();
        let mut buf = Vec::new();
        net.write_weights(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("layers 6 128 128 2\nW 128 6\n"));
        let back = QNetwork::load_weights(&buf[..]).unwrap();
        let x = sample_input();
        assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());

        let truncated = &buf[..buf.len() / 2];
        assert!(QNetwork::load_weights(truncated).is_err());

        let small = QNetwork::init(&[6, 128, 2], 1).unwrap();
        let mut buf = Vec::new();
        small.write_weights(&mut buf).unwrap();
        assert!(QNetwork::read_weights(&buf[..]).is_ok());
        assert!(matches!(QNetwork::load_weights(&buf[..]), Err(Error::Weights(_))));
    }
}
