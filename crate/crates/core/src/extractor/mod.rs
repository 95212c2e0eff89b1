//! Small convolutional multi-label classifier used as an image feature
//! extractor.
//!
//! Layout: conv blocks (same-padded convolution, ReLU, 2x2 max-pool), then
//! ReLU dense layers ending at the penultimate width, then a 3-unit sigmoid
//! output (one unit per SEP measure). Activations are stored channel-major
//! (`c, h, w`).

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use train::{
    binary_accuracy, extract_features, offtheshelf_features, offtheshelf_network, read_training_log,
    train_extractor, write_training_log, EpochLog, FeatureVector, TrainConfig,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::NormImage;

pub const N_OUTPUTS: usize = 3;
const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    /// Odd square kernel size.
    pub kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenultimateActivation {
    #[default]
    PostRelu,
    PreRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub height: usize,
    pub width: usize,
    pub conv: Vec<ConvBlock>,
    /// Widths of the ReLU dense layers. The last one is the penultimate width.
    pub dense: Vec<usize>,
    #[serde(default)]
    pub penultimate: PenultimateActivation,
    pub seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            height: 64,
            width: 64,
            conv: [8, 16, 32].iter().map(|&filters| ConvBlock { filters, kernel: 3 }).collect(),
            dense: vec![30],
            penultimate: PenultimateActivation::PostRelu,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { in_c: usize, out_c: usize, kernel: usize, h: usize, w: usize },
    Dense { inputs: usize, outputs: usize },
}

impl LayerKind {
    pub fn weight_len(&self) -> usize {
        match *self {
            LayerKind::Conv { in_c, out_c, kernel, .. } => out_c * in_c * kernel * kernel,
            LayerKind::Dense { inputs, outputs } => inputs * outputs,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Conv { out_c, .. } => out_c,
            LayerKind::Dense { outputs, .. } => outputs,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv { in_c, kernel, .. } => in_c * kernel * kernel,
            LayerKind::Dense { inputs, .. } => inputs,
        }
    }
}

impl NetworkSpec {
    pub fn penultimate_width(&self) -> usize {
        self.dense.last().copied().unwrap_or(0)
    }

    /// Layer shapes in declaration order; the last layer is the output layer.
    pub fn layers(&self) -> Result<Vec<LayerKind>> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("network input size must be positive"));
        }
        if self.dense.is_empty() || self.dense.contains(&0) {
            return Err(Error::validation("dense widths must be non-empty and positive"));
        }
        let (mut c, mut h, mut w) = (3, self.height, self.width);
        let mut layers = Vec::new();
        for (i, block) in self.conv.iter().enumerate() {
            if block.filters == 0 || block.kernel % 2 == 0 {
                return Err(Error::validation(format!(
                    "conv block {i}: filters must be positive and kernel odd"
                )));
            }
            layers.push(LayerKind::Conv { in_c: c, out_c: block.filters, kernel: block.kernel, h, w });
            c = block.filters;
            h /= 2;
            w /= 2;
            if h == 0 || w == 0 {
                return Err(Error::validation(format!(
                    "spatial size collapses below 1x1 after conv block {i} (input {}x{})",
                    self.height, self.width
                )));
            }
        }
        let mut inputs = c * h * w;
        for &outputs in self.dense.iter().chain(std::iter::once(&N_OUTPUTS)) {
            layers.push(LayerKind::Dense { inputs, outputs });
            inputs = outputs;
        }
        Ok(layers)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.layers()?.iter().map(|l| l.weight_len() + l.bias_len()).sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerKind>,
    /// Conv weights are `[out][in][ky][kx]`, dense weights `[out][in]`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub weight_velocity: Vec<Vec<f64>>,
    pub bias_velocity: Vec<Vec<f64>>,
}

/// He-uniform weights, zero biases and momentum buffers.
pub fn build_network(spec: &NetworkSpec) -> Result<NetworkParams> {
    let layers = spec.layers()?;
    let mut weights = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let mut rng = crate::rng::stream(spec.seed, "network-init", i as u64);
        let limit = (6.0 / layer.fan_in() as f64).sqrt();
        weights.push((0..layer.weight_len()).map(|_| rng.random_range(-limit..limit)).collect());
    }
    let biases: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.bias_len()]).collect();
    Ok(NetworkParams {
        spec: spec.clone(),
        weight_velocity: layers.iter().map(|l| vec![0.0; l.weight_len()]).collect(),
        bias_velocity: biases.clone(),
        weights,
        biases,
        layers,
    })
}

impl NetworkParams {
    pub fn parameter_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub probabilities: Vec<[f64; 3]>,
    pub penultimate: Vec<Vec<f64>>,
}

/// Cached activations of one sample for the backward pass.
struct Trace {
    /// Input to each layer (flattened), post-pool for conv inputs.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
    /// Argmax index (into the conv output) for each pooled cell, per conv layer.
    pool_argmax: Vec<Vec<usize>>,
    logits: [f64; 3],
}

fn to_chw(image: &NormImage) -> Vec<f64> {
    let (h, w) = (image.height, image.width);
    let mut out = vec![0.0; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out[ch * h * w + r * w + c] = image.data[(r * w + c) * 3 + ch];
            }
        }
    }
    out
}

fn check_input(spec: &NetworkSpec, image: &NormImage) -> Result<()> {
    if image.height != spec.height || image.width != spec.width {
        return Err(Error::Shape(format!(
            "image {}x{} does not match network input {}x{}",
            image.height, image.width, spec.height, spec.width
        )));
    }
    Ok(())
}

/// Same-padded convolution, channel-major.
fn conv_forward(x: &[f64], w: &[f64], b: &[f64], in_c: usize, out_c: usize, k: usize, h: usize, wd: usize) -> Vec<f64> {
    let p = k / 2;
    let mut out = vec![0.0; out_c * h * wd];
    for o in 0..out_c {
        let plane = &mut out[o * h * wd..(o + 1) * h * wd];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..in_c {
            let src = &x[i * h * wd..(i + 1) * h * wd];
            for dy in 0..k {
                for dx in 0..k {
                    let wv = w[((o * in_c + i) * k + dy) * k + dx];
                    let (y0, y1) = (p.saturating_sub(dy), (h + p - dy).min(h));
                    let (x0, x1) = (p.saturating_sub(dx), (wd + p - dx).min(wd));
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = y + dy - p;
                        let dst = &mut plane[y * wd + x0..y * wd + x1];
                        let s = &src[sy * wd + x0 + dx - p..sy * wd + x1 + dx - p];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a same-padded convolution: returns d_input and accumulates
/// into `dw`, `db`.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    in_c: usize,
    out_c: usize,
    k: usize,
    h: usize,
    wd: usize,
    need_dx: bool,
) -> Vec<f64> {
    let p = k / 2;
    let mut dx_all = vec![0.0; if need_dx { in_c * h * wd } else { 0 }];
    for o in 0..out_c {
        let g = &dout[o * h * wd..(o + 1) * h * wd];
        db[o] += g.iter().sum::<f64>();
        for i in 0..in_c {
            let src = &x[i * h * wd..(i + 1) * h * wd];
            for dy in 0..k {
                for dxk in 0..k {
                    let widx = ((o * in_c + i) * k + dy) * k + dxk;
                    let (y0, y1) = (p.saturating_sub(dy), (h + p - dy).min(h));
                    let (x0, x1) = (p.saturating_sub(dxk), (wd + p - dxk).min(wd));
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + dy - p;
                        let gs = &g[y * wd + x0..y * wd + x1];
                        let s = &src[sy * wd + x0 + dxk - p..sy * wd + x1 + dxk - p];
                        acc += gs.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[widx] += acc;
                    if need_dx {
                        let wv = w[widx];
                        let plane = &mut dx_all[i * h * wd..(i + 1) * h * wd];
                        for y in y0..y1 {
                            let sy = y + dy - p;
                            let gs = &g[y * wd + x0..y * wd + x1];
                            let d = &mut plane[sy * wd + x0 + dxk - p..sy * wd + x1 + dxk - p];
                            for (dv, gv) in d.iter_mut().zip(gs) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx_all
}

/// ReLU then 2x2 max-pool (floor size). Returns pooled values and argmax
/// positions; the first maximum wins ties.
fn relu_pool(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ph * pw);
    let mut arg = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for py in 0..ph {
            for px in 0..pw {
                let mut best = ch * h * w + 2 * py * w + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * py + dy) * w + 2 * px + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best].max(0.0));
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn forward_one(params: &NetworkParams, image: &NormImage) -> Trace {
    let n_layers = params.layers.len();
    let mut trace = Trace { inputs: Vec::new(), pre: Vec::new(), pool_argmax: Vec::new(), logits: [0.0; 3] };
    let mut x = to_chw(image);
    for (li, layer) in params.layers.iter().enumerate() {
        let (w, b) = (&params.weights[li], &params.biases[li]);
        match *layer {
            LayerKind::Conv { in_c, out_c, kernel, h, w: wd } => {
                let z = conv_forward(&x, w, b, in_c, out_c, kernel, h, wd);
                let (pooled, arg) = relu_pool(&z, out_c, h, wd);
                trace.inputs.push(std::mem::replace(&mut x, pooled));
                trace.pre.push(z);
                trace.pool_argmax.push(arg);
            }
            LayerKind::Dense { inputs, outputs } => {
                let z: Vec<f64> = (0..outputs)
                    .map(|o| b[o] + w[o * inputs..(o + 1) * inputs].iter().zip(&x).map(|(a, v)| a * v).sum::<f64>())
                    .collect();
                let next = if li + 1 == n_layers { z.clone() } else { z.iter().map(|v| v.max(0.0)).collect() };
                trace.inputs.push(std::mem::replace(&mut x, next));
                trace.pre.push(z);
            }
        }
    }
    trace.logits.copy_from_slice(&x);
    trace
}

fn penultimate_of(params: &NetworkParams, trace: &Trace) -> Vec<f64> {
    let last = params.layers.len() - 1;
    match params.spec.penultimate {
        PenultimateActivation::PostRelu => trace.inputs[last].clone(),
        PenultimateActivation::PreRelu => trace.pre[last - 1].clone(),
    }
}

pub fn forward(params: &NetworkParams, images: &[NormImage]) -> Result<ForwardOutput> {
    for image in images {
        check_input(&params.spec, image)?;
    }
    let traces = crate::par::map(images.iter().collect(), |img| forward_one(params, img));
    Ok(ForwardOutput {
        probabilities: traces.iter().map(|t| t.logits.map(sigmoid)).collect(),
        penultimate: traces.iter().map(|t| penultimate_of(params, t)).collect(),
    })
}

/// Mean over batch and labels of the binary cross-entropy, with
/// probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_multilabel_loss(probabilities: &[[f64; 3]], labels: &[[bool; 3]]) -> f64 {
    let mut total = 0.0;
    for (p, y) in probabilities.iter().zip(labels) {
        for k in 0..N_OUTPUTS {
            let pk = p[k].clamp(EPS, 1.0 - EPS);
            total -= if y[k] { pk.ln() } else { (1.0 - pk).ln() };
        }
    }
    total / (probabilities.len() * N_OUTPUTS) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub loss: f64,
    pub probabilities: Vec<[f64; 3]>,
}

impl Gradients {
    fn zeros(params: &NetworkParams) -> Self {
        Gradients {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            loss: 0.0,
            probabilities: Vec::new(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights).chain(self.biases.iter_mut().zip(&other.biases)) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).flatten().for_each(|v| *v *= s);
    }
}

/// Gradient of the summed (not averaged) loss terms of one sample.
fn backward_one(params: &NetworkParams, trace: &Trace, label: &[bool; 3]) -> Gradients {
    let mut g = Gradients::zeros(params);
    let mut delta: Vec<f64> = (0..N_OUTPUTS)
        .map(|k| {
            let p = sigmoid(trace.logits[k]);
            if !(EPS..=1.0 - EPS).contains(&p) {
                0.0
            } else {
                p - if label[k] { 1.0 } else { 0.0 }
            }
        })
        .collect();
    let n_layers = params.layers.len();
    let mut conv_index = trace.pool_argmax.len();
    for li in (0..n_layers).rev() {
        let x = &trace.inputs[li];
        match params.layers[li] {
            LayerKind::Dense { inputs, outputs } => {
                // delta is dL/d(pre) for this layer
                let w = &params.weights[li];
                let mut dx = vec![0.0; inputs];
                for o in 0..outputs {
                    let d = delta[o];
                    g.biases[li][o] += d;
                    if d == 0.0 {
                        continue;
                    }
                    let gw = &mut g.weights[li][o * inputs..(o + 1) * inputs];
                    gw.iter_mut().zip(x).for_each(|(a, v)| *a += d * v);
                    dx.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]).for_each(|(a, wv)| *a += d * wv);
                }
                if li == 0 {
                    break;
                }
                // through the ReLU of the previous layer (dense) or the
                // flatten of the pooled conv output
                match params.layers[li - 1] {
                    LayerKind::Dense { .. } => {
                        let pre = &trace.pre[li - 1];
                        delta = dx.iter().zip(pre).map(|(d, z)| if *z > 0.0 { *d } else { 0.0 }).collect();
                    }
                    LayerKind::Conv { .. } => delta = dx,
                }
            }
            LayerKind::Conv { in_c, out_c, kernel, h, w: wd } => {
                // delta is dL/d(pooled output); route through pool and ReLU
                conv_index -= 1;
                let z = &trace.pre[li];
                let arg = &trace.pool_argmax[conv_index];
                let mut dz = vec![0.0; out_c * h * wd];
                for (d, &idx) in delta.iter().zip(arg) {
                    if z[idx] > 0.0 {
                        dz[idx] += d;
                    }
                }
                let (gw, gb) = (&mut g.weights[li], &mut g.biases[li]);
                delta = conv_backward(x, &params.weights[li], &dz, gw, gb, in_c, out_c, kernel, h, wd, li > 0);
            }
        }
    }
    g
}

/// Exact gradients of `bce_multilabel_loss` over the batch.
pub fn backward(params: &NetworkParams, images: &[NormImage], labels: &[[bool; 3]]) -> Result<Gradients> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::Shape(format!("{} images but {} labels", images.len(), labels.len())));
    }
    for image in images {
        check_input(&params.spec, image)?;
    }
    let parts = crate::par::map(images.iter().zip(labels).collect(), |(img, y)| {
        let trace = forward_one(params, img);
        let mut g = backward_one(params, &trace, y);
        g.probabilities.push(trace.logits.map(sigmoid));
        g
    });
    let mut total = Gradients::zeros(params);
    for part in &parts {
        total.add(part);
        total.probabilities.extend_from_slice(&part.probabilities);
    }
    total.scale(1.0 / (images.len() * N_OUTPUTS) as f64);
    total.loss = bce_multilabel_loss(&total.probabilities, labels);
    Ok(total)
}

/// Classical momentum: `v <- mu v + g`, `w <- w - lr v`.
pub fn momentum_update(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64) {
    for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *vi = momentum * *vi + gi;
        *wi -= lr * *vi;
    }
}

pub fn sgd_momentum_step(params: &mut NetworkParams, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::validation(format!("need lr > 0 and momentum in [0, 1), got {lr}, {momentum}")));
    }
    if let Some((li, _)) = grads
        .weights
        .iter()
        .chain(&grads.biases)
        .enumerate()
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numerical(format!(
            "non-finite gradient in parameter tensor {li} (loss {})",
            grads.loss
        )));
    }
    for li in 0..params.layers.len() {
        momentum_update(&mut params.weights[li], &mut params.weight_velocity[li], &grads.weights[li], lr, momentum);
        momentum_update(&mut params.biases[li], &mut params.bias_velocity[li], &grads.biases[li], lr, momentum);
    }
    Ok(())
}
