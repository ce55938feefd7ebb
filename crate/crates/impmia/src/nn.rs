//! Bias-free ReLU multilayer perceptrons: definition, training, and exact
//! per-sample gradients.
//!
//! Networks here carry no bias terms, so every model is positively
//! homogeneous: scaling all weights by `c > 0` scales the outputs by `c^L`
//! where `L` is the number of weight layers. The ReLU subgradient at exactly
//! zero is fixed to zero, and runner-up class ties break toward the lowest
//! class index, so every gradient in this module is deterministic.

use crate::scalar::{norm2, Scalar};
use crate::seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

/// Architecture of a bias-free ReLU MLP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
}

/// Placement of one weight matrix inside the flat parameter vector.
/// Weights are row-major `(rows, cols)` = `(out_dim, in_dim)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ArchSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, num_classes: usize) -> Result<Self, NnError> {
        let spec = Self {
            input_dim,
            hidden_widths,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 {
            return Err(NnError::InvalidArch("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(NnError::InvalidArch("num_classes must be >= 2".into()));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(NnError::InvalidArch("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of weight layers, i.e. the homogeneity degree `L`.
    pub fn depth(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// `(out_dim, in_dim)` of each weight layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth());
        let mut prev = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((w, prev));
            prev = w;
        }
        dims.push((self.num_classes, prev));
        dims
    }

    /// Contiguous row-major layout of all layers in the flat parameter vector.
    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut slots = Vec::with_capacity(self.depth());
        let mut offset = 0;
        for (layer, (rows, cols)) in self.layer_dims().into_iter().enumerate() {
            slots.push(LayerSlot {
                layer,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        }
        slots
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(r, c)| r * c).sum()
    }
}

/// Flat vector of all model weights plus its layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<S> {
    pub values: Vec<S>,
    pub layout: Vec<LayerSlot>,
}

impl<S: Scalar> ParamVector<S> {
    pub fn zeros(arch: &ArchSpec) -> Self {
        Self {
            values: vec![S::zero(); arch.param_count()],
            layout: arch.layout(),
        }
    }

    pub fn from_values(arch: &ArchSpec, values: Vec<S>) -> Result<Self, NnError> {
        if values.len() != arch.param_count() {
            return Err(NnError::DimensionMismatch {
                what: "parameter vector",
                expected: arch.param_count(),
                got: values.len(),
            });
        }
        Ok(Self {
            values,
            layout: arch.layout(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weight matrix of one layer as a row-major slice.
    pub fn layer(&self, layer: usize) -> &[S] {
        let s = self.layout[layer];
        &self.values[s.offset..s.offset + s.rows * s.cols]
    }

    pub fn norm(&self) -> S {
        norm2(&self.values)
    }

    pub fn scale(&mut self, c: S) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    /// Widen to f64 (identity for f64 parameters).
    pub fn to_f64(&self) -> ParamVector<f64> {
        ParamVector {
            values: self.values.iter().map(|v| v.to_f64_lossy()).collect(),
            layout: self.layout.clone(),
        }
    }
}

fn check_input<S>(arch: &ArchSpec, theta: &ParamVector<S>, x: &[S]) -> Result<(), NnError> {
    if x.len() != arch.input_dim {
        return Err(NnError::DimensionMismatch {
            what: "input",
            expected: arch.input_dim,
            got: x.len(),
        });
    }
    if theta.values.len() != arch.param_count() {
        return Err(NnError::DimensionMismatch {
            what: "parameters",
            expected: arch.param_count(),
            got: theta.values.len(),
        });
    }
    Ok(())
}

fn check_label(arch: &ArchSpec, y: usize) -> Result<(), NnError> {
    if y >= arch.num_classes {
        return Err(NnError::InvalidLabel {
            label: y,
            classes: arch.num_classes,
        });
    }
    Ok(())
}

/// Per-layer activations of a forward pass. The last entry holds the logits
/// (no ReLU on the output layer). For hidden layers `a > 0` iff the
/// pre-activation was `> 0`, which is all backprop needs.
struct ForwardStates<S> {
    activations: Vec<Vec<S>>,
}

fn forward_states<S: Scalar>(arch: &ArchSpec, theta: &ParamVector<S>, x: &[S]) -> ForwardStates<S> {
    let depth = arch.depth();
    let mut activations: Vec<Vec<S>> = Vec::with_capacity(depth);
    let mut input: &[S] = x;
    for (l, slot) in theta.layout.iter().enumerate() {
        let w = theta.layer(l);
        let mut out = vec![S::zero(); slot.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * slot.cols..(r + 1) * slot.cols];
            *o = row.iter().zip(input).map(|(&wv, &iv)| wv * iv).sum();
        }
        if l + 1 < depth {
            for v in &mut out {
                if *v <= S::zero() {
                    *v = S::zero();
                }
            }
        }
        activations.push(out);
        input = activations.last().unwrap();
    }
    ForwardStates { activations }
}

/// Logits `Φ(θ; x)` of the network.
pub fn forward_logits<S: Scalar>(
    arch: &ArchSpec,
    theta: &ParamVector<S>,
    x: &[S],
) -> Result<Vec<S>, NnError> {
    check_input(arch, theta, x)?;
    Ok(forward_states(arch, theta, x).activations.pop().unwrap())
}

/// Strongest competing class `argmax_{j != y} logits[j]`, lowest index on ties.
pub fn runner_up<S: Scalar>(logits: &[S], y: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in logits.iter().enumerate() {
        if j == y {
            continue;
        }
        if best == usize::MAX || v > logits[best] {
            best = j;
        }
    }
    best
}

/// Logit margin `Δ = Φ_y - max_{j != y} Φ_j`. Positive iff the sample is
/// classified correctly with a strict margin.
pub fn margin<S: Scalar>(
    arch: &ArchSpec,
    theta: &ParamVector<S>,
    x: &[S],
    y: usize,
) -> Result<S, NnError> {
    check_label(arch, y)?;
    let logits = forward_logits(arch, theta, x)?;
    let j = runner_up(&logits, y);
    Ok(logits[y] - logits[j])
}

/// Backprop a gradient on the logits down to all weights.
fn backward<S: Scalar>(
    arch: &ArchSpec,
    theta: &ParamVector<S>,
    x: &[S],
    states: &ForwardStates<S>,
    d_logits: Vec<S>,
) -> ParamVector<S> {
    let mut grad = ParamVector::zeros(arch);
    let mut delta = d_logits;
    for l in (0..arch.depth()).rev() {
        let slot = theta.layout[l];
        let below: &[S] = if l == 0 {
            x
        } else {
            &states.activations[l - 1]
        };
        let gw = &mut grad.values[slot.offset..slot.offset + slot.rows * slot.cols];
        for (r, &d) in delta.iter().enumerate() {
            if d == S::zero() {
                continue;
            }
            let row = &mut gw[r * slot.cols..(r + 1) * slot.cols];
            for (g, &a) in row.iter_mut().zip(below) {
                *g += d * a;
            }
        }
        if l > 0 {
            let w = theta.layer(l);
            let mut next = vec![S::zero(); slot.cols];
            for (r, &d) in delta.iter().enumerate() {
                if d == S::zero() {
                    continue;
                }
                let row = &w[r * slot.cols..(r + 1) * slot.cols];
                for (n, &wv) in next.iter_mut().zip(row) {
                    *n += wv * d;
                }
            }
            // ReLU mask: activation > 0 iff pre-activation > 0; the
            // subgradient at exactly zero is zero.
            for (n, &a) in next.iter_mut().zip(&states.activations[l - 1]) {
                if a <= S::zero() {
                    *n = S::zero();
                }
            }
            delta = next;
        }
    }
    grad
}

/// Exact gradient of the margin `Φ_y - Φ_{j*}` with respect to all weights.
pub fn margin_gradient<S: Scalar>(
    arch: &ArchSpec,
    theta: &ParamVector<S>,
    x: &[S],
    y: usize,
) -> Result<ParamVector<S>, NnError> {
    check_label(arch, y)?;
    check_input(arch, theta, x)?;
    let states = forward_states(arch, theta, x);
    let logits = states.activations.last().unwrap();
    let j = runner_up(logits, y);
    let mut d = vec![S::zero(); arch.num_classes];
    d[y] = S::one();
    d[j] = -S::one();
    Ok(backward(arch, theta, x, &states, d))
}

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-sample cross-entropy `-log softmax(logits)[y]`.
pub fn cross_entropy<S: Scalar>(logits: &[S], y: usize) -> S {
    let max = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let log_sum = logits
        .iter()
        .map(|&v| (v - max).exp())
        .sum::<S>()
        .ln()
        + max;
    log_sum - logits[y]
}

/// Exact gradient of the per-sample cross-entropy with respect to all weights.
pub fn loss_gradient<S: Scalar>(
    arch: &ArchSpec,
    theta: &ParamVector<S>,
    x: &[S],
    y: usize,
) -> Result<ParamVector<S>, NnError> {
    check_label(arch, y)?;
    check_input(arch, theta, x)?;
    let states = forward_states(arch, theta, x);
    let mut d = softmax(states.activations.last().unwrap());
    d[y] -= S::one();
    Ok(backward(arch, theta, x, &states, d))
}

/// Verify `Φ(x; cθ) = c^L Φ(x; θ)` up to a relative tolerance of 1e-8.
pub fn homogeneity_check<S: Scalar>(
    arch: &ArchSpec,
    theta: &ParamVector<S>,
    x: &[S],
    c: S,
) -> Result<bool, NnError> {
    let base = forward_logits(arch, theta, x)?;
    let mut scaled = theta.clone();
    scaled.scale(c);
    let lifted = forward_logits(arch, &scaled, x)?;
    let factor = c.powi(arch.depth() as i32);
    let expected: Vec<S> = base.iter().map(|&v| v * factor).collect();
    let diff: S = lifted
        .iter()
        .zip(&expected)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<S>()
        .sqrt();
    let tol = S::from_f64_lossy(1e-8) * (S::one() + norm2(&expected));
    Ok(diff <= tol)
}

/// Training hyperparameters. Identical config + data give a bit-identical
/// final parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub flip_augment: bool,
    /// Stop once the mean epoch cross-entropy falls below this (0 disables).
    pub stop_loss: f64,
    /// Stop once the full-objective gradient norm falls below this (0 disables).
    pub stop_grad_norm: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 2000,
            batch_size: 50,
            seed: 0,
            flip_augment: false,
            stop_loss: 1e-3,
            stop_grad_norm: 0.0,
            lr_decay: 1.0,
        }
    }
}

/// A training set plus its optional image-grid width (enables flips).
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a, S> {
    pub xs: &'a [Vec<S>],
    pub ys: &'a [usize],
    pub image_width: Option<usize>,
}

/// Mirror a row-major `w x w` feature grid left-to-right.
pub fn flip_features<S: Copy>(x: &[S], width: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        out.extend(row.iter().rev().copied());
    }
    out
}

/// Seeded per-layer uniform init in `±sqrt(1/fan_in)`. Values are drawn in
/// f64 and converted, so f32 and f64 models share the same draw sequence.
pub fn init_params<S: Scalar>(arch: &ArchSpec, seed_value: u64) -> ParamVector<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "init"));
    let mut theta = ParamVector::zeros(arch);
    for slot in theta.layout.clone() {
        let bound = (1.0 / slot.cols as f64).sqrt();
        for v in &mut theta.values[slot.offset..slot.offset + slot.rows * slot.cols] {
            *v = S::from_f64_lossy(rng.random_range(-bound..bound));
        }
    }
    theta
}

/// Mean cross-entropy over a dataset (no augmentation, no decay term).
pub fn mean_loss<S: Scalar>(arch: &ArchSpec, theta: &ParamVector<S>, data: TrainData<'_, S>) -> f64 {
    let n = data.xs.len();
    let mut total = 0.0;
    for (x, &y) in data.xs.iter().zip(data.ys) {
        let logits = forward_states(arch, theta, x).activations.pop().unwrap();
        total += cross_entropy(&logits, y).to_f64_lossy();
    }
    total / n as f64
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy<S: Scalar>(arch: &ArchSpec, theta: &ParamVector<S>, data: TrainData<'_, S>) -> f64 {
    let mut correct = 0usize;
    for (x, &y) in data.xs.iter().zip(data.ys) {
        let logits = forward_states(arch, theta, x).activations.pop().unwrap();
        let pred = argmax(&logits);
        if pred == y {
            correct += 1;
        }
    }
    correct as f64 / data.xs.len() as f64
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradient of the full objective (mean cross-entropy + `wd/2 * ||θ||²`)
/// over the unaugmented data.
fn full_gradient<S: Scalar>(
    arch: &ArchSpec,
    theta: &ParamVector<S>,
    data: TrainData<'_, S>,
    weight_decay: f64,
) -> ParamVector<S> {
    let mut grad = ParamVector::zeros(arch);
    for (x, &y) in data.xs.iter().zip(data.ys) {
        let g = loss_gradient(arch, theta, x, y).expect("validated data");
        for (a, b) in grad.values.iter_mut().zip(&g.values) {
            *a += *b;
        }
    }
    let inv_n = S::from_f64_lossy(1.0 / data.xs.len() as f64);
    let wd = S::from_f64_lossy(weight_decay);
    for (a, &t) in grad.values.iter_mut().zip(&theta.values) {
        *a = *a * inv_n + wd * t;
    }
    grad
}

/// SGD with momentum on mean cross-entropy plus an in-loss weight-decay term
/// `wd/2 * ||θ||²`. Horizontal-flip augmentation is applied per sample with
/// probability 1/2 when the data is image-shaped and `flip_augment` is set.
pub fn train<S: Scalar>(
    arch: &ArchSpec,
    data: TrainData<'_, S>,
    cfg: &TrainConfig,
) -> Result<ParamVector<S>, NnError> {
    arch.validate()?;
    if data.xs.is_empty() || data.xs.len() != data.ys.len() {
        return Err(NnError::EmptyTrainSet);
    }
    for x in data.xs {
        if x.len() != arch.input_dim {
            return Err(NnError::DimensionMismatch {
                what: "training sample",
                expected: arch.input_dim,
                got: x.len(),
            });
        }
    }
    for &y in data.ys {
        check_label(arch, y)?;
    }

    let n = data.xs.len();
    let mut theta = init_params::<S>(arch, cfg.seed);
    let mut velocity = vec![S::zero(); theta.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "train"));
    let flips = cfg.flip_augment && data.image_width.is_some();
    let momentum = S::from_f64_lossy(cfg.momentum);
    let wd = S::from_f64_lossy(cfg.weight_decay);
    let mut lr = cfg.learning_rate;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        // Fisher-Yates driven by the training RNG stream.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let lr_s = S::from_f64_lossy(lr);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = vec![S::zero(); theta.len()];
            for &i in chunk {
                let flipped;
                let x: &[S] = if flips && rng.random_bool(0.5) {
                    flipped = flip_features(&data.xs[i], data.image_width.unwrap());
                    &flipped
                } else {
                    &data.xs[i]
                };
                let states = forward_states(arch, &theta, x);
                let logits = states.activations.last().unwrap();
                epoch_loss += cross_entropy(logits, data.ys[i]).to_f64_lossy();
                let mut d = softmax(logits);
                d[data.ys[i]] -= S::one();
                let g = backward(arch, &theta, x, &states, d);
                for (a, b) in grad.iter_mut().zip(&g.values) {
                    *a += *b;
                }
            }
            let inv_b = S::from_f64_lossy(1.0 / chunk.len() as f64);
            for ((g, v), t) in grad.iter_mut().zip(&mut velocity).zip(&mut theta.values) {
                let step = *g * inv_b + wd * *t;
                *v = momentum * *v + step;
                *t -= lr_s * *v;
            }
        }

        let mean_epoch_loss = epoch_loss / n as f64;
        if !mean_epoch_loss.is_finite() {
            return Err(NnError::Diverged {
                epoch,
                loss: mean_epoch_loss,
            });
        }
        if cfg.stop_loss > 0.0 && mean_epoch_loss < cfg.stop_loss {
            break;
        }
        if cfg.stop_grad_norm > 0.0 {
            let g = full_gradient(arch, &theta, data, cfg.weight_decay);
            if g.norm().to_f64_lossy() <= cfg.stop_grad_norm {
                break;
            }
        }
        lr *= cfg.lr_decay;
    }
    Ok(theta)
}

/// Relative residual of the weight-decay stationarity identity.
///
/// At a stationary point of `mean CE + wd/2 ||θ||²` the weights equal a
/// nonnegative combination of per-sample margin gradients whose coefficients
/// come from the softmax of the competing classes. Returns
/// `||θ - Σ_i Σ_{j != y_i} p_ij/(n·wd) · ∇[Φ_y - Φ_j]|| / ||θ||`.
pub fn stationarity_residual<S: Scalar>(
    arch: &ArchSpec,
    theta: &ParamVector<S>,
    data: TrainData<'_, S>,
    weight_decay: f64,
) -> Result<f64, NnError> {
    let n = data.xs.len();
    if n == 0 {
        return Err(NnError::EmptyTrainSet);
    }
    let theta64 = theta.to_f64();
    let arch64 = arch.clone();
    let mut recon = vec![0.0f64; theta.len()];
    let scale = 1.0 / (n as f64 * weight_decay);
    for (x, &y) in data.xs.iter().zip(data.ys) {
        let x64: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
        let logits = forward_logits(&arch64, &theta64, &x64)?;
        let probs = softmax(&logits);
        for j in 0..arch.num_classes {
            if j == y || probs[j] == 0.0 {
                continue;
            }
            // ∇[Φ_y - Φ_j] via the margin backprop with the competing class
            // pinned to j.
            let states = forward_states(&arch64, &theta64, &x64);
            let mut d = vec![0.0f64; arch.num_classes];
            d[y] = 1.0;
            d[j] = -1.0;
            let g = backward(&arch64, &theta64, &x64, &states, d);
            let coef = probs[j] * scale;
            for (r, gv) in recon.iter_mut().zip(&g.values) {
                *r += coef * gv;
            }
        }
    }
    let mut diff = 0.0;
    for (t, r) in theta64.values.iter().zip(&recon) {
        diff += (t - r) * (t - r);
    }
    Ok(diff.sqrt() / theta64.norm())
}

// ---------------------------------------------------------------------------
// Checkpoint file format: textual header, then raw little-endian f64 weights.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &str = "impmia-checkpoint v1";

/// Write a checkpoint. `extra` holds additional header lines (e.g. the
/// resolved run configuration) echoed verbatim as `key = value`.
pub fn save_checkpoint(
    path: &Path,
    arch: &ArchSpec,
    theta: &ParamVector<f64>,
    seed_value: u64,
    extra: &[(String, String)],
) -> Result<(), NnError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CKPT_MAGIC}")?;
    writeln!(w, "input_dim = {}", arch.input_dim)?;
    writeln!(w, "num_classes = {}", arch.num_classes)?;
    let hidden: Vec<String> = arch.hidden_widths.iter().map(|v| v.to_string()).collect();
    writeln!(w, "hidden = {}", hidden.join(","))?;
    writeln!(w, "seed = {seed_value}")?;
    let layout: Vec<String> = theta
        .layout
        .iter()
        .map(|s| format!("{}:{}x{}@{}", s.layer, s.rows, s.cols, s.offset))
        .collect();
    writeln!(w, "layout = {}", layout.join(","))?;
    writeln!(w, "param_count = {}", theta.len())?;
    for (k, v) in extra {
        writeln!(w, "{k} = {v}")?;
    }
    writeln!(w, "end-header")?;
    for v in &theta.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back. Returns the architecture, weights, and training
/// seed recorded in the header.
pub fn load_checkpoint(path: &Path) -> Result<(ArchSpec, ParamVector<f64>, u64), NnError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CKPT_MAGIC {
        return Err(NnError::MalformedCheckpoint(format!(
            "bad magic: {:?}",
            line.trim_end()
        )));
    }
    let mut input_dim = None;
    let mut num_classes = None;
    let mut hidden: Option<Vec<usize>> = None;
    let mut seed_value = 0u64;
    let mut param_count = None;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(NnError::MalformedCheckpoint("missing end-header".into()));
        }
        let t = line.trim_end();
        if t == "end-header" {
            break;
        }
        let Some((k, v)) = t.split_once(" = ") else {
            return Err(NnError::MalformedCheckpoint(format!("bad header line: {t:?}")));
        };
        match k {
            "input_dim" => input_dim = Some(parse_usize(v)?),
            "num_classes" => num_classes = Some(parse_usize(v)?),
            "hidden" => {
                hidden = Some(if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(parse_usize).collect::<Result<_, _>>()?
                })
            }
            "seed" => {
                seed_value = v
                    .parse()
                    .map_err(|_| NnError::MalformedCheckpoint(format!("bad seed: {v:?}")))?
            }
            "param_count" => param_count = Some(parse_usize(v)?),
            _ => {} // config echo and layout are informational
        }
    }
    let arch = ArchSpec::new(
        input_dim.ok_or_else(|| NnError::MalformedCheckpoint("missing input_dim".into()))?,
        hidden.ok_or_else(|| NnError::MalformedCheckpoint("missing hidden".into()))?,
        num_classes.ok_or_else(|| NnError::MalformedCheckpoint("missing num_classes".into()))?,
    )?;
    let count = param_count.ok_or_else(|| NnError::MalformedCheckpoint("missing param_count".into()))?;
    if count != arch.param_count() {
        return Err(NnError::MalformedCheckpoint(format!(
            "param_count {count} does not match architecture ({})",
            arch.param_count()
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(NnError::MalformedCheckpoint(format!(
            "expected {} weight bytes, found {}",
            count * 8,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let theta = ParamVector::from_values(&arch, values)?;
    Ok((arch, theta, seed_value))
}

fn parse_usize(v: &str) -> Result<usize, NnError> {
    v.parse()
        .map_err(|_| NnError::MalformedCheckpoint(format!("bad integer: {v:?}")))
}
