//! Denoising-diffusion representation learner.
//!
//! A small fully connected noise predictor is trained with the standard
//! epsilon-prediction objective on a linear beta schedule. Only the forward
//! (noising) process is used; the trained network's penultimate activations
//! serve as image representations, and together with the per-image vectors
//! they form the persistent [`FeatureMemory`].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::TrafficImage;
use crate::util::{json_digest, read_f64, read_u32, read_u64, seeded_rng};

const MEMORY_MAGIC: &[u8; 4] = b"LAEM";
const MEMORY_VERSION: u32 = 1;
/// Samples per gradient work unit. Fixed so that the reduction order, and
/// therefore every trained bit, does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule range: {0}")]
    InvalidRange(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("step {step} outside 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("no images to train on")]
    EmptyInput,
    #[error("image shape {actual:?} does not match {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error("malformed memory file: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for DiffusionError {
    fn from(e: std::io::Error) -> Self {
        DiffusionError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule with both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::InvalidRange("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidRange("empty schedule".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(DiffusionError::InvalidRange("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut running = 1.0;
        for &a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        // Rounding can flatten the product for vanishing betas or drive it to zero.
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || alpha_bars[0] >= 1.0 {
            return Err(DiffusionError::InvalidRange(
                "cumulative alphas are not strictly decreasing".into(),
            ));
        }
        if *alpha_bars.last().expect("nonempty") <= 0.0 {
            return Err(DiffusionError::InvalidRange("final alpha_bar underflows".into()));
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Cumulative product at 1-based step `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                step: t,
                steps: self.steps(),
            });
        }
        Ok(self.alpha_bars[t - 1])
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// Forward noising: `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    if x0.len() != eps.len() {
        return Err(DiffusionError::LengthMismatch {
            expected: x0.len(),
            actual: eps.len(),
        });
    }
    let abar = schedule.alpha_bar(t)?;
    let (signal, noise) = (abar.sqrt(), (1.0 - abar).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| signal * x + noise * e).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Fully connected noise predictor.
///
/// Input is the noised image followed by the scaled timestep `t / T`;
/// output is the predicted noise. All weights and biases live in one flat
/// vector, layer by layer, each layer storing its `out x in` row-major weight
/// matrix followed by its bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub image_len: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    weights: usize,
    biases: usize,
    inputs: usize,
    outputs: usize,
}

impl DenoiserParams {
    pub fn zeros(image_len: usize, hidden: &[usize], activation: Activation) -> Result<Self, DiffusionError> {
        if image_len == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(DiffusionError::InvalidConfig(format!(
                "image_len {image_len}, hidden {hidden:?}"
            )));
        }
        let mut params = DenoiserParams {
            image_len,
            hidden: hidden.to_vec(),
            activation,
            values: Vec::new(),
        };
        params.values = vec![0.0; params.param_count()];
        Ok(params)
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(image_len: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self, DiffusionError> {
        let mut params = Self::zeros(image_len, hidden, activation)?;
        let mut rng = seeded_rng(seed, 0x1417);
        for layer in params.layers() {
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut params.values[layer.weights..layer.biases] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    fn sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.image_len + 1);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.image_len);
        sizes
    }

    fn layers(&self) -> Vec<LayerShape> {
        let sizes = self.sizes();
        let mut offset = 0;
        sizes
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    weights: offset,
                    biases: offset + w[0] * w[1],
                    inputs: w[0],
                    outputs: w[1],
                };
                offset = shape.biases + w[1];
                shape
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Width of the penultimate layer, i.e. the representation size.
    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("at least one hidden layer")
    }

    /// Layer outputs for one input; the last entry is the linear output.
    fn forward(&self, x_t: &[f64], t_scaled: f64) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
        let mut input = Vec::with_capacity(self.image_len + 1);
        input.extend_from_slice(x_t);
        input.push(t_scaled);
        outputs.push(input);
        for (li, layer) in layers.iter().enumerate() {
            let prev = &outputs[li];
            let last = li + 1 == layers.len();
            let mut out = Vec::with_capacity(layer.outputs);
            for o in 0..layer.outputs {
                let row = &self.values[layer.weights + o * layer.inputs..layer.weights + (o + 1) * layer.inputs];
                let z = self.values[layer.biases + o] + dot(row, prev);
                out.push(if last { z } else { self.activation.apply(z) });
            }
            outputs.push(out);
        }
        outputs
    }

    /// Adds this sample's loss gradient into `grad` and returns the loss.
    fn accumulate(&self, x_t: &[f64], t_scaled: f64, target: &[f64], grad: &mut [f64]) -> f64 {
        let layers = self.layers();
        let acts = self.forward(x_t, t_scaled);
        let pred = acts.last().expect("output layer");
        let n = target.len() as f64;
        let mut loss = 0.0;
        let mut delta: Vec<f64> = pred
            .iter()
            .zip(target)
            .map(|(p, e)| {
                let d = p - e;
                loss += d * d;
                2.0 * d / n
            })
            .collect();
        loss /= n;

        for li in (0..layers.len()).rev() {
            let layer = layers[li];
            let input = &acts[li];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[layer.weights + o * layer.inputs..layer.weights + (o + 1) * layer.inputs];
                for (g, &x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[layer.biases + o] += d;
            }
            if li == 0 {
                break;
            }
            let mut back = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &self.values[layer.weights + o * layer.inputs..layer.weights + (o + 1) * layer.inputs];
                for (b, &w) in back.iter_mut().zip(row) {
                    *b += w * d;
                }
            }
            for (b, &y) in back.iter_mut().zip(input) {
                *b *= self.activation.derivative_from_output(y);
            }
            delta = back;
        }
        loss
    }

    fn check_image_len(&self, len: usize) -> Result<(), DiffusionError> {
        if len != self.image_len {
            return Err(DiffusionError::LengthMismatch {
                expected: self.image_len,
                actual: len,
            });
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Noise-prediction MSE at `q_sample(x0, t, eps)` and its exact gradient
/// with respect to every entry of `params.values`.
pub fn denoise_loss(
    params: &DenoiserParams,
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>), DiffusionError> {
    params.check_image_len(x0.len())?;
    let x_t = q_sample(x0, t, eps, schedule)?;
    let mut grad = vec![0.0; params.values.len()];
    let loss = params.accumulate(&x_t, t as f64 / schedule.steps() as f64, eps, &mut grad);
    if !loss.is_finite() {
        return Err(DiffusionError::NonFiniteLoss { epoch: 0 });
    }
    Ok((loss, grad))
}

/// Penultimate-layer activations for `q_sample(image, t_extract, 0)`.
pub fn extract_features(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    pixels: &[f64],
    t_extract: usize,
) -> Result<Vec<f64>, DiffusionError> {
    params.check_image_len(pixels.len())?;
    let abar = schedule.alpha_bar(t_extract)?;
    let scale = abar.sqrt();
    let x_t: Vec<f64> = pixels.iter().map(|p| scale * p).collect();
    let mut acts = params.forward(&x_t, t_extract as f64 / schedule.steps() as f64);
    acts.pop();
    Ok(acts.pop().expect("penultimate layer"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Readout step; `None` means `T / 4` (at least 1).
    pub t_extract: Option<usize>,
    pub dataset: String,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden: vec![256, 64],
            activation: Activation::Tanh,
            t_extract: None,
            dataset: "unnamed".into(),
        }
    }
}

impl PretrainConfig {
    pub fn extraction_step(&self) -> usize {
        self.t_extract.unwrap_or(self.steps / 4).clamp(1, self.steps.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub config_digest: String,
    pub seed: u64,
    pub learning_rate_used: f64,
    pub image_count: usize,
    pub epoch_mean_losses: Vec<f64>,
    pub epoch_median_losses: Vec<f64>,
}

/// Trained denoiser, its schedule and the per-image representations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMemory {
    pub denoiser: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub t_extract: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub representations: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl FeatureMemory {
    pub fn feature_dim(&self) -> usize {
        self.denoiser.feature_dim()
    }

    pub fn extract(&self, image: &TrafficImage) -> Result<Vec<f64>, DiffusionError> {
        if (image.height, image.width) != (self.image_height, self.image_width) {
            return Err(DiffusionError::ShapeMismatch {
                expected: (self.image_height, self.image_width),
                actual: (image.height, image.width),
            });
        }
        extract_features(&self.denoiser, &self.schedule, &image.pixels, self.t_extract)
    }

    /// Serializes to the `LAEM` bundle: header, schedule, layer shapes,
    /// parameter block, representation matrix, then a JSON provenance trailer.
    /// All numbers are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MEMORY_MAGIC);
        out.extend_from_slice(&MEMORY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.schedule.steps() as u32).to_le_bytes());
        for b in &self.schedule.betas {
            out.extend_from_slice(&b.to_le_bytes());
        }
        let d = &self.denoiser;
        out.extend_from_slice(&(d.image_len as u32).to_le_bytes());
        out.extend_from_slice(&(d.hidden.len() as u32).to_le_bytes());
        for h in &d.hidden {
            out.extend_from_slice(&(*h as u32).to_le_bytes());
        }
        out.extend_from_slice(&d.activation.code().to_le_bytes());
        out.extend_from_slice(&(self.t_extract as u32).to_le_bytes());
        out.extend_from_slice(&(self.image_height as u32).to_le_bytes());
        out.extend_from_slice(&(self.image_width as u32).to_le_bytes());
        out.extend_from_slice(&(d.values.len() as u64).to_le_bytes());
        for v in &d.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.representations.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim() as u32).to_le_bytes());
        for row in &self.representations {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let trailer = serde_json::to_vec(&self.provenance).expect("provenance serializes");
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        out.extend_from_slice(&trailer);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffusionError> {
        let bad = |what: &str| DiffusionError::Malformed(what.to_string());
        if bytes.len() < 8 || &bytes[..4] != MEMORY_MAGIC {
            return Err(bad("magic"));
        }
        let mut at = 4;
        let version = read_u32(bytes, &mut at).ok_or_else(|| bad("version"))?;
        if version != MEMORY_VERSION {
            return Err(bad("unsupported version"));
        }
        let steps = read_u32(bytes, &mut at).ok_or_else(|| bad("steps"))? as usize;
        let betas = (0..steps)
            .map(|_| read_f64(bytes, &mut at))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("betas"))?;
        let schedule = NoiseSchedule::from_betas(betas)?;
        let image_len = read_u32(bytes, &mut at).ok_or_else(|| bad("shape"))? as usize;
        let n_hidden = read_u32(bytes, &mut at).ok_or_else(|| bad("shape"))? as usize;
        let hidden = (0..n_hidden)
            .map(|_| read_u32(bytes, &mut at).map(|h| h as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("hidden sizes"))?;
        let activation = read_u32(bytes, &mut at)
            .and_then(Activation::from_code)
            .ok_or_else(|| bad("activation"))?;
        let t_extract = read_u32(bytes, &mut at).ok_or_else(|| bad("t_extract"))? as usize;
        let image_height = read_u32(bytes, &mut at).ok_or_else(|| bad("height"))? as usize;
        let image_width = read_u32(bytes, &mut at).ok_or_else(|| bad("width"))? as usize;
        let mut denoiser = DenoiserParams::zeros(image_len, &hidden, activation)?;
        let n_params = read_u64(bytes, &mut at).ok_or_else(|| bad("param count"))? as usize;
        if n_params != denoiser.param_count() {
            return Err(bad("parameter count disagrees with layer shapes"));
        }
        for v in denoiser.values.iter_mut() {
            *v = read_f64(bytes, &mut at).ok_or_else(|| bad("parameters"))?;
        }
        let n_rows = read_u64(bytes, &mut at).ok_or_else(|| bad("rows"))? as usize;
        let dim = read_u32(bytes, &mut at).ok_or_else(|| bad("dim"))? as usize;
        if dim != denoiser.feature_dim() {
            return Err(bad("representation width"));
        }
        let mut representations = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            let row = (0..dim)
                .map(|_| read_f64(bytes, &mut at))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("representations"))?;
            representations.push(row);
        }
        let len = read_u64(bytes, &mut at).ok_or_else(|| bad("trailer length"))? as usize;
        let trailer = bytes.get(at..at + len).ok_or_else(|| bad("trailer"))?;
        let provenance = serde_json::from_slice(trailer).map_err(|e| bad(&e.to_string()))?;
        Ok(FeatureMemory {
            denoiser,
            schedule,
            t_extract,
            image_height,
            image_width,
            representations,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct TrainOutcome {
    params: DenoiserParams,
    mean_losses: Vec<f64>,
    median_losses: Vec<f64>,
}

fn train_once(
    images: &[&[f64]],
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    lr: f64,
) -> Result<TrainOutcome, DiffusionError> {
    let image_len = images[0].len();
    let mut params = DenoiserParams::init(image_len, &cfg.hidden, cfg.activation, cfg.seed)?;
    let mut adam = Adam::new(params.values.len());
    let mut rng = seeded_rng(cfg.seed, 0xD1FF);
    let steps = schedule.steps();
    let batch_size = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut mean_losses = Vec::with_capacity(cfg.epochs);
    let mut median_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for batch in order.chunks(batch_size) {
            // Draw every random number before fanning out.
            let samples: Vec<(usize, usize, Vec<f64>)> = batch
                .iter()
                .map(|&i| {
                    let t = rng.random_range(1..=steps);
                    let eps: Vec<f64> = (0..image_len).map(|_| rng.sample(StandardNormal)).collect();
                    (i, t, eps)
                })
                .collect();
            let partials: Vec<(f64, Vec<f64>)> = samples
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut grad = vec![0.0; params.values.len()];
                    let mut loss = 0.0;
                    for (i, t, eps) in chunk {
                        let abar = schedule.alpha_bars[*t - 1];
                        let (s, n) = (abar.sqrt(), (1.0 - abar).sqrt());
                        let x_t: Vec<f64> = images[*i].iter().zip(eps).map(|(x, e)| s * x + n * e).collect();
                        loss += params.accumulate(&x_t, *t as f64 / steps as f64, eps, &mut grad);
                    }
                    (loss, grad)
                })
                .collect();
            let mut grad = vec![0.0; params.values.len()];
            let mut loss = 0.0;
            for (l, g) in partials {
                loss += l;
                for (acc, v) in grad.iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(DiffusionError::NonFiniteLoss { epoch });
            }
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.update(&mut params.values, &grad, lr);
            batch_losses.push(loss);
        }
        mean_losses.push(batch_losses.iter().sum::<f64>() / batch_losses.len() as f64);
        median_losses.push(median(&mut batch_losses));
    }
    if params.values.iter().any(|v| !v.is_finite()) {
        return Err(DiffusionError::NonFiniteLoss { epoch: cfg.epochs });
    }
    Ok(TrainOutcome {
        params,
        mean_losses,
        median_losses,
    })
}

/// Trains the denoiser on `images` and reads out one representation per image.
///
/// A diverging run is retried once from scratch at half the learning rate.
pub fn pretrain(images: &[TrafficImage], cfg: &PretrainConfig) -> Result<FeatureMemory, DiffusionError> {
    let first = images.first().ok_or(DiffusionError::EmptyInput)?;
    let shape = (first.height, first.width);
    for img in images {
        if (img.height, img.width) != shape {
            return Err(DiffusionError::ShapeMismatch {
                expected: shape,
                actual: (img.height, img.width),
            });
        }
    }
    let schedule = NoiseSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end)?;
    let pixels: Vec<&[f64]> = images.iter().map(|i| i.pixels.as_slice()).collect();
    let (outcome, lr) = match train_once(&pixels, &schedule, cfg, cfg.learning_rate) {
        Ok(o) => (o, cfg.learning_rate),
        Err(DiffusionError::NonFiniteLoss { .. }) => {
            let lr = cfg.learning_rate / 2.0;
            (train_once(&pixels, &schedule, cfg, lr)?, lr)
        }
        Err(e) => return Err(e),
    };
    let t_extract = cfg.extraction_step();
    let representations = images
        .par_iter()
        .map(|img| extract_features(&outcome.params, &schedule, &img.pixels, t_extract))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FeatureMemory {
        denoiser: outcome.params,
        schedule,
        t_extract,
        image_height: shape.0,
        image_width: shape.1,
        representations,
        provenance: Provenance {
            dataset: cfg.dataset.clone(),
            config_digest: json_digest(cfg),
            seed: cfg.seed,
            learning_rate_used: lr,
            image_count: images.len(),
            epoch_mean_losses: outcome.mean_losses,
            epoch_median_losses: outcome.median_losses,
        },
    })
}
