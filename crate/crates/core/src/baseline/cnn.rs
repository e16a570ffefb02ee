// SPDX-License-Identifier: Apache-2.0

//! Small 1-D convolutional regressor over the eGFR sequence.
//!
//! conv(k, 1→C) → ReLU → conv(k, C→C) → ReLU → global mean pool → concat
//! static features → dense → scalar. Convolutions use valid padding, so a
//! sequence of length L yields L−k+1 then L−2k+2 positions; callers
//! left-pad short histories with the earliest value before this point.
//!
//! The network works in standardized units: sequence values share one
//! mean/std, static columns are standardized per column, and the output is
//! the standardized change from the last observed eGFR.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub seq_len: usize,
    pub channels: usize,
    pub kernel: usize,
    pub static_dim: usize,
}

impl CnnArch {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.kernel == 0 {
            return Err(Error::Config("cnn needs channels >= 1 and kernel >= 1".into()));
        }
        if self.seq_len < 2 * self.kernel - 1 {
            return Err(Error::Config(format!(
                "cnn sequence length {} is shorter than two stacked kernels of {} need ({})",
                self.seq_len,
                self.kernel,
                2 * self.kernel - 1
            )));
        }
        Ok(())
    }

    fn len1(&self) -> usize {
        self.seq_len - self.kernel + 1
    }

    fn len2(&self) -> usize {
        self.len1() - self.kernel + 1
    }

    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.channels * self.kernel
    }
    fn w2(&self) -> usize {
        self.b1() + self.channels
    }
    fn b2(&self) -> usize {
        self.w2() + self.channels * self.channels * self.kernel
    }
    fn wd(&self) -> usize {
        self.b2() + self.channels
    }
    fn bd(&self) -> usize {
        self.wd() + self.channels + self.static_dim
    }

    pub fn param_count(&self) -> usize {
        self.bd() + 1
    }

    /// Index of the output bias in the flat parameter vector.
    pub fn output_bias_index(&self) -> usize {
        self.bd()
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub pooled: Vec<f64>,
    pub output: f64,
}

pub fn forward(arch: &CnnArch, p: &[f64], seq: &[f64], stat: &[f64]) -> Result<Activations> {
    if seq.len() != arch.seq_len {
        return Err(Error::Shape { expected: arch.seq_len, actual: seq.len() });
    }
    if stat.len() != arch.static_dim {
        return Err(Error::Shape { expected: arch.static_dim, actual: stat.len() });
    }
    if p.len() != arch.param_count() {
        return Err(Error::Shape { expected: arch.param_count(), actual: p.len() });
    }
    let (c, k, l1, l2) = (arch.channels, arch.kernel, arch.len1(), arch.len2());
    let mut h1 = vec![0.0; c * l1];
    for ch in 0..c {
        for t in 0..l1 {
            let mut s = p[arch.b1() + ch];
            for j in 0..k {
                s += p[arch.w1() + ch * k + j] * seq[t + j];
            }
            h1[ch * l1 + t] = s.max(0.0);
        }
    }
    let mut h2 = vec![0.0; c * l2];
    for d in 0..c {
        for t in 0..l2 {
            let mut s = p[arch.b2() + d];
            for ch in 0..c {
                for j in 0..k {
                    s += p[arch.w2() + (d * c + ch) * k + j] * h1[ch * l1 + t + j];
                }
            }
            h2[d * l2 + t] = s.max(0.0);
        }
    }
    let pooled: Vec<f64> = (0..c)
        .map(|d| h2[d * l2..(d + 1) * l2].iter().sum::<f64>() / l2 as f64)
        .collect();
    let mut output = p[arch.bd()];
    for (i, z) in pooled.iter().chain(stat).enumerate() {
        output += p[arch.wd() + i] * z;
    }
    Ok(Activations { h1, h2, pooled, output })
}

/// Accumulates d(output)/d(params) · `dout` into `grad`.
fn backward(arch: &CnnArch, p: &[f64], seq: &[f64], stat: &[f64], a: &Activations, dout: f64, grad: &mut [f64]) {
    let (c, k, l1, l2) = (arch.channels, arch.kernel, arch.len1(), arch.len2());
    grad[arch.bd()] += dout;
    for (i, z) in a.pooled.iter().chain(stat).enumerate() {
        grad[arch.wd() + i] += dout * z;
    }
    let mut dh1 = vec![0.0; c * l1];
    for d in 0..c {
        let dpool = dout * p[arch.wd() + d] / l2 as f64;
        for t in 0..l2 {
            if a.h2[d * l2 + t] <= 0.0 {
                continue;
            }
            grad[arch.b2() + d] += dpool;
            for ch in 0..c {
                for j in 0..k {
                    let wi = arch.w2() + (d * c + ch) * k + j;
                    grad[wi] += dpool * a.h1[ch * l1 + t + j];
                    dh1[ch * l1 + t + j] += dpool * p[wi];
                }
            }
        }
    }
    for ch in 0..c {
        for t in 0..l1 {
            if a.h1[ch * l1 + t] <= 0.0 {
                continue;
            }
            let g = dh1[ch * l1 + t];
            grad[arch.b1() + ch] += g;
            for j in 0..k {
                grad[arch.w1() + ch * k + j] += g * seq[t + j];
            }
        }
    }
}

/// One standardized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub seq: Vec<f64>,
    pub stat: Vec<f64>,
    pub y: f64,
}

/// Mean squared error over `batch` and its gradient.
pub fn loss_and_grad(arch: &CnnArch, p: &[f64], batch: &[&Example]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for ex in batch {
        let a = forward(arch, p, &ex.seq, &ex.stat)?;
        let r = a.output - ex.y;
        loss += r * r / n;
        backward(arch, p, &ex.seq, &ex.stat, &a, 2.0 * r / n, &mut grad);
    }
    Ok((loss, grad))
}

pub fn init_params(arch: &CnnArch, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![0.0; arch.param_count()];
    let (c, k) = (arch.channels, arch.kernel);
    let a1 = (6.0 / k as f64).sqrt();
    let a2 = (6.0 / (c * k) as f64).sqrt();
    let ad = (1.0 / (c + arch.static_dim) as f64).sqrt();
    for v in &mut p[arch.w1()..arch.b1()] {
        *v = rng.random_range(-a1..a1);
    }
    p[arch.b1()..arch.w2()].fill(0.01);
    for v in &mut p[arch.w2()..arch.b2()] {
        *v = rng.random_range(-a2..a2);
    }
    p[arch.b2()..arch.wd()].fill(0.01);
    for v in &mut p[arch.wd()..arch.bd()] {
        *v = rng.random_range(-ad..ad);
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub channels: usize,
    pub kernel: usize,
    /// Cap on the sequence length.
    pub max_seq_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            channels: 8,
            kernel: 3,
            max_seq_len: 12,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("cnn needs epochs >= 1 and batch_size >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("cnn learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("cnn momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mean/std pairs mapping raw inputs into network units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub seq_mean: f64,
    pub seq_std: f64,
    pub stat_mean: Vec<f64>,
    pub stat_std: Vec<f64>,
    pub delta_mean: f64,
    pub delta_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let m = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    let s = var.sqrt();
    (m, if s > 1e-12 { s } else { 1.0 })
}

/// Raw (unscaled) sample: padded sequence, static features, target.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub seq: Vec<f64>,
    pub stat: Vec<f64>,
    pub target: f64,
}

impl Scaling {
    pub fn fit(samples: &[RawSample]) -> Self {
        let (seq_mean, seq_std) = mean_std(samples.iter().flat_map(|s| s.seq.iter().copied()));
        let dim = samples.first().map(|s| s.stat.len()).unwrap_or(0);
        let (stat_mean, stat_std) = (0..dim).map(|j| mean_std(samples.iter().map(move |s| s.stat[j]))).unzip();
        let (delta_mean, delta_std) = mean_std(samples.iter().map(|s| s.target - s.seq[s.seq.len() - 1]));
        Scaling {
            seq_mean,
            seq_std,
            stat_mean,
            stat_std,
            delta_mean,
            delta_std,
        }
    }

    fn inputs(&self, seq: &[f64], stat: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            seq.iter().map(|v| (v - self.seq_mean) / self.seq_std).collect(),
            stat.iter()
                .zip(self.stat_mean.iter().zip(&self.stat_std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect(),
        )
    }

    fn example(&self, s: &RawSample) -> Example {
        let (seq, stat) = self.inputs(&s.seq, &s.stat);
        let delta = s.target - s.seq[s.seq.len() - 1];
        Example {
            seq,
            stat,
            y: (delta - self.delta_mean) / self.delta_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cnn {
    pub arch: CnnArch,
    pub params: Vec<f64>,
    pub scaling: Scaling,
    /// Training loss (standardized units) at the end of each epoch.
    pub loss_curve: Vec<f64>,
}

impl Cnn {
    pub fn train(samples: &[RawSample], config: &CnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let first = samples
            .first()
            .ok_or_else(|| Error::Training("cnn needs at least one training window".into()))?;
        let arch = CnnArch {
            seq_len: first.seq.len(),
            channels: config.channels,
            kernel: config.kernel,
            static_dim: first.stat.len(),
        };
        arch.validate()?;
        for s in samples {
            if s.seq.len() != arch.seq_len {
                return Err(Error::Shape { expected: arch.seq_len, actual: s.seq.len() });
            }
            if s.stat.len() != arch.static_dim {
                return Err(Error::Shape { expected: arch.static_dim, actual: s.stat.len() });
            }
        }
        let scaling = Scaling::fit(samples);
        let examples: Vec<Example> = samples.iter().map(|s| scaling.example(s)).collect();
        let mut params = init_params(&arch, seed);
        let loss_curve = sgd(&arch, &mut params, &examples, config, seed)?;
        Ok(Cnn {
            arch,
            params,
            scaling,
            loss_curve,
        })
    }

    pub fn predict(&self, seq: &[f64], stat: &[f64]) -> Result<f64> {
        if seq.len() != self.arch.seq_len {
            return Err(Error::Shape { expected: self.arch.seq_len, actual: seq.len() });
        }
        let (s, t) = self.scaling.inputs(seq, stat);
        let out = forward(&self.arch, &self.params, &s, &t)?.output;
        Ok(seq[seq.len() - 1] + self.scaling.delta_mean + self.scaling.delta_std * out)
    }
}

/// Mini-batch SGD with momentum. Returns the full-data loss after each epoch.
pub fn sgd(arch: &CnnArch, params: &mut [f64], examples: &[Example], config: &CnnConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut velocity = vec![0.0; params.len()];
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grad) = loss_and_grad(arch, params, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {b} (learning rate {})",
                    config.learning_rate
                )));
            }
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v - config.learning_rate * g;
                *p += *v;
            }
        }
        let all: Vec<&Example> = examples.iter().collect();
        let (loss, _) = loss_and_grad(arch, params, &all)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss} after epoch {epoch}")));
        }
        curve.push(loss);
    }
    Ok(curve)
}
