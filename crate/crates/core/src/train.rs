//! Adam optimizer and the classifier training loop.
//!
//! Deterministic by construction: one named RNG stream drives the epoch
//! shuffles, batches execute in order, and parameter updates iterate the
//! sorted parameter map. Two runs from the same seed produce bit-identical
//! weights.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{ExecPlan, ModelGraph};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, batch_size: 32, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Adam with the usual defaults: beta1 0.9, beta2 0.999, eps 1e-8.
/// Moment state lives in the parameter dtype.
pub struct Adam<T: Element> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once per batch before `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, key: &str, param: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "adam {key}: parameter {:?} vs gradient {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        let n = param.numel();
        let (m, v) = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let t = self.step as i32;
        let corr1 = T::from_f64(1.0 - self.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);

        let mut out = Vec::with_capacity(n);
        for (i, (&p, &g)) in param.data().iter().zip(grad.data().iter()).enumerate() {
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mhat = m[i] / corr1;
            let vhat = v[i] / corr2;
            out.push(p - lr * mhat / (vhat.sqrt() + eps));
        }
        Tensor::from_vec(param.shape().to_vec(), out)
    }
}

/// Copy selected samples of an (N, C, H, W) tensor into one batch.
pub fn gather_batch<T: Element>(images: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let (n, c, h, w) = images.nchw()?;
    let len = c * h * w;
    let mut data = Vec::with_capacity(indices.len() * len);
    for &i in indices {
        if i >= n {
            return Err(Error::usage(format!("sample index {i} out of range for {n}")));
        }
        data.extend_from_slice(&images.data()[i * len..(i + 1) * len]);
    }
    Tensor::from_vec(vec![indices.len(), c, h, w], data)
}

/// Argmax per row, ties to the lowest index.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::shape(format!("argmax: need 2d logits, got {s:?}"))),
    };
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let row = &logits.data()[r * k..(r + 1) * k];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Train in place with softmax cross-entropy. Labels are class indices.
/// Logged accuracy is computed on the pre-update forward of each batch.
pub fn train<T: Element>(
    model: &mut ModelGraph<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if n == 0 || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config("empty dataset, batch, or epoch count".to_string()));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= model.classes {
            return Err(Error::config(format!(
                "label {l} at sample {i} exceeds {} classes",
                model.classes
            )));
        }
    }

    let plan = ExecPlan::original();
    let mut adam = Adam::new(cfg.learning_rate);
    let mut data_rng = rng::stream(cfg.seed, "data");
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = rng::shuffled_indices(&mut data_rng, n);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let x = gather_batch(images, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let tape = Tape::new();
            let run = model.forward_tape(&tape, &x, &plan, &[], true)?;
            let loss_id = tape.cross_entropy_mean(run.logits, &y)?;
            let loss = tape.value(loss_id)?.scalar_value().to_f64();
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite loss on a batch of {}", chunk.len()),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            let predicted = argmax_rows(&tape.value(run.logits)?)?;
            correct += predicted.iter().zip(y.iter()).filter(|(p, t)| p == t).count();

            let grads = tape.backward(loss_id)?;
            adam.begin_step();
            for (key, vid) in &run.param_ids {
                if let Some(g) = grads.get(*vid)? {
                    let updated = adam.update(key, &model.params[key], g)?;
                    model.set_param(key, updated);
                }
            }
        }

        let stats = EpochStats {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        };
        progress(&stats);
        log.push(stats);
    }
    Ok(log)
}
