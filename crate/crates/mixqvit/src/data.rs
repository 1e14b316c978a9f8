//! Synthetic image data and the small training loop that turns the random
//! initialization into a model worth quantizing.
//!
//! Each class is a Gaussian intensity blob at a class-specific location on a
//! coarse grid, plus pixel noise; labels are recoverable at high accuracy by
//! a small transformer, which gives the quantization stages a non-trivial
//! loss surface to work against.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rnd;
use crate::tensor::Tensor;
use crate::vit::{forward_image, ForwardOptions, ModelConfig, QuantPlan, ToyViT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples: usize,
    pub seed: u64,
    /// Blob radius as a fraction of image size.
    pub blob_sigma: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            samples: 1024,
            seed: 0,
            blob_sigma: 0.12,
            noise: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Front/back split at `n_first`.
    pub fn split(&self, n_first: usize) -> (Dataset, Dataset) {
        let a = Dataset {
            images: self.images[..n_first].to_vec(),
            labels: self.labels[..n_first].to_vec(),
        };
        let b = Dataset {
            images: self.images[n_first..].to_vec(),
            labels: self.labels[n_first..].to_vec(),
        };
        (a, b)
    }

    /// Seeded draw of `n` distinct samples.
    pub fn sample_without_replacement(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot draw {n} from {} samples",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = rnd::rng_from_seed(seed);
        idx.shuffle(&mut rng);
        idx.truncate(n);
        Ok(Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Class c's blob center on an evenly spaced grid over the image interior.
fn class_center(class: usize, classes: usize, size: usize) -> (f64, f64) {
    let cols = (classes as f64).sqrt().ceil() as usize;
    let rows = classes.div_ceil(cols);
    let (r, c) = (class / cols, class % cols);
    let y = (r as f64 + 0.5) / rows as f64 * size as f64;
    let x = (c as f64 + 0.5) / cols as f64 * size as f64;
    (y, x)
}

pub fn synth_dataset(model: &ModelConfig, cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes != model.classes {
        return Err(Error::Config(format!(
            "dataset classes {} != model classes {}",
            cfg.classes, model.classes
        )));
    }
    if cfg.samples == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    let size = model.image_size;
    let mut rng = rnd::rng_from_seed(cfg.seed);
    let sigma = cfg.blob_sigma * size as f64;
    let mut images = Vec::with_capacity(cfg.samples);
    let mut labels = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let class = i % cfg.classes;
        let (cy, cx) = class_center(class, cfg.classes, size);
        // small jitter keeps samples of a class distinct beyond noise
        let jy = rng.gen_range(-0.5..0.5);
        let jx = rng.gen_range(-0.5..0.5);
        let mut data = vec![0.0; size * size * model.channels];
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 + 0.5 - (cy + jy);
                let dx = x as f64 + 0.5 - (cx + jx);
                let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                for ch in 0..model.channels {
                    data[(y * size + x) * model.channels + ch] =
                        v + rnd::normal(&mut rng, cfg.noise);
                }
            }
        }
        images.push(Tensor::new(
            vec![size, size, model.channels],
            data,
        )?);
        labels.push(class);
    }
    Ok(Dataset { images, labels })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            learning_rate: 0.03,
            seed: 0,
        }
    }
}

/// Per-sample loss gradients for all weights, summed in sample order.
fn batch_gradients(
    model: &ToyViT,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(Vec<(String, Tensor)>, f64)> {
    let per: Vec<Result<(Vec<(String, Tensor)>, f64)>> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &label)| {
            let mut trace = forward_image(model, img, ForwardOptions::default())?;
            let loss = trace.graph.cross_entropy(trace.logits, label)?;
            let loss_val = trace.graph.value(loss).data()[0];
            let grads = trace.graph.backward(loss, &Tensor::scalar(1.0))?;
            let out = trace
                .weight_vars
                .iter()
                .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
                .collect();
            Ok((out, loss_val))
        })
        .collect();
    let mut acc: Vec<(String, Tensor)> = Vec::new();
    let mut total_loss = 0.0;
    for res in per {
        let (grads, loss) = res?;
        total_loss += loss;
        if acc.is_empty() {
            acc = grads;
        } else {
            for ((_, a), (_, g)) in acc.iter_mut().zip(grads.iter()) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
        }
    }
    Ok((acc, total_loss))
}

/// Plain minibatch SGD on cross-entropy. Returns per-epoch mean training
/// loss; batch order is a seeded shuffle, so runs are reproducible.
pub fn train(model: &mut ToyViT, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = rnd::rng_from_seed(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<Tensor> = chunk.iter().map(|&i| data.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (grads, loss) = batch_gradients(model, &imgs, &labels)?;
            epoch_loss += loss;
            let step = cfg.learning_rate / chunk.len() as f64;
            for (name, g) in grads {
                let w = model.weight_mut(&name);
                for (x, dy) in w.data_mut().iter_mut().zip(g.data()) {
                    *x -= step * dy;
                }
            }
        }
        losses.push(epoch_loss / data.len() as f64);
    }
    Ok(losses)
}

/// Fraction of samples whose argmax logit matches the label.
pub fn accuracy(model: &ToyViT, data: &Dataset, plan: Option<&QuantPlan>) -> Result<f64> {
    let hits: Vec<Result<usize>> = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(img, &label)| {
            let trace = forward_image(
                model,
                img,
                ForwardOptions {
                    plan,
                    ..Default::default()
                },
            )?;
            Ok((trace.predicted_class() == label) as usize)
        })
        .collect();
    let mut total = 0usize;
    for h in hits {
        total += h?;
    }
    Ok(total as f64 / data.len() as f64)
}

/// Mean cross-entropy over the set under an optional quantization plan.
pub fn mean_cross_entropy(model: &ToyViT, data: &Dataset, plan: Option<&QuantPlan>) -> Result<f64> {
    let losses: Vec<Result<f64>> = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(img, &label)| {
            let mut trace = forward_image(
                model,
                img,
                ForwardOptions {
                    plan,
                    ..Default::default()
                },
            )?;
            let loss = trace.graph.cross_entropy(trace.logits, label)?;
            Ok(trace.graph.value(loss).data()[0])
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}
