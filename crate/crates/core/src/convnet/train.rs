use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{image_to_input, Preproc};
use super::net::{sgd_step, Grads, Net, SgdState};
use super::tensor::{Scalar, Tensor};
use super::NetError;
use crate::augment::{augment_pipeline, AugmentPolicy};
use crate::dataset_store::SampleRecord;
use crate::depth_render::DepthImage;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub gamma: f64,
    /// Length of the first constant-rate step; later steps halve in length.
    pub first_step_epochs: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub policy: AugmentPolicy,
    pub preproc: Preproc,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            gamma: 0.5,
            first_step_epochs: 8,
            total_epochs: 20,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 32,
            seed: 0,
            policy: AugmentPolicy::default(),
            preproc: Preproc::Raw,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.first_step_epochs == 0 || self.total_epochs == 0 || self.batch_size == 0 {
            return bad("first_step_epochs, total_epochs and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative");
        }
        self.policy
            .validate()
            .map_err(|e| NetError::InvalidConfig(e.to_string()))
    }
}

/// `base_lr · gamma^k` with `k` the number of completed steps; step lengths
/// are `E, ⌈E/2⌉, ⌈E/4⌉, …` (never shorter than one epoch).
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let e = cfg.first_step_epochs.max(1);
    let mut boundary = 0;
    let mut k = 0;
    let mut i = 0u32;
    loop {
        let len = if i >= usize::BITS - 1 { 1 } else { e.div_ceil(1 << i) };
        if boundary + len > epoch {
            break;
        }
        boundary += len;
        k += 1;
        i += 1;
    }
    cfg.base_lr * cfg.gamma.powi(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's mini-batches.
    pub loss: f64,
    /// Accuracy of the training-time predictions within the epoch.
    pub train_acc: f64,
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,lr,loss,train_acc")?;
    for p in curve {
        writeln!(w, "{},{},{:.6},{:.6}", p.epoch, p.lr, p.loss, p.train_acc)?;
    }
    Ok(())
}

/// Samples per parallel shard. Gradients are summed shard by shard in order,
/// so results do not depend on the number of worker threads.
const SHARD: usize = 8;

struct ShardOut<T> {
    grads: Grads<T>,
    loss_sum: f64,
    correct: usize,
}

/// Trains on in-memory images with `labels[i] < net classes`.
pub fn train_images<T: Scalar>(
    net: &mut Net<T>,
    images: &[DepthImage],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<CurvePoint>, NetError> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    if images.len() != labels.len() {
        return Err(NetError::ShapeMismatch(format!("{} images, {} labels", images.len(), labels.len())));
    }
    let classes = net.num_classes();
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(NetError::LabelUnknown(format!("index {l} with {classes} classes")));
    }
    let input = net.spec.input;
    let per: usize = input.iter().product();
    let mut state = SgdState::new(net);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut curve = Vec::with_capacity(cfg.total_epochs);
    for epoch in 0..cfg.total_epochs {
        let lr = lr_schedule(epoch, cfg);
        order.sort_unstable();
        order.shuffle(&mut rng::rng_from(&[cfg.seed, epoch as u64, 0x73687566]));
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let scale = T::from_f64(1.0 / batch.len() as f64);
            let net_ref: &Net<T> = net;
            let shards: Vec<ShardOut<T>> = batch
                .par_chunks(SHARD)
                .map(|shard| {
                    let mut data = Vec::with_capacity(shard.len() * per);
                    let mut ys = Vec::with_capacity(shard.len());
                    for &i in shard {
                        let mut r = rng::rng_from(&[cfg.seed, i as u64, epoch as u64]);
                        let (img, _) = augment_pipeline(&images[i], &cfg.policy, input[2], input[1], &mut r)?;
                        data.extend(image_to_input::<T>(&img, cfg.preproc, input)?);
                        ys.push(labels[i]);
                    }
                    let x = Tensor::from_vec(&[shard.len(), input[0], input[1], input[2]], data);
                    let cache = net_ref.forward(&x, Some(&ys))?;
                    let grads = net_ref.backward_scaled(&cache, scale)?;
                    let correct = cache
                        .predictions(classes)
                        .iter()
                        .zip(&ys)
                        .filter(|(p, y)| p == y)
                        .count();
                    Ok(ShardOut {
                        grads,
                        loss_sum: Scalar::to_f64(cache.loss) * shard.len() as f64,
                        correct,
                    })
                })
                .collect::<Result<_, NetError>>()?;
            let mut iter = shards.into_iter();
            let first = iter.next().expect("non-empty batch");
            let mut grads = first.grads;
            loss_sum += first.loss_sum;
            correct += first.correct;
            for s in iter {
                grads.add_assign(&s.grads);
                loss_sum += s.loss_sum;
                correct += s.correct;
            }
            sgd_step(net, &grads, &mut state, lr, cfg.momentum, cfg.weight_decay);
        }
        let point = CurvePoint {
            epoch,
            lr,
            loss: loss_sum / images.len() as f64,
            train_acc: correct as f64 / images.len() as f64,
        };
        log::info!(
            "epoch {} lr {} loss {:.4} acc {:.4}",
            point.epoch,
            point.lr,
            point.loss,
            point.train_acc
        );
        curve.push(point);
    }
    Ok(curve)
}

/// Loads every record's image and trains; `class_map[k]` names class `k`.
pub fn train<T: Scalar>(
    net: &mut Net<T>,
    records: &[SampleRecord],
    class_map: &[String],
    cfg: &TrainConfig,
) -> Result<Vec<CurvePoint>, NetError> {
    if records.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let index: HashMap<&str, usize> = class_map
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let labels = records
        .iter()
        .map(|r| {
            index
                .get(r.class_label.as_str())
                .copied()
                .ok_or_else(|| NetError::LabelUnknown(r.class_label.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let images = records
        .par_iter()
        .map(|r| DepthImage::load(&r.path))
        .collect::<Result<Vec<_>, _>>()?;
    train_images(net, &images, &labels, cfg)
}
