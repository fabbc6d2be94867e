//! SGD training of the detector on labelled scenes.

mod backprop;
mod loss;
mod synthetic;

pub use backprop::{forward_train, Gradients, ParamGrad, TrainPass};
pub use loss::{
    assign_targets, batch_loss_grad, bce_with_logits, iou_with_grad, yolo_loss, yolo_loss_grad, Assignment,
    LossTerms, LossWeights,
};
pub use synthetic::{generate_synthetic_dataset, generate_synthetic_with, Scene, SyntheticConfig, SHAPE_CLASSES};

use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, Runner};
use crate::graph::{Activation, ActivationKind, Layer, NetworkGraph};
use crate::tensor::{Real, Tensor};

/// Smallest λ a QCFS layer may shrink to during training.
pub const MIN_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty on convolution weights.
    pub weight_decay: f64,
    /// Cosine decay of the learning rate to 1% over the run.
    pub cosine: bool,
    pub seed: u64,
    pub activation: ActivationKind,
    pub levels: u32,
    pub loss_weights: LossWeights,
    /// Momentum of the batch norm running statistics.
    pub bn_momentum: f64,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine: true,
            seed: 0,
            activation: ActivationKind::Qcfs,
            levels: 4,
            loss_weights: LossWeights::default(),
            bn_momentum: 0.1,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("train config", msg.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        self.loss_weights.validate()?;
        self.eval.validate()
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if !self.cosine || self.epochs == 1 {
            return self.learning_rate;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.learning_rate * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// One row of the training curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub map50: f64,
    pub map5095: f64,
    pub f1_best: f64,
    pub conf_at_f1_best: f64,
}

pub fn write_training_curves(records: &[EpochRecord], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Stochastic gradient descent with momentum.
///
/// Weight decay applies to convolution weights only. QCFS thresholds are
/// trained like any other parameter and kept at least [`MIN_LAMBDA`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v ← μ·v + g; p ← p − lr·v` for every parameter.
    pub fn step<T: Real>(&mut self, net: &mut NetworkGraph<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.layers.len() != net.nodes().len() {
            return Err(Error::invalid("sgd", "gradient list does not match the network"));
        }
        if self.velocity.len() != grads.layers.len() {
            self.velocity = vec![Vec::new(); grads.layers.len()];
        }
        for (i, g) in grads.layers.iter().enumerate() {
            let mut values = g.values();
            if values.is_empty() {
                continue;
            }
            let layer = net.layer_mut(i);
            if let (Layer::Conv(c), true) = (&*layer, self.weight_decay > 0.0) {
                for (v, w) in values.iter_mut().zip(c.weights.data()) {
                    *v += self.weight_decay * w.f64();
                }
            }
            let vel = &mut self.velocity[i];
            if vel.len() != values.len() {
                *vel = vec![0.0; values.len()];
            }
            for (v, g) in vel.iter_mut().zip(&values) {
                *v = self.momentum * *v + g;
            }
            let mut k = 0;
            let mut apply = |p: &mut T| {
                *p = T::of(p.f64() - lr * vel[k]);
                k += 1;
            };
            match layer {
                Layer::Conv(c) => {
                    c.weights.data_mut().iter_mut().for_each(&mut apply);
                    c.bias.data_mut().iter_mut().for_each(&mut apply);
                }
                Layer::BatchNorm(b) => {
                    b.gamma.iter_mut().for_each(&mut apply);
                    b.beta.iter_mut().for_each(&mut apply);
                }
                Layer::Activation(Activation::Qcfs(p)) => {
                    p.lambda = (p.lambda - lr * vel[0]).max(MIN_LAMBDA);
                }
                other => {
                    return Err(Error::invalid(
                        "sgd",
                        format!("gradient supplied for parameter-free layer {}", other.kind_name()),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Blend the batch statistics of a training pass into the running
/// statistics: `r ← (1 − m)·r + m·batch`, using the unbiased batch variance.
pub fn update_running_stats<T: Real>(net: &mut NetworkGraph<T>, pass: &TrainPass<T>, momentum: f64) {
    let stats = pass.batch_statistics();
    for (i, s) in stats.into_iter().enumerate() {
        let Some((mean, var)) = s else { continue };
        let count = pass.element_count(i) as f64;
        let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        if let Layer::BatchNorm(b) = net.layer_mut(i) {
            for ch in 0..b.channels() {
                let m = &mut b.running_mean[ch];
                *m = T::of((1.0 - momentum) * m.f64() + momentum * mean[ch]);
                let v = &mut b.running_variance[ch];
                *v = T::of((1.0 - momentum) * v.f64() + momentum * var[ch] * correction);
            }
        }
    }
}

fn check_activation<T: Real>(net: &NetworkGraph<T>, cfg: &TrainConfig) -> Result<()> {
    for i in net.activation_nodes() {
        let ok = match (&net.nodes()[i].layer, cfg.activation) {
            (Layer::Activation(Activation::Qcfs(p)), ActivationKind::Qcfs) => p.levels == cfg.levels,
            (Layer::Activation(Activation::LeakyRelu { .. }), ActivationKind::LeakyRelu) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::invalid(
                "train",
                format!(
                    "activation {i} does not match the configured {} (L = {})",
                    cfg.activation.name(),
                    cfg.levels
                ),
            ));
        }
    }
    Ok(())
}

fn first_non_finite<T: Real>(net: &NetworkGraph<T>) -> Option<usize> {
    net.nodes().iter().position(|n| match &n.layer {
        Layer::Conv(c) => !(c.weights.all_finite() && c.bias.all_finite()),
        Layer::BatchNorm(b) => b
            .gamma
            .iter()
            .chain(&b.beta)
            .chain(&b.running_mean)
            .chain(&b.running_variance)
            .any(|v| !v.is_finite()),
        Layer::Activation(Activation::Qcfs(p)) => !p.lambda.is_finite(),
        _ => false,
    })
}

/// Mean loss over a batch and the parameter gradients.
pub fn loss_and_gradients<T: Real>(
    net: &NetworkGraph<T>,
    images: &Tensor<T>,
    truths: &[&[crate::bbox::GroundTruth]],
    weights: &LossWeights,
) -> Result<(LossTerms, Gradients<T>, TrainPass<T>)> {
    let pass = forward_train(net, images)?;
    let (terms, grad) = batch_loss_grad(net.detect_head(), pass.output(), truths, weights)?;
    let grads = pass.backward(net, grad)?;
    Ok((terms, grads, pass))
}

/// Train `net` in place on `train_set`, evaluating on `val_set` after every
/// epoch. `on_epoch` sees each curve row as soon as it is ready.
pub fn train(
    net: &mut NetworkGraph,
    train_set: &[Scene],
    val_set: &[Scene],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_activation(net, cfg)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("train", "training and validation sets must be non-empty"));
    }
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut sum = LossTerms::default();
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &train_set[i].image).collect();
            let truths: Vec<&[_]> = chunk.iter().map(|&i| train_set[i].objects.as_slice()).collect();
            let batch = Tensor::stack(&images)?;
            let (terms, grads, pass) = loss_and_gradients(net, &batch, &truths, &cfg.loss_weights)?;
            if !terms.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b,
                    reason: format!("loss is {}", terms.total),
                });
            }
            update_running_stats(net, &pass, cfg.bn_momentum);
            drop(pass);
            sgd.step(net, &grads, lr)?;
            if let Some(i) = first_non_finite(net) {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b,
                    reason: format!("parameters of node {i} are no longer finite"),
                });
            }
            sum.total += terms.total;
            sum.bbox += terms.bbox;
            sum.objectness += terms.objectness;
            sum.classification += terms.classification;
            batches += 1;
        }
        let k = batches as f64;
        let report = evaluate(net, val_set, Runner::Ann, &cfg.eval)?.report;
        let record = EpochRecord {
            epoch: epoch + 1,
            total_loss: sum.total / k,
            box_loss: sum.bbox / k,
            obj_loss: sum.objectness / k,
            cls_loss: sum.classification / k,
            map50: report.map50,
            map5095: report.map50_95,
            f1_best: report.best_f1,
            conf_at_f1_best: report.best_f1_confidence,
        };
        info!(
            "epoch {:>3}  loss {:.4}  mAP@.5 {:.3}  mAP@.5:.95 {:.3}",
            record.epoch, record.total_loss, record.map50, record.map5095
        );
        on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}
