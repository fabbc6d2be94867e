//! Batched inference over labelled scenes and metric reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{decode_detections, forward_ann, forward_snn, Detection, NetworkGraph, SnnMode, SpikeStats};
use crate::metrics::{full_report, MetricsReport};
use crate::tensor::Tensor;
use crate::train::Scene;

/// How the network is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Runner {
    Ann,
    Snn { timesteps: usize, mode: SnnMode },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.001,
            nms_iou: 0.5,
            batch_size: 50,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid("eval", "thresholds must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("eval", "batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Per-image detections for `images`, plus spike counts for SNN runs.
pub fn detect(
    net: &NetworkGraph,
    images: &[&Tensor],
    runner: Runner,
    cfg: &EvalConfig,
) -> Result<(Vec<Vec<Detection>>, SpikeStats)> {
    cfg.validate()?;
    let mut dets = Vec::with_capacity(images.len());
    let mut stats = SpikeStats::default();
    for chunk in images.chunks(cfg.batch_size) {
        let batch = Tensor::stack(chunk)?;
        let outs = match runner {
            Runner::Ann => forward_ann(net, &batch)?,
            Runner::Snn { timesteps, mode } => {
                let (outs, s) = forward_snn(net, &batch, timesteps, mode)?;
                stats.merge(&s);
                outs
            }
        };
        dets.extend(outs.iter().map(|o| decode_detections(o, cfg.conf_threshold, cfg.nms_iou)));
    }
    Ok((dets, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub spikes: SpikeStats,
}

pub fn evaluate(net: &NetworkGraph, scenes: &[Scene], runner: Runner, cfg: &EvalConfig) -> Result<Evaluation> {
    if scenes.is_empty() {
        return Err(Error::invalid("evaluate", "no scenes to evaluate"));
    }
    let images: Vec<&Tensor> = scenes.iter().map(|s| &s.image).collect();
    let (dets, spikes) = detect(net, &images, runner, cfg)?;
    let truths: Vec<Vec<_>> = scenes.iter().map(|s| s.objects.clone()).collect();
    Ok(Evaluation {
        report: full_report(&dets, &truths, net.class_count()),
        spikes,
    })
}
