use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::IfNeuronState;
use crate::ops::{
    avg_pool2d, batch_norm_infer, concat_channels, conv2d, leaky_relu, max_pool2d,
    upsample_nearest,
};
use crate::qcfs::qcfs_forward;
use crate::tensor::{Real, Tensor};

use super::{Activation, DetectionOutput, Layer, NetworkGraph, Source};

/// Bring a `(C, H, W)` or `(N, C, H, W)` image tensor into batch form and
/// check it against the network input.
fn batched<T: Real>(net: &NetworkGraph<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = net.input_shape();
    let t = match images.shape().len() {
        3 => images.clone().reshape(&[1, c, h, w]).map_err(|_| Error::shape("forward", &[c, h, w], images.shape()))?,
        _ => images.clone(),
    };
    let s = t.shape();
    if s.len() != 4 || s[1..] != [c, h, w] {
        return Err(Error::shape("forward", &[s.first().copied().unwrap_or(1), c, h, w], s));
    }
    Ok(t)
}

/// Inference-mode evaluation of every non-spiking layer kind.
pub(crate) fn apply_layer<T: Real>(layer: &Layer<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let x = inputs[0];
    match layer {
        Layer::Conv(spec) => conv2d(x, spec),
        Layer::BatchNorm(spec) => batch_norm_infer(x, spec),
        Layer::Activation(Activation::LeakyRelu { slope }) => Ok(leaky_relu(x, T::of(*slope))),
        Layer::Activation(Activation::Qcfs(p)) => Ok(qcfs_forward(x, p)),
        Layer::Activation(Activation::IfNeuron { .. }) => Err(Error::invalid(
            "forward_ann",
            "network contains integrate-and-fire layers; run it with forward_snn",
        )),
        Layer::AvgPool { kernel, stride } => avg_pool2d(x, *kernel, *stride),
        Layer::MaxPool { kernel, stride } => max_pool2d(x, *kernel, *stride),
        Layer::Upsample { factor } => upsample_nearest(x, *factor),
        Layer::Concat => concat_channels(inputs),
        Layer::Detect(_) => Ok(x.clone()),
    }
}

fn take<'a, T: Real>(values: &'a [Option<Tensor<T>>], input: &'a Tensor<T>, s: Source) -> &'a Tensor<T> {
    match s {
        Source::Input => input,
        Source::Layer(j) => values[j].as_ref().expect("inputs computed before use"),
    }
}

fn split_outputs<T: Real>(net: &NetworkGraph<T>, head: &Tensor<T>) -> Result<Vec<DetectionOutput<T>>> {
    head.unstack()
        .into_iter()
        .map(|raw| DetectionOutput::new(net.detect_head().clone(), raw))
        .collect()
}

/// Output of every node of an ANN-mode forward pass, indexed like the
/// graph's nodes.
pub fn forward_values<T: Real>(net: &NetworkGraph<T>, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let input = batched(net, images)?;
    let mut values: Vec<Option<Tensor<T>>> = vec![None; net.nodes().len()];
    for &i in net.order() {
        let node = &net.nodes()[i];
        let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&s| take(&values, &input, s)).collect();
        let out = apply_layer(&node.layer, &ins)?;
        values[i] = Some(out);
    }
    Ok(values.into_iter().map(|v| v.expect("every node evaluated")).collect())
}

/// Raw head tensor `(N, A·(5+C), G, G)` of an ANN-mode forward pass.
pub fn forward_tensor<T: Real>(net: &NetworkGraph<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let mut values = forward_values(net, images)?;
    Ok(values.swap_remove(net.output_node()))
}

/// ANN-mode forward pass; one [`DetectionOutput`] per image.
pub fn forward_ann<T: Real>(net: &NetworkGraph<T>, images: &Tensor<T>) -> Result<Vec<DetectionOutput<T>>> {
    split_outputs(net, &forward_tensor(net, images)?)
}

/// How spikes leave an integrate-and-fire layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnnMode {
    /// Binary spike maps (scaled by θ) flow through downstream layers at
    /// every timestep; the head decodes the time average of its input.
    PerStep,
    /// The layer's firing rate over all timesteps is handed downstream as a
    /// single analog tensor.
    RateAveraged,
}

impl SnnMode {
    pub fn name(self) -> &'static str {
        match self {
            SnnMode::PerStep => "per-step",
            SnnMode::RateAveraged => "rate-averaged",
        }
    }
}

impl std::str::FromStr for SnnMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(SnnMode::PerStep),
            "rate-averaged" => Ok(SnnMode::RateAveraged),
            _ => Err(Error::invalid("snn mode", format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpikes {
    pub layer: usize,
    pub spikes: u64,
    pub neurons: u64,
    pub timesteps: usize,
}

/// Spike counts per integrate-and-fire layer, an energy proxy.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeStats {
    pub layers: Vec<LayerSpikes>,
}

impl SpikeStats {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.spikes).sum()
    }

    pub fn merge(&mut self, other: &SpikeStats) {
        for o in &other.layers {
            match self.layers.iter_mut().find(|l| l.layer == o.layer) {
                Some(l) => {
                    l.spikes += o.spikes;
                    l.neurons += o.neurons;
                }
                None => self.layers.push(o.clone()),
            }
        }
    }
}

enum Signal<T: Real> {
    Static(Tensor<T>),
    Temporal(Vec<Tensor<T>>),
}

impl<T: Real> Signal<T> {
    fn at(&self, t: usize) -> &Tensor<T> {
        match self {
            Signal::Static(x) => x,
            Signal::Temporal(xs) => &xs[t],
        }
    }

    fn mean(&self) -> Tensor<T> {
        match self {
            Signal::Static(x) => x.clone(),
            Signal::Temporal(xs) => {
                let n = xs.len() as f64;
                let mut acc = vec![0.0f64; xs[0].len()];
                for x in xs {
                    for (a, v) in acc.iter_mut().zip(x.data()) {
                        *a += v.f64();
                    }
                }
                Tensor::new(xs[0].shape().to_vec(), acc.into_iter().map(|a| T::of(a / n)).collect())
                    .expect("shape preserved")
            }
        }
    }
}

/// Timestepped forward pass with the image presented identically at every
/// step.
///
/// Layers upstream of the first integrate-and-fire layer are evaluated once.
/// In [`SnnMode::PerStep`] everything downstream of a spiking layer runs
/// once per timestep on binary inputs; in [`SnnMode::RateAveraged`] spiking
/// layers emit their firing rate and downstream layers run once.
pub fn forward_snn<T: Real>(
    net: &NetworkGraph<T>,
    images: &Tensor<T>,
    timesteps: usize,
    mode: SnnMode,
) -> Result<(Vec<DetectionOutput<T>>, SpikeStats)> {
    if timesteps == 0 {
        return Err(Error::invalid("forward_snn", "T must be at least 1"));
    }
    if !net.has_if_neurons() {
        return Err(Error::invalid(
            "forward_snn",
            "network has no integrate-and-fire layers; run it with forward_ann",
        ));
    }
    let input = Signal::Static(batched(net, images)?);
    let mut values: Vec<Option<Signal<T>>> = (0..net.nodes().len()).map(|_| None).collect();
    let mut stats = SpikeStats::default();
    for &i in net.order() {
        let node = &net.nodes()[i];
        let ins: Vec<&Signal<T>> = node
            .inputs
            .iter()
            .map(|&s| match s {
                Source::Input => &input,
                Source::Layer(j) => values[j].as_ref().expect("inputs computed before use"),
            })
            .collect();
        let out = match &node.layer {
            Layer::Activation(Activation::IfNeuron { theta }) => {
                let (signal, spikes, neurons) = run_if_layer(ins[0], *theta, timesteps, mode)?;
                stats.layers.push(LayerSpikes {
                    layer: i,
                    spikes,
                    neurons,
                    timesteps,
                });
                signal
            }
            Layer::Detect(_) => Signal::Static(ins[0].mean()),
            layer => {
                if ins.iter().all(|s| matches!(s, Signal::Static(_))) {
                    let xs: Vec<&Tensor<T>> = ins.iter().map(|s| s.at(0)).collect();
                    Signal::Static(apply_layer(layer, &xs)?)
                } else {
                    let steps = (0..timesteps)
                        .map(|t| {
                            let xs: Vec<&Tensor<T>> = ins.iter().map(|s| s.at(t)).collect();
                            apply_layer(layer, &xs)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Signal::Temporal(steps)
                }
            }
        };
        values[i] = Some(out);
    }
    let head = match values[net.output_node()].take() {
        Some(Signal::Static(t)) => t,
        _ => unreachable!("detect head output is static"),
    };
    Ok((split_outputs(net, &head)?, stats))
}

fn run_if_layer<T: Real>(
    input: &Signal<T>,
    theta: f64,
    timesteps: usize,
    mode: SnnMode,
) -> Result<(Signal<T>, u64, u64)> {
    let shape = input.at(0).shape().to_vec();
    let mut state = IfNeuronState::new(&shape, theta)?;
    let neurons = state.potential().len() as u64;
    let mut total = 0u64;
    match mode {
        SnnMode::RateAveraged => {
            let x = match input {
                Signal::Static(x) => x.clone(),
                Signal::Temporal(_) => input.mean(),
            };
            let mut counts = vec![0u32; x.len()];
            let mut spikes = vec![T::zero(); x.len()];
            for _ in 0..timesteps {
                total += state.step_into(&x, &mut spikes)? as u64;
                for (c, s) in counts.iter_mut().zip(&spikes) {
                    if *s != T::zero() {
                        *c += 1;
                    }
                }
            }
            let t = timesteps as f64;
            let rate = counts.into_iter().map(|c| T::of(theta * c as f64 / t)).collect();
            Ok((Signal::Static(Tensor::new(shape, rate)?), total, neurons))
        }
        SnnMode::PerStep => {
            let mut steps = Vec::with_capacity(timesteps);
            for t in 0..timesteps {
                let mut spikes = Tensor::zeros(&shape);
                total += state.step_into(input.at(t), spikes.data_mut())? as u64;
                let th = T::of(theta);
                for v in spikes.data_mut() {
                    *v *= th;
                }
                steps.push(spikes);
            }
            Ok((Signal::Temporal(steps), total, neurons))
        }
    }
}
