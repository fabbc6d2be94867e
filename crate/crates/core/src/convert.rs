//! ANN to SNN surgery and conversion-error measurement.
//!
//! [`convert`] swaps selected QCFS activations for integrate-and-fire layers
//! whose threshold is the trained λ, folding batch norm into the preceding
//! convolutions first. [`conversion_error_empirical`] samples the per-neuron
//! error `ê = rate − h(z)` under constant drive.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, Runner};
use crate::graph::{forward_values, Activation, Layer, NetworkGraph, Node, SnnMode, Source};
use crate::neuron::constant_drive_spike_count;
use crate::ops::fold_batch_norm;
use crate::par;
use crate::qcfs::QcfsParams;
use crate::tensor::{Real, Tensor};
use crate::train::Scene;

/// Which activation layers a surgery replaces. Explicit indices count
/// activation layers in execution order, starting at 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    FirstOnly,
    LastOnly,
    All,
    Indices(Vec<usize>),
}

impl Selection {
    /// Activation ordinals picked out of `count` activation layers.
    pub fn resolve(&self, count: usize) -> Result<Vec<usize>> {
        if count == 0 {
            return Err(Error::Surgery("network has no activation layers".into()));
        }
        let picked = match self {
            Selection::FirstOnly => vec![0],
            Selection::LastOnly => vec![count - 1],
            Selection::All => (0..count).collect(),
            Selection::Indices(ix) => {
                let mut ix = ix.clone();
                ix.sort_unstable();
                ix.dedup();
                if let Some(&bad) = ix.iter().find(|&&i| i >= count) {
                    return Err(Error::Surgery(format!(
                        "activation index {bad} out of range; the network has {count}"
                    )));
                }
                ix
            }
        };
        if picked.is_empty() {
            return Err(Error::Surgery("selection matches no layer".into()));
        }
        Ok(picked)
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::FirstOnly => f.write_str("first-only"),
            Selection::LastOnly => f.write_str("last-only"),
            Selection::All => f.write_str("all"),
            Selection::Indices(ix) => {
                let parts: Vec<String> = ix.iter().map(|i| i.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for Selection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "first-only" | "first" => Ok(Selection::FirstOnly),
            "last-only" | "last" => Ok(Selection::LastOnly),
            "all" => Ok(Selection::All),
            list => list
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Selection::Indices)
                .map_err(|_| {
                    Error::invalid(
                        "selection",
                        format!("expected first-only, last-only, all or a comma list of indices, got {s:?}"),
                    )
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryPlan {
    pub target: Selection,
    pub timesteps: usize,
    pub mode: SnnMode,
}

impl SurgeryPlan {
    pub fn new(target: Selection, timesteps: usize, mode: SnnMode) -> Self {
        Self {
            target,
            timesteps,
            mode,
        }
    }

    pub fn runner(&self) -> Runner {
        Runner::Snn {
            timesteps: self.timesteps,
            mode: self.mode,
        }
    }
}

/// Fold every batch norm that directly follows a convolution into that
/// convolution and drop the batch norm node. A convolution whose output
/// feeds anything besides the batch norm is left alone.
pub fn fold_batch_norms<T: Real>(net: &NetworkGraph<T>) -> Result<NetworkGraph<T>> {
    let nodes = net.nodes();
    let mut consumers = vec![0usize; nodes.len()];
    for node in nodes {
        for s in &node.inputs {
            if let Source::Layer(j) = s {
                consumers[*j] += 1;
            }
        }
    }
    // redirect[i] = node that takes over i's output.
    let mut redirect: Vec<usize> = (0..nodes.len()).collect();
    let mut layers: Vec<Option<Layer<T>>> = nodes.iter().map(|n| Some(n.layer.clone())).collect();
    for (i, node) in nodes.iter().enumerate() {
        let (Layer::BatchNorm(bn), [Source::Layer(j)]) = (&node.layer, node.inputs.as_slice()) else {
            continue;
        };
        let Layer::Conv(conv) = &nodes[*j].layer else {
            continue;
        };
        if consumers[*j] != 1 {
            continue;
        }
        layers[*j] = Some(Layer::Conv(fold_batch_norm(conv, bn)?));
        layers[i] = None;
        redirect[i] = *j;
    }
    let mut new_index = vec![usize::MAX; nodes.len()];
    let mut next = 0;
    for (i, l) in layers.iter().enumerate() {
        if l.is_some() {
            new_index[i] = next;
            next += 1;
        }
    }
    let remap = |s: Source| match s {
        Source::Input => Source::Input,
        Source::Layer(j) => Source::Layer(new_index[redirect[j]]),
    };
    let out: Vec<Node<T>> = layers
        .into_iter()
        .zip(nodes)
        .filter_map(|(l, n)| l.map(|l| Node::new(l, n.inputs.iter().map(|&s| remap(s)).collect())))
        .collect();
    NetworkGraph::new(net.input_shape(), out)
}

/// Replace the selected QCFS activations with integrate-and-fire layers
/// (`θ = λ`), after folding batch norm into the convolutions.
///
/// Every selected activation must be QCFS; converting a converted network
/// with the same plan therefore fails.
pub fn convert<T: Real>(net: &NetworkGraph<T>, plan: &SurgeryPlan) -> Result<NetworkGraph<T>> {
    if plan.timesteps == 0 {
        return Err(Error::Surgery("T must be at least 1".into()));
    }
    let acts = net.activation_nodes();
    let picked = plan.target.resolve(acts.len())?;
    let mut nodes = net.clone().into_nodes();
    for k in picked {
        let i = acts[k];
        let theta = match &nodes[i].layer {
            Layer::Activation(Activation::Qcfs(p)) => p.lambda,
            other => {
                let name = match other {
                    Layer::Activation(a) => a.name(),
                    l => l.kind_name(),
                };
                return Err(Error::Surgery(format!(
                    "activation {k} (node {i}) is {name}, not qcfs"
                )));
            }
        };
        nodes[i].layer = Layer::Activation(Activation::IfNeuron { theta });
    }
    fold_batch_norms(&NetworkGraph::new(net.input_shape(), nodes)?)
}

/// Sample statistics of the conversion error `ê`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub timesteps: usize,
    pub levels: u32,
    pub phi: f64,
    pub lambda: f64,
    pub theta: f64,
    pub n: u64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max_abs: f64,
}

impl ConversionReport {
    /// Standard error of the mean, `std/√n`.
    pub fn standard_error(&self) -> f64 {
        self.std / (self.n as f64).sqrt()
    }

    /// Whether `|mean| ≤ k·std/√n`.
    pub fn mean_within(&self, k: f64) -> bool {
        self.mean.abs() <= k * self.standard_error()
    }
}

/// Running count, mean, sum of squared deviations and max magnitude.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorMoments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
    pub max_abs: f64,
}

impl ErrorMoments {
    pub fn push(&mut self, e: f64) {
        self.n += 1;
        let d = e - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (e - self.mean);
        self.max_abs = self.max_abs.max(e.abs());
    }

    /// Pairwise combination of two partial results.
    pub fn merge(&self, other: &Self) -> Self {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let (na, nb) = (self.n as f64, other.n as f64);
        Self {
            n,
            mean: self.mean + d * nb / n as f64,
            m2: self.m2 + other.m2 + d * d * na * nb / n as f64,
            max_abs: self.max_abs.max(other.max_abs),
        }
    }

    pub fn std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).max(0.0).sqrt()
        }
    }
}

/// Conversion error of one neuron under constant drive `z`.
#[inline]
pub fn conversion_error(z: f64, p: &QcfsParams, theta: f64, timesteps: usize) -> f64 {
    let rate = theta * constant_drive_spike_count(z, theta, timesteps) as f64 / timesteps as f64;
    rate - p.eval(z)
}

fn check_setup(p: &QcfsParams, theta: f64, timesteps: usize, range: (f64, f64)) -> Result<()> {
    p.validate()?;
    if theta != p.lambda {
        return Err(Error::invalid(
            "conversion_error",
            format!("threshold {theta} must equal lambda {}", p.lambda),
        ));
    }
    if timesteps == 0 {
        return Err(Error::invalid("conversion_error", "T must be at least 1"));
    }
    if !(range.0.is_finite() && range.1.is_finite() && range.0 < range.1) {
        return Err(Error::invalid("conversion_error", format!("bad sampling range {range:?}")));
    }
    Ok(())
}

fn report(p: &QcfsParams, theta: f64, timesteps: usize, m: ErrorMoments) -> ConversionReport {
    ConversionReport {
        timesteps,
        levels: p.levels,
        phi: p.phi,
        lambda: p.lambda,
        theta,
        n: m.n,
        mean: m.mean,
        std: m.std(),
        max_abs: m.max_abs,
    }
}

/// Samples per RNG stream in the Monte Carlo analyzer.
pub const SAMPLE_CHUNK: u64 = 1 << 16;

/// The default sampling range `[−λ, 2λ]`.
pub fn default_range(lambda: f64) -> (f64, f64) {
    (-lambda, 2.0 * lambda)
}

/// Monte Carlo estimate of the conversion error with `z ~ U[range)`.
///
/// Samples are drawn in fixed-size chunks, each from its own ChaCha8 stream
/// of `seed`, and chunk moments are merged in chunk order. The result does
/// not depend on the thread count.
pub fn conversion_error_empirical(
    p: &QcfsParams,
    theta: f64,
    timesteps: usize,
    n: u64,
    range: (f64, f64),
    seed: u64,
) -> Result<ConversionReport> {
    check_setup(p, theta, timesteps, range)?;
    if n == 0 {
        return Err(Error::invalid("conversion_error", "N must be at least 1"));
    }
    let chunks = n.div_ceil(SAMPLE_CHUNK) as usize;
    let parts = par::map_range(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let count = SAMPLE_CHUNK.min(n - c as u64 * SAMPLE_CHUNK);
        let mut m = ErrorMoments::default();
        for _ in 0..count {
            let z = rng.random_range(range.0..range.1);
            m.push(conversion_error(z, p, theta, timesteps));
        }
        m
    });
    let total = parts.iter().fold(ErrorMoments::default(), |a, b| a.merge(b));
    Ok(report(p, theta, timesteps, total))
}

/// Deterministic midpoint-rule integration of the conversion error over
/// `points` evenly spaced cells of `range`.
pub fn conversion_error_grid(
    p: &QcfsParams,
    theta: f64,
    timesteps: usize,
    points: usize,
    range: (f64, f64),
) -> Result<ConversionReport> {
    check_setup(p, theta, timesteps, range)?;
    if points == 0 {
        return Err(Error::invalid("conversion_error", "grid needs at least one point"));
    }
    let width = (range.1 - range.0) / points as f64;
    let mut m = ErrorMoments::default();
    for k in 0..points {
        let z = range.0 + (k as f64 + 0.5) * width;
        m.push(conversion_error(z, p, theta, timesteps));
    }
    Ok(report(p, theta, timesteps, m))
}

/// One row of a layer-surgery experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryRow {
    pub plan: String,
    pub mode: String,
    #[serde(rename = "T")]
    pub timesteps: usize,
    #[serde(rename = "L")]
    pub levels: u32,
    pub phi: f64,
    pub lambda: f64,
    pub map50: f64,
    /// Conversion error of the replaced neurons on the evaluation images.
    pub mean_err: f64,
    pub std_err: f64,
    pub max_err: f64,
    pub n: u64,
}

/// Conversion error of every neuron of the selected activations over the
/// inputs they receive in an ANN pass of `images`.
pub fn layer_conversion_error(
    net: &NetworkGraph,
    images: &[&Tensor],
    target: &Selection,
    timesteps: usize,
    batch_size: usize,
) -> Result<ErrorMoments> {
    let acts = net.activation_nodes();
    let picked = target.resolve(acts.len())?;
    let mut params = Vec::new();
    for &k in &picked {
        match &net.nodes()[acts[k]].layer {
            Layer::Activation(Activation::Qcfs(p)) => params.push((acts[k], *p)),
            _ => return Err(Error::Surgery(format!("activation {k} is not qcfs"))),
        }
    }
    let mut total = ErrorMoments::default();
    for chunk in images.chunks(batch_size.max(1)) {
        let values = forward_values(net, &Tensor::stack(chunk)?)?;
        for (i, p) in &params {
            let z = match net.nodes()[*i].inputs[0] {
                Source::Input => Tensor::stack(chunk)?,
                Source::Layer(j) => values[j].clone(),
            };
            let mut m = ErrorMoments::default();
            for v in z.data() {
                m.push(conversion_error(v.f64(), p, p.lambda, timesteps));
            }
            total = total.merge(&m);
        }
    }
    Ok(total)
}

/// Convert `net` under every plan in {first-only, last-only} ×
/// {per-step, rate-averaged} × `timesteps` and evaluate each result.
pub fn layer_surgery_experiment(
    net: &NetworkGraph,
    scenes: &[Scene],
    timesteps: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<SurgeryRow>> {
    if scenes.is_empty() {
        return Err(Error::invalid("surgery experiment", "no scenes to evaluate"));
    }
    if timesteps.is_empty() {
        return Err(Error::invalid("surgery experiment", "no timestep values"));
    }
    let images: Vec<&Tensor> = scenes.iter().map(|s| &s.image).collect();
    let acts = net.activation_nodes();
    let mut rows = Vec::new();
    for target in [Selection::FirstOnly, Selection::LastOnly] {
        let k = target.resolve(acts.len())?[0];
        let p = match &net.nodes()[acts[k]].layer {
            Layer::Activation(Activation::Qcfs(p)) => *p,
            _ => return Err(Error::Surgery(format!("activation {k} is not qcfs"))),
        };
        for mode in [SnnMode::PerStep, SnnMode::RateAveraged] {
            for &t in timesteps {
                let plan = SurgeryPlan::new(target.clone(), t, mode);
                let snn = convert(net, &plan)?;
                let eval = evaluate(&snn, scenes, plan.runner(), cfg)?;
                let err = layer_conversion_error(net, &images, &target, t, cfg.batch_size)?;
                log::info!(
                    "{target} {} T={t}: mAP@.5 {:.4}, mean error {:.3e}",
                    mode.name(),
                    eval.report.map50,
                    err.mean
                );
                rows.push(SurgeryRow {
                    plan: target.to_string(),
                    mode: mode.name().to_string(),
                    timesteps: t,
                    levels: p.levels,
                    phi: p.phi,
                    lambda: p.lambda,
                    map50: eval.report.map50,
                    mean_err: err.mean,
                    std_err: err.std(),
                    max_err: err.max_abs,
                    n: err.n,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_surgery_csv(rows: &[SurgeryRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
