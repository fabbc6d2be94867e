use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{BatchNormSpec, ConvGeometry, ConvSpec};
use crate::qcfs::{QcfsParams, DEFAULT_LAMBDA};
use crate::tensor::Tensor;

use super::{Activation, DetectHead, Layer, NetworkGraph, Node, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    /// Leaky ReLU with max pooling: the baseline ANN.
    LeakyRelu,
    /// QCFS with average pooling: the conversion-ready ANN.
    Qcfs,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::LeakyRelu => "leaky-relu",
            ActivationKind::Qcfs => "qcfs",
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" | "leaky-relu" | "leaky_relu" => Ok(ActivationKind::LeakyRelu),
            "qcfs" => Ok(ActivationKind::Qcfs),
            _ => Err(Error::invalid("activation", format!("unknown activation {s:?}"))),
        }
    }
}

/// Anchor sizes matched to the synthetic scenes (objects 12–30 px).
pub const DEFAULT_ANCHORS: [[f32; 2]; 3] = [[13.0, 13.0], [20.0, 20.0], [28.0, 28.0]];

const LEAKY_SLOPE: f64 = 0.1;
const BN_EPS: f32 = 1e-5;

/// Knobs of the miniature detector.
///
/// Layout for a 64×64 input (`c = widths`):
///
/// ```text
/// BConv 3→c0 k3 · pool │ BConv c0→c1 k3 · pool │ BConv c1→c2 k3 · pool
/// BConv c2→c3 k3 ─────────────────────────────┐
///   BConv c3→c3/2 k1 · BConv c3/2→c3 k3 ──────┴─ concat
/// BConv 2·c3→c3 k1 · conv c3→A·(5+classes) k1 · detect (stride 8)
/// ```
///
/// Every BConv is convolution, batch norm, activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyDetectorConfig {
    pub class_count: usize,
    pub activation: ActivationKind,
    pub levels: u32,
    pub input_size: usize,
    pub widths: [usize; 4],
    pub anchors: Vec<[f32; 2]>,
    pub initial_lambda: f64,
    pub seed: u64,
}

impl TinyDetectorConfig {
    pub fn new(class_count: usize, activation: ActivationKind, levels: u32) -> Self {
        Self {
            class_count,
            activation,
            levels,
            input_size: 64,
            widths: [16, 32, 48, 64],
            anchors: DEFAULT_ANCHORS.to_vec(),
            initial_lambda: DEFAULT_LAMBDA,
            seed: 0,
        }
    }

    pub fn build(&self) -> Result<NetworkGraph> {
        if self.class_count == 0 {
            return Err(Error::invalid("build_tiny_detector", "class_count must be at least 1"));
        }
        if !self.input_size.is_multiple_of(8) || self.input_size < 16 {
            return Err(Error::invalid(
                "build_tiny_detector",
                format!("input size {} must be a multiple of 8 and at least 16", self.input_size),
            ));
        }
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            nodes: Vec::new(),
            act: match self.activation {
                ActivationKind::LeakyRelu => Activation::LeakyRelu { slope: LEAKY_SLOPE },
                ActivationKind::Qcfs => Activation::Qcfs(QcfsParams::new(self.initial_lambda, self.levels)?),
            },
        };
        let pool = |b: &mut Builder, src| match self.activation {
            ActivationKind::LeakyRelu => b.push(Layer::MaxPool { kernel: 2, stride: 2 }, vec![src]),
            ActivationKind::Qcfs => b.push(Layer::AvgPool { kernel: 2, stride: 2 }, vec![src]),
        };
        let [c0, c1, c2, c3] = self.widths;
        let x = b.bconv(Source::Input, 3, c0, 3)?;
        let x = pool(&mut b, x);
        let x = b.bconv(x, c0, c1, 3)?;
        let x = pool(&mut b, x);
        let x = b.bconv(x, c1, c2, 3)?;
        let x = pool(&mut b, x);
        let trunk = b.bconv(x, c2, c3, 3)?;
        let y = b.bconv(trunk, c3, c3 / 2, 1)?;
        let y = b.bconv(y, c3 / 2, c3, 3)?;
        let x = b.push(Layer::Concat, vec![trunk, y]);
        let x = b.bconv(x, 2 * c3, c3, 1)?;

        let head = DetectHead {
            anchors: self.anchors.clone(),
            stride: 8,
            class_count: self.class_count,
        };
        let out = head.channels();
        let mut spec = b.conv_spec(c3, out, 1, 0.1)?;
        // Objectness starts near 1%, class scores near 25%.
        for (a, _) in head.anchors.iter().enumerate() {
            let base = a * head.per_anchor();
            spec.bias.data_mut()[base + 4] = -4.5;
            for k in 0..self.class_count {
                spec.bias.data_mut()[base + 5 + k] = -1.0;
            }
        }
        let x = b.push(Layer::Conv(spec), vec![x]);
        b.push(Layer::Detect(head), vec![x]);
        NetworkGraph::new([3, self.input_size, self.input_size], b.nodes)
    }
}

struct Builder {
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    act: Activation,
}

impl Builder {
    fn push(&mut self, layer: Layer, inputs: Vec<Source>) -> Source {
        self.nodes.push(Node::new(layer, inputs));
        Source::Layer(self.nodes.len() - 1)
    }

    /// He-uniform weights scaled by `gain`, zero bias.
    fn conv_spec(&mut self, cin: usize, cout: usize, k: usize, gain: f64) -> Result<ConvSpec> {
        let fan_in = (cin * k * k) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| self.rng.random_range(-bound..bound) as f32);
        ConvSpec::new(
            ConvGeometry {
                in_channels: cin,
                out_channels: cout,
                kernel_size: k,
                stride: 1,
                padding: k / 2,
            },
            w,
            Tensor::zeros(&[cout]),
        )
    }

    fn bconv(&mut self, src: Source, cin: usize, cout: usize, k: usize) -> Result<Source> {
        let spec = self.conv_spec(cin, cout, k, 1.0)?;
        let x = self.push(Layer::Conv(spec), vec![src]);
        let x = self.push(Layer::BatchNorm(BatchNormSpec::identity(cout, BN_EPS)), vec![x]);
        Ok(self.push(Layer::Activation(self.act), vec![x]))
    }
}

/// Miniature stand-in for Tiny YOLOv7 with default widths and anchors.
pub fn build_tiny_detector(
    class_count: usize,
    levels: u32,
    activation: ActivationKind,
    seed: u64,
) -> Result<NetworkGraph> {
    TinyDetectorConfig {
        seed,
        ..TinyDetectorConfig::new(class_count, activation, levels)
    }
    .build()
}
