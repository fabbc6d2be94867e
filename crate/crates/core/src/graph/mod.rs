//! Layer graphs for small YOLO-style detectors.
//!
//! A [`NetworkGraph`] is a list of nodes, each naming its input edges. The
//! graph is validated on construction: edges must exist, the graph must be
//! acyclic, and exactly one terminal detect head must be present. Execution
//! follows a deterministic topological order.

mod build;
mod detect;
pub mod format;
mod forward;

pub use build::{build_tiny_detector, ActivationKind, TinyDetectorConfig};
pub use detect::{decode_detections, nms, CellPrediction, DetectHead, Detection, DetectionOutput};
pub use forward::{forward_ann, forward_snn, forward_tensor, forward_values, LayerSpikes, SnnMode, SpikeStats};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{BatchNormSpec, ConvSpec};
use crate::qcfs::QcfsParams;
use crate::tensor::Real;

/// Edge into a node: the network input or another node's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Qcfs(QcfsParams),
    IfNeuron { theta: f64 },
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::LeakyRelu { .. } => "leaky-relu",
            Activation::Qcfs(_) => "qcfs",
            Activation::IfNeuron { .. } => "if-neuron",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Real = f32> {
    Conv(ConvSpec<T>),
    BatchNorm(BatchNormSpec<T>),
    Activation(Activation),
    AvgPool { kernel: usize, stride: usize },
    MaxPool { kernel: usize, stride: usize },
    Upsample { factor: usize },
    Concat,
    Detect(DetectHead),
}

impl<T: Real> Layer<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Activation(_) => "activation",
            Layer::AvgPool { .. } => "avgpool",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Upsample { .. } => "upsample-nearest",
            Layer::Concat => "concat",
            Layer::Detect(_) => "detect-head",
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Conv(c) => Layer::Conv(c.cast()),
            Layer::BatchNorm(b) => Layer::BatchNorm(b.cast()),
            Layer::Activation(a) => Layer::Activation(*a),
            Layer::AvgPool { kernel, stride } => Layer::AvgPool {
                kernel: *kernel,
                stride: *stride,
            },
            Layer::MaxPool { kernel, stride } => Layer::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            Layer::Upsample { factor } => Layer::Upsample { factor: *factor },
            Layer::Concat => Layer::Concat,
            Layer::Detect(d) => Layer::Detect(d.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T: Real = f32> {
    pub layer: Layer<T>,
    pub inputs: Vec<Source>,
}

impl<T: Real> Node<T> {
    pub fn new(layer: Layer<T>, inputs: Vec<Source>) -> Self {
        Self { layer, inputs }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph<T: Real = f32> {
    input_shape: [usize; 3],
    nodes: Vec<Node<T>>,
    order: Vec<usize>,
    shapes: Vec<[usize; 3]>,
    output: usize,
}

impl<T: Real> NetworkGraph<T> {
    /// Validate and index a graph. `input_shape` is `(C, H, W)`.
    pub fn new(input_shape: [usize; 3], nodes: Vec<Node<T>>) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::Graph(format!("empty input shape {input_shape:?}")));
        }
        let order = topological_order(&nodes)?;
        let mut detect = None;
        let mut consumes_input = false;
        for (i, node) in nodes.iter().enumerate() {
            let arity_ok = match node.layer {
                Layer::Concat => node.inputs.len() >= 2,
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Graph(format!(
                    "layer {i} ({}) has {} inputs",
                    node.layer.kind_name(),
                    node.inputs.len()
                )));
            }
            consumes_input |= node.inputs.contains(&Source::Input);
            if let Layer::Detect(_) = node.layer {
                if detect.replace(i).is_some() {
                    return Err(Error::Graph("more than one detect head".into()));
                }
            }
            if let Layer::Activation(a) = &node.layer {
                validate_activation(i, a)?;
            }
        }
        let output = detect.ok_or_else(|| Error::Graph("no detect head".into()))?;
        if nodes.iter().any(|n| n.inputs.contains(&Source::Layer(output))) {
            return Err(Error::Graph("detect head must be terminal".into()));
        }
        if !consumes_input {
            return Err(Error::Graph("no layer reads the network input".into()));
        }
        let mut graph = Self {
            input_shape,
            nodes,
            order,
            shapes: Vec::new(),
            output,
        };
        graph.shapes = graph.infer_shapes()?;
        Ok(graph)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn into_nodes(self) -> Vec<Node<T>> {
        self.nodes
    }

    /// Mutable access to a layer's parameters. Structural edits must go
    /// through [`NetworkGraph::new`].
    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut Layer<T> {
        &mut self.nodes[i].layer
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Output shape `(C, H, W)` of node `i`.
    pub fn output_shape(&self, i: usize) -> [usize; 3] {
        self.shapes[i]
    }

    pub fn output_node(&self) -> usize {
        self.output
    }

    pub fn detect_head(&self) -> &DetectHead {
        match &self.nodes[self.output].layer {
            Layer::Detect(d) => d,
            _ => unreachable!("output node is a detect head"),
        }
    }

    pub fn class_count(&self) -> usize {
        self.detect_head().class_count
    }

    /// Activation nodes in execution order.
    pub fn activation_nodes(&self) -> Vec<usize> {
        self.order
            .iter()
            .copied()
            .filter(|&i| matches!(self.nodes[i].layer, Layer::Activation(_)))
            .collect()
    }

    pub fn has_if_neurons(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n.layer, Layer::Activation(Activation::IfNeuron { .. })))
    }

    pub fn parameter_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.layer {
                Layer::Conv(c) => c.weights.len() + c.bias.len(),
                Layer::BatchNorm(b) => 2 * b.channels(),
                Layer::Activation(Activation::Qcfs(_)) => 1,
                _ => 0,
            })
            .sum()
    }

    pub fn cast<U: Real>(&self) -> NetworkGraph<U> {
        NetworkGraph {
            input_shape: self.input_shape,
            nodes: self
                .nodes
                .iter()
                .map(|n| Node::new(n.layer.cast(), n.inputs.clone()))
                .collect(),
            order: self.order.clone(),
            shapes: self.shapes.clone(),
            output: self.output,
        }
    }

    fn infer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes: Vec<Option<[usize; 3]>> = vec![None; self.nodes.len()];
        for &i in &self.order {
            let node = &self.nodes[i];
            let ins: Vec<[usize; 3]> = node
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Input => self.input_shape,
                    Source::Layer(j) => shapes[*j].expect("topological order"),
                })
                .collect();
            let [c, h, w] = ins[0];
            let err = |msg: String| Error::Graph(format!("layer {i} ({}): {msg}", node.layer.kind_name()));
            let out = match &node.layer {
                Layer::Conv(spec) => {
                    if spec.in_channels != c {
                        return Err(err(format!("expects {} channels, input has {c}", spec.in_channels)));
                    }
                    let (oh, ow) = spec.output_hw(h, w).map_err(|e| err(e.to_string()))?;
                    [spec.out_channels, oh, ow]
                }
                Layer::BatchNorm(bn) => {
                    bn.validate().map_err(|e| err(e.to_string()))?;
                    if bn.channels() != c {
                        return Err(err(format!("has {} channels, input has {c}", bn.channels())));
                    }
                    [c, h, w]
                }
                Layer::Activation(_) => [c, h, w],
                Layer::AvgPool { kernel, stride } | Layer::MaxPool { kernel, stride } => {
                    if *kernel == 0 || *stride == 0 || h < *kernel || w < *kernel {
                        return Err(err(format!("window {kernel}/{stride} does not fit {h}x{w}")));
                    }
                    [c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                Layer::Upsample { factor } => {
                    if *factor == 0 {
                        return Err(err("zero factor".into()));
                    }
                    [c, h * factor, w * factor]
                }
                Layer::Concat => {
                    if ins.iter().any(|s| s[1] != h || s[2] != w) {
                        return Err(err(format!("spatial dims differ: {ins:?}")));
                    }
                    [ins.iter().map(|s| s[0]).sum(), h, w]
                }
                Layer::Detect(head) => {
                    if head.anchors.is_empty() || head.class_count == 0 || head.stride == 0 {
                        return Err(err("empty anchor set, class count or stride".into()));
                    }
                    if c != head.channels() {
                        return Err(err(format!("expects {} channels, input has {c}", head.channels())));
                    }
                    [c, h, w]
                }
            };
            shapes[i] = Some(out);
        }
        Ok(shapes.into_iter().map(|s| s.expect("all nodes ordered")).collect())
    }
}

fn validate_activation(i: usize, a: &Activation) -> Result<()> {
    let bad = |msg: String| Err(Error::Graph(format!("activation {i}: {msg}")));
    match a {
        Activation::LeakyRelu { slope } if !(0.0..1.0).contains(slope) => {
            bad(format!("slope {slope} outside [0, 1)"))
        }
        Activation::Qcfs(p) => p.validate().map_err(|e| Error::Graph(format!("activation {i}: {e}"))),
        Activation::IfNeuron { theta } if !(theta.is_finite() && *theta > 0.0) => {
            bad(format!("threshold {theta} must be positive"))
        }
        _ => Ok(()),
    }
}

/// Kahn's algorithm, always releasing the lowest-indexed ready node so the
/// order is a pure function of the graph.
fn topological_order<T: Real>(nodes: &[Node<T>]) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indegree = vec![0usize; n];
    let mut consumers = vec![Vec::new(); n];
    for (i, node) in nodes.iter().enumerate() {
        for s in &node.inputs {
            if let Source::Layer(j) = *s {
                if j >= n {
                    return Err(Error::Graph(format!("layer {i} references missing layer {j}")));
                }
                if j == i {
                    return Err(Error::Graph(format!("layer {i} references itself")));
                }
                indegree[i] += 1;
                consumers[j].push(i);
            }
        }
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != n {
        return Err(Error::Graph("graph contains a cycle".into()));
    }
    Ok(order)
}
