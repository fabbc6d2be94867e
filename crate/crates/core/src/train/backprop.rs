//! Training-mode forward pass with cached intermediates, and the matching
//! reverse pass over the graph.

use crate::error::{Error, Result};
use crate::graph::{Activation, Layer, NetworkGraph, Source};
use crate::ops::{
    avg_pool2d, avg_pool2d_backward, batch_norm_train, batch_norm_train_backward, concat_channels,
    concat_channels_backward, conv2d, conv2d_backward, leaky_relu, leaky_relu_backward,
    max_pool2d_backward, max_pool2d_indexed, upsample_nearest, upsample_nearest_backward,
    BatchNormCache,
};
use crate::qcfs::{qcfs_forward, qcfs_layer_backward};
use crate::tensor::{Real, Tensor};

enum Cache<T: Real> {
    None,
    BatchNorm(BatchNormCache<T>),
    MaxPool(Vec<usize>),
}

/// Parameter gradient of one node.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad<T: Real = f32> {
    None,
    Conv { weights: Tensor<T>, bias: Tensor<T> },
    BatchNorm { gamma: Vec<T>, beta: Vec<T> },
    Lambda(f64),
}

impl<T: Real> ParamGrad<T> {
    /// Flattened values, for norms and comparisons.
    pub fn values(&self) -> Vec<f64> {
        match self {
            ParamGrad::None => Vec::new(),
            ParamGrad::Conv { weights, bias } => weights.data().iter().chain(bias.data()).map(|v| v.f64()).collect(),
            ParamGrad::BatchNorm { gamma, beta } => gamma.iter().chain(beta).map(|v| v.f64()).collect(),
            ParamGrad::Lambda(g) => vec![*g],
        }
    }
}

/// Gradients of every node's parameters, indexed like the graph's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real = f32> {
    pub layers: Vec<ParamGrad<T>>,
    /// Gradient with respect to the network input.
    pub input: Tensor<T>,
}

/// Intermediate values of a training-mode forward pass.
pub struct TrainPass<T: Real = f32> {
    input: Tensor<T>,
    values: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
    output: usize,
}

fn fetch<'a, T: Real>(values: &'a [Option<Tensor<T>>], input: &'a Tensor<T>, s: Source) -> &'a Tensor<T> {
    match s {
        Source::Input => input,
        Source::Layer(j) => values[j].as_ref().expect("inputs computed before use"),
    }
}

/// Forward pass with batch statistics in every batch norm layer.
pub fn forward_train<T: Real>(net: &NetworkGraph<T>, input: &Tensor<T>) -> Result<TrainPass<T>> {
    let [c, h, w] = net.input_shape();
    let (_, ic, ih, iw) = input.dims4("forward_train")?;
    if (ic, ih, iw) != (c, h, w) {
        return Err(Error::shape("forward_train", &[input.shape()[0], c, h, w], input.shape()));
    }
    let n = net.nodes().len();
    let mut values: Vec<Option<Tensor<T>>> = vec![None; n];
    let mut caches: Vec<Cache<T>> = (0..n).map(|_| Cache::None).collect();
    for &i in net.order() {
        let node = &net.nodes()[i];
        let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&s| fetch(&values, input, s)).collect();
        let x = ins[0];
        let out = match &node.layer {
            Layer::Conv(spec) => conv2d(x, spec)?,
            Layer::BatchNorm(spec) => {
                let (y, cache) = batch_norm_train(x, spec)?;
                caches[i] = Cache::BatchNorm(cache);
                y
            }
            Layer::Activation(Activation::LeakyRelu { slope }) => leaky_relu(x, T::of(*slope)),
            Layer::Activation(Activation::Qcfs(p)) => qcfs_forward(x, p),
            Layer::Activation(Activation::IfNeuron { .. }) => {
                return Err(Error::invalid("forward_train", "integrate-and-fire layers are not trainable"))
            }
            Layer::AvgPool { kernel, stride } => avg_pool2d(x, *kernel, *stride)?,
            Layer::MaxPool { kernel, stride } => {
                let (y, arg) = max_pool2d_indexed(x, *kernel, *stride)?;
                caches[i] = Cache::MaxPool(arg);
                y
            }
            Layer::Upsample { factor } => upsample_nearest(x, *factor)?,
            Layer::Concat => concat_channels(&ins)?,
            Layer::Detect(_) => x.clone(),
        };
        values[i] = Some(out);
    }
    Ok(TrainPass {
        input: input.clone(),
        values: values.into_iter().map(|v| v.expect("every node evaluated")).collect(),
        caches,
        output: net.output_node(),
    })
}

impl<T: Real> TrainPass<T> {
    /// Head tensor `(N, A·(5+C), G, G)`.
    pub fn output(&self) -> &Tensor<T> {
        &self.values[self.output]
    }

    /// Output of a node, or the network input.
    pub fn value(&self, s: Source) -> &Tensor<T> {
        match s {
            Source::Input => &self.input,
            Source::Layer(j) => &self.values[j],
        }
    }

    /// Batch mean and biased variance of every batch norm node.
    pub fn batch_statistics(&self) -> Vec<Option<(&[f64], &[f64])>> {
        self.caches
            .iter()
            .map(|c| match c {
                Cache::BatchNorm(b) => Some((b.mean.as_slice(), b.variance.as_slice())),
                _ => None,
            })
            .collect()
    }

    /// Samples per channel seen by node `i`: batch size times spatial size.
    pub(crate) fn element_count(&self, i: usize) -> usize {
        let s = self.values[i].shape();
        s[0] * s[2..].iter().product::<usize>()
    }

    /// Reverse pass from the gradient of the loss with respect to the head
    /// tensor.
    pub fn backward(&self, net: &NetworkGraph<T>, grad_output: Tensor<T>) -> Result<Gradients<T>> {
        if grad_output.shape() != self.output().shape() {
            return Err(Error::shape("backward", self.output().shape(), grad_output.shape()));
        }
        let n = net.nodes().len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut input_grad: Option<Tensor<T>> = None;
        grads[self.output] = Some(grad_output);
        let mut params: Vec<ParamGrad<T>> = (0..n).map(|_| ParamGrad::None).collect();

        let mut accumulate = |slot: Source, g: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| -> Result<()> {
            let target = match slot {
                Source::Input => &mut input_grad,
                Source::Layer(j) => &mut grads[j],
            };
            match target {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *target = Some(g);
                    Ok(())
                }
            }
        };

        for &i in net.order().iter().rev() {
            let Some(dy) = grads[i].take() else {
                // Nothing downstream depends on this node.
                continue;
            };
            let node = &net.nodes()[i];
            let x = self.value(node.inputs[0]);
            let dx = match &node.layer {
                Layer::Conv(spec) => {
                    let g = conv2d_backward(x, spec, &dy)?;
                    params[i] = ParamGrad::Conv {
                        weights: g.weights,
                        bias: g.bias,
                    };
                    g.input
                }
                Layer::BatchNorm(spec) => {
                    let Cache::BatchNorm(cache) = &self.caches[i] else {
                        unreachable!("batch norm cache recorded")
                    };
                    let g = batch_norm_train_backward(spec, cache, &dy)?;
                    params[i] = ParamGrad::BatchNorm {
                        gamma: g.gamma,
                        beta: g.beta,
                    };
                    g.input
                }
                Layer::Activation(Activation::LeakyRelu { slope }) => leaky_relu_backward(x, &dy, T::of(*slope))?,
                Layer::Activation(Activation::Qcfs(p)) => {
                    let (dz, dl) = qcfs_layer_backward(&dy, x, p)?;
                    params[i] = ParamGrad::Lambda(dl);
                    dz
                }
                Layer::Activation(Activation::IfNeuron { .. }) => unreachable!("rejected in forward_train"),
                Layer::AvgPool { kernel, stride } => avg_pool2d_backward(x.shape(), &dy, *kernel, *stride)?,
                Layer::MaxPool { .. } => {
                    let Cache::MaxPool(arg) = &self.caches[i] else {
                        unreachable!("argmax recorded")
                    };
                    max_pool2d_backward(x.shape(), arg, &dy)?
                }
                Layer::Upsample { factor } => upsample_nearest_backward(x.shape(), &dy, *factor)?,
                Layer::Concat => {
                    let counts: Vec<usize> = node.inputs.iter().map(|&s| self.value(s).shape()[1]).collect();
                    let parts = concat_channels_backward(&dy, &counts)?;
                    for (&s, g) in node.inputs.iter().zip(parts) {
                        accumulate(s, g, &mut grads)?;
                    }
                    continue;
                }
                Layer::Detect(_) => dy,
            };
            accumulate(node.inputs[0], dx, &mut grads)?;
        }
        Ok(Gradients {
            layers: params,
            input: input_grad.unwrap_or_else(|| Tensor::zeros(self.input.shape())),
        })
    }
}
