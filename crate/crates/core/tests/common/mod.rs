#![allow(dead_code)]

pub mod ap_oracle;

use qcfs_core::bbox::{BBox, GroundTruth};
use qcfs_core::graph::{Activation, DetectHead, Layer, NetworkGraph, Node, Source};
use qcfs_core::ops::{BatchNormSpec, ConvGeometry, ConvSpec};
use qcfs_core::train::{batch_loss_grad, forward_train, LossWeights, ParamGrad};
use qcfs_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, scale: f64, bias: f64) -> Layer<f64> {
    let g = ConvGeometry {
        in_channels: cin,
        out_channels: cout,
        kernel_size: k,
        stride: 1,
        padding: k / 2,
    };
    let w = Tensor::from_fn(&[cout, cin, k, k], |_| rng.random_range(-scale..scale));
    let b = Tensor::from_fn(&[cout], |i| {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * bias * rng.random_range(1.0..1.3)
    });
    Layer::Conv(ConvSpec::new(g, w, b).unwrap())
}

/// Batch norm whose shifts keep each channel on one side of zero, so a
/// following leaky ReLU is smooth around the check point. Channels alternate
/// sign, which exercises both slopes.
pub fn batch_norm(rng: &mut ChaCha8Rng, c: usize) -> Layer<f64> {
    let mut bn = BatchNormSpec::identity(c, 1e-5);
    for g in &mut bn.gamma {
        *g = rng.random_range(0.3..0.5);
    }
    for (i, b) in bn.beta.iter_mut().enumerate() {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        *b = sign * rng.random_range(2.0..2.5);
    }
    Layer::BatchNorm(bn)
}

/// A small BConv detector (well under 1k parameters) for 8×8 inputs:
/// conv·BN·leaky, avgpool, conv·BN·leaky, a 1×1 side branch joined by
/// concat, and a 1×1 head into a two-anchor, two-class detect layer.
pub fn gradcheck_net(seed: u64) -> NetworkGraph<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaky = Layer::Activation(Activation::LeakyRelu { slope: 0.1 });
    let l = |i: usize| Source::Layer(i);
    let nodes = vec![
        Node::new(conv(&mut rng, 3, 4, 3, 0.4, 0.1), vec![Source::Input]), // 0
        Node::new(batch_norm(&mut rng, 4), vec![l(0)]),                // 1
        Node::new(leaky.clone(), vec![l(1)]),                          // 2
        Node::new(Layer::AvgPool { kernel: 2, stride: 2 }, vec![l(2)]), // 3
        Node::new(conv(&mut rng, 4, 6, 3, 0.3, 0.1), vec![l(3)]),           // 4
        Node::new(batch_norm(&mut rng, 6), vec![l(4)]),                // 5
        Node::new(leaky.clone(), vec![l(5)]),                          // 6
        Node::new(conv(&mut rng, 6, 4, 1, 0.05, 1.5), vec![l(6)]),           // 7
        Node::new(leaky, vec![l(7)]),                                  // 8
        Node::new(Layer::Concat, vec![l(6), l(8)]),                    // 9
        Node::new(conv(&mut rng, 10, 14, 1, 0.3, 0.1), vec![l(9)]),         // 10
        Node::new(
            Layer::Detect(DetectHead {
                anchors: vec![[3.0, 3.0], [5.0, 4.0]],
                stride: 2,
                class_count: 2,
            }),
            vec![l(10)],
        ), // 11
    ];
    NetworkGraph::new([3, 8, 8], nodes).unwrap()
}

pub fn gradcheck_batch(seed: u64) -> (Tensor<f64>, Vec<Vec<GroundTruth>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    let truths = vec![
        vec![
            GroundTruth {
                class: 0,
                bbox: BBox::from_center(2.6, 3.1, 3.2, 2.7),
            },
            GroundTruth {
                class: 1,
                bbox: BBox::from_center(5.7, 6.2, 4.6, 4.1),
            },
        ],
        vec![GroundTruth {
            class: 1,
            bbox: BBox::from_center(4.4, 1.9, 3.5, 3.9),
        }],
    ];
    (images, truths)
}

pub fn batch_loss(net: &NetworkGraph<f64>, images: &Tensor<f64>, truths: &[Vec<GroundTruth>]) -> f64 {
    let refs: Vec<&[GroundTruth]> = truths.iter().map(|t| t.as_slice()).collect();
    let pass = forward_train(net, images).unwrap();
    batch_loss_grad(net.detect_head(), pass.output(), &refs, &LossWeights::default())
        .unwrap()
        .0
        .total
}

/// Smallest distance of any leaky ReLU input from the kink, and whether
/// every leaky layer sees inputs on both sides of it.
pub fn leaky_margin(net: &NetworkGraph<f64>, images: &Tensor<f64>) -> (f64, bool) {
    let mut margin = f64::INFINITY;
    let mut both = true;
    let leaky = net.activation_nodes();
    let pass = forward_train(net, images).unwrap();
    for &i in &leaky {
        let z = pass.value(net.nodes()[i].inputs[0]);
        margin = margin.min(z.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
        both &= z.data().iter().any(|&v| v > 0.0) && z.data().iter().any(|&v| v < 0.0);
    }
    (margin, both)
}

/// Outcome of comparing one group of analytic gradients against central
/// differences.
#[derive(Debug, Clone)]
pub struct GradGroup {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub failures: usize,
}

pub const FD_EPS: f64 = 1e-3;
pub const FD_RTOL: f64 = 1e-3;
/// Gradients this small are compared absolutely; their relative error is
/// dominated by rounding in the difference quotient.
pub const FD_ATOL: f64 = 1e-7;

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> GradGroup {
    let mut g = GradGroup {
        name: name.to_string(),
        checked: analytic.len(),
        max_rel: 0.0,
        failures: 0,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        if scale > FD_ATOL {
            g.max_rel = g.max_rel.max(diff / scale);
        }
        if diff > FD_RTOL * scale && diff > FD_ATOL {
            g.failures += 1;
        }
    }
    g
}

fn param_slots(layer: &mut Layer<f64>) -> Vec<&mut f64> {
    match layer {
        Layer::Conv(c) => c.weights.data_mut().iter_mut().chain(c.bias.data_mut().iter_mut()).collect(),
        Layer::BatchNorm(b) => b.gamma.iter_mut().chain(b.beta.iter_mut()).collect(),
        _ => Vec::new(),
    }
}

/// Finite-difference check of every parameter, the input image and the
/// head output, grouped by layer role.
pub fn gradient_check(seed: u64) -> Vec<GradGroup> {
    let net = gradcheck_net(seed);
    let (images, truths) = gradcheck_batch(seed + 1);
    let refs: Vec<&[GroundTruth]> = truths.iter().map(|t| t.as_slice()).collect();
    let pass = forward_train(&net, &images).unwrap();
    let (_, head_grad) = batch_loss_grad(net.detect_head(), pass.output(), &refs, &LossWeights::default()).unwrap();
    let grads = pass.backward(&net, head_grad.clone()).unwrap();

    let mut groups = Vec::new();
    let head_conv = 10;
    for (name, filter) in [
        ("conv", &(|i: usize, l: &Layer<f64>| matches!(l, Layer::Conv(_)) && i != head_conv) as &dyn Fn(usize, &Layer<f64>) -> bool),
        ("batchnorm", &|_, l: &Layer<f64>| matches!(l, Layer::BatchNorm(_))),
        ("detect-head", &|i, _| i == head_conv),
    ] {
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (i, node) in net.nodes().iter().enumerate() {
            if !filter(i, &node.layer) {
                continue;
            }
            let values = grads.layers[i].values();
            assert!(!matches!(grads.layers[i], ParamGrad::None));
            for (k, a) in values.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut nodes = net.clone().into_nodes();
                    *param_slots(&mut nodes[i].layer).remove(k) += delta;
                    let perturbed = NetworkGraph::new(net.input_shape(), nodes).unwrap();
                    batch_loss(&perturbed, &images, &truths)
                };
                analytic.push(*a);
                numeric.push((eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS));
            }
        }
        groups.push(compare(name, &analytic, &numeric));
    }

    // Input gradient: exercises the backward pass of every layer on the
    // path, including average pooling, leaky ReLU and concat.
    let mut numeric = Vec::new();
    for k in 0..images.len() {
        let eval = |delta: f64| {
            let mut x = images.clone();
            x.data_mut()[k] += delta;
            batch_loss(&net, &x, &truths)
        };
        numeric.push((eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS));
    }
    let analytic: Vec<f64> = grads.input.data().to_vec();
    groups.push(compare("input (avgpool, leaky-relu, concat chain)", &analytic, &numeric));

    // Loss with respect to the raw head tensor.
    let raw = pass.output().clone();
    let mut numeric = Vec::new();
    for k in 0..raw.len() {
        let eval = |delta: f64| {
            let mut r = raw.clone();
            r.data_mut()[k] += delta;
            batch_loss_grad(net.detect_head(), &r, &refs, &LossWeights::default())
                .unwrap()
                .0
                .total
        };
        numeric.push((eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS));
    }
    groups.push(compare("loss", head_grad.data(), &numeric));
    groups
}
