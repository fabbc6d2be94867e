use qcfs_core::convert::{convert, Selection, SurgeryPlan};
use qcfs_core::graph::{
    forward_ann, forward_snn, forward_tensor, Activation, ActivationKind, DetectHead, Layer, NetworkGraph, Node,
    SnnMode, Source, TinyDetectorConfig,
};
use qcfs_core::ops::{
    avg_pool2d, batch_norm_infer, conv2d, conv2d_direct, leaky_relu, max_pool2d, ConvGeometry, ConvSpec,
};
use qcfs_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, 64, 64], |_| rng.random_range(0.0..1.0f32))
}

/// Tiny detector with random batch norm statistics and the given λ.
fn detector(kind: ActivationKind, levels: u32, lambda: f64, seed: u64) -> NetworkGraph {
    let net = TinyDetectorConfig {
        seed,
        initial_lambda: lambda,
        ..TinyDetectorConfig::new(3, kind, levels)
    }
    .build()
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut nodes = net.clone().into_nodes();
    for node in &mut nodes {
        if let Layer::BatchNorm(bn) = &mut node.layer {
            for c in 0..bn.channels() {
                bn.gamma[c] = rng.random_range(0.5..1.5);
                bn.beta[c] = rng.random_range(0.0..1.0);
                bn.running_mean[c] = rng.random_range(-0.3..0.3);
                bn.running_variance[c] = rng.random_range(0.2..1.0);
            }
        }
    }
    NetworkGraph::new(net.input_shape(), nodes).unwrap()
}

#[test]
fn zero_weights_give_half_objectness() {
    for kind in [ActivationKind::LeakyRelu, ActivationKind::Qcfs] {
        let mut nodes = TinyDetectorConfig::new(3, kind, 4).build().unwrap().into_nodes();
        for node in &mut nodes {
            if let Layer::Conv(c) = &mut node.layer {
                c.weights.data_mut().fill(0.0);
                c.bias.data_mut().fill(0.0);
            }
        }
        let net = NetworkGraph::new([3, 64, 64], nodes).unwrap();
        let outs = forward_ann(&net, &image(1, 2)).unwrap();
        assert_eq!(outs.len(), 2);
        for out in &outs {
            for cell in out.cells() {
                assert_eq!(cell.objectness, 0.5);
            }
        }
    }
}

fn direct_conv(x: &[f32], cin: usize, h: usize, w: usize, weights: &[f32], bias: &[f32], k: usize) -> Vec<f32> {
    let cout = bias.len();
    let pad = (k / 2) as isize;
    let mut out = vec![0.0f32; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[o] as f64;
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = weights[((o * cin + c) * k + ky) * k + kx] as f64;
                            acc += wv * x[(c * h + iy as usize) * w + ix as usize] as f64;
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc as f32;
            }
        }
    }
    out
}

#[test]
fn toy_net_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let geometry = |cin, cout, k| ConvGeometry {
        in_channels: cin,
        out_channels: cout,
        kernel_size: k,
        stride: 1,
        padding: k / 2,
    };
    let w1: Vec<f32> = (0..2 * 3 * 9).map(|_| rng.random_range(-0.5..0.5)).collect();
    let b1: Vec<f32> = vec![0.1, -0.2];
    let w2: Vec<f32> = (0..6 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b2: Vec<f32> = (0..6).map(|i| i as f32 * 0.05).collect();
    let conv1 = ConvSpec::new(geometry(3, 2, 3), Tensor::new(vec![2, 3, 3, 3], w1.clone()).unwrap(), Tensor::new(vec![2], b1.clone()).unwrap()).unwrap();
    let conv2 = ConvSpec::new(geometry(2, 6, 1), Tensor::new(vec![6, 2, 1, 1], w2.clone()).unwrap(), Tensor::new(vec![6], b2.clone()).unwrap()).unwrap();
    let nodes = vec![
        Node::new(Layer::Conv(conv1), vec![Source::Input]),
        Node::new(Layer::Activation(Activation::LeakyRelu { slope: 0.1 }), vec![Source::Layer(0)]),
        Node::new(Layer::Conv(conv2), vec![Source::Layer(1)]),
        Node::new(
            Layer::Detect(DetectHead {
                anchors: vec![[2.0, 2.0]],
                stride: 1,
                class_count: 1,
            }),
            vec![Source::Layer(2)],
        ),
    ];
    let net = NetworkGraph::new([3, 5, 5], nodes).unwrap();
    let x: Vec<f32> = (0..75).map(|i| ((i * 13) % 17) as f32 / 17.0 - 0.4).collect();
    let got = forward_tensor(&net, &Tensor::new(vec![1, 3, 5, 5], x.clone()).unwrap()).unwrap();

    let hidden: Vec<f32> = direct_conv(&x, 3, 5, 5, &w1, &b1, 3)
        .into_iter()
        .map(|v| if v >= 0.0 { v } else { 0.1 * v })
        .collect();
    let want = direct_conv(&hidden, 2, 5, 5, &w2, &b2, 1);
    assert_eq!(got.shape(), &[1, 6, 5, 5]);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }
    // The im2col path and the direct reference agree as well.
    let Layer::Conv(c) = &net.nodes()[0].layer else { unreachable!() };
    let xt = Tensor::new(vec![1, 3, 5, 5], x).unwrap();
    assert!(conv2d(&xt, c).unwrap().max_abs_diff(&conv2d_direct(&xt, c).unwrap()) < 1e-6);
}

#[test]
fn output_does_not_depend_on_node_listing_order() {
    let net = detector(ActivationKind::Qcfs, 4, 2.0, 3);
    let x = image(2, 1);
    let base = forward_tensor(&net, &x).unwrap();
    // List the nodes in reverse and rewire the edges.
    let n = net.nodes().len();
    let pos = |i: usize| n - 1 - i;
    let mut reversed: Vec<Node> = net.nodes().iter().rev().cloned().collect();
    for node in &mut reversed {
        for s in &mut node.inputs {
            if let Source::Layer(j) = s {
                *j = pos(*j);
            }
        }
    }
    let other = NetworkGraph::new(net.input_shape(), reversed).unwrap();
    assert_ne!(other.order(), net.order());
    assert_eq!(forward_tensor(&other, &x).unwrap(), base);
}

/// Inference with every QCFS layer swapped for a plain clip to `[0, λ]`.
fn forward_clipped(net: &NetworkGraph, x: &Tensor) -> Vec<Tensor> {
    let mut values: Vec<Tensor> = vec![Tensor::zeros(&[0]); net.nodes().len()];
    let fetch = |values: &[Tensor], s: Source| match s {
        Source::Input => x.clone(),
        Source::Layer(j) => values[j].clone(),
    };
    for &i in net.order() {
        let node = &net.nodes()[i];
        let a = fetch(&values, node.inputs[0]);
        let out = match &node.layer {
            Layer::Conv(c) => conv2d(&a, c).unwrap(),
            Layer::BatchNorm(b) => batch_norm_infer(&a, b).unwrap(),
            Layer::Activation(Activation::Qcfs(p)) => {
                let lam = p.lambda as f32;
                a.map(|v| v.clamp(0.0, lam))
            }
            Layer::Activation(Activation::LeakyRelu { slope }) => leaky_relu(&a, *slope as f32),
            Layer::AvgPool { kernel, stride } => avg_pool2d(&a, *kernel, *stride).unwrap(),
            Layer::MaxPool { kernel, stride } => max_pool2d(&a, *kernel, *stride).unwrap(),
            Layer::Concat => {
                let parts: Vec<Tensor> = node.inputs.iter().map(|&s| fetch(&values, s)).collect();
                let refs: Vec<&Tensor> = parts.iter().collect();
                qcfs_core::ops::concat_channels(&refs).unwrap()
            }
            Layer::Detect(_) => a,
            other => panic!("unexpected layer {}", other.kind_name()),
        };
        values[i] = out;
    }
    values
}

#[test]
fn fine_quantization_approaches_clipped_relu() {
    let levels = 1024;
    let lambda = 2.0;
    let net = detector(ActivationKind::Qcfs, levels, lambda, 5);
    let x = image(3, 1);
    let quantized = qcfs_core::graph::forward_values(&net, &x).unwrap();
    let clipped = forward_clipped(&net, &x);
    let step = lambda / levels as f64;

    // The first activation sees identical inputs in both runs, so its error
    // is the bare rounding error of the quantizer.
    let first = net.activation_nodes()[0];
    assert!(quantized[first].max_abs_diff(&clipped[first]) <= step / 2.0 + 1e-6);

    // Downstream the error compounds through the weights. On this fixed
    // net it measures about a quarter step at the head.
    let head = net.output_node();
    let err = quantized[head].max_abs_diff(&clipped[head]);
    assert!(err <= step, "head error {err} = {:.2} steps", err / step);
    assert!(err > 0.0);
}

#[test]
fn first_layer_rate_conversion_reproduces_the_ann() {
    let levels = 4;
    let net = detector(ActivationKind::Qcfs, levels, 2.0, 7).cast::<f64>();
    let x = image(4, 2).cast::<f64>();
    let ann = forward_ann(&net, &x).unwrap();
    for target in [Selection::FirstOnly, Selection::All] {
        let plan = SurgeryPlan::new(target.clone(), levels as usize, SnnMode::RateAveraged);
        let snn = convert(&net, &plan).unwrap();
        let (outs, stats) = forward_snn(&snn, &x, plan.timesteps, plan.mode).unwrap();
        assert!(stats.total() > 0);
        for (a, b) in ann.iter().zip(&outs) {
            let diff = a.raw.max_abs_diff(&b.raw);
            assert!(diff <= 1e-5, "{target}: {diff}");
        }
    }
}

#[test]
fn single_step_outputs_are_binary() {
    let theta = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let conv = ConvSpec::new(
        ConvGeometry {
            in_channels: 3,
            out_channels: 6,
            kernel_size: 1,
            stride: 1,
            padding: 0,
        },
        Tensor::from_fn(&[6, 3, 1, 1], |_| rng.random_range(-1.0..1.0)),
        Tensor::from_fn(&[6], |_| rng.random_range(0.0..0.5)),
    )
    .unwrap();
    let nodes = vec![
        Node::new(Layer::Conv(conv), vec![Source::Input]),
        Node::new(Layer::Activation(Activation::IfNeuron { theta }), vec![Source::Layer(0)]),
        Node::new(
            Layer::Detect(DetectHead {
                anchors: vec![[4.0, 4.0]],
                stride: 8,
                class_count: 1,
            }),
            vec![Source::Layer(1)],
        ),
    ];
    let net = NetworkGraph::new([3, 8, 8], nodes).unwrap();
    let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(0.0..1.0f32));
    for mode in [SnnMode::PerStep, SnnMode::RateAveraged] {
        let (outs, stats) = forward_snn(&net, &x, 1, mode).unwrap();
        let mut seen = [false; 2];
        for out in &outs {
            for &v in out.raw.data() {
                assert!(v == 0.0 || v == theta as f32, "{v}");
                seen[(v != 0.0) as usize] = true;
            }
        }
        assert_eq!(seen, [true, true]);
        let layer = &stats.layers[0];
        assert!(layer.spikes <= layer.neurons);
    }
}

#[test]
fn spike_counts_are_bounded() {
    let net = detector(ActivationKind::Qcfs, 4, 2.0, 8);
    let snn = convert(&net, &SurgeryPlan::new(Selection::All, 4, SnnMode::PerStep)).unwrap();
    for t in [1, 4, 6] {
        let (_, stats) = forward_snn(&snn, &image(5, 1), t, SnnMode::PerStep).unwrap();
        assert_eq!(stats.layers.len(), snn.activation_nodes().len());
        for l in &stats.layers {
            assert!(l.spikes <= t as u64 * l.neurons);
        }
        assert!(stats.total() > 0);
    }
    assert!(forward_snn(&snn, &image(5, 1), 0, SnnMode::PerStep).is_err());
}

#[test]
fn ann_rejects_spiking_layers_and_snn_requires_them() {
    let net = detector(ActivationKind::Qcfs, 4, 2.0, 1);
    assert!(forward_snn(&net, &image(1, 1), 4, SnnMode::PerStep).is_err());
    let snn = convert(&net, &SurgeryPlan::new(Selection::LastOnly, 4, SnnMode::PerStep)).unwrap();
    let err = forward_ann(&snn, &image(1, 1)).unwrap_err().to_string();
    assert!(err.contains("forward_snn"), "{err}");
}
