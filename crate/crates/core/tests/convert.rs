use qcfs_core::convert::{
    convert, conversion_error_empirical, conversion_error_grid, default_range, fold_batch_norms, layer_surgery_experiment,
    write_surgery_csv, Selection, SurgeryPlan,
};
use qcfs_core::eval::EvalConfig;
use qcfs_core::graph::{Activation, ActivationKind, Layer, NetworkGraph, SnnMode, TinyDetectorConfig};
use qcfs_core::ops::fold_batch_norm;
use qcfs_core::qcfs::QcfsParams;
use qcfs_core::train::generate_synthetic_dataset;

fn qcfs_net() -> NetworkGraph {
    TinyDetectorConfig {
        seed: 4,
        initial_lambda: 2.0,
        ..TinyDetectorConfig::new(3, ActivationKind::Qcfs, 4)
    }
    .build()
    .unwrap()
}

fn kinds(net: &NetworkGraph) -> Vec<&'static str> {
    net.activation_nodes()
        .iter()
        .map(|&i| match &net.nodes()[i].layer {
            Layer::Activation(a) => a.name(),
            _ => unreachable!(),
        })
        .collect()
}

#[test]
fn first_and_last_only_replace_one_layer() {
    let net = qcfs_net();
    let n = net.activation_nodes().len();
    assert!(n >= 3);
    let first = convert(&net, &SurgeryPlan::new(Selection::FirstOnly, 4, SnnMode::PerStep)).unwrap();
    let k = kinds(&first);
    assert_eq!(k[0], "if-neuron");
    assert!(k[1..].iter().all(|&s| s == "qcfs"));

    let last = convert(&net, &SurgeryPlan::new(Selection::LastOnly, 4, SnnMode::PerStep)).unwrap();
    let k = kinds(&last);
    assert_eq!(k[n - 1], "if-neuron");
    assert!(k[..n - 1].iter().all(|&s| s == "qcfs"));

    let some = convert(&net, &SurgeryPlan::new(Selection::Indices(vec![1, 3]), 4, SnnMode::PerStep)).unwrap();
    let k = kinds(&some);
    assert_eq!((k[1], k[3]), ("if-neuron", "if-neuron"));
    assert_eq!(k.iter().filter(|&&s| s == "if-neuron").count(), 2);
}

#[test]
fn threshold_is_the_trained_lambda() {
    let mut nodes = qcfs_net().into_nodes();
    let mut lambdas = Vec::new();
    for (k, node) in nodes.iter_mut().filter(|n| matches!(n.layer, Layer::Activation(_))).enumerate() {
        let lambda = 1.0 + 0.25 * k as f64;
        node.layer = Layer::Activation(Activation::Qcfs(QcfsParams::new(lambda, 4).unwrap()));
        lambdas.push(lambda);
    }
    let net = NetworkGraph::new([3, 64, 64], nodes).unwrap();
    let snn = convert(&net, &SurgeryPlan::new(Selection::All, 4, SnnMode::RateAveraged)).unwrap();
    let thetas: Vec<f64> = snn
        .activation_nodes()
        .iter()
        .map(|&i| match snn.nodes()[i].layer {
            Layer::Activation(Activation::IfNeuron { theta }) => theta,
            _ => panic!("not converted"),
        })
        .collect();
    assert_eq!(thetas, lambdas);
}

#[test]
fn converting_twice_fails() {
    let plan = SurgeryPlan::new(Selection::FirstOnly, 4, SnnMode::PerStep);
    let once = convert(&qcfs_net(), &plan).unwrap();
    let err = convert(&once, &plan).unwrap_err().to_string();
    assert!(err.contains("not qcfs"), "{err}");
}

#[test]
fn non_qcfs_networks_and_empty_selections_are_rejected() {
    let relu = TinyDetectorConfig::new(3, ActivationKind::LeakyRelu, 4).build().unwrap();
    assert!(convert(&relu, &SurgeryPlan::new(Selection::All, 4, SnnMode::PerStep)).is_err());
    let net = qcfs_net();
    assert!(convert(&net, &SurgeryPlan::new(Selection::Indices(vec![]), 4, SnnMode::PerStep)).is_err());
    assert!(convert(&net, &SurgeryPlan::new(Selection::Indices(vec![99]), 4, SnnMode::PerStep)).is_err());
    assert!(convert(&net, &SurgeryPlan::new(Selection::All, 0, SnnMode::PerStep)).is_err());
}

#[test]
fn weights_survive_up_to_batch_norm_folding() {
    let net = qcfs_net();
    let snn = convert(&net, &SurgeryPlan::new(Selection::All, 4, SnnMode::PerStep)).unwrap();
    assert!(snn.nodes().iter().all(|n| !matches!(n.layer, Layer::BatchNorm(_))));
    // Each conv followed by batch norm becomes exactly the folded conv; the
    // head conv has no batch norm and is bit-identical.
    let mut expected = Vec::new();
    for (i, node) in net.nodes().iter().enumerate() {
        let Layer::Conv(conv) = &node.layer else { continue };
        let next = net.nodes().iter().find(|m| m.inputs == [qcfs_core::graph::Source::Layer(i)]);
        match next.map(|m| &m.layer) {
            Some(Layer::BatchNorm(bn)) => expected.push(fold_batch_norm(conv, bn).unwrap()),
            _ => expected.push(conv.clone()),
        }
    }
    let got: Vec<_> = snn
        .nodes()
        .iter()
        .filter_map(|n| match &n.layer {
            Layer::Conv(c) => Some(c.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(got, expected);
    assert_eq!(fold_batch_norms(&net).unwrap().nodes().len(), snn.nodes().len());
}

#[test]
fn t_equals_l_error_vanishes_pointwise() {
    for levels in [2u32, 4, 8, 16] {
        let p = QcfsParams::new(1.5, levels).unwrap();
        let r = conversion_error_grid(&p, 1.5, levels as usize, 100_000, default_range(1.5)).unwrap();
        assert_eq!(r.max_abs, 0.0, "L={levels}");
        assert_eq!(r.n, 100_000);
    }
}

#[test]
fn mismatched_timesteps_have_zero_mean_error_but_spread() {
    let p = QcfsParams::new(1.0, 4).unwrap();
    let r = conversion_error_empirical(&p, 1.0, 8, 200_000, (-1.0, 2.0), 3).unwrap();
    assert!(r.mean_within(4.0), "mean {} vs se {}", r.mean, r.standard_error());
    assert!(r.std > 0.0 && r.max_abs > 0.0);
}

#[test]
fn surgery_table_has_one_row_per_cell() {
    let net = qcfs_net();
    let scenes = generate_synthetic_dataset(6, 2).unwrap();
    let rows = layer_surgery_experiment(&net, &scenes, &[1, 4], &EvalConfig::default()).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
    for r in &rows {
        assert!(r.n > 0 && r.std_err >= 0.0);
        if r.timesteps == 4 {
            assert_eq!(r.max_err, 0.0, "{} {}", r.plan, r.mode);
        }
    }
    let mut csv = Vec::new();
    write_surgery_csv(&rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "plan,mode,T,L,phi,lambda,map50,mean_err,std_err,max_err,n");
    assert_eq!(text.lines().count(), 9);
}
