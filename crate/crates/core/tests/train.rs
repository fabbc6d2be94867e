use qcfs_core::bbox::{BBox, GroundTruth};
use qcfs_core::graph::{ActivationKind, DetectHead, DetectionOutput, NetworkGraph, TinyDetectorConfig};
use qcfs_core::par;
use qcfs_core::train::{
    generate_synthetic_dataset, loss_and_gradients, train, write_training_curves, yolo_loss, LossWeights, Sgd,
    TrainConfig,
};
use qcfs_core::{Error, Tensor};

fn one_cell_head() -> DetectHead {
    DetectHead {
        anchors: vec![[8.0, 8.0]],
        stride: 8,
        class_count: 1,
    }
}

fn one_cell(raw: [f32; 6]) -> DetectionOutput {
    DetectionOutput::new(one_cell_head(), Tensor::new(vec![6, 1, 1], raw.to_vec()).unwrap()).unwrap()
}

#[test]
fn single_cell_hand_computed_loss() {
    // Zero logits decode to the anchor box centred in the cell: (4, 4, 8, 8).
    let out = one_cell([0.0; 6]);
    let ln2 = std::f64::consts::LN_2;
    let w = LossWeights::default();

    let exact = [GroundTruth {
        class: 0,
        bbox: BBox::from_center(4.0, 4.0, 8.0, 8.0),
    }];
    let t = yolo_loss(&out, &exact, &w);
    assert!(t.bbox.abs() < 1e-12);
    assert!((t.objectness - ln2).abs() < 1e-12);
    assert!((t.classification - ln2).abs() < 1e-12);
    assert!((t.total - (ln2 + 0.5 * ln2)).abs() < 1e-12);

    // Half-width truth: IoU 32/64, box loss 1/2.
    let narrow = [GroundTruth {
        class: 0,
        bbox: BBox::from_center(4.0, 4.0, 4.0, 8.0),
    }];
    let t = yolo_loss(&out, &narrow, &w);
    assert!((t.bbox - 0.5).abs() < 1e-12);
    assert!((t.total - (0.05 * 0.5 + 1.5 * ln2)).abs() < 1e-12);

    // No truths: only the objectness term, BCE against 0.
    let t = yolo_loss(&out, &[], &w);
    assert_eq!((t.bbox, t.classification), (0.0, 0.0));
    assert!((t.total - ln2).abs() < 1e-12);
}

#[test]
fn confident_correct_prediction_has_near_zero_loss() {
    let out = one_cell([0.0, 0.0, 0.0, 0.0, 20.0, 20.0]);
    let truth = [GroundTruth {
        class: 0,
        bbox: BBox::from_center(4.0, 4.0, 8.0, 8.0),
    }];
    let t = yolo_loss(&out, &truth, &LossWeights::default());
    assert!(t.bbox < 1e-9 && t.classification < 1e-8 && t.objectness < 1e-8, "{t:?}");
    assert!(t.total >= 0.0);
}

fn small_net(kind: ActivationKind) -> NetworkGraph {
    TinyDetectorConfig {
        seed: 2,
        widths: [8, 8, 8, 8],
        ..TinyDetectorConfig::new(3, kind, 4)
    }
    .build()
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let mut net = small_net(ActivationKind::Qcfs);
    let before = net.clone();
    let scenes = generate_synthetic_dataset(4, 1).unwrap();
    let images: Vec<&Tensor> = scenes.iter().map(|s| &s.image).collect();
    let truths: Vec<&[GroundTruth]> = scenes.iter().map(|s| s.objects.as_slice()).collect();
    let batch = Tensor::stack(&images).unwrap();
    let mut sgd = Sgd::new(0.9, 5e-4);
    for _ in 0..3 {
        let (_, grads, _) = loss_and_gradients(&net, &batch, &truths, &LossWeights::default()).unwrap();
        sgd.step(&mut net, &grads, 0.0).unwrap();
    }
    assert_eq!(net, before);
}

#[test]
fn parallel_and_sequential_gradients_agree() {
    let net = small_net(ActivationKind::Qcfs);
    let scenes = generate_synthetic_dataset(6, 2).unwrap();
    let images: Vec<&Tensor> = scenes.iter().map(|s| &s.image).collect();
    let truths: Vec<&[GroundTruth]> = scenes.iter().map(|s| s.objects.as_slice()).collect();
    let batch = Tensor::stack(&images).unwrap();
    let (ta, ga, _) = loss_and_gradients(&net, &batch, &truths, &LossWeights::default()).unwrap();
    par::set_sequential(true);
    let (tb, gb, _) = loss_and_gradients(&net, &batch, &truths, &LossWeights::default()).unwrap();
    par::set_sequential(false);
    assert_eq!(ta, tb);
    for (a, b) in ga.layers.iter().zip(&gb.layers) {
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }
}

fn short_run(kind: ActivationKind) -> (NetworkGraph, Vec<u8>) {
    let scenes = generate_synthetic_dataset(24, 5).unwrap();
    let (tr, va) = scenes.split_at(16);
    let mut net = small_net(kind);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        activation: kind,
        seed: 11,
        ..TrainConfig::default()
    };
    let records = train(&mut net, tr, va, &cfg, |_| {}).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.total_loss.is_finite()));
    let mut csv = Vec::new();
    write_training_curves(&records, &mut csv).unwrap();
    (net, csv)
}

#[test]
fn training_is_reproducible() {
    for kind in [ActivationKind::LeakyRelu, ActivationKind::Qcfs] {
        let (net_a, csv_a) = short_run(kind);
        let (net_b, csv_b) = short_run(kind);
        assert_eq!(csv_a, csv_b);
        assert_eq!(net_a, net_b);
        let header = String::from_utf8(csv_a).unwrap();
        assert_eq!(
            header.lines().next().unwrap(),
            "epoch,total_loss,box_loss,obj_loss,cls_loss,map50,map5095,f1_best,conf_at_f1_best"
        );
    }
}

#[test]
fn mismatched_activation_or_divergence_is_reported() {
    let scenes = generate_synthetic_dataset(8, 6).unwrap();
    let mut net = small_net(ActivationKind::LeakyRelu);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        activation: ActivationKind::Qcfs,
        ..TrainConfig::default()
    };
    assert!(train(&mut net, &scenes[..4], &scenes[4..], &cfg, |_| {}).is_err());

    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 1e12,
        activation: ActivationKind::LeakyRelu,
        ..TrainConfig::default()
    };
    match train(&mut net, &scenes[..4], &scenes[4..], &cfg, |_| {}) {
        Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.len())),
    }
}
