mod common;

use common::ap_oracle::{brute_force_ap, fixture};
use qcfs_core::bbox::{BBox, GroundTruth};
use qcfs_core::graph::Detection;
use qcfs_core::metrics::{average_precision, coco_thresholds, f1, full_report, ScoredBox, TruthBox};

#[test]
fn ap_equals_brute_force_on_random_fixtures() {
    for seed in 0..20 {
        let f = fixture(seed);
        assert!(f.dets.len() <= 10);
        for thr in [0.5, 0.75] {
            let got = average_precision(&f.dets, &f.truths, thr);
            let want = brute_force_ap(&f.dets, &f.truths, thr);
            assert_eq!(got, want, "fixture {seed} at IoU {thr}");
        }
    }
}

#[test]
fn worked_tp_fp_tp_against_oracle() {
    let t = |x: f32| TruthBox {
        image: 0,
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
    };
    let d = |x: f32, c: f32| ScoredBox {
        image: 0,
        confidence: c,
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
    };
    let truths = [t(0.0), t(50.0)];
    let dets = [d(0.0, 0.9), d(100.0, 0.8), d(50.0, 0.7)];
    // P-R points (0.5, 1), (0.5, 0.5), (1, 2/3): area 0.5·1 + 0.5·2/3.
    let want = 0.5 + 0.5 * (2.0 / 3.0);
    assert!((average_precision(&dets, &truths, 0.5) - want).abs() < 1e-12);
    assert_eq!(average_precision(&dets, &truths, 0.5), brute_force_ap(&dets, &truths, 0.5));
}

#[test]
fn ap_depends_only_on_confidence_ranking() {
    for seed in 0..20 {
        let f = fixture(seed);
        let base = average_precision(&f.dets, &f.truths, 0.5);
        for g in [|c: f32| c.sqrt(), |c: f32| 0.1 + 0.5 * c * c, |c: f32| c.powi(3)] {
            let moved: Vec<ScoredBox> = f
                .dets
                .iter()
                .map(|d| ScoredBox {
                    confidence: g(d.confidence),
                    ..*d
                })
                .collect();
            assert_eq!(average_precision(&moved, &f.truths, 0.5), base, "fixture {seed}");
        }
    }
}

#[test]
fn duplicate_detection_is_one_tp_and_one_fp_everywhere() {
    let truth = GroundTruth {
        class: 0,
        bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
    };
    let det = |c: f32| Detection {
        class: 0,
        confidence: c,
        bbox: truth.bbox,
    };
    let report = full_report(&[vec![det(0.875), det(0.625)]], &[vec![truth]], 1);
    let class = &report.classes[0];
    for (k, &c) in report.confidence_grid.iter().enumerate() {
        let (p, r) = (class.precision[k], class.recall[k]);
        if c <= 0.625 {
            assert_eq!((p, r), (0.5, 1.0), "threshold {c}");
        } else if c <= 0.875 {
            assert_eq!((p, r), (1.0, 1.0), "threshold {c}");
        } else {
            assert_eq!((p, r), (0.0, 0.0), "threshold {c}");
        }
    }
    assert_eq!(class.ap50(), 1.0);
}

fn scene_fixture() -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
    let b = |x: f32, y: f32, s: f32| BBox::new(x, y, x + s, y + s);
    let gt = |class, bbox| GroundTruth { class, bbox };
    let det = |class, confidence, bbox| Detection { class, confidence, bbox };
    let truths = vec![
        vec![gt(0, b(0.0, 0.0, 10.0)), gt(1, b(20.0, 20.0, 8.0))],
        vec![gt(1, b(5.0, 5.0, 12.0))],
        vec![],
        vec![gt(0, b(30.0, 2.0, 9.0)), gt(0, b(2.0, 30.0, 9.0))],
        vec![gt(1, b(10.0, 40.0, 10.0))],
    ];
    let dets = vec![
        vec![det(0, 0.92, b(1.0, 0.0, 10.0)), det(1, 0.55, b(21.0, 21.0, 8.0)), det(1, 0.40, b(0.0, 0.0, 10.0))],
        vec![det(1, 0.81, b(6.0, 5.0, 12.0)), det(0, 0.30, b(5.0, 5.0, 12.0))],
        vec![det(0, 0.77, b(40.0, 40.0, 6.0))],
        vec![det(0, 0.64, b(30.0, 3.0, 9.0)), det(0, 0.64, b(2.0, 34.0, 9.0)), det(0, 0.12, b(3.0, 30.0, 9.0))],
        vec![det(1, 0.70, b(10.0, 43.0, 10.0)), det(1, 0.70, b(11.0, 40.0, 10.0))],
    ];
    (dets, truths)
}

fn split_class(dets: &[Vec<Detection>], truths: &[Vec<GroundTruth>], c: usize) -> (Vec<ScoredBox>, Vec<TruthBox>) {
    let d = dets
        .iter()
        .enumerate()
        .flat_map(|(image, ds)| {
            ds.iter().filter(move |d| d.class == c).map(move |d| ScoredBox {
                image,
                confidence: d.confidence,
                bbox: d.bbox,
            })
        })
        .collect();
    let t = truths
        .iter()
        .enumerate()
        .flat_map(|(image, ts)| ts.iter().filter(move |t| t.class == c).map(move |t| TruthBox { image, bbox: t.bbox }))
        .collect();
    (d, t)
}

#[test]
fn two_class_fixture_matches_oracle() {
    let (dets, truths) = scene_fixture();
    let report = full_report(&dets, &truths, 2);
    assert_eq!(report.classes.len(), 2);
    let mut per_threshold = Vec::new();
    for c in 0..2 {
        let (d, t) = split_class(&dets, &truths, c);
        let aps: Vec<f64> = coco_thresholds().iter().map(|&th| brute_force_ap(&d, &t, th)).collect();
        assert_eq!(report.classes[c].ap, aps, "class {c}");
        per_threshold.push(aps);
    }
    let map50 = (per_threshold[0][0] + per_threshold[1][0]) / 2.0;
    assert!((report.map50 - map50).abs() < 1e-12);
    let all: f64 = per_threshold.iter().flatten().sum::<f64>() / 20.0;
    assert!((report.map50_95 - all).abs() < 1e-12);
    assert!(report.map50 > 0.0 && report.map50 < 1.0);
}

#[test]
fn report_is_invariant_to_image_order() {
    let (dets, truths) = scene_fixture();
    let base = full_report(&dets, &truths, 2);
    for perm in [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 2, 3, 4, 0]] {
        let d: Vec<_> = perm.iter().map(|&i| dets[i].clone()).collect();
        let t: Vec<_> = perm.iter().map(|&i| truths[i].clone()).collect();
        assert_eq!(full_report(&d, &t, 2), base, "order {perm:?}");
    }
}

#[test]
fn f1_curve_is_pointwise_harmonic_mean() {
    let (dets, truths) = scene_fixture();
    let report = full_report(&dets, &truths, 2);
    for class in &report.classes {
        for k in 0..report.confidence_grid.len() {
            let (p, r) = (class.precision[k], class.recall[k]);
            let want = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            assert_eq!(class.f1[k], want);
        }
    }
    assert_eq!(f1(0.0, 0.0), 0.0);
    let best = report.mean_f1.iter().cloned().fold(0.0, f64::max);
    assert_eq!(report.best_f1, best);
}

#[test]
fn absent_classes_are_left_out_of_means() {
    let (dets, truths) = scene_fixture();
    let two = full_report(&dets, &truths, 2);
    let five = full_report(&dets, &truths, 5);
    assert_eq!(five.classes.len(), 2);
    assert_eq!(five.map50, two.map50);
    assert_eq!(five.map50_95, two.map50_95);
}
