//! Detection metrics: precision, recall, all-points AP, mAP@.5,
//! mAP@.5:.95 and F1-versus-confidence curves.

pub mod dataset;
mod report;

pub use report::{Curve, write_curves_csv, write_pr_csv, write_report_csv, write_report_json};

use serde::{Deserialize, Serialize};

pub use crate::bbox::{iou, BBox, GroundTruth};
use crate::graph::Detection;

/// One detection of a single class, tagged with its image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: usize,
    pub confidence: f32,
    pub bbox: BBox,
}

/// One ground-truth box of a single class, tagged with its image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthBox {
    pub image: usize,
    pub bbox: BBox,
}

/// IoU thresholds of mAP@.5:.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// Number of points in the confidence grid of the P/R/F1 curves.
pub const CONFIDENCE_GRID: usize = 101;

/// Detections sorted by descending confidence (stable), each flagged as a
/// true positive or not.
///
/// Each detection claims the unmatched truth of its image with the highest
/// IoU; it is a true positive if that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[ScoredBox], truths: &[TruthBox], iou_thresh: f64) -> Vec<(f32, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut taken = vec![false; truths.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let best = truths
                .iter()
                .enumerate()
                .filter(|(j, t)| t.image == d.image && !taken[*j])
                .map(|(j, t)| (j, iou(&d.bbox, &t.bbox)))
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                });
            let tp = match best {
                Some((j, v)) if v >= iou_thresh => {
                    taken[j] = true;
                    true
                }
                _ => false,
            };
            (d.confidence, tp)
        })
        .collect()
}

/// Area under the all-points interpolated precision–recall curve.
///
/// Detections sharing a confidence value form one operating point, so the
/// result depends only on the ranking of confidences. With no truths the AP
/// is 0.
pub fn average_precision(dets: &[ScoredBox], truths: &[TruthBox], iou_thresh: f64) -> f64 {
    ap_from_matches(&match_detections(dets, truths, iou_thresh), truths.len())
}

fn ap_from_matches(matched: &[(f32, bool)], n_truth: usize) -> f64 {
    if n_truth == 0 || matched.is_empty() {
        return 0.0;
    }
    // (true positives gained, precision) per distinct confidence
    let mut steps: Vec<(u32, f64)> = Vec::new();
    let (mut tp, mut fp) = (0u32, 0u32);
    let mut i = 0;
    while i < matched.len() {
        let c = matched[i].0;
        let before = tp;
        while i < matched.len() && matched[i].0 == c {
            if matched[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((tp - before, tp as f64 / (tp + fp) as f64));
    }
    let mut envelope = vec![0.0f64; steps.len()];
    let mut running = 0.0f64;
    for (e, s) in envelope.iter_mut().zip(&steps).rev() {
        running = running.max(s.1);
        *e = running;
    }
    let area: f64 = steps
        .iter()
        .zip(&envelope)
        .filter(|(s, _)| s.0 > 0)
        .map(|(s, e)| s.0 as f64 * e)
        .sum();
    area / n_truth as f64
}

/// Precision/recall at every threshold of `grid` from matched detections.
fn pr_at(matched: &[(f32, bool)], n_truth: usize, grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    grid.iter()
        .map(|&c| {
            let (mut tp, mut n) = (0usize, 0usize);
            for &(conf, hit) in matched {
                if conf as f64 >= c {
                    n += 1;
                    tp += hit as usize;
                }
            }
            let p = if n == 0 { 0.0 } else { tp as f64 / n as f64 };
            let r = if n_truth == 0 { 0.0 } else { tp as f64 / n_truth as f64 };
            (p, r)
        })
        .unzip()
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub truths: usize,
    pub detections: usize,
    /// AP at each of [`coco_thresholds`].
    pub ap: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// P-R operating points `(recall, precision)` at IoU 0.5, one per
    /// distinct confidence.
    pub pr_points: Vec<(f64, f64)>,
}

impl ClassMetrics {
    pub fn ap50(&self) -> f64 {
        self.ap[0]
    }

    pub fn ap50_95(&self) -> f64 {
        self.ap.iter().sum::<f64>() / self.ap.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_count: usize,
    pub iou_thresholds: Vec<f64>,
    pub confidence_grid: Vec<f64>,
    /// Classes present among truths or detections.
    pub classes: Vec<ClassMetrics>,
    pub map50: f64,
    pub map50_95: f64,
    pub mean_precision: Vec<f64>,
    pub mean_recall: Vec<f64>,
    pub mean_f1: Vec<f64>,
    pub best_f1: f64,
    pub best_f1_confidence: f64,
}

/// Full metric suite over per-image detections and truths.
///
/// Classes absent from both truths and detections are left out of every
/// class mean.
pub fn full_report(dets: &[Vec<Detection>], truths: &[Vec<GroundTruth>], class_count: usize) -> MetricsReport {
    assert_eq!(dets.len(), truths.len(), "detections and truths must cover the same images");
    let thresholds = coco_thresholds();
    let grid: Vec<f64> = (0..CONFIDENCE_GRID)
        .map(|k| k as f64 / (CONFIDENCE_GRID - 1) as f64)
        .collect();
    let per_class: Vec<(Vec<ScoredBox>, Vec<TruthBox>)> = (0..class_count)
        .map(|c| {
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
                .flat_map(|(image, ts)| {
                    ts.iter()
                        .filter(move |t| t.class == c)
                        .map(move |t| TruthBox { image, bbox: t.bbox })
                })
                .collect();
            (d, t)
        })
        .collect();

    let classes: Vec<ClassMetrics> = crate::par::map_range(class_count, |c| {
        let (d, t) = &per_class[c];
        if d.is_empty() && t.is_empty() {
            return None;
        }
        let matched50 = match_detections(d, t, 0.5);
        let ap = thresholds
            .iter()
            .map(|&th| {
                if th == 0.5 {
                    ap_from_matches(&matched50, t.len())
                } else {
                    average_precision(d, t, th)
                }
            })
            .collect();
        let (precision, recall) = pr_at(&matched50, t.len(), &grid);
        let f1s = precision.iter().zip(&recall).map(|(&p, &r)| f1(p, r)).collect();
        let mut pr_points = Vec::with_capacity(matched50.len());
        let (mut tp, mut n) = (0usize, 0usize);
        for (k, &(conf, hit)) in matched50.iter().enumerate() {
            n += 1;
            tp += hit as usize;
            // One point per distinct confidence.
            if matched50.get(k + 1).is_some_and(|next| next.0 == conf) {
                continue;
            }
            let r = if t.is_empty() { 0.0 } else { tp as f64 / t.len() as f64 };
            pr_points.push((r, tp as f64 / n as f64));
        }
        Some(ClassMetrics {
            class: c,
            truths: t.len(),
            detections: d.len(),
            ap,
            precision,
            recall,
            f1: f1s,
            pr_points,
        })
    })
    .into_iter()
    .flatten()
    .collect();

    let mean = |f: &dyn Fn(&ClassMetrics) -> f64| -> f64 {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / classes.len() as f64
        }
    };
    let mean_curve = |f: &dyn Fn(&ClassMetrics) -> &Vec<f64>| -> Vec<f64> {
        (0..grid.len())
            .map(|k| {
                if classes.is_empty() {
                    0.0
                } else {
                    classes.iter().map(|c| f(c)[k]).sum::<f64>() / classes.len() as f64
                }
            })
            .collect()
    };
    let map50 = mean(&|c| c.ap50());
    let map50_95 = mean(&|c| c.ap50_95());
    let mean_precision = mean_curve(&|c| &c.precision);
    let mean_recall = mean_curve(&|c| &c.recall);
    let mean_f1 = mean_curve(&|c| &c.f1);
    let (best_k, best_f1) = mean_f1
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (k, v)| if v > b.1 { (k, v) } else { b });
    MetricsReport {
        class_count,
        iou_thresholds: thresholds,
        best_f1_confidence: grid[best_k],
        confidence_grid: grid,
        classes,
        map50,
        map50_95,
        mean_precision,
        mean_recall,
        mean_f1,
        best_f1: best_f1.max(0.0),
    }
}
