use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Single-scale anchor-based detection head.
///
/// Per anchor the head carries `5 + classes` channels:
/// `tx, ty, tw, th, objectness, class logits…`. Boxes decode as
///
/// ```text
/// cx = (gx + 2σ(tx) − ½)·stride      w = anchor_w · (2σ(tw))²
/// cy = (gy + 2σ(ty) − ½)·stride      h = anchor_h · (2σ(th))²
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectHead {
    /// Anchor `(w, h)` pairs in pixels.
    pub anchors: Vec<[f32; 2]>,
    pub stride: usize,
    pub class_count: usize,
}

impl DetectHead {
    pub fn per_anchor(&self) -> usize {
        5 + self.class_count
    }

    pub fn channels(&self) -> usize {
        self.anchors.len() * self.per_anchor()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decoded box `(cx, cy, w, h)` from raw offsets.
#[inline]
pub(crate) fn decode_box(t: [f64; 4], gx: usize, gy: usize, anchor: [f32; 2], stride: usize) -> [f64; 4] {
    let s = stride as f64;
    [
        (gx as f64 + 2.0 * sigmoid(t[0]) - 0.5) * s,
        (gy as f64 + 2.0 * sigmoid(t[1]) - 0.5) * s,
        anchor[0] as f64 * (2.0 * sigmoid(t[2])).powi(2),
        anchor[1] as f64 * (2.0 * sigmoid(t[3])).powi(2),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellPrediction {
    pub anchor: usize,
    pub gx: usize,
    pub gy: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
}

/// Raw head output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput<T: Real = f32> {
    pub head: DetectHead,
    /// `(A·(5 + classes), grid_h, grid_w)`.
    pub raw: Tensor<T>,
}

impl<T: Real> DetectionOutput<T> {
    pub fn new(head: DetectHead, raw: Tensor<T>) -> Result<Self> {
        match *raw.shape() {
            [c, _, _] if c == head.channels() => Ok(Self { head, raw }),
            _ => Err(Error::shape(
                "detection output",
                &[head.channels(), 0, 0],
                raw.shape(),
            )),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.raw.shape()[1], self.raw.shape()[2])
    }

    #[inline]
    pub fn logit(&self, anchor: usize, channel: usize, gy: usize, gx: usize) -> f64 {
        let (gh, gw) = self.grid();
        let c = anchor * self.head.per_anchor() + channel;
        self.raw.data()[(c * gh + gy) * gw + gx].f64()
    }

    pub fn cell(&self, anchor: usize, gy: usize, gx: usize) -> CellPrediction {
        let t = [0, 1, 2, 3].map(|k| self.logit(anchor, k, gy, gx));
        let [cx, cy, w, h] = decode_box(t, gx, gy, self.head.anchors[anchor], self.head.stride);
        CellPrediction {
            anchor,
            gx,
            gy,
            cx,
            cy,
            w,
            h,
            objectness: sigmoid(self.logit(anchor, 4, gy, gx)),
            class_scores: (0..self.head.class_count)
                .map(|k| sigmoid(self.logit(anchor, 5 + k, gy, gx)))
                .collect(),
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = CellPrediction> + '_ {
        let (gh, gw) = self.grid();
        (0..self.head.anchors.len())
            .flat_map(move |a| (0..gh).flat_map(move |y| (0..gw).map(move |x| (a, y, x))))
            .map(|(a, y, x)| self.cell(a, y, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub confidence: f32,
    pub bbox: BBox,
}

/// Cap on detections kept per image after suppression.
pub const MAX_DETECTIONS: usize = 100;

/// Greedy per-class non-maximum suppression. Candidates are visited by
/// descending confidence (ties keep input order); a candidate is dropped when
/// its IoU with an already kept box of the same class exceeds `iou_threshold`.
pub fn nms(mut candidates: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    candidates.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for c in candidates {
        if kept.len() >= MAX_DETECTIONS {
            break;
        }
        if kept
            .iter()
            .all(|k| k.class != c.class || iou(&k.bbox, &c.bbox) <= iou_threshold)
        {
            kept.push(c);
        }
    }
    kept
}

/// Boxes with `objectness × best class score ≥ conf_threshold`, after NMS.
pub fn decode_detections<T: Real>(
    out: &DetectionOutput<T>,
    conf_threshold: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let candidates = out
        .cells()
        .filter_map(|c| {
            let (class, score) = c
                .class_scores
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, s)| if s > best.1 { (k, s) } else { best });
            let confidence = c.objectness * score;
            (confidence >= conf_threshold).then(|| Detection {
                class,
                confidence: confidence as f32,
                bbox: BBox::from_center(c.cx as f32, c.cy as f32, c.w as f32, c.h as f32),
            })
        })
        .collect();
    nms(candidates, nms_iou)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_anchor_head() -> DetectHead {
        DetectHead {
            anchors: vec![[10.0, 20.0], [30.0, 15.0]],
            stride: 8,
            class_count: 2,
        }
    }

    #[test]
    fn hand_decoded_cell() {
        let head = two_anchor_head();
        // 2x2 grid, every logit zero except at cell (gy=1, gx=0).
        let mut raw = Tensor::<f64>::zeros(&[head.channels(), 2, 2]);
        let set = |raw: &mut Tensor<f64>, a: usize, k: usize, v: f64| {
            let c = a * 7 + k;
            raw.data_mut()[(c * 2 + 1) * 2] = v;
        };
        // anchor 1: tx = ln 3 → σ = 0.75; ty = 0 → σ = 0.5; tw = 0; th = ln(1/3) → σ = 0.25
        set(&mut raw, 1, 0, 3f64.ln());
        set(&mut raw, 1, 3, (1.0f64 / 3.0).ln());
        set(&mut raw, 1, 4, 20.0);
        set(&mut raw, 1, 6, 20.0);
        let out = DetectionOutput::new(head, raw).unwrap();
        let c = out.cell(1, 1, 0);
        // cx = (0 + 1.5 − 0.5)·8 = 8; cy = (1 + 1 − 0.5)·8 = 12
        assert!((c.cx - 8.0).abs() < 1e-12);
        assert!((c.cy - 12.0).abs() < 1e-12);
        // w = 30·1² = 30; h = 15·0.5² = 3.75
        assert!((c.w - 30.0).abs() < 1e-12);
        assert!((c.h - 3.75).abs() < 1e-12);
        let dets = decode_detections(&out, 0.5, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class, 1);
        assert!((dets[0].bbox.x1 - (8.0 - 15.0)).abs() < 1e-5);
    }

    #[test]
    fn low_objectness_gives_nothing() {
        let head = two_anchor_head();
        let raw = Tensor::<f32>::full(&[head.channels(), 3, 3], -8.0);
        let out = DetectionOutput::new(head, raw).unwrap();
        assert!(decode_detections(&out, 0.01, 0.5).is_empty());
    }

    #[test]
    fn nms_keeps_highest_duplicate() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let d = |confidence, class| Detection { class, confidence, bbox: b };
        let kept = nms(vec![d(0.8, 0), d(0.9, 0)], 0.5);
        assert_eq!(kept, vec![d(0.9, 0)]);
        let kept = nms(vec![d(0.8, 1), d(0.9, 0)], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn output_shape_checked() {
        assert!(DetectionOutput::new(two_anchor_head(), Tensor::<f32>::zeros(&[13, 2, 2])).is_err());
    }
}
