//! YOLO-style composite loss: `(1 − IoU)` box regression on assigned cells,
//! binary cross-entropy for objectness over every cell and for classes over
//! assigned cells.

use serde::{Deserialize, Serialize};

use crate::bbox::GroundTruth;
use crate::error::{Error, Result};
use crate::graph::{DetectHead, DetectionOutput};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(rename = "box")]
    pub bbox: f64,
    pub objectness: f64,
    pub classification: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bbox: 0.05,
            objectness: 1.0,
            classification: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.bbox, self.objectness, self.classification]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::invalid("loss weights", "weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Loss value and its unweighted parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub bbox: f64,
    pub objectness: f64,
    pub classification: f64,
}

impl LossTerms {
    fn weighted(bbox: f64, objectness: f64, classification: f64, w: &LossWeights) -> Self {
        Self {
            total: w.bbox * bbox + w.objectness * objectness + w.classification * classification,
            bbox,
            objectness,
            classification,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.bbox.is_finite() && self.objectness.is_finite() && self.classification.is_finite()
    }
}

/// A truth box bound to one anchor slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub truth: usize,
    pub anchor: usize,
    pub gx: usize,
    pub gy: usize,
}

/// Each truth goes to the cell holding its centre and, within that cell, to
/// the anchor whose shape overlaps it best. A slot claimed twice keeps the
/// first truth.
pub fn assign_targets(head: &DetectHead, grid: (usize, usize), truths: &[GroundTruth]) -> Vec<Assignment> {
    let (gh, gw) = grid;
    let s = head.stride as f64;
    let mut out: Vec<Assignment> = Vec::with_capacity(truths.len());
    for (i, t) in truths.iter().enumerate() {
        let (cx, cy) = t.bbox.center();
        let gx = ((cx as f64 / s).floor().max(0.0) as usize).min(gw - 1);
        let gy = ((cy as f64 / s).floor().max(0.0) as usize).min(gh - 1);
        let (tw, th) = (t.bbox.width() as f64, t.bbox.height() as f64);
        let shape_iou = |a: &[f32; 2]| {
            let (aw, ah) = (a[0] as f64, a[1] as f64);
            let inter = aw.min(tw) * ah.min(th);
            inter / (aw * ah + tw * th - inter)
        };
        let anchor = (0..head.anchors.len())
            .fold(None, |best: Option<(usize, f64)>, a| {
                let v = shape_iou(&head.anchors[a]);
                match best {
                    Some(b) if b.1 >= v => Some(b),
                    _ => Some((a, v)),
                }
            })
            .map(|b| b.0)
            .unwrap_or(0);
        if !out.iter().any(|o| (o.anchor, o.gx, o.gy) == (anchor, gx, gy)) {
            out.push(Assignment {
                truth: i,
                anchor,
                gx,
                gy,
            });
        }
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, and its derivative.
#[inline]
pub fn bce_with_logits(x: f64, target: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
    (loss, sigmoid(x) - target)
}

/// IoU of centre-format boxes `p` and `t`, with the gradient with respect to
/// `p`.
pub fn iou_with_grad(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let [pcx, pcy, pw, ph] = p;
    let (px1, px2, py1, py2) = (pcx - pw / 2.0, pcx + pw / 2.0, pcy - ph / 2.0, pcy + ph / 2.0);
    let (tx1, tx2, ty1, ty2) = (t[0] - t[2] / 2.0, t[0] + t[2] / 2.0, t[1] - t[3] / 2.0, t[1] + t[3] / 2.0);
    let iw = px2.min(tx2) - px1.max(tx1);
    let ih = py2.min(ty2) - py1.max(ty1);
    let area_p = pw * ph;
    let area_t = t[2] * t[3];
    if iw <= 0.0 || ih <= 0.0 {
        // No overlap: IoU is zero and locally flat.
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let iou = inter / union;
    // d iw / d (cx, w), d ih / d (cy, h)
    let d2 = if px2 < tx2 { 1.0 } else { 0.0 };
    let d1 = if px1 > tx1 { -1.0 } else { 0.0 };
    let diw_dcx = d2 + d1;
    let diw_dw = 0.5 * d2 - 0.5 * d1;
    let e2 = if py2 < ty2 { 1.0 } else { 0.0 };
    let e1 = if py1 > ty1 { -1.0 } else { 0.0 };
    let dih_dcy = e2 + e1;
    let dih_dh = 0.5 * e2 - 0.5 * e1;
    let dinter = [diw_dcx * ih, dih_dcy * iw, diw_dw * ih, dih_dh * iw];
    let darea = [0.0, 0.0, ph, pw];
    let mut g = [0.0; 4];
    for k in 0..4 {
        let dunion = darea[k] - dinter[k];
        g[k] = (dinter[k] * union - inter * dunion) / (union * union);
    }
    (iou, g)
}

fn loss_impl<T: Real>(
    out: &DetectionOutput<T>,
    truths: &[GroundTruth],
    weights: &LossWeights,
    mut grad: Option<&mut [f64]>,
) -> LossTerms {
    let head = &out.head;
    let (gh, gw) = out.grid();
    let plane = gh * gw;
    let per = head.per_anchor();
    let raw = out.raw.data();
    let at = |a: usize, ch: usize, gy: usize, gx: usize| (a * per + ch) * plane + gy * gw + gx;
    let assigned = assign_targets(head, (gh, gw), truths);
    let cells = (head.anchors.len() * plane) as f64;

    let mut obj_target = vec![0.0f64; head.anchors.len() * plane];
    for a in &assigned {
        obj_target[a.anchor * plane + a.gy * gw + a.gx] = 1.0;
    }
    let mut obj = 0.0;
    for a in 0..head.anchors.len() {
        for cell in 0..plane {
            let idx = (a * per + 4) * plane + cell;
            let (l, d) = bce_with_logits(raw[idx].f64(), obj_target[a * plane + cell]);
            obj += l;
            if let Some(g) = grad.as_deref_mut() {
                g[idx] += weights.objectness * d / cells;
            }
        }
    }
    obj /= cells;

    let npos = assigned.len() as f64;
    let (mut bbox, mut cls) = (0.0, 0.0);
    let s = head.stride as f64;
    for a in &assigned {
        let t = &truths[a.truth];
        let (tcx, tcy) = t.bbox.center();
        let target = [tcx as f64, tcy as f64, t.bbox.width() as f64, t.bbox.height() as f64];
        let logits = [0, 1, 2, 3].map(|k| raw[at(a.anchor, k, a.gy, a.gx)].f64());
        let sg = logits.map(sigmoid);
        let anchor = head.anchors[a.anchor];
        let pred = [
            (a.gx as f64 + 2.0 * sg[0] - 0.5) * s,
            (a.gy as f64 + 2.0 * sg[1] - 0.5) * s,
            anchor[0] as f64 * (2.0 * sg[2]).powi(2),
            anchor[1] as f64 * (2.0 * sg[3]).powi(2),
        ];
        let (iou, diou) = iou_with_grad(pred, target);
        bbox += 1.0 - iou;
        if let Some(g) = grad.as_deref_mut() {
            // d pred / d logit
            let dp = [
                2.0 * s * sg[0] * (1.0 - sg[0]),
                2.0 * s * sg[1] * (1.0 - sg[1]),
                8.0 * anchor[0] as f64 * sg[2] * sg[2] * (1.0 - sg[2]),
                8.0 * anchor[1] as f64 * sg[3] * sg[3] * (1.0 - sg[3]),
            ];
            for k in 0..4 {
                g[at(a.anchor, k, a.gy, a.gx)] += weights.bbox * (-diou[k]) * dp[k] / npos;
            }
        }
        for c in 0..head.class_count {
            let idx = at(a.anchor, 5 + c, a.gy, a.gx);
            let target = if c == t.class { 1.0 } else { 0.0 };
            let (l, d) = bce_with_logits(raw[idx].f64(), target);
            cls += l;
            if let Some(g) = grad.as_deref_mut() {
                g[idx] += weights.classification * d / (npos * head.class_count as f64);
            }
        }
    }
    if npos > 0.0 {
        bbox /= npos;
        cls /= npos * head.class_count as f64;
    }
    LossTerms::weighted(bbox, obj, cls, weights)
}

/// Loss of one image's head output.
pub fn yolo_loss<T: Real>(out: &DetectionOutput<T>, truths: &[GroundTruth], weights: &LossWeights) -> LossTerms {
    loss_impl(out, truths, weights, None)
}

/// [`yolo_loss`] and its gradient with respect to `out.raw`.
pub fn yolo_loss_grad<T: Real>(
    out: &DetectionOutput<T>,
    truths: &[GroundTruth],
    weights: &LossWeights,
) -> (LossTerms, Tensor<T>) {
    let mut g = vec![0.0f64; out.raw.len()];
    let terms = loss_impl(out, truths, weights, Some(&mut g));
    let grad = Tensor::new(out.raw.shape().to_vec(), g.into_iter().map(T::of).collect())
        .expect("gradient matches output shape");
    (terms, grad)
}

/// Mean loss over a batched head tensor `(N, C, G, G)` and its gradient.
pub fn batch_loss_grad<T: Real>(
    head: &DetectHead,
    raw: &Tensor<T>,
    truths: &[&[GroundTruth]],
    weights: &LossWeights,
) -> Result<(LossTerms, Tensor<T>)> {
    let (n, c, gh, gw) = raw.dims4("batch_loss")?;
    if n != truths.len() || c != head.channels() {
        return Err(Error::shape("batch_loss", &[truths.len(), head.channels(), gh, gw], raw.shape()));
    }
    let inv = 1.0 / n as f64;
    let mut sum = LossTerms::default();
    let mut grad = Vec::with_capacity(raw.len());
    for (i, t) in truths.iter().enumerate() {
        let item = Tensor::new(vec![c, gh, gw], raw.item(i).to_vec())?;
        let out = DetectionOutput::new(head.clone(), item)?;
        let (terms, g) = yolo_loss_grad(&out, t, weights);
        sum.total += terms.total;
        sum.bbox += terms.bbox;
        sum.objectness += terms.objectness;
        sum.classification += terms.classification;
        grad.extend(g.data().iter().map(|v| T::of(v.f64() * inv)));
    }
    let mean = LossTerms {
        total: sum.total * inv,
        bbox: sum.bbox * inv,
        objectness: sum.objectness * inv,
        classification: sum.classification * inv,
    };
    Ok((mean, Tensor::new(raw.shape().to_vec(), grad)?))
}
