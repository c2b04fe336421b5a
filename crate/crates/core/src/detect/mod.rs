//! Decoding of sparse head outputs into boxes, and class-wise suppression.
//!
//! Box centers are the voxel index plus the raw regression offset, scaled by
//! the head stride; there is no half-cell shift. Objectness and class values
//! are logits and pass through a sigmoid here.

use serde::{Deserialize, Serialize};

use crate::events::SensorGeometry;
use crate::network::HeadOutput;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.1;
pub const DEFAULT_NMS_IOU: f64 = 0.65;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub head: usize,
    pub voxel: (u32, u32),
}

impl Detection {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, o: &Detection) -> f64 {
        let ix = ((self.cx + self.w / 2.0).min(o.cx + o.w / 2.0) - (self.cx - self.w / 2.0).max(o.cx - o.w / 2.0)).max(0.0);
        let iy = ((self.cy + self.h / 2.0).min(o.cy + o.h / 2.0) - (self.cy - self.h / 2.0).max(o.cy - o.h / 2.0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes every node of one head whose score reaches `threshold`.
///
/// Boxes are kept inside a guard band of twice the image: centers are clamped
/// to `[-W/2, 3W/2]` and sizes to `(0, 2W]` (likewise for `y`).
pub fn decode(head: &HeadOutput, geometry: SensorGeometry, threshold: f64) -> Vec<Detection> {
    let (gx, gy) = head.grid;
    let (w_img, h_img) = (f64::from(geometry.width), f64::from(geometry.height));
    let (sx, sy) = (w_img / f64::from(gx), h_img / f64::from(gy));
    let mut out = Vec::new();
    for n in &head.nodes {
        let Some((class, p)) = n
            .cls
            .iter()
            .map(|&c| sigmoid(c))
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((i, p)),
            })
        else {
            continue;
        };
        let score = sigmoid(n.obj) * p;
        if score.is_nan() || score < threshold {
            continue;
        }
        let size = |r: f64, s: f64, limit: f64| (r.exp() * s).clamp(f64::MIN_POSITIVE, 2.0 * limit);
        out.push(Detection {
            class,
            score,
            cx: ((f64::from(n.voxel.0) + n.reg[0]) * sx).clamp(-w_img / 2.0, 1.5 * w_img),
            cy: ((f64::from(n.voxel.1) + n.reg[1]) * sy).clamp(-h_img / 2.0, 1.5 * h_img),
            w: size(n.reg[2], sx, w_img),
            h: size(n.reg[3], sy, h_img),
            head: head.head,
            voxel: n.voxel,
        });
    }
    out
}

/// Decodes all heads in order.
pub fn decode_all(heads: &[HeadOutput], geometry: SensorGeometry, threshold: f64) -> Vec<Detection> {
    heads.iter().flat_map(|h| decode(h, geometry, threshold)).collect()
}

/// Greedy class-wise suppression. Candidates are visited by descending score
/// (ties by input order) and kept if their IoU with every kept box of the
/// same class is below `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &detections[i];
        if kept.iter().all(|k| k.class != d.class || k.iou(d) < iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}
