//! Bounding-box algebra: IoU, Complete IoU, and non-maximum suppression.
//!
//! All functions are pure and operate on immutable values; they are safe to
//! call from any number of threads.

use std::ops::{Add, Div, Mul, Sub};

use thiserror::Error;

/// Guard against division by zero in the CIoU aspect term.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box dimensions must be positive and finite, got w={w}, h={h}")]
    NonPositiveSize { w: f64, h: f64 },
    #[error("box center must be finite, got cx={cx}, cy={cy}")]
    NonFiniteCenter { cx: f64, cy: f64 },
    #[error("{name} must lie in [0,1], got {value}")]
    ScoreOutOfRange { name: &'static str, value: f64 },
}

/// Axis-aligned rectangle in image pixel coordinates, stored in center form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(w > 0.0) || !(h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(GeometryError::NonPositiveSize { w, h });
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(GeometryError::NonFiniteCenter { cx, cy });
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Build from corner form (x1, y1) top-left, (x2, y2) bottom-right.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// Build from COCO-style corner form `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Corner form (x1, y1, x2, y2).
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// COCO-style corner form `[x, y, w, h]`.
    pub fn xywh(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }
}

/// A decoded detection: box plus class and the two head scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub cls_score: f64,
    pub obj_score: f64,
}

impl Detection {
    pub fn new(
        bbox: BBox,
        class_id: usize,
        cls_score: f64,
        obj_score: f64,
    ) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&cls_score) {
            return Err(GeometryError::ScoreOutOfRange {
                name: "cls_score",
                value: cls_score,
            });
        }
        if !(0.0..=1.0).contains(&obj_score) {
            return Err(GeometryError::ScoreOutOfRange {
                name: "obj_score",
                value: obj_score,
            });
        }
        Ok(Self {
            bbox,
            class_id,
            cls_score,
            obj_score,
        })
    }

    /// Combined score used for ranking and pseudo-label partitioning.
    pub fn score(&self) -> f64 {
        self.cls_score * self.obj_score
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Minimal numeric interface shared by plain floats and dual numbers so the
/// CIoU value path and its gradient path cannot diverge.
trait Num:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self>
{
    fn constant(v: f64) -> Self;
    fn atan(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
}

impl Num for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn minimum(self, other: Self) -> Self {
        self.min(other)
    }
}

/// Forward-mode dual number carrying four tangents (one per box parameter).
#[derive(Debug, Clone, Copy)]
struct Dual4 {
    v: f64,
    d: [f64; 4],
}

impl Dual4 {
    fn var(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 4];
        d[axis] = 1.0;
        Self { v, d }
    }
}

impl Add for Dual4 {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            v: self.v + rhs.v,
            d: [
                self.d[0] + rhs.d[0],
                self.d[1] + rhs.d[1],
                self.d[2] + rhs.d[2],
                self.d[3] + rhs.d[3],
            ],
        }
    }
}

impl Sub for Dual4 {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self {
            v: self.v - rhs.v,
            d: [
                self.d[0] - rhs.d[0],
                self.d[1] - rhs.d[1],
                self.d[2] - rhs.d[2],
                self.d[3] - rhs.d[3],
            ],
        }
    }
}

impl Mul for Dual4 {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self {
            v: self.v * rhs.v,
            d: [
                self.d[0] * rhs.v + self.v * rhs.d[0],
                self.d[1] * rhs.v + self.v * rhs.d[1],
                self.d[2] * rhs.v + self.v * rhs.d[2],
                self.d[3] * rhs.v + self.v * rhs.d[3],
            ],
        }
    }
}

impl Div for Dual4 {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        Self {
            v,
            d: [
                (self.d[0] - v * rhs.d[0]) * inv,
                (self.d[1] - v * rhs.d[1]) * inv,
                (self.d[2] - v * rhs.d[2]) * inv,
                (self.d[3] - v * rhs.d[3]) * inv,
            ],
        }
    }
}

impl Num for Dual4 {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }
    fn atan(self) -> Self {
        let scale = 1.0 / (1.0 + self.v * self.v);
        Self {
            v: self.v.atan(),
            d: [
                self.d[0] * scale,
                self.d[1] * scale,
                self.d[2] * scale,
                self.d[3] * scale,
            ],
        }
    }
    fn maximum(self, other: Self) -> Self {
        if self.v >= other.v {
            self
        } else {
            other
        }
    }
    fn minimum(self, other: Self) -> Self {
        if self.v <= other.v {
            self
        } else {
            other
        }
    }
}

/// CIoU over generic scalars; `p` and `g` are (cx, cy, w, h).
fn ciou_impl<T: Num>(p: [T; 4], g: [T; 4]) -> T {
    let half = T::constant(0.5);
    let zero = T::constant(0.0);

    let px1 = p[0] - p[2] * half;
    let py1 = p[1] - p[3] * half;
    let px2 = p[0] + p[2] * half;
    let py2 = p[1] + p[3] * half;
    let gx1 = g[0] - g[2] * half;
    let gy1 = g[1] - g[3] * half;
    let gx2 = g[0] + g[2] * half;
    let gy2 = g[1] + g[3] * half;

    let iw = (px2.minimum(gx2) - px1.maximum(gx1)).maximum(zero);
    let ih = (py2.minimum(gy2) - py1.maximum(gy1)).maximum(zero);
    let inter = iw * ih;
    let union = p[2] * p[3] + g[2] * g[3] - inter;
    let iou = inter / union;

    let dx = p[0] - g[0];
    let dy = p[1] - g[1];
    let rho2 = dx * dx + dy * dy;
    let cw = px2.maximum(gx2) - px1.minimum(gx1);
    let ch = py2.maximum(gy2) - py1.minimum(gy1);
    let c2 = cw * cw + ch * ch + T::constant(GEOM_EPS);

    let coeff = T::constant(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let diff = (g[2] / g[3]).atan() - (p[2] / p[3]).atan();
    let v = coeff * diff * diff;
    let alpha = v / (T::constant(1.0) - iou + v + T::constant(GEOM_EPS));

    iou - rho2 / c2 - alpha * v
}

/// Complete IoU: IoU penalized by normalized center distance and
/// aspect-ratio inconsistency. Always `<= iou(pred, gt)` and equals 1 only
/// for identical boxes.
pub fn ciou(pred: &BBox, gt: &BBox) -> f64 {
    ciou_impl::<f64>(
        [pred.cx, pred.cy, pred.w, pred.h],
        [gt.cx, gt.cy, gt.w, gt.h],
    )
}

/// CIoU value together with its gradient with respect to the predicted
/// box's (cx, cy, w, h).
pub fn ciou_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let p = [
        Dual4::var(pred.cx, 0),
        Dual4::var(pred.cy, 1),
        Dual4::var(pred.w, 2),
        Dual4::var(pred.h, 3),
    ];
    let g = [
        Dual4::constant(gt.cx),
        Dual4::constant(gt.cy),
        Dual4::constant(gt.w),
        Dual4::constant(gt.h),
    ];
    let out = ciou_impl(p, g);
    (out.v, out.d)
}

/// NMS configuration. Defaults are the pseudo-label settings
/// (score 0.01, IoU 0.65).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    pub score_thresh: f64,
    pub iou_thresh: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.01,
            iou_thresh: 0.65,
        }
    }
}

/// Class-wise greedy non-maximum suppression.
///
/// Detections below `score_thresh` are dropped first; the rest are visited
/// in descending combined-score order (ties broken by lower original index)
/// and kept iff their IoU with every already-kept detection of the same
/// class is `<= iou_thresh`. Output is score-descending.
pub fn nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score() >= cfg.score_thresh)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score()
            .partial_cmp(&dets[a].score())
            .expect("detection scores are finite")
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id
                && iou(&dets[k].bbox, &dets[i].bbox) > cfg.iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}
