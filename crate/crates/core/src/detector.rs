//! Dense grid head: per-cell/per-anchor predictions over three branches
//! (classification, box regression, objectness), supervised label assignment
//! with multi-positive sampling, CIoU objectness targets, and decoding of
//! raw grids into detections.
//!
//! Channel layout per anchor slot: `[cls logits (C), tx, ty, tw, th, obj]`,
//! packed anchor-major into the head's output channels.
//!
//! Box decode follows the sigmoid-offset / squared-sigmoid-scale form:
//! `bx = (2*sig(tx) - 0.5 + cell_x) * stride`, `bw = prior_w * (2*sig(tw))^2`.
//! Zero logits therefore decode to a box at the cell center with the anchor
//! prior's dimensions.

use thiserror::Error;

use crate::geometry::{ciou, BBox, Detection};
use crate::netcore::{sigmoid, ArchConfig, NetError, Tensor};

/// A ground-truth box matches an anchor prior when
/// `max(wg/wa, wa/wg, hg/ha, ha/hg)` stays below this bound.
pub const ANCHOR_RATIO_BOUND: f64 = 4.0;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("class id {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange { class_id: usize, num_classes: usize },
    #[error("prediction grid mismatch: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Spatial layout of one detection scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSpec {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

/// Anchor priors (w, h) in pixels for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorScale {
    pub spec: ScaleSpec,
    pub priors: Vec<(f64, f64)>,
}

/// All scales' anchors, finest scale first.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub scales: Vec<AnchorScale>,
    pub num_classes: usize,
}

impl AnchorSet {
    pub fn from_arch(arch: &ArchConfig) -> Self {
        let dims = arch.grid_dims();
        let strides = arch.scale_strides();
        let scales = arch
            .anchors
            .iter()
            .zip(dims)
            .zip(strides)
            .map(|((priors, (h, w)), stride)| AnchorScale {
                spec: ScaleSpec { stride, h, w },
                priors: priors.clone(),
            })
            .collect();
        Self {
            scales,
            num_classes: arch.num_classes,
        }
    }
}

/// Raw head output for one scale plus the metadata to interpret it.
#[derive(Debug, Clone)]
pub struct ScaleGrid {
    pub raw: Tensor,
    pub spec: ScaleSpec,
    pub priors: Vec<(f64, f64)>,
    pub num_classes: usize,
}

impl ScaleGrid {
    pub fn num_anchors(&self) -> usize {
        self.priors.len()
    }

    #[inline]
    fn ch(&self, anchor: usize, k: usize) -> usize {
        anchor * (self.num_classes + 5) + k
    }

    #[inline]
    pub fn cls_logit(&self, anchor: usize, class: usize, y: usize, x: usize) -> f64 {
        self.raw.at3(self.ch(anchor, class), y, x)
    }

    #[inline]
    pub fn reg(&self, anchor: usize, y: usize, x: usize) -> [f64; 4] {
        let c = self.num_classes;
        [
            self.raw.at3(self.ch(anchor, c), y, x),
            self.raw.at3(self.ch(anchor, c + 1), y, x),
            self.raw.at3(self.ch(anchor, c + 2), y, x),
            self.raw.at3(self.ch(anchor, c + 3), y, x),
        ]
    }

    #[inline]
    pub fn obj_logit(&self, anchor: usize, y: usize, x: usize) -> f64 {
        self.raw.at3(self.ch(anchor, self.num_classes + 4), y, x)
    }

    /// Flat channel indices of the slot's channels, for gradient writes.
    #[inline]
    pub fn cls_channel(&self, anchor: usize, class: usize) -> usize {
        self.ch(anchor, class)
    }

    #[inline]
    pub fn reg_channel(&self, anchor: usize, k: usize) -> usize {
        self.ch(anchor, self.num_classes + k)
    }

    #[inline]
    pub fn obj_channel(&self, anchor: usize) -> usize {
        self.ch(anchor, self.num_classes + 4)
    }
}

/// Dense per-cell, per-anchor raw outputs across detection scales.
#[derive(Debug, Clone)]
pub struct PredictionGrid {
    pub scales: Vec<ScaleGrid>,
}

impl PredictionGrid {
    /// Wrap raw network outputs (finest scale first).
    pub fn from_raw(outputs: Vec<Tensor>, anchors: &AnchorSet) -> Result<Self, DetectorError> {
        if outputs.len() != anchors.scales.len() {
            return Err(DetectorError::BadGrid(format!(
                "expected {} scales, got {}",
                anchors.scales.len(),
                outputs.len()
            )));
        }
        let mut scales = Vec::with_capacity(outputs.len());
        for (raw, a) in outputs.into_iter().zip(&anchors.scales) {
            let channels = a.priors.len() * (anchors.num_classes + 5);
            if raw.shape() != [channels, a.spec.h, a.spec.w] {
                return Err(DetectorError::BadGrid(format!(
                    "scale tensor shape {:?}, expected [{channels}, {}, {}]",
                    raw.shape(),
                    a.spec.h,
                    a.spec.w
                )));
            }
            scales.push(ScaleGrid {
                raw,
                spec: a.spec,
                priors: a.priors.clone(),
                num_classes: anchors.num_classes,
            });
        }
        Ok(Self { scales })
    }
}

/// Training state of one cell/anchor slot.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotTarget {
    Background,
    Ignored,
    /// Full supervision: one-hot class, box target, CIoU objectness target.
    /// `p_score` is present when the slot came from a reliable pseudo label.
    Positive {
        class_id: usize,
        gt: BBox,
        obj_target: f64,
        p_score: Option<f64>,
    },
    /// Soft objectness supervision from an uncertain pseudo label. The box
    /// target is present only for labels with objectness above 0.99, which
    /// additionally receive regression supervision.
    Soft {
        obj_target: f64,
        p_score: f64,
        reg_target: Option<BBox>,
    },
}

#[derive(Debug, Clone)]
pub struct TargetScale {
    pub slots: Vec<SlotTarget>,
    pub spec: ScaleSpec,
    pub num_anchors: usize,
}

impl TargetScale {
    #[inline]
    pub fn idx(&self, anchor: usize, y: usize, x: usize) -> usize {
        (anchor * self.spec.h + y) * self.spec.w + x
    }

    pub fn slot(&self, anchor: usize, y: usize, x: usize) -> &SlotTarget {
        &self.slots[self.idx(anchor, y, x)]
    }

    pub fn slot_mut(&mut self, anchor: usize, y: usize, x: usize) -> &mut SlotTarget {
        let i = self.idx(anchor, y, x);
        &mut self.slots[i]
    }
}

/// Per-cell, per-anchor training targets with the same spatial layout as the
/// prediction grid.
#[derive(Debug, Clone)]
pub struct TargetGrid {
    pub scales: Vec<TargetScale>,
}

impl TargetGrid {
    /// All-background grid matching the anchor layout.
    pub fn background(anchors: &AnchorSet) -> Self {
        let scales = anchors
            .scales
            .iter()
            .map(|a| TargetScale {
                slots: vec![SlotTarget::Background; a.priors.len() * a.spec.h * a.spec.w],
                spec: a.spec,
                num_anchors: a.priors.len(),
            })
            .collect();
        Self { scales }
    }

    pub fn count_positives(&self) -> usize {
        self.scales
            .iter()
            .flat_map(|s| &s.slots)
            .filter(|s| matches!(s, SlotTarget::Positive { .. }))
            .count()
    }

    pub fn count_soft(&self) -> usize {
        self.scales
            .iter()
            .flat_map(|s| &s.slots)
            .filter(|s| matches!(s, SlotTarget::Soft { .. }))
            .count()
    }
}

/// Shape-only IoU of two (w, h) pairs placed concentrically; used to rank
/// competing claims on one slot.
fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn anchor_matches(gt: &BBox, prior: (f64, f64)) -> bool {
    let rw = (gt.w() / prior.0).max(prior.0 / gt.w());
    let rh = (gt.h() / prior.1).max(prior.1 / gt.h());
    rw.max(rh) < ANCHOR_RATIO_BOUND
}

/// The GT's own cell plus the two adjacent cells nearest its sub-cell
/// offset, clipped at the grid border.
fn candidate_cells(gt: &BBox, spec: &ScaleSpec) -> Vec<(usize, usize)> {
    let fx = gt.cx() / spec.stride as f64;
    let fy = gt.cy() / spec.stride as f64;
    let gx = (fx.floor() as isize).clamp(0, spec.w as isize - 1);
    let gy = (fy.floor() as isize).clamp(0, spec.h as isize - 1);
    let step_x = if fx - (gx as f64) < 0.5 { -1 } else { 1 };
    let step_y = if fy - (gy as f64) < 0.5 { -1 } else { 1 };
    let mut cells = vec![(gx, gy), (gx + step_x, gy), (gx, gy + step_y)];
    cells.retain(|&(x, y)| x >= 0 && y >= 0 && x < spec.w as isize && y < spec.h as isize);
    cells.into_iter().map(|(x, y)| (x as usize, y as usize)).collect()
}

/// One resolved claim: which item owns a slot and how well its shape fits
/// the anchor prior.
#[derive(Debug, Clone, Copy)]
struct Claim {
    item: usize,
    fit: f64,
}

/// All (scale, anchor, y, x) slots a box is assigned to under the
/// multi-positive rule, together with the shape fit to the matched prior.
pub(crate) fn matched_slots(
    gt: &BBox,
    anchors: &AnchorSet,
) -> Vec<(usize, usize, usize, usize, f64)> {
    let mut out = Vec::new();
    for (s, scale) in anchors.scales.iter().enumerate() {
        let cells = candidate_cells(gt, &scale.spec);
        for (a, &prior) in scale.priors.iter().enumerate() {
            if !anchor_matches(gt, prior) {
                continue;
            }
            let fit = shape_iou((gt.w(), gt.h()), prior);
            for &(x, y) in &cells {
                out.push((s, a, y, x, fit));
            }
        }
    }
    out
}

/// Resolve multi-positive claims for a list of boxes. When two items claim
/// the same slot the one with the higher shape IoU to the anchor prior wins;
/// ties keep the earlier item.
fn claim_slots(boxes: &[BBox], anchors: &AnchorSet) -> Vec<Vec<Option<Claim>>> {
    let mut claims: Vec<Vec<Option<Claim>>> = anchors
        .scales
        .iter()
        .map(|scale| vec![None; scale.priors.len() * scale.spec.h * scale.spec.w])
        .collect();
    for (item, gt) in boxes.iter().enumerate() {
        for (s, a, y, x, fit) in matched_slots(gt, anchors) {
            let spec = anchors.scales[s].spec;
            let idx = (a * spec.h + y) * spec.w + x;
            let better = match claims[s][idx] {
                None => true,
                Some(c) => fit > c.fit,
            };
            if better {
                claims[s][idx] = Some(Claim { item, fit });
            }
        }
    }
    claims
}

/// Supervised label assignment. Every matched (anchor, cell) slot becomes
/// positive for its ground truth; everything else stays background. The
/// objectness target starts at zero and is filled from the current
/// predictions by [`fill_objectness_targets`].
pub fn assign_labels(
    gts: &[(usize, BBox)],
    anchors: &AnchorSet,
) -> Result<TargetGrid, DetectorError> {
    assign_with_scores(gts, anchors, None)
}

/// Shared assignment core: `scores[i]` attaches a pseudo-label score to the
/// i-th item's slots (used by the pseudo-label assigner).
pub(crate) fn assign_with_scores(
    gts: &[(usize, BBox)],
    anchors: &AnchorSet,
    scores: Option<&[f64]>,
) -> Result<TargetGrid, DetectorError> {
    for &(class_id, _) in gts {
        if class_id >= anchors.num_classes {
            return Err(DetectorError::ClassOutOfRange {
                class_id,
                num_classes: anchors.num_classes,
            });
        }
    }
    if let Some(s) = scores {
        debug_assert_eq!(s.len(), gts.len());
    }
    let boxes: Vec<BBox> = gts.iter().map(|&(_, b)| b).collect();
    let claims = claim_slots(&boxes, anchors);
    let mut grid = TargetGrid::background(anchors);
    for (scale, scale_claims) in grid.scales.iter_mut().zip(claims) {
        for (slot, claim) in scale.slots.iter_mut().zip(scale_claims) {
            if let Some(c) = claim {
                let (class_id, gt) = gts[c.item];
                *slot = SlotTarget::Positive {
                    class_id,
                    gt,
                    obj_target: 0.0,
                    p_score: scores.map(|s| s[c.item]),
                };
            }
        }
    }
    Ok(grid)
}

/// Clamped CIoU between a predicted and an assigned box, used as the
/// objectness cross-entropy target. Equals 1 only when the boxes coincide.
pub fn objectness_target(pred: &BBox, gt: &BBox) -> f64 {
    ciou(pred, gt).clamp(0.0, 1.0)
}

/// Fill every positive slot's objectness target from the current predictions.
/// Soft slots keep the objectness score they were given.
pub fn fill_objectness_targets(targets: &mut TargetGrid, pred: &PredictionGrid) {
    for (tscale, pscale) in targets.scales.iter_mut().zip(&pred.scales) {
        for a in 0..tscale.num_anchors {
            for y in 0..tscale.spec.h {
                for x in 0..tscale.spec.w {
                    let slot = tscale.slot_mut(a, y, x);
                    if let SlotTarget::Positive { gt, obj_target, .. } = slot {
                        let decoded = decode_box(
                            &pscale.reg(a, y, x),
                            pscale.spec.stride as f64,
                            (x, y),
                            pscale.priors[a],
                        );
                        *obj_target = objectness_target(&decoded, gt);
                    }
                }
            }
        }
    }
}

/// Decode the regression channels of one slot into an absolute box.
pub fn decode_box(t: &[f64; 4], stride: f64, cell: (usize, usize), prior: (f64, f64)) -> BBox {
    let bx = (2.0 * sigmoid(t[0]) - 0.5 + cell.0 as f64) * stride;
    let by = (2.0 * sigmoid(t[1]) - 0.5 + cell.1 as f64) * stride;
    let bw = prior.0 * (2.0 * sigmoid(t[2])).powi(2);
    let bh = prior.1 * (2.0 * sigmoid(t[3])).powi(2);
    BBox::new(bx, by, bw, bh).expect("decoded dims are strictly positive")
}

/// Decode plus the diagonal Jacobian d(bx,by,bw,bh)/d(tx,ty,tw,th).
pub fn decode_box_grad(
    t: &[f64; 4],
    stride: f64,
    cell: (usize, usize),
    prior: (f64, f64),
) -> (BBox, [f64; 4]) {
    let bbox = decode_box(t, stride, cell, prior);
    let sig = |v: f64| sigmoid(v);
    let dsig = |v: f64| {
        let s = sigmoid(v);
        s * (1.0 - s)
    };
    let jac = [
        2.0 * dsig(t[0]) * stride,
        2.0 * dsig(t[1]) * stride,
        8.0 * prior.0 * sig(t[2]) * dsig(t[2]),
        8.0 * prior.1 * sig(t[3]) * dsig(t[3]),
    ];
    (bbox, jac)
}

/// Inverse of [`decode_box`]. Returns `None` when the box cannot be
/// expressed from this slot (center offset outside (-0.5, 1.5) cells or
/// dimension ratio outside (0, 4) of the prior).
pub fn encode_box(
    b: &BBox,
    stride: f64,
    cell: (usize, usize),
    prior: (f64, f64),
) -> Option<[f64; 4]> {
    let logit = |p: f64| {
        if p <= 0.0 || p >= 1.0 {
            None
        } else {
            Some((p / (1.0 - p)).ln())
        }
    };
    let px = (b.cx() / stride - cell.0 as f64 + 0.5) / 2.0;
    let py = (b.cy() / stride - cell.1 as f64 + 0.5) / 2.0;
    let pw = (b.w() / prior.0).sqrt() / 2.0;
    let ph = (b.h() / prior.1).sqrt() / 2.0;
    Some([logit(px)?, logit(py)?, logit(pw)?, logit(ph)?])
}

/// Decode a full prediction grid: every cell/anchor slot emits its
/// argmax-class detection.
pub fn decode(grid: &PredictionGrid) -> Vec<Detection> {
    let mut dets = Vec::new();
    for scale in &grid.scales {
        for a in 0..scale.num_anchors() {
            for y in 0..scale.spec.h {
                for x in 0..scale.spec.w {
                    let obj = sigmoid(scale.obj_logit(a, y, x));
                    let mut best_class = 0;
                    let mut best_logit = f64::NEG_INFINITY;
                    for c in 0..scale.num_classes {
                        let l = scale.cls_logit(a, c, y, x);
                        if l > best_logit {
                            best_logit = l;
                            best_class = c;
                        }
                    }
                    let bbox = decode_box(
                        &scale.reg(a, y, x),
                        scale.spec.stride as f64,
                        (x, y),
                        scale.priors[a],
                    );
                    dets.push(
                        Detection::new(bbox, best_class, sigmoid(best_logit), obj)
                            .expect("sigmoid scores lie in [0,1]"),
                    );
                }
            }
        }
    }
    dets
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_anchors() -> AnchorSet {
        AnchorSet::from_arch(&ArchConfig::default_desk())
    }

    fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    /// Independent enumeration of the assignment rule for the oracle tests.
    fn enumerate_expected_slots(
        gt: &BBox,
        anchors: &AnchorSet,
    ) -> Vec<(usize, usize, usize, usize)> {
        let mut slots = Vec::new();
        for (s, scale) in anchors.scales.iter().enumerate() {
            let stride = scale.spec.stride as f64;
            let fx = gt.cx() / stride;
            let fy = gt.cy() / stride;
            let gx = (fx.floor() as isize).clamp(0, scale.spec.w as isize - 1);
            let gy = (fy.floor() as isize).clamp(0, scale.spec.h as isize - 1);
            let nx = if fx - (gx as f64) < 0.5 { gx - 1 } else { gx + 1 };
            let ny = if fy - (gy as f64) < 0.5 { gy - 1 } else { gy + 1 };
            let cells = [(gx, gy), (nx, gy), (gx, ny)];
            for (a, &(aw, ah)) in scale.priors.iter().enumerate() {
                let r = (gt.w() / aw)
                    .max(aw / gt.w())
                    .max(gt.h() / ah)
                    .max(ah / gt.h());
                if r >= ANCHOR_RATIO_BOUND {
                    continue;
                }
                for &(x, y) in &cells {
                    if x >= 0
                        && y >= 0
                        && (x as usize) < scale.spec.w
                        && (y as usize) < scale.spec.h
                    {
                        slots.push((s, a, y as usize, x as usize));
                    }
                }
            }
        }
        slots.sort_unstable();
        slots.dedup();
        slots
    }

    fn positive_slots(grid: &TargetGrid) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        for (s, scale) in grid.scales.iter().enumerate() {
            for a in 0..scale.num_anchors {
                for y in 0..scale.spec.h {
                    for x in 0..scale.spec.w {
                        if matches!(scale.slot(a, y, x), SlotTarget::Positive { .. }) {
                            out.push((s, a, y, x));
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn no_ground_truth_gives_all_background() {
        let grid = assign_labels(&[], &desk_anchors()).unwrap();
        assert_eq!(grid.count_positives(), 0);
        assert!(grid.scales[0]
            .slots
            .iter()
            .all(|s| *s == SlotTarget::Background));
    }

    #[test]
    fn single_gt_with_one_matching_anchor_fills_three_slots() {
        // 20x20 box only matches the (20, 20) prior under the ratio bound 4:
        // 12 -> ratio 20/12 = 1.67 matches too, so shrink the others.
        let arch = ArchConfig {
            anchors: vec![vec![(4.0, 4.0), (20.0, 20.0), (120.0, 120.0)]],
            ..ArchConfig::default_desk()
        };
        let anchors = AnchorSet::from_arch(&arch);
        let gt = bb(20.0, 36.0, 20.0, 20.0);
        let grid = assign_labels(&[(1, gt)], &anchors).unwrap();
        let got = positive_slots(&grid);
        assert_eq!(got.len(), 3, "center cell plus two adjacent cells");
        assert_eq!(got, enumerate_expected_slots(&gt, &anchors));
        for (s, a, y, x) in got {
            match grid.scales[s].slot(a, y, x) {
                SlotTarget::Positive {
                    class_id,
                    gt: slot_gt,
                    p_score,
                    ..
                } => {
                    assert_eq!(*class_id, 1);
                    assert_eq!(slot_gt, &gt);
                    assert!(p_score.is_none());
                }
                other => panic!("expected positive, got {other:?}"),
            }
        }
    }

    #[test]
    fn gt_mismatching_every_anchor_yields_no_positives() {
        let anchors = desk_anchors();
        // 2x2 box vs the smallest 12x12 prior: ratio 6 exceeds the bound.
        let grid = assign_labels(&[(0, bb(30.0, 30.0, 2.0, 2.0))], &anchors).unwrap();
        assert_eq!(grid.count_positives(), 0);
    }

    #[test]
    fn assignment_matches_enumeration_on_random_inputs() {
        let anchors = desk_anchors();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let gt = bb(
                rng.random_range(4.0..60.0),
                rng.random_range(4.0..60.0),
                rng.random_range(4.0..40.0),
                rng.random_range(4.0..40.0),
            );
            let grid = assign_labels(&[(0, gt)], &anchors).unwrap();
            assert_eq!(positive_slots(&grid), enumerate_expected_slots(&gt, &anchors));
        }
    }

    #[test]
    fn assignment_is_permutation_invariant_for_distinct_fits() {
        let anchors = desk_anchors();
        let gts = vec![
            (0usize, bb(20.0, 20.0, 14.0, 14.0)),
            (1, bb(21.0, 21.0, 26.0, 26.0)),
            (2, bb(50.0, 50.0, 18.0, 12.0)),
        ];
        let fwd = assign_labels(&gts, &anchors).unwrap();
        let mut rev = gts.clone();
        rev.reverse();
        let bwd = assign_labels(&rev, &anchors).unwrap();
        for (a, b) in fwd.scales.iter().zip(&bwd.scales) {
            assert_eq!(a.slots, b.slots);
        }
    }

    #[test]
    fn conflicting_claims_resolve_to_better_anchor_fit() {
        let arch = ArchConfig {
            anchors: vec![vec![(20.0, 20.0)]],
            ..ArchConfig::default_desk()
        };
        let anchors = AnchorSet::from_arch(&arch);
        // Same center cell; the 20x20 box fits the prior better than 11x11.
        let good = bb(20.0, 20.0, 20.0, 20.0);
        let poor = bb(20.5, 20.5, 11.0, 11.0);
        let grid = assign_labels(&[(0, poor), (1, good)], &anchors).unwrap();
        let s = &grid.scales[0];
        match s.slot(0, 2, 2) {
            SlotTarget::Positive { class_id, .. } => assert_eq!(*class_id, 1),
            other => panic!("expected positive, got {other:?}"),
        }
    }

    #[test]
    fn class_out_of_range_is_rejected() {
        let anchors = desk_anchors();
        assert!(matches!(
            assign_labels(&[(7, bb(20.0, 20.0, 12.0, 12.0))], &anchors),
            Err(DetectorError::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn objectness_target_examples() {
        let a = bb(20.0, 20.0, 10.0, 10.0);
        assert_eq!(objectness_target(&a, &a), 1.0);
        let far = bb(1000.0, 1000.0, 10.0, 10.0);
        assert_eq!(objectness_target(&a, &far), 0.0);
        // Concentric boxes with equal aspect: CIoU reduces to plain IoU.
        let b = bb(20.0, 20.0, 20.0, 20.0);
        assert!((objectness_target(&a, &b) - crate::geometry::iou(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn zero_logits_decode_to_cell_center_with_prior_dims() {
        let anchors = desk_anchors();
        let raw = Tensor::zeros(&[3 * 8, 8, 8]);
        let grid = PredictionGrid::from_raw(vec![raw], &anchors).unwrap();
        let dets = decode(&grid);
        assert_eq!(dets.len(), 3 * 8 * 8);
        for (i, d) in dets.iter().enumerate() {
            assert!((d.cls_score - 0.5).abs() < 1e-12);
            assert!((d.obj_score - 0.5).abs() < 1e-12);
            let a = i / 64;
            let y = (i % 64) / 8;
            let x = i % 8;
            assert!((d.bbox.cx() - (x as f64 + 0.5) * 8.0).abs() < 1e-9);
            assert!((d.bbox.cy() - (y as f64 + 0.5) * 8.0).abs() < 1e-9);
            let prior = anchors.scales[0].priors[a];
            assert!((d.bbox.w() - prior.0).abs() < 1e-9);
            assert!((d.bbox.h() - prior.1).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_decode_round_trips_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let stride = 8.0;
        let prior = (20.0, 14.0);
        for _ in 0..100 {
            let cell = (rng.random_range(0..8usize), rng.random_range(0..8usize));
            // Representable boxes: center within (-0.5, 1.5) cells of the
            // origin, dims within (0, 4) x prior.
            let b = bb(
                (cell.0 as f64 + rng.random_range(-0.45..1.45)) * stride,
                (cell.1 as f64 + rng.random_range(-0.45..1.45)) * stride,
                prior.0 * rng.random_range(0.1..3.9),
                prior.1 * rng.random_range(0.1..3.9),
            );
            let t = encode_box(&b, stride, cell, prior).expect("representable");
            let back = decode_box(&t, stride, cell, prior);
            assert!((back.cx() - b.cx()).abs() < 1e-6);
            assert!((back.cy() - b.cy()).abs() < 1e-6);
            assert!((back.w() - b.w()).abs() < 1e-6);
            assert!((back.h() - b.h()).abs() < 1e-6);
        }
    }

    #[test]
    fn objectness_score_is_monotone_in_logit() {
        let anchors = desk_anchors();
        let mut prev = 0.0;
        for (i, logit) in [-3.0, -1.0, 0.0, 1.5, 4.0].iter().enumerate() {
            let mut raw = Tensor::zeros(&[3 * 8, 8, 8]);
            let c = 3 + 4; // obj channel of anchor 0
            *raw.at3_mut(c, 0, 0) = *logit;
            let grid = PredictionGrid::from_raw(vec![raw], &anchors).unwrap();
            let dets = decode(&grid);
            let score = dets[0].obj_score;
            if i > 0 {
                assert!(score > prev);
            }
            prev = score;
        }
    }

    #[test]
    fn decode_box_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = 1e-6;
        for _ in 0..50 {
            let t = [
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ];
            let cell = (rng.random_range(0..8usize), rng.random_range(0..8usize));
            let prior = (rng.random_range(5.0..30.0), rng.random_range(5.0..30.0));
            let (_, jac) = decode_box_grad(&t, 8.0, cell, prior);
            for k in 0..4 {
                let eval = |delta: f64| {
                    let mut q = t;
                    q[k] += delta;
                    let b = decode_box(&q, 8.0, cell, prior);
                    [b.cx(), b.cy(), b.w(), b.h()][k]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = fd.abs().max(jac[k].abs()).max(1e-9);
                assert!((fd - jac[k]).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn fill_objectness_targets_sets_positive_slots_only() {
        let anchors = desk_anchors();
        let gt = bb(20.0, 20.0, 20.0, 20.0);
        let mut targets = assign_labels(&[(0, gt)], &anchors).unwrap();
        let raw = Tensor::zeros(&[3 * 8, 8, 8]);
        let grid = PredictionGrid::from_raw(vec![raw], &anchors).unwrap();
        fill_objectness_targets(&mut targets, &grid);
        let mut saw_positive = false;
        for scale in &targets.scales {
            for slot in &scale.slots {
                if let SlotTarget::Positive { obj_target, .. } = slot {
                    saw_positive = true;
                    assert!((0.0..=1.0).contains(obj_target));
                }
            }
        }
        assert!(saw_positive);
    }
}
