//! Training objectives: the supervised loss, the three unsupervised losses
//! driven by pseudo-label indicators, the domain-adaptation loss, and the
//! composed totals.
//!
//! Cross-entropy is binary CE per channel on sigmoid outputs. Every
//! component is averaged over its contributing slot count (zero slots
//! contribute zero), which keeps magnitudes stable across batch
//! compositions. Loss functions return both the value and the analytic
//! gradient with respect to the raw prediction grid; objectness targets are
//! read from the target grid as constants, so the gradient treats them as
//! detached.

use thiserror::Error;

use crate::detector::{decode_box_grad, PredictionGrid, SlotTarget, TargetGrid};
use crate::geometry::ciou_grad;
use crate::netcore::{sigmoid, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("thresholds must satisfy tau1 < tau2, got tau1={tau1}, tau2={tau2}")]
    ThresholdOrder { tau1: f64, tau2: f64 },
    #[error("indicator branch violation: {0}")]
    BranchViolation(String),
    #[error("target slot is missing a pseudo-label score: {0}")]
    MissingScore(String),
}

/// Relative weighting of the supervised components (cls : reg : obj).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentWeights {
    pub cls: f64,
    pub reg: f64,
    pub obj: f64,
}

impl Default for ComponentWeights {
    fn default() -> Self {
        Self {
            cls: 0.5,
            reg: 0.05,
            obj: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SupParts {
    pub cls: f64,
    pub reg: f64,
    pub obj: f64,
}

impl SupParts {
    pub fn weighted(&self, w: &ComponentWeights) -> f64 {
        w.cls * self.cls + w.reg * self.reg + w.obj * self.obj
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UnsupParts {
    pub cls: f64,
    pub reg: f64,
    pub obj: f64,
}

impl UnsupParts {
    pub fn sum(&self) -> f64 {
        self.cls + self.reg + self.obj
    }
}

/// Per-scale gradient tensors matching the raw prediction layout.
pub type GridGrad = Vec<Tensor>;

/// One training step's loss breakdown.
///
/// `total` is the documented weighted sum:
/// `sup.weighted(weights) + lambda_u * unsup.sum() + lambda_da * domain`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub sup: SupParts,
    pub unsup: UnsupParts,
    pub domain: f64,
    pub lambda_u: f64,
    pub lambda_da: f64,
}

impl LossReport {
    pub fn compose(
        sup: SupParts,
        unsup: UnsupParts,
        domain: f64,
        weights: &ComponentWeights,
        lambda_u: f64,
        lambda_da: f64,
    ) -> Self {
        Self {
            total: sup.weighted(weights) + lambda_u * unsup.sum() + lambda_da * domain,
            sup,
            unsup,
            domain,
            lambda_u,
            lambda_da,
        }
    }

    /// Loss columns in metrics order:
    /// ls_cls, ls_reg, ls_obj, lu_cls, lu_reg, lu_obj, l_da, total.
    pub fn csv_fields(&self) -> [f64; 8] {
        [
            self.sup.cls,
            self.sup.reg,
            self.sup.obj,
            self.unsup.cls,
            self.unsup.reg,
            self.unsup.obj,
            self.domain,
            self.total,
        ]
    }

    /// Check the total against its parts.
    pub fn is_consistent(&self, weights: &ComponentWeights) -> bool {
        let recomputed = self.sup.weighted(weights)
            + self.lambda_u * self.unsup.sum()
            + self.lambda_da * self.domain;
        (self.total - recomputed).abs() < 1e-9
    }
}

/// Binary cross-entropy on a logit. Returns (loss, dloss/dlogit).
pub fn bce_with_logit(x: f64, y: f64) -> (f64, f64) {
    let p_raw = sigmoid(x);
    let p = p_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let loss = -y * p.ln() - (1.0 - y) * (1.0 - p).ln();
    // Inside the clamp band the gradient is sigmoid(x) - y; outside, the
    // clamped probability is constant in x.
    let grad = if p_raw > PROB_EPS && p_raw < 1.0 - PROB_EPS {
        p_raw - y
    } else {
        0.0
    };
    (loss, grad)
}

fn zero_grads(pred: &PredictionGrid) -> GridGrad {
    pred.scales
        .iter()
        .map(|s| Tensor::zeros(s.raw.shape()))
        .collect()
}

fn inv_or_zero(n: usize) -> f64 {
    if n > 0 {
        1.0 / n as f64
    } else {
        0.0
    }
}

/// Supervised loss over an assigned target grid: per positive slot the class
/// cross-entropy and the (1 - CIoU) box loss, objectness cross-entropy
/// against the stored CIoU target on positives and against zero on
/// background. Ignored and soft slots contribute nothing.
///
/// The returned gradient is for the weighted combination
/// `w.cls * cls + w.reg * reg + w.obj * obj`.
pub fn supervised_loss(
    pred: &PredictionGrid,
    targets: &TargetGrid,
    w: &ComponentWeights,
) -> (SupParts, GridGrad) {
    let mut n_pos = 0usize;
    let mut n_obj = 0usize;
    for scale in &targets.scales {
        for slot in &scale.slots {
            match slot {
                SlotTarget::Positive { .. } => {
                    n_pos += 1;
                    n_obj += 1;
                }
                SlotTarget::Background => n_obj += 1,
                _ => {}
            }
        }
    }
    let pos_scale = inv_or_zero(n_pos);
    let obj_scale = inv_or_zero(n_obj);

    let mut parts = SupParts::default();
    let mut grads = zero_grads(pred);

    for (si, (ps, ts)) in pred.scales.iter().zip(&targets.scales).enumerate() {
        for a in 0..ts.num_anchors {
            for y in 0..ts.spec.h {
                for x in 0..ts.spec.w {
                    match ts.slot(a, y, x) {
                        SlotTarget::Background => {
                            let (l, g) = bce_with_logit(ps.obj_logit(a, y, x), 0.0);
                            parts.obj += l * obj_scale;
                            *grads[si].at3_mut(ps.obj_channel(a), y, x) +=
                                w.obj * obj_scale * g;
                        }
                        SlotTarget::Positive {
                            class_id,
                            gt,
                            obj_target,
                            ..
                        } => {
                            for c in 0..ps.num_classes {
                                let target = if c == *class_id { 1.0 } else { 0.0 };
                                let (l, g) = bce_with_logit(ps.cls_logit(a, c, y, x), target);
                                parts.cls += l * pos_scale;
                                *grads[si].at3_mut(ps.cls_channel(a, c), y, x) +=
                                    w.cls * pos_scale * g;
                            }
                            let t = ps.reg(a, y, x);
                            let (bbox, jac) =
                                decode_box_grad(&t, ps.spec.stride as f64, (x, y), ps.priors[a]);
                            let (cval, cgrad) = ciou_grad(&bbox, gt);
                            parts.reg += (1.0 - cval) * pos_scale;
                            for k in 0..4 {
                                *grads[si].at3_mut(ps.reg_channel(a, k), y, x) +=
                                    w.reg * pos_scale * (-cgrad[k]) * jac[k];
                            }
                            let (l, g) = bce_with_logit(ps.obj_logit(a, y, x), *obj_target);
                            parts.obj += l * obj_scale;
                            *grads[si].at3_mut(ps.obj_channel(a), y, x) +=
                                w.obj * obj_scale * g;
                        }
                        SlotTarget::Ignored | SlotTarget::Soft { .. } => {}
                    }
                }
            }
        }
    }
    (parts, grads)
}

/// The three unsupervised losses in one traversal of a pseudo-label target
/// grid. Indicator consistency is audited: positive slots must carry
/// `p >= tau2`, soft slots `tau1 < p < tau2`, and soft regression targets
/// require objectness above 0.99; any violation is a hard error.
///
/// The returned gradient is for the plain sum `cls + reg + obj`.
pub fn unsup_loss(
    pred: &PredictionGrid,
    targets: &TargetGrid,
    tau1: f64,
    tau2: f64,
) -> Result<(UnsupParts, GridGrad), LossError> {
    if !(tau1 < tau2) {
        return Err(LossError::ThresholdOrder { tau1, tau2 });
    }
    let mut n_pos = 0usize;
    let mut n_reg = 0usize;
    let mut n_obj = 0usize;
    for scale in &targets.scales {
        for slot in &scale.slots {
            match slot {
                SlotTarget::Positive { .. } => {
                    n_pos += 1;
                    n_reg += 1;
                    n_obj += 1;
                }
                SlotTarget::Soft { reg_target, .. } => {
                    if reg_target.is_some() {
                        n_reg += 1;
                    }
                    n_obj += 1;
                }
                SlotTarget::Background => n_obj += 1,
                SlotTarget::Ignored => {}
            }
        }
    }
    let pos_scale = inv_or_zero(n_pos);
    let reg_scale = inv_or_zero(n_reg);
    let obj_scale = inv_or_zero(n_obj);

    let mut parts = UnsupParts::default();
    let mut grads = zero_grads(pred);

    for (si, (ps, ts)) in pred.scales.iter().zip(&targets.scales).enumerate() {
        for a in 0..ts.num_anchors {
            for y in 0..ts.spec.h {
                for x in 0..ts.spec.w {
                    match ts.slot(a, y, x) {
                        SlotTarget::Background => {
                            let (l, g) = bce_with_logit(ps.obj_logit(a, y, x), 0.0);
                            parts.obj += l * obj_scale;
                            *grads[si].at3_mut(ps.obj_channel(a), y, x) += obj_scale * g;
                        }
                        SlotTarget::Positive {
                            class_id,
                            gt,
                            obj_target,
                            p_score,
                        } => {
                            let p = p_score.ok_or_else(|| {
                                LossError::MissingScore(format!(
                                    "positive slot ({si},{a},{y},{x}) in unsupervised loss"
                                ))
                            })?;
                            if p < tau2 {
                                return Err(LossError::BranchViolation(format!(
                                    "reliable slot carries p={p} < tau2={tau2}"
                                )));
                            }
                            for c in 0..ps.num_classes {
                                let target = if c == *class_id { 1.0 } else { 0.0 };
                                let (l, g) = bce_with_logit(ps.cls_logit(a, c, y, x), target);
                                parts.cls += l * pos_scale;
                                *grads[si].at3_mut(ps.cls_channel(a, c), y, x) += pos_scale * g;
                            }
                            let t = ps.reg(a, y, x);
                            let (bbox, jac) =
                                decode_box_grad(&t, ps.spec.stride as f64, (x, y), ps.priors[a]);
                            let (cval, cgrad) = ciou_grad(&bbox, gt);
                            parts.reg += (1.0 - cval) * reg_scale;
                            for k in 0..4 {
                                *grads[si].at3_mut(ps.reg_channel(a, k), y, x) +=
                                    reg_scale * (-cgrad[k]) * jac[k];
                            }
                            let (l, g) = bce_with_logit(ps.obj_logit(a, y, x), *obj_target);
                            parts.obj += l * obj_scale;
                            *grads[si].at3_mut(ps.obj_channel(a), y, x) += obj_scale * g;
                        }
                        SlotTarget::Soft {
                            obj_target,
                            p_score,
                            reg_target,
                        } => {
                            if !(*p_score > tau1 && *p_score < tau2) {
                                return Err(LossError::BranchViolation(format!(
                                    "soft slot carries p={p_score} outside ({tau1}, {tau2})"
                                )));
                            }
                            let (l, g) = bce_with_logit(ps.obj_logit(a, y, x), *obj_target);
                            parts.obj += l * obj_scale;
                            *grads[si].at3_mut(ps.obj_channel(a), y, x) += obj_scale * g;
                            if let Some(gt) = reg_target {
                                if !(*obj_target > 0.99) {
                                    return Err(LossError::BranchViolation(format!(
                                        "soft regression target with objectness {obj_target} <= 0.99"
                                    )));
                                }
                                let t = ps.reg(a, y, x);
                                let (bbox, jac) = decode_box_grad(
                                    &t,
                                    ps.spec.stride as f64,
                                    (x, y),
                                    ps.priors[a],
                                );
                                let (cval, cgrad) = ciou_grad(&bbox, gt);
                                parts.reg += (1.0 - cval) * reg_scale;
                                for k in 0..4 {
                                    *grads[si].at3_mut(ps.reg_channel(a, k), y, x) +=
                                        reg_scale * (-cgrad[k]) * jac[k];
                                }
                            }
                        }
                        SlotTarget::Ignored => {}
                    }
                }
            }
        }
    }
    Ok((parts, grads))
}

/// Class cross-entropy restricted to slots from pseudo labels with
/// `p >= tau2`.
pub fn unsup_cls_loss(
    pred: &PredictionGrid,
    targets: &TargetGrid,
    tau1: f64,
    tau2: f64,
) -> Result<f64, LossError> {
    Ok(unsup_loss(pred, targets, tau1, tau2)?.0.cls)
}

/// Regression loss at slots whose pseudo label satisfies `p >= tau2` or has
/// objectness above 0.99.
pub fn unsup_reg_loss(
    pred: &PredictionGrid,
    targets: &TargetGrid,
    tau1: f64,
    tau2: f64,
) -> Result<f64, LossError> {
    Ok(unsup_loss(pred, targets, tau1, tau2)?.0.reg)
}

/// Objectness loss with the three disjoint indicator branches: background
/// (p <= tau1), reliable (p >= tau2, CIoU target), soft (in between, soft
/// label target).
pub fn unsup_obj_loss(
    pred: &PredictionGrid,
    targets: &TargetGrid,
    tau1: f64,
    tau2: f64,
) -> Result<f64, LossError> {
    Ok(unsup_loss(pred, targets, tau1, tau2)?.0.obj)
}

/// Total training loss: supervised plus weighted unsupervised.
pub fn total_loss(ls: f64, lu: f64, lambda_u: f64) -> f64 {
    debug_assert!(lambda_u >= 0.0);
    ls + lambda_u * lu
}

/// Domain-adaptation cross-entropy summed over the probability map.
/// `unlabeled` selects the domain indicator (1 for unlabeled data).
pub fn domain_loss(p_map: &Tensor, unlabeled: bool) -> f64 {
    domain_loss_grad(p_map, unlabeled).0
}

/// Domain loss plus its gradient with respect to the probability map.
pub fn domain_loss_grad(p_map: &Tensor, unlabeled: bool) -> (f64, Tensor) {
    let d = if unlabeled { 1.0 } else { 0.0 };
    let mut grad = Tensor::zeros(p_map.shape());
    let mut loss = 0.0;
    for (g, &p_raw) in grad.data_mut().iter_mut().zip(p_map.data()) {
        let p = p_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss += -(d * p.ln() + (1.0 - d) * (1.0 - p).ln());
        *g = if p_raw > PROB_EPS && p_raw < 1.0 - PROB_EPS {
            -(d / p) + (1.0 - d) / (1.0 - p)
        } else {
            0.0
        };
    }
    (loss, grad)
}

/// Burn-in objective: supervised loss plus weighted domain loss.
pub fn burn_in_loss(ls: f64, lda: f64, lambda_da: f64) -> f64 {
    debug_assert!(lambda_da >= 0.0);
    ls + lambda_da * lda
}
