//! Detection losses: point set regression, sigmoid focal classification,
//! 5-D L1 and rotated-IoU, plus their weighted combination.

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou_of, AngleRange, Rbox, Real, RotatedBox};
use crate::matching::MatchResult;
use crate::numcore::{log_sigmoid, Dual5, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            reg: 5.0,
            iou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.reg, self.iou].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::input(format!("loss weights must be nonnegative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { gamma: 2.0, alpha: 0.25 }
    }
}

/// Per-corner distance inside the point set loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PointNorm {
    #[default]
    L1,
    L2,
}

/// Box regression flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionLoss {
    PointSet(PointNorm),
    L1,
}

/// The 8 order-preserving bijections of a cyclically ordered 4-set:
/// 4 rotations times 2 traversal directions.
pub fn corner_mappings() -> [[usize; 4]; 8] {
    let mut out = [[0; 4]; 8];
    for s in 0..4 {
        for i in 0..4 {
            out[s][i] = (i + s) % 4;
            out[4 + s][i] = (s + 4 - i) % 4;
        }
    }
    out
}

fn corner_distance<S: Real>(p: [S; 2], q: [S; 2], norm: PointNorm) -> S {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    match norm {
        PointNorm::L1 => dx.abs() + dy.abs(),
        // The floor keeps the gradient finite when two corners coincide.
        PointNorm::L2 => (dx * dx + dy * dy + 1e-18).sqrt(),
    }
}

/// Minimum over [`corner_mappings`] of the summed corner distances. The
/// gradient is that of the selected mapping.
pub fn point_set_loss_of<S: Real>(pred: &Rbox<S>, gt: &Rbox<S>, norm: PointNorm) -> S {
    let p = pred.corners().0;
    let q = gt.corners().0;
    let mut best: Option<S> = None;
    for map in corner_mappings() {
        let mut acc = corner_distance(p[0], q[map[0]], norm);
        for i in 1..4 {
            acc = acc + corner_distance(p[i], q[map[i]], norm);
        }
        if best.is_none_or(|b| acc.val() < b.val()) {
            best = Some(acc);
        }
    }
    best.expect("eight mappings")
}

pub fn point_set_loss(pred: &RotatedBox, gt: &RotatedBox) -> f64 {
    point_set_loss_of(pred, gt, PointNorm::L1)
}

/// Sum of absolute differences over `(cx, cy, w, h, norm(theta))`, where
/// `norm(theta) = (theta + A/2) / A`.
pub fn l1_box_loss_of<S: Real>(pred: &Rbox<S>, gt: &Rbox<S>, range: AngleRange) -> S {
    let a = range.get();
    (pred.cx - gt.cx).abs()
        + (pred.cy - gt.cy).abs()
        + (pred.w - gt.w).abs()
        + (pred.h - gt.h).abs()
        + ((pred.theta - gt.theta) / a).abs()
}

pub fn l1_box_loss(pred: &RotatedBox, gt: &RotatedBox, range: AngleRange) -> f64 {
    l1_box_loss_of(pred, gt, range)
}

pub fn rotated_iou_loss_of<S: Real>(pred: &Rbox<S>, gt: &Rbox<S>) -> S {
    let iou = rotated_iou_of(pred, gt);
    iou.lift(1.0) - iou
}

pub fn rotated_iou_loss(pred: &RotatedBox, gt: &RotatedBox) -> f64 {
    1.0 - crate::geometry::rotated_iou(pred, gt)
}

/// One-hot targets for `[N, C]` logits; `None` is background (all-zero row).
pub fn one_hot(targets: &[Option<usize>], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; targets.len() * classes];
    for (i, t) in targets.iter().enumerate() {
        if let Some(c) = *t {
            if c >= classes {
                return Err(Error::input(format!("target class {c} with {classes} classes")));
            }
            data[i * classes + c] = 1.0;
        }
    }
    Tensor::new(&[targets.len(), classes], data)
}

/// Sigmoid focal loss summed over all entries, divided by `max(1, #positives)`.
pub fn focal_loss<'g>(logits: Var<'g>, targets: &[Option<usize>], params: FocalParams) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() || shape[1] == 0 {
        return Err(Error::dim(format!(
            "focal loss logits {shape:?} for {} targets",
            targets.len()
        )));
    }
    let t = logits.graph().constant(one_hot(targets, shape[1])?);
    let positives = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
    let (alpha, gamma) = (params.alpha, params.gamma);
    let ls_pos = logits.log_sigmoid();
    let ls_neg = (-logits).log_sigmoid();
    // t = 1: alpha (1 - p)^gamma (-ln p); t = 0: (1 - alpha) p^gamma (-ln(1 - p)).
    let pos_term = (ls_neg * gamma).exp() * ls_pos * (-alpha);
    let neg_term = (ls_pos * gamma).exp() * ls_neg * (alpha - 1.0);
    let inv_t = t.scale(-1.0).shift(1.0);
    let loss = (t * pos_term + inv_t * neg_term).sum();
    Ok(loss.scale(1.0 / positives))
}

/// Focal loss of a single logit, plain `f64`.
pub fn focal_term(logit: f64, positive: bool, params: FocalParams) -> f64 {
    let (ls_pos, ls_neg) = (log_sigmoid(logit), log_sigmoid(-logit));
    if positive {
        -params.alpha * (params.gamma * ls_neg).exp() * ls_pos
    } else {
        -(1.0 - params.alpha) * (params.gamma * ls_pos).exp() * ls_neg
    }
}

/// Matching-time classification cost: positive minus negative focal term at
/// the ground-truth class.
pub fn focal_cost(logit: f64, params: FocalParams) -> f64 {
    focal_term(logit, true, params) - focal_term(logit, false, params)
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub regression: RegressionLoss,
    pub angle_range: AngleRange,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            regression: RegressionLoss::PointSet(PointNorm::L1),
            angle_range: AngleRange::default(),
        }
    }
}

pub fn regression_loss_of<S: Real>(pred: &Rbox<S>, gt: &Rbox<S>, cfg: &LossConfig) -> S {
    match cfg.regression {
        RegressionLoss::PointSet(norm) => point_set_loss_of(pred, gt, norm),
        RegressionLoss::L1 => l1_box_loss_of(pred, gt, cfg.angle_range),
    }
}

/// Per-row regression and IoU losses for `pred: [P, 5]` against `gts`.
///
/// Each row is evaluated on forward-mode duals through the same generic code
/// as [`regression_loss_of`] and [`rotated_iou_loss_of`], and enters the tape
/// as a single node per loss.
pub fn pair_losses<'g>(pred: Var<'g>, gts: &[RotatedBox], cfg: &LossConfig) -> Result<(Var<'g>, Var<'g>)> {
    if pred.shape() != [gts.len(), 5] {
        return Err(Error::dim(format!("pair_losses pred {:?} for {} gts", pred.shape(), gts.len())));
    }
    let g = pred.graph();
    let reg = g.row_map(pred, |t, row| {
        let (p, gt) = dual_pair(row, &gts[t]);
        let l = regression_loss_of(&p, &gt, cfg);
        Ok((l.v, l.d.to_vec()))
    })?;
    let iou = g.row_map(pred, |t, row| {
        let (p, gt) = dual_pair(row, &gts[t]);
        let l = rotated_iou_loss_of(&p, &gt);
        Ok((l.v, l.d.to_vec()))
    })?;
    Ok((reg, iou))
}

fn dual_pair(row: &[f64], gt: &RotatedBox) -> (Rbox<Dual5>, Rbox<Dual5>) {
    let p = Rbox {
        cx: Dual5::seed(row[0], 0),
        cy: Dual5::seed(row[1], 1),
        w: Dual5::seed(row[2], 2),
        h: Dual5::seed(row[3], 3),
        theta: Dual5::seed(row[4], 4),
    };
    (p, gt.map(Dual5::constant))
}

/// Weighted loss with its unweighted terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'g> {
    pub total: Var<'g>,
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
}

impl LossTerms<'_> {
    pub fn value(&self) -> f64 {
        self.total.item()
    }
}

/// Weighted sum of focal, regression and rotated-IoU terms for one image.
///
/// Matched predictions are positives for their ground-truth class; every
/// other prediction is background. Regression and IoU terms are summed over
/// matched pairs and divided by the pair count. With no ground truth only the
/// classification term remains.
pub fn total_loss<'g>(
    logits: Var<'g>,
    boxes: Var<'g>,
    gt_classes: &[usize],
    gt_boxes: &[RotatedBox],
    matching: &MatchResult,
    cfg: &LossConfig,
) -> Result<LossTerms<'g>> {
    let n = logits.shape()[0];
    if boxes.shape() != [n, 5] || gt_classes.len() != gt_boxes.len() {
        return Err(Error::dim(format!(
            "loss inputs: logits {:?}, boxes {:?}, {} classes for {} gts",
            logits.shape(),
            boxes.shape(),
            gt_classes.len(),
            gt_boxes.len()
        )));
    }
    let mut targets = vec![None; n];
    for &(p, t) in &matching.pairs {
        if p >= n || t >= gt_boxes.len() {
            return Err(Error::input(format!("match pair ({p}, {t}) out of range")));
        }
        targets[p] = Some(gt_classes[t]);
    }
    let cls = focal_loss(logits, &targets, cfg.focal)?;
    let mut total = cls * cfg.weights.cls;
    let (mut reg_v, mut iou_v) = (0.0, 0.0);
    if !matching.pairs.is_empty() {
        let count = matching.pairs.len() as f64;
        let preds: Vec<usize> = matching.pairs.iter().map(|&(p, _)| p).collect();
        let gts: Vec<RotatedBox> = matching.pairs.iter().map(|&(_, t)| gt_boxes[t]).collect();
        let (reg, iou) = pair_losses(boxes.index_select(&preds)?, &gts, cfg)?;
        let reg = reg.sum().scale(1.0 / count);
        let iou = iou.sum().scale(1.0 / count);
        reg_v = reg.item();
        iou_v = iou.item();
        total = total + reg * cfg.weights.reg + iou * cfg.weights.iou;
    }
    Ok(LossTerms {
        total,
        cls: cls.item(),
        reg: reg_v,
        iou: iou_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Graph;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    fn b(cx: f64, cy: f64, w: f64, h: f64, t: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, w, h, t).unwrap()
    }

    #[test]
    fn mappings_are_distinct_bijections() {
        let maps = corner_mappings();
        for m in maps {
            let mut s = m;
            s.sort_unstable();
            assert_eq!(s, [0, 1, 2, 3]);
        }
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(maps[i], maps[j]);
            }
        }
    }

    #[test]
    fn point_set_zero_cases() {
        let a = b(0.4, 0.6, 0.3, 0.1, 0.4);
        assert_eq!(point_set_loss(&a, &a), 0.0);
        assert!(point_set_loss(&a, &a.swapped_representation()) < 1e-12);
    }

    #[test]
    fn point_set_translation() {
        let a = b(0.5, 0.5, 0.2, 0.1, 0.0);
        let t = b(0.53, 0.5, 0.2, 0.1, 0.0);
        assert!((point_set_loss(&a, &t) - 4.0 * 0.03).abs() < 1e-12);
    }

    #[test]
    fn focal_closed_form() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1], vec![0.0]).unwrap());
        let l = focal_loss(x, &[Some(0)], FocalParams::default()).unwrap().item();
        assert!((l - 0.25 * 0.25 * LN_2).abs() < 1e-12);
        assert!((l - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn focal_confident_is_small() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2], vec![20.0, -20.0]).unwrap());
        let l = focal_loss(x, &[Some(0)], FocalParams::default()).unwrap().item();
        assert!(l < 1e-9);
    }

    #[test]
    fn focal_rejects_bad_class() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        assert!(matches!(focal_loss(x, &[Some(2)], FocalParams::default()), Err(Error::Input(_))));
    }

    #[test]
    fn l1_cases() {
        let r = AngleRange::default();
        let a = b(0.5, 0.5, 0.2, 0.1, 0.0);
        assert_eq!(l1_box_loss(&a, &a, r), 0.0);
        assert!((l1_box_loss(&a, &b(0.6, 0.5, 0.2, 0.1, 0.0), r) - 0.1).abs() < 1e-12);
        let turned = b(0.5, 0.5, 0.2, 0.1, -FRAC_PI_2);
        assert!((l1_box_loss(&a, &turned, r) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn iou_loss_cases() {
        let a = b(0.5, 0.5, 0.2, 0.2, 0.0);
        assert!(rotated_iou_loss(&a, &a).abs() < 1e-12);
        assert_eq!(rotated_iou_loss(&a, &b(0.1, 0.1, 0.05, 0.05, 0.0)), 1.0);
        assert!((rotated_iou_loss(&a, &b(0.6, 0.5, 0.2, 0.2, 0.0)) - 2.0 / 3.0).abs() < 1e-12);
    }
}
