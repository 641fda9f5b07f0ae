//! Average precision for rotated detections.

use serde::Serialize;

use crate::geometry::rotated_iou;
use crate::model::{Detection, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApInterpolation {
    /// Precision envelope sampled at recall 0, 0.01, ..., 1.
    #[default]
    Points101,
    /// Recall 0, 0.1, ..., 1.
    Points11,
}

impl ApInterpolation {
    fn recall_points(self) -> Vec<f64> {
        let n = match self {
            ApInterpolation::Points101 => 100,
            ApInterpolation::Points11 => 10,
        };
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class: usize,
    pub gts: usize,
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
    pub per_class: Vec<ClassAp>,
    /// Fraction of matched-query sampling points inside the matched target,
    /// when measured.
    pub containment: Option<f64>,
}

/// 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// AP of one class at one IoU threshold.
///
/// Detections are visited by descending score, ties broken by image then
/// position in that image's list. Each claims the unmatched target of its
/// class with the highest IoU at or above `threshold`.
pub fn class_ap(preds: &[Vec<Detection>], gts: &[Targets], class: usize, threshold: f64, interp: ApInterpolation) -> f64 {
    let total: usize = gts.iter().map(|t| t.classes.iter().filter(|&&c| c == class).count()).sum();
    let mut order: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().enumerate().filter(|(_, d)| d.class == class).map(move |(k, _)| (img, k)))
        .collect();
    if total == 0 {
        return if order.is_empty() { 1.0 } else { 0.0 };
    }
    order.sort_by(|a, b| {
        preds[b.0][b.1]
            .score
            .total_cmp(&preds[a.0][a.1].score)
            .then(a.cmp(b))
    });
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|t| vec![false; t.boxes.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(order.len());
    for (img, k) in order {
        let d = &preds[img][k];
        let mut best: Option<(f64, usize)> = None;
        if let Some(t) = gts.get(img) {
            for (g, (b, &c)) in t.boxes.iter().zip(&t.classes).enumerate() {
                if c != class || taken[img][g] {
                    continue;
                }
                let iou = rotated_iou(&d.rbox, b);
                if iou >= threshold && best.map_or(true, |(bi, _)| iou > bi) {
                    best = Some((iou, g));
                }
            }
        }
        match best {
            Some((_, g)) => {
                taken[img][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / total as f64, tp as f64 / (tp + fp) as f64));
    }
    let points = interp.recall_points();
    let mut sum = 0.0;
    for r in &points {
        sum += curve
            .iter()
            .filter(|(rec, _)| rec >= r)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
    }
    sum / points.len() as f64
}

/// AP50, AP75 and AP50:95 averaged over classes that have targets or
/// predictions.
pub fn evaluate(preds: &[Vec<Detection>], gts: &[Targets], num_classes: usize, interp: ApInterpolation) -> EvalReport {
    let mut per_class = Vec::new();
    for class in 0..num_classes {
        let count: usize = gts.iter().map(|t| t.classes.iter().filter(|&&c| c == class).count()).sum();
        let predicted = preds.iter().flatten().any(|d| d.class == class);
        if count == 0 && !predicted {
            continue;
        }
        let at = |t: f64| class_ap(preds, gts, class, t, interp);
        let sweep: Vec<f64> = coco_thresholds().into_iter().map(at).collect();
        per_class.push(ClassAp {
            class,
            gts: count,
            ap50: sweep[0],
            ap75: sweep[5],
            ap50_95: sweep.iter().sum::<f64>() / sweep.len() as f64,
        });
    }
    let mean = |f: fn(&ClassAp) -> f64| {
        if per_class.is_empty() {
            1.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    EvalReport {
        ap50: mean(|c| c.ap50),
        ap75: mean(|c| c.ap75),
        ap50_95: mean(|c| c.ap50_95),
        per_class,
        containment: None,
    }
}
