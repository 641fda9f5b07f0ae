//! Label assignment between predictions and ground truth.

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::losses::{focal_cost, regression_loss_of, LossConfig};
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    /// One-to-one.
    O2O,
    /// One-to-many: a ground truth may own several predictions.
    O2M,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(prediction, ground truth)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    pub mode: MatchMode,
}

impl MatchResult {
    pub fn empty(mode: MatchMode) -> Self {
        MatchResult {
            pairs: Vec::new(),
            total_cost: 0.0,
            mode,
        }
    }

    pub fn gt_of(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }
}

/// Rows are predictions, columns ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!("{rows}x{cols} cost matrix with {} entries", data.len())));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Square assignment state: `col_of[row]`, plus dual potentials with
/// `cost[i][j] - u[i] - v[j] >= 0`, tight on the assignment.
struct Solution {
    col_of: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Shortest augmenting path (Jonker–Volgenant style) on a square matrix.
fn solve_square(n: usize, cost: impl Fn(usize, usize) -> f64) -> Solution {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1]; // 1-based rows per 1-based column; 0 = free
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    Solution {
        col_of,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    }
}

/// Optimal cost of the square sub-problem on the given rows/columns.
fn sub_optimum(rows: &[usize], cols: &[usize], cost: &impl Fn(usize, usize) -> f64) -> (f64, Vec<usize>) {
    if rows.is_empty() {
        return (0.0, Vec::new());
    }
    let sol = solve_square(rows.len(), |i, j| cost(rows[i], cols[j]));
    let total = sol.col_of.iter().enumerate().map(|(i, &j)| cost(rows[i], cols[j])).sum();
    (total, sol.col_of.iter().map(|&j| cols[j]).collect())
}

/// Minimum-cost one-to-one assignment.
///
/// Among optimal assignments the one whose `(row, col)` pair list is
/// lexicographically smallest is returned. `|pairs| == min(rows, cols)`.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchResult> {
    if let Some(bad) = cost.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::input(format!("cost matrix entry {bad}")));
    }
    let (r, c) = (cost.rows, cost.cols);
    if r == 0 || c == 0 {
        return Ok(MatchResult::empty(MatchMode::O2O));
    }
    let n = r.max(c);
    // Zero-cost padding to a square problem; padded columns sort after real
    // ones, so earlier rows prefer real matches when costs tie.
    let padded = |i: usize, j: usize| if i < r && j < c { cost.get(i, j) } else { 0.0 };
    let sol = solve_square(n, padded);
    let scale = 1.0 + cost.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale * n as f64;

    let mut col_of = sol.col_of.clone();
    let mut free_rows: Vec<usize> = (0..n).collect();
    let mut free_cols: Vec<usize> = (0..n).collect();
    let remaining_opt = |rows: &[usize], cols: &[usize]| sub_optimum(rows, cols, &padded);
    let (mut current_opt, _) = remaining_opt(&free_rows, &free_cols);
    for i in 0..r {
        free_rows.retain(|&x| x != i);
        let current = col_of[i];
        let tight: Vec<usize> = free_cols
            .iter()
            .copied()
            .filter(|&j| j < current && (padded(i, j) - sol.u[i] - sol.v[j]).abs() <= tol)
            .collect();
        let mut chosen = current;
        for j in tight {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != j).collect();
            let (rest, assign) = remaining_opt(&free_rows, &cols);
            if (padded(i, j) + rest - current_opt).abs() <= tol {
                chosen = j;
                for (&row, &col) in free_rows.iter().zip(&assign) {
                    col_of[row] = col;
                }
                break;
            }
        }
        col_of[i] = chosen;
        free_cols.retain(|&x| x != chosen);
        current_opt -= padded(i, chosen);
    }

    let pairs: Vec<(usize, usize)> = (0..r).filter(|&i| col_of[i] < c).map(|i| (i, col_of[i])).collect();
    let total_cost = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
    Ok(MatchResult {
        pairs,
        total_cost,
        mode: MatchMode::O2O,
    })
}

/// Set-prediction cost: `w.cls * focal_cost + w.reg * regression + w.iou * (1 - iou)`.
///
/// `logits` is `[N, C]`; the regression term follows `cfg.regression`.
pub fn build_cost(
    logits: &Tensor,
    boxes: &[RotatedBox],
    gt_classes: &[usize],
    gt_boxes: &[RotatedBox],
    cfg: &LossConfig,
) -> Result<CostMatrix> {
    let n = boxes.len();
    let m = gt_boxes.len();
    if logits.rank() != 2 || logits.shape()[0] != n || gt_classes.len() != m {
        return Err(Error::dim(format!(
            "cost inputs: logits {:?}, {n} boxes, {} classes, {m} gts",
            logits.shape(),
            gt_classes.len()
        )));
    }
    let classes = logits.shape()[1];
    if let Some(&bad) = gt_classes.iter().find(|&&k| k >= classes) {
        return Err(Error::input(format!("gt class {bad} with {classes} classes")));
    }
    let w = cfg.weights;
    let mut data = Vec::with_capacity(n * m);
    for (i, b) in boxes.iter().enumerate() {
        for (j, gt) in gt_boxes.iter().enumerate() {
            let mut entry = 0.0;
            if w.cls != 0.0 {
                entry += w.cls * focal_cost(logits.at(&[i, gt_classes[j]]), cfg.focal);
            }
            if w.reg != 0.0 {
                entry += w.reg * regression_loss_of(b, gt, cfg);
            }
            if w.iou != 0.0 {
                entry += w.iou * (1.0 - rotated_iou(b, gt));
            }
            data.push(entry);
        }
    }
    CostMatrix::new(n, m, data)
}

pub const DEFAULT_O2M_TOPK: usize = 9;

/// Simplified one-to-many assigner.
///
/// For every ground truth, the `k` anchor locations whose centers lie inside
/// the box and are nearest its center become positives (ties by anchor
/// index). A ground truth containing no anchor center takes the single
/// nearest anchor instead. An anchor claimed by several ground truths goes to the one with
/// the nearest center (ties by ground-truth index).
pub fn o2m_assign(anchor_locations: &[(f64, f64)], gt_boxes: &[RotatedBox], k: usize) -> Result<MatchResult> {
    if k == 0 {
        return Err(Error::input("o2m top-k must be at least 1"));
    }
    let mut claim: Vec<Option<(f64, usize)>> = vec![None; anchor_locations.len()];
    for (g, gt) in gt_boxes.iter().enumerate() {
        let mut inside: Vec<(f64, usize)> = anchor_locations
            .iter()
            .enumerate()
            .filter(|(_, &(x, y))| gt.contains(x, y, 0.0))
            .map(|(a, &(x, y))| ((x - gt.cx).hypot(y - gt.cy), a))
            .collect();
        if inside.is_empty() {
            inside = anchor_locations
                .iter()
                .enumerate()
                .map(|(a, &(x, y))| ((x - gt.cx).hypot(y - gt.cy), a))
                .collect();
            inside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            inside.truncate(1);
        }
        inside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, a) in inside.iter().take(k) {
            match claim[a] {
                Some((best, _)) if best <= d => {}
                _ => claim[a] = Some((d, g)),
            }
        }
    }
    let mut total = 0.0;
    let pairs = claim
        .iter()
        .enumerate()
        .filter_map(|(a, c)| {
            c.map(|(d, g)| {
                total += d;
                (a, g)
            })
        })
        .collect();
    Ok(MatchResult {
        pairs,
        total_cost: total,
        mode: MatchMode::O2M,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_entry() {
        let r = hungarian(&m(&[&[5.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.total_cost, 5.0);
    }

    #[test]
    fn two_by_two() {
        let r = hungarian(&m(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost, 2.0);
    }

    #[test]
    fn ties_break_lexicographically() {
        let r = hungarian(&m(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        let r = hungarian(&m(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        let r = hungarian(&m(&[&[3.0], &[3.0], &[3.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
    }

    #[test]
    fn rectangular_picks_cheapest_rows() {
        let r = hungarian(&m(&[&[9.0], &[1.0], &[4.0]])).unwrap();
        assert_eq!(r.pairs, vec![(1, 0)]);
        let r = hungarian(&m(&[&[9.0, 1.0, 4.0]])).unwrap();
        assert_eq!(r.pairs, vec![(0, 1)]);
    }

    #[test]
    fn nan_rejected() {
        assert!(matches!(hungarian(&m(&[&[f64::NAN]])), Err(Error::Input(_))));
    }

    #[test]
    fn empty_sides() {
        let r = hungarian(&CostMatrix::new(3, 0, vec![]).unwrap()).unwrap();
        assert!(r.pairs.is_empty());
    }

    #[test]
    fn o2m_nearest_inside() {
        let gt = RotatedBox::new(0.5, 0.5, 0.4, 0.2, 0.0).unwrap();
        let anchors = [(0.1, 0.1), (0.45, 0.5), (0.52, 0.52), (0.9, 0.5)];
        let r = o2m_assign(&anchors, &[gt], 1).unwrap();
        assert_eq!(r.pairs, vec![(2, 0)]);
        // No center inside: falls back to the single nearest anchor.
        let tiny = RotatedBox::new(0.2, 0.8, 0.01, 0.01, 0.0).unwrap();
        assert_eq!(o2m_assign(&anchors, &[tiny], 3).unwrap().pairs, vec![(1, 0)]);
        assert!(o2m_assign(&anchors, &[gt], 0).is_err());
    }

    #[test]
    fn o2m_conflict_goes_to_nearest() {
        let a = RotatedBox::new(0.4, 0.5, 0.4, 0.4, 0.0).unwrap();
        let b = RotatedBox::new(0.55, 0.5, 0.4, 0.4, 0.0).unwrap();
        let r = o2m_assign(&[(0.5, 0.5)], &[a, b], 1).unwrap();
        assert_eq!(r.pairs, vec![(0, 1)]);
    }
}
