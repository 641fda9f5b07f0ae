use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rotatr::geometry::{box_from_var, rotated_iou, AngleRange, RotatedBox};
use rotatr::losses::{
    corner_mappings, focal_cost, focal_loss, focal_term, l1_box_loss, pair_losses, point_set_loss,
    point_set_loss_of, rotated_iou_loss, FocalParams, LossConfig, PointNorm,
};
use rotatr::numcore::{Graph, Tensor};

fn boxes() -> impl Strategy<Value = RotatedBox> {
    (0.1..0.9f64, 0.1..0.9f64, 0.02..0.6f64, 0.02..0.6f64, -4.0..4.0f64)
        .prop_map(|(cx, cy, w, h, t)| RotatedBox::new(cx, cy, w, h, t).unwrap())
}

/// Every permutation of four corners that keeps cyclic neighbours adjacent.
fn adjacency_preserving_maps() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let m = [a, b, c, d];
                    let mut s = m;
                    s.sort_unstable();
                    if s != [0, 1, 2, 3] {
                        continue;
                    }
                    let adjacent = |x: usize, y: usize| (x + 4 - y) % 4 == 1 || (y + 4 - x) % 4 == 1;
                    if (0..4).all(|i| adjacent(m[i], m[(i + 1) % 4])) {
                        out.push(m);
                    }
                }
            }
        }
    }
    out
}

fn brute_force_point_set(p: &RotatedBox, q: &RotatedBox) -> f64 {
    let (pc, qc) = (p.corners().0, q.corners().0);
    adjacency_preserving_maps()
        .iter()
        .map(|m| (0..4).map(|i| (pc[i][0] - qc[m[i]][0]).abs() + (pc[i][1] - qc[m[i]][1]).abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn corner_mappings_are_the_dihedral_group() {
    let mut ours: Vec<[usize; 4]> = corner_mappings().to_vec();
    let mut want = adjacency_preserving_maps();
    ours.sort_unstable();
    want.sort_unstable();
    assert_eq!(ours, want);
}

#[test]
fn point_set_of_translated_box_is_four_l1_shifts() {
    let a = RotatedBox::new(0.5, 0.5, 0.2, 0.1, 0.3).unwrap();
    let b = RotatedBox::new(0.53, 0.46, 0.2, 0.1, 0.3).unwrap();
    assert!((point_set_loss(&a, &b) - 4.0 * (0.03 + 0.04)).abs() < 1e-12);
}

#[test]
fn point_set_ignores_half_turns_but_l1_does_not() {
    let a = RotatedBox::new(0.4, 0.6, 0.3, 0.1, 0.2).unwrap();
    let b = RotatedBox { theta: a.theta + PI, ..a };
    assert!(point_set_loss(&a, &b) < 1e-12);
    assert!((l1_box_loss(&a, &b, AngleRange::default()) - 1.0).abs() < 1e-12);
}

#[test]
fn l2_norm_is_euclidean_corner_distance() {
    let a = RotatedBox::new(0.5, 0.5, 0.2, 0.1, 0.0).unwrap();
    let b = RotatedBox::new(0.53, 0.54, 0.2, 0.1, 0.0).unwrap();
    assert!((point_set_loss_of(&a, &b, PointNorm::L2) - 4.0 * 0.05).abs() < 1e-9);
}

#[test]
fn iou_loss_is_one_minus_iou() {
    let a = RotatedBox::new(0.5, 0.5, 0.3, 0.2, 0.1).unwrap();
    let b = RotatedBox::new(0.55, 0.5, 0.2, 0.3, -0.4).unwrap();
    assert!((rotated_iou_loss(&a, &b) - (1.0 - rotated_iou(&a, &b))).abs() < 1e-15);
}

#[test]
fn focal_term_matches_probability_form() {
    let params = FocalParams { gamma: 2.0, alpha: 0.25 };
    for x in [-6.0, -1.5, 0.0, 0.7, 4.0] {
        let p = sigmoid(x);
        let pos = -0.25 * (1.0 - p).powi(2) * p.ln();
        let neg = -0.75 * p.powi(2) * (1.0 - p).ln();
        assert!((focal_term(x, true, params) - pos).abs() < 1e-12);
        assert!((focal_term(x, false, params) - neg).abs() < 1e-12);
        assert!((focal_cost(x, params) - (pos - neg)).abs() < 1e-12);
    }
    // Decreasing in the logit: a confident prediction is cheaper to match.
    assert!(focal_cost(2.0, params) < focal_cost(-2.0, params));
}

#[test]
fn focal_loss_sums_terms_over_positive_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = FocalParams::default();
    let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let targets = [Some(1), None, Some(0), None];
    let g = Graph::new();
    let got = focal_loss(g.constant(Tensor::new(&[4, 3], logits.clone()).unwrap()), &targets, params)
        .unwrap()
        .item();
    let mut want = 0.0;
    for (i, t) in targets.iter().enumerate() {
        for c in 0..3 {
            want += focal_term(logits[i * 3 + c], *t == Some(c), params);
        }
    }
    assert!((got - want / 2.0).abs() < 1e-12);

    let none = focal_loss(g.constant(Tensor::new(&[4, 3], logits.clone()).unwrap()), &[None; 4], params)
        .unwrap()
        .item();
    let all_neg: f64 = logits.iter().map(|&x| focal_term(x, false, params)).sum();
    assert!((none - all_neg).abs() < 1e-12);
}

#[test]
fn focal_loss_is_stable_at_extreme_logits() {
    let g = Graph::new();
    let x = g.param(Tensor::new(&[2, 1], vec![800.0, -800.0]).unwrap());
    let l = focal_loss(x, &[Some(0), Some(0)], FocalParams::default()).unwrap();
    assert!(l.item().is_finite());
    g.backward(l).unwrap();
    assert!(x.grad().unwrap().data().iter().all(|v| v.is_finite()));
}

#[test]
fn pair_losses_match_graph_and_plain_routes() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = LossConfig::default();
    let pred: Vec<RotatedBox> = (0..6)
        .map(|_| RotatedBox::new(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(-1.5..1.5)).unwrap())
        .collect();
    let gts: Vec<RotatedBox> = pred
        .iter()
        .map(|p| RotatedBox { cx: p.cx + 0.03, theta: p.theta - 0.2, w: p.w * 1.2, ..*p })
        .collect();
    let g = Graph::new();
    let flat: Vec<f64> = pred.iter().flat_map(|b| b.to_array()).collect();
    let x = g.param(Tensor::new(&[6, 5], flat).unwrap());
    let (reg, iou) = pair_losses(x, &gts, &cfg).unwrap();
    g.backward(reg.sum() + iou.sum()).unwrap();
    let dual_grad = x.grad().unwrap();

    let g2 = Graph::new();
    let mut tape_total = None;
    let mut rows = Vec::new();
    for (i, (p, gt)) in pred.iter().zip(&gts).enumerate() {
        assert!((reg.data()[i] - point_set_loss(p, gt)).abs() < 1e-13);
        assert!((iou.data()[i] - rotated_iou_loss(p, gt)).abs() < 1e-13);
        let row = g2.param(Tensor::vector(&p.to_array()));
        let b = box_from_var(row).unwrap();
        let gtv = rotatr::geometry::box_constant(&g2, gt);
        let l = point_set_loss_of(&b, &gtv, PointNorm::L1) + rotatr::losses::rotated_iou_loss_of(&b, &gtv);
        tape_total = Some(match tape_total {
            None => l,
            Some(t) => t + l,
        });
        rows.push(row);
    }
    g2.backward(tape_total.unwrap()).unwrap();
    for (i, row) in rows.iter().enumerate() {
        let want = row.grad().unwrap();
        for k in 0..5 {
            assert!((dual_grad.at(&[i, k]) - want.data()[k]).abs() < 1e-10, "row {i} entry {k}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn point_set_equals_brute_force_minimum(a in boxes(), b in boxes()) {
        prop_assert!((point_set_loss(&a, &b) - brute_force_point_set(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn point_set_is_symmetric(a in boxes(), b in boxes()) {
        prop_assert!((point_set_loss(&a, &b) - point_set_loss(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn point_set_vanishes_on_the_swapped_representation(a in boxes()) {
        prop_assert!(point_set_loss(&a, &a.swapped_representation()) < 1e-9);
    }

    #[test]
    fn point_set_is_nonnegative_and_zero_only_on_the_same_rectangle(a in boxes(), b in boxes()) {
        let l = point_set_loss(&a, &b);
        prop_assert!(l >= 0.0);
        if l < 1e-12 {
            prop_assert!(rotated_iou(&a, &b) > 1.0 - 1e-6);
        }
    }
}
