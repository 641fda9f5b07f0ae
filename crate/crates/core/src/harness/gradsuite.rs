//! Finite-difference checks of every differentiable building block on random
//! instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{modulate_offsets, DeformAttention, DeformConfig, OffsetMode};
use crate::error::Result;
use crate::geometry::{box_from_var, rotated_iou_of, AngleRange, RotatedBox};
use crate::losses::{pair_losses, point_set_loss_of, LossConfig, PointNorm, RegressionLoss};
use crate::model::{predict_box_head, refine_anchor, Model, ModelConfig};
use crate::numcore::gradcheck::{check_gradients, GradCheck};
use crate::numcore::{linear, Bound, ConvSpec, Graph, LevelShape, ParamStore, Tensor, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;
/// Largest tolerated fraction of elements skipped at kinks.
pub const MAX_KINK_FRACTION: f64 = 0.01;

type Case = fn(&mut ChaCha8Rng) -> Result<GradCheck>;

/// Names of the checked operations, in suite order.
pub const CASES: [&str; 14] = [
    "linear",
    "layer_norm",
    "softmax",
    "bilinear_sample",
    "conv2d",
    "deform_attn",
    "rotate_rows",
    "modulate_offsets",
    "rsdeform_attention",
    "point_set_loss",
    "rotated_iou_loss",
    "refine_anchor",
    "decoder_layer",
    "pair_losses",
];

fn case_fn(name: &str) -> Option<Case> {
    let f: Case = match name {
        "linear" => check_linear,
        "layer_norm" => check_layer_norm,
        "softmax" => check_softmax,
        "bilinear_sample" => check_bilinear,
        "conv2d" => check_conv,
        "deform_attn" => check_deform_attn,
        "rotate_rows" => check_rotate_rows,
        "modulate_offsets" => check_modulate,
        "rsdeform_attention" => check_rsdeform,
        "point_set_loss" => check_point_set,
        "rotated_iou_loss" => check_rotated_iou,
        "refine_anchor" => check_refine_anchor,
        "decoder_layer" => check_decoder_layer,
        "pair_losses" => check_pair_losses,
        _ => return None,
    };
    Some(f)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    /// Instance with the largest error.
    pub worst_instance: usize,
    pub checked: usize,
    pub kinks: usize,
    pub passed: bool,
}

/// Run `names` (all cases when empty), each on `instances` random draws.
pub fn run_suite(names: &[String], instances: usize, tolerance: f64, seed: u64) -> Result<Vec<CaseReport>> {
    let selected: Vec<&str> = if names.is_empty() {
        CASES.to_vec()
    } else {
        names.iter().map(String::as_str).collect()
    };
    let mut out = Vec::new();
    for (c, name) in selected.iter().enumerate() {
        let f = case_fn(name).ok_or_else(|| {
            crate::Error::Config(format!("unknown gradient check {name:?}; known: {}", CASES.join(", ")))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64 * 7919));
        let mut worst = (0.0f64, 0usize);
        let (mut checked, mut kinks) = (0, 0);
        for i in 0..instances {
            let r = f(&mut rng)?;
            checked += r.checked;
            kinks += r.kinks;
            if !(r.max_rel_err <= worst.0) {
                worst = (r.max_rel_err, i);
            }
        }
        out.push(CaseReport {
            name: name.to_string(),
            instances,
            max_rel_err: worst.0,
            worst_instance: worst.1,
            checked,
            kinks,
            passed: worst.0 < tolerance && (kinks as f64) <= MAX_KINK_FRACTION * (checked + kinks) as f64,
        });
    }
    Ok(out)
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn rand_boxes(rng: &mut impl Rng, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(5 * n);
    for _ in 0..n {
        data.extend([
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.1..0.5),
            rng.gen_range(0.1..0.5),
            rng.gen_range(-1.4..1.4),
        ]);
    }
    Tensor::new(&[n, 5], data).expect("shape")
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn project<'g>(y: Var<'g>, r: &Tensor) -> Result<Var<'g>> {
    Ok(y.try_mul(&y.graph().constant(r.clone()))?.sum())
}

fn weights_for(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    rand_tensor(rng, shape, -1.0, 1.0)
}

fn check_linear(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let inputs = [
        rand_tensor(rng, &[3, 4], -1.0, 1.0),
        rand_tensor(rng, &[4, 5], -1.0, 1.0),
        rand_tensor(rng, &[5], -1.0, 1.0),
    ];
    let r = weights_for(rng, &[3, 5]);
    check_gradients(&inputs, |_, v| project(linear(v[0], v[1], v[2])?, &r))
}

fn check_layer_norm(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let inputs = [
        rand_tensor(rng, &[4, 6], -2.0, 2.0),
        rand_tensor(rng, &[6], 0.5, 1.5),
        rand_tensor(rng, &[6], -0.5, 0.5),
    ];
    let r = weights_for(rng, &[4, 6]);
    check_gradients(&inputs, |_, v| project(v[0].layer_norm(&v[1], &v[2], 1e-5)?, &r))
}

fn check_softmax(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let inputs = [rand_tensor(rng, &[3, 5], -3.0, 3.0)];
    let r = weights_for(rng, &[3, 5]);
    check_gradients(&inputs, |_, v| project(v[0].softmax(1)?, &r))
}

fn check_bilinear(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let inputs = [rand_tensor(rng, &[2, 5, 6], -1.0, 1.0), rand_tensor(rng, &[7, 2], 0.05, 0.95)];
    let r = weights_for(rng, &[7, 2]);
    check_gradients(&inputs, |g, v| project(g.bilinear_sample(v[0], v[1])?, &r))
}

fn check_conv(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let inputs = [
        rand_tensor(rng, &[2, 6, 6], -1.0, 1.0),
        rand_tensor(rng, &[3, 2, 3, 3], -0.5, 0.5),
        rand_tensor(rng, &[3], -0.5, 0.5),
    ];
    let r = weights_for(rng, &[3, 3, 3]);
    let spec = ConvSpec { stride: 2, padding: 1 };
    check_gradients(&inputs, |g, v| project(g.conv2d(v[0], v[1], v[2], spec)?, &r))
}

fn two_levels() -> Vec<LevelShape> {
    vec![
        LevelShape {
            height: 3,
            width: 4,
            start: 0,
        },
        LevelShape {
            height: 2,
            width: 2,
            start: 12,
        },
    ]
}

fn check_deform_attn(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let levels = two_levels();
    let inputs = [
        rand_tensor(rng, &[16, 4], -1.0, 1.0),
        rand_tensor(rng, &[2, 2, 2, 2, 2], 0.02, 0.98),
        rand_tensor(rng, &[2, 2, 2, 2], 0.1, 1.0),
    ];
    let r = weights_for(rng, &[2, 4]);
    check_gradients(&inputs, |g, v| project(g.deform_attn(v[0], v[1], v[2], &levels)?, &r))
}

fn check_rotate_rows(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let inputs = [rand_tensor(rng, &[3, 4, 2], -1.0, 1.0), rand_tensor(rng, &[3], -3.0, 3.0)];
    let r = weights_for(rng, &[3, 4, 2]);
    check_gradients(&inputs, |g, v| project(g.rotate_rows(v[0], v[1])?, &r))
}

fn check_modulate(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let inputs = [rand_tensor(rng, &[3, 4, 2], -2.0, 2.0), rand_boxes(rng, 3)];
    let r = weights_for(rng, &[3, 4, 2]);
    let alpha = [Some(1.0), Some(2.0), None][rng.gen_range(0..3)];
    check_gradients(&inputs, |_, v| project(modulate_offsets(v[0], v[1], alpha)?, &r))
}

/// Inputs first, then every tensor of `store`; `f` receives the input
/// variables and a binding of the store.
fn check_with_params<F>(inputs: Vec<Tensor>, store: &ParamStore, f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&[Var<'g>], &Bound<'g>) -> Result<Var<'g>>,
{
    let n = inputs.len();
    let mut all = inputs;
    all.extend(store.iter().map(|(_, t)| t.clone()));
    check_gradients(&all, |_, v| f(&v[..n], &Bound::from_vars(v[n..].to_vec())))
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-scale..scale));
    }
}

fn check_rsdeform(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let cfg = DeformConfig::new(8, 2, 2, 2, OffsetMode::rotated(1.0));
    let attn = DeformAttention::new(&mut store, "attn", cfg, rng)?;
    randomize(&mut store, rng, 0.5);
    let levels = vec![
        LevelShape {
            height: 3,
            width: 3,
            start: 0,
        },
        LevelShape {
            height: 2,
            width: 2,
            start: 9,
        },
    ];
    let inputs = vec![
        rand_tensor(rng, &[1, 8], -1.0, 1.0),
        rand_boxes(rng, 1),
        rand_tensor(rng, &[13, 8], -1.0, 1.0),
    ];
    let r = weights_for(rng, &[1, 8]);
    check_with_params(inputs, &store, |v, p| project(attn.forward(p, v[0], v[1], v[2], &levels)?.out, &r))
}

/// Prediction boxes near random targets so that they overlap.
fn box_pairs(rng: &mut impl Rng, n: usize) -> (Tensor, Vec<RotatedBox>) {
    let gts = rand_boxes(rng, n);
    let mut pred = gts.clone();
    for (i, x) in pred.data_mut().iter_mut().enumerate() {
        let jitter = if i % 5 == 4 { 0.3 } else { 0.04 };
        *x += rng.gen_range(-jitter..jitter);
    }
    let boxes = gts.data().chunks(5).map(|c| RotatedBox::from_array([c[0], c[1], c[2], c[3], c[4]])).collect();
    (pred, boxes)
}

fn check_point_set(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (pred, gts) = box_pairs(rng, 3);
    let norm = if rng.gen_bool(0.5) { PointNorm::L1 } else { PointNorm::L2 };
    check_gradients(&[pred], |g, v| {
        let mut total = g.scalar(0.0);
        for (i, gt) in gts.iter().enumerate() {
            let p = box_from_var(v[0].row(i)?)?;
            total = total + point_set_loss_of(&p, &gt.map(|x| g.scalar(x)), norm);
        }
        Ok(total)
    })
}

fn check_rotated_iou(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (pred, gts) = box_pairs(rng, 3);
    check_gradients(&[pred], |g, v| {
        let mut total = g.scalar(0.0);
        for (i, gt) in gts.iter().enumerate() {
            let p = box_from_var(v[0].row(i)?)?;
            total = total + rotated_iou_of(&p, &gt.map(|x| g.scalar(x)));
        }
        Ok(total)
    })
}

/// The per-pair losses as used in training, regression and IoU together.
fn check_pair_losses(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (pred, gts) = box_pairs(rng, 4);
    let cfg = LossConfig {
        regression: if rng.gen_bool(0.5) {
            RegressionLoss::PointSet(PointNorm::L1)
        } else {
            RegressionLoss::L1
        },
        ..LossConfig::default()
    };
    let r = weights_for(rng, &[2, 4]);
    check_gradients(&[pred], |g, v| {
        let (reg, iou) = pair_losses(v[0], &gts, &cfg)?;
        project(g.stack(&[reg, iou])?, &r)
    })
}

fn check_refine_anchor(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let inputs = [rand_boxes(rng, 4), rand_tensor(rng, &[4, 5], -2.0, 2.0)];
    let r = weights_for(rng, &[4, 5]);
    let range = AngleRange::default();
    check_gradients(&inputs, |_, v| project(refine_anchor(v[0], v[1], range)?, &r))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        d_model: 8,
        heads: 2,
        points: 2,
        ffn_dim: 12,
        n_queries: 3,
        n_enc: 1,
        m_align: 1,
        n_dec: 1,
        d_pe: 8,
        ..ModelConfig::default()
    }
}

/// A full decoder layer against its content and memory inputs and every
/// parameter the layer reads. The reference anchors stay fixed: the layer
/// stops gradients through its sampling locations.
fn check_decoder_layer(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let cfg = tiny_model_config();
    let mut model = Model::new(cfg.clone(), rng.gen())?;
    randomize(&mut model.params, rng, 0.4);
    let levels = cfg.level_shapes();
    let s = cfg.pixels();
    let used = |name: &str| ["dec0.", "anchor_pe.", "query_scale."].iter().any(|p| name.starts_with(p));
    let anchor_logits = rand_tensor(rng, &[3, 5], -1.5, 1.5);
    let mut inputs = vec![rand_tensor(rng, &[3, 8], -1.0, 1.0), rand_tensor(rng, &[s, 8], -1.0, 1.0)];
    let mut slots = Vec::new();
    for (name, t) in model.params.iter() {
        if used(name) {
            slots.push(Some(inputs.len()));
            inputs.push(t.clone());
        } else {
            slots.push(None);
        }
    }
    let frozen: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let r = [weights_for(rng, &[3, 8]), weights_for(rng, &[3, 5]), weights_for(rng, &[3, cfg.num_classes])];
    check_gradients(&inputs, |g: &Graph, v| {
        let vars = slots
            .iter()
            .zip(&frozen)
            .map(|(slot, t)| match slot {
                Some(k) => v[*k],
                None => g.constant(t.clone()),
            })
            .collect();
        let p = Bound::from_vars(vars);
        let anchors = predict_box_head(g.constant(anchor_logits.clone()), cfg.angle_range)?;
        let (content, out) = model.decoder_layer(&p, 0, v[0], anchors, None, v[1], &levels)?;
        Ok(project(content, &r[0])? + project(out.boxes, &r[1])? + project(out.logits, &r[2])?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_resolves() {
        for name in CASES {
            assert!(case_fn(name).is_some(), "{name}");
        }
        assert!(run_suite(&["nope".into()], 1, 1e-4, 0).is_err());
    }
}
