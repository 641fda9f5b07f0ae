use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rotatr::geometry::{AngleRange, RotatedBox};
use rotatr::matching::MatchMode;
use rotatr::model::{
    boxes_from_tensor, denormalize_boxes, normalize_boxes, refine_anchor, refine_box, top_k, Model, ModelConfig,
    StageMode, Targets,
};
use rotatr::numcore::{Graph, ParamStore, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        d_model: 16,
        heads: 2,
        points: 2,
        ffn_dim: 16,
        n_queries: 4,
        d_pe: 8,
        ..Default::default()
    }
}

fn image(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[3, size, size], (0..3 * size * size).map(|_| rng.gen()).collect()).unwrap()
}

fn perturb(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// Final-layer anchors and sampling locations, per query.
fn locations(model: &Model, img: &Tensor) -> Vec<(RotatedBox, Vec<[f64; 2]>)> {
    let g = Graph::new();
    let p = model.params.bind_frozen(&g);
    let out = model.forward(&p, g.constant(img.clone())).unwrap();
    let mut res = Vec::new();
    for layer in &out.layers {
        let anchors = boxes_from_tensor(&layer.anchors.value());
        let loc = layer.locations.data();
        let per = loc.len() / (2 * anchors.len());
        for (q, a) in anchors.into_iter().enumerate() {
            res.push((a, (0..per).map(|k| [loc[2 * (q * per + k)], loc[2 * (q * per + k) + 1]]).collect()));
        }
    }
    res
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = Model::new(tiny(), 5).unwrap();
    let b = Model::new(tiny(), 5).unwrap();
    let c = Model::new(tiny(), 6).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn every_flag_combination_runs_forward_and_backward() {
    let targets = Targets {
        boxes: vec![
            RotatedBox::new(0.4, 0.5, 0.3, 0.15, 0.6).unwrap(),
            RotatedBox::new(0.7, 0.3, 0.2, 0.1, -0.4).unwrap(),
        ],
        classes: vec![0, 1],
    };
    for bits in 0..16u32 {
        for stage in [StageMode::OneStage, StageMode::TwoStage] {
            let cfg = ModelConfig {
                dab: bits & 1 != 0,
                rs: bits & 2 != 0,
                fa: bits & 4 != 0,
                ps: bits & 8 != 0,
                stage,
                ..tiny()
            };
            let model = Model::new(cfg.clone(), 1).unwrap();
            let g = Graph::new();
            let p = model.params.bind(&g);
            let out = model.forward(&p, g.constant(image(2, 32))).unwrap();
            let loss = model.loss(&out, &targets).unwrap();
            assert!(loss.total.item().is_finite() && loss.total.item() > 0.0, "{cfg:?}");
            g.backward(loss.total).unwrap();
            assert!(p.grads().iter().flatten().all(|v| v.is_finite()));
            assert_eq!(loss.matching.pairs.len(), 2);
        }
    }
}

#[test]
fn flags_change_the_forward_pass() {
    let img = image(3, 32);
    let base = ModelConfig {
        dab: false,
        rs: false,
        fa: false,
        ps: false,
        ..tiny()
    };
    let predict = |cfg: &ModelConfig| Model::new(cfg.clone(), 9).unwrap().predict(&img).unwrap();
    let reference = predict(&base);
    for cfg in [
        ModelConfig { dab: true, ..base.clone() },
        ModelConfig { rs: true, ..base.clone() },
        ModelConfig { fa: true, ..base.clone() },
    ] {
        let mut model = Model::new(cfg.clone(), 9).unwrap();
        perturb(&mut model.params, 4, 0.05);
        let mut plain = Model::new(base.clone(), 9).unwrap();
        plain.params.load_matching(&model.params).unwrap();
        let (a, b) = (model.predict(&img).unwrap(), plain.predict(&img).unwrap());
        assert_ne!(a, b, "{cfg:?}");
    }
    assert_eq!(reference.len(), 4);
}

#[test]
fn point_set_flag_changes_only_the_regression_loss() {
    let img = image(3, 32);
    let targets = Targets {
        boxes: vec![RotatedBox::new(0.5, 0.5, 0.4, 0.1, 1.2).unwrap()],
        classes: vec![1],
    };
    let run = |ps: bool| {
        let model = Model::new(ModelConfig { ps, ..tiny() }, 9).unwrap();
        let g = Graph::new();
        let p = model.params.bind_frozen(&g);
        let out = model.forward(&p, g.constant(img.clone())).unwrap();
        let l = model.loss(&out, &targets).unwrap();
        (model.detections(&out), l.reg, l.cls)
    };
    let (with, without) = (run(true), run(false));
    assert_eq!(with.0, without.0);
    assert_ne!(with.1, without.1);
}

#[test]
fn unit_range_keeps_decoder_sampling_inside_anchors() {
    let cfg = ModelConfig {
        alpha: Some(1.0),
        ..tiny()
    };
    for seed in 0..5 {
        let mut model = Model::new(cfg.clone(), seed).unwrap();
        perturb(&mut model.params, seed + 100, 0.5);
        for (anchor, pts) in locations(&model, &image(seed, 32)) {
            for p in pts {
                assert!(anchor.contains(p[0], p[1], 1e-12), "{anchor:?} {p:?}");
            }
        }
    }
}

#[test]
fn without_range_sampling_can_leave_anchors() {
    let cfg = ModelConfig { alpha: None, ..tiny() };
    let mut model = Model::new(cfg, 0).unwrap();
    perturb(&mut model.params, 7, 0.5);
    let outside = locations(&model, &image(0, 32))
        .iter()
        .flat_map(|(a, pts)| pts.iter().map(move |p| !a.contains(p[0], p[1], 1e-12)))
        .filter(|&o| o)
        .count();
    assert!(outside > 0);
}

#[test]
fn snapshot_restores_predictions() {
    let mut model = Model::new(tiny(), 11).unwrap();
    perturb(&mut model.params, 12, 0.1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rtrw");
    model.params.save(&path).unwrap();
    let mut fresh = Model::new(tiny(), 99).unwrap();
    let n = fresh.params.load_matching(&ParamStore::load(&path).unwrap()).unwrap();
    assert_eq!(n, fresh.params.len());
    let img = image(13, 32);
    assert_eq!(fresh.predict(&img).unwrap(), model.predict(&img).unwrap());
}

#[test]
fn predictions_are_valid_boxes_with_probabilities() {
    for stage in [StageMode::OneStage, StageMode::TwoStage] {
        let model = Model::new(ModelConfig { stage, ..tiny() }, 2).unwrap();
        let dets = model.predict(&image(1, 32)).unwrap();
        assert_eq!(dets.len(), 4);
        for d in dets {
            assert!(d.rbox.validate().is_ok());
            assert!(d.score > 0.0 && d.score < 1.0);
            assert!(d.class < 2);
            assert!((-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2).contains(&d.rbox.theta));
        }
    }
}

#[test]
fn default_first_stage_assigner_follows_stage() {
    let one = ModelConfig { stage: StageMode::OneStage, ..tiny() };
    let two = ModelConfig { stage: StageMode::TwoStage, ..tiny() };
    assert_eq!(one.first_stage_assign(), MatchMode::O2M);
    assert_eq!(two.first_stage_assign(), MatchMode::O2O);
    let forced = ModelConfig {
        label_assign: Some(MatchMode::O2O),
        ..one
    };
    assert_eq!(forced.first_stage_assign(), MatchMode::O2O);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(Model::new(ModelConfig { heads: 3, ..tiny() }, 0).is_err());
    assert!(Model::new(ModelConfig { n_queries: 0, ..tiny() }, 0).is_err());
    assert!(Model::new(ModelConfig { image_size: 30, ..tiny() }, 0).is_err());
}

fn sortable() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.25, 0.5, 2.0, 3.5]), 0..30)
}

proptest! {
    #[test]
    fn top_k_is_a_stable_descending_sort_prefix(scores in sortable(), k in 0usize..40) {
        let mut want: Vec<usize> = (0..scores.len()).collect();
        want.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        want.truncate(k);
        prop_assert_eq!(top_k(&scores, k), want);
    }

    #[test]
    fn zero_delta_refinement_is_a_fixed_point(
        cx in 0.01..0.99f64, cy in 0.01..0.99f64, w in 0.01..0.99f64, h in 0.01..0.99f64, t in -1.5..1.5f64,
    ) {
        let prev = RotatedBox::new(cx, cy, w, h, t).unwrap();
        let r = refine_box(&prev, [0.0; 5], AngleRange::default()).unwrap();
        for (a, b) in r.to_array().iter().zip(prev.to_array()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_and_plain_refinement_agree(
        cx in 0.05..0.95f64, cy in 0.05..0.95f64, w in 0.05..0.95f64, h in 0.05..0.95f64, t in -1.5..1.5f64,
        d in prop::array::uniform5(-2.0..2.0f64),
    ) {
        let prev = RotatedBox::new(cx, cy, w, h, t).unwrap();
        let plain = refine_box(&prev, d, AngleRange::default()).unwrap();
        let g = Graph::new();
        let out = refine_anchor(
            g.constant(Tensor::matrix(1, 5, prev.to_array().to_vec()).unwrap()),
            g.constant(Tensor::matrix(1, 5, d.to_vec()).unwrap()),
            AngleRange::default(),
        )
        .unwrap()
        .data();
        for (a, b) in out.iter().zip(plain.to_array()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn angle_normalization_roundtrips(t in -1.5..1.5f64, range in 0.5..7.0f64) {
        let r = AngleRange::new(range).unwrap();
        let g = Graph::new();
        let b = g.constant(Tensor::matrix(1, 5, vec![0.1, 0.2, 0.3, 0.4, t]).unwrap());
        let back = denormalize_boxes(normalize_boxes(b, r).unwrap(), r).unwrap().data();
        prop_assert!((back[4] - t).abs() < 1e-12);
        prop_assert!((r.normalize(t) - (t + range / 2.0) / range).abs() < 1e-15);
    }
}
