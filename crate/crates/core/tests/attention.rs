use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rotatr::attention::{
    anchor_features, modulate_offsets, sine_values, DeformAttention, DeformConfig, MultiHeadAttention, OffsetMode,
    PosEncodingConfig,
};
use rotatr::geometry::{rotate_vec, RotatedBox};
use rotatr::numcore::{Graph, LevelShape, Linear, ParamStore, Tensor};

fn randomize(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

fn rand_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(m.len(), m[0].len(), m.concat()).unwrap()
}

fn apply(store: &ParamStore, l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (w, b) = (store.get(l.w), store.get(l.b));
    x.iter()
        .map(|row| (0..l.dout).map(|j| b.data()[j] + (0..l.din).map(|k| row[k] * w.at(&[k, j])).sum::<f64>()).collect())
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn sine_embedding_matches_closed_form() {
    let (d, t) = (16, 10000.0);
    for x in [0.0, 0.13, 0.5, 0.97] {
        let got = sine_values(x, d, t);
        for i in 0..d / 2 {
            let arg = 2.0 * PI * x / t.powf(2.0 * i as f64 / d as f64);
            assert!((got[2 * i] - arg.sin()).abs() < 1e-14);
            assert!((got[2 * i + 1] - arg.cos()).abs() < 1e-14);
        }
    }
}

#[test]
fn anchor_features_concatenate_fields() {
    let cfg = PosEncodingConfig {
        d_pe: 6,
        temperature: 20.0,
        d_model: 8,
    };
    let a = [0.3, 0.6, 0.2, 0.15, -0.7];
    let g = Graph::new();
    let got = anchor_features(g.constant(Tensor::matrix(1, 5, a.to_vec()).unwrap()), &cfg).unwrap().data();
    assert_eq!(got.len(), cfg.raw_width());
    let mut want = Vec::new();
    for v in &a[..4] {
        want.extend(sine_values(*v, 6, 20.0));
    }
    want.extend([a[4].sin(), a[4].cos()]);
    for (x, y) in got.iter().zip(&want) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn multi_head_attention_matches_per_head_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (d, heads, n, m) = (8, 2, 3, 5);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", d, heads, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.7);
    let (q, kv) = (rand_matrix(&mut rng, n, d), rand_matrix(&mut rng, m, d));
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let kvv = g.constant(to_tensor(&kv));
    let got = mha.forward(&p, g.constant(to_tensor(&q)), kvv, kvv).unwrap().data();

    let (qp, kp, vp) = (apply(&store, &mha.query, &q), apply(&store, &mha.key, &kv), apply(&store, &mha.value, &kv));
    let dh = d / heads;
    let mut mixed = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..m)
                .map(|j| cols.clone().map(|c| qp[i][c] * kp[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for c in cols.clone() {
                mixed[i][c] = (0..m).map(|j| a[j] * vp[j][c]).sum();
            }
        }
    }
    let want = apply(&store, &mha.output, &mixed).concat();
    for (x, y) in got.iter().zip(&want) {
        assert!((x - y).abs() < 1e-12);
    }
}

/// Zero-padded bilinear read of channel `c` from a row-major `[H*W, d]` block.
fn bilinear(value: &[Vec<f64>], lv: &LevelShape, c: usize, x: f64, y: f64) -> f64 {
    let (u, v) = (x * lv.width as f64 - 0.5, y * lv.height as f64 - 0.5);
    let (j0, i0) = (u.floor(), v.floor());
    let (fx, fy) = (u - j0, v - i0);
    let get = |i: f64, j: f64| {
        if i < 0.0 || j < 0.0 || i >= lv.height as f64 || j >= lv.width as f64 {
            0.0
        } else {
            value[lv.start + i as usize * lv.width + j as usize][c]
        }
    };
    get(i0, j0) * (1.0 - fx) * (1.0 - fy) + get(i0, j0 + 1.0) * fx * (1.0 - fy) + get(i0 + 1.0, j0) * (1.0 - fx) * fy + get(i0 + 1.0, j0 + 1.0) * fx * fy
}

fn levels() -> Vec<LevelShape> {
    vec![
        LevelShape {
            height: 4,
            width: 4,
            start: 0,
        },
        LevelShape {
            height: 2,
            width: 3,
            start: 16,
        },
    ]
}

#[test]
fn deformable_attention_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (d, heads, points, nq) = (8, 2, 3, 4);
    let lv = levels();
    for mode in [OffsetMode::Plain, OffsetMode::rotated(1.0), OffsetMode::rotated(2.5), OffsetMode::Rotated { range: None }] {
        let mut store = ParamStore::new();
        let attn = DeformAttention::new(&mut store, "da", DeformConfig::new(d, heads, 2, points, mode), &mut rng).unwrap();
        randomize(&mut store, &mut rng, 0.5);
        let queries = rand_matrix(&mut rng, nq, d);
        let memory = rand_matrix(&mut rng, 22, d);
        let anchors: Vec<RotatedBox> = (0..nq)
            .map(|_| RotatedBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(-PI..PI)).unwrap())
            .collect();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let anchor_t = Tensor::matrix(nq, 5, anchors.iter().flat_map(|a| a.to_array()).collect()).unwrap();
        let out = attn
            .forward(&p, g.constant(to_tensor(&queries)), g.constant(anchor_t), g.constant(to_tensor(&memory)), &lv)
            .unwrap();

        let raw = apply(&store, &attn.offsets, &queries);
        let logits = apply(&store, &attn.weights, &queries);
        let value = apply(&store, &attn.value, &memory);
        let dh = d / heads;
        let mut sampled = vec![vec![0.0; d]; nq];
        let got_loc = out.locations.data();
        for q in 0..nq {
            let a = anchors[q];
            for h in 0..heads {
                let w = softmax(&logits[q][h * 2 * points..(h + 1) * 2 * points]);
                for l in 0..2 {
                    for k in 0..points {
                        let s = (h * 2 + l) * points + k;
                        let (ox, oy) = (raw[q][2 * s], raw[q][2 * s + 1]);
                        let (dx, dy) = match mode {
                            OffsetMode::Plain => (ox, oy),
                            OffsetMode::Rotated { range: None } => rotate_vec(ox, oy, a.theta),
                            OffsetMode::Rotated { range: Some(al) } => {
                                rotate_vec(al * a.w * (sigmoid(ox) - 0.5), al * a.h * (sigmoid(oy) - 0.5), a.theta)
                            }
                        };
                        let (x, y) = (a.cx + dx, a.cy + dy);
                        let i = 2 * (q * heads * 2 * points + s);
                        assert!((got_loc[i] - x).abs() < 1e-14 && (got_loc[i + 1] - y).abs() < 1e-14);
                        for c in h * dh..(h + 1) * dh {
                            sampled[q][c] += w[l * points + k] * bilinear(&value, &lv[l], c, x, y);
                        }
                    }
                }
            }
        }
        let want = apply(&store, &attn.output, &sampled).concat();
        for (x, y) in out.out.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12, "{mode:?}");
        }
    }
}

#[test]
fn unit_range_keeps_ten_thousand_draws_inside_the_anchor() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let n = 10_000;
    let anchors: Vec<RotatedBox> = (0..n)
        .map(|_| RotatedBox::new(rng.gen(), rng.gen(), rng.gen_range(1e-3..1.0), rng.gen_range(1e-3..1.0), rng.gen_range(-2.0 * PI..2.0 * PI)).unwrap())
        .collect();
    // Heavy-tailed raw offsets so that the squashing saturates often.
    let raw: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0f64..1.0).powi(3) * 60.0).collect();
    let g = Graph::new();
    let a = g.constant(Tensor::matrix(n, 5, anchors.iter().flat_map(|b| b.to_array()).collect()).unwrap());
    let d = modulate_offsets(g.constant(Tensor::new(&[n, 1, 2], raw).unwrap()), a, Some(1.0)).unwrap().data();
    for (i, b) in anchors.iter().enumerate() {
        assert!(b.contains(b.cx + d[2 * i], b.cy + d[2 * i + 1], 1e-12), "draw {i}");
    }
}

#[test]
fn wider_range_reaches_outside_the_anchor() {
    let g = Graph::new();
    let a = g.constant(Tensor::matrix(1, 5, vec![0.5, 0.5, 0.2, 0.2, 0.4]).unwrap());
    let raw = g.constant(Tensor::new(&[1, 1, 2], vec![30.0, 0.0]).unwrap());
    let d = modulate_offsets(raw, a, Some(2.0)).unwrap().data();
    assert!((d[0].hypot(d[1]) - 0.2).abs() < 1e-9);
    let anchor = RotatedBox::new(0.5, 0.5, 0.2, 0.2, 0.4).unwrap();
    assert!(!anchor.contains(0.5 + d[0], 0.5 + d[1], 1e-12));
    assert!(modulate_offsets(raw, a, Some(0.0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Turning the anchor about its center by `phi` turns every sampling
    /// location about that center by `phi`.
    #[test]
    fn sampling_locations_are_rotation_equivariant(
        seed in any::<u64>(),
        phi in -PI..PI,
        alpha in prop::sample::select(vec![Some(1.0), Some(2.0), Some(4.0), None]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = DeformConfig::new(8, 2, 2, 3, OffsetMode::Rotated { range: alpha });
        let attn = DeformAttention::new(&mut store, "da", cfg, &mut rng).unwrap();
        randomize(&mut store, &mut rng, 0.5);
        let anchor = RotatedBox::new(rng.gen(), rng.gen(), rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6), rng.gen_range(-PI..PI)).unwrap();
        let turned = RotatedBox { theta: anchor.theta + phi, ..anchor };
        let query = rand_matrix(&mut rng, 1, 8);
        let memory = rand_matrix(&mut rng, 22, 8);
        let locate = |b: &RotatedBox| {
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            attn.forward(
                &p,
                g.constant(to_tensor(&query)),
                g.constant(Tensor::matrix(1, 5, b.to_array().to_vec()).unwrap()),
                g.constant(to_tensor(&memory)),
                &levels(),
            )
            .unwrap()
            .locations
            .data()
        };
        let (base, rot) = (locate(&anchor), locate(&turned));
        for (u, v) in base.chunks(2).zip(rot.chunks(2)) {
            let (x, y) = rotate_vec(u[0] - anchor.cx, u[1] - anchor.cy, phi);
            prop_assert!((anchor.cx + x - v[0]).abs() < 1e-12);
            prop_assert!((anchor.cy + y - v[1]).abs() < 1e-12);
        }
    }
}
