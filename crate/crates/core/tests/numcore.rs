use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rotatr::numcore::gradcheck::check_gradients;
use rotatr::numcore::{linear, AdamW, ConvSpec, Graph, LevelShape, ParamStore, Tensor};

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

#[test]
fn softmax_matches_exp_over_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[4, 7], -30.0, 30.0);
    let g = Graph::new();
    let got = g.constant(x.clone()).softmax(1).unwrap().data();
    let mut want = Vec::new();
    for row in x.data().chunks(7) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        want.extend(e.iter().map(|v| v / s));
    }
    close(&got, &want, 1e-15);
}

#[test]
fn softmax_survives_huge_logits() {
    let g = Graph::new();
    let got = g.constant(Tensor::vector(&[1000.0, 1000.0, -1000.0])).softmax(0).unwrap().data();
    close(&got, &[0.5, 0.5, 0.0], 1e-15);
}

#[test]
fn linear_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, w, b) = (
        rand_tensor(&mut rng, &[3, 4], -1.0, 1.0),
        rand_tensor(&mut rng, &[4, 2], -1.0, 1.0),
        rand_tensor(&mut rng, &[2], -1.0, 1.0),
    );
    let g = Graph::new();
    let got = linear(g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone())).unwrap().data();
    let mut want = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            want[i * 2 + j] = b.data()[j] + (0..4).map(|k| x.at(&[i, k]) * w.at(&[k, j])).sum::<f64>();
        }
    }
    close(&got, &want, 1e-14);
}

#[test]
fn layer_norm_matches_population_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 5], -3.0, 3.0);
    let gamma = rand_tensor(&mut rng, &[5], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[5], -1.0, 1.0);
    let g = Graph::new();
    let got = g
        .constant(x.clone())
        .layer_norm(&g.constant(gamma.clone()), &g.constant(beta.clone()), 1e-5)
        .unwrap()
        .data();
    let mut want = Vec::new();
    for row in x.data().chunks(5) {
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for (k, v) in row.iter().enumerate() {
            want.push((v - mean) / (var + 1e-5).sqrt() * gamma.data()[k] + beta.data()[k]);
        }
    }
    close(&got, &want, 1e-13);
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for di in 0..k {
                        for dj in 0..k {
                            let (yi, xj) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                            if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < wd {
                                acc += x.at(&[c, yi as usize, xj as usize]) * w.at(&[o, c, di, dj]);
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = rand_tensor(&mut rng, &[2, 7, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let g = Graph::new();
        let got = g
            .conv2d(g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()), ConvSpec { stride, padding: pad })
            .unwrap()
            .data();
        close(&got, &naive_conv(&x, &w, &b, stride, pad), 1e-13);
    }
}

/// Zero-padded bilinear read with pixel centers at `(j + 0.5) / W`.
fn naive_bilinear(feat: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (feat.shape()[1], feat.shape()[2]);
    let (u, v) = (x * w as f64 - 0.5, y * h as f64 - 0.5);
    let (j0, i0) = (u.floor(), v.floor());
    let (fx, fy) = (u - j0, v - i0);
    let get = |i: f64, j: f64| {
        if i < 0.0 || j < 0.0 || i >= h as f64 || j >= w as f64 {
            0.0
        } else {
            feat.at(&[c, i as usize, j as usize])
        }
    };
    get(i0, j0) * (1.0 - fx) * (1.0 - fy)
        + get(i0, j0 + 1.0) * fx * (1.0 - fy)
        + get(i0 + 1.0, j0) * (1.0 - fx) * fy
        + get(i0 + 1.0, j0 + 1.0) * fx * fy
}

#[test]
fn bilinear_matches_formula_with_zero_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feat = rand_tensor(&mut rng, &[3, 4, 5], -1.0, 1.0);
    let pts = rand_tensor(&mut rng, &[40, 2], -0.3, 1.3);
    let g = Graph::new();
    let got = g.bilinear_sample(g.constant(feat.clone()), g.constant(pts.clone())).unwrap().data();
    let mut want = Vec::new();
    for p in pts.data().chunks(2) {
        for c in 0..3 {
            want.push(naive_bilinear(&feat, c, p[0], p[1]));
        }
    }
    close(&got, &want, 1e-14);
}

#[test]
fn bilinear_hits_pixel_centers_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let feat = rand_tensor(&mut rng, &[1, 3, 4], -1.0, 1.0);
    let g = Graph::new();
    let pts = Tensor::new(&[1, 2], vec![2.5 / 4.0, 1.5 / 3.0]).unwrap();
    let got = g.bilinear_sample(g.constant(feat.clone()), g.constant(pts)).unwrap().item();
    assert!((got - feat.at(&[0, 1, 2])).abs() < 1e-15);
}

#[test]
fn deform_attn_matches_per_head_bilinear_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let levels = [
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
    ];
    let (q, heads, k, c) = (3, 2, 3, 6);
    let value = rand_tensor(&mut rng, &[16, c], -1.0, 1.0);
    let loc = rand_tensor(&mut rng, &[q, heads, 2, k, 2], -0.1, 1.1);
    let weight = rand_tensor(&mut rng, &[q, heads, 2, k], 0.0, 1.0);
    let g = Graph::new();
    let got = g
        .deform_attn(g.constant(value.clone()), g.constant(loc.clone()), g.constant(weight.clone()), &levels)
        .unwrap()
        .data();
    let dh = c / heads;
    let mut want = vec![0.0; q * c];
    for qi in 0..q {
        for h in 0..heads {
            for (l, lv) in levels.iter().enumerate() {
                // Level map for this head's channels as [dh, H, W].
                let mut data = Vec::new();
                for ch in 0..dh {
                    for px in 0..lv.height * lv.width {
                        data.push(value.at(&[lv.start + px, h * dh + ch]));
                    }
                }
                let map = Tensor::new(&[dh, lv.height, lv.width], data).unwrap();
                for kk in 0..k {
                    let (x, y) = (loc.at(&[qi, h, l, kk, 0]), loc.at(&[qi, h, l, kk, 1]));
                    let a = weight.at(&[qi, h, l, kk]);
                    for ch in 0..dh {
                        want[qi * c + h * dh + ch] += a * naive_bilinear(&map, ch, x, y);
                    }
                }
            }
        }
    }
    close(&got, &want, 1e-13);
}

#[test]
fn rotate_rows_matches_rotation_convention() {
    let g = Graph::new();
    let dp = g.constant(Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap());
    let theta = g.constant(Tensor::vector(&[std::f64::consts::FRAC_PI_2]));
    close(&g.rotate_rows(dp, theta).unwrap().data(), &[0.0, -1.0], 1e-15);
}

#[test]
fn gradients_of_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let a = rand_tensor(&mut rng, &[3, 4], 0.2, 2.0);
        let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let r = check_gradients(&[a, b], |_, v| {
            let y = v[0].matmul(&v[1])?;
            Ok((y.sin() + y.exp().scale(0.1) + v[0].ln().sum() + v[0].sqrt().sum() + y.sigmoid().square()).sum())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}

#[test]
fn gradients_of_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 2, 3], -1.0, 1.0);
    let r = check_gradients(&[x], |g, v| {
        let p = v[0].permute(&[2, 0, 1])?;
        let n = v[0].narrow(2, 1, 2)?.reshape(&[12])?;
        let cat = g.concat(&[n, n.scale(2.0)], 0)?;
        let sel = v[0].reshape(&[6, 4])?.index_select(&[5, 0, 5])?;
        Ok((p * g.constant(w.clone())).sum() + cat.square().sum() + sel.sum_axis(1)?.square().sum())
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn conv_and_bilinear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..3 {
        let inputs = [
            rand_tensor(&mut rng, &[2, 5, 5], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[2], -1.0, 1.0),
            rand_tensor(&mut rng, &[6, 2], 0.05, 0.95),
        ];
        let r = check_gradients(&inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], ConvSpec { stride: 1, padding: 1 })?;
            Ok(g.bilinear_sample(y, v[3])?.square().sum())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}

#[test]
fn adamw_first_step_is_sign_times_lr_plus_decay() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::vector(&[2.0, -3.0, 0.5]));
    let mut opt = AdamW::new(&store, 0.1, 0.01);
    opt.step(&mut store, &[vec![4.0, -0.5, 1e-3]], 0.1);
    let got = store.by_name("p").unwrap().data().to_vec();
    // m_hat = g, v_hat = g^2, so the Adam step is g / (|g| + eps).
    let want: Vec<f64> = [(2.0, 4.0), (-3.0, -0.5), (0.5, 1e-3)]
        .iter()
        .map(|&(p, g): &(f64, f64)| p - 0.1 * (g / (g.abs() + 1e-8) + 0.01 * p))
        .collect();
    close(&got, &want, 1e-15);
}

fn store_strategy() -> impl Strategy<Value = ParamStore> {
    prop::collection::vec(
        (prop::collection::vec(1usize..4, 0..3), any::<u64>()),
        0..5,
    )
    .prop_map(|specs| {
        let mut store = ParamStore::new();
        for (i, (shape, seed)) in specs.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen::<f64>() * 1e3 - 5e2).collect();
            store.add(format!("layer{i}.w"), Tensor::new(&shape, data).unwrap());
        }
        store
    })
}

proptest! {
    #[test]
    fn snapshot_roundtrip_is_exact(store in store_strategy()) {
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, store);
    }

    #[test]
    fn truncated_snapshot_is_an_error(store in store_strategy(), cut in 1usize..64) {
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let keep = buf.len().saturating_sub(cut);
        prop_assume!(keep < buf.len());
        prop_assert!(ParamStore::read_from(&mut &buf[..keep]).is_err());
    }
}
