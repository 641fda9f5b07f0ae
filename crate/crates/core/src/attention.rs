//! Anchor positional encodings, multi-head self-attention and multi-scale
//! deformable attention with optional rotation-sensitive offsets.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::numcore::{inverse_sigmoid, Bound, LayerNorm, LevelShape, Linear, Mlp, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosEncodingConfig {
    /// Sinusoid width per encoded scalar.
    pub d_pe: usize,
    pub temperature: f64,
    pub d_model: usize,
}

impl Default for PosEncodingConfig {
    fn default() -> Self {
        PosEncodingConfig {
            d_pe: 128,
            temperature: 10000.0,
            d_model: 64,
        }
    }
}

impl PosEncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_pe == 0 || self.d_pe % 2 != 0 {
            return Err(Error::Config(format!("d_pe must be even and positive, got {}", self.d_pe)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Width of the concatenated anchor encoding fed to the MLP.
    pub fn raw_width(&self) -> usize {
        4 * self.d_pe + 2
    }
}

fn sine_tables(d_pe: usize, temperature: f64) -> (Vec<f64>, Vec<f64>) {
    (0..d_pe)
        .map(|i| {
            let k = (i / 2) as f64;
            let freq = 2.0 * PI / temperature.powf(2.0 * k / d_pe as f64);
            (freq, if i % 2 == 0 { 0.0 } else { FRAC_PI_2 })
        })
        .unzip()
}

/// Sinusoidal embedding of each entry of `x: [N]` into `[N, d_pe]`.
/// Slot `2i` holds `sin(2 pi x / T^(2i/d))` and slot `2i + 1` the matching cosine.
pub fn sine_embed<'g>(x: Var<'g>, d_pe: usize, temperature: f64) -> Result<Var<'g>> {
    let n = x.numel();
    let g = x.graph();
    let (freq, phase) = sine_tables(d_pe, temperature);
    let freq = g.constant(Tensor::new(&[1, d_pe], freq)?);
    let phase = g.constant(Tensor::new(&[1, d_pe], phase)?);
    Ok((x.reshape(&[n, 1])? * freq + phase).sin())
}

/// Plain-value counterpart of [`sine_embed`] for a single scalar.
pub fn sine_values(x: f64, d_pe: usize, temperature: f64) -> Vec<f64> {
    let (freq, phase) = sine_tables(d_pe, temperature);
    freq.iter().zip(&phase).map(|(f, ph)| (x * f + ph).sin()).collect()
}

/// `CAT(Pe(x), Pe(y), Pe(w), Pe(h), sin t, cos t)` for `anchors: [N, 5]`.
pub fn anchor_features<'g>(anchors: Var<'g>, cfg: &PosEncodingConfig) -> Result<Var<'g>> {
    let shape = anchors.shape();
    if shape.len() != 2 || shape[1] != 5 {
        return Err(Error::dim(format!("anchors must be [N, 5], got {shape:?}")));
    }
    let n = shape[0];
    let mut parts = Vec::with_capacity(6);
    for f in 0..4 {
        let col = anchors.narrow(1, f, 1)?.reshape(&[n])?;
        parts.push(sine_embed(col, cfg.d_pe, cfg.temperature)?);
    }
    let theta = anchors.narrow(1, 4, 1)?;
    parts.push(theta.sin());
    parts.push(theta.cos());
    anchors.graph().concat(&parts, 1)
}

/// Positional query `MLP(PE(A))` for a set of anchors.
#[derive(Debug, Clone)]
pub struct AnchorEncoder {
    pub cfg: PosEncodingConfig,
    pub mlp: Mlp,
}

impl AnchorEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: PosEncodingConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mlp = Mlp::new(store, name, &[cfg.raw_width(), cfg.d_model, cfg.d_model], rng);
        Ok(AnchorEncoder { cfg, mlp })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, anchors: Var<'g>) -> Result<Var<'g>> {
        self.mlp.forward(p, anchor_features(anchors, &self.cfg)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide d_model {d_model}")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng),
            heads,
        })
    }

    /// Scaled dot-product attention of `q: [N, d]` over `k, v: [M, d]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
        let (n, d) = (q.shape()[0], q.shape()[1]);
        let m = k.shape()[0];
        let h = self.heads;
        let dh = d / h;
        let qh = self.query.forward(p, q)?.reshape(&[n, h, dh])?.permute(&[1, 0, 2])?;
        let kh = self.key.forward(p, k)?.reshape(&[m, h, dh])?.permute(&[1, 2, 0])?;
        let vh = self.value.forward(p, v)?.reshape(&[m, h, dh])?.permute(&[1, 0, 2])?;
        let attn = qh.matmul(&kh)?.scale(1.0 / (dh as f64).sqrt()).softmax(2)?;
        let mixed = attn.matmul(&vh)?.permute(&[1, 0, 2])?.reshape(&[n, d])?;
        self.output.forward(p, mixed)
    }
}

/// Query/key from content plus position, value from content, then residual
/// and layer norm.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub mha: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(SelfAttention {
            mha: MultiHeadAttention::new(store, &format!("{name}.mha"), d_model, heads, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model),
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, content: Var<'g>, pos: Var<'g>) -> Result<Var<'g>> {
        if content.shape().first() == Some(&0) {
            return Err(Error::input("self-attention over an empty query set"));
        }
        let qk = content.try_add(&pos)?;
        let attended = self.mha.forward(p, qk, qk, content)?;
        self.norm.forward(p, content + attended)
    }
}

/// `c + p * MLP_s(c)`.
pub fn conditional_query_mod<'g>(p: &Bound<'g>, scale: &Mlp, content: Var<'g>, pos: Var<'g>) -> Result<Var<'g>> {
    content.try_add(&pos.try_mul(&scale.forward(p, content)?)?)
}

/// How raw offsets become sampling displacements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OffsetMode {
    /// Raw offsets are added to the anchor center directly.
    Plain,
    /// Offsets are rotated into the anchor frame. With `range: Some(alpha)`
    /// they are first squashed and scaled to `alpha` times the anchor extents;
    /// `None` rotates the raw offsets only.
    Rotated { range: Option<f64> },
}

impl OffsetMode {
    pub fn rotated(alpha: f64) -> Self {
        OffsetMode::Rotated { range: Some(alpha) }
    }
}

/// `alpha (w, h) (sigmoid(dp) - 1/2)` rotated by the anchor angle, or just the
/// rotation when `alpha` is `None`.
///
/// `raw: [Q, P, 2]`, `anchors: [Q, 5]`.
pub fn modulate_offsets<'g>(raw: Var<'g>, anchors: Var<'g>, alpha: Option<f64>) -> Result<Var<'g>> {
    let rs = raw.shape();
    let q = anchors.shape()[0];
    if rs.len() != 3 || rs[2] != 2 || rs[0] != q || anchors.shape() != [q, 5] {
        return Err(Error::dim(format!("offsets {rs:?} for anchors {:?}", anchors.shape())));
    }
    let theta = anchors.narrow(1, 4, 1)?.reshape(&[q])?;
    let local = match alpha {
        Some(a) => {
            if !(a > 0.0) {
                return Err(Error::Config(format!("offset range must be positive, got {a}")));
            }
            let extent = anchors.narrow(1, 2, 2)?.reshape(&[q, 1, 2])?.scale(a);
            raw.sigmoid().shift(-0.5).try_mul(&extent)?
        }
        None => raw,
    };
    raw.graph().rotate_rows(local, theta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformConfig {
    pub d_model: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub mode: OffsetMode,
    /// Radius of the initial sampling pattern for raw offsets in image units.
    pub init_radius: f64,
    /// Start with a zero output projection.
    pub zero_output: bool,
}

impl DeformConfig {
    pub fn new(d_model: usize, heads: usize, levels: usize, points: usize, mode: OffsetMode) -> Self {
        DeformConfig {
            d_model,
            heads,
            levels,
            points,
            mode,
            init_radius: 0.1,
            zero_output: false,
        }
    }

    fn samples(&self) -> usize {
        self.heads * self.levels * self.points
    }
}

/// Sampling points realized by a deformable attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDump {
    pub anchor: RotatedBox,
    /// `points[head][level][k]` in normalized image coordinates.
    pub points: Vec<Vec<Vec<[f64; 2]>>>,
}

pub struct DeformOutput<'g> {
    pub out: Var<'g>,
    /// Absolute sampling locations `[Q, H, L, K, 2]`.
    pub locations: Var<'g>,
    /// Attention weights `[Q, H, L, K]`.
    pub weights: Var<'g>,
}

impl DeformOutput<'_> {
    pub fn dump(&self, anchors: &[RotatedBox], heads: usize, levels: usize, points: usize) -> Vec<SamplingDump> {
        let loc = self.locations.data();
        anchors
            .iter()
            .enumerate()
            .map(|(q, a)| SamplingDump {
                anchor: *a,
                points: (0..heads)
                    .map(|h| {
                        (0..levels)
                            .map(|l| {
                                (0..points)
                                    .map(|k| {
                                        let i = 2 * (((q * heads + h) * levels + l) * points + k);
                                        [loc[i], loc[i + 1]]
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DeformAttention {
    pub cfg: DeformConfig,
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl DeformAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: DeformConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.heads == 0 || cfg.d_model % cfg.heads != 0 || cfg.levels == 0 || cfg.points == 0 {
            return Err(Error::Config(format!("bad deformable attention shape {cfg:?}")));
        }
        let d = cfg.d_model;
        let offsets = Linear::zeros(store, &format!("{name}.offsets"), d, 2 * cfg.samples());
        store.get_mut(offsets.b).data_mut().copy_from_slice(&offset_bias(&cfg));
        let weights = Linear::zeros(store, &format!("{name}.weights"), d, cfg.samples());
        let value = Linear::new(store, &format!("{name}.value"), d, d, rng);
        let output = if cfg.zero_output {
            Linear::zeros(store, &format!("{name}.out"), d, d)
        } else {
            Linear::new(store, &format!("{name}.out"), d, d, rng)
        };
        Ok(DeformAttention {
            cfg,
            offsets,
            weights,
            value,
            output,
        })
    }

    /// Attend from `queries: [Q, d]` with reference `anchors: [Q, 5]` into the
    /// flattened multi-level `value_input: [S, d]`.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        queries: Var<'g>,
        anchors: Var<'g>,
        value_input: Var<'g>,
        levels: &[LevelShape],
    ) -> Result<DeformOutput<'g>> {
        let c = self.cfg;
        let q = queries.shape()[0];
        if anchors.shape() != [q, 5] {
            return Err(Error::dim(format!("{q} queries with anchors {:?}", anchors.shape())));
        }
        if levels.len() != c.levels {
            return Err(Error::dim(format!("expected {} levels, got {}", c.levels, levels.len())));
        }
        let raw = self.offsets.forward(p, queries)?.reshape(&[q, c.samples(), 2])?;
        let disp = match c.mode {
            OffsetMode::Plain => raw,
            OffsetMode::Rotated { range } => modulate_offsets(raw, anchors, range)?,
        };
        let centers = anchors.narrow(1, 0, 2)?.reshape(&[q, 1, 2])?;
        let locations = disp
            .try_add(&centers)?
            .reshape(&[q, c.heads, c.levels, c.points, 2])?;
        let weights = self
            .weights
            .forward(p, queries)?
            .reshape(&[q, c.heads, c.levels * c.points])?
            .softmax(2)?
            .reshape(&[q, c.heads, c.levels, c.points])?;
        let value = self.value.forward(p, value_input)?;
        let sampled = queries.graph().deform_attn(value, locations, weights, levels)?;
        Ok(DeformOutput {
            out: self.output.forward(p, sampled)?,
            locations,
            weights,
        })
    }
}

/// Initial offset bias: head `h` points along angle `2 pi h / H`, with points
/// spaced outward. Rotated modes with a finite range encode the pattern in
/// logit space so that it stays inside the anchor.
fn offset_bias(cfg: &DeformConfig) -> Vec<f64> {
    let mut bias = Vec::with_capacity(2 * cfg.samples());
    for h in 0..cfg.heads {
        let (s, co) = (2.0 * PI * h as f64 / cfg.heads as f64).sin_cos();
        // Scale so the larger component is 1 (square rather than circle).
        let m = co.abs().max(s.abs());
        let dir = [co / m, s / m];
        for _ in 0..cfg.levels {
            for k in 0..cfg.points {
                let reach = (k + 1) as f64 / (cfg.points + 1) as f64;
                for d in dir {
                    bias.push(match cfg.mode {
                        OffsetMode::Rotated { range: Some(_) } => inverse_sigmoid(0.5 + 0.4 * reach * d),
                        _ => cfg.init_radius * reach * d,
                    });
                }
            }
        }
    }
    bias
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Graph, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pe_zero_slots() {
        let g = Graph::new();
        let e = sine_embed(g.constant(Tensor::vector(&[0.0])), 8, 10000.0).unwrap();
        let d = e.data();
        for i in 0..8 {
            let want = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert!((d[i] - want).abs() < 1e-15, "slot {i}: {}", d[i]);
        }
    }

    #[test]
    fn anchor_features_trailing_pair() {
        let g = Graph::new();
        let cfg = PosEncodingConfig {
            d_pe: 4,
            ..Default::default()
        };
        let a = g.constant(Tensor::matrix(1, 5, vec![0.3, 0.4, 0.2, 0.1, 0.0]).unwrap());
        let f = anchor_features(a, &cfg).unwrap().data();
        assert_eq!(f.len(), 18);
        assert_eq!(&f[16..], &[0.0, 1.0]);
    }

    #[test]
    fn modulate_zero_and_saturated() {
        let g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 5, vec![0.5, 0.5, 0.2, 0.1, 0.0]).unwrap());
        let zero = g.constant(Tensor::new(&[1, 1, 2], vec![0.0, 0.0]).unwrap());
        assert_eq!(modulate_offsets(zero, a, Some(1.0)).unwrap().data(), vec![0.0, 0.0]);
        let big = g.constant(Tensor::new(&[1, 1, 2], vec![20.0, 20.0]).unwrap());
        let d = modulate_offsets(big, a, Some(1.0)).unwrap().data();
        assert!((d[0] - 0.1).abs() < 1e-8 && (d[1] - 0.05).abs() < 1e-8, "{d:?}");
    }

    #[test]
    fn rotated_bias_stays_inside_anchor() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DeformConfig::new(8, 2, 1, 3, OffsetMode::rotated(1.0));
        let attn = DeformAttention::new(&mut store, "a", cfg, &mut rng).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let anchor = RotatedBox::new(0.5, 0.5, 0.4, 0.2, 0.7).unwrap();
        let a = g.constant(Tensor::matrix(1, 5, anchor.to_array().to_vec()).unwrap());
        let z = g.constant(Tensor::zeros(&[1, 8]));
        let value = g.constant(Tensor::zeros(&[4, 8]));
        let lv = [LevelShape {
            height: 2,
            width: 2,
            start: 0,
        }];
        let out = attn.forward(&p, z, a, value, &lv).unwrap();
        let dump = out.dump(&[anchor], 2, 1, 3);
        for pt in dump[0].points.iter().flatten().flatten() {
            assert!(anchor.contains(pt[0], pt[1], 1e-12));
        }
        let w = out.weights.data();
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
    }
}
