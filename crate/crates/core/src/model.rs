//! The assembled detector.
//!
//! Image -> strided convolution stem (three levels) -> deformable encoder,
//! whose last layers may be alignment layers predicting per-pixel rotated
//! anchors -> query initialization -> decoder layers that refine one rotated
//! anchor per query.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    conditional_query_mod, sine_values, AnchorEncoder, DeformAttention, DeformConfig, OffsetMode, PosEncodingConfig,
    SelfAttention,
};
use crate::error::{Error, Result};
use crate::geometry::{canonicalize, AngleRange, RotatedBox};
use crate::losses::{total_loss, FocalParams, LossConfig, LossWeights, PointNorm, RegressionLoss};
use crate::matching::{build_cost, hungarian, o2m_assign, MatchMode, MatchResult};
use crate::numcore::{
    inverse_sigmoid, sigmoid, Bound, ConvSpec, Graph, LayerNorm, LevelShape, Linear, Mlp, ParamId, ParamStore,
    Tensor, Var,
};

/// Downsample ratio of each pyramid level.
pub const LEVEL_RATIOS: [usize; 3] = [8, 16, 32];

/// Initial classification bias, a prior probability of 0.01.
const CLS_PRIOR_BIAS: f64 = -4.59511985013459;

/// Largest prior extent, keeping priors away from the saturated end of the
/// sigmoid parameterization.
const MAX_PRIOR_EXTENT: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMode {
    OneStage,
    TwoStage,
}

impl FromStr for StageMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_stage" | "one-stage" => Ok(StageMode::OneStage),
            "two_stage" | "two-stage" => Ok(StageMode::TwoStage),
            _ => Err(Error::Config(format!("unknown stage mode {s:?}"))),
        }
    }
}

impl fmt::Display for StageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageMode::OneStage => "one_stage",
            StageMode::TwoStage => "two_stage",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub stage: StageMode,
    pub n_enc: usize,
    pub m_align: usize,
    pub n_dec: usize,
    pub d_model: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_dim: usize,
    pub n_queries: usize,
    /// Offset range relative to the anchor extents; `None` disables the
    /// range restriction.
    pub alpha: Option<f64>,
    pub dab: bool,
    pub rs: bool,
    pub fa: bool,
    pub ps: bool,
    pub d_pe: usize,
    pub prior_scale: f64,
    /// First-stage assigner; `None` picks O2M for one-stage and O2O for
    /// two-stage.
    pub label_assign: Option<MatchMode>,
    pub o2m_k: usize,
    pub weights: LossWeights,
    pub angle_range: AngleRange,
    /// Initial spread of unrestricted sampling offsets in image units.
    pub init_radius: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            num_classes: 2,
            stage: StageMode::OneStage,
            n_enc: 2,
            m_align: 1,
            n_dec: 2,
            d_model: 64,
            heads: 4,
            points: 4,
            ffn_dim: 128,
            n_queries: 30,
            alpha: Some(1.0),
            dab: true,
            rs: true,
            fa: true,
            ps: true,
            d_pe: 128,
            prior_scale: 4.0,
            label_assign: None,
            o2m_k: crate::matching::DEFAULT_O2M_TOPK,
            weights: LossWeights::default(),
            angle_range: AngleRange::default(),
            init_radius: 0.1,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

pub fn parse_alpha(v: &str) -> Result<Option<f64>> {
    match v {
        "inf" | "off" | "none" => Ok(None),
        _ => {
            let a: f64 = parse_num("alpha", v)?;
            if a.is_infinite() {
                Ok(None)
            } else {
                Ok(Some(a))
            }
        }
    }
}

pub fn format_alpha(a: Option<f64>) -> String {
    match a {
        Some(a) => format!("{a}"),
        None => "inf".into(),
    }
}

pub fn parse_assign(v: &str) -> Result<Option<MatchMode>> {
    match v {
        "auto" => Ok(None),
        "o2o" | "O2O" => Ok(Some(MatchMode::O2O)),
        "o2m" | "O2M" => Ok(Some(MatchMode::O2M)),
        _ => Err(Error::Config(format!("label_assign: unknown value {v:?}"))),
    }
}

impl ModelConfig {
    /// Apply one `key = value` setting. Returns `false` for keys the model
    /// does not own.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse_num(key, v)?,
            "num_classes" => self.num_classes = parse_num(key, v)?,
            "stage_mode" => self.stage = v.parse()?,
            "n_enc" => self.n_enc = parse_num(key, v)?,
            "m_align" => self.m_align = parse_num(key, v)?,
            "n_dec" => self.n_dec = parse_num(key, v)?,
            "d_model" => self.d_model = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "points" => self.points = parse_num(key, v)?,
            "ffn_dim" => self.ffn_dim = parse_num(key, v)?,
            "n_queries" => self.n_queries = parse_num(key, v)?,
            "alpha" => self.alpha = parse_alpha(v)?,
            "dab" => self.dab = parse_bool(key, v)?,
            "rs" => self.rs = parse_bool(key, v)?,
            "fa" => self.fa = parse_bool(key, v)?,
            "ps" => self.ps = parse_bool(key, v)?,
            "d_pe" => self.d_pe = parse_num(key, v)?,
            "prior_scale" => self.prior_scale = parse_num(key, v)?,
            "label_assign" => self.label_assign = parse_assign(v)?,
            "o2m_k" => self.o2m_k = parse_num(key, v)?,
            "w_cls" => self.weights.cls = parse_num(key, v)?,
            "w_reg" => self.weights.reg = parse_num(key, v)?,
            "w_iou" => self.weights.iou = parse_num(key, v)?,
            "angle_range" => self.angle_range = AngleRange::new(parse_num(key, v)?)?,
            "init_radius" => self.init_radius = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// All settings in `key = value` form, readable by [`ModelConfig::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("stage_mode", self.stage.to_string()),
            ("n_enc", self.n_enc.to_string()),
            ("m_align", self.m_align.to_string()),
            ("n_dec", self.n_dec.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("points", self.points.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("n_queries", self.n_queries.to_string()),
            ("alpha", format_alpha(self.alpha)),
            ("dab", self.dab.to_string()),
            ("rs", self.rs.to_string()),
            ("fa", self.fa.to_string()),
            ("ps", self.ps.to_string()),
            ("d_pe", self.d_pe.to_string()),
            ("prior_scale", self.prior_scale.to_string()),
            (
                "label_assign",
                match self.label_assign {
                    None => "auto".into(),
                    Some(MatchMode::O2O) => "o2o".into(),
                    Some(MatchMode::O2M) => "o2m".into(),
                },
            ),
            ("o2m_k", self.o2m_k.to_string()),
            ("w_cls", self.weights.cls.to_string()),
            ("w_reg", self.weights.reg.to_string()),
            ("w_iou", self.weights.iou.to_string()),
            ("angle_range", self.angle_range.get().to_string()),
            ("init_radius", self.init_radius.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let largest = *LEVEL_RATIOS.last().expect("levels");
        if self.image_size == 0 || self.image_size % largest != 0 {
            return bad(format!("image_size {} must be a positive multiple of {largest}", self.image_size));
        }
        if self.num_classes == 0 || self.n_dec == 0 || self.n_queries == 0 || self.points == 0 {
            return bad("num_classes, n_dec, n_queries and points must be positive".into());
        }
        if self.m_align > self.n_enc {
            return bad(format!("m_align {} exceeds n_enc {}", self.m_align, self.n_enc));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model {} must be even and divisible by heads {}", self.d_model, self.heads));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return bad(format!("alpha must be positive, got {a}"));
            }
        }
        if self.o2m_k == 0 || !(self.prior_scale > 0.0) {
            return bad("o2m_k and prior_scale must be positive".into());
        }
        if self.angle_range.get() > std::f64::consts::PI {
            return bad("angle ranges above pi are not supported".into());
        }
        self.weights.validate()
    }

    pub fn align_layers(&self) -> usize {
        if self.fa {
            self.m_align
        } else {
            0
        }
    }

    pub fn first_stage_assign(&self) -> MatchMode {
        self.label_assign.unwrap_or(match self.stage {
            StageMode::OneStage => MatchMode::O2M,
            StageMode::TwoStage => MatchMode::O2O,
        })
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: self.weights,
            focal: FocalParams::default(),
            regression: if self.ps {
                RegressionLoss::PointSet(PointNorm::L1)
            } else {
                RegressionLoss::L1
            },
            angle_range: self.angle_range,
        }
    }

    /// Sampling mode of the cross-attention and alignment layers.
    pub fn attention_mode(&self) -> OffsetMode {
        if self.rs {
            OffsetMode::Rotated { range: self.alpha }
        } else {
            OffsetMode::Plain
        }
    }

    fn deform(&self, mode: OffsetMode, zero_output: bool) -> DeformConfig {
        DeformConfig {
            init_radius: self.init_radius,
            zero_output,
            ..DeformConfig::new(self.d_model, self.heads, LEVEL_RATIOS.len(), self.points, mode)
        }
    }

    /// Spatial extents of each level.
    pub fn level_shapes(&self) -> Vec<LevelShape> {
        let mut start = 0;
        LEVEL_RATIOS
            .iter()
            .map(|r| {
                let side = self.image_size / r;
                let l = LevelShape {
                    height: side,
                    width: side,
                    start,
                };
                start += side * side;
                l
            })
            .collect()
    }

    pub fn pixels(&self) -> usize {
        self.level_shapes().iter().map(|l| l.height * l.width).sum()
    }
}

// ---------------------------------------------------------------------------
// Box parameterization

fn field_scale(range: AngleRange) -> (Vec<f64>, Vec<f64>) {
    let a = range.get();
    (vec![1.0, 1.0, 1.0, 1.0, 1.0 / a], vec![0.0, 0.0, 0.0, 0.0, 0.5])
}

/// Boxes `[N, 5]` with the angle mapped to `(theta + A/2) / A`.
pub fn normalize_boxes<'g>(boxes: Var<'g>, range: AngleRange) -> Result<Var<'g>> {
    let g = boxes.graph();
    let (s, o) = field_scale(range);
    boxes
        .try_mul(&g.constant(Tensor::vector(&s)))?
        .try_add(&g.constant(Tensor::vector(&o)))
}

pub fn denormalize_boxes<'g>(t: Var<'g>, range: AngleRange) -> Result<Var<'g>> {
    let g = t.graph();
    let a = range.get();
    t.try_mul(&g.constant(Tensor::vector(&[1.0, 1.0, 1.0, 1.0, a])))?
        .try_add(&g.constant(Tensor::vector(&[0.0, 0.0, 0.0, 0.0, -a / 2.0])))
}

/// `sigmoid(x)` field-wise, with the angle de-normalized.
pub fn predict_box_head<'g>(x: Var<'g>, range: AngleRange) -> Result<Var<'g>> {
    denormalize_boxes(x.sigmoid(), range)
}

/// Each field becomes `sigmoid(delta + logit(prev))` in normalized form.
pub fn refine_anchor<'g>(prev: Var<'g>, deltas: Var<'g>, range: AngleRange) -> Result<Var<'g>> {
    let logits = normalize_boxes(prev, range)?.inverse_sigmoid();
    predict_box_head(deltas.try_add(&logits)?, range)
}

/// Plain-value [`refine_anchor`] for one box, canonicalized.
pub fn refine_box(prev: &RotatedBox, deltas: [f64; 5], range: AngleRange) -> Result<RotatedBox> {
    let mut f = prev.to_array();
    f[4] = range.normalize(f[4]);
    let mut out = [0.0; 5];
    for i in 0..5 {
        out[i] = sigmoid(deltas[i] + inverse_sigmoid(f[i]));
    }
    out[4] = range.denormalize(out[4]);
    canonicalize(&RotatedBox::from_array(out))
}

/// Turn a predicted row into a valid canonical box, flooring the extents.
pub fn box_from_row(row: &[f64]) -> RotatedBox {
    let b = RotatedBox::from_array([row[0], row[1], row[2].max(1e-9), row[3].max(1e-9), row[4]]);
    canonicalize(&b).unwrap_or(b)
}

pub fn boxes_from_tensor(t: &Tensor) -> Vec<RotatedBox> {
    t.data().chunks(5).map(box_from_row).collect()
}

// ---------------------------------------------------------------------------
// Building blocks

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let k = 3;
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let data = (0..cout * cin * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
        Conv {
            w: store.add(format!("{name}.w"), Tensor::new(&[cout, cin, k, k], data).expect("shape")),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            spec: ConvSpec { stride: 2, padding: 1 },
        }
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.graph().conv2d(x, p.var(self.w), p.var(self.b), self.spec)
    }
}

/// Strided 3x3 convolutions producing levels at ratios 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct Stem {
    convs: Vec<Conv>,
    norms: Vec<LayerNorm>,
}

impl Stem {
    pub fn new(store: &mut ParamStore, d_model: usize, rng: &mut impl Rng) -> Self {
        let widths = [3, 16, 32, d_model, d_model, d_model];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv::new(store, &format!("stem.conv{i}"), w[0], w[1], rng))
            .collect();
        let norms = (0..LEVEL_RATIOS.len())
            .map(|l| LayerNorm::new(store, &format!("stem.norm{l}"), d_model))
            .collect();
        Stem { convs, norms }
    }

    /// Level features `[C, h, w]` for an image `[3, H, W]`.
    pub fn levels<'g>(&self, p: &Bound<'g>, image: Var<'g>) -> Result<Vec<Var<'g>>> {
        let s = image.shape();
        let largest = *LEVEL_RATIOS.last().expect("levels");
        if s.len() != 3 || s[0] != 3 || s[1] % largest != 0 || s[2] % largest != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::input(format!(
                "stem needs a [3, H, W] image with H, W multiples of {largest}, got {s:?}"
            )));
        }
        let mut x = image;
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(p, x)?;
            if i >= 2 {
                out.push(x);
            }
            x = x.relu();
        }
        Ok(out)
    }

    /// Flattened, layer-normed features `[S, C]` in level order.
    pub fn forward<'g>(&self, p: &Bound<'g>, image: Var<'g>) -> Result<Var<'g>> {
        let levels = self.levels(p, image)?;
        let mut flat = Vec::with_capacity(levels.len());
        for (feat, norm) in levels.iter().zip(&self.norms) {
            let s = feat.shape();
            let rows = feat.reshape(&[s[0], s[1] * s[2]])?.transpose()?;
            flat.push(norm.forward(p, rows)?);
        }
        image.graph().concat(&flat, 0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    hidden: Linear,
    out: Linear,
    norm: LayerNorm,
}

impl Ffn {
    fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, zero_out: bool, rng: &mut impl Rng) -> Self {
        Ffn {
            hidden: Linear::new(store, &format!("{name}.hidden"), d, hidden, rng),
            out: if zero_out {
                Linear::zeros(store, &format!("{name}.out"), hidden, d)
            } else {
                Linear::new(store, &format!("{name}.out"), hidden, d, rng)
            },
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
        }
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.out.forward(p, self.hidden.forward(p, x)?.relu())?;
        self.norm.forward(p, x + h)
    }
}

/// Deformable self-attention over the pyramid plus FFN.
#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: DeformAttention,
    norm: LayerNorm,
    ffn: Ffn,
}

impl EncoderLayer {
    fn forward<'g>(
        &self,
        p: &Bound<'g>,
        src: Var<'g>,
        pos: Var<'g>,
        refs: Var<'g>,
        levels: &[LevelShape],
    ) -> Result<Var<'g>> {
        let a = self.attn.forward(p, src + pos, refs, src, levels)?;
        let x = self.norm.forward(p, src + a.out)?;
        self.ffn.forward(p, x)
    }
}

/// Encoder layer with objectness and anchor-regression branches whose
/// decoded anchors steer the attention.
#[derive(Debug, Clone)]
struct AlignmentLayer {
    cls: Linear,
    reg: Mlp,
    layer: EncoderLayer,
}

/// Dense per-pixel predictions of a first-stage head.
pub struct FirstStage<'g> {
    /// Objectness logits `[S, 1]`.
    pub logits: Var<'g>,
    /// Decoded rotated anchors `[S, 5]`.
    pub anchors: Var<'g>,
}

/// Flattened multi-level features plus their geometry.
pub struct Pyramid<'g> {
    pub features: Var<'g>,
    pub pos: Var<'g>,
    pub levels: Vec<LevelShape>,
    /// Pixel centers in normalized image coordinates, level by level.
    pub centers: Vec<(f64, f64)>,
    /// Horizontal prior anchors `[S, 5]`.
    pub priors: Tensor,
}

pub struct AlignmentOutput<'g> {
    pub pyramid: Pyramid<'g>,
    pub heads: Vec<FirstStage<'g>>,
}

#[derive(Debug, Clone)]
enum QueryInit {
    OneStage {
        content: ParamId,
        /// Anchors in normalized logit form `[n_q, 5]`.
        anchors: ParamId,
        /// Static positional queries, used without dynamic anchors.
        pos: Option<ParamId>,
    },
    TwoStage {
        cls: Linear,
        reg: Mlp,
        proj: Linear,
        norm: LayerNorm,
    },
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: SelfAttention,
    cross: DeformAttention,
    cross_norm: LayerNorm,
    ffn: Ffn,
    cls: Linear,
    reg: Mlp,
}

/// One decoder layer's queries and predictions.
pub struct LayerOutput<'g> {
    /// Reference anchors entering the layer `[n_q, 5]`.
    pub anchors: Var<'g>,
    /// Refined boxes `[n_q, 5]`.
    pub boxes: Var<'g>,
    pub logits: Var<'g>,
    /// Cross-attention sampling locations `[n_q, H, L, K, 2]`.
    pub locations: Var<'g>,
}

pub struct ForwardOutput<'g> {
    pub layers: Vec<LayerOutput<'g>>,
    /// Alignment-layer heads followed by the proposal head in two-stage mode.
    pub first_stage: Vec<FirstStage<'g>>,
    pub centers: Vec<(f64, f64)>,
}

impl<'g> ForwardOutput<'g> {
    pub fn last(&self) -> &LayerOutput<'g> {
        self.layers.last().expect("at least one decoder layer")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub rbox: RotatedBox,
    pub class: usize,
    pub score: f64,
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Targets {
    pub boxes: Vec<RotatedBox>,
    pub classes: Vec<usize>,
}

/// Loss of one image, with per-part values.
pub struct LossReport<'g> {
    pub total: Var<'g>,
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
    pub first_stage: f64,
    /// Number of matched decoder losses, one per layer.
    pub aux_count: usize,
    /// Matching of the final decoder layer.
    pub matching: MatchResult,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    stem: Stem,
    level_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    align: Vec<AlignmentLayer>,
    queries: QueryInit,
    anchor_encoder: Option<AnchorEncoder>,
    query_scale: Option<Mlp>,
    decoder: Vec<DecoderLayer>,
}

fn zero_last(store: &mut ParamStore, mlp: &Mlp) {
    let last = mlp.last();
    store.get_mut(last.w).data_mut().fill(0.0);
    store.get_mut(last.b).data_mut().fill(0.0);
}

fn box_mlp(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Mlp {
    let mlp = Mlp::new(store, name, &[d, d, 5], rng);
    zero_last(store, &mlp);
    mlp
}

fn class_head(store: &mut ParamStore, name: &str, d: usize, classes: usize, rng: &mut impl Rng) -> Linear {
    let l = Linear::new(store, name, d, classes, rng);
    store.get_mut(l.b).data_mut().fill(CLS_PRIOR_BIAS);
    l
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let stem = Stem::new(&mut store, d, &mut rng);
        let level_embed = {
            let data = (0..LEVEL_RATIOS.len() * d).map(|_| rng.gen_range(-0.1..0.1)).collect();
            store.add("level_embed", Tensor::new(&[LEVEL_RATIOS.len(), d], data)?)
        };
        let n_align = cfg.align_layers();
        let mut encoder = Vec::new();
        for i in 0..cfg.n_enc - n_align {
            let name = format!("enc{i}");
            encoder.push(EncoderLayer {
                attn: DeformAttention::new(&mut store, &format!("{name}.attn"), cfg.deform(OffsetMode::Plain, false), &mut rng)?,
                norm: LayerNorm::new(&mut store, &format!("{name}.norm"), d),
                ffn: Ffn::new(&mut store, &format!("{name}.ffn"), d, cfg.ffn_dim, false, &mut rng),
            });
        }
        let mut align = Vec::new();
        for i in 0..n_align {
            let name = format!("align{i}");
            let cls = class_head(&mut store, &format!("{name}.cls"), d, 1, &mut rng);
            let reg = box_mlp(&mut store, &format!("{name}.reg"), d, &mut rng);
            let layer = EncoderLayer {
                attn: DeformAttention::new(&mut store, &format!("{name}.attn"), cfg.deform(cfg.attention_mode(), true), &mut rng)?,
                norm: LayerNorm::new(&mut store, &format!("{name}.norm"), d),
                ffn: Ffn::new(&mut store, &format!("{name}.ffn"), d, cfg.ffn_dim, true, &mut rng),
            };
            align.push(AlignmentLayer { cls, reg, layer });
        }
        let queries = match cfg.stage {
            StageMode::OneStage => {
                let nq = cfg.n_queries;
                let content = {
                    let data = (0..nq * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    store.add("query.content", Tensor::new(&[nq, d], data)?)
                };
                let anchors = {
                    let mut data = Vec::with_capacity(nq * 5);
                    for _ in 0..nq {
                        data.push(inverse_sigmoid(rng.gen_range(0.05..0.95)));
                        data.push(inverse_sigmoid(rng.gen_range(0.05..0.95)));
                        data.push(inverse_sigmoid(0.2));
                        data.push(inverse_sigmoid(0.2));
                        data.push(0.0);
                    }
                    store.add("query.anchors", Tensor::new(&[nq, 5], data)?)
                };
                let pos = (!cfg.dab).then(|| {
                    let data = (0..nq * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    store.add("query.pos", Tensor::new(&[nq, d], data).expect("shape"))
                });
                QueryInit::OneStage { content, anchors, pos }
            }
            StageMode::TwoStage => QueryInit::TwoStage {
                cls: class_head(&mut store, "proposal.cls", d, 1, &mut rng),
                reg: box_mlp(&mut store, "proposal.reg", d, &mut rng),
                proj: Linear::new(&mut store, "proposal.proj", d, d, &mut rng),
                norm: LayerNorm::new(&mut store, "proposal.norm", d),
            },
        };
        let anchor_encoder = if cfg.dab || cfg.stage == StageMode::TwoStage {
            let pe = PosEncodingConfig {
                d_pe: cfg.d_pe,
                d_model: d,
                ..Default::default()
            };
            Some(AnchorEncoder::new(&mut store, "anchor_pe", pe, &mut rng)?)
        } else {
            None
        };
        let query_scale = cfg.dab.then(|| Mlp::new(&mut store, "query_scale", &[d, d, d], &mut rng));
        let mut decoder = Vec::new();
        for i in 0..cfg.n_dec {
            let name = format!("dec{i}");
            decoder.push(DecoderLayer {
                self_attn: SelfAttention::new(&mut store, &format!("{name}.self"), d, cfg.heads, &mut rng)?,
                cross: DeformAttention::new(&mut store, &format!("{name}.cross"), cfg.deform(cfg.attention_mode(), false), &mut rng)?,
                cross_norm: LayerNorm::new(&mut store, &format!("{name}.cross_norm"), d),
                ffn: Ffn::new(&mut store, &format!("{name}.ffn"), d, cfg.ffn_dim, false, &mut rng),
                cls: class_head(&mut store, &format!("{name}.cls"), d, cfg.num_classes, &mut rng),
                reg: box_mlp(&mut store, &format!("{name}.reg"), d, &mut rng),
            });
        }
        Ok(Model {
            cfg,
            params: store,
            stem,
            level_embed,
            encoder,
            align,
            queries,
            anchor_encoder,
            query_scale,
            decoder,
        })
    }

    /// Pixel centers, horizontal priors and fixed positional embeddings.
    fn grid(&self) -> (Vec<(f64, f64)>, Tensor, Tensor, Vec<usize>) {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let mut centers = Vec::new();
        let mut priors = Vec::new();
        let mut pos = Vec::new();
        let mut level_of = Vec::new();
        for (l, (shape, ratio)) in cfg.level_shapes().iter().zip(LEVEL_RATIOS).enumerate() {
            let extent = (cfg.prior_scale * ratio as f64 / cfg.image_size as f64).min(MAX_PRIOR_EXTENT);
            for i in 0..shape.height {
                for j in 0..shape.width {
                    let x = (j as f64 + 0.5) / shape.width as f64;
                    let y = (i as f64 + 0.5) / shape.height as f64;
                    centers.push((x, y));
                    priors.extend([x, y, extent, extent, 0.0]);
                    pos.extend(sine_values(x, d / 2, 10000.0));
                    pos.extend(sine_values(y, d / 2, 10000.0));
                    level_of.push(l);
                }
            }
        }
        let s = centers.len();
        (
            centers,
            Tensor::new(&[s, 5], priors).expect("shape"),
            Tensor::new(&[s, d], pos).expect("shape"),
            level_of,
        )
    }

    pub fn pyramid<'g>(&self, p: &Bound<'g>, image: Var<'g>) -> Result<Pyramid<'g>> {
        let g = image.graph();
        let features = self.stem.forward(p, image)?;
        let (centers, priors, pos, level_of) = self.grid();
        let pos = g.constant(pos).try_add(&p.var(self.level_embed).index_select(&level_of)?)?;
        Ok(Pyramid {
            features,
            pos,
            levels: self.cfg.level_shapes(),
            centers,
            priors,
        })
    }

    pub fn encoder<'g>(&self, p: &Bound<'g>, mut pyramid: Pyramid<'g>) -> Result<AlignmentOutput<'g>> {
        let g = pyramid.features.graph();
        let priors = g.constant(pyramid.priors.clone());
        let range = self.cfg.angle_range;
        let mut src = pyramid.features;
        for layer in &self.encoder {
            src = layer.forward(p, src, pyramid.pos, priors, &pyramid.levels)?;
        }
        let mut heads = Vec::new();
        for a in &self.align {
            let logits = a.cls.forward(p, src)?;
            let anchors = refine_anchor(priors, a.reg.forward(p, src)?, range)?;
            src = a.layer.forward(p, src, pyramid.pos, anchors.detach(), &pyramid.levels)?;
            heads.push(FirstStage { logits, anchors });
        }
        pyramid.features = src;
        Ok(AlignmentOutput { pyramid, heads })
    }

    /// Initial contents, anchors and, without dynamic anchors, the static
    /// positional queries. Two-stage mode also returns its proposal head.
    #[allow(clippy::type_complexity)]
    fn init_queries<'g>(
        &self,
        p: &Bound<'g>,
        enc: &AlignmentOutput<'g>,
    ) -> Result<(Var<'g>, Var<'g>, Option<Var<'g>>, Option<FirstStage<'g>>)> {
        let range = self.cfg.angle_range;
        match &self.queries {
            QueryInit::OneStage { content, anchors, pos } => {
                let a = predict_box_head(p.var(*anchors), range)?;
                Ok((p.var(*content), a, pos.map(|id| p.var(id)), None))
            }
            QueryInit::TwoStage { cls, reg, proj, norm } => {
                let memory = enc.pyramid.features;
                let g = memory.graph();
                let logits = cls.forward(p, memory)?;
                let priors = g.constant(enc.pyramid.priors.clone());
                let anchors = refine_anchor(priors, reg.forward(p, memory)?, range)?;
                let picked = top_k(&logits.data(), self.cfg.n_queries);
                let content = norm.forward(p, proj.forward(p, memory.index_select(&picked)?.detach())?)?;
                let init = anchors.index_select(&picked)?.detach();
                let encoder = self.anchor_encoder.as_ref().expect("two-stage anchor encoder");
                let pos = (!self.cfg.dab).then(|| encoder.forward(p, init)).transpose()?;
                Ok((content, init, pos, Some(FirstStage { logits, anchors })))
            }
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, image: Var<'g>) -> Result<ForwardOutput<'g>> {
        let pyramid = self.pyramid(p, image)?;
        let enc = self.encoder(p, pyramid)?;
        let (mut content, mut anchors, static_pos, proposal) = self.init_queries(p, &enc)?;
        let memory = enc.pyramid.features;
        let mut layers = Vec::with_capacity(self.decoder.len());
        for index in 0..self.decoder.len() {
            let (next, out) = self.decoder_layer(p, index, content, anchors, static_pos, memory, &enc.pyramid.levels)?;
            content = next;
            anchors = out.boxes.detach();
            layers.push(out);
        }
        let mut first_stage = enc.heads;
        first_stage.extend(proposal);
        Ok(ForwardOutput {
            layers,
            first_stage,
            centers: enc.pyramid.centers,
        })
    }

    /// Decoder layer `index`: self-attention, cross-attention into `memory`
    /// around `anchors`, FFN and heads. Returns the updated contents.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_layer<'g>(
        &self,
        p: &Bound<'g>,
        index: usize,
        content: Var<'g>,
        anchors: Var<'g>,
        static_pos: Option<Var<'g>>,
        memory: Var<'g>,
        levels: &[LevelShape],
    ) -> Result<(Var<'g>, LayerOutput<'g>)> {
        let layer = self
            .decoder
            .get(index)
            .ok_or_else(|| Error::input(format!("decoder layer {index} of {}", self.decoder.len())))?;
        let pos = match (static_pos, &self.anchor_encoder) {
            (Some(sp), _) => sp,
            (None, Some(e)) => e.forward(p, anchors)?,
            (None, None) => return Err(Error::input("dynamic anchors need an anchor encoder")),
        };
        let content = layer.self_attn.forward(p, content, pos)?;
        let query = match &self.query_scale {
            Some(mlp) => conditional_query_mod(p, mlp, content, pos)?,
            None => content + pos,
        };
        let cross = layer.cross.forward(p, query, anchors.detach(), memory, levels)?;
        let content = layer.cross_norm.forward(p, content + cross.out)?;
        let content = layer.ffn.forward(p, content)?;
        let logits = layer.cls.forward(p, content)?;
        let boxes = refine_anchor(anchors, layer.reg.forward(p, content)?, self.cfg.angle_range)?;
        Ok((
            content,
            LayerOutput {
                anchors,
                boxes,
                logits,
                locations: cross.locations,
            },
        ))
    }

    /// Matched losses at every decoder layer plus the first-stage losses.
    pub fn loss<'g>(&self, out: &ForwardOutput<'g>, targets: &Targets) -> Result<LossReport<'g>> {
        let lc = self.cfg.loss_config();
        let mut total: Option<Var<'g>> = None;
        let mut add = |v: Var<'g>| total = Some(total.map_or(v, |t| t + v));
        let (mut cls, mut reg, mut iou) = (0.0, 0.0, 0.0);
        let mut matching = MatchResult::empty(MatchMode::O2O);
        for layer in &out.layers {
            let m = match_layer(&layer.logits, &layer.boxes, targets, &lc)?;
            let t = total_loss(layer.logits, layer.boxes, &targets.classes, &targets.boxes, &m, &lc)?;
            cls += t.cls;
            reg += t.reg;
            iou += t.iou;
            add(t.total);
            matching = m;
        }
        let mut first = 0.0;
        let objectness = vec![0; targets.boxes.len()];
        let objectness_targets = Targets {
            boxes: targets.boxes.clone(),
            classes: objectness,
        };
        for head in &out.first_stage {
            let m = match self.cfg.first_stage_assign() {
                MatchMode::O2O => match_layer(&head.logits, &head.anchors, &objectness_targets, &lc)?,
                MatchMode::O2M => o2m_assign(&out.centers, &targets.boxes, self.cfg.o2m_k)?,
            };
            let t = total_loss(head.logits, head.anchors, &objectness_targets.classes, &targets.boxes, &m, &lc)?;
            first += t.total.item();
            add(t.total);
        }
        Ok(LossReport {
            total: total.expect("at least one decoder layer"),
            cls,
            reg,
            iou,
            first_stage: first,
            aux_count: out.layers.len(),
            matching,
        })
    }

    /// Highest-scoring class per query of the final layer.
    pub fn detections(&self, out: &ForwardOutput<'_>) -> Vec<Detection> {
        let last = out.last();
        let logits = last.logits.value();
        let c = self.cfg.num_classes;
        boxes_from_tensor(&last.boxes.value())
            .into_iter()
            .enumerate()
            .map(|(q, rbox)| {
                let row = &logits.data()[q * c..(q + 1) * c];
                let (class, &best) = row
                    .iter()
                    .enumerate()
                    .fold((0, &f64::NEG_INFINITY), |acc, (k, v)| if *v > *acc.1 { (k, v) } else { acc });
                Detection {
                    rbox,
                    class,
                    score: sigmoid(best),
                }
            })
            .collect()
    }

    /// Inference on one image with frozen parameters.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let out = self.forward(&p, g.constant(image.clone()))?;
        Ok(self.detections(&out))
    }
}

/// Hungarian matching of predictions to targets on current values.
pub fn match_layer(logits: &Var<'_>, boxes: &Var<'_>, targets: &Targets, lc: &LossConfig) -> Result<MatchResult> {
    if targets.boxes.is_empty() {
        return Ok(MatchResult::empty(MatchMode::O2O));
    }
    let pred = boxes_from_tensor(&boxes.value());
    let cost = build_cost(&logits.value(), &pred, &targets.classes, &targets.boxes, lc)?;
    hungarian(&cost)
}

/// Indices of the `k` largest scores, descending, ties by index. `k` is
/// clamped to the number of scores with a warning.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = if k > scores.len() {
        warn!("requested {k} proposals from {} pixels; clamping", scores.len());
        scores.len()
    } else {
        k
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
