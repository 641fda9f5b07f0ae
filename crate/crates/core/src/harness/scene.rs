//! Procedural scenes of filled rotated rectangles on a noisy background.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{canonicalize, rotated_iou, RotatedBox};
use crate::model::Targets;
use crate::numcore::Tensor;

/// Sub-samples per pixel side used for coverage shading.
const SUPERSAMPLE: usize = 8;
const PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Independently placed boxes of mixed aspect ratio and angle.
    Sparse,
    /// Rows of thin parallel bars sharing one orientation.
    Dense,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Preset::Sparse),
            "dense" => Ok(Preset::Dense),
            _ => Err(Error::Config(format!("unknown scene preset {s:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Sparse => "sparse",
            Preset::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub image_size: usize,
    pub num_classes: usize,
    pub preset: Preset,
    /// Targets per image.
    pub density: usize,
    /// Long side range in normalized units.
    pub long_side: (f64, f64),
    /// Short/long ratio range.
    pub aspect: (f64, f64),
    pub overlap_cap: f64,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            image_size: 64,
            num_classes: 2,
            preset: Preset::Dense,
            density: 5,
            long_side: (0.3, 0.5),
            aspect: (0.25, 0.4),
            overlap_cap: 0.05,
            noise: 0.25,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.image_size > 0
            && self.num_classes > 0
            && self.num_classes <= CLASS_COLORS.len()
            && self.long_side.0 > 0.0
            && self.long_side.0 <= self.long_side.1
            && self.long_side.1 < 1.0
            && self.aspect.0 > 0.0
            && self.aspect.0 <= self.aspect.1
            && self.aspect.1 <= 1.0
            && (0.0..=1.0).contains(&self.overlap_cap)
            && (0.0..1.0).contains(&self.noise);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene parameters {self:?}")))
        }
    }
}

/// Fill color per class.
pub const CLASS_COLORS: [[f64; 3]; 3] = [[0.95, 0.6, 0.25], [0.35, 0.85, 0.95], [0.85, 0.4, 0.9]];

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub class: usize,
}

impl Scene {
    /// Binary PPM of the image.
    pub fn to_ppm(&self) -> Vec<u8> {
        let shape = self.image.shape();
        let (h, w) = (shape[1], shape[2]);
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        for px in 0..h * w {
            for ch in 0..3 {
                let v = self.image.data()[ch * h * w + px];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.targets
            .boxes
            .iter()
            .zip(&self.targets.classes)
            .map(|(b, &class)| Annotation {
                cx: b.cx,
                cy: b.cy,
                w: b.w,
                h: b.h,
                theta: b.theta,
                class,
            })
            .collect()
    }
}

pub fn targets_from_annotations(ann: &[Annotation]) -> Result<Targets> {
    let mut t = Targets::default();
    for a in ann {
        t.boxes.push(RotatedBox::new(a.cx, a.cy, a.w, a.h, a.theta)?);
        t.classes.push(a.class);
    }
    Ok(t)
}

/// Seed of the `index`-th scene of a set.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

fn inside_image(b: &RotatedBox) -> bool {
    b.corners()
        .0
        .iter()
        .all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]))
}

fn fits(b: &RotatedBox, placed: &[RotatedBox], cap: f64) -> bool {
    inside_image(b) && placed.iter().all(|o| rotated_iou(b, o) < cap)
}

fn sparse_boxes(rng: &mut ChaCha8Rng, p: &SceneParams) -> Vec<RotatedBox> {
    let mut placed = Vec::new();
    for _ in 0..p.density {
        let mut done = false;
        for _ in 0..PLACEMENT_TRIES {
            let long = rng.gen_range(p.long_side.0..=p.long_side.1);
            let short = long * rng.gen_range(p.aspect.0..=p.aspect.1);
            let theta = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
            let b = RotatedBox::from_array([rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), long, short, theta]);
            if fits(&b, &placed, p.overlap_cap) {
                placed.push(b);
                done = true;
                break;
            }
        }
        if !done {
            break;
        }
    }
    placed
}

/// Parallel bars stacked across their short side, all at one angle.
fn dense_boxes(rng: &mut ChaCha8Rng, p: &SceneParams) -> Vec<RotatedBox> {
    let mut best: Vec<RotatedBox> = Vec::new();
    for _ in 0..PLACEMENT_TRIES {
        let theta = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
        let long = rng.gen_range(p.long_side.0..=p.long_side.1);
        let short = long * rng.gen_range(p.aspect.0..=p.aspect.1);
        let gap = short * rng.gen_range(0.15..0.5);
        // Local axes of the shared orientation.
        let along = [theta.cos(), -theta.sin()];
        let across = [theta.sin(), theta.cos()];
        let origin = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
        let mut placed = Vec::new();
        let half = p.density as isize / 2;
        for k in -half..=half + 1 {
            if placed.len() == p.density {
                break;
            }
            let slide = long * rng.gen_range(-0.15..0.15);
            let off = k as f64 * (short + gap);
            let cx = origin[0] + off * across[0] + slide * along[0];
            let cy = origin[1] + off * across[1] + slide * along[1];
            let b = RotatedBox::from_array([cx, cy, long, short, theta]);
            if fits(&b, &placed, p.overlap_cap) {
                placed.push(b);
            }
        }
        if placed.len() > best.len() {
            best = placed;
        }
        if best.len() == p.density {
            break;
        }
    }
    best
}

/// Fraction of pixel `(i, j)` covered by `b`, by regular supersampling.
fn coverage(b: &RotatedBox, i: usize, j: usize, size: usize) -> f64 {
    let n = SUPERSAMPLE;
    let mut hits = 0;
    for si in 0..n {
        for sj in 0..n {
            let x = (j as f64 + (sj as f64 + 0.5) / n as f64) / size as f64;
            let y = (i as f64 + (si as f64 + 0.5) / n as f64) / size as f64;
            if b.contains(x, y, 0.0) {
                hits += 1;
            }
        }
    }
    hits as f64 / (n * n) as f64
}

/// Per-pixel coverage of `b` over a `size x size` grid.
pub fn coverage_mask(b: &RotatedBox, size: usize) -> Vec<f64> {
    let mut mask = vec![0.0; size * size];
    let corners = b.corners().0;
    let lo = |k: usize| corners.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
    let hi = |k: usize| corners.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
    let range = |a: f64, z: f64| {
        let s = ((a * size as f64).floor().max(0.0)) as usize;
        let e = ((z * size as f64).ceil() as usize).min(size);
        s..e
    };
    for i in range(lo(1), hi(1)) {
        for j in range(lo(0), hi(0)) {
            mask[i * size + j] = coverage(b, i, j, size);
        }
    }
    mask
}

pub fn gen_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = match params.preset {
        Preset::Sparse => sparse_boxes(&mut rng, params),
        Preset::Dense => dense_boxes(&mut rng, params),
    };
    if boxes.len() < params.density {
        warn!(
            "scene {seed}: placed {} of {} targets under overlap cap {}",
            boxes.len(),
            params.density,
            params.overlap_cap
        );
    }
    let size = params.image_size;
    let mut image: Vec<f64> = (0..3 * size * size).map(|_| rng.gen_range(0.0..params.noise)).collect();
    let mut targets = Targets::default();
    for b in boxes {
        let class = rng.gen_range(0..params.num_classes);
        let color = CLASS_COLORS[class];
        let mask = coverage_mask(&b, size);
        for (px, &c) in mask.iter().enumerate() {
            if c > 0.0 {
                for ch in 0..3 {
                    let v = &mut image[ch * size * size + px];
                    *v = *v * (1.0 - c) + color[ch] * c;
                }
            }
        }
        targets.boxes.push(canonicalize(&b)?);
        targets.classes.push(class);
    }
    Ok(Scene {
        seed,
        image: Tensor::new(&[3, size, size], image)?,
        targets,
    })
}

/// `count` scenes derived from `base_seed`.
pub fn gen_dataset(base_seed: u64, count: usize, params: &SceneParams) -> Result<Vec<Scene>> {
    (0..count).map(|i| gen_scene(scene_seed(base_seed, i), params)).collect()
}

/// Angle of `b` folded into `[0, pi)` for reporting.
pub fn orientation(b: &RotatedBox) -> f64 {
    b.theta.rem_euclid(PI)
}
