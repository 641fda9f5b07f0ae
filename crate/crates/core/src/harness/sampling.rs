//! Where matched queries sample, as statistics and as overlay images.

use std::fmt::Write as _;

use log::warn;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::RotatedBox;
use crate::harness::scene::Scene;
use crate::model::{boxes_from_tensor, match_layer, Model};
use crate::numcore::Graph;

/// A final-layer query matched to a target, with its sampling points.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedQuery {
    pub query: usize,
    pub anchor: RotatedBox,
    pub target: RotatedBox,
    /// Every head, level and point, in that order.
    pub points: Vec<[f64; 2]>,
}

pub fn matched_queries(model: &Model, scene: &Scene) -> Result<Vec<MatchedQuery>> {
    let g = Graph::new();
    let p = model.params.bind_frozen(&g);
    let out = model.forward(&p, g.constant(scene.image.clone()))?;
    let last = out.last();
    let m = match_layer(&last.logits, &last.boxes, &scene.targets, &model.cfg.loss_config())?;
    let anchors = boxes_from_tensor(&last.anchors.value());
    let loc = last.locations.value();
    let per_query = loc.numel() / (2 * anchors.len().max(1));
    Ok(m.pairs
        .iter()
        .map(|&(q, t)| MatchedQuery {
            query: q,
            anchor: anchors[q],
            target: scene.targets.boxes[t],
            points: (0..per_query)
                .map(|k| {
                    let i = 2 * (q * per_query + k);
                    [loc.data()[i], loc.data()[i + 1]]
                })
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingStats {
    pub matched: usize,
    pub points: usize,
    /// Fraction of points inside the query's reference anchor.
    pub in_anchor: f64,
    /// Fraction of points inside the matched target box.
    pub in_target: f64,
}

/// Containment under a tolerance of 1e-12.
pub fn containment(queries: &[MatchedQuery]) -> SamplingStats {
    let (mut points, mut in_anchor, mut in_target) = (0usize, 0usize, 0usize);
    for q in queries {
        for p in &q.points {
            points += 1;
            in_anchor += q.anchor.contains(p[0], p[1], 1e-12) as usize;
            in_target += q.target.contains(p[0], p[1], 1e-12) as usize;
        }
    }
    let frac = |n: usize| if points == 0 { 0.0 } else { n as f64 / points as f64 };
    SamplingStats {
        matched: queries.len(),
        points,
        in_anchor: frac(in_anchor),
        in_target: frac(in_target),
    }
}

pub fn sampling_stats(model: &Model, scenes: &[Scene]) -> Result<SamplingStats> {
    let mut all = Vec::new();
    for s in scenes {
        all.extend(matched_queries(model, s)?);
    }
    Ok(containment(&all))
}

const PALETTE: [[u8; 3]; 8] = [
    [255, 64, 64],
    [64, 255, 64],
    [80, 140, 255],
    [255, 220, 0],
    [255, 0, 255],
    [0, 230, 230],
    [255, 140, 0],
    [255, 255, 255],
];

const TARGET_COLOR: [u8; 3] = [150, 150, 150];

struct Canvas {
    size: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: isize, y: isize, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.size && (y as usize) < self.size {
            let i = 3 * (y as usize * self.size + x as usize);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn to_px(&self, v: f64) -> isize {
        (v * self.size as f64).floor() as isize
    }

    fn line(&mut self, a: [f64; 2], b: [f64; 2], c: [u8; 3]) {
        let len = ((b[0] - a[0]).hypot(b[1] - a[1]) * self.size as f64 * 2.0).ceil() as usize + 1;
        for s in 0..=len {
            let t = s as f64 / len as f64;
            let (x, y) = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
            self.put(self.to_px(x), self.to_px(y), c);
        }
    }

    fn outline(&mut self, b: &RotatedBox, c: [u8; 3]) {
        let q = b.corners().0;
        for i in 0..4 {
            self.line(q[i], q[(i + 1) % 4], c);
        }
    }

    fn dot(&mut self, p: [f64; 2], c: [u8; 3]) {
        let (x, y) = (self.to_px(p[0]), self.to_px(p[1]));
        for dy in -1..=1 {
            for dx in -1..=1 {
                self.put(x + dx, y + dy, c);
            }
        }
    }

    fn cross(&mut self, p: [f64; 2], c: [u8; 3]) {
        let (x, y) = (self.to_px(p[0]), self.to_px(p[1]));
        for d in -3..=3 {
            self.put(x + d, y, c);
            self.put(x, y + d, c);
        }
    }
}

/// Binary PPM of the scene upscaled by `scale`, with targets in gray and each
/// matched query's anchor, center and sampling points in its own color.
pub fn render_ppm(scene: &Scene, queries: &[MatchedQuery], scale: usize) -> Vec<u8> {
    let shape = scene.image.shape();
    let (h, w) = (shape[1], shape[2]);
    let size = w * scale;
    let mut canvas = Canvas {
        size,
        rgb: vec![0; 3 * size * size],
    };
    for y in 0..h * scale {
        for x in 0..size {
            for ch in 0..3 {
                let v = scene.image.data()[ch * h * w + (y / scale) * w + x / scale];
                canvas.rgb[3 * (y * size + x) + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    for t in &scene.targets.boxes {
        canvas.outline(t, TARGET_COLOR);
    }
    for (i, q) in queries.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        canvas.outline(&q.anchor, c);
        canvas.cross([q.anchor.cx, q.anchor.cy], c);
        for p in &q.points {
            canvas.dot(*p, c);
        }
    }
    let mut out = format!("P6\n{size} {size}\n255\n").into_bytes();
    out.extend(canvas.rgb);
    out
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn polygon(svg: &mut String, b: &RotatedBox, size: f64, stroke: &str) {
    let pts: Vec<String> = b
        .corners()
        .0
        .iter()
        .map(|p| format!("{:.3},{:.3}", p[0] * size, p[1] * size))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polygon points="{}" fill="none" stroke="{stroke}" stroke-width="1"/>"#,
        pts.join(" ")
    );
}

/// Vector overlay of the same content as [`render_ppm`], without the raster.
pub fn render_svg(scene: &Scene, queries: &[MatchedQuery], size: usize) -> String {
    let s = size as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{size}" height="{size}" fill="black"/>"#);
    for t in &scene.targets.boxes {
        polygon(&mut svg, t, s, &hex(TARGET_COLOR));
    }
    for (i, q) in queries.iter().enumerate() {
        let c = hex(PALETTE[i % PALETTE.len()]);
        polygon(&mut svg, &q.anchor, s, &c);
        let (cx, cy) = (q.anchor.cx * s, q.anchor.cy * s);
        let _ = writeln!(
            svg,
            r#"<path d="M{:.3} {cy:.3}H{:.3}M{cx:.3} {:.3}V{:.3}" stroke="{c}"/>"#,
            cx - 4.0,
            cx + 4.0,
            cy - 4.0,
            cy + 4.0
        );
        for p in &q.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.3}" cy="{:.3}" r="1.5" fill="{c}"/>"#,
                p[0] * s,
                p[1] * s
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub struct SamplingPlot {
    pub ppm: Vec<u8>,
    pub svg: String,
    pub stats: SamplingStats,
}

pub fn dump_sampling(model: &Model, scene: &Scene, scale: usize) -> Result<SamplingPlot> {
    let queries = matched_queries(model, scene)?;
    if queries.is_empty() {
        warn!("scene {}: no matched queries, overlay is empty", scene.seed);
    }
    let size = scene.image.shape()[2] * scale;
    Ok(SamplingPlot {
        ppm: render_ppm(scene, &queries, scale),
        svg: render_svg(scene, &queries, size),
        stats: containment(&queries),
    })
}
