//! Shape catalog and scene rasterization.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, ClassVocabulary, Instance};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Scenes keep every pair of ground-truth boxes below this IoU.
pub const MAX_PAIRWISE_IOU: f64 = 0.3;
pub const MIN_CANVAS: usize = 32;
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Star,
    Pentagon,
    Crescent,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 9] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Star,
        ShapeKind::Pentagon,
        ShapeKind::Crescent,
        ShapeKind::Diamond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Star => "star",
            ShapeKind::Pentagon => "pentagon",
            ShapeKind::Crescent => "crescent",
            ShapeKind::Diamond => "diamond",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Centre of the class colour family, in degrees.
    fn hue(self) -> f64 {
        let pos = Self::ALL.iter().position(|&k| k == self).unwrap_or(0);
        pos as f64 * 40.0
    }

    /// Membership test in normalized coordinates `u, v ∈ [-1, 1]` (v grows downward).
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Circle => r2 <= 1.0,
            ShapeKind::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= 0.5 * (v + 1.0),
            ShapeKind::Ring => (0.25..=1.0).contains(&r2),
            ShapeKind::Cross => {
                u.abs() <= 1.0 && v.abs() <= 1.0 && (u.abs() <= 0.34 || v.abs() <= 0.34)
            }
            ShapeKind::Star => in_polygon(&star_vertices(), u, v),
            ShapeKind::Pentagon => in_polygon(&regular_polygon(5), u, v),
            ShapeKind::Crescent => {
                let (du, dv) = (u - 0.5, v + 0.15);
                r2 <= 1.0 && du * du + dv * dv > 0.64
            }
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

fn regular_polygon(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let a = -PI / 2.0 + 2.0 * PI * i as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .collect()
}

fn star_vertices() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let a = -PI / 2.0 + PI * i as f64 / 5.0;
            let r = if i % 2 == 0 { 1.0 } else { 0.45 };
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn in_polygon(vertices: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = vertices.len() - 1;
    for i in 0..vertices.len() {
        let (xi, yi) = vertices[i];
        let (xj, yj) = vertices[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Background treatment of generated scenes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneStyle {
    /// Flat dark background.
    #[default]
    Standard,
    /// Warmer, brighter background with per-pixel noise; used as a shifted test domain.
    Shifted,
}

impl SceneStyle {
    pub fn background(self) -> [f64; 3] {
        match self {
            SceneStyle::Standard => [0.1, 0.1, 0.1],
            SceneStyle::Shifted => [0.32, 0.28, 0.22],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub min_size: f64,
    pub max_size: f64,
    pub style: SceneStyle,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_size: 16.0,
            max_size: 30.0,
            style: SceneStyle::Standard,
        }
    }
}

/// Renders one deterministic scene.
#[derive(Clone, Debug)]
pub struct SceneGenerator<'a> {
    vocab: &'a ClassVocabulary,
    canvas: (usize, usize),
    params: SceneParams,
}

impl<'a> SceneGenerator<'a> {
    pub fn new(vocab: &'a ClassVocabulary, canvas: (usize, usize), params: SceneParams) -> Result<Self> {
        let (h, w) = canvas;
        if h < MIN_CANVAS || w < MIN_CANVAS {
            return Err(Error::Placement(format!(
                "canvas {h}x{w} is below the {MIN_CANVAS}x{MIN_CANVAS} minimum"
            )));
        }
        if !(params.min_size > 0.0 && params.min_size <= params.max_size) {
            return Err(Error::Config(format!(
                "shape size range [{}, {}] is empty",
                params.min_size, params.max_size
            )));
        }
        if params.min_size > h.min(w) as f64 {
            return Err(Error::Placement(format!(
                "minimum shape size {} does not fit canvas {h}x{w}",
                params.min_size
            )));
        }
        Ok(Self {
            vocab,
            canvas,
            params,
        })
    }

    /// `first_class` pins the class of the first placed instance.
    pub fn generate(
        &self,
        seed: u64,
        allowed: &[usize],
        max_instances: usize,
        first_class: Option<usize>,
    ) -> Result<AnnotatedImage> {
        if allowed.is_empty() {
            return Err(Error::Argument("allowed class set is empty".into()));
        }
        if max_instances == 0 {
            return Err(Error::Argument("max_instances must be at least 1".into()));
        }
        let shapes = allowed
            .iter()
            .chain(first_class.as_ref())
            .map(|&c| {
                let name = self
                    .vocab
                    .name_of(c)
                    .ok_or_else(|| Error::Argument(format!("class index {c} is not a foreground class")))?;
                ShapeKind::from_name(name)
                    .map(|k| (c, k))
                    .ok_or_else(|| Error::Config(format!("no shape is registered for class `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let lookup = |c: usize| shapes.iter().find(|(idx, _)| *idx == c).map(|(_, k)| *k).unwrap();

        let (h, w) = self.canvas;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bg = self.params.style.background();
        let mut pixels = Array3::<f64>::zeros((h, w, 3));
        for ((_, _, c), px) in pixels.indexed_iter_mut() {
            *px = bg[c];
        }
        if self.params.style == SceneStyle::Shifted {
            for px in pixels.iter_mut() {
                *px = (*px + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
            }
        }

        let target = rng.random_range(1..=max_instances);
        let mut instances: Vec<Instance> = Vec::with_capacity(target);
        for slot in 0..target {
            let class_index = match (slot, first_class) {
                (0, Some(c)) => c,
                _ => allowed[rng.random_range(0..allowed.len())],
            };
            let kind = lookup(class_index);
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let sw = rng.random_range(self.params.min_size..=self.params.max_size);
                let aspect = rng.random_range(0.85..1.18);
                let sh = (sw * aspect).clamp(self.params.min_size, self.params.max_size);
                let cx = rng.random_range(0.5 * sw..=w as f64 - 0.5 * sw);
                let cy = rng.random_range(0.5 * sh..=h as f64 - 0.5 * sh);
                let color = hsv_to_rgb(
                    kind.hue() + rng.random_range(-6.0..6.0),
                    rng.random_range(0.65..0.95),
                    rng.random_range(0.7..1.0),
                );
                let mask = rasterize(kind, cx, cy, sw, sh, (h, w));
                let Some(tight) = mask_bounds(&mask) else { continue };
                if instances.iter().any(|o| o.bbox.iou(&tight) >= MAX_PAIRWISE_IOU) {
                    continue;
                }
                for &(y, x) in &mask {
                    for (c, v) in color.iter().enumerate() {
                        pixels[[y, x, c]] = *v;
                    }
                }
                instances.push(Instance {
                    class_index,
                    bbox: tight,
                });
                placed = true;
                break;
            }
            if !placed && instances.is_empty() {
                return Err(Error::Placement(format!(
                    "no position for a {} of size >= {} on a {h}x{w} canvas",
                    kind.name(),
                    self.params.min_size
                )));
            }
        }
        Ok(AnnotatedImage {
            pixels,
            instances,
            image_id: seed,
            seed,
        })
    }
}

fn rasterize(kind: ShapeKind, cx: f64, cy: f64, sw: f64, sh: f64, (h, w): (usize, usize)) -> Vec<(usize, usize)> {
    let x0 = (cx - 0.5 * sw).floor().max(0.0) as usize;
    let x1 = ((cx + 0.5 * sw).ceil() as usize).min(w);
    let y0 = (cy - 0.5 * sh).floor().max(0.0) as usize;
    let y1 = ((cy + 0.5 * sh).ceil() as usize).min(h);
    let mut out = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - cx) / (0.5 * sw);
            let v = (y as f64 + 0.5 - cy) / (0.5 * sh);
            if kind.contains(u, v) {
                out.push((y, x));
            }
        }
    }
    out
}

fn mask_bounds(mask: &[(usize, usize)]) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &(y, x) in mask {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (!mask.is_empty()).then(|| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

/// Scene with default shape sizes and the standard style.
pub fn generate_scene(
    seed: u64,
    vocab: &ClassVocabulary,
    canvas: (usize, usize),
    allowed: &[usize],
    max_instances: usize,
) -> Result<AnnotatedImage> {
    SceneGenerator::new(vocab, canvas, SceneParams::default())?.generate(seed, allowed, max_instances, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> ClassVocabulary {
        ClassVocabulary::new(
            ["circle", "square", "triangle", "ring", "cross", "star"],
            ["pentagon", "crescent", "diamond"],
        )
        .unwrap()
    }

    #[test]
    fn every_shape_is_nonempty_at_min_size() {
        for kind in ShapeKind::ALL {
            let m = rasterize(kind, 20.0, 20.0, 16.0, 16.0, (64, 64));
            assert!(m.len() > 40, "{kind:?} has {} pixels", m.len());
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let v = vocab();
        let base: Vec<usize> = v.base_indices().collect();
        let a = generate_scene(7, &v, (64, 64), &base, 3).unwrap();
        let b = generate_scene(7, &v, (64, 64), &base, 3).unwrap();
        let c = generate_scene(8, &v, (64, 64), &base, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn boxes_cover_foreground_pixels() {
        let v = vocab();
        let all: Vec<usize> = v.foreground_indices().collect();
        let bg = SceneStyle::Standard.background();
        for seed in 0..50 {
            let img = generate_scene(seed, &v, (64, 64), &all, 4).unwrap();
            assert!((1..=4).contains(&img.instances.len()));
            for inst in &img.instances {
                let b = inst.bbox;
                assert!(b.is_valid() && b.within(64.0, 64.0));
                let mut found = false;
                for y in b.y1 as usize..b.y2 as usize {
                    for x in b.x1 as usize..b.x2 as usize {
                        if (0..3).any(|c| img.pixels[[y, x, c]] != bg[c]) {
                            found = true;
                        }
                    }
                }
                assert!(found, "seed {seed}: box {b:?} has no foreground pixel");
            }
            for (i, a) in img.instances.iter().enumerate() {
                for b in &img.instances[i + 1..] {
                    assert!(a.bbox.iou(&b.bbox) < MAX_PAIRWISE_IOU);
                }
            }
        }
    }

    #[test]
    fn allowed_classes_respected() {
        let v = vocab();
        let novel: Vec<usize> = v.novel_indices().collect();
        for seed in 0..20 {
            let img = generate_scene(seed, &v, (64, 64), &novel, 3).unwrap();
            assert!(img.instances.iter().all(|i| v.is_novel(i.class_index)));
        }
    }

    #[test]
    fn tiny_canvas_is_a_placement_error() {
        let v = vocab();
        let err = generate_scene(0, &v, (16, 16), &[0], 1).unwrap_err();
        assert!(matches!(err, Error::Placement(_)), "{err}");
        let params = SceneParams {
            min_size: 40.0,
            max_size: 40.0,
            ..Default::default()
        };
        let err = SceneGenerator::new(&v, (32, 32), params).unwrap_err();
        assert!(err.to_string().contains("minimum shape size"));
    }
}
