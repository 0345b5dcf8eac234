//! Synthetic scenes whose objects have a discriminative part and a
//! non-discriminative part.
//!
//! Every object is a compact high-contrast disc ("head") joined to a long
//! low-contrast bar ("body"). Both parts carry the same class texture, a
//! sinusoidal grating whose orientation identifies the class, so the body is
//! class evidence a classifier can get by without.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::tensor::{Grid, Tensor};

pub const PART_NONE: u8 = 0;
pub const PART_HEAD: u8 = 1;
pub const PART_BODY: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub image_size: usize,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub head_radius: f64,
    pub body_length: f64,
    pub body_width: f64,
    pub head_contrast: f64,
    pub body_contrast: f64,
    pub stripe_period: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Amplitude of the smooth background undulation.
    pub background_variation: f64,
    /// Low-contrast grating patches of random orientation placed in the
    /// background.
    pub distractors: usize,
    pub distractor_radius: f64,
    pub distractor_contrast: f64,
    /// Minimum background gap between objects, in pixels.
    pub spacing: usize,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 3,
            image_size: 64,
            channels: 1,
            min_objects: 1,
            max_objects: 2,
            head_radius: 6.0,
            body_length: 28.0,
            body_width: 10.0,
            head_contrast: 0.35,
            body_contrast: 0.05,
            stripe_period: 4.0,
            noise: 0.01,
            background_variation: 0.03,
            distractors: 0,
            distractor_radius: 4.0,
            distractor_contrast: 0.12,
            spacing: 2,
            max_attempts: 200,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// One object per image, for localization experiments.
    pub fn single_object(mut self) -> Self {
        self.min_objects = 1;
        self.max_objects = 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("synth", msg));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.image_size < 32 || self.image_size % 4 != 0 {
            return bad(format!("image size must be a multiple of 4 and at least 32, got {}", self.image_size));
        }
        if self.min_objects == 0 {
            return bad("every image needs at least one object".into());
        }
        if self.min_objects > self.max_objects || self.max_objects > self.classes {
            return bad(format!(
                "objects per image {}..={} must be ordered and at most the class count {}",
                self.min_objects, self.max_objects, self.classes
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if !(self.head_radius > 0.0 && self.body_width > 0.0 && self.body_length >= 0.0 && self.stripe_period > 0.0) {
            return bad("object geometry must be positive".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }

    /// Grating orientation of `class`, in radians.
    pub fn class_angle(&self, class: usize) -> f64 {
        class as f64 * std::f64::consts::PI / self.classes as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[1, channels, size, size]`, values quantized to multiples of 1/255.
    pub image: Tensor,
    /// 0 for background, `class + 1` on object pixels.
    pub mask: Grid<u8>,
    /// [`PART_HEAD`] or [`PART_BODY`] on object pixels.
    pub parts: Grid<u8>,
    /// Sorted class ids present.
    pub labels: Vec<usize>,
    pub objects: Vec<SceneObject>,
    /// Exact foreground.
    pub saliency: Grid<bool>,
    pub seed: u64,
}

/// Seed of item `index` in a split generated from `base`.
pub fn item_seed(base: u64, index: usize) -> u64 {
    base ^ index as u64
}

struct Shape {
    class: usize,
    hy: f64,
    hx: f64,
    dy: f64,
    dx: f64,
    phase: f64,
}

impl Shape {
    fn part(&self, y: f64, x: f64, cfg: &SynthConfig) -> u8 {
        let (ry, rx) = (y - self.hy, x - self.hx);
        if ry * ry + rx * rx <= cfg.head_radius * cfg.head_radius {
            return PART_HEAD;
        }
        let along = ry * self.dy + rx * self.dx;
        let across = (rx * self.dy - ry * self.dx).abs();
        if along >= 0.0 && along <= cfg.body_length && across <= cfg.body_width / 2.0 {
            PART_BODY
        } else {
            PART_NONE
        }
    }
}

fn grating(y: f64, x: f64, angle: f64, period: f64, phase: f64) -> f64 {
    let u = x * angle.cos() + y * angle.sin();
    (std::f64::consts::TAU * u / period + phase).sin()
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn generate_scene(cfg: &SynthConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut classes: Vec<usize> = (0..cfg.classes).collect();
    for i in 0..count {
        let j = rng.random_range(i..cfg.classes);
        classes.swap(i, j);
    }
    classes.truncate(count);

    let mut owner = Grid::filled(n, n, u8::MAX);
    let mut parts = Grid::filled(n, n, PART_NONE);
    let mut shapes = Vec::with_capacity(count);
    let reach = cfg.head_radius.max(cfg.body_length + cfg.body_width);
    for (slot, &class) in classes.iter().enumerate() {
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let margin = cfg.head_radius + 1.0;
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let shape = Shape {
                class,
                hy: rng.random_range(margin..n as f64 - margin),
                hx: rng.random_range(margin..n as f64 - margin),
                dy: theta.sin(),
                dx: theta.cos(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            };
            let mut cells = Vec::new();
            let mut ok = true;
            let y0 = (shape.hy - reach).floor().max(-1.0) as i64;
            let y1 = (shape.hy + reach).ceil() as i64;
            let x0 = (shape.hx - reach).floor().max(-1.0) as i64;
            let x1 = (shape.hx + reach).ceil() as i64;
            'scan: for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = shape.part(y as f64 + 0.5, x as f64 + 0.5, cfg);
                    if p == PART_NONE {
                        continue;
                    }
                    if y < 1 || x < 1 || y >= n as i64 - 1 || x >= n as i64 - 1 {
                        ok = false;
                        break 'scan;
                    }
                    let (yu, xu) = (y as usize, x as usize);
                    let s = cfg.spacing as i64;
                    for yy in (y - s).max(0)..=(y + s).min(n as i64 - 1) {
                        for xx in (x - s).max(0)..=(x + s).min(n as i64 - 1) {
                            if *owner.at(yy as usize, xx as usize) != u8::MAX {
                                ok = false;
                                break 'scan;
                            }
                        }
                    }
                    cells.push((yu, xu, p));
                }
            }
            if ok && !cells.is_empty() {
                for (y, x, p) in cells {
                    *owner.at_mut(y, x) = slot as u8;
                    *parts.at_mut(y, x) = p;
                }
                shapes.push(shape);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                seed,
                attempts: cfg.max_attempts,
            });
        }
    }

    let distractors: Vec<(f64, f64, f64, f64)> = (0..cfg.distractors)
        .map(|_| {
            (
                rng.random_range(0.0..n as f64),
                rng.random_range(0.0..n as f64),
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(2.0 * n as f64 / 3.0..2.0 * n as f64),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::invalid("synth", e.to_string()))?;

    let mut base = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = 0.5;
            for &(a, period, phase) in &waves {
                v += cfg.background_variation / 3.0 * grating(fy, fx, a, period, phase);
            }
            let o = *owner.at(y, x);
            if o == u8::MAX {
                for &(dy, dx, a, phase) in &distractors {
                    let (ry, rx) = (fy - dy, fx - dx);
                    if ry * ry + rx * rx <= cfg.distractor_radius * cfg.distractor_radius {
                        v += cfg.distractor_contrast * grating(fy, fx, a, cfg.stripe_period, phase);
                    }
                }
            } else {
                let s = &shapes[o as usize];
                let contrast = if *parts.at(y, x) == PART_HEAD {
                    cfg.head_contrast
                } else {
                    cfg.body_contrast
                };
                v += contrast * grating(fy, fx, cfg.class_angle(s.class), cfg.stripe_period, s.phase);
            }
            base[y * n + x] = v;
        }
    }
    let c = cfg.channels;
    let mut data = Vec::with_capacity(c * n * n);
    for _ in 0..c {
        for &v in &base {
            data.push(quantize(v + noise.sample(&mut rng)));
        }
    }
    let image = Tensor::new(vec![1, c, n, n], data)?;

    let mask = owner.map(|&o| if o == u8::MAX { 0 } else { shapes[o as usize].class as u8 + 1 });
    let saliency = mask.map(|&m| m != 0);
    let mut objects: Vec<SceneObject> = shapes
        .iter()
        .map(|s| SceneObject {
            class: s.class,
            bbox: tight_box(&mask, s.class as u8 + 1).expect("placed objects cover pixels"),
        })
        .collect();
    objects.sort_by_key(|o| o.class);
    let labels = objects.iter().map(|o| o.class).collect();
    Ok(SyntheticScene {
        image,
        mask,
        parts,
        labels,
        objects,
        saliency,
        seed,
    })
}

/// Tight box around the pixels equal to `label`.
pub fn tight_box(mask: &Grid<u8>, label: u8) -> Option<BBox> {
    let (h, w) = mask.dims();
    let mut b: Option<BBox> = None;
    for y in 0..h {
        for x in 0..w {
            if *mask.at(y, x) != label {
                continue;
            }
            b = Some(match b {
                None => BBox {
                    x_min: x,
                    y_min: y,
                    x_max: x,
                    y_max: y,
                },
                Some(b) => BBox {
                    x_min: b.x_min.min(x),
                    y_min: b.y_min.min(y),
                    x_max: b.x_max.max(x),
                    y_max: b.y_max.max(y),
                },
            });
        }
    }
    b
}

/// `count` scenes with seeds `item_seed(cfg.seed, i)`, in index order.
pub fn generate(cfg: &SynthConfig, count: usize) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(cfg, item_seed(cfg.seed, i)))
        .collect()
}

/// Structural checks on a generated scene; returns the first violation.
pub fn validate_scene(scene: &SyntheticScene, classes: usize) -> std::result::Result<(), String> {
    if scene.labels.is_empty() {
        return Err("empty label set".into());
    }
    if scene.labels.windows(2).any(|w| w[0] >= w[1]) || scene.labels.iter().any(|&c| c >= classes) {
        return Err(format!("bad label set {:?}", scene.labels));
    }
    for &m in &scene.mask.data {
        if m != 0 && !scene.labels.contains(&(m as usize - 1)) {
            return Err(format!("mask id {m} not in labels {:?}", scene.labels));
        }
    }
    for (i, (&m, &s)) in scene.mask.data.iter().zip(&scene.saliency.data).enumerate() {
        if (m != 0) != s {
            return Err(format!("saliency disagrees with mask at pixel {i}"));
        }
        if (m != 0) != (scene.parts.data[i] != PART_NONE) {
            return Err(format!("part map disagrees with mask at pixel {i}"));
        }
    }
    if scene.objects.len() != scene.labels.len() {
        return Err("one object per label expected".into());
    }
    for o in &scene.objects {
        if tight_box(&scene.mask, o.class as u8 + 1) != Some(o.bbox) {
            return Err(format!("box of class {} is not tight", o.class));
        }
    }
    if scene.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v) || (v * 255.0).round() != v * 255.0) {
        return Err("image values must be multiples of 1/255 in [0, 1]".into());
    }
    Ok(())
}
