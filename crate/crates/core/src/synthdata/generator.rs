//! Procedural "creature" images built from part glyphs.
//!
//! Each part category has two shape variants and four hues, i.e. eight
//! attribute values. A class fixes one attribute per part; the creature's
//! pose, scale, orientation and background vary per image.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};
use crate::synthdata::render::{Canvas, Point, Shape};
use crate::synthdata::{AnnotatedImage, PartAnnotation, Split};

pub const SHAPE_VARIANTS: usize = 2;
pub const HUES: usize = 4;
/// Attribute values per part.
pub const ATTRIBUTES: usize = SHAPE_VARIANTS * HUES;

/// Part categories in drawing-independent id order.
pub const PART_NAMES: [&str; 5] = ["head", "body", "wing", "tail", "feet"];

const PALETTE: [[f64; 3]; HUES] = [[0.92, 0.22, 0.18], [0.20, 0.78, 0.26], [0.20, 0.36, 0.95], [0.96, 0.86, 0.16]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub parts: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub occlusion_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            parts: 5,
            train_per_class: 100,
            test_per_class: 30,
            image_size: 64,
            seed: 0,
            occlusion_prob: 0.1,
        }
    }
}

impl GeneratorConfig {
    /// Largest class count the attribute space can realize for `parts`.
    pub fn max_classes(parts: usize) -> u64 {
        (ATTRIBUTES as u64).saturating_pow(parts as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.parts < 2 || self.parts > PART_NAMES.len() {
            return Err(Error::InvalidConfig(format!(
                "part count must be in 2..={}, got {}",
                PART_NAMES.len(),
                self.parts
            )));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidConfig(format!("image size must be at least 32, got {}", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::InvalidConfig(format!("occlusion probability {} outside [0, 1]", self.occlusion_prob)));
        }
        let max = Self::max_classes(self.parts);
        if self.classes as u64 > max {
            return Err(Error::AttributeSpace { requested: self.classes, max_feasible: max });
        }
        Ok(())
    }
}

/// Classes that the pairing design covers.
const PAIRED_CLASSES: usize = 8;

/// Partner of class `r` (< 8) on part `i`, and the index of that pair.
///
/// Part `i` uses round `i` of the round-robin schedule on eight classes:
/// class 7 meets class `i`, and `i ± t (mod 7)` meet for `t = 1..=3`.
fn pairing(r: usize, i: usize) -> usize {
    if r == 7 || r == i % 7 {
        return 0;
    }
    let t = (r + 7 - i % 7) % 7;
    t.min(7 - t)
}

fn paired_code(r: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| {
            let p = pairing(r, i);
            p * SHAPE_VARIANTS + (p + i) % SHAPE_VARIANTS
        })
        .collect()
}

/// Attribute of every part for one class: hue `attr / 2`, shape variant `attr % 2`.
///
/// The first eight classes come in pairs per part: on part `i` the classes
/// paired by round `i` of a round-robin schedule share the attribute, and the
/// four pairs get four different hues. The rounds are disjoint, so two
/// classes share at most one part. Classes from eight on take the remaining
/// attribute tuples in lexicographic order.
pub fn class_code(class: usize, parts: usize) -> Vec<usize> {
    if class < PAIRED_CLASSES {
        return paired_code(class, parts);
    }
    let rank = |code: &[usize]| code.iter().fold(0usize, |acc, &a| acc * ATTRIBUTES + a);
    let mut taken: Vec<usize> = (0..PAIRED_CLASSES).map(|r| rank(&paired_code(r, parts))).collect();
    taken.sort_unstable();
    let mut idx = class - PAIRED_CLASSES;
    for t in taken {
        if t <= idx {
            idx += 1;
        }
    }
    let mut code = vec![0; parts];
    for slot in code.iter_mut().rev() {
        *slot = idx % ATTRIBUTES;
        idx /= ATTRIBUTES;
    }
    code
}

/// Pose shared by all parts of one creature.
struct Pose {
    origin: Point,
    scale: f64,
    angle: f64,
    mirror: bool,
}

impl Pose {
    fn place(&self, local: Point) -> Point {
        let x = if self.mirror { -local.x } else { local.x };
        let (s, c) = self.angle.sin_cos();
        let (lx, ly) = (x * self.scale, local.y * self.scale);
        Point::new(self.origin.x + c * lx - s * ly, self.origin.y + s * lx + c * ly)
    }

    fn angle(&self, a: f64) -> f64 {
        if self.mirror {
            std::f64::consts::PI - a + self.angle
        } else {
            a + self.angle
        }
    }
}

/// Glyph of part `id` with shape `variant`, laid out in a 64-pixel frame.
fn part_glyph(id: usize, variant: usize, pose: &Pose) -> Shape {
    let s = pose.scale;
    match (id, variant) {
        (0, 0) => Shape::Ellipse { center: pose.place(Point::new(15.0, -7.0)), rx: 5.5 * s, ry: 5.5 * s, angle: 0.0 },
        (0, _) => {
            Shape::Rect { center: pose.place(Point::new(15.0, -7.0)), hw: 4.8 * s, hh: 4.8 * s, angle: pose.angle(0.0) }
        }
        (1, 0) => Shape::Ellipse {
            center: pose.place(Point::new(0.0, 0.0)),
            rx: 10.5 * s,
            ry: 6.5 * s,
            angle: pose.angle(0.0),
        },
        (1, _) => {
            Shape::Rect { center: pose.place(Point::new(0.0, 0.0)), hw: 9.5 * s, hh: 5.5 * s, angle: pose.angle(0.0) }
        }
        (2, v) => {
            // Up- or down-pointing triangle above the body; centroid at (-3, -12).
            let (tip, base) = if v == 0 { (-6.0, 3.0) } else { (6.0, -3.0) };
            let cy = -12.0;
            Shape::Triangle([
                pose.place(Point::new(-3.0, cy + tip)),
                pose.place(Point::new(-9.0, cy + base)),
                pose.place(Point::new(3.0, cy + base)),
            ])
        }
        (3, v) => Shape::Rect {
            center: pose.place(Point::new(-16.0, -2.0)),
            hw: 6.0 * s,
            hh: 1.8 * s,
            angle: pose.angle(if v == 0 { 0.0 } else { -0.9 }),
        },
        (_, v) => {
            let feet = [Point::new(-3.5, 11.0), Point::new(3.5, 11.0)];
            Shape::Group(
                feet.iter()
                    .map(|&f| {
                        if v == 0 {
                            Shape::Ellipse { center: pose.place(f), rx: 2.4 * s, ry: 2.4 * s, angle: 0.0 }
                        } else {
                            Shape::Rect { center: pose.place(f), hw: 1.2 * s, hh: 3.2 * s, angle: pose.angle(0.0) }
                        }
                    })
                    .collect(),
            )
        }
    }
}

// Draw order: wing and head sit over the body.
const DRAW_ORDER: [usize; 5] = [3, 4, 1, 2, 0];

fn background(canvas: &mut Canvas, rng: &mut Rng) {
    let base: [f64; 3] = [rng.gen_range(0.25..0.5), rng.gen_range(0.25..0.5), rng.gen_range(0.25..0.5)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.05..0.35),
                rng.gen_range(0.05..0.35),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.03..0.08),
            )
        })
        .collect();
    for r in 0..canvas.height {
        for c in 0..canvas.width {
            let texture: f64 =
                waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * c as f64 + fy * r as f64 + ph).sin()).sum();
            let mut px = [0.0; 3];
            for (ch, v) in px.iter_mut().enumerate() {
                *v = base[ch] + texture + rng.gen_range(-0.05..0.05);
            }
            canvas.set(r, c, px);
        }
    }
}

/// One rendered creature with its annotations.
#[allow(dead_code)]
pub(crate) struct Rendered {
    pub pixels: Vec<u8>,
    pub parts: Vec<PartAnnotation>,
    /// Unoccluded glyphs, for self-checks.
    pub glyphs: Vec<Option<Shape>>,
}

pub(crate) fn render_creature(config: &GeneratorConfig, class: usize, seed: u64) -> Rendered {
    let mut rng = rng::stream(seed, streams::GENERATOR);
    let size = config.image_size;
    let unit = size as f64 / 64.0;
    let mut canvas = Canvas::new(size, size);
    background(&mut canvas, &mut rng);

    let pose = Pose {
        origin: Point::new((32.0 + rng.gen_range(-4.0..4.0)) * unit, (33.0 + rng.gen_range(-4.0..4.0)) * unit),
        scale: rng.gen_range(0.9..1.1) * unit,
        angle: rng.gen_range(-0.25..0.25),
        mirror: rng.gen_bool(0.5),
    };
    let code = class_code(class, config.parts);
    let mut glyphs: Vec<Option<Shape>> = Vec::with_capacity(config.parts);
    let mut colors = Vec::with_capacity(config.parts);
    for (id, &attr) in code.iter().enumerate() {
        let occluded = rng.gen_bool(config.occlusion_prob);
        let shade = rng.gen_range(-0.06..0.06);
        let color = PALETTE[attr / SHAPE_VARIANTS].map(|v| (v + shade).clamp(0.0, 1.0));
        colors.push(color);
        glyphs.push((!occluded).then(|| part_glyph(id, attr % SHAPE_VARIANTS, &pose)));
    }
    for id in DRAW_ORDER.iter().copied().filter(|&id| id < config.parts) {
        if let Some(g) = &glyphs[id] {
            canvas.fill(g, colors[id]);
        }
    }
    let parts = glyphs
        .iter()
        .enumerate()
        .map(|(id, g)| {
            let location = g
                .as_ref()
                .map(Shape::center)
                .filter(|p| p.x >= 0.0 && p.y >= 0.0 && p.x < size as f64 && p.y < size as f64);
            PartAnnotation { id, location }
        })
        .collect();
    Rendered { pixels: canvas.to_u8(), parts, glyphs }
}

/// Per-image seed; images are addressed by (split, index within split).
pub(crate) fn image_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64 << 40,
    };
    rng::split(seed, tag + index as u64)
}

pub(crate) fn generate_images(config: &GeneratorConfig) -> Result<Vec<(AnnotatedImage, Vec<u8>)>> {
    config.validate()?;
    let mut out = Vec::new();
    for (split, per_class) in [(Split::Train, config.train_per_class), (Split::Test, config.test_per_class)] {
        for index in 0..per_class * config.classes {
            let label = index % config.classes;
            let r = render_creature(config, label, image_seed(config.seed, split, index));
            let image = AnnotatedImage::from_u8(&r.pixels, config.image_size, label, r.parts, split)?;
            out.push((image, r.pixels));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_codes_are_distinct() {
        for parts in 2..=5 {
            let n = 200.min(GeneratorConfig::max_classes(parts) as usize);
            let codes: Vec<_> = (0..n).map(|k| class_code(k, parts)).collect();
            for i in 0..n {
                for j in 0..i {
                    assert_ne!(codes[i], codes[j], "classes {i} and {j} with {parts} parts");
                }
            }
        }
    }

    #[test]
    fn paired_classes_share_at_most_one_part() {
        let codes: Vec<_> = (0..8).map(|k| class_code(k, 5)).collect();
        for i in 0..8 {
            for j in 0..i {
                let shared = codes[i].iter().zip(&codes[j]).filter(|(a, b)| a == b).count();
                assert!(shared <= 1, "classes {i} and {j} share {shared} parts");
            }
        }
        for part in 0..5 {
            for (k, code) in codes.iter().enumerate() {
                let partners = (0..8).filter(|&l| l != k && codes[l][part] == code[part]).count();
                assert_eq!(partners, 1, "class {k}, part {part}");
            }
        }
    }

    #[test]
    fn too_many_classes_reports_maximum() {
        let cfg = GeneratorConfig { classes: 65, parts: 2, ..Default::default() };
        match cfg.validate() {
            Err(Error::AttributeSpace { max_feasible, .. }) => assert_eq!(max_feasible, 64),
            other => panic!("expected attribute-space error, got {other:?}"),
        }
    }

    #[test]
    fn annotations_track_rendered_glyphs() {
        let cfg = GeneratorConfig { occlusion_prob: 0.0, ..Default::default() };
        for i in 0..40 {
            let r = render_creature(&cfg, i % 8, image_seed(3, Split::Train, i));
            for (part, glyph) in r.parts.iter().zip(&r.glyphs) {
                let glyph = glyph.as_ref().unwrap();
                let ann = part.location.expect("visible part inside the image");
                let c = glyph.raster_centroid(64, 64).unwrap();
                let d = ((c.x - ann.x).powi(2) + (c.y - ann.y).powi(2)).sqrt();
                assert!(d <= 2.0, "part {} off by {d:.2} px", part.id);
            }
        }
    }
}
