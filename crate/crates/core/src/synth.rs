//! Deterministic synthetic benchmark: composite objects with three colored
//! parts and viewpoint-dependent layouts, rendered on clean or cluttered
//! backgrounds with exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{GroundTruthSet, ImageTruth, ObjectTruth, PartTruth};
use crate::geometry::BBox;
use crate::manifest::{DatasetManifest, HardDomainEntry, MANIFEST_VERSION, SIDE_KEY};
use crate::raster::{Raster, Rgb};
use crate::store::MemoryStore;
use crate::viewpoint::Viewpoint;

pub const ARCHETYPE_COUNT: usize = 9;
pub const PARTS_PER_ARCHETYPE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Ellipse,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    HStripes,
    VStripes,
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartStyle {
    pub name: String,
    pub color: Rgb,
    pub shape: Shape,
    pub pattern: Pattern,
    /// Width and height as fractions of the body height.
    pub size: (f64, f64),
}

/// Part centers as fractions of the object box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub aspect: f64,
    pub placements: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub name: String,
    pub body_color: Rgb,
    pub parts: Vec<PartStyle>,
    pub front: Layout,
    pub back: Layout,
    /// Right-facing profile; left views are its mirror image.
    pub right: Layout,
}

const PART_COLORS: [Rgb; 9] = [
    [220, 30, 30],
    [30, 170, 40],
    [40, 60, 220],
    [235, 205, 20],
    [200, 40, 200],
    [20, 190, 200],
    [240, 120, 10],
    [120, 40, 180],
    [150, 220, 30],
];

const BODY_COLORS: [Rgb; 9] = [
    [90, 90, 100],
    [110, 80, 60],
    [70, 100, 90],
    [100, 100, 70],
    [80, 70, 110],
    [120, 100, 100],
    [60, 80, 110],
    [105, 95, 80],
    [85, 110, 75],
];

const PART_NAMES: [[&str; 3]; ARCHETYPE_COUNT] = [
    ["wheel", "head", "tail"],
    ["foot", "face", "fin"],
    ["leg", "lamp", "flag"],
    ["roller", "cap", "handle"],
    ["paw", "snout", "brush"],
    ["tire", "cabin", "spoiler"],
    ["hoof", "muzzle", "mane"],
    ["skid", "dome", "vane"],
    ["track", "turret", "hatch"],
];

impl Archetype {
    /// One of the built-in archetypes, `index < ARCHETYPE_COUNT`.
    pub fn builtin(index: usize) -> Result<Archetype> {
        if index >= ARCHETYPE_COUNT {
            return Err(Error::invalid(format!("archetype {index} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xA4C3 + index as u64);
        let shapes = [Shape::Ellipse, Shape::Rect, Shape::Diamond];
        let mut colors = [index, (index + 3) % 9, (index + 6) % 9];
        let brightness = |c: usize| PART_COLORS[c].iter().map(|&v| v as u32).sum::<u32>();
        let brightest = (0..3).max_by_key(|&k| brightness(colors[k])).unwrap_or(1);
        colors.swap(1, brightest);
        // the head is the brightest, most textured part, so right profiles
        // carry more gradient energy on their right half
        let tail_pattern = if index % 2 == 0 { Pattern::VStripes } else { Pattern::HStripes };
        let patterns = [Pattern::Solid, Pattern::Checker, tail_pattern];
        let parts = (0..PARTS_PER_ARCHETYPE)
            .map(|p| {
                let side = rng.gen_range(0.21..0.26);
                let squash = rng.gen_range(0.9..1.1);
                PartStyle {
                    name: PART_NAMES[index][p].to_string(),
                    color: PART_COLORS[colors[p]],
                    shape: shapes[(p + index) % 3],
                    pattern: patterns[p],
                    size: (side * squash * if p == 1 { 1.1 } else { 1.0 }, side),
                }
            })
            .collect();
        let jitter: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let j = |i: usize, v: f64| v + 0.03 * jitter[i];
        let k = |i: usize, v: f64| v + 0.015 * jitter[i];
        Ok(Archetype {
            name: format!("archetype{index}"),
            body_color: BODY_COLORS[index],
            parts,
            right: Layout {
                aspect: 1.6 + 0.1 * (index % 3) as f64,
                placements: vec![
                    (0, j(0, 0.2), j(1, 0.78)),
                    (0, j(2, 0.8), j(3, 0.78)),
                    (1, j(4, 0.79), j(5, 0.27)),
                    (2, j(6, 0.2), j(7, 0.3)),
                ],
            },
            front: Layout {
                aspect: 0.85,
                placements: vec![(1, 0.5, k(8, 0.19)), (2, 0.5, k(9, 0.51)), (0, 0.5, k(10, 0.83))],
            },
            back: Layout {
                aspect: 0.85,
                placements: vec![(2, 0.5, k(11, 0.19)), (1, 0.5, k(12, 0.51)), (0, j(13, 0.27), 0.83), (0, j(14, 0.73), 0.83)],
            },
        })
    }

    pub fn part_names(&self) -> Vec<String> {
        self.parts.iter().map(|p| p.name.clone()).collect()
    }

    pub fn layout(&self, v: Viewpoint) -> &Layout {
        match v {
            Viewpoint::Front => &self.front,
            Viewpoint::Back => &self.back,
            Viewpoint::Left | Viewpoint::Right => &self.right,
        }
    }
}

/// A rendered object: opaque sprite plus part boxes in sprite coordinates.
#[derive(Debug, Clone)]
pub struct Sprite {
    pub raster: Raster,
    pub mask: Vec<bool>,
    pub parts: Vec<PartTruth>,
}

fn inside_shape(shape: Shape, u: f64, v: f64) -> bool {
    // u, v in [-1, 1] relative to the shape's box
    match shape {
        Shape::Rect => true,
        Shape::Ellipse => u * u + v * v <= 1.0,
        Shape::Diamond => u.abs() + v.abs() <= 1.0,
    }
}

fn dark_shade(style: &PartStyle) -> Rgb {
    let depth = if style.pattern == Pattern::Checker { 0.3 } else { 0.6 };
    style.color.map(|c| (c as f64 * depth) as u8)
}

fn pattern_color(style: &PartStyle, x: usize, y: usize, period: usize) -> Rgb {
    let alt = match style.pattern {
        Pattern::Solid => false,
        Pattern::HStripes => (y / period) % 2 == 1,
        Pattern::VStripes => (x / period) % 2 == 1,
        Pattern::Checker => ((x / period) + (y / period)) % 2 == 1,
    };
    if alt {
        dark_shade(style)
    } else {
        style.color
    }
}

/// Draw a part into `canvas` over the integer box `[x0, x1) x [y0, y1)`.
/// The shape touches all four sides of the box.
fn draw_part(canvas: &mut Raster, mask: Option<&mut Vec<bool>>, style: &PartStyle, x0: usize, y0: usize, x1: usize, y1: usize) {
    let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let period = ((x1 - x0).min(y1 - y0) / 5).max(2);
    let mut mask = mask;
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - x0 as f64 - w / 2.0) / (w / 2.0);
            let v = (y as f64 + 0.5 - y0 as f64 - h / 2.0) / (h / 2.0);
            let u = u.signum() * (u.abs() - 1.0 / w).max(0.0);
            let v = v.signum() * (v.abs() - 1.0 / h).max(0.0);
            if inside_shape(style.shape, u, v) && x < canvas.width() && y < canvas.height() {
                canvas.put(x, y, pattern_color(style, x - x0, y - y0, period));
                if let Some(m) = mask.as_deref_mut() {
                    m[y * canvas.width() + x] = true;
                }
            }
        }
    }
}

fn part_pixel_box(style: &PartStyle, body_h: f64, cx: f64, cy: f64, limit: (usize, usize)) -> (usize, usize, usize, usize) {
    let pw = (style.size.0 * body_h).round().max(3.0);
    let ph = (style.size.1 * body_h).round().max(3.0);
    let x0 = (cx - pw / 2.0).round().clamp(0.0, limit.0 as f64 - pw) as usize;
    let y0 = (cy - ph / 2.0).round().clamp(0.0, limit.1 as f64 - ph) as usize;
    (x0, y0, x0 + pw as usize, y0 + ph as usize)
}

/// Render the object of `arch` seen from `v` with body height `height`.
pub fn render_sprite(arch: &Archetype, v: Viewpoint, height: usize) -> Result<Sprite> {
    let layout = arch.layout(v);
    if height < 12 {
        return Err(Error::invalid(format!("object height {height} too small to hold its parts")));
    }
    let width = (height as f64 * layout.aspect).round() as usize;
    let mut r = Raster::filled(width, height, arch.body_color);
    // a faint vertical shading gives the body some texture
    for y in 0..height {
        let shade = (y as f64 / height as f64 * 24.0) as u8;
        for x in 0..width {
            let c = arch.body_color.map(|c| c.saturating_sub(shade));
            r.put(x, y, c);
        }
    }
    let mut parts = Vec::new();
    for &(p, fx, fy) in &layout.placements {
        let style = &arch.parts[p];
        let (x0, y0, x1, y1) = part_pixel_box(style, height as f64, fx * width as f64, fy * height as f64, (width, height));
        draw_part(&mut r, None, style, x0, y0, x1, y1);
        parts.push(PartTruth {
            part_id: p,
            bbox: BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)?,
        });
    }
    let mut sprite = Sprite {
        mask: vec![true; width * height],
        raster: r,
        parts,
    };
    if v == Viewpoint::Left {
        sprite.raster = sprite.raster.mirror_horizontal();
        for p in &mut sprite.parts {
            p.bbox = p.bbox.mirror(width as f64);
        }
    }
    Ok(sprite)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Uniform background, whole object.
    Easy,
    /// Clutter, decoys, scale jitter and truncation.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub archetype: Archetype,
    pub viewpoint: Viewpoint,
    pub mode: Mode,
    pub width: usize,
    pub height: usize,
    /// Amplitude of uniform per-channel noise.
    pub noise: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_box: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viewpoint: Option<Viewpoint>,
    pub parts: Vec<PartTruth>,
}

fn pastel(rng: &mut ChaCha8Rng) -> Rgb {
    let base = rng.gen_range(185..235);
    [0, 1, 2].map(|_| (base + rng.gen_range(-15i32..=15)).clamp(0, 255) as u8)
}

fn add_noise(r: &mut Raster, amp: u8, rng: &mut ChaCha8Rng) {
    if amp == 0 {
        return;
    }
    let a = amp as i32;
    for y in 0..r.height() {
        for x in 0..r.width() {
            let c = r.get(x, y).map(|c| (c as i32 + rng.gen_range(-a..=a)).clamp(0, 255) as u8);
            r.put(x, y, c);
        }
    }
}

fn blit(canvas: &mut Raster, s: &Raster, mask: &[bool], ox: i64, oy: i64) {
    for y in 0..s.height() {
        for x in 0..s.width() {
            let (cx, cy) = (ox + x as i64, oy + y as i64);
            if mask[y * s.width() + x] && cx >= 0 && cy >= 0 && (cx as usize) < canvas.width() && (cy as usize) < canvas.height() {
                canvas.put(cx as usize, cy as usize, s.get(x, y));
            }
        }
    }
}

fn random_fill(canvas: &mut Raster, rng: &mut ChaCha8Rng, x0: usize, y0: usize, w: usize, h: usize, color: Rgb, shape: Shape) {
    let style = PartStyle {
        name: String::new(),
        color,
        shape,
        pattern: Pattern::Solid,
        size: (1.0, 1.0),
    };
    let _ = rng;
    draw_part(canvas, None, &style, x0, y0, (x0 + w).min(canvas.width()), (y0 + h).min(canvas.height()));
}

fn overlaps_any(b: &BBox, others: &[BBox]) -> bool {
    others.iter().any(|o| b.intersection_area(o) > 0.0)
}

/// Render one scene; deterministic in `(spec, seed)`.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<(Raster, SyntheticTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let layout = spec.archetype.layout(spec.viewpoint);
    let fit_h = (h as f64).min(w as f64 / layout.aspect);
    let scale = match spec.mode {
        Mode::Easy => rng.gen_range(0.72..0.86),
        Mode::Hard => rng.gen_range(0.5..0.85),
    };
    let obj_h = (fit_h * scale).round() as usize;
    let sprite = render_sprite(&spec.archetype, spec.viewpoint, obj_h)?;
    let (sw, sh) = (sprite.raster.width(), sprite.raster.height());
    if sw + 2 > w || sh + 2 > h {
        return Err(Error::invalid("scene too small for the object"));
    }

    let bg = pastel(&mut rng);
    let mut canvas = Raster::filled(w, h, bg);
    let mut ox = rng.gen_range(1..=(w - sw - 1)) as i64;
    let mut oy = rng.gen_range(1..=(h - sh - 1)) as i64;
    let mut decoy_boxes = Vec::new();

    if spec.mode == Mode::Hard {
        for _ in 0..14 {
            let cw = rng.gen_range(4..w / 4);
            let ch = rng.gen_range(4..h / 4);
            let (x0, y0) = (rng.gen_range(0..w - cw), rng.gen_range(0..h - ch));
            let color = [rng.gen(), rng.gen(), rng.gen()];
            let shape = [Shape::Rect, Shape::Ellipse, Shape::Diamond][rng.gen_range(0..3)];
            random_fill(&mut canvas, &mut rng, x0, y0, cw, ch, color, shape);
        }
        if rng.gen_bool(0.5) {
            // a part-less body look-alike
            let dh = (obj_h as f64 * rng.gen_range(0.7..1.1)) as usize;
            let dw = ((dh as f64 * layout.aspect) as usize).min(w - 2);
            let dh = dh.min(h - 2);
            let (x0, y0) = (rng.gen_range(0..w - dw), rng.gen_range(0..h - dh));
            random_fill(&mut canvas, &mut rng, x0, y0, dw, dh, spec.archetype.body_color, Shape::Rect);
        }
        if rng.gen_bool(0.25) {
            // truncation: push the object partly across one border
            let cut_x = (sw as f64 * rng.gen_range(0.1..0.3)) as i64;
            ox = if rng.gen_bool(0.5) { -cut_x } else { (w - sw) as i64 + cut_x };
        }
        if rng.gen_bool(0.25) {
            let cut_y = (sh as f64 * rng.gen_range(0.1..0.25)) as i64;
            oy = (h - sh) as i64 + cut_y;
        }
    }

    blit(&mut canvas, &sprite.raster, &sprite.mask, ox, oy);
    let frame = BBox::new(0.0, 0.0, w as f64, h as f64)?;
    let object_box = BBox::new(ox as f64, oy as f64, (ox + sw as i64) as f64, (oy + sh as i64) as f64)?
        .intersect(&frame)
        .ok_or_else(|| Error::invalid("object left the frame"))?;
    let mut parts: Vec<PartTruth> = sprite
        .parts
        .iter()
        .filter_map(|p| {
            let moved = p.bbox.translate(ox as f64, oy as f64);
            let vis = moved.intersect(&frame)?;
            (vis.area() >= 0.5 * moved.area()).then_some(PartTruth {
                part_id: p.part_id,
                bbox: vis,
            })
        })
        .collect();

    if spec.mode == Mode::Hard {
        let arch = &spec.archetype;
        let part_h = obj_h as f64;
        let mut placed: Vec<BBox> = parts.iter().map(|p| p.bbox).collect();
        let decoys = rng.gen_range(1..=2);
        for k in 0..decoys + 1 {
            // a look-alike: the part's shape and pattern in rotated colors
            let mut style = arch.parts[rng.gen_range(0..arch.parts.len())].clone();
            style.color = [style.color[1], style.color[2], style.color[0]];
            let style = &style;
            let pw = (style.size.0 * part_h).round().max(3.0) as usize;
            let ph = (style.size.1 * part_h).round().max(3.0) as usize;
            // the first decoy sits on the object's body, the others anywhere
            let region = if k == 0 { object_box } else { frame };
            if region.width() < pw as f64 + 2.0 || region.height() < ph as f64 + 2.0 {
                continue;
            }
            for _attempt in 0..20 {
                let x0 = rng.gen_range(region.x_min as usize..=(region.x_max as usize - pw));
                let y0 = rng.gen_range(region.y_min as usize..=(region.y_max as usize - ph));
                let b = BBox::new(x0 as f64, y0 as f64, (x0 + pw) as f64, (y0 + ph) as f64)?;
                let grown = BBox {
                    x_min: b.x_min - 2.0,
                    y_min: b.y_min - 2.0,
                    x_max: b.x_max + 2.0,
                    y_max: b.y_max + 2.0,
                };
                if !overlaps_any(&grown, &placed) {
                    draw_part(&mut canvas, None, style, x0, y0, x0 + pw, y0 + ph);
                    placed.push(b);
                    decoy_boxes.push(b);
                    break;
                }
            }
        }
    }

    add_noise(&mut canvas, spec.noise, &mut rng);
    parts.sort_by(|a, b| a.part_id.cmp(&b.part_id).then(a.bbox.x_min.total_cmp(&b.bbox.x_min)));
    Ok((
        canvas,
        SyntheticTruth {
            width: w,
            height: h,
            object_box: Some(object_box),
            viewpoint: Some(spec.viewpoint),
            parts,
        },
    ))
}

/// A part in isolation on a uniform background; with `pair` two instances
/// side by side.
pub fn render_part_image(arch: &Archetype, part: usize, body_h: f64, pair: bool, noise: u8, seed: u64) -> Result<(Raster, SyntheticTruth)> {
    let style = arch
        .parts
        .get(part)
        .ok_or_else(|| Error::invalid(format!("part {part} out of range")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pw = (style.size.0 * body_h).round().max(3.0) as usize;
    let ph = (style.size.1 * body_h).round().max(3.0) as usize;
    let copies = if pair { 2 } else { 1 };
    let gap = pw / 2 + 4;
    let content_w = copies * pw + (copies - 1) * gap;
    let w = content_w + (pw as f64 * rng.gen_range(1.0..2.0)) as usize + 8;
    let h = ph + (ph as f64 * rng.gen_range(1.0..2.0)) as usize + 8;
    let mut canvas = Raster::filled(w, h, pastel(&mut rng));
    let x0 = rng.gen_range(4..=w - content_w - 4);
    let y0 = rng.gen_range(4..=h - ph - 4);
    let mut parts = Vec::new();
    for c in 0..copies {
        let x = x0 + c * (pw + gap);
        draw_part(&mut canvas, None, style, x, y0, x + pw, y0 + ph);
        parts.push(PartTruth {
            part_id: part,
            bbox: BBox::new(x as f64, y0 as f64, (x + pw) as f64, (y0 + ph) as f64)?,
        });
    }
    add_noise(&mut canvas, noise, &mut rng);
    Ok((
        canvas,
        SyntheticTruth {
            width: w,
            height: h,
            object_box: None,
            viewpoint: None,
            parts,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkCounts {
    pub images_per_part: usize,
    /// Front and back sets each; the side set holds twice as many.
    pub objects_per_viewpoint: usize,
    pub hard_domain: usize,
    pub evaluation: usize,
    /// Fraction of part images holding two instances.
    pub pair_fraction: f64,
}

impl Default for BenchmarkCounts {
    fn default() -> Self {
        BenchmarkCounts {
            images_per_part: 16,
            objects_per_viewpoint: 12,
            hard_domain: 30,
            evaluation: 30,
            pair_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub archetype: usize,
    pub counts: BenchmarkCounts,
    pub easy_noise: u8,
    pub hard_noise: u8,
    pub object_image: (usize, usize),
    pub scene: (usize, usize),
    /// Body height used to size isolated part images.
    pub part_body_height: (f64, f64),
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            archetype: 0,
            counts: BenchmarkCounts::default(),
            easy_noise: 4,
            hard_noise: 10,
            object_image: (112, 84),
            scene: (144, 108),
            part_body_height: (56.0, 72.0),
        }
    }
}

/// Manifest, images and ground truth of one generated benchmark.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub manifest: DatasetManifest,
    pub store: MemoryStore,
    /// Held-out hard scenes for evaluation.
    pub evaluation: GroundTruthSet,
    /// Truth of every generated image, keyed by image id.
    pub truth: std::collections::BTreeMap<String, SyntheticTruth>,
}

impl SyntheticTruth {
    pub fn to_image_truth(&self, image_id: &str, class: &str) -> ImageTruth {
        ImageTruth {
            image_id: image_id.to_string(),
            width: self.width,
            height: self.height,
            objects: self
                .object_box
                .map(|b| ObjectTruth {
                    class: class.to_string(),
                    bbox: b,
                    viewpoint: self.viewpoint,
                    parts: self.parts.clone(),
                })
                .into_iter()
                .collect(),
        }
    }
}

fn sub_seed(seed: u64, stream: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 2);
    rng.gen()
}

/// Generate a full benchmark for one archetype.
pub fn generate_benchmark(spec: &BenchmarkSpec, seed: u64) -> Result<Benchmark> {
    let arch = Archetype::builtin(spec.archetype)?;
    let names = arch.part_names();
    let mut store = MemoryStore::default();
    let mut truth = std::collections::BTreeMap::new();
    let mut part_sets = std::collections::BTreeMap::new();
    let counts = &spec.counts;

    for (p, name) in names.iter().enumerate() {
        let mut ids = Vec::new();
        for k in 0..counts.images_per_part {
            let s = sub_seed(seed, 1 + p as u64, k);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let body_h = rng.gen_range(spec.part_body_height.0..spec.part_body_height.1);
            let pair = rng.gen_bool(counts.pair_fraction);
            let (r, t) = render_part_image(&arch, p, body_h, pair, spec.easy_noise, s)?;
            let id = format!("parts/{name}_{k:03}.ppm");
            store.insert(id.clone(), r);
            truth.insert(id.clone(), t);
            ids.push(id);
        }
        part_sets.insert(name.clone(), ids);
    }

    let easy = |v: Viewpoint| SceneSpec {
        archetype: arch.clone(),
        viewpoint: v,
        mode: Mode::Easy,
        width: spec.object_image.0,
        height: spec.object_image.1,
        noise: spec.easy_noise,
    };
    let mut object_sets = std::collections::BTreeMap::new();
    for (key, views, n) in [
        ("front", vec![Viewpoint::Front], counts.objects_per_viewpoint),
        ("back", vec![Viewpoint::Back], counts.objects_per_viewpoint),
        (SIDE_KEY, vec![Viewpoint::Left, Viewpoint::Right], 2 * counts.objects_per_viewpoint),
    ] {
        let mut ids = Vec::new();
        for k in 0..n {
            let s = sub_seed(seed, 10 + key.len() as u64, k);
            let v = views[k % views.len()];
            let (r, t) = render_scene(&easy(v), s)?;
            let id = format!("objects/{key}_{k:03}.ppm");
            store.insert(id.clone(), r);
            truth.insert(id.clone(), t);
            ids.push(id);
        }
        object_sets.insert(key.to_string(), ids);
    }

    let hard = |v: Viewpoint| SceneSpec {
        archetype: arch.clone(),
        viewpoint: v,
        mode: Mode::Hard,
        width: spec.scene.0,
        height: spec.scene.1,
        noise: spec.hard_noise,
    };
    let mut hard_domain = Vec::new();
    for k in 0..counts.hard_domain {
        let s = sub_seed(seed, 30, k);
        let v = Viewpoint::ALL[k % 4];
        let (r, t) = render_scene(&hard(v), s)?;
        let id = format!("hard/scene_{k:03}.ppm");
        hard_domain.push(HardDomainEntry {
            image: id.clone(),
            object_box: t.object_box.expect("scenes hold an object"),
            viewpoint: Some(v),
            parts: Some(t.parts.clone()),
        });
        store.insert(id.clone(), r);
        truth.insert(id, t);
    }

    let mut evaluation = GroundTruthSet::default();
    for k in 0..counts.evaluation {
        let s = sub_seed(seed, 40, k);
        let v = Viewpoint::ALL[k % 4];
        let (r, t) = render_scene(&hard(v), s)?;
        let id = format!("eval/scene_{k:03}.ppm");
        evaluation.images.push(t.to_image_truth(&id, &arch.name));
        store.insert(id.clone(), r);
        truth.insert(id, t);
    }

    Ok(Benchmark {
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            class_name: arch.name.clone(),
            parts: names,
            object_sets,
            part_sets,
            hard_domain,
        },
        store,
        evaluation,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::viewpoint::horizontal_asymmetry;

    fn scene(v: Viewpoint, mode: Mode, noise: u8) -> SceneSpec {
        SceneSpec {
            archetype: Archetype::builtin(0).unwrap(),
            viewpoint: v,
            mode,
            width: 112,
            height: 84,
            noise,
        }
    }

    #[test]
    fn archetypes_are_well_formed() {
        for a in 0..ARCHETYPE_COUNT {
            let arch = Archetype::builtin(a).unwrap();
            assert_eq!(arch.parts.len(), 3);
            let mut colors: Vec<_> = arch.parts.iter().map(|p| p.color).collect();
            colors.dedup();
            assert_eq!(colors.len(), 3);
            for v in Viewpoint::ALL {
                let s = render_sprite(&arch, v, 64).unwrap();
                let full = s.raster.full_box();
                let counts: Vec<usize> = (0..3).map(|p| s.parts.iter().filter(|t| t.part_id == p).count()).collect();
                assert!(counts.iter().all(|&c| c >= 1));
                for (i, p) in s.parts.iter().enumerate() {
                    assert!(full.contains(&p.bbox));
                    for q in &s.parts[i + 1..] {
                        assert_eq!(p.bbox.intersection_area(&q.bbox), 0.0, "{a} {v}");
                    }
                }
            }
            let side = render_sprite(&arch, Viewpoint::Right, 64).unwrap();
            assert_eq!(side.parts.iter().filter(|p| p.part_id == 0).count(), 2);
            assert!(horizontal_asymmetry(&side.raster) > 0.0, "archetype {a}");
        }
        assert!(Archetype::builtin(ARCHETYPE_COUNT).is_err());
    }

    #[test]
    fn left_is_mirror_of_right() {
        let arch = Archetype::builtin(4).unwrap();
        let r = render_sprite(&arch, Viewpoint::Right, 50).unwrap();
        let l = render_sprite(&arch, Viewpoint::Left, 50).unwrap();
        assert_eq!(l.raster, r.raster.mirror_horizontal());
    }

    #[test]
    fn clean_scene_uses_exact_colors() {
        let spec = scene(Viewpoint::Front, Mode::Easy, 0);
        let (r, t) = render_scene(&spec, 5).unwrap();
        let arch = &spec.archetype;
        let ob = t.object_box.unwrap();
        let mut allowed: Vec<Rgb> = arch.parts.iter().flat_map(|p| [p.color, dark_shade(p)]).collect();
        allowed.extend((0..=24).map(|s| arch.body_color.map(|c| c.saturating_sub(s))));
        for y in ob.y_min as usize..ob.y_max as usize {
            for x in ob.x_min as usize..ob.x_max as usize {
                assert!(allowed.contains(&r.get(x, y)));
            }
        }
    }

    #[test]
    fn deterministic() {
        for mode in [Mode::Easy, Mode::Hard] {
            let spec = scene(Viewpoint::Left, mode, 8);
            assert_eq!(render_scene(&spec, 9).unwrap().0, render_scene(&spec, 9).unwrap().0);
            assert_ne!(render_scene(&spec, 9).unwrap().0, render_scene(&spec, 10).unwrap().0);
        }
    }

    /// Pixel scan: the extent of each part's colors inside its box.
    #[test]
    fn part_boxes_match_rendered_extent() {
        for v in Viewpoint::ALL {
            let spec = scene(v, Mode::Easy, 0);
            let (r, t) = render_scene(&spec, 11).unwrap();
            for p in &t.parts {
                let style = &spec.archetype.parts[p.part_id];
                let dark = dark_shade(style);
                let b = p.bbox;
                let grown = BBox::new(b.x_min - 3.0, b.y_min - 3.0, b.x_max + 3.0, b.y_max + 3.0).unwrap();
                let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
                for y in grown.y_min.max(0.0) as usize..(grown.y_max as usize).min(r.height()) {
                    for x in grown.x_min.max(0.0) as usize..(grown.x_max as usize).min(r.width()) {
                        let c = r.get(x, y);
                        if c == style.color || (style.pattern != Pattern::Solid && c == dark) {
                            x0 = x0.min(x);
                            y0 = y0.min(y);
                            x1 = x1.max(x + 1);
                            y1 = y1.max(y + 1);
                        }
                    }
                }
                let scanned = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap();
                assert!(iou(&scanned, &b) >= 0.99, "{v}: {scanned:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn benchmark_is_consistent() {
        let spec = BenchmarkSpec {
            counts: BenchmarkCounts {
                images_per_part: 3,
                objects_per_viewpoint: 2,
                hard_domain: 4,
                evaluation: 4,
                pair_fraction: 0.5,
            },
            ..BenchmarkSpec::default()
        };
        let b = generate_benchmark(&spec, 1).unwrap();
        b.manifest.validate().unwrap();
        b.manifest.check_files(&b.store).unwrap();
        b.evaluation.validate().unwrap();
        assert_eq!(b.manifest.object_sets["side"].len(), 4);
        let (_, map) = crate::eval::evaluate_parts(&b.evaluation.as_detections(), &b.evaluation, &[0, 1, 2], 0.4);
        assert_eq!(map, 1.0);
        let again = generate_benchmark(&spec, 1).unwrap();
        assert_eq!(again.store, b.store);
    }
}
