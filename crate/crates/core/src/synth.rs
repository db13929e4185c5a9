//! Synthetic shape scenes with pixel-accurate instance masks, and the
//! dataset file format.
//!
//! A dataset file starts with a text header:
//!
//! ```text
//! MNCDATA 1
//! spec <n>            followed by n bytes of TOML echoing the generator spec
//! scenes <k>
//! ```
//!
//! and then `k` scene records, each a text block followed by binary pixels:
//!
//! ```text
//! scene <id> <channels> <height> <width> <boxes_only 0|1> <instances>
//! <category> <x> <y> <w> <h> <rle>      one line per instance
//! image <bytes>                         then raw little-endian f64 pixels and '\n'
//! ```

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::geometry::{BBox, BinaryMask, Rle};
use crate::reader::{field, ByteReader};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &str = "MNCDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

/// Whether later shapes may cover earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Occlusion {
    Allow,
    Forbid,
}

/// Parameters of the scene generator. The seed fully determines a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Category `i + 1` is drawn as `categories[i]`.
    pub categories: Vec<ShapeKind>,
    pub min_instances: usize,
    pub max_instances: usize,
    pub occlusion: Occlusion,
    /// Probability that an instance is placed touching the previous one,
    /// with the same category.
    pub adjacency_prob: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Range of shape extents (diameter or side length) in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Instances left with fewer visible pixels are dropped.
    pub min_visible_pixels: usize,
    pub boxes_only_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_scenes: 100,
            width: 96,
            height: 96,
            channels: 1,
            categories: vec![ShapeKind::Disk, ShapeKind::Rectangle],
            min_instances: 1,
            max_instances: 4,
            occlusion: Occlusion::Allow,
            adjacency_prob: 0.25,
            noise: 0.05,
            min_size: 16.0,
            max_size: 40.0,
            min_visible_pixels: 24,
            boxes_only_fraction: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return bad("image dimensions must be positive");
        }
        if self.categories.is_empty() {
            return bad("at least one category is required");
        }
        if self.min_instances > self.max_instances {
            return bad("min_instances exceeds max_instances");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("shape size range is empty");
        }
        if self.max_size > self.width.min(self.height) as f64 {
            return bad("max_size exceeds the image");
        }
        if !(0.0..=1.0).contains(&self.adjacency_prob) || !(0.0..=1.0).contains(&self.boxes_only_fraction)
        {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DatasetSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

/// A shape in continuous image coordinates. Pixel `(px, py)` belongs to it
/// when its center `(px + 0.5, py + 0.5)` does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rectangle { cx: f64, cy: f64, w: f64, h: f64 },
    /// Apex up, base at the bottom.
    Triangle { cx: f64, cy: f64, w: f64, h: f64 },
}

impl Shape {
    fn new(kind: ShapeKind, cx: f64, cy: f64, w: f64, h: f64) -> Shape {
        match kind {
            ShapeKind::Disk => Shape::Disk { cx, cy, r: 0.5 * w },
            ShapeKind::Rectangle => Shape::Rectangle { cx, cy, w, h },
            ShapeKind::Triangle => Shape::Triangle { cx, cy, w, h },
        }
    }

    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Disk { .. } => ShapeKind::Disk,
            Shape::Rectangle { .. } => ShapeKind::Rectangle,
            Shape::Triangle { .. } => ShapeKind::Triangle,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Disk { cx, cy, .. } | Shape::Rectangle { cx, cy, .. } | Shape::Triangle { cx, cy, .. } => {
                (cx, cy)
            }
        }
    }

    /// Full width and height of the shape's extent.
    pub fn extent(&self) -> (f64, f64) {
        match *self {
            Shape::Disk { r, .. } => (2.0 * r, 2.0 * r),
            Shape::Rectangle { w, h, .. } | Shape::Triangle { w, h, .. } => (w, h),
        }
    }

    fn moved_to(&self, cx: f64, cy: f64) -> Shape {
        let (w, h) = self.extent();
        Shape::new(self.kind(), cx, cy, w, h)
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Rectangle { cx, cy, w, h } => {
                px >= cx - 0.5 * w && px < cx + 0.5 * w && py >= cy - 0.5 * h && py < cy + 0.5 * h
            }
            Shape::Triangle { cx, cy, w, h } => {
                let top = cy - 0.5 * h;
                let depth = py - top;
                depth >= 0.0 && depth < h && (px - cx).abs() <= 0.5 * w * depth / h
            }
        }
    }

    /// Pixel mask of the whole shape, clipped to the image.
    pub fn rasterize(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| self.contains(x as f64 + 0.5, y as f64 + 0.5))
    }

    fn fits(&self, width: usize, height: usize) -> bool {
        let (cx, cy) = self.center();
        let (w, h) = self.extent();
        cx - 0.5 * w >= 0.0 && cy - 0.5 * h >= 0.0 && cx + 0.5 * w <= width as f64 && cy + 0.5 * h <= height as f64
    }
}

/// One annotated object: category in `1..=N`, visible mask, tight box.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub category: usize,
    pub mask: BinaryMask,
    pub bbox: BBox,
}

impl GtInstance {
    /// Builds an instance whose box is the mask's tight box.
    pub fn from_mask(category: usize, mask: BinaryMask) -> Result<Self> {
        let bbox = mask
            .tight_box()
            .ok_or_else(|| Error::Input("instance mask is empty".into()))?;
        Ok(Self { category, mask, bbox })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    /// `[C, H, W]` intensities in `[0, 1]`.
    pub image: Tensor,
    pub instances: Vec<GtInstance>,
    /// Only boxes are trusted; mask losses are skipped for this scene.
    pub boxes_only: bool,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub spec: Option<DatasetSpec>,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

pub fn scene_id(index: usize) -> String {
    format!("s{index:05}")
}

fn scene_rng(spec: &DatasetSpec, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    rng
}

fn random_shape(spec: &DatasetSpec, kind: ShapeKind, rng: &mut impl Rng) -> Shape {
    let w = rng.random_range(spec.min_size..=spec.max_size);
    let h = match kind {
        ShapeKind::Disk => w,
        _ => rng.random_range(spec.min_size..=spec.max_size),
    };
    let cx = rng.random_range(0.5 * w..=spec.width as f64 - 0.5 * w);
    let cy = rng.random_range(0.5 * h..=spec.height as f64 - 0.5 * h);
    Shape::new(kind, cx, cy, w, h)
}

/// Moves `shape` so that it touches `anchor` without overlapping it.
fn place_adjacent(anchor: &Shape, shape: &Shape, rng: &mut impl Rng) -> Shape {
    let (ax, ay) = anchor.center();
    let (aw, ah) = anchor.extent();
    let (w, h) = shape.extent();
    if let (Shape::Disk { r: r1, .. }, Shape::Disk { r: r2, .. }) = (anchor, shape) {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let d = r1 + r2 + 0.5;
        return shape.moved_to(ax + d * theta.cos(), ay + d * theta.sin());
    }
    let along = rng.random_range(-0.5..=0.5);
    match rng.random_range(0..4) {
        0 => shape.moved_to(ax + 0.5 * (aw + w), ay + along * ah.min(h)),
        1 => shape.moved_to(ax - 0.5 * (aw + w), ay + along * ah.min(h)),
        2 => shape.moved_to(ax + along * aw.min(w), ay + 0.5 * (ah + h)),
        _ => shape.moved_to(ax + along * aw.min(w), ay - 0.5 * (ah + h)),
    }
}

fn distinct_intensity(taken: &[f64], background: f64, rng: &mut impl Rng) -> f64 {
    let mut best = 0.5;
    let mut best_gap = -1.0;
    for _ in 0..32 {
        let v = rng.random_range(0.35..=1.0);
        let gap = taken
            .iter()
            .map(|t| (t - v).abs())
            .fold((v - background).abs(), f64::min);
        if gap >= 0.1 {
            return v;
        }
        if gap > best_gap {
            best = v;
            best_gap = gap;
        }
    }
    best
}

/// Scene `index` of the dataset described by `spec`. Shapes are painted back
/// to front, so each mask records only the pixels still visible at the end.
pub fn generate_scene(spec: &DatasetSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    if index >= spec.num_scenes {
        return contract_err(format!("scene index {index} out of range for {} scenes", spec.num_scenes));
    }
    let (width, height) = (spec.width, spec.height);
    let mut rng = scene_rng(spec, index);
    let count = rng.random_range(spec.min_instances..=spec.max_instances);

    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut covered = BinaryMask::new(width, height);
    for _ in 0..count {
        let adjacent = shapes.last().filter(|_| rng.random_bool(spec.adjacency_prob)).copied();
        let mut placed = None;
        for attempt in 0..50 {
            let candidate = match adjacent {
                Some(prev) if attempt < 10 => {
                    let s = random_shape(spec, prev.kind(), &mut rng);
                    place_adjacent(&prev, &s, &mut rng)
                }
                _ => {
                    let kind = spec.categories[rng.random_range(0..spec.categories.len())];
                    random_shape(spec, kind, &mut rng)
                }
            };
            if !candidate.fits(width, height) {
                continue;
            }
            if spec.occlusion == Occlusion::Forbid {
                let m = candidate.rasterize(width, height);
                if m.bits().iter().zip(covered.bits()).any(|(a, b)| *a && *b) {
                    continue;
                }
            }
            placed = Some(candidate);
            break;
        }
        if let Some(s) = placed {
            let m = s.rasterize(width, height);
            for (c, b) in covered.bits_mut().iter_mut().zip(m.bits()) {
                *c |= *b;
            }
            shapes.push(s);
        }
    }

    // Dropping a shape only uncovers pixels of shapes beneath it, so one pass
    // in painting order settles which instances stay visible enough.
    let mut owner: Vec<Option<usize>> = vec![None; width * height];
    let paint = |owner: &mut Vec<Option<usize>>, keep: &[bool]| {
        owner.iter_mut().for_each(|o| *o = None);
        for (k, s) in shapes.iter().enumerate().filter(|(k, _)| keep[*k]) {
            for y in 0..height {
                for x in 0..width {
                    if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        owner[y * width + x] = Some(k);
                    }
                }
            }
        }
    };
    let mut keep = vec![true; shapes.len()];
    paint(&mut owner, &keep);
    for k in 0..shapes.len() {
        let visible = owner.iter().filter(|o| **o == Some(k)).count();
        if visible < spec.min_visible_pixels.max(1) {
            keep[k] = false;
            paint(&mut owner, &keep);
        }
    }

    let background = rng.random_range(0.0..=0.2);
    let mut intensities = vec![0.0; shapes.len()];
    let mut taken = Vec::new();
    for k in (0..shapes.len()).filter(|&k| keep[k]) {
        intensities[k] = distinct_intensity(&taken, background, &mut rng);
        taken.push(intensities[k]);
    }

    let plane = width * height;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.channels * plane);
    for _ in 0..spec.channels {
        for o in &owner {
            let base = o.map_or(background, |k| intensities[k]);
            let v = if spec.noise > 0.0 { base + noise.sample(&mut rng) } else { base };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let image = Tensor::new(vec![spec.channels, height, width], data)?;

    let mut instances = Vec::new();
    for (k, s) in shapes.iter().enumerate().filter(|(k, _)| keep[*k]) {
        let mask = BinaryMask::from_fn(width, height, |x, y| owner[y * width + x] == Some(k));
        let category = spec.categories.iter().position(|c| *c == s.kind()).expect("known kind") + 1;
        instances.push(GtInstance::from_mask(category, mask)?);
    }
    let boxes_only = spec.boxes_only_fraction > 0.0 && rng.random_bool(spec.boxes_only_fraction);
    Ok(Scene {
        id: scene_id(index),
        image,
        instances,
        boxes_only,
    })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let scenes = (0..spec.num_scenes)
        .map(|i| generate_scene(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: Some(spec.clone()),
        scenes,
    })
}

pub fn write_dataset(w: &mut impl Write, dataset: &Dataset) -> Result<()> {
    writeln!(w, "{DATASET_MAGIC} {DATASET_VERSION}")?;
    let echo = dataset.spec.as_ref().map(DatasetSpec::to_toml).unwrap_or_default();
    writeln!(w, "spec {}", echo.len())?;
    w.write_all(echo.as_bytes())?;
    writeln!(w, "scenes {}", dataset.scenes.len())?;
    for scene in &dataset.scenes {
        let shape = scene.image.shape();
        if scene.id.is_empty() || scene.id.contains(char::is_whitespace) {
            return Err(Error::Input(format!("scene id {:?} must be a single token", scene.id)));
        }
        writeln!(
            w,
            "scene {} {} {} {} {} {}",
            scene.id,
            shape[0],
            shape[1],
            shape[2],
            u8::from(scene.boxes_only),
            scene.instances.len()
        )?;
        for inst in &scene.instances {
            let b = inst.bbox;
            writeln!(w, "{} {:?} {:?} {:?} {:?} {}", inst.category, b.x, b.y, b.w, b.h, inst.mask.to_rle())?;
        }
        writeln!(w, "image {}", scene.image.len() * 8)?;
        for v in scene.image.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut w, dataset)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(&std::fs::read(path)?)
}

fn keyword_line<'a>(r: &mut ByteReader<'a>, keyword: &str) -> Result<(usize, std::str::SplitWhitespace<'a>)> {
    let (off, line) = r.line()?;
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some(keyword) {
        return Err(ByteReader::error_at(off, format!("expected '{keyword}' record")));
    }
    Ok((off, tokens))
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    let (off, mut t) = keyword_line(&mut r, DATASET_MAGIC)?;
    let version: u32 = field(t.next(), off, "version")?;
    if version != DATASET_VERSION {
        return Err(ByteReader::error_at(off, format!("unsupported dataset version {version}")));
    }

    let (off, mut t) = keyword_line(&mut r, "spec")?;
    let len: usize = field(t.next(), off, "spec length")?;
    let spec_off = r.pos;
    let echo = std::str::from_utf8(r.take(len)?).map_err(|_| ByteReader::error_at(spec_off, "spec is not UTF-8"))?;
    let spec = if len == 0 {
        None
    } else {
        Some(toml::from_str(echo).map_err(|e| ByteReader::error_at(spec_off, format!("bad spec: {e}")))?)
    };

    let (off, mut t) = keyword_line(&mut r, "scenes")?;
    let count: usize = field(t.next(), off, "scene count")?;
    let mut scenes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        scenes.push(parse_scene(&mut r)?);
    }
    if !r.at_end() {
        return Err(r.error("trailing data after the last scene"));
    }
    Ok(Dataset { spec, scenes })
}

fn parse_scene(r: &mut ByteReader<'_>) -> Result<Scene> {
    let (off, mut t) = keyword_line(r, "scene")?;
    let id: String = field(t.next(), off, "scene id")?;
    let c: usize = field(t.next(), off, "channel count")?;
    let h: usize = field(t.next(), off, "height")?;
    let w: usize = field(t.next(), off, "width")?;
    let boxes_only = match t.next() {
        Some("0") => false,
        Some("1") => true,
        _ => return Err(ByteReader::error_at(off, "boxes_only flag must be 0 or 1")),
    };
    let n: usize = field(t.next(), off, "instance count")?;

    let mut instances = Vec::with_capacity(n.min(1 << 12));
    for _ in 0..n {
        let (off, line) = r.line()?;
        let mut t = line.splitn(6, ' ');
        let category: usize = field(t.next(), off, "category")?;
        let x: f64 = field(t.next(), off, "box x")?;
        let y: f64 = field(t.next(), off, "box y")?;
        let bw: f64 = field(t.next(), off, "box w")?;
        let bh: f64 = field(t.next(), off, "box h")?;
        let rle: Rle = t
            .next()
            .ok_or_else(|| ByteReader::error_at(off, "missing mask"))?
            .parse()
            .map_err(|e| ByteReader::error_at(off, format!("{e}")))?;
        if rle.width != w || rle.height != h {
            return Err(ByteReader::error_at(off, "mask size differs from the image"));
        }
        let mask = rle.decode().map_err(|e| ByteReader::error_at(off, e.to_string()))?;
        instances.push(GtInstance {
            category,
            mask,
            bbox: BBox::new(x, y, bw, bh),
        });
    }

    let (off, mut t) = keyword_line(r, "image")?;
    let nbytes: usize = field(t.next(), off, "image byte count")?;
    if nbytes != c * h * w * 8 {
        return Err(ByteReader::error_at(off, "image byte count does not match its shape"));
    }
    let raw = r.take(nbytes)?;
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if r.take(1)? != b"\n" {
        return Err(ByteReader::error_at(r.pos - 1, "missing newline after image"));
    }
    Ok(Scene {
        id,
        image: Tensor::new(vec![c, h, w], data)?,
        instances,
        boxes_only,
    })
}
