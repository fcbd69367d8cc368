//! Procedural factor-labeled image datasets and image I/O.
//!
//! Two generators produce RGB scenes with exact discrete factor labels:
//! sprite scenes (several non-overlapping anti-aliased shapes on a black
//! background, local factors per sprite) and global scenes (one object on a
//! colored background where lighting, hues, and position are scene-wide
//! factors). Generation is a pure function of (config, seed): the same pair
//! always yields byte-identical datasets, and every image draws from its own
//! derived RNG stream so order never matters.
//!
//! Images live in [-1, 1] as [N, 3, H, W]. Persistence quantizes to 8-bit
//! PNG through the affine map [-1, 1] <-> [0, 255].

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::networks::Fnv64;

/// Supersampling grid per pixel edge for anti-aliased coverage.
const AA: usize = 4;
/// Whole-scene placement attempts before giving up on a sprite layout.
const SCENE_ATTEMPTS: usize = 200;
/// Center draws per sprite within one scene attempt.
const SPRITE_TRIES: usize = 100;
/// Side length of the grid that discretizes sprite centers into cells.
const CELL_GRID: u32 = 4;
/// One in this many content hashes lands in the test split.
const TEST_HASH_MOD: u64 = 10;

const MANIFEST_VERSION: u32 = 1;

/// Sprite silhouettes available to the scene generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] =
        [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Option<ShapeKind> {
        Self::ALL.iter().copied().find(|k| k.as_str() == s)
    }

    /// Membership test in sprite-local coordinates; `r` is the circumscribed
    /// radius that all silhouettes share so sizes stay comparable.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs().max(dy.abs()) <= r * 0.82,
            ShapeKind::Triangle => {
                let v = [(0.0, -r), (0.866 * r, 0.5 * r), (-0.866 * r, 0.5 * r)];
                for i in 0..3 {
                    let (ax, ay) = v[i];
                    let (bx, by) = v[(i + 1) % 3];
                    if (bx - ax) * (dy - ay) - (by - ay) * (dx - ax) < 0.0 {
                        return false;
                    }
                }
                true
            }
            ShapeKind::Cross => {
                let arm = 0.35 * r;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

/// Configuration for scenes of non-overlapping sprites with local factors.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteSceneConfig {
    /// Square image side; 32 or 64.
    pub resolution: usize,
    /// Sprites per scene.
    pub num_sprites: usize,
    /// Shape vocabulary sampled per sprite.
    pub shapes: Vec<ShapeKind>,
    /// Minimum gap in pixels between sprite silhouettes.
    pub min_separation: f32,
    /// RGB colors in [0, 1] display space, sampled per sprite.
    pub palette: Vec<[f32; 3]>,
}

impl Default for SpriteSceneConfig {
    fn default() -> Self {
        SpriteSceneConfig {
            resolution: 32,
            num_sprites: 2,
            shapes: ShapeKind::ALL.to_vec(),
            min_separation: 3.0,
            palette: default_palette(),
        }
    }
}

fn default_palette() -> Vec<[f32; 3]> {
    vec![
        [0.95, 0.20, 0.20],
        [0.20, 0.90, 0.25],
        [0.25, 0.35, 0.95],
        [0.95, 0.90, 0.20],
        [0.90, 0.25, 0.90],
        [0.20, 0.90, 0.90],
    ]
}

impl SpriteSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution != 32 && self.resolution != 64 {
            return Err(Error::Config(format!(
                "resolution must be 32 or 64, got {}",
                self.resolution
            )));
        }
        if self.num_sprites == 0 {
            return Err(Error::Config("num_sprites must be at least 1".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("shape vocabulary must be non-empty".into()));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("color palette must be non-empty".into()));
        }
        if !self.min_separation.is_finite() || self.min_separation < 0.0 {
            return Err(Error::Config(format!(
                "min_separation must be finite and non-negative, got {}",
                self.min_separation
            )));
        }
        for c in &self.palette {
            if c.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(Error::Config(format!("palette colors must lie in [0,1], got {c:?}")));
            }
        }
        Ok(())
    }

    /// Circumscribed sprite radius in pixels.
    fn radius(&self) -> f32 {
        self.resolution as f32 / 8.0
    }

    /// Inclusive-exclusive center range keeping silhouettes inside the frame.
    fn center_range(&self) -> (f32, f32) {
        let r = self.radius();
        (r + 1.0, self.resolution as f32 - r - 1.0)
    }
}

/// Configuration for single-object scenes with scene-wide factors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalSceneConfig {
    /// Square image side; 32 or 64.
    pub resolution: usize,
    /// Cardinality of the lighting intensity factor.
    pub lighting_levels: u32,
    /// Cardinality of the background hue factor.
    pub background_levels: u32,
    /// Cardinality of the object hue factor.
    pub object_levels: u32,
    /// Cardinality of the object position factor.
    pub position_levels: u32,
}

impl Default for GlobalSceneConfig {
    fn default() -> Self {
        GlobalSceneConfig {
            resolution: 32,
            lighting_levels: 5,
            background_levels: 6,
            object_levels: 6,
            position_levels: 4,
        }
    }
}

impl GlobalSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution != 32 && self.resolution != 64 {
            return Err(Error::Config(format!(
                "resolution must be 32 or 64, got {}",
                self.resolution
            )));
        }
        for (name, l) in [
            ("lighting_levels", self.lighting_levels),
            ("background_levels", self.background_levels),
            ("object_levels", self.object_levels),
            ("position_levels", self.position_levels),
        ] {
            if l == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// One rendered sprite: what it is and where it sits.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteRecord {
    pub shape: ShapeKind,
    /// Index into the config palette.
    pub color: usize,
    pub cx: f32,
    pub cy: f32,
}

/// Scene-wide factor levels of one global-factor image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalRecord {
    pub lighting: u32,
    pub background_hue: u32,
    pub object_hue: u32,
    pub position: u32,
}

/// Ground-truth description of one image, sufficient to recompute its factor
/// row without looking at pixels.
#[derive(Clone, Debug, PartialEq)]
pub enum SceneRecord {
    /// Sprites in canonical order (sorted by center, top-to-bottom then
    /// left-to-right), matching the factor column layout.
    Sprites(Vec<SpriteRecord>),
    Global(GlobalRecord),
}

/// Train/test membership of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Which generator produced a dataset, with its full configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    Sprites(SpriteSceneConfig),
    Global(GlobalSceneConfig),
}

/// A generated dataset: images, discrete factors, per-image ground truth,
/// and train/test tags.
#[derive(Clone, Debug)]
pub struct FactorDataset {
    kind: DatasetKind,
    seed: u64,
    /// [N, 3, H, W] in [-1, 1].
    images: Array4<f32>,
    /// [N, F] discrete factor values, each column below its cardinality.
    factors: Array2<u32>,
    factor_names: Vec<String>,
    factor_cards: Vec<u32>,
    metadata: Vec<SceneRecord>,
    splits: Vec<Split>,
}

impl FactorDataset {
    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        match &self.kind {
            DatasetKind::Sprites(c) => c.resolution,
            DatasetKind::Global(c) => c.resolution,
        }
    }

    pub fn kind(&self) -> &DatasetKind {
        &self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn images(&self) -> &Array4<f32> {
        &self.images
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(Axis(0), i)
    }

    pub fn factors(&self) -> &Array2<u32> {
        &self.factors
    }

    pub fn factor_names(&self) -> &[String] {
        &self.factor_names
    }

    pub fn factor_cards(&self) -> &[u32] {
        &self.factor_cards
    }

    pub fn metadata(&self) -> &[SceneRecord] {
        &self.metadata
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Distinct RNG stream per image so generation order never matters. The tag
/// separates generator families sharing a user seed.
fn image_rng(seed: u64, tag: u64, index: usize) -> ChaCha12Rng {
    let mixed = seed
        .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .rotate_left(17)
        ^ tag;
    ChaCha12Rng::seed_from_u64(mixed)
}

const SPRITE_TAG: u64 = 0xD1B5_4A32_5350_5254;
const GLOBAL_TAG: u64 = 0xD1B5_4A32_474C_4F42;

/// Split assignment from quantized image bytes. Identical pixels hash
/// identically, so exact duplicates can never straddle the split boundary.
fn split_for_bytes(bytes: &[u8]) -> Split {
    let mut h = Fnv64::new();
    h.update(bytes);
    if h.finish() % TEST_HASH_MOD == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

fn quantize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn dequantize(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

fn quantized_bytes(img: &ArrayView3<'_, f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.len());
    for v in img.iter() {
        out.push(quantize(*v));
    }
    out
}

/// Anti-aliased coverage of one shape over one pixel, from an AA x AA
/// subsample grid.
pub(crate) fn pixel_coverage(shape: ShapeKind, px: usize, py: usize, cx: f32, cy: f32, r: f32) -> f32 {
    let mut inside = 0usize;
    for sy in 0..AA {
        for sx in 0..AA {
            let x = px as f32 + (sx as f32 + 0.5) / AA as f32;
            let y = py as f32 + (sy as f32 + 0.5) / AA as f32;
            if shape.contains(x - cx, y - cy, r) {
                inside += 1;
            }
        }
    }
    inside as f32 / (AA * AA) as f32
}

/// Alpha-blend one sprite into a [-1, 1] image over its bounding box.
fn blend_shape(
    img: &mut Array3<f32>,
    shape: ShapeKind,
    cx: f32,
    cy: f32,
    r: f32,
    color: [f32; 3],
) {
    let (_, h, w) = img.dim();
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 2.0).ceil() as usize).min(h);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 2.0).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let cov = pixel_coverage(shape, x, y, cx, cy, r);
            if cov == 0.0 {
                continue;
            }
            for c in 0..3 {
                let cur = (img[[c, y, x]] + 1.0) * 0.5;
                let new = cur * (1.0 - cov) + color[c] * cov;
                img[[c, y, x]] = new * 2.0 - 1.0;
            }
        }
    }
}

/// Rejection-sample non-overlapping sprite centers. Retries whole layouts a
/// bounded number of times before reporting the constraint unsatisfiable.
fn place_centers(cfg: &SpriteSceneConfig, rng: &mut ChaCha12Rng) -> Result<Vec<(f32, f32)>> {
    let r = cfg.radius();
    let (lo, hi) = cfg.center_range();
    if hi <= lo {
        return Err(Error::Generation(format!(
            "sprites of radius {r} do not fit a {0}x{0} frame",
            cfg.resolution
        )));
    }
    let min_dist = 2.0 * r + cfg.min_separation;
    for _ in 0..SCENE_ATTEMPTS {
        let mut centers: Vec<(f32, f32)> = Vec::with_capacity(cfg.num_sprites);
        'sprite: for _ in 0..cfg.num_sprites {
            for _ in 0..SPRITE_TRIES {
                let c = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
                if centers
                    .iter()
                    .all(|p| ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt() >= min_dist)
                {
                    centers.push(c);
                    continue 'sprite;
                }
            }
            break 'sprite;
        }
        if centers.len() == cfg.num_sprites {
            return Ok(centers);
        }
    }
    Err(Error::Generation(format!(
        "could not place {} sprites with separation {} in a {}x{} frame after {} attempts",
        cfg.num_sprites, cfg.min_separation, cfg.resolution, cfg.resolution, SCENE_ATTEMPTS
    )))
}

/// Cell index of a sprite center on the CELL_GRID x CELL_GRID grid spanning
/// the placeable region.
fn position_cell(cfg: &SpriteSceneConfig, cx: f32, cy: f32) -> u32 {
    let (lo, hi) = cfg.center_range();
    let scale = CELL_GRID as f32 / (hi - lo);
    let fx = (((cx - lo) * scale).floor() as i64).clamp(0, CELL_GRID as i64 - 1) as u32;
    let fy = (((cy - lo) * scale).floor() as i64).clamp(0, CELL_GRID as i64 - 1) as u32;
    fy * CELL_GRID + fx
}

fn render_sprites(cfg: &SpriteSceneConfig, sprites: &[SpriteRecord]) -> Array3<f32> {
    let res = cfg.resolution;
    let mut img = Array3::from_elem((3, res, res), -1.0f32);
    let r = cfg.radius();
    for s in sprites {
        blend_shape(&mut img, s.shape, s.cx, s.cy, r, cfg.palette[s.color]);
    }
    img
}

/// Generate sprite scenes with per-sprite (shape, color, position cell)
/// factor columns in canonical sprite order.
pub fn gen_sprite_dataset(cfg: &SpriteSceneConfig, n: usize, seed: u64) -> Result<FactorDataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    let res = cfg.resolution;
    let mut images = Array4::zeros((n, 3, res, res));
    let f = 3 * cfg.num_sprites;
    let mut factors = Array2::zeros((n, f));
    let mut metadata = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);

    let mut factor_names = Vec::with_capacity(f);
    let mut factor_cards = Vec::with_capacity(f);
    for s in 0..cfg.num_sprites {
        factor_names.push(format!("shape{s}"));
        factor_names.push(format!("color{s}"));
        factor_names.push(format!("cell{s}"));
        factor_cards.push(cfg.shapes.len() as u32);
        factor_cards.push(cfg.palette.len() as u32);
        factor_cards.push(CELL_GRID * CELL_GRID);
    }

    for i in 0..n {
        let mut rng = image_rng(seed, SPRITE_TAG, i);
        let mut sprites: Vec<SpriteRecord> = (0..cfg.num_sprites)
            .map(|_| SpriteRecord {
                shape: cfg.shapes[rng.gen_range(0..cfg.shapes.len())],
                color: rng.gen_range(0..cfg.palette.len()),
                cx: 0.0,
                cy: 0.0,
            })
            .collect();
        let centers = place_centers(cfg, &mut rng)?;
        for (s, c) in sprites.iter_mut().zip(centers) {
            s.cx = c.0;
            s.cy = c.1;
        }
        // Canonical order ties factor columns to spatial position rather
        // than draw order.
        sprites.sort_by(|a, b| a.cy.total_cmp(&b.cy).then(a.cx.total_cmp(&b.cx)));

        let img = render_sprites(cfg, &sprites);
        for (s, sp) in sprites.iter().enumerate() {
            factors[[i, 3 * s]] = cfg.shapes.iter().position(|k| *k == sp.shape).unwrap() as u32;
            factors[[i, 3 * s + 1]] = sp.color as u32;
            factors[[i, 3 * s + 2]] = position_cell(cfg, sp.cx, sp.cy);
        }
        splits.push(split_for_bytes(&quantized_bytes(&img.view())));
        images.index_axis_mut(Axis(0), i).assign(&img);
        metadata.push(SceneRecord::Sprites(sprites));
    }

    Ok(FactorDataset {
        kind: DatasetKind::Sprites(cfg.clone()),
        seed,
        images,
        factors,
        factor_names,
        factor_cards,
        metadata,
        splits,
    })
}

/// HSV to RGB with h in [0, 1) and s, v in [0, 1].
fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness multiplier for a lighting level; strictly increasing in the
/// level so mean image brightness orders the same way.
fn lighting_scale(level: u32, levels: u32) -> f32 {
    if levels <= 1 {
        1.0
    } else {
        0.3 + 0.7 * level as f32 / (levels - 1) as f32
    }
}

fn render_global(cfg: &GlobalSceneConfig, rec: &GlobalRecord) -> Array3<f32> {
    let res = cfg.resolution;
    let bg = hsv_to_rgb(rec.background_hue as f32 / cfg.background_levels as f32, 0.55, 0.6);
    let obj = hsv_to_rgb(rec.object_hue as f32 / cfg.object_levels as f32, 0.9, 0.95);
    let scale = lighting_scale(rec.lighting, cfg.lighting_levels);

    let mid = res as f32 / 2.0;
    let ring = res as f32 / 4.0;
    let angle = std::f32::consts::TAU * rec.position as f32 / cfg.position_levels as f32
        - std::f32::consts::FRAC_PI_2;
    let (cx, cy) = (mid + ring * angle.cos(), mid + ring * angle.sin());
    let r = res as f32 / 6.0;

    let mut img = Array3::zeros((3, res, res));
    for c in 0..3 {
        let v = (bg[c] * scale) * 2.0 - 1.0;
        img.index_axis_mut(Axis(0), c).fill(v);
    }
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 2.0).ceil() as usize).min(res);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 2.0).ceil() as usize).min(res);
    for y in y0..y1 {
        for x in x0..x1 {
            let cov = pixel_coverage(ShapeKind::Circle, x, y, cx, cy, r);
            if cov == 0.0 {
                continue;
            }
            for c in 0..3 {
                let mixed = bg[c] * (1.0 - cov) + obj[c] * cov;
                img[[c, y, x]] = (mixed * scale) * 2.0 - 1.0;
            }
        }
    }
    img
}

/// Generate single-object scenes whose four factor columns are the
/// scene-wide levels themselves, drawn independently and uniformly.
pub fn gen_global_dataset(cfg: &GlobalSceneConfig, n: usize, seed: u64) -> Result<FactorDataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    let res = cfg.resolution;
    let mut images = Array4::zeros((n, 3, res, res));
    let mut factors = Array2::zeros((n, 4));
    let mut metadata = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);

    for i in 0..n {
        let mut rng = image_rng(seed, GLOBAL_TAG, i);
        let rec = GlobalRecord {
            lighting: rng.gen_range(0..cfg.lighting_levels),
            background_hue: rng.gen_range(0..cfg.background_levels),
            object_hue: rng.gen_range(0..cfg.object_levels),
            position: rng.gen_range(0..cfg.position_levels),
        };
        let img = render_global(cfg, &rec);
        factors[[i, 0]] = rec.lighting;
        factors[[i, 1]] = rec.background_hue;
        factors[[i, 2]] = rec.object_hue;
        factors[[i, 3]] = rec.position;
        splits.push(split_for_bytes(&quantized_bytes(&img.view())));
        images.index_axis_mut(Axis(0), i).assign(&img);
        metadata.push(SceneRecord::Global(rec));
    }

    Ok(FactorDataset {
        kind: DatasetKind::Global(cfg.clone()),
        seed,
        images,
        factors,
        factor_names: global_factor_names(),
        factor_cards: vec![
            cfg.lighting_levels,
            cfg.background_levels,
            cfg.object_levels,
            cfg.position_levels,
        ],
        metadata,
        splits,
    })
}

fn global_factor_names() -> Vec<String> {
    ["lighting_intensity", "background_hue", "object_hue", "object_position"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Save a [3, H, W] tensor in [-1, 1] as an 8-bit RGB PNG.
pub fn save_png(path: &Path, img: ArrayView3<'_, f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Argument(format!("image must have 3 channels, got {c}")));
    }
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push(quantize(img[[ch, y, x]]));
            }
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer sized to dimensions");
    rgb.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Load an RGB PNG as a [3, H, W] tensor in [-1, 1].
pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = dequantize(p.0[c]);
        }
    }
    Ok(out)
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    let source = match e {
        image::ImageError::IoError(io) => io,
        other => std::io::Error::new(std::io::ErrorKind::InvalidData, other.to_string()),
    };
    Error::Io { path: path.to_path_buf(), source }
}

fn image_file_name(i: usize) -> String {
    format!("{i:06}.png")
}

fn format_palette(palette: &[[f32; 3]]) -> String {
    palette
        .iter()
        .map(|c| format!("{}:{}:{}", c[0], c[1], c[2]))
        .collect::<Vec<_>>()
        .join(",")
}

fn manifest_string(ds: &FactorDataset) -> String {
    let mut out = String::new();
    out.push_str(&format!("version = {MANIFEST_VERSION}\n"));
    match &ds.kind {
        DatasetKind::Sprites(c) => {
            out.push_str("kind = sprites\n");
            out.push_str(&format!("seed = {}\n", ds.seed));
            out.push_str(&format!("n = {}\n", ds.len()));
            out.push_str(&format!("resolution = {}\n", c.resolution));
            out.push_str(&format!("num_sprites = {}\n", c.num_sprites));
            let shapes: Vec<&str> = c.shapes.iter().map(|s| s.as_str()).collect();
            out.push_str(&format!("shapes = {}\n", shapes.join(",")));
            out.push_str(&format!("min_separation = {}\n", c.min_separation));
            out.push_str(&format!("palette = {}\n", format_palette(&c.palette)));
        }
        DatasetKind::Global(c) => {
            out.push_str("kind = global\n");
            out.push_str(&format!("seed = {}\n", ds.seed));
            out.push_str(&format!("n = {}\n", ds.len()));
            out.push_str(&format!("resolution = {}\n", c.resolution));
            out.push_str(&format!("lighting_levels = {}\n", c.lighting_levels));
            out.push_str(&format!("background_levels = {}\n", c.background_levels));
            out.push_str(&format!("object_levels = {}\n", c.object_levels));
            out.push_str(&format!("position_levels = {}\n", c.position_levels));
        }
    }
    out
}

/// Persist a dataset as a directory: `manifest.txt`, `factors.csv`,
/// `metadata.csv`, and one PNG per image under `images/`. Output bytes are a
/// pure function of the dataset.
pub fn save_dataset(ds: &FactorDataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    write_text(&dir.join("manifest.txt"), &manifest_string(ds))?;

    let mut factors = String::from("index,split");
    for name in &ds.factor_names {
        factors.push(',');
        factors.push_str(name);
    }
    factors.push('\n');
    for i in 0..ds.len() {
        factors.push_str(&format!("{i},{}", ds.splits[i].as_str()));
        for f in ds.factors.row(i) {
            factors.push_str(&format!(",{f}"));
        }
        factors.push('\n');
    }
    write_text(&dir.join("factors.csv"), &factors)?;

    let mut meta = String::new();
    match &ds.kind {
        DatasetKind::Sprites(_) => {
            meta.push_str("index,slot,shape,color,cx,cy\n");
            for (i, rec) in ds.metadata.iter().enumerate() {
                let SceneRecord::Sprites(sprites) = rec else { unreachable!("kind mismatch") };
                for (slot, s) in sprites.iter().enumerate() {
                    meta.push_str(&format!(
                        "{i},{slot},{},{},{},{}\n",
                        s.shape.as_str(),
                        s.color,
                        s.cx,
                        s.cy
                    ));
                }
            }
        }
        DatasetKind::Global(_) => {
            meta.push_str("index,lighting_intensity,background_hue,object_hue,object_position\n");
            for (i, rec) in ds.metadata.iter().enumerate() {
                let SceneRecord::Global(g) = rec else { unreachable!("kind mismatch") };
                meta.push_str(&format!(
                    "{i},{},{},{},{}\n",
                    g.lighting, g.background_hue, g.object_hue, g.position
                ));
            }
        }
    }
    write_text(&dir.join("metadata.csv"), &meta)?;

    for i in 0..ds.len() {
        save_png(&images_dir.join(image_file_name(i)), ds.image(i))?;
    }
    Ok(())
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(content.as_bytes()).map_err(|e| Error::io(path, e))
}

fn persistence_err(field: &str, message: impl Into<String>) -> Error {
    Error::Persistence { field: field.to_string(), message: message.into() }
}

fn manifest_map(text: &str) -> Result<std::collections::BTreeMap<String, String>> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| persistence_err("manifest", format!("malformed line {line:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn manifest_get<'a>(
    map: &'a std::collections::BTreeMap<String, String>,
    key: &str,
) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| persistence_err("manifest", format!("missing key {key}")))
}

fn parse_field<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| persistence_err(field, format!("could not parse {value:?}")))
}

fn parse_palette(s: &str) -> Result<Vec<[f32; 3]>> {
    let mut out = Vec::new();
    for entry in s.split(',') {
        let parts: Vec<&str> = entry.split(':').collect();
        if parts.len() != 3 {
            return Err(persistence_err("palette", format!("expected r:g:b, got {entry:?}")));
        }
        let mut c = [0.0f32; 3];
        for (i, p) in parts.iter().enumerate() {
            c[i] = parse_field("palette", p)?;
        }
        out.push(c);
    }
    Ok(out)
}

/// Load a dataset directory written by [`save_dataset`]. Images come back
/// quantized to the 8-bit grid; factors, metadata, and splits are exact.
pub fn load_dataset(dir: &Path) -> Result<FactorDataset> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let map = manifest_map(&text)?;
    let version: u32 = parse_field("version", manifest_get(&map, "version")?)?;
    if version != MANIFEST_VERSION {
        return Err(Error::Version { found: version, expected: MANIFEST_VERSION });
    }
    let seed: u64 = parse_field("seed", manifest_get(&map, "seed")?)?;
    let n: usize = parse_field("n", manifest_get(&map, "n")?)?;
    if n == 0 {
        return Err(persistence_err("n", "dataset must contain at least one image"));
    }
    let resolution: usize = parse_field("resolution", manifest_get(&map, "resolution")?)?;

    let kind = match manifest_get(&map, "kind")? {
        "sprites" => {
            let shapes_raw = manifest_get(&map, "shapes")?;
            let mut shapes = Vec::new();
            for s in shapes_raw.split(',') {
                shapes.push(ShapeKind::parse(s).ok_or_else(|| {
                    persistence_err("shapes", format!("unknown shape {s:?}"))
                })?);
            }
            DatasetKind::Sprites(SpriteSceneConfig {
                resolution,
                num_sprites: parse_field("num_sprites", manifest_get(&map, "num_sprites")?)?,
                shapes,
                min_separation: parse_field(
                    "min_separation",
                    manifest_get(&map, "min_separation")?,
                )?,
                palette: parse_palette(manifest_get(&map, "palette")?)?,
            })
        }
        "global" => DatasetKind::Global(GlobalSceneConfig {
            resolution,
            lighting_levels: parse_field(
                "lighting_levels",
                manifest_get(&map, "lighting_levels")?,
            )?,
            background_levels: parse_field(
                "background_levels",
                manifest_get(&map, "background_levels")?,
            )?,
            object_levels: parse_field("object_levels", manifest_get(&map, "object_levels")?)?,
            position_levels: parse_field(
                "position_levels",
                manifest_get(&map, "position_levels")?,
            )?,
        }),
        other => return Err(persistence_err("kind", format!("unknown dataset kind {other:?}"))),
    };

    let (factor_names, factor_cards) = match &kind {
        DatasetKind::Sprites(c) => {
            c.validate().map_err(|e| persistence_err("manifest", e.to_string()))?;
            let mut names = Vec::new();
            let mut cards = Vec::new();
            for s in 0..c.num_sprites {
                names.push(format!("shape{s}"));
                names.push(format!("color{s}"));
                names.push(format!("cell{s}"));
                cards.push(c.shapes.len() as u32);
                cards.push(c.palette.len() as u32);
                cards.push(CELL_GRID * CELL_GRID);
            }
            (names, cards)
        }
        DatasetKind::Global(c) => {
            c.validate().map_err(|e| persistence_err("manifest", e.to_string()))?;
            (
                global_factor_names(),
                vec![
                    c.lighting_levels,
                    c.background_levels,
                    c.object_levels,
                    c.position_levels,
                ],
            )
        }
    };

    let factors_path = dir.join("factors.csv");
    let ftext = fs::read_to_string(&factors_path).map_err(|e| Error::io(&factors_path, e))?;
    let mut flines = ftext.lines();
    let header = flines.next().ok_or_else(|| persistence_err("factors", "empty factors.csv"))?;
    let expected_header =
        format!("index,split,{}", factor_names.join(","));
    if header != expected_header {
        return Err(persistence_err(
            "factors",
            format!("header {header:?} does not match manifest-declared factors"),
        ));
    }
    let mut factors = Array2::zeros((n, factor_names.len()));
    let mut splits = vec![Split::Train; n];
    let mut rows = 0usize;
    for (i, line) in flines.enumerate() {
        if i >= n {
            return Err(persistence_err("factors", "more rows than manifest n"));
        }
        let mut parts = line.split(',');
        let idx: usize = parse_field("factors", parts.next().unwrap_or(""))?;
        if idx != i {
            return Err(persistence_err("factors", format!("row {i} has index {idx}")));
        }
        let split_raw = parts.next().unwrap_or("");
        splits[i] = Split::parse(split_raw)
            .ok_or_else(|| persistence_err("factors", format!("unknown split {split_raw:?}")))?;
        for (j, card) in factor_cards.iter().enumerate() {
            let v: u32 = parse_field("factors", parts.next().unwrap_or(""))?;
            if v >= *card {
                return Err(persistence_err(
                    "factors",
                    format!("value {v} exceeds cardinality {card} in column {j}"),
                ));
            }
            factors[[i, j]] = v;
        }
        if parts.next().is_some() {
            return Err(persistence_err("factors", format!("row {i} has extra columns")));
        }
        rows += 1;
    }
    if rows != n {
        return Err(persistence_err("factors", format!("expected {n} rows, found {rows}")));
    }

    let meta_path = dir.join("metadata.csv");
    let mtext = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut mlines = mtext.lines();
    let mheader = mlines.next().unwrap_or("");
    let metadata = match &kind {
        DatasetKind::Sprites(c) => {
            if mheader != "index,slot,shape,color,cx,cy" {
                return Err(persistence_err("metadata", format!("unexpected header {mheader:?}")));
            }
            let mut per_image: Vec<Vec<SpriteRecord>> = vec![Vec::new(); n];
            for line in mlines {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() != 6 {
                    return Err(persistence_err("metadata", format!("malformed row {line:?}")));
                }
                let idx: usize = parse_field("metadata", parts[0])?;
                let slot: usize = parse_field("metadata", parts[1])?;
                if idx >= n {
                    return Err(persistence_err("metadata", format!("index {idx} out of range")));
                }
                if slot != per_image[idx].len() {
                    return Err(persistence_err(
                        "metadata",
                        format!("image {idx} slots out of order"),
                    ));
                }
                let shape = ShapeKind::parse(parts[2]).ok_or_else(|| {
                    persistence_err("metadata", format!("unknown shape {:?}", parts[2]))
                })?;
                let color: usize = parse_field("metadata", parts[3])?;
                if color >= c.palette.len() {
                    return Err(persistence_err(
                        "metadata",
                        format!("color {color} outside palette"),
                    ));
                }
                per_image[idx].push(SpriteRecord {
                    shape,
                    color,
                    cx: parse_field("metadata", parts[4])?,
                    cy: parse_field("metadata", parts[5])?,
                });
            }
            for (i, sprites) in per_image.iter().enumerate() {
                if sprites.len() != c.num_sprites {
                    return Err(persistence_err(
                        "metadata",
                        format!("image {i} has {} sprites, expected {}", sprites.len(), c.num_sprites),
                    ));
                }
            }
            per_image.into_iter().map(SceneRecord::Sprites).collect()
        }
        DatasetKind::Global(_) => {
            if mheader != "index,lighting_intensity,background_hue,object_hue,object_position" {
                return Err(persistence_err("metadata", format!("unexpected header {mheader:?}")));
            }
            let mut recs = Vec::with_capacity(n);
            for (i, line) in mlines.enumerate() {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() != 5 {
                    return Err(persistence_err("metadata", format!("malformed row {line:?}")));
                }
                let idx: usize = parse_field("metadata", parts[0])?;
                if idx != i {
                    return Err(persistence_err("metadata", format!("row {i} has index {idx}")));
                }
                recs.push(SceneRecord::Global(GlobalRecord {
                    lighting: parse_field("metadata", parts[1])?,
                    background_hue: parse_field("metadata", parts[2])?,
                    object_hue: parse_field("metadata", parts[3])?,
                    position: parse_field("metadata", parts[4])?,
                }));
            }
            if recs.len() != n {
                return Err(persistence_err(
                    "metadata",
                    format!("expected {n} rows, found {}", recs.len()),
                ));
            }
            recs
        }
    };

    let mut images = Array4::zeros((n, 3, resolution, resolution));
    for i in 0..n {
        let path = dir.join("images").join(image_file_name(i));
        let img = load_png(&path)?;
        if img.dim() != (3, resolution, resolution) {
            return Err(persistence_err(
                "images",
                format!("image {i} has shape {:?}, expected {resolution}x{resolution}", img.dim()),
            ));
        }
        images.index_axis_mut(Axis(0), i).assign(&img);
    }

    Ok(FactorDataset {
        kind,
        seed,
        images,
        factors,
        factor_names,
        factor_cards,
        metadata,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Independent connected-component count over the foreground mask
    /// (display value above background by more than 0.1), 4-connectivity.
    fn count_components(img: &ArrayView3<'_, f32>) -> usize {
        let (_, h, w) = img.dim();
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let fg = (0..3).any(|c| (img[[c, y, x]] + 1.0) * 0.5 > 0.1);
                mask[y * w + x] = fg;
            }
        }
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for start in 0..h * w {
            if !mask[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (y, x) = (p / w, p % w);
                let mut push = |q: usize| {
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if x > 0 {
                    push(p - 1);
                }
                if x + 1 < w {
                    push(p + 1);
                }
                if y > 0 {
                    push(p - w);
                }
                if y + 1 < h {
                    push(p + w);
                }
            }
        }
        count
    }

    #[test]
    fn sprite_generation_is_deterministic_per_seed() {
        let cfg = SpriteSceneConfig::default();
        let a = gen_sprite_dataset(&cfg, 6, 42).unwrap();
        let b = gen_sprite_dataset(&cfg, 6, 42).unwrap();
        assert_eq!(a.images(), b.images());
        assert_eq!(a.factors(), b.factors());
        assert_eq!(a.metadata(), b.metadata());
        assert_eq!(a.splits(), b.splits());

        let c = gen_sprite_dataset(&cfg, 6, 43).unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn two_sprite_scenes_always_have_two_components() {
        let cfg = SpriteSceneConfig::default();
        let ds = gen_sprite_dataset(&cfg, 40, 7).unwrap();
        for i in 0..ds.len() {
            let n = count_components(&ds.image(i));
            assert_eq!(n, 2, "image {i} has {n} components");
        }
    }

    #[test]
    fn four_sprite_scenes_stay_separable() {
        let cfg = SpriteSceneConfig { num_sprites: 4, ..SpriteSceneConfig::default() };
        let ds = gen_sprite_dataset(&cfg, 20, 3).unwrap();
        for i in 0..ds.len() {
            assert_eq!(count_components(&ds.image(i)), 4, "image {i}");
        }
    }

    #[test]
    fn sprite_metadata_matches_factor_columns() {
        let cfg = SpriteSceneConfig::default();
        let ds = gen_sprite_dataset(&cfg, 12, 5).unwrap();
        for i in 0..ds.len() {
            let SceneRecord::Sprites(sprites) = &ds.metadata()[i] else { panic!("kind") };
            assert_eq!(sprites.len(), cfg.num_sprites);
            // Canonical order: sorted by (cy, cx).
            for pair in sprites.windows(2) {
                assert!((pair[0].cy, pair[0].cx) <= (pair[1].cy, pair[1].cx));
            }
            for (s, sp) in sprites.iter().enumerate() {
                let shape_idx = cfg.shapes.iter().position(|k| *k == sp.shape).unwrap() as u32;
                assert_eq!(ds.factors()[[i, 3 * s]], shape_idx);
                assert_eq!(ds.factors()[[i, 3 * s + 1]], sp.color as u32);
                assert_eq!(ds.factors()[[i, 3 * s + 2]], position_cell(&cfg, sp.cx, sp.cy));
            }
        }
        for (j, card) in ds.factor_cards().iter().enumerate() {
            for i in 0..ds.len() {
                assert!(ds.factors()[[i, j]] < *card);
            }
        }
    }

    #[test]
    fn impossible_sprite_layout_reports_generation_error() {
        let cfg = SpriteSceneConfig {
            num_sprites: 12,
            min_separation: 50.0,
            ..SpriteSceneConfig::default()
        };
        let err = gen_sprite_dataset(&cfg, 1, 0).unwrap_err();
        assert_eq!(err.category(), "generation");
    }

    #[test]
    fn invalid_configs_and_sizes_are_rejected() {
        let bad_res = SpriteSceneConfig { resolution: 16, ..SpriteSceneConfig::default() };
        assert_eq!(gen_sprite_dataset(&bad_res, 1, 0).unwrap_err().category(), "config");

        let no_shapes = SpriteSceneConfig { shapes: vec![], ..SpriteSceneConfig::default() };
        assert_eq!(gen_sprite_dataset(&no_shapes, 1, 0).unwrap_err().category(), "config");

        let no_palette = SpriteSceneConfig { palette: vec![], ..SpriteSceneConfig::default() };
        assert_eq!(gen_sprite_dataset(&no_palette, 1, 0).unwrap_err().category(), "config");

        let cfg = SpriteSceneConfig::default();
        assert_eq!(gen_sprite_dataset(&cfg, 0, 0).unwrap_err().category(), "argument");

        let bad_levels = GlobalSceneConfig { lighting_levels: 0, ..GlobalSceneConfig::default() };
        assert_eq!(gen_global_dataset(&bad_levels, 1, 0).unwrap_err().category(), "config");
        assert_eq!(
            gen_global_dataset(&GlobalSceneConfig::default(), 0, 0).unwrap_err().category(),
            "argument"
        );
    }

    #[test]
    fn global_factor_marginals_are_uniform_at_scale() {
        let cfg = GlobalSceneConfig::default();
        let ds = gen_global_dataset(&cfg, 10_000, 11).unwrap();
        let n = ds.len() as f64;
        for (j, card) in ds.factor_cards().iter().enumerate() {
            let mut hist = vec![0usize; *card as usize];
            for i in 0..ds.len() {
                hist[ds.factors()[[i, j]] as usize] += 1;
            }
            for (level, count) in hist.iter().enumerate() {
                let freq = *count as f64 / n;
                let uniform = 1.0 / *card as f64;
                assert!(
                    (freq - uniform).abs() <= 0.02,
                    "factor {j} level {level}: frequency {freq:.4} vs uniform {uniform:.4}"
                );
            }
        }
    }

    #[test]
    fn lighting_level_raises_mean_brightness_monotonically() {
        let cfg = GlobalSceneConfig::default();
        let mut last = f32::NEG_INFINITY;
        for l in 0..cfg.lighting_levels {
            let rec = GlobalRecord { lighting: l, background_hue: 2, object_hue: 4, position: 1 };
            let img = render_global(&cfg, &rec);
            let mean: f32 = img.iter().map(|v| (v + 1.0) * 0.5).sum::<f32>() / img.len() as f32;
            assert!(
                mean > last,
                "brightness {mean} at level {l} not above {last}"
            );
            last = mean;
        }
    }

    #[test]
    fn global_metadata_matches_factor_columns() {
        let cfg = GlobalSceneConfig::default();
        let ds = gen_global_dataset(&cfg, 25, 9).unwrap();
        for i in 0..ds.len() {
            let SceneRecord::Global(g) = &ds.metadata()[i] else { panic!("kind") };
            assert_eq!(ds.factors()[[i, 0]], g.lighting);
            assert_eq!(ds.factors()[[i, 1]], g.background_hue);
            assert_eq!(ds.factors()[[i, 2]], g.object_hue);
            assert_eq!(ds.factors()[[i, 3]], g.position);
        }
    }

    #[test]
    fn png_round_trip_is_tight_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        let img = Array3::from_shape_simple_fn((3, 9, 7), || rng.gen_range(-1.0f32..1.0));

        let p1 = dir.path().join("a.png");
        save_png(&p1, img.view()).unwrap();
        let back = load_png(&p1).unwrap();
        let max_err = img
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 255.0 + 1e-7, "round trip error {max_err}");

        // After the first quantization the mapping is exact.
        let p2 = dir.path().join("b.png");
        save_png(&p2, back.view()).unwrap();
        let back2 = load_png(&p2).unwrap();
        assert_eq!(back, back2);

        let black = Array3::from_elem((3, 4, 4), -1.0f32);
        let p3 = dir.path().join("black.png");
        save_png(&p3, black.view()).unwrap();
        let raw = image::open(&p3).unwrap().to_rgb8().into_raw();
        assert!(raw.iter().all(|b| *b == 0));
        assert!(load_png(&p3).unwrap().iter().all(|v| *v == -1.0));
    }

    #[test]
    fn load_png_reports_missing_file() {
        let err = load_png(Path::new("/nonexistent/p.png")).unwrap_err();
        assert_eq!(err.category(), "io");
    }

    #[test]
    fn identical_images_share_a_split_and_fractions_are_sane() {
        let bytes = vec![3u8, 1, 4, 1, 5, 9, 2, 6];
        assert_eq!(split_for_bytes(&bytes), split_for_bytes(&bytes.clone()));

        let ds = gen_sprite_dataset(&SpriteSceneConfig::default(), 400, 17).unwrap();
        let test = ds.split_indices(Split::Test);
        let train = ds.split_indices(Split::Train);
        assert_eq!(test.len() + train.len(), ds.len());
        let frac = test.len() as f64 / ds.len() as f64;
        assert!((0.02..=0.25).contains(&frac), "test fraction {frac}");
        for i in &test {
            assert!(!train.contains(i));
        }
    }

    #[test]
    fn sprite_dataset_directory_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_sprite_dataset(&SpriteSceneConfig::default(), 5, 23).unwrap();
        let d1 = dir.path().join("d1");
        save_dataset(&ds, &d1).unwrap();
        let loaded = load_dataset(&d1).unwrap();

        assert_eq!(loaded.kind(), ds.kind());
        assert_eq!(loaded.seed(), ds.seed());
        assert_eq!(loaded.factors(), ds.factors());
        assert_eq!(loaded.factor_names(), ds.factor_names());
        assert_eq!(loaded.factor_cards(), ds.factor_cards());
        assert_eq!(loaded.metadata(), ds.metadata());
        assert_eq!(loaded.splits(), ds.splits());
        // Loaded pixels are the quantized originals.
        for (a, b) in ds.images().iter().zip(loaded.images().iter()) {
            assert_eq!(dequantize(quantize(*a)), *b);
        }

        // Persisting the loaded dataset reproduces every byte.
        let d2 = dir.path().join("d2");
        save_dataset(&loaded, &d2).unwrap();
        for name in ["manifest.txt", "factors.csv", "metadata.csv"] {
            let b1 = fs::read(d1.join(name)).unwrap();
            let b2 = fs::read(d2.join(name)).unwrap();
            assert_eq!(b1, b2, "{name} differs");
        }
        for i in 0..ds.len() {
            let b1 = fs::read(d1.join("images").join(image_file_name(i))).unwrap();
            let b2 = fs::read(d2.join("images").join(image_file_name(i))).unwrap();
            assert_eq!(b1, b2, "image {i} differs");
        }
    }

    #[test]
    fn global_dataset_directory_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_global_dataset(&GlobalSceneConfig::default(), 6, 29).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.kind(), ds.kind());
        assert_eq!(loaded.factors(), ds.factors());
        assert_eq!(loaded.metadata(), ds.metadata());
        assert_eq!(loaded.splits(), ds.splits());
    }

    #[test]
    fn corrupted_directories_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_sprite_dataset(&SpriteSceneConfig::default(), 2, 1).unwrap();
        save_dataset(&ds, dir.path()).unwrap();

        let manifest = dir.path().join("manifest.txt");
        let original = fs::read_to_string(&manifest).unwrap();

        fs::write(&manifest, original.replace("version = 1", "version = 99")).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap_err().category(), "version");

        fs::write(&manifest, original.replace("kind = sprites", "kind = voxels")).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap_err().category(), "persistence");

        fs::write(&manifest, &original).unwrap();
        let factors = dir.path().join("factors.csv");
        let ftext = fs::read_to_string(&factors).unwrap();
        let mut lines: Vec<&str> = ftext.lines().collect();
        lines.truncate(2);
        fs::write(&factors, lines.join("\n") + "\n").unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap_err().category(), "persistence");
    }
}
