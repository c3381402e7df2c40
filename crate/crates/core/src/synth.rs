//! Procedural crowded scenes with exact instance masks, point annotations
//! and disjoint category splits.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{cosine, hsv_to_rgb, EmbedderBackend, ToyEmbedder};
use crate::error::{Error, Result};
use crate::geometry::{components8, mask_to_box, BinaryMask, BoxXYXY, Point2D};
use crate::proposal::{segment_at_points, OracleBackend, SegmenterBackend};
use crate::heatmap::{KeypointSet, PointSource};
use crate::rle::RleMask;

pub const GENERATOR_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Disk,
    Square,
    Triangle,
    Ring,
    Bar,
    Cross,
    Diamond,
    Ellipse,
}

/// Families used by the default registry. Square and bar fill their box,
/// which makes a concentric part look like a smaller whole, so they are
/// left out.
pub const DEFAULT_FAMILIES: [ShapeFamily; 6] = [
    ShapeFamily::Disk,
    ShapeFamily::Triangle,
    ShapeFamily::Ring,
    ShapeFamily::Cross,
    ShapeFamily::Diamond,
    ShapeFamily::Ellipse,
];

impl ShapeFamily {
    /// Membership test in box-normalized coordinates `u, v in [-1, 1]`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            ShapeFamily::Disk | ShapeFamily::Ellipse => u * u + v * v <= 1.0,
            ShapeFamily::Square | ShapeFamily::Bar => true,
            ShapeFamily::Triangle => v >= -1.0 && u.abs() <= (v + 1.0) / 2.0 + 1e-9,
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                (0.25..=1.0).contains(&r2)
            }
            ShapeFamily::Cross => u.abs() <= 0.35 || v.abs() <= 0.35,
            ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0 + 1e-9,
        }
    }

    /// Width / height.
    pub fn aspect(&self) -> f64 {
        match self {
            ShapeFamily::Ellipse => 1.8,
            ShapeFamily::Bar => 3.0,
            _ => 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Disk => "disk",
            ShapeFamily::Square => "square",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Bar => "bar",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::Ellipse => "ellipse",
        }
    }
}

/// Pixel offsets of a rasterized shape with the given long side. The stamp
/// is 8-connected and its tight box has both sides >= 2.
pub fn shape_stamp(family: ShapeFamily, size: usize) -> Vec<(usize, usize)> {
    let w = size.max(2);
    let h = ((size as f64 / family.aspect()).round() as usize).max(2);
    let bits: Vec<bool> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            family.contains(u, v)
        })
        .collect();
    let comps = components8(w, h, &bits);
    let Some(largest) = comps.iter().max_by_key(|c| c.len()) else {
        return (0..w * h).map(|i| (i % w, i / w)).collect();
    };
    let mut px: Vec<(usize, usize)> = largest.iter().map(|&i| (i % w, i / w)).collect();
    px.sort_by_key(|&(x, y)| (y, x));
    let x0 = px.iter().map(|p| p.0).min().unwrap();
    let y0 = px.iter().map(|p| p.1).min().unwrap();
    let px: Vec<_> = px.into_iter().map(|(x, y)| (x - x0, y - y0)).collect();
    let bw = px.iter().map(|p| p.0).max().unwrap() + 1;
    let bh = px.iter().map(|p| p.1).max().unwrap() + 1;
    if bw < 2 || bh < 2 {
        return (0..w * h).map(|i| (i % w, i / w)).collect();
    }
    px
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub id: u32,
    pub name: String,
    pub family: ShapeFamily,
    /// Degrees.
    pub hue: f64,
    pub hue_jitter: f64,
    pub saturation: [f64; 2],
    pub value: [f64; 2],
    /// Alternate rows are darkened.
    pub textured: bool,
}

pub fn default_categories(n: usize) -> Vec<CategoryDef> {
    (0..n)
        .map(|i| {
            let family = DEFAULT_FAMILIES[i % DEFAULT_FAMILIES.len()];
            let hue = i as f64 * 360.0 / n as f64;
            CategoryDef {
                id: i as u32,
                name: format!("{}-{:03}", family.name(), hue.round() as u32),
                family,
                hue,
                hue_jitter: 3.0,
                saturation: [0.75, 1.0],
                value: [0.75, 1.0],
                textured: (i / DEFAULT_FAMILIES.len()) % 2 == 1,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Registry {
    pub seed: u64,
    pub categories: Vec<CategoryDef>,
    pub embedder: ToyEmbedder,
}

impl Registry {
    pub fn category(&self, id: u32) -> Result<&CategoryDef> {
        self.categories.iter().find(|c| c.id == id).ok_or(Error::UnknownClass(id))
    }
}

/// Exemplars rendered per category when building name embeddings.
pub const NAME_EXEMPLARS: usize = 16;

fn background(width: usize, height: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let base: f64 = rng.gen_range(0.35..0.6);
    let tint_h: f64 = rng.gen_range(0.0..360.0);
    let tint_s: f64 = rng.gen_range(0.0..0.06);
    let tint = hsv_to_rgb(tint_h, tint_s, base);
    RgbImage::from_fn(width as u32, height as u32, |_, _| {
        let mut p = [0u8; 3];
        for c in 0..3 {
            let n: f64 = rng.gen_range(-10.0..10.0);
            p[c] = (tint[c] as f64 + n).round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(p)
    })
}

fn paint(image: &mut RgbImage, cat: &CategoryDef, pixels: &[(usize, usize)], y_top: usize, rng: &mut ChaCha8Rng) {
    let h = cat.hue + rng.gen_range(-cat.hue_jitter..=cat.hue_jitter);
    let s = rng.gen_range(cat.saturation[0]..=cat.saturation[1]);
    let v = rng.gen_range(cat.value[0]..=cat.value[1]);
    for &(x, y) in pixels {
        let vv = if cat.textured && (y - y_top) % 2 == 1 { v * 0.7 } else { v };
        let vv = (vv + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
        image.put_pixel(x as u32, y as u32, image::Rgb(hsv_to_rgb(h, s, vv)));
    }
}

/// A single instance on a plain background; used for name embeddings.
pub fn render_exemplar(cat: &CategoryDef, size: usize, rng: &mut ChaCha8Rng) -> (RgbImage, BoxXYXY) {
    let side = 48usize.max(size * 2 + 8);
    let mut img = background(side, side, rng);
    let stamp = shape_stamp(cat.family, size);
    let bw = stamp.iter().map(|p| p.0).max().unwrap() + 1;
    let bh = stamp.iter().map(|p| p.1).max().unwrap() + 1;
    let (x0, y0) = ((side - bw) / 2, (side - bh) / 2);
    let px: Vec<_> = stamp.iter().map(|&(x, y)| (x0 + x, y0 + y)).collect();
    paint(&mut img, cat, &px, y0, rng);
    (img, BoxXYXY::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64))
}

fn derive_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn exemplar_embeddings(cat: &CategoryDef, seed: u64, tag: &str, embedder: &ToyEmbedder, n: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[&seed.to_string(), tag, &cat.id.to_string()]));
    (0..n)
        .map(|k| {
            let size = 4 + (k * 16) / n.max(1);
            let (img, b) = render_exemplar(cat, size, &mut rng);
            embedder.embed_region(&img, &b)
        })
        .collect()
}

/// Mean intra- and inter-category cosine over `pairs` sampled exemplar pairs.
pub fn separability(categories: &[CategoryDef], embedder: &ToyEmbedder, seed: u64, pairs: usize) -> Result<(f64, f64)> {
    let pool: Vec<Vec<Vec<f64>>> =
        categories.iter().map(|c| exemplar_embeddings(c, seed, "validate", embedder, 8)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (mut intra, mut inter) = (0.0, 0.0);
    for _ in 0..pairs {
        let a = rng.gen_range(0..categories.len());
        let mut b = rng.gen_range(0..categories.len() - 1);
        if b >= a {
            b += 1;
        }
        let (i, j) = (rng.gen_range(0..8), rng.gen_range(0..8));
        let j2 = (i + 1 + rng.gen_range(0..7)) % 8;
        intra += cosine(&pool[a][i], &pool[a][j2]);
        inter += cosine(&pool[a][i], &pool[b][j]);
    }
    Ok((intra / pairs as f64, inter / pairs as f64))
}

/// Deterministic registry with name embeddings. A category whose exemplars
/// are closer on average to another name than to their own is re-colored
/// (a few bounded retries).
pub fn build_registry(n: usize, seed: u64, dim: usize) -> Result<Registry> {
    if n < 3 {
        return Err(Error::Registry(format!("need at least 3 categories, got {n}")));
    }
    let mut embedder = ToyEmbedder::new(dim, seed)?;
    let mut categories = default_categories(n);
    for attempt in 0..4 {
        for c in &categories {
            let ex = exemplar_embeddings(c, seed, "name", &embedder, NAME_EXEMPLARS)?;
            embedder.set_name_from_exemplars(c.id, &ex)?;
        }
        let mut bad = Vec::new();
        for (k, c) in categories.iter().enumerate() {
            let probes = exemplar_embeddings(c, seed, "probe", &embedder, 4)?;
            let own = embedder.embed_name(c.id)?;
            let own_cos: f64 = probes.iter().map(|p| cosine(p, &own)).sum::<f64>() / probes.len() as f64;
            for o in categories.iter().filter(|o| o.id != c.id) {
                let other = embedder.embed_name(o.id)?;
                let oc: f64 = probes.iter().map(|p| cosine(p, &other)).sum::<f64>() / probes.len() as f64;
                if oc >= own_cos {
                    bad.push(k);
                    break;
                }
            }
        }
        if bad.is_empty() {
            let (intra, inter) = separability(&categories, &embedder, seed, 1000)?;
            if intra <= inter {
                return Err(Error::Registry(format!("intra-category cosine {intra:.3} <= inter {inter:.3}")));
            }
            return Ok(Registry { seed, categories, embedder });
        }
        if attempt == 3 {
            return Err(Error::Registry(format!("categories {bad:?} are not separable")));
        }
        for k in bad {
            let c = &mut categories[k];
            c.saturation = [(c.saturation[0] + 0.05).min(0.95), 1.0];
            c.textured = !c.textured;
        }
    }
    unreachable!()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl SplitPlan {
    /// Category `i` goes to train when `i mod 5` is 0, 1 or 2, to val at 3
    /// and to test at 4.
    pub fn interleaved(n: usize) -> SplitPlan {
        let mut p = SplitPlan { train: vec![], val: vec![], test: vec![] };
        for i in 0..n as u32 {
            match i % 5 {
                0..=2 => p.train.push(i),
                3 => p.val.push(i),
                _ => p.test.push(i),
            }
        }
        p
    }

    pub fn classes(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn check_disjoint(&self) -> Result<()> {
        for (a, b) in [(&self.train, &self.val), (&self.train, &self.test), (&self.val, &self.test)] {
            if let Some(c) = a.iter().find(|c| b.contains(c)) {
                return Err(Error::Dataset(format!("category {c} appears in two splits")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub distractor_min: usize,
    pub distractor_max: usize,
    /// Probability that a scene uses the minimum object size for its targets.
    pub tiny_fraction: f64,
    pub size_jitter: f64,
    /// Minimum free pixels between instances.
    pub gap: usize,
    /// Upper bound on the fraction of the image covered by instances.
    pub max_fill: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 256,
            height: 256,
            count_min: 5,
            count_max: 200,
            min_size: 3,
            max_size: 24,
            distractor_min: 0,
            distractor_max: 20,
            tiny_fraction: 0.3,
            size_jitter: 0.15,
            gap: 1,
            max_fill: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class_id: u32,
    pub target: bool,
    pub mask: BinaryMask,
    pub bbox: BoxXYXY,
    pub point: Point2D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedScene {
    pub id: String,
    pub split: Split,
    pub target_class: u32,
    pub image: RgbImage,
    pub instances: Vec<Instance>,
    /// Indices of three target instances whose boxes serve as exemplars.
    pub exemplars: Vec<usize>,
}

impl AnnotatedScene {
    pub fn targets(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| i.target)
    }

    pub fn gt_count(&self) -> usize {
        self.targets().count()
    }

    pub fn exemplar_boxes(&self) -> Vec<BoxXYXY> {
        self.exemplars.iter().map(|&i| self.instances[i].bbox).collect()
    }

    pub fn oracle(&self) -> Result<OracleBackend> {
        OracleBackend::new(
            self.image.width() as usize,
            self.image.height() as usize,
            self.instances.iter().map(|i| i.mask.clone()).collect(),
        )
    }

    /// Smallest target box side, in pixels.
    pub fn min_target_size(&self) -> f64 {
        self.targets().map(|i| i.bbox.width().min(i.bbox.height())).fold(f64::INFINITY, f64::min)
    }
}

/// Mask pixel whose center is nearest the box center (raster order on ties).
pub fn annotation_point(mask: &BinaryMask) -> Result<Point2D> {
    let b = mask_to_box(mask)?;
    let c = b.center();
    let mut best: Option<(Point2D, f64)> = None;
    for (x, y) in mask.pixels() {
        let p = Point2D::pixel_center(x, y);
        let d = p.distance(&c);
        if best.map_or(true, |(_, bd)| d < bd - 1e-12) {
            best = Some((p, d));
        }
    }
    Ok(best.unwrap().0)
}

struct Placer {
    width: usize,
    height: usize,
    gap: usize,
    occupied: Vec<bool>,
}

impl Placer {
    fn fits(&self, stamp: &[(usize, usize)], x0: usize, y0: usize) -> bool {
        let g = self.gap as isize;
        for &(dx, dy) in stamp {
            let (x, y) = (x0 + dx, y0 + dy);
            if x >= self.width || y >= self.height {
                return false;
            }
            for oy in -g..=g {
                for ox in -g..=g {
                    let (nx, ny) = (x as isize + ox, y as isize + oy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height && self.occupied[ny as usize * self.width + nx as usize] {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn occupy(&mut self, stamp: &[(usize, usize)], x0: usize, y0: usize) {
        for &(dx, dy) in stamp {
            self.occupied[(y0 + dy) * self.width + x0 + dx] = true;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layout {
    Scatter,
    Cluster,
    Lattice,
}

/// Generate one scene. When not every requested instance can be placed the
/// count is reduced and a warning is logged.
pub fn generate_scene(
    registry: &Registry,
    plan: &SplitPlan,
    split: Split,
    target_class: u32,
    params: &SceneParams,
    id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<AnnotatedScene> {
    let classes = plan.classes(split);
    if !classes.contains(&target_class) {
        return Err(Error::Dataset(format!("class {target_class} is not in split {}", split.as_str())));
    }
    let (w, h) = (params.width, params.height);
    let target_cat = registry.category(target_class)?.clone();
    let n_target = {
        let (lo, hi) = ((params.count_min.max(1)) as f64, params.count_max.max(params.count_min) as f64);
        (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp().round() as usize
    };
    let n_distract = rng.gen_range(params.distractor_min..=params.distractor_max.max(params.distractor_min));
    let others: Vec<u32> = classes.iter().copied().filter(|&c| c != target_class).collect();
    let mut distract_classes = others.clone();
    distract_classes.shuffle(rng);
    distract_classes.truncate(if others.is_empty() { 0 } else { rng.gen_range(1..=2.min(others.len())) });
    let n_distract = if distract_classes.is_empty() { 0 } else { n_distract };

    let total = (n_target + n_distract) as f64;
    let cap = ((params.max_fill * (w * h) as f64 / total).sqrt().floor() as usize).clamp(params.min_size, params.max_size);
    let tiny = rng.gen_bool(params.tiny_fraction.clamp(0.0, 1.0));
    let base = if tiny { params.min_size as f64 } else { rng.gen_range(params.min_size as f64 + 1.0..=cap.max(params.min_size + 1) as f64) };
    let d_base = rng.gen_range(params.min_size as f64..=cap.max(params.min_size) as f64);
    let jitter = |b: f64, rng: &mut ChaCha8Rng| -> usize {
        if tiny && b <= params.min_size as f64 {
            return params.min_size + usize::from(rng.gen_bool(0.3));
        }
        let j = rng.gen_range(1.0 - params.size_jitter..=1.0 + params.size_jitter);
        ((b * j).round() as usize).clamp(params.min_size, params.max_size)
    };

    let mut specs: Vec<(u32, bool, usize)> = Vec::with_capacity(total as usize);
    for _ in 0..n_target {
        specs.push((target_class, true, jitter(base, rng)));
    }
    for k in 0..n_distract {
        specs.push((distract_classes[k % distract_classes.len()], false, jitter(d_base, rng)));
    }
    let layout = match rng.gen_range(0..if tiny { 4 } else { 3 }) {
        0 => Layout::Scatter,
        1 => Layout::Cluster,
        _ => Layout::Lattice,
    };

    let mut stamps: HashMap<(u32, usize), Vec<(usize, usize)>> = HashMap::new();
    let mut placer = Placer { width: w, height: h, gap: params.gap, occupied: vec![false; w * h] };
    let mut image = background(w, h, rng);
    let mut instances = Vec::new();

    let max_side = specs.iter().map(|s| s.2).max().unwrap_or(params.min_size);
    let cluster_centers: Vec<(f64, f64)> =
        (0..rng.gen_range(1..=4)).map(|_| (rng.gen_range(0.2..0.8) * w as f64, rng.gen_range(0.2..0.8) * h as f64)).collect();
    let spread = (total.sqrt() * (max_side + params.gap + 2) as f64 * 0.6).max(6.0);
    let normal = Normal::new(0.0, spread).unwrap();
    let mut lattice: Vec<(usize, usize)> = Vec::new();
    if layout == Layout::Lattice {
        let pitch = max_side + params.gap + rng.gen_range(params.gap + 1..=max_side.max(params.gap + 2) + 2);
        let cols = (w - max_side) / pitch + 1;
        let rows = (h - max_side) / pitch + 1;
        let need = specs.len();
        // Use a compact rectangular block of the lattice when possible.
        let bc = ((need as f64).sqrt().ceil() as usize + 1).min(cols);
        let br = need.div_ceil(bc).min(rows);
        let ox = rng.gen_range(0..=cols - bc);
        let oy = rng.gen_range(0..=rows - br);
        for r in 0..br {
            for c in 0..bc {
                lattice.push(((ox + c) * pitch, (oy + r) * pitch));
            }
        }
        lattice.shuffle(rng);
    }

    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.shuffle(rng);
    let mut placed = vec![None; specs.len()];
    for &k in &order {
        let (class_id, _, size) = specs[k];
        let cat = registry.category(class_id)?;
        let stamp = stamps.entry((class_id, size)).or_insert_with(|| shape_stamp(cat.family, size)).clone();
        let sw = stamp.iter().map(|p| p.0).max().unwrap() + 1;
        let sh = stamp.iter().map(|p| p.1).max().unwrap() + 1;
        let mut found = None;
        if let Some((lx, ly)) = lattice.pop() {
            let jx = rng.gen_range(0..=1usize);
            let jy = rng.gen_range(0..=1usize);
            let (x0, y0) = ((lx + jx).min(w - sw), (ly + jy).min(h - sh));
            if placer.fits(&stamp, x0, y0) {
                found = Some((x0, y0));
            }
        }
        for _ in 0..300 {
            if found.is_some() {
                break;
            }
            let (x0, y0) = match layout {
                Layout::Cluster => {
                    let (cx, cy) = cluster_centers[rng.gen_range(0..cluster_centers.len())];
                    let x = (cx + normal.sample(rng) - sw as f64 / 2.0).round().clamp(0.0, (w - sw) as f64);
                    let y = (cy + normal.sample(rng) - sh as f64 / 2.0).round().clamp(0.0, (h - sh) as f64);
                    (x as usize, y as usize)
                }
                _ => (rng.gen_range(0..=w - sw), rng.gen_range(0..=h - sh)),
            };
            if placer.fits(&stamp, x0, y0) {
                found = Some((x0, y0));
            }
        }
        if found.is_none() {
            'scan: for _ in 0..2000 {
                let (x0, y0) = (rng.gen_range(0..=w - sw), rng.gen_range(0..=h - sh));
                if placer.fits(&stamp, x0, y0) {
                    found = Some((x0, y0));
                    break 'scan;
                }
            }
        }
        if let Some((x0, y0)) = found {
            placer.occupy(&stamp, x0, y0);
            placed[k] = Some((x0, y0, stamp));
        }
    }
    let dropped = placed.iter().filter(|p| p.is_none()).count();
    if dropped > 0 {
        log::warn!("scene {id}: could not place {dropped} of {} instances", specs.len());
    }
    for (k, p) in placed.into_iter().enumerate() {
        let Some((x0, y0, stamp)) = p else { continue };
        let (class_id, target, _) = specs[k];
        let cat = registry.category(class_id)?;
        let px: Vec<(usize, usize)> = stamp.iter().map(|&(x, y)| (x0 + x, y0 + y)).collect();
        paint(&mut image, cat, &px, y0, rng);
        let mask = BinaryMask::from_pixels(w, h, &px);
        let bbox = mask_to_box(&mask)?;
        let point = annotation_point(&mask)?;
        instances.push(Instance { class_id, target, mask, bbox, point });
    }
    let targets: Vec<usize> = instances.iter().enumerate().filter(|(_, i)| i.target).map(|(k, _)| k).collect();
    if targets.is_empty() {
        return Err(Error::Dataset(format!("scene {id}: no target instance could be placed")));
    }
    let mut exemplars = targets.clone();
    exemplars.shuffle(rng);
    exemplars.truncate(3);
    let _ = &target_cat;
    Ok(AnnotatedScene { id: id.to_string(), split, target_class, image, instances, exemplars })
}

/// Prompt the backend at each ground-truth target point and keep the
/// whole-level box. Returns `(instance index, box)`; points whose proposal is
/// empty are dropped with a log line.
pub fn pseudo_boxes_from_points(scene: &AnnotatedScene, backend: &dyn SegmenterBackend, box_size: f64) -> Vec<(usize, BoxXYXY)> {
    let idx: Vec<usize> = scene.instances.iter().enumerate().filter(|(_, i)| i.target).map(|(k, _)| k).collect();
    pseudo_boxes_for(scene, backend, box_size, &idx)
}

/// As [`pseudo_boxes_from_points`] for an explicit list of instances.
pub fn pseudo_boxes_for(scene: &AnnotatedScene, backend: &dyn SegmenterBackend, box_size: f64, idx: &[usize]) -> Vec<(usize, BoxXYXY)> {
    let pts = KeypointSet::from_points(idx.iter().map(|&k| scene.instances[k].point).collect(), PointSource::GroundTruth);
    let groups = segment_at_points(backend, &scene.image, &pts, box_size);
    let mut out = Vec::new();
    for (g, &k) in groups.iter().zip(idx) {
        let whole = &g.proposals[0];
        if whole.is_empty() {
            log::warn!("scene {}: empty proposal at ground-truth point of instance {k}", scene.id);
            continue;
        }
        out.push((k, whole.bbox));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub class_id: u32,
    pub target: bool,
    pub bbox: [f64; 4],
    pub point: [f64; 2],
    pub mask: RleMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub id: String,
    pub split: Split,
    pub width: usize,
    pub height: usize,
    pub target_class: u32,
    pub exemplars: Vec<usize>,
    pub instances: Vec<InstanceAnnotation>,
}

impl SceneAnnotation {
    pub fn from_scene(s: &AnnotatedScene) -> SceneAnnotation {
        SceneAnnotation {
            id: s.id.clone(),
            split: s.split,
            width: s.image.width() as usize,
            height: s.image.height() as usize,
            target_class: s.target_class,
            exemplars: s.exemplars.clone(),
            instances: s
                .instances
                .iter()
                .map(|i| InstanceAnnotation {
                    class_id: i.class_id,
                    target: i.target,
                    bbox: i.bbox.to_array(),
                    point: [i.point.x, i.point.y],
                    mask: RleMask::encode(&i.mask),
                })
                .collect(),
        }
    }

    pub fn into_scene(self, image: RgbImage) -> Result<AnnotatedScene> {
        if (image.width() as usize, image.height() as usize) != (self.width, self.height) {
            return Err(Error::Dataset(format!("scene {}: image size does not match annotation", self.id)));
        }
        let instances = self
            .instances
            .iter()
            .map(|a| {
                let mask = a.mask.decode(self.width, self.height)?;
                let bbox = mask_to_box(&mask)?;
                if bbox.to_array() != a.bbox {
                    return Err(Error::Dataset(format!("scene {}: stored box disagrees with mask", self.id)));
                }
                Ok(Instance { class_id: a.class_id, target: a.target, mask, bbox, point: Point2D::new(a.point[0], a.point[1]) })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AnnotatedScene { id: self.id, split: self.split, target_class: self.target_class, image, instances, exemplars: self.exemplars })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn annotation_bytes(s: &AnnotatedScene) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(&SceneAnnotation::from_scene(s))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_categories: usize,
    pub embed_dim: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 7,
            n_categories: 30,
            embed_dim: 64,
            train_scenes: 400,
            val_scenes: 100,
            test_scenes: 100,
            scene: SceneParams::default(),
        }
    }
}

impl DatasetConfig {
    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_scenes,
            Split::Val => self.val_scenes,
            Split::Test => self.test_scenes,
        }
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub split: Split,
    pub target_class: u32,
    pub count: usize,
    pub annotation_sha256: String,
    pub image_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: String,
    pub config: DatasetConfig,
    pub config_hash: String,
    pub categories: Vec<CategoryDef>,
    pub splits: SplitPlan,
    pub scenes: Vec<SceneEntry>,
}

pub fn scene_id(split: Split, index: usize) -> String {
    format!("{}-{:04}", split.as_str(), index)
}

/// Generate one split in memory. Scenes are independent (seeded per id) so
/// they are generated in parallel.
pub fn generate_split(registry: &Registry, plan: &SplitPlan, config: &DatasetConfig, split: Split) -> Result<Vec<AnnotatedScene>> {
    let classes = plan.classes(split).to_vec();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("split {} has no categories", split.as_str())));
    }
    (0..config.size(split))
        .into_par_iter()
        .map(|i| {
            let id = scene_id(split, i);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[&config.seed.to_string(), &id]));
            generate_scene(registry, plan, split, classes[i % classes.len()], &config.scene, &id, &mut rng)
        })
        .collect()
}

pub fn manifest_entry(s: &AnnotatedScene) -> Result<SceneEntry> {
    Ok(SceneEntry {
        id: s.id.clone(),
        split: s.split,
        target_class: s.target_class,
        count: s.gt_count(),
        annotation_sha256: sha256_hex(&annotation_bytes(s)?),
        image_sha256: sha256_hex(s.image.as_raw()),
    })
}

/// Generate and persist a dataset under `root`.
pub fn make_dataset(root: &Path, config: &DatasetConfig) -> Result<Manifest> {
    if config.train_scenes == 0 || config.val_scenes == 0 || config.test_scenes == 0 {
        return Err(Error::InvalidArgument("every split needs at least one scene".into()));
    }
    let registry = build_registry(config.n_categories, config.seed, config.embed_dim)?;
    let plan = SplitPlan::interleaved(config.n_categories);
    plan.check_disjoint()?;
    let mut scenes_meta = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.as_str());
        fs::create_dir_all(&dir)?;
        let scenes = generate_split(&registry, &plan, config, split)?;
        for s in &scenes {
            let ann = annotation_bytes(s)?;
            fs::write(dir.join(format!("{}.json", s.id)), &ann)?;
            s.image.save(dir.join(format!("{}.png", s.id)))?;
            scenes_meta.push(manifest_entry(s)?);
        }
    }
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION.to_string(),
        config: config.clone(),
        config_hash: config.hash()?,
        categories: registry.categories.clone(),
        splits: plan,
        scenes: scenes_meta,
    };
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A dataset on disk plus its rebuilt registry.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub registry: Registry,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let path = root.join("manifest.json");
        let manifest: Manifest = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?)?;
        if manifest.generator_version != GENERATOR_VERSION {
            return Err(Error::Dataset(format!(
                "generator version {} != {}",
                manifest.generator_version, GENERATOR_VERSION
            )));
        }
        manifest.splits.check_disjoint()?;
        let c = &manifest.config;
        let registry = build_registry(c.n_categories, c.seed, c.embed_dim)?;
        if registry.categories != manifest.categories {
            return Err(Error::Dataset("manifest categories differ from the rebuilt registry".into()));
        }
        Ok(Dataset { root: root.to_path_buf(), manifest, registry })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SceneEntry> {
        self.manifest.scenes.iter().filter(move |e| e.split == split)
    }

    pub fn load_scene(&self, entry: &SceneEntry) -> Result<AnnotatedScene> {
        let dir = self.root.join(entry.split.as_str());
        let ann_bytes = fs::read(dir.join(format!("{}.json", entry.id)))?;
        if sha256_hex(&ann_bytes) != entry.annotation_sha256 {
            return Err(Error::Dataset(format!("scene {}: annotation hash mismatch", entry.id)));
        }
        let ann: SceneAnnotation = serde_json::from_slice(&ann_bytes)?;
        let image = image::open(dir.join(format!("{}.png", entry.id)))?.to_rgb8();
        if sha256_hex(image.as_raw()) != entry.image_sha256 {
            return Err(Error::Dataset(format!("scene {}: image hash mismatch", entry.id)));
        }
        ann.into_scene(image)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<AnnotatedScene>> {
        let entries: Vec<&SceneEntry> = self.entries(split).collect();
        entries.par_iter().map(|e| self.load_scene(e)).collect()
    }

    pub fn plan(&self) -> &SplitPlan {
        &self.manifest.splits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> Registry {
        build_registry(30, 7, 64).unwrap()
    }

    #[test]
    fn stamps_have_min_box_and_connectivity() {
        for f in [
            ShapeFamily::Disk,
            ShapeFamily::Square,
            ShapeFamily::Triangle,
            ShapeFamily::Ring,
            ShapeFamily::Bar,
            ShapeFamily::Cross,
            ShapeFamily::Diamond,
            ShapeFamily::Ellipse,
        ] {
            for size in 3..30 {
                let s = shape_stamp(f, size);
                let m = BinaryMask::from_pixels(64, 64, &s);
                let b = mask_to_box(&m).unwrap();
                assert!(b.width() >= 2.0 && b.height() >= 2.0, "{f:?} {size}");
                let (_, _, w, h) = m.window();
                assert_eq!(components8(w, h, m.window_bits()).len(), 1);
            }
        }
    }

    #[test]
    fn registry_is_deterministic_and_unit() {
        let a = registry();
        let b = registry();
        assert_eq!(a.categories, b.categories);
        assert_eq!(a.embedder.names(), b.embedder.names());
        assert_eq!(a.embedder.names().len(), 30);
        for v in a.embedder.names().values() {
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let (intra, inter) = separability(&a.categories, &a.embedder, 7, 1000).unwrap();
        assert!(intra > inter);
    }

    #[test]
    fn split_plan_is_disjoint() {
        let p = SplitPlan::interleaved(30);
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (18, 6, 6));
        p.check_disjoint().unwrap();
    }

    #[test]
    fn scene_contract() {
        let reg = registry();
        let plan = SplitPlan::interleaved(30);
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = generate_scene(&reg, &plan, Split::Test, 4, &SceneParams::default(), "t", &mut rng).unwrap();
            assert!(s.gt_count() >= 1);
            for (k, i) in s.instances.iter().enumerate() {
                assert!(i.mask.get(i.point.x as usize, i.point.y as usize));
                assert!(plan.test.contains(&i.class_id));
                for j in &s.instances[k + 1..] {
                    assert_eq!(i.mask.intersect(&j.mask).count(), 0);
                }
            }
            assert_eq!(s.exemplars.len(), 3.min(s.gt_count()));
            let again = generate_scene(&reg, &plan, Split::Test, 4, &SceneParams::default(), "t", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(annotation_bytes(&s).unwrap(), annotation_bytes(&again).unwrap());
        }
    }

    #[test]
    fn requested_count_is_exact_when_space_allows() {
        let reg = registry();
        let plan = SplitPlan::interleaved(30);
        let params = SceneParams { count_min: 50, count_max: 50, distractor_max: 0, ..Default::default() };
        let s = generate_scene(&reg, &plan, Split::Train, 0, &params, "c", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.gt_count(), 50);
    }

    #[test]
    fn oracle_pseudo_boxes_equal_gt_boxes() {
        let reg = registry();
        let plan = SplitPlan::interleaved(30);
        let s = generate_scene(&reg, &plan, Split::Val, 3, &SceneParams::default(), "p", &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let o = s.oracle().unwrap();
        let pb = pseudo_boxes_from_points(&s, &o, 16.0);
        assert_eq!(pb.len(), s.gt_count());
        for (k, b) in pb {
            assert_eq!(b, s.instances[k].bbox);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { train_scenes: 3, val_scenes: 2, test_scenes: 2, ..Default::default() };
        let m = make_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(m.scenes.len(), 7);
        let ds = Dataset::open(dir.path()).unwrap();
        for e in &m.scenes {
            let s = ds.load_scene(e).unwrap();
            assert_eq!(manifest_entry(&s).unwrap(), *e);
        }
    }
}
