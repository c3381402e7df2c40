//! Embedder backends. The toy embedder turns an image region into a
//! unit-norm vector from hand-built color, shape and extent descriptors.

use std::collections::BTreeMap;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{components8, integer_crop_window, BoxXYXY};

/// Region and class-name embeddings in a shared space.
pub trait EmbedderBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_region(&self, image: &RgbImage, bbox: &BoxXYXY) -> Result<Vec<f64>>;
    fn embed_name(&self, class_id: u32) -> Result<Vec<f64>>;
}

pub const HUE_BINS: usize = 12;
const SHAPE_FEATURES: usize = 6;
const BASE_FEATURES: usize = HUE_BINS + SHAPE_FEATURES;
/// Length of the descriptor before projection.
pub const DESCRIPTOR_LEN: usize = 3 * BASE_FEATURES;

/// Minimum chroma (max - min of RGB in `[0,1]`) for a pixel to count as foreground.
pub const FOREGROUND_CHROMA: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEmbedder {
    dim: usize,
    seed: u64,
    /// `dim x DESCRIPTOR_LEN`, orthonormal columns.
    projection: Vec<f64>,
    names: BTreeMap<u32, Vec<f64>>,
}

pub fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::NonFinite("cannot normalize a zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

/// Hue in degrees, saturation and value of an RGB pixel.
pub fn rgb_to_hsv(p: [u8; 3]) -> (f64, f64, f64) {
    let r = p[0] as f64 / 255.0;
    let g = p[1] as f64 / 255.0;
    let b = p[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let h = if c == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { c / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

fn chroma(p: [u8; 3]) -> f64 {
    let max = p[0].max(p[1]).max(p[2]) as f64;
    let min = p[0].min(p[1]).min(p[2]) as f64;
    (max - min) / 255.0
}

/// Raw descriptor pieces of the dominant foreground blob of a region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionDescriptor {
    /// Soft hue histogram of blob pixels inside the box (sums to 1, or all zero).
    pub hue_hist: [f64; HUE_BINS],
    pub fill: f64,
    /// Fraction of the blob lying outside the box.
    pub spill: f64,
    pub hollowness: f64,
    pub elongation: f64,
    pub skew: f64,
    pub texture: f64,
    pub mean_value: f64,
}

/// Compute the descriptor of `bbox` on `image`. The analysis window is the
/// box doubled about its center plus two pixels per side.
pub fn describe_region(image: &RgbImage, bbox: &BoxXYXY) -> Result<RegionDescriptor> {
    if !bbox.is_valid() || bbox.is_degenerate() {
        return Err(Error::DegenerateBox);
    }
    let (iw, ih) = (image.width() as usize, image.height() as usize);
    let (bx0, by0, bx1, by1) = integer_crop_window(iw, ih, bbox)?;
    let c = bbox.center();
    let ctx = BoxXYXY::new(
        c.x - bbox.width() - 2.0,
        c.y - bbox.height() - 2.0,
        c.x + bbox.width() + 2.0,
        c.y + bbox.height() + 2.0,
    );
    let (wx0, wy0, wx1, wy1) = integer_crop_window(iw, ih, &ctx)?;
    let (ww, wh) = (wx1 - wx0, wy1 - wy0);
    let px = |x: usize, y: usize| image.get_pixel(x as u32, y as u32).0;
    let fg: Vec<bool> = (0..ww * wh).map(|i| chroma(px(wx0 + i % ww, wy0 + i / ww)) > FOREGROUND_CHROMA).collect();
    let inside = |i: usize| {
        let (x, y) = (wx0 + i % ww, wy0 + i / ww);
        x >= bx0 && x < bx1 && y >= by0 && y < by1
    };
    let comps = components8(ww, wh, &fg);
    let mut best: Option<(usize, usize)> = None;
    for (k, comp) in comps.iter().enumerate() {
        let n_in = comp.iter().filter(|&&i| inside(i)).count();
        if n_in > 0 && best.map_or(true, |(_, b)| n_in > b) {
            best = Some((k, n_in));
        }
    }
    let box_area = ((bx1 - bx0) * (by1 - by0)) as f64;
    let (bw, bh) = ((bx1 - bx0) as f64, (by1 - by0) as f64);
    let mut d = RegionDescriptor {
        hue_hist: [0.0; HUE_BINS],
        fill: 0.0,
        spill: 0.0,
        hollowness: 0.0,
        elongation: (bw / bh).ln().tanh(),
        skew: 0.0,
        texture: 0.0,
        mean_value: 0.0,
    };
    let Some((k, n_in)) = best else {
        return Ok(d);
    };
    let blob = &comps[k];
    let mut in_blob = vec![false; ww * wh];
    let (mut vsum, mut vsq, mut ysum) = (0.0, 0.0, 0.0);
    for &i in blob {
        if !inside(i) {
            continue;
        }
        in_blob[i] = true;
        let p = px(wx0 + i % ww, wy0 + i / ww);
        let (h, _, v) = rgb_to_hsv(p);
        let pos = h / (360.0 / HUE_BINS as f64);
        let i0 = pos.floor() as usize % HUE_BINS;
        let t = pos - pos.floor();
        d.hue_hist[i0] += 1.0 - t;
        d.hue_hist[(i0 + 1) % HUE_BINS] += t;
        vsum += v;
        vsq += v * v;
        ysum += (wy0 + i / ww) as f64 + 0.5;
    }
    let n = n_in as f64;
    d.hue_hist.iter_mut().for_each(|v| *v /= n);
    d.fill = n / box_area;
    d.spill = 1.0 - n / blob.len() as f64;
    d.mean_value = vsum / n;
    d.texture = (vsq / n - d.mean_value * d.mean_value).max(0.0).sqrt();
    d.skew = 2.0 * (ysum / n - c.y) / bh;
    // Non-blob pixels in the box that cannot reach the box border are holes.
    let (lw, lh) = (bx1 - bx0, by1 - by0);
    let mut reach = vec![false; lw * lh];
    let mut stack = Vec::new();
    let is_blob = |x: usize, y: usize| in_blob[(by0 + y - wy0) * ww + (bx0 + x - wx0)];
    for y in 0..lh {
        for x in 0..lw {
            if (x == 0 || y == 0 || x + 1 == lw || y + 1 == lh) && !is_blob(x, y) && !reach[y * lw + x] {
                reach[y * lw + x] = true;
                stack.push((x, y));
            }
        }
    }
    while let Some((x, y)) = stack.pop() {
        let nb = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
        for (nx, ny) in nb {
            if nx < lw && ny < lh && !reach[ny * lw + nx] && !is_blob(nx, ny) {
                reach[ny * lw + nx] = true;
                stack.push((nx, ny));
            }
        }
    }
    let holes = (0..lw * lh).filter(|&i| !reach[i] && !is_blob(i % lw, i / lw)).count();
    d.hollowness = holes as f64 / box_area;
    Ok(d)
}

/// Angle (radians) on the level circle: 0 for a box covering its whole
/// blob, a third of a turn for part-sized boxes, two thirds for subparts.
pub fn level_angle(spill: f64) -> f64 {
    let third = 2.0 * std::f64::consts::PI / 3.0;
    third * ((spill - 0.05) / 0.25).clamp(0.0, 1.0) + third * ((spill - 0.78) / 0.1).clamp(0.0, 1.0)
}

/// Unprojected descriptor vector. The base block `x` (hue + shape) is
/// repeated with level weights `(1, sqrt2 cos t, sqrt2 sin t)`, so regions at
/// different hierarchy levels are orthogonal.
pub fn descriptor_vector(d: &RegionDescriptor) -> [f64; DESCRIPTOR_LEN] {
    let mut base = [0.0; BASE_FEATURES];
    let mut hue: Vec<f64> = d.hue_hist.iter().map(|v| v - 1.0 / HUE_BINS as f64).collect();
    let hn = hue.iter().map(|v| v * v).sum::<f64>().sqrt();
    if hn > 1e-12 {
        hue.iter_mut().for_each(|v| *v /= hn);
        base[..HUE_BINS].copy_from_slice(&hue);
    }
    let shape = [
        0.9 * (d.fill - 0.6),
        2.0 * d.hollowness,
        0.5 * d.elongation,
        0.6 * d.skew,
        2.0 * d.texture,
        0.8 * (d.mean_value - 0.85),
    ];
    base[HUE_BINS..].copy_from_slice(&shape);
    let t = level_angle(d.spill);
    let lw = [1.0, std::f64::consts::SQRT_2 * t.cos(), std::f64::consts::SQRT_2 * t.sin()];
    let mut out = [0.0; DESCRIPTOR_LEN];
    for (k, w) in lw.iter().enumerate() {
        for (j, b) in base.iter().enumerate() {
            out[k * BASE_FEATURES + j] = w * b;
        }
    }
    out
}

impl ToyEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < DESCRIPTOR_LEN {
            return Err(Error::InvalidArgument(format!("embedding dim {dim} < descriptor length {DESCRIPTOR_LEN}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(DESCRIPTOR_LEN);
        while cols.len() < DESCRIPTOR_LEN {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for c in &cols {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
            if l2_normalize(&mut v).is_ok() {
                cols.push(v);
            }
        }
        let mut projection = vec![0.0; dim * DESCRIPTOR_LEN];
        for (j, c) in cols.iter().enumerate() {
            for i in 0..dim {
                projection[i * DESCRIPTOR_LEN + j] = c[i];
            }
        }
        Ok(ToyEmbedder { dim, seed, projection, names: BTreeMap::new() })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn project(&self, desc: &[f64; DESCRIPTOR_LEN]) -> Result<Vec<f64>> {
        let mut out: Vec<f64> = (0..self.dim)
            .map(|i| self.projection[i * DESCRIPTOR_LEN..(i + 1) * DESCRIPTOR_LEN].iter().zip(desc).map(|(a, b)| a * b).sum())
            .collect();
        l2_normalize(&mut out)?;
        Ok(out)
    }

    /// Register a class-name embedding as the renormalized mean of exemplar embeddings.
    pub fn set_name_from_exemplars(&mut self, class_id: u32, exemplars: &[Vec<f64>]) -> Result<()> {
        if exemplars.is_empty() {
            return Err(Error::Registry(format!("class {class_id} has no exemplars")));
        }
        let mut mean = vec![0.0; self.dim];
        for e in exemplars {
            mean.iter_mut().zip(e).for_each(|(m, v)| *m += v);
        }
        l2_normalize(&mut mean)?;
        self.names.insert(class_id, mean);
        Ok(())
    }

    pub fn names(&self) -> &BTreeMap<u32, Vec<f64>> {
        &self.names
    }
}

impl EmbedderBackend for ToyEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_region(&self, image: &RgbImage, bbox: &BoxXYXY) -> Result<Vec<f64>> {
        let d = describe_region(image, bbox)?;
        self.project(&descriptor_vector(&d))
    }

    fn embed_name(&self, class_id: u32) -> Result<Vec<f64>> {
        self.names.get(&class_id).cloned().ok_or(Error::UnknownClass(class_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with_disk(hue: f64, cx: i32, cy: i32, r: i32) -> RgbImage {
        let col = hsv_to_rgb(hue, 0.9, 0.9);
        RgbImage::from_fn(48, 48, |x, y| {
            let (dx, dy) = (x as i32 - cx, y as i32 - cy);
            if dx * dx + dy * dy <= r * r {
                image::Rgb(col)
            } else {
                image::Rgb([110, 112, 108])
            }
        })
    }

    #[test]
    fn hsv_round_trip() {
        for h in [0.0, 48.0, 132.0, 228.0, 348.0] {
            let (h2, s, v) = rgb_to_hsv(hsv_to_rgb(h, 0.9, 0.8));
            assert!((h2 - h).abs() < 1.0 && (s - 0.9).abs() < 0.01 && (v - 0.8).abs() < 0.01);
        }
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let e = ToyEmbedder::new(64, 7).unwrap();
        let img = scene_with_disk(100.0, 20, 20, 6);
        let b = BoxXYXY::new(14.0, 14.0, 27.0, 27.0);
        let a = e.embed_region(&img, &b).unwrap();
        assert_eq!(a, e.embed_region(&img, &b).unwrap());
        assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(e.embed_region(&img, &BoxXYXY::new(3.0, 3.0, 3.0, 9.0)), Err(Error::DegenerateBox)));
    }

    #[test]
    fn whole_and_part_are_nearly_orthogonal() {
        let e = ToyEmbedder::new(64, 7).unwrap();
        let img = scene_with_disk(200.0, 20, 20, 8);
        let whole = e.embed_region(&img, &BoxXYXY::new(12.0, 12.0, 29.0, 29.0)).unwrap();
        let part = e.embed_region(&img, &BoxXYXY::new(15.0, 15.0, 26.0, 26.0)).unwrap();
        let other = e.embed_region(&scene_with_disk(200.0, 22, 24, 8), &BoxXYXY::new(14.0, 16.0, 31.0, 33.0)).unwrap();
        assert!(cosine(&whole, &part).abs() < 0.2, "{}", cosine(&whole, &part));
        assert!(cosine(&whole, &other) > 0.99);
    }

    #[test]
    fn name_from_single_exemplar_equals_it() {
        let mut e = ToyEmbedder::new(64, 1).unwrap();
        let img = scene_with_disk(40.0, 20, 20, 5);
        let r = e.embed_region(&img, &BoxXYXY::new(15.0, 15.0, 26.0, 26.0)).unwrap();
        e.set_name_from_exemplars(3, &[r.clone()]).unwrap();
        let n = e.embed_name(3).unwrap();
        assert!(n.iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(matches!(e.embed_name(4), Err(Error::UnknownClass(4))));
    }
}
