//! Geometric primitives shared by every stage of the pipeline.
//!
//! Conventions:
//! - Boxes are half-open, `[x0, x1) x [y0, y1)`, in continuous image-pixel
//!   coordinates. Integer pixel `(i, j)` covers `[i, i+1) x [j, j+1)` and has
//!   its center at `(i + 0.5, j + 0.5)`.
//! - Feature grids sample cell `(u, v)` at image position
//!   `(stride * (u + 0.5), stride * (v + 0.5))`.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Self {
        Point2D { x, y }
    }

    /// Center of integer pixel `(px, py)`.
    pub fn pixel_center(px: usize, py: usize) -> Self {
        Point2D::new(px as f64 + 0.5, py as f64 + 0.5)
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Axis-aligned, half-open box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxXYXY {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxXYXY { x0, y0, x1, y1 }
    }

    /// Square box of side `size` centered on `p`.
    pub fn centered(p: Point2D, size: f64) -> Self {
        let h = size / 2.0;
        BoxXYXY::new(p.x - h, p.y - h, p.x + h, p.y + h)
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x0.is_finite()
            && self.y0.is_finite()
            && self.x1.is_finite()
            && self.y1.is_finite()
            && self.x0 <= self.x1
            && self.y0 <= self.y1
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 > self.x0 && self.y1 > self.y0)
    }

    pub fn center(&self) -> Point2D {
        Point2D::new((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn intersection(&self, other: &BoxXYXY) -> BoxXYXY {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        BoxXYXY::new(x0, y0, self.x1.min(other.x1).max(x0), self.y1.min(other.y1).max(y0))
    }

    pub fn clip(&self, width: usize, height: usize) -> BoxXYXY {
        let (w, h) = (width as f64, height as f64);
        let x0 = self.x0.clamp(0.0, w);
        let y0 = self.y0.clamp(0.0, h);
        BoxXYXY::new(x0, y0, self.x1.clamp(x0, w), self.y1.clamp(y0, h))
    }

    /// Scale about the center.
    pub fn scaled(&self, factor: f64) -> BoxXYXY {
        let c = self.center();
        let hw = self.width() * factor / 2.0;
        let hh = self.height() * factor / 2.0;
        BoxXYXY::new(c.x - hw, c.y - hh, c.x + hw, c.y + hh)
    }

    /// Smallest integer box containing this one.
    pub fn round_outward(&self) -> BoxXYXY {
        BoxXYXY::new(self.x0.floor(), self.y0.floor(), self.x1.ceil(), self.y1.ceil())
    }

    pub fn contains(&self, p: &Point2D) -> bool {
        p.x >= self.x0 && p.x < self.x1 && p.y >= self.y0 && p.y < self.y1
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Binary raster over a `width x height` image.
///
/// Only the window spanning the true cells is stored; everything outside
/// the window is false. The window is always tight (or empty), so two masks
/// with the same pixel set compare equal.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask { width, height, x0: 0, y0: 0, w: 0, h: 0, bits: Vec::new() }
    }

    /// Build from a predicate evaluated on the integer window
    /// `[x0, x1) x [y0, y1)` (clipped to the image).
    pub fn from_fn(
        width: usize,
        height: usize,
        window: (usize, usize, usize, usize),
        f: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let (x0, y0) = (window.0.min(width), window.1.min(height));
        let (x1, y1) = (window.2.min(width).max(x0), window.3.min(height).max(y0));
        let w = x1 - x0;
        let mut bits = Vec::with_capacity(w * (y1 - y0));
        for y in y0..y1 {
            for x in x0..x1 {
                bits.push(f(x, y));
            }
        }
        BinaryMask { width, height, x0, y0, w, h: y1 - y0, bits }.tightened()
    }

    pub fn from_pixels(width: usize, height: usize, pixels: &[(usize, usize)]) -> Self {
        let inside: Vec<_> = pixels.iter().copied().filter(|&(x, y)| x < width && y < height).collect();
        if inside.is_empty() {
            return BinaryMask::empty(width, height);
        }
        let x0 = inside.iter().map(|p| p.0).min().unwrap();
        let x1 = inside.iter().map(|p| p.0).max().unwrap() + 1;
        let y0 = inside.iter().map(|p| p.1).min().unwrap();
        let y1 = inside.iter().map(|p| p.1).max().unwrap() + 1;
        let w = x1 - x0;
        let mut bits = vec![false; w * (y1 - y0)];
        for &(x, y) in &inside {
            bits[(y - y0) * w + (x - x0)] = true;
        }
        BinaryMask { width, height, x0, y0, w, h: y1 - y0, bits }
    }

    /// Build from a full-image row-major raster.
    pub fn from_raster(width: usize, height: usize, raster: &[bool]) -> Result<Self> {
        if raster.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{}", width * height),
                got: format!("{}", raster.len()),
            });
        }
        Ok(BinaryMask::from_fn(width, height, (0, 0, width, height), |x, y| raster[y * width + x]))
    }

    fn tightened(self) -> Self {
        let mut min_x = usize::MAX;
        let mut min_y = usize::MAX;
        let mut max_x = 0;
        let mut max_y = 0;
        for yy in 0..self.h {
            for xx in 0..self.w {
                if self.bits[yy * self.w + xx] {
                    min_x = min_x.min(xx);
                    max_x = max_x.max(xx);
                    min_y = min_y.min(yy);
                    max_y = max_y.max(yy);
                }
            }
        }
        if min_x == usize::MAX {
            return BinaryMask::empty(self.width, self.height);
        }
        if min_x == 0 && min_y == 0 && max_x + 1 == self.w && max_y + 1 == self.h {
            return self;
        }
        let w = max_x - min_x + 1;
        let h = max_y - min_y + 1;
        let mut bits = Vec::with_capacity(w * h);
        for yy in min_y..=max_y {
            bits.extend_from_slice(&self.bits[yy * self.w + min_x..yy * self.w + max_x + 1]);
        }
        BinaryMask { width: self.width, height: self.height, x0: self.x0 + min_x, y0: self.y0 + min_y, w, h, bits }
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Stored window `(x0, y0, w, h)`; tight around the true cells.
    pub fn window(&self) -> (usize, usize, usize, usize) {
        (self.x0, self.y0, self.w, self.h)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        x >= self.x0
            && y >= self.y0
            && x < self.x0 + self.w
            && y < self.y0 + self.h
            && self.bits[(y - self.y0) * self.w + (x - self.x0)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0 || !self.bits.iter().any(|&b| b)
    }

    /// True pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.h).flat_map(move |yy| {
            (0..self.w).filter_map(move |xx| {
                self.bits[yy * self.w + xx].then_some((self.x0 + xx, self.y0 + yy))
            })
        })
    }

    /// Window-local row-major bits.
    pub fn window_bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn from_window_bits(
        width: usize,
        height: usize,
        window: (usize, usize, usize, usize),
        bits: Vec<bool>,
    ) -> Result<Self> {
        let (x0, y0, w, h) = window;
        if bits.len() != w * h || x0 + w > width || y0 + h > height {
            return Err(Error::ShapeMismatch {
                expected: format!("{w}x{h} window inside {width}x{height}"),
                got: format!("{} bits at ({x0},{y0})", bits.len()),
            });
        }
        Ok(BinaryMask { width, height, x0, y0, w, h, bits }.tightened())
    }

    pub fn intersect(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, (self.x0, self.y0, self.x0 + self.w, self.y0 + self.h), |x, y| {
            self.get(x, y) && other.get(x, y)
        })
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.pixels().all(|(x, y)| other.get(x, y))
    }

    /// Intersection with the integer box `[x0, x1) x [y0, y1)`.
    pub fn restrict(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, (x0, y0, x1, y1), |x, y| self.get(x, y))
    }

    pub fn mask_iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.pixels().filter(|&(x, y)| other.get(x, y)).count();
        let union = self.count() + other.count() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Tight box over the true cells, `x1`/`y1` exclusive.
pub fn mask_to_box(m: &BinaryMask) -> Result<BoxXYXY> {
    let mut min_x = usize::MAX;
    let mut min_y = usize::MAX;
    let mut max_x = 0;
    let mut max_y = 0;
    for (x, y) in m.pixels() {
        min_x = min_x.min(x);
        min_y = min_y.min(y);
        max_x = max_x.max(x);
        max_y = max_y.max(y);
    }
    if min_x == usize::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(BoxXYXY::new(min_x as f64, min_y as f64, (max_x + 1) as f64, (max_y + 1) as f64))
}

/// 8-connected components of a window-local raster, as lists of indices.
pub(crate) fn components8(w: usize, h: usize, bits: &[bool]) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; w * h];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut comp = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if bits[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Outer boundary of the 8-connected component containing the raster-first
/// pixel `start`, traced along pixel edges with the region on the right.
/// Returns polygon vertices in window-local corner coordinates.
fn trace_outer_boundary(w: usize, h: usize, inside: &dyn Fn(isize, isize) -> bool, start: usize) -> Vec<(isize, isize)> {
    let _ = h;
    let sx = (start % w) as isize;
    let sy = (start / w) as isize;
    let pixel_in = |qx: isize, qy: isize, vx: isize, vy: isize| -> bool {
        // Pixel in quadrant (qx, qy) around vertex (vx, vy).
        let px = if qx > 0 { vx } else { vx - 1 };
        let py = if qy > 0 { vy } else { vy - 1 };
        inside(px, py)
    };
    let mut verts = Vec::new();
    let (mut vx, mut vy) = (sx, sy);
    let (mut dx, mut dy) = (1isize, 0isize);
    loop {
        verts.push((vx, vy));
        vx += dx;
        vy += dy;
        // left(d) = (dy, -dx); right(d) = (-dy, dx) in y-down coordinates.
        let (lx, ly) = (dy, -dx);
        let (rx, ry) = (-dy, dx);
        let ahead_left = pixel_in(dx + lx, dy + ly, vx, vy);
        let ahead_right = pixel_in(dx + rx, dy + ry, vx, vy);
        if ahead_left {
            (dx, dy) = (lx, ly);
        } else if ahead_right {
            // straight
        } else {
            (dx, dy) = (rx, ry);
        }
        if vx == sx && vy == sy && dx == 1 && dy == 0 {
            break;
        }
    }
    verts
}

fn polygon_area_centroid(verts: &[(isize, isize)]) -> (f64, f64, f64) {
    let n = verts.len();
    let mut a2 = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let (x0, y0) = (verts[i].0 as f64, verts[i].1 as f64);
        let (x1, y1) = (verts[(i + 1) % n].0 as f64, verts[(i + 1) % n].1 as f64);
        let cross = x0 * y1 - x1 * y0;
        a2 += cross;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    let area = a2 / 2.0;
    (area.abs(), cx / (3.0 * a2), cy / (3.0 * a2))
}

/// Centroid of the largest outer contour polygon of the mask.
///
/// Contours follow pixel edges of 8-connected components; holes are
/// ignored. The result can fall outside concave masks.
pub fn contour_center(m: &BinaryMask) -> Result<Point2D> {
    let (x0, y0, w, h) = m.window();
    let bits = m.window_bits();
    let comps = components8(w, h, bits);
    if comps.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for comp in &comps {
        let members: std::collections::HashSet<usize> = comp.iter().copied().collect();
        let inside = |px: isize, py: isize| -> bool {
            px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h && members.contains(&(py as usize * w + px as usize))
        };
        let verts = trace_outer_boundary(w, h, &inside, comp[0]);
        let (area, cx, cy) = polygon_area_centroid(&verts);
        if best.map_or(true, |b| area > b.0) {
            best = Some((area, cx, cy));
        }
    }
    let (_, cx, cy) = best.unwrap();
    Ok(Point2D::new(x0 as f64 + cx, y0 as f64 + cy))
}

/// Dense `channels x height x width` array sampled on a strided grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(channels: usize, height: usize, width: usize, stride: usize) -> Self {
        FeatureGrid { channels, height, width, stride, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Bilinear taps for sampling position `u` (cell index space) on an axis of
/// length `n`, clamped to the valid range.
#[inline]
fn taps(u: f64, n: usize) -> (usize, usize, f64) {
    let u = u.clamp(0.0, (n - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, u - i0 as f64)
}

fn roi_sample_positions(f: &FeatureGrid, bbox: &BoxXYXY, out: usize) -> Result<(Vec<(usize, usize, f64)>, Vec<(usize, usize, f64)>)> {
    if out == 0 {
        return Err(Error::InvalidArgument("roi output side must be >= 1".into()));
    }
    if !bbox.is_valid() || bbox.is_degenerate() {
        return Err(Error::DegenerateBox);
    }
    let img_w = (f.width * f.stride) as f64;
    let img_h = (f.height * f.stride) as f64;
    if bbox.x1 <= 0.0 || bbox.y1 <= 0.0 || bbox.x0 >= img_w || bbox.y0 >= img_h {
        return Err(Error::OutOfBounds(format!("box {:?} outside {}x{} grid", bbox.to_array(), img_w, img_h)));
    }
    let s = f.stride as f64;
    let bw = bbox.width() / out as f64;
    let bh = bbox.height() / out as f64;
    let xs = (0..out).map(|j| taps((bbox.x0 + (j as f64 + 0.5) * bw) / s - 0.5, f.width)).collect();
    let ys = (0..out).map(|i| taps((bbox.y0 + (i as f64 + 0.5) * bh) / s - 0.5, f.height)).collect();
    Ok((xs, ys))
}

/// ROI-align with one bilinear sample at the center of each output bin.
/// Output is `channels x out x out`, channel-major.
pub fn roi_align(f: &FeatureGrid, bbox: &BoxXYXY, out: usize) -> Result<Vec<f64>> {
    let (xs, ys) = roi_sample_positions(f, bbox, out)?;
    let mut result = vec![0.0; f.channels * out * out];
    let plane = f.height * f.width;
    for c in 0..f.channels {
        let p = &f.data[c * plane..(c + 1) * plane];
        for (i, &(y0, y1, ty)) in ys.iter().enumerate() {
            let r0 = &p[y0 * f.width..(y0 + 1) * f.width];
            let r1 = &p[y1 * f.width..(y1 + 1) * f.width];
            for (j, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = r0[x0] * (1.0 - tx) + r0[x1] * tx;
                let bot = r1[x0] * (1.0 - tx) + r1[x1] * tx;
                result[(c * out + i) * out + j] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Ok(result)
}

/// Accumulate the gradient of `roi_align` into `grad_f` (same layout as the grid).
pub fn roi_align_backward(f: &FeatureGrid, bbox: &BoxXYXY, out: usize, grad_out: &[f64], grad_f: &mut [f64]) -> Result<()> {
    let (xs, ys) = roi_sample_positions(f, bbox, out)?;
    let plane = f.height * f.width;
    for c in 0..f.channels {
        let g = &mut grad_f[c * plane..(c + 1) * plane];
        for (i, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (j, &(x0, x1, tx)) in xs.iter().enumerate() {
                let go = grad_out[(c * out + i) * out + j];
                if go == 0.0 {
                    continue;
                }
                g[y0 * f.width + x0] += go * (1.0 - ty) * (1.0 - tx);
                g[y0 * f.width + x1] += go * (1.0 - ty) * tx;
                g[y1 * f.width + x0] += go * ty * (1.0 - tx);
                g[y1 * f.width + x1] += go * ty * tx;
            }
        }
    }
    Ok(())
}

/// Pixel-exact crop. The box is clipped to the image and rounded outward.
pub fn crop_region(image: &RgbImage, bbox: &BoxXYXY) -> Result<RgbImage> {
    let (x0, y0, x1, y1) = integer_crop_window(image.width() as usize, image.height() as usize, bbox)?;
    Ok(image::imageops::crop_imm(image, x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32).to_image())
}

/// Integer window `(x0, y0, x1, y1)` used by [`crop_region`].
pub fn integer_crop_window(width: usize, height: usize, bbox: &BoxXYXY) -> Result<(usize, usize, usize, usize)> {
    if !bbox.is_valid() {
        return Err(Error::DegenerateBox);
    }
    let r = bbox.clip(width, height).round_outward();
    if r.is_degenerate() {
        return Err(Error::OutOfBounds(format!("box {:?} outside {}x{} image", bbox.to_array(), width, height)));
    }
    Ok((r.x0 as usize, r.y0 as usize, r.x1 as usize, r.y1 as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_mask(x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(16, 16, (x0, y0, x1, y1), |_, _| true)
    }

    #[test]
    fn iou_examples() {
        let a = BoxXYXY::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&BoxXYXY::new(0.0, 0.0, 1.0, 1.0), &BoxXYXY::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BoxXYXY::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        let z = BoxXYXY::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn contour_center_examples() {
        let r = rect_mask(2, 2, 6, 10);
        let c = contour_center(&r).unwrap();
        assert!((c.x - 4.0).abs() < 1e-12 && (c.y - 6.0).abs() < 1e-12);

        let p = BinaryMask::from_pixels(16, 16, &[(3, 7)]);
        let c = contour_center(&p).unwrap();
        assert_eq!((c.x, c.y), (3.5, 7.5));

        assert!(matches!(contour_center(&BinaryMask::empty(8, 8)), Err(Error::EmptyMask)));
    }

    #[test]
    fn contour_center_disk_within_half_pixel() {
        let m = BinaryMask::from_fn(32, 32, (0, 0, 32, 32), |x, y| {
            let dx = x as f64 + 0.5 - 10.0;
            let dy = y as f64 + 0.5 - 10.0;
            dx * dx + dy * dy <= 25.0
        });
        // Region centroid by pixel enumeration.
        let n = m.count() as f64;
        let ex = m.pixels().map(|(x, _)| x as f64 + 0.5).sum::<f64>() / n;
        let ey = m.pixels().map(|(_, y)| y as f64 + 0.5).sum::<f64>() / n;
        let c = contour_center(&m).unwrap();
        assert!((c.x - 10.0).abs() <= 0.5 && (c.y - 10.0).abs() <= 0.5);
        assert!((c.x - ex).abs() < 1e-9 && (c.y - ey).abs() < 1e-9);
    }

    #[test]
    fn contour_center_ignores_holes_and_picks_largest() {
        // Ring: outer 9x9 square with a 3x3 hole, plus a far single pixel.
        let mut px = Vec::new();
        for y in 0..9 {
            for x in 0..9 {
                if !(3..6).contains(&x) || !(3..6).contains(&y) {
                    px.push((x, y));
                }
            }
        }
        px.push((15, 15));
        let m = BinaryMask::from_pixels(16, 16, &px);
        let c = contour_center(&m).unwrap();
        assert!((c.x - 4.5).abs() < 1e-12 && (c.y - 4.5).abs() < 1e-12);
    }

    #[test]
    fn contour_center_diagonal_touch_is_one_component() {
        let m = BinaryMask::from_pixels(8, 8, &[(0, 0), (1, 1)]);
        let c = contour_center(&m).unwrap();
        assert!((c.x - 1.0).abs() < 1e-12 && (c.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_to_box_examples() {
        let p = BinaryMask::from_pixels(16, 16, &[(3, 7)]);
        assert_eq!(mask_to_box(&p).unwrap(), BoxXYXY::new(3.0, 7.0, 4.0, 8.0));
        assert_eq!(mask_to_box(&rect_mask(2, 2, 6, 10)).unwrap(), BoxXYXY::new(2.0, 2.0, 6.0, 10.0));
        let two = BinaryMask::from_pixels(16, 16, &[(1, 1), (2, 1), (10, 12)]);
        assert_eq!(mask_to_box(&two).unwrap(), BoxXYXY::new(1.0, 1.0, 11.0, 13.0));
        assert!(matches!(mask_to_box(&BinaryMask::empty(4, 4)), Err(Error::EmptyMask)));
    }

    fn ramp_grid(w: usize, h: usize, stride: usize) -> FeatureGrid {
        let mut f = FeatureGrid::zeros(1, h, w, stride);
        for y in 0..h {
            for x in 0..w {
                f.data[y * w + x] = stride as f64 * (x as f64 + 0.5);
            }
        }
        f
    }

    #[test]
    fn roi_align_constant_and_ramp() {
        let mut f = FeatureGrid::zeros(2, 8, 8, 4);
        f.data.iter_mut().for_each(|v| *v = 3.0);
        let out = roi_align(&f, &BoxXYXY::new(3.3, 5.0, 17.1, 29.0), 7).unwrap();
        assert!(out.iter().all(|&v| v == 3.0));

        let f = ramp_grid(8, 8, 1);
        let out = roi_align(&f, &BoxXYXY::new(0.0, 0.0, 8.0, 8.0), 4).unwrap();
        for i in 0..4 {
            for (j, want) in [1.0, 3.0, 5.0, 7.0].iter().enumerate() {
                assert!((out[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_align_full_grid_identity() {
        let mut f = FeatureGrid::zeros(1, 5, 5, 2);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = (i * 7 % 11) as f64;
        }
        let out = roi_align(&f, &BoxXYXY::new(0.0, 0.0, 10.0, 10.0), 5).unwrap();
        assert_eq!(out, f.data);
    }

    #[test]
    fn roi_align_errors() {
        let f = FeatureGrid::zeros(1, 4, 4, 4);
        assert!(matches!(roi_align(&f, &BoxXYXY::new(2.0, 2.0, 2.0, 5.0), 7), Err(Error::DegenerateBox)));
        assert!(matches!(roi_align(&f, &BoxXYXY::new(20.0, 0.0, 30.0, 5.0), 7), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn roi_align_backward_matches_adjoint() {
        // <roi(f), g> == <f, roi^T(g)> for random f, g.
        let mut f = FeatureGrid::zeros(2, 6, 7, 4);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = ((i * 31 % 17) as f64 - 8.0) / 5.0;
        }
        let b = BoxXYXY::new(3.1, 2.7, 21.4, 17.9);
        let out = roi_align(&f, &b, 3).unwrap();
        let g: Vec<f64> = (0..out.len()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 2.0).collect();
        let mut gf = vec![0.0; f.data.len()];
        roi_align_backward(&f, &b, 3, &g, &mut gf).unwrap();
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.data.iter().zip(&gf).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn crop_examples() {
        let mut img = RgbImage::new(8, 8);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([x as u8, y as u8, 7]);
        }
        let full = crop_region(&img, &BoxXYXY::new(0.0, 0.0, 8.0, 8.0)).unwrap();
        assert_eq!(full, img);
        let tl = crop_region(&img, &BoxXYXY::new(0.0, 0.0, 4.0, 4.0)).unwrap();
        assert_eq!((tl.width(), tl.height()), (4, 4));
        assert_eq!(tl.get_pixel(3, 3).0, [3, 3, 7]);
        assert_eq!(integer_crop_window(8, 8, &BoxXYXY::new(1.2, 1.2, 3.8, 3.8)).unwrap(), (1, 1, 4, 4));
        assert!(crop_region(&img, &BoxXYXY::new(9.0, 9.0, 12.0, 12.0)).is_err());
    }

    #[test]
    fn mask_window_roundtrip() {
        let m = BinaryMask::from_pixels(10, 10, &[(2, 3), (4, 5), (3, 3)]);
        let (x0, y0, w, h) = m.window();
        let back = BinaryMask::from_window_bits(10, 10, (x0, y0, w, h), m.window_bits().to_vec()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.count(), 3);
    }
}
