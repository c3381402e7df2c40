//! Class-agnostic keypoint heatmaps: target splatting, the point loss, and
//! peak extraction.
//!
//! Cell `(x, y)` of a stride-`s` heatmap is anchored at the image position
//! `(s * (x + 0.5), s * (y + 0.5))`, the same cell-center convention used by
//! [`peaks_to_image_coords`], so a keypoint placed on a cell center is
//! recovered exactly.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2D;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(height: usize, width: usize, stride: usize) -> Self {
        Heatmap { height, width, stride, data: vec![0.0; height * width] }
    }

    /// Heatmap covering an image of the given size (dimensions rounded up).
    pub fn for_image(img_w: usize, img_h: usize, stride: usize) -> Self {
        Heatmap::zeros(img_h.div_ceil(stride), img_w.div_ceil(stride), stride)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Image-space anchor of cell `(x, y)`.
    pub fn cell_center(&self, x: usize, y: usize) -> Point2D {
        let s = self.stride as f64;
        Point2D::new(s * (x as f64 + 0.5), s * (y as f64 + 0.5))
    }

    /// Portable dump: magic `HMAP`, then `u32` height, width, stride, then
    /// row-major `f32` values, all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"HMAP")?;
        for v in [self.height, self.width, self.stride] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"HMAP" {
            return Err(Error::InvalidArgument("not a heatmap dump".into()));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let mut data = Vec::with_capacity(dims[0] * dims[1]);
        for _ in 0..dims[0] * dims[1] {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        Ok(Heatmap { height: dims[0], width: dims[1], stride: dims[2], data })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    GroundTruth,
    OracleCenter,
    Peak,
    Grid,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Point2D>,
    pub sources: Vec<PointSource>,
}

impl KeypointSet {
    pub fn from_points(points: Vec<Point2D>, source: PointSource) -> Self {
        let sources = vec![source; points.len()];
        KeypointSet { points, sources }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Concatenate oracle contour centers and ground-truth points. Duplicates
/// are kept; splatting resolves them by element-wise max.
pub fn build_target_points(oracle_centers: &KeypointSet, gt_points: &KeypointSet) -> KeypointSet {
    let mut out = oracle_centers.clone();
    out.points.extend_from_slice(&gt_points.points);
    out.sources.extend_from_slice(&gt_points.sources);
    out
}

/// Gaussian kernel value of keypoint `p` at cell `(x, y)`.
#[inline]
pub fn kernel_value(p: &Point2D, x: usize, y: usize, stride: usize, sigma: f64) -> f64 {
    let s = stride as f64;
    let dx = s * (x as f64 + 0.5) - p.x;
    let dy = s * (y as f64 + 0.5) - p.y;
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Splat keypoints into a `height x width` heatmap, combining overlapping
/// Gaussians by element-wise maximum.
pub fn splat_targets(points: &KeypointSet, height: usize, width: usize, stride: usize, sigma: f64) -> Result<Heatmap> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let mut h = Heatmap::zeros(height, width, stride);
    // Beyond 8 sigma the kernel is below 1.3e-14.
    let radius = 8.0 * sigma;
    let s = stride as f64;
    for p in &points.points {
        let cx0 = ((p.x - radius) / s - 0.5).floor().max(0.0) as usize;
        let cy0 = ((p.y - radius) / s - 0.5).floor().max(0.0) as usize;
        let cx1 = (((p.x + radius) / s - 0.5).ceil() + 1.0).clamp(0.0, width as f64) as usize;
        let cy1 = (((p.y + radius) / s - 0.5).ceil() + 1.0).clamp(0.0, height as f64) as usize;
        for y in cy0..cy1.min(height) {
            for x in cx0..cx1.min(width) {
                let v = kernel_value(p, x, y, stride, sigma);
                let cell = &mut h.data[y * width + x];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Ok(h)
}

/// Mean squared error over cells and its gradient with respect to `pred`.
pub fn point_loss(pred: &Heatmap, target: &Heatmap) -> Result<(f64, Vec<f64>)> {
    if pred.height != target.height || pred.width != target.width {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", target.height, target.width),
            got: format!("{}x{}", pred.height, pred.width),
        });
    }
    let n = pred.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.data.len());
    for (p, t) in pred.data.iter().zip(&target.data) {
        let d = p - t;
        loss += d * d;
        grad.push(2.0 * d / n);
    }
    Ok((loss / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Local maxima of a 3x3 max-pool (ties kept) strictly above `threshold`,
/// sorted by score descending (raster order on ties), truncated to `k`.
pub fn extract_peaks(h: &Heatmap, k: usize, threshold: f64) -> Vec<Peak> {
    let mut peaks = Vec::new();
    for y in 0..h.height {
        for x in 0..h.width {
            let v = h.at(x, y);
            if !(v > threshold) {
                continue;
            }
            let mut is_max = true;
            'nb: for ny in y.saturating_sub(1)..(y + 2).min(h.height) {
                for nx in x.saturating_sub(1)..(x + 2).min(h.width) {
                    if h.at(nx, ny) > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push(Peak { x, y, score: v });
            }
        }
    }
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    peaks.truncate(k);
    peaks
}

/// Image-space cell centers of the peaks; no sub-cell refinement.
pub fn peaks_to_image_coords(peaks: &[Peak], stride: usize) -> KeypointSet {
    let s = stride as f64;
    let pts = peaks
        .iter()
        .map(|p| Point2D::new(s * p.x as f64 + s / 2.0, s * p.y as f64 + s / 2.0))
        .collect();
    KeypointSet::from_points(pts, PointSource::Peak)
}

/// Group peaks that are 8-adjacent and share the same score (plateau ties)
/// and keep one representative per group, the first in input order.
pub fn dedup_tied_peaks(peaks: &[Peak]) -> Vec<Peak> {
    let n = peaks.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut c = i;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&peaks[i], &peaks[j]);
            if a.score == b.score && a.x.abs_diff(b.x) <= 1 && a.y.abs_diff(b.y) <= 1 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).map(|i| peaks[i]).collect()
}
