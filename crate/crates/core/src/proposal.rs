//! Point prompts to hierarchical mask proposals.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mask_to_box, BinaryMask, BoxXYXY, Point2D};
use crate::heatmap::{KeypointSet, PointSource};
use crate::rle::RleMask;

/// Proposals per prompt group: three point-prompt levels plus one box prompt.
pub const M: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Whole,
    Part,
    Subpart,
    BoxPrompt,
}

impl Level {
    pub const ALL: [Level; M] = [Level::Whole, Level::Part, Level::Subpart, Level::BoxPrompt];

    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Whole => "whole",
            Level::Part => "part",
            Level::Subpart => "subpart",
            Level::BoxPrompt => "boxprompt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskProposal {
    pub mask: BinaryMask,
    /// Tight box of `mask`; all zeros when the mask is empty.
    pub bbox: BoxXYXY,
    pub prompt_group: usize,
    pub level: Level,
    pub backend_score: f64,
}

impl MaskProposal {
    pub fn new(mask: BinaryMask, prompt_group: usize, level: Level, backend_score: f64) -> Self {
        let bbox = mask_to_box(&mask).unwrap_or(BoxXYXY::new(0.0, 0.0, 0.0, 0.0));
        MaskProposal { mask, bbox, prompt_group, level, backend_score }
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptGroup {
    pub id: usize,
    pub point: Point2D,
    /// Always `M` entries, ordered as [`Level::ALL`]; failed prompts carry empty masks.
    pub proposals: Vec<MaskProposal>,
}

impl PromptGroup {
    /// True when no proposal has any pixels.
    pub fn is_empty(&self) -> bool {
        self.proposals.iter().all(|p| p.is_empty())
    }

    /// True when every proposal is non-empty.
    pub fn is_full(&self) -> bool {
        self.proposals.len() == M && self.proposals.iter().all(|p| !p.is_empty())
    }

    pub fn boxes(&self) -> Vec<BoxXYXY> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub point_prompts: bool,
    pub box_prompts: bool,
    pub masks_per_point: usize,
}

/// A promptable segmenter. For every point it returns `M` masks ordered as
/// [`Level::ALL`], the last one answering a square box prompt of side
/// `box_size` centered on the point.
pub trait SegmenterBackend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;
    fn segment(&self, image: &RgbImage, points: &[Point2D], box_size: f64) -> Vec<Result<[BinaryMask; M]>>;
}

/// `n x n` points at the cell centers of a uniform partition, row-major.
pub fn grid_prompts(n: usize, width: usize, height: usize) -> Result<KeypointSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("grid side must be >= 1".into()));
    }
    let mut pts = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            pts.push(Point2D::new((i as f64 + 0.5) * width as f64 / n as f64, (j as f64 + 0.5) * height as f64 / n as f64));
        }
    }
    Ok(KeypointSet::from_points(pts, PointSource::Grid))
}

/// One prompt group per input point, in input order. Duplicate points give
/// duplicate groups; removing them is left to NMS.
pub fn segment_at_points(backend: &dyn SegmenterBackend, image: &RgbImage, points: &KeypointSet, box_size: f64) -> Vec<PromptGroup> {
    let results = backend.segment(image, &points.points, box_size);
    let (w, h) = (image.width() as usize, image.height() as usize);
    points
        .points
        .iter()
        .zip(results)
        .enumerate()
        .map(|(id, (p, res))| {
            let masks = match res {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("segmenter failed at ({:.1}, {:.1}): {e}", p.x, p.y);
                    std::array::from_fn(|_| BinaryMask::empty(w, h))
                }
            };
            let proposals = masks
                .into_iter()
                .zip(Level::ALL)
                .map(|(m, level)| {
                    let score = if m.is_empty() { 0.0 } else { 1.0 };
                    MaskProposal::new(m, id, level, score)
                })
                .collect();
            PromptGroup { id, point: *p, proposals }
        })
        .collect()
}

/// Answers prompts from ground-truth instance masks.
#[derive(Clone, Debug)]
pub struct OracleBackend {
    width: usize,
    height: usize,
    masks: Vec<BinaryMask>,
    boxes: Vec<BoxXYXY>,
    /// Per pixel: instance index + 1, or 0 for background.
    label: Vec<u32>,
    pub part_scale: f64,
    pub subpart_scale: f64,
}

impl OracleBackend {
    /// Instance masks must not overlap; on overlap the later instance wins
    /// the shared pixels for point lookups.
    pub fn new(width: usize, height: usize, masks: Vec<BinaryMask>) -> Result<Self> {
        let mut label = vec![0u32; width * height];
        let mut boxes = Vec::with_capacity(masks.len());
        for (i, m) in masks.iter().enumerate() {
            if m.image_dims() != (width, height) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{width}x{height} mask"),
                    got: format!("{:?}", m.image_dims()),
                });
            }
            boxes.push(mask_to_box(m)?);
            for (x, y) in m.pixels() {
                label[y * width + x] = i as u32 + 1;
            }
        }
        Ok(OracleBackend { width, height, masks, boxes, label, part_scale: 0.6, subpart_scale: 0.3 })
    }

    pub fn instance_at(&self, p: &Point2D) -> Option<usize> {
        if !(p.x >= 0.0 && p.y >= 0.0) {
            return None;
        }
        let (x, y) = (p.x.floor() as usize, p.y.floor() as usize);
        if x >= self.width || y >= self.height {
            return None;
        }
        let l = self.label[y * self.width + x];
        (l > 0).then(|| l as usize - 1)
    }

    /// Integer concentric box of the given scale inside instance `i`'s box.
    fn scaled_box(&self, i: usize, scale: f64) -> (usize, usize, usize, usize) {
        let b = &self.boxes[i];
        let (x0, y0, w, h) = (b.x0 as usize, b.y0 as usize, b.width() as usize, b.height() as usize);
        let sw = ((w as f64 * scale).floor() as usize).max(1);
        let sh = ((h as f64 * scale).floor() as usize).max(1);
        let ox = x0 + (w - sw) / 2;
        let oy = y0 + (h - sh) / 2;
        (ox, oy, ox + sw, oy + sh)
    }

    /// `m` restricted to `window`; if that is empty, the pixel of `m` nearest
    /// to the window center (first in raster order on ties).
    fn restrict_or_nearest(m: &BinaryMask, window: (usize, usize, usize, usize)) -> BinaryMask {
        let r = m.restrict(window.0, window.1, window.2, window.3);
        if !r.is_empty() {
            return r;
        }
        let cx = (window.0 + window.2) as f64 / 2.0;
        let cy = (window.1 + window.3) as f64 / 2.0;
        let mut best: Option<((usize, usize), f64)> = None;
        for (x, y) in m.pixels() {
            let d = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some(((x, y), d));
            }
        }
        let (w, h) = m.image_dims();
        match best {
            Some((p, _)) => BinaryMask::from_pixels(w, h, &[p]),
            None => BinaryMask::empty(w, h),
        }
    }

    pub fn hierarchy(&self, i: usize) -> [BinaryMask; 3] {
        let whole = self.masks[i].clone();
        let part = Self::restrict_or_nearest(&whole, self.scaled_box(i, self.part_scale));
        let sub = Self::restrict_or_nearest(&part, self.scaled_box(i, self.subpart_scale));
        [whole, part, sub]
    }

    /// Instance with the largest pixel overlap with the box prompt; ties go
    /// to the instance whose box center is nearest the prompt, then to the
    /// lowest index.
    pub fn box_prompt(&self, p: &Point2D, size: f64) -> Option<usize> {
        let half = size / 2.0;
        let x0 = (p.x - half).round().max(0.0) as usize;
        let y0 = (p.y - half).round().max(0.0) as usize;
        let x1 = ((p.x + half).round().max(0.0) as usize).min(self.width);
        let y1 = ((p.y + half).round().max(0.0) as usize).min(self.height);
        let mut overlap: HashMap<usize, usize> = HashMap::new();
        for y in y0..y1 {
            for x in x0..x1 {
                let l = self.label[y * self.width + x];
                if l > 0 {
                    *overlap.entry(l as usize - 1).or_default() += 1;
                }
            }
        }
        let mut cands: Vec<(usize, usize)> = overlap.into_iter().collect();
        cands.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then_with(|| {
                    let da = self.boxes[a.0].center().distance(p);
                    let db = self.boxes[b.0].center().distance(p);
                    da.total_cmp(&db)
                })
                .then(a.0.cmp(&b.0))
        });
        cands.first().map(|c| c.0)
    }
}

impl SegmenterBackend for OracleBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { point_prompts: true, box_prompts: true, masks_per_point: 3 }
    }

    fn segment(&self, _image: &RgbImage, points: &[Point2D], box_size: f64) -> Vec<Result<[BinaryMask; M]>> {
        points
            .iter()
            .map(|p| {
                let empty = || BinaryMask::empty(self.width, self.height);
                let [whole, part, sub] = match self.instance_at(p) {
                    Some(i) => self.hierarchy(i),
                    None => [empty(), empty(), empty()],
                };
                let bp = self.box_prompt(p, box_size).map_or_else(empty, |i| self.masks[i].clone());
                Ok([whole, part, sub, bp])
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayGroup {
    pub point: [f64; 2],
    /// `M` masks in level order; `null` marks an empty proposal.
    pub masks: Vec<Option<RleMask>>,
}

/// Precomputed proposals for one image, e.g. dumped from a real segmenter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayFile {
    pub width: usize,
    pub height: usize,
    pub groups: Vec<ReplayGroup>,
}

/// Serves proposals loaded from a [`ReplayFile`], matched by point
/// coordinates (to 1e-3 px).
#[derive(Clone, Debug)]
pub struct ReplayBackend {
    width: usize,
    height: usize,
    table: HashMap<(i64, i64), [BinaryMask; M]>,
}

fn point_key(p: &Point2D) -> (i64, i64) {
    ((p.x * 1000.0).round() as i64, (p.y * 1000.0).round() as i64)
}

impl ReplayBackend {
    pub fn from_file_data(file: &ReplayFile) -> Result<Self> {
        let mut table = HashMap::new();
        for g in &file.groups {
            if g.masks.len() != M {
                return Err(Error::GroupSize { expected: M, got: g.masks.len() });
            }
            let mut masks = Vec::with_capacity(M);
            for m in &g.masks {
                masks.push(match m {
                    Some(r) => r.decode(file.width, file.height)?,
                    None => BinaryMask::empty(file.width, file.height),
                });
            }
            let arr: [BinaryMask; M] = masks.try_into().unwrap();
            table.insert(point_key(&Point2D::new(g.point[0], g.point[1])), arr);
        }
        Ok(ReplayBackend { width: file.width, height: file.height, table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ReplayFile = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        Self::from_file_data(&file)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl SegmenterBackend for ReplayBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { point_prompts: true, box_prompts: true, masks_per_point: 3 }
    }

    fn segment(&self, _image: &RgbImage, points: &[Point2D], _box_size: f64) -> Vec<Result<[BinaryMask; M]>> {
        points
            .iter()
            .map(|p| {
                self.table
                    .get(&point_key(p))
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("no replayed proposals at ({}, {})", p.x, p.y)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn square(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, (x0, y0, x0 + side, y0 + side), |_, _| true)
    }

    #[test]
    fn grid_examples() {
        let g = grid_prompts(1, 256, 256).unwrap();
        assert_eq!(g.points, vec![Point2D::new(128.0, 128.0)]);
        assert_eq!(grid_prompts(32, 256, 256).unwrap().len(), 1024);
        let g = grid_prompts(2, 256, 256).unwrap();
        let want = [(64.0, 64.0), (192.0, 64.0), (64.0, 192.0), (192.0, 192.0)];
        for (p, w) in g.points.iter().zip(want) {
            assert_eq!((p.x, p.y), w);
        }
        assert!(grid_prompts(0, 8, 8).is_err());
    }

    #[test]
    fn oracle_hierarchy_of_square() {
        let m = square(64, 64, 10, 10, 20);
        let o = OracleBackend::new(64, 64, vec![m.clone()]).unwrap();
        let img = RgbImage::new(64, 64);
        let groups = segment_at_points(&o, &img, &KeypointSet::from_points(vec![Point2D::new(20.5, 20.5)], PointSource::Peak), 16.0);
        let g = &groups[0];
        assert_eq!(g.proposals.len(), M);
        assert_eq!(g.proposals[0].mask, m);
        assert!(g.proposals[2].mask.is_subset_of(&g.proposals[1].mask));
        assert!(g.proposals[1].mask.is_subset_of(&g.proposals[0].mask));
        assert!((iou(&g.proposals[0].bbox, &g.proposals[1].bbox) - 0.36).abs() < 1e-12);
        assert_eq!(g.proposals[3].mask, m);
        for p in &g.proposals {
            assert_eq!(mask_to_box(&p.mask).unwrap(), p.bbox);
        }
    }

    #[test]
    fn background_point_and_box_prompt_rescue() {
        let big = square(64, 64, 0, 0, 3);
        let tiny = square(64, 64, 30, 30, 3);
        let o = OracleBackend::new(64, 64, vec![big, tiny.clone()]).unwrap();
        let img = RgbImage::new(64, 64);
        let pts = KeypointSet::from_points(vec![Point2D::new(36.0, 36.0), Point2D::new(60.0, 2.0)], PointSource::Grid);
        let groups = segment_at_points(&o, &img, &pts, 16.0);
        assert!(groups[0].proposals[..3].iter().all(|p| p.is_empty()));
        assert_eq!(groups[0].proposals[3].mask, tiny);
        assert!(groups[1].is_empty());
    }

    #[test]
    fn replay_round_trip() {
        let m = square(16, 16, 2, 2, 4);
        let file = ReplayFile {
            width: 16,
            height: 16,
            groups: vec![ReplayGroup {
                point: [3.5, 3.5],
                masks: vec![Some(RleMask::encode(&m)), None, None, Some(RleMask::encode(&m))],
            }],
        };
        let b = ReplayBackend::from_file_data(&file).unwrap();
        let img = RgbImage::new(16, 16);
        let pts = KeypointSet::from_points(vec![Point2D::new(3.5, 3.5), Point2D::new(9.0, 9.0)], PointSource::Peak);
        let groups = segment_at_points(&b, &img, &pts, 16.0);
        assert_eq!(groups[0].proposals[0].mask, m);
        assert!(groups[0].proposals[1].is_empty());
        assert!(groups[1].is_empty());
    }
}
