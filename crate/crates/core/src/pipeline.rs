//! End-to-end inference: point, segment, classify, suppress, count.

use std::collections::HashMap;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::classification::{QueryMode, QueryWeights};
use crate::embed::EmbedderBackend;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY, FeatureGrid};
use crate::heatmap::{extract_peaks, peaks_to_image_coords, Heatmap, KeypointSet};
use crate::model::Model;
use crate::proposal::{grid_prompts, segment_at_points, Level, PromptGroup, SegmenterBackend};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Heatmap,
    Grid,
}

impl PromptMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "heatmap" => Ok(PromptMode::Heatmap),
            "grid" => Ok(PromptMode::Grid),
            _ => Err(Error::InvalidArgument(format!("unknown prompt mode {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptMode::Heatmap => "heatmap",
            PromptMode::Grid => "grid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Maximum number of heatmap peaks used as prompts.
    pub k: usize,
    /// Heatmap peak threshold.
    pub tau: f64,
    pub nms_iou: f64,
    /// Detections scoring strictly above this are counted.
    pub count_threshold: f64,
    pub mode: PromptMode,
    pub grid_n: usize,
    pub box_size: f64,
    /// Run NMS separately per class instead of over all proposals.
    pub per_class_nms: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 1000,
            tau: 0.05,
            nms_iou: 0.5,
            count_threshold: 0.5,
            mode: PromptMode::Heatmap,
            grid_n: 32,
            box_size: 16.0,
            per_class_nms: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.k == 0 || !unit(self.tau) || !unit(self.nms_iou) || !unit(self.count_threshold) || self.grid_n == 0 || !(self.box_size > 0.0) {
            return Err(Error::Config(format!("invalid pipeline config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxXYXY,
    pub class_id: u32,
    pub score: f64,
    pub prompt_group: usize,
    pub level: Level,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub encode_ms: f64,
    pub prompts_ms: f64,
    pub segment_ms: f64,
    pub classify_ms: f64,
    pub nms_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub candidate_points: usize,
    pub prompt_groups: usize,
    pub empty_groups: usize,
    pub proposals: usize,
    pub unique_boxes: usize,
    pub after_nms: usize,
    pub counted: usize,
    pub timings: StageTimings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    /// NMS survivors sorted by descending score.
    pub detections: Vec<Detection>,
    pub count: usize,
    pub diagnostics: Diagnostics,
    pub heatmap: Option<Heatmap>,
    pub prompts: KeypointSet,
}

/// Greedy non-maximum suppression. Boxes are visited by descending score
/// (input order on ties); a box is dropped when its IoU with any kept box
/// exceeds `thresh`. Returns kept indices in visiting order.
pub fn nms(boxes: &[BoxXYXY], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len().min(scores.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

pub enum QueryInput<'a> {
    /// Exemplar boxes drawn on `image`, all of class `class_id`.
    Exemplars { image: &'a RgbImage, boxes: &'a [BoxXYXY], class_id: u32 },
    Names(&'a [u32]),
}

pub fn build_query_weights(input: QueryInput<'_>, embedder: &dyn EmbedderBackend) -> Result<QueryWeights> {
    match input {
        QueryInput::Exemplars { image, boxes, class_id } => {
            if boxes.is_empty() {
                return Err(Error::InvalidArgument("few-shot mode needs at least one exemplar box".into()));
            }
            let mut w = QueryWeights::new(QueryMode::Image);
            for b in boxes {
                w.push(embedder.embed_region(image, b)?, class_id)?;
            }
            Ok(w)
        }
        QueryInput::Names(ids) => {
            if ids.is_empty() {
                return Err(Error::InvalidArgument("zero-shot mode needs at least one class".into()));
            }
            let mut w = QueryWeights::new(QueryMode::Name);
            for &c in ids {
                w.push(embedder.embed_name(c)?, c)?;
            }
            Ok(w)
        }
    }
}

/// Heatmap peaks (at most `k`, above `tau`) in image coordinates.
pub fn heatmap_prompts(model: &Model, features: &FeatureGrid, cfg: &PipelineConfig) -> Result<(KeypointSet, Heatmap)> {
    let h = model.predict_heatmap(features)?;
    let peaks = extract_peaks(&h, cfg.k, cfg.tau);
    Ok((peaks_to_image_coords(&peaks, h.stride), h))
}

/// Score every distinct non-empty proposal box. Empty groups are dropped;
/// a box shared by several proposals keeps the first one's group and level.
pub fn classify_groups(model: &Model, features: &FeatureGrid, groups: &[PromptGroup], w: &QueryWeights) -> (Vec<Detection>, usize, usize) {
    let mut seen: HashMap<[u64; 4], ()> = HashMap::new();
    let mut cands: Vec<(BoxXYXY, usize, Level)> = Vec::new();
    let mut n_props = 0;
    for g in groups.iter().filter(|g| !g.is_empty()) {
        for p in g.proposals.iter().filter(|p| !p.is_empty()) {
            n_props += 1;
            let key = p.bbox.to_array().map(f64::to_bits);
            if seen.insert(key, ()).is_none() {
                cands.push((p.bbox, g.id, p.level));
            }
        }
    }
    let boxes: Vec<BoxXYXY> = cands.iter().map(|c| c.0).collect();
    let feats = model.region_features(features, &boxes);
    let scale = model.logit_scale();
    let mut dets = Vec::with_capacity(cands.len());
    for ((bbox, group, level), r) in cands.iter().zip(feats) {
        let Some(r) = r else { continue };
        let best = w
            .class_scores(&r, scale)
            .into_iter()
            .fold(None::<(u32, f64)>, |acc, (c, s)| match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((c, s)),
            });
        if let Some((class_id, score)) = best {
            dets.push(Detection { bbox: *bbox, class_id, score, prompt_group: *group, level: *level });
        }
    }
    let n_unique = cands.len();
    (dets, n_props, n_unique)
}

fn suppress(dets: Vec<Detection>, cfg: &PipelineConfig) -> Vec<Detection> {
    let keep = |ds: &[&Detection]| -> Vec<usize> {
        let boxes: Vec<BoxXYXY> = ds.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = ds.iter().map(|d| d.score).collect();
        nms(&boxes, &scores, cfg.nms_iou)
    };
    let mut out: Vec<Detection> = if cfg.per_class_nms {
        let mut classes: Vec<u32> = dets.iter().map(|d| d.class_id).collect();
        classes.sort();
        classes.dedup();
        let mut v = Vec::new();
        for c in classes {
            let ds: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
            v.extend(keep(&ds).into_iter().map(|i| ds[i].clone()));
        }
        v
    } else {
        let ds: Vec<&Detection> = dets.iter().collect();
        keep(&ds).into_iter().map(|i| ds[i].clone()).collect()
    };
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Run the pipeline with the configured prompt mode.
pub fn infer(image: &RgbImage, w: &QueryWeights, model: &Model, backend: &dyn SegmenterBackend, cfg: &PipelineConfig) -> Result<InferenceOutput> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::InvalidArgument("empty query weights".into()));
    }
    let mut diag = Diagnostics::default();
    let t = Instant::now();
    let features = model.toy_encode(image);
    diag.timings.encode_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let (prompts, heatmap) = match cfg.mode {
        PromptMode::Heatmap => {
            let (p, h) = heatmap_prompts(model, &features, cfg)?;
            (p, Some(h))
        }
        PromptMode::Grid => (grid_prompts(cfg.grid_n, image.width() as usize, image.height() as usize)?, None),
    };
    diag.timings.prompts_ms = t.elapsed().as_secs_f64() * 1e3;
    diag.candidate_points = prompts.len();

    let t = Instant::now();
    let groups = segment_at_points(backend, image, &prompts, cfg.box_size);
    diag.timings.segment_ms = t.elapsed().as_secs_f64() * 1e3;
    diag.prompt_groups = groups.len();
    diag.empty_groups = groups.iter().filter(|g| g.is_empty()).count();

    let t = Instant::now();
    let (dets, n_props, n_unique) = classify_groups(model, &features, &groups, w);
    diag.timings.classify_ms = t.elapsed().as_secs_f64() * 1e3;
    diag.proposals = n_props;
    diag.unique_boxes = n_unique;

    let t = Instant::now();
    let detections = suppress(dets, cfg);
    diag.timings.nms_ms = t.elapsed().as_secs_f64() * 1e3;
    diag.after_nms = detections.len();
    let count = count_above(&detections, cfg.count_threshold);
    diag.counted = count;
    Ok(InferenceOutput { detections, count, diagnostics: diag, heatmap, prompts })
}

/// Same as [`infer`] with prompts from a uniform `grid_n x grid_n` grid.
pub fn infer_grid_baseline(image: &RgbImage, w: &QueryWeights, model: &Model, backend: &dyn SegmenterBackend, cfg: &PipelineConfig) -> Result<InferenceOutput> {
    let cfg = PipelineConfig { mode: PromptMode::Grid, ..cfg.clone() };
    infer(image, w, model, backend, &cfg)
}

pub fn count_above(dets: &[Detection], threshold: f64) -> usize {
    dets.iter().filter(|d| d.score > threshold).count()
}

/// Choose the count threshold minimizing mean normalized absolute error
/// over `(scores, gt_count)` pairs. Candidates are midpoints between
/// consecutive distinct scores (plus the extremes); ties go to the lowest
/// candidate.
pub fn calibrate_threshold(samples: &[(Vec<f64>, usize)]) -> Result<f64> {
    let mut all: Vec<f64> = samples.iter().flat_map(|s| s.0.iter().copied()).collect();
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no calibration samples".into()));
    }
    all.sort_by(|a, b| a.total_cmp(b));
    all.dedup();
    let mut cands = vec![0.0];
    for w in all.windows(2) {
        cands.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    if let Some(&last) = all.last() {
        cands.push(last);
    }
    let sorted: Vec<(Vec<f64>, usize)> = samples
        .iter()
        .map(|(s, y)| {
            let mut s = s.clone();
            s.sort_by(|a, b| a.total_cmp(b));
            (s, *y)
        })
        .collect();
    let mut best = (f64::INFINITY, 0.5);
    for &t in &cands {
        let mut err = 0.0;
        for (s, y) in &sorted {
            let above = s.len() - s.partition_point(|&v| v <= t);
            err += (above as f64 - *y as f64).abs() / (*y).max(1) as f64;
        }
        if err < best.0 {
            best = (err, t);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nms_examples() {
        let a = BoxXYXY::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a], &[0.3], 0.5), vec![0]);
        assert_eq!(nms(&[a, a], &[0.8, 0.9], 0.5), vec![1]);
        let b = BoxXYXY::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(nms(&[a, b], &[0.8, 0.9], 0.5), vec![1, 0]);
        assert_eq!(nms(&[a, a], &[0.5, 0.5], 0.5), vec![0]);
    }

    #[test]
    fn calibration_picks_separating_threshold() {
        let s = vec![(vec![0.9, 0.8, 0.2], 2), (vec![0.95, 0.1], 1)];
        let t = calibrate_threshold(&s).unwrap();
        assert!(t > 0.2 && t < 0.8);
    }
}
