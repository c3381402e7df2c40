//! Run the pipeline over annotated scenes and score the results.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbedderBackend;
use crate::error::{Error, Result};
use crate::evaluation::{coco_thresholds, counting_metrics, detection_ap, ApResult, CountMetrics, CountRecord, GtBox, Interpolation, ScoredBox};
use crate::model::Model;
use crate::pipeline::{build_query_weights, calibrate_threshold, count_above, infer, Detection, Diagnostics, PipelineConfig, QueryInput};
use crate::synth::AnnotatedScene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Query rows from the scene's exemplar boxes.
    Few,
    /// Query row from the target class name.
    Zero,
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Protocol> {
        match s {
            "few" => Ok(Protocol::Few),
            "zero" => Ok(Protocol::Zero),
            _ => Err(Error::InvalidArgument(format!("unknown protocol {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Few => "few",
            Protocol::Zero => "zero",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub image_id: String,
    pub gt_count: usize,
    /// NMS survivors, highest score first.
    pub detections: Vec<Detection>,
    pub diagnostics: Diagnostics,
}

pub fn run_scene(model: &Model, embedder: &dyn EmbedderBackend, scene: &AnnotatedScene, protocol: Protocol, cfg: &PipelineConfig) -> Result<SceneResult> {
    let exemplars = scene.exemplar_boxes();
    let ids = [scene.target_class];
    let input = match protocol {
        Protocol::Few => QueryInput::Exemplars { image: &scene.image, boxes: &exemplars, class_id: scene.target_class },
        Protocol::Zero => QueryInput::Names(&ids),
    };
    let w = build_query_weights(input, embedder)?;
    let backend = scene.oracle()?;
    let out = infer(&scene.image, &w, model, &backend, cfg)?;
    Ok(SceneResult { image_id: scene.id.clone(), gt_count: scene.gt_count(), detections: out.detections, diagnostics: out.diagnostics })
}

/// Results for every scene, sorted by image id.
pub fn run_split(model: &Model, embedder: &dyn EmbedderBackend, scenes: &[AnnotatedScene], protocol: Protocol, cfg: &PipelineConfig) -> Result<Vec<SceneResult>> {
    let mut out = scenes
        .par_iter()
        .map(|s| run_scene(model, embedder, s, protocol, cfg))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(out)
}

/// Count threshold minimizing NAE over `results`.
pub fn calibrate(results: &[SceneResult]) -> Result<f64> {
    let samples: Vec<(Vec<f64>, usize)> = results.iter().map(|r| (r.detections.iter().map(|d| d.score).collect(), r.gt_count)).collect();
    calibrate_threshold(&samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchMetrics {
    pub protocol: Protocol,
    pub threshold: f64,
    pub counting: CountMetrics,
    pub detection: ApResult,
    pub avg_candidate_points: f64,
    pub max_candidate_points: usize,
    pub scenes: usize,
}

/// Counting metrics at `threshold` and box AP over all NMS survivors
/// against the target instances of each scene.
pub fn summarize(results: &[SceneResult], scenes: &[AnnotatedScene], protocol: Protocol, threshold: f64, interp: Interpolation) -> Result<BenchMetrics> {
    let records: Vec<CountRecord> = results
        .iter()
        .map(|r| CountRecord { image_id: r.image_id.clone(), y: r.gt_count, y_hat: count_above(&r.detections, threshold) })
        .collect();
    let counting = counting_metrics(&records)?;
    let mut gts = Vec::new();
    for s in scenes {
        for i in s.targets() {
            gts.push(GtBox { image_id: s.id.clone(), bbox: i.bbox, class_id: i.class_id });
        }
    }
    let dets: Vec<ScoredBox> = results
        .iter()
        .flat_map(|r| {
            r.detections.iter().map(|d| ScoredBox { image_id: r.image_id.clone(), bbox: d.bbox, class_id: d.class_id, score: d.score })
        })
        .collect();
    let detection = detection_ap(&dets, &gts, &coco_thresholds(), interp)?;
    let cands: Vec<usize> = results.iter().map(|r| r.diagnostics.candidate_points).collect();
    Ok(BenchMetrics {
        protocol,
        threshold,
        counting,
        detection,
        avg_candidate_points: cands.iter().sum::<usize>() as f64 / cands.len().max(1) as f64,
        max_candidate_points: cands.iter().copied().max().unwrap_or(0),
        scenes: results.len(),
    })
}
