//! Training: scene preparation, the joint objective and its gradient, and
//! the Adam loop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classification::{cls_loss, kd_group_loss, match_proposals_to_gt, sample_training_batch, SamplerConfig, TrainingBatch};
use crate::embed::EmbedderBackend;
use crate::error::{Error, Result};
use crate::geometry::{contour_center, BoxXYXY, FeatureGrid, Point2D};
use crate::heatmap::{build_target_points, point_loss, splat_targets, Heatmap, KeypointSet, PointSource};
use crate::model::{image_to_input, Model};
use crate::nn::{AdamConfig, AdamState, ParamSet};
use crate::proposal::{grid_prompts, segment_at_points, M};
use crate::synth::{pseudo_boxes_for, sha256_hex, AnnotatedScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Encoder, heatmap head and region head together.
    Joint,
    /// Encoder and heatmap head only.
    Point,
    /// Region head only, on a frozen encoder.
    Cls,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "joint" => Ok(Stage::Joint),
            "point" => Ok(Stage::Point),
            "cls" => Ok(Stage::Cls),
            _ => Err(Error::InvalidArgument(format!("unknown stage {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Joint => "joint",
            Stage::Point => "point",
            Stage::Cls => "cls",
        }
    }

    /// Parameter name prefixes updated in this stage.
    pub fn trainable(&self) -> &'static [&'static str] {
        match self {
            Stage::Joint => &["enc.", "point.", "cls."],
            Stage::Point => &["enc.", "point."],
            Stage::Cls => &["cls."],
        }
    }

    fn uses_point(&self) -> bool {
        *self != Stage::Cls
    }

    fn uses_regions(&self) -> bool {
        *self != Stage::Point
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub point: f64,
    pub cls: f64,
    pub kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { point: 30.0, cls: 1.0, kd: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    /// Scenes per step.
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub sampler: SamplerConfig,
    /// Gaussian width of heatmap targets, in pixels.
    pub sigma: f64,
    /// Side of the prompt grid whose whole-level oracle masks contribute
    /// contour centers to the heatmap targets.
    pub target_grid: usize,
    pub box_size: f64,
    pub match_iou: f64,
    /// Learning rate at the last step as a fraction of `adam.lr`, reached by
    /// cosine decay. 1.0 keeps the rate constant.
    pub lr_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Joint,
            steps: 2000,
            batch: 4,
            seed: 7,
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            weights: LossWeights::default(),
            sampler: SamplerConfig::default(),
            sigma: 2.0,
            target_grid: 32,
            box_size: 16.0,
            match_iou: 0.5,
            lr_floor: 0.05,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for the update at `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        let f = self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.adam.lr * f
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let ok = self.batch >= 1
            && self.adam.lr > 0.0
            && (0.0..1.0).contains(&self.adam.beta1)
            && (0.0..1.0).contains(&self.adam.beta2)
            && [w.point, w.cls, w.kd].iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.sigma > 0.0
            && self.target_grid >= 1
            && self.box_size > 0.0
            && (0.0..=1.0).contains(&self.match_iou)
            && (0.0..=1.0).contains(&self.lr_floor)
            && self.sampler.proposals >= 1
            && (0.0..=1.0).contains(&self.sampler.positive_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

/// Everything one training scene needs, computed once before the loop.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub id: String,
    pub input: FeatureGrid,
    pub target: Heatmap,
    /// Distinct non-empty proposal boxes and their label vectors.
    pub boxes: Vec<BoxXYXY>,
    pub labels: Vec<Vec<f64>>,
    /// Boxes of every prompt group whose `M` proposals are all non-empty.
    pub groups: Vec<[BoxXYXY; M]>,
    /// Embedder outputs for each group's boxes.
    pub w_prime: Vec<Vec<Vec<f64>>>,
}

/// Heatmap target keypoints: every instance's annotation point plus the
/// contour centers of whole-level oracle masks hit by a uniform grid.
pub fn target_keypoints(scene: &AnnotatedScene, grid: usize, box_size: f64) -> Result<KeypointSet> {
    let oracle = scene.oracle()?;
    let (w, h) = (scene.image.width() as usize, scene.image.height() as usize);
    let prompts = grid_prompts(grid, w, h)?;
    let mut centers = Vec::new();
    for g in segment_at_points(&oracle, &scene.image, &prompts, box_size) {
        let whole = &g.proposals[0];
        if !whole.is_empty() {
            centers.push(contour_center(&whole.mask)?);
        }
    }
    let oracle_pts = KeypointSet::from_points(centers, PointSource::OracleCenter);
    let gt = KeypointSet::from_points(scene.instances.iter().map(|i| i.point).collect(), PointSource::GroundTruth);
    Ok(build_target_points(&oracle_pts, &gt))
}

/// Snap points to the centers of their heatmap cells and drop duplicates,
/// keeping first occurrences.
pub fn unique_cell_centers(points: &[Point2D], stride: usize) -> Vec<Point2D> {
    let s = stride as f64;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for p in points {
        let cell = ((p.x / s).floor() as i64, (p.y / s).floor() as i64);
        if seen.insert(cell) {
            out.push(Point2D::new(s * cell.0 as f64 + s / 2.0, s * cell.1 as f64 + s / 2.0));
        }
    }
    out
}

/// Content-addressed store of embedder outputs for prompt-group crops.
pub struct EmbeddingCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    key: String,
    rows: usize,
    dim: usize,
    dtype: String,
}

impl EmbeddingCache {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(EmbeddingCache { dir: dir.to_path_buf() })
    }

    pub fn key(image: &image::RgbImage, boxes: &[BoxXYXY], embedder_tag: &str) -> String {
        let mut bytes = image.as_raw().clone();
        for b in boxes {
            for v in b.to_array() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes.extend_from_slice(embedder_tag.as_bytes());
        sha256_hex(&bytes)
    }

    pub fn get(&self, key: &str, dim: usize) -> Option<Vec<Vec<f64>>> {
        let man: CacheManifest = serde_json::from_slice(&fs::read(self.dir.join(format!("{key}.json"))).ok()?).ok()?;
        if man.key != key || man.dim != dim || man.dtype != "f64" {
            return None;
        }
        let bytes = fs::read(self.dir.join(format!("{key}.bin"))).ok()?;
        if bytes.len() != man.rows * dim * 8 {
            return None;
        }
        let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Some(flat.chunks(dim.max(1)).map(|c| c.to_vec()).collect())
    }

    pub fn put(&self, key: &str, rows: &[Vec<f64>], dim: usize) -> Result<()> {
        let mut bytes = Vec::with_capacity(rows.len() * dim * 8);
        for r in rows {
            for v in r {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(self.dir.join(format!("{key}.bin")), bytes)?;
        let man = CacheManifest { key: key.to_string(), rows: rows.len(), dim, dtype: "f64".into() };
        fs::write(self.dir.join(format!("{key}.json")), serde_json::to_vec(&man)?)?;
        Ok(())
    }
}

/// Build the training view of a scene. `classes` orders the label vectors
/// and must match the rows of the name weights used in the loss. Returns
/// `None` (with a log line) when no proposal matches a labeled instance.
pub fn prepare_scene(
    scene: &AnnotatedScene,
    stride: usize,
    embedder: &dyn EmbedderBackend,
    classes: &[u32],
    cfg: &TrainConfig,
    cache: Option<&EmbeddingCache>,
) -> Result<Option<PreparedScene>> {
    let (w, h) = (scene.image.width() as usize, scene.image.height() as usize);
    let keypoints = target_keypoints(scene, cfg.target_grid, cfg.box_size)?;
    let target = splat_targets(&keypoints, h.div_ceil(stride), w.div_ceil(stride), stride, cfg.sigma)?;

    let oracle = scene.oracle()?;
    let all: Vec<usize> = (0..scene.instances.len()).collect();
    let gts: Vec<(BoxXYXY, u32)> = pseudo_boxes_for(scene, &oracle, cfg.box_size, &all)
        .into_iter()
        .map(|(k, b)| (b, scene.instances[k].class_id))
        .collect();

    let prompts = KeypointSet::from_points(unique_cell_centers(&keypoints.points, stride), PointSource::Peak);
    let groups = segment_at_points(&oracle, &scene.image, &prompts, cfg.box_size);
    let mut boxes: Vec<BoxXYXY> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for g in &groups {
        for p in g.proposals.iter().filter(|p| !p.is_empty()) {
            if seen.insert(p.bbox.to_array().map(f64::to_bits)) {
                boxes.push(p.bbox);
            }
        }
    }
    let labels = match_proposals_to_gt(&boxes, &gts, classes, cfg.match_iou);
    if !labels.iter().any(|l| l.iter().any(|&v| v > 0.5)) {
        log::warn!("scene {}: no positive proposal, skipped", scene.id);
        return Ok(None);
    }

    let full: Vec<[BoxXYXY; M]> = groups
        .iter()
        .filter(|g| g.is_full())
        .map(|g| std::array::from_fn(|i| g.proposals[i].bbox))
        .collect();
    let flat_boxes: Vec<BoxXYXY> = full.iter().flatten().copied().collect();
    let dim = embedder.dim();
    let tag = format!("dim={dim}");
    let key = EmbeddingCache::key(&scene.image, &flat_boxes, &tag);
    let rows = match cache.and_then(|c| c.get(&key, dim)) {
        Some(r) if r.len() == flat_boxes.len() => r,
        _ => {
            let r = flat_boxes.iter().map(|b| embedder.embed_region(&scene.image, b)).collect::<Result<Vec<_>>>()?;
            if let Some(c) = cache {
                c.put(&key, &r, dim)?;
            }
            r
        }
    };
    let w_prime = rows.chunks(M).map(|c| c.to_vec()).collect();
    Ok(Some(PreparedScene { id: scene.id.clone(), input: image_to_input(&scene.image, stride), target, boxes, labels, groups: full, w_prime }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub point: f64,
    pub cls: f64,
    pub kd: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.point * self.point + w.cls * self.cls + w.kd * self.kd
    }

    fn add(&mut self, o: &LossParts) {
        self.point += o.point;
        self.cls += o.cls;
        self.kd += o.kd;
    }
}

/// Loss of one scene under a fixed sample, with the gradient of the
/// weighted total with respect to every model parameter. Terms whose
/// weight is zero, or that the stage does not train, are skipped.
pub fn scene_objective(
    model: &Model,
    scene: &PreparedScene,
    batch: &TrainingBatch,
    name_rows: &[Vec<f64>],
    weights: &LossWeights,
    stage: Stage,
) -> Result<(LossParts, ParamSet)> {
    let mut grads = model.params.zeros_like();
    let trace = model.encode(&scene.input);
    let feats = trace.features();
    let mut gf = vec![0.0; feats.data.len()];
    let mut parts = LossParts::default();
    let scale = model.logit_scale();

    if stage.uses_point() && weights.point > 0.0 {
        let pt = model.point_forward(feats)?;
        let (l, mut g) = point_loss(&pt.heatmap, &scene.target)?;
        g.iter_mut().for_each(|v| *v *= weights.point);
        model.point_backward(&pt, &g, &mut grads, &mut gf);
        parts.point = l;
    }
    if stage.uses_regions() && weights.cls > 0.0 && !batch.proposals.is_empty() {
        let n = batch.proposals.len() as f64;
        for &i in &batch.proposals {
            let rt = model.region_forward(feats, &scene.boxes[i])?;
            let (l, mut g) = cls_loss(name_rows, &rt.r, &scene.labels[i], scale)?;
            parts.cls += l / n;
            g.iter_mut().for_each(|v| *v *= weights.cls / n);
            model.region_backward(feats, &rt, &g, &mut grads, &mut gf)?;
        }
    }
    if stage.uses_regions() && weights.kd > 0.0 && !batch.groups.is_empty() {
        let n = batch.groups.len() as f64;
        for &gi in &batch.groups {
            let boxes = &scene.groups[gi];
            let traces = boxes.iter().map(|b| model.region_forward(feats, b)).collect::<Result<Vec<_>>>()?;
            let rs: Vec<Vec<f64>> = traces.iter().map(|t| t.r.clone()).collect();
            let (l, gs) = kd_group_loss(&scene.w_prime[gi], &rs, boxes, scale)?;
            parts.kd += l / n;
            for (t, g) in traces.iter().zip(gs) {
                let g: Vec<f64> = g.into_iter().map(|v| v * weights.kd / n).collect();
                model.region_backward(feats, t, &g, &mut grads, &mut gf)?;
            }
        }
    }
    if stage.uses_point() {
        model.encoder_backward(&trace, gf, &mut grads);
    }
    Ok((parts, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub point: f64,
    pub cls: f64,
    pub kd: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,total,point,cls,kd";

    pub fn csv_line(&self) -> String {
        format!("{},{:.10},{:.10},{:.10},{:.10}", self.step, self.total, self.point, self.cls, self.kd)
    }
}

fn step_rng(seed: u64, step: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(1 << 20).wrapping_add(slot));
    rng
}

/// Optimizer state restricted to the parameters a stage trains.
pub fn new_optimizer(model: &Model, stage: Stage) -> AdamState {
    AdamState::new(&model.subset(stage.trainable()))
}

/// Run Adam from `adam.step` up to `cfg.steps`. Each step draws its scenes
/// and proposal samples from an RNG keyed by `(seed, step)`, so stopping
/// and resuming yields the same parameters as an uninterrupted run.
/// `on_step` sees every record and may stop training by returning an error.
pub fn train(
    model: &mut Model,
    adam: &mut AdamState,
    scenes: &[PreparedScene],
    name_rows: &[Vec<f64>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &Model, &AdamState) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Dataset("no usable training scenes".into()));
    }
    let prefixes = cfg.stage.trainable();
    model.subset(prefixes).check_layout(&adam.m)?;
    let mut log = Vec::new();
    while adam.step < cfg.steps {
        let step = adam.step;
        let mut rng = step_rng(cfg.seed, step, 0);
        let picks: Vec<usize> = sample(&mut rng, scenes.len(), cfg.batch.min(scenes.len())).into_vec();
        let results: Vec<Result<(LossParts, ParamSet)>> = picks
            .par_iter()
            .enumerate()
            .map(|(slot, &si)| {
                let sc = &scenes[si];
                let mut r = step_rng(cfg.seed, step, slot as u64 + 1);
                let batch = if cfg.stage.uses_regions() {
                    sample_training_batch(&sc.labels, sc.groups.len(), &cfg.sampler, &mut r)?
                } else {
                    TrainingBatch { proposals: Vec::new(), positives: 0, groups: Vec::new() }
                };
                scene_objective(model, sc, &batch, name_rows, &cfg.weights, cfg.stage)
            })
            .collect();
        let mut grads = model.params.zeros_like();
        let mut parts = LossParts::default();
        for r in results {
            let (p, g) = r?;
            parts.add(&p);
            grads.add_scaled(&g, 1.0);
        }
        let inv = 1.0 / picks.len() as f64;
        grads.scale(inv);
        let parts = LossParts { point: parts.point * inv, cls: parts.cls * inv, kd: parts.kd * inv };
        let total = parts.total(&cfg.weights);
        if !total.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step} ({parts:?})")));
        }
        let mut sub = model.subset(prefixes);
        let gsub = ParamSet {
            tensors: grads.tensors.into_iter().filter(|t| prefixes.iter().any(|p| t.name.starts_with(p))).collect(),
        };
        let adam_cfg = AdamConfig { lr: cfg.lr_at(step), ..cfg.adam };
        adam.update(&adam_cfg, &mut sub, &gsub);
        model.load_subset(&sub)?;
        let rec = StepRecord { step: step + 1, total, point: parts.point, cls: parts.cls, kd: parts.kd };
        on_step(&rec, model, adam)?;
        log.push(rec);
    }
    Ok(log)
}
