//! Independent oracles and random-instance builders shared by the
//! integration tests and the acceptance runner.
#![allow(dead_code)]

use image::RgbImage;
use promptcount::classification::TrainingBatch;
use promptcount::geometry::{BoxXYXY, Point2D};
use promptcount::heatmap::Heatmap;
use promptcount::model::{image_to_input, EncoderConfig, LayerSpec, Model, ModelConfig, PointHeadConfig, RegionHeadConfig};
use promptcount::proposal::M;
use promptcount::train::{scene_objective, LossWeights, PreparedScene, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Greedy suppression written as the textbook double loop: walk boxes by
/// descending score (lower index first on ties) and keep one unless an
/// already kept box overlaps it by more than `thresh`.
pub fn brute_nms(boxes: &[BoxXYXY], scores: &[f64], thresh: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut done = vec![false; n];
    let mut kept = Vec::new();
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if done[i] {
                continue;
            }
            best = match best {
                Some(b) if scores[b] > scores[i] || (scores[b] == scores[i] && b < i) => Some(b),
                _ => Some(i),
            };
        }
        let b = best.unwrap();
        done[b] = true;
        if kept.iter().all(|&k: &usize| exact_iou(&boxes[k], &boxes[b]) <= thresh) {
            kept.push(b);
        }
    }
    kept
}

/// Exact IoU by coordinate arithmetic, written out without the library.
pub fn exact_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// IoU of integer boxes by counting unit pixels on a grid.
pub fn raster_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
    let (lo_x, hi_x) = (a[0].min(b[0]), a[2].max(b[2]));
    let (lo_y, hi_y) = (a[1].min(b[1]), a[3].max(b[3]));
    let inside = |r: [i32; 4], x: i32, y: i32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// MAE, RMSE, NAE, SRE straight from their definitions; zero-count images
/// are left out of the normalized errors.
pub fn count_formulas(y: &[usize], y_hat: &[usize]) -> (f64, f64, f64, f64) {
    let n = y.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut nae = 0.0;
    let mut sre = 0.0;
    let mut nz = 0.0;
    for (&a, &b) in y.iter().zip(y_hat) {
        let d = a as f64 - b as f64;
        abs += d.abs();
        sq += d * d;
        if a > 0 {
            nae += d.abs() / a as f64;
            sre += d * d / a as f64;
            nz += 1.0;
        }
    }
    (abs / n, (sq / n).sqrt(), nae / nz, (sre / nz).sqrt())
}

/// Gaussian value at the center of cell `(x, y)`.
pub fn gaussian_at_cell(p: Point2D, x: usize, y: usize, stride: usize, sigma: f64) -> f64 {
    let s = stride as f64;
    let cx = s * x as f64 + s / 2.0;
    let cy = s * y as f64 + s / 2.0;
    let d2 = (cx - p.x).powi(2) + (cy - p.y).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { in_channels: 3, layers: vec![LayerSpec::new(3, 2, 2, 0), LayerSpec::new(3, 3, 1, 1)] },
        point_head: PointHeadConfig { layers: vec![LayerSpec::new(2, 3, 1, 1), LayerSpec::new(1, 1, 1, 0)] },
        region_head: RegionHeadConfig { roi: 2, hidden: 4, dim: 3, margin: 1.0, ..Default::default() },
    }
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BoxXYXY {
    let x0 = rng.gen_range(0.0..w - 3.0);
    let y0 = rng.gen_range(0.0..h - 3.0);
    BoxXYXY::new(x0, y0, rng.gen_range(x0 + 1.5..w), rng.gen_range(y0 + 1.5..h))
}

/// A small model and a random training scene for gradient checks.
pub struct GradInstance {
    pub model: Model,
    pub scene: PreparedScene,
    pub batch: TrainingBatch,
    pub name_rows: Vec<Vec<f64>>,
}

pub fn grad_instance(seed: u64) -> GradInstance {
    let mut r = rng(seed);
    let cfg = tiny_model_config();
    let mut model = Model::init(cfg.clone(), seed).unwrap();
    let flat: Vec<f64> = (0..model.params.num_params()).map(|_| r.gen_range(-0.8..0.8)).collect();
    model.params.set_flat(&flat);
    let (w, h) = (12u32, 12u32);
    let img = RgbImage::from_fn(w, h, |_, _| image::Rgb([r.gen(), r.gen(), r.gen()]));
    let stride = model.stride();
    let input = image_to_input(&img, stride);
    let mut target = Heatmap::for_image(w as usize, h as usize, stride);
    target.data.iter_mut().for_each(|v| *v = r.gen_range(0.0..1.0));
    let dim = cfg.region_head.dim;
    let n_classes = r.gen_range(1..4);
    let name_rows: Vec<Vec<f64>> = (0..n_classes).map(|_| unit(&mut r, dim)).collect();
    let n_boxes = r.gen_range(1..4);
    let boxes: Vec<BoxXYXY> = (0..n_boxes).map(|_| random_box(&mut r, w as f64, h as f64)).collect();
    let labels: Vec<Vec<f64>> = boxes.iter().map(|_| (0..n_classes).map(|_| r.gen_range(0..2) as f64).collect()).collect();
    let whole = random_box(&mut r, w as f64, h as f64);
    let c = whole.center();
    let part = BoxXYXY::new(c.x - 0.3 * whole.width(), c.y - 0.3 * whole.height(), c.x + 0.3 * whole.width(), c.y + 0.3 * whole.height());
    let group: [BoxXYXY; M] = [whole, part, random_box(&mut r, w as f64, h as f64), whole];
    let w_prime = vec![(0..M).map(|_| unit(&mut r, dim)).collect()];
    let batch = TrainingBatch { proposals: (0..n_boxes).collect(), positives: 0, groups: vec![0] };
    let scene = PreparedScene { id: format!("g{seed}"), input, target, boxes, labels, groups: vec![group], w_prime };
    GradInstance { model, scene, batch, name_rows }
}

/// Largest entry-wise relative error between the analytic gradient of the
/// weighted objective and central differences, with `floor` guarding
/// near-zero entries.
///
/// Each entry takes the closest of three step sizes: ReLU and bilinear
/// sampling kinks make a step that straddles them meaningless, and the
/// smallest step is the one dominated by round-off. A wrong analytic entry
/// disagrees at every step.
pub fn fd_max_rel_error(inst: &GradInstance, weights: &LossWeights, floor: f64) -> f64 {
    let total = |m: &Model| {
        let (p, _) = scene_objective(m, &inst.scene, &inst.batch, &inst.name_rows, weights, Stage::Joint).unwrap();
        p.total(weights)
    };
    let (_, grads) = scene_objective(&inst.model, &inst.scene, &inst.batch, &inst.name_rows, weights, Stage::Joint).unwrap();
    let analytic = grads.flatten();
    let flat = inst.model.params.flatten();
    let mut m = inst.model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut at = |d: f64| {
            let mut p = flat.clone();
            p[i] += d;
            m.params.set_flat(&p);
            total(&m)
        };
        let best = [1e-4, 1e-5, 1e-6]
            .into_iter()
            .map(|h| {
                let fd = (at(h) - at(-h)) / (2.0 * h);
                (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(floor)
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    worst
}
