//! Plain-text metric tables, plots and detection overlays.

use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};
use promptcount::benchmark::{Protocol, SceneResult};
use promptcount::evaluation::{pr_curve as pr_points, GtBox, ScoredBox};
use promptcount::geometry::BoxXYXY;
use promptcount::pipeline::{count_above, Detection, PromptMode};
use promptcount::synth::AnnotatedScene;

use crate::commands::EvalMetrics;

pub struct Row {
    pub name: String,
    pub protocol: Protocol,
    pub prompt: PromptMode,
    pub split: String,
    pub threshold: f64,
    pub mae: f64,
    pub rmse: f64,
    pub nae: f64,
    pub sre: f64,
    pub ap: f64,
    pub ap50: f64,
    pub candidates: f64,
}

impl Row {
    pub fn from_eval(name: &str, em: &EvalMetrics) -> Row {
        let m = &em.metrics;
        Row {
            name: name.to_string(),
            protocol: m.protocol,
            prompt: em.prompt_mode,
            split: em.split.as_str().to_string(),
            threshold: m.threshold,
            mae: m.counting.mae,
            rmse: m.counting.rmse,
            nae: m.counting.nae,
            sre: m.counting.sre,
            ap: m.detection.ap,
            ap50: m.detection.ap50,
            candidates: m.avg_candidate_points,
        }
    }
}

/// One block per protocol, counting and detection columns side by side.
pub fn render_table(rows: &[Row]) -> String {
    let mut s = String::new();
    for proto in [Protocol::Few, Protocol::Zero] {
        let block: Vec<&Row> = rows.iter().filter(|r| r.protocol == proto).collect();
        if block.is_empty() {
            continue;
        }
        let title = match proto {
            Protocol::Few => "few-shot (3 exemplar boxes)",
            Protocol::Zero => "zero-shot (class name)",
        };
        s.push_str(&format!("{title}\n"));
        s.push_str(&format!(
            "{:<8} {:<6} {:>7} | {:>8} {:>8} {:>7} {:>7} | {:>6} {:>6} | {:>7}  {}\n",
            "prompts", "split", "thresh", "MAE", "RMSE", "NAE", "SRE", "AP", "AP50", "points", "run"
        ));
        for r in block {
            s.push_str(&format!(
                "{:<8} {:<6} {:>7.3} | {:>8.2} {:>8.2} {:>7.3} {:>7.3} | {:>6.3} {:>6.3} | {:>7.1}  {}\n",
                r.prompt.as_str(),
                r.split,
                r.threshold,
                r.mae,
                r.rmse,
                r.nae,
                r.sre,
                r.ap,
                r.ap50,
                r.candidates,
                r.name
            ));
        }
        s.push('\n');
    }
    s
}

/// Line from `a` to `b`, one dot per step along the longer axis.
fn line(img: &mut RgbImage, a: (f32, f32), b: (f32, f32), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f32 / steps as f32;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, color);
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn disk(img: &mut RgbImage, c: (i32, i32), r: i32, color: Rgb<u8>) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, (c.0 + dx) as i64, (c.1 + dy) as i64, color);
            }
        }
    }
}

/// Outline of the half-open pixel rectangle `[x0, x1) x [y0, y1)`.
fn outline(img: &mut RgbImage, r: (i64, i64, i64, i64), color: Rgb<u8>) {
    let (x0, y0, x1, y1) = r;
    for x in x0..x1 {
        put(img, x, y0, color);
        put(img, x, y1 - 1, color);
    }
    for y in y0..y1 {
        put(img, x0, y, color);
        put(img, x1 - 1, y, color);
    }
}

const W: u32 = 400;
const MARGIN: f32 = 30.0;

fn axes(img: &mut RgbImage) {
    let black = Rgb([0, 0, 0]);
    let end = W as f32 - MARGIN;
    line(img, (MARGIN, end), (end, end), black);
    line(img, (MARGIN, MARGIN), (MARGIN, end), black);
}

fn to_px(u: f64, v: f64) -> (f32, f32) {
    let span = W as f32 - 2.0 * MARGIN;
    (MARGIN + u as f32 * span, W as f32 - MARGIN - v as f32 * span)
}

/// Predicted vs ground-truth count per image, with the identity line.
pub fn count_scatter(results: &[SceneResult], threshold: f64, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, W, Rgb([255, 255, 255]));
    axes(&mut img);
    let pairs: Vec<(f64, f64)> = results.iter().map(|r| (r.gt_count as f64, count_above(&r.detections, threshold) as f64)).collect();
    let max = pairs.iter().map(|p| p.0.max(p.1)).fold(1.0, f64::max);
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), Rgb([180, 180, 180]));
    for (y, yh) in pairs {
        let (px, py) = to_px(y / max, yh / max);
        disk(&mut img, (px as i32, py as i32), 3, Rgb([30, 90, 200]));
    }
    img.save(path)?;
    Ok(())
}

/// Precision-recall curve at IoU 0.5 over all scenes.
pub fn pr_curve(results: &[SceneResult], scenes: &[AnnotatedScene], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, W, Rgb([255, 255, 255]));
    axes(&mut img);
    let dets: Vec<ScoredBox> = results
        .iter()
        .flat_map(|r| r.detections.iter().map(|d| ScoredBox { image_id: r.image_id.clone(), bbox: d.bbox, class_id: d.class_id, score: d.score }))
        .collect();
    let gts: Vec<GtBox> = scenes
        .iter()
        .flat_map(|s| s.targets().map(|i| GtBox { image_id: s.id.clone(), bbox: i.bbox, class_id: i.class_id }))
        .collect();
    let pts = pr_points(&dets, &gts, 0.5);
    let mut prev = to_px(0.0, 1.0);
    for (r, p) in pts {
        let cur = to_px(r, p);
        line(&mut img, prev, cur, Rgb([200, 40, 40]));
        prev = cur;
    }
    img.save(path)?;
    Ok(())
}

fn rect(b: &BoxXYXY) -> Option<(i64, i64, i64, i64)> {
    let r = (b.x0.round() as i64, b.y0.round() as i64, b.x1.round() as i64, b.y1.round() as i64);
    (r.2 > r.0 && r.3 > r.1).then_some(r)
}

/// Image scaled up 3x with counted detections in green, the rest in gray
/// and exemplar boxes (if shown) in blue.
pub fn overlay(image: &RgbImage, dets: &[Detection], threshold: f64, show_exemplars: bool, exemplars: &[BoxXYXY]) -> RgbImage {
    const S: f64 = 3.0;
    let mut img = image::imageops::resize(image, image.width() * 3, image.height() * 3, image::imageops::FilterType::Nearest);
    let scaled = |b: &BoxXYXY| BoxXYXY::new(b.x0 * S, b.y0 * S, b.x1 * S, b.y1 * S);
    for d in dets.iter().rev() {
        let color = if d.score > threshold { Rgb([0, 220, 0]) } else { Rgb([120, 120, 120]) };
        if d.score > threshold * 0.5 {
            if let Some(r) = rect(&scaled(&d.bbox)) {
                outline(&mut img, r, color);
            }
        }
    }
    if show_exemplars {
        for b in exemplars {
            if let Some(r) = rect(&scaled(&b.clip(image.width() as usize, image.height() as usize))) {
                outline(&mut img, r, Rgb([40, 80, 255]));
            }
        }
    }
    img
}
