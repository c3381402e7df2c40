//! Counting metrics, detection AP, and localization diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY, Point2D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub image_id: String,
    pub y: usize,
    pub y_hat: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub nae: f64,
    pub sre: f64,
    pub n: usize,
    /// Records with `y = 0`, left out of NAE and SRE.
    pub excluded_zero: usize,
}

pub fn counting_metrics(records: &[CountRecord]) -> Result<CountMetrics> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no count records".into()));
    }
    let n = records.len() as f64;
    let (mut abs, mut sq, mut rel, mut relsq) = (0.0, 0.0, 0.0, 0.0);
    let mut nz = 0usize;
    for r in records {
        let d = r.y_hat as f64 - r.y as f64;
        abs += d.abs();
        sq += d * d;
        if r.y > 0 {
            rel += d.abs() / r.y as f64;
            relsq += d * d / r.y as f64;
            nz += 1;
        }
    }
    let excluded = records.len() - nz;
    if excluded > 0 {
        log::warn!("{excluded} records with zero ground-truth count excluded from NAE/SRE");
    }
    let (nae, sre) = if nz > 0 { (rel / nz as f64, (relsq / nz as f64).sqrt()) } else { (f64::NAN, f64::NAN) };
    Ok(CountMetrics { mae: abs / n, rmse: (sq / n).sqrt(), nae, sre, n: records.len(), excluded_zero: excluded })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope at every recall step.
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.01, ..., 1.
    Coco101,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image_id: String,
    pub bbox: BoxXYXY,
    pub class_id: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: String,
    pub bbox: BoxXYXY,
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub ap50: f64,
    /// `(iou threshold, AP)` pairs.
    pub per_threshold: Vec<(f64, f64)>,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn pr_points(dets: &[&ScoredBox], gts: &[&GtBox], thresh: f64) -> (Vec<f64>, Vec<f64>) {
    let mut by_image: BTreeMap<&str, Vec<(BoxXYXY, bool)>> = BTreeMap::new();
    for g in gts {
        by_image.entry(g.image_id.as_str()).or_default().push((g.bbox, false));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let n_gt = gts.len() as f64;
    let mut prec = Vec::with_capacity(order.len());
    let mut rec = Vec::with_capacity(order.len());
    let (mut ctp, mut cfp) = (0.0, 0.0);
    for i in order {
        let d = dets[i];
        let mut hit = false;
        if let Some(list) = by_image.get_mut(d.image_id.as_str()) {
            let mut best: Option<(usize, f64)> = None;
            for (k, (g, used)) in list.iter().enumerate() {
                if *used {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if v >= thresh && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
            if let Some((k, _)) = best {
                list[k].1 = true;
                hit = true;
            }
        }
        if hit {
            ctp += 1.0;
        } else {
            cfp += 1.0;
        }
        prec.push(ctp / (ctp + cfp));
        rec.push(ctp / n_gt);
    }
    (rec, prec)
}

/// Raw `(recall, precision)` after each detection in descending score
/// order, pooled over classes, at one IoU threshold.
pub fn pr_curve(dets: &[ScoredBox], gts: &[GtBox], thresh: f64) -> Vec<(f64, f64)> {
    let d: Vec<&ScoredBox> = dets.iter().collect();
    let g: Vec<&GtBox> = gts.iter().collect();
    let (r, p) = pr_points(&d, &g, thresh);
    r.into_iter().zip(p).collect()
}

fn ap_single(dets: &[&ScoredBox], gts: &[&GtBox], thresh: f64, interp: Interpolation) -> f64 {
    let (rec, mut prec) = pr_points(dets, gts, thresh);
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    match interp {
        Interpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (p, r) in prec.iter().zip(&rec) {
                ap += (r - prev_r) * p;
                prev_r = *r;
            }
            ap
        }
        Interpolation::Coco101 => {
            let mut s = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                let idx = rec.partition_point(|&v| v < r - 1e-12);
                s += if idx < prec.len() { prec[idx] } else { 0.0 };
            }
            s / 101.0
        }
    }
}

/// Box AP averaged over classes present in the ground truth, at each IoU
/// threshold. `ap` is the mean over `thresholds`; `ap50` is the value at 0.5
/// (computed separately when 0.5 is not in the list).
pub fn detection_ap(dets: &[ScoredBox], gts: &[GtBox], thresholds: &[f64], interp: Interpolation) -> Result<ApResult> {
    if gts.is_empty() {
        return Err(Error::NoGroundTruth("no ground-truth boxes".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no IoU thresholds".into()));
    }
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class_id).collect();
    classes.sort();
    classes.dedup();
    let at = |t: f64| -> f64 {
        let mut s = 0.0;
        for &c in &classes {
            let d: Vec<&ScoredBox> = dets.iter().filter(|d| d.class_id == c).collect();
            let g: Vec<&GtBox> = gts.iter().filter(|g| g.class_id == c).collect();
            s += ap_single(&d, &g, t, interp);
        }
        s / classes.len() as f64
    };
    let per_threshold: Vec<(f64, f64)> = thresholds.iter().map(|&t| (t, at(t))).collect();
    let ap = per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64;
    let ap50 = per_threshold.iter().find(|p| (p.0 - 0.5).abs() < 1e-12).map_or_else(|| at(0.5), |p| p.1);
    Ok(ApResult { ap, ap50, per_threshold })
}

/// Fraction of ground-truth points matched one-to-one to a prediction within
/// `radius`. Pairs are matched greedily by increasing distance.
pub fn peak_recall(pred: &[Point2D], gt: &[Point2D], radius: f64) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::NoGroundTruth("no ground-truth points".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be positive".into()));
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let d = g.distance(p);
            if d <= radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pr_used = vec![false; pred.len()];
    let mut hits = 0;
    for (_, i, j) in pairs {
        if !gt_used[i] && !pr_used[j] {
            gt_used[i] = true;
            pr_used[j] = true;
            hits += 1;
        }
    }
    Ok(hits as f64 / gt.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(y: usize, y_hat: usize) -> CountRecord {
        CountRecord { image_id: String::new(), y, y_hat }
    }

    #[test]
    fn counting_examples() {
        let m = counting_metrics(&[rec(2, 3), rec(4, 6)]).unwrap();
        assert!((m.mae - 1.5).abs() < 1e-12);
        assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((m.nae - 0.5).abs() < 1e-12);
        assert!((m.sre - 0.75f64.sqrt()).abs() < 1e-12);
        let m = counting_metrics(&[rec(10, 0)]).unwrap();
        assert_eq!((m.mae, m.rmse, m.nae), (10.0, 10.0, 1.0));
        assert!((m.sre - 10f64.sqrt()).abs() < 1e-12);
        let m = counting_metrics(&[rec(5, 5), rec(0, 1)]).unwrap();
        assert_eq!((m.nae, m.excluded_zero), (0.0, 1));
        assert!(counting_metrics(&[]).is_err());
    }

    fn sb(id: &str, b: BoxXYXY, s: f64) -> ScoredBox {
        ScoredBox { image_id: id.into(), bbox: b, class_id: 0, score: s }
    }

    fn gb(id: &str, b: BoxXYXY) -> GtBox {
        GtBox { image_id: id.into(), bbox: b, class_id: 0 }
    }

    #[test]
    fn ap_examples() {
        let a = BoxXYXY::new(0.0, 0.0, 10.0, 10.0);
        let b = BoxXYXY::new(20.0, 20.0, 30.0, 30.0);
        let r = detection_ap(&[sb("i", a, 1.0), sb("i", b, 1.0)], &[gb("i", a), gb("i", b)], &coco_thresholds(), Interpolation::AllPoint).unwrap();
        assert_eq!((r.ap, r.ap50), (1.0, 1.0));
        let fp = BoxXYXY::new(50.0, 50.0, 60.0, 60.0);
        let r = detection_ap(&[sb("i", a, 0.9), sb("i", fp, 0.5)], &[gb("i", a), gb("i", b)], &[0.5], Interpolation::AllPoint).unwrap();
        assert!((r.ap50 - 0.5).abs() < 1e-12);
        // IoU exactly 0.5: [0,10) vs [0,5) x [0,10) -> 50/100.
        let half = BoxXYXY::new(0.0, 0.0, 5.0, 10.0);
        let r = detection_ap(&[sb("i", half, 0.9)], &[gb("i", a)], &[0.5, 0.55], Interpolation::AllPoint).unwrap();
        assert_eq!(r.per_threshold, vec![(0.5, 1.0), (0.55, 0.0)]);
        let r = detection_ap(&[sb("i", a, 0.9)], &[gb("i", a)], &[0.5], Interpolation::Coco101).unwrap();
        assert!((r.ap50 - 1.0).abs() < 1e-12);
        assert!(detection_ap(&[], &[], &[0.5], Interpolation::AllPoint).is_err());
    }

    #[test]
    fn peak_recall_examples() {
        let g = vec![Point2D::new(0.0, 0.0), Point2D::new(2.0, 0.0)];
        assert_eq!(peak_recall(&g, &g, 1.0).unwrap(), 1.0);
        assert_eq!(peak_recall(&[], &g, 1.0).unwrap(), 0.0);
        assert_eq!(peak_recall(&[Point2D::new(1.0, 0.0)], &g, 1.5).unwrap(), 0.5);
        assert!(peak_recall(&g, &[], 1.0).is_err());
    }
}
