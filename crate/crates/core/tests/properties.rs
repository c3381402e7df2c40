mod support;

use proptest::prelude::*;
use promptcount::classification::{kd_labels, QueryMode, QueryWeights};
use promptcount::evaluation::{counting_metrics, detection_ap, coco_thresholds, CountRecord, GtBox, Interpolation, ScoredBox};
use promptcount::geometry::{iou, BoxXYXY, Point2D};
use promptcount::heatmap::{dedup_tied_peaks, extract_peaks, splat_targets, KeypointSet, PointSource};
use promptcount::pipeline::{count_above, nms, Detection};
use promptcount::proposal::Level;
use support::{brute_nms, count_formulas, gaussian_at_cell, raster_iou};

fn any_box(max: f64) -> impl Strategy<Value = BoxXYXY> {
    (0.0..max, 0.0..max, 0.5..max / 2.0, 0.5..max / 2.0).prop_map(|(x, y, w, h)| BoxXYXY::new(x, y, x + w, y + h))
}

fn int_box() -> impl Strategy<Value = [i32; 4]> {
    (-10i32..30, -10i32..30, 1i32..20, 1i32..20).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
}

fn detection(score: f64) -> Detection {
    Detection { bbox: BoxXYXY::new(0.0, 0.0, 1.0, 1.0), class_id: 0, score, prompt_group: 0, level: Level::Whole }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn nms_matches_brute_force(
        boxes in prop::collection::vec(any_box(40.0), 0..50),
        seeds in prop::collection::vec(0u8..8, 50),
        thresh in 0.1f64..0.9,
    ) {
        // Coarse scores so that ties actually occur.
        let scores: Vec<f64> = boxes.iter().zip(&seeds).map(|(_, s)| *s as f64 / 8.0).collect();
        prop_assert_eq!(nms(&boxes, &scores, thresh), brute_nms(&boxes, &scores, thresh));
    }

    #[test]
    fn iou_matches_raster_on_integer_boxes(a in int_box(), b in int_box()) {
        let f = |r: [i32; 4]| BoxXYXY::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64);
        let v = iou(&f(a), &f(b));
        prop_assert!((v - raster_iou(a, b)).abs() < 1e-9);
        prop_assert!((v - iou(&f(b), &f(a))).abs() == 0.0);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn counting_metrics_match_formulas(pairs in prop::collection::vec((1usize..300, 0usize..300), 1..40)) {
        let (y, y_hat): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let records: Vec<CountRecord> = pairs.iter().enumerate()
            .map(|(i, &(a, b))| CountRecord { image_id: format!("{i}"), y: a, y_hat: b })
            .collect();
        let m = counting_metrics(&records).unwrap();
        let (mae, rmse, nae, sre) = count_formulas(&y, &y_hat);
        prop_assert!((m.mae - mae).abs() < 1e-12);
        prop_assert!((m.rmse - rmse).abs() < 1e-12);
        prop_assert!((m.nae - nae).abs() < 1e-12);
        prop_assert!((m.sre - sre).abs() < 1e-12);
        prop_assert!(m.rmse + 1e-12 >= m.mae);
    }

    #[test]
    fn splat_is_max_of_kernels_and_order_free(
        pts in prop::collection::vec((0.0f64..64.0, 0.0f64..64.0), 1..12),
        rot in 0usize..12,
    ) {
        let points: Vec<Point2D> = pts.iter().map(|&(x, y)| Point2D::new(x, y)).collect();
        let h = splat_targets(&KeypointSet::from_points(points.clone(), PointSource::GroundTruth), 16, 16, 4, 2.0).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let want = points.iter().map(|p| gaussian_at_cell(*p, x, y, 4, 2.0)).fold(0.0, f64::max);
                prop_assert!((h.at(x, y) - want).abs() < 1e-9);
            }
        }
        let mut rotated = points.clone();
        rotated.rotate_left(rot % points.len());
        rotated.reverse();
        let h2 = splat_targets(&KeypointSet::from_points(rotated, PointSource::GroundTruth), 16, 16, 4, 2.0).unwrap();
        prop_assert_eq!(h.data, h2.data);
    }

    #[test]
    fn peaks_are_monotone_in_k_and_tau(
        pts in prop::collection::vec((0.0f64..64.0, 0.0f64..64.0), 1..20),
        k1 in 0usize..30, dk in 0usize..30, t1 in 0.0f64..0.9, dt in 0.0f64..0.5,
    ) {
        let points = pts.iter().map(|&(x, y)| Point2D::new(x, y)).collect();
        let h = splat_targets(&KeypointSet::from_points(points, PointSource::GroundTruth), 16, 16, 4, 2.0).unwrap();
        let small = extract_peaks(&h, k1, t1);
        let big = extract_peaks(&h, k1 + dk, t1);
        prop_assert!(small.len() <= big.len());
        prop_assert_eq!(&big[..small.len()], &small[..]);
        let strict = extract_peaks(&h, 1000, t1 + dt);
        let loose = extract_peaks(&h, 1000, t1);
        prop_assert!(strict.iter().all(|p| loose.contains(p)));
    }

    #[test]
    fn kd_labels_are_symmetric_with_unit_diagonal(boxes in prop::collection::vec(any_box(30.0), 4)) {
        let c = kd_labels(&boxes);
        for i in 0..4 {
            prop_assert_eq!(c[i][i], 1.0);
            for j in 0..4 {
                prop_assert_eq!(c[i][j], c[j][i]);
            }
        }
    }

    #[test]
    fn appending_query_rows_keeps_existing_scores(
        rows in prop::collection::vec(unit_vec(6), 1..6),
        extra in prop::collection::vec(unit_vec(6), 1..4),
        r in unit_vec(6),
    ) {
        let mut w = QueryWeights::new(QueryMode::Image);
        for (i, row) in rows.iter().enumerate() {
            w.push(row.clone(), i as u32).unwrap();
        }
        let before = w.row_scores(&r, 20.0);
        for (i, row) in extra.iter().enumerate() {
            w.push(row.clone(), 100 + i as u32).unwrap();
        }
        let after = w.row_scores(&r, 20.0);
        prop_assert_eq!(&after[..before.len()], &before[..]);
    }

    #[test]
    fn count_is_nonincreasing_in_threshold(
        scores in prop::collection::vec(0.0f64..1.0, 0..60),
        a in 0.0f64..1.0, b in 0.0f64..1.0,
    ) {
        let dets: Vec<Detection> = scores.iter().map(|&s| detection(s)).collect();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(count_above(&dets, hi) <= count_above(&dets, lo));
    }

    #[test]
    fn perfect_detections_have_unit_ap(gts in prop::collection::vec(any_box(50.0), 1..15)) {
        let gt: Vec<GtBox> = gts.iter().map(|b| GtBox { image_id: "a".into(), bbox: *b, class_id: 3 }).collect();
        let dets: Vec<ScoredBox> = gts.iter().enumerate()
            .map(|(i, b)| ScoredBox { image_id: "a".into(), bbox: *b, class_id: 3, score: 1.0 - i as f64 * 0.01 })
            .collect();
        let ap = detection_ap(&dets, &gt, &coco_thresholds(), Interpolation::AllPoint).unwrap();
        prop_assert!((ap.ap - 1.0).abs() < 1e-12);
        prop_assert!((ap.ap50 - 1.0).abs() < 1e-12);
    }
}

/// Points on a lattice with at least three cells between any two, jittered
/// inside their cell.
fn separated_points(seed: u64, n: usize) -> Vec<Point2D> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut r = support::rng(seed);
    let mut slots: Vec<(usize, usize)> = (0..12).flat_map(|y| (0..12).map(move |x| (x, y))).collect();
    slots.shuffle(&mut r);
    slots
        .into_iter()
        .take(n)
        .map(|(x, y)| Point2D::new(12.0 * x as f64 + 4.0 * r.gen::<f64>() + 4.0, 12.0 * y as f64 + 4.0 * r.gen::<f64>() + 4.0))
        .collect()
}

#[test]
fn clean_maps_give_exact_peaks() {
    for seed in 0..200u64 {
        let n = 1 + (seed as usize * 37) % 100;
        let pts = separated_points(seed, n);
        let h = splat_targets(&KeypointSet::from_points(pts.clone(), PointSource::GroundTruth), 36, 36, 4, 2.0).unwrap();
        let peaks = dedup_tied_peaks(&extract_peaks(&h, 1000, 0.05));
        assert_eq!(peaks.len(), n, "seed {seed}: precision");
        for p in &pts {
            let (cx, cy) = ((p.x / 4.0).floor() as i64, (p.y / 4.0).floor() as i64);
            let hit = peaks.iter().any(|k| (k.x as i64 - cx).abs() <= 1 && (k.y as i64 - cy).abs() <= 1);
            assert!(hit, "seed {seed}: point {p:?} has no peak");
        }
    }
}

#[test]
fn concentric_part_is_not_a_duplicate() {
    let whole = BoxXYXY::new(10.0, 10.0, 20.0, 20.0);
    let part = BoxXYXY::new(12.0, 12.0, 18.0, 18.0);
    let c = kd_labels(&[whole, part, BoxXYXY::new(13.5, 13.5, 16.5, 16.5), whole]);
    assert!((iou(&whole, &part) - 0.36).abs() < 1e-12);
    assert_eq!(c[0][1], 0.0);
    assert_eq!(c[0][3], 1.0);
}
