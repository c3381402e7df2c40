//! Embedding-weight proposal classifier: query weights, the classification
//! and hierarchical distillation losses, label assignment and the training
//! sampler.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY};
use crate::nn::{bce_with_logit, dot, sigmoid};
use crate::proposal::M;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Rows are embeddings of exemplar boxes.
    Image,
    /// Rows are class-name embeddings.
    Name,
}

/// Classifier weight matrix `W` (C x D) with a class tag per row.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryWeights {
    pub mode: QueryMode,
    pub rows: Vec<Vec<f64>>,
    pub class_ids: Vec<u32>,
}

impl QueryWeights {
    pub fn new(mode: QueryMode) -> Self {
        QueryWeights { mode, rows: Vec::new(), class_ids: Vec::new() }
    }

    /// Append a unit-norm row. Existing rows are untouched.
    pub fn push(&mut self, row: Vec<f64>, class_id: u32) -> Result<()> {
        let n = dot(&row, &row).sqrt();
        if !((n - 1.0).abs() < 1e-6) {
            return Err(Error::InvalidArgument(format!("query row norm {n} is not 1")));
        }
        if let Some(first) = self.rows.first() {
            if first.len() != row.len() {
                return Err(Error::ShapeMismatch { expected: format!("{}", first.len()), got: format!("{}", row.len()) });
            }
        }
        self.rows.push(row);
        self.class_ids.push(class_id);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct class ids in first-appearance order.
    pub fn classes(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for &c in &self.class_ids {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    /// `sigmoid(scale * w_k . r)` for every row.
    pub fn row_scores(&self, r: &[f64], scale: f64) -> Vec<f64> {
        self.rows.iter().map(|w| sigmoid(scale * dot(w, r))).collect()
    }

    /// Per-class score: the max over that class's rows.
    pub fn class_scores(&self, r: &[f64], scale: f64) -> Vec<(u32, f64)> {
        let rs = self.row_scores(r, scale);
        self.classes()
            .into_iter()
            .map(|c| {
                let s = rs.iter().zip(&self.class_ids).filter(|(_, &k)| k == c).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
                (c, s)
            })
            .collect()
    }
}

/// Mean BCE over the C entries of `scale * (W r)` against `c`, with the
/// gradient with respect to `r`.
pub fn cls_loss(w: &[Vec<f64>], r: &[f64], c: &[f64], scale: f64) -> Result<(f64, Vec<f64>)> {
    if w.len() != c.len() || w.is_empty() {
        return Err(Error::ShapeMismatch { expected: format!("{} labels", w.len()), got: format!("{}", c.len()) });
    }
    let n = w.len() as f64;
    let mut loss = 0.0;
    let mut g = vec![0.0; r.len()];
    for (row, &t) in w.iter().zip(c) {
        let z = scale * dot(row, r);
        if !z.is_finite() {
            return Err(Error::NonFinite("classification logit".into()));
        }
        let (l, dz) = bce_with_logit(z, t);
        loss += l;
        let k = dz * scale / n;
        g.iter_mut().zip(row).for_each(|(gi, wi)| *gi += k * wi);
    }
    Ok((loss / n, g))
}

/// Distillation targets `c'`: entry `(i, j)` is 1 iff the box IoU exceeds 0.5.
pub fn kd_labels(boxes: &[BoxXYXY]) -> Vec<Vec<f64>> {
    boxes
        .iter()
        .map(|a| boxes.iter().map(|b| if iou(a, b) > 0.5 { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Distillation loss of one prompt group: `(1/M) sum_i BCE(scale * W' r_i, c'_i)`,
/// each BCE averaged over its M entries. Returns the loss and the gradient
/// for every `r_i`.
pub fn kd_group_loss(w_prime: &[Vec<f64>], rs: &[Vec<f64>], boxes: &[BoxXYXY], scale: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if w_prime.len() != M || rs.len() != M || boxes.len() != M {
        return Err(Error::GroupSize { expected: M, got: w_prime.len().min(rs.len()).min(boxes.len()) });
    }
    let labels = kd_labels(boxes);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(M);
    for (r, c) in rs.iter().zip(&labels) {
        let (l, g) = cls_loss(w_prime, r, c, scale)?;
        total += l / M as f64;
        grads.push(g.into_iter().map(|v| v / M as f64).collect());
    }
    Ok((total, grads))
}

/// Label vector per proposal: entry `k` is 1 iff the best IoU with a
/// ground-truth box of class `classes[k]` is at least `thresh`.
pub fn match_proposals_to_gt(proposals: &[BoxXYXY], gts: &[(BoxXYXY, u32)], classes: &[u32], thresh: f64) -> Vec<Vec<f64>> {
    proposals
        .iter()
        .map(|p| {
            classes
                .iter()
                .map(|&c| {
                    let best = gts.iter().filter(|g| g.1 == c).map(|g| iou(p, &g.0)).fold(0.0, f64::max);
                    if best >= thresh {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub proposals: usize,
    pub positive_fraction: f64,
    pub groups: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { proposals: 256, positive_fraction: 0.25, groups: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingBatch {
    /// Indices into the proposal list (with repeats when padding).
    pub proposals: Vec<usize>,
    pub positives: usize,
    /// Indices into the eligible group list.
    pub groups: Vec<usize>,
}

/// Draw proposals with exactly `ceil(fraction * n)` positives (padding by
/// resampling positives with replacement) and up to `groups` prompt groups
/// uniformly without replacement.
pub fn sample_training_batch(labels: &[Vec<f64>], n_groups: usize, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<TrainingBatch> {
    if labels.is_empty() {
        return Err(Error::NoGroundTruth("no proposals to sample".into()));
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i].iter().any(|&v| v > 0.5));
    if pos.is_empty() {
        return Err(Error::NoGroundTruth("no positive proposal".into()));
    }
    let n_pos = (cfg.positive_fraction * cfg.proposals as f64).ceil() as usize;
    let n_neg = cfg.proposals - n_pos;
    let draw = |from: &[usize], n: usize, rng: &mut dyn rand::RngCore| -> Vec<usize> {
        if from.is_empty() {
            return Vec::new();
        }
        let mut v: Vec<usize> = from.to_vec();
        v.shuffle(rng);
        if v.len() >= n {
            v.truncate(n);
        } else {
            while v.len() < n {
                v.push(from[rng.gen_range(0..from.len())]);
            }
        }
        v
    };
    let mut proposals = draw(&pos, n_pos, rng);
    proposals.extend(draw(&neg, n_neg, rng));
    let mut groups: Vec<usize> = (0..n_groups).collect();
    groups.shuffle(rng);
    groups.truncate(cfg.groups);
    Ok(TrainingBatch { proposals, positives: n_pos, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn cls_loss_examples() {
        let w = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let r = unit(&[0.0, 0.0, 1.0]);
        let w3: Vec<Vec<f64>> = w.iter().map(|x| vec![x[0], x[1], 0.0]).collect();
        let (l, _) = cls_loss(&w3, &r, &[0.0, 0.0], 20.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = cls_loss(&w3, &r, &[1.0, 0.0], 20.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = cls_loss(&[unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])], &[1.0, 0.0], &[1.0, 0.0], 200.0).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn kd_label_examples() {
        let whole = BoxXYXY::new(10.0, 10.0, 30.0, 30.0);
        let part = BoxXYXY::new(14.0, 14.0, 26.0, 26.0);
        let sub = BoxXYXY::new(17.0, 17.0, 23.0, 23.0);
        let c = kd_labels(&[whole, part, sub, whole]);
        for i in 0..4 {
            assert_eq!(c[i][i], 1.0);
        }
        assert_eq!(c[0][1], 0.0);
        assert_eq!(c[0][3], 1.0);
        assert_eq!(c, (0..4).map(|i| (0..4).map(|j| c[j][i]).collect::<Vec<_>>()).collect::<Vec<_>>());
    }

    #[test]
    fn matching_examples() {
        let g = BoxXYXY::new(0.0, 0.0, 10.0, 10.0);
        let gts = [(g, 3), (BoxXYXY::new(2.0, 0.0, 12.0, 10.0), 3)];
        let m = match_proposals_to_gt(&[g, BoxXYXY::new(50.0, 50.0, 60.0, 60.0)], &gts, &[3, 5], 0.5);
        assert_eq!(m, vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        // IoU 0.4: [0,10) vs [0,4)... 40/100
        let p = BoxXYXY::new(0.0, 0.0, 4.0, 10.0);
        assert_eq!(match_proposals_to_gt(&[p], &gts[..1], &[3], 0.5), vec![vec![0.0]]);
    }

    #[test]
    fn sampler_ratios() {
        let mut labels = vec![vec![1.0]; 100];
        labels.extend(vec![vec![0.0]; 900]);
        let cfg = SamplerConfig::default();
        let b = sample_training_batch(&labels, 40, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b.proposals.len(), 256);
        assert_eq!(b.proposals.iter().filter(|&&i| i < 100).count(), 64);
        assert_eq!(b.groups.len(), 16);
        let b2 = sample_training_batch(&labels, 40, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b, b2);

        let mut few = vec![vec![1.0]; 10];
        few.extend(vec![vec![0.0]; 500]);
        let b = sample_training_batch(&few, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let pos: Vec<usize> = b.proposals.iter().copied().filter(|&i| i < 10).collect();
        assert_eq!(pos.len(), 64);
        let mut uniq = pos.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
        assert_eq!(b.groups.len(), 3);
        assert!(sample_training_batch(&vec![vec![0.0]; 5], 0, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn appending_rows_keeps_old_scores() {
        let mut q = QueryWeights::new(QueryMode::Name);
        q.push(unit(&[1.0, 2.0]), 0).unwrap();
        let r = unit(&[0.3, 0.7]);
        let before = q.row_scores(&r, 20.0);
        q.push(unit(&[-1.0, 0.5]), 1).unwrap();
        assert_eq!(q.row_scores(&r, 20.0)[0], before[0]);
        assert!(q.push(vec![2.0, 0.0], 2).is_err());
    }
}
