//! Interpretability metrics and a small mAP@0.5 evaluator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::pairwise_cosine_penalty;
use crate::proto::{Plane, PrototypeSet, SaliencyMap};
use crate::splgs::BoxAnnotation;

/// Stabilizer in the discriminability denominator.
pub const DISC_EPS: f64 = 1e-7;
/// IoU needed for a detection to match a ground-truth box.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("size mismatch: saliency {saliency:?} vs mask {mask:?}")]
    SizeMismatch {
        saliency: (usize, usize),
        mask: (usize, usize),
    },
    #[error("prototype row {row} at level {level} has zero norm")]
    ZeroPrototype { level: usize, row: usize },
    #[error("no prototype levels")]
    NoLevels,
}

/// Binary union mask of all boxes of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMask {
    pub class: usize,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
}

impl GroundTruthMask {
    /// A pixel belongs to the mask when its centre lies inside a class box.
    pub fn from_boxes(class: usize, boxes: &[BoxAnnotation], height: usize, width: usize) -> Self {
        let mut mask = vec![0u8; height * width];
        for b in boxes.iter().filter(|b| b.class == class) {
            let (x1, y1, x2, y2) = b.corners();
            let ys = ((y1 - 0.5).ceil().max(0.0) as usize)..((y2 - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
            let xs = ((x1 - 0.5).ceil().max(0.0) as usize)..((x2 - 0.5).floor() + 1.0).clamp(0.0, width as f64) as usize;
            for y in ys {
                for x in xs.clone() {
                    mask[y * width + x] = 1;
                }
            }
        }
        Self {
            class,
            height,
            width,
            mask,
        }
    }

    pub fn positives(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

fn check_size(s: &Plane, m: &GroundTruthMask) -> Result<(), MetricError> {
    if s.height != m.height || s.width != m.width {
        return Err(MetricError::SizeMismatch {
            saliency: (s.height, s.width),
            mask: (m.height, m.width),
        });
    }
    Ok(())
}

/// Share of saliency mass inside the mask: `sum(S * M) / (sum(S) + eps)`.
pub fn discriminability(saliency: &SaliencyMap, mask: &GroundTruthMask) -> Result<f64, MetricError> {
    check_size(&saliency.map, mask)?;
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for (&s, &m) in saliency.map.values.iter().zip(&mask.mask) {
        total += s as f64;
        if m == 1 {
            inside += s as f64;
        }
    }
    Ok(inside / (total + DISC_EPS))
}

/// ROC AUC of scores against binary labels by the rank-sum statistic,
/// ties counting one half. `None` when either class is absent.
pub fn auc_from_scores(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie block
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Foreground-vs-background AUC of a saliency map.
pub fn auc_ft(saliency: &SaliencyMap, mask: &GroundTruthMask) -> Result<Option<f64>, MetricError> {
    check_size(&saliency.map, mask)?;
    let scores: Vec<f64> = saliency.map.values.iter().map(|&v| v as f64).collect();
    let labels: Vec<bool> = mask.mask.iter().map(|&m| m == 1).collect();
    Ok(auc_from_scores(&scores, &labels))
}

/// One minus the level-averaged mean absolute pairwise cosine similarity
/// of the class prototypes.
pub fn sparsity(levels: &[PrototypeSet]) -> Result<f64, MetricError> {
    if levels.is_empty() {
        return Err(MetricError::NoLevels);
    }
    let mut acc = 0.0;
    for set in levels {
        let m: Vec<f64> = set.prototypes.iter().map(|&v| v as f64).collect();
        for k in 0..set.classes {
            let norm: f64 = m[k * set.dim..(k + 1) * set.dim].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(MetricError::ZeroPrototype {
                    level: set.level.index,
                    row: k,
                });
            }
        }
        acc += pairwise_cosine_penalty(&m, set.classes, set.dim, false)
            .map_err(|_| MetricError::ZeroPrototype {
                level: set.level.index,
                row: 0,
            })?
            .0;
    }
    Ok(1.0 - acc / levels.len() as f64)
}

/// A scored detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxAnnotation,
    pub confidence: f64,
}

/// Area thresholds (in square pixels) separating small, medium and large boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeBuckets {
    pub small_max_area: f64,
    pub medium_max_area: f64,
}

impl Default for SizeBuckets {
    fn default() -> Self {
        Self {
            small_max_area: 24.0 * 24.0,
            medium_max_area: 64.0 * 64.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBuckets {
    pub fn bucket(&self, area: f64) -> SizeBucket {
        if area < self.small_max_area {
            SizeBucket::Small
        } else if area < self.medium_max_area {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

/// 101-point interpolated AP of one class at IoU 0.5, optionally restricted
/// to one size bucket. Boxes outside the bucket are ignored: detections
/// matching them, and unmatched detections of other sizes, count as
/// neither hits nor false alarms. `None` when no ground truth is in scope.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoxAnnotation>],
    class: usize,
    scope: Option<(SizeBucket, SizeBuckets)>,
) -> Option<f64> {
    let in_scope = |area: f64| scope.is_none_or(|(b, cfg)| cfg.bucket(area) == b);
    let gts: Vec<Vec<(BoxAnnotation, bool)>> = ground_truth
        .iter()
        .map(|g| {
            g.iter()
                .filter(|b| b.class == class)
                .map(|b| (*b, !in_scope(b.area())))
                .collect()
        })
        .collect();
    let npos = gts.iter().flatten().filter(|(_, ignored)| !ignored).count();
    if npos == 0 {
        return None;
    }
    let mut dets: Vec<(usize, usize, Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, d)| d.iter().enumerate().filter(|(_, x)| x.bbox.class == class).map(move |(k, x)| (img, k, *x)))
        .collect();
    dets.sort_by(|a, b| b.2.confidence.total_cmp(&a.2.confidence).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(dets.len());
    for (img, _, det) in &dets {
        let mut best: Option<(usize, f64)> = None;
        let mut hit_ignored = false;
        for (gi, (gt, ignored)) in gts[*img].iter().enumerate() {
            if matched[*img][gi] {
                continue;
            }
            let iou = det.bbox.iou(gt);
            if iou < MATCH_IOU {
                continue;
            }
            if *ignored {
                hit_ignored = true;
            } else if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[*img][gi] = true;
            flags.push(Some(true));
        } else if hit_ignored || !in_scope(det.bbox.area()) {
            flags.push(None);
        } else {
            flags.push(Some(false));
        }
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for f in flags.into_iter().flatten() {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        if let Some(idx) = recall.iter().position(|&x| x >= r - 1e-12) {
            ap += precision[idx];
        }
    }
    Some(ap / 101.0)
}

/// mAP over foreground classes that have ground truth in scope.
pub fn mean_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoxAnnotation>],
    foreground_classes: usize,
    scope: Option<(SizeBucket, SizeBuckets)>,
) -> (f64, Vec<Option<f64>>) {
    let per: Vec<Option<f64>> = (0..foreground_classes)
        .map(|k| average_precision(detections, ground_truth, k, scope))
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (mean, per)
}

/// mAP@0.5 overall and per size bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map50: f64,
    pub map_small: f64,
    pub map_medium: f64,
    pub map_large: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn map50(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoxAnnotation>],
    foreground_classes: usize,
    buckets: SizeBuckets,
) -> MapReport {
    let (map50, per_class) = mean_ap(detections, ground_truth, foreground_classes, None);
    let bucket = |b| mean_ap(detections, ground_truth, foreground_classes, Some((b, buckets))).0;
    MapReport {
        map50,
        map_small: bucket(SizeBucket::Small),
        map_medium: bucket(SizeBucket::Medium),
        map_large: bucket(SizeBucket::Large),
        per_class,
    }
}

/// Running means of discriminability and AUC over (image, present class)
/// pairs, summed in insertion order.
#[derive(Clone, Debug, Default)]
pub struct InterpretabilityTally {
    disc_sum: f64,
    pairs: usize,
    auc_sum: f64,
    auc_pairs: usize,
    auc_skipped: usize,
    per_class: Vec<(f64, usize, f64, usize)>,
}

impl InterpretabilityTally {
    pub fn new(foreground_classes: usize) -> Self {
        Self {
            per_class: vec![(0.0, 0, 0.0, 0); foreground_classes],
            ..Default::default()
        }
    }

    pub fn add(&mut self, saliency: &SaliencyMap, mask: &GroundTruthMask) -> Result<(), MetricError> {
        let d = discriminability(saliency, mask)?;
        self.disc_sum += d;
        self.pairs += 1;
        let slot = &mut self.per_class[mask.class];
        slot.0 += d;
        slot.1 += 1;
        match auc_ft(saliency, mask)? {
            Some(a) => {
                self.auc_sum += a;
                self.auc_pairs += 1;
                slot.2 += a;
                slot.3 += 1;
            }
            None => self.auc_skipped += 1,
        }
        Ok(())
    }

    pub fn disc(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.disc_sum / self.pairs as f64
        }
    }

    pub fn auc(&self) -> f64 {
        if self.auc_pairs == 0 {
            0.0
        } else {
            self.auc_sum / self.auc_pairs as f64
        }
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn auc_pairs(&self) -> usize {
        self.auc_pairs
    }

    pub fn auc_skipped(&self) -> usize {
        self.auc_skipped
    }

    /// Per class `(disc, auc)` means, `None` where the class never appeared.
    pub fn per_class(&self) -> Vec<(Option<f64>, Option<f64>)> {
        self.per_class
            .iter()
            .map(|&(d, n, a, m)| ((n > 0).then(|| d / n as f64), (m > 0).then(|| a / m as f64)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub ap50: Option<f64>,
    pub disc: Option<f64>,
    pub auc_ft: Option<f64>,
}

/// Headline evaluation numbers, emitted as flat JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map50: f64,
    pub map50_small: f64,
    pub map50_medium: f64,
    pub map50_large: f64,
    pub disc: f64,
    pub auc_ft: f64,
    pub spar: Option<f64>,
    pub spar_x100: Option<f64>,
    pub images: usize,
    pub pairs: usize,
    pub auc_pairs: usize,
    pub auc_skipped: usize,
    pub level: Option<usize>,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    /// One-row table: per-class AP, then mAP, Disc., Spar. and AUC_ft, in percent.
    pub fn to_csv(&self, run: &str) -> String {
        let mut header = vec!["run".to_string()];
        header.extend(self.per_class.iter().map(|c| c.name.clone()));
        header.extend(["mAP", "Disc.", "Spar.", "AUC_ft"].map(String::from));
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let mut row = vec![run.to_string()];
        row.extend(self.per_class.iter().map(|c| c.ap50.map_or_else(|| "-".to_string(), pct)));
        let spar = self.spar.map_or_else(|| "-".to_string(), pct);
        row.extend([pct(self.map50), pct(self.disc), spar, pct(self.auc_ft)]);
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}
