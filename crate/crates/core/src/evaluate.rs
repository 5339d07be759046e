//! Dataset-level evaluation: detection mAP plus the interpretability scores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::detector::{self, DecodeConfig, DetectorError, LevelPrediction, ModelParams};
use crate::metrics::{self, ClassMetrics, Detection, GroundTruthMask, InterpretabilityTally, MetricError, MetricReport, SizeBuckets};
use crate::proto::{aggregate_saliency, resize_plane, Plane, ProtoError, SaliencyMap, Upsample};
use crate::splgs::BoxAnnotation;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub buckets: SizeBuckets,
    pub upsample: Upsample,
    /// Restrict inference and saliency to one pyramid level (1-based).
    pub level: Option<usize>,
}

/// Class-`k` saliency at input resolution: the level mean, or a single level.
pub fn saliency(preds: &[LevelPrediction], k: usize, size: usize, mode: Upsample, level: Option<usize>) -> Result<SaliencyMap, EvalError> {
    match level {
        None => {
            let stacks: Vec<_> = preds.iter().map(|p| p.scores.clone()).collect();
            Ok(aggregate_saliency(&stacks, k, size, size, mode)?)
        }
        Some(l) => {
            let p = preds
                .iter()
                .find(|p| p.level().index == l)
                .ok_or_else(|| EvalError::Mismatch(format!("no level {l}")))?;
            let lv = p.level();
            let plane = Plane::new(lv.height, lv.width, p.scores.plane(k).to_vec())?;
            Ok(SaliencyMap {
                class: k,
                map: resize_plane(&plane, size, size, mode)?,
            })
        }
    }
}

/// Detections for every sample, in order.
pub fn detect_all(params: &ModelParams, samples: &[&Sample], cfg: &EvalConfig) -> Result<Vec<Vec<Detection>>, EvalError> {
    samples
        .iter()
        .map(|s| {
            let preds = detector::predict(params, &s.image.to_chw())?;
            Ok(detector::decode(&preds, &cfg.decode, cfg.level))
        })
        .collect()
}

/// Full metric report over `samples`; `class_names` lists foreground classes.
pub fn evaluate(params: &ModelParams, samples: &[&Sample], class_names: &[String], cfg: &EvalConfig) -> Result<MetricReport, EvalError> {
    let mc = &params.config;
    if class_names.len() + 1 != mc.classes {
        return Err(EvalError::Mismatch(format!(
            "dataset has {} classes, checkpoint has {} foreground classes",
            class_names.len(),
            mc.classes - 1
        )));
    }
    if let Some(l) = cfg.level {
        if !(1..=3).contains(&l) {
            return Err(EvalError::Mismatch(format!("level {l} not in 1..=3")));
        }
    }
    let fg = class_names.len();
    let mut tally = InterpretabilityTally::new(fg);
    let mut dets = Vec::with_capacity(samples.len());
    let mut gts: Vec<Vec<BoxAnnotation>> = Vec::with_capacity(samples.len());
    for s in samples {
        if s.image.width != mc.image_size || s.image.height != mc.image_size {
            return Err(EvalError::Mismatch(format!("image {} size differs from the model's", s.id)));
        }
        if let Some(b) = s.boxes.iter().find(|b| b.class >= fg) {
            return Err(EvalError::Mismatch(format!("image {} has unknown class {}", s.id, b.class)));
        }
        let preds = detector::predict(params, &s.image.to_chw())?;
        dets.push(detector::decode(&preds, &cfg.decode, cfg.level));
        for k in 0..fg {
            if !s.boxes.iter().any(|b| b.class == k) {
                continue;
            }
            let sal = saliency(&preds, k, mc.image_size, cfg.upsample, cfg.level)?;
            let mask = GroundTruthMask::from_boxes(k, &s.boxes, mc.image_size, mc.image_size);
            tally.add(&sal, &mask)?;
        }
        gts.push(s.boxes.clone());
    }
    let map = metrics::map50(&dets, &gts, fg, cfg.buckets);
    let protos = params.prototype_sets()?;
    let protos: Vec<_> = match cfg.level {
        Some(l) => protos.into_iter().filter(|p| p.level.index == l).collect(),
        None => protos,
    };
    // undefined when a prototype row is all zeros, as in an untrained zero model
    let spar = match metrics::sparsity(&protos) {
        Ok(v) => Some(v),
        Err(MetricError::ZeroPrototype { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let per_class = class_names
        .iter()
        .enumerate()
        .zip(tally.per_class())
        .map(|((k, name), (disc, auc))| ClassMetrics {
            class: k,
            name: name.clone(),
            ap50: map.per_class[k],
            disc,
            auc_ft: auc,
        })
        .collect();
    Ok(MetricReport {
        map50: map.map50,
        map50_small: map.map_small,
        map50_medium: map.map_medium,
        map50_large: map.map_large,
        disc: tally.disc(),
        auc_ft: tally.auc(),
        spar,
        spar_x100: spar.map(|v| 100.0 * v),
        images: samples.len(),
        pairs: tally.pairs(),
        auc_pairs: tally.auc_pairs(),
        auc_skipped: tally.auc_skipped(),
        level: cfg.level,
        per_class,
    })
}
