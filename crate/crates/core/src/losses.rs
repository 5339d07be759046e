//! Training objectives and the per-step loss report.
//!
//! Each loss has a plain evaluation (used by metrics, reports and tests)
//! and, where it trains parameters, a tape builder whose gradients are
//! checked against finite differences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::LevelAssignment;
use crate::autograd::{self, NodeId, Tape, BCE_EPS};
use crate::linalg::{self, LinalgError};
use crate::proto::ScoreStack;
use crate::real::Real;
use crate::splgs::{BoxAnnotation, LabelMapStack};

/// Number of pyramid levels the total objective expects.
pub const LEVELS: usize = 3;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target distance {target} outside [0, {max}]")]
    TargetOutOfRange { target: f64, max: f64 },
    #[error("missing loss component {0}")]
    MissingComponent(String),
    #[error("unknown loss component {0}")]
    UnknownComponent(String),
    #[error("invalid prototypes: {0}")]
    Prototypes(String),
    #[error("non-finite loss component {0}")]
    NonFinite(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Autograd(#[from] autograd::AutogradError),
}

/// Prototype regularizer family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrVariant {
    #[default]
    Svd,
    Cosine,
    Pop,
}

impl std::str::FromStr for PrVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "svd" => Ok(Self::Svd),
            "cosine" => Ok(Self::Cosine),
            "pop" => Ok(Self::Pop),
            other => Err(format!("unknown prototype regularizer `{other}` (svd, cosine, pop)")),
        }
    }
}

fn bce_term(p: f64, y: f64) -> f64 {
    -(y * (p + BCE_EPS).ln() + (1.0 - y) * (1.0 - p + BCE_EPS).ln())
}

/// Mean binary cross-entropy between a level's scores and its label maps.
pub fn rpc_loss(stack: &ScoreStack, labels: &LabelMapStack) -> Result<f64, LossError> {
    if stack.classes != labels.classes || stack.level != labels.level {
        return Err(LossError::Shape(format!(
            "scores {}x{}x{} vs labels {}x{}x{}",
            stack.classes, stack.level.height, stack.level.width, labels.classes, labels.level.height, labels.level.width
        )));
    }
    let n = stack.scores.len() as f64;
    let s: f64 = stack
        .scores
        .iter()
        .zip(&labels.maps)
        .map(|(&p, &y)| bce_term(p as f64, y as f64))
        .sum();
    Ok(s / n)
}

/// Tape form of [`rpc_loss`] on a `[C, H, W]` score node.
pub fn rpc_loss_node<T: Real>(tape: &mut Tape<T>, scores: NodeId, labels: &LabelMapStack) -> Result<NodeId, LossError> {
    let shape = tape.value(scores).shape().to_vec();
    let expect = [labels.classes, labels.level.height, labels.level.width];
    if shape != expect {
        return Err(LossError::Shape(format!("scores {shape:?} vs labels {expect:?}")));
    }
    let n = T::of(labels.maps.len() as f64);
    Ok(tape.bce(scores, &labels.as_reals::<T>(), None, n)?)
}

/// `sum_k |sigma_k - 1|` over the thin singular spectrum of a `C x D` matrix.
pub fn pr_loss_svd(p: &[f64], rows: usize, cols: usize) -> Result<f64, LossError> {
    Ok(linalg::pr_loss_and_grad(p, rows, cols)?.0)
}

/// Gradient of [`pr_loss_svd`]: `U diag(sign(sigma - 1)) V^T`.
pub fn pr_loss_svd_grad(p: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>, LossError> {
    Ok(linalg::pr_loss_and_grad(p, rows, cols)?.1)
}

/// Mean `|cos(p_i, p_j)|` over ordered row pairs `i != j`.
pub fn pr_loss_cosine(p: &[f64], rows: usize, cols: usize) -> Result<f64, LossError> {
    autograd::pairwise_cosine_penalty(p, rows, cols, false)
        .map(|r| r.0)
        .map_err(LossError::Prototypes)
}

/// Mean squared off-diagonal entry of the row-normalized Gram matrix.
pub fn pr_loss_pop(p: &[f64], rows: usize, cols: usize) -> Result<f64, LossError> {
    autograd::pairwise_cosine_penalty(p, rows, cols, true)
        .map(|r| r.0)
        .map_err(LossError::Prototypes)
}

/// Regularizer of the chosen family on a `[C, D]` (or `[C, D, 1, 1]`) prototype node.
pub fn pr_loss_node<T: Real>(tape: &mut Tape<T>, prototypes: NodeId, variant: PrVariant) -> Result<NodeId, LossError> {
    let shape = tape.value(prototypes).shape().to_vec();
    let flat = if shape.len() == 2 {
        prototypes
    } else {
        tape.reshape(prototypes, &[shape[0], shape[1..].iter().product()])?
    };
    Ok(match variant {
        PrVariant::Svd => tape.pr_svd(flat)?,
        PrVariant::Cosine => tape.pr_cosine(flat)?,
        PrVariant::Pop => tape.pr_pop(flat)?,
    })
}

/// Low bin and the (low, high) interpolation weights of a continuous
/// distance over `bins` bins.
pub fn dfl_split(target: f64, bins: usize) -> Result<(usize, f64, f64), LossError> {
    let max = (bins - 1) as f64;
    if !(0.0..=max).contains(&target) {
        return Err(LossError::TargetOutOfRange { target, max });
    }
    let lo = (target.floor() as usize).min(bins - 2);
    let hi = (lo + 1) as f64;
    Ok((lo, hi - target, target - lo as f64))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Distribution focal loss of one side's logits against a distance in bins.
pub fn dfl_loss(logits: &[f64], target: f64) -> Result<f64, LossError> {
    if logits.len() < 2 {
        return Err(LossError::Shape(format!("{} bins", logits.len())));
    }
    let (lo, wl, wh) = dfl_split(target, logits.len())?;
    let p = softmax(logits);
    Ok(-(wl * p[lo].ln() + wh * p[lo + 1].ln()))
}

/// Expected bin index of the softmax distribution.
pub fn decode_distance(logits: &[f64]) -> f64 {
    softmax(logits).iter().enumerate().map(|(b, p)| b as f64 * p).sum()
}

/// `1 - IoU` of two boxes.
pub fn iou_reg_loss(pred: &BoxAnnotation, gt: &BoxAnnotation) -> f64 {
    1.0 - pred.iou(gt)
}

/// Classification BCE over every level's positive and negative cells,
/// normalized by the total positive count (zero when there are no positives).
pub fn cls_loss(stacks: &[ScoreStack], assignments: &[LevelAssignment]) -> Result<f64, LossError> {
    if stacks.len() != assignments.len() {
        return Err(LossError::Shape(format!("{} stacks vs {} assignments", stacks.len(), assignments.len())));
    }
    let positives: usize = assignments.iter().map(|a| a.positives.len()).sum();
    if positives == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, a) in stacks.iter().zip(assignments) {
        let (targets, weights) = a.cls_targets(s.classes);
        if targets.len() != s.scores.len() {
            return Err(LossError::Shape(format!("level {} targets vs scores", s.level.index)));
        }
        total += s
            .scores
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&p, &y), &w)| w as f64 * bce_term(p as f64, y as f64))
            .sum::<f64>();
    }
    Ok(total / positives as f64)
}

/// Component names of the total objective, in report order.
pub fn component_names() -> Vec<String> {
    let mut names = vec!["cls".to_string(), "reg".to_string(), "dfl".to_string()];
    names.extend((1..=LEVELS).map(|l| format!("rpc_l{l}")));
    names.extend((1..=LEVELS).map(|l| format!("pr_l{l}")));
    names
}

/// Per-component multipliers of the total objective (all 1 by default).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub dfl: f64,
    pub rpc: f64,
    pub pr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            reg: 1.0,
            dfl: 1.0,
            rpc: 1.0,
            pr: 1.0,
        }
    }
}

impl LossWeights {
    pub fn for_component(&self, name: &str) -> f64 {
        match name {
            "cls" => self.cls,
            "reg" => self.reg,
            "dfl" => self.dfl,
            n if n.starts_with("rpc") => self.rpc,
            _ => self.pr,
        }
    }
}

/// Total loss and its weighted parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

/// Sums the weighted components `cls + reg + dfl + sum_l rpc_l + sum_l pr_l`.
pub fn total_loss(components: &BTreeMap<String, f64>, weights: &LossWeights) -> Result<LossReport, LossError> {
    let names = component_names();
    if let Some(unknown) = components.keys().find(|k| !names.contains(k)) {
        return Err(LossError::UnknownComponent(unknown.clone()));
    }
    let mut out = BTreeMap::new();
    let mut total = 0.0;
    for name in names {
        let v = *components.get(&name).ok_or_else(|| LossError::MissingComponent(name.clone()))?;
        let weighted = v * weights.for_component(&name);
        if !weighted.is_finite() {
            return Err(LossError::NonFinite(name));
        }
        total += weighted;
        out.insert(name, weighted);
    }
    Ok(LossReport {
        total,
        components: out,
    })
}
