//! SGD training with momentum and decoupled weight decay, a JSON-lines
//! step log and per-epoch checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Tape, Tensor};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::Sample;
use crate::detector::{self, DetectorError, LossToggles, ModelConfig, ModelParams};
use crate::losses::LossWeights;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps of linear learning-rate warmup from zero.
    pub warmup_steps: usize,
    /// Learning rate at the last step relative to `lr`, reached linearly.
    pub final_lr_ratio: f64,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub losses: LossToggles,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            batch_size: 4,
            seed: 5,
            warmup_steps: 0,
            final_lr_ratio: 1.0,
            grad_clip: None,
            losses: LossToggles::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && (0.0..=1.0).contains(&self.final_lr_ratio)
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(
                "need lr >= 0, momentum in [0, 1), weight_decay >= 0, batch_size > 0, final_lr_ratio in [0, 1], grad_clip > 0".into(),
            ))
        }
    }

    /// Learning rate at 0-based `step` of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let progress = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        self.lr * warm * (1.0 - (1.0 - self.final_lr_ratio) * progress)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub images: usize,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

/// Where a run writes its log and checkpoints.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn log_path(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn checkpoint_stem(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:03}"))
    }

    pub fn final_stem(&self) -> PathBuf {
        self.root.join("model")
    }
}

fn weight_decayed(name: &str) -> bool {
    name.ends_with(".w")
}

/// Mean per-image loss and gradient over a batch, summed in batch order.
fn batch_gradient(
    params: &ModelParams,
    batch: &[(&Sample, &[f32])],
    cfg: &TrainConfig,
) -> Result<(Vec<Vec<f32>>, BTreeMap<String, f64>, f64), TrainError> {
    let mc = &params.config;
    let mut grads: Vec<Vec<f32>> = params.tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut comps: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    for (sample, chw) in batch {
        let mut tape = Tape::<f32>::new();
        let bound = detector::bind(&mut tape, params, true)?;
        let img = Tensor::new(vec![3, mc.image_size, mc.image_size], chw.to_vec()).map_err(DetectorError::from)?;
        let outs = detector::forward(&mut tape, &bound, mc, img).map_err(|e| match e {
            DetectorError::Autograd(AutogradError::NonFinite { op }) => DetectorError::NonFinite {
                component: format!("forward ({op})"),
            },
            e => e,
        })?;
        let nodes = detector::build_loss(&mut tape, &bound, mc, &outs, &sample.boxes, &cfg.losses, &cfg.loss_weights)?;
        let report = detector::loss_report(&tape, &nodes, &cfg.loss_weights)?;
        total += report.total;
        for (k, v) in report.components {
            *comps.entry(k).or_insert(0.0) += v;
        }
        let g = tape.backward(nodes.total).map_err(DetectorError::from)?;
        for ((name, _), acc) in params.tensors.iter().zip(grads.iter_mut()) {
            let id = bound.id(name)?;
            if let Some(gt) = g.get(id) {
                for (a, &v) in acc.iter_mut().zip(gt.data()) {
                    *a += v;
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    for (g, (name, _)) in grads.iter_mut().zip(&params.tensors) {
        for v in g.iter_mut() {
            *v *= inv;
            if !v.is_finite() {
                return Err(DetectorError::NonFinite {
                    component: format!("gradient of {name}"),
                }
                .into());
            }
        }
    }
    let n = batch.len() as f64;
    comps.values_mut().for_each(|v| *v /= n);
    Ok((grads, comps, total / n))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Trains from `start` (fresh parameters or a resumed checkpoint) on
/// `samples`. With `run` set, appends to the step log and writes a
/// checkpoint after every epoch.
pub fn train(
    cfg: &TrainConfig,
    start: Checkpoint,
    samples: &[&Sample],
    run: Option<&RunDir>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config("no training images".into()));
    }
    let mc: ModelConfig = start.params.config.clone();
    let fg = mc.classes - 1;
    for s in samples {
        if s.image.width != mc.image_size || s.image.height != mc.image_size {
            return Err(TrainError::Config(format!(
                "image {} is {}x{}, model expects {}",
                s.id, s.image.width, s.image.height, mc.image_size
            )));
        }
        if let Some(b) = s.boxes.iter().find(|b| b.class >= fg) {
            return Err(TrainError::Config(format!(
                "image {} has class {} but the model has {fg} foreground classes",
                s.id, b.class
            )));
        }
    }
    let chw: Vec<Vec<f32>> = samples.iter().map(|s| s.image.to_chw()).collect();
    let mut params = start.params;
    let mut momentum: Vec<Vec<f32>> = match start.momentum {
        Some(m) => m.into_iter().map(|t| t.into_data()).collect(),
        None => params.tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
    };
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = start.step;
    let mut log_file = match run {
        Some(r) => {
            fs::create_dir_all(&r.root).map_err(io(&r.root))?;
            let p = r.log_path();
            let f = if start.epoch > 0 {
                OpenOptions::new().append(true).create(true).open(&p)
            } else {
                File::create(&p)
            }
            .map_err(io(&p))?;
            Some((BufWriter::new(f), p))
        }
        None => None,
    };
    let train_json = serde_json::to_value(cfg).ok();
    let mut log = Vec::new();
    for epoch in start.epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Sample, &[f32])> = chunk.iter().map(|&i| (samples[i], chw[i].as_slice())).collect();
            let (mut grads, comps, total) = batch_gradient(&params, &batch, cfg)?;
            if let Some(limit) = cfg.grad_clip {
                let norm = grads.iter().flatten().map(|&g| g as f64 * g as f64).sum::<f64>().sqrt();
                if norm > limit {
                    let k = (limit / norm) as f32;
                    grads.iter_mut().flatten().for_each(|g| *g *= k);
                }
            }
            let lr = cfg.lr_at(step, total_steps);
            let (mu, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
            let lr32 = lr as f32;
            for (((name, t), g), v) in params.tensors.iter_mut().zip(&grads).zip(momentum.iter_mut()) {
                let decay = if weight_decayed(name) { wd } else { 0.0 };
                for ((w, &gi), vi) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = mu * *vi + gi;
                    *w -= lr32 * *vi + lr32 * decay * *w;
                }
            }
            let entry = StepLog {
                step,
                epoch,
                lr,
                images: batch.len(),
                total,
                components: comps,
            };
            if let Some((f, p)) = log_file.as_mut() {
                let line = serde_json::to_string(&entry).expect("log entry serializes");
                writeln!(f, "{line}").map_err(io(p))?;
            }
            log.push(entry);
            step += 1;
        }
        if let Some((f, p)) = log_file.as_mut() {
            f.flush().map_err(io(p))?;
        }
        if let Some(r) = run {
            let ck = snapshot(&params, &momentum, &train_json, epoch + 1, step);
            ck.save(&r.checkpoint_stem(epoch + 1))?;
        }
    }
    let checkpoint = snapshot(&params, &momentum, &train_json, cfg.epochs.max(start.epoch), step);
    if let Some(r) = run {
        checkpoint.save(&r.final_stem())?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

fn snapshot(params: &ModelParams, momentum: &[Vec<f32>], train: &Option<serde_json::Value>, epoch: usize, step: usize) -> Checkpoint {
    let m = params
        .tensors
        .iter()
        .zip(momentum)
        .map(|((_, t), v)| Tensor::new(t.shape().to_vec(), v.clone()).expect("momentum matches its parameter"))
        .collect();
    Checkpoint {
        params: params.clone(),
        momentum: Some(m),
        train: train.clone(),
        epoch,
        step,
    }
}

/// Mean total loss per epoch, from a step log.
pub fn epoch_means(log: &[StepLog]) -> Vec<f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for e in log {
        let s = sums.entry(e.epoch).or_insert((0.0, 0));
        s.0 += e.total * e.images as f64;
        s.1 += e.images;
    }
    sums.values().map(|(s, n)| s / *n as f64).collect()
}
