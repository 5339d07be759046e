//! Flat JSON run configurations. A run starts from the defaults, takes the
//! keys present in `--config`, then any command-line flags, and the result
//! is written next to the run's outputs so it can be replayed.

use std::fs;
use std::path::{Path, PathBuf};

use hiproto::data::{DatasetSpec, FogParams, LowLightParams, SceneSpec};
use hiproto::detector::{DecodeConfig, LossToggles, ModelConfig};
use hiproto::evaluate::EvalConfig;
use hiproto::losses::{LossWeights, PrVariant};
use hiproto::metrics::SizeBuckets;
use hiproto::proto::Upsample;
use hiproto::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Reads a config file; missing files, bad JSON and unknown keys are usage errors.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Writes `value` as pretty JSON to `path`.
pub fn persist<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("config serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::Io(path.to_path_buf(), e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRun {
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub image_size: usize,
    /// Any of `clean`, `fog`, `lowlight`; `clean` is always written.
    pub variants: Vec<String>,
    #[serde(rename = "fog_A")]
    pub fog_a: f64,
    pub fog_beta: f64,
    pub lowlight_gamma: f64,
    pub lowlight_sigma: f64,
    pub scene: SceneSpec,
}

impl Default for SynthRun {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        let fog = FogParams::default();
        let low = LowLightParams::default();
        Self {
            out: None,
            seed: spec.seed,
            train: spec.train,
            test: spec.test,
            image_size: spec.scene.size,
            variants: vec!["clean".into(), "fog".into(), "lowlight".into()],
            fog_a: fog.a,
            fog_beta: fog.beta,
            lowlight_gamma: low.gamma,
            lowlight_sigma: low.noise_sigma,
            scene: spec.scene,
        }
    }
}

impl SynthRun {
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            train: self.train,
            test: self.test,
            scene: SceneSpec {
                size: self.image_size,
                ..self.scene.clone()
            },
        }
    }

    pub fn fog(&self) -> FogParams {
        FogParams {
            a: self.fog_a,
            beta: self.fog_beta,
        }
    }

    pub fn lowlight(&self) -> LowLightParams {
        LowLightParams {
            gamma: self.lowlight_gamma,
            noise_sigma: self.lowlight_sigma,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FogRun {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(rename = "A")]
    pub a: f64,
    pub beta: f64,
}

impl Default for FogRun {
    fn default() -> Self {
        let p = FogParams::default();
        Self {
            input: None,
            out: None,
            a: p.a,
            beta: p.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: String,
    pub resume: Option<PathBuf>,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub final_lr_ratio: f64,
    pub grad_clip: Option<f64>,
    pub rpc: bool,
    pub pr: bool,
    pub splgs: bool,
    pub pr_variant: PrVariant,
    pub rpc_stop_grad: bool,
    pub loss_weights: LossWeights,
    pub dim: usize,
    pub stem: usize,
    pub widths: [usize; 4],
    pub reg_width: usize,
    pub taus: Option<[u32; 3]>,
}

impl Default for TrainRun {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        Self {
            data: None,
            out: None,
            split: "train".into(),
            resume: None,
            epochs: t.epochs,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seed: t.seed,
            warmup_steps: t.warmup_steps,
            final_lr_ratio: t.final_lr_ratio,
            grad_clip: t.grad_clip,
            rpc: t.losses.rpc,
            pr: t.losses.pr,
            splgs: t.losses.splgs,
            pr_variant: t.losses.pr_variant,
            rpc_stop_grad: t.losses.rpc_stop_grad,
            loss_weights: t.loss_weights,
            dim: m.dim,
            stem: m.stem,
            widths: m.widths,
            reg_width: m.reg_width,
            taus: m.taus,
        }
    }
}

impl TrainRun {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            warmup_steps: self.warmup_steps,
            final_lr_ratio: self.final_lr_ratio,
            grad_clip: self.grad_clip,
            losses: LossToggles {
                rpc: self.rpc,
                pr: self.pr,
                splgs: self.splgs,
                pr_variant: self.pr_variant,
                rpc_stop_grad: self.rpc_stop_grad,
            },
            loss_weights: self.loss_weights.clone(),
        }
    }

    /// Model for a dataset of `image_size` pixels and `fg` foreground classes.
    pub fn model_config(&self, image_size: usize, fg: usize) -> ModelConfig {
        ModelConfig {
            image_size,
            classes: fg + 1,
            dim: self.dim,
            stem: self.stem,
            widths: self.widths,
            reg_width: self.reg_width,
            taus: self.taus,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: String,
    pub level: Option<usize>,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub local_peaks: bool,
    pub upsample: Upsample,
    pub buckets: SizeBuckets,
}

impl Default for EvalRun {
    fn default() -> Self {
        let d = DecodeConfig::default();
        Self {
            checkpoint: None,
            data: None,
            out: None,
            split: "test".into(),
            level: None,
            score_threshold: d.score_threshold,
            nms_iou: d.nms_iou,
            max_detections: d.max_detections,
            local_peaks: d.local_peaks,
            upsample: Upsample::default(),
            buckets: SizeBuckets::default(),
        }
    }
}

impl EvalRun {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            decode: DecodeConfig {
                score_threshold: self.score_threshold,
                nms_iou: self.nms_iou,
                max_detections: self.max_detections,
                local_peaks: self.local_peaks,
            },
            buckets: self.buckets,
            upsample: self.upsample,
            level: self.level,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeRun {
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    /// Foreground class index, or a class name when `data` is given.
    pub class: Option<String>,
    pub out: Option<PathBuf>,
    /// Dataset whose manifest supplies class names.
    pub data: Option<PathBuf>,
    pub upsample: Upsample,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for VisualizeRun {
    fn default() -> Self {
        let d = DecodeConfig::default();
        Self {
            checkpoint: None,
            image: None,
            class: None,
            out: None,
            data: None,
            upsample: Upsample::default(),
            score_threshold: 0.25,
            nms_iou: d.nms_iou,
        }
    }
}
