//! Subcommand bodies. Each takes a fully resolved run config.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hiproto::checkpoint::Checkpoint;
use hiproto::data::{self, Degradation, Image};
use hiproto::detector::{self, DecodeConfig, ModelParams};
use hiproto::evaluate::{self, EvalError};
use hiproto::gradcheck::{self, CaseResult};
use hiproto::metrics::MetricReport;
use hiproto::oracle::{self, OracleReport};
use hiproto::pnm::{self, Raster};
use hiproto::proto::{Plane, SaliencyMap};
use hiproto::train::{self, RunDir, TrainError};
use serde::Serialize;

use crate::config::{self, EvalRun, FogRun, SynthRun, TrainRun, VisualizeRun};
use crate::CliError;

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    v.as_deref().ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

/// Creates `dir`, refusing a non-empty existing one unless `force` is set.
pub fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.is_file() {
        return Err(CliError::Usage(format!("{} is a file", dir.display())));
    }
    if !force {
        if let Ok(mut entries) = fs::read_dir(dir) {
            if entries.next().is_some() {
                return Err(CliError::Usage(format!(
                    "{} is not empty (pass --force to write into it)",
                    dir.display()
                )));
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    config::persist(value, path)
}

#[derive(Debug, Serialize)]
pub struct SynthOutcome {
    pub variants: Vec<(String, String)>,
}

/// Writes the clean dataset and the requested degraded variants, each in
/// its own directory with a manifest, plus `digests.json`.
pub fn cmd_synth(run: &SynthRun, force: bool) -> Result<SynthOutcome, CliError> {
    let out = required(&run.out, "out")?;
    for v in &run.variants {
        if !["clean", "fog", "lowlight"].contains(&v.as_str()) {
            return Err(CliError::Usage(format!("unknown variant `{v}` (clean, fog, lowlight)")));
        }
    }
    let spec = run.dataset_spec();
    spec.scene.validate(None).map_err(|e| CliError::Usage(e.to_string()))?;
    prepare_out(out, force)?;
    let clean = data::synth_dataset(&spec)?;
    let mut variants = vec![("clean".to_string(), clean.clone())];
    if run.variants.iter().any(|v| v == "fog") {
        variants.push(("fog".into(), data::degrade_dataset(&clean, "fog", &Degradation::Fog(run.fog()))?));
    }
    if run.variants.iter().any(|v| v == "lowlight") {
        let d = Degradation::Lowlight(run.lowlight());
        variants.push(("lowlight".into(), data::degrade_dataset(&clean, "lowlight", &d)?));
    }
    let mut digests = Vec::new();
    for (name, ds) in &variants {
        let dir = out.join(name);
        data::write_dataset(&dir, ds)?;
        digests.push((name.clone(), data::dataset_digest(&dir)?));
    }
    write_json(&run, &out.join("synth_config.json"))?;
    let map: serde_json::Map<String, serde_json::Value> =
        digests.iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect();
    write_json(&map, &out.join("digests.json"))?;
    Ok(SynthOutcome { variants: digests })
}

/// Applies the haze model to a dataset directory or to one PPM image.
pub fn cmd_fog(run: &FogRun, force: bool) -> Result<PathBuf, CliError> {
    let input = required(&run.input, "input")?;
    let out = required(&run.out, "out")?;
    if !(run.a.is_finite() && run.beta.is_finite() && run.beta >= 0.0) {
        return Err(CliError::Usage(format!("need finite A and beta >= 0, got {} and {}", run.a, run.beta)));
    }
    let params = data::FogParams { a: run.a, beta: run.beta };
    if !input.exists() {
        return Err(CliError::Usage(format!("{} does not exist", input.display())));
    }
    prepare_out(out, force)?;
    let written = if input.is_dir() {
        let ds = data::read_dataset(input)?;
        let fogged = data::degrade_dataset(&ds, "fog", &Degradation::Fog(params))?;
        data::write_dataset(out, &fogged)?;
        out.to_path_buf()
    } else {
        let img = data::read_image(input)?;
        let fogged = data::apply_fog(&img, &params);
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let path = out.join(format!("{stem}_fog.ppm"));
        data::write_bytes(&path, &pnm::encode(&fogged.to_raster()))?;
        path
    };
    write_json(&run, &out.join("fog_config.json"))?;
    Ok(written)
}

#[derive(Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub epoch_means: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains on a dataset split, writing the step log, per-epoch checkpoints
/// and `model.{json,bin}` under `out`.
pub fn cmd_train(run: &TrainRun, force: bool) -> Result<TrainSummary, CliError> {
    let data_dir = required(&run.data, "data")?;
    let out = required(&run.out, "out")?;
    let cfg = run.train_config();
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !data_dir.join("manifest.json").is_file() {
        return Err(CliError::Usage(format!("{} has no manifest.json", data_dir.display())));
    }
    let ds = data::read_dataset(data_dir)?;
    let samples = ds.split(&run.split);
    if samples.is_empty() {
        return Err(CliError::Validation(format!("split `{}` is empty or missing", run.split)));
    }
    let mc = run.model_config(ds.manifest.image_size, ds.manifest.classes.len());
    let start = match &run.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.params.config != mc {
                return Err(CliError::Validation(format!(
                    "checkpoint model {:?} differs from the configured model {:?}",
                    ck.params.config, mc
                )));
            }
            ck
        }
        None => {
            mc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Checkpoint::new(ModelParams::init(&mc, cfg.seed)?)
        }
    };
    // a resumed run appends to its own directory
    prepare_out(out, force || run.resume.is_some())?;
    write_json(&run, &out.join("train_config.json"))?;
    let rd = RunDir { root: out.to_path_buf() };
    let outcome = train::train(&cfg, start, &samples, Some(&rd))?;
    Ok(TrainSummary {
        steps: outcome.log.len(),
        epoch_means: train::epoch_means(&outcome.log),
        checkpoint: rd.final_stem().with_extension("json"),
    })
}

/// Metric report for a checkpoint on a dataset split; with `out` set,
/// writes `metrics.json`, `metrics.csv` and the resolved config there.
pub fn cmd_eval(run: &EvalRun, force: bool) -> Result<MetricReport, CliError> {
    let ck_path = required(&run.checkpoint, "checkpoint")?;
    let data_dir = required(&run.data, "data")?;
    let ck = Checkpoint::load(ck_path)?;
    let ds = data::read_dataset(data_dir)?;
    let samples = ds.split(&run.split);
    if samples.is_empty() {
        return Err(CliError::Validation(format!("split `{}` is empty or missing", run.split)));
    }
    if let Some(out) = &run.out {
        prepare_out(out, force)?;
    }
    let report = evaluate::evaluate(&ck.params, &samples, &ds.manifest.classes, &run.eval_config())?;
    if let Some(out) = &run.out {
        write_json(&report, &out.join("metrics.json"))?;
        let label = ck_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let csv = report.to_csv(&label);
        fs::write(out.join("metrics.csv"), csv).map_err(|e| CliError::Io(out.join("metrics.csv"), e))?;
        write_json(&run, &out.join("eval_config.json"))?;
    }
    Ok(report)
}

fn plane_pgm(plane: &Plane) -> Vec<u8> {
    pnm::encode(&Raster {
        width: plane.width,
        height: plane.height,
        channels: 1,
        data: plane.values.iter().map(|&v| pnm::quantize(v)).collect(),
    })
}

fn draw_box(img: &mut Image, b: &hiproto::splgs::BoxAnnotation) {
    let (x1, y1, x2, y2) = b.corners();
    let clampi = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    let (x1, x2) = (clampi(x1, img.width), clampi(x2, img.width));
    let (y1, y2) = (clampi(y1, img.height), clampi(y2, img.height));
    let mut put = |x: usize, y: usize| {
        let o = (y * img.width + x) * 3;
        img.data[o..o + 3].copy_from_slice(&[1.0, 0.0, 0.0]);
    };
    for x in x1..=x2 {
        put(x, y1);
        put(x, y2);
    }
    for y in y1..=y2 {
        put(x1, y);
        put(x2, y);
    }
}

#[derive(Debug, Serialize)]
struct BoxSidecar {
    image: String,
    class: usize,
    class_name: Option<String>,
    width: usize,
    height: usize,
    detections: Vec<hiproto::metrics::Detection>,
}

/// Per-level response maps, the combined saliency map, a box sidecar and
/// an overlay for one class of one image. Returns the written paths.
pub fn cmd_visualize(run: &VisualizeRun, force: bool) -> Result<Vec<PathBuf>, CliError> {
    let ck_path = required(&run.checkpoint, "checkpoint")?;
    let image_path = required(&run.image, "image")?;
    let out = required(&run.out, "out")?;
    let class = run.class.as_deref().ok_or_else(|| CliError::Usage("missing --class".into()))?;
    let ck = Checkpoint::load(ck_path)?;
    let mc = &ck.params.config;
    let fg = mc.classes - 1;
    let names = match &run.data {
        Some(d) => Some(data::read_manifest(d)?.classes),
        None => None,
    };
    let valid = || match &names {
        Some(n) => n.iter().enumerate().map(|(i, n)| format!("{i} ({n})")).collect::<Vec<_>>().join(", "),
        None => (0..fg).map(|i| i.to_string()).collect::<Vec<_>>().join(", "),
    };
    let k = class
        .parse::<usize>()
        .ok()
        .or_else(|| names.as_ref().and_then(|n| n.iter().position(|c| c == class)))
        .filter(|&k| k < fg)
        .ok_or_else(|| CliError::Validation(format!("unknown class `{class}`; valid classes: {}", valid())))?;
    let img = data::read_image(image_path)?;
    if img.width != mc.image_size || img.height != mc.image_size {
        return Err(CliError::Validation(format!(
            "image is {}x{}, checkpoint expects {}x{}",
            img.width, img.height, mc.image_size, mc.image_size
        )));
    }
    prepare_out(out, force)?;
    let preds = detector::predict(&ck.params, &img.to_chw())?;
    let mut written = Vec::new();
    let mut emit = |name: String, bytes: Vec<u8>| -> Result<(), CliError> {
        let p = out.join(name);
        data::write_bytes(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    for p in &preds {
        let lv = p.level();
        let plane = Plane::new(lv.height, lv.width, p.scores.plane(k).to_vec()).map_err(EvalError::from)?;
        emit(format!("class{k}_level{}.pgm", lv.index), plane_pgm(&plane))?;
    }
    let sal: SaliencyMap = evaluate::saliency(&preds, k, mc.image_size, run.upsample, None)?;
    emit(format!("class{k}_combined.pgm"), plane_pgm(&sal.map))?;
    let decode = DecodeConfig {
        score_threshold: run.score_threshold,
        nms_iou: run.nms_iou,
        ..DecodeConfig::default()
    };
    let dets: Vec<_> = detector::decode(&preds, &decode, None)
        .into_iter()
        .filter(|d| d.bbox.class == k)
        .collect();
    let mut overlay = img.clone();
    for d in &dets {
        draw_box(&mut overlay, &d.bbox);
    }
    emit(format!("class{k}_overlay.ppm"), pnm::encode(&overlay.to_raster()))?;
    let sidecar = BoxSidecar {
        image: image_path.display().to_string(),
        class: k,
        class_name: names.as_ref().map(|n| n[k].clone()),
        width: img.width,
        height: img.height,
        detections: dets,
    };
    let p = out.join(format!("class{k}_boxes.json"));
    write_json(&sidecar, &p)?;
    written.push(p);
    write_json(&run, &out.join("visualize_config.json"))?;
    Ok(written)
}

#[derive(Debug, Serialize)]
pub struct GradSuite {
    pub seeds: usize,
    pub seconds: f64,
    pub cases: Vec<CaseResult>,
}

impl GradSuite {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }
}

/// Finite-difference checks of every operator and loss on seeds `1..=seeds`.
pub fn cmd_check_grads(seeds: usize) -> Result<GradSuite, CliError> {
    let list: Vec<u64> = (1..=seeds as u64).collect();
    let t = Instant::now();
    let cases = gradcheck::full_suite(&list).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(GradSuite {
        seeds,
        seconds: t.elapsed().as_secs_f64(),
        cases,
    })
}

/// Rasterization and AUC oracle runs.
pub fn cmd_oracle(trials: usize, maps: usize, seed: u64) -> Vec<OracleReport> {
    vec![oracle::splgs_agreement(trials, seed), oracle::auc_agreement(maps, seed)]
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Validation(e.to_string())
    }
}
