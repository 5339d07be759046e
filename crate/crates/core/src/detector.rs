//! The toy three-level detector: a small strided backbone, a top-down
//! pyramid, per-level decoupled heads whose classification predictor is
//! the prototype layer, its training loop and prediction decoding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{assign_targets, Assignment};
use crate::autograd::{AutogradError, NodeId, Tape, Tensor};
use crate::losses::{self, component_names, pr_loss_node, rpc_loss_node, LossError, LossReport, LossWeights, PrVariant};
use crate::metrics::Detection;
use crate::proto::{self, default_taus, pyramid, LevelSpec, ProtoError, PrototypeSet, ScoreStack};
use crate::real::Real;
use crate::splgs::{generate_label_maps_with, BoxAnnotation, LabelError};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("bad model input: {0}")]
    Input(String),
    #[error("non-finite value in loss component {component}")]
    NonFinite { component: String },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Label(#[from] LabelError),
}

pub type Result<T> = std::result::Result<T, DetectorError>;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Classes including the trailing background class.
    pub classes: usize,
    /// Prototype and pyramid channel dimension.
    pub dim: usize,
    pub stem: usize,
    /// Output widths of the four strided backbone stages.
    pub widths: [usize; 4],
    pub reg_width: usize,
    /// Per-level `tau`; `None` means `(4, 8, H / 32)`.
    pub taus: Option<[u32; 3]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            classes: 4,
            dim: 32,
            stem: 8,
            widths: [16, 32, 32, 32],
            reg_width: 16,
            taus: None,
        }
    }
}

impl ModelConfig {
    pub fn taus(&self) -> [u32; 3] {
        self.taus.unwrap_or_else(|| default_taus(self.image_size))
    }

    pub fn levels(&self) -> Result<Vec<LevelSpec>> {
        Ok(pyramid(self.image_size, self.image_size, self.taus())?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.stem == 0 || self.reg_width == 0 || self.widths.contains(&0) {
            return Err(DetectorError::Input(
                "need at least two classes and non-zero widths".into(),
            ));
        }
        self.levels()?;
        Ok(())
    }

    /// Parameter names and shapes in a fixed order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let levels = self.levels()?;
        let mut out = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, k, k]));
            out.push((format!("{name}.b"), vec![cout]));
        };
        let [w0, w1, w2, w3] = self.widths;
        conv("backbone.stem", self.stem, 3, 3);
        conv("backbone.s1", w0, self.stem, 3);
        conv("backbone.s2", w1, w0, 3);
        conv("backbone.s3", w2, w1, 3);
        conv("backbone.s3b", w2, w2, 3);
        conv("backbone.s4", w3, w2, 3);
        conv("backbone.s4b", w3, w3, 3);
        conv("neck.lat3", self.dim, w1, 1);
        conv("neck.lat4", self.dim, w2, 1);
        conv("neck.lat5", self.dim, w3, 1);
        for l in &levels {
            let h = format!("head{}", l.index);
            conv(&format!("{h}.cls0"), self.dim, self.dim, 3);
            conv(&format!("{h}.cls1"), self.dim, self.dim, 3);
            conv(&format!("{h}.proto"), self.classes, self.dim, 1);
            conv(&format!("{h}.reg0"), self.reg_width, self.dim, 3);
            conv(&format!("{h}.reg1"), self.reg_width, self.reg_width, 3);
            conv(&format!("{h}.reg_out"), 4 * l.bins(), self.reg_width, 1);
        }
        Ok(out)
    }
}

/// Prior probability behind the initial foreground prototype bias.
pub const PRIOR: f64 = 0.01;

/// Named parameter tensors in [`ModelConfig::param_shapes`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl ModelParams {
    /// Seeded initialization: He-uniform kernels before ReLUs, LeCun-uniform
    /// elsewhere, zero biases except the prototype biases, which start at
    /// the class prior.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = (PRIOR / (1.0 - PRIOR)).ln() as f32;
        let mut tensors = Vec::new();
        for (name, shape) in config.param_shapes()? {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".w") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let relu_after = !(name.contains("neck") || name.contains("proto") || name.contains("reg_out"));
                let gain = if relu_after { 6.0 } else { 3.0 };
                let bound = (gain / fan_in).sqrt() as f32;
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            } else if name.ends_with("proto.b") {
                (0..n).map(|k| if k + 1 == n { -prior } else { prior }).collect()
            } else {
                vec![0.0; n]
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Same layout with every value zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let tensors = config
            .param_shapes()?
            .into_iter()
            .map(|(n, s)| {
                let t = Tensor::zeros(&s);
                (n, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| DetectorError::MissingParam(name.to_string()))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// The prototype layer of every level as plain prototype sets.
    pub fn prototype_sets(&self) -> Result<Vec<PrototypeSet>> {
        let mut out = Vec::new();
        for l in self.config.levels()? {
            let w = self.get(&format!("head{}.proto.w", l.index))?;
            let b = self.get(&format!("head{}.proto.b", l.index))?;
            out.push(PrototypeSet::new(l, self.config.classes, self.config.dim, w.data().to_vec(), b.data().to_vec())?);
        }
        Ok(out)
    }
}

/// Parameters recorded on a tape, by name.
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| DetectorError::MissingParam(name.to_string()))
    }

    pub fn ids(&self) -> &BTreeMap<String, NodeId> {
        &self.ids
    }
}

/// Records every parameter as a leaf.
pub fn bind<T: Real>(tape: &mut Tape<T>, params: &ModelParams, requires_grad: bool) -> Result<Bound> {
    let values = params.tensors.iter().map(|(name, t)| (name.as_str(), t.cast::<T>()));
    bind_values(tape, values, requires_grad)
}

/// Binds parameter values given directly in the tape's precision.
pub fn bind_values<'a, T: Real>(
    tape: &mut Tape<T>,
    values: impl IntoIterator<Item = (&'a str, Tensor<T>)>,
    requires_grad: bool,
) -> Result<Bound> {
    let mut ids = BTreeMap::new();
    for (name, mut v) in values {
        v.requires_grad = requires_grad;
        ids.insert(name.to_string(), tape.leaf(v)?);
    }
    Ok(Bound { ids })
}

/// Nodes produced for one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelNodes {
    pub level: LevelSpec,
    /// Classification features `[D, H, W]`.
    pub f_cls: NodeId,
    /// Prototype matching scores `[C, H, W]`.
    pub scores: NodeId,
    /// Regression bin logits `[4 * bins, H, W]`, side-major.
    pub reg: NodeId,
}

fn conv<T: Real>(tape: &mut Tape<T>, b: &Bound, name: &str, x: NodeId, stride: usize, relu: bool) -> Result<NodeId> {
    let y = tape.conv2d(x, b.id(&format!("{name}.w"))?, b.id(&format!("{name}.b"))?, stride)?;
    Ok(if relu { tape.relu(y)? } else { y })
}

/// Runs the network on a planar `[3, H, W]` image.
pub fn forward<T: Real>(tape: &mut Tape<T>, b: &Bound, config: &ModelConfig, image: Tensor<T>) -> Result<Vec<LevelNodes>> {
    let s = config.image_size;
    if image.shape() != [3, s, s] {
        return Err(DetectorError::Input(format!(
            "image shape {:?}, model expects [3, {s}, {s}]",
            image.shape()
        )));
    }
    let levels = config.levels()?;
    let x = tape.leaf(image)?;
    let x = conv(tape, b, "backbone.stem", x, 2, true)?;
    let x = conv(tape, b, "backbone.s1", x, 2, true)?;
    let c3 = conv(tape, b, "backbone.s2", x, 2, true)?;
    let x = conv(tape, b, "backbone.s3", c3, 2, true)?;
    let c4 = conv(tape, b, "backbone.s3b", x, 1, true)?;
    let x = conv(tape, b, "backbone.s4", c4, 2, true)?;
    let c5 = conv(tape, b, "backbone.s4b", x, 1, true)?;
    let p5 = conv(tape, b, "neck.lat5", c5, 1, false)?;
    let l4 = conv(tape, b, "neck.lat4", c4, 1, false)?;
    let up5 = tape.upsample2x(p5)?;
    let p4 = tape.add(l4, up5)?;
    let l3 = conv(tape, b, "neck.lat3", c3, 1, false)?;
    let up4 = tape.upsample2x(p4)?;
    let p3 = tape.add(l3, up4)?;
    let mut out = Vec::with_capacity(3);
    for (level, p) in levels.into_iter().zip([p3, p4, p5]) {
        let h = format!("head{}", level.index);
        let c = conv(tape, b, &format!("{h}.cls0"), p, 1, true)?;
        let f_cls = conv(tape, b, &format!("{h}.cls1"), c, 1, true)?;
        let scores = proto::response_map_node(tape, b.id(&format!("{h}.proto.w"))?, b.id(&format!("{h}.proto.b"))?, f_cls)?;
        let r = conv(tape, b, &format!("{h}.reg0"), p, 1, true)?;
        let r = conv(tape, b, &format!("{h}.reg1"), r, 1, true)?;
        let reg = conv(tape, b, &format!("{h}.reg_out"), r, 1, false)?;
        out.push(LevelNodes {
            level,
            f_cls,
            scores,
            reg,
        });
    }
    Ok(out)
}

/// Which auxiliary objectives are switched on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub rpc: bool,
    pub pr: bool,
    pub splgs: bool,
    pub pr_variant: PrVariant,
    /// Stop RPC gradients at the classification features, so that the
    /// response loss only trains the prototype layer.
    pub rpc_stop_grad: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            rpc: true,
            pr: true,
            splgs: true,
            pr_variant: PrVariant::Svd,
            rpc_stop_grad: false,
        }
    }
}

/// Loss nodes of one image.
pub struct LossNodes {
    pub total: NodeId,
    pub components: BTreeMap<String, NodeId>,
}

fn named<T>(component: &str, r: std::result::Result<T, impl Into<DetectorError>>) -> Result<T> {
    r.map_err(|e| match e.into() {
        DetectorError::Autograd(AutogradError::NonFinite { .. })
        | DetectorError::Loss(LossError::Autograd(AutogradError::NonFinite { .. })) => DetectorError::NonFinite {
            component: component.to_string(),
        },
        other => other,
    })
}

fn constant<T: Real>(tape: &mut Tape<T>, v: f64) -> Result<NodeId> {
    Ok(tape.leaf(Tensor::scalar(T::of(v)))?)
}

/// Classification, regression and distribution losses against `assignment`.
fn detection_losses<T: Real>(tape: &mut Tape<T>, outputs: &[LevelNodes], assignment: &Assignment, classes: usize) -> Result<[NodeId; 3]> {
    let npos: usize = assignment.levels.iter().map(|a| a.positives.len()).sum();
    if npos == 0 {
        return Ok([constant(tape, 0.0)?, constant(tape, 0.0)?, constant(tape, 0.0)?]);
    }
    let nreg: usize = assignment.levels.iter().map(|a| a.regression.len()).sum();
    let norm = T::of(npos as f64);
    let mut cls = Vec::new();
    let mut reg = Vec::new();
    let mut dfl = Vec::new();
    for (out, a) in outputs.iter().zip(&assignment.levels) {
        let (targets, weights) = a.cls_targets(classes);
        let t: Vec<T> = targets.iter().map(|&v| T::of(v as f64)).collect();
        let w: Vec<T> = weights.iter().map(|&v| T::of(v as f64)).collect();
        cls.push(named("cls", tape.bce(out.scores, &t, Some(&w), norm))?);
        if a.regression.is_empty() {
            continue;
        }
        let n = a.regression.len();
        let bins = out.level.bins();
        let cells: Vec<(usize, usize)> = a.regression.iter().map(|p| p.cell).collect();
        let dist: Vec<T> = a.regression.iter().flat_map(|p| p.dist).map(T::of).collect();
        let share = T::of(n as f64 / nreg as f64);
        let g = tape.gather_cells(out.reg, &cells)?;
        let logits = tape.reshape(g, &[n * 4, bins])?;
        let probs = tape.softmax_last(logits)?;
        let e = tape.expectation(probs)?;
        let pred = tape.reshape(e, &[n, 4])?;
        let r = named("reg", tape.iou_loss(pred, &dist))?;
        reg.push(tape.scale(r, share)?);
        let d = named("dfl", tape.dfl(logits, &dist))?;
        dfl.push(tape.scale(d, share)?);
    }
    Ok([tape.add_all(&cls)?, tape.add_all(&reg)?, tape.add_all(&dfl)?])
}

/// Builds every loss component for one image and their weighted sum.
pub fn build_loss<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    config: &ModelConfig,
    outputs: &[LevelNodes],
    boxes: &[BoxAnnotation],
    toggles: &LossToggles,
    weights: &LossWeights,
) -> Result<LossNodes> {
    let levels: Vec<LevelSpec> = outputs.iter().map(|o| o.level).collect();
    let assignment = assign_targets(boxes, &levels);
    let [cls, reg, dfl] = detection_losses(tape, outputs, &assignment, config.classes)?;
    let mut components = BTreeMap::new();
    components.insert("cls".to_string(), cls);
    components.insert("reg".to_string(), reg);
    components.insert("dfl".to_string(), dfl);
    for out in outputs {
        let l = out.level.index;
        let name = format!("rpc_l{l}");
        let node = if toggles.rpc {
            let labels = generate_label_maps_with(boxes, &out.level, config.classes, toggles.splgs)?;
            let scores = if toggles.rpc_stop_grad {
                let f = tape.detach(out.f_cls)?;
                let h = format!("head{l}");
                proto::response_map_node(tape, bound.id(&format!("{h}.proto.w"))?, bound.id(&format!("{h}.proto.b"))?, f)?
            } else {
                out.scores
            };
            named(&name, rpc_loss_node(tape, scores, &labels))?
        } else {
            constant(tape, 0.0)?
        };
        components.insert(name, node);
        let name = format!("pr_l{l}");
        let node = if toggles.pr {
            let p = bound.id(&format!("head{l}.proto.w"))?;
            named(&name, pr_loss_node(tape, p, toggles.pr_variant))?
        } else {
            constant(tape, 0.0)?
        };
        components.insert(name, node);
    }
    let mut terms = Vec::new();
    for name in component_names() {
        let id = *components
            .get(&name)
            .ok_or_else(|| DetectorError::Loss(LossError::MissingComponent(name.clone())))?;
        let w = weights.for_component(&name);
        terms.push(if w == 1.0 { id } else { tape.scale(id, T::of(w))? });
    }
    let total = named("total", tape.add_all(&terms))?;
    Ok(LossNodes { total, components })
}

/// Reads the component values off a tape into a report.
pub fn loss_report<T: Real>(tape: &Tape<T>, nodes: &LossNodes, weights: &LossWeights) -> Result<LossReport> {
    let values: BTreeMap<String, f64> = nodes
        .components
        .iter()
        .map(|(k, &id)| (k.clone(), tape.value(id).item().map_or(f64::NAN, |v| v.as_f64())))
        .collect();
    for (k, v) in &values {
        if !v.is_finite() {
            return Err(DetectorError::NonFinite { component: k.clone() });
        }
    }
    Ok(losses::total_loss(&values, weights)?)
}

/// Plain outputs of one level for decoding and metrics.
#[derive(Clone, Debug)]
pub struct LevelPrediction {
    pub scores: ScoreStack,
    /// `[4 * bins, H, W]` regression logits.
    pub reg: Vec<f32>,
}

impl LevelPrediction {
    pub fn level(&self) -> LevelSpec {
        self.scores.level
    }
}

/// Inference on one planar image.
pub fn predict(params: &ModelParams, image_chw: &[f32]) -> Result<Vec<LevelPrediction>> {
    let cfg = &params.config;
    let mut tape = Tape::<f32>::new();
    let b = bind(&mut tape, params, false)?;
    let img = Tensor::new(vec![3, cfg.image_size, cfg.image_size], image_chw.to_vec())?;
    let outs = forward(&mut tape, &b, cfg, img)?;
    Ok(outs
        .iter()
        .map(|o| LevelPrediction {
            scores: ScoreStack {
                level: o.level,
                classes: cfg.classes,
                scores: tape.value(o.scores).data().to_vec(),
            },
            reg: tape.value(o.reg).data().to_vec(),
        })
        .collect())
}

/// Score threshold, NMS overlap and detection cap used when decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Keep a cell only when its class score is a maximum of its 3x3
    /// neighbourhood on that class plane.
    pub local_peaks: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.6,
            max_detections: 100,
            local_peaks: true,
        }
    }
}

/// Expected bin of a logit row.
fn expected_bin(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().enumerate().map(|(b, v)| b as f64 * v / z).sum()
}

/// Candidate boxes of one level before suppression.
pub fn level_candidates(pred: &LevelPrediction, score_threshold: f64, local_peaks: bool) -> Vec<Detection> {
    let level = pred.level();
    let n = level.cells();
    let bins = level.bins();
    let fg = pred.scores.classes - 1;
    let s = level.stride as f64;
    let mut out = Vec::new();
    for c in 0..n {
        let (k, score) = (0..fg)
            .map(|k| (k, pred.scores.scores[k * n + c] as f64))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        if score < score_threshold {
            continue;
        }
        let (i, j) = (c / level.width, c % level.width);
        if local_peaks && !is_peak(&pred.scores.scores[k * n..(k + 1) * n], level.height, level.width, i, j) {
            continue;
        }
        let d: Vec<f64> = (0..4)
            .map(|side| {
                let row: Vec<f64> = (0..bins).map(|b| pred.reg[(side * bins + b) * n + c] as f64).collect();
                expected_bin(&row) * s
            })
            .collect();
        let (ax, ay) = level.anchor(i, j);
        out.push(Detection {
            bbox: BoxAnnotation::from_corners(k, ax - d[0], ay - d[1], ax + d[2], ay + d[3]),
            confidence: score,
        });
    }
    out
}

/// True when no 3x3 neighbour exceeds cell `(i, j)`.
fn is_peak(plane: &[f32], h: usize, w: usize, i: usize, j: usize) -> bool {
    let v = plane[i * w + j];
    (i.saturating_sub(1)..(i + 2).min(h)).all(|y| (j.saturating_sub(1)..(j + 2).min(w)).all(|x| plane[y * w + x] <= v))
}

/// Greedy per-class non-maximum suppression; ties keep the earlier box.
pub fn nms(mut dets: Vec<Detection>, iou: f64, max_detections: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if keep.iter().all(|k| k.bbox.class != d.bbox.class || k.bbox.iou(&d.bbox) <= iou) {
            keep.push(d);
            if keep.len() == max_detections {
                break;
            }
        }
    }
    dets.clear();
    keep
}

/// Decodes detections from the given levels (all of them, or one).
pub fn decode(preds: &[LevelPrediction], cfg: &DecodeConfig, only_level: Option<usize>) -> Vec<Detection> {
    let mut all = Vec::new();
    for p in preds {
        if only_level.is_none_or(|l| l == p.level().index) {
            all.extend(level_candidates(p, cfg.score_threshold, cfg.local_peaks));
        }
    }
    nms(all, cfg.nms_iou, cfg.max_detections)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 64,
            classes: 3,
            dim: 4,
            stem: 2,
            widths: [2, 3, 3, 3],
            reg_width: 2,
            taus: Some([2, 4, 4]),
        }
    }

    #[test]
    fn grid_sizes() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 5).unwrap();
        let img = vec![0.5f32; 3 * 256 * 256];
        let preds = predict(&p, &img).unwrap();
        let sizes: Vec<(usize, usize)> = preds.iter().map(|p| (p.level().height, p.level().width)).collect();
        assert_eq!(sizes, vec![(32, 32), (16, 16), (8, 8)]);
        assert_eq!(preds[0].reg.len(), 4 * 5 * 32 * 32);
    }

    #[test]
    fn zero_model_scores_half() {
        let cfg = tiny();
        let p = ModelParams::zeros(&cfg).unwrap();
        let preds = predict(&p, &vec![0.3; 3 * 64 * 64]).unwrap();
        assert!(preds.iter().all(|l| l.scores.scores.iter().all(|&s| s == 0.5)));
    }

    #[test]
    fn forward_is_deterministic_and_rejects_bad_sizes() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 1).unwrap();
        let img: Vec<f32> = (0..3 * 64 * 64).map(|i| (i % 17) as f32 / 17.0).collect();
        let a = predict(&p, &img).unwrap();
        let b = predict(&p, &img).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.scores.scores == y.scores.scores && x.reg == y.reg));
        assert!(predict(&p, &img[..3 * 32 * 32]).is_err());
        let bad = ModelConfig {
            image_size: 48,
            ..tiny()
        };
        assert!(ModelParams::init(&bad, 1).is_err());
    }

    #[test]
    fn one_hot_distribution_decodes_exactly() {
        let level = LevelSpec {
            index: 1,
            stride: 8,
            tau: 4,
            height: 2,
            width: 2,
        };
        let bins = level.bins();
        let n = level.cells();
        let mut scores = vec![0f32; 3 * n];
        scores[1 * n] = 0.9;
        let mut reg = vec![-40f32; 4 * bins * n];
        for side in 0..4 {
            reg[(side * bins + 3) * n] = 40.0;
        }
        let pred = LevelPrediction {
            scores: ScoreStack {
                level,
                classes: 3,
                scores,
            },
            reg,
        };
        let d = decode(&[pred.clone()], &DecodeConfig::default(), None);
        assert_eq!(d.len(), 1);
        let (x1, y1, x2, y2) = d[0].bbox.corners();
        assert!((x1 - (4.0 - 24.0)).abs() < 1e-9 && (x2 - 28.0).abs() < 1e-9);
        assert!((y1 + 20.0).abs() < 1e-9 && (y2 - 28.0).abs() < 1e-9);
        assert_eq!(d[0].bbox.class, 1);
        let high = DecodeConfig {
            score_threshold: 0.95,
            ..DecodeConfig::default()
        };
        assert!(decode(&[pred], &high, None).is_empty());
    }

    #[test]
    fn nms_keeps_one_of_two_identical() {
        let b = BoxAnnotation::new(0, 10.0, 10.0, 8.0, 8.0);
        let d = nms(
            vec![
                Detection { bbox: b, confidence: 0.8 },
                Detection { bbox: b, confidence: 0.9 },
            ],
            0.5,
            10,
        );
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].confidence, 0.9);
    }

    #[test]
    fn loss_components_are_all_present() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let b = bind(&mut tape, &p, true).unwrap();
        let img = Tensor::new(vec![3, 64, 64], vec![0.2; 3 * 64 * 64]).unwrap();
        let outs = forward(&mut tape, &b, &cfg, img).unwrap();
        let boxes = [BoxAnnotation::new(0, 20.0, 20.0, 12.0, 12.0), BoxAnnotation::new(1, 44.0, 40.0, 30.0, 20.0)];
        let w = LossWeights::default();
        let nodes = build_loss(&mut tape, &b, &cfg, &outs, &boxes, &LossToggles::default(), &w).unwrap();
        let r = loss_report(&tape, &nodes, &w).unwrap();
        assert_eq!(r.components.len(), 9);
        assert!((r.total - r.components.values().sum::<f64>()).abs() < 1e-9);
        assert!(r.components["pr_l1"] > 0.0 && r.components["rpc_l2"] > 0.0);
        let off = LossToggles {
            rpc: false,
            pr: false,
            ..LossToggles::default()
        };
        let nodes = build_loss(&mut tape, &b, &cfg, &outs, &boxes, &off, &w).unwrap();
        let r = loss_report(&tape, &nodes, &w).unwrap();
        assert_eq!(r.components["rpc_l1"], 0.0);
        assert_eq!(r.components["pr_l3"], 0.0);
    }
}
