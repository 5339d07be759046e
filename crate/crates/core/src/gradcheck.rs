//! Finite-difference suite for every tape operator and the training
//! objective. Each case is run over a range of seeds in 64-bit arithmetic
//! and reports its worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::autograd::{finite_diff_check, AutogradError, NodeId, Tape, Tensor};
use crate::detector::{self, DetectorError, LossToggles, ModelConfig, ModelParams};
use crate::losses::{self, LossError, LossWeights, PrVariant};
use crate::proto::{pyramid, response_map_node};
use crate::splgs::{generate_label_maps, BoxAnnotation};

/// Relative error every case must stay under.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step for per-element checks.
pub const EPS: f64 = 1e-5;
/// Step along a random direction for the whole-model check.
pub const DIRECTIONAL_EPS: f64 = 1e-6;
/// One-sided differences further apart than this multiple of
/// [`TOLERANCE`] mark a non-smooth point along the direction.
pub const KINK_RATIO: f64 = 10.0;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("case {case}, seed {seed}: {source}")]
    Autograd {
        case: String,
        seed: u64,
        #[source]
        source: AutogradError,
    },
    #[error("case {case}, seed {seed}: {reason}")]
    Case { case: String, seed: u64, reason: String },
}

/// Outcome of one case over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub seeds: usize,
    pub worst: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

type Builder = fn(&mut Tape<f64>, NodeId, &mut ChaCha8Rng) -> Result<NodeId, AutogradError>;

struct OpCase {
    name: &'static str,
    /// Input shape and value range for the differentiated leaf.
    shape: fn(&mut ChaCha8Rng) -> Vec<usize>,
    range: (f64, f64),
    build: Builder,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn constant(tape: &mut Tape<f64>, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<NodeId, AutogradError> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng)).collect();
    tape.leaf(Tensor::new(shape.to_vec(), data)?)
}

/// Reduces any node to a scalar through a fixed random projection, so
/// that every output element carries a distinct weight.
fn project(tape: &mut Tape<f64>, y: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId, AutogradError> {
    let n = tape.value(y).numel();
    let flat = tape.reshape(y, &[1, n])?;
    let w = constant(tape, &[n, 1], rng)?;
    let out = tape.matmul(flat, w)?;
    tape.sum(out)
}

fn chw(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..=3), rng.random_range(3..=7), rng.random_range(3..=7)]
}

fn conv(tape: &mut Tape<f64>, x: NodeId, rng: &mut ChaCha8Rng, k: usize, stride: usize) -> Result<NodeId, AutogradError> {
    let cin = tape.value(x).shape()[0];
    let cout = rng.random_range(1..=3);
    let w = constant(tape, &[cout, cin, k, k], rng)?;
    let b = constant(tape, &[cout], rng)?;
    let y = tape.conv2d(x, w, b, stride)?;
    project(tape, y, rng)
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv3x3",
            shape: chw,
            range: (-1.0, 1.0),
            build: |t, x, r| conv(t, x, r, 3, 1),
        },
        OpCase {
            name: "conv3x3 stride 2",
            shape: chw,
            range: (-1.0, 1.0),
            build: |t, x, r| conv(t, x, r, 3, 2),
        },
        OpCase {
            name: "conv1x1",
            shape: chw,
            range: (-1.0, 1.0),
            build: |t, x, r| conv(t, x, r, 1, 1),
        },
        OpCase {
            name: "conv3x3 weights",
            shape: |r| vec![r.random_range(1..=3), 2, 3, 3],
            range: (-1.0, 1.0),
            build: |t, w, r| {
                let cout = t.value(w).shape()[0];
                let x = constant(t, &[2, 5, 6], r)?;
                let b = constant(t, &[cout], r)?;
                let y = t.conv2d(x, w, b, 1)?;
                project(t, y, r)
            },
        },
        OpCase {
            name: "conv bias",
            shape: |r| vec![r.random_range(1..=4)],
            range: (-1.0, 1.0),
            build: |t, b, r| {
                let cout = t.value(b).shape()[0];
                let x = constant(t, &[2, 4, 4], r)?;
                let w = constant(t, &[cout, 2, 3, 3], r)?;
                let y = t.conv2d(x, w, b, 2)?;
                project(t, y, r)
            },
        },
        OpCase {
            name: "relu",
            shape: |r| vec![r.random_range(2..=12)],
            range: (-2.0, 2.0),
            build: |t, x, r| {
                let y = t.relu(x)?;
                project(t, y, r)
            },
        },
        OpCase {
            name: "sigmoid",
            shape: |r| vec![r.random_range(2..=12)],
            range: (-4.0, 4.0),
            build: |t, x, r| {
                let y = t.sigmoid(x)?;
                project(t, y, r)
            },
        },
        OpCase {
            name: "add (shared input)",
            shape: |r| vec![r.random_range(2..=12)],
            range: (-1.0, 1.0),
            build: |t, x, r| {
                let shape = t.value(x).shape().to_vec();
                let c = constant(t, &shape, r)?;
                let a = t.add(x, c)?;
                let y = t.add(a, x)?;
                project(t, y, r)
            },
        },
        OpCase {
            name: "scale",
            shape: |r| vec![r.random_range(2..=12)],
            range: (-1.0, 1.0),
            build: |t, x, r| {
                let y = t.scale(x, -1.7)?;
                project(t, y, r)
            },
        },
        OpCase {
            name: "matmul",
            shape: |r| vec![r.random_range(1..=4), r.random_range(1..=5)],
            range: (-1.0, 1.0),
            build: |t, a, r| {
                let (m, k) = (t.value(a).shape()[0], t.value(a).shape()[1]);
                let n = r.random_range(1..=4);
                let b = constant(t, &[k, n], r)?;
                let left = t.matmul(a, b)?;
                let c = constant(t, &[n, m], r)?;
                let right = t.matmul(c, a)?;
                let l = project(t, left, r)?;
                let rr = project(t, right, r)?;
                t.add(l, rr)
            },
        },
        OpCase {
            name: "upsample2x",
            shape: chw,
            range: (-1.0, 1.0),
            build: |t, x, r| {
                let y = t.upsample2x(x)?;
                project(t, y, r)
            },
        },
        OpCase {
            name: "resize_bilinear",
            shape: chw,
            range: (-1.0, 1.0),
            build: |t, x, r| {
                let (h, w) = (r.random_range(2..=11), r.random_range(2..=11));
                let y = t.resize_bilinear(x, h, w)?;
                project(t, y, r)
            },
        },
        OpCase {
            name: "sum",
            shape: chw,
            range: (-1.0, 1.0),
            build: |t, x, _| {
                let y = t.sigmoid(x)?;
                t.sum(y)
            },
        },
        OpCase {
            name: "mean",
            shape: chw,
            range: (-1.0, 1.0),
            build: |t, x, _| {
                let y = t.sigmoid(x)?;
                t.mean(y)
            },
        },
        OpCase {
            name: "softmax_last",
            shape: |r| vec![r.random_range(1..=4), r.random_range(2..=6)],
            range: (-3.0, 3.0),
            build: |t, x, r| {
                let y = t.softmax_last(x)?;
                project(t, y, r)
            },
        },
        OpCase {
            name: "bce",
            shape: |r| vec![r.random_range(2..=16)],
            range: (0.05, 0.95),
            build: |t, p, r| {
                let n = t.value(p).numel();
                let y: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
                let w: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
                t.bce(p, &y, Some(&w), 3.0)
            },
        },
        OpCase {
            name: "gather_cells",
            shape: chw,
            range: (-1.0, 1.0),
            build: |t, x, r| {
                let s = t.value(x).shape().to_vec();
                let cells: Vec<_> = (0..4).map(|_| (r.random_range(0..s[1]), r.random_range(0..s[2]))).collect();
                let y = t.gather_cells(x, &cells)?;
                project(t, y, r)
            },
        },
        OpCase {
            name: "expectation",
            shape: |r| vec![r.random_range(1..=4), r.random_range(2..=8)],
            range: (-2.0, 2.0),
            build: |t, x, r| {
                // softmax rows put near-zero gradients where the mean sits on a bin
                let p = t.sigmoid(x)?;
                let y = t.expectation(p)?;
                project(t, y, r)
            },
        },
        OpCase {
            name: "dfl",
            shape: |r| vec![r.random_range(1..=6), r.random_range(2..=9)],
            range: (-2.0, 2.0),
            build: |t, x, r| {
                let s = t.value(x).shape().to_vec();
                let top = (s[1] - 1) as f64;
                let targets: Vec<f64> = (0..s[0]).map(|_| r.random_range(0.0..top)).collect();
                t.dfl(x, &targets)
            },
        },
        OpCase {
            name: "iou_loss",
            shape: |r| vec![r.random_range(1..=5), 4],
            range: (0.5, 4.0),
            build: |t, x, r| {
                let n = t.value(x).shape()[0];
                let target: Vec<f64> = (0..4 * n).map(|_| r.random_range(0.5..4.0)).collect();
                t.iou_loss(x, &target)
            },
        },
        OpCase {
            name: "pr_svd",
            shape: |r| vec![r.random_range(2..=8), r.random_range(2..=20)],
            range: (-1.0, 1.0),
            build: |t, x, _| t.pr_svd(x),
        },
        OpCase {
            name: "pr_cosine",
            shape: |r| vec![r.random_range(2..=6), r.random_range(2..=12)],
            range: (-1.0, 1.0),
            build: |t, x, _| t.pr_cosine(x),
        },
        OpCase {
            name: "pr_pop",
            shape: |r| vec![r.random_range(2..=6), r.random_range(2..=12)],
            range: (-1.0, 1.0),
            build: |t, x, _| t.pr_pop(x),
        },
        OpCase {
            name: "reshape",
            shape: chw,
            range: (-1.0, 1.0),
            build: |t, x, r| {
                let n = t.value(x).numel();
                let y = t.reshape(x, &[n])?;
                let y = t.sigmoid(y)?;
                project(t, y, r)
            },
        },
    ]
}

fn seeded(case: &str, seed: u64) -> ChaCha8Rng {
    let tag = case.bytes().fold(0u64, |h, b| h.wrapping_mul(0x100_0000_01b3).wrapping_add(b as u64));
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

/// Draws `n` values in `[lo, hi)` kept at least `gap` away from zero, so
/// that checks do not straddle the kink of `relu` or `|.|`.
fn sample_values(rng: &mut ChaCha8Rng, n: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if v.abs() > 1e-2 {
                break v;
            }
        })
        .collect()
}

fn run_case(
    name: &str,
    seeds: &[u64],
    mut one: impl FnMut(u64) -> Result<f64, GradCheckError>,
) -> Result<CaseResult, GradCheckError> {
    let mut worst = 0.0;
    let mut worst_seed = seeds.first().copied().unwrap_or(0);
    for &s in seeds {
        let e = one(s)?;
        if e > worst || e.is_nan() {
            worst = e;
            worst_seed = s;
        }
    }
    Ok(CaseResult {
        name: name.to_string(),
        seeds: seeds.len(),
        worst,
        worst_seed,
        passed: worst < TOLERANCE,
    })
}

/// Checks each tape operator against central differences.
pub fn operator_checks(seeds: &[u64]) -> Result<Vec<CaseResult>, GradCheckError> {
    op_cases()
        .into_iter()
        .map(|case| {
            run_case(case.name, seeds, |seed| {
                let mut rng = seeded(case.name, seed);
                let shape = (case.shape)(&mut rng);
                let data = sample_values(&mut rng, shape.iter().product(), case.range);
                let x = Tensor::new(shape, data).map_err(|source| GradCheckError::Autograd {
                    case: case.name.into(),
                    seed,
                    source,
                })?;
                // every evaluation replays the same constants
                let state = rng.clone();
                finite_diff_check(|t, leaf| (case.build)(t, leaf, &mut state.clone()), &x, EPS).map_err(|source| {
                    GradCheckError::Autograd {
                        case: case.name.into(),
                        seed,
                        source,
                    }
                })
            })
        })
        .collect()
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize, size: f64, classes: usize) -> Vec<BoxAnnotation> {
    (0..n)
        .map(|_| {
            let w = rng.random_range(4.0..size / 2.0);
            let h = rng.random_range(4.0..size / 2.0);
            BoxAnnotation::new(
                rng.random_range(0..classes - 1),
                rng.random_range(w / 2.0..size - w / 2.0),
                rng.random_range(h / 2.0..size - h / 2.0),
                w,
                h,
            )
        })
        .collect()
}

fn loss_err(case: &str, seed: u64) -> impl Fn(LossError) -> GradCheckError + '_ {
    move |e| match e {
        LossError::Autograd(source) => GradCheckError::Autograd {
            case: case.into(),
            seed,
            source,
        },
        other => GradCheckError::Case {
            case: case.into(),
            seed,
            reason: other.to_string(),
        },
    }
}

fn rpc_case(seed: u64, through_prototypes: bool) -> Result<f64, GradCheckError> {
    let case = if through_prototypes { "rpc_loss (prototypes)" } else { "rpc_loss (scores)" };
    let mut rng = seeded(case, seed);
    let classes = rng.random_range(2..=4);
    let size = 32 * rng.random_range(1..=2);
    let levels = pyramid(size, size, [2, 4, 4]).map_err(|e| GradCheckError::Case {
        case: case.into(),
        seed,
        reason: e.to_string(),
    })?;
    let level = levels[rng.random_range(0..2)];
    let nboxes = rng.random_range(1..=3);
    let boxes = random_boxes(&mut rng, nboxes, size as f64, classes);
    let labels = generate_label_maps(&boxes, &level, classes).map_err(|e| GradCheckError::Case {
        case: case.into(),
        seed,
        reason: e.to_string(),
    })?;
    let (h, w) = (level.height, level.width);
    let dim = 4;
    let err = loss_err(case, seed);
    if through_prototypes {
        let p = Tensor::new(vec![classes, dim, 1, 1], sample_values(&mut rng, classes * dim, (-1.0, 1.0)))
            .map_err(|e| err(e.into()))?;
        let feats = sample_values(&mut rng, dim * h * w, (-1.0, 1.0));
        let bias = sample_values(&mut rng, classes, (-0.5, 0.5));
        finite_diff_check(
            |t, leaf| {
                let f = t.leaf(Tensor::new(vec![dim, h, w], feats.clone())?)?;
                let b = t.leaf(Tensor::new(vec![classes], bias.clone())?)?;
                let s = response_map_node(t, leaf, b, f)?;
                losses::rpc_loss_node(t, s, &labels).map_err(|e| match e {
                    LossError::Autograd(a) => a,
                    other => AutogradError::InvalidArgument {
                        op: "rpc_loss",
                        reason: other.to_string(),
                    },
                })
            },
            &p,
            EPS,
        )
        .map_err(|e| err(e.into()))
    } else {
        let z = Tensor::new(vec![classes, h, w], sample_values(&mut rng, classes * h * w, (-3.0, 3.0)))
            .map_err(|e| err(e.into()))?;
        finite_diff_check(
            |t, leaf| {
                let s = t.sigmoid(leaf)?;
                losses::rpc_loss_node(t, s, &labels).map_err(|e| match e {
                    LossError::Autograd(a) => a,
                    other => AutogradError::InvalidArgument {
                        op: "rpc_loss",
                        reason: other.to_string(),
                    },
                })
            },
            &z,
            EPS,
        )
        .map_err(|e| err(e.into()))
    }
}

fn pr_case(seed: u64, variant: PrVariant) -> Result<f64, GradCheckError> {
    let case = "pr_loss";
    let mut rng = seeded(case, seed);
    let c = rng.random_range(2..=8);
    let d = rng.random_range(2..=64);
    let err = loss_err(case, seed);
    let p = Tensor::new(vec![c, d], sample_values(&mut rng, c * d, (-1.0, 1.0))).map_err(|e| err(e.into()))?;
    finite_diff_check(
        |t, leaf| {
            losses::pr_loss_node(t, leaf, variant).map_err(|e| match e {
                LossError::Autograd(a) => a,
                other => AutogradError::InvalidArgument {
                    op: "pr_loss",
                    reason: other.to_string(),
                },
            })
        },
        &p,
        EPS,
    )
    .map_err(|e| err(e.into()))
}

fn dfl_case(seed: u64) -> Result<f64, GradCheckError> {
    let case = "dfl";
    let mut rng = seeded(case, seed);
    let bins = rng.random_range(3..=17);
    let m = rng.random_range(1..=8);
    let err = loss_err(case, seed);
    let logits = Tensor::new(vec![m, bins], sample_values(&mut rng, m * bins, (-2.0, 2.0))).map_err(|e| err(e.into()))?;
    let targets: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..(bins - 1) as f64)).collect();
    finite_diff_check(|t, leaf| t.dfl(leaf, &targets), &logits, EPS).map_err(|e| err(e.into()))
}

/// Small model used by the whole-objective check.
pub fn check_model() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        classes: 3,
        dim: 4,
        stem: 3,
        widths: [4, 4, 4, 4],
        reg_width: 3,
        taus: Some([2, 4, 4]),
    }
}

fn total_loss_at(
    cfg: &ModelConfig,
    names: &[String],
    values: &[Tensor<f64>],
    image: &Tensor<f64>,
    boxes: &[BoxAnnotation],
    toggles: &LossToggles,
    grad: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>), DetectorError> {
    let mut tape = Tape::<f64>::new();
    let bound = detector::bind_values(&mut tape, names.iter().map(String::as_str).zip(values.iter().cloned()), grad)?;
    let outs = detector::forward(&mut tape, &bound, cfg, image.clone())?;
    let nodes = detector::build_loss(&mut tape, &bound, cfg, &outs, boxes, toggles, &LossWeights::default())?;
    let total = tape.value(nodes.total).data()[0];
    if !grad {
        return Ok((total, None));
    }
    let g = tape.backward(nodes.total)?;
    let mut out = Vec::with_capacity(names.len());
    for (name, v) in names.iter().zip(values) {
        let id = bound.id(name)?;
        out.push(g.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; v.numel()]));
    }
    Ok((total, Some(out)))
}

/// Whole-objective check: the tape gradient of the summed total, taken
/// against every parameter of a small detector, is compared with central
/// differences along three random directions and, element by element, on
/// the level-1 prototypes.
fn total_case(seed: u64) -> Result<f64, GradCheckError> {
    let case = "total";
    let fail = |reason: String| GradCheckError::Case {
        case: case.into(),
        seed,
        reason,
    };
    let mut rng = seeded(case, seed);
    let cfg = check_model();
    let params = ModelParams::init(&cfg, seed).map_err(|e| fail(e.to_string()))?;
    let names: Vec<String> = params.tensors.iter().map(|(n, _)| n.clone()).collect();
    // perturb the prior bias so that scores start away from saturation
    let base: Vec<Tensor<f64>> = params
        .tensors
        .iter()
        .map(|(_, t)| {
            let mut v = t.cast::<f64>();
            for x in v.data_mut() {
                *x += 0.05 * normal(&mut rng);
            }
            v
        })
        .collect();
    let s = cfg.image_size;
    let image = Tensor::new(vec![3, s, s], (0..3 * s * s).map(|_| rng.random_range(0.0..1.0)).collect())
        .map_err(|e| fail(e.to_string()))?;
    let nboxes = rng.random_range(1..=4);
    let boxes = random_boxes(&mut rng, nboxes, s as f64, cfg.classes);
    let toggles = LossToggles {
        pr_variant: [PrVariant::Svd, PrVariant::Cosine, PrVariant::Pop][(seed % 3) as usize],
        ..LossToggles::default()
    };
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, GradCheckError> {
        let (v, _) = total_loss_at(&cfg, &names, vals, &image, &boxes, &toggles, false).map_err(|e| fail(e.to_string()))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(fail("non-finite total".into()))
        }
    };
    let (_, grads) = total_loss_at(&cfg, &names, &base, &image, &boxes, &toggles, true).map_err(|e| fail(e.to_string()))?;
    let grads = grads.unwrap_or_default();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let dir: Vec<Vec<f64>> = base.iter().map(|t| (0..t.numel()).map(|_| normal(&mut rng)).collect()).collect();
        let step = |h: f64| -> Vec<Tensor<f64>> {
            base.iter()
                .zip(&dir)
                .map(|(t, d)| {
                    let mut v = t.clone();
                    for (x, dx) in v.data_mut().iter_mut().zip(d) {
                        *x += h * dx;
                    }
                    v
                })
                .collect()
        };
        let analytic: f64 = grads
            .iter()
            .zip(&dir)
            .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        // A max/min switch closer than the step shows up as one-sided
        // differences that disagree; shrink the step past it.
        let centre = eval(&base)?;
        let mut h = DIRECTIONAL_EPS;
        let mut err = f64::INFINITY;
        for _ in 0..3 {
            let (up, down) = (eval(&step(h))?, eval(&step(-h))?);
            err = rel(analytic, (up - down) / (2.0 * h));
            let kinked = rel((up - centre) / h, (centre - down) / h) > KINK_RATIO * TOLERANCE;
            if err < TOLERANCE || !kinked {
                break;
            }
            h /= 10.0;
        }
        worst = worst.max(err);
    }
    let pi = names
        .iter()
        .position(|n| n == "head1.proto.w")
        .ok_or_else(|| fail("no head1.proto.w".into()))?;
    for e in 0..base[pi].numel() {
        let mut up = base.clone();
        up[pi].data_mut()[e] += EPS;
        let mut down = base.clone();
        down[pi].data_mut()[e] -= EPS;
        let numeric = (eval(&up)? - eval(&down)?) / (2.0 * EPS);
        worst = worst.max(rel(grads[pi][e], numeric));
    }
    Ok(worst)
}

/// Checks the training losses: RPC through scores and through the
/// prototypes, each regularizer family, DFL and the composed total.
pub fn loss_checks(seeds: &[u64]) -> Result<Vec<CaseResult>, GradCheckError> {
    Ok(vec![
        run_case("rpc_loss (scores)", seeds, |s| rpc_case(s, false))?,
        run_case("rpc_loss (prototypes)", seeds, |s| rpc_case(s, true))?,
        run_case("pr_loss svd", seeds, |s| pr_case(s, PrVariant::Svd))?,
        run_case("pr_loss cosine", seeds, |s| pr_case(s, PrVariant::Cosine))?,
        run_case("pr_loss pop", seeds, |s| pr_case(s, PrVariant::Pop))?,
        run_case("dfl", seeds, dfl_case)?,
        run_case("total", seeds, total_case)?,
    ])
}

/// Operators followed by losses.
pub fn full_suite(seeds: &[u64]) -> Result<Vec<CaseResult>, GradCheckError> {
    let mut out = operator_checks(seeds)?;
    out.extend(loss_checks(seeds)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operators_pass_on_a_few_seeds() {
        for r in operator_checks(&[1, 2, 3]).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn losses_pass_on_a_few_seeds() {
        for r in loss_checks(&[4, 5]).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // detach hides the dependence from the tape, so the numeric side disagrees
        let x = Tensor::from_slice(&[3], &[0.3, -0.2, 0.9]).unwrap();
        let err = finite_diff_check(
            |t, leaf| {
                let d = t.detach(leaf)?;
                let y = t.sigmoid(d)?;
                t.sum(y)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err > TOLERANCE);
    }
}
