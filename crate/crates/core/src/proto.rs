//! Prototype matching on pyramid feature grids and cross-level saliency.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{self, bilinear_axis, NodeId, Tape};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("level mismatch: prototypes for level {protos}, features for level {grid}")]
    LevelMismatch { protos: usize, grid: usize },
    #[error("missing pyramid level {0}")]
    MissingLevel(usize),
    #[error("class {class} out of range for {count} classes")]
    ClassOutOfRange { class: usize, count: usize },
    #[error("invalid size: {0}")]
    BadSize(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Geometry of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    /// 1-based level index.
    pub index: usize,
    /// Input pixels per grid cell.
    pub stride: usize,
    /// Scale coefficient; the level regresses sizes up to `tau * stride`.
    pub tau: u32,
    pub height: usize,
    pub width: usize,
}

impl LevelSpec {
    pub fn upper_bound(&self) -> f64 {
        self.tau as f64 * self.stride as f64
    }

    /// Number of offset bins per box side (`tau + 1`).
    pub fn bins(&self) -> usize {
        self.tau as usize + 1
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Anchor point of cell `(i, j)` in input pixels (the cell center).
    pub fn anchor(&self, i: usize, j: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
    }
}

/// Strides of the three pyramid levels.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// The default scale coefficients `(4, 8, H / 32)`.
pub fn default_taus(image_height: usize) -> [u32; 3] {
    [4, 8, (image_height / STRIDES[2]) as u32]
}

/// Level specs for an image whose sides are multiples of 32.
pub fn pyramid(height: usize, width: usize, taus: [u32; 3]) -> Result<Vec<LevelSpec>, ProtoError> {
    if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
        return Err(ProtoError::BadSize(format!(
            "image {height}x{width} must have non-zero sides divisible by 32"
        )));
    }
    let levels: Vec<LevelSpec> = STRIDES
        .iter()
        .zip(taus)
        .enumerate()
        .map(|(i, (&stride, tau))| LevelSpec {
            index: i + 1,
            stride,
            tau,
            height: height / stride,
            width: width / stride,
        })
        .collect();
    validate_levels(&levels)?;
    Ok(levels)
}

/// Strides strictly increase, taus are positive and range bounds never shrink.
pub fn validate_levels(levels: &[LevelSpec]) -> Result<(), ProtoError> {
    for (i, l) in levels.iter().enumerate() {
        if l.tau == 0 {
            return Err(ProtoError::BadSize(format!("level {} has tau 0", l.index)));
        }
        if i > 0 {
            let prev = &levels[i - 1];
            if l.stride <= prev.stride || l.upper_bound() < prev.upper_bound() {
                return Err(ProtoError::BadSize(format!(
                    "level {} (stride {}, bound {}) does not extend level {} (stride {}, bound {})",
                    l.index,
                    l.stride,
                    l.upper_bound(),
                    prev.index,
                    prev.stride,
                    prev.upper_bound()
                )));
            }
        }
    }
    Ok(())
}

/// A level's feature map, stored channels-first as `[D, H, W]`.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    pub level: LevelSpec,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(level: LevelSpec, channels: usize, values: Vec<f32>) -> Result<Self, ProtoError> {
        if values.len() != channels * level.cells() {
            return Err(ProtoError::Dimension(format!(
                "{} values for {} channels on a {}x{} grid",
                values.len(),
                channels,
                level.height,
                level.width
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProtoError::NonFinite("feature grid"));
        }
        Ok(Self {
            level,
            channels,
            values,
        })
    }

    pub fn feature(&self, i: usize, j: usize) -> impl Iterator<Item = f32> + '_ {
        let cells = self.level.cells();
        let at = i * self.level.width + j;
        (0..self.channels).map(move |d| self.values[d * cells + at])
    }
}

/// Class prototypes of one level: a `C x D` matrix plus per-class biases.
/// The last class is background.
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    pub level: LevelSpec,
    pub classes: usize,
    pub dim: usize,
    pub prototypes: Vec<f32>,
    pub biases: Vec<f32>,
}

impl PrototypeSet {
    pub fn new(
        level: LevelSpec,
        classes: usize,
        dim: usize,
        prototypes: Vec<f32>,
        biases: Vec<f32>,
    ) -> Result<Self, ProtoError> {
        if classes < 2 {
            return Err(ProtoError::Dimension(format!(
                "need a foreground class plus background, got {classes} classes"
            )));
        }
        if prototypes.len() != classes * dim || biases.len() != classes {
            return Err(ProtoError::Dimension(format!(
                "{} prototype values and {} biases for {classes}x{dim}",
                prototypes.len(),
                biases.len()
            )));
        }
        if prototypes.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(ProtoError::NonFinite("prototypes"));
        }
        Ok(Self {
            level,
            classes,
            dim,
            prototypes,
            biases,
        })
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.prototypes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn background(&self) -> usize {
        self.classes - 1
    }
}

/// Matching scores `[C, H, W]` in (0, 1) for one level.
#[derive(Clone, Debug)]
pub struct ScoreStack {
    pub level: LevelSpec,
    pub classes: usize,
    pub scores: Vec<f32>,
}

impl ScoreStack {
    pub fn plane(&self, k: usize) -> &[f32] {
        let n = self.level.cells();
        &self.scores[k * n..(k + 1) * n]
    }

    pub fn at(&self, k: usize, i: usize, j: usize) -> f32 {
        self.scores[(k * self.level.height + i) * self.level.width + j]
    }
}

/// A dense single-channel map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self, ProtoError> {
        if values.len() != height * width {
            return Err(ProtoError::Dimension(format!(
                "{} values for a {height}x{width} plane",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.width + j]
    }
}

/// Combined class saliency at input resolution.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    pub class: usize,
    pub map: Plane,
}

/// Interpolation used to bring level responses to input resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `S[k, i, j] = sigmoid(p_k . f_ij + b_k)`.
pub fn response_map(protos: &PrototypeSet, grid: &FeatureGrid) -> Result<ScoreStack, ProtoError> {
    if protos.dim != grid.channels {
        return Err(ProtoError::Dimension(format!(
            "prototype dimension {} vs feature channels {}",
            protos.dim, grid.channels
        )));
    }
    if protos.level.index != grid.level.index {
        return Err(ProtoError::LevelMismatch {
            protos: protos.level.index,
            grid: grid.level.index,
        });
    }
    let cells = grid.level.cells();
    let mut scores = vec![0f32; protos.classes * cells];
    for k in 0..protos.classes {
        let p = protos.row(k);
        let b = protos.biases[k] as f64;
        for c in 0..cells {
            let dot: f64 = p
                .iter()
                .enumerate()
                .map(|(d, &pv)| pv as f64 * grid.values[d * cells + c] as f64)
                .sum();
            scores[k * cells + c] = stable_sigmoid(dot + b) as f32;
        }
    }
    Ok(ScoreStack {
        level: grid.level,
        classes: protos.classes,
        scores,
    })
}

/// Differentiable response map: `sigmoid(conv1x1(features; prototypes, biases))`,
/// with prototypes shaped `[C, D, 1, 1]` and features `[D, H, W]`.
pub fn response_map_node<T: Real>(
    tape: &mut Tape<T>,
    prototypes: NodeId,
    biases: NodeId,
    features: NodeId,
) -> autograd::Result<NodeId> {
    let logits = tape.conv2d(features, prototypes, biases, 1)?;
    tape.sigmoid(logits)
}

/// Resizes a plane with align-corners-false bilinear or nearest sampling.
pub fn resize_plane(plane: &Plane, height: usize, width: usize, mode: Upsample) -> Result<Plane, ProtoError> {
    if height == 0 || width == 0 {
        return Err(ProtoError::BadSize(format!("target {height}x{width}")));
    }
    if plane.height == 0 || plane.width == 0 {
        return Err(ProtoError::BadSize(format!("source {}x{}", plane.height, plane.width)));
    }
    let mut out = Vec::with_capacity(height * width);
    match mode {
        Upsample::Bilinear => {
            let rows = bilinear_axis(plane.height, height);
            let cols = bilinear_axis(plane.width, width);
            for &(y0, y1, fy) in &rows {
                for &(x0, x1, fx) in &cols {
                    let g = |i: usize, j: usize| plane.get(i, j) as f64;
                    let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
                    let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
                    out.push((top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
        Upsample::Nearest => {
            let pick = |o: usize, dst: usize, src: usize| (((o as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
            for i in 0..height {
                let si = pick(i, height, plane.height);
                for j in 0..width {
                    out.push(plane.get(si, pick(j, width, plane.width)));
                }
            }
        }
    }
    Plane::new(height, width, out)
}

/// Align-corners-false bilinear resize.
pub fn resize_bilinear(plane: &Plane, height: usize, width: usize) -> Result<Plane, ProtoError> {
    resize_plane(plane, height, width, Upsample::Bilinear)
}

/// Equal-weight mean over levels of the class-`k` response, each resized
/// to `height x width`. Levels must be numbered `1..=L` in order.
pub fn aggregate_saliency(
    stacks: &[ScoreStack],
    k: usize,
    height: usize,
    width: usize,
    mode: Upsample,
) -> Result<SaliencyMap, ProtoError> {
    if stacks.is_empty() {
        return Err(ProtoError::MissingLevel(1));
    }
    for (i, s) in stacks.iter().enumerate() {
        if s.level.index != i + 1 {
            return Err(ProtoError::MissingLevel(i + 1));
        }
        if k >= s.classes {
            return Err(ProtoError::ClassOutOfRange {
                class: k,
                count: s.classes,
            });
        }
        if s.level.height > height || s.level.width > width {
            return Err(ProtoError::BadSize(format!(
                "level {} grid {}x{} exceeds input {height}x{width}",
                s.level.index, s.level.height, s.level.width
            )));
        }
    }
    let mut acc = vec![0f64; height * width];
    for s in stacks {
        let plane = Plane::new(s.level.height, s.level.width, s.plane(k).to_vec())?;
        let up = resize_plane(&plane, height, width, mode)?;
        for (a, v) in acc.iter_mut().zip(&up.values) {
            *a += *v as f64;
        }
    }
    let l = stacks.len() as f64;
    let values = acc.into_iter().map(|v| (v / l) as f32).collect();
    Ok(SaliencyMap {
        class: k,
        map: Plane::new(height, width, values)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(index: usize, h: usize, w: usize) -> LevelSpec {
        LevelSpec {
            index,
            stride: 8 << (index - 1),
            tau: 4,
            height: h,
            width: w,
        }
    }

    fn one_cell(p: [f32; 2], b: f32, f: [f32; 2]) -> f32 {
        let lv = level(1, 1, 1);
        let protos = PrototypeSet::new(lv, 2, 2, vec![p[0], p[1], 0.0, 0.0], vec![b, 0.0]).unwrap();
        let grid = FeatureGrid::new(lv, 2, f.to_vec()).unwrap();
        response_map(&protos, &grid).unwrap().at(0, 0, 0)
    }

    #[test]
    fn response_spot_values() {
        assert_eq!(one_cell([1.0, 0.0], 0.0, [0.0, 5.0]), 0.5);
        assert!((one_cell([1.0, 0.0], 0.0, [2.0, 0.0]) - 0.8808).abs() < 1e-4);
        assert!((one_cell([1.0, 1.0], 1.0, [1.0, -1.0]) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn response_rejects_mismatch() {
        let lv = level(1, 1, 1);
        let protos = PrototypeSet::new(lv, 2, 3, vec![0.0; 6], vec![0.0; 2]).unwrap();
        let grid = FeatureGrid::new(lv, 2, vec![0.0; 2]).unwrap();
        assert!(matches!(response_map(&protos, &grid), Err(ProtoError::Dimension(_))));
        assert!(PrototypeSet::new(lv, 1, 2, vec![0.0; 2], vec![0.0]).is_err());
    }

    #[test]
    fn tape_response_matches_plain() {
        let lv = level(1, 2, 3);
        let feats: Vec<f32> = (0..12).map(|i| (i as f32 - 6.0) / 4.0).collect();
        let protos = vec![0.5, -1.0, 0.25, 2.0];
        let biases = vec![0.1, -0.3];
        let plain = response_map(
            &PrototypeSet::new(lv, 2, 2, protos.clone(), biases.clone()).unwrap(),
            &FeatureGrid::new(lv, 2, feats.clone()).unwrap(),
        )
        .unwrap();
        let mut tape = Tape::<f32>::new();
        let p = tape.leaf(crate::Tensor::from_slice(&[2, 2, 1, 1], &protos).unwrap()).unwrap();
        let b = tape.leaf(crate::Tensor::from_slice(&[2], &biases).unwrap()).unwrap();
        let f = tape.leaf(crate::Tensor::from_slice(&[2, 2, 3], &feats).unwrap()).unwrap();
        let s = response_map_node(&mut tape, p, b, f).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(&plain.scores) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_cases() {
        let p = Plane::new(1, 2, vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&p, 1, 4).unwrap();
        assert_eq!(r.values, vec![0.0, 0.25, 0.75, 1.0]);
        let c = Plane::constant(3, 5, 0.3);
        let r = resize_bilinear(&c, 7, 2).unwrap();
        assert!(r.values.iter().all(|&v| (v - 0.3).abs() < 1e-7));
        let q = Plane::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(resize_bilinear(&q, 2, 2).unwrap(), q);
        assert!(resize_bilinear(&q, 0, 2).is_err());
        let n = resize_plane(&q, 4, 4, Upsample::Nearest).unwrap();
        assert_eq!(n.get(0, 0), 0.1);
        assert_eq!(n.get(3, 3), 0.4);
    }

    fn constant_stack(index: usize, h: usize, v: f32) -> ScoreStack {
        let lv = level(index, h, h);
        ScoreStack {
            level: lv,
            classes: 2,
            scores: vec![v; 2 * h * h],
        }
    }

    #[test]
    fn aggregate_cases() {
        let s = aggregate_saliency(
            &[constant_stack(1, 4, 0.2), constant_stack(2, 2, 0.6)],
            0,
            8,
            8,
            Upsample::Bilinear,
        )
        .unwrap();
        assert!(s.map.values.iter().all(|&v| (v - 0.4).abs() < 1e-6));
        let s = aggregate_saliency(&[constant_stack(1, 1, 0.7)], 1, 4, 4, Upsample::Bilinear).unwrap();
        assert!(s.map.values.iter().all(|&v| v == 0.7));
        let err = aggregate_saliency(&[constant_stack(2, 2, 0.5)], 0, 4, 4, Upsample::Bilinear);
        assert!(matches!(err, Err(ProtoError::MissingLevel(1))));
        assert!(aggregate_saliency(&[], 0, 4, 4, Upsample::Bilinear).is_err());
    }

    #[test]
    fn pyramid_geometry() {
        let levels = pyramid(256, 256, default_taus(256)).unwrap();
        let dims: Vec<_> = levels.iter().map(|l| (l.height, l.upper_bound())).collect();
        assert_eq!(dims, vec![(32, 32.0), (16, 128.0), (8, 256.0)]);
        assert!(pyramid(100, 256, default_taus(100)).is_err());
        assert!(pyramid(256, 256, [4, 1, 8]).is_err());
    }
}
