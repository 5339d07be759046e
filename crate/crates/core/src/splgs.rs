//! Scale-aware pseudo labels: per-level binary class maps built only from
//! boxes whose size fits the level's regression range.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proto::LevelSpec;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("box class {class} is not a foreground class (have {classes} classes incl. background)")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
}

/// Axis-aligned box in pixels, centre plus size. `class` is a 0-based
/// foreground index; with `C` classes the background is index `C - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxAnnotation {
    pub fn new(class: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { class, cx, cy, w, h }
    }

    pub fn from_corners(class: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            class,
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection with the image rectangle; `None` when nothing visible remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        let (x1, y1, x2, y2) = self.corners();
        let (x1, y1) = (x1.max(0.0), y1.max(0.0));
        let (x2, y2) = (x2.min(width), y2.min(height));
        (x2 > x1 && y2 > y1).then(|| Self::from_corners(self.class, x1, y1, x2, y2))
    }

    /// Inclusive containment of a point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x >= x1 && x <= x2 && y >= y1 && y <= y2
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let (a1, b1, a2, b2) = self.corners();
        let (c1, d1, c2, d2) = other.corners();
        let iw = (a2.min(c2) - a1.max(c1)).max(0.0);
        let ih = (b2.min(d2) - b1.max(d1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// The closed range `[0, tau * stride]` of object sizes a level handles.
pub fn valid_range(level: &LevelSpec) -> (f64, f64) {
    (0.0, level.upper_bound())
}

/// Whether both sides of a box fall inside the level's valid range.
pub fn admits(level: &LevelSpec, w: f64, h: f64) -> bool {
    let (lo, hi) = valid_range(level);
    (lo..=hi).contains(&w) && (lo..=hi).contains(&h)
}

/// Per-level binary label maps `[C, H, W]`; the last map is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMapStack {
    pub level: LevelSpec,
    pub classes: usize,
    pub maps: Vec<u8>,
}

impl LabelMapStack {
    pub fn plane(&self, k: usize) -> &[u8] {
        let n = self.level.cells();
        &self.maps[k * n..(k + 1) * n]
    }

    pub fn at(&self, k: usize, i: usize, j: usize) -> u8 {
        self.maps[(k * self.level.height + i) * self.level.width + j]
    }

    pub fn background(&self) -> usize {
        self.classes - 1
    }

    /// Labels as reals in `[C, H, W]` order.
    pub fn as_reals<T: crate::Real>(&self) -> Vec<T> {
        self.maps.iter().map(|&m| if m == 1 { T::one() } else { T::zero() }).collect()
    }

    /// Background equals one minus the max over foreground maps, cell by cell.
    pub fn background_complement_holds(&self) -> bool {
        let bg = self.background();
        (0..self.level.height).all(|i| {
            (0..self.level.width).all(|j| {
                let fg = (0..bg).map(|k| self.at(k, i, j)).max().unwrap_or(0);
                self.at(bg, i, j) == 1 - fg
            })
        })
    }
}

/// Image extent covered by a level's grid.
pub fn image_extent(level: &LevelSpec) -> (f64, f64) {
    (
        (level.width * level.stride) as f64,
        (level.height * level.stride) as f64,
    )
}

/// Cells of `level` whose anchor lies inside `b` (already clipped).
pub fn covered_cells(b: &BoxAnnotation, level: &LevelSpec) -> Vec<(usize, usize)> {
    let s = level.stride as f64;
    let (x1, y1, x2, y2) = b.corners();
    // Candidate window from the inverse of the anchor formula, padded by
    // one cell; every candidate is still tested against the box directly.
    let window = |lo: f64, hi: f64, n: usize| {
        let a = ((lo / s - 0.5).floor() - 1.0).max(0.0) as usize;
        let b = ((hi / s - 0.5).ceil() + 1.0).max(0.0) as usize;
        (a.min(n), (b + 1).min(n))
    };
    let (i0, i1) = window(y1, y2, level.height);
    let (j0, j1) = window(x1, x2, level.width);
    let mut out = Vec::new();
    for i in i0..i1 {
        for j in j0..j1 {
            let (ax, ay) = level.anchor(i, j);
            if b.contains(ax, ay) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Label maps for one level. With `gate` set, only boxes whose clipped
/// width and height both lie in [`valid_range`] contribute; with it unset
/// every box contributes (the ablation without scale gating).
pub fn generate_label_maps_with(
    boxes: &[BoxAnnotation],
    level: &LevelSpec,
    classes: usize,
    gate: bool,
) -> Result<LabelMapStack, LabelError> {
    if classes < 2 {
        return Err(LabelError::TooFewClasses(classes));
    }
    let bg = classes - 1;
    if let Some(b) = boxes.iter().find(|b| b.class >= bg) {
        return Err(LabelError::ClassOutOfRange {
            class: b.class,
            classes,
        });
    }
    let n = level.cells();
    let mut maps = vec![0u8; classes * n];
    let (iw, ih) = image_extent(level);
    for b in boxes.iter().filter_map(|b| b.clip(iw, ih)) {
        if gate && !admits(level, b.w, b.h) {
            continue;
        }
        for (i, j) in covered_cells(&b, level) {
            maps[b.class * n + i * level.width + j] = 1;
        }
    }
    for c in 0..n {
        let any = (0..bg).any(|k| maps[k * n + c] == 1);
        maps[bg * n + c] = u8::from(!any);
    }
    Ok(LabelMapStack {
        level: *level,
        classes,
        maps,
    })
}

/// Scale-gated label maps.
pub fn generate_label_maps(
    boxes: &[BoxAnnotation],
    level: &LevelSpec,
    classes: usize,
) -> Result<LabelMapStack, LabelError> {
    generate_label_maps_with(boxes, level, classes, true)
}
