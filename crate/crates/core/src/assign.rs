//! Center-cell target assignment for the toy detector.
//!
//! A box is assigned at every level whose range admits its clipped width
//! and height, to the one cell containing its centre. When two boxes claim
//! the same cell the smaller one wins.
//!
//! Box regression is supervised more densely, at every cell whose anchor
//! lies inside an admitted box, because the response loss lights up the
//! whole box region and each lit cell must decode a usable box.

use crate::proto::LevelSpec;
use crate::splgs::{admits, covered_cells, image_extent, BoxAnnotation};

#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    pub cell: (usize, usize),
    pub class: usize,
    pub gt: BoxAnnotation,
    /// Anchor-to-edge distances (left, top, right, bottom) in stride units,
    /// within `[0, tau]`.
    pub dist: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelAssignment {
    pub level: LevelSpec,
    pub positives: Vec<Positive>,
    /// Per cell: true when the anchor lies outside every admitted box.
    pub negative: Vec<bool>,
    /// Regression targets: every in-box cell, owned by the positive
    /// assigned there or else by the smallest covering box.
    pub regression: Vec<Positive>,
}

impl LevelAssignment {
    /// Classification targets and weights over `[C, H, W]`. Positive cells
    /// get a one-hot target on their class, negative cells on background,
    /// and remaining cells (inside admitted boxes) weight zero.
    pub fn cls_targets(&self, classes: usize) -> (Vec<f32>, Vec<f32>) {
        let n = self.level.cells();
        let bg = classes - 1;
        let mut targets = vec![0f32; classes * n];
        let mut weights = vec![0f32; classes * n];
        for (c, &neg) in self.negative.iter().enumerate() {
            if neg {
                targets[bg * n + c] = 1.0;
                for k in 0..classes {
                    weights[k * n + c] = 1.0;
                }
            }
        }
        for p in &self.positives {
            let c = p.cell.0 * self.level.width + p.cell.1;
            targets[p.class * n + c] = 1.0;
            for k in 0..classes {
                weights[k * n + c] = 1.0;
            }
        }
        (targets, weights)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub levels: Vec<LevelAssignment>,
    /// Indices of boxes no level admitted (or fully outside the image).
    pub skipped: Vec<usize>,
}

/// Index of the cell containing `c`; a centre exactly on a boundary goes
/// to the lower-index cell.
pub fn cell_index(c: f64, stride: usize, n: usize) -> usize {
    let k = (c / stride as f64).ceil() as isize - 1;
    k.clamp(0, n as isize - 1) as usize
}

/// Anchor-to-edge distances in stride units clamped to `[0, tau]`.
pub fn side_distances(level: &LevelSpec, cell: (usize, usize), b: &BoxAnnotation) -> [f64; 4] {
    let (ax, ay) = level.anchor(cell.0, cell.1);
    let (x1, y1, x2, y2) = b.corners();
    let s = level.stride as f64;
    let tau = level.tau as f64;
    [(ax - x1) / s, (ay - y1) / s, (x2 - ax) / s, (y2 - ay) / s].map(|d| d.clamp(0.0, tau))
}

pub fn assign_targets(boxes: &[BoxAnnotation], levels: &[LevelSpec]) -> Assignment {
    let mut used = vec![false; boxes.len()];
    let mut out = Vec::with_capacity(levels.len());
    for level in levels {
        let (iw, ih) = image_extent(level);
        let n = level.cells();
        let mut owner: Vec<Option<usize>> = vec![None; n];
        let mut negative = vec![true; n];
        let mut clipped: Vec<Option<BoxAnnotation>> = vec![None; boxes.len()];
        for (bi, b) in boxes.iter().enumerate() {
            let Some(c) = b.clip(iw, ih) else { continue };
            if !admits(level, c.w, c.h) {
                continue;
            }
            for (i, j) in covered_cells(&c, level) {
                negative[i * level.width + j] = false;
            }
            let cell = cell_index(c.cy, level.stride, level.height) * level.width
                + cell_index(c.cx, level.stride, level.width);
            let replace = owner[cell].is_none_or(|prev| clipped[prev].is_some_and(|p| c.area() < p.area()));
            if replace {
                owner[cell] = Some(bi);
            }
            clipped[bi] = Some(c);
        }
        let mut positives = Vec::new();
        for (c, o) in owner.iter().enumerate() {
            let Some(bi) = *o else { continue };
            let Some(b) = clipped[bi] else { continue };
            let cell = (c / level.width, c % level.width);
            negative[c] = false;
            used[bi] = true;
            positives.push(Positive {
                cell,
                class: b.class,
                gt: b,
                dist: side_distances(level, cell, &b),
            });
        }
        let mut cover: Vec<Option<usize>> = owner.clone();
        for (bi, c) in clipped.iter().enumerate() {
            let Some(c) = c else { continue };
            for (i, j) in covered_cells(c, level) {
                let k = i * level.width + j;
                if owner[k].is_some() {
                    continue;
                }
                if cover[k].is_none_or(|prev| clipped[prev].is_some_and(|p| c.area() < p.area())) {
                    cover[k] = Some(bi);
                }
            }
        }
        let regression = cover
            .iter()
            .enumerate()
            .filter_map(|(c, o)| {
                let b = clipped[(*o)?]?;
                let cell = (c / level.width, c % level.width);
                Some(Positive {
                    cell,
                    class: b.class,
                    gt: b,
                    dist: side_distances(level, cell, &b),
                })
            })
            .collect();
        out.push(LevelAssignment {
            level: *level,
            positives,
            negative,
            regression,
        });
    }
    let skipped = used.iter().enumerate().filter(|(_, u)| !**u).map(|(i, _)| i).collect();
    Assignment {
        levels: out,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::{default_taus, pyramid};

    fn levels() -> Vec<LevelSpec> {
        pyramid(256, 256, default_taus(256)).unwrap()
    }

    fn assigned_levels(a: &Assignment, bi_class: usize) -> Vec<usize> {
        a.levels
            .iter()
            .filter(|l| l.positives.iter().any(|p| p.class == bi_class))
            .map(|l| l.level.index)
            .collect()
    }

    #[test]
    fn range_gating() {
        let a = assign_targets(&[BoxAnnotation::new(0, 100.0, 100.0, 16.0, 16.0)], &levels());
        assert_eq!(assigned_levels(&a, 0), vec![1, 2, 3]);
        let a = assign_targets(&[BoxAnnotation::new(1, 128.0, 128.0, 200.0, 200.0)], &levels());
        assert_eq!(assigned_levels(&a, 1), vec![3]);
        assert!(a.skipped.is_empty());
    }

    #[test]
    fn boundary_centre_picks_lower_cell() {
        assert_eq!(cell_index(16.0, 8, 32), 1);
        assert_eq!(cell_index(16.5, 8, 32), 2);
        assert_eq!(cell_index(0.0, 8, 32), 0);
        let a = assign_targets(&[BoxAnnotation::new(0, 16.0, 16.0, 8.0, 8.0)], &levels());
        assert_eq!(a.levels[0].positives[0].cell, (1, 1));
    }

    #[test]
    fn smaller_box_wins_a_shared_cell() {
        let boxes = [
            BoxAnnotation::new(0, 100.0, 100.0, 30.0, 30.0),
            BoxAnnotation::new(1, 101.0, 101.0, 10.0, 10.0),
        ];
        let a = assign_targets(&boxes, &levels());
        assert_eq!(a.levels[0].positives.len(), 1);
        assert_eq!(a.levels[0].positives[0].class, 1);
    }

    #[test]
    fn regression_covers_the_box_and_keeps_positive_owners() {
        let boxes = [
            BoxAnnotation::new(0, 100.0, 100.0, 60.0, 60.0),
            BoxAnnotation::new(1, 101.0, 101.0, 10.0, 10.0),
        ];
        let a = assign_targets(&boxes, &levels());
        let l2 = &a.levels[1];
        // 60 px at stride 16 covers the anchors 72..120 on each axis
        assert_eq!(l2.regression.len(), 16);
        for p in &l2.positives {
            let r = l2.regression.iter().find(|r| r.cell == p.cell).unwrap();
            assert_eq!(r, p);
        }
        for r in &l2.regression {
            assert!(r.dist.iter().all(|&d| (0.0..=l2.level.tau as f64).contains(&d)));
        }
    }

    #[test]
    fn distances_within_tau_and_targets_consistent() {
        let b = BoxAnnotation::new(2, 60.0, 70.0, 30.0, 20.0);
        let a = assign_targets(&[b], &levels());
        for l in &a.levels {
            for p in &l.positives {
                assert!(p.dist.iter().all(|&d| (0.0..=l.level.tau as f64).contains(&d)));
            }
            let (t, w) = l.cls_targets(4);
            let n = l.level.cells();
            let p = &l.positives[0];
            let c = p.cell.0 * l.level.width + p.cell.1;
            assert_eq!((t[2 * n + c], t[3 * n + c], w[c]), (1.0, 0.0, 1.0));
            // a cell far away is a background negative
            assert_eq!((t[3 * n], w[3 * n]), (1.0, 1.0));
        }
    }
}
