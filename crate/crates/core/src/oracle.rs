//! Brute-force reference implementations and randomized agreement runs
//! for the label rasterizer and the foreground AUC.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::metrics::{auc_ft, GroundTruthMask};
use crate::proto::{LevelSpec, Plane, SaliencyMap};
use crate::splgs::{generate_label_maps, BoxAnnotation};

pub const AUC_TOLERANCE: f64 = 1e-9;

/// Cells whose centre lies inside the box after clipping to the grid's
/// image extent, found by testing every cell.
pub fn rasterize_oracle(b: &BoxAnnotation, level: &LevelSpec) -> BTreeSet<(usize, usize)> {
    let s = level.stride as f64;
    let (iw, ih) = ((level.width * level.stride) as f64, (level.height * level.stride) as f64);
    let x1 = (b.cx - b.w / 2.0).max(0.0);
    let y1 = (b.cy - b.h / 2.0).max(0.0);
    let x2 = (b.cx + b.w / 2.0).min(iw);
    let y2 = (b.cy + b.h / 2.0).min(ih);
    let mut out = BTreeSet::new();
    if x2 <= x1 || y2 <= y1 {
        return out;
    }
    for i in 0..level.height {
        for j in 0..level.width {
            let x = (j as f64 + 0.5) * s;
            let y = (i as f64 + 0.5) * s;
            if x1 <= x && x <= x2 && y1 <= y && y <= y2 {
                out.insert((i, j));
            }
        }
    }
    out
}

/// Whether the clipped box passes the level's size gate.
fn oracle_admits(b: &BoxAnnotation, level: &LevelSpec) -> bool {
    let (iw, ih) = ((level.width * level.stride) as f64, (level.height * level.stride) as f64);
    let w = (b.cx + b.w / 2.0).min(iw) - (b.cx - b.w / 2.0).max(0.0);
    let h = (b.cy + b.h / 2.0).min(ih) - (b.cy - b.h / 2.0).max(0.0);
    let hi = level.tau as f64 * level.stride as f64;
    w > 0.0 && h > 0.0 && w <= hi && h <= hi
}

/// AUC as the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Result of a randomized agreement run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub trials: usize,
    pub mismatches: usize,
    /// Largest deviation seen (zero for exact comparisons).
    pub worst: f64,
    /// First failing trial, if any.
    pub first_failure: Option<String>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

fn random_level(rng: &mut ChaCha8Rng) -> LevelSpec {
    LevelSpec {
        index: rng.random_range(1..=3),
        stride: [4, 8, 16, 32][rng.random_range(0..4)],
        tau: rng.random_range(1..=16),
        height: rng.random_range(1..=24),
        width: rng.random_range(1..=24),
    }
}

/// A box whose coordinates are either continuous or snapped to a quarter
/// of the stride, so that edges regularly land exactly on cell centres.
fn random_box(rng: &mut ChaCha8Rng, level: &LevelSpec, classes: usize) -> BoxAnnotation {
    let (iw, ih) = ((level.width * level.stride) as f64, (level.height * level.stride) as f64);
    let snap = rng.random_bool(0.5);
    let q = level.stride as f64 / 4.0;
    let mut coord = |hi: f64| {
        let v = rng.random_range(-0.2 * hi..1.2 * hi);
        if snap {
            (v / q).round() * q
        } else {
            v
        }
    };
    let (a, b) = (coord(iw), coord(iw));
    let (c, d) = (coord(ih), coord(ih));
    let (x1, x2) = (a.min(b), a.max(b) + if snap { q } else { 1e-3 });
    let (y1, y2) = (c.min(d), c.max(d) + if snap { q } else { 1e-3 });
    BoxAnnotation::from_corners(rng.random_range(0..classes - 1), x1, y1, x2, y2)
}

/// Compares [`generate_label_maps`] with the per-cell oracle on random
/// (boxes, level) cases, and checks the background complement on each.
pub fn splgs_agreement(trials: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut first_failure = None;
    for t in 0..trials {
        let level = random_level(&mut rng);
        let classes = rng.random_range(2..=5);
        let nboxes = rng.random_range(1..=3);
        let boxes: Vec<_> = (0..nboxes).map(|_| random_box(&mut rng, &level, classes)).collect();
        let problem = match generate_label_maps(&boxes, &level, classes) {
            Err(e) => Some(format!("rejected: {e}")),
            Ok(stack) => {
                let n = level.cells();
                let mut expect = vec![BTreeSet::new(); classes - 1];
                for b in boxes.iter().filter(|b| oracle_admits(b, &level)) {
                    expect[b.class].extend(rasterize_oracle(b, &level));
                }
                let fg_ok = (0..classes - 1).all(|k| {
                    let got: BTreeSet<_> = (0..n)
                        .filter(|&c| stack.maps[k * n + c] == 1)
                        .map(|c| (c / level.width, c % level.width))
                        .collect();
                    got == expect[k]
                });
                let bg_ok = (0..n).all(|c| {
                    let cell = (c / level.width, c % level.width);
                    let any = expect.iter().any(|e| e.contains(&cell));
                    stack.maps[(classes - 1) * n + c] == u8::from(!any)
                });
                let binary = stack.maps.iter().all(|&v| v <= 1);
                (!(fg_ok && bg_ok && binary && stack.background_complement_holds()))
                    .then(|| format!("trial {t}: level {level:?}, boxes {boxes:?}"))
            }
        };
        if let Some(p) = problem {
            mismatches += 1;
            first_failure.get_or_insert(p);
        }
    }
    OracleReport {
        name: "splgs rasterization".into(),
        trials,
        mismatches,
        worst: 0.0,
        first_failure,
    }
}

/// Compares [`auc_ft`] with [`pairwise_auc`] on random maps with ties.
pub fn auc_agreement(trials: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    let mut first_failure = None;
    for t in 0..trials {
        let (h, w) = (rng.random_range(2..=24), rng.random_range(2..=24));
        // a coarse quantization makes ties common
        let levels = [4u32, 16, 256, 1 << 20][rng.random_range(0..4)];
        let values: Vec<f32> = (0..h * w)
            .map(|_| rng.random_range(0..levels) as f32 / (levels - 1) as f32)
            .collect();
        let p_fg = rng.random_range(0.05..0.6);
        let mut mask: Vec<u8> = (0..h * w).map(|_| u8::from(rng.random_bool(p_fg))).collect();
        // guarantee both sides are present
        mask[0] = 1;
        mask[1] = 0;
        let map = SaliencyMap {
            class: 0,
            map: Plane::new(h, w, values.clone()).expect("valid plane"),
        };
        let gt = GroundTruthMask {
            class: 0,
            height: h,
            width: w,
            mask: mask.clone(),
        };
        let fast = auc_ft(&map, &gt).ok().flatten();
        let scores: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let labels: Vec<bool> = mask.iter().map(|&m| m == 1).collect();
        let slow = pairwise_auc(&scores, &labels);
        let dev = match (fast, slow) {
            (Some(a), Some(b)) => (a - b).abs(),
            _ => f64::INFINITY,
        };
        worst = worst.max(dev);
        if !(dev <= AUC_TOLERANCE) {
            mismatches += 1;
            first_failure.get_or_insert(format!("trial {t}: fast {fast:?}, pairwise {slow:?}"));
        }
    }
    OracleReport {
        name: "auc_ft pairwise".into(),
        trials,
        mismatches,
        worst,
        first_failure,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_hand_case() {
        let level = LevelSpec {
            index: 1,
            stride: 8,
            tau: 4,
            height: 8,
            width: 8,
        };
        let cells = rasterize_oracle(&BoxAnnotation::new(0, 32.0, 32.0, 16.0, 16.0), &level);
        let want: BTreeSet<_> = [(3, 3), (3, 4), (4, 3), (4, 4)].into_iter().collect();
        assert_eq!(cells, want);
        let whole = rasterize_oracle(&BoxAnnotation::new(0, 32.0, 32.0, 64.0, 64.0), &level);
        assert_eq!(whole.len(), 64);
        assert!(rasterize_oracle(&BoxAnnotation::new(0, 30.0, 30.0, 1.0, 1.0), &level).is_empty());
    }

    #[test]
    fn pairwise_auc_small_cases() {
        assert_eq!(pairwise_auc(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(pairwise_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(pairwise_auc(&[0.5, 0.5], &[true, true]), None);
    }

    #[test]
    fn short_runs_agree() {
        assert!(splgs_agreement(200, 1).passed());
        assert!(auc_agreement(30, 2).passed());
    }
}
