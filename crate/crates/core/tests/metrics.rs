use hiproto::metrics::{auc_ft, discriminability, sparsity, GroundTruthMask};
use hiproto::oracle::auc_agreement;
use hiproto::proto::{LevelSpec, Plane, PrototypeSet, SaliencyMap};
use proptest::prelude::*;

fn sal(h: usize, w: usize, v: Vec<f32>) -> SaliencyMap {
    SaliencyMap {
        class: 0,
        map: Plane::new(h, w, v).unwrap(),
    }
}

fn mask(h: usize, w: usize, m: Vec<u8>) -> GroundTruthMask {
    GroundTruthMask {
        class: 0,
        height: h,
        width: w,
        mask: m,
    }
}

/// Mann-Whitney count over all pairs, independent of the rank-sum path.
fn pairwise(scores: &[f32], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut n) = (0.0, 0u64);
    for (a, la) in scores.iter().zip(labels) {
        for (b, lb) in scores.iter().zip(labels) {
            if *la == 1 && *lb == 0 {
                n += 1;
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
    }
    (n > 0).then(|| wins / n as f64)
}

#[test]
fn auc_matches_pairwise_on_200_maps() {
    let r = auc_agreement(200, 5);
    assert!(r.passed(), "{r:?}");
    assert!(r.worst <= 1e-9);
}

#[test]
fn disc_hand_cases() {
    let m = mask(2, 2, vec![1, 0, 1, 0]);
    let d = |v: Vec<f32>| discriminability(&sal(2, 2, v), &m).unwrap();
    assert!((d(vec![0.7, 0.0, 0.2, 0.0]) - 1.0).abs() < 1e-6);
    assert!(d(vec![0.0, 0.4, 0.0, 0.9]).abs() < 1e-6);
    assert!((d(vec![0.3; 4]) - 0.5).abs() < 1e-6);
}

fn protos(rows: &[[f32; 2]]) -> PrototypeSet {
    let level = LevelSpec {
        index: 1,
        stride: 8,
        tau: 4,
        height: 1,
        width: 1,
    };
    PrototypeSet::new(level, rows.len(), 2, rows.concat(), vec![0.0; rows.len()]).unwrap()
}

#[test]
fn sparsity_trivial_cases() {
    let s = |r: &[[f32; 2]]| sparsity(&[protos(r)]).unwrap();
    assert!((s(&[[1.0, 0.0], [0.0, 1.0]]) - 1.0).abs() < 1e-4);
    assert!(s(&[[2.0, 2.0], [1.0, 1.0]]).abs() < 1e-4);
    assert!((s(&[[1.0, 0.0], [1.0, 1.0]]) - (1.0 - 0.5f64.sqrt())).abs() < 1e-4);
    assert!((s(&[[1.0, 0.0], [1.0, 1.0]]) - 0.2929).abs() < 1e-4);
}

fn map_and_mask() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<u8>)> {
    (2usize..12, 2usize..12).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(0u8..8, h * w).prop_map(|v| v.into_iter().map(|x| x as f32 / 7.0).collect()),
            prop::collection::vec(0u8..2, h * w),
        )
    })
}

proptest! {
    #[test]
    fn auc_agrees_with_pairwise((h, w, v, m) in map_and_mask()) {
        let got = auc_ft(&sal(h, w, v.clone()), &mask(h, w, m.clone())).unwrap();
        let want = pairwise(&v, &m);
        match (got, want) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn auc_ignores_increasing_transforms((h, w, v, m) in map_and_mask()) {
        let warped: Vec<f32> = v.iter().map(|x| (3.0 * x).exp() + 0.5).collect();
        let a = auc_ft(&sal(h, w, v), &mask(h, w, m.clone())).unwrap();
        let b = auc_ft(&sal(h, w, warped), &mask(h, w, m)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn disc_is_a_fraction((h, w, v, m) in map_and_mask()) {
        let d = discriminability(&sal(h, w, v), &mask(h, w, m)).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }
}
