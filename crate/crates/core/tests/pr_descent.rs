use hiproto::linalg::svd;
use hiproto::losses::{pr_loss_svd, pr_loss_svd_grad};
use hiproto::metrics::sparsity;
use hiproto::proto::{LevelSpec, PrototypeSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const C: usize = 5;
const D: usize = 16;

fn init(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 0.25).unwrap();
    (0..C * D).map(|_| n.sample(&mut rng)).collect()
}

fn spar_of(p: &[f64]) -> f64 {
    let level = LevelSpec {
        index: 1,
        stride: 8,
        tau: 4,
        height: 1,
        width: 1,
    };
    let set = PrototypeSet::new(level, C, D, p.iter().map(|&v| v as f32).collect(), vec![0.0; C]).unwrap();
    sparsity(&[set]).unwrap()
}

/// Subgradient descent with step `0.05 / sqrt(1 + t)`; returns the step
/// at which the loss first fell below 0.01, and the matrix there.
fn descend(seed: u64) -> (Option<usize>, Vec<f64>) {
    let mut p = init(seed);
    for t in 0..2000 {
        if pr_loss_svd(&p, C, D).unwrap() < 0.01 {
            return (Some(t), p);
        }
        let g = pr_loss_svd_grad(&p, C, D).unwrap();
        let rate = 0.05 / (1.0 + t as f64).sqrt();
        p.iter_mut().zip(&g).for_each(|(x, g)| *x -= rate * g);
    }
    (None, p)
}

#[test]
fn descent_reaches_orthonormal_prototypes() {
    for seed in 0..10 {
        let (hit, p) = descend(seed);
        assert!(hit.is_some(), "seed {seed}: loss {}", pr_loss_svd(&p, C, D).unwrap());
        let s = spar_of(&p);
        assert!(s > 0.99, "seed {seed}: sparsity {s}");
    }
}

// At a fixed step the subgradient U sign(S - 1) V^T leaves the singular
// vectors alone and moves every sigma by exactly the step, so the loss
// settles into a two-cycle no lower than the distance to the step grid.
#[test]
fn constant_step_cycles_around_the_unit_spectrum() {
    let mut p = init(3);
    let start = svd(&p, C, D).unwrap();
    let mut tail = Vec::new();
    for t in 0..2000 {
        let g = pr_loss_svd_grad(&p, C, D).unwrap();
        p.iter_mut().zip(&g).for_each(|(x, g)| *x -= 0.05 * g);
        if t >= 1996 {
            tail.push(pr_loss_svd(&p, C, D).unwrap());
        }
    }
    let end = svd(&p, C, D).unwrap();
    // the row space is unchanged: each final right vector lies in the initial span
    for k in 0..C {
        let inside: f64 = (0..C)
            .map(|m| (0..D).map(|j| start.v_at(j, m) * end.v_at(j, k)).sum::<f64>().powi(2))
            .sum();
        assert!((inside - 1.0).abs() < 1e-8, "{inside}");
        assert!((end.sigma[k] - 1.0).abs() <= 0.05 + 1e-9);
    }
    assert!((tail[0] - tail[2]).abs() < 1e-9 && (tail[1] - tail[3]).abs() < 1e-9);
}
