//! Acceptance run: one line per criterion, then the training invariants
//! checked on the same runs. Exits non-zero when any line fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hiproto::data::{apply_fog, FogParams, Image};
use hiproto::linalg::{orthogonality_residual, svd, svd_reconstruction_error};
use hiproto::losses::{pr_loss_svd, pr_loss_svd_grad, PrVariant};
use hiproto::metrics::{discriminability, sparsity, GroundTruthMask, MetricReport};
use hiproto::oracle::{auc_agreement, rasterize_oracle, splgs_agreement};
use hiproto::proto::{default_taus, pyramid, LevelSpec, Plane, PrototypeSet, SaliencyMap};
use hiproto::splgs::{generate_label_maps, BoxAnnotation};
use hiproto_cli::commands::{cmd_check_grads, cmd_eval, cmd_synth, cmd_train, TrainSummary};
use hiproto_cli::config::{self, EvalRun, SynthRun, TrainRun};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Line {
    id: String,
    passed: bool,
    detail: String,
}

fn line(id: impl Into<String>, passed: bool, detail: impl Into<String>) -> Line {
    Line {
        id: id.into(),
        passed,
        detail: detail.into(),
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn gradients() -> Line {
    match cmd_check_grads(20) {
        Ok(suite) => {
            let worst = suite.cases.iter().map(|c| c.worst).fold(0.0, f64::max);
            let failed: Vec<_> = suite.cases.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
            line(
                "1 gradients",
                failed.is_empty() && suite.seconds < 60.0,
                format!(
                    "{} cases x {} seeds, worst rel err {worst:.2e}, {:.1} s, failing {failed:?}",
                    suite.cases.len(),
                    suite.seeds,
                    suite.seconds
                ),
            )
        }
        Err(e) => line("1 gradients", false, e.to_string()),
    }
}

/// Singular values of a 2x2 matrix in closed form.
fn sigma_2x2(m: &[f64]) -> [f64; 2] {
    let p = ((m[0] + m[3]).powi(2) + (m[2] - m[1]).powi(2)).sqrt();
    let q = ((m[0] - m[3]).powi(2) + (m[1] + m[2]).powi(2)).sqrt();
    [(p + q) / 2.0, (p - q).abs() / 2.0]
}

/// Singular values of a 3x3 matrix from the characteristic polynomial of
/// `M^T M`, solved trigonometrically and polished by Newton steps.
fn sigma_3x3(m: &[f64]) -> [f64; 3] {
    let g = |i: usize, j: usize| (0..3).map(|r| m[r * 3 + i] * m[r * 3 + j]).sum::<f64>();
    let c2 = g(0, 0) + g(1, 1) + g(2, 2);
    let c1 = g(0, 0) * g(1, 1) + g(0, 0) * g(2, 2) + g(1, 1) * g(2, 2) - g(0, 1).powi(2) - g(0, 2).powi(2) - g(1, 2).powi(2);
    let c0 = g(0, 0) * (g(1, 1) * g(2, 2) - g(1, 2).powi(2)) - g(0, 1) * (g(0, 1) * g(2, 2) - g(1, 2) * g(0, 2))
        + g(0, 2) * (g(0, 1) * g(1, 2) - g(1, 1) * g(0, 2));
    let p = c1 - c2 * c2 / 3.0;
    let q = -2.0 * c2.powi(3) / 27.0 + c2 * c1 / 3.0 - c0;
    let r = (-p / 3.0).max(0.0).sqrt();
    let arg = if r > 0.0 { (q / (2.0 * r.powi(3))).clamp(-1.0, 1.0) } else { 0.0 };
    let phi = (-arg).acos() / 3.0;
    let mut roots = [0.0; 3];
    for (k, x) in roots.iter_mut().enumerate() {
        *x = c2 / 3.0 + 2.0 * r * (phi - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos();
        for _ in 0..3 {
            let df = (3.0 * *x - 2.0 * c2) * *x + c1;
            if df.abs() > 1e-12 {
                *x -= (((*x - c2) * *x + c1) * *x - c0) / df;
            }
        }
    }
    roots.sort_by(|a, b| b.partial_cmp(a).unwrap());
    roots.map(|l| l.max(0.0).sqrt())
}

fn svd_check() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut rec, mut orth, mut sig): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=64));
        let m: Vec<f64> = (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        match svd(&m, r, c) {
            Ok(f) => {
                rec = rec.max(svd_reconstruction_error(&m, &f));
                orth = orth
                    .max(orthogonality_residual(&f.u, r, f.u.len() / r))
                    .max(orthogonality_residual(&f.v, c, f.rank_dim()));
            }
            Err(_) => rec = f64::INFINITY,
        }
    }
    let gap = |got: Result<Vec<f64>, _>, want: &[f64]| match got {
        Ok(g) if g.len() == want.len() => g.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        _ => f64::INFINITY,
    };
    for _ in 0..100 {
        let m: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        sig = sig.max(gap(svd(&m, 2, 2).map(|f| f.sigma), &sigma_2x2(&m)));
        let m: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        sig = sig.max(gap(svd(&m, 3, 3).map(|f| f.sigma), &sigma_3x3(&m)));
    }
    line(
        "2 svd",
        rec < 1e-6 && orth < 1e-8 && sig < 1e-9,
        format!("reconstruction {rec:.1e}, orthogonality {orth:.1e}, sigma vs oracle {sig:.1e}"),
    )
}

fn prototypes(p: &[f64], rows: usize, cols: usize) -> PrototypeSet {
    let level = LevelSpec {
        index: 1,
        stride: 8,
        tau: 4,
        height: 1,
        width: 1,
    };
    PrototypeSet::new(level, rows, cols, p.iter().map(|&v| v as f32).collect(), vec![0.0; rows]).expect("finite prototypes")
}

fn pr_descent() -> Line {
    let (c, d) = (5, 16);
    let normal = Normal::new(0.0, 0.25).unwrap();
    let mut worst_steps = 0;
    let mut worst_spar: f64 = 1.0;
    let mut ok = true;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Vec<f64> = (0..c * d).map(|_| normal.sample(&mut rng)).collect();
        let mut reached = None;
        for t in 0..2000 {
            if pr_loss_svd(&p, c, d).unwrap() < 0.01 {
                reached = Some(t);
                break;
            }
            let g = pr_loss_svd_grad(&p, c, d).unwrap();
            let rate = 0.05 / (1.0 + t as f64).sqrt();
            p.iter_mut().zip(&g).for_each(|(x, g)| *x -= rate * g);
        }
        let spar = sparsity(&[prototypes(&p, c, d)]).unwrap();
        worst_spar = worst_spar.min(spar);
        match reached {
            Some(t) => worst_steps = worst_steps.max(t),
            None => ok = false,
        }
    }
    line(
        "3 pr descent",
        ok && worst_spar > 0.99,
        format!("10 inits, loss < 0.01 by step {worst_steps} (step 0.05/sqrt(1+t)), min sparsity {worst_spar:.4}"),
    )
}

fn splgs_oracle() -> Line {
    let r = splgs_agreement(1000, 5);
    line(
        "4 splgs oracle",
        r.passed(),
        format!("{} cases, {} mismatches {}", r.trials, r.mismatches, r.first_failure.unwrap_or_default()),
    )
}

fn gating() -> Line {
    let lv = pyramid(256, 256, default_taus(256)).unwrap();
    let fg = |b: &BoxAnnotation, l: &LevelSpec| {
        generate_label_maps(std::slice::from_ref(b), l, 2)
            .map(|s| s.plane(0).iter().filter(|&&v| v == 1).count())
            .unwrap_or(usize::MAX)
    };
    let forty = BoxAnnotation::new(0, 128.0, 128.0, 40.0, 40.0);
    let mut ok = fg(&forty, &lv[0]) == 0 && fg(&forty, &lv[1]) > 0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let (w, h) = (rng.random_range(1.0..256.0), rng.random_range(1.0..256.0));
        let b = BoxAnnotation::new(0, 128.0, 128.0, w, h);
        for l in &lv {
            let bound = (l.tau as usize * l.stride) as f64;
            let want = if f64::max(w, h) > bound { 0 } else { rasterize_oracle(&b, l).len() };
            ok &= fg(&b, l) == want;
        }
    }
    line(
        "5 splgs gating",
        ok,
        format!("taus {:?}: 40 px excluded at stride 8, included at stride 16; 500 random sizes", default_taus(256)),
    )
}

fn metric_oracles() -> Line {
    let auc = auc_agreement(200, 5);
    let sal = |v: Vec<f32>| SaliencyMap {
        class: 0,
        map: Plane::new(1, 4, v).unwrap(),
    };
    let mask = GroundTruthMask {
        class: 0,
        height: 1,
        width: 4,
        mask: vec![1, 1, 0, 0],
    };
    let disc = [
        discriminability(&sal(vec![0.4, 0.6, 0.0, 0.0]), &mask).unwrap() - 1.0,
        discriminability(&sal(vec![0.0, 0.0, 0.2, 0.9]), &mask).unwrap(),
        discriminability(&sal(vec![0.5; 4]), &mask).unwrap() - 0.5,
    ]
    .iter()
    .map(|e| e.abs())
    .fold(0.0, f64::max);
    let s = |p: [f64; 4]| sparsity(&[prototypes(&p, 2, 2)]).unwrap();
    let spar = [
        s([1.0, 0.0, 0.0, 1.0]) - 1.0,
        s([1.0, 1.0, 2.0, 2.0]),
        s([1.0, 0.0, 1.0, 1.0]) - 0.2929,
    ]
    .iter()
    .map(|e| e.abs())
    .fold(0.0, f64::max);
    line(
        "6 metric oracles",
        auc.passed() && disc < 1e-6 && spar < 1e-4,
        format!("auc worst {:.1e} on {} maps, disc cases {disc:.1e}, sparsity cases {spar:.1e}", auc.worst, auc.trials),
    )
}

fn fog() -> Line {
    let p = FogParams { a: 0.5, beta: 0.1 };
    let centre = apply_fog(&Image::filled(512, 512, [1.0; 3]), &p).data[(256 * 512 + 256) * 3] as f64;
    let corner = apply_fog(&Image::filled(512, 512, [0.0; 3]), &p).data[0] as f64;
    let data: Vec<f32> = (0..512u64 * 512 * 3).map(|i| ((i * 7919) % 256) as f32 / 255.0).collect();
    let out = apply_fog(&Image::new(512, 512, data.clone()).unwrap(), &p);
    let mut exact = true;
    for r in 0..512 {
        for c in 0..512 {
            let rho = ((r as f64 - 256.0).powi(2) + (c as f64 - 256.0).powi(2)).sqrt();
            let t = (-0.1 * (-0.04 * rho + 512f64.sqrt())).exp().clamp(0.0, 1.0);
            for ch in 0..3 {
                let i = (r * 512 + c) * 3 + ch;
                exact &= out.data[i] == (data[i] as f64 * t + 0.5 * (1.0 - t)) as f32;
            }
        }
    }
    line(
        "7 fog",
        exact && (centre - 0.5520).abs() < 1e-4 && (corner - 0.2786).abs() < 1e-4,
        format!("centre {centre:.4}, corner {corner:.4}, pixel-exact {exact}"),
    )
}

struct Runs {
    root: tempfile::TempDir,
    data: PathBuf,
    base: TrainRun,
}

impl Runs {
    fn new() -> Result<Self, String> {
        let root = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut synth: SynthRun = config::load(Some(&configs().join("toy_synth.json"))).map_err(|e| e.to_string())?;
        synth.out = Some(root.path().join("data"));
        synth.variants = vec!["clean".into()];
        cmd_synth(&synth, false).map_err(|e| e.to_string())?;
        let mut base: TrainRun = config::load(Some(&configs().join("toy_train.json"))).map_err(|e| e.to_string())?;
        let data = root.path().join("data/clean");
        base.data = Some(data.clone());
        Ok(Self { root, data, base })
    }

    fn train(&self, name: &str, tweak: impl Fn(&mut TrainRun)) -> Result<(TrainSummary, PathBuf), String> {
        let mut run = self.base.clone();
        let out = self.root.path().join(name);
        run.out = Some(out.clone());
        tweak(&mut run);
        let t = Instant::now();
        let s = cmd_train(&run, false).map_err(|e| format!("{name}: {e}"))?;
        eprintln!("  trained {name} in {:.0} s", t.elapsed().as_secs_f64());
        Ok((s, out))
    }

    fn eval(&self, ckpt: &Path, level: Option<usize>) -> Result<MetricReport, String> {
        let mut run: EvalRun = config::load(Some(&configs().join("toy_eval.json"))).map_err(|e| e.to_string())?;
        run.checkpoint = Some(ckpt.to_path_buf());
        run.data = Some(self.data.clone());
        run.out = None;
        run.level = level;
        cmd_eval(&run, false).map_err(|e| e.to_string())
    }
}

fn fmt(r: &MetricReport) -> String {
    format!("mAP {:.3} Disc {:.3} Spar {:.4}", r.map50, r.disc, r.spar.unwrap_or(f64::NAN))
}

fn training(lines: &mut Vec<Line>, extra: &mut Vec<Line>) -> Result<(), String> {
    let t0 = Instant::now();
    let runs = Runs::new()?;
    let (full, full_dir) = runs.train("full", |_| {})?;
    let (_, base_dir) = runs.train("base", |r| {
        r.rpc = false;
        r.pr = false;
        r.splgs = false;
    })?;
    let (_, nosplgs_dir) = runs.train("nosplgs", |r| r.splgs = false)?;
    let f = runs.eval(&full.checkpoint, None)?;
    let b = runs.eval(&base_dir.join("model.json"), None)?;
    let n = runs.eval(&nosplgs_dir.join("model.json"), None)?;
    let spar = |r: &MetricReport| r.spar.unwrap_or(f64::NAN);
    let a = f.map50 > b.map50 && f.disc > b.disc && spar(&f) > spar(&b);
    let bb = f.map50 >= n.map50;
    let per: Vec<MetricReport> = (1..=3).map(|l| runs.eval(&full.checkpoint, Some(l))).collect::<Result<_, _>>()?;
    let argmax = |get: fn(&MetricReport) -> f64| {
        (0..3).fold(0, |best, i| if get(&per[i]) > get(&per[best]) { i } else { best }) + 1
    };
    let (s, m, l) = (argmax(|r| r.map50_small), argmax(|r| r.map50_medium), argmax(|r| r.map50_large));
    let c = (s, m, l) == (1, 2, 3);
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    lines.push(line(
        "8 ablation",
        a && bb && c && minutes < 30.0,
        format!(
            "(a) full {} vs baseline {}: {a}; (b) without splgs mAP {:.3}: {bb}; (c) best level small/medium/large = L{s}/L{m}/L{l}: {c}; {minutes:.1} min",
            fmt(&f),
            fmt(&b),
            n.map50
        ),
    ));

    let (_, cos_dir) = runs.train("cosine", |r| r.pr_variant = PrVariant::Cosine)?;
    let (_, pop_dir) = runs.train("pop", |r| r.pr_variant = PrVariant::Pop)?;
    let cs = spar(&runs.eval(&cos_dir.join("model.json"), None)?);
    let ps = spar(&runs.eval(&pop_dir.join("model.json"), None)?);
    lines.push(line(
        "9 pr variants",
        spar(&f) >= cs && spar(&f) >= ps,
        format!("sparsity svd {:.5}, cosine {cs:.5}, pop {ps:.5}", spar(&f)),
    ));

    let (_, again_dir) = runs.train("full_again", |_| {})?;
    let same = |rel: &str| fs::read(full_dir.join(rel)).ok().zip(fs::read(again_dir.join(rel)).ok()).is_some_and(|(x, y)| x == y);
    let identical = ["model.json", "model.bin", "train_log.jsonl"].iter().all(|p| same(p));
    lines.push(line(
        "10 reproducibility",
        identical,
        format!("model.json, model.bin and train_log.jsonl identical across two seed-{} runs: {identical}", runs.base.seed),
    ));

    let first: Vec<f64> = full.epoch_means.iter().take(10).copied().collect();
    let decreasing = first.len() == 10 && first.windows(2).all(|w| w[1] < w[0]);
    extra.push(line("loss decreases over the first 10 epochs", decreasing, format!("{first:.3?}")));
    extra.push(line(
        "sparsity with PR >= 0.95, lower without",
        spar(&f) >= 0.95 && spar(&b) < spar(&f),
        format!("{:.4} vs {:.4}", spar(&f), spar(&b)),
    ));
    let (_, norpc_dir) = runs.train("norpc", |r| r.rpc = false)?;
    let nr = runs.eval(&norpc_dir.join("model.json"), None)?;
    extra.push(line(
        "disc with RPC and SPLGS exceeds no-RPC",
        f.disc > nr.disc,
        format!("{:.3} vs {:.3}", f.disc, nr.disc),
    ));
    Ok(())
}

fn main() {
    let mut lines = vec![
        gradients(),
        svd_check(),
        pr_descent(),
        splgs_oracle(),
        gating(),
        metric_oracles(),
        fog(),
    ];
    let mut extra = Vec::new();
    if let Err(e) = training(&mut lines, &mut extra) {
        for id in ["8 ablation", "9 pr variants", "10 reproducibility"] {
            if !lines.iter().any(|l| l.id == id) {
                lines.push(line(id, false, e.clone()));
            }
        }
    }
    println!("acceptance");
    for l in &lines {
        println!("{} criterion {:<20} {}", if l.passed { "PASS" } else { "FAIL" }, l.id, l.detail);
    }
    println!("training invariants");
    for l in &extra {
        println!("{} {:<42} {}", if l.passed { "PASS" } else { "FAIL" }, l.id, l.detail);
    }
    if lines.iter().chain(&extra).any(|l| !l.passed) {
        std::process::exit(1);
    }
}
