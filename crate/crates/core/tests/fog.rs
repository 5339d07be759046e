use hiproto::data::{apply_fog, FogParams, Image};
use proptest::prelude::*;

/// Direct per-pixel evaluation of the haze model.
fn hazed(j: f64, row: usize, col: usize, h: usize, w: usize, a: f64, beta: f64) -> f64 {
    let dy = row as f64 - h as f64 / 2.0;
    let dx = col as f64 - w as f64 / 2.0;
    let rho = (dx * dx + dy * dy).sqrt();
    let d = -0.04 * rho + (h.max(w) as f64).sqrt();
    let t = (-beta * d).exp().clamp(0.0, 1.0);
    j * t + a * (1.0 - t)
}

#[test]
fn spot_values_on_512() {
    let p = FogParams { a: 0.5, beta: 0.1 };
    let white = apply_fog(&Image::filled(512, 512, [1.0; 3]), &p);
    let black = apply_fog(&Image::filled(512, 512, [0.0; 3]), &p);
    let centre = white.data[(256 * 512 + 256) * 3];
    let corner = black.data[0];
    assert!((centre as f64 - 0.5520).abs() < 1e-4, "{centre}");
    assert!((corner as f64 - 0.2786).abs() < 1e-4, "{corner}");
}

#[test]
fn every_pixel_matches_direct_evaluation() {
    let (h, w) = (512, 512);
    let data: Vec<f32> = (0..h * w * 3).map(|i| ((i * 7919) % 256) as f32 / 255.0).collect();
    let img = Image::new(w, h, data.clone()).unwrap();
    let out = apply_fog(&img, &FogParams { a: 0.5, beta: 0.1 });
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let i = (r * w + c) * 3 + ch;
                let want = hazed(data[i] as f64, r, c, h, w, 0.5, 0.1) as f32;
                assert_eq!(out.data[i], want, "pixel ({r}, {c}) channel {ch}");
            }
        }
    }
}

proptest! {
    #[test]
    fn haze_pulls_toward_the_airlight(
        h in 1usize..40, w in 1usize..40, a in 0.0f64..1.0, beta in 0.0f64..0.5, j in 0.0f32..1.0,
    ) {
        let out = apply_fog(&Image::filled(w, h, [j; 3]), &FogParams { a, beta });
        for &v in &out.data {
            let (lo, hi) = if (j as f64) < a { (j as f64, a) } else { (a, j as f64) };
            prop_assert!(v as f64 >= lo - 1e-6 && v as f64 <= hi + 1e-6);
        }
    }
}
