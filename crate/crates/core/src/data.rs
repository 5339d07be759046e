//! Synthetic scenes, haze and low-light degradation, and on-disk datasets.
//!
//! A dataset variant is a directory holding `manifest.json`,
//! `annotations.jsonl` and `images/<id>.ppm`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pnm::{self, PnmError, Raster};
use crate::splgs::BoxAnnotation;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: PnmError,
    },
    #[error("{path}:{line}: {reason}")]
    Annotation {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("could not place object {object} ({size}px {shape}) after {retries} tries: scene too crowded")]
    Placement {
        object: usize,
        size: usize,
        shape: Shape,
        retries: usize,
    },
    #[error("image {width}x{height} has {len} samples, expected {expected}")]
    ImageSize {
        width: usize,
        height: usize,
        len: usize,
        expected: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// RGB image, interleaved `H x W x 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if data.len() != width * height * 3 {
            return Err(DataError::ImageSize {
                width,
                height,
                len: data.len(),
                expected: width * height * 3,
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    /// Planar `[3, H, W]` copy for the network.
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = self.data[p * 3 + c];
            }
        }
        out
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().map(|&v| pnm::quantize(v)).collect(),
        }
    }

    pub fn from_raster(r: &Raster) -> Self {
        let data = if r.channels == 3 {
            r.data.iter().map(|&b| b as f32 / 255.0).collect()
        } else {
            r.data.iter().flat_map(|&b| [b as f32 / 255.0; 3]).collect()
        };
        Self {
            width: r.width,
            height: r.height,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disc, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether a point, in box-relative unit coordinates, is inside the shape.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disc => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Square => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
            // apex at top centre, base along the bottom edge
            Shape::Triangle => (0.0..=1.0).contains(&v) && (u - 0.5).abs() <= v / 2.0,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Object side lengths drawn uniformly from `[min, max]` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
    pub weight: f64,
    #[serde(default)]
    pub max_per_scene: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub size: usize,
    /// Shape per class index.
    pub shapes: Vec<Shape>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub sizes: Vec<SizeRange>,
    /// Background gray level range.
    pub background: [f32; 2],
    pub noise: f32,
    /// Per-channel jitter around each class colour.
    pub color_jitter: f32,
    /// Minimum free pixels between boxes.
    pub gap: usize,
    /// Position draws per object before the layout is abandoned.
    pub max_retries: usize,
    pub layout_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 256,
            shapes: Shape::ALL.to_vec(),
            min_objects: 2,
            max_objects: 5,
            sizes: vec![
                SizeRange {
                    min: 10,
                    max: 22,
                    weight: 1.0,
                    max_per_scene: None,
                },
                SizeRange {
                    min: 28,
                    max: 60,
                    weight: 1.0,
                    max_per_scene: None,
                },
                SizeRange {
                    min: 136,
                    max: 176,
                    weight: 0.5,
                    max_per_scene: Some(1),
                },
            ],
            background: [0.15, 0.45],
            noise: 0.02,
            color_jitter: 0.08,
            gap: 2,
            max_retries: 200,
            layout_attempts: 50,
        }
    }
}

const CLASS_COLORS: [[f32; 3]; 3] = [[0.90, 0.25, 0.20], [0.20, 0.80, 0.30], [0.25, 0.40, 0.95]];

impl SceneSpec {
    pub fn validate(&self, max_classes: Option<usize>) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.shapes.is_empty() {
            return bad("no classes".into());
        }
        if let Some(limit) = max_classes {
            if self.shapes.len() > limit {
                return bad(format!("{} classes but the model has room for {limit}", self.shapes.len()));
            }
        }
        if self.size == 0 || self.min_objects > self.max_objects || self.sizes.is_empty() || self.layout_attempts == 0 {
            return bad("need size > 0, min_objects <= max_objects and at least one size range".into());
        }
        for r in &self.sizes {
            if r.min == 0 || r.min > r.max || r.max > self.size || !(r.weight > 0.0) {
                return bad(format!("bad size range {}..={} (weight {})", r.min, r.max, r.weight));
            }
        }
        if !(0.0..=1.0).contains(&self.background[0]) || !(self.background[0]..=1.0).contains(&self.background[1]) {
            return bad("background range must lie in [0, 1]".into());
        }
        if !(self.noise >= 0.0 && self.color_jitter >= 0.0) {
            return bad("noise and jitter must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub boxes: Vec<BoxAnnotation>,
    pub seed: u64,
}

fn disjoint(a: (usize, usize, usize), b: (usize, usize, usize), gap: usize) -> bool {
    let (ax, ay, asz) = a;
    let (bx, by, bsz) = b;
    ax + asz + gap <= bx || bx + bsz + gap <= ax || ay + asz + gap <= by || by + bsz + gap <= ay
}

/// Samples object sizes and classes and places them without overlap,
/// as `(x, y, size, class)`.
fn layout(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<Vec<(usize, usize, usize, usize)>, DataError> {
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut per_range = vec![0usize; spec.sizes.len()];
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let open: Vec<usize> = (0..spec.sizes.len())
            .filter(|&i| spec.sizes[i].max_per_scene.is_none_or(|m| per_range[i] < m))
            .collect();
        if open.is_empty() {
            break;
        }
        let total: f64 = open.iter().map(|&i| spec.sizes[i].weight).sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = open[open.len() - 1];
        for &i in &open {
            if pick < spec.sizes[i].weight {
                chosen = i;
                break;
            }
            pick -= spec.sizes[i].weight;
        }
        per_range[chosen] += 1;
        let r = &spec.sizes[chosen];
        let size = rng.random_range(r.min..=r.max);
        let class = rng.random_range(0..spec.shapes.len());
        objects.push((size, class));
    }
    // biggest first so crowded layouts fail fast
    objects.sort_by(|a, b| b.0.cmp(&a.0));
    let mut placed = Vec::with_capacity(objects.len());
    for (k, &(size, class)) in objects.iter().enumerate() {
        let mut slot = None;
        for _ in 0..spec.max_retries {
            let x = rng.random_range(0..=spec.size - size);
            let y = rng.random_range(0..=spec.size - size);
            if placed.iter().all(|&(px, py, ps, _)| disjoint((px, py, ps), (x, y, size), spec.gap)) {
                slot = Some((x, y));
                break;
            }
        }
        let Some((x, y)) = slot else {
            return Err(DataError::Placement {
                object: k,
                size,
                shape: spec.shapes[class],
                retries: spec.max_retries,
            });
        };
        placed.push((x, y, size, class));
    }
    Ok(placed)
}

/// One scene, a deterministic function of `(seed, spec)`. Boxes are tight
/// around the drawn shapes and never overlap. A layout that cannot be
/// completed is redrawn, up to `layout_attempts` times.
pub fn synth_scene(seed: u64, spec: &SceneSpec) -> Result<Scene, DataError> {
    spec.validate(None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempt = 0;
    let layout = loop {
        attempt += 1;
        match layout(&mut rng, spec) {
            Ok(l) => break l,
            Err(e) if attempt >= spec.layout_attempts => return Err(e),
            Err(_) => continue,
        }
    };
    let bg = rng.random_range(spec.background[0]..=spec.background[1]);
    let mut image = Image::filled(spec.size, spec.size, [bg, bg, bg]);
    let mut boxes = Vec::new();
    for &(x, y, size, class) in &layout {
        let shape = spec.shapes[class];
        let base = CLASS_COLORS[class % CLASS_COLORS.len()];
        let color = base.map(|c| (c + rng.random_range(-1.0..=1.0) * spec.color_jitter).clamp(0.0, 1.0));
        let s = size as f64;
        for py in y..y + size {
            for px in x..x + size {
                let u = (px - x) as f64 + 0.5;
                let v = (py - y) as f64 + 0.5;
                if shape.covers(u / s, v / s) {
                    let o = (py * spec.size + px) * 3;
                    image.data[o..o + 3].copy_from_slice(&color);
                }
            }
        }
        boxes.push(BoxAnnotation::new(class, x as f64 + s / 2.0, y as f64 + s / 2.0, s, s));
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise).map_err(|e| DataError::Spec(e.to_string()))?;
        for v in image.data.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(Scene { image, boxes, seed })
}

/// Atmospheric light and scattering coefficient of the haze model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FogParams {
    #[serde(rename = "A")]
    pub a: f64,
    pub beta: f64,
}

impl Default for FogParams {
    fn default() -> Self {
        Self { a: 0.5, beta: 0.1 }
    }
}

/// Haze depth of pixel `(row, col)`: `-0.04 * rho + sqrt(max(H, W))`, with
/// `rho` the Euclidean distance to the image centre `(H/2, W/2)`.
pub fn fog_depth(row: usize, col: usize, height: usize, width: usize) -> f64 {
    let dy = row as f64 - height as f64 / 2.0;
    let dx = col as f64 - width as f64 / 2.0;
    -0.04 * (dx * dx + dy * dy).sqrt() + (height.max(width) as f64).sqrt()
}

/// Transmission `exp(-beta * d)` clamped to `[0, 1]`.
pub fn fog_transmission(params: &FogParams, depth: f64) -> f64 {
    (-params.beta * depth).exp().clamp(0.0, 1.0)
}

/// `I = J t + A (1 - t)` per pixel and channel.
pub fn apply_fog(image: &Image, params: &FogParams) -> Image {
    let mut out = image.clone();
    for r in 0..image.height {
        for c in 0..image.width {
            let t = fog_transmission(params, fog_depth(r, c, image.height, image.width));
            let o = (r * image.width + c) * 3;
            for v in &mut out.data[o..o + 3] {
                *v = (*v as f64 * t + params.a * (1.0 - t)) as f32;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowLightParams {
    pub gamma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for LowLightParams {
    fn default() -> Self {
        Self {
            gamma: 2.5,
            noise_sigma: 0.02,
            seed: 5,
        }
    }
}

/// `clamp(I^gamma + N(0, sigma), 0, 1)`; the noise field depends only on `seed`.
pub fn apply_lowlight(image: &Image, gamma: f64, noise_sigma: f64, seed: u64) -> Result<Image, DataError> {
    if !(gamma >= 1.0) || !(noise_sigma >= 0.0) {
        return Err(DataError::Spec(format!("need gamma >= 1 and sigma >= 0, got {gamma}, {noise_sigma}")));
    }
    let mut out = image.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| DataError::Spec(e.to_string()))?;
    for v in out.data.iter_mut() {
        let noise = if noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        *v = ((*v as f64).powf(gamma) + noise).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Degradation recorded in a variant's manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Degradation {
    Fog(FogParams),
    Lowlight(LowLightParams),
}

impl Degradation {
    /// Applies the degradation to the `index`-th image of a dataset.
    pub fn apply(&self, image: &Image, index: usize) -> Result<Image, DataError> {
        match self {
            Degradation::Fog(p) => Ok(apply_fog(image, p)),
            Degradation::Lowlight(p) => {
                let seed = p.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64);
                apply_lowlight(image, p.gamma, p.noise_sigma, seed)
            }
        }
    }
}

/// One annotation line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub variant: String,
    pub image_size: usize,
    pub classes: Vec<String>,
    pub splits: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub degradation: Option<Degradation>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Manifest {
    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.splits.values().flatten()
    }

    pub fn split(&self, name: &str) -> Option<&[String]> {
        self.splits.get(name).map(|v| v.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub boxes: Vec<BoxAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: BTreeMap<String, Sample>,
}

impl Dataset {
    /// Samples of one split, in manifest order.
    pub fn split(&self, name: &str) -> Vec<&Sample> {
        self.manifest
            .split(name)
            .unwrap_or(&[])
            .iter()
            .filter_map(|id| self.samples.get(id))
            .collect()
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest, DataError> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| DataError::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut seen = std::collections::BTreeSet::new();
    for id in m.ids() {
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !ok || !seen.insert(id.clone()) {
            return Err(DataError::Manifest {
                path: path.to_path_buf(),
                reason: format!("bad or duplicate image id {id:?}"),
            });
        }
    }
    Ok(m)
}

/// Parses annotation lines into `(line number, record)`; blank lines are skipped.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<(usize, AnnotationRecord)>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| DataError::Annotation {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let vals = [rec.cx, rec.cy, rec.w, rec.h];
        if !vals.iter().all(|v| v.is_finite()) || rec.w <= 0.0 || rec.h <= 0.0 {
            return Err(bad("box needs finite centre and positive size".into()));
        }
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let r = pnm::decode_ppm(&bytes).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Image::from_raster(&r))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

pub fn read_manifest(root: &Path) -> Result<Manifest, DataError> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_manifest(&text, &path)
}

/// Loads a dataset variant directory.
pub fn read_dataset(root: &Path) -> Result<Dataset, DataError> {
    let manifest = read_manifest(root)?;
    let ann_path = root.join("annotations.jsonl");
    let text = fs::read_to_string(&ann_path).map_err(io_err(&ann_path))?;
    let mut samples = BTreeMap::new();
    for id in manifest.ids() {
        let image = read_image(&root.join("images").join(format!("{id}.ppm")))?;
        samples.insert(
            id.clone(),
            Sample {
                id: id.clone(),
                image,
                boxes: Vec::new(),
            },
        );
    }
    for (line, rec) in parse_annotations(&text, &ann_path)? {
        let bad = |reason: String| DataError::Annotation {
            path: ann_path.clone(),
            line,
            reason,
        };
        if rec.class >= manifest.classes.len() {
            return Err(bad(format!("class {} but only {} classes", rec.class, manifest.classes.len())));
        }
        let Some(s) = samples.get_mut(&rec.image) else {
            return Err(bad(format!("image {:?} not in manifest", rec.image)));
        };
        s.boxes.push(BoxAnnotation::new(rec.class, rec.cx, rec.cy, rec.w, rec.h));
    }
    Ok(Dataset { manifest, samples })
}

/// Writes a dataset variant; images are quantized to 8 bits.
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(root.join("images")).map_err(io_err(root))?;
    let mut ann = String::new();
    for id in dataset.manifest.ids() {
        let s = dataset.samples.get(id).ok_or_else(|| DataError::Manifest {
            path: root.join("manifest.json"),
            reason: format!("no sample for id {id:?}"),
        })?;
        write_bytes(&root.join("images").join(format!("{id}.ppm")), &pnm::encode(&s.image.to_raster()))?;
        for b in &s.boxes {
            let rec = AnnotationRecord {
                image: id.clone(),
                class: b.class,
                cx: b.cx,
                cy: b.cy,
                w: b.w,
                h: b.h,
            };
            ann.push_str(&serde_json::to_string(&rec).expect("plain record serializes"));
            ann.push('\n');
        }
    }
    write_bytes(&root.join("annotations.jsonl"), ann.as_bytes())?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    write_bytes(&root.join("manifest.json"), manifest.as_bytes())
}

/// Split sizes and scene spec for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub scene: SceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 5,
            train: 64,
            test: 32,
            scene: SceneSpec::default(),
        }
    }
}

/// Seed of scene `index` under dataset seed `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// The clean variant of a synthetic dataset.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    let mut splits = BTreeMap::new();
    let mut samples = BTreeMap::new();
    let mut index = 0;
    for (name, count) in [("train", spec.train), ("test", spec.test)] {
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let id = format!("{index:06}");
            let scene = synth_scene(scene_seed(spec.seed, index), &spec.scene)?;
            samples.insert(
                id.clone(),
                Sample {
                    id: id.clone(),
                    image: scene.image,
                    boxes: scene.boxes,
                },
            );
            ids.push(id);
            index += 1;
        }
        splits.insert(name.to_string(), ids);
    }
    Ok(Dataset {
        manifest: Manifest {
            variant: "clean".into(),
            image_size: spec.scene.size,
            classes: spec.scene.shapes.iter().map(|s| s.name().to_string()).collect(),
            splits,
            degradation: None,
            seed: Some(spec.seed),
        },
        samples,
    })
}

/// A degraded copy of `clean` under a new variant name.
pub fn degrade_dataset(clean: &Dataset, variant: &str, degradation: &Degradation) -> Result<Dataset, DataError> {
    let mut out = clean.clone();
    out.manifest.variant = variant.to_string();
    out.manifest.degradation = Some(degradation.clone());
    for (i, id) in clean.manifest.ids().enumerate() {
        if let Some(s) = out.samples.get_mut(id) {
            s.image = degradation.apply(&s.image, i)?;
        }
    }
    Ok(out)
}

/// SHA-256 over every file under `root`, visited in sorted relative-path
/// order, hashing each path and its contents.
pub fn dataset_digest(root: &Path) -> Result<String, DataError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DataError> {
        for e in fs::read_dir(dir).map_err(io_err(dir))? {
            let p = e.map_err(io_err(dir))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut rel: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| {
            let r = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            (r, p)
        })
        .collect();
    rel.sort();
    let mut h = Sha256::new();
    for (r, p) in rel {
        h.update(r.as_bytes());
        h.update([0]);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
