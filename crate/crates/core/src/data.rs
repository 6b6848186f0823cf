//! Synthetic shapes dataset and the on-disk mask dataset layout.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json          vocabulary, class table, sample list
//! images/NNN.s4dt        f32 C×H×W in [0, 1]
//! masks/NNN.pgm          class labels (0 = background, 255 = ignore)
//! instances/NNN_k.pgm    one binary mask per object (nonzero = inside)
//! prompts/NNN.json       token ids and class token spans
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{image_to_latent, TrainExample};
use crate::io::{self, Gray8, Tensor};
use crate::metrics::{IndexMask, IGNORE};
use crate::model::{EOS, PAD, SOS};
use crate::real::Real;
use crate::rng::{split, stream};
use crate::segment::{ClassSpan, ClassTokenSpans};

pub const FORMAT: &str = "groundlab-masks";
pub const FORMAT_VERSION: u32 = 1;

/// Shape kinds, in class-id order.
pub const KINDS: [&str; 3] = ["circle", "square", "triangle"];
const DARK: &str = "dark";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesConfig {
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Base colors, jittered per shape.
    pub palette: Vec<[f32; 3]>,
    /// Color each kind with `palette[kind % len]` instead of a random entry.
    pub kind_colors: bool,
    pub background: [f32; 3],
    pub color_jitter: f32,
    /// Adds "dark <kind>" classes named by two tokens.
    pub two_token_classes: bool,
    pub dark_factor: f32,
    pub text_len: usize,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            image_size: 32,
            min_shapes: 1,
            max_shapes: 3,
            palette: vec![[0.90, 0.20, 0.15], [0.20, 0.75, 0.25], [0.20, 0.35, 0.90]],
            kind_colors: true,
            background: [0.85, 0.85, 0.85],
            color_jitter: 0.08,
            two_token_classes: true,
            dark_factor: 0.45,
            text_len: 16,
            num_samples: 2000,
            seed: 0,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > KINDS.len() {
            return Err(Error::Config(format!(
                "shapes per image must satisfy 1 <= min <= max <= {}",
                KINDS.len()
            )));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("palette is empty".into()));
        }
        let per_class = if self.two_token_classes { 2 } else { 1 };
        if self.text_len < self.max_shapes * per_class + 2 {
            return Err(Error::Config(format!(
                "text_len {} cannot hold {} class names plus <sos>/<eos>",
                self.text_len, self.max_shapes
            )));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vec<String> {
        ["<sos>", "<eos>", "<pad>"]
            .into_iter()
            .chain(KINDS)
            .chain([DARK])
            .map(String::from)
            .collect()
    }

    /// Background plus one class per kind, then the dark variants.
    pub fn classes(&self) -> Vec<ClassInfo> {
        let kind_token = |k: usize| 3 + k;
        let dark_token = 3 + KINDS.len();
        let mut out = vec![ClassInfo {
            id: 0,
            name: "background".into(),
            tokens: Vec::new(),
        }];
        for (k, kind) in KINDS.iter().enumerate() {
            out.push(ClassInfo {
                id: out.len(),
                name: (*kind).into(),
                tokens: vec![kind_token(k)],
            });
        }
        if self.two_token_classes {
            for (k, kind) in KINDS.iter().enumerate() {
                out.push(ClassInfo {
                    id: out.len(),
                    name: format!("{DARK} {kind}"),
                    tokens: vec![dark_token, kind_token(k)],
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub name: String,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub text_len: usize,
    pub vocab: Vec<String>,
    pub classes: Vec<ClassInfo>,
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<ShapesConfig>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn validate(&self) -> Result<()> {
        if self.format != FORMAT || self.version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported dataset format {} v{}",
                self.format, self.version
            )));
        }
        if self.vocab.len() <= PAD {
            return Err(Error::Input("vocabulary must contain <sos>, <eos> and <pad>".into()));
        }
        if self.classes.is_empty() || self.classes.len() > IGNORE as usize {
            return Err(Error::Input(format!("class count {} out of range", self.classes.len())));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::Input(format!("class {} listed at position {i}", c.id)));
            }
            if let Some(&t) = c.tokens.iter().find(|&&t| t >= self.vocab.len() || t <= PAD) {
                return Err(Error::Input(format!("class {} uses invalid token {t}", c.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesSample {
    /// `C × H × W` in `[0, 1]`.
    pub image: Array3<f32>,
    pub tokens: Vec<usize>,
    pub spans: ClassTokenSpans,
    pub mask: IndexMask,
    pub instances: Vec<Array2<bool>>,
}

impl ShapesSample {
    /// Class of every instance mask (majority label under it).
    pub fn instance_classes(&self) -> Vec<usize> {
        self.instances
            .iter()
            .map(|inst| {
                let mut counts = vec![0usize; self.mask.num_classes];
                for (&m, &l) in inst.iter().zip(self.mask.labels.iter()) {
                    if m && l != IGNORE {
                        counts[l as usize] += 1;
                    }
                }
                counts
                    .iter()
                    .enumerate()
                    .max_by_key(|&(c, &n)| (n, std::cmp::Reverse(c)))
                    .map_or(0, |(c, _)| c)
            })
            .collect()
    }

    fn validate(&self, manifest: &Manifest) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if (c, h, w) != (manifest.image_channels, manifest.image_height, manifest.image_width) {
            return Err(Error::Input(format!("image is {c}x{h}x{w}")));
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image has non-finite values".into()));
        }
        if self.mask.dim() != (h, w) {
            return Err(Error::Input(format!("mask is {:?}, image is {h}x{w}", self.mask.dim())));
        }
        if self.tokens.len() != manifest.text_len {
            return Err(Error::Input(format!("prompt has {} tokens", self.tokens.len())));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= manifest.vocab.len()) {
            return Err(Error::Input(format!("token {t} outside the vocabulary")));
        }
        self.spans.validate(&self.tokens)?;
        let nc = manifest.num_classes();
        let mut present = BTreeSet::new();
        for &l in self.mask.labels.iter() {
            if l != IGNORE {
                if l as usize >= nc {
                    return Err(Error::Input(format!(
                        "mask label {l} not in the manifest's {nc} classes"
                    )));
                }
                if l != 0 {
                    present.insert(l as usize);
                }
            }
        }
        let spanned: BTreeSet<usize> = self.spans.spans.iter().map(|s| s.class).collect();
        if let Some(c) = present.difference(&spanned).next() {
            return Err(Error::Input(format!(
                "class {c} appears in the mask but not in the prompt"
            )));
        }
        if let Some(&c) = spanned.iter().find(|&&c| c == 0 || c >= nc) {
            return Err(Error::Input(format!("prompt span names invalid class {c}")));
        }
        if !self.instances.is_empty() {
            let mut cover = Array2::<u8>::zeros((h, w));
            for inst in &self.instances {
                if inst.dim() != (h, w) {
                    return Err(Error::Input("instance mask size differs from the image".into()));
                }
                for (c, &m) in cover.iter_mut().zip(inst.iter()) {
                    *c += m as u8;
                }
            }
            if cover.iter().any(|&c| c > 1) {
                return Err(Error::Input("instance masks overlap".into()));
            }
            for (&c, &l) in cover.iter().zip(self.mask.labels.iter()) {
                if l != IGNORE && (c == 1) != (l != 0) {
                    return Err(Error::Input(
                        "instance masks do not cover exactly the labeled pixels".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<ShapesSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    /// Splits off the samples from `at` onward.
    pub fn split_at(&self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.samples.len());
        let part = |range: std::ops::Range<usize>| {
            let mut manifest = self.manifest.clone();
            manifest.samples = self.manifest.samples[range.clone()].to_vec();
            Dataset {
                manifest,
                samples: self.samples[range].to_vec(),
            }
        };
        (part(0..at), part(at..self.samples.len()))
    }

    pub fn train_examples<T: Real>(&self) -> Vec<TrainExample<T>> {
        self.samples
            .iter()
            .map(|s| TrainExample {
                latent: image_to_latent(&s.image),
                tokens: s.tokens.clone(),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Geometry {
    Circle { cx: f64, cy: f64, r: f64 },
    Square { x0: f64, y0: f64, side: f64 },
    Triangle { cx: f64, top: f64, base: f64, height: f64 },
}

impl Geometry {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Geometry::Circle { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Geometry::Square { x0, y0, side } => (x0, y0, x0 + side, y0 + side),
            Geometry::Triangle { cx, top, base, height } => (cx - base / 2.0, top, cx + base / 2.0, top + height),
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Geometry::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Geometry::Square { x0, y0, side } => px >= x0 && px < x0 + side && py >= y0 && py < y0 + side,
            Geometry::Triangle { cx, top, base, height } => {
                if py < top || py > top + height {
                    return false;
                }
                let half = base / 2.0 * (py - top) / height;
                (px - cx).abs() <= half
            }
        }
    }
}

fn random_geometry(kind: usize, size: f64, rng: &mut ChaCha8Rng) -> Geometry {
    let (w, h) = match kind {
        0 => {
            let r = rng.random_range(3.5..6.5);
            (2.0 * r, 2.0 * r)
        }
        1 => {
            let s = rng.random_range(6.0..11.0f64).floor();
            (s, s)
        }
        _ => {
            let b = rng.random_range(8.0..13.0f64).floor();
            (b, (b * 0.9).floor())
        }
    };
    let x0 = rng.random_range(1.0..(size - 1.0 - w).max(1.0 + 1e-9));
    let y0 = rng.random_range(1.0..(size - 1.0 - h).max(1.0 + 1e-9));
    match kind {
        0 => Geometry::Circle {
            cx: x0 + w / 2.0,
            cy: y0 + h / 2.0,
            r: w / 2.0,
        },
        1 => Geometry::Square {
            x0: x0.floor(),
            y0: y0.floor(),
            side: w,
        },
        _ => Geometry::Triangle {
            cx: x0.floor() + w / 2.0,
            top: y0.floor(),
            base: w,
            height: h,
        },
    }
}

fn boxes_clear(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    let gap = 1.0;
    a.2 + gap <= b.0 || b.2 + gap <= a.0 || a.3 + gap <= b.1 || b.3 + gap <= a.1
}

const PLACEMENT_ATTEMPTS: usize = 200;

fn gen_sample(cfg: &ShapesConfig, classes: &[ClassInfo], index: u64) -> Result<ShapesSample> {
    let mut rng = split(cfg.seed, stream::DATA, &[index]);
    let size = cfg.image_size;
    let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut kinds: Vec<usize> = (0..KINDS.len()).collect();
    kinds.shuffle(&mut rng);
    kinds.truncate(n);

    let mut image = Array3::zeros((3, size, size));
    for c in 0..3 {
        image.index_axis_mut(ndarray::Axis(0), c).fill(cfg.background[c]);
    }
    let mut labels = Array2::<u8>::zeros((size, size));
    let mut instances = Vec::with_capacity(n);
    let mut placed: Vec<Geometry> = Vec::with_capacity(n);
    let mut sample_classes = Vec::with_capacity(n);

    for &kind in &kinds {
        let dark = cfg.two_token_classes && rng.random_bool(0.5);
        let class = if dark { 1 + KINDS.len() + kind } else { 1 + kind };
        let pick = rng.random_range(0..cfg.palette.len());
        let base = cfg.palette[if cfg.kind_colors {
            kind % cfg.palette.len()
        } else {
            pick
        }];
        let mut color = [0f32; 3];
        for c in 0..3 {
            let j = if cfg.color_jitter > 0.0 {
                rng.random_range(-cfg.color_jitter..=cfg.color_jitter)
            } else {
                0.0
            };
            let v = (base[c] + j).clamp(0.0, 1.0);
            color[c] = if dark { v * cfg.dark_factor } else { v };
        }
        let mut geometry = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let g = random_geometry(kind, size as f64, &mut rng);
            let bb = g.bbox();
            let inside = bb.0 >= 0.0 && bb.1 >= 0.0 && bb.2 <= size as f64 && bb.3 <= size as f64;
            if inside && placed.iter().all(|p| boxes_clear(p.bbox(), bb)) {
                geometry = Some(g);
                break;
            }
        }
        let g = geometry.ok_or_else(|| {
            Error::Generation(format!(
                "cannot place {n} non-overlapping shapes in a {size}x{size} image (sample {index})"
            ))
        })?;
        let inst = Array2::from_shape_fn((size, size), |(y, x)| g.contains(x as f64 + 0.5, y as f64 + 0.5));
        let area = inst.iter().filter(|&&b| b).count();
        if area < 9 {
            return Err(Error::Generation(format!("shape of {area} pixels in sample {index}")));
        }
        for ((y, x), &inside) in inst.indexed_iter() {
            if inside {
                labels[[y, x]] = class as u8;
                for c in 0..3 {
                    image[[c, y, x]] = color[c];
                }
            }
        }
        placed.push(g);
        instances.push(inst);
        sample_classes.push(class);
    }

    let mut order = sample_classes.clone();
    order.shuffle(&mut rng);
    let mut tokens = vec![SOS];
    let mut spans = Vec::with_capacity(n);
    for &class in &order {
        let start = tokens.len();
        tokens.extend_from_slice(&classes[class].tokens);
        spans.push(ClassSpan {
            class,
            ranges: vec![[start, tokens.len()]],
        });
    }
    tokens.push(EOS);
    tokens.resize(cfg.text_len, PAD);
    Ok(ShapesSample {
        image,
        tokens,
        spans: ClassTokenSpans { spans },
        mask: IndexMask::new(labels, classes.len())?,
        instances,
    })
}

fn sample_name(i: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(3);
    format!("{i:0width$}")
}

/// Generates `config.num_samples` samples; sample `i` depends only on `(seed, i)`.
pub fn gen_shapes(config: &ShapesConfig) -> Result<Dataset> {
    config.validate()?;
    let classes = config.classes();
    let samples = (0..config.num_samples)
        .into_par_iter()
        .map(|i| gen_sample(config, &classes, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        image_channels: 3,
        image_height: config.image_size,
        image_width: config.image_size,
        text_len: config.text_len,
        vocab: config.vocabulary(),
        classes,
        samples: samples
            .iter()
            .enumerate()
            .map(|(i, s)| SampleEntry {
                name: sample_name(i, config.num_samples),
                instances: s.instances.len(),
            })
            .collect(),
        generator: Some(config.clone()),
    };
    Ok(Dataset { manifest, samples })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptFile {
    tokens: Vec<usize>,
    spans: Vec<ClassSpan>,
}

fn to_gray(mask: &Array2<bool>) -> Gray8 {
    let (h, w) = mask.dim();
    Gray8 {
        width: w,
        height: h,
        data: mask.iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for (entry, s) in dataset.manifest.samples.iter().zip(&dataset.samples) {
        let name = &entry.name;
        let (c, h, w) = s.image.dim();
        let tensor = Tensor::f32(&[c, h, w], s.image.iter().copied().collect())?;
        io::write_tensor(&tensor, &dir.join("images").join(format!("{name}.s4dt")))?;
        let mask = Gray8 {
            width: w,
            height: h,
            data: s.mask.labels.iter().copied().collect(),
        };
        io::write_pgm(&mask, &dir.join("masks").join(format!("{name}.pgm")))?;
        for (k, inst) in s.instances.iter().enumerate() {
            io::write_pgm(&to_gray(inst), &dir.join("instances").join(format!("{name}_{k}.pgm")))?;
        }
        let prompt = PromptFile {
            tokens: s.tokens.clone(),
            spans: s.spans.spans.clone(),
        };
        io::write_json(&dir.join("prompts").join(format!("{name}.json")), &prompt)?;
    }
    io::write_json(&dir.join("manifest.json"), &dataset.manifest)
}

fn load_sample(dir: &Path, manifest: &Manifest, entry: &SampleEntry) -> Result<ShapesSample> {
    let name = &entry.name;
    let image_path = dir.join("images").join(format!("{name}.s4dt"));
    let tensor = io::read_tensor(&image_path)?;
    let dims = tensor.dims_usize();
    let image = match (&tensor.data, dims.as_slice()) {
        (io::TensorData::F32(v), &[c, h, w]) => {
            Array3::from_shape_vec((c, h, w), v.clone()).map_err(|e| Error::load(&image_path, e.to_string()))?
        }
        _ => {
            return Err(Error::load(&image_path, "expected a 3-D f32 tensor"));
        }
    };
    let mask_path = dir.join("masks").join(format!("{name}.pgm"));
    let gray = io::read_pgm(&mask_path)?;
    let labels = Array2::from_shape_vec((gray.height, gray.width), gray.data)
        .map_err(|e| Error::load(&mask_path, e.to_string()))?;
    let mask = IndexMask::new(labels, manifest.num_classes()).map_err(|e| Error::load(&mask_path, e.to_string()))?;
    let mut instances = Vec::with_capacity(entry.instances);
    for k in 0..entry.instances {
        let p = dir.join("instances").join(format!("{name}_{k}.pgm"));
        let g = io::read_pgm(&p)?;
        let m = Array2::from_shape_vec((g.height, g.width), g.data.iter().map(|&v| v != 0).collect())
            .map_err(|e| Error::load(&p, e.to_string()))?;
        instances.push(m);
    }
    let prompt_path = dir.join("prompts").join(format!("{name}.json"));
    let prompt: PromptFile = io::read_json(&prompt_path)?;
    let sample = ShapesSample {
        image,
        tokens: prompt.tokens,
        spans: ClassTokenSpans { spans: prompt.spans },
        mask,
        instances,
    };
    sample
        .validate(manifest)
        .map_err(|e| Error::load(dir.join("masks").join(format!("{name}.pgm")), e.to_string()))?;
    Ok(sample)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = io::read_json(&manifest_path)?;
    manifest
        .validate()
        .map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let samples = manifest
        .samples
        .par_iter()
        .map(|entry| load_sample(dir, &manifest, entry))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> ShapesConfig {
        ShapesConfig {
            num_samples: n,
            seed,
            ..ShapesConfig::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = gen_shapes(&small(40, 3)).unwrap();
        let b = gen_shapes(&small(40, 3)).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            s.validate(&a.manifest).unwrap();
            assert!(!s.instances.is_empty() && s.instances.len() <= 3);
            assert_eq!(s.tokens[0], SOS);
            let classes = s.instance_classes();
            let spanned: BTreeSet<usize> = s.spans.spans.iter().map(|x| x.class).collect();
            assert_eq!(classes.iter().copied().collect::<BTreeSet<_>>(), spanned);
        }
        let c = gen_shapes(&small(40, 4)).unwrap();
        assert_ne!(a.samples[0], c.samples[0]);
    }

    #[test]
    fn single_shape_has_two_labels() {
        let cfg = ShapesConfig {
            min_shapes: 1,
            max_shapes: 1,
            ..small(10, 1)
        };
        for s in gen_shapes(&cfg).unwrap().samples {
            let labels: BTreeSet<u8> = s.mask.labels.iter().copied().collect();
            assert_eq!(labels.len(), 2);
            assert!(labels.contains(&0));
            assert_eq!(s.instances.len(), 1);
            assert!(s.instances[0].iter().filter(|&&b| b).count() >= 9);
        }
    }

    #[test]
    fn two_token_names_form_one_span() {
        let d = gen_shapes(&small(60, 8)).unwrap();
        let dark = d
            .samples
            .iter()
            .flat_map(|s| s.spans.spans.iter())
            .find(|sp| sp.class > KINDS.len())
            .expect("some dark class");
        assert_eq!(dark.ranges[0][1] - dark.ranges[0][0], 2);
    }

    #[test]
    fn tiny_images_fail_to_generate() {
        let cfg = ShapesConfig {
            image_size: 12,
            min_shapes: 3,
            ..small(4, 0)
        };
        assert!(matches!(gen_shapes(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_shapes(&small(12, 5)).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn load_reports_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_shapes(&small(3, 5)).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let missing = dir.path().join("masks").join("001.pgm");
        std::fs::remove_file(&missing).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("001.pgm"), "{err}");

        save_dataset(&d, dir.path()).unwrap();
        let (h, w) = d.samples[2].mask.dim();
        let bad = Gray8 {
            width: w,
            height: h,
            data: vec![9; w * h],
        };
        io::write_pgm(&bad, &dir.path().join("masks").join("002.pgm")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("002.pgm"), "{err}");
    }
}
