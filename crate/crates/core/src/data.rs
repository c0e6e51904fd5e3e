//! Long-tailed datasets: class-size profiles, a synthetic image generator and
//! a reader for the CIFAR binary format with per-class subsampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bytes per CIFAR-10 binary record: one label byte and a planar 32x32 RGB image.
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_PIXELS;
const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Exponentially decaying class sizes `n_max * im^(-i / (n - 1))`, rounded
/// to the nearest integer. Class 0 is the largest.
pub fn make_profile(n_classes: usize, im: f64, n_max: usize) -> Result<Vec<usize>> {
    if n_classes == 0 {
        return Err(Error::invalid("n_classes", "must be at least 1"));
    }
    if !im.is_finite() || im < 1.0 {
        return Err(Error::invalid("imbalance", format!("must be >= 1, got {im}")));
    }
    if n_classes == 1 {
        return Ok(vec![n_max.max(1)]);
    }
    let counts: Vec<usize> = (0..n_classes)
        .map(|i| {
            let frac = i as f64 / (n_classes - 1) as f64;
            (n_max as f64 * im.powf(-frac)).round() as usize
        })
        .collect();
    if counts.last() == Some(&0) {
        return Err(Error::invalid(
            "n_max",
            format!("{n_max} samples at imbalance {im} leaves the smallest class empty"),
        ));
    }
    Ok(counts)
}

/// Ratio of the largest to the smallest class count.
pub fn imbalance_factor(counts: &[usize]) -> Result<f64> {
    let max = counts.iter().max().ok_or_else(|| Error::invalid("counts", "empty profile"))?;
    let min = *counts.iter().min().expect("non-empty");
    if min == 0 {
        return Err(Error::invalid("counts", "a class has no samples"));
    }
    Ok(*max as f64 / min as f64)
}

/// Images in `[0, 1]`, `[N, C, H, W]`, with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &y in &self.labels {
            if y < n_classes {
                counts[y] += 1;
            }
        }
        counts
    }

    /// Indices of the samples of each class, in dataset order.
    pub fn indices_by_class(&self, n_classes: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    fn from_parts(images: Vec<f32>, labels: Vec<usize>, chw: [usize; 3]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("dataset split is empty".into()));
        }
        let images = Tensor::new(vec![labels.len(), chw[0], chw[1], chw[2]], images)?;
        Ok(Self { images, labels })
    }

    pub fn save(&self, images: &Path, labels: &Path) -> Result<()> {
        self.images.save(images)?;
        let l = Tensor::new(vec![self.labels.len()], self.labels.iter().map(|&y| y as f32).collect())?;
        l.save(labels)
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        for p in [images, labels] {
            if !p.exists() {
                return Err(Error::MissingArtifact {
                    path: p.to_path_buf(),
                    producer: "gen-data",
                });
            }
        }
        let images = Tensor::load(images)?;
        let labels: Vec<usize> = Tensor::load(labels)?.data().iter().map(|&v| v as usize).collect();
        if images.ndim() != 4 || images.dim(0) != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{:?} images for {} labels", images.shape(), labels.len()),
            ));
        }
        Ok(Self { images, labels })
    }
}

/// Map stored `[0, 1]` pixels to the network's `[-1, 1]` input range.
pub fn to_model_input(images: &Tensor<f32>) -> Tensor<f32> {
    images.map(|v| 2.0 * v - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    CifarBinary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub source: DataSource,
    pub seed: u64,
    /// How each class was cut down to its profile count.
    pub subsampling: String,
    /// Split file names relative to the manifest directory.
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.class_names.len();
        if self.counts.len() != n || self.test_counts.len() != n {
            return Err(Error::Data(format!(
                "manifest lists {n} classes but {} train and {} test counts",
                self.counts.len(),
                self.test_counts.len()
            )));
        }
        if self.counts.contains(&0) {
            return Err(Error::Data("manifest has a class with no training samples".into()));
        }
        Ok(())
    }

    fn file(&self, dir: &Path, key: &str) -> Result<PathBuf> {
        self.files
            .get(key)
            .map(|f| dir.join(f))
            .ok_or_else(|| Error::Data(format!("manifest has no `{key}` file entry")))
    }
}

fn default_files() -> BTreeMap<String, String> {
    [
        ("train_images", "train_images.tnsr"),
        ("train_labels", "train_labels.tnsr"),
        ("test_images", "test_images.tnsr"),
        ("test_labels", "test_labels.tnsr"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Write both splits and the manifest into `dir`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, train: &Dataset, test: &Dataset) -> Result<()> {
    manifest.validate()?;
    fs::create_dir_all(dir)?;
    train.save(&manifest.file(dir, "train_images")?, &manifest.file(dir, "train_labels")?)?;
    test.save(&manifest.file(dir, "test_images")?, &manifest.file(dir, "test_labels")?)?;
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            producer: "gen-data",
        });
    }
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Manifest plus both splits; checks the stored labels against the manifest counts.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset, Dataset)> {
    let manifest = load_manifest(dir)?;
    let train = Dataset::load(&manifest.file(dir, "train_images")?, &manifest.file(dir, "train_labels")?)?;
    let test = Dataset::load(&manifest.file(dir, "test_images")?, &manifest.file(dir, "test_labels")?)?;
    let n = manifest.n_classes();
    if train.class_counts(n) != manifest.counts || test.class_counts(n) != manifest.test_counts {
        return Err(Error::Data(format!(
            "stored labels in {} disagree with the manifest counts",
            dir.display()
        )));
    }
    Ok((manifest, train, test))
}

// ---------------------------------------------------------------------------
// Synthetic images

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disc,
    Square,
    Ring,
    Cross,
}

/// The class-conditioned foreground object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPattern {
    pub shape: Shape,
    pub color: [f32; 3],
    /// Nominal centre `(row, col)` in pixels.
    pub center: (f32, f32),
    pub radius: f32,
}

/// Nuisance content drawn from the same distribution for every class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    /// Per-channel base intensity is uniform in this range.
    pub tint: (f32, f32),
    /// Amplitude of the oriented sinusoidal texture.
    pub texture_contrast: f32,
    /// Spatial frequency range of the texture, radians per pixel.
    pub texture_freq: (f32, f32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassPattern>,
    pub background: BackgroundSpec,
    /// Jitter of the object centre, pixels.
    pub position_jitter: f32,
    /// Relative jitter of the object radius.
    pub scale_jitter: f32,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
}

const PALETTE: [[f32; 3]; 5] = [
    [0.95, 0.15, 0.10],
    [0.10, 0.85, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.80, 0.15, 0.90],
];

const SHAPES: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Ring, Shape::Cross];

impl SyntheticSpec {
    /// 32x32 RGB images. Classes `i` and `i + 5` share a colour and differ in
    /// shape and placement, so tail classes have natural head-class look-alikes.
    pub fn desk(n_classes: usize) -> Self {
        let classes = (0..n_classes)
            .map(|i| {
                let group = i / PALETTE.len();
                let slot = i % PALETTE.len();
                let color = PALETTE[slot];
                let shape = SHAPES[(group + slot) % SHAPES.len()];
                let angle = (i as f32) * 2.399_963; // golden angle
                let center = (16.0 + 4.0 * angle.sin(), 16.0 + 4.0 * angle.cos());
                ClassPattern {
                    shape,
                    color,
                    center,
                    radius: 9.0 + (i % 3) as f32,
                }
            })
            .collect();
        Self {
            height: 32,
            width: 32,
            classes,
            background: BackgroundSpec {
                tint: (0.15, 0.75),
                texture_contrast: 0.2,
                texture_freq: (0.25, 0.9),
            },
            position_jitter: 3.0,
            scale_jitter: 0.15,
            noise: 0.05,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a == b {
                    return Err(Error::invalid("synthetic spec", "two classes share a pattern"));
                }
            }
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid("synthetic spec", "images must be at least 8x8"));
        }
        Ok(())
    }

    /// Render one image, `[3, H, W]` in `[0, 1]`.
    pub fn render(&self, class: usize, rng: &mut impl Rng) -> Vec<f32> {
        let (h, w) = (self.height, self.width);
        let mut img = self.render_background(rng);
        let pat = &self.classes[class];
        let cy = pat.center.0 + rng.gen_range(-self.position_jitter..=self.position_jitter);
        let cx = pat.center.1 + rng.gen_range(-self.position_jitter..=self.position_jitter);
        let r = pat.radius * (1.0 + rng.gen_range(-self.scale_jitter..=self.scale_jitter));
        let brightness = rng.gen_range(0.85f32..1.0);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                let alpha = coverage(pat.shape, dy, dx, r);
                if alpha <= 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let px = &mut img[c * h * w + y * w + x];
                    *px = (1.0 - alpha) * *px + alpha * pat.color[c] * brightness;
                }
            }
        }
        let noise = self.noise;
        for px in img.iter_mut() {
            *px = (*px + noise * standard_normal(rng)).clamp(0.0, 1.0);
        }
        img
    }

    /// Background only (no object, no pixel noise), `[3, H, W]`.
    pub fn render_background(&self, rng: &mut impl Rng) -> Vec<f32> {
        let (h, w) = (self.height, self.width);
        let bg = &self.background;
        let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(bg.tint.0..=bg.tint.1));
        let theta = rng.gen_range(0.0..std::f32::consts::PI);
        let freq = rng.gen_range(bg.texture_freq.0..=bg.texture_freq.1);
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        let (s, c) = theta.sin_cos();
        let mut img = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let wave = (freq * (c * x as f32 + s * y as f32) + phase).sin() * bg.texture_contrast;
                for ch in 0..3 {
                    img[ch * h * w + y * w + x] = (tint[ch] + wave).clamp(0.0, 1.0);
                }
            }
        }
        img
    }
}

/// Anti-aliased membership of offset `(dy, dx)` in a shape of radius `r`.
fn coverage(shape: Shape, dy: f32, dx: f32, r: f32) -> f32 {
    let edge = |signed: f32| (0.5 - signed).clamp(0.0, 1.0);
    match shape {
        Shape::Disc => edge((dy * dy + dx * dx).sqrt() - r),
        Shape::Square => edge(dy.abs().max(dx.abs()) - 0.8 * r),
        Shape::Ring => {
            let d = (dy * dy + dx * dx).sqrt();
            edge((d - 0.7 * r).abs() - 0.3 * r)
        }
        Shape::Cross => {
            let arm = 0.3 * r;
            let bar = |a: f32, b: f32| edge((a.abs() - arm).max(b.abs() - r));
            bar(dy, dx).max(bar(dx, dy))
        }
    }
}

fn standard_normal(rng: &mut impl Rng) -> f32 {
    // Box-Muller
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// Stateless stream derivation so each sample's RNG depends only on its identity.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut x = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        // splitmix64 finaliser
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_TEST: u64 = 2;

fn render_split(spec: &SyntheticSpec, counts: &[usize], seed: u64, split: u64) -> Result<Dataset> {
    let (h, w) = (spec.height, spec.width);
    let total: usize = counts.iter().sum();
    let mut images = Vec::with_capacity(total * 3 * h * w);
    let mut labels = Vec::with_capacity(total);
    for (class, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, split, class as u64, i as u64]));
            images.extend(spec.render(class, &mut rng));
            labels.push(class);
        }
    }
    Dataset::from_parts(images, labels, [3, h, w])
}

/// Render a long-tailed training split with `counts[c]` images of class `c`
/// and a balanced test split with `test_per_class` images per class.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    counts: &[usize],
    test_per_class: usize,
    seed: u64,
) -> Result<(DatasetManifest, Dataset, Dataset)> {
    spec.validate()?;
    if counts.len() != spec.n_classes() {
        return Err(Error::invalid(
            "counts",
            format!("{} counts for {} synthetic classes", counts.len(), spec.n_classes()),
        ));
    }
    if counts.contains(&0) || test_per_class == 0 {
        return Err(Error::invalid("counts", "every class needs at least one sample per split"));
    }
    let train = render_split(spec, counts, seed, SPLIT_TRAIN)?;
    let test_counts = vec![test_per_class; counts.len()];
    let test = render_split(spec, &test_counts, seed, SPLIT_TEST)?;
    let manifest = DatasetManifest {
        class_names: (0..counts.len()).map(|i| format!("class_{i}")).collect(),
        counts: counts.to_vec(),
        test_counts,
        source: DataSource::Synthetic,
        seed,
        subsampling: "generated".into(),
        files: default_files(),
    };
    Ok((manifest, train, test))
}

// ---------------------------------------------------------------------------
// CIFAR binary

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    /// Planar RGB bytes, 3 x 32 x 32.
    pub pixels: Vec<u8>,
    /// Byte offset of the record in its source file.
    pub offset: u64,
}

impl CifarRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CIFAR_RECORD_BYTES);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn to_f32(&self) -> impl Iterator<Item = f32> + '_ {
        self.pixels.iter().map(|&b| b as f32 / 255.0)
    }
}

/// Re-encode an image in `[0, 1]` as a CIFAR record.
pub fn encode_cifar_record(label: u8, image: &[f32]) -> Result<Vec<u8>> {
    if image.len() != CIFAR_PIXELS {
        return Err(Error::shape(
            "cifar record",
            format!("image has {} values, expected {CIFAR_PIXELS}", image.len()),
        ));
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD_BYTES);
    out.push(label);
    out.extend(image.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn parse_cifar(bytes: &[u8], n_classes: usize) -> Result<Vec<CifarRecord>> {
    let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            reason: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD_BYTES} bytes",
                bytes.len() - whole
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let offset = (i * CIFAR_RECORD_BYTES) as u64;
            if rec[0] as usize >= n_classes {
                return Err(Error::Format {
                    offset,
                    reason: format!("label {} out of range for {n_classes} classes", rec[0]),
                });
            }
            Ok(CifarRecord {
                label: rec[0],
                pixels: rec[1..].to_vec(),
                offset,
            })
        })
        .collect()
}

fn records_to_dataset(records: &[&CifarRecord]) -> Result<Dataset> {
    let images = records.iter().flat_map(|r| r.to_f32()).collect();
    let labels = records.iter().map(|r| r.label as usize).collect();
    Dataset::from_parts(images, labels, [3, CIFAR_SIDE, CIFAR_SIDE])
}

/// Keep `counts[c]` training records of each class and pass the test split
/// through untouched.
///
/// Without a shuffle seed the first `counts[c]` occurrences in file order are
/// kept; with one, each class's occurrences are shuffled with a per-class
/// stream before truncation. Kept records stay in file order either way.
pub fn ingest_cifar(
    train_files: &[Vec<u8>],
    test_files: &[Vec<u8>],
    counts: &[usize],
    shuffle_seed: Option<u64>,
) -> Result<(DatasetManifest, Dataset, Dataset)> {
    let n_classes = counts.len();
    if n_classes == 0 || n_classes > 256 {
        return Err(Error::invalid("counts", "need between 1 and 256 classes"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid("counts", format!("class {c} would have no samples")));
    }
    let parse_all = |files: &[Vec<u8>]| -> Result<Vec<CifarRecord>> {
        let mut all = Vec::new();
        for f in files {
            all.extend(parse_cifar(f, n_classes)?);
        }
        Ok(all)
    };
    let train_all = parse_all(train_files)?;
    let test_all = parse_all(test_files)?;

    let mut by_class = vec![Vec::new(); n_classes];
    for (i, r) in train_all.iter().enumerate() {
        by_class[r.label as usize].push(i);
    }
    let mut keep = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < counts[c] {
            return Err(Error::Data(format!(
                "class {c} has {} training records, profile asks for {}",
                idx.len(),
                counts[c]
            )));
        }
        if let Some(seed) = shuffle_seed {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, c as u64])));
        }
        keep.extend_from_slice(&idx[..counts[c]]);
    }
    keep.sort_unstable();
    let kept: Vec<&CifarRecord> = keep.iter().map(|&i| &train_all[i]).collect();
    let train = records_to_dataset(&kept)?;
    let test = records_to_dataset(&test_all.iter().collect::<Vec<_>>())?;
    let manifest = DatasetManifest {
        class_names: (0..n_classes).map(|i| format!("class_{i}")).collect(),
        counts: counts.to_vec(),
        test_counts: test.class_counts(n_classes),
        source: DataSource::CifarBinary,
        seed: shuffle_seed.unwrap_or(0),
        subsampling: match shuffle_seed {
            Some(_) => "seeded_shuffle_then_truncate".into(),
            None => "first_in_file_order".into(),
        },
        files: default_files(),
    };
    Ok((manifest, train, test))
}
