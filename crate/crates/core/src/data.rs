//! Pluggable dataset loaders: a procedural 10-class image corpus for desk-scale
//! runs and a reader for the CIFAR-10 binary distribution.
//!
//! Index layout for every loader: the official training split first, then the
//! official test split, matching [`crate::store::build_split_plan`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::store::IndexSet;

/// Read access to labelled examples by dataset index.
pub trait ExampleSource: Sync {
    fn dataset_id(&self) -> &str;
    /// `[channels, height, width]`.
    fn shape(&self) -> [usize; 3];
    fn classes(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn label(&self, index: u32) -> usize;
    /// Writes the normalized features of `index` into `out`.
    fn write_features(&self, index: u32, out: &mut [f32]);

    fn feature_len(&self) -> usize {
        self.shape().iter().product()
    }
}

/// Stacks features and labels of `indices` into contiguous buffers.
pub fn gather(source: &dyn ExampleSource, indices: &[u32]) -> (Vec<f32>, Vec<usize>) {
    let d = source.feature_len();
    let mut x = vec![0.0f32; indices.len() * d];
    let mut y = Vec::with_capacity(indices.len());
    for (row, &i) in x.chunks_exact_mut(d).zip(indices) {
        source.write_features(i, row);
        y.push(source.label(i));
    }
    (x, y)
}

/// Standard crop-and-flip augmentation: pad by `max(1, h/8)` with zeros,
/// take a random crop of the original size and flip horizontally with
/// probability 1/2.
pub fn augment(x: &mut [f32], shape: [usize; 3], rng: &mut impl Rng) {
    let [c, h, w] = shape;
    let pad = (h / 8).max(1) as i64;
    let dy = rng.random_range(-pad..=pad) as isize;
    let dx = rng.random_range(-pad..=pad) as isize;
    let flip = rng.random_bool(0.5);
    let src = x.to_vec();
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let sy = yy as isize + dy;
                let sx0 = xx as isize + dx;
                let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                x[ch * h * w + yy * w + xx] =
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        src[ch * h * w + sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Storage {
    Float(Vec<f32>),
    /// Raw bytes normalized per channel on read.
    Bytes {
        data: Vec<u8>,
        mean: Vec<f32>,
        std: Vec<f32>,
    },
}

/// An in-memory labelled image dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    id: String,
    shape: [usize; 3],
    classes: usize,
    storage: Storage,
    labels: Vec<u8>,
    /// Number of leading examples that come from the official training split.
    train_pool: usize,
}

impl Dataset {
    pub fn from_features(
        id: &str,
        shape: [usize; 3],
        classes: usize,
        features: Vec<f32>,
        labels: Vec<u8>,
        train_pool: usize,
    ) -> Result<Self> {
        let d: usize = shape.iter().product();
        if features.len() != labels.len() * d {
            return Err(BenchError::ShapeMismatch(format!(
                "{} features for {} examples of size {d}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(BenchError::BadLabel {
                label: bad as usize,
                classes,
            });
        }
        Ok(Dataset {
            id: id.to_string(),
            shape,
            classes,
            storage: Storage::Float(features),
            labels,
            train_pool,
        })
    }

    /// Examples available in the official training split (train + val pool).
    pub fn train_pool(&self) -> usize {
        self.train_pool
    }

    /// Examples available in the official test split.
    pub fn test_pool(&self) -> usize {
        self.labels.len() - self.train_pool
    }

    /// Checks that a plan's index layout fits this dataset.
    pub fn check_plan(&self, plan: &crate::store::SplitPlan) -> Result<()> {
        let pool = plan.train_indices.len() + plan.val_indices.len();
        if pool != self.train_pool || plan.test_indices.len() > self.test_pool() {
            return Err(BenchError::BadSizes(format!(
                "plan needs {pool} train-pool / {} test examples, dataset {} has {} / {}",
                plan.test_indices.len(),
                self.id,
                self.train_pool,
                self.test_pool()
            )));
        }
        Ok(())
    }
}

impl ExampleSource for Dataset {
    fn dataset_id(&self) -> &str {
        &self.id
    }

    fn shape(&self) -> [usize; 3] {
        self.shape
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, index: u32) -> usize {
        self.labels[index as usize] as usize
    }

    fn write_features(&self, index: u32, out: &mut [f32]) {
        let d = out.len();
        let start = index as usize * d;
        match &self.storage {
            Storage::Float(f) => out.copy_from_slice(&f[start..start + d]),
            Storage::Bytes { data, mean, std } => {
                let plane = d / mean.len();
                for (j, o) in out.iter_mut().enumerate() {
                    let ch = j / plane;
                    *o = (data[start + j] as f32 / 255.0 - mean[ch]) / std[ch];
                }
            }
        }
    }
}

/// A view that only exposes `allowed` indices. Reading any other index panics,
/// which makes accidental access to held-out data a hard failure.
pub struct Restricted<'a> {
    inner: &'a dyn ExampleSource,
    allowed: IndexSet,
}

impl<'a> Restricted<'a> {
    pub fn new(inner: &'a dyn ExampleSource, allowed: IndexSet) -> Self {
        Restricted { inner, allowed }
    }

    fn check(&self, index: u32) {
        assert!(
            self.allowed.contains(index),
            "index {index} is not reachable through this view"
        );
    }
}

impl ExampleSource for Restricted<'_> {
    fn dataset_id(&self) -> &str {
        self.inner.dataset_id()
    }

    fn shape(&self) -> [usize; 3] {
        self.inner.shape()
    }

    fn classes(&self) -> usize {
        self.inner.classes()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn label(&self, index: u32) -> usize {
        self.check(index);
        self.inner.label(index)
    }

    fn write_features(&self, index: u32, out: &mut [f32]) {
        self.check(index);
        self.inner.write_features(index, out)
    }
}

/// Procedural image corpus: each class owns a few smooth multi-channel
/// templates (sums of Gaussian bumps); an example is a randomly shifted,
/// contrast-jittered template plus pixel noise, with a fraction of labels
/// flipped to another class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub shape: [usize; 3],
    pub train_pool: usize,
    pub test_pool: usize,
    pub templates_per_class: usize,
    pub bumps_per_template: usize,
    pub noise: f64,
    pub max_shift: usize,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            shape: [3, 16, 16],
            train_pool: 9_000,
            test_pool: 2_000,
            templates_per_class: 3,
            bumps_per_template: 5,
            noise: 0.8,
            max_shift: 2,
            label_noise: 0.05,
            seed: 2024,
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Dataset> {
        if self.classes < 2 || self.templates_per_class == 0 || self.train_pool == 0 {
            return Err(BenchError::BadSizes("synthetic spec needs ≥2 classes, ≥1 template, ≥1 example".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) || self.noise < 0.0 {
            return Err(BenchError::Config("synthetic noise levels out of range".into()));
        }
        let [c, h, w] = self.shape;
        let d = c * h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let templates: Vec<Vec<f32>> = (0..self.classes * self.templates_per_class)
            .map(|_| self.template(&mut rng))
            .collect();

        let n = self.train_pool + self.test_pool;
        let noise = Normal::new(0.0, self.noise).expect("valid sigma");
        let mut features = vec![0.0f32; n * d];
        let mut labels = Vec::with_capacity(n);
        let s = self.max_shift as i64;
        // templates have unit variance; rescale so features are roughly standardized
        let scale = (1.0 / (1.0 + self.noise * self.noise)).sqrt() as f32;
        for row in features.chunks_exact_mut(d) {
            let class = rng.random_range(0..self.classes);
            let t = &templates[class * self.templates_per_class + rng.random_range(0..self.templates_per_class)];
            let (dy, dx) = (
                rng.random_range(-s..=s) as isize,
                rng.random_range(-s..=s) as isize,
            );
            let contrast = rng.random_range(0.8..1.2f32);
            for ch in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        let (sy, sx) = (yy as isize - dy, xx as isize - dx);
                        let base = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            t[ch * h * w + sy as usize * w + sx as usize]
                        } else {
                            0.0
                        };
                        row[ch * h * w + yy * w + xx] =
                            scale * (contrast * base + noise.sample(&mut rng) as f32);
                    }
                }
            }
            let label = if rng.random_bool(self.label_noise) {
                (class + rng.random_range(1..self.classes)) % self.classes
            } else {
                class
            };
            labels.push(label as u8);
        }
        Dataset::from_features(
            &format!("synthetic-{}c-{}x{}x{}-s{}", self.classes, c, h, w, self.seed),
            self.shape,
            self.classes,
            features,
            labels,
            self.train_pool,
        )
    }

    fn template(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let [c, h, w] = self.shape;
        let mut t = vec![0.0f32; c * h * w];
        for _ in 0..self.bumps_per_template {
            let cy = rng.random_range(0.0..h as f32);
            let cx = rng.random_range(0.0..w as f32);
            let sigma = rng.random_range(0.1..0.25f32) * h.max(w) as f32;
            let amps: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0f32)).collect();
            for ch in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        let d2 = (yy as f32 - cy).powi(2) + (xx as f32 - cx).powi(2);
                        t[ch * h * w + yy * w + xx] += amps[ch] * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
        let mean = t.iter().sum::<f32>() / t.len() as f32;
        let std = (t.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / t.len() as f32).sqrt().max(1e-6);
        t.iter_mut().for_each(|v| *v = (*v - mean) / std);
        t
    }
}

const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads the CIFAR-10 binary release (`data_batch_{1..5}.bin`, `test_batch.bin`)
/// from `dir`, keeping the first `train_limit` training and `test_limit` test
/// images.
pub fn load_cifar10(dir: &Path, train_limit: usize, test_limit: usize) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut read_split = |files: &[String], limit: usize| -> Result<usize> {
        let mut taken = 0;
        for name in files {
            if taken >= limit {
                break;
            }
            let path = dir.join(name);
            let bytes = std::fs::read(&path).map_err(|e| BenchError::io(&path, e))?;
            if bytes.len() % CIFAR_RECORD != 0 {
                return Err(BenchError::Format {
                    path,
                    reason: format!("size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
                });
            }
            for rec in bytes.chunks_exact(CIFAR_RECORD) {
                if taken >= limit {
                    break;
                }
                if rec[0] >= 10 {
                    return Err(BenchError::BadLabel {
                        label: rec[0] as usize,
                        classes: 10,
                    });
                }
                labels.push(rec[0]);
                data.extend_from_slice(&rec[1..]);
                taken += 1;
            }
        }
        Ok(taken)
    };
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let train_pool = read_split(&train_files, train_limit)?;
    read_split(&["test_batch.bin".to_string()], test_limit)?;
    Ok(Dataset {
        id: "cifar10".to_string(),
        shape: [3, 32, 32],
        classes: 10,
        storage: Storage::Bytes {
            data,
            mean: CIFAR_MEAN.to_vec(),
            std: CIFAR_STD.to_vec(),
        },
        labels,
        train_pool,
    })
}
