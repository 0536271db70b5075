//! Datasets: a seeded Gaussian-mixture generator, IDX and CSV ingestion,
//! stratified hold-out splits and epoch batching.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed;

/// One labelled feature vector. `id` is unique within a bundle and is what
/// split disjointness is checked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let all = [self.train, self.validation, self.test];
        if all.iter().any(|f| !(*f > 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions must be positive and sum to 1: {self:?}")));
        }
        Ok(())
    }

    /// Per-class `(train, validation, test)` counts for `n` examples; every
    /// split gets at least one.
    fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let val = ((n as f64 * self.validation).round() as usize).max(1);
        let test = ((n as f64 * self.test).round() as usize).max(1);
        if n < val + test + 1 {
            return Err(Error::InsufficientData(format!(
                "{n} examples per class cannot populate train/validation/test"
            )));
        }
        Ok((n - val - test, val, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl DatasetBundle {
    /// Stratified random split of `examples`, class by class.
    pub fn split(examples: Vec<Example>, num_classes: usize, fractions: SplitFractions, seed: u64) -> Result<Self> {
        fractions.validate()?;
        let feature_dim = examples
            .first()
            .map(|e| e.features.len())
            .ok_or_else(|| Error::InsufficientData("no examples to split".into()))?;
        let mut by_class: Vec<Vec<Example>> = vec![Vec::new(); num_classes];
        for e in examples {
            if e.label >= num_classes {
                return Err(Error::LabelOutOfRange { label: e.label, num_classes });
            }
            if e.features.len() != feature_dim {
                return Err(Error::shape("example features", feature_dim, e.features.len()));
            }
            by_class[e.label].push(e);
        }
        let mut rng = seed::rng(seed::derive(seed, &[seed::TAG_SPLIT]));
        let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (c, mut members) in by_class.into_iter().enumerate() {
            if members.is_empty() {
                return Err(Error::InsufficientData(format!("class {c} has no examples")));
            }
            let (_, nv, nt) = fractions.counts(members.len())?;
            members.shuffle(&mut rng);
            let rest = members.split_off(nv + nt);
            test.extend(members.drain(nv..));
            validation.extend(members);
            train.extend(rest);
        }
        let bundle = DatasetBundle {
            train,
            validation,
            test,
            num_classes,
            feature_dim,
        };
        bundle.check_disjoint()?;
        Ok(bundle)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(e.id) {
                return Err(Error::InvalidArgument(format!("example id {} appears in more than one split", e.id)));
            }
        }
        Ok(())
    }

    /// Zero-mean unit-variance features using statistics of the train split.
    /// Constant dimensions are centred only.
    pub fn standardized(&self) -> DatasetBundle {
        let n = self.train.len() as f64;
        let mut mean = vec![0.0; self.feature_dim];
        for e in &self.train {
            for (m, v) in mean.iter_mut().zip(&e.features) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; self.feature_dim];
        for e in &self.train {
            for ((s, v), m) in var.iter_mut().zip(&e.features).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale: Vec<f64> = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        let apply = |split: &[Example]| -> Vec<Example> {
            split
                .iter()
                .map(|e| Example {
                    id: e.id,
                    label: e.label,
                    features: e
                        .features
                        .iter()
                        .zip(&mean)
                        .zip(&scale)
                        .map(|((v, m), s)| (v - m) * s)
                        .collect(),
                })
                .collect()
        };
        DatasetBundle {
            train: apply(&self.train),
            validation: apply(&self.validation),
            test: apply(&self.test),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }
}

/// Parameters of the isotropic Gaussian-mixture generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub num_classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub class_separation: f64,
    #[serde(default)]
    pub splits: SplitFractions,
}

impl GaussianMixture {
    pub fn new(num_classes: usize, dim: usize, n_per_class: usize, class_separation: f64) -> Self {
        GaussianMixture {
            num_classes,
            dim,
            n_per_class,
            class_separation,
            splits: SplitFractions::default(),
        }
    }

    pub fn with_splits(mut self, splits: SplitFractions) -> Self {
        self.splits = splits;
        self
    }

    /// Class centres are seeded random unit directions scaled by the
    /// separation; samples add standard normal noise per dimension.
    pub fn generate(&self, seed: u64) -> Result<DatasetBundle> {
        if self.num_classes < 2 || self.dim < 1 || self.n_per_class < 3 {
            return Err(Error::InvalidArgument(format!(
                "need num_classes >= 2, dim >= 1, n_per_class >= 3, got {self:?}"
            )));
        }
        if !(self.class_separation >= 0.0) {
            return Err(Error::InvalidArgument("class separation must be >= 0".into()));
        }
        self.splits.validate()?;
        self.splits.counts(self.n_per_class)?;
        let mut rng = seed::rng(seed);
        let centres: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| {
                let dir: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dir.iter().map(|v| v / norm * self.class_separation).collect()
            })
            .collect();
        let mut examples = Vec::with_capacity(self.num_classes * self.n_per_class);
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..self.n_per_class {
                let features = centre
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + z
                    })
                    .collect();
                examples.push(Example {
                    id: examples.len() as u64,
                    features,
                    label: c,
                });
            }
        }
        DatasetBundle::split(examples, self.num_classes, self.splits, seed)
    }
}

pub fn generate_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    GaussianMixture::new(num_classes, dim, n_per_class, class_separation).generate(seed)
}

/// Shuffled mini-batches of indices into a split of length `len`. The
/// permutation depends only on `(seed, epoch)`; the last batch may be short.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::InvalidArgument("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = seed::rng(seed::derive(seed, &[seed::TAG_BATCHES, epoch as u64]));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Features of `examples` (optionally a subset) as a `[B, dim]` tensor.
pub fn features_tensor(examples: &[Example], idx: Option<&[usize]>) -> Result<Tensor> {
    match idx {
        Some(idx) => Tensor::from_rows(&idx.iter().map(|&i| examples[i].features.as_slice()).collect::<Vec<_>>()),
        None => Tensor::from_rows(&examples.iter().map(|e| e.features.as_slice()).collect::<Vec<_>>()),
    }
}

pub fn labels_of(examples: &[Example], idx: Option<&[usize]>) -> Vec<usize> {
    match idx {
        Some(idx) => idx.iter().map(|&i| examples[i].label).collect(),
        None => examples.iter().map(|e| e.label).collect(),
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::IdxTruncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Decodes an IDX image file and label file (unsigned-byte payloads).
/// Pixels are scaled to `[0, 1]` by dividing by 255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Vec<Example>> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxFormat(format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxFormat(format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n_images = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    let expected = 16 + n_images * pixels;
    if images.len() < expected {
        return Err(Error::IdxTruncated {
            expected,
            found: images.len(),
        });
    }
    if labels.len() < 8 + n_labels {
        return Err(Error::IdxTruncated {
            expected: 8 + n_labels,
            found: labels.len(),
        });
    }
    Ok((0..n_images)
        .map(|i| Example {
            id: i as u64,
            features: images[16 + i * pixels..16 + (i + 1) * pixels]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
            label: labels[8 + i] as usize,
        })
        .collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Example>> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels)
}

/// Reads a CSV with header `f0,...,fn,label`.
pub fn load_csv(path: &Path) -> Result<Vec<Example>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let width = headers.len();
    let well_formed = width >= 2
        && headers.get(width - 1) == Some("label")
        && headers.iter().take(width - 1).enumerate().all(|(i, h)| h == format!("f{i}"));
    if !well_formed {
        return Err(Error::Config(format!("{}: header must be f0,...,fn,label", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{}: row {}: bad number {s:?}", path.display(), i + 1)))
        };
        let features = rec.iter().take(width - 1).map(parse).collect::<Result<Vec<_>>>()?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} row {}", path.display(), i + 1)));
        }
        let label = rec[width - 1]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{}: row {}: bad label", path.display(), i + 1)))?;
        out.push(Example {
            id: i as u64,
            features,
            label,
        });
    }
    Ok(out)
}
