//! Datasets: IDX digit files for scaled-down reproductions and Gaussian
//! blobs for CI-sized experiments.

mod idx;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, domain};

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxOptions};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad magic number {found:#010x} in {what} (expected {expected:#010x})")]
    BadMagic {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    classes: usize,
}

/// Borrowed view of a set of samples, the unit a loss is evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
    pub input_dim: usize,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize, classes: usize) -> Result<Self, DataError> {
        if input_dim == 0 || classes == 0 {
            return Err(DataError::Invalid("input_dim and classes must be positive".into()));
        }
        if features.len() != labels.len() * input_dim {
            return Err(DataError::Invalid(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                input_dim
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelOutOfRange { index, label, classes });
        }
        Ok(Dataset {
            features,
            labels,
            input_dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn as_batch(&self) -> Batch<'_> {
        Batch {
            features: &self.features,
            labels: &self.labels,
            input_dim: self.input_dim,
        }
    }

    /// Copy the given rows, in order, into a new dataset.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            input_dim: self.input_dim,
            classes: self.classes,
        }
    }

    /// Standardize every row to zero mean and unit variance.
    pub fn standardize_rows(&mut self) {
        let d = self.input_dim;
        for row in self.features.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let scale = if var > 0.0 { var.sqrt().recip() } else { 1.0 };
            row.iter_mut().for_each(|x| *x = (*x - mean) * scale);
        }
    }

    /// Write `label,x0,x1,...` rows.
    pub fn write_csv(&self, path: &Path) -> crate::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.input_dim).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.labels[i].to_string()];
            rec.extend(self.row(i).iter().map(|x| format!("{x:?}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| crate::Error::io(path, e))?;
        Ok(())
    }
}

/// Center of blob `c`: `±(1 + c / 2n) e_{(c/2) mod n}`, so classes 0 and 1
/// sit at `+e_1` and `-e_1`.
pub fn blob_center(class: usize, dim: usize) -> Vec<f64> {
    let mut center = vec![0.0; dim];
    let axis = (class / 2) % dim;
    let magnitude = 1.0 + (class / (2 * dim)) as f64;
    center[axis] = if class.is_multiple_of(2) { magnitude } else { -magnitude };
    center
}

/// `per_class` isotropic Gaussian samples with standard deviation `spread`
/// around each of `classes` fixed centers. Rows are grouped by class.
pub fn synth_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset, DataError> {
    if classes == 0 || dim == 0 || per_class == 0 {
        return Err(DataError::Invalid("classes, dim and per_class must be >= 1".into()));
    }
    if !(spread > 0.0) {
        return Err(DataError::Invalid(format!("spread must be positive, got {spread}")));
    }
    let mut rng = rng::stream(seed, domain::DATA, 0);
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let center = blob_center(c, dim);
        for _ in 0..per_class {
            for mu in &center {
                let z: f64 = rng.sample(StandardNormal);
                features.push(mu + spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, dim, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub subset_size: Option<usize>,
    /// Draw the subset with (as near as possible) equal class counts.
    #[serde(default = "default_true")]
    pub balanced: bool,
}

fn default_true() -> bool {
    true
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        SplitSpec {
            train_fraction,
            seed,
            subset_size: None,
            balanced: true,
        }
    }
}

fn subset_indices(ds: &Dataset, size: usize, balanced: bool, rng: &mut impl Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..ds.len()).collect();
    all.shuffle(rng);
    if !balanced {
        all.truncate(size);
        return all;
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for i in all {
        by_class[ds.labels[i]].push(i);
    }
    // round-robin over classes until the quota is filled
    let mut out = Vec::with_capacity(size);
    let mut cursor = vec![0usize; by_class.len()];
    while out.len() < size {
        let mut progressed = false;
        for (c, members) in by_class.iter().enumerate() {
            if out.len() == size {
                break;
            }
            if cursor[c] < members.len() {
                out.push(members[cursor[c]]);
                cursor[c] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    out
}

/// Shuffle (after optional subsetting) and cut into disjoint train/test sets.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), DataError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let mut rng = rng::stream(spec.seed, domain::SPLIT, 0);
    let mut indices = match spec.subset_size {
        Some(0) => return Err(DataError::Invalid("subset_size must be positive".into())),
        Some(n) if n > ds.len() => {
            return Err(DataError::Invalid(format!("subset of {n} from {} samples", ds.len())))
        }
        Some(n) => subset_indices(ds, n, spec.balanced, &mut rng),
        None => (0..ds.len()).collect(),
    };
    indices.shuffle(&mut rng);
    let n_train = ((indices.len() as f64) * spec.train_fraction).round() as usize;
    let (train, test) = indices.split_at(n_train);
    Ok((ds.select(train), ds.select(test)))
}

/// Index batches for one epoch, reshuffled from `epoch_seed`. The last short
/// batch is kept.
pub fn batches(n_samples: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng::stream(epoch_seed, domain::SHUFFLE, 0));
    let size = if batch_size == 0 || batch_size > n_samples {
        if n_samples > 0 && batch_size > n_samples {
            log::warn!("batch size {batch_size} exceeds {n_samples} samples; using one batch");
        }
        n_samples.max(1)
    } else {
        batch_size
    };
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Epoch seed for a run, so a trajectory can be replayed from
/// `(run_seed, epoch)` alone.
pub fn epoch_seed(run_seed: u64, epoch: u64) -> u64 {
    rng::derive_seed(run_seed, domain::SHUFFLE, epoch)
}

pub(crate) fn write_all(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| crate::Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| crate::Error::io(path, e))
}
