//! Datasets: IDX and CIFAR binary readers, seeded disjoint splits and small
//! synthetic 2-D problems.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated ({got} bytes, need {need})")]
    Truncated { path: PathBuf, got: usize, need: usize },
    #[error("image count {images} differs from label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("split needs {need} examples but only {have} are available")]
    PlanTooLarge { need: usize, have: usize },
    #[error("invalid split plan: {0}")]
    BadPlan(String),
    #[error("no {0} files found in {1}")]
    Missing(String, PathBuf),
    #[error("dataset is empty")]
    Empty,
}

/// Feature matrix `(n, features)` in `[0, 1]` (for image data) plus labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Position of each example in the originating collection.
    pub indices: Vec<usize>,
    /// Hex SHA-256 of the originating bytes.
    pub checksum: String,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Tensor, labels: Vec<usize>, classes: usize) -> Result<Dataset, DataError> {
        let n = labels.len();
        if x.shape().len() != 2 || x.shape()[0] != n {
            return Err(DataError::CountMismatch {
                images: x.shape().first().copied().unwrap_or(0),
                labels: n,
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::LabelRange { label, classes });
        }
        let mut h = Sha256::new();
        for v in x.data() {
            h.update(v.to_le_bytes());
        }
        for l in &labels {
            h.update((*l as u64).to_le_bytes());
        }
        Ok(Dataset {
            name: name.into(),
            x,
            labels,
            classes,
            indices: (0..n).collect(),
            checksum: hex(&h.finalize()),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.shape()[1]
    }

    /// Rows `idx` (positions within this dataset), keeping origin indices.
    pub fn subset(&self, idx: &[usize], name: &str) -> Dataset {
        let f = self.features();
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Dataset {
            name: name.to_string(),
            x: Tensor::new(vec![idx.len(), f], data).expect("row count matches"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            indices: idx.iter().map(|&i| self.indices[i]).collect(),
            checksum: self.checksum.clone(),
        }
    }

    /// Shift origin indices, placing this collection after another in a
    /// shared index space.
    pub fn offset_indices(mut self, by: usize) -> Dataset {
        self.indices.iter_mut().for_each(|i| *i += by);
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn index_set(&self) -> BTreeSet<usize> {
        self.indices.iter().copied().collect()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = File::open(path).map_err(io)?;
    let mut raw = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut raw).map_err(io)?;
    } else {
        file.read_to_end(&mut raw).map_err(io)?;
    }
    Ok(raw)
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Read an IDX image/label pair (optionally gzip-compressed).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img = read_maybe_gz(images_path)?;
    let lab = read_maybe_gz(labels_path)?;
    let short = |path: &Path, got, need| DataError::Truncated {
        path: path.to_path_buf(),
        got,
        need,
    };
    if img.len() < 16 {
        return Err(short(images_path, img.len(), 16));
    }
    if lab.len() < 8 {
        return Err(short(labels_path, lab.len(), 8));
    }
    for (bytes, path, expected) in [(&img, images_path, IMAGE_MAGIC), (&lab, labels_path, LABEL_MAGIC)] {
        let found = be_u32(bytes, 0);
        if found != expected {
            return Err(DataError::BadMagic {
                path: path.to_path_buf(),
                found,
                expected,
            });
        }
    }
    let (n, rows, cols) = (be_u32(&img, 4) as usize, be_u32(&img, 8) as usize, be_u32(&img, 12) as usize);
    let n_labels = be_u32(&lab, 4) as usize;
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let features = rows * cols;
    let need = 16 + n * features;
    if img.len() < need {
        return Err(short(images_path, img.len(), need));
    }
    if lab.len() < 8 + n {
        return Err(short(labels_path, lab.len(), 8 + n));
    }
    let x: Vec<f64> = img[16..need].iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let mut ds = Dataset::new(
        images_path.file_name().map_or("idx".into(), |f| f.to_string_lossy().into_owned()),
        Tensor::new(vec![n, features], x).expect("sized above"),
        labels,
        classes,
    )?;
    let mut h = Sha256::new();
    h.update(&img[..need]);
    h.update(&lab[..8 + n]);
    ds.checksum = hex(&h.finalize());
    Ok(ds)
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.exists())
}

/// Load `{prefix}-images-idx3-ubyte[.gz]` and its labels from `dir`;
/// `prefix` is `train` or `t10k`.
pub fn load_idx_dir(dir: &Path, prefix: &str) -> Result<Dataset, DataError> {
    let images = find_file(dir, &format!("{prefix}-images-idx3-ubyte"));
    let labels = find_file(dir, &format!("{prefix}-labels-idx1-ubyte"));
    match (images, labels) {
        (Some(i), Some(l)) => {
            let mut d = load_idx(&i, &l)?;
            d.name = format!("{}/{prefix}", dir.file_name().map_or("idx".into(), |f| f.to_string_lossy()));
            Ok(d)
        }
        _ => Err(DataError::Missing(format!("{prefix} IDX"), dir.to_path_buf())),
    }
}

/// Read CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record).
pub fn load_cifar(paths: &[PathBuf]) -> Result<Dataset, DataError> {
    const RECORD: usize = 1 + 3072;
    let mut x = Vec::new();
    let mut labels = Vec::new();
    let mut h = Sha256::new();
    for path in paths {
        let raw = read_maybe_gz(path)?;
        if raw.is_empty() || raw.len() % RECORD != 0 {
            return Err(DataError::Truncated {
                path: path.clone(),
                got: raw.len(),
                need: raw.len().div_ceil(RECORD).max(1) * RECORD,
            });
        }
        h.update(&raw);
        for rec in raw.chunks_exact(RECORD) {
            labels.push(rec[0] as usize);
            x.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let n = labels.len();
    let mut ds = Dataset::new("cifar10", Tensor::new(vec![n, 3072], x).expect("sized"), labels, 10)?;
    ds.checksum = hex(&h.finalize());
    Ok(ds)
}

/// Sizes of the disjoint partitions drawn from a training pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Examples shared out among the trial groups.
    pub train_total: usize,
    pub per_trial: usize,
    pub trial_count: usize,
    pub validation: usize,
    pub test: usize,
    pub seed: u64,
}

impl SplitPlan {
    /// Five disjoint trial groups plus validation and test.
    pub fn alr(seed: u64) -> SplitPlan {
        SplitPlan {
            train_total: 53_000,
            per_trial: 10_600,
            trial_count: 5,
            validation: 3_500,
            test: 3_500,
            seed,
        }
    }

    /// One training set for schedule evolution.
    pub fn dlr(seed: u64) -> SplitPlan {
        SplitPlan {
            train_total: 7_000,
            per_trial: 7_000,
            trial_count: 1,
            validation: 1_500,
            test: 1_500,
            seed,
        }
    }

    pub fn single(train: usize, validation: usize, test: usize, seed: u64) -> SplitPlan {
        SplitPlan {
            train_total: train,
            per_trial: train,
            trial_count: 1,
            validation,
            test,
            seed,
        }
    }

    pub fn needed(&self) -> usize {
        self.train_total + self.validation + self.test
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.per_trial == 0 || self.trial_count == 0 {
            return Err(DataError::BadPlan("trial groups must be non-empty".into()));
        }
        if self.per_trial * self.trial_count > self.train_total {
            return Err(DataError::BadPlan(format!(
                "{} trials of {} exceed the training total {}",
                self.trial_count, self.per_trial, self.train_total
            )));
        }
        if self.validation == 0 || self.test == 0 {
            return Err(DataError::BadPlan("validation and test must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub trials: Vec<Dataset>,
    pub validation: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Origin indices of every example in any partition.
    pub fn all_indices(&self) -> BTreeSet<usize> {
        let mut s = self.validation.index_set();
        s.extend(self.test.indices.iter().copied());
        for t in &self.trials {
            s.extend(t.indices.iter().copied());
        }
        s
    }
}

/// Seeded disjoint partition of `d` according to `plan`.
pub fn split(d: &Dataset, plan: &SplitPlan) -> Result<Splits, DataError> {
    plan.validate()?;
    if plan.needed() > d.len() {
        return Err(DataError::PlanTooLarge {
            need: plan.needed(),
            have: d.len(),
        });
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut Rng::new(plan.seed).child_named("split"));
    let trials = (0..plan.trial_count)
        .map(|t| d.subset(&order[t * plan.per_trial..(t + 1) * plan.per_trial], &format!("{}/trial{t}", d.name)))
        .collect();
    let v0 = plan.train_total;
    let t0 = v0 + plan.validation;
    Ok(Splits {
        trials,
        validation: d.subset(&order[v0..t0], &format!("{}/validation", d.name)),
        test: d.subset(&order[t0..t0 + plan.test], &format!("{}/test", d.name)),
    })
}

/// A training pool for evolution and a reserve that only the benchmark
/// phase may test on. Both share one index space.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub pool: Dataset,
    pub reserve: Dataset,
}

impl Corpus {
    pub fn new(pool: Dataset, reserve: Dataset) -> Corpus {
        let shift = pool.indices.iter().max().map_or(0, |m| m + 1);
        Corpus {
            pool,
            reserve: reserve.offset_indices(shift),
        }
    }

    /// Split one dataset into pool and reserve (last `reserve` rows after a
    /// seeded shuffle).
    pub fn carve(d: &Dataset, reserve: usize, seed: u64) -> Result<Corpus, DataError> {
        if reserve >= d.len() {
            return Err(DataError::PlanTooLarge {
                need: reserve + 1,
                have: d.len(),
            });
        }
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.shuffle(&mut Rng::new(seed).child_named("reserve"));
        let cut = d.len() - reserve;
        Ok(Corpus {
            pool: d.subset(&order[..cut], &format!("{}/pool", d.name)),
            reserve: d.subset(&order[cut..], &format!("{}/reserve", d.name)),
        })
    }

    /// Fashion-MNIST style directory: training file is the pool, the
    /// official test file the reserve.
    pub fn from_idx_dir(dir: &Path) -> Result<Corpus, DataError> {
        Ok(Corpus::new(load_idx_dir(dir, "train")?, load_idx_dir(dir, "t10k")?))
    }

    /// Partitions for the evolutionary phase; never touches the reserve.
    pub fn evolution_splits(&self, plan: &SplitPlan) -> Result<Splits, DataError> {
        split(&self.pool, plan)
    }

    /// Benchmark partitions: training and validation come from the pool,
    /// the test set from the reserve.
    pub fn benchmark_splits(&self, train: usize, validation: usize, test: usize, seed: u64) -> Result<Splits, DataError> {
        let pool = split(&self.pool, &SplitPlan::single(train, validation, 1, seed))?;
        if test > self.reserve.len() {
            return Err(DataError::PlanTooLarge {
                need: test,
                have: self.reserve.len(),
            });
        }
        let mut order: Vec<usize> = (0..self.reserve.len()).collect();
        order.shuffle(&mut Rng::new(seed).child_named("benchmark-test"));
        Ok(Splits {
            trials: pool.trials,
            validation: pool.validation,
            test: self.reserve.subset(&order[..test], &format!("{}/test", self.reserve.name)),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    TwoGaussians,
    XorBlobs,
    Spiral,
}

impl SyntheticKind {
    pub fn from_name(s: &str) -> Option<SyntheticKind> {
        Some(match s {
            "two_gaussians" => SyntheticKind::TwoGaussians,
            "xor_blobs" => SyntheticKind::XorBlobs,
            "spiral" => SyntheticKind::Spiral,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::TwoGaussians => "two_gaussians",
            SyntheticKind::XorBlobs => "xor_blobs",
            SyntheticKind::Spiral => "spiral",
        }
    }
}

/// Two-class 2-D problems. Labels alternate, so classes differ in count by
/// at most one.
pub fn synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed).child_named(kind.name());
    let gauss = Normal::new(0.0, noise.max(0.0)).expect("non-negative std");
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let (cx, cy) = match kind {
            SyntheticKind::TwoGaussians => {
                if label == 0 {
                    (-1.0, -1.0)
                } else {
                    (1.0, 1.0)
                }
            }
            SyntheticKind::XorBlobs => {
                // class 0 on the (+,+)/(-,-) diagonal, class 1 on the other
                let side = if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
                if label == 0 {
                    (side, side)
                } else {
                    (side, -side)
                }
            }
            SyntheticKind::Spiral => {
                let t = (i / 2) as f64 / (n / 2).max(1) as f64;
                let r = 0.2 + 0.8 * t;
                let a = 3.0 * std::f64::consts::PI * t + label as f64 * std::f64::consts::PI;
                (r * a.cos(), r * a.sin())
            }
        };
        x.push(cx + gauss.sample(&mut rng));
        x.push(cy + gauss.sample(&mut rng));
        labels.push(label);
    }
    Dataset::new(kind.name(), Tensor::new(vec![n, 2], x).expect("sized"), labels, 2).expect("labels in range")
}
