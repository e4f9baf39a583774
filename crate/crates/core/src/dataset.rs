//! On-disk embedding dataset: a `manifest.json` plus headerless little-endian
//! f32 binaries in row-major order.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Rows whose norm is already within this distance of 1 are kept bit-for-bit.
const UNIT_NORM_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_unlabeled: Vec<usize>,
    pub train_labeled: Vec<usize>,
    pub test: Vec<usize>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
}

impl SplitSpec {
    pub fn has_class_split(&self) -> bool {
        !self.seen_classes.is_empty() || !self.unseen_classes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub image_features: Array2<f32>,
    pub image_features_aug: Option<Array2<f32>>,
    pub text_features: Array2<f32>,
    pub class_names: Vec<String>,
    pub labels: Vec<Option<usize>>,
    pub splits: SplitSpec,
    pub notes: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub image_features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features_aug: Option<String>,
    pub text_features: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ManifestSplits {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_unlabeled: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labeled: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen_classes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen_classes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n_samples: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub class_names: Vec<String>,
    pub labels: Vec<i64>,
    pub files: ManifestFiles,
    #[serde(default)]
    pub splits: ManifestSplits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<serde_json::Value>,
}

impl EmbeddingDataset {
    pub fn n_samples(&self) -> usize {
        self.image_features.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.text_features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.image_features.ncols()
    }

    pub fn image_row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.image_features.row(i)
    }

    /// Samples available for training, labeled or not. Without any split
    /// every non-test sample counts.
    pub fn train_ids(&self) -> Vec<usize> {
        let s = &self.splits;
        if s.train_unlabeled.is_empty() && s.train_labeled.is_empty() {
            let test: BTreeSet<usize> = s.test.iter().copied().collect();
            return (0..self.n_samples()).filter(|i| !test.contains(i)).collect();
        }
        let mut ids: Vec<usize> = s
            .train_unlabeled
            .iter()
            .chain(&s.train_labeled)
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// The unlabeled training pool used for pseudolabeling.
    pub fn unlabeled_ids(&self) -> Vec<usize> {
        let s = &self.splits;
        if s.train_unlabeled.is_empty() && s.train_labeled.is_empty() {
            return self.train_ids();
        }
        s.train_unlabeled.clone()
    }

    /// Test samples, or every sample when no test split is declared.
    pub fn test_ids(&self) -> Vec<usize> {
        if self.splits.test.is_empty() {
            (0..self.n_samples()).collect()
        } else {
            self.splits.test.clone()
        }
    }

    pub fn labels_for(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&i| {
                self.labels[i].ok_or_else(|| Error::MissingLabels(format!("sample {i} has no label")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_samples();
        let c = self.n_classes();
        if self.text_features.ncols() != self.dim() {
            return Err(Error::Manifest("text and image feature widths differ".into()));
        }
        if self.class_names.len() != c {
            return Err(Error::Manifest(format!(
                "{} class names for {c} classes",
                self.class_names.len()
            )));
        }
        if self.labels.len() != n {
            return Err(Error::Manifest(format!("{} labels for {n} samples", self.labels.len())));
        }
        if let Some(aug) = &self.image_features_aug {
            if aug.dim() != self.image_features.dim() {
                return Err(Error::Manifest("augmented view shape differs".into()));
            }
        }
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(l) = l {
                if *l >= c {
                    return Err(Error::LabelOutOfRange {
                        sample: i,
                        label: *l as i64,
                        n_classes: c,
                    });
                }
            }
        }
        validate_splits(&self.splits, &self.labels, n, c)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        load_dataset(dir)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_dataset(self, dir)
    }
}

fn check_ids(name: &str, ids: &[usize], bound: usize, what: &str) -> Result<BTreeSet<usize>> {
    let mut set = BTreeSet::new();
    for &i in ids {
        if i >= bound {
            return Err(Error::MalformedSplit(format!("{name}: {what} {i} out of range {bound}")));
        }
        if !set.insert(i) {
            return Err(Error::MalformedSplit(format!("{name}: duplicate {what} {i}")));
        }
    }
    Ok(set)
}

fn validate_splits(s: &SplitSpec, labels: &[Option<usize>], n: usize, c: usize) -> Result<()> {
    let unl = check_ids("train_unlabeled", &s.train_unlabeled, n, "sample")?;
    let lab = check_ids("train_labeled", &s.train_labeled, n, "sample")?;
    let test = check_ids("test", &s.test, n, "sample")?;
    let seen = check_ids("seen_classes", &s.seen_classes, c, "class")?;
    let unseen = check_ids("unseen_classes", &s.unseen_classes, c, "class")?;
    if !unl.is_disjoint(&test) || !lab.is_disjoint(&test) {
        return Err(Error::MalformedSplit("train and test overlap".into()));
    }
    if !unl.is_disjoint(&lab) {
        return Err(Error::MalformedSplit("labeled and unlabeled training sets overlap".into()));
    }
    for &i in &lab {
        if labels[i].is_none() {
            return Err(Error::MalformedSplit(format!("labeled sample {i} has no label")));
        }
    }
    if s.has_class_split() {
        if !seen.is_disjoint(&unseen) {
            return Err(Error::MalformedSplit("seen and unseen classes overlap".into()));
        }
        if seen.len() + unseen.len() != c {
            return Err(Error::MalformedSplit("seen and unseen classes do not cover all classes".into()));
        }
        for &i in &lab {
            let l = labels[i].expect("checked above");
            if !seen.contains(&l) {
                return Err(Error::MalformedSplit(format!(
                    "labeled sample {i} belongs to unseen class {l}"
                )));
            }
        }
    }
    Ok(())
}

/// Checks the SSL contract: exactly `per_class` labeled samples per class.
pub fn check_ssl_split(ds: &EmbeddingDataset, per_class: usize) -> Result<()> {
    let mut counts = vec![0usize; ds.n_classes()];
    for &i in &ds.splits.train_labeled {
        counts[ds.labels[i].expect("validated")] += 1;
    }
    if let Some((c, n)) = counts.iter().enumerate().find(|(_, &n)| n != per_class) {
        return Err(Error::MalformedSplit(format!(
            "class {c} has {n} labeled samples, expected {per_class}"
        )));
    }
    Ok(())
}

fn read_f32_matrix(dir: &Path, file: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::ByteLengthMismatch {
            file: file.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut m = Array2::from_shape_vec((rows, cols), data).expect("length checked");
    normalize_rows(&mut m, file)?;
    Ok(m)
}

/// Scales each row to unit L2 norm. Rows already at unit norm are untouched,
/// which keeps save/load round trips bit-exact.
pub fn normalize_rows(m: &mut Array2<f32>, file: &str) -> Result<()> {
    for (r, mut row) in m.outer_iter_mut().enumerate() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature row"));
        }
        let n = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNormRow {
                file: file.to_string(),
                row: r,
            });
        }
        if (n - 1.0).abs() > UNIT_NORM_SLACK {
            row.iter_mut().for_each(|x| *x = (f64::from(*x) / n) as f32);
        }
    }
    Ok(())
}

fn write_f32_matrix(path: &Path, m: &Array2<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for x in m.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Manifest(format!("unsupported version {}", m.version)));
    }
    if m.n_samples == 0 || m.n_classes == 0 || m.dim == 0 {
        return Err(Error::Manifest("n_samples, n_classes and dim must be positive".into()));
    }
    if m.labels.len() != m.n_samples {
        return Err(Error::Manifest(format!(
            "{} labels for {} samples",
            m.labels.len(),
            m.n_samples
        )));
    }
    let labels = m
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| match l {
            -1 => Ok(None),
            l if l >= 0 && (l as usize) < m.n_classes => Ok(Some(l as usize)),
            l => Err(Error::LabelOutOfRange {
                sample: i,
                label: l,
                n_classes: m.n_classes,
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    let image_features = read_f32_matrix(dir, &m.files.image_features, m.n_samples, m.dim)?;
    let image_features_aug = m
        .files
        .image_features_aug
        .as_deref()
        .map(|f| read_f32_matrix(dir, f, m.n_samples, m.dim))
        .transpose()?;
    let text_features = read_f32_matrix(dir, &m.files.text_features, m.n_classes, m.dim)?;
    let sp = m.splits;
    let ds = EmbeddingDataset {
        image_features,
        image_features_aug,
        text_features,
        class_names: m.class_names,
        labels,
        splits: SplitSpec {
            train_unlabeled: sp.train_unlabeled.unwrap_or_default(),
            train_labeled: sp.train_labeled.unwrap_or_default(),
            test: sp.test.unwrap_or_default(),
            seen_classes: sp.seen_classes.unwrap_or_default(),
            unseen_classes: sp.unseen_classes.unwrap_or_default(),
        },
        notes: m.notes,
    };
    ds.validate()?;
    Ok(ds)
}

pub const IMAGE_FILE: &str = "images.f32";
pub const IMAGE_AUG_FILE: &str = "images_aug.f32";
pub const TEXT_FILE: &str = "text.f32";

pub fn save_dataset(ds: &EmbeddingDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_f32_matrix(&dir.join(IMAGE_FILE), &ds.image_features)?;
    if let Some(aug) = &ds.image_features_aug {
        write_f32_matrix(&dir.join(IMAGE_AUG_FILE), aug)?;
    }
    write_f32_matrix(&dir.join(TEXT_FILE), &ds.text_features)?;
    let opt = |v: &Vec<usize>| (!v.is_empty()).then(|| v.clone());
    let s = &ds.splits;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        n_samples: ds.n_samples(),
        n_classes: ds.n_classes(),
        dim: ds.dim(),
        class_names: ds.class_names.clone(),
        labels: ds.labels.iter().map(|l| l.map_or(-1, |l| l as i64)).collect(),
        files: ManifestFiles {
            image_features: IMAGE_FILE.into(),
            image_features_aug: ds.image_features_aug.as_ref().map(|_| IMAGE_AUG_FILE.into()),
            text_features: TEXT_FILE.into(),
        },
        splits: ManifestSplits {
            train_unlabeled: opt(&s.train_unlabeled),
            train_labeled: opt(&s.train_labeled),
            test: opt(&s.test),
            seen_classes: opt(&s.seen_classes),
            unseen_classes: opt(&s.unseen_classes),
        },
        notes: ds.notes.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Splits classes into seen and unseen for transductive zero-shot learning.
///
/// `ceil(seen_fraction * C)` classes become seen. Training samples of seen
/// classes become labeled; the rest stay unlabeled. The test split is kept.
pub fn make_trzsl_split(ds: &EmbeddingDataset, seen_fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(seen_fraction > 0.0 && seen_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "seen_fraction must lie in (0, 1), got {seen_fraction}"
        )));
    }
    let c = ds.n_classes();
    let train = ds.train_ids();
    let train_labels = ds.labels_for(&train)?;
    let n_seen = ((seen_fraction * c as f64).ceil() as usize).min(c);
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut rng::stream(seed, "trzsl-split"));
    let mut seen = classes[..n_seen].to_vec();
    let mut unseen = classes[n_seen..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    let is_seen: BTreeSet<usize> = seen.iter().copied().collect();
    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for (&i, l) in train.iter().zip(train_labels) {
        if is_seen.contains(&l) {
            labeled.push(i);
        } else {
            unlabeled.push(i);
        }
    }
    Ok(SplitSpec {
        train_unlabeled: unlabeled,
        train_labeled: labeled,
        test: ds.splits.test.clone(),
        seen_classes: seen,
        unseen_classes: unseen,
    })
}

/// Marks `per_class` training samples of each class as labeled (SSL).
pub fn make_ssl_split(ds: &EmbeddingDataset, per_class: usize, seed: u64) -> Result<SplitSpec> {
    let train = ds.train_ids();
    let labels = ds.labels_for(&train)?;
    let mut by_class = vec![Vec::new(); ds.n_classes()];
    for (&i, l) in train.iter().zip(labels) {
        by_class[l].push(i);
    }
    let mut r = rng::stream(seed, "ssl-split");
    let mut labeled = Vec::new();
    for (c, ids) in by_class.iter_mut().enumerate() {
        if ids.len() < per_class {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} training samples, need {per_class}",
                ids.len()
            )));
        }
        ids.shuffle(&mut r);
        labeled.extend_from_slice(&ids[..per_class]);
    }
    labeled.sort_unstable();
    let chosen: BTreeSet<usize> = labeled.iter().copied().collect();
    Ok(SplitSpec {
        train_unlabeled: train.into_iter().filter(|i| !chosen.contains(i)).collect(),
        train_labeled: labeled,
        test: ds.splits.test.clone(),
        seen_classes: Vec::new(),
        unseen_classes: Vec::new(),
    })
}
