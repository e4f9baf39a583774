//! Synthetic embedding datasets with planted concept mismatch and concept
//! confusion, plus the ground truth needed to score every stage.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align::{write_descriptions, DescriptionEntry};
use crate::dataset::{make_ssl_split, make_trzsl_split, EmbeddingDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::train::Paradigm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPair {
    /// Class the zero-shot predictions lean towards.
    pub favored: usize,
    pub other: usize,
    /// 0 leaves the text features on the class centers; 1 moves the zero-shot
    /// boundary onto the center of `other`, 2 moves it as far again beyond.
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub intra_class_std: f64,
    pub n_mismatch: usize,
    /// Cosine between each mismatched class center and a decoy class center,
    /// so zero-shot predicts the mismatched images as the decoy. 0 disables.
    pub mismatch_decoy_cos: f64,
    /// Number of confusion pairs; classes are drawn by seed.
    pub n_confusion: usize,
    pub confusion_bias: f64,
    /// Cosine between the centers of a confused pair.
    pub confusion_cos: f64,
    /// Upper bound on the cosine between unrelated class centers.
    pub max_center_cos: f64,
    pub aug_noise_std: f64,
    pub description_noise_std: f64,
    pub n_descriptions: usize,
    pub test_fraction: f64,
    pub paradigm: Paradigm,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            per_class: 60,
            dim: 32,
            intra_class_std: 0.08,
            n_mismatch: 2,
            mismatch_decoy_cos: 0.6,
            n_confusion: 2,
            confusion_bias: 2.5,
            confusion_cos: 0.9,
            max_center_cos: 0.5,
            aug_noise_std: 0.05,
            description_noise_std: 0.05,
            n_descriptions: crate::config::defaults::N_DESCRIPTIONS,
            test_fraction: 1.0 / 3.0,
            paradigm: Paradigm::Ul,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mismatched: Vec<usize>,
    /// Decoy class of each mismatched class, in the same order.
    pub decoys: Vec<usize>,
    pub confusion_pairs: Vec<ConfusionPair>,
    pub labels: Vec<usize>,
    pub spec: SynthSpec,
}

impl GroundTruth {
    pub fn confusion_groups(&self) -> Vec<Vec<usize>> {
        self.confusion_pairs
            .iter()
            .map(|p| {
                let mut g = vec![p.favored, p.other];
                g.sort_unstable();
                g
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: EmbeddingDataset,
    pub truth: GroundTruth,
    pub descriptions: Vec<DescriptionEntry>,
}

const MAX_TRIES: usize = 10_000;

fn random_unit(dim: usize, r: &mut ChaCha8Rng) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_iter((0..dim).map(|_| StandardNormal.sample(r)));
    let n = v.dot(&v).sqrt();
    v / n
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// Random unit vector at cosine `cos` to the unit vector `a`.
fn at_cosine(a: &Array1<f64>, cos: f64, r: &mut ChaCha8Rng) -> Array1<f64> {
    let u = random_unit(a.len(), r);
    let ortho = unit(&u - &(a * a.dot(&u)));
    unit(a * cos + &ortho * (1.0 - cos * cos).sqrt())
}

/// Random unit vector orthogonal to every row of `basis` (needs fewer rows
/// than dimensions).
fn orthogonal_unit(dim: usize, basis: &[Array1<f64>], r: &mut ChaCha8Rng) -> Array1<f64> {
    let mut ortho: Vec<Array1<f64>> = Vec::with_capacity(basis.len());
    for b in basis {
        let mut v = b.clone();
        for q in &ortho {
            v = &v - &(q * q.dot(&v));
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            ortho.push(v / n);
        }
    }
    loop {
        let mut v = random_unit(dim, r);
        for q in &ortho {
            v = &v - &(q * q.dot(&v));
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Unit vector whose |cosine| with every row in `avoid` is at most `bound`.
fn spread_unit(dim: usize, avoid: &[Array1<f64>], bound: f64, r: &mut ChaCha8Rng) -> Result<Array1<f64>> {
    for _ in 0..MAX_TRIES {
        let v = random_unit(dim, r);
        if avoid.iter().all(|a| a.dot(&v).abs() <= bound) {
            return Ok(v);
        }
    }
    Err(Error::InvalidArgument(format!(
        "infeasible spec: cannot place {} well-separated directions in dimension {dim}",
        avoid.len() + 1
    )))
}

pub fn validate_spec(spec: &SynthSpec) -> Result<()> {
    let bad = |m: &str| Err(Error::InvalidArgument(format!("infeasible spec: {m}")));
    if spec.n_classes < 2 || spec.dim < 2 || spec.per_class == 0 {
        return bad("need at least 2 classes, 2 dimensions and 1 sample per class");
    }
    if spec.n_mismatch + 2 * spec.n_confusion > spec.n_classes {
        return bad("too many planted classes");
    }
    if !(0.0..1.0).contains(&spec.mismatch_decoy_cos) {
        return bad("decoy cosine must lie in [0, 1)");
    }
    if !(0.0..=4.0).contains(&spec.confusion_bias) || !(0.0..1.0).contains(&spec.confusion_cos) {
        return bad("confusion bias must lie in [0, 4] and confusion cosine in [0, 1)");
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return bad("test fraction must lie in [0, 1)");
    }
    Ok(())
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    validate_spec(spec)?;
    let (c, d) = (spec.n_classes, spec.dim);
    let mut r = rng::stream(spec.seed, "synth");

    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut r);
    let mut mismatched = order[..spec.n_mismatch].to_vec();
    mismatched.sort_unstable();
    let pairs: Vec<ConfusionPair> = order[spec.n_mismatch..spec.n_mismatch + 2 * spec.n_confusion]
        .chunks(2)
        .map(|p| ConfusionPair {
            favored: p[0],
            other: p[1],
            bias: spec.confusion_bias,
        })
        .collect();

    // Decoys come from the unplanted classes when there are any.
    let free = &order[spec.n_mismatch + 2 * spec.n_confusion..];
    let pool: &[usize] = if free.is_empty() { &order[spec.n_mismatch..] } else { free };
    let decoys: Vec<usize> = if pool.is_empty() {
        Vec::new()
    } else {
        (0..mismatched.len()).map(|i| pool[i % pool.len()]).collect()
    };

    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(c);
    for _ in 0..c {
        let v = spread_unit(d, &centers, spec.max_center_cos, &mut r)?;
        centers.push(v);
    }
    for p in &pairs {
        centers[p.other] = at_cosine(&centers[p.favored], spec.confusion_cos, &mut r);
    }
    if spec.mismatch_decoy_cos > 0.0 {
        for (&m, &dcy) in mismatched.iter().zip(&decoys) {
            centers[m] = at_cosine(&centers[dcy], spec.mismatch_decoy_cos, &mut r);
        }
    }

    let mut text: Vec<Array1<f64>> = centers.clone();
    for &m in &mismatched {
        text[m] = if c < d {
            orthogonal_unit(d, &centers, &mut r)
        } else {
            spread_unit(d, &centers, spec.max_center_cos.min(0.3), &mut r)?
        };
    }
    for p in &pairs {
        let shift = (&centers[p.other] - &centers[p.favored]) * (p.bias / 2.0);
        text[p.favored] = unit(&centers[p.favored] + &shift);
        text[p.other] = unit(&centers[p.other] + &shift);
    }

    let n = c * spec.per_class;
    let noise = Normal::new(0.0, spec.intra_class_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let aug_noise = Normal::new(0.0, spec.aug_noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut images = Array2::<f32>::zeros((n, d));
    let mut aug = Array2::<f32>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for j in 0..spec.per_class {
            let i = k * spec.per_class + j;
            let x = unit(center.mapv(|v| v + noise.sample(&mut r)));
            let xa = unit(x.mapv(|v| v + aug_noise.sample(&mut r)));
            images.row_mut(i).assign(&x.mapv(|v| v as f32));
            aug.row_mut(i).assign(&xa.mapv(|v| v as f32));
            labels.push(k);
        }
    }
    crate::dataset::normalize_rows(&mut images, "images")?;
    crate::dataset::normalize_rows(&mut aug, "images_aug")?;
    let mut text_features = Array2::<f32>::zeros((c, d));
    for (k, t) in text.iter().enumerate() {
        text_features.row_mut(k).assign(&t.mapv(|v| v as f32));
    }
    crate::dataset::normalize_rows(&mut text_features, "text")?;

    let n_test = (spec.test_fraction * spec.per_class as f64).ceil() as usize;
    let mut split_rng = rng::stream(spec.seed, "synth-split");
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for k in 0..c {
        let mut ids: Vec<usize> = (k * spec.per_class..(k + 1) * spec.per_class).collect();
        ids.shuffle(&mut split_rng);
        test.extend_from_slice(&ids[..n_test]);
        train.extend_from_slice(&ids[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();

    let class_names: Vec<String> = (0..c).map(|k| format!("class_{k:03}")).collect();
    let mut dataset = EmbeddingDataset {
        image_features: images,
        image_features_aug: Some(aug),
        text_features,
        class_names: class_names.clone(),
        labels: labels.iter().map(|&l| Some(l)).collect(),
        splits: SplitSpec {
            train_unlabeled: train,
            test,
            ..SplitSpec::default()
        },
        notes: Some(serde_json::json!({ "generator": "synth", "seed": spec.seed })),
    };
    dataset.splits = match spec.paradigm {
        Paradigm::Ul => dataset.splits.clone(),
        Paradigm::Ssl => make_ssl_split(
            &dataset,
            crate::config::defaults::SSL_LABELED_PER_CLASS,
            rng::derive_seed(spec.seed, "synth-ssl", 0),
        )?,
        Paradigm::Trzsl => make_trzsl_split(
            &dataset,
            crate::config::defaults::SEEN_FRACTION,
            rng::derive_seed(spec.seed, "synth-trzsl", 0),
        )?,
    };
    dataset.validate()?;

    let mut descriptions = Vec::with_capacity(c * spec.n_descriptions);
    for (k, center) in centers.iter().enumerate() {
        for j in 0..spec.n_descriptions {
            // Later candidates are noisier, so selection has something to choose.
            let s = spec.description_noise_std * (1.0 + j as f64);
            let v = unit(center.mapv(|v| v + s * r.sample::<f64, _>(StandardNormal)));
            descriptions.push(DescriptionEntry {
                class_name: class_names[k].clone(),
                text: format!("synthetic description {j} of {}", class_names[k]),
                embedding: v.iter().map(|&x| x as f32).collect(),
            });
        }
    }

    Ok(SynthOutput {
        dataset,
        truth: GroundTruth {
            mismatched,
            decoys,
            confusion_pairs: pairs,
            labels,
            spec: spec.clone(),
        },
        descriptions,
    })
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const DESCRIPTIONS_FILE: &str = "descriptions.json";

/// Writes the dataset, `ground_truth.json` and `descriptions.json`.
pub fn write_synth(out: &SynthOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    out.dataset.save(dir)?;
    let path = dir.join(GROUND_TRUTH_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&out.truth).expect("serializes"))
        .map_err(|e| Error::io(&path, e))?;
    write_descriptions(&dir.join(DESCRIPTIONS_FILE), &out.descriptions)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
