//! Concept alignment: enhanced class descriptions and the initial
//! pseudolabel set.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans_with, KMeansParams};
use crate::linalg::{argmax2, cosine_sim, normalized, row_softmax};
use crate::mismatch::{zero_shot_on, MismatchReport};
use crate::rng;

/// Prompt sent to a language model for one class.
pub fn description_prompt(class_name: &str) -> String {
    format!("Please describe the most distinguishing visual features of {class_name}, in one sentence.")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionCandidate {
    pub class_id: usize,
    pub text: String,
    /// Unit-norm text embedding.
    pub embedding: Vec<f64>,
}

/// A source of candidate descriptions with precomputed embeddings.
pub trait DescriptionProvider {
    fn fetch(&self, class_id: usize, class_name: &str, n: usize) -> Result<Vec<DescriptionCandidate>>;
}

/// One entry of a descriptions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionEntry {
    pub class_name: String,
    pub text: String,
    pub embedding: Vec<f32>,
}

pub fn read_descriptions(path: &Path) -> Result<Vec<DescriptionEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_descriptions(path: &Path, entries: &[DescriptionEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).expect("descriptions serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Serves candidates stored in a descriptions file, in file order.
#[derive(Debug, Clone)]
pub struct FileProvider {
    entries: Vec<DescriptionEntry>,
}

impl FileProvider {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            entries: read_descriptions(path.as_ref())?,
        })
    }

    pub fn from_entries(entries: Vec<DescriptionEntry>) -> Self {
        Self { entries }
    }
}

impl DescriptionProvider for FileProvider {
    fn fetch(&self, class_id: usize, class_name: &str, n: usize) -> Result<Vec<DescriptionCandidate>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        let found: Vec<&DescriptionEntry> =
            self.entries.iter().filter(|e| e.class_name == class_name).collect();
        if found.len() < n {
            return Err(Error::InsufficientCandidates {
                class_name: class_name.to_string(),
                wanted: n,
                found: found.len(),
            });
        }
        found
            .into_iter()
            .take(n)
            .map(|e| {
                let v: Vec<f64> = e.embedding.iter().map(|&x| f64::from(x)).collect();
                Ok(DescriptionCandidate {
                    class_id,
                    text: e.text.clone(),
                    embedding: normalized(&v)?,
                })
            })
            .collect()
    }
}

/// Deterministic stand-in for a language model: embeddings are Gaussian
/// directions seeded by a hash of the class name and candidate index.
#[derive(Debug, Clone)]
pub struct MockProvider {
    pub dim: usize,
    pub seed: u64,
}

impl DescriptionProvider for MockProvider {
    fn fetch(&self, class_id: usize, class_name: &str, n: usize) -> Result<Vec<DescriptionCandidate>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::ProviderUnavailable("mock provider has zero dimension".into()));
        }
        (0..n)
            .map(|i| {
                let mut r = rng::indexed_stream(self.seed, &format!("mock-desc/{class_name}"), i as u64);
                let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut r)).collect();
                Ok(DescriptionCandidate {
                    class_id,
                    text: format!("[mock {i}] {}", description_prompt(class_name)),
                    embedding: normalized(&v)?,
                })
            })
            .collect()
    }
}

/// Picks the candidate whose (candidate, centroid) cell has the highest
/// row-softmax probability after clustering `image_features` into as many
/// clusters as there are candidates.
pub fn select_optimal_description(
    candidates: &[DescriptionCandidate],
    image_features: &Array2<f64>,
    seed: u64,
    params: KMeansParams,
) -> Result<DescriptionCandidate> {
    match candidates {
        [] => return Err(Error::InvalidArgument("no description candidates".into())),
        [only] => return Ok(only.clone()),
        _ => {}
    }
    if image_features.nrows() == 0 {
        return Err(Error::InvalidArgument("no remaining image features".into()));
    }
    let km = kmeans_with(image_features.view(), candidates.len(), seed, params)?;
    let prob = row_softmax(candidate_centroid_similarity(candidates, &km.centroids)?.view())?;
    let (i, _) = argmax2(prob.view());
    Ok(candidates[i].clone())
}

pub fn candidate_centroid_similarity(
    candidates: &[DescriptionCandidate],
    centroids: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut sim = Array2::zeros((candidates.len(), centroids.nrows()));
    for (i, cand) in candidates.iter().enumerate() {
        for (j, c) in centroids.outer_iter().enumerate() {
            sim[[i, j]] = cosine_sim(&cand.embedding, &c.to_vec())?;
        }
    }
    Ok(sim)
}

/// Fetches `n` candidates for every mismatched class and keeps the best one.
pub fn enhance_mismatched(
    ds: &EmbeddingDataset,
    report: &MismatchReport,
    provider: &dyn DescriptionProvider,
    n: usize,
    seed: u64,
    params: KMeansParams,
) -> Result<BTreeMap<usize, DescriptionCandidate>> {
    let mut remaining = Array2::zeros((report.remaining_samples.len(), ds.dim()));
    for (r, &i) in report.remaining_samples.iter().enumerate() {
        remaining
            .row_mut(r)
            .iter_mut()
            .zip(ds.image_row(i))
            .for_each(|(o, &v)| *o = f64::from(v));
    }
    let mut out = BTreeMap::new();
    for &c in &report.y_mm {
        let cands = provider.fetch(c, &ds.class_names[c], n)?;
        if let Some(bad) = cands.iter().find(|d| d.embedding.len() != ds.dim()) {
            return Err(Error::InvalidArgument(format!(
                "description embedding width {} does not match dim {}",
                bad.embedding.len(),
                ds.dim()
            )));
        }
        let s = rng::derive_seed(seed, "description-kmeans", c as u64);
        out.insert(c, select_optimal_description(&cands, &remaining, s, params)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudolabelSource {
    Alignment,
    TopkConfidence,
    Growth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pseudolabel {
    pub sample_id: usize,
    pub class_id: usize,
    pub confidence: f64,
    pub source: PseudolabelSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudolabelSet {
    pub k: usize,
    pub records: Vec<Pseudolabel>,
}

impl PseudolabelSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sample_ids(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.sample_id).collect()
    }

    pub fn for_class(&self, c: usize) -> impl Iterator<Item = &Pseudolabel> {
        self.records.iter().filter(move |r| r.class_id == c)
    }

    /// Fraction of records whose class matches the ground-truth label.
    pub fn accuracy(&self, labels: &[Option<usize>]) -> Option<f64> {
        let scored: Vec<bool> = self
            .records
            .iter()
            .filter_map(|r| labels[r.sample_id].map(|l| l == r.class_id))
            .collect();
        (!scored.is_empty()).then(|| scored.iter().filter(|&&b| b).count() as f64 / scored.len() as f64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone)]
pub struct InitialPlParams {
    pub k: usize,
    pub gamma: f64,
    /// Classes that receive pseudolabels. `None` means every class.
    pub classes: Option<Vec<usize>>,
}

/// Builds the initial pseudolabel set: top-k cosine to the enhanced
/// description for mismatched classes, top-k zero-shot confidence otherwise.
/// Per-class selections are independent, so a sample can appear twice.
pub fn build_initial_pl(
    ds: &EmbeddingDataset,
    report: &MismatchReport,
    enhanced: &BTreeMap<usize, DescriptionCandidate>,
    params: &InitialPlParams,
) -> Result<PseudolabelSet> {
    let k = params.k;
    let pool = ds.unlabeled_ids();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} unlabeled samples",
            pool.len()
        )));
    }
    let classes: Vec<usize> = params
        .classes
        .clone()
        .unwrap_or_else(|| (0..ds.n_classes()).collect());
    let class_set: BTreeSet<usize> = classes.iter().copied().collect();
    let expected: BTreeSet<usize> = report.y_mm.iter().copied().filter(|c| class_set.contains(c)).collect();
    let given: BTreeSet<usize> = enhanced.keys().copied().collect();
    if expected != given {
        return Err(Error::InvalidArgument(format!(
            "enhanced descriptions cover {given:?}, mismatched classes are {expected:?}"
        )));
    }

    let zs = zero_shot_on(ds, &pool, &classes, params.gamma)?;
    let features: Vec<Vec<f64>> = pool
        .iter()
        .map(|&i| ds.image_row(i).iter().map(|&x| f64::from(x)).collect())
        .collect();

    let mut records = Vec::with_capacity(k * classes.len());
    for &c in &classes {
        if let Some(desc) = enhanced.get(&c) {
            let mut scored = features
                .iter()
                .enumerate()
                .map(|(p, v)| cosine_sim(v, &desc.embedding).map(|s| (p, s)))
                .collect::<Result<Vec<_>>>()?;
            sort_desc(&mut scored, &pool);
            records.extend(scored.into_iter().take(k).map(|(p, s)| Pseudolabel {
                sample_id: pool[p],
                class_id: c,
                confidence: s,
                source: PseudolabelSource::Alignment,
            }));
        } else {
            let col = zs.class_column(c).expect("candidate class");
            let mut predicted: Vec<(usize, f64)> = (0..pool.len())
                .filter(|&p| zs.predictions[p] == c)
                .map(|p| (p, zs.confidences[p]))
                .collect();
            sort_desc(&mut predicted, &pool);
            predicted.truncate(k);
            if predicted.len() < k {
                let taken: BTreeSet<usize> = predicted.iter().map(|(p, _)| *p).collect();
                let mut rest: Vec<(usize, f64)> = (0..pool.len())
                    .filter(|p| !taken.contains(p))
                    .map(|p| (p, zs.probabilities[[p, col]]))
                    .collect();
                sort_desc(&mut rest, &pool);
                predicted.extend(rest.into_iter().take(k - predicted.len()));
            }
            records.extend(predicted.into_iter().map(|(p, s)| Pseudolabel {
                sample_id: pool[p],
                class_id: c,
                confidence: s,
                source: PseudolabelSource::TopkConfidence,
            }));
        }
    }
    Ok(PseudolabelSet { k, records })
}

/// Sorts (position, score) by score descending, then by sample id.
fn sort_desc(v: &mut [(usize, f64)], pool: &[usize]) {
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(pool[a.0].cmp(&pool[b.0])));
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cand(class_id: usize, e: Vec<f64>) -> DescriptionCandidate {
        DescriptionCandidate {
            class_id,
            text: String::new(),
            embedding: normalized(&e).unwrap(),
        }
    }

    #[test]
    fn prompt_template() {
        assert_eq!(
            description_prompt("a satellite photo of chaparral"),
            "Please describe the most distinguishing visual features of a satellite photo of chaparral, in one sentence."
        );
    }

    #[test]
    fn file_provider_returns_stored_candidates() {
        let entries: Vec<DescriptionEntry> = (0..6)
            .map(|i| DescriptionEntry {
                class_name: if i < 5 { "chaparral".into() } else { "terrace".into() },
                text: format!("d{i}"),
                embedding: vec![1.0, i as f32],
            })
            .collect();
        let p = FileProvider::from_entries(entries);
        let got = p.fetch(3, "chaparral", 5).unwrap();
        assert_eq!(got.len(), 5);
        assert_eq!(got[4].text, "d4");
        assert!(got.iter().all(|c| c.class_id == 3));
        let n: f64 = got[2].embedding.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        let err = p.fetch(0, "terrace", 5).unwrap_err();
        assert!(matches!(err, Error::InsufficientCandidates { wanted: 5, found: 1, .. }));
        assert!(err.to_string().contains("insufficient candidates"));
    }

    #[test]
    fn mock_provider_is_deterministic() {
        let p = MockProvider { dim: 8, seed: 4 };
        let a = p.fetch(0, "dog", 3).unwrap();
        assert_eq!(a, p.fetch(0, "dog", 3).unwrap());
        assert_ne!(a[0].embedding, a[1].embedding);
        assert_ne!(a[0].embedding, p.fetch(0, "cat", 1).unwrap()[0].embedding);
    }

    #[test]
    fn single_candidate_is_returned() {
        let c = cand(0, vec![0.0, 1.0]);
        let empty = Array2::<f64>::zeros((0, 2));
        let got = select_optimal_description(std::slice::from_ref(&c), &empty, 0, KMeansParams::default()).unwrap();
        assert_eq!(got, c);
    }

    #[test]
    fn candidate_matching_a_centroid_wins() {
        // Two tight clusters on the x and y axes.
        let pts = array![[1.0, 0.0, 0.0], [0.999, 0.0447, 0.0], [0.0, 1.0, 0.0], [0.0447, 0.999, 0.0]];
        let cands = vec![cand(0, vec![0.0, 0.0, 1.0]), cand(0, vec![1.0, 0.0, 0.0])];
        let got = select_optimal_description(&cands, &pts, 1, KMeansParams::default()).unwrap();
        assert_eq!(got.embedding, cands[1].embedding);
    }
}
