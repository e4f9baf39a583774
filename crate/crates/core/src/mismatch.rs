//! Concept-mismatch detection.
//!
//! Well-matched classes are peeled off one per iteration: the remaining image
//! features are clustered into as many clusters as there are remaining text
//! features, the (text, centroid) pair with the highest row-softmax
//! probability is taken as the best match, and that class plus its most
//! confident member samples are removed. Classes that survive and also
//! receive the fewest zero-shot predictions are reported as mismatched.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans_with, KMeansParams};
use crate::linalg::{argmax, argmax2, cosine_sim, row_softmax, softmax};
use crate::rng;

/// Zero-shot predictions over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    pub sample_ids: Vec<usize>,
    /// Candidate classes, in column order of `probabilities`.
    pub classes: Vec<usize>,
    /// Predicted class id per sample.
    pub predictions: Vec<usize>,
    /// Max softmax probability per sample.
    pub confidences: Vec<f64>,
    pub probabilities: Array2<f64>,
}

impl ZeroShot {
    pub fn prediction_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &p in &self.predictions {
            counts[p] += 1;
        }
        counts
    }

    /// Probability column of class `c`, if it is a candidate.
    pub fn class_column(&self, c: usize) -> Option<usize> {
        self.classes.iter().position(|&x| x == c)
    }
}

/// Zero-shot prediction of every sample against every class with logits
/// `gamma * cos(v_i, w_c)`.
pub fn zero_shot_predict(ds: &EmbeddingDataset, gamma: f64) -> Result<ZeroShot> {
    let ids: Vec<usize> = (0..ds.n_samples()).collect();
    let classes: Vec<usize> = (0..ds.n_classes()).collect();
    zero_shot_on(ds, &ids, &classes, gamma)
}

/// Zero-shot prediction restricted to `ids` and the candidate `classes`.
pub fn zero_shot_on(
    ds: &EmbeddingDataset,
    ids: &[usize],
    classes: &[usize],
    gamma: f64,
) -> Result<ZeroShot> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no candidate classes".into()));
    }
    let text: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| ds.text_features.row(c).iter().map(|&x| f64::from(x)).collect())
        .collect();
    let mut probabilities = Array2::zeros((ids.len(), classes.len()));
    let mut predictions = Vec::with_capacity(ids.len());
    let mut confidences = Vec::with_capacity(ids.len());
    for (r, &i) in ids.iter().enumerate() {
        let v: Vec<f64> = ds.image_row(i).iter().map(|&x| f64::from(x)).collect();
        let logits = text
            .iter()
            .map(|w| cosine_sim(&v, w).map(|c| gamma * c))
            .collect::<Result<Vec<f64>>>()?;
        let p = softmax(&logits)?;
        let best = argmax(&logits);
        predictions.push(classes[best]);
        confidences.push(p[best]);
        probabilities.row_mut(r).iter_mut().zip(&p).for_each(|(o, v)| *o = *v);
    }
    Ok(ZeroShot {
        sample_ids: ids.to_vec(),
        classes: classes.to_vec(),
        predictions,
        confidences,
        probabilities,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    /// Class judged best matched in this iteration.
    pub class: usize,
    pub cluster: usize,
    pub probability: f64,
    /// Removal cap, `floor(|I| / |T|)`.
    pub cap: usize,
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub t: usize,
    pub y_final: Vec<usize>,
    pub y_low_t: Vec<usize>,
    pub y_mm: Vec<usize>,
    /// Sample ids still present when the loop stopped.
    pub remaining_samples: Vec<usize>,
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone, Copy)]
pub struct DetectParams {
    pub t: usize,
    pub gamma: f64,
    pub seed: u64,
    pub kmeans: KMeansParams,
}

/// `ceil(C / 10)`, the default detection threshold.
pub fn auto_threshold(n_classes: usize) -> usize {
    n_classes.div_ceil(10)
}

pub fn detect_mismatch(ds: &EmbeddingDataset, params: &DetectParams) -> Result<MismatchReport> {
    let c = ds.n_classes();
    let t = params.t;
    // t = 1 is allowed: the loop then consumes every class.
    if t == 0 || t > c {
        return Err(Error::InvalidArgument(format!("threshold t = {t} outside [1, {c}]")));
    }
    let pool = ds.train_ids();
    let all_classes: Vec<usize> = (0..c).collect();
    let zs = zero_shot_on(ds, &pool, &all_classes, params.gamma)?;

    let features: Vec<Vec<f64>> = pool
        .iter()
        .map(|&i| ds.image_row(i).iter().map(|&x| f64::from(x)).collect())
        .collect();
    let text: Vec<Vec<f64>> = (0..c)
        .map(|k| ds.text_features.row(k).iter().map(|&x| f64::from(x)).collect())
        .collect();

    // Positions into `pool`.
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    let mut classes = all_classes.clone();
    let mut trace = Vec::with_capacity(c + 1 - t);

    while classes.len() >= t {
        let n_text = classes.len();
        let d = ds.dim();
        let mut points = Array2::zeros((remaining.len(), d));
        for (r, &p) in remaining.iter().enumerate() {
            points.row_mut(r).iter_mut().zip(&features[p]).for_each(|(o, v)| *o = *v);
        }
        let seed = rng::derive_seed(params.seed, "mismatch-kmeans", trace.len() as u64);
        let km = kmeans_with(points.view(), n_text, seed, params.kmeans)?;

        let mut sim = Array2::zeros((n_text, n_text));
        for (i, &cls) in classes.iter().enumerate() {
            for (j, cent) in km.centroids.outer_iter().enumerate() {
                sim[[i, j]] = cosine_sim(&text[cls], &cent.to_vec())?;
            }
        }
        let prob = row_softmax(sim.view())?;
        let (i_star, j_star) = argmax2(prob.view());
        let best_class = classes[i_star];

        let mut candidates: Vec<usize> = remaining
            .iter()
            .zip(&km.assignments)
            .filter(|(&p, &a)| a == j_star && zs.predictions[p] == best_class)
            .map(|(&p, _)| p)
            .collect();
        candidates.sort_by(|&a, &b| {
            zs.confidences[b]
                .total_cmp(&zs.confidences[a])
                .then(pool[a].cmp(&pool[b]))
        });
        let cap = remaining.len() / n_text;
        candidates.truncate(cap);
        let removed: BTreeSet<usize> = candidates.iter().copied().collect();
        remaining.retain(|p| !removed.contains(p));

        trace.push(TraceStep {
            iteration: trace.len(),
            class: best_class,
            cluster: j_star,
            probability: prob[[i_star, j_star]],
            cap,
            removed: candidates.iter().map(|&p| pool[p]).collect(),
        });
        classes.remove(i_star);
    }

    let y_low_t = fewest_predicted(&zs.prediction_counts(c), t);
    let low: BTreeSet<usize> = y_low_t.iter().copied().collect();
    let y_mm = classes.iter().copied().filter(|k| low.contains(k)).collect();
    Ok(MismatchReport {
        t,
        y_final: classes,
        y_low_t,
        y_mm,
        remaining_samples: remaining.into_iter().map(|p| pool[p]).collect(),
        trace,
    })
}

/// The `t` classes with the fewest predictions, ties by class index, sorted.
pub fn fewest_predicted(counts: &[usize], t: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&k| (counts[k], k));
    let mut low: Vec<usize> = order.into_iter().take(t).collect();
    low.sort_unstable();
    low
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SplitSpec;
    use ndarray::array;

    fn ds(images: Array2<f32>, text: Array2<f32>) -> EmbeddingDataset {
        let n = images.nrows();
        let c = text.nrows();
        EmbeddingDataset {
            image_features: images,
            image_features_aug: None,
            text_features: text,
            class_names: (0..c).map(|i| format!("c{i}")).collect(),
            labels: vec![None; n],
            splits: SplitSpec::default(),
            notes: None,
        }
    }

    #[test]
    fn self_similarity_wins_and_ties_go_low() {
        let text = array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let images = array![[0.0f32, 0.0, 1.0], [0.70710677, 0.70710677, 0.0]];
        let zs = zero_shot_predict(&ds(images, text), 100.0).unwrap();
        assert_eq!(zs.predictions, vec![2, 0]);
        let row_max = zs.probabilities.row(0).iter().copied().fold(0.0, f64::max);
        assert_eq!(zs.confidences[0], row_max);
        assert!((zs.confidences[1] - zs.probabilities[[1, 1]]).abs() < 1e-12);
    }

    #[test]
    fn fewest_predicted_breaks_ties_by_index() {
        assert_eq!(fewest_predicted(&[5, 0, 3, 0, 1], 3), vec![1, 3, 4]);
        assert_eq!(fewest_predicted(&[2, 2, 2], 2), vec![0, 1]);
    }

    #[test]
    fn threshold_bounds() {
        let text = array![[1.0f32, 0.0], [0.0, 1.0]];
        let images = array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let d = ds(images, text);
        let p = |t| DetectParams { t, gamma: 100.0, seed: 0, kmeans: KMeansParams::default() };
        assert!(detect_mismatch(&d, &p(0)).is_err());
        assert!(detect_mismatch(&d, &p(3)).is_err());
        let r = detect_mismatch(&d, &p(2)).unwrap();
        assert_eq!(r.y_final.len(), 1);
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn auto_threshold_values() {
        assert_eq!(auto_threshold(45), 5);
        assert_eq!(auto_threshold(10), 1);
        assert_eq!(auto_threshold(102), 11);
        assert_eq!(auto_threshold(100), 10);
    }
}
