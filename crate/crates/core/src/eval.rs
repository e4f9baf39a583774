//! Evaluation: accuracy, balance, cluster concentration, confused groups,
//! local calibration error and confidence histograms.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::linalg::{argmax, softmax, to_f64};
use crate::margin::{similarity_matrix, visual_prototypes};
use crate::model::{AdapterModel, Branch};

pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_GROUP_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub sample_ids: Vec<usize>,
    pub predicted: Vec<usize>,
    pub confidence: Vec<f64>,
}

/// Inference-branch predictions over all classes.
pub fn predict(model: &AdapterModel, ds: &EmbeddingDataset, ids: &[usize]) -> Result<Predictions> {
    let text = model.encode_texts(&to_f64(ds.text_features.view()), false);
    let mut predicted = Vec::with_capacity(ids.len());
    let mut confidence = Vec::with_capacity(ids.len());
    for &i in ids {
        let x = ds.image_row(i).mapv(f64::from);
        let z = model.logits(&model.encode_image(x.view(), Branch::Inference), &text);
        let z = z.to_vec();
        let p = softmax(&z).map_err(|_| Error::NonFinite("inference logits"))?;
        let best = argmax(&z);
        predicted.push(best);
        confidence.push(p[best]);
    }
    Ok(Predictions {
        sample_ids: ids.to_vec(),
        predicted,
        confidence,
    })
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall_acc: f64,
    /// `None` for classes absent from the test set.
    pub per_class_acc: Vec<Option<f64>>,
    pub harmonic_mean: Option<f64>,
    pub seen_acc: Option<f64>,
    pub unseen_acc: Option<f64>,
    pub pred_counts: Vec<usize>,
    pub pred_count_std: f64,
    pub imbalance_ratio: Option<f64>,
    pub min_class_acc: f64,
}

pub fn accuracy_from(
    predicted: &[usize],
    truth: &[usize],
    n_classes: usize,
    class_split: Option<(&[usize], &[usize])>,
) -> AccuracyReport {
    let mut correct = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    let mut pred_counts = vec![0usize; n_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        total[t] += 1;
        pred_counts[p] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    let n = predicted.len();
    let overall_acc = if n == 0 {
        0.0
    } else {
        correct.iter().sum::<usize>() as f64 / n as f64
    };
    let per_class_acc: Vec<Option<f64>> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let subset_acc = |classes: &[usize]| {
        let (c, t) = classes
            .iter()
            .fold((0, 0), |(c, t), &k| (c + correct[k], t + total[k]));
        (t > 0).then(|| c as f64 / t as f64)
    };
    let (seen_acc, unseen_acc) = match class_split {
        Some((seen, unseen)) => (subset_acc(seen), subset_acc(unseen)),
        None => (None, None),
    };
    let harmonic_mean = match (seen_acc, unseen_acc) {
        (Some(s), Some(u)) => Some(harmonic_mean(s, u)),
        _ => None,
    };
    let counts: Vec<f64> = pred_counts.iter().map(|&c| c as f64).collect();
    let nonzero: Vec<usize> = pred_counts.iter().copied().filter(|&c| c > 0).collect();
    let imbalance_ratio = nonzero
        .iter()
        .min()
        .map(|&lo| *nonzero.iter().max().unwrap() as f64 / lo as f64);
    let min_class_acc = per_class_acc.iter().flatten().copied().fold(1.0, f64::min);
    AccuracyReport {
        overall_acc,
        per_class_acc,
        harmonic_mean,
        seen_acc,
        unseen_acc,
        pred_count_std: std_dev(&counts),
        pred_counts,
        imbalance_ratio,
        min_class_acc,
    }
}

pub fn accuracy_report(model: &AdapterModel, ds: &EmbeddingDataset) -> Result<AccuracyReport> {
    let ids = ds.test_ids();
    let truth = ds.labels_for(&ids)?;
    let preds = predict(model, ds, &ids)?;
    let split = ds
        .splits
        .has_class_split()
        .then_some((ds.splits.seen_classes.as_slice(), ds.splits.unseen_classes.as_slice()));
    Ok(accuracy_from(&preds.predicted, &truth, ds.n_classes(), split))
}

/// For each class, the fraction of its samples in its most frequent cluster.
pub fn concentration_from(assignments: &[usize], labels: &[usize], n_classes: usize, k: usize) -> Vec<f64> {
    let mut table = vec![vec![0usize; k]; n_classes];
    for (&a, &l) in assignments.iter().zip(labels) {
        table[l][a] += 1;
    }
    table
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                *row.iter().max().unwrap() as f64 / total as f64
            }
        })
        .collect()
}

/// Clusters the labeled samples into `C` clusters and reports per-class
/// concentration.
pub fn cluster_concentration(ds: &EmbeddingDataset, seed: u64) -> Result<Vec<f64>> {
    let ids: Vec<usize> = (0..ds.n_samples()).filter(|&i| ds.labels[i].is_some()).collect();
    if ids.is_empty() {
        return Err(Error::MissingLabels("cluster concentration needs labels".into()));
    }
    let labels = ds.labels_for(&ids)?;
    let mut pts = Array2::zeros((ids.len(), ds.dim()));
    for (r, &i) in ids.iter().enumerate() {
        pts.row_mut(r).assign(&ds.image_row(i).mapv(f64::from));
    }
    let k = ds.n_classes().min(ids.len());
    let km = kmeans(pts.view(), k, seed)?;
    Ok(concentration_from(&km.assignments, &labels, ds.n_classes(), k))
}

/// Connected components (size >= 2) of the graph with an edge wherever
/// `S[i][j] >= threshold`, each sorted, listed by smallest member.
pub fn find_confused_groups(sim: &Array2<f64>, threshold: f64) -> Vec<Vec<usize>> {
    let c = sim.nrows();
    let mut parent: Vec<usize> = (0..c).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..c {
        for j in (i + 1)..c {
            if sim[[i, j]] >= threshold || sim[[j, i]] >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); c];
    for i in 0..c {
        let r = find(&mut parent, i);
        groups[r].push(i);
    }
    groups.into_iter().filter(|g| g.len() >= 2).collect()
}

/// Class similarity used to discover confused groups at evaluation time:
/// visual prototypes from labeled test samples, text prototypes from the raw
/// class text features.
pub fn evaluation_similarity(ds: &EmbeddingDataset) -> Result<Array2<f64>> {
    let mut by_class = vec![Vec::new(); ds.n_classes()];
    for i in ds.test_ids() {
        if let Some(l) = ds.labels[i] {
            by_class[l].push(ds.image_row(i).iter().map(|&x| f64::from(x)).collect());
        }
    }
    let text = to_f64(ds.text_features.view());
    // Classes without samples fall back to their text feature.
    for (c, rows) in by_class.iter_mut().enumerate() {
        if rows.is_empty() {
            rows.push(text.row(c).to_vec());
        }
    }
    similarity_matrix(&visual_prototypes(&by_class, ds.dim())?, &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceResult {
    pub ece: f64,
    pub n_samples: usize,
    /// Set when the group had no predictions; `ece` is then 0.
    pub empty: bool,
}

/// Equal-width bin of a confidence in [0, 1]; 1.0 falls in the last bin.
pub fn confidence_bin(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).floor() as usize).min(bins - 1)
}

/// Calibration error over samples whose predicted class lies in `group`.
pub fn ece_from(
    predicted: &[usize],
    confidence: &[f64],
    truth: &[usize],
    group: &BTreeSet<usize>,
    bins: usize,
) -> EceResult {
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0f64; bins];
    let mut correct = vec![0usize; bins];
    let mut n = 0;
    for ((&p, &c), &t) in predicted.iter().zip(confidence).zip(truth) {
        if !group.contains(&p) {
            continue;
        }
        n += 1;
        let b = confidence_bin(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        if p == t {
            correct[b] += 1;
        }
    }
    if n == 0 {
        log::warn!("no predictions fall in group {group:?}; local ECE set to 0");
        return EceResult {
            ece: 0.0,
            n_samples: 0,
            empty: true,
        };
    }
    let ece = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n as f64) * (correct[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum();
    EceResult {
        ece,
        n_samples: n,
        empty: false,
    }
}

pub fn local_ece(
    model: &AdapterModel,
    ds: &EmbeddingDataset,
    group: &[usize],
    bins: usize,
) -> Result<EceResult> {
    if group.is_empty() {
        return Err(Error::InvalidArgument("empty class group".into()));
    }
    let ids = ds.test_ids();
    let truth = ds.labels_for(&ids)?;
    let preds = predict(model, ds, &ids)?;
    let set: BTreeSet<usize> = group.iter().copied().collect();
    Ok(ece_from(&preds.predicted, &preds.confidence, &truth, &set, bins))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub group: Vec<usize>,
    pub bin_edges: Vec<f64>,
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
}

impl ConfidenceHistogram {
    pub fn total(&self) -> usize {
        self.correct.iter().sum::<usize>() + self.incorrect.iter().sum::<usize>()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,correct,incorrect\n");
        for b in 0..self.correct.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.bin_edges[b],
                self.bin_edges[b + 1],
                self.correct[b],
                self.incorrect[b]
            ));
        }
        out
    }
}

pub fn histogram_from(
    predicted: &[usize],
    confidence: &[f64],
    truth: &[usize],
    group: &[usize],
    bins: usize,
) -> ConfidenceHistogram {
    let set: BTreeSet<usize> = group.iter().copied().collect();
    let mut correct = vec![0; bins];
    let mut incorrect = vec![0; bins];
    for ((&p, &c), &t) in predicted.iter().zip(confidence).zip(truth) {
        if set.contains(&p) {
            let b = confidence_bin(c, bins);
            if p == t {
                correct[b] += 1;
            } else {
                incorrect[b] += 1;
            }
        }
    }
    ConfidenceHistogram {
        group: group.to_vec(),
        bin_edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        correct,
        incorrect,
    }
}

pub fn confidence_density(
    model: &AdapterModel,
    ds: &EmbeddingDataset,
    group: &[usize],
    bins: usize,
) -> Result<ConfidenceHistogram> {
    let ids = ds.test_ids();
    let truth = ds.labels_for(&ids)?;
    let preds = predict(model, ds, &ids)?;
    Ok(histogram_from(&preds.predicted, &preds.confidence, &truth, group, bins))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub classes: Vec<usize>,
    pub local_ece: EceResult,
    pub histogram: ConfidenceHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub accuracy: AccuracyReport,
    pub cluster_concentration: Vec<f64>,
    pub confused_groups: Vec<GroupReport>,
}

/// Full evaluation. `groups` overrides confused-group discovery.
pub fn evaluate(
    model: &AdapterModel,
    ds: &EmbeddingDataset,
    groups: Option<Vec<Vec<usize>>>,
    theta_g: f64,
    bins: usize,
    seed: u64,
) -> Result<EvalReport> {
    let ids = ds.test_ids();
    let truth = ds.labels_for(&ids)?;
    let preds = predict(model, ds, &ids)?;
    let split = ds
        .splits
        .has_class_split()
        .then_some((ds.splits.seen_classes.as_slice(), ds.splits.unseen_classes.as_slice()));
    let accuracy = accuracy_from(&preds.predicted, &truth, ds.n_classes(), split);
    let groups = match groups {
        Some(g) => g,
        None => find_confused_groups(&evaluation_similarity(ds)?, theta_g),
    };
    let confused_groups = groups
        .into_iter()
        .map(|g| {
            let set: BTreeSet<usize> = g.iter().copied().collect();
            GroupReport {
                local_ece: ece_from(&preds.predicted, &preds.confidence, &truth, &set, bins),
                histogram: histogram_from(&preds.predicted, &preds.confidence, &truth, &g, bins),
                classes: g,
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy,
        cluster_concentration: cluster_concentration(ds, seed)?,
        confused_groups,
    })
}
