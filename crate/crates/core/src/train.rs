//! Dual-adapter fine-tuning over frozen embeddings.
//!
//! Each step draws a batch from the pseudolabeled set (main branch), a batch
//! from the unlabeled pool (pseudo branch on augmented views, supervised by
//! thresholded main-branch predictions on clean views) and, outside the
//! unsupervised paradigm, a batch of labeled samples (main branch). All three
//! terms use the margin loss; the margin is rebuilt at the start of every
//! epoch from the current model.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::{Pseudolabel, PseudolabelSet, PseudolabelSource};
use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::eval::{accuracy_from, predict};
use crate::linalg::{argmax, softmax, to_f64};
use crate::margin::{margin_loss, similarity_matrix, tendency_stats, visual_prototypes, MarginState};
use crate::model::{AdapterModel, Branch, ModelGrads};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Ul,
    Ssl,
    Trzsl,
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ul" => Ok(Paradigm::Ul),
            "ssl" => Ok(Paradigm::Ssl),
            "trzsl" => Ok(Paradigm::Trzsl),
            other => Err(Error::InvalidArgument(format!("unknown paradigm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub margin_scale: f64,
    pub growth_every: usize,
    pub gamma: f64,
    /// Noise added to clean features when the dataset has no augmented view.
    pub aug_noise_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        use crate::config::defaults;
        Self {
            paradigm: Paradigm::Ul,
            epochs: defaults::EPOCHS,
            batch_size: defaults::BATCH_SIZE,
            lr: defaults::LR,
            momentum: defaults::MOMENTUM,
            weight_decay: defaults::WEIGHT_DECAY,
            tau: defaults::TAU,
            margin_scale: defaults::MARGIN_SCALE,
            growth_every: defaults::GROWTH_EVERY,
            gamma: defaults::GAMMA,
            aug_noise_std: defaults::AUG_NOISE_STD,
            seed: 0,
        }
    }
}

/// Learning rate for `step` of `epoch`: linear warmup through the first
/// epoch, then cosine annealing over the remaining epochs.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize, step: usize, steps_in_epoch: usize) -> f64 {
    if epoch == 0 {
        return cfg.lr * (step + 1) as f64 / steps_in_epoch.max(1) as f64;
    }
    let span = (cfg.epochs - 1) as f64;
    0.5 * cfg.lr * (1.0 + (PI * (epoch - 1) as f64 / span).cos())
}

/// SGD with momentum and L2 weight decay on every adapter matrix.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: Option<ModelGrads>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: None,
        }
    }

    pub fn step(&mut self, model: &mut AdapterModel, grads: &ModelGrads, lr: f64) {
        let first = self.buffers.is_none();
        let bufs = self.buffers.get_or_insert_with(|| ModelGrads::zeros(model.dim()));
        for ((w, g), buf) in model
            .matrices_mut()
            .into_iter()
            .zip(grads.matrices())
            .zip(bufs.matrices_mut())
        {
            let mut d = g + &(&*w * self.weight_decay);
            if !first {
                d = &*buf * self.momentum + d;
            }
            buf.assign(&d);
            *w -= &(d * lr);
        }
    }
}

/// One training batch in feature space.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub pseudolabeled: Vec<(Array1<f64>, usize)>,
    /// Augmented views of confident unlabeled samples with their targets.
    pub unlabeled: Vec<(Array1<f64>, usize)>,
    pub labeled: Vec<(Array1<f64>, usize)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pl: f64,
    pub ul: f64,
    pub labeled: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.pl + self.ul + self.labeled
    }
}

/// Loss `L_PL + L_UL + L_L` and its gradient with respect to every weight.
/// Each term is a mean over its own part of the batch; empty parts add 0.
pub fn objective(
    model: &AdapterModel,
    base_text: &Array2<f64>,
    batch: &Batch,
    margin: &Array2<f64>,
) -> Result<(LossParts, ModelGrads)> {
    let text = model.encode_texts(base_text, true);
    let mut grads = ModelGrads::zeros(model.dim());
    let mut dtext = Array2::zeros(text.out.raw_dim());
    let mut term = |items: &[(Array1<f64>, usize)], branch: Branch, grads: &mut ModelGrads| -> Result<f64> {
        if items.is_empty() {
            return Ok(0.0);
        }
        let scale = 1.0 / items.len() as f64;
        let mut total = 0.0;
        for (x, y) in items {
            let img = model.encode_image(x.view(), branch);
            let z = model.logits(&img, &text);
            let (loss, dz) = margin_loss(*y, z.as_slice().expect("contiguous"), margin)?;
            total += loss * scale;
            model.backward_image(&img, &text, &(dz * scale), &mut dtext, grads);
        }
        Ok(total)
    };
    let pl = term(&batch.pseudolabeled, Branch::Main, &mut grads)?;
    let ul = term(&batch.unlabeled, Branch::Pseudo, &mut grads)?;
    let labeled = term(&batch.labeled, Branch::Main, &mut grads)?;
    model.backward_text(&text, &dtext, &mut grads);
    Ok((LossParts { pl, ul, labeled }, grads))
}

/// Softmax over the candidate classes for one main-branch forward pass.
/// Returns (predicted class id, confidence).
fn main_prediction(
    model: &AdapterModel,
    text: &crate::model::TextActivation,
    x: &Array1<f64>,
    classes: &[usize],
) -> Result<(usize, f64)> {
    let z = model.logits(&model.encode_image(x.view(), Branch::Main), text);
    let sub: Vec<f64> = classes.iter().map(|&c| z[c]).collect();
    let p = softmax(&sub)?;
    let best = argmax(&sub);
    Ok((classes[best], p[best]))
}

/// Thresholded pseudolabels: keeps `(index, class)` for every clean view
/// whose main-branch confidence reaches `tau`.
pub fn fixmatch_pseudolabel(
    model: &AdapterModel,
    base_text: &Array2<f64>,
    clean: &[Array1<f64>],
    classes: &[usize],
    tau: f64,
) -> Result<Vec<(usize, usize)>> {
    let text = model.encode_texts(base_text, true);
    let mut kept = Vec::new();
    for (i, x) in clean.iter().enumerate() {
        let (c, p) = main_prediction(model, &text, x, classes)?;
        if p >= tau {
            kept.push((i, c));
        }
    }
    Ok(kept)
}

/// Everything the loop mutates besides the model.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub pl: PseudolabelSet,
    pub ul: Vec<usize>,
    pub ul_initial: usize,
    pub labeled: Vec<(usize, usize)>,
    /// Classes that receive pseudolabels.
    pub classes: Vec<usize>,
}

impl TrainState {
    pub fn new(ds: &EmbeddingDataset, pl: PseudolabelSet, paradigm: Paradigm, classes: Vec<usize>) -> Result<Self> {
        let in_pl = pl.sample_ids();
        let ul: Vec<usize> = ds.unlabeled_ids().into_iter().filter(|i| !in_pl.contains(i)).collect();
        let labeled = match paradigm {
            Paradigm::Ul => Vec::new(),
            Paradigm::Ssl | Paradigm::Trzsl => {
                if ds.splits.train_labeled.is_empty() {
                    return Err(Error::ConfigConflict(format!(
                        "{paradigm:?} training needs labeled samples in the split"
                    )));
                }
                if paradigm == Paradigm::Trzsl && !ds.splits.has_class_split() {
                    return Err(Error::ConfigConflict("TRZSL needs a seen/unseen class split".into()));
                }
                let ids = &ds.splits.train_labeled;
                ids.iter().copied().zip(ds.labels_for(ids)?).collect()
            }
        };
        Ok(Self {
            ul_initial: ul.len(),
            pl,
            ul,
            labeled,
            classes,
        })
    }
}

/// Dataset features converted once for the training loop.
pub struct FeatureCache {
    pub clean: Array2<f64>,
    pub aug: Option<Array2<f64>>,
    pub text: Array2<f64>,
}

impl FeatureCache {
    pub fn new(ds: &EmbeddingDataset) -> Self {
        Self {
            clean: to_f64(ds.image_features.view()),
            aug: ds.image_features_aug.as_ref().map(|a| to_f64(a.view())),
            text: to_f64(ds.text_features.view()),
        }
    }

    fn row(&self, i: usize) -> Array1<f64> {
        self.clean.row(i).to_owned()
    }

    /// Augmented view: the stored one, or clean plus Gaussian noise.
    fn augmented(&self, i: usize, std: f64, r: &mut ChaCha8Rng) -> Array1<f64> {
        if let Some(aug) = &self.aug {
            return aug.row(i).to_owned();
        }
        let noise = Normal::new(0.0, std).expect("finite std");
        let v = self.clean.row(i).mapv(|x| x + noise.sample(r));
        let n = v.dot(&v).sqrt();
        v / n
    }
}

/// Rebuilds the margin from main-branch predictions on the pseudolabeled
/// set (plus labeled samples when a class split exists).
pub fn refresh_margin(
    model: &AdapterModel,
    ds: &EmbeddingDataset,
    feats: &FeatureCache,
    state: &TrainState,
    cfg: &TrainConfig,
) -> Result<MarginState> {
    let c = ds.n_classes();
    let text = model.encode_texts(&feats.text, true);
    let mut records: Vec<(usize, usize)> = state.pl.records.iter().map(|r| (r.sample_id, r.class_id)).collect();
    if ds.splits.has_class_split() {
        records.extend(state.labeled.iter().copied());
    }
    let mut by_class = vec![Vec::new(); c];
    let mut preds = Vec::with_capacity(records.len());
    for &(i, y) in &records {
        let img = model.encode_image(feats.clean.row(i), Branch::Main);
        let z = model.logits(&img, &text).to_vec();
        let p = softmax(&z)?;
        let best = argmax(&z);
        preds.push((best, p[best]));
        by_class[y].push(img.out.to_vec());
    }
    // Classes without any supervised sample keep their text prototype.
    for (k, rows) in by_class.iter_mut().enumerate() {
        if rows.is_empty() {
            rows.push(text.out.row(k).to_vec());
        }
    }
    let sim = similarity_matrix(&visual_prototypes(&by_class, ds.dim())?, &text.out)?;
    let tendency = tendency_stats(&preds, cfg.tau, c);
    Ok(MarginState::build(sim, tendency, cfg.margin_scale, cfg.tau))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub steps: usize,
    pub loss: LossParts,
    pub confident: usize,
    pub unlabeled_seen: usize,
    pub last_lr: f64,
}

fn cycle_take(pool: &[usize], cursor: &mut Vec<usize>, n: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    if pool.is_empty() {
        return out;
    }
    while out.len() < n {
        if cursor.is_empty() {
            *cursor = pool.to_vec();
            cursor.shuffle(r);
            cursor.reverse();
        }
        out.push(cursor.pop().expect("refilled"));
    }
    out
}

pub fn train_epoch(
    model: &mut AdapterModel,
    opt: &mut Sgd,
    feats: &FeatureCache,
    state: &TrainState,
    margin: &MarginState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let mut r = rng::indexed_stream(cfg.seed, "batching", epoch as u64);
    let mut order: Vec<usize> = (0..state.pl.records.len()).collect();
    order.shuffle(&mut r);
    let b = cfg.batch_size.max(1);
    let steps = order.len().div_ceil(b);
    let mut stats = EpochStats {
        steps,
        ..Default::default()
    };
    let mut ul_cursor = Vec::new();
    let mut l_cursor = Vec::new();
    let labeled_pos: Vec<usize> = (0..state.labeled.len()).collect();

    for (step, chunk) in order.chunks(b).enumerate() {
        let lr = learning_rate(cfg, epoch, step, steps);
        let mut batch = Batch::default();
        for &k in chunk {
            let rec = &state.pl.records[k];
            batch.pseudolabeled.push((feats.row(rec.sample_id), rec.class_id));
        }
        let ul_ids = cycle_take(&state.ul, &mut ul_cursor, b, &mut r);
        let clean: Vec<Array1<f64>> = ul_ids.iter().map(|&i| feats.row(i)).collect();
        let kept = fixmatch_pseudolabel(model, &feats.text, &clean, &state.classes, cfg.tau)?;
        stats.unlabeled_seen += ul_ids.len();
        stats.confident += kept.len();
        for (pos, y) in kept {
            batch.unlabeled.push((feats.augmented(ul_ids[pos], cfg.aug_noise_std, &mut r), y));
        }
        for pos in cycle_take(&labeled_pos, &mut l_cursor, b, &mut r) {
            let (i, y) = state.labeled[pos];
            batch.labeled.push((feats.row(i), y));
        }

        let (loss, grads) = objective(model, &feats.text, &batch, &margin.matrix).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { epoch },
            e => e,
        })?;
        if !loss.total().is_finite() {
            return Err(Error::Divergence { epoch });
        }
        opt.step(model, &grads, lr);
        stats.loss.pl += loss.pl / steps as f64;
        stats.loss.ul += loss.ul / steps as f64;
        stats.loss.labeled += loss.labeled / steps as f64;
        stats.last_lr = lr;
    }
    Ok(stats)
}

/// Number of growth events over a run, `epochs / growth_every`.
pub fn growth_events(cfg: &TrainConfig) -> usize {
    cfg.epochs.checked_div(cfg.growth_every).unwrap_or(0)
}

/// Moves the most confident unlabeled samples of each class into the
/// pseudolabeled set. Per class the quota is
/// `floor(|D_UL0| / (events * classes))`. Returns the number added.
pub fn grow_pl(
    model: &AdapterModel,
    feats: &FeatureCache,
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<usize> {
    let events = growth_events(cfg);
    if events == 0 || state.ul.is_empty() || state.classes.is_empty() {
        return Ok(0);
    }
    let quota = state.ul_initial / (events * state.classes.len());
    if quota == 0 {
        return Ok(0);
    }
    let text = model.encode_texts(&feats.text, true);
    let mut scored: Vec<(usize, usize, f64)> = Vec::with_capacity(state.ul.len());
    for &i in &state.ul {
        let (c, p) = main_prediction(model, &text, &feats.row(i), &state.classes)?;
        scored.push((i, c, p));
    }
    let mut moved = BTreeSet::new();
    for &c in &state.classes {
        let mut cands: Vec<&(usize, usize, f64)> = scored.iter().filter(|s| s.1 == c).collect();
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        for &&(i, _, p) in cands.iter().take(quota) {
            moved.insert(i);
            state.pl.records.push(Pseudolabel {
                sample_id: i,
                class_id: c,
                confidence: p,
                source: PseudolabelSource::Growth,
            });
        }
    }
    state.ul.retain(|i| !moved.contains(i));
    Ok(moved.len())
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_pl: f64,
    pub loss_ul: f64,
    pub loss_labeled: f64,
    pub loss_total: f64,
    pub confident_fraction: f64,
    pub big_delta: f64,
    pub sigma: Vec<usize>,
    pub pl_size: usize,
    pub ul_size: usize,
    pub grown: usize,
    pub pl_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub min_class_accuracy: Option<f64>,
    pub pred_counts: Vec<usize>,
    pub pred_count_std: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AdapterModel,
    pub log: Vec<EpochRecord>,
    pub pl: PseudolabelSet,
    pub ul: Vec<usize>,
    /// Margin used in the last epoch.
    pub margin: Option<MarginState>,
}

fn snapshot(
    model: &AdapterModel,
    ds: &EmbeddingDataset,
    state: &TrainState,
    mut rec: EpochRecord,
) -> Result<EpochRecord> {
    let ids = ds.test_ids();
    let preds = predict(model, ds, &ids)?;
    let mut counts = vec![0usize; ds.n_classes()];
    for &p in &preds.predicted {
        counts[p] += 1;
    }
    if let Ok(truth) = ds.labels_for(&ids) {
        let acc = accuracy_from(&preds.predicted, &truth, ds.n_classes(), None);
        rec.test_accuracy = Some(acc.overall_acc);
        rec.min_class_accuracy = Some(acc.min_class_acc);
        rec.pred_count_std = acc.pred_count_std;
    } else {
        let c: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        rec.pred_count_std = crate::eval::std_dev(&c);
    }
    rec.pred_counts = counts;
    rec.pl_size = state.pl.len();
    rec.ul_size = state.ul.len();
    rec.pl_accuracy = state.pl.accuracy(&ds.labels);
    Ok(rec)
}

/// Runs the full loop from a zero-initialized model. The log starts with an
/// epoch-0 record holding zero-shot metrics.
pub fn run_training(
    ds: &EmbeddingDataset,
    pl: PseudolabelSet,
    classes: Vec<usize>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.epochs > 0 && cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut model = AdapterModel::zeros(ds.dim(), cfg.gamma);
    let feats = FeatureCache::new(ds);
    let mut state = TrainState::new(ds, pl, cfg.paradigm, classes)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let blank = EpochRecord {
        epoch: 0,
        lr: 0.0,
        loss_pl: 0.0,
        loss_ul: 0.0,
        loss_labeled: 0.0,
        loss_total: 0.0,
        confident_fraction: 0.0,
        big_delta: 0.0,
        sigma: vec![0; ds.n_classes()],
        pl_size: 0,
        ul_size: 0,
        grown: 0,
        pl_accuracy: None,
        test_accuracy: None,
        min_class_accuracy: None,
        pred_counts: Vec::new(),
        pred_count_std: 0.0,
    };
    let mut log = vec![snapshot(&model, ds, &state, blank.clone())?];
    let mut last_margin = None;

    for epoch in 0..cfg.epochs {
        let margin = refresh_margin(&model, ds, &feats, &state, cfg)?;
        let stats = train_epoch(&mut model, &mut opt, &feats, &state, &margin, cfg, epoch)?;
        let done = epoch + 1;
        let grown = if cfg.growth_every > 0 && done % cfg.growth_every == 0 {
            grow_pl(&model, &feats, &mut state, cfg)?
        } else {
            0
        };
        let rec = EpochRecord {
            epoch: done,
            lr: stats.last_lr,
            loss_pl: stats.loss.pl,
            loss_ul: stats.loss.ul,
            loss_labeled: stats.loss.labeled,
            loss_total: stats.loss.total(),
            confident_fraction: if stats.unlabeled_seen == 0 {
                0.0
            } else {
                stats.confident as f64 / stats.unlabeled_seen as f64
            },
            big_delta: margin.tendency.big_delta,
            sigma: margin.tendency.sigma.clone(),
            grown,
            ..blank.clone()
        };
        log.push(snapshot(&model, ds, &state, rec)?);
        log::debug!(
            "epoch {done}: loss {:.4} acc {:?} delta {:.3}",
            stats.loss.total(),
            log.last().and_then(|r| r.test_accuracy),
            margin.tendency.big_delta
        );
        last_margin = Some(margin);
    }
    Ok(TrainOutcome {
        model,
        log,
        pl: state.pl,
        ul: state.ul,
        margin: last_margin,
    })
}

/// Serializes the metric log as JSON lines.
pub fn metric_log_jsonl(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn unit(v: Array1<f64>) -> Array1<f64> {
        let n = v.dot(&v).sqrt();
        v / n
    }

    fn random_model(dim: usize, gamma: f64, r: &mut ChaCha8Rng) -> AdapterModel {
        let mut m = AdapterModel::zeros(dim, gamma);
        for w in m.matrices_mut() {
            w.mapv_inplace(|_| 0.3 * r.sample::<f64, _>(StandardNormal));
        }
        m
    }

    fn random_unit(dim: usize, r: &mut ChaCha8Rng) -> Array1<f64> {
        unit(Array1::from_iter((0..dim).map(|_| r.sample::<f64, _>(StandardNormal))))
    }

    /// Forward-only loss written independently of `objective`.
    fn oracle_loss(m: &AdapterModel, text: &Array2<f64>, batch: &Batch, margin: &Array2<f64>) -> f64 {
        let res = |w: &Array2<f64>, x: &Array1<f64>| unit(x + &w.dot(x));
        let t: Vec<Array1<f64>> = text
            .rows()
            .into_iter()
            .map(|w| {
                let t = res(&m.trunk_txt, &w.to_owned());
                res(&m.text, &t)
            })
            .collect();
        let term = |items: &[(Array1<f64>, usize)], adapter: &Array2<f64>| {
            if items.is_empty() {
                return 0.0;
            }
            let mut total = 0.0;
            for (x, y) in items {
                let u = res(adapter, &res(&m.trunk_img, x));
                let z: Vec<f64> = t.iter().map(|tc| m.gamma * u.dot(tc)).collect();
                let denom: f64 = (0..z.len())
                    .map(|c| if c == *y { z[c].exp() } else { (z[c] + margin[[*y, c]]).exp() })
                    .sum();
                total += -(z[*y].exp() / denom).ln();
            }
            total / items.len() as f64
        };
        term(&batch.pseudolabeled, &m.main) + term(&batch.unlabeled, &m.pseudo) + term(&batch.labeled, &m.main)
    }

    fn tiny(seed: u64) -> (AdapterModel, Array2<f64>, Batch, Array2<f64>) {
        let (d, c) = (4, 3);
        let mut r = rng::stream(seed, "test-tiny");
        let model = random_model(d, 10.0, &mut r);
        let mut text = Array2::zeros((c, d));
        for mut row in text.rows_mut() {
            row.assign(&random_unit(d, &mut r));
        }
        let mut items = || -> Vec<(Array1<f64>, usize)> {
            (0..4).map(|i| (random_unit(d, &mut r), i % c)).collect()
        };
        let batch = Batch {
            pseudolabeled: items(),
            unlabeled: items(),
            labeled: items(),
        };
        let mut margin = Array2::from_shape_fn((c, c), |_| 3.0 * r.random::<f64>());
        for i in 0..c {
            margin[[i, i]] = 0.0;
        }
        (model, text, batch, margin)
    }

    #[test]
    fn objective_matches_oracle_and_finite_differences() {
        for seed in 0..3 {
            let (model, text, batch, margin) = tiny(seed);
            let (loss, grads) = objective(&model, &text, &batch, &margin).unwrap();
            let want = oracle_loss(&model, &text, &batch, &margin);
            assert!((loss.total() - want).abs() < 1e-10, "{} vs {want}", loss.total());

            let eps = 1e-6;
            let mut worst: f64 = 0.0;
            for k in 0..5 {
                let g = grads.matrices()[k].clone();
                for idx in ndarray::indices(g.raw_dim()) {
                    let mut plus = model.clone();
                    plus.matrices_mut()[k][idx] += eps;
                    let mut minus = model.clone();
                    minus.matrices_mut()[k][idx] -= eps;
                    let num = (oracle_loss(&plus, &text, &batch, &margin)
                        - oracle_loss(&minus, &text, &batch, &margin))
                        / (2.0 * eps);
                    let rel = (g[idx] - num).abs() / g[idx].abs().max(num.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
            assert!(worst <= 1e-3, "seed {seed}: max relative error {worst}");
        }
    }

    #[test]
    fn branches_are_isolated() {
        let (model, text, batch, margin) = tiny(5);
        let ul_only = Batch {
            unlabeled: batch.unlabeled.clone(),
            ..Batch::default()
        };
        let (_, g) = objective(&model, &text, &ul_only, &margin).unwrap();
        assert!(g.main.iter().all(|&v| v == 0.0));
        assert!(g.pseudo.iter().any(|&v| v != 0.0));

        let supervised = Batch {
            pseudolabeled: batch.pseudolabeled.clone(),
            labeled: batch.labeled.clone(),
            ..Batch::default()
        };
        let (_, g) = objective(&model, &text, &supervised, &margin).unwrap();
        assert!(g.pseudo.iter().all(|&v| v == 0.0));
        assert!(g.main.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn empty_batch_is_zero() {
        let (model, text, _, margin) = tiny(1);
        let (loss, g) = objective(&model, &text, &Batch::default(), &margin).unwrap();
        assert_eq!(loss.total(), 0.0);
        assert!(g.matrices().iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut r = rng::stream(3, "sgd");
        let mut model = random_model(2, 1.0, &mut r);
        let w0 = model.main.clone();
        let mut g = ModelGrads::zeros(2);
        g.main.fill(1.0);
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(&mut model, &g, 0.5);
        let d1 = w0.mapv(|w| 1.0 + 0.1 * w);
        let w1 = &w0 - &(&d1 * 0.5);
        assert!(model.main.iter().zip(w1.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
        opt.step(&mut model, &g, 0.5);
        let d2 = &d1 * 0.9 + &w1.mapv(|w| 1.0 + 0.1 * w);
        let w2 = &w1 - &(&d2 * 0.5);
        assert!(model.main.iter().zip(w2.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert!((learning_rate(&cfg, 0, 0, 4) - cfg.lr / 4.0).abs() < 1e-15);
        assert!((learning_rate(&cfg, 0, 3, 4) - cfg.lr).abs() < 1e-15);
        assert!((learning_rate(&cfg, 1, 0, 4) - cfg.lr).abs() < 1e-15);
        let mid = 1 + (cfg.epochs - 1) / 2;
        assert!(learning_rate(&cfg, mid, 0, 4) < cfg.lr * 0.6);
        let mut prev = f64::INFINITY;
        for e in 1..cfg.epochs {
            let lr = learning_rate(&cfg, e, 0, 4);
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }

    fn small_setup() -> (EmbeddingDataset, PseudolabelSet) {
        let spec = SynthSpec {
            n_classes: 3,
            per_class: 12,
            dim: 8,
            n_mismatch: 0,
            n_confusion: 0,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap().dataset;
        let mut records = Vec::new();
        for c in 0..3 {
            for &i in ds.unlabeled_ids().iter().filter(|&&i| ds.labels[i] == Some(c)).take(2) {
                records.push(Pseudolabel {
                    sample_id: i,
                    class_id: c,
                    confidence: 1.0,
                    source: PseudolabelSource::TopkConfidence,
                });
            }
        }
        (ds, PseudolabelSet { k: 2, records })
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let (ds, pl) = small_setup();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut model = AdapterModel::zeros(ds.dim(), cfg.gamma);
        let init = model.clone();
        let feats = FeatureCache::new(&ds);
        let state = TrainState::new(&ds, pl, Paradigm::Ul, vec![0, 1, 2]).unwrap();
        let margin = MarginState::zero(3);
        let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        let a = train_epoch(&mut model, &mut opt, &feats, &state, &margin, &cfg, 1).unwrap();
        assert_eq!(model, init);
        let b = train_epoch(&mut model, &mut opt, &feats, &state, &margin, &cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(model, init);
    }

    #[test]
    fn fixmatch_threshold_cases() {
        let mut r = rng::stream(2, "fixmatch");
        let model = random_model(4, 10.0, &mut r);
        let text = Array2::from_shape_fn((3, 4), |_| r.sample::<f64, _>(StandardNormal));
        let clean: Vec<Array1<f64>> = (0..20).map(|_| random_unit(4, &mut r)).collect();
        let classes = [0, 1, 2];
        assert_eq!(fixmatch_pseudolabel(&model, &text, &clean, &classes, 0.0).unwrap().len(), 20);
        assert!(fixmatch_pseudolabel(&model, &text, &clean, &classes, 1.01).unwrap().is_empty());
        let kept = fixmatch_pseudolabel(&model, &text, &clean, &classes, 0.85).unwrap();
        let tx = model.encode_texts(&text, true);
        let mut want = Vec::new();
        for (i, x) in clean.iter().enumerate() {
            let z = model.logits(&model.encode_image(x.view(), Branch::Main), &tx);
            let e: Vec<f64> = z.iter().map(|v| (v - z.fold(f64::MIN, |a, &b| a.max(b))).exp()).collect();
            let s: f64 = e.iter().sum();
            let best = (0..3).fold(0, |b, c| if e[c] > e[b] { c } else { b });
            if e[best] / s >= 0.85 {
                want.push((i, best));
            }
        }
        assert_eq!(kept, want);
    }

    #[test]
    fn growth_follows_confidence_ranking() {
        let (ds, pl) = small_setup();
        let cfg = TrainConfig {
            epochs: 10,
            growth_every: 5,
            ..TrainConfig::default()
        };
        let mut r = rng::stream(4, "growth");
        let model = random_model(ds.dim(), cfg.gamma, &mut r);
        let feats = FeatureCache::new(&ds);
        let mut state = TrainState::new(&ds, pl, Paradigm::Ul, vec![0, 1, 2]).unwrap();
        let ul_before = state.ul.clone();
        let quota = state.ul_initial / (growth_events(&cfg) * 3);
        assert!(quota > 0);

        let tx = model.encode_texts(&feats.text, true);
        let mut table: Vec<(usize, usize, f64)> = ul_before
            .iter()
            .map(|&i| {
                let z = model.logits(&model.encode_image(feats.clean.row(i), Branch::Main), &tx);
                let p = softmax(z.as_slice().unwrap()).unwrap();
                let c = argmax(z.as_slice().unwrap());
                (i, c, p[c])
            })
            .collect();
        table.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let mut want = BTreeSet::new();
        for c in 0..3 {
            want.extend(table.iter().filter(|t| t.1 == c).take(quota).map(|t| t.0));
        }

        let added = grow_pl(&model, &feats, &mut state, &cfg).unwrap();
        let grown: BTreeSet<usize> = state
            .pl
            .records
            .iter()
            .filter(|r| r.source == PseudolabelSource::Growth)
            .map(|r| r.sample_id)
            .collect();
        assert_eq!(added, want.len());
        assert_eq!(grown, want);
        assert!(state.ul.iter().all(|i| !grown.contains(i)));
        assert_eq!(state.ul.len() + added, ul_before.len());
    }

    #[test]
    fn zero_epochs_gives_zero_shot_model() {
        let (ds, pl) = small_setup();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = run_training(&ds, pl, vec![0, 1, 2], &cfg).unwrap();
        assert_eq!(out.model, AdapterModel::zeros(ds.dim(), cfg.gamma));
        assert_eq!(out.log.len(), 1);
        assert!(out.margin.is_none());
    }

    #[test]
    fn paradigm_preconditions() {
        let (ds, pl) = small_setup();
        assert!(matches!(
            TrainState::new(&ds, pl.clone(), Paradigm::Ssl, vec![0, 1, 2]),
            Err(Error::ConfigConflict(_))
        ));
        assert!(matches!(
            TrainState::new(&ds, pl, Paradigm::Trzsl, vec![0, 1, 2]),
            Err(Error::ConfigConflict(_))
        ));
        assert_eq!("TRZSL".parse::<Paradigm>().unwrap(), Paradigm::Trzsl);
        assert!("xyz".parse::<Paradigm>().is_err());
    }
}
