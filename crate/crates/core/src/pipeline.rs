//! End-to-end run: detect, align, pseudolabel, train, evaluate.

use std::collections::BTreeMap;

use crate::align::{build_initial_pl, enhance_mismatched, DescriptionCandidate, DescriptionProvider, InitialPlParams, PseudolabelSet};
use crate::config::PipelineConfig;
use crate::dataset::EmbeddingDataset;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::mismatch::{detect_mismatch, DetectParams, MismatchReport};
use crate::rng;
use crate::train::{run_training, Paradigm, TrainOutcome};

pub fn detect_params(ds: &EmbeddingDataset, cfg: &PipelineConfig) -> DetectParams {
    DetectParams {
        t: cfg.t.resolve(ds.n_classes()),
        gamma: cfg.train.gamma,
        seed: rng::derive_seed(cfg.train.seed, "detect", 0),
        kmeans: cfg.kmeans,
    }
}

/// Classes that receive pseudolabels: the unseen ones under TRZSL, else all.
pub fn pseudolabel_classes(ds: &EmbeddingDataset, paradigm: Paradigm) -> Vec<usize> {
    if paradigm == Paradigm::Trzsl && ds.splits.has_class_split() {
        ds.splits.unseen_classes.clone()
    } else {
        (0..ds.n_classes()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub enhanced: BTreeMap<usize, DescriptionCandidate>,
    pub pseudolabels: PseudolabelSet,
}

pub fn align(
    ds: &EmbeddingDataset,
    report: &MismatchReport,
    provider: &dyn DescriptionProvider,
    cfg: &PipelineConfig,
) -> Result<Alignment> {
    let classes = pseudolabel_classes(ds, cfg.train.paradigm);
    let mut scoped = report.clone();
    scoped.y_mm.retain(|c| classes.contains(c));
    let enhanced = enhance_mismatched(
        ds,
        &scoped,
        provider,
        cfg.n_descriptions,
        rng::derive_seed(cfg.train.seed, "align", 0),
        cfg.kmeans,
    )?;
    let pseudolabels = build_initial_pl(
        ds,
        &scoped,
        &enhanced,
        &InitialPlParams {
            k: cfg.k,
            gamma: cfg.train.gamma,
            classes: Some(classes),
        },
    )?;
    Ok(Alignment { enhanced, pseudolabels })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: MismatchReport,
    pub alignment: Alignment,
    pub outcome: TrainOutcome,
    pub eval: EvalReport,
}

/// Runs every stage. `groups` overrides confused-group discovery in the
/// final evaluation.
pub fn run_pipeline(
    ds: &EmbeddingDataset,
    provider: &dyn DescriptionProvider,
    cfg: &PipelineConfig,
    groups: Option<Vec<Vec<usize>>>,
) -> Result<PipelineOutput> {
    let report = detect_mismatch(ds, &detect_params(ds, cfg))?;
    let alignment = align(ds, &report, provider, cfg)?;
    let classes = pseudolabel_classes(ds, cfg.train.paradigm);
    let outcome = run_training(ds, alignment.pseudolabels.clone(), classes, &cfg.train)?;
    let eval = evaluate(
        &outcome.model,
        ds,
        groups,
        cfg.theta_g,
        cfg.ece_bins,
        rng::derive_seed(cfg.train.seed, "eval", 0),
    )?;
    Ok(PipelineOutput {
        report,
        alignment,
        outcome,
        eval,
    })
}
