//! Pipeline configuration and its defaults.

use serde::{Deserialize, Serialize};

use crate::kmeans::KMeansParams;
use crate::train::TrainConfig;

pub mod defaults {
    /// Training epochs; the first one is a linear warmup.
    pub const EPOCHS: usize = 50;
    pub const BATCH_SIZE: usize = 32;
    pub const LR: f64 = 0.01;
    pub const MOMENTUM: f64 = 0.9;
    pub const WEIGHT_DECAY: f64 = 0.1;
    /// Confidence threshold for accepting a dynamic pseudolabel.
    pub const TAU: f64 = 0.85;
    /// Threshold used by the aircraft-like preset.
    pub const TAU_AIRCRAFT: f64 = 0.5;
    /// Initial pseudolabels per class.
    pub const K: usize = 16;
    /// Initial pseudolabels per class for the flowers-like preset.
    pub const K_FLOWERS: usize = 6;
    /// Base scale of the calibrated margin, in logit units.
    pub const MARGIN_SCALE: f64 = 12.0;
    /// Epochs between pseudolabel-set growth events.
    pub const GROWTH_EVERY: usize = 5;
    /// Candidate descriptions requested per mismatched class.
    pub const N_DESCRIPTIONS: usize = 5;
    /// Logit temperature applied to cosine similarities.
    pub const GAMMA: f64 = crate::model::DEFAULT_GAMMA;
    pub const AUG_NOISE_STD: f64 = 0.05;
    /// Seen share of classes for transductive zero-shot splits.
    pub const SEEN_FRACTION: f64 = 0.62;
    pub const SSL_LABELED_PER_CLASS: usize = 2;
    pub const GROUP_THRESHOLD: f64 = crate::eval::DEFAULT_GROUP_THRESHOLD;
    pub const ECE_BINS: usize = crate::eval::DEFAULT_ECE_BINS;
}

/// How the mismatch-detection threshold `t` is chosen. Serialized as
/// `"auto"` or a bare integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ThresholdRepr", into = "ThresholdRepr")]
pub enum ThresholdRule {
    /// `ceil(C / 10)`.
    Auto,
    Fixed(usize),
}

impl ThresholdRule {
    pub fn resolve(self, n_classes: usize) -> usize {
        match self {
            ThresholdRule::Auto => crate::mismatch::auto_threshold(n_classes),
            ThresholdRule::Fixed(t) => t,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ThresholdRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<ThresholdRepr> for ThresholdRule {
    type Error = crate::Error;

    fn try_from(r: ThresholdRepr) -> crate::Result<Self> {
        match r {
            ThresholdRepr::Count(t) => Ok(ThresholdRule::Fixed(t)),
            ThresholdRepr::Word(w) => w.parse(),
        }
    }
}

impl From<ThresholdRule> for ThresholdRepr {
    fn from(t: ThresholdRule) -> Self {
        match t {
            ThresholdRule::Auto => ThresholdRepr::Word("auto".into()),
            ThresholdRule::Fixed(t) => ThresholdRepr::Count(t),
        }
    }
}

impl std::str::FromStr for ThresholdRule {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(ThresholdRule::Auto);
        }
        s.parse()
            .map(ThresholdRule::Fixed)
            .map_err(|_| crate::Error::InvalidArgument(format!("threshold must be 'auto' or an integer, got '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub t: ThresholdRule,
    pub n_descriptions: usize,
    pub k: usize,
    pub theta_g: f64,
    pub ece_bins: usize,
    #[serde(skip, default)]
    pub kmeans: KMeansParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            t: ThresholdRule::Auto,
            n_descriptions: defaults::N_DESCRIPTIONS,
            k: defaults::K,
            theta_g: defaults::GROUP_THRESHOLD,
            ece_bins: defaults::ECE_BINS,
            kmeans: KMeansParams::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_rule_forms() {
        assert_eq!("auto".parse::<ThresholdRule>().unwrap(), ThresholdRule::Auto);
        assert_eq!("4".parse::<ThresholdRule>().unwrap(), ThresholdRule::Fixed(4));
        assert!("four".parse::<ThresholdRule>().is_err());
        assert_eq!(ThresholdRule::Auto.resolve(45), 5);
        assert_eq!(ThresholdRule::Auto.resolve(10), 1);
        assert_eq!(ThresholdRule::Fixed(3).resolve(10), 3);
        assert_eq!(serde_json::to_string(&ThresholdRule::Fixed(3)).unwrap(), "3");
        assert_eq!(serde_json::from_str::<ThresholdRule>("\"auto\"").unwrap(), ThresholdRule::Auto);
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.k, 16);
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
