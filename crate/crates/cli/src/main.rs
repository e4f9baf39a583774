//! `capforge` command-line interface.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 when a
//! run fails at runtime (I/O, clustering, divergence).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capforge::align::{DescriptionCandidate, DescriptionProvider, FileProvider, MockProvider, PseudolabelSet};
use capforge::config::{PipelineConfig, ThresholdRule};
use capforge::dataset::EmbeddingDataset;
use capforge::eval::{evaluate, EvalReport};
use capforge::margin::MarginState;
use capforge::mismatch::{detect_mismatch, MismatchReport};
use capforge::model::{load_checkpoint, save_checkpoint};
use capforge::pipeline::{align, detect_params, pseudolabel_classes};
use capforge::synth::{generate, write_synth, SynthSpec};
use capforge::train::{metric_log_jsonl, refresh_margin, run_training, FeatureCache, Paradigm, TrainState};
use capforge::{rng, Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(name = "capforge", version, about = "Pseudolabeling with concept alignment and calibrated margins over precomputed embeddings")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted mismatch and confusion.
    Synth(SynthArgs),
    /// Detect concept-mismatched classes.
    Detect(DetectArgs),
    /// Build the initial pseudolabel set.
    Pseudolabel(PseudolabelArgs),
    /// Fine-tune the adapters on a pseudolabel set.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
}

/// Pipeline settings shared by every command except `synth`. Precedence:
/// flag (or `CAPFORGE_*` variable), then config file, then built-in default.
#[derive(Debug, Clone, Default, Args)]
struct ConfigArgs {
    /// TOML file with pipeline settings.
    #[arg(long, env = "CAPFORGE_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed; every random stream derives from it.
    #[arg(long, env = "CAPFORGE_SEED")]
    seed: Option<u64>,
    /// Learning paradigm: ul, ssl or trzsl.
    #[arg(long, env = "CAPFORGE_PARADIGM")]
    paradigm: Option<Paradigm>,
    #[arg(long, env = "CAPFORGE_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "CAPFORGE_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "CAPFORGE_LR")]
    lr: Option<f64>,
    #[arg(long, env = "CAPFORGE_MOMENTUM")]
    momentum: Option<f64>,
    #[arg(long, env = "CAPFORGE_WEIGHT_DECAY")]
    weight_decay: Option<f64>,
    /// Confidence threshold for dynamic pseudolabels and margin tendency.
    #[arg(long, env = "CAPFORGE_TAU")]
    tau: Option<f64>,
    /// Base margin scale m; 0 disables the margin.
    #[arg(long, env = "CAPFORGE_MARGIN_SCALE")]
    margin_scale: Option<f64>,
    /// Epochs between pseudolabel-set growth events; 0 disables growth.
    #[arg(long, env = "CAPFORGE_GROWTH_EVERY")]
    growth_every: Option<usize>,
    /// Logit temperature.
    #[arg(long, env = "CAPFORGE_GAMMA")]
    gamma: Option<f64>,
    /// Noise for augmented views when the dataset has none.
    #[arg(long, env = "CAPFORGE_AUG_NOISE_STD")]
    aug_noise_std: Option<f64>,
    /// Mismatch threshold: `auto` for ceil(C/10), or a class count.
    #[arg(long = "t", env = "CAPFORGE_T")]
    t: Option<ThresholdRule>,
    /// Candidate descriptions per mismatched class.
    #[arg(long, env = "CAPFORGE_N_DESCRIPTIONS")]
    n_descriptions: Option<usize>,
    /// Initial pseudolabels per class.
    #[arg(long, env = "CAPFORGE_K")]
    k: Option<usize>,
    /// Similarity threshold for confused-group discovery.
    #[arg(long, env = "CAPFORGE_THETA_G")]
    theta_g: Option<f64>,
    #[arg(long, env = "CAPFORGE_ECE_BINS")]
    ece_bins: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    paradigm: Option<Paradigm>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    tau: Option<f64>,
    margin_scale: Option<f64>,
    growth_every: Option<usize>,
    gamma: Option<f64>,
    aug_noise_std: Option<f64>,
    t: Option<ThresholdRule>,
    n_descriptions: Option<usize>,
    k: Option<usize>,
    theta_g: Option<f64>,
    ece_bins: Option<usize>,
}

macro_rules! overlay {
    ($cfg:expr, $src:expr) => {{
        let (cfg, src) = (&mut $cfg, &$src);
        if let Some(v) = src.seed { cfg.train.seed = v; }
        if let Some(v) = src.paradigm { cfg.train.paradigm = v; }
        if let Some(v) = src.epochs { cfg.train.epochs = v; }
        if let Some(v) = src.batch_size { cfg.train.batch_size = v; }
        if let Some(v) = src.lr { cfg.train.lr = v; }
        if let Some(v) = src.momentum { cfg.train.momentum = v; }
        if let Some(v) = src.weight_decay { cfg.train.weight_decay = v; }
        if let Some(v) = src.tau { cfg.train.tau = v; }
        if let Some(v) = src.margin_scale { cfg.train.margin_scale = v; }
        if let Some(v) = src.growth_every { cfg.train.growth_every = v; }
        if let Some(v) = src.gamma { cfg.train.gamma = v; }
        if let Some(v) = src.aug_noise_std { cfg.train.aug_noise_std = v; }
        if let Some(v) = src.t { cfg.t = v; }
        if let Some(v) = src.n_descriptions { cfg.n_descriptions = v; }
        if let Some(v) = src.k { cfg.k = v; }
        if let Some(v) = src.theta_g { cfg.theta_g = v; }
        if let Some(v) = src.ece_bins { cfg.ece_bins = v; }
    }};
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: ConfigFile = toml::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))?;
            overlay!(cfg, file);
        }
        overlay!(cfg, self);
        validate_config(&cfg)?;
        Ok(cfg)
    }
}

fn validate_config(cfg: &PipelineConfig) -> Result<()> {
    let t = &cfg.train;
    let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
    if t.epochs > 0 && t.batch_size == 0 {
        return bad("batch size must be positive");
    }
    if !(t.lr >= 0.0 && t.lr.is_finite()) {
        return bad("learning rate must be a non-negative number");
    }
    if !(0.0..=1.0).contains(&t.tau) {
        return bad("tau must lie in [0, 1]");
    }
    if !(t.margin_scale >= 0.0 && t.margin_scale.is_finite()) {
        return bad("margin scale must be a non-negative number");
    }
    if !(t.gamma > 0.0 && t.gamma.is_finite()) {
        return bad("gamma must be positive");
    }
    if cfg.k == 0 || cfg.n_descriptions == 0 || cfg.ece_bins == 0 {
        return bad("k, n-descriptions and ece-bins must be positive");
    }
    Ok(())
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "CAPFORGE_SEED", default_value_t = SynthSpec::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SynthSpec::default().n_classes)]
    classes: usize,
    #[arg(long, default_value_t = SynthSpec::default().per_class)]
    per_class: usize,
    #[arg(long, default_value_t = SynthSpec::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = SynthSpec::default().intra_class_std)]
    intra_class_std: f64,
    /// Classes whose text feature is replaced by an unrelated direction.
    #[arg(long, default_value_t = SynthSpec::default().n_mismatch)]
    mismatch: usize,
    #[arg(long, default_value_t = SynthSpec::default().mismatch_decoy_cos)]
    decoy_cos: f64,
    /// Number of confused class pairs.
    #[arg(long, default_value_t = SynthSpec::default().n_confusion)]
    confusion: usize,
    #[arg(long, default_value_t = SynthSpec::default().confusion_bias)]
    confusion_bias: f64,
    #[arg(long, default_value_t = SynthSpec::default().confusion_cos)]
    confusion_cos: f64,
    #[arg(long, default_value_t = SynthSpec::default().max_center_cos)]
    max_center_cos: f64,
    #[arg(long, default_value_t = SynthSpec::default().aug_noise_std)]
    aug_noise_std: f64,
    #[arg(long, default_value_t = SynthSpec::default().description_noise_std)]
    description_noise_std: f64,
    #[arg(long, default_value_t = SynthSpec::default().n_descriptions)]
    n_descriptions: usize,
    #[arg(long, default_value_t = SynthSpec::default().test_fraction)]
    test_fraction: f64,
    /// Split layout: ul, ssl or trzsl.
    #[arg(long, default_value = "ul")]
    paradigm: Paradigm,
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct PseudolabelArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output of `detect`; detection reruns when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Descriptions file: JSON array of {class_name, text, embedding}.
    #[arg(long, conflicts_with = "mock_descriptions")]
    descriptions: Option<PathBuf>,
    /// Use seeded random description embeddings (for plumbing tests only).
    #[arg(long)]
    mock_descriptions: bool,
    /// Pseudolabel file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output of `pseudolabel`.
    #[arg(long)]
    pseudolabels: PathBuf,
    /// Directory for the checkpoint, metric log and margin dump.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for eval.json and CSV files.
    #[arg(long)]
    out: PathBuf,
    /// Confused groups as `0,1;2,3`; discovered from similarity when omitted.
    #[arg(long)]
    groups: Option<String>,
    /// Pseudolabel file; when given, the margin state is dumped to margin.json.
    #[arg(long)]
    pseudolabels: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, contents),
        None => std::io::stdout()
            .write_all(contents.as_bytes())
            .map_err(|e| Error::io(Path::new("<stdout>"), e)),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads `key` from a wrapped artifact, or the whole file when unwrapped.
fn read_artifact<T: for<'de> Deserialize<'de>>(path: &Path, key: &str) -> Result<T> {
    let mut v = read_json(path)?;
    let inner = v.get_mut(key).map(Value::take).unwrap_or(v);
    serde_json::from_value(inner).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn names(ds: &EmbeddingDataset, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&c| ds.class_names[c].clone()).collect()
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_classes: a.classes,
        per_class: a.per_class,
        dim: a.dim,
        intra_class_std: a.intra_class_std,
        n_mismatch: a.mismatch,
        mismatch_decoy_cos: a.decoy_cos,
        n_confusion: a.confusion,
        confusion_bias: a.confusion_bias,
        confusion_cos: a.confusion_cos,
        max_center_cos: a.max_center_cos,
        aug_noise_std: a.aug_noise_std,
        description_noise_std: a.description_noise_std,
        n_descriptions: a.n_descriptions,
        test_fraction: a.test_fraction,
        paradigm: a.paradigm,
        seed: a.seed,
    };
    let out = generate(&spec)?;
    write_synth(&out, &a.out)?;
    log::info!(
        "wrote {} samples, {} classes to {}",
        out.dataset.n_samples(),
        out.dataset.n_classes(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DetectOutput<'a> {
    config: &'a PipelineConfig,
    y_final_names: Vec<String>,
    y_low_t_names: Vec<String>,
    y_mm_names: Vec<String>,
    report: &'a MismatchReport,
}

fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let ds = EmbeddingDataset::load(&a.data)?;
    let report = detect_mismatch(&ds, &detect_params(&ds, &cfg))?;
    log::info!("t = {}, mismatched: {:?}", report.t, names(&ds, &report.y_mm));
    let out = DetectOutput {
        config: &cfg,
        y_final_names: names(&ds, &report.y_final),
        y_low_t_names: names(&ds, &report.y_low_t),
        y_mm_names: names(&ds, &report.y_mm),
        report: &report,
    };
    emit(a.out.as_deref(), &to_json(&out))
}

/// Provider used when no descriptions were supplied.
struct NoProvider;

impl DescriptionProvider for NoProvider {
    fn fetch(&self, _: usize, class_name: &str, _: usize) -> Result<Vec<DescriptionCandidate>> {
        Err(Error::ProviderUnavailable(format!(
            "class '{class_name}' needs descriptions; pass --descriptions or --mock-descriptions"
        )))
    }
}

#[derive(Serialize)]
struct EnhancedRecord {
    class_id: usize,
    class_name: String,
    text: String,
}

#[derive(Serialize)]
struct PseudolabelOutput<'a> {
    config: &'a PipelineConfig,
    y_mm: Vec<usize>,
    enhanced: Vec<EnhancedRecord>,
    accuracy: Option<f64>,
    pseudolabels: &'a PseudolabelSet,
}

fn cmd_pseudolabel(a: &PseudolabelArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let ds = EmbeddingDataset::load(&a.data)?;
    let report: MismatchReport = match &a.report {
        Some(p) => read_artifact(p, "report")?,
        None => detect_mismatch(&ds, &detect_params(&ds, &cfg))?,
    };
    if report.y_mm.iter().any(|&c| c >= ds.n_classes()) {
        return Err(Error::InvalidArgument("report does not match the dataset".into()));
    }
    let provider: Box<dyn DescriptionProvider> = match (&a.descriptions, a.mock_descriptions) {
        (Some(p), _) => Box::new(FileProvider::open(p)?),
        (None, true) => Box::new(MockProvider {
            dim: ds.dim(),
            seed: rng::derive_seed(cfg.train.seed, "mock-provider", 0),
        }),
        (None, false) => Box::new(NoProvider),
    };
    let aligned = align(&ds, &report, provider.as_ref(), &cfg)?;
    let out = PseudolabelOutput {
        config: &cfg,
        y_mm: aligned.enhanced.keys().copied().collect(),
        enhanced: aligned
            .enhanced
            .values()
            .map(|d| EnhancedRecord {
                class_id: d.class_id,
                class_name: ds.class_names[d.class_id].clone(),
                text: d.text.clone(),
            })
            .collect(),
        accuracy: aligned.pseudolabels.accuracy(&ds.labels),
        pseudolabels: &aligned.pseudolabels,
    };
    log::info!("{} pseudolabels, accuracy {:?}", aligned.pseudolabels.len(), out.accuracy);
    emit(a.out.as_deref(), &to_json(&out))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a PipelineConfig,
    final_epoch: Option<&'a capforge::train::EpochRecord>,
    pl_size: usize,
    ul_size: usize,
}

#[derive(Serialize)]
struct MarginDump<'a> {
    config: &'a PipelineConfig,
    margin: &'a MarginState,
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let ds = EmbeddingDataset::load(&a.data)?;
    let pl: PseudolabelSet = read_artifact(&a.pseudolabels, "pseudolabels")?;
    if pl.records.iter().any(|r| r.sample_id >= ds.n_samples() || r.class_id >= ds.n_classes()) {
        return Err(Error::InvalidArgument("pseudolabels do not match the dataset".into()));
    }
    let classes = pseudolabel_classes(&ds, cfg.train.paradigm);
    let outcome = run_training(&ds, pl, classes, &cfg.train)?;
    save_checkpoint(&outcome.model, &a.out)?;
    write_file(&a.out.join("metrics.jsonl"), &metric_log_jsonl(&outcome.log))?;
    write_file(&a.out.join("config.json"), &to_json(&cfg))?;
    if let Some(margin) = &outcome.margin {
        write_file(&a.out.join("margin.json"), &to_json(&MarginDump { config: &cfg, margin }))?;
    }
    let summary = TrainSummary {
        config: &cfg,
        final_epoch: outcome.log.last(),
        pl_size: outcome.pl.len(),
        ul_size: outcome.ul.len(),
    };
    write_file(&a.out.join("summary.json"), &to_json(&summary))?;
    if let Some(last) = outcome.log.last() {
        log::info!("epoch {}: test accuracy {:?}", last.epoch, last.test_accuracy);
    }
    Ok(())
}

fn parse_groups(s: &str, n_classes: usize) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .filter(|g| !g.trim().is_empty())
        .map(|g| {
            let ids = g
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&c| c < n_classes)
                        .ok_or_else(|| Error::InvalidArgument(format!("bad class id '{c}' in --groups")))
                })
                .collect::<Result<Vec<usize>>>()?;
            Ok(ids)
        })
        .collect()
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config: &'a PipelineConfig,
    report: &'a EvalReport,
}

fn per_class_csv(ds: &EmbeddingDataset, r: &EvalReport) -> String {
    let mut s = String::from("class_id,class_name,accuracy,pred_count,cluster_concentration\n");
    for c in 0..ds.n_classes() {
        let acc = r.accuracy.per_class_acc[c].map(|a| a.to_string()).unwrap_or_default();
        s += &format!(
            "{c},{},{acc},{},{}\n",
            ds.class_names[c], r.accuracy.pred_counts[c], r.cluster_concentration[c]
        );
    }
    s
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let ds = EmbeddingDataset::load(&a.data)?;
    let model = load_checkpoint(&a.checkpoint)?;
    if model.dim() != ds.dim() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint dimension {} does not match dataset dimension {}",
            model.dim(),
            ds.dim()
        )));
    }
    let groups = a.groups.as_deref().map(|g| parse_groups(g, ds.n_classes())).transpose()?;
    let report = evaluate(
        &model,
        &ds,
        groups,
        cfg.theta_g,
        cfg.ece_bins,
        rng::derive_seed(cfg.train.seed, "eval", 0),
    )?;
    write_file(&a.out.join("eval.json"), &to_json(&EvalOutput { config: &cfg, report: &report }))?;
    write_file(&a.out.join("per_class.csv"), &per_class_csv(&ds, &report))?;
    for (i, g) in report.confused_groups.iter().enumerate() {
        write_file(&a.out.join(format!("confidence_group{i}.csv")), &g.histogram.to_csv())?;
    }
    if let Some(p) = &a.pseudolabels {
        let pl: PseudolabelSet = read_artifact(p, "pseudolabels")?;
        let classes = pseudolabel_classes(&ds, cfg.train.paradigm);
        let state = TrainState::new(&ds, pl, cfg.train.paradigm, classes)?;
        let margin = refresh_margin(&model, &ds, &FeatureCache::new(&ds), &state, &cfg.train)?;
        write_file(&a.out.join("margin.json"), &to_json(&MarginDump { config: &cfg, margin: &margin }))?;
    }
    log::info!("accuracy {:.4}", report.accuracy.overall_acc);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Pseudolabel(a) => cmd_pseudolabel(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
