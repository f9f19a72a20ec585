//! Experiment orchestration: configuration files, the four methods under
//! comparison, per-epoch bookkeeping, artifact output, and the overlap
//! sweeps.
//!
//! A run produces a [`RunReport`] and, when an output directory is given,
//! a `report.json`, a `trend.csv` of per-epoch accuracy and losses, the
//! message transcript, and reloadable checkpoints of every network. Every
//! federated run is audited against its own transcript before it is
//! allowed to report success.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_csv, split_indices, DomainDataset, EvalLabels, SyntheticConfig,
};
use crate::error::{FedError, Result};
use crate::losses::{KernelConfig, RandomMap, RANDOM_MAP_DIM};
use crate::models::{
    derive_seed, forward_inference, load_checkpoint, lr_schedule, save_checkpoint, MlpParams,
    NetConfig,
};
use crate::protocol::{
    pretrain_source, privacy_audit, train_inproc, train_tcp, AuditContext, AuditReport,
    Transcript, TrainHyper, TrainOutcome, TrainSetup,
};
use crate::tensor::Tensor;

// ── methods ─────────────────────────────────────────────────────────────

/// What trains and how the target is classified.
///
/// * `Fedled`: the full federated run, adversarial and alignment terms on.
/// * `Baseline`: supervised training on the source only; target rows are
///   mapped into the source feature space by column name, missing columns
///   zero-filled.
/// * `Abl1AlignOnly`: federated, alignment term only (`lambda = 0`).
/// * `Abl2AdversarialOnly`: federated, adversarial term only (`beta = 0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedled,
    Baseline,
    Abl1AlignOnly,
    Abl2AdversarialOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Fedled,
        Method::Baseline,
        Method::Abl1AlignOnly,
        Method::Abl2AdversarialOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fedled => "fedled",
            Method::Baseline => "baseline",
            Method::Abl1AlignOnly => "abl1_align_only",
            Method::Abl2AdversarialOnly => "abl2_adversarial_only",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                FedError::Config(format!(
                    "unknown method {s:?}; expected one of fedled, baseline, \
                     abl1_align_only, abl2_adversarial_only"
                ))
            })
    }

    fn is_federated(self) -> bool {
        self != Method::Baseline
    }
}

// ── configuration ───────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperConfig {
    pub lambda: f64,
    pub beta: f64,
    pub lr0: f64,
    pub batch: usize,
    pub epochs: usize,
    pub pre_epochs: usize,
    pub pre_lr: f64,
    pub kernel: KernelConfig,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            lambda: 1.0,
            beta: 0.5,
            lr0: 0.01,
            batch: 64,
            epochs: 100,
            pre_epochs: 10,
            pre_lr: 0.001,
            kernel: KernelConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Generator settings, used when `kind = "synthetic"`.
    pub synthetic: SyntheticConfig,
    /// Labeled source table, used when `kind = "csv"`.
    pub source_csv: Option<PathBuf>,
    /// Target table, used when `kind = "csv"`. Must carry a label column;
    /// the labels are stripped on load and kept only for evaluation.
    pub target_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            synthetic: SyntheticConfig::default(),
            source_csv: None,
            target_csv: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub net: NetConfig,
    pub hyper: HyperConfig,
    pub seed: u64,
    /// Fraction of target rows held out for evaluation.
    pub test_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            net: NetConfig::default(),
            hyper: HyperConfig::default(),
            seed: 42,
            test_fraction: 0.25,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(0.0 < self.test_fraction && self.test_fraction < 1.0) {
            return Err(FedError::Config(format!(
                "test_fraction {} must lie strictly between 0 and 1",
                self.test_fraction
            )));
        }
        if self.hyper.epochs == 0 || self.hyper.batch == 0 {
            return Err(FedError::Config("epochs and batch must be positive".into()));
        }
        if self.hyper.lambda < 0.0 || self.hyper.beta < 0.0 {
            return Err(FedError::Config("lambda and beta must be non-negative".into()));
        }
        match self.data.kind {
            DataKind::Synthetic => self.data.synthetic.validate(),
            DataKind::Csv => {
                if self.data.source_csv.is_none() || self.data.target_csv.is_none() {
                    return Err(FedError::Config(
                        "csv data needs both source_csv and target_csv".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Read a config from TOML or JSON, chosen by file extension. Fields left
/// out fall back to their defaults, so `{}` is a complete config.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let cfg: ExperimentConfig = match ext {
        "toml" => toml::from_str(&text)
            .map_err(|e| FedError::Config(format!("{}: {e}", path.display())))?,
        "json" => serde_json::from_str(&text)
            .map_err(|e| FedError::Config(format!("{}: {e}", path.display())))?,
        other => {
            return Err(FedError::Config(format!(
                "config must be .toml or .json, got {other:?}"
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

// ── data preparation ────────────────────────────────────────────────────

/// The harness's view of one experiment's data: training sets for both
/// parties, held-out evaluation features, and the evaluation labels that
/// exist only on this side of the fence.
pub struct PreparedData {
    pub source_train: DomainDataset,
    pub target_train: DomainDataset,
    pub target_eval: Tensor,
    pub eval_labels: EvalLabels,
    /// Full raw tables, kept for the privacy audit's row hashes.
    pub source_raw: DomainDataset,
    pub target_raw: DomainDataset,
}

/// Load or generate the two domains and carve out the target's evaluation
/// split. The target's labels never enter the returned training set.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (source, target, hidden) = match cfg.data.kind {
        DataKind::Synthetic => generate_synthetic(&cfg.data.synthetic)?,
        DataKind::Csv => {
            let src_path = cfg.data.source_csv.as_ref().expect("validated");
            let tgt_path = cfg.data.target_csv.as_ref().expect("validated");
            let source = load_csv(src_path, None)?;
            if source.labels.is_none() {
                return Err(FedError::Data(format!(
                    "{}: source table has no label column",
                    src_path.display()
                )));
            }
            let mut target = load_csv(tgt_path, Some(source.num_classes))?;
            let Some(labels) = target.labels.take() else {
                return Err(FedError::Data(format!(
                    "{}: target table has no label column to evaluate against",
                    tgt_path.display()
                )));
            };
            let hidden = EvalLabels::new(labels);
            (source, target, hidden)
        }
    };

    let (train_idx, test_idx) = split_indices(
        target.len(),
        1.0 - cfg.test_fraction,
        derive_seed(cfg.seed, "split_t"),
    );
    let target_train = target.subset(&train_idx);
    let target_eval = target.subset(&test_idx).features;
    let eval_labels = hidden.subset(&test_idx);

    Ok(PreparedData {
        source_train: source.clone(),
        target_train,
        target_eval,
        eval_labels,
        source_raw: source,
        target_raw: target,
    })
}

/// Initialize the four networks from the master seed, one derived stream
/// per network, so any single network is reproducible in isolation.
///
/// Both extractors draw from the same derived stream, the way a
/// coordinator would broadcast one init seed to every party. When the two
/// feature spaces have equal width the extractors therefore start as the
/// same function, and the domain discriminator faces the true domain gap
/// from round one instead of the incidental gap between two unrelated
/// random networks.
pub fn init_networks(
    net: &NetConfig,
    source_dim: usize,
    target_dim: usize,
    seed: u64,
) -> (MlpParams, MlpParams, MlpParams, MlpParams) {
    use rand::SeedableRng;
    let mk = |tag: &str, dims: &[usize]| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
        MlpParams::init(dims, &mut rng)
    };
    let joint = net.latent_dim * net.num_classes;
    let disc_in = if RandomMap::needed(net.latent_dim, net.num_classes) {
        RANDOM_MAP_DIM
    } else {
        joint
    };
    (
        mk("init_f", &net.extractor_dims(source_dim)),
        mk("init_f", &net.extractor_dims(target_dim)),
        mk("init_c", &net.classifier_dims()),
        mk("init_d3", &net.discriminator_dims(disc_in)),
    )
}

// ── evaluation helpers ──────────────────────────────────────────────────

pub fn accuracy_percent(preds: &[u32], labels: &[u32]) -> f64 {
    assert_eq!(preds.len(), labels.len(), "contract error: length mismatch");
    assert!(!preds.is_empty(), "contract error: empty evaluation");
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / preds.len() as f64
}

/// Counts indexed `[true_class][predicted_class]`.
pub fn confusion_matrix(preds: &[u32], labels: &[u32], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l as usize][p as usize] += 1;
    }
    m
}

fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut preds = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row(i);
        let mut best = 0usize;
        for k in 1..c {
            if row[k] > row[best] {
                best = k;
            }
        }
        preds.push(best as u32);
    }
    preds
}

/// Rearrange target columns into the source's column layout by matching
/// feature names; source columns with no match stay zero. Returns the
/// mapped features and the fraction of source columns left unfilled.
pub fn map_by_names(target: &DomainDataset, source_names: &[String]) -> (Tensor, f64) {
    let n = target.len();
    let d_s = source_names.len();
    let mut out = vec![0.0; n * d_s];
    let mut filled = vec![false; d_s];
    for (j_t, name) in target.feature_names.iter().enumerate() {
        if let Some(j_s) = source_names.iter().position(|s| s == name) {
            for i in 0..n {
                out[i * d_s + j_s] = target.features.row(i)[j_t];
            }
            filled[j_s] = true;
        }
    }
    let unfilled = filled.iter().filter(|f| !**f).count();
    (
        Tensor::new([n, d_s], out),
        unfilled as f64 / d_s as f64,
    )
}

// ── reports ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Component values at the epoch's final round.
    pub l_cls: f64,
    pub l_cdan: f64,
    pub l_align: f64,
    pub total: f64,
    /// Mean of the total over all of the epoch's rounds.
    pub mean_total: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub epoch_accuracy: Vec<f64>,
    pub epoch_loss: Vec<EpochLoss>,
    pub confusion: Vec<Vec<usize>>,
    /// Baseline only: fraction of source columns the name mapping could
    /// not fill.
    pub zero_fill_fraction: Option<f64>,
    pub transcript_hash: Option<String>,
    pub audit: Option<AuditReport>,
    /// Wall-clock time; excluded from any determinism comparison.
    pub wall_seconds: f64,
}

/// How the parties talk during a federated run.
#[derive(Clone, Debug, Default)]
pub enum TransportChoice {
    #[default]
    InProc,
    Tcp {
        listen: String,
        source_dial: Option<String>,
        target_dial: Option<String>,
    },
}

fn write_artifacts(
    out_dir: &Path,
    report: &RunReport,
    transcript: Option<&Transcript>,
    checkpoints: &[(&str, &MlpParams)],
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| FedError::io(out_dir, e))?;
    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&report_path, json).map_err(|e| FedError::io(&report_path, e))?;

    let trend_path = out_dir.join("trend.csv");
    let mut trend = String::from("epoch,accuracy,l_cls,l_cdan,l_align,total,mean_total\n");
    for (acc, el) in report.epoch_accuracy.iter().zip(&report.epoch_loss) {
        trend.push_str(&format!(
            "{},{:.6},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            el.epoch, acc, el.l_cls, el.l_cdan, el.l_align, el.total, el.mean_total
        ));
    }
    std::fs::write(&trend_path, trend).map_err(|e| FedError::io(&trend_path, e))?;

    if let Some(t) = transcript {
        t.write_jsonl(&out_dir.join("transcript.jsonl"))?;
    }
    for (name, params) in checkpoints {
        save_checkpoint(&out_dir.join(format!("{name}.ckpt")), params)?;
    }
    Ok(())
}

// ── the four methods ────────────────────────────────────────────────────

fn epoch_losses_from_rounds(
    breakdowns: &[crate::losses::LossBreakdown],
    rounds_per_epoch: usize,
) -> Vec<EpochLoss> {
    breakdowns
        .chunks(rounds_per_epoch)
        .enumerate()
        .map(|(e, chunk)| {
            let last = chunk.last().expect("non-empty epoch");
            EpochLoss {
                epoch: e + 1,
                l_cls: last.l_cls,
                l_cdan: last.l_cdan,
                l_align: last.l_align,
                total: last.total,
                mean_total: chunk.iter().map(|b| b.total).sum::<f64>() / chunk.len() as f64,
            }
        })
        .collect()
}

fn run_federated(
    cfg: &ExperimentConfig,
    method: Method,
    transport: &TransportChoice,
    out_dir: Option<&Path>,
    started: Instant,
) -> Result<RunReport> {
    let data = prepare_data(cfg)?;
    let d_s = data.source_train.dim();
    let d_t = data.target_train.dim();
    let (mut fs, ft, mut cls, disc) = init_networks(&cfg.net, d_s, d_t, cfg.seed);

    pretrain_source(
        &mut fs,
        &mut cls,
        &data.source_train,
        cfg.hyper.pre_epochs,
        cfg.hyper.batch,
        cfg.hyper.pre_lr,
        derive_seed(cfg.seed, "pretrain"),
    )?;

    let (lambda, beta) = match method {
        Method::Fedled => (cfg.hyper.lambda, cfg.hyper.beta),
        Method::Abl1AlignOnly => (0.0, cfg.hyper.beta),
        Method::Abl2AdversarialOnly => (cfg.hyper.lambda, 0.0),
        Method::Baseline => unreachable!("baseline is not federated"),
    };
    let rml = if RandomMap::needed(cfg.net.latent_dim, cfg.net.num_classes) {
        Some(RandomMap::new(
            cfg.net.latent_dim,
            cfg.net.num_classes,
            RANDOM_MAP_DIM,
            derive_seed(cfg.seed, "rml"),
        ))
    } else {
        None
    };

    let setup = TrainSetup {
        source_extractor: fs,
        target_extractor: ft,
        classifier: cls,
        discriminator: disc,
        rml,
        source_data: data.source_train.clone(),
        target_data: data.target_train.clone(),
        target_eval: data.target_eval.clone(),
        hyper: TrainHyper {
            lambda,
            beta,
            lr0: cfg.hyper.lr0,
            batch: cfg.hyper.batch,
            epochs: cfg.hyper.epochs,
            kernel: cfg.hyper.kernel.clone(),
        },
        seed: cfg.seed,
    };

    let mut transcript = Transcript::new();
    let outcome: TrainOutcome = match transport {
        TransportChoice::InProc => train_inproc(setup, &mut transcript)?,
        TransportChoice::Tcp { listen, source_dial, target_dial } => train_tcp(
            setup,
            listen,
            source_dial.as_deref(),
            target_dial.as_deref(),
            &mut transcript,
        )?,
    };

    let labels = data.eval_labels.get();
    let epoch_accuracy: Vec<f64> = outcome
        .epoch_predictions
        .iter()
        .map(|p| accuracy_percent(p, labels))
        .collect();
    let final_preds = outcome.epoch_predictions.last().expect("at least one epoch");
    let final_accuracy = *epoch_accuracy.last().expect("at least one epoch");
    let best_accuracy = epoch_accuracy.iter().cloned().fold(f64::MIN, f64::max);

    let ctx = AuditContext::from_datasets(
        cfg.net.latent_dim,
        &[&data.source_raw, &data.target_raw],
    );
    let audit = privacy_audit(&transcript, Some(&ctx));
    let audit_passed = audit.passed;
    let violation_count = audit.violations.len();

    let report = RunReport {
        method,
        seed: cfg.seed,
        epochs: cfg.hyper.epochs,
        final_accuracy,
        best_accuracy,
        epoch_accuracy,
        epoch_loss: epoch_losses_from_rounds(&outcome.round_breakdowns, outcome.rounds_per_epoch),
        confusion: confusion_matrix(final_preds, labels, cfg.net.num_classes),
        zero_fill_fraction: None,
        transcript_hash: Some(transcript.hash()),
        audit: Some(audit),
        wall_seconds: started.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out_dir {
        write_artifacts(
            dir,
            &report,
            Some(&transcript),
            &[
                ("source_extractor", &outcome.source_extractor),
                ("target_extractor", &outcome.target_extractor),
                ("classifier", &outcome.classifier),
                ("discriminator", &outcome.discriminator),
            ],
        )?;
        // reload and re-predict: the stored networks must reproduce the
        // reported predictions exactly
        let ext = load_checkpoint(&dir.join("target_extractor.ckpt"))?;
        let c = load_checkpoint(&dir.join("classifier.ckpt"))?;
        let latent = forward_inference(&ext, &data.target_eval);
        let logits = forward_inference(&c, &latent);
        let reloaded = argmax_rows(&logits);
        assert_eq!(
            &reloaded, final_preds,
            "contract error: reloaded checkpoint disagrees with the run"
        );
        let reloaded_acc = accuracy_percent(&reloaded, labels);
        assert!(
            (reloaded_acc - final_accuracy).abs() <= 1e-12,
            "contract error: reloaded accuracy drifted"
        );
    }

    if !audit_passed {
        return Err(FedError::Audit(format!(
            "transcript failed the privacy audit with {violation_count} violation(s)"
        )));
    }
    Ok(report)
}

fn run_baseline(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    started: Instant,
) -> Result<RunReport> {
    let data = prepare_data(cfg)?;
    let d_s = data.source_train.dim();
    let (mut fs, _, mut cls, _) = init_networks(&cfg.net, d_s, data.target_train.dim(), cfg.seed);

    let (mapped_eval, zero_fill) = map_by_names(
        &DomainDataset {
            features: data.target_eval.clone(),
            labels: None,
            feature_names: data.target_train.feature_names.clone(),
            num_classes: data.target_train.num_classes,
        },
        &data.source_train.feature_names,
    );
    let labels = data.eval_labels.get();

    // same warmup as the federated methods, then supervised epochs at the
    // annealed main learning rate with an evaluation after each
    pretrain_source(
        &mut fs,
        &mut cls,
        &data.source_train,
        cfg.hyper.pre_epochs,
        cfg.hyper.batch,
        cfg.hyper.pre_lr,
        derive_seed(cfg.seed, "pretrain"),
    )?;

    let mut epoch_accuracy = Vec::with_capacity(cfg.hyper.epochs);
    let mut epoch_loss = Vec::with_capacity(cfg.hyper.epochs);
    let mut final_preds = Vec::new();
    for e in 0..cfg.hyper.epochs {
        let p = (e + 1) as f64 / cfg.hyper.epochs as f64;
        let losses = pretrain_source(
            &mut fs,
            &mut cls,
            &data.source_train,
            1,
            cfg.hyper.batch,
            lr_schedule(cfg.hyper.lr0, p),
            derive_seed(cfg.seed, &format!("baseline_epoch{e}")),
        )?;
        let latent = forward_inference(&fs, &mapped_eval);
        let logits = forward_inference(&cls, &latent);
        final_preds = argmax_rows(&logits);
        epoch_accuracy.push(accuracy_percent(&final_preds, labels));
        epoch_loss.push(EpochLoss {
            epoch: e + 1,
            l_cls: losses[0],
            l_cdan: 0.0,
            l_align: 0.0,
            total: losses[0],
            mean_total: losses[0],
        });
    }

    let final_accuracy = *epoch_accuracy.last().expect("at least one epoch");
    let best_accuracy = epoch_accuracy.iter().cloned().fold(f64::MIN, f64::max);
    let report = RunReport {
        method: Method::Baseline,
        seed: cfg.seed,
        epochs: cfg.hyper.epochs,
        final_accuracy,
        best_accuracy,
        epoch_accuracy,
        epoch_loss,
        confusion: confusion_matrix(&final_preds, labels, cfg.net.num_classes),
        zero_fill_fraction: Some(zero_fill),
        transcript_hash: None,
        audit: None,
        wall_seconds: started.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out_dir {
        write_artifacts(
            dir,
            &report,
            None,
            &[("source_extractor", &fs), ("classifier", &cls)],
        )?;
        let ext = load_checkpoint(&dir.join("source_extractor.ckpt"))?;
        let c = load_checkpoint(&dir.join("classifier.ckpt"))?;
        let latent = forward_inference(&ext, &mapped_eval);
        let reloaded = argmax_rows(&forward_inference(&c, &latent));
        assert_eq!(
            &reloaded, &final_preds,
            "contract error: reloaded checkpoint disagrees with the run"
        );
    }
    Ok(report)
}

/// Run one method once. Federated methods are audited against their own
/// transcript; a failed audit is an error, not a report.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    method: Method,
    transport: &TransportChoice,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    if method.is_federated() {
        run_federated(cfg, method, transport, out_dir, started)
    } else {
        run_baseline(cfg, out_dir, started)
    }
}

// ── sweeps ──────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    FeatureOverlap,
    SampleOverlap,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::FeatureOverlap => "feature_overlap",
            SweepAxis::SampleOverlap => "sample_overlap",
        }
    }

    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "feature_overlap" => Ok(SweepAxis::FeatureOverlap),
            "sample_overlap" => Ok(SweepAxis::SampleOverlap),
            other => Err(FedError::Config(format!(
                "unknown sweep axis {other:?}; expected feature_overlap or sample_overlap"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub axis_value: f64,
    pub method: Method,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
}

/// Vary one generator knob and rerun the chosen methods at each value.
/// Feature overlap visits none and full; sample overlap visits a ladder of
/// shared-sample fractions. Only synthetic data can be swept.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    methods: &[Method],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    if cfg.data.kind != DataKind::Synthetic {
        return Err(FedError::Config("sweeps need synthetic data".into()));
    }
    if methods.is_empty() {
        return Err(FedError::Config("sweep needs at least one method".into()));
    }
    let values: Vec<f64> = match axis {
        SweepAxis::FeatureOverlap => {
            let full = cfg
                .data
                .synthetic
                .source_features
                .min(cfg.data.synthetic.target_features);
            vec![0.0, full as f64]
        }
        SweepAxis::SampleOverlap => vec![0.0, 0.2, 0.5, 1.0],
    };

    let mut points = Vec::new();
    for &v in &values {
        let mut point_cfg = cfg.clone();
        match axis {
            SweepAxis::FeatureOverlap => {
                point_cfg.data.synthetic.overlapping_features = v as usize;
            }
            SweepAxis::SampleOverlap => {
                point_cfg.data.synthetic.sample_overlap_ratio = v;
            }
        }
        for &method in methods {
            let report = run_experiment(&point_cfg, method, &TransportChoice::InProc, None)?;
            points.push(SweepPoint {
                axis,
                axis_value: v,
                method,
                final_accuracy: report.final_accuracy,
                best_accuracy: report.best_accuracy,
            });
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
        let mut csv = String::from("axis,axis_value,method,seed,final_accuracy,best_accuracy\n");
        for p in &points {
            csv.push_str(&format!(
                "{},{},{},{},{:.6},{:.6}\n",
                p.axis.name(),
                p.axis_value,
                p.method.name(),
                cfg.seed,
                p.final_accuracy,
                p.best_accuracy
            ));
        }
        let path = dir.join("sweep.csv");
        std::fs::write(&path, csv).map_err(|e| FedError::io(&path, e))?;
        let json_path = dir.join("sweep.json");
        let json = serde_json::to_string_pretty(&points).expect("points serialize");
        std::fs::write(&json_path, json).map_err(|e| FedError::io(&json_path, e))?;
    }
    Ok(points)
}
