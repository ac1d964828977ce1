//! Training loop, per-epoch validation, model selection, test evaluation,
//! lambda sweeps and result tables.
//!
//! A run trains for a fixed number of epochs, snapshots the network after
//! each one, and reports test metrics for one selected epoch. GRAD runs take
//! the epoch with the lowest validation discrimination (ties: highest
//! validation accuracy, then the earliest epoch). The unprotected baseline
//! takes the most accurate epoch by default, see [`SelectionRule`].

pub mod checkpoint;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph};
use crate::data::{DataError, EncodedDataset, Splits};
use crate::grad_model::{
    fit_logistic_head, to_signed, BranchCoupling, GradNetwork, ModelError, NetworkConfig, Variant,
};
use crate::metrics::{self, knn_indices, MetricsError, MetricsReport, Neighbors, PredictionSet};
use crate::nn::{AdamConfig, AdamState, Mode, NnError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, Snapshot};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("training diverged: non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("protected attribute `{0}` is not in the dataset")]
    UnknownProtected(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("snapshot is a {found:?} network but the run is configured for {expected:?}")]
    VariantMismatch { expected: Variant, found: Variant },
    #[error("evaluated snapshot {evaluated} is not the selected epoch's snapshot {recorded}")]
    SnapshotMismatch { evaluated: String, recorded: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub knn_k: usize,
    pub seed: u64,
    /// Attributes that get a reversed branch. Empty gives the plain NN.
    pub protected: Vec<String>,
    pub hidden_width: usize,
    pub layers_per_branch: usize,
    /// Epochs for the logistic head of the Auto variant.
    pub head_epochs: usize,
    pub adam: AdamSettings,
    /// `None` picks by family: discrimination for GRAD, accuracy for NN.
    #[serde(default)]
    pub selection: Option<SelectionRule>,
}

/// How the reported epoch is chosen from the validation history.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    /// Lowest mean discrimination, then highest accuracy.
    Discrimination,
    /// Highest accuracy, then lowest mean discrimination.
    Accuracy,
}

/// Serializable mirror of [`AdamConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let c = AdamConfig::default();
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

impl From<AdamSettings> for AdamConfig {
    fn from(s: AdamSettings) -> Self {
        AdamConfig {
            learning_rate: s.learning_rate,
            beta1: s.beta1,
            beta2: s.beta2,
            epsilon: s.epsilon,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Pred,
            epochs: 50,
            batch_size: 64,
            lambda: NetworkConfig::DEFAULT_LAMBDA,
            knn_k: 5,
            seed: 0,
            protected: Vec::new(),
            hidden_width: NetworkConfig::DEFAULT_HIDDEN_WIDTH,
            layers_per_branch: NetworkConfig::DEFAULT_LAYERS_PER_BRANCH,
            head_epochs: 20,
            adam: AdamSettings::default(),
            selection: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(HarnessError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(HarnessError::Config("batch size must be at least 2".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(HarnessError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.knn_k == 0 {
            return Err(HarnessError::Config("knn_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn selection_rule(&self) -> SelectionRule {
        self.selection.unwrap_or(if self.protected.is_empty() {
            SelectionRule::Accuracy
        } else {
            SelectionRule::Discrimination
        })
    }

    /// NN-Pred, GRAD-Auto, ... as used in result tables.
    pub fn algorithm_name(&self) -> String {
        let family = if self.protected.is_empty() { "NN" } else { "GRAD" };
        let variant = match self.variant {
            Variant::Pred => "Pred",
            Variant::Auto => "Auto",
        };
        format!("{family}-{variant}")
    }

    fn network_config(&self, input_dim: usize) -> NetworkConfig {
        NetworkConfig {
            variant: self.variant,
            input_dim,
            hidden_width: self.hidden_width,
            layers_per_branch: self.layers_per_branch,
            lambda: self.lambda,
            n_protected: self.protected.len(),
        }
    }
}

/// A split with its k-NN graph, which depends only on the features and so
/// is computed once.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub data: EncodedDataset,
    pub neighbors: Neighbors,
}

impl EvalSplit {
    pub fn new(data: EncodedDataset, k: usize) -> Result<Self> {
        let neighbors = knn_indices(&data.features, k)?;
        Ok(Self { data, neighbors })
    }
}

/// Splits ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub dataset: String,
    pub train: EncodedDataset,
    pub val: EvalSplit,
    pub test: EvalSplit,
    pub fractions: (f64, f64, f64),
}

impl Experiment {
    pub fn prepare(dataset: &str, splits: Splits, knn_k: usize) -> Result<Self> {
        Ok(Self {
            dataset: dataset.to_string(),
            val: EvalSplit::new(splits.val, knn_k)?,
            test: EvalSplit::new(splits.test, knn_k)?,
            train: splits.train,
            fractions: splits.fractions,
        })
    }

    pub fn protected_names(&self) -> &[String] {
        &self.train.protected_names
    }

    fn branch_indices(&self, cfg: &TrainConfig) -> Result<Vec<usize>> {
        cfg.protected
            .iter()
            .map(|p| {
                self.train
                    .protected_index(p)
                    .ok_or_else(|| HarnessError::UnknownProtected(p.clone()))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// One entry per audited attribute, in dataset order.
    pub val_discrimination: Vec<f64>,
    /// Mean discrimination over the attributes that drive selection.
    pub selection_discrimination: f64,
    pub val_consistency: f64,
    pub snapshot_hash: String,
}

impl EpochRecord {
    /// A record whose selection score is the mean of `val_discrimination`.
    pub fn new(epoch: usize, val_accuracy: f64, val_discrimination: Vec<f64>) -> Self {
        let selection_discrimination =
            val_discrimination.iter().sum::<f64>() / val_discrimination.len().max(1) as f64;
        Self {
            epoch,
            train_loss: 0.0,
            val_accuracy,
            val_discrimination,
            selection_discrimination,
            val_consistency: 0.0,
            snapshot_hash: String::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub snapshots: Vec<Snapshot>,
}

const SELECTION_TOLERANCE: f64 = 1e-12;

/// Epoch number (1-based) of the best record: lowest selection
/// discrimination, then highest accuracy, then earliest.
///
/// Panics on an empty slice.
pub fn select_model(records: &[EpochRecord]) -> usize {
    let mut best = &records[0];
    for r in &records[1..] {
        let d = r.selection_discrimination - best.selection_discrimination;
        if d < -SELECTION_TOLERANCE || (d.abs() <= SELECTION_TOLERANCE && r.val_accuracy > best.val_accuracy) {
            best = r;
        }
    }
    best.epoch
}

/// Like [`select_model`] with accuracy as the primary key.
pub fn select_by_accuracy(records: &[EpochRecord]) -> usize {
    let mut best = &records[0];
    for r in &records[1..] {
        let d = r.val_accuracy - best.val_accuracy;
        if d > SELECTION_TOLERANCE
            || (d.abs() <= SELECTION_TOLERANCE
                && r.selection_discrimination < best.selection_discrimination - SELECTION_TOLERANCE)
        {
            best = r;
        }
    }
    best.epoch
}

pub fn select_with(rule: SelectionRule, records: &[EpochRecord]) -> usize {
    match rule {
        SelectionRule::Discrimination => select_model(records),
        SelectionRule::Accuracy => select_by_accuracy(records),
    }
}

/// Which attributes drive selection: the branched ones, or every audited
/// attribute for the plain NN.
fn selection_indices(branches: &[usize], audited: usize) -> Vec<usize> {
    if branches.is_empty() {
        (0..audited).collect()
    } else {
        branches.to_vec()
    }
}

/// Thresholded predictions for `target`. Pred reads the target branch; Auto
/// fits a logistic head on trunk representations of `train`.
pub fn predict_labels(
    net: &GradNetwork,
    train: &EncodedDataset,
    target: &EncodedDataset,
    cfg: &TrainConfig,
) -> Result<Vec<u8>> {
    match net.variant() {
        Variant::Pred => Ok(net.predict(&target.features)?.labels),
        Variant::Auto => {
            let reps = net.encode(&train.features)?;
            let head = fit_logistic_head(&reps, &to_signed(&train.target), cfg.seed, cfg.head_epochs)?;
            Ok(head.predict(&net.encode(&target.features)?)?.labels)
        }
    }
}

/// Metrics of `net` on an evaluation split, batch-norm in eval mode.
pub fn evaluate(
    net: &GradNetwork,
    train: &EncodedDataset,
    split: &EvalSplit,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    if net.variant() != cfg.variant {
        return Err(HarnessError::VariantMismatch {
            expected: cfg.variant,
            found: net.variant(),
        });
    }
    let predicted = predict_labels(net, train, &split.data, cfg)?;
    Ok(metrics::metrics_report(&PredictionSet {
        predicted: &predicted,
        truth: &split.data.target,
        groups: &split.data.protected,
        neighbors: &split.neighbors,
    })?)
}

/// Contiguous mini-batches of a shuffled order; a trailing single row is
/// merged into the previous batch since batch-norm needs two rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Trains `net` for `cfg.epochs` epochs and validates after each one.
pub fn train(net: &mut GradNetwork, exp: &Experiment, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let branches = exp.branch_indices(cfg)?;
    if branches.len() != net.attribute_branches.len() {
        return Err(HarnessError::Config(format!(
            "network has {} attribute branches, config protects {}",
            net.attribute_branches.len(),
            branches.len()
        )));
    }
    if net.config.input_dim != exp.train.n_features() {
        return Err(HarnessError::Config(format!(
            "network expects {} features, data has {}",
            net.config.input_dim,
            exp.train.n_features()
        )));
    }
    if exp.train.len() < 2 {
        return Err(HarnessError::Config("need at least two training rows".into()));
    }
    let selection = selection_indices(&branches, exp.val.data.protected.len());

    let train = &exp.train;
    let targets = to_signed(&train.target);
    let attrs: Vec<Vec<f64>> = branches.iter().map(|&j| to_signed(&train.protected[j])).collect();
    let mut adam = AdamState::new(cfg.adam.into());
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let x = train.features.select_rows(idx);
            let y: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            let a: Vec<Vec<f64>> = attrs
                .iter()
                .map(|col| idx.iter().map(|&i| col[i]).collect())
                .collect();
            let mut g = Graph::new();
            let lg = net.forward_loss(&mut g, &x, &y, &a, Mode::Train, BranchCoupling::Reversed)?;
            let loss = g.value(lg.total).item();
            if !loss.is_finite() {
                return Err(HarnessError::Divergence {
                    epoch,
                    batch: b + 1,
                    loss,
                });
            }
            loss_sum += loss * idx.len() as f64;
            rows += idx.len();
            let grads = g.backward(lg.total)?;
            let grad_refs: Vec<_> = lg
                .params
                .iter()
                .map(|&id| grads.get(id).expect("every parameter node has a gradient"))
                .collect();
            adam.step(&mut net.params_mut(), &grad_refs)?;
        }

        let snapshot = Snapshot {
            network: net.clone(),
            seed: cfg.seed,
            epoch,
        };
        let report = evaluate(net, train, &exp.val, cfg)?;
        let selection_discrimination = selection
            .iter()
            .map(|&j| report.discrimination[j])
            .sum::<f64>()
            / selection.len().max(1) as f64;
        log::debug!(
            "epoch {epoch}: loss {:.5} val acc {:.4} val discr {:?}",
            loss_sum / rows as f64,
            report.accuracy,
            report.discrimination
        );
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / rows as f64,
            val_accuracy: report.accuracy,
            val_discrimination: report.discrimination,
            selection_discrimination,
            val_consistency: report.consistency,
            snapshot_hash: snapshot.hash(),
        });
        snapshots.push(snapshot);
    }
    Ok(TrainOutcome { records, snapshots })
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub algorithm: String,
    pub dataset: String,
    pub config: TrainConfig,
    pub selected_epoch: usize,
    pub test: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub protected_names: Vec<String>,
    pub snapshot: Snapshot,
    pub wall_clock_secs: f64,
}

/// Builds, trains, selects and evaluates one configuration.
pub fn run_experiment(exp: &Experiment, cfg: &TrainConfig) -> Result<ExperimentResult> {
    let started = Instant::now();
    cfg.validate()?;
    exp.branch_indices(cfg)?;
    let mut net = GradNetwork::build(cfg.network_config(exp.train.n_features()), cfg.seed)?;
    let outcome = train(&mut net, exp, cfg)?;
    let selected_epoch = select_with(cfg.selection_rule(), &outcome.records);
    let snapshot = outcome.snapshots[selected_epoch - 1].clone();
    let recorded = &outcome.records[selected_epoch - 1].snapshot_hash;
    let evaluated = snapshot.hash();
    if &evaluated != recorded {
        return Err(HarnessError::SnapshotMismatch {
            evaluated,
            recorded: recorded.clone(),
        });
    }
    let test = evaluate(&snapshot.network, &exp.train, &exp.test, cfg)?;
    Ok(ExperimentResult {
        algorithm: cfg.algorithm_name(),
        dataset: exp.dataset.clone(),
        config: cfg.clone(),
        selected_epoch,
        test,
        history: outcome.records,
        protected_names: exp.protected_names().to_vec(),
        snapshot,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Header of the results table for the given audited attributes.
pub fn results_header(protected_names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["algorithm", "dataset", "lambda", "seed", "epoch_selected", "acc", "delta"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(protected_names.iter().map(|p| format!("discr_{p}")));
    h.push("cons".into());
    h
}

impl ExperimentResult {
    pub fn csv_header(&self) -> Vec<String> {
        results_header(&self.protected_names)
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut row = vec![
            self.algorithm.clone(),
            self.dataset.clone(),
            self.config.lambda.to_string(),
            self.config.seed.to_string(),
            self.selected_epoch.to_string(),
            self.test.accuracy.to_string(),
            self.test.delta.to_string(),
        ];
        row.extend(self.test.discrimination.iter().map(|d| d.to_string()));
        row.push(self.test.consistency.to_string());
        row
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub accuracy: f64,
    /// Mean test discrimination over audited attributes.
    pub discrimination: f64,
    pub consistency: f64,
    pub selected_epoch: usize,
    /// Marks the default lambda.
    pub is_default: bool,
}

pub const SWEEP_HEADER: [&str; 6] = ["lambda", "acc", "discr", "cons", "epoch_selected", "default_lambda"];

impl SweepRow {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.lambda.to_string(),
            self.accuracy.to_string(),
            self.discrimination.to_string(),
            self.consistency.to_string(),
            self.selected_epoch.to_string(),
            u8::from(self.is_default).to_string(),
        ]
    }
}

/// One full run per lambda on the same splits and seed. Runs are
/// independent and execute in parallel.
pub fn lambda_sweep(base: &TrainConfig, lambdas: &[f64], exp: &Experiment) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(HarnessError::Config("lambda list is empty".into()));
    }
    lambdas
        .par_iter()
        .map(|&lambda| {
            let cfg = TrainConfig {
                lambda,
                ..base.clone()
            };
            let r = run_experiment(exp, &cfg)?;
            Ok(SweepRow {
                lambda,
                accuracy: r.test.accuracy,
                discrimination: r.test.mean_discrimination(),
                consistency: r.test.consistency,
                selected_epoch: r.selected_epoch,
                is_default: lambda == NetworkConfig::DEFAULT_LAMBDA,
            })
        })
        .collect()
}
