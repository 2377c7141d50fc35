//! Training loop, evaluation, key preparation and ablation runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{KeyInput, RunConfig};
use crate::datasets::{CanonicalDataset, FoldSplit, StudentLog};
use crate::error::{Result, TgmnError};
use crate::kcgraph::{build_bipartite, sample_hop_pairs, NodeType};
use crate::metrics::{accuracy, auc, welch_ttest, Summary, TTest};
use crate::model::{loss, TgmnModel, Training, Variant};
use crate::params::Adam;
use crate::pretrain::{load_keys, pretrain_embeddings, InputMode, KeyEmbeddings, NodeEncoder};
use crate::Real;

/// Metrics over a set of students.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub auc: f64,
    pub accuracy: f64,
    pub interactions: usize,
}

/// One row of the learning-curve file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub auc: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,auc,accuracy\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.split, r.loss, r.auc, r.accuracy);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| TgmnError::io(path, e))
    }

    pub fn split(&self, split: &str) -> impl Iterator<Item = &EpochRecord> {
        let split = split.to_string();
        self.records.iter().filter(move |r| r.split == split)
    }

    /// First epoch whose `split` AUC reaches `target`.
    pub fn epochs_to_auc(&self, split: &str, target: f64) -> Option<usize> {
        self.split(split).find(|r| r.auc >= target).map(|r| r.epoch)
    }
}

pub struct TrainOutput<T: Real> {
    /// Parameters from the epoch with the best validation AUC.
    pub model: TgmnModel<T>,
    pub history: History,
    pub best_epoch: usize,
    pub best_validation: Evaluation,
}

fn logs_for<'a>(dataset: &'a CanonicalDataset, ids: &[u64]) -> Result<Vec<&'a StudentLog>> {
    ids.iter()
        .map(|&id| {
            dataset
                .student(id)
                .ok_or_else(|| TgmnError::Argument(format!("student {id} is not in the dataset")))
        })
        .collect()
}

/// Predicted probabilities and labels for `ids`, pooled in id order.
pub fn predict<T: Real>(
    model: &mut TgmnModel<T>,
    dataset: &CanonicalDataset,
    ids: &[u64],
    batch_size: usize,
) -> Result<Vec<(Vec<f64>, Vec<u8>)>> {
    let logs = logs_for(dataset, ids)?;
    let mut out = Vec::with_capacity(logs.len());
    for chunk in logs.chunks(batch_size.max(1)) {
        let result = model.process_batch(chunk, None)?;
        for (log, probs) in chunk.iter().zip(result.probs) {
            out.push((probs, log.interactions.iter().map(|it| it.answer).collect()));
        }
    }
    Ok(out)
}

fn summarize(per_student: &[(Vec<f64>, Vec<u8>)], macro_average: bool) -> Result<Evaluation> {
    let interactions = per_student.iter().map(|(p, _)| p.len()).sum();
    if !macro_average {
        let scores: Vec<f64> = per_student.iter().flat_map(|(p, _)| p.iter().copied()).collect();
        let labels: Vec<u8> = per_student.iter().flat_map(|(_, l)| l.iter().copied()).collect();
        return Ok(Evaluation {
            loss: loss(&scores, &labels)?,
            auc: auc(&scores, &labels)?,
            accuracy: accuracy(&scores, &labels, 0.5)?,
            interactions,
        });
    }
    // Students with a single label class have no AUC and are skipped.
    let mut aucs = Vec::new();
    let mut accs = Vec::new();
    let mut losses = Vec::new();
    for (p, l) in per_student {
        if let Ok(a) = auc(p, l) {
            aucs.push(a);
        }
        accs.push(accuracy(p, l, 0.5)?);
        losses.push(loss(p, l)?);
    }
    if aucs.is_empty() {
        return Err(TgmnError::UndefinedMetric("no student has both answer classes".into()));
    }
    Ok(Evaluation {
        loss: Summary::of(&losses).mean,
        auc: Summary::of(&aucs).mean,
        accuracy: Summary::of(&accs).mean,
        interactions,
    })
}

/// Metrics of `model` on the students `ids`.
pub fn evaluate<T: Real>(
    model: &mut TgmnModel<T>,
    dataset: &CanonicalDataset,
    ids: &[u64],
    config: &RunConfig,
) -> Result<Evaluation> {
    summarize(&predict(model, dataset, ids, config.batch_size)?, config.macro_metrics)
}

/// Trains a fresh model on `train_ids`, selecting the epoch by AUC on
/// `valid_ids`.
pub fn train_on<T: Real>(
    dataset: &CanonicalDataset,
    keys: &KeyEmbeddings,
    train_ids: &[u64],
    valid_ids: &[u64],
    config: &RunConfig,
    seed: u64,
) -> Result<TrainOutput<T>> {
    config.validate()?;
    let overlap: Vec<u64> = {
        let valid: BTreeSet<u64> = valid_ids.iter().copied().collect();
        train_ids.iter().copied().filter(|id| valid.contains(id)).collect()
    };
    if !overlap.is_empty() {
        return Err(TgmnError::Argument(format!("students {overlap:?} are in both train and validation")));
    }
    let mut model = TgmnModel::<T>::new(keys.clone(), config.model_config(), seed)?;
    model.check_dataset(dataset)?;
    let train_logs = logs_for(dataset, train_ids)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a11);
    let mut order: Vec<usize> = (0..train_logs.len()).collect();
    let mut history = History::default();
    let mut best: Option<(usize, Evaluation, TgmnModel<T>)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&StudentLog> = chunk.iter().map(|&i| train_logs[i]).collect();
            let training = Training {
                adam: &mut adam,
                rng: &mut rng,
            };
            let result = model.process_batch(&batch, Some(training)).map_err(|e| match e {
                TgmnError::NonFiniteLoss { students, .. } => TgmnError::NonFiniteLoss { epoch, students },
                other => other,
            })?;
            loss_sum += result.loss_sum;
            count += result.count;
            for (log, probs) in batch.iter().zip(result.probs) {
                scores.extend(probs);
                labels.extend(log.interactions.iter().map(|it| it.answer));
            }
        }
        history.records.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / count.max(1) as f64,
            auc: auc(&scores, &labels).unwrap_or(f64::NAN),
            accuracy: accuracy(&scores, &labels, 0.5).unwrap_or(f64::NAN),
        });
        let valid = evaluate(&mut model, dataset, valid_ids, config)?;
        info!(
            "epoch {epoch}: train loss {:.4}, valid loss {:.4} auc {:.4} acc {:.4}",
            loss_sum / count.max(1) as f64,
            valid.loss,
            valid.auc,
            valid.accuracy
        );
        history.records.push(EpochRecord {
            epoch,
            split: "valid".into(),
            loss: valid.loss,
            auc: valid.auc,
            accuracy: valid.accuracy,
        });
        let improved = best.as_ref().is_none_or(|(_, b, _)| valid.auc > b.auc);
        if improved {
            best = Some((epoch, valid, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                info!("stopping after {epoch} epochs, best epoch {}", best.as_ref().map_or(0, |b| b.0));
                break;
            }
        }
    }
    let (best_epoch, best_validation, model) = best.expect("at least one epoch ran");
    Ok(TrainOutput {
        model,
        history,
        best_epoch,
        best_validation,
    })
}

/// Trains on the training students of `fold`, holding out a validation
/// subset.
pub fn train_fold<T: Real>(
    dataset: &CanonicalDataset,
    split: &FoldSplit,
    fold: usize,
    keys: &KeyEmbeddings,
    config: &RunConfig,
    seed: u64,
) -> Result<TrainOutput<T>> {
    if fold >= split.k {
        return Err(TgmnError::Argument(format!("fold {fold} out of range for {} folds", split.k)));
    }
    let (train_ids, valid_ids) = split.train_validation(fold, config.validation_fraction);
    let test: BTreeSet<u64> = split.test_students(fold).into_iter().collect();
    assert!(
        train_ids.iter().chain(&valid_ids).all(|id| !test.contains(id)),
        "test students leaked into training"
    );
    train_on(dataset, keys, &train_ids, &valid_ids, config, seed)
}

/// The four key-embedding conditions: text or one-hot inputs, with or
/// without hop pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingVariant {
    #[serde(rename = "Text+PT")]
    TextPt,
    #[serde(rename = "OHC+PT")]
    OhcPt,
    Text,
    #[serde(rename = "OHC")]
    Ohc,
}

impl EmbeddingVariant {
    pub const ALL: [EmbeddingVariant; 4] = [Self::TextPt, Self::OhcPt, Self::Text, Self::Ohc];

    pub fn name(self) -> &'static str {
        match self {
            Self::TextPt => "Text+PT",
            Self::OhcPt => "OHC+PT",
            Self::Text => "Text",
            Self::Ohc => "OHC",
        }
    }

    pub fn key_input(self) -> KeyInput {
        match self {
            Self::TextPt | Self::Text => KeyInput::Text,
            Self::OhcPt | Self::Ohc => KeyInput::Onehot,
        }
    }

    pub fn pretrained(self) -> bool {
        matches!(self, Self::TextPt | Self::OhcPt)
    }

    /// `config` with this variant's key settings.
    pub fn apply(self, config: &RunConfig) -> RunConfig {
        RunConfig {
            key_input: self.key_input(),
            pretrain_keys: self.pretrained(),
            ..config.clone()
        }
    }
}

/// Keys and the pretraining loss curve (empty when not pretrained).
pub struct PreparedKeys {
    pub keys: KeyEmbeddings,
    pub loss_history: Vec<f64>,
}

/// Builds key embeddings as the config asks: loaded, pretrained, or the
/// untrained encoder's output.
pub fn prepare_keys(dataset: &CanonicalDataset, config: &RunConfig, seed: u64) -> Result<PreparedKeys> {
    if let Some(dir) = &config.keys_dir {
        let keys = load_keys(dir)?;
        if keys.d_k() != config.d_k {
            return Err(TgmnError::Shape {
                field: "d_k".into(),
                expected: config.d_k.to_string(),
                found: keys.d_k().to_string(),
            });
        }
        return Ok(PreparedKeys {
            keys,
            loss_history: Vec::new(),
        });
    }
    let graph = build_bipartite(dataset)?;
    let input = match config.key_input {
        KeyInput::Onehot => InputMode::OneHot,
        KeyInput::Text => {
            let (Some(q), Some(c)) = (&config.question_vectors, &config.kc_vectors) else {
                return Err(TgmnError::Argument("text key input needs question_vectors and kc_vectors".into()));
            };
            InputMode::text_from_files(q, c, &graph)?
        }
    };
    let pt = config.pretrain_config(seed);
    if !config.pretrain_keys {
        let encoder = NodeEncoder::new(&graph, input, &pt)?;
        return Ok(PreparedKeys {
            keys: encoder.keys(),
            loss_history: Vec::new(),
        });
    }
    let sample = |ty: NodeType, salt: u64| -> Result<Vec<_>> {
        if graph.num_nodes(ty) < 2 {
            warn!("fewer than two {ty:?} nodes; no {ty:?} pairs to pretrain on");
            return Ok(Vec::new());
        }
        match sample_hop_pairs(&graph, ty, pt.pairs_per_type, pt.max_hops, seed ^ salt) {
            Ok(pairs) => Ok(pairs),
            Err(TgmnError::Argument(m)) => {
                warn!("no {ty:?} pairs: {m}");
                Ok(Vec::new())
            }
            Err(e) => Err(e),
        }
    };
    let pairs_q = sample(NodeType::Question, 0x51)?;
    let pairs_c = sample(NodeType::Kc, 0xc3)?;
    let pretrained = pretrain_embeddings(&graph, &pairs_q, &pairs_c, input, &pt)?;
    Ok(PreparedKeys {
        keys: pretrained.keys,
        loss_history: pretrained.loss_history,
    })
}

/// Test-fold result of one (variant, seed, fold) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub variant: Variant,
    pub seed: u64,
    pub fold: usize,
    pub best_epoch: usize,
    pub test: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub auc: Summary,
    pub accuracy: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: Variant,
    pub b: Variant,
    pub metric: String,
    /// `None` when the test is undefined (fewer than two runs or zero variance).
    pub test: Option<TTest>,
}

/// Everything needed to reproduce and read an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub config: RunConfig,
    pub folds: Vec<FoldResult>,
    pub summary: Vec<VariantSummary>,
    pub comparisons: Vec<Comparison>,
}

impl AblationReport {
    pub fn summary_of(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| TgmnError::io(path, e))
    }
}

/// Per-seed test metric of `variant`, pooled over folds by averaging.
fn seed_means(folds: &[FoldResult], variant: Variant, metric: fn(&Evaluation) -> f64) -> Vec<f64> {
    let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for f in folds.iter().filter(|f| f.variant == variant) {
        by_seed.entry(f.seed).or_default().push(metric(&f.test));
    }
    by_seed.values().map(|v| Summary::of(v).mean).collect()
}

/// Trains each variant on the same folds and keys for every seed, then
/// reports test metrics with Welch t-tests of the first variant against the
/// others.
pub fn run_ablation<T: Real>(dataset: &CanonicalDataset, config: &RunConfig, variants: &[Variant]) -> Result<AblationReport> {
    config.validate()?;
    if variants.is_empty() {
        return Err(TgmnError::Argument("no variants to compare".into()));
    }
    let mut folds = Vec::new();
    for &seed in &config.seeds {
        let split = crate::datasets::make_folds(dataset, config.folds, seed)?;
        let keys = prepare_keys(dataset, config, seed)?.keys;
        let fold_count = config.max_folds.unwrap_or(config.folds).min(config.folds);
        for fold in 0..fold_count {
            for &variant in variants {
                let cfg = RunConfig {
                    variant,
                    ..config.clone()
                };
                let mut out = train_fold::<T>(dataset, &split, fold, &keys, &cfg, seed)?;
                let test = evaluate(&mut out.model, dataset, &split.test_students(fold), &cfg)?;
                info!("seed {seed} fold {fold} {variant}: test auc {:.4} acc {:.4}", test.auc, test.accuracy);
                folds.push(FoldResult {
                    variant,
                    seed,
                    fold,
                    best_epoch: out.best_epoch,
                    test,
                });
            }
        }
    }
    let summary = variants
        .iter()
        .map(|&variant| VariantSummary {
            variant,
            auc: Summary::of(&seed_means(&folds, variant, |e| e.auc)),
            accuracy: Summary::of(&seed_means(&folds, variant, |e| e.accuracy)),
        })
        .collect();
    let mut comparisons = Vec::new();
    let reference = variants[0];
    for &other in &variants[1..] {
        for (metric, f) in [("auc", (|e: &Evaluation| e.auc) as fn(&Evaluation) -> f64), ("accuracy", |e| e.accuracy)] {
            let a = seed_means(&folds, reference, f);
            let b = seed_means(&folds, other, f);
            comparisons.push(Comparison {
                a: reference,
                b: other,
                metric: metric.into(),
                test: welch_ttest(&a, &b).ok(),
            });
        }
    }
    Ok(AblationReport {
        config_hash: config.hash(),
        config: config.clone(),
        folds,
        summary,
        comparisons,
    })
}
