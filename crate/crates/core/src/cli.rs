//! The `tgmn` command line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{Precision, RunConfig};
use crate::datasets::{generate_synthetic, ingest_csv, make_folds, CanonicalDataset, CsvSchema, IdMap};
use crate::error::{Result, TgmnError};
use crate::metrics::Summary;
use crate::model::{TgmnModel, Variant};
use crate::pretrain::export_keys;
use crate::train::{evaluate, prepare_keys, run_ablation, train_fold, EmbeddingVariant, EpochRecord, History};
use crate::Real;

/// Environment variable naming the root that relative dataset paths resolve against.
pub const DATA_DIR_ENV: &str = "TGMN_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "tgmn", version, about = "Knowledge tracing with temporal graph memory networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a raw interaction export to the canonical CSV and id map.
    Ingest(IngestArgs),
    /// Write a synthetic dataset in canonical form.
    Synth(SynthArgs),
    /// Pretrain key embeddings, or compare the four embedding variants.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run the embedding-variant comparison with these variants.
        #[arg(long, value_delimiter = ',', num_args = 0.., value_parser = parse_embedding_variant)]
        variants: Option<Vec<EmbeddingVariant>>,
    },
    /// Train one model per fold and save checkpoints with their histories.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Train only this fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Evaluate checkpoints on their test folds.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint files, paired in order with `--fold`.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, required = true)]
        fold: Vec<usize>,
    },
    /// Train and test every variant on shared folds and seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "TGMN,TGMN-F,TGMN-SC,Base")]
        variants: Vec<Variant>,
    },
    /// Emit CSV series for bar charts and training curves.
    Plotdata(PlotArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "user_id")]
    pub student_col: String,
    #[arg(long, default_value = "problem_id")]
    pub question_col: String,
    #[arg(long, default_value = "skill_id")]
    pub kc_col: String,
    #[arg(long, default_value = "correct")]
    pub answer_col: String,
    #[arg(long)]
    pub order_col: Option<String>,
    #[arg(long, default_value = "_")]
    pub kc_separator: String,
    #[arg(long)]
    pub merge_same_order: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4000)]
    pub students: usize,
    #[arg(long, default_value_t = 50)]
    pub questions: usize,
    #[arg(long, default_value_t = 5)]
    pub kcs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Ablation report written by `ablate`.
    #[arg(long)]
    pub ablation: Option<PathBuf>,
    /// Training history as `name=path/to/history.csv`.
    #[arg(long)]
    pub curve: Vec<String>,
    #[arg(long)]
    pub output_dir: PathBuf,
}

/// Config file plus per-field overrides. Flags beat the file, which beats
/// the defaults.
#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub keys_dir: Option<PathBuf>,
    #[arg(long)]
    pub question_vectors: Option<PathBuf>,
    #[arg(long)]
    pub kc_vectors: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub max_folds: Option<usize>,
    #[arg(long)]
    pub d_k: Option<usize>,
    #[arg(long)]
    pub d_v: Option<usize>,
    #[arg(long)]
    pub d_q: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Any other field, as `name=<json value>`.
    #[arg(long = "set", value_name = "FIELD=VALUE")]
    pub set: Vec<String>,
}

fn parse_embedding_variant(s: &str) -> std::result::Result<EmbeddingVariant, String> {
    EmbeddingVariant::ALL
        .into_iter()
        .find(|v| v.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown embedding variant `{s}` (expected Text+PT, OHC+PT, Text or OHC)"))
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Map<String, Value>> {
        let mut map = Map::new();
        let mut put = |k: &str, v: Value| {
            map.insert(k.to_string(), v);
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
        for (k, v) in [
            ("data", path(&self.data)),
            ("output_dir", path(&self.output_dir)),
            ("keys_dir", path(&self.keys_dir)),
            ("question_vectors", path(&self.question_vectors)),
            ("kc_vectors", path(&self.kc_vectors)),
            ("epochs", self.epochs.map(Value::from)),
            ("learning_rate", self.learning_rate.map(Value::from)),
            ("batch_size", self.batch_size.map(Value::from)),
            ("variant", self.variant.map(|v| Value::from(v.name()))),
            ("seeds", self.seeds.clone().map(Value::from)),
            ("folds", self.folds.map(Value::from)),
            ("max_folds", self.max_folds.map(Value::from)),
            ("d_k", self.d_k.map(Value::from)),
            ("d_v", self.d_v.map(Value::from)),
            ("d_q", self.d_q.map(Value::from)),
            ("window", self.window.map(Value::from)),
            ("gamma", self.gamma.map(Value::from)),
            ("dropout", self.dropout.map(Value::from)),
        ] {
            if let Some(v) = v {
                put(k, v);
            }
        }
        for item in &self.set {
            let (k, raw) = item
                .split_once('=')
                .ok_or_else(|| TgmnError::Argument(format!("--set expects FIELD=VALUE, got `{item}`")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            put(k.trim(), v);
        }
        Ok(map)
    }

    /// The fully resolved config and the fields left at their defaults.
    pub fn resolve(&self) -> Result<(RunConfig, Vec<String>)> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| TgmnError::io(p, e))?,
            None => "{}".to_string(),
        };
        let mut value: Value = serde_json::from_str(&text)?;
        let Some(object) = value.as_object_mut() else {
            return Err(TgmnError::Schema("config file must hold a JSON object".into()));
        };
        object.extend(self.overrides()?);
        let merged = serde_json::to_string(&value)?;
        let mut config: RunConfig =
            serde_json::from_str(&merged).map_err(|e| TgmnError::Argument(format!("config: {e}")))?;
        let defaulted = RunConfig::absent_fields(&merged)?;
        if let (Some(data), Ok(root)) = (&config.data, std::env::var(DATA_DIR_ENV)) {
            if data.is_relative() {
                config.data = Some(Path::new(&root).join(data));
            }
        }
        config.validate()?;
        Ok((config, defaulted))
    }
}

/// Exit status for an error: 1 usage, 2 data or format, 3 numeric.
pub fn exit_code(error: &TgmnError) -> i32 {
    match error {
        TgmnError::Argument(_) => 1,
        TgmnError::Numeric(_) | TgmnError::NonFiniteLoss { .. } | TgmnError::UndefinedMetric(_) => 3,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TgmnError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| TgmnError::io(path, e))
}

/// Resolves the config, logs defaulted fields and echoes it into the output directory.
fn start(args: &ConfigArgs) -> Result<RunConfig> {
    let (config, defaulted) = args.resolve()?;
    if !defaulted.is_empty() {
        info!("fields left at defaults: {}", defaulted.join(", "));
    }
    create_dir(&config.output_dir)?;
    write_json(&config.output_dir.join("config.json"), &config)?;
    Ok(config)
}

fn load_dataset(config: &RunConfig) -> Result<CanonicalDataset> {
    let path = config
        .data
        .as_ref()
        .ok_or_else(|| TgmnError::Argument("no dataset given (set `data` or --data)".into()))?;
    CanonicalDataset::load_canonical(path)
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    error: String,
    epoch: usize,
    students: &'a [u64],
}

/// Writes a diagnostics file for numeric failures and passes the error on.
fn with_diagnostics<T>(config: &RunConfig, result: Result<T>) -> Result<T> {
    if let Err(TgmnError::NonFiniteLoss { epoch, students }) = &result {
        let path = config.output_dir.join("diagnostics.json");
        let diag = Diagnostics {
            error: result.as_ref().err().map(ToString::to_string).unwrap_or_default(),
            epoch: *epoch,
            students,
        };
        if write_json(&path, &diag).is_ok() {
            eprintln!("diagnostics written to {}", path.display());
        }
    }
    result
}

fn slug(variant: EmbeddingVariant) -> &'static str {
    match variant {
        EmbeddingVariant::TextPt => "text_pt",
        EmbeddingVariant::OhcPt => "ohc_pt",
        EmbeddingVariant::Text => "text",
        EmbeddingVariant::Ohc => "ohc",
    }
}

/// Training curve of one embedding variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantCurve {
    pub variant: EmbeddingVariant,
    pub pretrain_loss: Vec<f64>,
    pub history: History,
}

/// Builds keys for each embedding variant, trains on the first fold of the
/// first seed with each, and writes keys and curves under `out_dir`.
pub fn embedding_variants<T: Real>(
    dataset: &CanonicalDataset,
    config: &RunConfig,
    variants: &[EmbeddingVariant],
    out_dir: &Path,
) -> Result<Vec<VariantCurve>> {
    let seed = config.seeds[0];
    let split = make_folds(dataset, config.folds, seed)?;
    let mut curves = Vec::new();
    for &variant in variants {
        let cfg = variant.apply(config);
        cfg.validate()?;
        let prepared = prepare_keys(dataset, &cfg, seed)?;
        let dir = out_dir.join(slug(variant));
        export_keys(&prepared.keys, &dir.join("keys"))?;
        let out = train_fold::<T>(dataset, &split, 0, &prepared.keys, &cfg, seed)?;
        out.history.write_csv(&dir.join("history.csv"))?;
        let loss_csv: String = std::iter::once("epoch,loss".to_string())
            .chain(prepared.loss_history.iter().enumerate().map(|(i, l)| format!("{i},{l}")))
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(dir.join("pretrain_loss.csv"), loss_csv + "\n").map_err(|e| TgmnError::io(&dir, e))?;
        info!("{}: best epoch {} valid auc {:.4}", variant.name(), out.best_epoch, out.best_validation.auc);
        curves.push(VariantCurve {
            variant,
            pretrain_loss: prepared.loss_history,
            history: out.history,
        });
    }
    Ok(curves)
}

/// Test metrics of checkpoints, one entry per fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub config_hash: String,
    pub checkpoints: Vec<PathBuf>,
    pub folds: Vec<usize>,
    pub auc: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub loss: Vec<f64>,
    pub mean_auc: Summary,
    pub mean_accuracy: Summary,
}

fn train_command<T: Real>(config: &RunConfig, fold: Option<usize>) -> Result<()> {
    let dataset = load_dataset(config)?;
    let seed = config.seeds[0];
    let split = make_folds(&dataset, config.folds, seed)?;
    write_json(&config.output_dir.join("folds.json"), &split)?;
    let prepared = prepare_keys(&dataset, config, seed)?;
    export_keys(&prepared.keys, &config.output_dir.join("keys"))?;
    let folds: Vec<usize> = match fold {
        Some(f) => vec![f],
        None => (0..config.max_folds.unwrap_or(config.folds).min(config.folds)).collect(),
    };
    for f in folds {
        let out = with_diagnostics(config, train_fold::<T>(&dataset, &split, f, &prepared.keys, config, seed))?;
        let dir = config.output_dir.join(format!("fold{f}"));
        create_dir(&dir)?;
        out.model.save_checkpoint(&dir.join("checkpoint.tgmn"))?;
        out.history.write_csv(&dir.join("history.csv"))?;
        println!(
            "fold {f}: best epoch {}, validation auc {:.4}, accuracy {:.4}",
            out.best_epoch, out.best_validation.auc, out.best_validation.accuracy
        );
    }
    Ok(())
}

fn eval_command<T: Real>(config: &RunConfig, checkpoints: &[PathBuf], folds: &[usize]) -> Result<()> {
    if checkpoints.len() != folds.len() {
        return Err(TgmnError::Argument(format!(
            "{} checkpoints but {} folds; pass one --fold per --checkpoint",
            checkpoints.len(),
            folds.len()
        )));
    }
    let dataset = load_dataset(config)?;
    let split = make_folds(&dataset, config.folds, config.seeds[0])?;
    let mut manifest = EvalManifest {
        config_hash: config.hash(),
        checkpoints: checkpoints.to_vec(),
        folds: folds.to_vec(),
        auc: Vec::new(),
        accuracy: Vec::new(),
        loss: Vec::new(),
        mean_auc: Summary { mean: 0.0, std: 0.0 },
        mean_accuracy: Summary { mean: 0.0, std: 0.0 },
    };
    for (path, &fold) in checkpoints.iter().zip(folds) {
        if fold >= split.k {
            return Err(TgmnError::Argument(format!("fold {fold} out of range for {} folds", split.k)));
        }
        let mut model = TgmnModel::<T>::load_checkpoint(path)?;
        model.check_dataset(&dataset)?;
        let e = evaluate(&mut model, &dataset, &split.test_students(fold), config)?;
        println!("fold {fold}: auc {:.4} accuracy {:.4} loss {:.4}", e.auc, e.accuracy, e.loss);
        manifest.auc.push(e.auc);
        manifest.accuracy.push(e.accuracy);
        manifest.loss.push(e.loss);
    }
    manifest.mean_auc = Summary::of(&manifest.auc);
    manifest.mean_accuracy = Summary::of(&manifest.accuracy);
    write_json(&config.output_dir.join("eval.json"), &manifest)
}

fn ablate_command<T: Real>(config: &RunConfig, variants: &[Variant]) -> Result<()> {
    let unique: BTreeSet<Variant> = variants.iter().copied().collect();
    if unique.len() != variants.len() {
        return Err(TgmnError::Argument("variants must be distinct".into()));
    }
    let dataset = load_dataset(config)?;
    let report = with_diagnostics(config, run_ablation::<T>(&dataset, config, variants))?;
    report.write_json(&config.output_dir.join("ablation.json"))?;
    let mut table = String::from("variant,auc_mean,auc_std,accuracy_mean,accuracy_std\n");
    for s in &report.summary {
        table += &format!("{},{},{},{},{}\n", s.variant, s.auc.mean, s.auc.std, s.accuracy.mean, s.accuracy.std);
        println!("{:<8} auc {:.4} ± {:.4}  accuracy {:.4} ± {:.4}", s.variant.name(), s.auc.mean, s.auc.std, s.accuracy.mean, s.accuracy.std);
    }
    let path = config.output_dir.join("ablation.csv");
    std::fs::write(&path, table).map_err(|e| TgmnError::io(&path, e))
}

fn plotdata_command(args: &PlotArgs) -> Result<()> {
    create_dir(&args.output_dir)?;
    if let Some(path) = &args.ablation {
        let text = std::fs::read_to_string(path).map_err(|e| TgmnError::io(path, e))?;
        let report: crate::train::AblationReport = serde_json::from_str(&text)?;
        let mut bars = String::from("variant,metric,mean,std\n");
        for s in &report.summary {
            bars += &format!("{},auc,{},{}\n", s.variant, s.auc.mean, s.auc.std);
            bars += &format!("{},accuracy,{},{}\n", s.variant, s.accuracy.mean, s.accuracy.std);
        }
        let out = args.output_dir.join("bars.csv");
        std::fs::write(&out, bars).map_err(|e| TgmnError::io(&out, e))?;
    }
    if !args.curve.is_empty() {
        let mut curves = String::from("series,epoch,split,loss,auc,accuracy\n");
        for item in &args.curve {
            let (name, path) = item
                .split_once('=')
                .ok_or_else(|| TgmnError::Argument(format!("--curve expects NAME=PATH, got `{item}`")))?;
            let mut reader = csv::Reader::from_path(path).map_err(|e| TgmnError::io(path, std::io::Error::other(e.to_string())))?;
            for row in reader.deserialize::<EpochRecord>() {
                let r = row?;
                curves += &format!("{name},{},{},{},{},{}\n", r.epoch, r.split, r.loss, r.auc, r.accuracy);
            }
        }
        let out = args.output_dir.join("curves.csv");
        std::fs::write(&out, curves).map_err(|e| TgmnError::io(&out, e))?;
    }
    if args.ablation.is_none() && args.curve.is_empty() {
        warn!("nothing to emit: pass --ablation and/or --curve");
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => {
            let mut schema = CsvSchema::new(&a.student_col, &a.question_col, &a.kc_col, &a.answer_col);
            schema.order = a.order_col;
            schema.kc_separator = a.kc_separator;
            schema.merge_same_order = a.merge_same_order;
            let ingested = ingest_csv(&a.input, &schema)?;
            ingested.dataset.write_canonical(&a.output)?;
            ingested.id_map.write(&IdMap::sidecar_path(&a.output))?;
            println!("{}", serde_json::to_string(&ingested.report)?);
            Ok(())
        }
        Command::Synth(a) => {
            let ds = generate_synthetic(a.students, a.questions, a.kcs, a.seed)?;
            ds.write_canonical(&a.output)
        }
        Command::Pretrain { config, variants } => {
            let config = start(&config)?;
            let dataset = load_dataset(&config)?;
            match variants {
                Some(list) => {
                    let list = if list.is_empty() { EmbeddingVariant::ALL.to_vec() } else { list };
                    let curves = match config.precision {
                        Precision::F32 => embedding_variants::<f32>(&dataset, &config, &list, &config.output_dir),
                        Precision::F64 => embedding_variants::<f64>(&dataset, &config, &list, &config.output_dir),
                    };
                    let curves = with_diagnostics(&config, curves)?;
                    write_json(&config.output_dir.join("variants.json"), &curves)
                }
                None => {
                    let prepared = prepare_keys(&dataset, &config, config.seeds[0])?;
                    let dir = config.keys_dir.clone().unwrap_or_else(|| config.output_dir.join("keys"));
                    export_keys(&prepared.keys, &dir)?;
                    if let Some(last) = prepared.loss_history.last() {
                        println!("final hop loss {last:.6}");
                    }
                    println!("keys written to {}", dir.display());
                    Ok(())
                }
            }
        }
        Command::Train { config, fold } => {
            let config = start(&config)?;
            match config.precision {
                Precision::F32 => train_command::<f32>(&config, fold),
                Precision::F64 => train_command::<f64>(&config, fold),
            }
        }
        Command::Eval { config, checkpoint, fold } => {
            let config = start(&config)?;
            match config.precision {
                Precision::F32 => eval_command::<f32>(&config, &checkpoint, &fold),
                Precision::F64 => eval_command::<f64>(&config, &checkpoint, &fold),
            }
        }
        Command::Ablate { config, variants } => {
            let config = start(&config)?;
            match config.precision {
                Precision::F32 => ablate_command::<f32>(&config, &variants),
                Precision::F64 => ablate_command::<f64>(&config, &variants),
            }
        }
        Command::Plotdata(args) => plotdata_command(&args),
    }
}
