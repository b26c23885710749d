//! `stereovol`: end-to-end workflow binary.
//!
//! One subcommand per pipeline stage: ingest, build-priors, train, predict,
//! evaluate, report, nutrition, vlm-baseline. Values come from an optional
//! flat TOML config; flags override the file. Every run writes a small run
//! record next to its outputs. Failures print one machine-parsable line,
//! `error[<family>]: <message>`, and exit with the family's code.

mod config;
mod http;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Display;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Parser, Subcommand};
use serde::Serialize;

use stereovol_core::encoders::{image_encoder_from_spec, text_encoder_from_spec, CACHE_DIR_ENV};
use stereovol_core::error::{Error, Result};
use stereovol_core::eval::distribution::error_distribution_series;
use stereovol_core::eval::{compute_metrics, predict, PredictionSet};
use stereovol_core::ingest::{build_manifest, read_sequence_index, ExplicitSplit, FrameSequence};
use stereovol_core::model::FeatureMask;
use stereovol_core::nutrition::{scale_prediction_set, NutrientDb};
use stereovol_core::priors::{build_prior_table, PromptTemplate, VolumePriorTable};
use stereovol_core::training::checkpoint::Checkpoint;
use stereovol_core::training::{make_checkpoint, train, TrainDataset, TrainRow, TrainWiring};
use stereovol_core::types::{ClassVocabulary, ImageRef, ManifestRecord, StereoSample};
use stereovol_core::vlm::{
    run_vlm_baseline, FixtureTape, RecordingTransport, ReplayTransport, RetryPolicy, VlmMode,
};

use config::{FileConfig, LogLevel};

#[derive(Parser)]
#[command(
    name = "stereovol",
    version,
    about = "Text-guided stereo volume estimation",
    propagate_version = true
)]
struct Cli {
    /// Flat TOML run configuration; flags override file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split frame sequences into train/test stereo-pair manifests.
    Ingest {
        /// Sequence index: one JSON object per line with item_id,
        /// class_label, frames, and volume_ml or a mesh path.
        #[arg(long)]
        index: PathBuf,
        /// Output directory (default: <output_dir>/ingest).
        #[arg(long)]
        out: Option<PathBuf>,
        /// File of item ids (one per line) forced into the train split.
        #[arg(long, requires = "test_items")]
        train_items: Option<PathBuf>,
        /// File of item ids forced into the test split.
        #[arg(long, requires = "train_items")]
        test_items: Option<PathBuf>,
    },
    /// Compute per-class mean training volumes for prompt rendering.
    BuildPriors {
        /// Train manifest from `ingest`.
        #[arg(long)]
        manifest: PathBuf,
        /// Output path (default: <output_dir>/priors.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the fusion model on a stereo-pair manifest.
    Train {
        #[arg(long)]
        train_manifest: PathBuf,
        /// Output directory (default: <output_dir>/train).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        projection_dim: Option<usize>,
        /// Views fed to the model per item: 1 or 2.
        #[arg(long)]
        image_count: Option<usize>,
        /// Prompt template id, 0 through 5.
        #[arg(long)]
        template: Option<u8>,
        #[arg(long)]
        image_encoder: Option<String>,
        #[arg(long)]
        text_encoder: Option<String>,
        /// Feature masking: full, stereo-only, or text-only.
        #[arg(long, value_parser = parse_mask_flag)]
        mask: Option<FeatureMask>,
        #[arg(long, action = ArgAction::Set)]
        standardize_volumes: Option<bool>,
        /// Assert deterministic execution (always on; kept as an explicit
        /// switch so scripts can state the expectation).
        #[arg(long, action = ArgAction::SetTrue)]
        deterministic: bool,
    },
    /// Run a trained checkpoint over a manifest and write predictions.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        /// Output path (default: <output_dir>/predictions.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Clamp negative volume estimates to zero and mark the row.
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        clip_negative: bool,
    },
    /// Score a prediction file: metrics plus error-distribution series.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Output directory (default: <output_dir>/evaluate).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare metric files side by side; the last one is the subject.
    Report {
        /// Metrics files from `evaluate`, named by file stem in the table.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Output path (default: <output_dir>/report.txt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scale predictions into nutrient estimates through a profile database.
    Nutrition {
        #[arg(long)]
        predictions: PathBuf,
        /// JSON array of nutrient profiles keyed by food code.
        #[arg(long)]
        db: PathBuf,
        /// Output path (default: <output_dir>/nutrition.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Query an external vision-language model as a baseline.
    VlmBaseline {
        /// single-no-context, single-with-context, or stereo.
        #[arg(long)]
        mode: String,
        /// Evaluation manifest from `ingest`.
        #[arg(long)]
        manifest: PathBuf,
        /// Output path (default: <output_dir>/vlm.predictions.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Answer queries from a recorded fixture tape instead of the
        /// network.
        #[arg(long, conflicts_with = "record")]
        replay: Option<PathBuf>,
        /// Query the live endpoint and save every exchange to this tape.
        #[arg(long)]
        record: Option<PathBuf>,
        #[arg(long, default_value = "gpt-4o")]
        model: String,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 3)]
        max_attempts: u32,
    },
}

fn parse_mask_flag(s: &str) -> std::result::Result<FeatureMask, String> {
    config::parse_mask(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.family().name());
            ExitCode::from(e.family().exit_code() as u8)
        }
    }
}

struct Log {
    level: LogLevel,
}

impl Log {
    fn info(&self, msg: impl Display) {
        if self.level >= LogLevel::Info {
            eprintln!("{msg}");
        }
    }

    fn debug(&self, msg: impl Display) {
        if self.level >= LogLevel::Debug {
            eprintln!("{msg}");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = FileConfig::load_or_default(cli.config.as_deref())?;
    if let Some(dir) = &cfg.cache_dir {
        if std::env::var_os(CACHE_DIR_ENV).is_none() {
            std::env::set_var(CACHE_DIR_ENV, dir);
        }
    }
    let log = Log { level: cfg.log_level };
    match cli.command {
        Command::Ingest { index, out, train_items, test_items } => {
            cmd_ingest(&cfg, &log, index, out, train_items, test_items)
        }
        Command::BuildPriors { manifest, out } => cmd_build_priors(&cfg, &log, manifest, out),
        Command::Train {
            train_manifest,
            out,
            epochs,
            batch_size,
            learning_rate,
            seed,
            projection_dim,
            image_count,
            template,
            image_encoder,
            text_encoder,
            mask,
            standardize_volumes,
            deterministic,
        } => {
            let mut cfg = cfg;
            set_if(&mut cfg.epochs, epochs);
            set_if(&mut cfg.batch_size, batch_size);
            set_if(&mut cfg.learning_rate, learning_rate);
            set_if(&mut cfg.seed, seed);
            set_if(&mut cfg.projection_dim, projection_dim);
            set_if(&mut cfg.image_count, image_count);
            set_if(&mut cfg.template_id, template);
            set_if(&mut cfg.image_encoder, image_encoder);
            set_if(&mut cfg.text_encoder, text_encoder);
            set_if(&mut cfg.mask, mask);
            set_if(&mut cfg.standardize_volumes, standardize_volumes);
            if deterministic {
                cfg.deterministic = true;
            }
            cmd_train(&cfg, &log, train_manifest, out)
        }
        Command::Predict { checkpoint, manifest, priors, out, clip_negative } => {
            cmd_predict(&cfg, &log, checkpoint, manifest, priors, out, clip_negative)
        }
        Command::Evaluate { predictions, out } => cmd_evaluate(&cfg, &log, predictions, out),
        Command::Report { metrics, out } => cmd_report(&cfg, &log, metrics, out),
        Command::Nutrition { predictions, db, out } => {
            cmd_nutrition(&cfg, &log, predictions, db, out)
        }
        Command::VlmBaseline {
            mode,
            manifest,
            out,
            replay,
            record,
            model,
            temperature,
            max_attempts,
        } => cmd_vlm_baseline(
            &cfg,
            &log,
            &mode,
            manifest,
            out,
            replay,
            record,
            model,
            temperature,
            max_attempts,
        ),
    }
}

fn set_if<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

// ------------------------------------------------------------ file plumbing

/// Machine-readable record written next to every command's outputs.
#[derive(Serialize)]
struct RunRecord {
    command: String,
    tool_version: String,
    elapsed_ms: u128,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn write_run_record(
    path: &Path,
    command: &str,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: &[&Path],
) -> Result<()> {
    let record = RunRecord {
        command: command.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        elapsed_ms: started.elapsed().as_millis(),
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::serde(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sibling run-record path for a file output: predictions.jsonl sits next
/// to predictions.run.json.
fn run_record_sibling(out: &Path) -> PathBuf {
    out.with_extension("run.json")
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn default_out(cfg: &FileConfig, out: Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| cfg.output_dir.join(name))
}

fn read_manifest(path: &Path, cfg: &FileConfig) -> Result<Vec<StereoSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        let mut sample = record.to_sample();
        sample.left_image = resolve_ref(cfg, sample.left_image);
        sample.right_image = resolve_ref(cfg, sample.right_image);
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::DataEmpty);
    }
    Ok(samples)
}

fn resolve_ref(cfg: &FileConfig, image: ImageRef) -> ImageRef {
    match image {
        ImageRef::Path(p) => ImageRef::Path(cfg.resolve(&p)),
        tensor => tensor,
    }
}

fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for record in records {
        text.push_str(&serde_json::to_string(record).map_err(|e| Error::serde(path, e))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn vocab_from_samples(samples: &[StereoSample]) -> Result<ClassVocabulary> {
    let names: BTreeSet<&str> = samples.iter().map(|s| s.class_label.as_str()).collect();
    ClassVocabulary::from_names(names.iter().map(|s| s.to_string()))
}

/// Turns manifest samples into model rows, narrowing to the first view when
/// a single-view model is requested.
fn rows_for_model(samples: &[StereoSample], image_count: usize) -> Result<Vec<TrainRow>> {
    if !(1..=2).contains(&image_count) {
        return Err(Error::CheckpointMismatch(format!(
            "model wants {image_count} views per item; stereo manifests carry 2"
        )));
    }
    Ok(samples
        .iter()
        .map(|s| {
            let mut row = TrainRow::from(s);
            row.views.truncate(image_count);
            row
        })
        .collect())
}

fn write_series_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::serde(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::serde(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn read_id_list(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

// ----------------------------------------------------------------- commands

fn cmd_ingest(
    cfg: &FileConfig,
    log: &Log,
    index: PathBuf,
    out: Option<PathBuf>,
    train_items: Option<PathBuf>,
    test_items: Option<PathBuf>,
) -> Result<()> {
    let started = Instant::now();
    let out = default_out(cfg, out, "ingest");
    ensure_dir(&out)?;

    let seqs: Vec<FrameSequence> = read_sequence_index(&index)?
        .into_iter()
        .map(|mut seq| {
            seq.frames = seq.frames.into_iter().map(|f| resolve_ref(cfg, f)).collect();
            seq.mesh_path = seq.mesh_path.map(|p| cfg.resolve(&p));
            seq
        })
        .collect();

    let mut policy = cfg.manifest_policy();
    if let (Some(train_file), Some(test_file)) = (&train_items, &test_items) {
        policy.explicit_split = Some(ExplicitSplit {
            train_items: read_id_list(train_file)?,
            test_items: read_id_list(test_file)?,
        });
    }
    let (train, test, vocab) = build_manifest(&seqs, &policy)?;

    let train_path = out.join("train.manifest.jsonl");
    let test_path = out.join("test.manifest.jsonl");
    write_manifest(&train_path, &train)?;
    write_manifest(&test_path, &test)?;
    log.info(format!(
        "ingest: {} sequences -> {} train pairs, {} test items, {} classes",
        seqs.len(),
        train.len(),
        test.len(),
        vocab.len()
    ));

    let inputs = BTreeMap::from([
        ("index".into(), index.display().to_string()),
        ("train_fraction".into(), policy.train_fraction.to_string()),
        ("split_seed".into(), policy.seed.to_string()),
        ("max_train_pairs_per_item".into(), policy.max_train_pairs_per_item.to_string()),
        ("explicit_split".into(), policy.explicit_split.is_some().to_string()),
        ("classes".into(), vocab.names().join(",")),
    ]);
    write_run_record(&out.join("run.json"), "ingest", started, inputs, &[&train_path, &test_path])
}

fn cmd_build_priors(
    cfg: &FileConfig,
    log: &Log,
    manifest: PathBuf,
    out: Option<PathBuf>,
) -> Result<()> {
    let started = Instant::now();
    let out = default_out(cfg, out, "priors.json");
    ensure_parent(&out)?;

    let samples = read_manifest(&manifest, cfg)?;
    let vocab = vocab_from_samples(&samples)?;
    let table = build_prior_table(&samples, &vocab)?;
    table.save(&out)?;
    log.info(format!("build-priors: {} classes -> {}", table.len(), out.display()));

    let inputs = BTreeMap::from([("manifest".into(), manifest.display().to_string())]);
    write_run_record(&run_record_sibling(&out), "build-priors", started, inputs, &[&out])
}

fn cmd_train(cfg: &FileConfig, log: &Log, train_manifest: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    cfg.validate()?;
    let out = default_out(cfg, out, "train");
    ensure_dir(&out)?;

    let samples = read_manifest(&train_manifest, cfg)?;
    let vocab = vocab_from_samples(&samples)?;
    let priors = build_prior_table(&samples, &vocab)?;
    let rows = rows_for_model(&samples, cfg.image_count)?;
    let dataset = TrainDataset { rows, vocab: vocab.clone() };

    let image_encoder = image_encoder_from_spec(&cfg.image_encoder)?;
    let text_encoder = text_encoder_from_spec(&cfg.text_encoder)?;
    let template = PromptTemplate::by_id(cfg.template_id)?;
    let wiring = TrainWiring {
        image_encoder: image_encoder.as_ref(),
        text_encoder: text_encoder.as_ref(),
        priors: &priors,
        template: &template,
        volume_decimals: cfg.volume_decimals,
        mask: cfg.mask,
    };
    let train_config = cfg.train_config();
    log.info(format!(
        "train: {} rows, {} classes, {} epochs, mask {:?}",
        dataset.rows.len(),
        dataset.vocab.len(),
        train_config.epochs,
        cfg.mask
    ));
    let output = train(&train_config, &dataset, &wiring)?;
    for loss in &output.manifest.epoch_losses {
        log.debug(format!(
            "epoch {:>4}: total {:.6} (mse {:.6}, ce {:.6})",
            loss.epoch, loss.total, loss.mse, loss.ce
        ));
    }
    if let (Some(first), Some(last)) =
        (output.manifest.epoch_losses.first(), output.manifest.epoch_losses.last())
    {
        log.info(format!(
            "train: loss {:.6} -> {:.6}, best epoch {}",
            first.total, last.total, output.manifest.best_epoch
        ));
    }

    let ckpt_path = out.join("checkpoint.json");
    let best_path = out.join("checkpoint.best.json");
    let manifest_path = out.join("manifest.json");
    let priors_path = out.join("priors.json");
    make_checkpoint(&output, &vocab, false).save(&ckpt_path)?;
    make_checkpoint(&output, &vocab, true).save(&best_path)?;
    output.manifest.save(&manifest_path)?;
    priors.save(&priors_path)?;

    let inputs = BTreeMap::from([
        ("train_manifest".into(), train_manifest.display().to_string()),
        ("image_encoder".into(), cfg.image_encoder.clone()),
        ("text_encoder".into(), cfg.text_encoder.clone()),
        ("template_id".into(), cfg.template_id.to_string()),
        ("epochs".into(), train_config.epochs.to_string()),
        ("seed".into(), train_config.seed.to_string()),
    ]);
    write_run_record(
        &out.join("run.json"),
        "train",
        started,
        inputs,
        &[&ckpt_path, &best_path, &manifest_path, &priors_path],
    )
}

fn cmd_predict(
    cfg: &FileConfig,
    log: &Log,
    checkpoint: PathBuf,
    manifest: PathBuf,
    priors: PathBuf,
    out: Option<PathBuf>,
    clip_negative: bool,
) -> Result<()> {
    let started = Instant::now();
    let out = default_out(cfg, out, "predictions.jsonl");
    ensure_parent(&out)?;

    let ckpt = Checkpoint::load(&checkpoint)?;
    let image_encoder = image_encoder_from_spec(&ckpt.image_encoder)?;
    let text_encoder = text_encoder_from_spec(&ckpt.text_encoder)?;
    let table = VolumePriorTable::load(&priors)?;
    let samples = read_manifest(&manifest, cfg)?;
    let rows = rows_for_model(&samples, ckpt.config.image_count)?;

    let preds = predict(
        &ckpt,
        &rows,
        image_encoder.as_ref(),
        text_encoder.as_ref(),
        &table,
        clip_negative,
    )?;
    preds.save_jsonl(&out)?;
    let clipped = preds.rows().iter().filter(|r| r.clipped).count();
    log.info(format!(
        "predict: {} items -> {} ({} clipped)",
        preds.len(),
        out.display(),
        clipped
    ));

    let inputs = BTreeMap::from([
        ("checkpoint".into(), checkpoint.display().to_string()),
        ("manifest".into(), manifest.display().to_string()),
        ("priors".into(), priors.display().to_string()),
        ("clip_negative".into(), clip_negative.to_string()),
    ]);
    write_run_record(&run_record_sibling(&out), "predict", started, inputs, &[&out])
}

fn cmd_evaluate(cfg: &FileConfig, log: &Log, predictions: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    let out = default_out(cfg, out, "evaluate");
    ensure_dir(&out)?;

    let preds = PredictionSet::load_jsonl(&predictions)?;
    let metrics = compute_metrics(&preds)?;
    let metrics_path = out.join("metrics.json");
    metrics.save(&metrics_path)?;

    let series = error_distribution_series(&preds)?;
    let cdf_path = out.join("cdf.csv");
    let kde_path = out.join("kde.csv");
    write_series_csv(&cdf_path, &series.cdf)?;
    write_series_csv(&kde_path, &series.kde)?;

    log.info(format!(
        "evaluate: {} items, MAE {:.2} mL, MAPE {:.2}%, r {:.4}, R^2 {:.4}, cosine {:.4}",
        metrics.n_items,
        metrics.mae_ml,
        metrics.mape_percent,
        metrics.pearson_r,
        metrics.r_squared,
        metrics.cosine_similarity
    ));

    let inputs = BTreeMap::from([
        ("predictions".into(), predictions.display().to_string()),
        ("kde_bandwidth".into(), series.bandwidth.to_string()),
    ]);
    write_run_record(
        &out.join("run.json"),
        "evaluate",
        started,
        inputs,
        &[&metrics_path, &cdf_path, &kde_path],
    )
}

fn cmd_report(cfg: &FileConfig, _log: &Log, metrics: Vec<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    let out = default_out(cfg, out, "report.txt");
    ensure_parent(&out)?;

    let reports = metrics
        .iter()
        .map(|path| {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            Ok(report::NamedReport { name, metrics: stereovol_core::eval::MetricsReport::load(path)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = report::comparison_table(&reports);
    // The table is the command's product, so it prints regardless of level.
    print!("{table}");
    std::fs::write(&out, &table).map_err(|e| Error::io(&out, e))?;

    let inputs = metrics
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("metrics_{i}"), p.display().to_string()))
        .collect();
    write_run_record(&run_record_sibling(&out), "report", started, inputs, &[&out])
}

fn cmd_nutrition(
    cfg: &FileConfig,
    log: &Log,
    predictions: PathBuf,
    db: PathBuf,
    out: Option<PathBuf>,
) -> Result<()> {
    let started = Instant::now();
    let out = default_out(cfg, out, "nutrition.json");
    ensure_parent(&out)?;

    let preds = PredictionSet::load_jsonl(&predictions)?;
    let database = NutrientDb::load(&db)?;
    let nutrition = scale_prediction_set(&preds, &database)?;
    nutrition.save(&out)?;
    log.info(format!(
        "nutrition: {} items, MAE energy {:.2} kcal, protein {:.2} g, carbs {:.2} g, fat {:.2} g",
        nutrition.rows.len(),
        nutrition.mae.energy_kcal,
        nutrition.mae.protein_g,
        nutrition.mae.carbohydrate_g,
        nutrition.mae.fat_g
    ));

    let inputs = BTreeMap::from([
        ("predictions".into(), predictions.display().to_string()),
        ("db".into(), db.display().to_string()),
    ]);
    write_run_record(&run_record_sibling(&out), "nutrition", started, inputs, &[&out])
}

#[allow(clippy::too_many_arguments)]
fn cmd_vlm_baseline(
    cfg: &FileConfig,
    log: &Log,
    mode: &str,
    manifest: PathBuf,
    out: Option<PathBuf>,
    replay: Option<PathBuf>,
    record: Option<PathBuf>,
    model: String,
    temperature: f64,
    max_attempts: u32,
) -> Result<()> {
    let started = Instant::now();
    let out = default_out(cfg, out, "vlm.predictions.jsonl");
    ensure_parent(&out)?;

    let mode = VlmMode::parse(mode)?;
    let samples = read_manifest(&manifest, cfg)?;
    let rows: Vec<TrainRow> = samples.iter().map(TrainRow::from).collect();
    let policy = RetryPolicy { max_attempts, ..RetryPolicy::default() };

    let (preds, run_manifest) = match (&replay, &record) {
        (Some(tape_path), _) => {
            let transport = ReplayTransport::new(FixtureTape::load(tape_path)?);
            run_vlm_baseline(&rows, mode, &transport, &policy)?
        }
        (None, Some(tape_path)) => {
            let live = http::HttpChatTransport::from_env(model, temperature)?;
            let recorder = RecordingTransport::new(&live);
            let result = run_vlm_baseline(&rows, mode, &recorder, &policy)?;
            let tape = recorder.into_tape();
            ensure_parent(tape_path)?;
            tape.save(tape_path)?;
            log.info(format!("vlm-baseline: recorded {} exchanges to {}", tape.len(), tape_path.display()));
            result
        }
        (None, None) => {
            let live = http::HttpChatTransport::from_env(model, temperature)?;
            run_vlm_baseline(&rows, mode, &live, &policy)?
        }
    };

    preds.save_jsonl(&out)?;
    let manifest_out = out.with_extension("manifest.json");
    run_manifest.save(&manifest_out)?;
    log.info(format!(
        "vlm-baseline: {} of {} parsed ({} missing) via {}",
        run_manifest.parsed, run_manifest.n_rows, run_manifest.missing, run_manifest.transport
    ));

    let mut inputs = BTreeMap::from([
        ("mode".into(), mode.name().to_string()),
        ("manifest".into(), manifest.display().to_string()),
        ("max_attempts".into(), max_attempts.to_string()),
    ]);
    if let Some(p) = &replay {
        inputs.insert("replay".into(), p.display().to_string());
    }
    if let Some(p) = &record {
        inputs.insert("record".into(), p.display().to_string());
    }
    write_run_record(&run_record_sibling(&out), "vlm-baseline", started, inputs, &[&out, &manifest_out])
}
