//! The operations behind each CLI subcommand. Everything a command writes goes
//! under its output directory, listed in `manifest.json`.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ResolvedConfig;
use super::evaluate::{category_embeddings, duplicate_interaction, evaluate_split, grounding_report, write_dump};
use super::train::{train_model, EpochRecord, TRAIN_LOG_HEADER};
use crate::checkpoint::Checkpoint;
use crate::counters::CountingModel;
use crate::data::splits::{build_howmany_splits, SplitInputs, DEFAULT_TEST_SIZE};
use crate::data::vqa::{load_vg_qas, load_vqa_annotations, read_manifest, write_manifest, LoadWarning};
use crate::data::{Dataset, FilterReason, QaRecord, Split};
use crate::error::{Error, Result};
use crate::eval::{write_metric_csv, MetricReport};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DUMP_FILE: &str = "predictions.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const HISTOGRAM_FILE: &str = "filter_histogram.csv";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    files: Vec<String>,
}

/// Writes `manifest.json` listing `files` relative to `out`.
pub fn write_output_manifest(out: &Path, files: &[PathBuf]) -> Result<PathBuf> {
    let mut rel: Vec<String> = files
        .iter()
        .map(|f| f.strip_prefix(out).unwrap_or(f).to_string_lossy().into_owned())
        .collect();
    rel.sort();
    rel.dedup();
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&Manifest { files: rel })?)?;
    Ok(path)
}

/// Synthetic data from the config, or the dataset directory it names.
pub fn load_dataset(cfg: &ResolvedConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => Dataset::read_dir(dir),
        None => Dataset::synthetic(&cfg.synth, cfg.train_scenes, cfg.dev_scenes, cfg.test_scenes),
    }
}

pub struct TrainReport {
    pub best_epoch: usize,
    pub dev: MetricReport,
    pub log: Vec<EpochRecord>,
    pub files: Vec<PathBuf>,
    pub model: CountingModel,
}

pub fn cmd_train(cfg: &ResolvedConfig, progress: &mut dyn FnMut(&EpochRecord)) -> Result<TrainReport> {
    let data = load_dataset(cfg)?;
    cmd_train_on(cfg, &data, progress)
}

/// [`cmd_train`] on an already loaded dataset.
pub fn cmd_train_on(cfg: &ResolvedConfig, data: &Dataset, progress: &mut dyn FnMut(&EpochRecord)) -> Result<TrainReport> {
    let out = &cfg.out;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let p = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&p, cfg.to_json())?;
    files.push(p);

    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log_file = BufWriter::new(File::create(&log_path)?);
    writeln!(log_file, "{TRAIN_LOG_HEADER}")?;
    let mut io_err = None;
    let outcome = train_model(cfg, data, &mut |rec| {
        if let Err(e) = writeln!(log_file, "{}", rec.csv_line()).and_then(|_| log_file.flush()) {
            io_err.get_or_insert(e);
        }
        progress(rec);
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    drop(log_file);
    files.push(log_path);

    let p = out.join(CHECKPOINT_FILE);
    outcome.model.checkpoint().write(&mut BufWriter::new(File::create(&p)?))?;
    files.push(p);

    let (_, dev) = evaluate_split(&outcome.model, data, "dev", &data.dev, cfg.execution())?;
    let p = out.join(METRICS_FILE);
    write_metric_csv(BufWriter::new(File::create(&p)?), std::slice::from_ref(&dev))?;
    files.push(p);
    files.push(write_output_manifest(out, &files)?);
    Ok(TrainReport { best_epoch: outcome.best_epoch, dev, log: outcome.log, files, model: outcome.model })
}

pub fn load_checkpoint(path: &Path) -> Result<CountingModel> {
    let ck = Checkpoint::read(&mut BufReader::new(File::open(path)?))?;
    CountingModel::from_checkpoint(&ck)
}

pub struct EvalReport {
    pub report: MetricReport,
    pub files: Vec<PathBuf>,
}

/// Evaluates a checkpoint on one split. The checkpoint must match the model kind
/// and layer sizes of `cfg`.
pub fn cmd_eval(cfg: &ResolvedConfig, checkpoint: &Path, split: Split, glove: Option<&Path>) -> Result<EvalReport> {
    let data = load_dataset(cfg)?;
    cmd_eval_on(cfg, &data, checkpoint, split, glove)
}

pub fn cmd_eval_on(
    cfg: &ResolvedConfig,
    data: &Dataset,
    checkpoint: &Path,
    split: Split,
    glove: Option<&Path>,
) -> Result<EvalReport> {
    let ck = Checkpoint::read(&mut BufReader::new(File::open(checkpoint)?))?;
    let model = CountingModel::from_checkpoint_as(&ck, cfg.model, cfg.dims())?;
    let questions = data.split(split);
    if questions.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let exec = cfg.execution();
    let (preds, mut report) = evaluate_split(&model, data, split.name(), questions, exec)?;
    report.duplicate_interaction = duplicate_interaction(&model, data, questions, exec)?;

    if model.kind.uses_scene() {
        let image_ids: BTreeSet<&str> = questions.iter().map(|q| q.image_id.as_str()).collect();
        let scenes: Vec<_> = image_ids.iter().map(|id| data.scene(id)).collect::<Result<_>>()?;
        // Only categories that training questions ask about.
        let asked: BTreeSet<&str> = data.train.iter().map(|q| q.subject.as_str()).collect();
        let categories: BTreeSet<String> = scenes
            .iter()
            .flat_map(|s| s.ground_truth.iter().map(|g| g.category.clone()))
            .filter(|c| asked.contains(c.as_str()))
            .collect();
        if !categories.is_empty() {
            let mut reader = glove.map(|p| File::open(p).map(BufReader::new)).transpose()?;
            let emb = category_embeddings(&model, &categories, reader.as_mut().map(|r| r as &mut dyn std::io::BufRead))?;
            for c in categories.iter().filter(|c| !emb.contains_key(*c)) {
                eprintln!("warning: no embedding for category {c:?}; grounding quality skipped");
            }
            report.grounding = grounding_report(&model, &scenes, &categories, &emb, exec)?;
        }
    }

    let out = &cfg.out;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let p = out.join(METRICS_FILE);
    write_metric_csv(BufWriter::new(File::create(&p)?), std::slice::from_ref(&report))?;
    files.push(p);
    let p = out.join(DUMP_FILE);
    write_dump(BufWriter::new(File::create(&p)?), data, questions, &preds)?;
    files.push(p);
    let p = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&p, cfg.to_json())?;
    files.push(p);
    files.push(write_output_manifest(out, &files)?);
    Ok(EvalReport { report, files })
}

/// Materializes the synthetic dataset described by `cfg` into `cfg.out`.
pub fn cmd_synth(cfg: &ResolvedConfig) -> Result<Vec<PathBuf>> {
    let data = Dataset::synthetic(&cfg.synth, cfg.train_scenes, cfg.dev_scenes, cfg.test_scenes)?;
    let mut files = data.write_dir(&cfg.out)?;
    let p = cfg.out.join(RESOLVED_CONFIG_FILE);
    fs::write(&p, cfg.to_json())?;
    files.push(p);
    files.push(write_output_manifest(&cfg.out, &files)?);
    Ok(files)
}

/// Input files of the count filter.
#[derive(Clone, Debug, Default)]
pub struct FilterInputs {
    pub train_questions: PathBuf,
    pub train_annotations: PathBuf,
    pub val_questions: Option<PathBuf>,
    pub val_annotations: Option<PathBuf>,
    pub visual_genome: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub test_size: Option<usize>,
    pub seed: u64,
}

pub struct FilterReport {
    pub train: usize,
    pub train_from_vqa: usize,
    pub dev: usize,
    pub test: usize,
    pub histogram: Vec<(FilterReason, usize)>,
    pub warnings: Vec<LoadWarning>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_filter(inputs: &FilterInputs, out: &Path) -> Result<FilterReport> {
    let open = |p: &Path| -> Result<BufReader<File>> {
        File::open(p).map(BufReader::new).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
        })
    };
    let (train, mut warnings) = load_vqa_annotations(open(&inputs.train_questions)?, open(&inputs.train_annotations)?)?;
    let val = match (&inputs.val_questions, &inputs.val_annotations) {
        (Some(q), Some(a)) => {
            let (v, w) = load_vqa_annotations(open(q)?, open(a)?)?;
            warnings.extend(w);
            v
        }
        (None, None) => Vec::new(),
        _ => return Err(Error::InvalidArgument("validation questions and annotations must be given together".into())),
    };
    let vg = match &inputs.visual_genome {
        Some(p) => load_vg_qas(open(p)?, None)?,
        None => Vec::new(),
    };
    let test_manifest = inputs.test_manifest.as_deref().map(|p| read_manifest(open(p)?)).transpose()?;
    let splits = build_howmany_splits(SplitInputs {
        vqa_train: train,
        vqa_val: val,
        vg,
        test_manifest,
        test_size: inputs.test_size.unwrap_or(DEFAULT_TEST_SIZE),
        seed: inputs.seed,
    })?;

    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for (split, qs) in [(Split::Train, &splits.train), (Split::Dev, &splits.dev), (Split::Test, &splits.test)] {
        let p = out.join(format!("{}_manifest.txt", split.name()));
        let ids: Vec<u64> = qs.iter().map(|q| q.question_id).collect();
        write_manifest(BufWriter::new(File::create(&p)?), &ids)?;
        files.push(p);
        let p = out.join(split.qa_file());
        serde_json::to_writer(BufWriter::new(File::create(&p)?), qs as &Vec<QaRecord>)?;
        files.push(p);
    }
    let histogram: Vec<(FilterReason, usize)> =
        FilterReason::ALL.into_iter().map(|r| (r, splits.histogram.get(r))).collect();
    let p = out.join(HISTOGRAM_FILE);
    let mut w = BufWriter::new(File::create(&p)?);
    writeln!(w, "reason,count")?;
    for (r, n) in &histogram {
        writeln!(w, "{r},{n}")?;
    }
    drop(w);
    files.push(p);
    files.push(write_output_manifest(out, &files)?);
    Ok(FilterReport {
        train: splits.train.len(),
        train_from_vqa: splits.train_from_vqa,
        dev: splits.dev.len(),
        test: splits.test.len(),
        histogram,
        warnings,
        files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub entropy_weight: f64,
    pub interaction_weight: f64,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
    pub dev_rmse: f64,
}

/// Trains one model per (entropy weight, interaction weight) pair for `epochs`
/// epochs each and writes `sweep.csv`. Each cell's run lives in its own subdirectory.
pub fn cmd_sweep(
    cfg: &ResolvedConfig,
    entropy_weights: &[f64],
    interaction_weights: &[f64],
    epochs: Option<usize>,
) -> Result<(Vec<SweepCell>, Vec<PathBuf>)> {
    if entropy_weights.is_empty() || interaction_weights.is_empty() {
        return Err(Error::Empty("penalty grid"));
    }
    let data = load_dataset(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let mut cells = Vec::new();
    let mut files = Vec::new();
    for (i, &we) in entropy_weights.iter().enumerate() {
        for (j, &wi) in interaction_weights.iter().enumerate() {
            let mut c = cfg.clone();
            c.entropy_weight = we;
            c.interaction_weight = wi;
            if let Some(e) = epochs {
                c.max_epochs = e;
            }
            c.out = cfg.out.join(format!("cell_{i}_{j}"));
            c.validate()?;
            let r = cmd_train_on(&c, &data, &mut |_| {})?;
            files.extend(r.files.iter().cloned());
            cells.push(SweepCell {
                entropy_weight: we,
                interaction_weight: wi,
                best_epoch: r.best_epoch,
                dev_accuracy: r.dev.accuracy,
                dev_rmse: r.dev.rmse,
            });
        }
    }
    let p = cfg.out.join(SWEEP_FILE);
    let mut w = BufWriter::new(File::create(&p)?);
    writeln!(w, "entropy_weight,interaction_weight,best_epoch,dev_accuracy,dev_rmse")?;
    for c in &cells {
        writeln!(w, "{},{},{},{},{}", c.entropy_weight, c.interaction_weight, c.best_epoch, c.dev_accuracy, c.dev_rmse)?;
    }
    drop(w);
    files.push(p);
    let p = cfg.out.join(RESOLVED_CONFIG_FILE);
    fs::write(&p, cfg.to_json())?;
    files.push(p);
    files.push(write_output_manifest(&cfg.out, &files)?);
    Ok((cells, files))
}
