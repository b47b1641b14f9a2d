//! One function per subcommand. Each checks its inputs up front and writes
//! outputs only after every computation has succeeded.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mbert_core::baseline::{
    write_selected_features, FeatureSchema, LearnerConfig, LearnerKind, TabularModel,
    TabularPipeline, CHI2_TOP_K,
};
use mbert_core::evaluation::evaluate_predictions;
use mbert_core::event_model::{load_cohort, save_cohort, Labels};
use mbert_core::metrics::{roc_curve, write_roc_csv, EvalReport, StratumKey};
use mbert_core::model::{load_checkpoint, save_checkpoint, Task};
use mbert_core::pipeline::prepare;
use mbert_core::synth::{generate_cohort, RangeTable};
use mbert_core::tokenizer::{load_sequences, save_sequences, TokenizedSequence, Vocabulary};
use mbert_core::train::{init_model, predict, train_with_validator, Predictions, TrainingLog};
use mbert_core::{Error, Result};

use crate::config::RunConfig;

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(io_err(path))
}

fn sequences_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.prepared_dir().join(format!("{split}.jsonl"))
}

fn split_cohort_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.prepared_dir().join(format!("{split}_cohort.jsonl"))
}

pub fn predictions_path(cfg: &RunConfig, model: &str, task: Task) -> PathBuf {
    cfg.reports_dir()
        .join(format!("predictions_{model}_{task}.csv"))
}

pub fn roc_path(cfg: &RunConfig, model: &str) -> PathBuf {
    cfg.reports_dir().join(format!("roc_{model}_binary.csv"))
}

pub fn eval_report_path(cfg: &RunConfig) -> PathBuf {
    cfg.reports_dir().join(format!("eval_{}.csv", cfg.task))
}

pub fn baseline_report_path(cfg: &RunConfig) -> PathBuf {
    cfg.reports_dir().join(format!("baseline_{}.csv", cfg.task))
}

/// Generates the synthetic cohort, its reference ranges, and a copy of the
/// generator settings next to them.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let synth = cfg.synth_config();
    synth.validate()?;
    let generated = generate_cohort(&synth)?;
    let cohort_path = cfg.cohort_path();
    let ranges_path = cfg.ranges_path();
    create_parent(&cohort_path)?;
    create_parent(&ranges_path)?;
    save_cohort(&generated.cohort, &cohort_path)?;
    generated.ranges.save(&ranges_path)?;
    write_text(&cfg.work_dir.join("synth.toml"), &synth.to_toml())?;
    log::info!(
        "wrote {} admissions to {}",
        generated.cohort.len(),
        cohort_path.display()
    );
    Ok(())
}

/// Splits, windows and tokenizes the cohort; the vocabulary comes from the
/// training split alone.
pub fn cmd_prep(cfg: &RunConfig) -> Result<()> {
    let cohort_path = cfg.cohort_path();
    let ranges_path = cfg.ranges_path();
    require(&cohort_path, "cohort file")?;
    require(&ranges_path, "range table")?;
    let cohort = load_cohort(&cohort_path)?;
    let ranges = RangeTable::load(&ranges_path)?;
    let data = prepare(&cohort, &ranges, cfg.seed, cfg.model_config().max_len)?;

    create_dir(&cfg.prepared_dir())?;
    for (name, seqs, split) in [
        ("train", &data.train, &data.split.train),
        ("valid", &data.valid, &data.split.valid),
        ("test", &data.test, &data.split.test),
    ] {
        save_sequences(seqs, &sequences_path(cfg, name))?;
        save_cohort(split, &split_cohort_path(cfg, name))?;
    }
    let vocab_path = cfg.vocab_path();
    create_parent(&vocab_path)?;
    data.vocab.save(&vocab_path)?;
    log::info!(
        "prepared {}/{}/{} sequences, vocabulary of {} tokens",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        data.vocab.len()
    );
    Ok(())
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<TokenizedSequence>> {
    let path = sequences_path(cfg, split);
    require(&path, "prepared split")?;
    load_sequences(&path)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let path = cfg.vocab_path();
    require(&path, "vocabulary")?;
    Vocabulary::load(&path)
}

/// Trains the sequence model and saves the best-epoch checkpoint together
/// with `training_log.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainingLog> {
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let vocab = load_vocab(cfg)?;
    let train_set = load_split(cfg, "train")?;
    let valid_set = load_split(cfg, "valid")?;
    if valid_set.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let model = init_model(&model_cfg, vocab.len(), &train_set)?;
    let start = Instant::now();
    let (model, log) = train_with_validator(model, &train_set, |epoch, m| {
        let loss = m.mean_loss(&valid_set)?;
        log::info!(
            "epoch {epoch}: valid loss {loss:.5} ({:.0?})",
            start.elapsed()
        );
        Ok(loss)
    })?;
    let dir = cfg.checkpoint_dir();
    save_checkpoint(&model, &dir, &vocab.hash())?;
    log.save(&dir.join("training_log.csv"))?;
    log::info!(
        "best epoch {}, checkpoint in {}",
        log.best_epoch,
        dir.display()
    );
    Ok(log)
}

fn predictions_csv(ids: &[String], preds: &Predictions, labels: &[Labels]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    match preds {
        Predictions::Binary(p) => {
            w.write_record(["admission_id", "label", "score"])?;
            for ((id, s), l) in ids.iter().zip(p).zip(labels) {
                w.write_record([id.clone(), l.binary.to_string(), s.to_string()])?;
            }
        }
        Predictions::Category(p) => {
            w.write_record(["admission_id", "label", "p0", "p1", "p2"])?;
            for ((id, probs), l) in ids.iter().zip(p).zip(labels) {
                let mut rec = vec![id.clone(), l.category.to_string()];
                rec.extend(probs.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        Predictions::Real(p) => {
            w.write_record(["admission_id", "label", "prediction"])?;
            for ((id, v), l) in ids.iter().zip(p).zip(labels) {
                w.write_record([id.clone(), l.real.to_string(), v.to_string()])?;
            }
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("predictions csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

fn roc_csv(scores: &[f64], labels: &[u8]) -> Result<String> {
    let mut buf = Vec::new();
    write_roc_csv(&roc_curve(scores, labels)?, &mut buf)?;
    Ok(String::from_utf8(buf).expect("numeric csv"))
}

/// Scores the test split with the checkpoint for `cfg.task`. Writes the
/// report, per-admission predictions and, for the binary task, the ROC curve.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let dir = cfg.checkpoint_dir();
    require(&dir.join("manifest.toml"), "checkpoint")?;
    let vocab = load_vocab(cfg)?;
    let test = load_split(cfg, "test")?;
    let (model, _) = load_checkpoint(&dir, Some(&vocab.hash()))?;
    if model.task() != cfg.task {
        return Err(Error::Validation(format!(
            "checkpoint {} was trained for the {} task, not {}",
            dir.display(),
            model.task(),
            cfg.task
        )));
    }
    let preds = predict(&model, &test)?;
    let labels: Vec<Labels> = test.iter().map(TokenizedSequence::labels).collect();
    let keys: Vec<StratumKey> = test.iter().map(TokenizedSequence::stratum_key).collect();
    let ids: Vec<String> = test.iter().map(|s| s.admission_id.clone()).collect();

    let mut report = EvalReport::new(cfg.hash());
    evaluate_predictions(&mut report, "mbert", &preds, &labels, &keys)?;
    let preds_text = predictions_csv(&ids, &preds, &labels)?;
    let roc = match &preds {
        Predictions::Binary(p) => {
            let y: Vec<u8> = labels.iter().map(|l| l.binary).collect();
            Some(roc_csv(p, &y)?)
        }
        _ => None,
    };

    write_text(&eval_report_path(cfg), &report.to_csv_string())?;
    write_text(&predictions_path(cfg, "mbert", cfg.task), &preds_text)?;
    if let Some(text) = roc {
        write_text(&roc_path(cfg, "mbert"), &text)?;
    }
    Ok(report)
}

/// Class labels chi² ranks features against. The real task has no classes,
/// so it borrows the binary split of the same LOS.
fn selection_labels(task: Task, labels: &[Labels]) -> Vec<u8> {
    match task {
        Task::Category => labels.iter().map(|l| l.category).collect(),
        Task::Binary | Task::Real => labels.iter().map(|l| l.binary).collect(),
    }
}

/// Fits the tabular pipeline on the training split and trains each learner.
pub fn cmd_baseline(cfg: &RunConfig, learners: &[LearnerKind]) -> Result<EvalReport> {
    let mut cohorts = Vec::new();
    for split in SPLITS {
        let path = split_cohort_path(cfg, split);
        require(&path, "prepared split cohort")?;
        cohorts.push(load_cohort(&path)?);
    }
    let schema = FeatureSchema::fit(&cohorts[0]);
    let raw = cohorts
        .iter()
        .map(|c| schema.dataset(c))
        .collect::<Result<Vec<_>>>()?;
    let pipeline = TabularPipeline::fit(
        &raw[0].x,
        &selection_labels(cfg.task, &raw[0].labels),
        CHI2_TOP_K,
    )?;
    let selected_names = pipeline.selected_names(schema.names());
    let data = raw
        .iter()
        .map(|d| Ok(d.with_features(pipeline.transform(&d.x)?, selected_names.clone())))
        .collect::<Result<Vec<_>>>()?;
    let (train, valid, test) = (&data[0], &data[1], &data[2]);

    let mut report = EvalReport::new(cfg.hash());
    let mut prediction_files = Vec::new();
    for &kind in learners {
        let lc = LearnerConfig::new(kind, cfg.task, cfg.seed);
        let (model, log) =
            TabularModel::fit(&lc, &train.x, &train.labels, &valid.x, &valid.labels)?;
        log::info!("{}: best epoch {}", kind.as_str(), log.best_epoch);
        let preds = model.predict(&test.x)?;
        evaluate_predictions(
            &mut report,
            kind.as_str(),
            &preds,
            &test.labels,
            &test.strata,
        )?;
        let text = predictions_csv(&test.admission_ids, &preds, &test.labels)?;
        prediction_files.push((predictions_path(cfg, kind.as_str(), cfg.task), text));
    }

    let mut selected = Vec::new();
    write_selected_features(
        schema.names(),
        pipeline.scores(),
        pipeline.selected(),
        &mut selected,
    )?;
    let reports = cfg.reports_dir();
    write_text(&baseline_report_path(cfg), &report.to_csv_string())?;
    write_text(
        &reports.join(format!("selected_features_{}.tsv", cfg.task)),
        std::str::from_utf8(&selected).expect("utf-8 names"),
    )?;
    for (path, text) in prediction_files {
        write_text(&path, &text)?;
    }
    let features = cfg.features_dir();
    create_dir(&features)?;
    for (split, d) in SPLITS.iter().zip(&data) {
        d.save_csv(&features.join(format!("{split}.csv")))?;
    }
    Ok(report)
}

/// Reads a binary predictions file written by `eval` or `baseline` and
/// exports its ROC curve.
pub fn cmd_roc(cfg: &RunConfig, model: &str) -> Result<PathBuf> {
    let input = predictions_path(cfg, model, Task::Binary);
    require(&input, "binary predictions file")?;
    let mut reader = csv::Reader::from_path(&input)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |field: &str| Error::Record {
            line: i + 2,
            message: format!("bad {field} in {}", input.display()),
        };
        labels.push(
            rec.get(1)
                .and_then(|v| v.parse::<u8>().ok())
                .ok_or_else(|| bad("label"))?,
        );
        scores.push(
            rec.get(2)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| bad("score"))?,
        );
    }
    let text = roc_csv(&scores, &labels)?;
    let out = roc_path(cfg, model);
    write_text(&out, &text)?;
    Ok(out)
}
