//! Per-target orchestration of the three stages and their artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.json              resolved configuration
//! data/                    synthetic pack (only when no dataset is given)
//! report.{json,tsv,txt}    run report over all targets
//! <target>/stage1.ckpt     stage-1 model and prototypes
//! <target>/history.jsonl   stage-1 metrics, one epoch per line
//! <target>/audit.json      subjects read while training stage 1
//! <target>/calibrated/     calibrated pack plus provenance.json
//! <target>/adapted.ckpt    adapted model
//! <target>/adapt.json      adaptation loss per epoch
//! <target>/result.json     per-target result
//! <target>/features.tsv    feature export (export-features only)
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{
    adapt_model, evaluate, export_features, rs_fraction_sweep, AdaptHistory, FeatureSet, FeatureTable, RunReport,
    SubjectResult,
};
use crate::calibrate::{calibrate_all, CalibratedSet};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::eegpack::{read_manifest, read_pack, loso_split, PackLoader, SplitSpec, Trial, TrialKind, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::losses::PrototypeBank;
use crate::nn::{init_model, ModelBundle};
use crate::preprocess::preprocess_all;
use crate::synthgen::gen_dataset;
use crate::trainer::{train_stage1, TrainHistory};

/// Directory holding the dataset, generating the synthetic pack if needed.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(d) = &cfg.dataset {
        if !d.join(MANIFEST_FILE).is_file() {
            return Err(Error::Config(vec![format!(
                "dataset: no {MANIFEST_FILE} in {}",
                d.display()
            )]));
        }
        return Ok(d.clone());
    }
    let dir = cfg.output.join("data");
    let stamp = dir.join("synth.json");
    let want = serde_json::to_string_pretty(&cfg.synth).expect("synth config serializes");
    if dir.join(MANIFEST_FILE).is_file() && fs::read_to_string(&stamp).is_ok_and(|s| s == want) {
        return Ok(dir);
    }
    log::info!("generating synthetic dataset in {}", dir.display());
    gen_dataset(&cfg.synth, &dir)?;
    fs::write(&stamp, want).map_err(|e| Error::io(&stamp, e))?;
    Ok(dir)
}

/// Targets named on the command line or in the config, or every subject.
pub fn resolve_targets(cfg: &RunConfig, dataset: &Path, cli: &[String], all: bool) -> Result<Vec<String>> {
    let subjects = read_manifest(dataset)?.subjects();
    let targets = if all {
        subjects.clone()
    } else if !cli.is_empty() {
        cli.to_vec()
    } else if !cfg.targets.is_empty() {
        cfg.targets.clone()
    } else {
        return Err(Error::Config(vec![
            "targets: no target subject given (use --target, --all-subjects or `targets`)".into(),
        ]));
    };
    let unknown: Vec<String> = targets
        .iter()
        .filter(|t| !subjects.contains(t))
        .map(|t| format!("targets: subject `{t}` not in dataset"))
        .collect();
    if unknown.is_empty() {
        Ok(targets)
    } else {
        Err(Error::Config(unknown))
    }
}

pub fn target_dir(cfg: &RunConfig, target: &str) -> PathBuf {
    cfg.output.join(target)
}

/// Outcome of stage 1 for one held-out subject.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub model: ModelBundle,
    pub bank: PrototypeBank,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub target: String,
    pub subjects_read: Vec<String>,
    pub trials_read: usize,
    pub target_reads: usize,
}

/// Trains stage 1 with `target` held out, reading only through `loader`.
///
/// Fails if any trial of the target subject was read.
pub fn run_stage1(cfg: &RunConfig, loader: &PackLoader, target: &str) -> Result<(Stage1, Audit)> {
    let (c, t, k) = cfg.model_shape(loader.manifest())?;
    let spec = SplitSpec {
        val_fraction: cfg.val_fraction,
        ..SplitSpec::new(target, cfg.split_seed())
    };
    let split = loso_split(loader.manifest(), &spec)?;
    loader.clear_log();
    let train_raw = loader.load(&split.train)?;
    let val_raw = loader.load(&split.val)?;
    let reads = loader.reads();
    let audit = Audit {
        target: target.to_string(),
        subjects_read: loader.subjects_read().into_iter().collect::<BTreeSet<_>>().into_iter().collect(),
        trials_read: reads.len(),
        target_reads: reads.iter().filter(|(_, s)| s == target).count(),
    };
    if audit.target_reads > 0 {
        return Err(Error::Split(format!(
            "stage 1 read {} trials of held-out subject {target}",
            audit.target_reads
        )));
    }
    let train = preprocess_all(&train_raw, &cfg.preproc)?;
    let val = preprocess_all(&val_raw, &cfg.preproc)?;
    let init = init_model(c, t, k, cfg.init_seed())?;
    let (model, bank, history) = train_stage1(init, &train, &val, &cfg.train)?;
    if let Some(why) = &history.aborted {
        log::warn!("stage 1 for {target} stopped early: {why}");
    }
    Ok((
        Stage1 {
            model,
            bank,
            history,
        },
        audit,
    ))
}

/// Preprocessed epochs of the held-out subject.
#[derive(Debug, Clone)]
pub struct TargetData {
    /// Resting-state epochs used for calibration.
    pub rs: Vec<Trial>,
    /// Labeled task epochs used for testing.
    pub ts: Vec<Trial>,
}

pub fn load_target(cfg: &RunConfig, loader: &PackLoader, target: &str) -> Result<TargetData> {
    let ids: Vec<String> = loader
        .manifest()
        .trials
        .iter()
        .filter(|r| r.subject == target)
        .map(|r| r.id.clone())
        .collect();
    if ids.is_empty() {
        return Err(Error::Split(format!("subject {target} has no trials")));
    }
    let epochs = preprocess_all(&loader.load(&ids)?, &cfg.preproc)?;
    let (rs, ts): (Vec<Trial>, Vec<Trial>) = epochs.into_iter().partition(|t| t.kind == TrialKind::RS);
    Ok(TargetData { rs, ts })
}

/// Calibration and adaptation of one stage-1 model on one target.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub calibrated: CalibratedSet,
    pub model: ModelBundle,
    pub history: AdaptHistory,
}

pub fn calibrate_and_adapt(cfg: &RunConfig, stage1: &Stage1, data: &TargetData) -> Result<Adapted> {
    let calibrated = calibrate_all(&stage1.model, &stage1.bank, &data.rs, &cfg.calib)?;
    let (model, history) = adapt_model(&stage1.model, &calibrated.as_trials(), &cfg.adapt)?;
    Ok(Adapted {
        calibrated,
        model,
        history,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Stage 1 for `target` with its artifacts written. A run stopped by a
/// non-finite loss still writes its best checkpoint, then fails.
pub fn train_target(cfg: &RunConfig, loader: &PackLoader, target: &str) -> Result<Stage1> {
    let dir = target_dir(cfg, target);
    let (stage1, audit) = run_stage1(cfg, loader, target)?;
    checkpoint::save(&dir.join("stage1.ckpt"), &stage1.model, Some(&stage1.bank))?;
    write_text(&dir.join("history.jsonl"), &stage1.history.to_jsonl())?;
    write_json(&dir.join("audit.json"), &audit)?;
    if let Some(why) = &stage1.history.aborted {
        return Err(Error::Numerical(format!("stage 1 for {target}: {why}")));
    }
    Ok(stage1)
}

/// Loads a stage-1 checkpoint written by [`train_target`].
pub fn load_stage1(cfg: &RunConfig, target: &str) -> Result<Stage1> {
    let path = target_dir(cfg, target).join("stage1.ckpt");
    let (model, bank) = checkpoint::load(&path)?;
    let bank = bank.ok_or_else(|| Error::Format(format!("{} has no prototypes", path.display())))?;
    Ok(Stage1 {
        model,
        bank,
        history: TrainHistory::default(),
    })
}

/// Calibrates the target's rest epochs and writes the calibrated pack.
pub fn calibrate_target(cfg: &RunConfig, loader: &PackLoader, stage1: &Stage1, target: &str) -> Result<CalibratedSet> {
    let data = load_target(cfg, loader, target)?;
    let set = calibrate_all(&stage1.model, &stage1.bank, &data.rs, &cfg.calib)?;
    set.save(&target_dir(cfg, target).join("calibrated"), stage1.model.arch.classes)?;
    Ok(set)
}

/// Adapts the stage-1 model on the saved calibrated pack.
pub fn adapt_target(cfg: &RunConfig, stage1: &Stage1, target: &str) -> Result<(ModelBundle, AdaptHistory)> {
    let dir = target_dir(cfg, target);
    let (_, calibrated) = read_pack(&dir.join("calibrated"))?;
    let (model, history) = adapt_model(&stage1.model, &calibrated, &cfg.adapt)?;
    checkpoint::save(&dir.join("adapted.ckpt"), &model, None)?;
    write_json(&dir.join("adapt.json"), &history)?;
    Ok((model, history))
}

/// Evaluates the saved stage-1 and adapted models on the target's task epochs.
pub fn eval_target(cfg: &RunConfig, loader: &PackLoader, target: &str) -> Result<SubjectResult> {
    let dir = target_dir(cfg, target);
    let stage1 = load_stage1(cfg, target)?;
    let (adapted, _) = checkpoint::load(&dir.join("adapted.ckpt"))?;
    let data = load_target(cfg, loader, target)?;
    let base = evaluate(&stage1.model, &data.ts)?;
    let after = evaluate(&adapted, &data.ts)?;
    let calibrated = read_manifest(&dir.join("calibrated"))?.trials.len();
    let result = SubjectResult {
        subject: target.to_string(),
        baseline_accuracy: base.accuracy,
        accuracy: after.accuracy,
        confusion: after.confusion,
        calibrated,
        flagged: 0,
        checkpoint: adapted.fingerprint(),
        sweep: Vec::new(),
    };
    write_json(&dir.join("result.json"), &result)?;
    Ok(result)
}

/// All three stages for one target, artifacts included. The sweep runs
/// when `sweep` is set.
pub fn run_target(cfg: &RunConfig, loader: &PackLoader, target: &str, sweep: bool) -> Result<SubjectResult> {
    let dir = target_dir(cfg, target);
    let stage1 = train_target(cfg, loader, target)?;
    let data = load_target(cfg, loader, target)?;
    let base = evaluate(&stage1.model, &data.ts)?;
    let adapted = calibrate_and_adapt(cfg, &stage1, &data)?;
    adapted.calibrated.save(&dir.join("calibrated"), stage1.model.arch.classes)?;
    checkpoint::save(&dir.join("adapted.ckpt"), &adapted.model, None)?;
    write_json(&dir.join("adapt.json"), &adapted.history)?;
    let after = evaluate(&adapted.model, &data.ts)?;
    let rows = if sweep {
        rs_fraction_sweep(
            &stage1.model,
            &stage1.bank,
            &data.rs,
            &data.ts,
            &cfg.calib,
            &cfg.adapt,
            &cfg.sweep_fractions,
            cfg.sweep_seed(),
        )?
    } else {
        Vec::new()
    };
    let result = SubjectResult {
        subject: target.to_string(),
        baseline_accuracy: base.accuracy,
        accuracy: after.accuracy,
        confusion: after.confusion,
        calibrated: adapted.calibrated.trials.len(),
        flagged: adapted.calibrated.flagged.len(),
        checkpoint: adapted.model.fingerprint(),
        sweep: rows,
    };
    write_json(&dir.join("result.json"), &result)?;
    Ok(result)
}

/// Writes the report in JSON, tab-separated and table form.
pub fn write_report(cfg: &RunConfig, report: &RunReport) -> Result<()> {
    write_json(&cfg.output.join("report.json"), report)?;
    write_text(&cfg.output.join("report.tsv"), &report.to_tsv())?;
    write_text(&cfg.output.join("report.txt"), &report.to_table())
}

/// Runs every target in turn and writes the combined report.
pub fn run_pipeline(cfg: &RunConfig, targets: &[String], sweep: bool) -> Result<RunReport> {
    let dataset = prepare_dataset(cfg)?;
    cfg.write_snapshot(&cfg.output.join("config.json"))?;
    let loader = PackLoader::open(&dataset)?;
    cfg.model_shape(loader.manifest())?;
    let mut results = Vec::with_capacity(targets.len());
    for t in targets {
        log::info!("target {t}");
        results.push(run_target(cfg, &loader, t, sweep)?);
    }
    let report = RunReport::new(results, cfg.seed, cfg.snapshot());
    write_report(cfg, &report)?;
    Ok(report)
}

/// Exports task features and subject embeddings of real and calibrated
/// epochs through the stage-1 model.
pub fn export_target_features(cfg: &RunConfig, loader: &PackLoader, target: &str) -> Result<FeatureTable> {
    let dir = target_dir(cfg, target);
    let stage1 = load_stage1(cfg, target)?;
    let data = load_target(cfg, loader, target)?;
    let (_, calibrated) = read_pack(&dir.join("calibrated"))?;
    let method = cfg.calib.method.name();
    let table = export_features(
        &stage1.model,
        &[
            FeatureSet {
                source: "real-ts",
                method: "none",
                trials: &data.ts,
            },
            FeatureSet {
                source: "real-rs",
                method: "none",
                trials: &data.rs,
            },
            FeatureSet {
                source: "calibrated",
                method,
                trials: &calibrated,
            },
        ],
    )?;
    write_text(&dir.join("features.tsv"), &table.to_tsv())?;
    Ok(table)
}

/// Reads back a per-target result written by [`run_target`] or [`eval_target`].
pub fn load_result(cfg: &RunConfig, target: &str) -> Result<SubjectResult> {
    read_json(&target_dir(cfg, target).join("result.json"))
}
