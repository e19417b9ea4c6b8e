//! Declarative run configuration.
//!
//! A run file is JSON with a `schema` field. Every section is optional and
//! falls back to its defaults; stage seeds are derived from the global seed
//! and never read from the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapt::{AdaptConfig, DEFAULT_FRACTIONS};
use crate::calibrate::CalibConfig;
use crate::eegpack::DatasetManifest;
use crate::error::{Error, Result};
use crate::preprocess::PreprocConfig;
use crate::synthgen::SynthConfig;
use crate::trainer::TrainConfig;

pub const SCHEMA: &str = "restcal-run/1";

/// Offsets added to the global seed for each stage.
pub mod seed_offset {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const CALIB: u64 = 4;
    pub const ADAPT: u64 = 5;
    pub const SWEEP: u64 = 6;
}

/// Expected model shape. Unset fields are taken from the data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: Option<usize>,
    pub samples: Option<usize>,
    pub classes: Option<usize>,
    /// Overrides the derived initialization seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    /// Directory of an existing pack. When absent the synthetic generator
    /// writes one under the output directory.
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    pub preproc: PreprocConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub calib: CalibConfig,
    pub adapt: AdaptConfig,
    pub targets: Vec<String>,
    pub output: PathBuf,
    pub seed: u64,
    pub val_fraction: f64,
    pub sweep_fractions: Vec<f64>,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            schema: SCHEMA.into(),
            dataset: None,
            synth: SynthConfig::default(),
            preproc: PreprocConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            calib: CalibConfig::default(),
            adapt: AdaptConfig::default(),
            targets: Vec::new(),
            output: PathBuf::from("runs"),
            seed: 0,
            val_fraction: 0.2,
            sweep_fractions: DEFAULT_FRACTIONS.to_vec(),
            workers: None,
        };
        c.derive_seeds();
        c
    }
}

impl RunConfig {
    /// Sets every stage seed from the global seed.
    pub fn derive_seeds(&mut self) {
        self.train.seed = self.seed.wrapping_add(seed_offset::TRAIN);
        self.calib.seed = self.seed.wrapping_add(seed_offset::CALIB);
        self.adapt.seed = self.seed.wrapping_add(seed_offset::ADAPT);
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(seed_offset::SPLIT)
    }

    pub fn init_seed(&self) -> u64 {
        self.model.seed.unwrap_or(self.seed.wrapping_add(seed_offset::INIT))
    }

    pub fn sweep_seed(&self) -> u64 {
        self.seed.wrapping_add(seed_offset::SWEEP)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema != SCHEMA {
            v.push(format!("schema must be \"{SCHEMA}\", got \"{}\"", self.schema));
        }
        v.extend(self.preproc.violations());
        if self.dataset.is_none() {
            v.extend(self.synth.violations(self.preproc.band_hi));
        }
        v.extend(self.train.violations());
        v.extend(self.calib.violations());
        v.extend(self.adapt.violations());
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            v.push(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if let Some(f) = self.sweep_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            v.push(format!("sweep_fractions entry {f} outside (0, 1]"));
        }
        if self.workers == Some(0) {
            v.push("workers must be >= 1".into());
        }
        if let Some(k) = self.model.classes.filter(|&k| k < 2) {
            v.push(format!("model.classes must be >= 2, got {k}"));
        }
        if let Some(c) = self.model.channels.filter(|&c| c < 1) {
            v.push(format!("model.channels must be >= 1, got {c}"));
        }
        if let Some(t) = self.model.samples.filter(|&t| t < 64) {
            v.push(format!("model.samples must be >= 64, got {t}"));
        }
        v
    }

    /// Checks the declared model shape against a dataset and returns the
    /// resolved `(channels, samples, classes)`.
    pub fn model_shape(&self, manifest: &DatasetManifest) -> Result<(usize, usize, usize)> {
        let resolved = (manifest.channels, self.preproc.epoch_samples(), manifest.classes);
        let declared = [
            ("model.channels", self.model.channels, resolved.0),
            ("model.samples", self.model.samples, resolved.1),
            ("model.classes", self.model.classes, resolved.2),
        ];
        let v: Vec<String> = declared
            .iter()
            .filter_map(|(name, want, got)| {
                want.filter(|w| w != got)
                    .map(|w| format!("{name} is {w} but the data gives {got}"))
            })
            .collect();
        if v.is_empty() {
            Ok(resolved)
        } else {
            Err(Error::Config(v))
        }
    }

    /// Resolved configuration as JSON, stage seeds included.
    pub fn snapshot(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for (stage, seed) in [
            ("train", self.train.seed),
            ("calib", self.calib.seed),
            ("adapt", self.adapt.seed),
        ] {
            v[stage]["seed"] = Value::from(seed);
        }
        v
    }

    /// Writes the snapshot to `path`.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.snapshot()).expect("snapshot serializes");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(g), Value::Object(k)) = (given, known) else {
        return;
    };
    for (key, val) in g {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match k.get(key) {
            Some(kv) => unknown_keys(val, kv, &path, out),
            None => out.push(path),
        }
    }
}

fn strip_keys(v: &mut Value, path: &[&str]) {
    match path {
        [] => {}
        [last] => {
            if let Value::Object(m) = v {
                m.remove(*last);
            }
        }
        [head, rest @ ..] => {
            if let Some(child) = v.get_mut(*head) {
                strip_keys(child, rest);
            }
        }
    }
}

/// Parses a run configuration from JSON text, filling defaults and
/// collecting every violation before failing.
///
/// Relative paths are resolved against `base`. The snapshot written by
/// [`RunConfig::write_snapshot`] parses back to the same configuration
/// because the stage seeds it records are derived again from `seed`.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig> {
    let mut value: Value =
        serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
    if !value.is_object() {
        return Err(Error::Config(vec!["top level must be a JSON object".into()]));
    }
    // Stage seeds appear in snapshots; they are derived, so drop them.
    for stage in ["train", "calib", "adapt"] {
        strip_keys(&mut value, &[stage, "seed"]);
    }
    let mut known = serde_json::to_value(RunConfig::default()).expect("config serializes");
    // Optional sections default to null, so give them their object shape.
    known["model"] = serde_json::to_value(ModelConfig {
        channels: Some(0),
        samples: Some(0),
        classes: Some(0),
        seed: Some(0),
    })
    .expect("model config serializes");

    let mut problems = Vec::new();
    let mut unknown = Vec::new();
    unknown_keys(&value, &known, "", &mut unknown);
    for path in &unknown {
        problems.push(format!("unknown key `{path}`"));
        let parts: Vec<&str> = path.split('.').collect();
        strip_keys(&mut value, &parts);
    }

    let mut cfg: RunConfig = match serde_path_to_error::deserialize(value) {
        Ok(c) => c,
        Err(e) => {
            let path = e.path().to_string();
            problems.push(format!("{path}: {}", e.into_inner()));
            return Err(Error::Config(problems));
        }
    };
    cfg.derive_seeds();
    problems.extend(cfg.violations());
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if let Some(d) = &cfg.dataset {
        cfg.dataset = Some(base.join(d));
    }
    cfg.output = base.join(&cfg.output);
    Ok(cfg)
}

/// Reads and validates the run configuration at `path`.
pub fn validate_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Config(vec![format!("cannot read config file {}: {e}", path.display())])
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_config(&text, base).map_err(|e| match e {
        Error::Config(v) => Error::Config(
            v.into_iter()
                .map(|m| format!("{}: {m}", path.display()))
                .collect(),
        ),
        other => other,
    })
}
