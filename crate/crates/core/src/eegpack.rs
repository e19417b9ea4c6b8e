//! Trial data model, the on-disk pack container and LOSO splitting.
//!
//! A pack is a directory holding `manifest.json` plus one raw file per trial
//! named `<trial-id>.f32`: little-endian `f32`, row-major `[channel][sample]`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PACK_FORMAT: &str = "eegpack/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrialKind {
    /// Resting state, no class label.
    RS,
    /// Task specific, labeled.
    TS,
}

/// One EEG epoch, `data` is `[channels × samples]` in microvolts (or
/// standardized units after preprocessing).
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: String,
    pub subject: String,
    pub session: String,
    pub kind: TrialKind,
    pub label: Option<usize>,
    pub fs: f64,
    pub data: Array2<f32>,
}

impl Trial {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    /// Checks the per-trial invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Load {
            trial: self.id.clone(),
            reason,
        };
        if self.channels() == 0 || self.samples() == 0 {
            return Err(fail(format!("empty data matrix {:?}", self.data.dim())));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(fail(format!("invalid sampling rate {}", self.fs)));
        }
        match (self.kind, self.label) {
            (TrialKind::TS, None) => return Err(fail("TS trial without label".into())),
            (TrialKind::RS, Some(_)) => return Err(fail("RS trial carries a label".into())),
            _ => {}
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(fail(format!("non-finite value at flat index {pos}")));
        }
        Ok(())
    }

    /// Row-major view of the data, copying only if the array is not contiguous.
    pub fn flat(&self) -> std::borrow::Cow<'_, [f32]> {
        match self.data.as_slice() {
            Some(s) => std::borrow::Cow::Borrowed(s),
            None => std::borrow::Cow::Owned(self.data.iter().copied().collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: String,
    pub subject: String,
    pub session: String,
    pub kind: TrialKind,
    pub label: Option<usize>,
    pub file: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub name: String,
    pub classes: usize,
    pub channels: usize,
    pub fs: f64,
    pub trials: Vec<TrialRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.trials {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate trial id `{}`", r.id)));
            }
            if r.shape[0] != self.channels {
                return Err(Error::Format(format!(
                    "trial `{}` has {} channels, manifest declares {}",
                    r.id, r.shape[0], self.channels
                )));
            }
            if let Some(l) = r.label {
                if l >= self.classes {
                    return Err(Error::Format(format!(
                        "trial `{}` label {l} outside [0, {})",
                        r.id, self.classes
                    )));
                }
            }
        }
        Ok(())
    }

    /// Distinct subjects in manifest order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.trials
            .iter()
            .filter(|r| seen.insert(r.subject.as_str()))
            .map(|r| r.subject.clone())
            .collect()
    }

    pub fn record(&self, id: &str) -> Option<&TrialRecord> {
        self.trials.iter().find(|r| r.id == id)
    }
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "trial id `{id}` is not a portable file name"
        )))
    }
}

/// Writes `trials` as a pack, inferring the class count from the labels.
pub fn write_pack(trials: &[Trial], dir: &Path) -> Result<DatasetManifest> {
    let classes = trials
        .iter()
        .filter_map(|t| t.label)
        .max()
        .map_or(0, |m| m + 1);
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pack".to_string());
    write_pack_named(trials, dir, &name, classes)
}

pub fn write_pack_named(
    trials: &[Trial],
    dir: &Path,
    name: &str,
    classes: usize,
) -> Result<DatasetManifest> {
    let first = trials
        .first()
        .ok_or_else(|| Error::Format("cannot write an empty pack".into()))?;
    let (channels, fs) = (first.channels(), first.fs);
    let mut records = Vec::with_capacity(trials.len());
    for t in trials {
        t.validate().map_err(|e| Error::Format(e.to_string()))?;
        check_id(&t.id)?;
        if t.channels() != channels || t.fs != fs {
            return Err(Error::Format(format!(
                "trial `{}` is {}ch @ {} Hz, pack is {}ch @ {} Hz",
                t.id,
                t.channels(),
                t.fs,
                channels,
                fs
            )));
        }
        records.push(TrialRecord {
            id: t.id.clone(),
            subject: t.subject.clone(),
            session: t.session.clone(),
            kind: t.kind,
            label: t.label,
            file: format!("{}.f32", t.id),
            shape: [t.channels(), t.samples()],
        });
    }
    let manifest = DatasetManifest {
        format: PACK_FORMAT.to_string(),
        name: name.to_string(),
        classes,
        channels,
        fs,
        trials: records,
    };
    manifest.validate()?;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, r) in trials.iter().zip(&manifest.trials) {
        let path = dir.join(&r.file);
        let mut bytes = Vec::with_capacity(t.data.len() * 4);
        for v in t.data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

fn load_record(dir: &Path, manifest: &DatasetManifest, r: &TrialRecord) -> Result<Trial> {
    let path = dir.join(&r.file);
    let bytes = fs::read(&path).map_err(|e| Error::Load {
        trial: r.id.clone(),
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    let [c, t] = r.shape;
    if bytes.len() != c * t * 4 {
        return Err(Error::Load {
            trial: r.id.clone(),
            reason: format!(
                "shape mismatch: {} holds {} bytes, expected {} for [{c} x {t}] f32",
                path.display(),
                bytes.len(),
                c * t * 4
            ),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let data = Array2::from_shape_vec((c, t), values).expect("length checked");
    let trial = Trial {
        id: r.id.clone(),
        subject: r.subject.clone(),
        session: r.session.clone(),
        kind: r.kind,
        label: r.label,
        fs: manifest.fs,
        data,
    };
    trial.validate()?;
    Ok(trial)
}

/// Reads a whole pack; trials come back in manifest order.
pub fn read_pack(dir: &Path) -> Result<(DatasetManifest, Vec<Trial>)> {
    let manifest = read_manifest(dir)?;
    let trials = manifest
        .trials
        .iter()
        .map(|r| load_record(dir, &manifest, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, trials))
}

/// Pack reader that records every trial it loads.
///
/// Stage 1 reads its data exclusively through a loader so the set of
/// subjects touched can be audited afterwards.
#[derive(Debug)]
pub struct PackLoader {
    dir: PathBuf,
    manifest: DatasetManifest,
    reads: Mutex<Vec<(String, String)>>,
}

impl PackLoader {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: read_manifest(dir)?,
            reads: Mutex::new(Vec::new()),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Loads the given ids in the order supplied.
    pub fn load(&self, ids: &[String]) -> Result<Vec<Trial>> {
        let index: BTreeMap<&str, &TrialRecord> = self
            .manifest
            .trials
            .iter()
            .map(|r| (r.id.as_str(), r))
            .collect();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let r = index.get(id.as_str()).ok_or_else(|| Error::Load {
                trial: id.clone(),
                reason: "id not present in manifest".into(),
            })?;
            let t = load_record(&self.dir, &self.manifest, r)?;
            self.reads
                .lock()
                .expect("loader log poisoned")
                .push((t.id.clone(), t.subject.clone()));
            out.push(t);
        }
        Ok(out)
    }

    /// `(trial id, subject)` for every load so far.
    pub fn reads(&self) -> Vec<(String, String)> {
        self.reads.lock().expect("loader log poisoned").clone()
    }

    pub fn subjects_read(&self) -> HashSet<String> {
        self.reads().into_iter().map(|(_, s)| s).collect()
    }

    pub fn clear_log(&self) {
        self.reads.lock().expect("loader log poisoned").clear();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub target_subject: String,
    pub seed: u64,
    pub val_fraction: f64,
}

impl SplitSpec {
    pub fn new(target_subject: impl Into<String>, seed: u64) -> Self {
        Self {
            target_subject: target_subject.into(),
            seed,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Leave-one-subject-out split.
///
/// The target subject's trials form the test set. The remaining trials are
/// split into train/val with `val_fraction` of them held out, stratified by
/// (subject, kind, label) through largest-remainder apportionment so the
/// total is exactly `round(val_fraction * n)`.
pub fn loso_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::config(format!(
            "val_fraction must lie in (0, 1), got {}",
            spec.val_fraction
        )));
    }
    let subjects = manifest.subjects();
    if subjects.len() < 2 {
        return Err(Error::Split(format!(
            "leave-one-subject-out needs at least 2 subjects, manifest has {}",
            subjects.len()
        )));
    }
    if !subjects.contains(&spec.target_subject) {
        return Err(Error::Split(format!(
            "target subject `{}` not in manifest",
            spec.target_subject
        )));
    }

    let mut groups: BTreeMap<(&str, TrialKind, Option<usize>), Vec<usize>> = BTreeMap::new();
    let mut n_rest = 0usize;
    for (i, r) in manifest.trials.iter().enumerate() {
        if r.subject != spec.target_subject {
            groups
                .entry((r.subject.as_str(), r.kind, r.label))
                .or_default()
                .push(i);
            n_rest += 1;
        }
    }
    let total_val = (spec.val_fraction * n_rest as f64).round() as usize;

    // Largest remainder: floor quotas first, then hand out the rest by
    // descending fractional part (ties broken by group order).
    let keys: Vec<_> = groups.keys().copied().collect();
    let mut quotas = Vec::with_capacity(keys.len());
    let mut remainders = Vec::with_capacity(keys.len());
    for (gi, k) in keys.iter().enumerate() {
        let exact = spec.val_fraction * groups[k].len() as f64;
        quotas.push(exact.floor() as usize);
        remainders.push((exact - exact.floor(), gi));
    }
    let mut left = total_val.saturating_sub(quotas.iter().sum());
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, gi) in &remainders {
        if left == 0 {
            break;
        }
        if quotas[gi] < groups[&keys[gi]].len() {
            quotas[gi] += 1;
            left -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut is_val = vec![false; manifest.trials.len()];
    for (gi, k) in keys.iter().enumerate() {
        let mut members = groups[k].clone();
        members.shuffle(&mut rng);
        for &i in members.iter().take(quotas[gi]) {
            is_val[i] = true;
        }
    }

    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, r) in manifest.trials.iter().enumerate() {
        if r.subject == spec.target_subject {
            split.test.push(r.id.clone());
        } else if is_val[i] {
            split.val.push(r.id.clone());
        } else {
            split.train.push(r.id.clone());
        }
    }
    Ok(split)
}
