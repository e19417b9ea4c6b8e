//! Stage 3: cross-entropy fine-tuning on calibrated signals, evaluation on
//! the target subject, the rest-fraction sweep, feature export and the
//! cluster metrics used to inspect the learned representations.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate_all, CalibConfig};
use crate::eegpack::Trial;
use crate::error::{Error, Result};
use crate::losses::{ce_loss, PrototypeBank};
use crate::nn::{backward, forward_batch, Mode, ModelBundle, OutGrad};
use crate::optim::{Adam, AdamConfig};
use crate::synthgen::derive_seed;
use crate::trainer::{predict, step};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Derived from the run seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 5e-4,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr > 0.0) {
            v.push(format!("adapt.lr must be > 0, got {}", self.lr));
        }
        if self.batch_size < 1 {
            v.push("adapt.batch_size must be >= 1".into());
        }
        v
    }
}

/// Mean cross-entropy per adaptation epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptHistory {
    pub epoch_loss: Vec<f64>,
}

/// Fine-tunes every parameter on `calibrated` with cross-entropy only;
/// normalization statistics keep updating.
pub fn adapt_model(
    model: &ModelBundle,
    calibrated: &[Trial],
    cfg: &AdaptConfig,
) -> Result<(ModelBundle, AdaptHistory)> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if calibrated.is_empty() {
        return Err(Error::Adaptation("no calibrated trials to adapt on".into()));
    }
    let a = model.arch;
    let mut labels = Vec::with_capacity(calibrated.len());
    for t in calibrated {
        match t.label {
            Some(l) if l < a.classes => labels.push(l),
            _ => return Err(Error::Adaptation(format!("trial {} has no valid class label", t.id))),
        }
        if t.channels() != a.channels || t.samples() != a.samples {
            return Err(Error::Dimension(format!("trial {} does not match the model input", t.id)));
        }
    }
    let data: Vec<Vec<f32>> = calibrated.iter().map(|t| t.flat().into_owned()).collect();
    let mut m = model.clone();
    let shapes: Vec<usize> = m.params.tensors().iter().map(|t| t.len()).collect();
    let mut opt = Adam::new(cfg.adam, &shapes);
    let mut history = AdaptHistory::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, 1])));
        let mut total = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, idx) in chunks.iter().enumerate() {
            let inputs: Vec<&[f32]> = idx.iter().map(|&i| data[i].as_slice()).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mode = Mode::Train {
                dropout_seed: derive_seed(cfg.seed, &[epoch as u64, bi as u64, 2]),
            };
            let (outs, tape) = forward_batch(&m, &inputs, mode)?;
            let logits: Vec<Vec<f32>> = outs.iter().map(|o| o.logits.clone()).collect();
            let ce = ce_loss(&logits, &y)?;
            if !ce.value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite adaptation loss at epoch {epoch}, batch {bi}"
                )));
            }
            let up: Vec<OutGrad<f32>> = ce
                .grad
                .into_iter()
                .map(|g| OutGrad {
                    logits: g,
                    ..OutGrad::default()
                })
                .collect();
            let grads = backward(&m, &tape, &up, None, true, false)?.params.expect("requested");
            step(&mut opt, cfg.lr, &mut m.params, &grads);
            m.stats.update_from(&tape);
            total += ce.value as f64;
        }
        history.epoch_loss.push(total / chunks.len() as f64);
    }
    if !m.params.all_finite() {
        return Err(Error::Numerical("adaptation produced non-finite parameters".into()));
    }
    Ok((m, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub n: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy and confusion matrix of eval-mode predictions on labeled trials.
pub fn evaluate(model: &ModelBundle, trials: &[Trial]) -> Result<Evaluation> {
    let labeled: Vec<&Trial> = trials.iter().filter(|t| t.label.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Evaluation("no labeled test trials".into()));
    }
    let k = model.arch.classes;
    let data: Vec<Vec<f32>> = labeled.iter().map(|t| t.flat().into_owned()).collect();
    let inputs: Vec<&[f32]> = data.iter().map(|v| v.as_slice()).collect();
    let outs = predict(model, &inputs)?;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0;
    for (o, t) in outs.iter().zip(&labeled) {
        let y = t.label.unwrap();
        if y >= k {
            return Err(Error::Evaluation(format!("trial {} has label {y} outside [0, {k})", t.id)));
        }
        let p = argmax(&o.logits);
        confusion[y][p] += 1;
        correct += usize::from(p == y);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / labeled.len() as f64,
        n: labeled.len(),
        confusion,
    })
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub rs_used: usize,
    pub accuracy: f64,
    /// Fingerprint of the stage-1 checkpoint the row started from.
    pub base_checkpoint: String,
}

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Seeded subset of `round(fraction · n)` rest epochs, kept in input order.
pub fn subsample(rs: &[Trial], fraction: f64, seed: u64) -> Vec<Trial> {
    let n = ((fraction * rs.len() as f64).round() as usize).min(rs.len());
    let mut idx: Vec<usize> = (0..rs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = idx[..n].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| rs[i].clone()).collect()
}

/// Repeats calibration and adaptation from the same stage-1 checkpoint for
/// each fraction of the target subject's rest epochs.
#[allow(clippy::too_many_arguments)]
pub fn rs_fraction_sweep(
    model: &ModelBundle,
    bank: &PrototypeBank,
    rs: &[Trial],
    test: &[Trial],
    calib: &CalibConfig,
    adapt: &AdaptConfig,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::config(format!("sweep fraction {f} outside (0, 1]")));
    }
    let base = model.fingerprint();
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let subset = if fraction >= 1.0 {
            rs.to_vec()
        } else {
            subsample(rs, fraction, seed)
        };
        if subset.is_empty() {
            log::warn!("fraction {fraction} keeps no resting-state epochs; skipped");
            continue;
        }
        let set = calibrate_all(model, bank, &subset, calib)?;
        let (adapted, _) = adapt_model(model, &set.as_trials(), adapt)?;
        rows.push(SweepRow {
            fraction,
            rs_used: subset.len(),
            accuracy: evaluate(&adapted, test)?.accuracy,
            base_checkpoint: base.clone(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// features and cluster metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    pub subject: String,
    pub class: Option<usize>,
    /// Which set the trial came from (for example `real` or `calibrated`).
    pub source: String,
    pub method: String,
    pub f: Vec<f32>,
    pub g: Vec<f32>,
    pub f_pc: [f64; 2],
    pub g_pc: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
}

/// A named group of trials to export.
pub struct FeatureSet<'a> {
    pub source: &'a str,
    pub method: &'a str,
    pub trials: &'a [Trial],
}

/// First two principal-component scores of each row.
pub fn pca2(rows: &[Vec<f32>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let mut x = DMatrix::<f64>::from_fn(n, d, |i, j| rows[i][j] as f64);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |c: usize| {
        let mut v = eig.eigenvectors.column(order[c]).into_owned();
        // fix the sign so the largest-magnitude loading is positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        v
    };
    let (a0, a1) = (axis(0), axis(1.min(d - 1)));
    (0..n)
        .map(|i| {
            let r = x.row(i);
            [r.dot(&a0.transpose()), r.dot(&a1.transpose())]
        })
        .collect()
}

/// Per-trial task features and subject embeddings with 2-D projections
/// computed jointly over all sets.
pub fn export_features(model: &ModelBundle, sets: &[FeatureSet]) -> Result<FeatureTable> {
    let mut rows = Vec::new();
    for s in sets {
        let data: Vec<Vec<f32>> = s.trials.iter().map(|t| t.flat().into_owned()).collect();
        let inputs: Vec<&[f32]> = data.iter().map(|v| v.as_slice()).collect();
        let outs = predict(model, &inputs)?;
        for (t, o) in s.trials.iter().zip(outs) {
            rows.push(FeatureRow {
                id: t.id.clone(),
                subject: t.subject.clone(),
                class: t.label,
                source: s.source.to_string(),
                method: s.method.to_string(),
                f: o.f,
                g: o.g,
                f_pc: [0.0; 2],
                g_pc: [0.0; 2],
            });
        }
    }
    let fp = pca2(&rows.iter().map(|r| r.f.clone()).collect::<Vec<_>>());
    let gp = pca2(&rows.iter().map(|r| r.g.clone()).collect::<Vec<_>>());
    for ((r, f), g) in rows.iter_mut().zip(fp).zip(gp) {
        r.f_pc = f;
        r.g_pc = g;
    }
    Ok(FeatureTable { rows })
}

impl FeatureTable {
    /// Tab-separated table with a header row.
    pub fn to_tsv(&self) -> String {
        let dim_f = self.rows.first().map_or(0, |r| r.f.len());
        let dim_g = self.rows.first().map_or(0, |r| r.g.len());
        let mut s = String::from("id\tsubject\tclass\tsource\tmethod");
        for i in 0..dim_f {
            write!(s, "\tf{i}").unwrap();
        }
        for i in 0..dim_g {
            write!(s, "\tg{i}").unwrap();
        }
        s.push_str("\tf_pc1\tf_pc2\tg_pc1\tg_pc2\n");
        for r in &self.rows {
            let class = r.class.map_or_else(|| "-".to_string(), |c| c.to_string());
            write!(s, "{}\t{}\t{class}\t{}\t{}", r.id, r.subject, r.source, r.method).unwrap();
            for v in r.f.iter().chain(&r.g) {
                write!(s, "\t{v}").unwrap();
            }
            writeln!(s, "\t{}\t{}\t{}\t{}", r.f_pc[0], r.f_pc[1], r.g_pc[0], r.g_pc[1]).unwrap();
        }
        s
    }
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Fraction of rows whose nearest prototype is their own class.
pub fn nearest_prototype_agreement(bank: &PrototypeBank, f: &[Vec<f32>], labels: &[usize]) -> f64 {
    if f.is_empty() {
        return 0.0;
    }
    let hits = f.iter().zip(labels).filter(|(x, &l)| bank.nearest(x) == l).count();
    hits as f64 / f.len() as f64
}

/// Mean silhouette coefficient under Euclidean distance. Points in
/// singleton clusters score 0; fewer than two clusters gives 0.
pub fn silhouette<L: PartialEq>(points: &[Vec<f32>], labels: &[L]) -> f64 {
    let n = points.len();
    let mut groups: Vec<&L> = Vec::new();
    for l in labels {
        if !groups.contains(&l) {
            groups.push(l);
        }
    }
    if groups.len() < 2 || n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; groups.len()];
        let mut cnt = vec![0usize; groups.len()];
        for j in 0..n {
            if i == j {
                continue;
            }
            let gi = groups.iter().position(|g| **g == labels[j]).unwrap();
            sum[gi] += euclid(&points[i], &points[j]);
            cnt[gi] += 1;
        }
        let own = groups.iter().position(|g| **g == labels[i]).unwrap();
        if cnt[own] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..groups.len())
            .filter(|&g| g != own && cnt[g] > 0)
            .map(|g| sum[g] / cnt[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// Mean Euclidean distance over all pairs of rows drawn from different groups.
pub fn mean_between_group_distance<L: PartialEq>(points: &[Vec<f32>], labels: &[L]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if labels[i] != labels[j] {
                sum += euclid(&points[i], &points[j]);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. A constant series
/// has no rank order and yields 0.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub subject: String,
    /// Stage-1 checkpoint evaluated directly on the target subject.
    pub baseline_accuracy: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub calibrated: usize,
    pub flagged: usize,
    pub checkpoint: String,
    pub sweep: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub subjects: Vec<SubjectResult>,
    pub mean: f64,
    pub std: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub seed: u64,
    pub config: serde_json::Value,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl RunReport {
    pub fn new(subjects: Vec<SubjectResult>, seed: u64, config: serde_json::Value) -> Self {
        let acc: Vec<f64> = subjects.iter().map(|s| s.accuracy).collect();
        let base: Vec<f64> = subjects.iter().map(|s| s.baseline_accuracy).collect();
        let (mean, std) = mean_std(&acc);
        let (baseline_mean, baseline_std) = mean_std(&base);
        Self {
            subjects,
            mean,
            std,
            baseline_mean,
            baseline_std,
            seed,
            config,
        }
    }

    /// One row per subject plus a mean ± std row, accuracies in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:>10} {:>10}", "subject", "baseline", "adapted").unwrap();
        for r in &self.subjects {
            writeln!(
                s,
                "{:<10} {:>10.2} {:>10.2}",
                r.subject,
                100.0 * r.baseline_accuracy,
                100.0 * r.accuracy
            )
            .unwrap();
        }
        writeln!(
            s,
            "{:<10} {:>10} {:>10}",
            "mean±std",
            format!("{:.2}±{:.2}", 100.0 * self.baseline_mean, 100.0 * self.baseline_std),
            format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
        )
        .unwrap();
        let fractions: Vec<f64> = self
            .subjects
            .iter()
            .flat_map(|r| r.sweep.iter().map(|w| w.fraction))
            .fold(Vec::new(), |mut acc, f| {
                if !acc.contains(&f) {
                    acc.push(f);
                }
                acc
            });
        if !fractions.is_empty() {
            writeln!(s, "\nrest fraction sweep").unwrap();
            for f in fractions {
                let acc: Vec<f64> = self
                    .subjects
                    .iter()
                    .filter_map(|r| r.sweep.iter().find(|w| w.fraction == f).map(|w| w.accuracy))
                    .collect();
                let (m, sd) = mean_std(&acc);
                writeln!(s, "{:>5.0}%  {:.2}±{:.2}", 100.0 * f, 100.0 * m, 100.0 * sd).unwrap();
            }
        }
        s
    }

    /// Machine-readable per-subject rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("subject\tbaseline_accuracy\taccuracy\tcalibrated\tflagged\tcheckpoint\n");
        for r in &self.subjects {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.subject, r.baseline_accuracy, r.accuracy, r.calibrated, r.flagged, r.checkpoint
            )
            .unwrap();
        }
        writeln!(s, "mean\t{}\t{}\t\t\t", self.baseline_mean, self.mean).unwrap();
        writeln!(s, "std\t{}\t{}\t\t\t", self.baseline_std, self.std).unwrap();
        s
    }
}
