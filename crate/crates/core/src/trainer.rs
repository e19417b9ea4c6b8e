//! Stage-1 training of the disentangled classifier on the source subjects.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eegpack::Trial;
use crate::error::{Error, Result};
use crate::losses::{total_loss, update_prototypes, ClassMeans, LossWeights, PrototypeBank, Triplet};
use crate::nn::{backward, forward_batch, ForwardOut, Mode, ModelBundle, Params};
use crate::optim::{Adam, AdamConfig};
use crate::synthgen::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub epsilon: f64,
    pub adam: AdamConfig,
    /// Derived from the run seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 100,
            decay: 0.99,
            decay_every: 10,
            batch_size: 64,
            weights: LossWeights::default(),
            epsilon: 1e-5,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.weights.violations("train.weights");
        if !(self.lr > 0.0) {
            v.push(format!("train.lr must be > 0, got {}", self.lr));
        }
        if self.epochs < 1 {
            v.push("train.epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            v.push(format!("train.batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.decay_every < 1 {
            v.push("train.decay_every must be >= 1".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            v.push(format!("train.decay must lie in (0, 1], got {}", self.decay));
        }
        if !(self.epsilon >= 0.0) {
            v.push(format!("train.epsilon must be >= 0, got {}", self.epsilon));
        }
        v
    }

    /// Learning rate used throughout `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Mean loss components over an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub task: f64,
    pub subject: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub val: LossParts,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

impl TrainHistory {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes") + "\n")
            .collect()
    }
}

/// One triplet per batch member: the positive is another member from the
/// same subject (the anchor itself when it is alone), the negative a member
/// of any other subject.
pub fn sample_triplets<S: AsRef<str>>(subjects: &[S], seed: u64) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(subjects.len());
    for (i, s) in subjects.iter().enumerate() {
        let s = s.as_ref();
        let same: Vec<usize> = (0..subjects.len())
            .filter(|&j| j != i && subjects[j].as_ref() == s)
            .collect();
        let other: Vec<usize> = (0..subjects.len())
            .filter(|&j| subjects[j].as_ref() != s)
            .collect();
        if other.is_empty() {
            return Err(Error::Triplet(format!("batch holds only subject {s}")));
        }
        let positive = same.choose(&mut rng).copied().unwrap_or(i);
        let negative = other[rng.gen_range(0..other.len())];
        out.push(Triplet {
            anchor: i,
            positive,
            negative,
        });
    }
    Ok(out)
}

/// Shuffled batches of near-equal size, each holding at least two subjects
/// whenever the data does.
pub fn make_batches(subjects: &[&str], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let n = subjects.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let nb = n.div_ceil(batch_size).max(1);
    let mut batches: Vec<Vec<usize>> = Vec::with_capacity(nb);
    let mut start = 0;
    for b in 0..nb {
        let len = n / nb + usize::from(b < n % nb);
        batches.push(order[start..start + len].to_vec());
        start += len;
    }
    let distinct = |b: &[usize]| {
        let first = subjects[b[0]];
        b.iter().any(|&i| subjects[i] != first)
    };
    for b in 0..batches.len() {
        if batches[b].is_empty() || distinct(&batches[b]) {
            continue;
        }
        let subj = subjects[batches[b][0]];
        'search: for o in 0..batches.len() {
            if o == b {
                continue;
            }
            for pos in 0..batches[o].len() {
                let cand = batches[o][pos];
                if subjects[cand] == subj {
                    continue;
                }
                let mut trial = batches[o].clone();
                trial[pos] = batches[b][0];
                if trial.len() < 2 || distinct(&trial) {
                    batches[o] = trial;
                    batches[b][0] = cand;
                    break 'search;
                }
            }
        }
    }
    batches
}

struct Batch<'a> {
    inputs: Vec<&'a [f32]>,
    labels: Vec<Option<usize>>,
    subjects: Vec<&'a str>,
}

fn gather<'a>(data: &'a [Vec<f32>], trials: &'a [Trial], idx: &[usize]) -> Batch<'a> {
    Batch {
        inputs: idx.iter().map(|&i| data[i].as_slice()).collect(),
        labels: idx.iter().map(|&i| trials[i].label).collect(),
        subjects: idx.iter().map(|&i| trials[i].subject.as_str()).collect(),
    }
}

fn check_trials(trials: &[Trial], what: &str, c: usize, t: usize, k: usize) -> Result<()> {
    for tr in trials {
        if tr.channels() != c || tr.samples() != t {
            return Err(Error::Dimension(format!(
                "{what} trial {} is {}x{}, expected {c}x{t}",
                tr.id,
                tr.channels(),
                tr.samples()
            )));
        }
        if tr.label.is_some_and(|l| l >= k) {
            return Err(Error::Dimension(format!("{what} trial {} has label outside [0, {k})", tr.id)));
        }
    }
    Ok(())
}

/// Eval-mode outputs for `inputs`, computed in chunks.
pub fn predict(model: &ModelBundle, inputs: &[&[f32]]) -> Result<Vec<ForwardOut<f32>>> {
    let mut outs = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        outs.extend(forward_batch(model, chunk, Mode::Eval)?.0);
    }
    Ok(outs)
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

pub(crate) fn accuracy_of(outs: &[ForwardOut<f32>], labels: &[Option<usize>]) -> f64 {
    let pairs: Vec<(usize, usize)> = outs
        .iter()
        .zip(labels)
        .filter_map(|(o, l)| l.map(|l| (argmax(&o.logits), l)))
        .collect();
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|(p, l)| p == l).count() as f64 / pairs.len() as f64
}

fn validation(
    model: &ModelBundle,
    bank: &PrototypeBank,
    data: &[Vec<f32>],
    trials: &[Trial],
    cfg: &TrainConfig,
) -> Result<(LossParts, f64)> {
    if trials.is_empty() {
        return Ok((LossParts::default(), 0.0));
    }
    let idx: Vec<usize> = (0..trials.len()).collect();
    let b = gather(data, trials, &idx);
    let outs = predict(model, &b.inputs)?;
    let triplets = sample_triplets(&b.subjects, derive_seed(cfg.seed, &[0x7a1])).unwrap_or_default();
    let protos = bank.as_real::<f32>();
    let l = total_loss(&outs, &b.labels, &triplets, Some(&protos), &cfg.weights)?;
    let parts = LossParts {
        total: l.total as f64,
        ce: l.ce as f64,
        task: l.task as f64,
        subject: l.subject as f64,
    };
    Ok((parts, accuracy_of(&outs, &b.labels)))
}

/// Trains `init` on `train` (labeled task epochs plus unlabeled rest epochs)
/// and returns the checkpoint with the lowest validation loss.
///
/// The prototype bank is set to the class means of the task features seen
/// during epoch 0; the task term and prototype updates start at epoch 1.
pub fn train_stage1(
    init: ModelBundle,
    train: &[Trial],
    val: &[Trial],
    cfg: &TrainConfig,
) -> Result<(ModelBundle, PrototypeBank, TrainHistory)> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let a = init.arch;
    check_trials(train, "train", a.channels, a.samples, a.classes)?;
    check_trials(val, "validation", a.channels, a.samples, a.classes)?;
    let subjects: Vec<&str> = train.iter().map(|t| t.subject.as_str()).collect();
    if subjects.iter().all(|s| *s == subjects[0]) {
        return Err(Error::Triplet("training data holds fewer than two subjects".into()));
    }
    let train_data: Vec<Vec<f32>> = train.iter().map(|t| t.flat().into_owned()).collect();
    let val_data: Vec<Vec<f32>> = val.iter().map(|t| t.flat().into_owned()).collect();

    let mut model = init;
    let shapes: Vec<usize> = model.params.tensors().iter().map(|t| t.len()).collect();
    let mut opt = Adam::new(cfg.adam, &shapes);
    let mut bank: Option<PrototypeBank> = None;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelBundle, PrototypeBank)> = None;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let batches = make_batches(&subjects, cfg.batch_size, derive_seed(cfg.seed, &[epoch as u64, 1]));
        let mut means = bank.is_none().then(|| ClassMeans::new(a.classes, a.f2));
        let mut sums = LossParts::default();
        for (bi, idx) in batches.iter().enumerate() {
            let b = gather(&train_data, train, idx);
            let mode = Mode::Train {
                dropout_seed: derive_seed(cfg.seed, &[epoch as u64, bi as u64, 2]),
            };
            let (outs, tape) = forward_batch(&model, &b.inputs, mode)?;
            let triplets = sample_triplets(&b.subjects, derive_seed(cfg.seed, &[epoch as u64, bi as u64, 3]))?;
            let protos = bank.as_ref().map(|bk| bk.as_real::<f32>());
            let loss = total_loss(&outs, &b.labels, &triplets, protos.as_deref(), &cfg.weights)?;
            if !loss.total.is_finite() {
                history.aborted = Some(format!(
                    "non-finite training loss at epoch {epoch}, batch {bi} (ce {}, task {}, subject {})",
                    loss.ce, loss.task, loss.subject
                ));
                break 'epochs;
            }
            let grads = backward(&model, &tape, &loss.grads, None, true, false)?
                .params
                .expect("requested");
            step(&mut opt, lr, &mut model.params, &grads);
            model.stats.update_from(&tape);
            let f: Vec<Vec<f32>> = outs.iter().map(|o| o.f.clone()).collect();
            match (&mut means, &mut bank) {
                (Some(m), _) => {
                    for (fi, l) in f.iter().zip(&b.labels) {
                        if let Some(l) = l {
                            m.add(fi, *l);
                        }
                    }
                }
                (None, Some(bk)) => update_prototypes(bk, &f, &b.labels),
                (None, None) => unreachable!(),
            }
            sums.total += loss.total as f64;
            sums.ce += loss.ce as f64;
            sums.task += loss.task as f64;
            sums.subject += loss.subject as f64;
        }
        if let Some(m) = means {
            bank = Some(m.into_bank(cfg.epsilon));
        }
        let bk = bank.as_ref().expect("set after epoch 0");
        if !model.params.all_finite() || !bk.all_finite() {
            history.aborted = Some(format!("non-finite parameters after epoch {epoch}"));
            break;
        }
        let nb = batches.len() as f64;
        let train_parts = LossParts {
            total: sums.total / nb,
            ce: sums.ce / nb,
            task: sums.task / nb,
            subject: sums.subject / nb,
        };
        let (val_parts, val_accuracy) = validation(&model, bk, &val_data, val, cfg)?;
        log::debug!(
            "epoch {epoch}: train {:.4} val {:.4} val acc {:.3}",
            train_parts.total,
            val_parts.total,
            val_accuracy
        );
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train: train_parts,
            val: val_parts,
            val_accuracy,
        });
        let score = if val.is_empty() { train_parts.total } else { val_parts.total };
        if !score.is_finite() {
            history.aborted = Some(format!("non-finite validation loss at epoch {epoch}"));
            break;
        }
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, model.clone(), bk.clone()));
            history.selected_epoch = epoch;
        }
    }
    match best {
        Some((_, m, b)) => {
            if let Some(why) = &history.aborted {
                log::warn!("training stopped early: {why}; returning epoch {}", history.selected_epoch);
            }
            Ok((m, b, history))
        }
        None => Err(Error::Numerical(
            history.aborted.unwrap_or_else(|| "no epoch completed".into()),
        )),
    }
}

pub(crate) fn step(opt: &mut Adam, lr: f64, params: &mut Params<f32>, grads: &Params<f32>) {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    opt.update(lr, &mut p, &g);
}
