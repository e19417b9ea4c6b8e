//! Stage 2: turn each resting-state epoch of the target subject into one
//! class-conditioned signal per class by descending a loss through the
//! frozen model, plus the DeepDream and DeepInversion input-synthesis
//! baselines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eegpack::{write_pack_named, DatasetManifest, Trial, TrialKind};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, task_loss, PrototypeBank};
use crate::nn::{forward, grad_input, ForwardOut, Mode, Model, OutGrad, Real, StatPrior};
use crate::optim::{Adam, AdamConfig};
use crate::par;
use crate::synthgen::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibMethod {
    Restl,
    DeepDream,
    DeepInversion,
}

impl CalibMethod {
    pub fn name(self) -> &'static str {
        match self {
            CalibMethod::Restl => "restl",
            CalibMethod::DeepDream => "deepdream",
            CalibMethod::DeepInversion => "deepinversion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibInit {
    Rs,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub method: CalibMethod,
    pub init: CalibInit,
    pub gamma1: f64,
    pub gamma2: f64,
    pub steps: usize,
    pub lr: f64,
    pub margin: f64,
    pub lambda_tv: f64,
    pub lambda_l2: f64,
    pub stat_weight: f64,
    pub adam: AdamConfig,
    /// Derived from the run seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            method: CalibMethod::Restl,
            init: CalibInit::Rs,
            gamma1: 1.0,
            gamma2: 10.0,
            steps: 300,
            lr: 5e-3,
            margin: 1.0,
            lambda_tv: 1e-4,
            lambda_l2: 1e-5,
            stat_weight: 1e-2,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("lambda_tv", self.lambda_tv),
            ("lambda_l2", self.lambda_l2),
            ("stat_weight", self.stat_weight),
        ] {
            if !(x >= 0.0) {
                v.push(format!("calib.{name} must be >= 0, got {x}"));
            }
        }
        if !(self.lr > 0.0) {
            v.push(format!("calib.lr must be > 0, got {}", self.lr));
        }
        if !(self.margin > 0.0) {
            v.push(format!("calib.margin must be > 0, got {}", self.margin));
        }
        v
    }

    /// Weights of each objective term under the configured method.
    pub fn terms(&self) -> Terms {
        let mut t = Terms::default();
        match self.method {
            CalibMethod::Restl => {
                t.gamma1 = self.gamma1;
                t.gamma2 = self.gamma2;
            }
            CalibMethod::DeepDream => {
                t.tv = self.lambda_tv;
                t.l2 = self.lambda_l2;
            }
            CalibMethod::DeepInversion => {
                t.tv = self.lambda_tv;
                t.l2 = self.lambda_l2;
                t.stat = self.stat_weight;
            }
        }
        t.margin = self.margin;
        t
    }
}

/// Term weights of the input objective
/// `CE(k) + γ1·task(P_k) + γ2·‖g0 − g(z)‖ + tv·Σ(Δz)² + l2·‖z‖² + stat·R_bn(z)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub gamma1: f64,
    pub gamma2: f64,
    pub tv: f64,
    pub l2: f64,
    pub stat: f64,
    pub margin: f64,
}

/// Value and input gradient of the calibration objective for target class
/// `k`, with `g0` the subject embedding held fixed.
pub fn objective<T: Real>(
    model: &Model<T>,
    protos: &[Vec<T>],
    g0: &[T],
    k: usize,
    terms: &Terms,
    z: &[T],
) -> Result<(T, Vec<T>)> {
    let (g1, g2) = (T::lit(terms.gamma1), T::lit(terms.gamma2));
    let margin = T::lit(terms.margin);
    let head = |outs: &[ForwardOut<T>]| -> Result<(T, Vec<OutGrad<T>>)> {
        let o = &outs[0];
        let ce = ce_loss(std::slice::from_ref(&o.logits), &[k])?;
        let mut value = ce.value;
        let mut up = OutGrad {
            logits: ce.grad.into_iter().next().unwrap(),
            ..OutGrad::default()
        };
        if terms.gamma1 > 0.0 {
            let t = task_loss(std::slice::from_ref(&o.f), &[k], protos, margin)?;
            value += g1 * t.value;
            up.f = t.grad[0].iter().map(|&v| g1 * v).collect();
        }
        if terms.gamma2 > 0.0 {
            let diff: Vec<T> = o.g.iter().zip(g0).map(|(&a, &b)| a - b).collect();
            let d = diff.iter().map(|&v| v * v).sum::<T>().sqrt();
            value += g2 * d;
            up.g = if d > T::zero() {
                diff.iter().map(|&v| g2 * v / d).collect()
            } else {
                vec![T::zero(); diff.len()]
            };
        }
        Ok((value, vec![up]))
    };
    let prior = (terms.stat > 0.0).then(|| StatPrior {
        weight: T::lit(terms.stat),
        reference: &model.stats,
    });
    let (mut value, mut grad) = grad_input(model, &head, z, prior.as_ref())?;
    let t_n = model.arch.samples;
    if terms.tv > 0.0 {
        let w = T::lit(terms.tv);
        let two = T::lit(2.0);
        for row in 0..model.arch.channels {
            let r = &z[row * t_n..(row + 1) * t_n];
            for t in 0..t_n - 1 {
                let d = r[t + 1] - r[t];
                value += w * d * d;
                grad[row * t_n + t + 1] += two * w * d;
                grad[row * t_n + t] -= two * w * d;
            }
        }
    }
    if terms.l2 > 0.0 {
        let w = T::lit(terms.l2);
        for (g, &v) in grad.iter_mut().zip(z) {
            value += w * v * v;
            *g += T::lit(2.0) * w * v;
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedTrial {
    pub id: String,
    pub source_id: String,
    pub subject: String,
    pub class: usize,
    pub method: CalibMethod,
    pub init: CalibInit,
    #[serde(skip)]
    pub data: Vec<f32>,
    #[serde(skip)]
    pub shape: (usize, usize),
    pub initial_objective: f64,
    pub final_objective: f64,
    #[serde(skip)]
    pub trace: Vec<f64>,
    /// Reason the optimization was cut short, if it was.
    pub flagged: Option<String>,
}

impl CalibratedTrial {
    pub fn to_trial(&self, fs: f64, session: &str) -> Trial {
        Trial {
            id: self.id.clone(),
            subject: self.subject.clone(),
            session: session.to_string(),
            kind: TrialKind::TS,
            label: Some(self.class),
            fs,
            data: Array2::from_shape_vec(self.shape, self.data.clone()).expect("shape matches data"),
        }
    }
}

fn id_hash(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Seed of the (source trial, class) pair; independent of batch composition.
pub fn pair_seed(base: u64, source_id: &str, k: usize) -> u64 {
    derive_seed(base, &[id_hash(source_id), k as u64])
}

/// Optimizes the input for class `k` starting from `z` (or from noise),
/// leaving the model untouched.
pub fn calibrate_signal(
    model: &Model<f32>,
    bank: &PrototypeBank,
    z: &Trial,
    k: usize,
    cfg: &CalibConfig,
) -> Result<CalibratedTrial> {
    let a = &model.arch;
    if k >= a.classes {
        return Err(Error::Dimension(format!("target class {k} outside [0, {})", a.classes)));
    }
    if z.channels() != a.channels || z.samples() != a.samples {
        return Err(Error::Dimension(format!(
            "trial {} is {}x{}, model expects {}x{}",
            z.id,
            z.channels(),
            z.samples(),
            a.channels,
            a.samples
        )));
    }
    let source = z.flat().into_owned();
    let g0 = forward(model, &[source.as_slice()], Mode::Eval)?.remove(0).g;
    let protos = bank.as_real::<f32>();
    let terms = cfg.terms();
    let seed = pair_seed(cfg.seed, &z.id, k);
    let mut x = match cfg.init {
        CalibInit::Rs => source.clone(),
        CalibInit::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..source.len()).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
    };
    let eval = |x: &[f32]| objective(model, &protos, &g0, k, &terms, x);
    let mut opt = Adam::new(cfg.adam, &[x.len()]);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut flagged = None;
    let mut last_good = x.clone();
    for step in 0..cfg.steps {
        let (value, grad) = match eval(&x) {
            Ok(r) if r.1.iter().all(|g| g.is_finite()) => r,
            Ok((v, _)) => {
                flagged = Some(format!("non-finite gradient at step {step} (objective {v})"));
                break;
            }
            Err(Error::Numerical(m)) => {
                flagged = Some(format!("step {step}: {m}"));
                break;
            }
            Err(e) => return Err(e),
        };
        trace.push(value as f64);
        last_good.clone_from(&x);
        let mut p = [&mut x];
        opt.update(cfg.lr, &mut p, &[&grad]);
    }
    if flagged.is_none() {
        match eval(&x) {
            Ok((v, _)) if v.is_finite() => trace.push(v as f64),
            Ok((v, _)) => flagged = Some(format!("non-finite final objective {v}")),
            Err(Error::Numerical(m)) => flagged = Some(format!("final objective: {m}")),
            Err(e) => return Err(e),
        }
    }
    if flagged.is_some() {
        x = last_good;
    }
    if trace.is_empty() {
        // only reachable when the starting point itself is not finite
        trace.push(f64::NAN);
    }
    Ok(CalibratedTrial {
        id: format!("{}-{}{k}", z.id, cfg.method.name()),
        source_id: z.id.clone(),
        subject: z.subject.clone(),
        class: k,
        method: cfg.method,
        init: cfg.init,
        data: x,
        shape: (a.channels, a.samples),
        initial_objective: trace[0],
        final_objective: *trace.last().unwrap(),
        trace,
        flagged,
    })
}

/// DeepDream baseline: class score plus smoothness and energy priors.
pub fn baseline_deepdream(
    model: &Model<f32>,
    bank: &PrototypeBank,
    init: &Trial,
    k: usize,
    cfg: &CalibConfig,
) -> Result<CalibratedTrial> {
    let cfg = CalibConfig {
        method: CalibMethod::DeepDream,
        ..cfg.clone()
    };
    calibrate_signal(model, bank, init, k, &cfg)
}

/// DeepInversion baseline: DeepDream plus the normalization-statistics prior.
pub fn baseline_deepinversion(
    model: &Model<f32>,
    bank: &PrototypeBank,
    init: &Trial,
    k: usize,
    cfg: &CalibConfig,
) -> Result<CalibratedTrial> {
    let cfg = CalibConfig {
        method: CalibMethod::DeepInversion,
        ..cfg.clone()
    };
    calibrate_signal(model, bank, init, k, &cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedSet {
    pub trials: Vec<CalibratedTrial>,
    /// Pairs dropped because their optimization was flagged.
    pub flagged: Vec<CalibratedTrial>,
    pub fs: f64,
    pub session: String,
}

impl CalibratedSet {
    pub fn as_trials(&self) -> Vec<Trial> {
        self.trials.iter().map(|t| t.to_trial(self.fs, &self.session)).collect()
    }

    /// Fraction of kept trials whose objective ended below where it started.
    pub fn descent_rate(&self) -> f64 {
        if self.trials.is_empty() {
            return 0.0;
        }
        let n = self
            .trials
            .iter()
            .filter(|t| t.final_objective < t.initial_objective)
            .count();
        n as f64 / self.trials.len() as f64
    }

    /// Writes the set as a pack plus `provenance.json`.
    pub fn save(&self, dir: &Path, classes: usize) -> Result<DatasetManifest> {
        let manifest = write_pack_named(&self.as_trials(), dir, "calibrated", classes)?;
        let prov: BTreeMap<&str, &CalibratedTrial> =
            self.trials.iter().chain(&self.flagged).map(|t| (t.id.as_str(), t)).collect();
        let path = dir.join("provenance.json");
        let text = serde_json::to_string_pretty(&prov).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Calibrates every (rest epoch, class) pair in parallel; output is ordered
/// by source epoch, then class.
pub fn calibrate_all(
    model: &Model<f32>,
    bank: &PrototypeBank,
    rs: &[Trial],
    cfg: &CalibConfig,
) -> Result<CalibratedSet> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let Some(first) = rs.first() else {
        return Err(Error::Evaluation("no resting-state epochs to calibrate".into()));
    };
    let k_n = model.arch.classes;
    let results = par::map_range(rs.len() * k_n, |i| {
        calibrate_signal(model, bank, &rs[i / k_n], i % k_n, cfg)
    });
    let mut trials = Vec::with_capacity(results.len());
    let mut flagged = Vec::new();
    for r in results {
        let t = r?;
        if let Some(why) = &t.flagged {
            log::warn!("calibration of {} for class {} flagged: {why}", t.source_id, t.class);
            flagged.push(t);
        } else {
            trials.push(t);
        }
    }
    Ok(CalibratedSet {
        trials,
        flagged,
        fs: first.fs,
        session: first.session.clone(),
    })
}
