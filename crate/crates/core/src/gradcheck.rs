//! Central finite-difference check of the analytic gradients, in `f64`.
//!
//! Two composites are probed: the stage-1 training loss with respect to the
//! parameters (train mode, all three loss terms active) and the calibration
//! objective with respect to the input, once with the subject and prototype
//! terms and once with the smoothness, energy and statistics priors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibrate::{objective, Terms};
use crate::error::Result;
use crate::losses::{total_loss, LossWeights, Triplet};
use crate::nn::{forward, grad_params, init_model, ForwardOut, Mode, Model, OutGrad, PARAM_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
    pub batch: usize,
    pub param_probes: usize,
    pub input_probes: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            samples: 128,
            classes: 3,
            batch: 6,
            param_probes: 216,
            input_probes: 100,
            step: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub param_probes: usize,
    pub input_probes: usize,
    pub max_param_error: f64,
    pub max_input_error: f64,
    /// Location of the largest error.
    pub worst: String,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_param_error.max(self.max_input_error)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn model(cfg: &GradCheckConfig) -> Result<Model<f64>> {
    let mut m = init_model(cfg.channels, cfg.samples, cfg.classes, cfg.seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for l in m.stats.layers.iter_mut() {
        l.mean.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        l.var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
    }
    for t in m.params.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    Ok(m)
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Probes spread evenly over every parameter tensor.
fn param_probes(m: &Model<f64>, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = m.params.tensors().iter().map(|t| t.len()).collect();
    let per = count.div_ceil(sizes.len());
    let mut out = Vec::with_capacity(count);
    for (t, &n) in sizes.iter().enumerate() {
        for _ in 0..per.min(n) {
            out.push((t, rng.gen_range(0..n)));
        }
    }
    while out.len() < count {
        let t = rng.gen_range(0..sizes.len());
        out.push((t, rng.gen_range(0..sizes[t])));
    }
    out
}

/// Runs both checks and reports the largest relative errors.
pub fn gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let m = model(cfg)?;
    let a = m.arch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.batch.max(4);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| gaussian(a.input_len(), &mut rng)).collect();
    let batch: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    // two subjects, the last member unlabeled
    let labels: Vec<Option<usize>> = (0..n).map(|i| (i + 1 < n).then_some(i % a.classes)).collect();
    let triplets: Vec<Triplet> = (0..n)
        .map(|i| Triplet {
            anchor: i,
            positive: if i % 2 == 0 { (i + 2) % n } else { i },
            negative: (i + 1) % n,
        })
        .collect();
    let protos: Vec<Vec<f64>> = (0..a.classes).map(|_| gaussian(a.f2, &mut rng)).collect();
    let weights = LossWeights::default();
    let loss = |outs: &[ForwardOut<f64>]| -> Result<(f64, Vec<OutGrad<f64>>)> {
        let t = total_loss(outs, &labels, &triplets, Some(&protos), &weights)?;
        Ok((t.total, t.grads))
    };
    let mode = Mode::Train {
        dropout_seed: cfg.seed.wrapping_add(1),
    };
    let (_, grads, _) = grad_params(&m, mode, &loss, &batch)?;
    let eval = |mm: &Model<f64>| -> Result<f64> { Ok(loss(&forward(mm, &batch, mode)?)?.0) };
    let h = cfg.step;
    let mut report = GradCheckReport {
        param_probes: 0,
        input_probes: 0,
        max_param_error: 0.0,
        max_input_error: 0.0,
        worst: String::new(),
    };
    let mut worst = -1.0;
    for (t, i) in param_probes(&m, cfg.param_probes, &mut rng) {
        let mut mm = m.clone();
        mm.params.tensors_mut()[t][i] += h;
        let up = eval(&mm)?;
        mm.params.tensors_mut()[t][i] -= 2.0 * h;
        let dn = eval(&mm)?;
        let e = rel_error(grads.tensors()[t][i], (up - dn) / (2.0 * h));
        report.param_probes += 1;
        report.max_param_error = report.max_param_error.max(e);
        if e > worst {
            worst = e;
            report.worst = format!("{}[{i}]", PARAM_NAMES[t]);
        }
    }

    let z = gaussian(a.input_len(), &mut rng);
    let g0: Vec<f64> = gaussian(a.embed, &mut rng);
    let variants = [
        (
            "restl",
            Terms {
                gamma1: 1.0,
                gamma2: 10.0,
                margin: 1.0,
                ..Terms::default()
            },
        ),
        (
            "deepinversion",
            Terms {
                tv: 1e-2,
                l2: 1e-2,
                stat: 1e-1,
                ..Terms::default()
            },
        ),
    ];
    let per = cfg.input_probes.div_ceil(variants.len());
    for (name, terms) in variants {
        let k = rng.gen_range(0..a.classes);
        let (_, grad) = objective(&m, &protos, &g0, k, &terms, &z)?;
        for _ in 0..per {
            let i = rng.gen_range(0..z.len());
            let mut zz = z.clone();
            zz[i] += h;
            let up = objective(&m, &protos, &g0, k, &terms, &zz)?.0;
            zz[i] -= 2.0 * h;
            let dn = objective(&m, &protos, &g0, k, &terms, &zz)?.0;
            let e = rel_error(grad[i], (up - dn) / (2.0 * h));
            report.input_probes += 1;
            report.max_input_error = report.max_input_error.max(e);
            if e > worst {
                worst = e;
                report.worst = format!("{name} input[{i}]");
            }
        }
    }
    Ok(report)
}
