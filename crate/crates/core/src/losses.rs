//! Cross-entropy, prototype task loss, subject triplet loss and their
//! weighted sum, each returning the value together with the gradient with
//! respect to the network outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardOut, OutGrad, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.05,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lambda1 >= 0.0) {
            v.push(format!("{prefix}.lambda1 must be >= 0, got {}", self.lambda1));
        }
        if !(self.lambda2 >= 0.0) {
            v.push(format!("{prefix}.lambda2 must be >= 0, got {}", self.lambda2));
        }
        if !(self.margin > 0.0) {
            v.push(format!("{prefix}.margin must be > 0, got {}", self.margin));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeInit {
    /// Class means of the task features seen during the first epoch.
    FirstEpochMean,
    Zero,
}

/// One task-feature center per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub prototypes: Vec<Vec<f32>>,
    pub epsilon: f64,
    pub init: PrototypeInit,
}

impl PrototypeBank {
    pub fn zeros(classes: usize, dim: usize, epsilon: f64) -> Self {
        Self {
            prototypes: vec![vec![0.0; dim]; classes],
            epsilon,
            init: PrototypeInit::Zero,
        }
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn all_finite(&self) -> bool {
        self.prototypes.iter().flatten().all(|v| v.is_finite())
    }

    pub fn as_real<T: Real>(&self) -> Vec<Vec<T>> {
        self.prototypes
            .iter()
            .map(|p| p.iter().map(|&v| T::lit(v as f64)).collect())
            .collect()
    }

    /// Index of the closest prototype.
    pub fn nearest(&self, f: &[f32]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, p) in self.prototypes.iter().enumerate() {
            let d: f64 = p.iter().zip(f).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

/// Running class sums used to initialize a bank from one epoch of features.
#[derive(Debug, Clone)]
pub struct ClassMeans {
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl ClassMeans {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            sums: vec![vec![0.0; dim]; classes],
            counts: vec![0; classes],
        }
    }

    pub fn add(&mut self, f: &[f32], label: usize) {
        self.counts[label] += 1;
        for (s, &v) in self.sums[label].iter_mut().zip(f) {
            *s += v as f64;
        }
    }

    /// Bank of class means; classes never seen keep a zero prototype.
    pub fn into_bank(self, epsilon: f64) -> PrototypeBank {
        let prototypes = self
            .sums
            .into_iter()
            .zip(self.counts)
            .map(|(s, n)| s.into_iter().map(|v| (v / n.max(1) as f64) as f32).collect())
            .collect();
        PrototypeBank {
            prototypes,
            epsilon,
            init: PrototypeInit::FirstEpochMean,
        }
    }
}

/// A loss value and its gradient with respect to each row of the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<T> {
    pub value: T,
    pub grad: Vec<Vec<T>>,
}

/// Euclidean distance and its gradient with respect to `a` (zero at `a == b`).
fn dist<T: Real>(a: &[T], b: &[T]) -> (T, Vec<T>) {
    let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let d = diff.iter().map(|&v| v * v).sum::<T>().sqrt();
    if d > T::zero() {
        (d, diff.into_iter().map(|v| v / d).collect())
    } else {
        (d, vec![T::zero(); a.len()])
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label < classes {
        Ok(())
    } else {
        Err(Error::Dimension(format!("label {label} outside [0, {classes})")))
    }
}

/// Mean negative log-softmax probability of the true class.
pub fn ce_loss<T: Real>(logits: &[Vec<T>], labels: &[usize]) -> Result<Scored<T>> {
    if logits.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let inv_n = T::one() / T::from_usize(logits.len().max(1)).unwrap();
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        check_label(y, z.len())?;
        let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = z.iter().map(|&v| (v - mx).exp()).collect();
        let s: T = e.iter().copied().sum();
        value += s.ln() + mx - z[y];
        grad.push(
            e.iter()
                .enumerate()
                .map(|(k, &v)| (v / s - if k == y { T::one() } else { T::zero() }) * inv_n)
                .collect(),
        );
    }
    Ok(Scored {
        value: value * inv_n,
        grad,
    })
}

/// Pull toward the own-class prototype plus a margin hinge against every
/// other prototype, averaged over the batch.
pub fn task_loss<T: Real>(f: &[Vec<T>], labels: &[usize], protos: &[Vec<T>], margin: T) -> Result<Scored<T>> {
    if f.len() != labels.len() {
        return Err(Error::Dimension(format!("{} features for {} labels", f.len(), labels.len())));
    }
    let inv_n = T::one() / T::from_usize(f.len().max(1)).unwrap();
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(f.len());
    for (fi, &y) in f.iter().zip(labels) {
        check_label(y, protos.len())?;
        if protos[y].len() != fi.len() {
            return Err(Error::Dimension(format!(
                "feature has {} dims, prototypes have {}",
                fi.len(),
                protos[y].len()
            )));
        }
        let (dy, gy) = dist(fi, &protos[y]);
        let mut g = gy.clone();
        value += dy;
        for (j, pj) in protos.iter().enumerate() {
            if j == y {
                continue;
            }
            let (dj, gj) = dist(fi, pj);
            let h = dy - dj + margin;
            if h > T::zero() {
                value += h;
                for ((acc, &a), &b) in g.iter_mut().zip(&gy).zip(&gj) {
                    *acc += a - b;
                }
            }
        }
        grad.push(g.into_iter().map(|v| v * inv_n).collect());
    }
    Ok(Scored {
        value: value * inv_n,
        grad,
    })
}

/// Batch indices of one (anchor, positive, negative) triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Mean triplet hinge over `triplets`, indexing rows of `g`. The gradient
/// has one row per row of `g`.
pub fn subject_loss<T: Real>(g: &[Vec<T>], triplets: &[Triplet], margin: T) -> Result<Scored<T>> {
    let dim = g.first().map_or(0, Vec::len);
    let mut grad = vec![vec![T::zero(); dim]; g.len()];
    if triplets.is_empty() {
        return Ok(Scored { value: T::zero(), grad });
    }
    let inv_n = T::one() / T::from_usize(triplets.len()).unwrap();
    let mut value = T::zero();
    for t in triplets {
        if [t.anchor, t.positive, t.negative].iter().any(|&i| i >= g.len()) {
            return Err(Error::Triplet(format!(
                "triplet {t:?} indexes a batch of {}",
                g.len()
            )));
        }
        let (a, p, n) = (&g[t.anchor], &g[t.positive], &g[t.negative]);
        let (dp, gp) = dist(a, p);
        let (dn, gn) = dist(a, n);
        let h = dp - dn + margin;
        if h <= T::zero() {
            continue;
        }
        value += h;
        for i in 0..dim {
            grad[t.anchor][i] += (gp[i] - gn[i]) * inv_n;
            grad[t.positive][i] -= gp[i] * inv_n;
            grad[t.negative][i] += gn[i] * inv_n;
        }
    }
    Ok(Scored {
        value: value * inv_n,
        grad,
    })
}

/// Weighted objective with its components and per-sample output gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss<T> {
    pub total: T,
    pub ce: T,
    pub task: T,
    pub subject: T,
    pub grads: Vec<OutGrad<T>>,
}

/// `ce + λ1·task + λ2·subject`. Samples with `label = None` (rest-state)
/// take part only through the triplets. `protos = None` disables the task
/// term.
pub fn total_loss<T: Real>(
    outs: &[ForwardOut<T>],
    labels: &[Option<usize>],
    triplets: &[Triplet],
    protos: Option<&[Vec<T>]>,
    w: &LossWeights,
) -> Result<TotalLoss<T>> {
    if outs.len() != labels.len() {
        return Err(Error::Dimension(format!("{} outputs for {} labels", outs.len(), labels.len())));
    }
    let labeled: Vec<usize> = (0..outs.len()).filter(|&i| labels[i].is_some()).collect();
    let y: Vec<usize> = labeled.iter().map(|&i| labels[i].unwrap()).collect();
    let mut grads: Vec<OutGrad<T>> = outs
        .iter()
        .map(|o| OutGrad {
            f: vec![T::zero(); o.f.len()],
            g: vec![T::zero(); o.g.len()],
            logits: vec![T::zero(); o.logits.len()],
        })
        .collect();
    let margin = T::lit(w.margin);

    let mut ce = T::zero();
    let mut task = T::zero();
    if !labeled.is_empty() {
        let logits: Vec<Vec<T>> = labeled.iter().map(|&i| outs[i].logits.clone()).collect();
        let s = ce_loss(&logits, &y)?;
        ce = s.value;
        for (&i, g) in labeled.iter().zip(s.grad) {
            grads[i].logits = g;
        }
        if let Some(p) = protos {
            let l1 = T::lit(w.lambda1);
            let f: Vec<Vec<T>> = labeled.iter().map(|&i| outs[i].f.clone()).collect();
            let s = task_loss(&f, &y, p, margin)?;
            task = s.value;
            for (&i, g) in labeled.iter().zip(s.grad) {
                grads[i].f = g.into_iter().map(|v| v * l1).collect();
            }
        }
    }
    let g: Vec<Vec<T>> = outs.iter().map(|o| o.g.clone()).collect();
    let s = subject_loss(&g, triplets, margin)?;
    let subject = s.value;
    let l2 = T::lit(w.lambda2);
    for (dst, src) in grads.iter_mut().zip(s.grad) {
        dst.g = src.into_iter().map(|v| v * l2).collect();
    }
    Ok(TotalLoss {
        total: ce + T::lit(w.lambda1) * task + l2 * subject,
        ce,
        task,
        subject,
        grads,
    })
}

/// Moving-average step `P_y ← P_y − (ε/N_y) Σ_{i: y_i = y} (P_y − f_i)` for
/// every class present in the batch.
pub fn update_prototypes(bank: &mut PrototypeBank, f: &[Vec<f32>], labels: &[Option<usize>]) {
    let eps = bank.epsilon;
    for (k, proto) in bank.prototypes.iter_mut().enumerate() {
        let members: Vec<&Vec<f32>> = f
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l == Some(k))
            .map(|(x, _)| x)
            .collect();
        if members.is_empty() || eps == 0.0 {
            continue;
        }
        let scale = eps / members.len() as f64;
        for (d, p) in proto.iter_mut().enumerate() {
            let resid: f64 = members.iter().map(|x| (*p - x[d]) as f64).sum();
            *p = (*p as f64 - scale * resid) as f32;
        }
    }
}
