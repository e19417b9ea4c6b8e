//! Compact convolutional EEG encoder split into a shared stem, a task branch,
//! a subject branch and a linear classifier, with exact reverse-mode
//! gradients for both parameters and inputs.
//!
//! Layout of one forward pass for an input `x: [C × T]`:
//!
//! ```text
//! stem:    temporal conv 1×64 (F1 maps, no bias) → BN → depthwise spatial conv C×1 (×D)
//!          → BN → ELU → avgpool 1×4 → dropout                       → s: [16 × T/4]
//! task:    depthwise conv 1×16 → pointwise 16→16 → BN → ELU → avgpool 1×8 → dropout
//!          → global average                                         → f: [16]
//! head:    linear 16→K                                              → logits
//! subject: same block shape as task (own weights) → linear 16→16    → g: [16]
//! ```
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for gradient verification.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;
use crate::synthgen::derive_seed;

pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Send + Sync + Debug + Default + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
    pub f1: usize,
    pub depth: usize,
    pub f2: usize,
    pub embed: usize,
    pub temporal_len: usize,
    pub sep_len: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout: f64,
}

impl Arch {
    pub fn new(channels: usize, samples: usize, classes: usize) -> Self {
        Self {
            channels,
            samples,
            classes,
            f1: 8,
            depth: 2,
            f2: 16,
            embed: 16,
            temporal_len: 64,
            sep_len: 16,
            pool1: 4,
            pool2: 8,
            dropout: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.channels == 0 {
            v.push("model: channels must be >= 1".to_string());
        }
        if self.samples < self.temporal_len {
            v.push(format!(
                "model: {} samples is shorter than the temporal kernel ({})",
                self.samples, self.temporal_len
            ));
        }
        if self.samples / self.pool1 / self.pool2 == 0 {
            v.push("model: pooled length is zero".to_string());
        }
        if self.classes < 2 {
            v.push("model: need at least 2 classes".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push("model: dropout must lie in [0, 1)".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Feature maps after the spatial conv.
    pub fn maps(&self) -> usize {
        self.f1 * self.depth
    }
    fn t1(&self) -> usize {
        self.samples / self.pool1
    }
    fn t2(&self) -> usize {
        self.t1() / self.pool2
    }
    pub fn input_len(&self) -> usize {
        self.channels * self.samples
    }
}

/// Separable block weights shared in shape by the task and subject branches.
#[derive(Debug, Clone, PartialEq)]
pub struct SepBlock<T> {
    /// `[maps × sep_len]`
    pub dw: Vec<T>,
    /// `[f2 × maps]`
    pub pw: Vec<T>,
    pub bn_w: Vec<T>,
    pub bn_b: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    /// `[f1 × temporal_len]`
    pub temporal: Vec<T>,
    pub bn1_w: Vec<T>,
    pub bn1_b: Vec<T>,
    /// `[maps × channels]`
    pub spatial: Vec<T>,
    pub bn2_w: Vec<T>,
    pub bn2_b: Vec<T>,
    pub task: SepBlock<T>,
    /// `[classes × f2]`
    pub cls_w: Vec<T>,
    pub cls_b: Vec<T>,
    pub subject: SepBlock<T>,
    /// `[embed × f2]`
    pub sub_w: Vec<T>,
    pub sub_b: Vec<T>,
}

pub const PARAM_NAMES: [&str; 18] = [
    "stem.temporal",
    "stem.bn1.weight",
    "stem.bn1.bias",
    "stem.spatial",
    "stem.bn2.weight",
    "stem.bn2.bias",
    "task.depthwise",
    "task.pointwise",
    "task.bn.weight",
    "task.bn.bias",
    "classifier.weight",
    "classifier.bias",
    "subject.depthwise",
    "subject.pointwise",
    "subject.bn.weight",
    "subject.bn.bias",
    "subject.linear.weight",
    "subject.linear.bias",
];

impl<T: Real> Params<T> {
    pub fn zeros(a: &Arch) -> Self {
        let z = |n: usize| vec![T::zero(); n];
        let block = || SepBlock {
            dw: z(a.maps() * a.sep_len),
            pw: z(a.f2 * a.maps()),
            bn_w: z(a.f2),
            bn_b: z(a.f2),
        };
        Self {
            temporal: z(a.f1 * a.temporal_len),
            bn1_w: z(a.f1),
            bn1_b: z(a.f1),
            spatial: z(a.maps() * a.channels),
            bn2_w: z(a.maps()),
            bn2_b: z(a.maps()),
            task: block(),
            cls_w: z(a.classes * a.f2),
            cls_b: z(a.classes),
            subject: block(),
            sub_w: z(a.embed * a.f2),
            sub_b: z(a.embed),
        }
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Vec<T>; 18] {
        [
            &self.temporal,
            &self.bn1_w,
            &self.bn1_b,
            &self.spatial,
            &self.bn2_w,
            &self.bn2_b,
            &self.task.dw,
            &self.task.pw,
            &self.task.bn_w,
            &self.task.bn_b,
            &self.cls_w,
            &self.cls_b,
            &self.subject.dw,
            &self.subject.pw,
            &self.subject.bn_w,
            &self.subject.bn_b,
            &self.sub_w,
            &self.sub_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; 18] {
        [
            &mut self.temporal,
            &mut self.bn1_w,
            &mut self.bn1_b,
            &mut self.spatial,
            &mut self.bn2_w,
            &mut self.bn2_b,
            &mut self.task.dw,
            &mut self.task.pw,
            &mut self.task.bn_w,
            &mut self.task.bn_b,
            &mut self.cls_w,
            &mut self.cls_b,
            &mut self.subject.dw,
            &mut self.subject.pw,
            &mut self.subject.bn_w,
            &mut self.subject.bn_b,
            &mut self.sub_w,
            &mut self.sub_b,
        ]
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        let cb = |b: &SepBlock<T>| SepBlock {
            dw: c(&b.dw),
            pw: c(&b.pw),
            bn_w: c(&b.bn_w),
            bn_b: c(&b.bn_b),
        };
        Params {
            temporal: c(&self.temporal),
            bn1_w: c(&self.bn1_w),
            bn1_b: c(&self.bn1_b),
            spatial: c(&self.spatial),
            bn2_w: c(&self.bn2_w),
            bn2_b: c(&self.bn2_b),
            task: cb(&self.task),
            cls_w: c(&self.cls_w),
            cls_b: c(&self.cls_b),
            subject: cb(&self.subject),
            sub_w: c(&self.sub_w),
            sub_b: c(&self.sub_b),
        }
    }
}

/// Running mean/variance of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStat<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Running statistics of the four normalization layers, in the order
/// stem.bn1, stem.bn2, task.bn, subject.bn.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub layers: [NormStat<T>; 4],
}

pub const NORM_NAMES: [&str; 4] = ["stem.bn1", "stem.bn2", "task.bn", "subject.bn"];

impl<T: Real> RunningStats<T> {
    pub fn new(a: &Arch) -> Self {
        let l = |n: usize| NormStat {
            mean: vec![T::zero(); n],
            var: vec![T::one(); n],
        };
        Self {
            layers: [l(a.f1), l(a.maps()), l(a.f2), l(a.f2)],
        }
    }

    pub fn cast<U: Real>(&self) -> RunningStats<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        RunningStats {
            layers: self.layers.clone().map(|l| NormStat {
                mean: c(&l.mean),
                var: c(&l.var),
            }),
        }
    }

    /// Exponential moving update from the batch statistics recorded on a
    /// train-mode tape (unbiased variance, momentum 0.1).
    pub fn update_from(&mut self, tape: &Tape<T>) {
        let Some(batch) = &tape.batch_stats else { return };
        let m = T::lit(BN_MOMENTUM);
        for (layer, b) in self.layers.iter_mut().zip(batch) {
            let unbias = if b.count > 1 {
                T::lit(b.count as f64 / (b.count - 1) as f64)
            } else {
                T::one()
            };
            for c in 0..layer.mean.len() {
                layer.mean[c] = (T::one() - m) * layer.mean[c] + m * b.mean[c];
                layer.var[c] = (T::one() - m) * layer.var[c] + m * b.var[c] * unbias;
            }
        }
    }
}

/// Trainable parameters plus normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub arch: Arch,
    pub params: Params<T>,
    pub stats: RunningStats<T>,
}

/// The single-precision model used for training, calibration and adaptation.
pub type ModelBundle = Model<f32>;

impl<T: Real> Model<T> {
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch,
            params: self.params.cast(),
            stats: self.stats.cast(),
        }
    }

    /// SHA-256 over architecture, parameters and running statistics.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        let mut feed = |v: &[T]| {
            for x in v {
                h.update(x.to_f64().unwrap().to_le_bytes());
            }
        };
        for t in self.params.tensors() {
            feed(t);
        }
        for l in &self.stats.layers {
            feed(&l.mean);
            feed(&l.var);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic initialization: weights uniform in ±1/sqrt(fan_in),
/// normalization scales 1 and shifts 0.
pub fn init_model(channels: usize, samples: usize, classes: usize, seed: u64) -> Result<ModelBundle> {
    let arch = Arch::new(channels, samples, classes);
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::<f32>::zeros(&arch);
    let mut fill = |v: &mut Vec<f32>, fan_in: usize| {
        let b = 1.0 / (fan_in as f32).sqrt();
        v.iter_mut().for_each(|x| *x = rng.gen_range(-b..b));
    };
    fill(&mut p.temporal, arch.temporal_len);
    fill(&mut p.spatial, arch.channels);
    for blk in [&mut p.task, &mut p.subject] {
        fill(&mut blk.dw, arch.sep_len);
        fill(&mut blk.pw, arch.maps());
    }
    fill(&mut p.cls_w, arch.f2);
    fill(&mut p.cls_b, arch.f2);
    fill(&mut p.sub_w, arch.f2);
    fill(&mut p.sub_b, arch.f2);
    for v in [&mut p.bn1_w, &mut p.bn2_w, &mut p.task.bn_w, &mut p.subject.bn_w] {
        v.iter_mut().for_each(|x| *x = 1.0);
    }
    Ok(Model {
        arch,
        params: p,
        stats: RunningStats::new(&arch),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers, dropout masks drawn from the seed.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOut<T> {
    /// Task feature (global average of the task branch).
    pub f: Vec<T>,
    /// Subject embedding.
    pub g: Vec<T>,
    pub logits: Vec<T>,
}

/// Upstream gradient for one sample. Empty vectors stand for zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutGrad<T> {
    pub f: Vec<T>,
    pub g: Vec<T>,
    pub logits: Vec<T>,
}

// ---------------------------------------------------------------------------
// kernels

/// `out[t] += w * x[t + shift]` wherever both indices are in range.
#[inline]
fn axpy_shifted<T: Real>(out: &mut [T], x: &[T], w: T, shift: isize) {
    let n = out.len() as isize;
    let m = x.len() as isize;
    let lo = 0.max(-shift);
    let hi = n.min(m - shift);
    if hi <= lo {
        return;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let xs = (lo as isize + shift) as usize;
    for (o, &v) in out[lo..hi].iter_mut().zip(&x[xs..xs + (hi - lo)]) {
        *o += w * v;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `sum_t a[t] * b[t + shift]` over the valid range.
#[inline]
fn dot_shifted<T: Real>(a: &[T], b: &[T], shift: isize) -> T {
    let n = a.len() as isize;
    let m = b.len() as isize;
    let lo = 0.max(-shift);
    let hi = n.min(m - shift);
    if hi <= lo {
        return T::zero();
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let bs = (lo as isize + shift) as usize;
    dot(&a[lo..hi], &b[bs..bs + (hi - lo)])
}

fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

/// ELU derivative expressed through its output.
fn elu_grad_from_out<T: Real>(y: T) -> T {
    if y > T::zero() {
        T::one()
    } else {
        y + T::one()
    }
}

fn avg_pool<T: Real>(x: &[T], rows: usize, len: usize, p: usize) -> Vec<T> {
    let out_len = len / p;
    let inv = T::one() / T::from_usize(p).unwrap();
    let mut out = vec![T::zero(); rows * out_len];
    for r in 0..rows {
        for i in 0..out_len {
            let s: T = x[r * len + i * p..r * len + i * p + p].iter().copied().sum();
            out[r * out_len + i] = s * inv;
        }
    }
    out
}

fn avg_pool_back<T: Real>(d: &[T], rows: usize, len: usize, p: usize) -> Vec<T> {
    let out_len = len / p;
    let inv = T::one() / T::from_usize(p).unwrap();
    let mut dx = vec![T::zero(); rows * len];
    for r in 0..rows {
        for i in 0..out_len {
            let g = d[r * out_len + i] * inv;
            for v in &mut dx[r * len + i * p..r * len + i * p + p] {
                *v = g;
            }
        }
    }
    dx
}

fn dropout_mask<T: Real>(n: usize, rate: f64, seed: u64) -> Vec<T> {
    if rate == 0.0 {
        return vec![T::one(); n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

// ---------------------------------------------------------------------------
// normalization helpers

/// Statistics used by one normalization layer during a pass.
#[derive(Debug, Clone)]
pub struct BnUse<T> {
    pub mean: Vec<T>,
    /// Biased variance (batch) or running variance (eval).
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Elements per channel that produced the batch statistics.
    pub count: usize,
}

impl<T: Real> BnUse<T> {
    fn from_running(s: &NormStat<T>) -> Self {
        let eps = T::lit(BN_EPS);
        Self {
            mean: s.mean.clone(),
            var: s.var.clone(),
            inv_std: s.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
            count: 0,
        }
    }
}

/// Per-channel batch mean and biased variance of `acts`, each sample laid
/// out as `[channels × inner]` (with `inner` possibly itself `rows × len`).
fn batch_moments<T: Real, A: AsRef<[T]> + Sync>(acts: &[A], channels: usize) -> (Vec<T>, Vec<T>, usize) {
    let inner = acts[0].as_ref().len() / channels;
    let count = inner * acts.len();
    let inv = T::one() / T::from_usize(count).unwrap();
    let sums = par::map_slice(acts, |a| {
        let a = a.as_ref();
        (0..channels)
            .map(|c| a[c * inner..(c + 1) * inner].iter().copied().sum::<T>())
            .collect::<Vec<T>>()
    });
    let mut mean = vec![T::zero(); channels];
    for s in &sums {
        for c in 0..channels {
            mean[c] += s[c];
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    let sq = par::map_slice(acts, |a| {
        let a = a.as_ref();
        (0..channels)
            .map(|c| {
                a[c * inner..(c + 1) * inner]
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<T>()
            })
            .collect::<Vec<T>>()
    });
    let mut var = vec![T::zero(); channels];
    for s in &sq {
        for c in 0..channels {
            var[c] += s[c];
        }
    }
    var.iter_mut().for_each(|v| *v *= inv);
    (mean, var, count)
}

fn bn_use<T: Real, A: AsRef<[T]> + Sync>(acts: &[A], channels: usize, mode: Mode, running: &NormStat<T>) -> BnUse<T> {
    match mode {
        Mode::Eval => BnUse::from_running(running),
        Mode::Train { .. } => {
            let (mean, var, count) = batch_moments(acts, channels);
            let eps = T::lit(BN_EPS);
            let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            BnUse {
                mean,
                var,
                inv_std,
                count,
            }
        }
    }
}

fn bn_apply<T: Real>(h: &[T], channels: usize, bn: &BnUse<T>, w: &[T], b: &[T]) -> Vec<T> {
    let inner = h.len() / channels;
    let mut out = Vec::with_capacity(h.len());
    for c in 0..channels {
        let (m, s, g, o) = (bn.mean[c], bn.inv_std[c], w[c], b[c]);
        out.extend(h[c * inner..(c + 1) * inner].iter().map(|&v| g * (v - m) * s + o));
    }
    out
}

/// Per-sample contributions to `(sum dy, sum dy * xhat)` per channel.
fn bn_back_sums<T: Real>(dy: &[T], h: &[T], channels: usize, bn: &BnUse<T>) -> (Vec<T>, Vec<T>) {
    let inner = h.len() / channels;
    let mut sdy = vec![T::zero(); channels];
    let mut sdx = vec![T::zero(); channels];
    for c in 0..channels {
        let (m, s) = (bn.mean[c], bn.inv_std[c]);
        let r = c * inner..(c + 1) * inner;
        for (&g, &v) in dy[r.clone()].iter().zip(&h[r]) {
            sdy[c] += g;
            sdx[c] += g * (v - m) * s;
        }
    }
    (sdy, sdx)
}

/// Gradient wrt the pre-normalization activation.
fn bn_back_input<T: Real>(
    dy: &[T],
    h: &[T],
    channels: usize,
    bn: &BnUse<T>,
    w: &[T],
    sums: Option<(&[T], &[T])>,
) -> Vec<T> {
    let inner = h.len() / channels;
    let mut dx = Vec::with_capacity(h.len());
    for c in 0..channels {
        let (m, s) = (bn.mean[c], bn.inv_std[c]);
        let r = c * inner..(c + 1) * inner;
        match sums {
            None => dx.extend(dy[r].iter().map(|&g| w[c] * s * g)),
            Some((sdy, sdx)) => {
                let inv_n = T::one() / T::from_usize(bn.count).unwrap();
                let (a, b) = (sdy[c] * inv_n, sdx[c] * inv_n);
                dx.extend(
                    dy[r.clone()]
                        .iter()
                        .zip(&h[r])
                        .map(|(&g, &v)| w[c] * s * (g - a - (v - m) * s * b)),
                );
            }
        }
    }
    dx
}

fn reduce_sums<T: Real>(parts: &[(Vec<T>, Vec<T>)], channels: usize) -> (Vec<T>, Vec<T>) {
    let mut a = vec![T::zero(); channels];
    let mut b = vec![T::zero(); channels];
    for (x, y) in parts {
        for c in 0..channels {
            a[c] += x[c];
            b[c] += y[c];
        }
    }
    (a, b)
}

// ---------------------------------------------------------------------------
// forward

#[derive(Debug, Clone)]
struct BranchCache<T> {
    /// Depthwise output `[maps × t1]`.
    u: Vec<T>,
    /// Pointwise output, pre-normalization `[f2 × t1]`.
    v: Vec<T>,
    /// ELU output `[f2 × t1]`.
    e: Vec<T>,
    mask: Vec<T>,
    /// Globally pooled feature `[f2]`.
    pooled: Vec<T>,
}

#[derive(Debug, Clone)]
struct SampleCache<T> {
    x: Vec<T>,
    /// Temporal conv output `[f1 × C × T]`.
    h1: Vec<T>,
    /// Spatial conv output `[maps × T]`.
    h2: Vec<T>,
    e2: Vec<T>,
    mask2: Vec<T>,
    /// Stem output `[maps × t1]`.
    s: Vec<T>,
    task: BranchCache<T>,
    subject: BranchCache<T>,
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    mode: Mode,
    samples: Vec<SampleCache<T>>,
    bn: [BnUse<T>; 4],
    /// Batch statistics (train mode only), for running-stat updates.
    pub batch_stats: Option<[BnUse<T>; 4]>,
}

impl<T: Real> Tape<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn temporal_forward<T: Real>(a: &Arch, w: &[T], x: &[T]) -> Vec<T> {
    let (c_n, t_n, l) = (a.channels, a.samples, a.temporal_len);
    let pad = ((l - 1) / 2) as isize;
    let mut out = vec![T::zero(); a.f1 * c_n * t_n];
    for f in 0..a.f1 {
        for c in 0..c_n {
            let o = &mut out[(f * c_n + c) * t_n..(f * c_n + c + 1) * t_n];
            let xc = &x[c * t_n..(c + 1) * t_n];
            for k in 0..l {
                axpy_shifted(o, xc, w[f * l + k], k as isize - pad);
            }
        }
    }
    out
}

fn spatial_forward<T: Real>(a: &Arch, w: &[T], y1: &[T]) -> Vec<T> {
    let (c_n, t_n) = (a.channels, a.samples);
    let mut out = vec![T::zero(); a.maps() * t_n];
    for m in 0..a.maps() {
        let f = m / a.depth;
        let o = &mut out[m * t_n..(m + 1) * t_n];
        for c in 0..c_n {
            axpy_shifted(o, &y1[(f * c_n + c) * t_n..(f * c_n + c + 1) * t_n], w[m * c_n + c], 0);
        }
    }
    out
}

fn branch_conv<T: Real>(a: &Arch, blk: &SepBlock<T>, s: &[T]) -> (Vec<T>, Vec<T>) {
    let (maps, t1, l) = (a.maps(), a.t1(), a.sep_len);
    let pad = ((l - 1) / 2) as isize;
    let mut u = vec![T::zero(); maps * t1];
    for m in 0..maps {
        let o = &mut u[m * t1..(m + 1) * t1];
        let src = &s[m * t1..(m + 1) * t1];
        for k in 0..l {
            axpy_shifted(o, src, blk.dw[m * l + k], k as isize - pad);
        }
    }
    let mut v = vec![T::zero(); a.f2 * t1];
    for o in 0..a.f2 {
        let dst = &mut v[o * t1..(o + 1) * t1];
        for i in 0..maps {
            axpy_shifted(dst, &u[i * t1..(i + 1) * t1], blk.pw[o * maps + i], 0);
        }
    }
    (u, v)
}

fn branch_finish<T: Real>(
    a: &Arch,
    blk: &SepBlock<T>,
    bn: &BnUse<T>,
    u: Vec<T>,
    v: Vec<T>,
    mask_seed: Option<u64>,
) -> BranchCache<T> {
    let (t1, t2) = (a.t1(), a.t2());
    let y = bn_apply(&v, a.f2, bn, &blk.bn_w, &blk.bn_b);
    let e: Vec<T> = y.into_iter().map(elu).collect();
    let mut p = avg_pool(&e, a.f2, t1, a.pool2);
    let mask = match mask_seed {
        Some(seed) => dropout_mask(p.len(), a.dropout, seed),
        None => Vec::new(),
    };
    if !mask.is_empty() {
        p.iter_mut().zip(&mask).for_each(|(x, m)| *x *= *m);
    }
    let inv = T::one() / T::from_usize(t2).unwrap();
    let pooled = (0..a.f2)
        .map(|c| p[c * t2..(c + 1) * t2].iter().copied().sum::<T>() * inv)
        .collect();
    BranchCache { u, v, e, mask, pooled }
}

fn linear<T: Real>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| bias + dot(&w[o * n_in..(o + 1) * n_in], x))
        .collect()
}

struct Mid<T> {
    e2: Vec<T>,
    mask2: Vec<T>,
    s: Vec<T>,
    task_uv: (Vec<T>, Vec<T>),
    sub_uv: (Vec<T>, Vec<T>),
}

/// Batched forward pass. Returns per-sample outputs and the tape needed for
/// [`backward`]. Pure: running statistics only change through
/// [`RunningStats::update_from`].
pub fn forward_batch<T: Real>(
    model: &Model<T>,
    inputs: &[&[T]],
    mode: Mode,
) -> Result<(Vec<ForwardOut<T>>, Tape<T>)> {
    let a = &model.arch;
    let p = &model.params;
    if inputs.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    for (i, x) in inputs.iter().enumerate() {
        if x.len() != a.input_len() {
            return Err(Error::Dimension(format!(
                "sample {i} has {} values, model expects {} x {}",
                x.len(),
                a.channels,
                a.samples
            )));
        }
    }
    let seed_for = |i: usize, layer: u64| match mode {
        Mode::Train { dropout_seed } if a.dropout > 0.0 => {
            Some(derive_seed(dropout_seed, &[i as u64, layer]))
        }
        _ => None,
    };

    let h1s: Vec<Vec<T>> = par::map_slice(inputs, |x| temporal_forward(a, &p.temporal, x));
    let bn1 = bn_use(&h1s, a.f1, mode, &model.stats.layers[0]);
    let h2s: Vec<Vec<T>> = par::map_slice(&h1s, |h1| {
        let y1 = bn_apply(h1, a.f1, &bn1, &p.bn1_w, &p.bn1_b);
        spatial_forward(a, &p.spatial, &y1)
    });
    let bn2 = bn_use(&h2s, a.maps(), mode, &model.stats.layers[1]);
    let mids: Vec<Mid<T>> = par::map_range(inputs.len(), |i| {
        let y2 = bn_apply(&h2s[i], a.maps(), &bn2, &p.bn2_w, &p.bn2_b);
        let e2: Vec<T> = y2.into_iter().map(elu).collect();
        let mut s = avg_pool(&e2, a.maps(), a.samples, a.pool1);
        let mask2 = match seed_for(i, 0) {
            Some(seed) => dropout_mask(s.len(), a.dropout, seed),
            None => Vec::new(),
        };
        if !mask2.is_empty() {
            s.iter_mut().zip(&mask2).for_each(|(x, m)| *x *= *m);
        }
        let task_uv = branch_conv(a, &p.task, &s);
        let sub_uv = branch_conv(a, &p.subject, &s);
        Mid {
            e2,
            mask2,
            s,
            task_uv,
            sub_uv,
        }
    });
    let tvs: Vec<&[T]> = mids.iter().map(|m| m.task_uv.1.as_slice()).collect();
    let svs: Vec<&[T]> = mids.iter().map(|m| m.sub_uv.1.as_slice()).collect();
    let bn3 = bn_use(&tvs, a.f2, mode, &model.stats.layers[2]);
    let bn4 = bn_use(&svs, a.f2, mode, &model.stats.layers[3]);

    let inputs_owned: Vec<Vec<T>> = inputs.iter().map(|x| x.to_vec()).collect();
    let work: Vec<((Mid<T>, Vec<T>), Vec<T>)> = mids.into_iter().zip(h1s).zip(h2s).collect();
    let samples: Vec<SampleCache<T>> = par::map_owned(work, |i, ((m, h1), h2)| {
        let task = branch_finish(a, &p.task, &bn3, m.task_uv.0, m.task_uv.1, seed_for(i, 1));
        let subject = branch_finish(a, &p.subject, &bn4, m.sub_uv.0, m.sub_uv.1, seed_for(i, 2));
        SampleCache {
            x: inputs_owned[i].clone(),
            h1,
            h2,
            e2: m.e2,
            mask2: m.mask2,
            s: m.s,
            task,
            subject,
        }
    });
    let outs = samples
        .iter()
        .map(|c| ForwardOut {
            f: c.task.pooled.clone(),
            g: linear(&p.sub_w, &p.sub_b, &c.subject.pooled),
            logits: linear(&p.cls_w, &p.cls_b, &c.task.pooled),
        })
        .collect();
    let bn = [bn1, bn2, bn3, bn4];
    let batch_stats = match mode {
        Mode::Train { .. } => Some(bn.clone()),
        Mode::Eval => None,
    };
    Ok((
        outs,
        Tape {
            mode,
            samples,
            bn,
            batch_stats,
        },
    ))
}

/// Convenience forward without a tape.
pub fn forward<T: Real>(model: &Model<T>, inputs: &[&[T]], mode: Mode) -> Result<Vec<ForwardOut<T>>> {
    Ok(forward_batch(model, inputs, mode)?.0)
}

// ---------------------------------------------------------------------------
// normalization-statistics prior

/// Penalty `weight * Σ_layers Σ_c (μ_c − μ̂_c)² + (σ²_c − σ̂²_c)²` between the
/// batch statistics of each normalization layer's input and a reference
/// (normally the model's running statistics).
#[derive(Debug, Clone, Copy)]
pub struct StatPrior<'a, T> {
    pub weight: T,
    pub reference: &'a RunningStats<T>,
}

/// Per-layer coefficients of the prior gradient: `d/dh = a_c + b_c (h − μ_c)`.
struct PriorCoef<T> {
    mean: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
}

fn layer_acts<T: Real>(tape: &Tape<T>, layer: usize) -> Vec<&[T]> {
    tape.samples
        .iter()
        .map(|s| match layer {
            0 => s.h1.as_slice(),
            1 => s.h2.as_slice(),
            2 => s.task.v.as_slice(),
            _ => s.subject.v.as_slice(),
        })
        .collect()
}

fn layer_channels(a: &Arch, layer: usize) -> usize {
    match layer {
        0 => a.f1,
        1 => a.maps(),
        _ => a.f2,
    }
}

fn prior_terms<T: Real>(model: &Model<T>, tape: &Tape<T>, prior: &StatPrior<T>) -> (T, Vec<PriorCoef<T>>) {
    let mut value = T::zero();
    let mut coefs = Vec::with_capacity(4);
    let two = T::lit(2.0);
    for layer in 0..4 {
        let ch = layer_channels(&model.arch, layer);
        let (mean, var, count) = batch_moments(&layer_acts(tape, layer), ch);
        let r = &prior.reference.layers[layer];
        let inv_n = T::one() / T::from_usize(count).unwrap();
        let mut a = Vec::with_capacity(ch);
        let mut b = Vec::with_capacity(ch);
        for c in 0..ch {
            let dm = mean[c] - r.mean[c];
            let dv = var[c] - r.var[c];
            value += dm * dm + dv * dv;
            a.push(prior.weight * two * dm * inv_n);
            b.push(prior.weight * two * two * dv * inv_n);
        }
        coefs.push(PriorCoef { mean, a, b });
    }
    (prior.weight * value, coefs)
}

/// Value of the statistics prior for the batch on `tape`.
pub fn stat_penalty<T: Real>(model: &Model<T>, tape: &Tape<T>, prior: &StatPrior<T>) -> T {
    prior_terms(model, tape, prior).0
}

fn add_prior_grad<T: Real>(dh: &mut [T], h: &[T], channels: usize, coef: Option<&PriorCoef<T>>) {
    let Some(coef) = coef else { return };
    let inner = h.len() / channels;
    for c in 0..channels {
        let r = c * inner..(c + 1) * inner;
        for (d, &v) in dh[r.clone()].iter_mut().zip(&h[r]) {
            *d += coef.a[c] + coef.b[c] * (v - coef.mean[c]);
        }
    }
}

// ---------------------------------------------------------------------------
// backward

/// Gradients produced by [`backward`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub params: Option<Params<T>>,
    /// Per-sample gradient with respect to the input, `[C × T]` flat.
    pub inputs: Option<Vec<Vec<T>>>,
}

fn branch_head_back<T: Real>(a: &Arch, c: &BranchCache<T>, dpooled: &[T]) -> Vec<T> {
    let (t1, t2) = (a.t1(), a.t2());
    let inv = T::one() / T::from_usize(t2).unwrap();
    let mut dp = vec![T::zero(); a.f2 * t2];
    for ch in 0..a.f2 {
        let g = dpooled[ch] * inv;
        dp[ch * t2..(ch + 1) * t2].iter_mut().for_each(|v| *v = g);
    }
    if !c.mask.is_empty() {
        dp.iter_mut().zip(&c.mask).for_each(|(d, m)| *d *= *m);
    }
    let mut de = avg_pool_back(&dp, a.f2, t1, a.pool2);
    de.iter_mut()
        .zip(&c.e)
        .for_each(|(d, &e)| *d *= elu_grad_from_out(e));
    de
}

/// Back through pointwise and depthwise convs; accumulates the gradient wrt
/// the stem output into `ds`.
fn branch_conv_back<T: Real>(
    a: &Arch,
    blk: &SepBlock<T>,
    c: &BranchCache<T>,
    s: &[T],
    dv: &[T],
    ds: &mut [T],
    grad: Option<&mut SepBlock<T>>,
) {
    let (maps, t1, l) = (a.maps(), a.t1(), a.sep_len);
    let pad = ((l - 1) / 2) as isize;
    let mut du = vec![T::zero(); maps * t1];
    for o in 0..a.f2 {
        let dvo = &dv[o * t1..(o + 1) * t1];
        for i in 0..maps {
            axpy_shifted(&mut du[i * t1..(i + 1) * t1], dvo, blk.pw[o * maps + i], 0);
        }
    }
    for m in 0..maps {
        let dum = &du[m * t1..(m + 1) * t1];
        let dsm = &mut ds[m * t1..(m + 1) * t1];
        for k in 0..l {
            axpy_shifted(dsm, dum, blk.dw[m * l + k], pad - k as isize);
        }
    }
    if let Some(g) = grad {
        for o in 0..a.f2 {
            let dvo = &dv[o * t1..(o + 1) * t1];
            for i in 0..maps {
                g.pw[o * maps + i] += dot(dvo, &c.u[i * t1..(i + 1) * t1]);
            }
        }
        for m in 0..maps {
            let dum = &du[m * t1..(m + 1) * t1];
            let sm = &s[m * t1..(m + 1) * t1];
            for k in 0..l {
                g.dw[m * l + k] += dot_shifted(dum, sm, k as isize - pad);
            }
        }
    }
}

fn reduce_params<T: Real>(a: &Arch, parts: Vec<Option<Params<T>>>) -> Params<T> {
    let mut total = Params::zeros(a);
    for p in parts.iter().flatten() {
        total.add_assign(p);
    }
    total
}

/// Reverse pass for the batch recorded on `tape`.
///
/// `upstream[i]` carries dL/d(f, g, logits) for sample `i`. With `prior`,
/// the gradient of [`stat_penalty`] is added at every normalization input.
pub fn backward<T: Real>(
    model: &Model<T>,
    tape: &Tape<T>,
    upstream: &[OutGrad<T>],
    prior: Option<&StatPrior<T>>,
    want_params: bool,
    want_input: bool,
) -> Result<Grads<T>> {
    let a = &model.arch;
    let p = &model.params;
    let n = tape.samples.len();
    if upstream.len() != n {
        return Err(Error::Dimension(format!(
            "{} upstream gradients for a batch of {n}",
            upstream.len()
        )));
    }
    let train = matches!(tape.mode, Mode::Train { .. });
    let coefs = prior.map(|pr| prior_terms(model, tape, pr).1);
    let coef = |layer: usize| coefs.as_ref().map(|c| &c[layer]);
    let mut partial: Vec<Option<Params<T>>> = (0..n)
        .map(|_| want_params.then(|| Params::zeros(a)))
        .collect();

    // Heads → gradients wrt the branch normalization outputs.
    let heads: Vec<(Vec<T>, Vec<T>)> = {
        let mut out = Vec::with_capacity(n);
        for (i, (c, up)) in tape.samples.iter().zip(upstream).enumerate() {
            let mut df = if up.f.is_empty() { vec![T::zero(); a.f2] } else { up.f.clone() };
            if !up.logits.is_empty() {
                for k in 0..a.classes {
                    for j in 0..a.f2 {
                        df[j] += p.cls_w[k * a.f2 + j] * up.logits[k];
                    }
                }
            }
            let mut dq = vec![T::zero(); a.f2];
            if !up.g.is_empty() {
                for e in 0..a.embed {
                    for j in 0..a.f2 {
                        dq[j] += p.sub_w[e * a.f2 + j] * up.g[e];
                    }
                }
            }
            if let Some(g) = partial[i].as_mut() {
                if !up.logits.is_empty() {
                    for k in 0..a.classes {
                        g.cls_b[k] += up.logits[k];
                        for j in 0..a.f2 {
                            g.cls_w[k * a.f2 + j] += up.logits[k] * c.task.pooled[j];
                        }
                    }
                }
                if !up.g.is_empty() {
                    for e in 0..a.embed {
                        g.sub_b[e] += up.g[e];
                        for j in 0..a.f2 {
                            g.sub_w[e * a.f2 + j] += up.g[e] * c.subject.pooled[j];
                        }
                    }
                }
            }
            out.push((df, dq));
        }
        par::map_range(n, |i| {
            (
                branch_head_back(a, &tape.samples[i].task, &out[i].0),
                branch_head_back(a, &tape.samples[i].subject, &out[i].1),
            )
        })
    };

    // Branch normalization layers.
    let (bn3, bn4) = (&tape.bn[2], &tape.bn[3]);
    let s3 = reduce_sums(
        &par::map_range(n, |i| bn_back_sums(&heads[i].0, &tape.samples[i].task.v, a.f2, bn3)),
        a.f2,
    );
    let s4 = reduce_sums(
        &par::map_range(n, |i| bn_back_sums(&heads[i].1, &tape.samples[i].subject.v, a.f2, bn4)),
        a.f2,
    );
    let mut shared = Params::zeros(a);
    shared.task.bn_b.clone_from(&s3.0);
    shared.task.bn_w.clone_from(&s3.1);
    shared.subject.bn_b.clone_from(&s4.0);
    shared.subject.bn_w.clone_from(&s4.1);

    // Branch convs → stem output → BN2 output.
    let dy2s: Vec<Vec<T>> = par::map_range(n, |i| {
        let c = &tape.samples[i];
        let sums3 = train.then_some((s3.0.as_slice(), s3.1.as_slice()));
        let sums4 = train.then_some((s4.0.as_slice(), s4.1.as_slice()));
        let mut dv3 = bn_back_input(&heads[i].0, &c.task.v, a.f2, bn3, &p.task.bn_w, sums3);
        add_prior_grad(&mut dv3, &c.task.v, a.f2, coef(2));
        let mut dv4 = bn_back_input(&heads[i].1, &c.subject.v, a.f2, bn4, &p.subject.bn_w, sums4);
        add_prior_grad(&mut dv4, &c.subject.v, a.f2, coef(3));
        let mut ds = vec![T::zero(); a.maps() * a.t1()];
        let mut g = want_params.then(|| (Params::zeros(a).task, Params::zeros(a).subject));
        branch_conv_back(a, &p.task, &c.task, &c.s, &dv3, &mut ds, g.as_mut().map(|x| &mut x.0));
        branch_conv_back(a, &p.subject, &c.subject, &c.s, &dv4, &mut ds, g.as_mut().map(|x| &mut x.1));
        if !c.mask2.is_empty() {
            ds.iter_mut().zip(&c.mask2).for_each(|(d, m)| *d *= *m);
        }
        let mut de2 = avg_pool_back(&ds, a.maps(), a.samples, a.pool1);
        de2.iter_mut()
            .zip(&c.e2)
            .for_each(|(d, &e)| *d *= elu_grad_from_out(e));
        (de2, g)
    })
    .into_iter()
    .enumerate()
    .map(|(i, (de2, g))| {
        if let (Some(dst), Some((gt, gs))) = (partial[i].as_mut(), g) {
            for (x, y) in dst.task.dw.iter_mut().zip(&gt.dw) {
                *x += *y;
            }
            for (x, y) in dst.task.pw.iter_mut().zip(&gt.pw) {
                *x += *y;
            }
            for (x, y) in dst.subject.dw.iter_mut().zip(&gs.dw) {
                *x += *y;
            }
            for (x, y) in dst.subject.pw.iter_mut().zip(&gs.pw) {
                *x += *y;
            }
        }
        de2
    })
    .collect();

    // BN2.
    let bn2 = &tape.bn[1];
    let s2 = reduce_sums(
        &par::map_range(n, |i| bn_back_sums(&dy2s[i], &tape.samples[i].h2, a.maps(), bn2)),
        a.maps(),
    );
    shared.bn2_b.clone_from(&s2.0);
    shared.bn2_w.clone_from(&s2.1);

    // Spatial conv → BN1 output.
    let bn1 = &tape.bn[0];
    let (c_n, t_n) = (a.channels, a.samples);
    let spatial_back: Vec<(Vec<T>, Option<Vec<T>>)> = par::map_range(n, |i| {
        let c = &tape.samples[i];
        let sums2 = train.then_some((s2.0.as_slice(), s2.1.as_slice()));
        let mut dh2 = bn_back_input(&dy2s[i], &c.h2, a.maps(), bn2, &p.bn2_w, sums2);
        add_prior_grad(&mut dh2, &c.h2, a.maps(), coef(1));
        let mut dy1 = vec![T::zero(); a.f1 * c_n * t_n];
        let mut dsp = want_params.then(|| vec![T::zero(); a.maps() * c_n]);
        let y1 = dsp
            .is_some()
            .then(|| bn_apply(&c.h1, a.f1, bn1, &p.bn1_w, &p.bn1_b));
        for m in 0..a.maps() {
            let f = m / a.depth;
            let dm = &dh2[m * t_n..(m + 1) * t_n];
            for ch in 0..c_n {
                let r = (f * c_n + ch) * t_n..(f * c_n + ch + 1) * t_n;
                axpy_shifted(&mut dy1[r.clone()], dm, p.spatial[m * c_n + ch], 0);
                if let (Some(g), Some(y1)) = (dsp.as_mut(), y1.as_ref()) {
                    g[m * c_n + ch] += dot(dm, &y1[r]);
                }
            }
        }
        (dy1, dsp)
    });
    let mut dy1s = Vec::with_capacity(n);
    for (i, (dy1, dsp)) in spatial_back.into_iter().enumerate() {
        if let (Some(dst), Some(g)) = (partial[i].as_mut(), dsp) {
            dst.spatial.iter_mut().zip(&g).for_each(|(x, y)| *x += *y);
        }
        dy1s.push(dy1);
    }

    // BN1.
    let s1 = reduce_sums(
        &par::map_range(n, |i| bn_back_sums(&dy1s[i], &tape.samples[i].h1, a.f1, bn1)),
        a.f1,
    );
    shared.bn1_b.clone_from(&s1.0);
    shared.bn1_w.clone_from(&s1.1);

    // Temporal conv → input.
    let l = a.temporal_len;
    let pad = ((l - 1) / 2) as isize;
    let temporal_back: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = par::map_range(n, |i| {
        let c = &tape.samples[i];
        let sums1 = train.then_some((s1.0.as_slice(), s1.1.as_slice()));
        let mut dh1 = bn_back_input(&dy1s[i], &c.h1, a.f1, bn1, &p.bn1_w, sums1);
        add_prior_grad(&mut dh1, &c.h1, a.f1, coef(0));
        let mut dw = want_params.then(|| vec![T::zero(); a.f1 * l]);
        let mut dx = want_input.then(|| vec![T::zero(); c_n * t_n]);
        for f in 0..a.f1 {
            for ch in 0..c_n {
                let d = &dh1[(f * c_n + ch) * t_n..(f * c_n + ch + 1) * t_n];
                let xc = &c.x[ch * t_n..(ch + 1) * t_n];
                for k in 0..l {
                    let shift = k as isize - pad;
                    if let Some(dw) = dw.as_mut() {
                        dw[f * l + k] += dot_shifted(d, xc, shift);
                    }
                    if let Some(dx) = dx.as_mut() {
                        axpy_shifted(&mut dx[ch * t_n..(ch + 1) * t_n], d, p.temporal[f * l + k], -shift);
                    }
                }
            }
        }
        (dw, dx)
    });
    let mut dxs = want_input.then(|| Vec::with_capacity(n));
    for (i, (dw, dx)) in temporal_back.into_iter().enumerate() {
        if let (Some(dst), Some(g)) = (partial[i].as_mut(), dw) {
            dst.temporal.iter_mut().zip(&g).for_each(|(x, y)| *x += *y);
        }
        if let (Some(v), Some(dx)) = (dxs.as_mut(), dx) {
            v.push(dx);
        }
    }

    let params = want_params.then(|| {
        let mut total = reduce_params(a, partial);
        total.add_assign(&shared);
        total
    });
    Ok(Grads { params, inputs: dxs })
}

// ---------------------------------------------------------------------------
// objectives

/// A scalar function of a batch of forward outputs with its gradient.
pub trait Objective<T> {
    fn evaluate(&self, outs: &[ForwardOut<T>]) -> Result<(T, Vec<OutGrad<T>>)>;
}

impl<T, F> Objective<T> for F
where
    F: Fn(&[ForwardOut<T>]) -> Result<(T, Vec<OutGrad<T>>)>,
{
    fn evaluate(&self, outs: &[ForwardOut<T>]) -> Result<(T, Vec<OutGrad<T>>)> {
        self(outs)
    }
}

fn check_finite<T: Real>(v: T, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} is {v:?}")))
    }
}

/// Objective value and exact gradient with respect to every parameter.
pub fn grad_params<T: Real>(
    model: &Model<T>,
    mode: Mode,
    objective: &dyn Objective<T>,
    batch: &[&[T]],
) -> Result<(T, Params<T>, Tape<T>)> {
    let (outs, tape) = forward_batch(model, batch, mode)?;
    let (loss, up) = objective.evaluate(&outs)?;
    check_finite(loss, "loss")?;
    let g = backward(model, &tape, &up, None, true, false)?;
    Ok((loss, g.params.expect("requested"), tape))
}

/// Objective value (plus optional statistics prior) and exact gradient
/// with respect to a single input, parameters held fixed, eval mode.
pub fn grad_input<T: Real>(
    model: &Model<T>,
    objective: &dyn Objective<T>,
    z: &[T],
    prior: Option<&StatPrior<T>>,
) -> Result<(T, Vec<T>)> {
    let (outs, tape) = forward_batch(model, &[z], Mode::Eval)?;
    let (mut loss, up) = objective.evaluate(&outs)?;
    if let Some(pr) = prior {
        loss += stat_penalty(model, &tape, pr);
    }
    check_finite(loss, "objective")?;
    let mut g = backward(model, &tape, &up, prior, false, true)?;
    Ok((loss, g.inputs.take().expect("requested").remove(0)))
}
