//! Synthetic cross-subject EEG with known subject and task structure.
//!
//! Every subject owns an orthonormal source-to-sensor mixing matrix and a set
//! of per-source, per-band spectral gains that shape pink background noise.
//! Task trials add a Hann-windowed oscillatory burst at the class frequency
//! in one lateralized source, confined to the task window.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::eegpack::{write_pack_named, DatasetManifest, Trial, TrialKind};
use crate::error::{Error, Result};
use crate::par;

/// Band edges (Hz) used for spectral shaping: delta, theta, alpha, beta, gamma.
pub const BANDS: [(f64, f64); 5] = [
    (0.0, 4.0),
    (4.0, 8.0),
    (8.0, 13.0),
    (13.0, 30.0),
    (30.0, f64::INFINITY),
];

/// Half-width (Hz) of the band around a class frequency used to define SNR.
pub const SNR_HALF_BAND: f64 = 2.0;

/// Sensor amplitude scale in microvolts.
const MICROVOLTS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub trials_per_class: usize,
    pub rs_trials_per_subject: usize,
    pub channels: usize,
    pub fs: f64,
    pub duration: f64,
    pub classes: usize,
    pub class_freqs: Vec<f64>,
    /// Burst power over the total background power of all sources, both
    /// measured within ±2 Hz of the class frequency.
    pub snr: f64,
    /// Standard deviation of the log band gains across subjects and sources.
    pub spectral_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 6,
            trials_per_class: 40,
            rs_trials_per_subject: 20,
            channels: 3,
            fs: 250.0,
            duration: 6.0,
            classes: 2,
            class_freqs: vec![10.0, 22.0],
            snr: 2.0,
            spectral_spread: 0.5,
            seed: 0,
        }
    }
}

/// Default class frequencies for a class count.
pub fn default_class_freqs(classes: usize) -> Vec<f64> {
    match classes {
        2 => vec![10.0, 22.0],
        4 => vec![10.0, 14.0, 22.0, 30.0],
        k => (0..k).map(|i| 8.0 + 24.0 * i as f64 / k.max(2).saturating_sub(1) as f64).collect(),
    }
}

impl SynthConfig {
    pub fn violations(&self, band_hi: f64) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_subjects < 1 {
            v.push("synth.n_subjects must be >= 1".into());
        }
        if self.channels < 1 {
            v.push("synth.channels must be >= 1".into());
        }
        if !(self.fs > 0.0) || !(self.duration > 0.0) {
            v.push("synth.fs and synth.duration must be positive".into());
        }
        if self.classes != self.class_freqs.len() {
            v.push(format!(
                "synth.class_freqs has {} entries but classes = {}",
                self.class_freqs.len(),
                self.classes
            ));
        }
        if self.class_freqs.iter().any(|&f| !(f > 0.0 && f < band_hi)) {
            v.push(format!("synth.class_freqs must lie in (0, {band_hi})"));
        }
        if !(self.snr >= 0.0) {
            v.push(format!("synth.snr must be >= 0, got {}", self.snr));
        }
        if !(self.spectral_spread >= 0.0) {
            v.push("synth.spectral_spread must be >= 0".into());
        }
        v
    }

    pub fn samples(&self) -> usize {
        (self.fs * self.duration).round() as usize
    }

    pub fn trials_per_subject(&self) -> usize {
        self.classes * self.trials_per_class + self.rs_trials_per_subject
    }

    /// Source that carries the burst of class `k`.
    pub fn burst_source(&self, k: usize) -> usize {
        (k * self.channels) / self.classes.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSignature {
    pub id: String,
    pub index: usize,
    /// `[C × C]`, columns orthonormal; sensor = mixing · source.
    pub mixing: Array2<f64>,
    /// `[C × 5]` amplitude gains per source and band.
    pub band_gains: Array2<f64>,
    pub seed: u64,
}

pub fn subject_id(index: usize) -> String {
    format!("S{}", index + 1)
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

fn orthonormalize(m: &mut Array2<f64>) {
    let c = m.ncols();
    for j in 0..c {
        for i in 0..j {
            let dot: f64 = (0..m.nrows()).map(|r| m[[r, i]] * m[[r, j]]).sum();
            for r in 0..m.nrows() {
                m[[r, j]] -= dot * m[[r, i]];
            }
        }
        let norm = (0..m.nrows()).map(|r| m[[r, j]].powi(2)).sum::<f64>().sqrt();
        for r in 0..m.nrows() {
            m[[r, j]] /= norm;
        }
    }
}

pub fn gen_subject(cfg: &SynthConfig, index: usize) -> SubjectSignature {
    let seed = derive_seed(cfg.seed, &[0x5b, index as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.channels;
    let mut mixing = Array2::from_shape_fn((c, c), |_| rng.sample::<f64, _>(StandardNormal));
    orthonormalize(&mut mixing);
    let lognormal = LogNormal::new(0.0, cfg.spectral_spread.max(1e-12)).expect("valid sigma");
    let band_gains = Array2::from_shape_fn((c, BANDS.len()), |_| {
        if cfg.spectral_spread == 0.0 {
            1.0
        } else {
            lognormal.sample(&mut rng)
        }
    });
    SubjectSignature {
        id: subject_id(index),
        index,
        mixing,
        band_gains,
        seed,
    }
}

fn band_of(f: f64) -> usize {
    BANDS
        .iter()
        .position(|&(lo, hi)| f >= lo && f < hi)
        .unwrap_or(BANDS.len() - 1)
}

/// Deterministic amplitude spectrum of one source: `gain(band) / sqrt(f)`,
/// scaled so that unit gains give unit expected variance.
struct SourceSpectrum {
    n: usize,
    fs: f64,
    reference_scale: f64,
}

impl SourceSpectrum {
    fn new(n: usize, fs: f64) -> Self {
        let mut s = Self {
            n,
            fs,
            reference_scale: 1.0,
        };
        let v = s.expected_power(&[1.0; 5], 0.0, f64::INFINITY);
        s.reference_scale = 1.0 / v.sqrt();
        s
    }

    fn freq(&self, k: usize) -> f64 {
        k as f64 * self.fs / self.n as f64
    }

    fn amplitude(&self, gains: &[f64], k: usize) -> f64 {
        let f = self.freq(k);
        if k == 0 {
            return 0.0;
        }
        self.reference_scale * gains[band_of(f)] / f.max(0.5).sqrt()
    }

    /// Expected variance contributed by bins with frequency in `[lo, hi]`.
    fn expected_power(&self, gains: &[f64], lo: f64, hi: f64) -> f64 {
        let n = self.n;
        let mut total = 0.0;
        for k in 1..=n / 2 {
            let f = self.freq(k);
            if f < lo || f > hi {
                continue;
            }
            let a = self.amplitude(gains, k);
            // Complex bins carry 2 A^2 and appear twice; the Nyquist bin is real.
            total += if 2 * k == n { a * a } else { 4.0 * a * a };
        }
        total / (n as f64 * n as f64)
    }

    fn sample(&self, gains: &[f64], rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
        let n = self.n;
        let mut spec = vec![Complex::new(0.0, 0.0); n];
        for k in 1..=n / 2 {
            let a = self.amplitude(gains, k);
            let re: f64 = rng.sample(StandardNormal);
            if 2 * k == n {
                spec[k] = Complex::new(a * re, 0.0);
            } else {
                let im: f64 = rng.sample(StandardNormal);
                spec[k] = Complex::new(a * re, a * im);
                spec[n - k] = spec[k].conj();
            }
        }
        planner.plan_fft_inverse(n).process(&mut spec);
        spec.iter().map(|c| c.re / n as f64).collect()
    }
}

/// What a generated trial contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialContent {
    Rest,
    Class(usize),
}

/// Generates one 6-s recording for `sig`.
///
/// Background noise is drawn from a stream seeded by `trial_seed` alone, the
/// burst from a second stream, so a class trial with `snr = 0` equals the
/// rest trial with the same seed.
pub fn gen_trial(
    sig: &SubjectSignature,
    content: TrialContent,
    cfg: &SynthConfig,
    trial_seed: u64,
    id: &str,
) -> Trial {
    let n = cfg.samples();
    let c = cfg.channels;
    let spectrum = SourceSpectrum::new(n, cfg.fs);
    let mut planner = FftPlanner::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sig.seed, &[trial_seed]));
    let mut sources: Vec<Vec<f64>> = (0..c)
        .map(|s| {
            let gains: Vec<f64> = sig.band_gains.row(s).to_vec();
            spectrum.sample(&gains, &mut rng, &mut planner)
        })
        .collect();

    let mut label = None;
    if let TrialContent::Class(k) = content {
        label = Some(k);
        let mut burst_rng = ChaCha8Rng::seed_from_u64(derive_seed(sig.seed, &[trial_seed, 0xb0]));
        let f = cfg.class_freqs[k];
        let src = cfg.burst_source(k);
        let band_power: f64 = (0..c)
            .map(|s| {
                let gains = sig.band_gains.row(s).to_vec();
                spectrum.expected_power(&gains, f - SNR_HALF_BAND, f + SNR_HALF_BAND)
            })
            .sum();
        let jitter = burst_rng.gen_range(0.8..1.2);
        let phase = burst_rng.gen_range(0.0..std::f64::consts::TAU);
        let start = (cfg.duration / 2.0 * cfg.fs).round() as usize;
        let len = n - start;
        // Hann^2 averages 3/8 and a sinusoid 1/2 over the window.
        let amp = jitter * (cfg.snr * band_power / (0.375 * 0.5)).sqrt();
        for i in 0..len {
            let env = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (len - 1).max(1) as f64).cos();
            let t = i as f64 / cfg.fs;
            sources[src][start + i] += amp * env * (std::f64::consts::TAU * f * t + phase).sin();
        }
    }

    let data = Array2::from_shape_fn((c, n), |(ch, t)| {
        let v: f64 = (0..c).map(|s| sig.mixing[[ch, s]] * sources[s][t]).sum();
        (MICROVOLTS * v) as f32
    });
    Trial {
        id: id.to_string(),
        subject: sig.id.clone(),
        session: "A".into(),
        kind: if label.is_some() { TrialKind::TS } else { TrialKind::RS },
        label,
        fs: cfg.fs,
        data,
    }
}

/// All recordings of one subject: task trials (classes interleaved) then rest trials.
pub fn gen_subject_trials(cfg: &SynthConfig, index: usize) -> Vec<Trial> {
    let sig = gen_subject(cfg, index);
    let mut out = Vec::with_capacity(cfg.trials_per_subject());
    let mut counter = 0u64;
    for i in 0..cfg.trials_per_class {
        for k in 0..cfg.classes {
            let n = i * cfg.classes + k;
            out.push(gen_trial(
                &sig,
                TrialContent::Class(k),
                cfg,
                counter,
                &format!("{}-ts-{n:04}", sig.id),
            ));
            counter += 1;
        }
    }
    for i in 0..cfg.rs_trials_per_subject {
        out.push(gen_trial(
            &sig,
            TrialContent::Rest,
            cfg,
            counter,
            &format!("{}-rs-{i:04}", sig.id),
        ));
        counter += 1;
    }
    out
}

pub fn gen_trials(cfg: &SynthConfig) -> Vec<Trial> {
    par::map_range(cfg.n_subjects, |s| gen_subject_trials(cfg, s))
        .into_iter()
        .flatten()
        .collect()
}

/// Generates the whole dataset as a pack in `dir`.
pub fn gen_dataset(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    let v = cfg.violations(cfg.fs / 2.0);
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    write_pack_named(&gen_trials(cfg), dir, "synthetic", cfg.classes)
}
