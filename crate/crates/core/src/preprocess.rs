//! Band-pass filtering, decimation, epoching and per-epoch standardization.
//!
//! Pipeline order is resample → bandpass → epoch → standardize, so filters
//! run at the final rate and every epoch is normalized on its own.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::eegpack::{Trial, TrialKind};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocConfig {
    pub band_lo: f64,
    pub band_hi: f64,
    pub target_fs: f64,
    /// Resting-state window `[start, end)` in seconds.
    pub rs_window: [f64; 2],
    /// Task window `[start, end)` in seconds.
    pub ts_window: [f64; 2],
    pub filter_order: usize,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            band_lo: 0.5,
            band_hi: 40.0,
            target_fs: 250.0,
            rs_window: [0.0, 3.0],
            ts_window: [3.0, 6.0],
            filter_order: 4,
        }
    }
}

impl PreprocConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.band_lo > 0.0 && self.band_lo < self.band_hi && self.band_hi < self.target_fs / 2.0) {
            v.push(format!(
                "preproc: need 0 < band_lo ({}) < band_hi ({}) < target_fs/2 ({})",
                self.band_lo,
                self.band_hi,
                self.target_fs / 2.0
            ));
        }
        for (name, w) in [("rs_window", self.rs_window), ("ts_window", self.ts_window)] {
            if !(w[0] >= 0.0 && w[1] > w[0]) {
                v.push(format!("preproc.{name}: [{}, {}) is not a valid window", w[0], w[1]));
            }
        }
        if self.rs_window[1] > self.ts_window[0] && self.ts_window[1] > self.rs_window[0] {
            v.push("preproc: rs_window and ts_window overlap".into());
        }
        if self.filter_order == 0 {
            v.push("preproc.filter_order must be >= 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Samples per epoch at the target rate.
    pub fn epoch_samples(&self) -> usize {
        ((self.ts_window[1] - self.ts_window[0]) * self.target_fs).round() as usize
    }
}

/// Second-order section `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
pub type Sos = [f64; 6];

fn bilinear(s: Complex64, fs2: f64) -> Complex64 {
    (fs2 + s) / (fs2 - s)
}

fn prototype_poles(order: usize) -> Vec<Complex64> {
    (1..=order)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + order - 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

fn section_from_poles(b: [f64; 3], z1: Complex64, z2: Complex64) -> Sos {
    let s = z1 + z2;
    let p = z1 * z2;
    [b[0], b[1], b[2], 1.0, -s.re, p.re]
}

/// Frequency response of a cascade at `freq` Hz.
pub fn sos_response(sos: &[Sos], freq: f64, fs: f64) -> Complex64 {
    let w = 2.0 * std::f64::consts::PI * freq / fs;
    let z1 = Complex64::from_polar(1.0, -w);
    let z2 = z1 * z1;
    sos.iter()
        .map(|s| (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2))
        .product()
}

/// Butterworth band-pass of prototype order `order` (2·order poles), as
/// second-order sections normalized to unit gain at the band center.
pub fn butter_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Result<Vec<Sos>> {
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::config(format!("bandpass: need 0 < lo ({lo}) < hi ({hi})")));
    }
    if hi >= fs / 2.0 {
        return Err(Error::config(format!(
            "bandpass: upper edge {hi} Hz is at or above Nyquist ({} Hz)",
            fs / 2.0
        )));
    }
    let fs2 = 2.0 * fs;
    let w1 = fs2 * (std::f64::consts::PI * lo / fs).tan();
    let w2 = fs2 * (std::f64::consts::PI * hi / fs).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    let mut sos = Vec::with_capacity(order);
    for p in prototype_poles(order) {
        if p.im < -1e-12 {
            continue;
        }
        // s^2 - p*bw*s + w0^2 = 0
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0sq).sqrt();
        let s1 = (pb + disc) / 2.0;
        let s2 = (pb - disc) / 2.0;
        let (z1, z2) = (bilinear(s1, fs2), bilinear(s2, fs2));
        if p.im.abs() <= 1e-12 {
            sos.push(section_from_poles([1.0, 0.0, -1.0], z1, z2));
        } else {
            sos.push(section_from_poles([1.0, 0.0, -1.0], z1, z1.conj()));
            sos.push(section_from_poles([1.0, 0.0, -1.0], z2, z2.conj()));
        }
    }
    let f0 = fs / std::f64::consts::PI * (w0sq.sqrt() / fs2).atan();
    let g = sos_response(&sos, f0, fs).norm();
    for k in 0..3 {
        sos[0][k] /= g;
    }
    Ok(sos)
}

/// Butterworth low-pass with unit DC gain.
pub fn butter_lowpass(order: usize, cutoff: f64, fs: f64) -> Result<Vec<Sos>> {
    if !(cutoff > 0.0 && cutoff < fs / 2.0) {
        return Err(Error::config(format!(
            "lowpass: cutoff {cutoff} Hz must lie in (0, {})",
            fs / 2.0
        )));
    }
    let fs2 = 2.0 * fs;
    let wc = fs2 * (std::f64::consts::PI * cutoff / fs).tan();
    let mut sos = Vec::new();
    for p in prototype_poles(order) {
        if p.im < -1e-12 {
            continue;
        }
        let z = bilinear(p * wc, fs2);
        if p.im.abs() <= 1e-12 {
            sos.push([1.0, 1.0, 0.0, 1.0, -z.re, 0.0]);
        } else {
            sos.push(section_from_poles([1.0, 2.0, 1.0], z, z.conj()));
        }
    }
    let g = sos_response(&sos, 0.0, fs).norm();
    for k in 0..3 {
        sos[0][k] /= g;
    }
    Ok(sos)
}

/// Steady-state initial conditions for a unit step, per section
/// (transposed direct form II).
fn sosfilt_zi(sos: &[Sos]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let (b0, b1, b2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
            let gain = (b0 + b1 + b2) / (1.0 + a1 + a2);
            let z1 = b2 - a2 * gain;
            let z0 = b1 - a1 * gain + z1;
            let zi = [scale * z0, scale * z1];
            scale *= gain;
            zi
        })
        .collect()
}

fn sosfilt_inplace(sos: &[Sos], x: &mut [f64], zi: &[[f64; 2]], x0: f64) {
    for (s, z) in sos.iter().zip(zi) {
        let (b0, b1, b2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
        let (mut s0, mut s1) = (z[0] * x0, z[1] * x0);
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + s0;
            s0 = b1 * xin - a1 * y + s1;
            s1 = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

/// Edge padding used by [`sosfiltfilt`].
pub fn filtfilt_padlen(sos: &[Sos]) -> usize {
    let zb = sos.iter().filter(|s| s[2] == 0.0).count();
    let za = sos.iter().filter(|s| s[5] == 0.0).count();
    3 * (2 * sos.len() + 1 - zb.min(za))
}

/// Zero-phase forward-backward filtering with odd extension at both edges
/// and steady-state initial conditions.
pub fn sosfiltfilt(sos: &[Sos], x: &[f64]) -> Result<Vec<f64>> {
    let pad = filtfilt_padlen(sos);
    let n = x.len();
    if n <= pad {
        return Err(Error::config(format!(
            "signal of {n} samples is too short for zero-phase filtering (needs > {pad})"
        )));
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let zi = sosfilt_zi(sos);
    let x0 = ext[0];
    sosfilt_inplace(sos, &mut ext, &zi, x0);
    ext.reverse();
    let y0 = ext[0];
    sosfilt_inplace(sos, &mut ext, &zi, y0);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

fn map_channels(trial: &Trial, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Array2<f32>> {
    let mut rows = Vec::with_capacity(trial.channels());
    for row in trial.data.axis_iter(Axis(0)) {
        let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        rows.push(f(&x)?);
    }
    let t = rows[0].len();
    Ok(Array2::from_shape_fn((rows.len(), t), |(c, i)| rows[c][i] as f32))
}

/// Zero-phase band-pass with a Butterworth design of order 4.
pub fn bandpass(trial: &Trial, lo: f64, hi: f64) -> Result<Trial> {
    bandpass_order(trial, lo, hi, 4)
}

pub fn bandpass_order(trial: &Trial, lo: f64, hi: f64, order: usize) -> Result<Trial> {
    let sos = butter_bandpass(order, lo, hi, trial.fs)?;
    let data = map_channels(trial, |x| sosfiltfilt(&sos, x))?;
    Ok(Trial { data, ..trial.clone() })
}

/// Integer decimation to `target_fs` after a zero-phase 8th-order low-pass at
/// 0.8× the target Nyquist frequency. Output length is `floor(T / q)`.
pub fn resample(trial: &Trial, target_fs: f64) -> Result<Trial> {
    if target_fs == trial.fs {
        return Ok(trial.clone());
    }
    let ratio = trial.fs / target_fs;
    let q = ratio.round() as usize;
    if !(target_fs > 0.0) || q < 1 || (ratio - q as f64).abs() > 1e-9 {
        return Err(Error::config(format!(
            "resample: {} Hz -> {target_fs} Hz is not an integer decimation",
            trial.fs
        )));
    }
    let sos = butter_lowpass(8, 0.8 * target_fs / 2.0, trial.fs)?;
    let data = map_channels(trial, |x| {
        let y = sosfiltfilt(&sos, x)?;
        Ok(y.iter().step_by(q).take(x.len() / q).copied().collect())
    })?;
    Ok(Trial {
        data,
        fs: target_fs,
        ..trial.clone()
    })
}

/// A channel whose variance was zero when standardizing.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantChannel {
    pub trial: String,
    pub channel: usize,
}

/// Per-channel z-score with the population standard deviation. Constant
/// channels are divided by 1e-8 instead (so they become zeros) and reported.
pub fn standardize(trial: &Trial) -> (Trial, Vec<ConstantChannel>) {
    let mut data = trial.data.clone();
    let mut warnings = Vec::new();
    for (c, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let mut sd = var.sqrt();
        if sd == 0.0 {
            sd += 1e-8;
            log::warn!("trial {}: channel {c} is constant", trial.id);
            warnings.push(ConstantChannel {
                trial: trial.id.clone(),
                channel: c,
            });
        }
        row.mapv_inplace(|v| ((v as f64 - mean) / sd) as f32);
    }
    (Trial { data, ..trial.clone() }, warnings)
}

fn window(trial: &Trial, w: [f64; 2]) -> Result<Array2<f32>> {
    let a = (w[0] * trial.fs).round() as usize;
    let b = (w[1] * trial.fs).round() as usize;
    if b > trial.samples() {
        return Err(Error::Epoch(format!(
            "trial `{}` has {} samples ({:.3} s), window needs {b}",
            trial.id,
            trial.samples(),
            trial.samples() as f64 / trial.fs
        )));
    }
    Ok(trial.data.slice(ndarray::s![.., a..b]).to_owned())
}

/// Splits a 6-s recording into its resting window and its task window.
///
/// For a TS recording the second epoch keeps the label. An RS recording has
/// no task, so both of its windows come back as RS epochs (`-rs` and `-rs2`).
pub fn epoch(trial: &Trial, cfg: &PreprocConfig) -> Result<(Trial, Trial)> {
    let rs = Trial {
        id: format!("{}-rs", trial.id),
        kind: TrialKind::RS,
        label: None,
        data: window(trial, cfg.rs_window)?,
        ..trial.clone()
    };
    let second = window(trial, cfg.ts_window)?;
    let ts = match trial.kind {
        TrialKind::TS => Trial {
            id: format!("{}-ts", trial.id),
            data: second,
            ..trial.clone()
        },
        TrialKind::RS => Trial {
            id: format!("{}-rs2", trial.id),
            data: second,
            ..rs.clone()
        },
    };
    Ok((rs, ts))
}

/// Full chain for one raw recording: resample → bandpass → epoch → standardize.
pub fn preprocess_trial(trial: &Trial, cfg: &PreprocConfig) -> Result<Vec<Trial>> {
    let t = resample(trial, cfg.target_fs)?;
    let t = bandpass_order(&t, cfg.band_lo, cfg.band_hi, cfg.filter_order)?;
    let (a, b) = epoch(&t, cfg)?;
    Ok(vec![standardize(&a).0, standardize(&b).0])
}

/// Preprocesses recordings in parallel, output order follows input order.
pub fn preprocess_all(trials: &[Trial], cfg: &PreprocConfig) -> Result<Vec<Trial>> {
    cfg.validate()?;
    let out = par::map_slice(trials, |t| preprocess_trial(t, cfg));
    let mut flat = Vec::with_capacity(trials.len() * 2);
    for r in out {
        flat.extend(r?);
    }
    Ok(flat)
}
