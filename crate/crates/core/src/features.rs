//! MFCC front end: framing, Hann window, power spectrum, HTK mel filterbank,
//! log, orthonormal DCT-II, regression deltas and corpus normalisation.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mono PCM samples in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Reads a 16-bit PCM mono WAV file, scaling samples by `1/32768`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |e: hound::Error| Error::Wav(format!("{}: {e}", path.display()));
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Wav(format!(
            "{}: expected 16-bit integer mono, found {} channel(s), {} bits, {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    if samples.is_empty() {
        return Err(Error::Wav(format!("{}: no samples", path.display())));
    }
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes 16-bit PCM mono samples.
pub fn write_wav(path: impl AsRef<Path>, samples: &[i16], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |e: hound::Error| Error::Wav(format!("{}: {e}", path.display()));
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample(s).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Pipeline settings, recorded in dataset headers.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureParams {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub delta_width: usize,
    pub log_floor: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            frame_ms: 20.0,
            hop_ms: 10.0,
            n_mels: 40,
            n_coeffs: 13,
            delta_width: 2,
            log_floor: 1e-10,
        }
    }
}

impl FeatureParams {
    /// Width of the full feature vector (coefficients, Δ, ΔΔ).
    pub fn feature_dim(&self) -> usize {
        3 * self.n_coeffs
    }

    pub fn to_metadata(&self, sample_rate: u32) -> Vec<(String, String)> {
        vec![
            ("features.kind".into(), "mfcc".into()),
            ("features.sample_rate".into(), sample_rate.to_string()),
            ("features.frame_ms".into(), self.frame_ms.to_string()),
            ("features.hop_ms".into(), self.hop_ms.to_string()),
            ("features.window".into(), "hann".into()),
            ("features.n_mels".into(), self.n_mels.to_string()),
            ("features.mel_scale".into(), "htk".into()),
            ("features.n_coeffs".into(), self.n_coeffs.to_string()),
            ("features.delta_width".into(), self.delta_width.to_string()),
            ("features.log_floor".into(), format!("{:e}", self.log_floor)),
        ]
    }
}

/// `(frame length, hop)` in samples.
pub fn frame_geometry(sample_rate: u32, frame_ms: f64, hop_ms: f64) -> (usize, usize) {
    let sr = sample_rate as f64;
    let len = (frame_ms * sr / 1000.0).round() as usize;
    let hop = (hop_ms * sr / 1000.0).round() as usize;
    (len, hop)
}

/// Number of whole frames in `n` samples; the tail remainder is dropped.
pub fn frame_count(n: usize, frame_len: usize, hop: usize) -> usize {
    if n < frame_len {
        0
    } else {
        1 + (n - frame_len) / hop
    }
}

/// Splits the signal into overlapping `[T×frame_len]` frames.
pub fn frame_signal(w: &Waveform, frame_ms: f64, hop_ms: f64) -> Result<Tensor<f64>> {
    if w.sample_rate == 0 {
        return Err(Error::Argument("sample rate must be positive".into()));
    }
    let (len, hop) = frame_geometry(w.sample_rate, frame_ms, hop_ms);
    if len == 0 || hop == 0 {
        return Err(Error::Argument(format!(
            "frame of {len} samples with hop {hop} at {} Hz",
            w.sample_rate
        )));
    }
    let n = frame_count(w.samples.len(), len, hop);
    if n == 0 {
        return Err(Error::Data(format!(
            "signal of {} samples is shorter than one {len}-sample frame",
            w.samples.len()
        )));
    }
    let mut data = Vec::with_capacity(n * len);
    for i in 0..n {
        data.extend(w.samples[i * hop..i * hop + len].iter().map(|&s| s as f64));
    }
    Tensor::new([n, len], data)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `[n_mels × (n_fft/2 + 1)]` triangular filters with centres equally spaced
/// on the HTK mel scale between 0 Hz and `sample_rate/2`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Tensor<f64> {
    let bins = n_fft / 2 + 1;
    let sr = sample_rate as f64;
    let top = hz_to_mel(sr / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut w = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sr / n_fft as f64;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            w[m * bins + k] = v;
        }
    }
    Tensor::new([n_mels, bins], w).expect("filterbank shape")
}

/// Orthonormal DCT-II matrix `[n×n]`; row `k` is basis function `k`.
pub fn dct_matrix(n: usize) -> Tensor<f64> {
    let mut m = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            m[k * n + i] = scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * nf)).cos();
        }
    }
    Tensor::new([n, n], m).expect("dct shape")
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Precomputed MFCC transform for one frame length and sample rate.
pub struct Mfcc {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
    filters: Tensor<f64>,
    dct: Tensor<f64>,
    n_coeffs: usize,
    log_floor: f64,
}

impl Mfcc {
    pub fn new(frame_len: usize, sample_rate: u32, n_mels: usize, n_coeffs: usize, log_floor: f64) -> Result<Self> {
        if n_coeffs > n_mels || n_mels == 0 || frame_len == 0 {
            return Err(Error::Argument(format!(
                "{n_coeffs} coefficients from {n_mels} mel bands over {frame_len}-sample frames"
            )));
        }
        let n_fft = frame_len.next_power_of_two();
        Ok(Mfcc {
            window: hann_window(frame_len),
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            n_fft,
            filters: mel_filterbank(n_mels, n_fft, sample_rate),
            dct: dct_matrix(n_mels),
            n_coeffs,
            log_floor,
        })
    }

    pub fn fft_size(&self) -> usize {
        self.n_fft
    }

    /// `[T×frame_len]` frames to `[T×n_coeffs]` cepstra.
    pub fn apply(&self, frames: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (t, len) = frames.dims2()?;
        if len != self.window.len() {
            return Err(Error::shape("mfcc", frames.shape(), &[t, self.window.len()]));
        }
        if t == 0 {
            return Err(Error::Data("no frames".into()));
        }
        let (n_mels, bins) = self.filters.dims2()?;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; bins];
        let mut log_mel = vec![0.0; n_mels];
        let mut out = Vec::with_capacity(t * self.n_coeffs);
        for i in 0..t {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, (&x, &w)) in buf.iter_mut().zip(frames.row(i).iter().zip(&self.window)) {
                b.re = x * w;
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, lm) in log_mel.iter_mut().enumerate() {
                let e: f64 = self.filters.row(m).iter().zip(&power).map(|(a, b)| a * b).sum();
                *lm = e.max(self.log_floor).ln();
            }
            for k in 0..self.n_coeffs {
                out.push(self.dct.row(k).iter().zip(&log_mel).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new([t, self.n_coeffs], out)
    }
}

/// Regression deltas with edge replication:
/// `Δ_t = Σ_{k=1..width} k·(c_{t+k} − c_{t−k}) / (2·Σ k²)`.
pub fn delta(c: &Tensor<f64>, width: usize) -> Result<Tensor<f64>> {
    let (t, d) = c.dims2()?;
    if t == 0 || width == 0 {
        return Err(Error::Argument(format!("deltas over {t} frames with width {width}")));
    }
    let norm = 2.0 * (1..=width).map(|k| (k * k) as f64).sum::<f64>();
    let at = |i: isize| c.row(i.clamp(0, t as isize - 1) as usize);
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        for k in 1..=width {
            let (next, prev) = (at(i as isize + k as isize), at(i as isize - k as isize));
            for j in 0..d {
                out[i * d + j] += k as f64 * (next[j] - prev[j]);
            }
        }
        for v in &mut out[i * d..(i + 1) * d] {
            *v /= norm;
        }
    }
    Tensor::new([t, d], out)
}

/// `(Δ, ΔΔ)`.
pub fn deltas(c: &Tensor<f64>, width: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let d1 = delta(c, width)?;
    let d2 = delta(&d1, width)?;
    Ok((d1, d2))
}

/// Joins matrices with equal row counts side by side.
pub fn hstack(parts: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
    let (t, _) = parts
        .first()
        .ok_or_else(|| Error::Argument("hstack of nothing".into()))?
        .dims2()?;
    let mut width = 0;
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != t {
            return Err(Error::shape("hstack", parts[0].shape(), p.shape()));
        }
        width += c;
    }
    let mut out = Vec::with_capacity(t * width);
    for i in 0..t {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::new([t, width], out)
}

/// Waveform to `[T×3·n_coeffs]` features.
pub fn extract_features(w: &Waveform, params: &FeatureParams) -> Result<Tensor<f64>> {
    let frames = frame_signal(w, params.frame_ms, params.hop_ms)?;
    let mfcc = Mfcc::new(
        frames.shape()[1],
        w.sample_rate,
        params.n_mels,
        params.n_coeffs,
        params.log_floor,
    )?;
    let c = mfcc.apply(&frames)?;
    let (d1, d2) = deltas(&c, params.delta_width)?;
    hstack(&[&c, &d1, &d2])
}

/// Per-dimension mean and floored std.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const FEATURE_STD_FLOOR: f64 = 1e-6;

impl FeatureStats {
    /// Statistics over every frame of every matrix.
    pub fn fit(features: &[Tensor<f64>]) -> Result<Self> {
        let d = features
            .first()
            .ok_or_else(|| Error::Data("empty corpus".into()))?
            .dims2()?
            .1;
        let mut n = 0usize;
        let mut mean = vec![0.0; d];
        for f in features {
            let (t, w) = f.dims2()?;
            if w != d {
                return Err(Error::shape("normalize", features[0].shape(), f.shape()));
            }
            n += t;
            for i in 0..t {
                for (m, v) in mean.iter_mut().zip(f.row(i)) {
                    *m += v;
                }
            }
        }
        if n == 0 {
            return Err(Error::Data("empty corpus".into()));
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for f in features {
            for i in 0..f.shape()[0] {
                for ((s, v), m) in var.iter_mut().zip(f.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|s| (s / n as f64).sqrt().max(FEATURE_STD_FLOOR))
            .collect();
        Ok(FeatureStats { mean, std })
    }

    pub fn apply(&self, f: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (t, d) = f.dims2()?;
        if d != self.mean.len() {
            return Err(Error::shape("normalize", f.shape(), &[t, self.mean.len()]));
        }
        let mut out = f.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Ok(out)
    }

    /// Two lines, `mean v…` and `std v…`, with round-trip float formatting.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        format!("mean {}\nstd {}\n", join(&self.mean), join(&self.std))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = [None, None];
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let mut parts = line.split_whitespace();
            let slot = match parts.next() {
                None => continue,
                Some("mean") => 0,
                Some("std") => 1,
                Some(k) => return Err(err(format!("expected `mean` or `std`, got `{k}`"))),
            };
            let values = parts
                .map(|v| v.parse::<f64>().map_err(|_| err(format!("invalid number `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            if rows[slot].replace(values).is_some() {
                return Err(err("row given twice".into()));
            }
        }
        let [Some(mean), Some(std)] = rows else {
            return Err(Error::Config { line: 0, msg: "stats need a mean and a std row".into() });
        };
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Config { line: 0, msg: format!("mean has {} values, std {}", mean.len(), std.len()) });
        }
        if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config { line: 0, msg: "std values must be positive".into() });
        }
        Ok(FeatureStats { mean, std })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Normalises a corpus with `stats`, or with statistics fitted on it.
pub fn normalize(features: &[Tensor<f64>], stats: Option<&FeatureStats>) -> Result<(Vec<Tensor<f64>>, FeatureStats)> {
    if features.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => FeatureStats::fit(features)?,
    };
    let out = features.iter().map(|f| stats.apply(f)).collect::<Result<_>>()?;
    Ok((out, stats))
}

/// Normalises each matrix with its own statistics.
pub fn normalize_per_utterance(features: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    features
        .iter()
        .map(|f| FeatureStats::fit(std::slice::from_ref(f))?.apply(f))
        .collect()
}
