//! MFCC extraction: Hann-windowed power spectrum, Slaney-style mel filterbank
//! with area normalization, log with a floor, orthonormal DCT-II.

use std::path::Path;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub n_mfcc: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Defaults to the Nyquist frequency.
    pub fmax: Option<f64>,
    pub log_floor: f64,
    /// Zero-pad `n_fft / 2` samples on both sides before framing.
    pub center: bool,
    /// Per-utterance zero-mean, unit-variance scaling of every coefficient.
    pub standardize: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_mfcc: 40,
            n_fft: 2048,
            hop: 512,
            n_mels: 128,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-10,
            center: false,
            standardize: false,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let nyquist = sample_rate as f64 / 2.0;
        let fmax = self.fmax.unwrap_or(nyquist);
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad(format!("n_mfcc ({}) must be in 1..=n_mels ({})", self.n_mfcc, self.n_mels));
        }
        if self.n_fft < 2 || self.hop == 0 {
            return bad("n_fft must be at least 2 and hop positive".into());
        }
        if !(0.0 <= self.fmin && self.fmin < fmax && fmax <= nyquist) {
            return bad(format!("need 0 <= fmin < fmax <= {nyquist}"));
        }
        if self.log_floor <= 0.0 {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }
}

/// `floor((n - n_fft) / hop) + 1`, or `None` when shorter than one frame.
pub fn frame_count(n_samples: usize, n_fft: usize, hop: usize) -> Option<usize> {
    (n_samples >= n_fft).then(|| (n_samples - n_fft) / hop + 1)
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// `[n_mels, n_fft/2 + 1]` triangular filters, each scaled by
/// `2 / (f_right - f_left)`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let sr = sample_rate as f64;
    let fft_freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * sr / n_fft as f64).collect();
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut w = Array2::<f64>::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (right - left);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let rise = (f - left) / (centre - left);
            let fall = (right - f) / (right - centre);
            let v = rise.min(fall).max(0.0);
            w[[m, k]] = v * enorm;
        }
    }
    w
}

/// `[n_out, n_in]` orthonormal DCT-II rows.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let n = n_in as f64;
    Array2::from_shape_fn((n_out, n_in), |(k, i)| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos()
    })
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// `T × n_mfcc` coefficients.
pub fn compute_mfcc(signal: &AudioSignal, cfg: &MfccConfig) -> Result<Array2<f64>> {
    cfg.validate(signal.sample_rate)?;
    let padded;
    let samples: &[f64] = if cfg.center {
        let half = cfg.n_fft / 2;
        let mut v = vec![0.0; signal.samples.len() + 2 * half];
        v[half..half + signal.samples.len()].copy_from_slice(&signal.samples);
        padded = v;
        &padded
    } else {
        &signal.samples
    };
    let n_frames = frame_count(samples.len(), cfg.n_fft, cfg.hop).ok_or_else(|| {
        Error::InvalidInput(format!("signal of {} samples is shorter than one frame ({})", samples.len(), cfg.n_fft))
    })?;
    let fmax = cfg.fmax.unwrap_or(signal.sample_rate as f64 / 2.0);
    let filters = mel_filterbank(signal.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, fmax);
    let dct = dct_matrix(cfg.n_mfcc, cfg.n_mels);
    let window = hann_periodic(cfg.n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let n_bins = cfg.n_fft / 2 + 1;
    let mut power = Array2::<f64>::zeros((n_frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for t in 0..n_frames {
        let frame = &samples[t * cfg.hop..t * cfg.hop + cfg.n_fft];
        for (b, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[[t, k]] = buf[k].norm_sqr();
        }
    }
    let log_mel = power.dot(&filters.t()).mapv(|v| v.max(cfg.log_floor).ln());
    let mut mfcc = log_mel.dot(&dct.t());
    if cfg.standardize {
        standardize_columns(&mut mfcc);
    }
    Ok(mfcc)
}

fn standardize_columns(m: &mut Array2<f64>) {
    for mut col in m.columns_mut() {
        let mean = col.mean().unwrap_or(0.0);
        let var = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0);
        let sd = var.sqrt().max(1e-12);
        col.mapv_inplace(|v| (v - mean) / sd);
    }
}

/// Reads a 16-bit mono PCM WAV file, scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let audio_err = |reason: String| Error::Audio { path: path.to_path_buf(), reason };
    let reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(audio_err(format!(
            "expected 16-bit mono PCM, found {} channel(s) of {}-bit {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| audio_err(e.to_string()))?;
    AudioSignal::new(samples, spec.sample_rate)
}

/// Writes samples in [-1, 1] as 16-bit mono PCM.
pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let audio_err = |e: hound::Error| Error::Audio { path: path.to_path_buf(), reason: e.to_string() };
    let mut w = hound::WavWriter::create(path, spec).map_err(audio_err)?;
    for &v in &signal.samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(q).map_err(audio_err)?;
    }
    w.finalize().map_err(audio_err)
}
