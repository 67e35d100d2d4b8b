//! Deterministic log-magnitude filterbank frame encoder.
//!
//! Stands in for a learned speech representation: a Hann-windowed DFT
//! magnitude spectrum pooled into linearly spaced triangular bands, logged
//! with a floor. Same waveform in, identical frames out, every time.

use serde::{Deserialize, Serialize};
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    /// Hop between frame starts; matches the synthesizer's per-unit frame
    /// length so one synthesized unit produces one analysis frame.
    pub hop_ms: f64,
    pub num_bands: usize,
    /// Band magnitudes below this are clamped before the log.
    pub log_floor: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 20.0,
            num_bands: 64,
            log_floor: 1e-6,
        }
    }
}

impl FrameConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.window_len() < 2 || self.hop_len() < 1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate frame geometry: window {} ms, hop {} ms at {} Hz",
                self.window_ms, self.hop_ms, self.sample_rate
            )));
        }
        if self.num_bands < 1 {
            return Err(Error::InvalidArgument("need at least one band".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidArgument("log floor must be positive".into()));
        }
        Ok(())
    }

    /// Support interval [lo, hi] of triangular band `d` in Hz. Band centers
    /// are spaced linearly from 0 to Nyquist exclusive.
    pub fn band_range(&self, d: usize) -> (f64, f64) {
        let nyquist = self.sample_rate as f64 / 2.0;
        let step = nyquist / (self.num_bands as f64 + 1.0);
        (d as f64 * step, (d + 2) as f64 * step)
    }
}

/// T frames of D real features each.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    data: Tensor<f32>,
    pub window_ms: f64,
    pub hop_ms: f64,
}

impl FrameSequence {
    pub fn from_tensor(data: Tensor<f32>, window_ms: f64, hop_ms: f64) -> Self {
        FrameSequence {
            data,
            window_ms,
            hop_ms,
        }
    }

    pub fn len(&self) -> usize {
        self.data.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.dims2().1
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.data.row(t)
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }
}

/// Encode a mono waveform into filterbank frames. An empty waveform yields
/// an empty sequence; a wrong sample rate is an error.
pub fn encode_frames(waveform: &Waveform, config: &FrameConfig) -> Result<FrameSequence> {
    config.validate()?;
    if waveform.sample_rate() != config.sample_rate {
        return Err(Error::SampleRateMismatch {
            got: waveform.sample_rate(),
            expected: config.sample_rate,
        });
    }
    let d = config.num_bands;
    let samples = waveform.samples();
    if samples.is_empty() {
        return Ok(FrameSequence::from_tensor(
            Tensor::zeros(vec![0, d]),
            config.window_ms,
            config.hop_ms,
        ));
    }

    let n = config.window_len();
    let hop = config.hop_len();
    let num_frames = 1 + (samples.len() - 1) / hop;
    let num_bins = n / 2 + 1;

    // Hann window.
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n as f64 - 1.0)).cos())
        .collect();

    // DFT basis, bins 0..=N/2. Naive quadratic transform; window sizes here
    // are a few hundred samples, well within budget.
    let mut cos_table = vec![0.0f64; num_bins * n];
    let mut sin_table = vec![0.0f64; num_bins * n];
    for k in 0..num_bins {
        for i in 0..n {
            let angle = 2.0 * std::f64::consts::PI * k as f64 * i as f64 / n as f64;
            cos_table[k * n + i] = angle.cos();
            sin_table[k * n + i] = angle.sin();
        }
    }

    // Triangular band weights per bin.
    let bin_hz = config.sample_rate as f64 / n as f64;
    let mut band_weights = vec![0.0f64; d * num_bins];
    for band in 0..d {
        let (lo, hi) = config.band_range(band);
        let center = (lo + hi) / 2.0;
        for bin in 0..num_bins {
            let f = bin as f64 * bin_hz;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            band_weights[band * num_bins + bin] = w;
        }
    }

    let mut out = Tensor::zeros(vec![num_frames, d]);
    let mut windowed = vec![0.0f64; n];
    let mut mags = vec![0.0f64; num_bins];
    for t in 0..num_frames {
        let start = t * hop;
        for i in 0..n {
            let s = samples.get(start + i).copied().unwrap_or(0.0) as f64;
            windowed[i] = s * window[i];
        }
        for k in 0..num_bins {
            let mut re = 0.0f64;
            let mut im = 0.0f64;
            for i in 0..n {
                re += windowed[i] * cos_table[k * n + i];
                im += windowed[i] * sin_table[k * n + i];
            }
            mags[k] = (re * re + im * im).sqrt();
        }
        let row = out.row_mut(t);
        for band in 0..d {
            let mut acc = 0.0f64;
            for bin in 0..num_bins {
                acc += band_weights[band * num_bins + bin] * mags[bin];
            }
            row[band] = acc.max(config.log_floor).ln() as f32;
        }
    }
    Ok(FrameSequence::from_tensor(
        out,
        config.window_ms,
        config.hop_ms,
    ))
}
