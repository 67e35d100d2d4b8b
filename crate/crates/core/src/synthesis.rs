//! Deterministic unit-to-waveform synthesis and its matched analyzer.
//!
//! Each unit becomes one fixed-length tonal frame at a unit-specific
//! carrier frequency, with short raised-cosine fades at the frame edges.
//! The analyzer correlates every frame against the full carrier bank
//! (quadrature, so frame phase is irrelevant) and takes the argmax, which
//! makes analyze ∘ synthesize the identity on collapsed sequences and
//! keeps the channel transparent for end-to-end scoring.

use crate::audio::Waveform;
use crate::corpus::{Lexicon, SEPARATOR_UNIT};
use crate::error::{Error, Result};
use crate::units::{collapse, UnitSequence};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sample_rate: u32,
    /// Frame length per unit, in milliseconds.
    pub frame_ms: f64,
    /// Carrier for unit u is base_freq + freq_step * u, in Hz.
    pub base_freq: f64,
    pub freq_step: f64,
    pub amplitude: f64,
    /// Raised-cosine fade length at each frame edge.
    pub fade_ms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate: 16_000,
            frame_ms: 20.0,
            base_freq: 300.0,
            freq_step: 35.0,
            amplitude: 0.8,
            fade_ms: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn carrier(&self, unit: u32) -> f64 {
        self.base_freq + self.freq_step * unit as f64
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    pub fn frame_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_ms / 1000.0).round() as usize
    }

    /// Validity for a given unit inventory: every carrier below Nyquist,
    /// sane frame and fade lengths, amplitude within the sample range.
    pub fn validate(&self, num_units: usize) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if !(self.frame_ms > 0.0) || self.frame_samples() == 0 {
            return Err(Error::Config("frame_ms must give at least one sample".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return Err(Error::Config(format!(
                "amplitude must be in (0, 1], got {}",
                self.amplitude
            )));
        }
        if self.fade_ms < 0.0 || 2.0 * self.fade_ms > self.frame_ms {
            return Err(Error::Config(
                "fade_ms must be non-negative and fit twice into frame_ms".into(),
            ));
        }
        if num_units == 0 {
            return Err(Error::Config("need at least one unit".into()));
        }
        if !(self.base_freq > 0.0) || !(self.freq_step > 0.0) {
            return Err(Error::Config("base_freq and freq_step must be positive".into()));
        }
        let top = num_units as u32 - 1;
        if self.carrier(top) >= self.nyquist() {
            return Err(Error::CarrierAboveNyquist {
                unit: top,
                freq: self.carrier(top),
                nyquist: self.nyquist(),
            });
        }
        Ok(())
    }
}

fn fade_samples(config: &SynthConfig) -> usize {
    (config.sample_rate as f64 * config.fade_ms / 1000.0).round() as usize
}

/// One tonal frame per unit. Input must be free of adjacent repeats;
/// carriers must sit below Nyquist.
pub fn synthesize(units: &UnitSequence, config: &SynthConfig) -> Result<Waveform> {
    if let Some(position) = units.units().windows(2).position(|w| w[0] == w[1]) {
        return Err(Error::NotCollapsed {
            position: position + 1,
        });
    }
    if !(config.frame_ms > 0.0) || config.frame_samples() == 0 {
        return Err(Error::Config("frame_ms must give at least one sample".into()));
    }
    for &u in units.units() {
        let freq = config.carrier(u);
        if freq >= config.nyquist() {
            return Err(Error::CarrierAboveNyquist {
                unit: u,
                freq,
                nyquist: config.nyquist(),
            });
        }
    }
    let n = config.frame_samples();
    let fade = fade_samples(config).min(n / 2);
    let mut samples = Vec::with_capacity(units.len() * n);
    for &u in units.units() {
        let freq = config.carrier(u);
        let w = 2.0 * PI * freq / config.sample_rate as f64;
        for i in 0..n {
            let mut env = 1.0;
            if i < fade {
                env *= 0.5 * (1.0 - (PI * (i as f64 + 0.5) / fade as f64).cos());
            }
            if i >= n - fade {
                let j = n - 1 - i;
                env *= 0.5 * (1.0 - (PI * (j as f64 + 0.5) / fade as f64).cos());
            }
            samples.push((config.amplitude * env * (w * i as f64).sin()) as f32);
        }
    }
    Waveform::new(samples, config.sample_rate)
}

/// Quadrature correlation energy of `frame` against a carrier at `freq`.
fn carrier_energy(frame: &[f32], freq: f64, sample_rate: f64) -> f64 {
    let w = 2.0 * PI * freq / sample_rate;
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for (i, &x) in frame.iter().enumerate() {
        let (sin, cos) = (w * i as f64).sin_cos();
        s += x as f64 * sin;
        c += x as f64 * cos;
    }
    s * s + c * c
}

/// Frames whose RMS falls below this fraction of the configured
/// amplitude are treated as silence and dropped.
const SILENCE_RMS_FRACTION: f64 = 0.05;

/// Per-frame argmax over the carrier bank; silent frames are dropped and
/// the result is collapsed. A trailing partial frame is ignored.
pub fn analyze(
    waveform: &Waveform,
    config: &SynthConfig,
    num_units: usize,
) -> Result<UnitSequence> {
    config.validate(num_units)?;
    if waveform.sample_rate() != config.sample_rate {
        return Err(Error::SampleRateMismatch {
            got: waveform.sample_rate(),
            expected: config.sample_rate,
        });
    }
    let n = config.frame_samples();
    let silence_rms = config.amplitude * SILENCE_RMS_FRACTION;
    let mut decisions = Vec::new();
    for frame in waveform.samples().chunks_exact(n) {
        let rms = (frame.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()
            / n as f64)
            .sqrt();
        if rms < silence_rms {
            continue;
        }
        let mut best = 0u32;
        let mut best_energy = f64::NEG_INFINITY;
        for u in 0..num_units as u32 {
            let e = carrier_energy(frame, config.carrier(u), config.sample_rate as f64);
            if e > best_energy {
                best_energy = e;
                best = u;
            }
        }
        decisions.push(best);
    }
    Ok(collapse(&UnitSequence::new_raw(decisions)))
}

/// Invert a lexicon-encoded unit sequence back to words: segments split
/// on the separator unit, each looked up in the inverted lexicon;
/// unknown segments become `<unk>`.
pub fn units_to_text(units: &UnitSequence, lexicon: &Lexicon) -> String {
    let inverted: HashMap<&[u32], &str> = lexicon
        .words()
        .map(|w| (lexicon.units_for(w).expect("own word"), w.as_str()))
        .collect();
    units
        .units()
        .split(|&u| u == SEPARATOR_UNIT)
        .filter(|segment| !segment.is_empty())
        .map(|segment| inverted.get(segment).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}
