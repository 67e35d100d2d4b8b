//! Waveform container and WAV file IO (16-bit PCM, mono, little-endian).

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    /// All samples must be finite and within [-1, 1].
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(pos) = samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "sample {pos} is {} (waveform samples must lie in [-1, 1])",
                samples[pos]
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn silence(num_samples: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; num_samples],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }
}

fn bad<P: AsRef<Path>>(path: P, msg: impl Into<String>) -> Error {
    Error::BadFile {
        path: path.as_ref().display().to_string(),
        msg: msg.into(),
    }
}

/// Write as canonical 44-byte-header WAV: PCM, 16-bit, mono.
pub fn write_wav<P: AsRef<Path>>(path: P, waveform: &Waveform) -> Result<()> {
    let data_len = (waveform.len() * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + data_len as usize);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&waveform.sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(waveform.sample_rate * 2).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &s in waveform.samples() {
        let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = std::fs::File::create(&path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_wav<P: AsRef<Path>>(path: P) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad(&path, "not a RIFF/WAVE file"));
    }
    let mut sample_rate = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(bad(&path, format!("truncated chunk {}", String::from_utf8_lossy(id))));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad(&path, "fmt chunk too short"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(bad(
                        &path,
                        format!(
                            "unsupported format (need 16-bit PCM mono, got format {format}, \
                             {channels} channels, {bits} bits)"
                        ),
                    ));
                }
                sample_rate = Some(rate);
            }
            b"data" => data = Some(body),
            _ => {} // skip unrecognized chunks
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }
    let sample_rate = sample_rate.ok_or_else(|| bad(&path, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad(&path, "missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(bad(&path, "odd data chunk length"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| {
            let v = i16::from_le_bytes([c[0], c[1]]);
            (v as f32 / 32767.0).clamp(-1.0, 1.0)
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_samples() {
        assert!(Waveform::new(vec![0.0, 1.5], 16000).is_err());
        assert!(Waveform::new(vec![0.0, f32::NAN], 16000).is_err());
        assert!(Waveform::new(vec![-1.0, 1.0], 16000).is_ok());
    }

    #[test]
    fn wav_round_trip_is_sample_exact() {
        let dir = std::env::temp_dir().join("t2s-audio-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.wav");
        let samples: Vec<f32> = (0..480)
            .map(|i| ((i * 37 % 101) as f32 / 101.0) * 0.9 - 0.45)
            .collect();
        let w = Waveform::new(samples, 16000).unwrap();
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate(), 16000);
        assert_eq!(r.len(), w.len());
        for (a, b) in w.samples().iter().zip(r.samples()) {
            assert!((a - b).abs() <= 1.0 / 32767.0, "{a} vs {b}");
        }
        // A second pass through the quantizer must be bit-exact.
        let path2 = dir.join("round_trip2.wav");
        write_wav(&path2, &r).unwrap();
        let r2 = read_wav(&path2).unwrap();
        assert_eq!(r.samples(), r2.samples());
    }

    #[test]
    fn read_rejects_garbage() {
        let dir = std::env::temp_dir().join("t2s-audio-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.wav");
        std::fs::write(&path, b"not a wav file at all").unwrap();
        assert!(matches!(read_wav(&path), Err(Error::BadFile { .. })));
    }
}
