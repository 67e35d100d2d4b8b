//! Discrete acoustic-unit discovery: frame encoding, codebook fitting,
//! quantization, and unit-sequence collapsing.

pub mod frames;
pub mod kmeans;

pub use frames::{encode_frames, FrameConfig, FrameSequence};
pub use kmeans::{kmeans_fit, Codebook, KmeansConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

/// A sequence of unit IDs. `collapsed` marks that no two adjacent units are
/// equal; the synthesizer and the lexicon require that form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSequence {
    units: Vec<u32>,
    collapsed: bool,
}

impl UnitSequence {
    /// Raw quantizer output; adjacent repeats allowed.
    pub fn new_raw(units: Vec<u32>) -> Self {
        UnitSequence {
            units,
            collapsed: false,
        }
    }

    /// A sequence claimed to be collapsed; adjacent repeats are rejected.
    pub fn new_collapsed(units: Vec<u32>) -> Result<Self> {
        if let Some(position) = units.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::NotCollapsed {
                position: position + 1,
            });
        }
        Ok(UnitSequence {
            units,
            collapsed: true,
        })
    }

    pub fn units(&self) -> &[u32] {
        &self.units
    }

    pub fn is_collapsed(&self) -> bool {
        self.collapsed
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Every unit must fall in [0, num_units).
    pub fn validate_range(&self, num_units: usize) -> Result<()> {
        if let Some(&unit) = self.units.iter().find(|&&u| u as usize >= num_units) {
            return Err(Error::UnitOutOfRange { unit, num_units });
        }
        Ok(())
    }
}

/// Reduce runs of equal adjacent units to a single occurrence.
pub fn collapse(sequence: &UnitSequence) -> UnitSequence {
    let mut units: Vec<u32> = Vec::with_capacity(sequence.len());
    for &u in sequence.units() {
        if units.last() != Some(&u) {
            units.push(u);
        }
    }
    UnitSequence {
        units,
        collapsed: true,
    }
}

/// Map each frame to its nearest centroid index. Output is uncollapsed.
pub fn quantize(codebook: &Codebook, frames: &FrameSequence) -> Result<UnitSequence> {
    if frames.dim() != codebook.dim() && !frames.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "quantize".into(),
            lhs: vec![codebook.k(), codebook.dim()],
            rhs: vec![frames.len(), frames.dim()],
        });
    }
    let units = (0..frames.len())
        .map(|t| codebook.nearest(frames.frame(t)) as u32)
        .collect();
    Ok(UnitSequence::new_raw(units))
}

/// Stack frame sequences into one [N, D] point matrix for codebook fitting.
pub fn gather_frames(sequences: &[FrameSequence]) -> Result<Tensor<f32>> {
    let dim = sequences
        .iter()
        .find(|s| !s.is_empty())
        .map(|s| s.dim())
        .unwrap_or(0);
    let mut data = Vec::new();
    let mut rows = 0;
    for s in sequences {
        if s.is_empty() {
            continue;
        }
        if s.dim() != dim {
            return Err(Error::ShapeMismatch {
                op: "gather_frames".into(),
                lhs: vec![rows, dim],
                rhs: vec![s.len(), s.dim()],
            });
        }
        data.extend_from_slice(s.data().data());
        rows += s.len();
    }
    Tensor::new(vec![rows, dim], data)
}

const CODEBOOK_MAGIC: &[u8; 4] = b"T2SU";
const CODEBOOK_VERSION: u32 = 1;

fn bad<P: AsRef<Path>>(path: P, msg: impl Into<String>) -> Error {
    Error::BadFile {
        path: path.as_ref().display().to_string(),
        msg: msg.into(),
    }
}

/// Binary codebook file: magic, version, k, dim, iterations (u32 LE), seed
/// (u64 LE), final inertia (f64 LE), then k*dim centroid f32 LE row-major.
pub fn save_codebook<P: AsRef<Path>>(path: P, codebook: &Codebook) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CODEBOOK_MAGIC);
    bytes.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(codebook.k() as u32).to_le_bytes());
    bytes.extend_from_slice(&(codebook.dim() as u32).to_le_bytes());
    bytes.extend_from_slice(&(codebook.iterations as u32).to_le_bytes());
    bytes.extend_from_slice(&codebook.seed.to_le_bytes());
    bytes.extend_from_slice(&codebook.inertia.to_le_bytes());
    for &v in codebook.centroids().data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(&path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_codebook<P: AsRef<Path>>(path: P) -> Result<Codebook> {
    let mut bytes = Vec::new();
    std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 36 {
        return Err(bad(&path, "codebook file truncated"));
    }
    if &bytes[0..4] != CODEBOOK_MAGIC {
        return Err(bad(&path, "not a codebook file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CODEBOOK_VERSION {
        return Err(bad(
            &path,
            format!("codebook version {version}, supported {CODEBOOK_VERSION}"),
        ));
    }
    let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let iterations = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let inertia = f64::from_le_bytes(bytes[28..36].try_into().unwrap());
    let expected = 36 + k * dim * 4;
    if bytes.len() != expected {
        return Err(bad(
            &path,
            format!("expected {expected} bytes for k={k}, dim={dim}, found {}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes[36..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad(&path, "non-finite centroid"));
    }
    let mut cb = Codebook::from_centroids(Tensor::new(vec![k, dim], data)?)?;
    cb.seed = seed;
    cb.iterations = iterations;
    cb.inertia = inertia;
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn collapse_worked_example() {
        let raw = UnitSequence::new_raw(vec![1, 1, 2, 2, 3, 3]);
        assert_eq!(collapse(&raw).units(), &[1, 2, 3]);
    }

    #[test]
    fn collapse_empty_and_alternating() {
        assert_eq!(collapse(&UnitSequence::new_raw(vec![])).units(), &[] as &[u32]);
        assert_eq!(
            collapse(&UnitSequence::new_raw(vec![1, 2, 1])).units(),
            &[1, 2, 1]
        );
    }

    #[test]
    fn new_collapsed_rejects_adjacent_repeats() {
        let err = UnitSequence::new_collapsed(vec![4, 7, 7, 2]).unwrap_err();
        assert!(matches!(err, Error::NotCollapsed { position: 2 }));
        assert!(UnitSequence::new_collapsed(vec![4, 7, 2, 7]).is_ok());
    }

    #[test]
    fn quantize_tie_breaks_to_lowest_index() {
        let cb = Codebook::from_centroids(
            Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let frames = FrameSequence::from_tensor(
            Tensor::new(vec![2, 2], vec![0.9, 0.8, 0.5, 0.5]).unwrap(),
            25.0,
            20.0,
        );
        let q = quantize(&cb, &frames).unwrap();
        assert_eq!(q.units(), &[1, 0]);
        assert!(!q.is_collapsed());
    }

    #[test]
    fn quantize_dimension_mismatch_rejected() {
        let cb = Codebook::from_centroids(
            Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap(),
        )
        .unwrap();
        let frames = FrameSequence::from_tensor(Tensor::zeros(vec![1, 2]), 25.0, 20.0);
        assert!(quantize(&cb, &frames).is_err());
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 17;
        let d = 6;
        let centroids: Vec<f32> = (0..k * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let cb =
            Codebook::from_centroids(Tensor::new(vec![k, d], centroids.clone()).unwrap()).unwrap();
        let n = 1000;
        let frame_data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let frames = FrameSequence::from_tensor(
            Tensor::new(vec![n, d], frame_data.clone()).unwrap(),
            25.0,
            20.0,
        );
        let got = quantize(&cb, &frames).unwrap();
        // Independent scan: no early abandon, plain loop over all centroids.
        for t in 0..n {
            let frame = &frame_data[t * d..(t + 1) * d];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let cent = &centroids[c * d..(c + 1) * d];
                let dist: f64 = frame
                    .iter()
                    .zip(cent)
                    .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assert_eq!(got.units()[t], best as u32, "frame {t}");
        }
    }

    #[test]
    fn codebook_file_round_trip() {
        let dir = std::env::temp_dir().join("t2s-units-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.codebook");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f32> = (0..40).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let points = Tensor::new(vec![10, 4], data).unwrap();
        let cb = kmeans_fit(
            &points,
            3,
            &KmeansConfig {
                subsample: 1.0,
                seed: 21,
                ..KmeansConfig::default()
            },
        )
        .unwrap();
        save_codebook(&path, &cb).unwrap();
        let loaded = load_codebook(&path).unwrap();
        assert_eq!(loaded.centroids(), cb.centroids());
        assert_eq!(loaded.seed, cb.seed);
        assert_eq!(loaded.iterations, cb.iterations);
        assert_eq!(loaded.inertia, cb.inertia);
    }

    #[test]
    fn codebook_load_rejects_truncation() {
        let dir = std::env::temp_dir().join("t2s-units-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("truncated.codebook");
        let cb = Codebook::from_centroids(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap()).unwrap();
        save_codebook(&path, &cb).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_codebook(&path), Err(Error::BadFile { .. })));
    }

    proptest! {
        #[test]
        fn collapse_is_idempotent(units in proptest::collection::vec(0u32..50, 0..200)) {
            let once = collapse(&UnitSequence::new_raw(units));
            let twice = collapse(&once);
            prop_assert_eq!(&once, &twice);
        }

        #[test]
        fn collapse_removes_adjacent_repeats(units in proptest::collection::vec(0u32..10, 0..200)) {
            let c = collapse(&UnitSequence::new_raw(units.clone()));
            prop_assert!(c.is_collapsed());
            prop_assert!(c.units().windows(2).all(|w| w[0] != w[1]));
            prop_assert!(c.len() <= units.len());
        }

        #[test]
        fn collapse_preserves_run_heads(units in proptest::collection::vec(0u32..10, 0..200)) {
            // Reference semantics: keep the first element of every run.
            let mut expect = Vec::new();
            for &u in &units {
                if expect.last() != Some(&u) {
                    expect.push(u);
                }
            }
            let c = collapse(&UnitSequence::new_raw(units));
            prop_assert_eq!(c.units(), &expect[..]);
        }

        #[test]
        fn validate_range_accepts_iff_in_range(
            units in proptest::collection::vec(0u32..30, 0..50),
            num_units in 1usize..40,
        ) {
            let s = UnitSequence::new_raw(units.clone());
            let ok = s.validate_range(num_units).is_ok();
            prop_assert_eq!(ok, units.iter().all(|&u| (u as usize) < num_units));
        }
    }
}
