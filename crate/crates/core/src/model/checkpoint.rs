//! Binary model checkpoints.
//!
//! Layout (all integers little-endian): magic `T2SM`, format version,
//! vocabulary hash and size, the eight config fields, then each parameter
//! tensor in name order as (name, dims, f32 data), then an optional
//! optimizer block with the step count and first/second moment tensors in
//! the same name order. Writing the same model twice produces identical
//! bytes, so checkpoints can be checksummed.

use super::{ModelConfig, TranslationModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"T2SM";
const VERSION: u32 = 1;

/// Adam accumulator state carried across checkpoint boundaries so training
/// can resume mid-run without a cold restart of the moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl OptimizerState {
    pub fn zeros_like(model: &TranslationModel) -> Self {
        let zero = |t: &Tensor<f32>| Tensor::<f32>::zeros(t.shape().to_vec());
        OptimizerState {
            step: 0,
            m: model.params().iter().map(|(k, t)| (k.clone(), zero(t))).collect(),
            v: model.params().iter().map(|(k, t)| (k.clone(), zero(t))).collect(),
        }
    }
}

#[derive(Debug)]
pub struct CheckpointPayload {
    pub model: TranslationModel,
    pub optimizer: Option<OptimizerState>,
}

impl CheckpointPayload {
    /// Guard against decoding with a model trained over a different
    /// vocabulary layout.
    pub fn verify_vocab_hash(&self, expected: u64) -> Result<()> {
        if self.model.vocab_hash != expected {
            return Err(Error::VocabHashMismatch {
                file: self.model.vocab_hash,
                expected,
            });
        }
        Ok(())
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_tensor_data(w: &mut impl Write, t: &Tensor<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &TranslationModel,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u64(&mut w, model.vocab_hash)?;
    put_u32(&mut w, model.vocab_size as u32)?;
    let c = &model.config;
    for v in [c.layers_enc, c.layers_dec, c.d_model, c.d_ff, c.heads, c.max_positions] {
        put_u32(&mut w, v as u32)?;
    }
    put_f64(&mut w, c.dropout)?;
    put_f64(&mut w, c.attention_dropout)?;
    put_u32(&mut w, model.params().len() as u32)?;
    for (name, tensor) in model.params() {
        let bytes = name.as_bytes();
        put_u32(&mut w, bytes.len() as u32)?;
        w.write_all(bytes)?;
        put_u32(&mut w, tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            put_u32(&mut w, d as u32)?;
        }
        put_tensor_data(&mut w, tensor)?;
    }
    match optimizer {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            w.write_all(&[1u8])?;
            put_u64(&mut w, opt.step)?;
            for (name, tensor) in model.params() {
                let (m, v) = (opt.m.get(name), opt.v.get(name));
                let (m, v) = match (m, v) {
                    (Some(m), Some(v))
                        if m.shape() == tensor.shape() && v.shape() == tensor.shape() =>
                    {
                        (m, v)
                    }
                    _ => {
                        return Err(Error::Checkpoint(format!(
                            "optimizer state missing or misshapen for {name}"
                        )))
                    }
                };
                put_tensor_data(&mut w, m)?;
                put_tensor_data(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.bytes(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: Vec<usize>, what: &str) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let b = self.bytes(n * 4, what)?;
        let data = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointPayload> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path.as_ref())?),
    };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a model checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            got: version,
            supported: VERSION,
        });
    }
    let vocab_hash = r.u64("vocab hash")?;
    let vocab_size = r.u32("vocab size")? as usize;
    let mut dims = [0usize; 6];
    for (slot, what) in dims.iter_mut().zip([
        "layers_enc",
        "layers_dec",
        "d_model",
        "d_ff",
        "heads",
        "max_positions",
    ]) {
        *slot = r.u32(what)? as usize;
    }
    let config = ModelConfig {
        layers_enc: dims[0],
        layers_dec: dims[1],
        d_model: dims[2],
        d_ff: dims[3],
        heads: dims[4],
        max_positions: dims[5],
        dropout: r.f64("dropout")?,
        attention_dropout: r.f64("attention dropout")?,
    };
    let num_params = r.u32("parameter count")? as usize;
    // A corrupt count would otherwise allocate unboundedly.
    if num_params > 100_000 {
        return Err(Error::Checkpoint(format!(
            "implausible parameter tensor count {num_params}"
        )));
    }
    let mut params = BTreeMap::new();
    for _ in 0..num_params {
        let name_len = r.u32("parameter name length")? as usize;
        if name_len > 1024 {
            return Err(Error::Checkpoint(format!(
                "implausible parameter name length {name_len}"
            )));
        }
        let name = String::from_utf8(r.bytes(name_len, "parameter name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let ndim = r.u32(&format!("{name} rank"))? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {ndim} for {name}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&format!("{name} dim"))? as usize);
        }
        if shape.iter().product::<usize>() > 50_000_000 {
            return Err(Error::Checkpoint(format!("implausible size for {name}")));
        }
        let tensor = r.tensor(shape, &format!("{name} data"))?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    let model = TranslationModel::from_parts(config, vocab_size, vocab_hash, params)?;
    let optimizer = match r.bytes(1, "optimizer flag")?[0] {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let mut m = BTreeMap::new();
            let mut v = BTreeMap::new();
            for (name, tensor) in model.params() {
                let shape = tensor.shape().to_vec();
                m.insert(name.clone(), r.tensor(shape.clone(), &format!("{name} m"))?);
                v.insert(name.clone(), r.tensor(shape, &format!("{name} v"))?);
            }
            Some(OptimizerState { step, m, v })
        }
        flag => {
            return Err(Error::Checkpoint(format!("unknown optimizer flag {flag}")));
        }
    };
    Ok(CheckpointPayload { model, optimizer })
}
