//! Binary checkpoints: `MMTC`, version, model config, training step, then
//! every parameter in layout order as `ndim, dims…, f32 values` (little-endian).

use std::path::Path;

use super::config::{FusionMode, GateMode, ModelConfig};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MMTC";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, x: usize) {
    buf.extend_from_slice(&(x as u32).to_le_bytes());
}

/// Serialises parameters (converted to f32) and the step they were taken at.
pub fn write_checkpoint<T: Real>(params: &ModelParams<T>, step: u64) -> Vec<u8> {
    let c = params.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for x in [c.enc_layers, c.dec_layers, c.d_model, c.d_ffn, c.heads] {
        put_u32(&mut buf, x);
    }
    buf.extend_from_slice(&c.dropout.to_le_bytes());
    buf.extend_from_slice(&c.label_smoothing.to_le_bytes());
    buf.push(c.fusion_mode.code());
    buf.push(match c.gate_mode {
        GateMode::Elementwise => 0,
        GateMode::Scalar => 1,
    });
    buf.push(u8::from(c.raw_qkv));
    for x in [c.d_img, c.src_vocab, c.tgt_vocab, c.max_len] {
        put_u32(&mut buf, x);
    }
    buf.extend_from_slice(&step.to_le_bytes());
    put_u32(&mut buf, params.len());
    for i in 0..params.len() {
        let t = params.tensor(i);
        put_u32(&mut buf, t.shape().len());
        for &s in t.shape() {
            put_u32(&mut buf, s);
        }
        for x in t.data() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint buffer. Returns the parameters and the training step.
pub fn read_checkpoint<T: Real>(buf: &[u8]) -> Result<(ModelParams<T>, u64)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected MMTC".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut cfg = ModelConfig {
        enc_layers: c.u32()?,
        dec_layers: c.u32()?,
        d_model: c.u32()?,
        d_ffn: c.u32()?,
        heads: c.u32()?,
        dropout: c.f64()?,
        label_smoothing: c.f64()?,
        ..ModelConfig::default()
    };
    let code = c.u8()?;
    cfg.fusion_mode = FusionMode::from_code(code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown fusion code {code}")))?;
    cfg.gate_mode = match c.u8()? {
        0 => GateMode::Elementwise,
        1 => GateMode::Scalar,
        g => return Err(Error::Checkpoint(format!("unknown gate code {g}"))),
    };
    cfg.raw_qkv = c.u8()? != 0;
    cfg.d_img = c.u32()?;
    cfg.src_vocab = c.u32()?;
    cfg.tgt_vocab = c.u32()?;
    cfg.max_len = c.u32()?;
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    let step = c.u64()?;
    let n = c.u32()?;
    let mut tensors = Vec::with_capacity(n);
    for i in 0..n {
        let ndim = c.u32()?;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Checkpoint(format!("tensor {i} has rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &s| a.checked_mul(s))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {i} shape {shape:?} too large")))?;
        let data = c
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        tensors.push(
            Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {i}: {e}")))?,
        );
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - c.pos
        )));
    }
    Ok((ModelParams::from_tensors(&cfg, tensors)?, step))
}

pub fn save_checkpoint<T: Real>(path: &Path, params: &ModelParams<T>, step: u64) -> Result<()> {
    std::fs::write(path, write_checkpoint(params, step))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelParams<T>, u64)> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: FusionMode) -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            d_ffn: 16,
            heads: 2,
            fusion_mode: mode,
            d_img: 6,
            src_vocab: 12,
            tgt_vocab: 13,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn bitwise_round_trip_all_modes() {
        for mode in FusionMode::ALL {
            let p = ModelParams::<f32>::init(&small(mode), 5).unwrap();
            let bytes = write_checkpoint(&p, 77);
            let (q, step) = read_checkpoint::<f32>(&bytes).unwrap();
            assert_eq!(step, 77);
            assert_eq!(q.config(), p.config());
            for i in 0..p.len() {
                let a: Vec<u32> = p.tensor(i).data().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = q.tensor(i).data().iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b);
            }
            assert_eq!(write_checkpoint(&q, 77), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = ModelParams::<f32>::init(&small(FusionMode::Gated), 1).unwrap();
        let mut bytes = write_checkpoint(&p, 0);
        assert!(read_checkpoint::<f32>(&bytes[..bytes.len() - 3]).is_err());
        bytes.push(0);
        assert!(read_checkpoint::<f32>(&bytes).is_err());
        bytes.pop();
        bytes[1] = b'X';
        assert!(matches!(
            read_checkpoint::<f32>(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }
}
