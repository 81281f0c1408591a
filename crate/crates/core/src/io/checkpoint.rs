//! Binary model checkpoints.
//!
//! ```text
//! magic    8 bytes  "NMFNETCK"
//! version  u8       1
//! dtype    u8       0 = f64, 1 = f32
//! config   u32 length + UTF-8 JSON of the network configuration
//! count    u32 number of tensors
//! tensor   u16 name length + name, u8 rank, rank × u32 dims, values as f64
//! meta     u32 length + UTF-8 JSON object
//! ```
//!
//! Integers and values are little-endian. `f32` values are widened to `f64`
//! on save, which is exact, so loading restores every bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{build, Model, NetworkConfig};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"NMFNETCK";
pub const VERSION: u8 = 1;

fn dtype_code<T: Real>() -> u8 {
    if T::NAME == "f32" {
        1
    } else {
        0
    }
}

/// Serializes a model plus free-form metadata.
pub fn encode<T: Real>(model: &Model<T>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype_code::<T>());
    let config = serde_json::to_vec(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let state = model.state_dict();
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, t) in state {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u8,
    pub dtype: &'static str,
    pub config: NetworkConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {VERSION})"
        )));
    }
    let dtype = match r.u8()? {
        0 => "f64",
        1 => "f32",
        other => return Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
    };
    let n = r.u32()? as usize;
    let config: NetworkConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        tensors.insert(name, t);
    }
    let n = r.u32()? as usize;
    let meta =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        version,
        dtype,
        config,
        tensors,
        meta,
    })
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, meta: &serde_json::Value) -> Result<()> {
    fs::write(path, encode(model, meta)?)?;
    Ok(())
}

fn restore<T: Real>(ckpt: Checkpoint, config: &NetworkConfig) -> Result<(Model<T>, serde_json::Value)> {
    let mut model = build::<T>(config, 0)?;
    model.load_state(ckpt.tensors.into_iter().map(|(k, v)| (k, v.cast())).collect())?;
    Ok((model, ckpt.meta))
}

/// Rebuilds the saved model from its stored configuration.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Model<T>, serde_json::Value)> {
    let ckpt = decode(&fs::read(path)?)?;
    let config = ckpt.config.clone();
    restore(ckpt, &config)
}

/// Loads the saved tensors into the architecture described by `config`;
/// any missing, extra or differently shaped tensor is an error.
pub fn load_checkpoint_as<T: Real>(path: &Path, config: &NetworkConfig) -> Result<(Model<T>, serde_json::Value)> {
    restore(decode(&fs::read(path)?)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BlockConfig, BlockKind, NmfBackward};

    fn config() -> NetworkConfig {
        let block = |c| BlockConfig {
            kind: BlockKind::Cnmf,
            mix_1x1: true,
            out_channels: c,
            kernel: (2, 2),
            stride: 1,
            padding: 0,
            groups_main: 1,
            groups_mix: 1,
            batch_norm: true,
            nmf_iters: 4,
            nmf_epsilon: 1.0,
        };
        NetworkConfig {
            blocks: vec![block(4), block(2)],
            width_multiplier: 1,
            input_shape: (1, 3, 3),
            class_count: 2,
            linearization: Default::default(),
            grad_mode: Default::default(),
            nmf_backward: NmfBackward::Approx,
        }
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let cfg = config();
        let mut m = build::<f64>(&cfg, 3).unwrap();
        let x = Tensor::from_fn(vec![2, 1, 3, 3], |k| (k as f64 * 0.37).sin().abs());
        m.forward_train(&x).unwrap();
        let meta = serde_json::json!({"val_acc": 0.5});
        let bytes = encode(&m, &meta).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.meta, meta);
        let (back, _) = restore::<f64>(ck, &cfg).unwrap();
        assert_eq!(back.forward_eval(&x).unwrap(), m.forward_eval(&x).unwrap());
        for ((na, a), (nb, b)) in m.state_dict().into_iter().zip(back.state_dict()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_precision_round_trip() {
        let cfg = config();
        let m = build::<f32>(&cfg, 3).unwrap();
        let bytes = encode(&m, &serde_json::Value::Null).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.dtype, "f32");
        let (back, _) = restore::<f32>(ck, &cfg).unwrap();
        let x: Tensor<f32> = Tensor::full(vec![1, 1, 3, 3], 0.25);
        assert_eq!(back.forward_eval(&x).unwrap(), m.forward_eval(&x).unwrap());
    }

    #[test]
    fn rejects_bad_version_magic_truncation_and_mismatched_config() {
        let m = build::<f64>(&config(), 1).unwrap();
        let bytes = encode(&m, &serde_json::Value::Null).unwrap();
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(decode(&v2).unwrap_err().to_string().contains("version 2"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());

        let mut other = config();
        other.blocks[0].out_channels = 5;
        let ck = decode(&bytes).unwrap();
        assert!(restore::<f64>(ck, &other).is_err());
    }
}
