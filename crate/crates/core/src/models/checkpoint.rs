//! Checkpoint files: an 8-byte magic, a little-endian u64 header length, a
//! JSON header, then raw little-endian tensor data in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::imaging::{RngState, SeededRng};
use crate::nn::{Adam, AdamState, Real};

const MAGIC: &[u8; 8] = b"LIDSCKP1";

/// Run bookkeeping stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub step: u64,
    pub rng: Option<RngState>,
    /// Training configuration, verbatim.
    pub config: serde_json::Value,
}

/// Optimizer hyperparameters; the moments are stored as tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    meta: CheckpointMeta,
    optimizer: Option<OptimizerSnapshot>,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub meta: CheckpointMeta,
    pub optimizer: Option<Adam>,
}

fn width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    }
}

impl<T: Real> Checkpoint<T> {
    /// Writes atomically through a temporary sibling file.
    pub fn save(path: impl AsRef<Path>, params: &mut ModelParams<T>, meta: &CheckpointMeta, optimizer: Option<&Adam>) -> Result<()> {
        let path = path.as_ref();
        let spec = params.spec();
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for (name, slot) in params.slots() {
            let shape = match &slot {
                crate::nn::Slot::Param(p) => p.shape.clone(),
                crate::nn::Slot::Buffer(b) => vec![b.len()],
            };
            for &v in slot.values() {
                data.extend(v.to_bits_le());
            }
            tensors.push(TensorEntry { name, dtype: T::DTYPE.into(), shape });
        }
        let snapshot = optimizer.map(|o| {
            for (i, (m, v)) in o.state.m.iter().zip(&o.state.v).enumerate() {
                for (kind, values) in [("m", m), ("v", v)] {
                    values.iter().for_each(|x| data.extend(x.to_le_bytes()));
                    tensors.push(TensorEntry { name: format!("adam.{kind}.{i}"), dtype: "f64".into(), shape: vec![values.len()] });
                }
            }
            OptimizerSnapshot { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, step: o.state.step }
        });
        let header = serde_json::to_vec(&Header { spec, meta: meta.clone(), optimizer: snapshot, tensors })?;
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(MAGIC)?;
            f.write_all(&(header.len() as u64).to_le_bytes())?;
            f.write_all(&header)?;
            f.write_all(&data)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut cursor = 16 + hlen;
        let mut take = |entry: &TensorEntry| -> Result<&[u8]> {
            let n: usize = entry.shape.iter().product();
            let len = n * width(&entry.dtype)?;
            let chunk = bytes.get(cursor..cursor + len).ok_or_else(|| corrupt("truncated tensor data"))?;
            cursor += len;
            Ok(chunk)
        };

        let mut params: ModelParams<T> = init_params(&header.spec, &mut SeededRng::new(0))?;
        let mut entries = header.tensors.iter();
        {
            let slots = params.slots();
            for (name, mut slot) in slots {
                let entry = entries.next().ok_or_else(|| corrupt("missing tensors"))?;
                if entry.name != name || entry.dtype != T::DTYPE {
                    return Err(Error::Checkpoint(format!("expected {name} ({}), found {} ({})", T::DTYPE, entry.name, entry.dtype)));
                }
                let raw = take(entry)?;
                let dst = slot.values_mut();
                if raw.len() != dst.len() * width(&entry.dtype)? {
                    return Err(Error::Checkpoint(format!("{name}: shape {:?} does not match the spec", entry.shape)));
                }
                for (d, b) in dst.iter_mut().zip(raw.chunks_exact(width(&entry.dtype)?)) {
                    *d = T::from_bits_le(b);
                }
            }
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let mut state = AdamState { step: o.step, m: Vec::new(), v: Vec::new() };
                let rest: Vec<&TensorEntry> = entries.collect();
                for pair in rest.chunks(2) {
                    let [m, v] = pair else { return Err(corrupt("unpaired optimizer moments")) };
                    for (entry, dst) in [(m, &mut state.m), (v, &mut state.v)] {
                        let raw = take(entry)?;
                        dst.push(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect());
                    }
                }
                let mut adam = Adam::new(o.lr, (o.beta1, o.beta2));
                adam.eps = o.eps;
                adam.state = state;
                Some(adam)
            }
        };
        if cursor != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { params, meta: header.meta, optimizer })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;
    use crate::models::images_to_tensor;
    use crate::nn::Mode;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let spec = ModelSpec::new(16, 4, 8, 4);
        let mut params: ModelParams<f32> = init_params(&spec, &mut SeededRng::new(3)).unwrap();
        // Move running statistics away from their initial values and take an optimizer step.
        let x = images_to_tensor::<f32>(&[Image::filled(16, 0.3), Image::filled(16, 0.8)]).unwrap();
        let (q, tr) = params.embedder.forward(&x, Mode::Train).unwrap();
        params.embedder.backward(tr, &q);
        let mut adam = Adam::new(1e-3, (0.9, 0.999));
        adam.step(&mut params.modules());
        let meta = CheckpointMeta {
            epoch: 2,
            step: 7,
            rng: Some(SeededRng::new(9).state()),
            config: serde_json::json!({"side": 16}),
        };
        let probe = Image::from_fn(16, 16, |c, y, x| ((c + y * x) % 7) as f64 / 6.0);
        let before_q = params.embed(&probe).unwrap();
        let before_r = params.retrieve(&probe).unwrap();
        Checkpoint::save(&path, &mut params, &meta, Some(&adam)).unwrap();

        let mut loaded = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(loaded.meta, meta);
        let opt = loaded.optimizer.unwrap();
        assert_eq!(opt.state, adam.state);
        assert_eq!(loaded.params.embed(&probe).unwrap(), before_q);
        assert_eq!(loaded.params.retrieve(&probe).unwrap(), before_r);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut params: ModelParams<f32> = init_params(&ModelSpec::new(8, 2, 4, 2), &mut SeededRng::new(1)).unwrap();
        Checkpoint::save(&path, &mut params, &CheckpointMeta::default(), None).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"not a checkpoint").is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_ok());
    }
}
