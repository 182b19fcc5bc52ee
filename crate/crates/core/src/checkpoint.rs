//! Keyed tensor container with JSON metadata.
//!
//! ```text
//! "EDCK" 0x01
//! u32 meta_len, meta_len bytes of UTF-8 JSON
//! u32 n_entries, then per entry:
//!   u32 key_len, key bytes, u32 rank, rank × u64 dims, numel × f64
//! ```
//!
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{DecoderModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"EDCK\x01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Always an object; `model_config` holds the serialized [`ModelConfig`].
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail(&self, message: String) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message,
        }
    }
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (key, t) in &self.tensors {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not an EDCK v1 checkpoint".into(),
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: Value = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let n = r.u32("entry count")?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let key_len = r.u32("key length")? as usize;
            let key = std::str::from_utf8(r.take(key_len, "key")?)
                .map_err(|_| r.fail("key is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 8, &key)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.fail(format!("{key}: {e}")))?;
            tensors.push((key, t));
        }
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Parameters under their own names plus the model config.
    pub fn from_model(model: &DecoderModel) -> Result<Self> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "model_config": serde_json::to_value(model.config())?,
        }));
        for (name, t) in model.params().iter() {
            ck.tensors.push((name.to_string(), t.clone()));
        }
        Ok(ck)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = self
            .meta
            .get("model_config")
            .ok_or_else(|| Error::config("checkpoint has no model_config"))?;
        Ok(serde_json::from_value(cfg.clone())?)
    }

    /// Rebuilds the model. Entries outside the model namespace (such as
    /// optimizer state) are ignored.
    pub fn to_model(&self) -> Result<DecoderModel> {
        let mut model = DecoderModel::new(self.model_config()?, 0)?;
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        let entries = self
            .tensors
            .iter()
            .filter(|(k, _)| names.iter().any(|n| n == k))
            .map(|(k, t)| (k.as_str(), t));
        model.load_params(entries)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            hidden_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            n_subjects: 2,
            use_conditioner: true,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let model = DecoderModel::new(tiny(), 5).unwrap();
        let bytes = Checkpoint::from_model(&model).unwrap().encode().unwrap();
        assert_eq!(&bytes[..5], b"EDCK\x01");
        let back = Checkpoint::decode(&bytes).unwrap().to_model().unwrap();
        assert_eq!(back.config(), model.config());
        for ((na, a), (nb, b)) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(Checkpoint::from_model(&back).unwrap().encode().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let model = DecoderModel::new(tiny(), 5).unwrap();
        let bytes = Checkpoint::from_model(&model).unwrap().encode().unwrap();
        assert!(matches!(Checkpoint::decode(b"EDCK\x02rest"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn missing_or_misshapen_parameter_rejected() {
        let model = DecoderModel::new(tiny(), 5).unwrap();
        let mut ck = Checkpoint::from_model(&model).unwrap();
        ck.tensors.pop();
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::from_model(&model).unwrap();
        ck.tensors[0].1 = Tensor::zeros([1]);
        assert!(matches!(ck.to_model(), Err(Error::Dimension(_))));
    }
}
