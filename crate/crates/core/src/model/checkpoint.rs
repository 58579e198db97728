//! Binary checkpoint format.
//!
//! Layout (little endian): 8-byte magic, `u32` version, `u32` header length,
//! JSON header `{tool_version, model, provenance}`, `u32` parameter count,
//! then per parameter `u32` name length, name bytes, `u32` rank, `u64` dims
//! and `f64` data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Param, ProtoNet};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PPNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    tool_version: String,
    model: ModelConfig,
    provenance: serde_json::Value,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
                Error::Checkpoint(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl ProtoNet {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            tool_version: crate::TOOL_VERSION.to_string(),
            model: self.config.clone(),
            provenance: self.provenance.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, header.len());
        out.extend_from_slice(&header);
        put_u32(&mut out, self.params.len());
        for p in &self.params {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.tensor.ndim());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
        header.model.validate()?;
        let specs = header.model.param_specs();
        let count = r.u32()? as usize;
        if count != specs.len() {
            return Err(Error::Checkpoint(format!("checkpoint holds {count} parameters, model needs {}", specs.len())));
        }
        let mut params = Vec::with_capacity(count);
        for (name, group, shape) in specs {
            let nlen = r.u32()? as usize;
            let got = String::from_utf8_lossy(r.take(nlen)?).into_owned();
            if got != name {
                return Err(Error::Checkpoint(format!("expected parameter {name}, found {got}")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != shape {
                return Err(Error::Checkpoint(format!("{name}: stored shape {dims:?}, expected {shape:?}")));
            }
            let n: usize = shape.iter().product();
            let data =
                r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.push(Param { name, group, tensor: Tensor::new(&shape, data)? });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config: header.model, params, provenance: header.provenance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Load and check the architecture against `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let net = Self::load(path)?;
        if net.config != *expected {
            return Err(Error::Checkpoint(format!(
                "{}: architecture mismatch: checkpoint has {:?}, expected {:?}",
                path.display(),
                net.config,
                expected
            )));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            num_classes: 2,
            protos_per_class: 2,
            proto_dim: 4,
            widths: [3, 4, 5],
            shallow_block: 1,
            head: HeadKind::Fc,
        }
    }

    #[test]
    fn bytes_are_stable_across_reload() {
        let mut net = ProtoNet::new(tiny(), 9).unwrap();
        net.provenance = serde_json::json!({"seed": 9});
        let a = net.to_bytes().unwrap();
        let back = ProtoNet::from_bytes(&a).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_bytes().unwrap(), a);
        let img = Tensor::from_fn(&[3, 16, 16], |i| (i as f64).sin());
        assert_eq!(net.logits(&img).unwrap(), back.logits(&img).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = ProtoNet::new(tiny(), 0).unwrap().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(ProtoNet::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(ProtoNet::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut v = bytes.clone();
        v[8] = 7;
        let msg = ProtoNet::from_bytes(&v).unwrap_err().to_string();
        assert!(msg.contains("version 7"), "{msg}");
    }

    #[test]
    fn architecture_mismatch_is_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ProtoNet::new(tiny(), 0).unwrap().save(&path).unwrap();
        let other = ModelConfig { proto_dim: 8, ..tiny() };
        let msg = ProtoNet::load_expecting(&path, &other).unwrap_err().to_string();
        assert!(msg.contains("architecture mismatch"), "{msg}");
        assert!(ProtoNet::load_expecting(&path, &tiny()).is_ok());
    }
}
