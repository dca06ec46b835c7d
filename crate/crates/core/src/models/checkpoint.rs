//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CTCAPS\0\0"
//! version  u32
//! header   u32 length + JSON {"stage": .., "spec": NetworkSpec}
//! count    u32
//! count × tensor:
//!     u32 name length, UTF-8 name
//!     u32 ndim, ndim × u64 dims
//!     product(dims) × f64
//! ```
//!
//! Tensors are the trainable parameters in registry order followed by the
//! batch-norm running statistics (`bnK.running_mean`, `bnK.running_var`).

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelBundle, NetworkSpec, Stage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTCAPS\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    spec: NetworkSpec,
}

fn named_tensors(m: &ModelBundle) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = m.parameters().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
    for (i, bn) in m.batch_norms().iter().enumerate() {
        out.push((format!("bn{}.running_mean", i + 1), &bn.running_mean));
        out.push((format!("bn{}.running_var", i + 1), &bn.running_var));
    }
    out
}

pub fn encode(m: &ModelBundle) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        stage: m.stage,
        spec: m.spec.clone(),
    })
    .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let tensors = named_tensors(m);
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Data("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Data("checkpoint dimension overflows".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let count = r.u32()?;
    let mut stored = HashMap::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()?;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Data("checkpoint tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Data(format!("checkpoint tensor `{name}` is too large")))?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Data(format!("checkpoint tensor `{name}`: {e}")))?;
        if stored.insert(name.clone(), t).is_some() {
            return Err(Error::Data(format!("checkpoint tensor `{name}` appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint tensors".into()));
    }

    let mut m = ModelBundle::build(header.stage, &header.spec)?;
    let mut fetch = |name: &str, slot: &mut Tensor| -> Result<()> {
        let t = stored
            .remove(name)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        Ok(())
    };
    for p in m.parameters_mut() {
        fetch(&p.name.clone(), &mut p.value)?;
    }
    for (i, bn) in m.batch_norms_mut().iter_mut().enumerate() {
        fetch(&format!("bn{}.running_mean", i + 1), &mut bn.running_mean)?;
        fetch(&format!("bn{}.running_var", i + 1), &mut bn.running_var)?;
    }
    if let Some(extra) = stored.keys().min() {
        return Err(Error::Data(format!("checkpoint has unknown tensor `{extra}`")));
    }
    Ok(m)
}

pub fn save_checkpoint(m: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(m)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CapsShape;
    use crate::tensor::SeededRng;

    fn toy() -> NetworkSpec {
        NetworkSpec {
            input_size: (8, 8),
            conv_channels: vec![2, 2, 4, 4],
            kernel: (3, 3),
            primary_caps: CapsShape::new(1, 4),
            hidden_caps: vec![],
            class_caps: CapsShape::new(2, 4),
            routing_iters: 2,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
            init_seed: 11,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = ModelBundle::build(Stage::Two, &toy()).unwrap();
        m.batch_norms_mut()[0].running_mean = Tensor::new(&[2], vec![0.1, -0.3]).unwrap();
        m.batch_norms_mut()[1].running_var = Tensor::new(&[2], vec![1.7, 0.2]).unwrap();
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back).unwrap(), bytes);
        let x = Tensor::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut SeededRng::new(2));
        let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = ModelBundle::build(Stage::Two, &toy()).unwrap();
        let bytes = encode(&m).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode(&bad).unwrap_err().to_string().contains("version 9"));
        let mut longer = bytes;
        longer.push(0);
        assert!(decode(&longer).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = ModelBundle::build(Stage::Two, &toy()).unwrap();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
