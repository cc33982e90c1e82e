//! Binary checkpoint format.
//!
//! ```text
//! "STCH"  u32 version
//! str arch_id  f64 width  u32 classes  u32 in_channels  u32 image_size
//! u64 seed  str train_digest  u64 epoch
//! u32 count, then per tensor: str name  u8 dtype  u32 ndim  u32 dims…  f32 payload
//! ```
//!
//! Integers and floats are little-endian; `str` is a `u32` byte length
//! followed by UTF-8 bytes. The only dtype tag is `0` (f32).

use std::collections::HashMap;
use std::path::Path;

use super::model::{ArchitectureSpec, ModelGraph, ModelMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"STCH";
const DTYPE_F32: u8 = 0;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated: needed {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn to_bytes(model: &ModelGraph) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let spec = &model.spec;
    w.str(&spec.id);
    w.f64(spec.width);
    w.u32(spec.classes as u32);
    w.u32(spec.in_channels as u32);
    w.u32(spec.image_size as u32);
    w.u64(model.meta.seed);
    w.str(&model.meta.train_digest);
    w.u64(model.meta.epoch);
    let state = model.state();
    w.u32(state.len() as u32);
    for (name, t) in &state {
        w.str(name);
        w.u8(DTYPE_F32);
        w.u32(t.ndim() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for v in t.data() {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let spec = ArchitectureSpec {
        id: r.str()?,
        width: r.f64()?,
        classes: r.u32()? as usize,
        in_channels: r.u32()? as usize,
        image_size: r.u32()? as usize,
    };
    let meta = ModelMeta {
        seed: r.u64()?,
        train_digest: r.str()?,
        epoch: r.u64()?,
    };
    let count = r.u32()? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name = r.str()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "{name}: unknown dtype tag {dtype}"
            )));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| Ok(r.u32()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    let mut model = ModelGraph::build(&spec, meta.seed)?;
    model.meta = meta;
    let mut failure = None;
    model.visit_state_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        match tensors.remove(name) {
            None => failure = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(v) if v.shape() != t.shape() => {
                failure = Some(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match architecture {:?}",
                    v.shape(),
                    t.shape()
                )))
            }
            Some(v) => *t = v,
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

pub fn save(model: &ModelGraph, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(model)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelGraph> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelGraph {
        let mut m = ModelGraph::build(&ArchitectureSpec::small_resnet(0.25, 10), 9).unwrap();
        m.meta.train_digest = "abc".into();
        m.meta.epoch = 3;
        m.blocks[1].visit_state_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += 0.125));
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stch");
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.param_digest(), m.param_digest());
        assert_eq!(back.meta, m.meta);
        assert_eq!(back.spec, m.spec);
        assert_eq!(to_bytes(&back), to_bytes(&m));
    }

    #[test]
    fn corrupt_magic_and_version_rejected() {
        let mut bytes = to_bytes(&model());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let mut bytes = to_bytes(&model());
        bytes[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::CheckpointVersion {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = to_bytes(&model());
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                from_bytes(&bytes[..cut]).is_err(),
                "prefix of {cut} bytes accepted"
            );
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = model();
        let mut other = ModelGraph::build(&ArchitectureSpec::small_resnet(0.5, 10), 9).unwrap();
        other.spec = m.spec.clone();
        let err = from_bytes(&to_bytes(&other)).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }
}
