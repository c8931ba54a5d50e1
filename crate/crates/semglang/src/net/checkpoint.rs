//! Versioned binary checkpoint container.
//!
//! A checkpoint is a flat sequence of named blobs. Parameter blobs are f32
//! little-endian with their shape; counters and usage statistics are u64
//! blobs; config snapshots ride along as raw bytes. The same container holds
//! autoencoder checkpoints, codebook exports, and proxy-classifier models.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::NetError;

const MAGIC: &[u8; 8] = b"SEMGCKPT";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;
const DTYPE_BYTES: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlobData,
}

/// An ordered collection of named blobs; order is part of the byte format,
/// so identical contents serialize identically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub blobs: Vec<Blob>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_f32(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blobs.push(Blob {
            name: name.into(),
            shape: shape.to_vec(),
            data: BlobData::F32(data),
        });
    }

    pub fn push_u64(&mut self, name: impl Into<String>, data: Vec<u64>) {
        let shape = vec![data.len()];
        self.blobs.push(Blob {
            name: name.into(),
            shape,
            data: BlobData::U64(data),
        });
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, data: Vec<u8>) {
        let shape = vec![data.len()];
        self.blobs.push(Blob {
            name: name.into(),
            shape,
            data: BlobData::Bytes(data),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    pub fn f32s(&self, name: &str) -> Result<&[f32], NetError> {
        match self.get(name).map(|b| &b.data) {
            Some(BlobData::F32(v)) => Ok(v),
            Some(_) => Err(NetError::Checkpoint(format!("blob `{name}` is not f32"))),
            None => Err(NetError::Checkpoint(format!("missing blob `{name}`"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64], NetError> {
        match self.get(name).map(|b| &b.data) {
            Some(BlobData::U64(v)) => Ok(v),
            Some(_) => Err(NetError::Checkpoint(format!("blob `{name}` is not u64"))),
            None => Err(NetError::Checkpoint(format!("missing blob `{name}`"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], NetError> {
        match self.get(name).map(|b| &b.data) {
            Some(BlobData::Bytes(v)) => Ok(v),
            Some(_) => Err(NetError::Checkpoint(format!("blob `{name}` is not bytes"))),
            None => Err(NetError::Checkpoint(format!("missing blob `{name}`"))),
        }
    }

    pub fn scalar_u64(&self, name: &str) -> Result<u64, NetError> {
        let v = self.u64s(name)?;
        if v.len() != 1 {
            return Err(NetError::Checkpoint(format!("blob `{name}` is not scalar")));
        }
        Ok(v[0])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for blob in &self.blobs {
            let name = blob.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            let dtype = match &blob.data {
                BlobData::F32(_) => DTYPE_F32,
                BlobData::U64(_) => DTYPE_U64,
                BlobData::Bytes(_) => DTYPE_BYTES,
            };
            out.push(dtype);
            out.extend_from_slice(&(blob.shape.len() as u32).to_le_bytes());
            for &d in &blob.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &blob.data {
                BlobData::F32(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                BlobData::U64(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                BlobData::Bytes(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    out.extend_from_slice(v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(NetError::Checkpoint("bad container magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported container version {version}"
            )));
        }
        let count = cur.u32()? as usize;
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| NetError::Checkpoint("blob name is not utf-8".into()))?;
            let dtype = cur.take(1)?[0];
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let len = cur.u64()? as usize;
            let data = match dtype {
                DTYPE_F32 => {
                    let raw = cur.take(len * 4)?;
                    BlobData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                    )
                }
                DTYPE_U64 => {
                    let raw = cur.take(len * 8)?;
                    BlobData::U64(
                        raw.chunks_exact(8)
                            .map(|c| {
                                u64::from_le_bytes([
                                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                                ])
                            })
                            .collect(),
                    )
                }
                DTYPE_BYTES => BlobData::Bytes(cur.take(len)?.to_vec()),
                other => {
                    return Err(NetError::Checkpoint(format!("unknown blob dtype {other}")))
                }
            };
            blobs.push(Blob { name, shape, data });
        }
        Ok(Self { blobs })
    }

    /// Write atomically: serialize to `<path>.tmp`, then rename.
    pub fn write(&self, path: &Path) -> Result<(), NetError> {
        let tmp = path.with_extension("tmp");
        let err = |e: std::io::Error| NetError::Checkpoint(format!("{}: {e}", path.display()));
        let mut f = fs::File::create(&tmp).map_err(err)?;
        f.write_all(&self.to_bytes()).map_err(err)?;
        f.sync_all().map_err(err)?;
        fs::rename(&tmp, path).map_err(err)
    }

    pub fn read(path: &Path) -> Result<Self, NetError> {
        let bytes = fs::read(path)
            .map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::Checkpoint("truncated container".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut c = Container::new();
        c.push_f32("param.w", &[2, 3], vec![1.0, -2.5, 0.0, 3.25, 4.0, -0.125]);
        c.push_u64("state.counts", vec![0, 7, u64::MAX]);
        c.push_bytes("config", b"{\"k\":512}".to_vec());
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.f32s("param.w").unwrap()[3], 3.25);
        assert_eq!(back.u64s("state.counts").unwrap()[2], u64::MAX);
        assert_eq!(back.bytes("config").unwrap(), b"{\"k\":512}");
    }

    #[test]
    fn serialization_is_byte_stable() {
        let mut c = Container::new();
        c.push_f32("a", &[2], vec![0.5, -0.5]);
        c.push_u64("b", vec![42]);
        assert_eq!(c.to_bytes(), c.to_bytes());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::from_bytes(b"not a checkpoint").is_err());
        let mut c = Container::new();
        c.push_u64("x", vec![1]);
        let mut bytes = c.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut c = Container::new();
        c.push_f32("w", &[1], vec![1.5]);
        c.write(&path).unwrap();
        let back = Container::read(&path).unwrap();
        assert_eq!(c, back);
    }
}
