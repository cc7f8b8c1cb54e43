//! Versioned checkpoint container: a header followed by named `f32` blobs.
//!
//! ```text
//! magic "ATDBCKPT" | u32 version | u32 blob count
//! per blob: u32 name length | name (utf-8) | u64 row offset
//!           | u32 rank | u64 dims[rank] | f32 values (little-endian)
//! ```
//!
//! A blob covers rows `[row_offset, row_offset + dims[0])` of the named tensor,
//! so a single embedding row can be stored without its table.

use std::fs;
use std::path::Path;

use crate::backend::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ATDBCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub row_offset: u64,
    pub dims: Vec<u64>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    /// Adds every tensor of `groups` in full.
    pub fn add_groups(&mut self, params: &ParamStore, groups: &[String]) -> Result<()> {
        for group in groups {
            for (name, param) in params.group(group)? {
                self.blobs.push(Blob {
                    name: name.clone(),
                    row_offset: 0,
                    dims: param.shape.iter().map(|&d| d as u64).collect(),
                    values: param.values.iter().map(|&v| v as f32).collect(),
                });
            }
        }
        Ok(())
    }

    /// Adds one row of a 2-D tensor.
    pub fn add_row(&mut self, params: &ParamStore, name: &str, row: usize) -> Result<()> {
        let param = params.get(name).ok_or_else(|| Error::UnknownGroup(name.to_string()))?;
        let width = param.shape[1];
        let values = param.values.get(row * width..(row + 1) * width).ok_or(Error::UnknownToken(row))?;
        self.blobs.push(Blob {
            name: name.to_string(),
            row_offset: row as u64,
            dims: vec![1, width as u64],
            values: values.iter().map(|&v| v as f32).collect(),
        });
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for blob in &self.blobs {
            out.extend_from_slice(&(blob.name.len() as u32).to_le_bytes());
            out.extend_from_slice(blob.name.as_bytes());
            out.extend_from_slice(&blob.row_offset.to_le_bytes());
            out.extend_from_slice(&(blob.dims.len() as u32).to_le_bytes());
            for d in &blob.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &blob.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let malformed = |reason: &str| Error::MalformedArtifact { path: path.to_path_buf(), reason: reason.to_string() };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| malformed("truncated header"))? != MAGIC {
            return Err(malformed("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| malformed("truncated header"))?;
        if version != VERSION {
            return Err(malformed(&format!("unsupported version {version}")));
        }
        let count = cur.u32().ok_or_else(|| malformed("truncated header"))?;
        let mut blobs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let blob = (|| {
                let name_len = cur.u32()? as usize;
                let name = String::from_utf8(cur.take(name_len)?.to_vec()).ok()?;
                let row_offset = cur.u64()?;
                let rank = cur.u32()? as usize;
                let dims: Vec<u64> = (0..rank).map(|_| cur.u64()).collect::<Option<_>>()?;
                let n: u64 = dims.iter().product();
                let raw = cur.take(n as usize * 4)?;
                let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Some(Blob { name, row_offset, dims, values })
            })()
            .ok_or_else(|| malformed("truncated blob"))?;
            blobs.push(blob);
        }
        if cur.pos != bytes.len() {
            return Err(malformed("trailing bytes"));
        }
        Ok(Self { blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Writes every blob into `params`.
    pub fn apply(&self, params: &mut ParamStore) -> Result<()> {
        for blob in &self.blobs {
            let param = params.get_mut(&blob.name).ok_or_else(|| Error::UnknownGroup(blob.name.clone()))?;
            let row_width: usize = param.shape[1..].iter().product();
            let blob_tail: Vec<usize> = blob.dims.iter().skip(1).map(|&d| d as usize).collect();
            let rows = blob.dims.first().copied().unwrap_or(1) as usize;
            let start = blob.row_offset as usize * row_width;
            let end = start + rows * row_width;
            if blob_tail != param.shape[1..] || end > param.values.len() {
                return Err(Error::ShapeMismatch {
                    left: blob.dims.iter().map(|&d| d as usize).collect(),
                    right: param.shape.clone(),
                });
            }
            param.values[start..end].iter_mut().zip(&blob.values).for_each(|(p, v)| *p = *v as f64);
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let slice = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(slice)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut p = ParamStore::default();
        p.insert("token_embeddings.weight", vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        p.insert("cross_attention.block0.to_q", vec![2, 2], vec![0.5, -0.5, 0.25, 8.0]);
        p
    }

    #[test]
    fn row_and_group_blobs_round_trip() {
        let source = store();
        let mut ckpt = Checkpoint::default();
        ckpt.add_groups(&source, &["cross_attention".to_string()]).unwrap();
        ckpt.add_row(&source, "token_embeddings.weight", 2).unwrap();
        let parsed = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(parsed, ckpt);

        let mut target = ParamStore::default();
        target.insert("token_embeddings.weight", vec![3, 2], vec![9.0; 6]);
        target.insert("cross_attention.block0.to_q", vec![2, 2], vec![0.0; 4]);
        parsed.apply(&mut target).unwrap();
        assert_eq!(target.values("token_embeddings.weight"), &[9.0, 9.0, 9.0, 9.0, 4.0, 5.0]);
        assert_eq!(target.values("cross_attention.block0.to_q"), source.values("cross_attention.block0.to_q"));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut ckpt = Checkpoint::default();
        ckpt.add_groups(&store(), &["cross_attention".to_string()]).unwrap();
        let bytes = ckpt.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, Path::new("x")).is_err());
        assert!(matches!(Checkpoint::load(Path::new("/nonexistent/ckpt.bin")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn out_of_range_row_fails_to_apply() {
        let ckpt = Checkpoint {
            blobs: vec![Blob { name: "token_embeddings.weight".into(), row_offset: 3, dims: vec![1, 2], values: vec![0.0; 2] }],
        };
        assert!(ckpt.apply(&mut store()).is_err());
    }
}
