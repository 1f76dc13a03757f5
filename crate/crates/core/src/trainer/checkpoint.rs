//! Checkpoint serialization: a single binary file holding every model
//! tensor, optimizer state, the negative queue, both random streams, the
//! step counter and the config text. Length-prefixed named records after
//! magic bytes and a format version.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"BSRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// One named record.
#[derive(Debug, Clone)]
pub enum Record {
    Tensor { shape: Vec<usize>, data: Vec<f32> },
    U64(u64),
    Blob(Vec<u8>),
}

impl Record {
    pub fn tensor(t: &Tensor) -> Self {
        Record::Tensor {
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        }
    }

    pub fn as_tensor_parts(&self) -> Result<(&[usize], &[f32])> {
        match self {
            Record::Tensor { shape, data } => Ok((shape, data)),
            _ => Err(Error::Config("record is not a tensor".into())),
        }
    }

    pub fn as_u64(&self) -> Result<u64> {
        match self {
            Record::U64(v) => Ok(*v),
            _ => Err(Error::Config("record is not a u64".into())),
        }
    }

    pub fn as_blob(&self) -> Result<&[u8]> {
        match self {
            Record::Blob(b) => Ok(b),
            _ => Err(Error::Config("record is not a blob".into())),
        }
    }
}

pub fn rng_state_to_bytes(s: &RngState) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(&s.seed);
    out.extend_from_slice(&s.stream.to_le_bytes());
    out.extend_from_slice(&s.word_pos.to_le_bytes());
    out
}

pub fn rng_state_from_bytes(b: &[u8]) -> Result<RngState> {
    if b.len() != 56 {
        return Err(Error::Config(format!("rng state must be 56 bytes, got {}", b.len())));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&b[..32]);
    let stream = u64::from_le_bytes(b[32..40].try_into().expect("sized"));
    let word_pos = u128::from_le_bytes(b[40..56].try_into().expect("sized"));
    Ok(RngState {
        seed,
        stream,
        word_pos,
    })
}

/// Writes the records atomically (temp file + rename).
pub fn write_records(path: &Path, records: &BTreeMap<String, Record>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, rec) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        match rec {
            Record::Tensor { shape, data } => {
                buf.push(0);
                buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                for &d in shape {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Record::U64(v) => {
                buf.push(1);
                buf.extend_from_slice(&v.to_le_bytes());
            }
            Record::Blob(b) => {
                buf.push(2);
                buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
                buf.extend_from_slice(b);
            }
        }
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ckpt".into());
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: "truncated file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("sized")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("sized")))
    }
}

pub fn read_records(path: &Path) -> Result<BTreeMap<String, Record>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "bad magic bytes".into(),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: "record name is not utf-8".into(),
        })?;
        let tag = r.take(1)?[0];
        let rec = match tag {
            0 => {
                let rank = r.u32()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u32()? as usize);
                }
                let n: usize = shape.iter().product();
                let raw = r.take(4 * n)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("sized")))
                    .collect();
                Record::Tensor { shape, data }
            }
            1 => Record::U64(r.u64()?),
            2 => {
                let len = r.u32()? as usize;
                Record::Blob(r.take(len)?.to_vec())
            }
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("unknown record tag {other}"),
                })
            }
        };
        out.insert(name, rec);
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "trailing bytes after records".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut recs = BTreeMap::new();
        recs.insert(
            "w".to_string(),
            Record::Tensor {
                shape: vec![2, 3],
                data: vec![1.0, -2.0, 3.5, 0.0, 5.0, -6.25],
            },
        );
        recs.insert("step".to_string(), Record::U64(42));
        recs.insert("cfg".to_string(), Record::Blob(b"seed = 1\n".to_vec()));
        write_records(&path, &recs).unwrap();
        let back = read_records(&path).unwrap();
        let (shape, data) = back["w"].as_tensor_parts().unwrap();
        assert_eq!(shape, &[2, 3]);
        assert_eq!(data, &[1.0, -2.0, 3.5, 0.0, 5.0, -6.25]);
        assert_eq!(back["step"].as_u64().unwrap(), 42);
        assert_eq!(back["cfg"].as_blob().unwrap(), b"seed = 1\n");
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT0000").unwrap();
        assert!(matches!(read_records(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_version_is_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&99u32.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &buf).unwrap();
        assert!(matches!(
            read_records(&path),
            Err(Error::Version { found: 99, .. })
        ));
    }

    #[test]
    fn truncation_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut recs = BTreeMap::new();
        recs.insert(
            "w".to_string(),
            Record::Tensor {
                shape: vec![16],
                data: vec![0.5; 16],
            },
        );
        write_records(&path, &recs).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 7]).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Format { .. })));
    }
}
