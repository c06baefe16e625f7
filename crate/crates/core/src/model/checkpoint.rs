//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `DEPJCKPT`, `u32` format version, dtype
//! tag, JSON config block, JSON metadata block, `u32` tensor count, then per
//! tensor its name, `u32` rows, `u32` cols and raw values, and finally a
//! CRC-32 over every preceding byte.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::transformer::Transformer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"DEPJCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// A model plus free-form string metadata (vocabulary, task order, ...).
#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub model: Transformer<S>,
    pub metadata: BTreeMap<String, String>,
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
    buf.extend_from_slice(b);
}

pub fn write_checkpoint<S: Scalar, W: Write>(
    w: &mut W,
    model: &Transformer<S>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut buf = Vec::with_capacity(model.num_params() * 8 + 4096);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_bytes(&mut buf, S::DTYPE.as_bytes());
    put_bytes(&mut buf, &serde_json::to_vec(&model.config)?);
    put_bytes(&mut buf, &serde_json::to_vec(metadata)?);
    let infos = model.params.infos();
    buf.extend_from_slice(&(infos.len() as u32).to_le_bytes());
    for info in infos {
        put_bytes(&mut buf, info.name.as_bytes());
        buf.extend_from_slice(&(info.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(info.cols as u32).to_le_bytes());
        for &v in &model.params.data[info.range()] {
            match S::DTYPE {
                "f32" => buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

/// Reads a checkpoint into precision `S`, converting values if the stored
/// dtype differs.
pub fn read_checkpoint<S: Scalar, R: Read>(r: &mut R) -> Result<Checkpoint<S>> {
    let mut all = Vec::new();
    r.read_to_end(&mut all)?;
    if all.len() < MAGIC.len() + 8 || &all[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let (body, tail) = all.split_at(all.len() - 4);
    let mut c = Cursor { buf: body, pos: MAGIC.len() };
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let dtype = c.string()?;
    let width = match dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    };
    let config: ModelConfig = serde_json::from_slice(c.bytes()?)?;
    let metadata: BTreeMap<String, String> = serde_json::from_slice(c.bytes()?)?;
    let mut model = Transformer::<S>::empty(config)?;
    let count = c.u32()? as usize;
    if count != model.params.infos().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            model.params.infos().len()
        )));
    }
    for i in 0..count {
        let name = c.string()?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let info = model.params.infos()[i].clone();
        if info.name != name || info.rows != rows || info.cols != cols {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: found {name} [{rows}x{cols}], expected {} [{}x{}]",
                info.name, info.rows, info.cols
            )));
        }
        let raw = c.take(rows * cols * width)?;
        for (dst, chunk) in model.params.data[info.range()].iter_mut().zip(raw.chunks_exact(width)) {
            let v = if width == 4 {
                f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64
            } else {
                f64::from_le_bytes(chunk.try_into().expect("8 bytes"))
            };
            *dst = S::from_f64_lossy(v);
        }
    }
    if c.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    if !model.params.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok(Checkpoint { model, metadata })
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &Transformer<S>, metadata: &BTreeMap<String, String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, model, metadata)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Transformer<f32> {
        Transformer::new(ModelConfig::tiny(120)).unwrap()
    }

    #[test]
    fn round_trip_preserves_weights_and_metadata() {
        let m = tiny();
        let mut meta = BTreeMap::new();
        meta.insert("order".to_string(), "ACP".to_string());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &meta).unwrap();
        let back: Checkpoint<f32> = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.model.params, m.params);
        assert_eq!(back.model.config, m.config);
        assert_eq!(back.metadata, meta);
    }

    #[test]
    fn f32_checkpoint_loads_into_f64_model() {
        let m = tiny();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &BTreeMap::new()).unwrap();
        let back: Checkpoint<f64> = read_checkpoint(&mut buf.as_slice()).unwrap();
        for (a, b) in back.model.params.data.iter().zip(&m.params.data) {
            assert_eq!(*a as f32, *b);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &tiny(), &BTreeMap::new()).unwrap();
        let mid = buf.len() / 2;
        buf[mid] ^= 0x40;
        assert!(matches!(read_checkpoint::<f32, _>(&mut buf.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &tiny(), &BTreeMap::new()).unwrap();
        buf[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint::<f32, _>(&mut buf.as_slice()),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(read_checkpoint::<f32, _>(&mut &b"NOTACKPTxxxxxxxxxxxx"[..]).is_err());
    }
}
