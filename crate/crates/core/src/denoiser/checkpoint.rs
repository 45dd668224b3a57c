//! Binary checkpoints with a text provenance sidecar.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | content                                  |
//! |------------|------------------------------------------|
//! | 8          | magic `PGCKPT01`                         |
//! | 4 (u32)    | format version                           |
//! | 8 (u64)    | length `n` of the architecture text      |
//! | n          | architecture as TOML                     |
//! | 8 (u64)    | parameter count `p`                      |
//! | 8 * p      | parameters as `f64`                      |
//!
//! The sidecar `<file>.meta.toml` records how the parameters were produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Architecture, ParamVector, Shape};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PGCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: String,
    pub seed: u64,
    pub steps: usize,
    pub dataset_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.toml");
    path.with_file_name(name)
}

pub fn encode(params: &ParamVector) -> Vec<u8> {
    let arch_text = toml::to_string(params.arch()).expect("architecture serializes");
    let mut buf = Vec::with_capacity(32 + arch_text.len() + 8 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(arch_text.len() as u64).to_le_bytes());
    buf.extend_from_slice(arch_text.as_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamVector> {
    let fail = |m: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message: m,
    };
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8).map_err(&fail)? != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4).map_err(&fail)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(format!("unsupported format version {version}")));
    }
    let n = cur.u64().map_err(&fail)? as usize;
    let text = std::str::from_utf8(cur.take(n).map_err(&fail)?).map_err(|e| fail(e.to_string()))?;
    let arch: Architecture = toml::from_str(text).map_err(|e| fail(format!("architecture: {e}")))?;
    let count = cur.u64().map_err(&fail)? as usize;
    if count != arch.param_count() {
        return Err(fail(format!(
            "parameter count {count} does not match architecture ({})",
            arch.param_count()
        )));
    }
    let raw = cur.take(8 * count).map_err(&fail)?;
    if cur.pos != bytes.len() {
        return Err(fail("trailing bytes".into()));
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let shape = Shape::new(arch).map_err(|e| fail(e.to_string()))?;
    ParamVector::from_values(shape, values).map_err(|e| fail(e.to_string()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err("truncated".into()),
        }
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save(path: &Path, params: &ParamVector, provenance: &Provenance) -> Result<()> {
    crate::io::write_atomic(path, &encode(params))?;
    let meta = toml::to_string(provenance).expect("provenance serializes");
    crate::io::write_atomic(&sidecar_path(path), meta.as_bytes())
}

pub fn load(path: &Path) -> Result<ParamVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn load_provenance(path: &Path) -> Result<Provenance> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    toml::from_str(&text).map_err(|e| Error::Checkpoint {
        path: side,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::init_params;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.ckpt");
        let p = init_params(&Architecture::standard(3, 2), 4).unwrap();
        let prov = Provenance {
            kind: "pretrain".into(),
            seed: 4,
            steps: 10,
            dataset_hash: "abc".into(),
        };
        save(&path, &p, &prov).unwrap();
        assert_eq!(load(&path).unwrap(), p);
        assert_eq!(load_provenance(&path).unwrap(), prov);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let arch_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + 4 + 8 + arch_len + 8 + 8 * p.len());
    }

    #[test]
    fn corrupted_checkpoints_rejected() {
        let p = init_params(&Architecture::linear(2, 2), 1).unwrap();
        let bytes = encode(&p);
        let path = Path::new("mem");
        assert!(decode(&bytes[..bytes.len() - 3], path).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, path).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode(&bad, path).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long, path).is_err());
    }
}
