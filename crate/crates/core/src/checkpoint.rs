//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "RECALCKP"
//! version  u32
//! digest   32 bytes  SHA-256 of the config text
//! config   u32 length + UTF-8 text (ModelConfig::to_text)
//! count    u32
//! count × { u8 kind (0 param, 1 buffer), u32 name length, name, u64 length, length × f64 }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"RECALCKP";
pub const VERSION: u32 = 1;

pub fn config_digest(config: &ModelConfig) -> [u8; 32] {
    Sha256::digest(config.to_text().as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(model: &Model) -> Vec<u8> {
    let text = model.config().to_text();
    let store = model.store();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(model.config()));
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let count = store.params().len() + store.buffers().len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let arrays = store
        .params()
        .iter()
        .map(|p| (0u8, &p.name, &p.data))
        .chain(store.buffers().iter().map(|b| (1u8, &b.name, &b.data)));
    for (kind, name, data) in arrays {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes via a temporary file and rename so readers never see a torn file.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(model)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}: need {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| {
            let mut e = self.err(format!("{what} is not UTF-8"));
            if let Error::Parse { offset, .. } = &mut e {
                *offset = start as u64;
            }
            e
        })
    }
}

/// Parses checkpoint bytes into a model. `path` is only used in messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = r.take(32, "digest")?.try_into().unwrap();
    let at_text = r.pos;
    let text = r.string("config text")?;
    let config = ModelConfig::from_text(&text).map_err(|e| {
        r.pos = at_text;
        r.err(format!("bad embedded config: {e}"))
    })?;
    if config_digest(&config) != digest || Sha256::digest(text.as_bytes()).as_slice() != digest {
        r.pos = 12;
        return Err(r.err("config digest does not match embedded config"));
    }

    let mut model = Model::build(config, 0)?;
    let count = r.u32("array count")? as usize;
    let store = model.store_mut();
    let expected = store.params().len() + store.buffers().len();
    if count != expected {
        return Err(r.err(format!("{count} arrays stored, model has {expected}")));
    }
    let mut seen = vec![false; expected];
    for _ in 0..count {
        let at = r.pos;
        let kind = r.take(1, "array kind")?[0];
        let name = r.string("array name")?;
        let len = r.u64("array length")? as usize;
        let (slot, idx) = match kind {
            0 => {
                let i = store.params().iter().position(|p| p.name == name);
                (i.map(|i| &mut store.params_mut()[i].data), i)
            }
            1 => {
                let i = store.buffers().iter().position(|b| b.name == name);
                let off = store.params().len();
                (i.map(|i| &mut store.buffers_mut()[i].data), i.map(|i| i + off))
            }
            k => {
                r.pos = at;
                return Err(r.err(format!("unknown array kind {k}")));
            }
        };
        let (Some(slot), Some(idx)) = (slot, idx) else {
            r.pos = at;
            return Err(r.err(format!("array `{name}` does not exist in this model")));
        };
        if seen[idx] {
            r.pos = at;
            return Err(r.err(format!("array `{name}` stored twice")));
        }
        seen[idx] = true;
        if slot.len() != len {
            r.pos = at;
            return Err(r.err(format!("array `{name}` has {len} values, model expects {}", slot.len())));
        }
        let raw = r.take(len * 8, "array data")?;
        for (v, b) in slot.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last array"));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and refuses it unless its config digest equals that of
/// `expected`.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let model = load(path)?;
    let (have, want) = (config_digest(model.config()), config_digest(expected));
    if have != want {
        return Err(Error::config(format!(
            "{}: checkpoint config digest {} does not match expected {}",
            path.display(),
            hex(&have),
            hex(&want)
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn small() -> Model {
        Model::build(ModelConfig::new(Variant::ReCal, 16, (16, 16)), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = small();
        m.store_mut().buffers_mut()[0].data[0] = 0.123;
        let bytes = encode(&m);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.store().params().iter().zip(back.store().params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data);
        }
        for (a, b) in m.store().buffers().iter().zip(back.store().buffers()) {
            assert_eq!(a.data, b.data);
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn tampered_config_is_rejected() {
        let m = small();
        let mut bytes = encode(&m);
        // Flip a byte inside the config text (after magic, version, digest, length).
        bytes[8 + 4 + 32 + 4 + 8] ^= 1;
        let err = decode(&bytes, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&small());
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut, Path::new("mem")).unwrap_err() {
            Error::Parse { offset, msg, .. } => {
                assert!(offset < cut.len() as u64);
                assert!(msg.contains("truncated"), "{msg}");
            }
            e => panic!("{e}"),
        }
        match decode(b"NOPE", Path::new("mem")).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 0),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn digest_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&small(), &path).unwrap();
        let other = ModelConfig::new(Variant::Baseline, 16, (16, 16));
        assert!(matches!(load_matching(&path, &other), Err(Error::Config(_))));
        assert!(load_matching(&path, small().config()).is_ok());
    }
}
