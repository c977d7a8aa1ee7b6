//! Versioned binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"HSFSCKPT"
//! u32     format version
//! u32 n + n bytes   config digest (ASCII hex)
//! u32 n + n bytes   model config (JSON)
//! u32     tensor count
//! per tensor: u32 n + n bytes name, u64 length, length × f64
//! ```

use std::fs;
use std::path::Path;

use super::params::{EmbeddingParams, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HSFSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    put_u32(buf, b.len() as u32);
    buf.extend_from_slice(b);
}

pub fn encode_checkpoint(params: &EmbeddingParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_bytes(&mut buf, params.digest().as_bytes());
    put_bytes(&mut buf, &serde_json::to_vec(&params.config)?);
    let mut tensors = Vec::new();
    params.for_each_tensor(|name, t| tensors.push((name.to_owned(), t.to_vec())));
    put_u32(&mut buf, tensors.len() as u32);
    for (name, t) in tensors {
        put_bytes(&mut buf, name.as_bytes());
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::decode(what, "unexpected end of checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let b = self.bytes(what)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::decode(what, e.to_string()))
    }
}

/// Decodes a checkpoint. When `expected_digest` is given, a differing config
/// digest is a compatibility error.
pub fn decode_checkpoint(bytes: &[u8], expected_digest: Option<&str>) -> Result<EmbeddingParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::decode("magic", "not a parameter checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::decode(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let digest = r.string("digest")?;
    let config: ModelConfig = serde_json::from_slice(r.bytes("config")?)
        .map_err(|e| Error::decode("config", e.to_string()))?;
    if config.digest() != digest {
        return Err(Error::Compatibility(format!(
            "stored digest {digest} does not match its config ({})",
            config.digest()
        )));
    }
    if let Some(expected) = expected_digest {
        if expected != digest {
            return Err(Error::Compatibility(format!(
                "checkpoint digest {digest} differs from expected {expected}"
            )));
        }
    }

    let mut params = EmbeddingParams::init(&config)?;
    let count = r.u32("tensor count")? as usize;
    let mut loaded = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let len = r.u64(&name)? as usize;
        let raw = r.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::decode(&name, "length overflow"))?,
            &name,
        )?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        loaded.insert(name, values);
    }
    if r.pos != bytes.len() {
        return Err(Error::decode("checkpoint", "trailing bytes"));
    }

    let mut problem = None;
    params.for_each_tensor_mut(|name, t| match loaded.remove(name) {
        Some(v) if v.len() == t.len() => *t = v,
        Some(v) => {
            problem.get_or_insert_with(|| {
                Error::decode(name, format!("{} values, expected {}", v.len(), t.len()))
            });
        }
        None => {
            problem.get_or_insert_with(|| Error::decode(name, "tensor missing"));
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::decode(extra, "unexpected tensor"));
    }
    if !params.is_finite() {
        return Err(Error::decode("tensors", "non-finite parameter"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &EmbeddingParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected_digest: Option<&str>,
) -> Result<EmbeddingParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected_digest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let p = EmbeddingParams::init(&ModelConfig::default()).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        assert_eq!(decode_checkpoint(&bytes, Some(&p.digest())).unwrap(), p);
    }

    #[test]
    fn digest_mismatch_is_compatibility_error() {
        let p = EmbeddingParams::init(&ModelConfig::default()).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes, Some("0000000000000000")),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn truncated_is_decode_error() {
        let p = EmbeddingParams::init(&ModelConfig::default()).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], None),
            Err(Error::Decode { .. })
        ));
        assert!(decode_checkpoint(b"nope", None).is_err());
    }
}
