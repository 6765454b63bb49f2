//! Versioned little-endian weight file for a backbone.
//!
//! ```text
//! magic "L2PW" | version u32 | 9 × u32 config fields | frozen u8 | count u32
//! count × { name_len u32 | name | ndim u32 | ndim × u32 dims | f32 values }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use l2p_tensor::Tensor;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"L2PW";
pub const FORMAT_VERSION: u32 = 1;

fn config_fields(c: &BackboneConfig) -> [(&'static str, usize); 9] {
    [
        ("image_side", c.image_side),
        ("channels", c.channels),
        ("patch_size", c.patch_size),
        ("embed_dim", c.embed_dim),
        ("key_dim", c.key_dim),
        ("depth", c.depth),
        ("heads", c.heads),
        ("mlp_ratio", c.mlp_ratio),
        ("pretrain_classes", c.pretrain_classes),
    ]
}

pub fn encode(backbone: &Backbone<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (_, v) in config_fields(backbone.config()) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(backbone.is_frozen() as u8);
    out.extend_from_slice(&(backbone.params().len() as u32).to_le_bytes());
    for (name, t) in backbone.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a weight file. When `expected` is given, every config field must
/// match it.
pub fn decode(bytes: &[u8], expected: Option<&BackboneConfig>) -> Result<Backbone<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic, not an L2PW weight file".into() });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        });
    }
    let mut v = [0usize; 9];
    for slot in &mut v {
        *slot = r.u32("config")? as usize;
    }
    let config = BackboneConfig {
        image_side: v[0],
        channels: v[1],
        patch_size: v[2],
        embed_dim: v[3],
        key_dim: v[4],
        depth: v[5],
        heads: v[6],
        mlp_ratio: v[7],
        pretrain_classes: v[8],
    };
    if let Some(exp) = expected {
        for ((field, got), (_, want)) in config_fields(&config).iter().zip(config_fields(exp)) {
            if *got != want {
                return Err(Error::config(*field, format!("weight file has {got}, expected {want}")));
            }
        }
    }
    config.validate()?;
    let frozen = r.take(1, "frozen flag")?[0] != 0;
    let count = r.u32("parameter count")? as usize;
    let layout = config.layout();
    if count != layout.len() {
        return Err(Error::Format {
            offset: r.pos as u64 - 4,
            message: format!("{count} parameters, config implies {}", layout.len()),
        });
    }
    let mut params = Vec::with_capacity(count);
    for (want_name, want_dims) in layout {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: at, message: "parameter name is not UTF-8".into() })?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u32("dimension")? as usize);
        }
        if name != want_name || dims != want_dims {
            return Err(Error::Format {
                offset: at,
                message: format!("found `{name}` {dims:?}, expected `{want_name}` {want_dims:?}"),
            });
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, "values")?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.push((name, Tensor::new(dims, values)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos as u64, message: "trailing bytes after last parameter".into() });
    }
    Backbone::from_parts(config, params, frozen)
}

/// Writes through a temporary file and renames, so readers never see a
/// half-written file.
pub fn save_weights(backbone: &Backbone<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(backbone)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path, expected: Option<&BackboneConfig>) -> Result<Backbone<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig { embed_dim: 8, key_dim: 8, depth: 1, heads: 2, ..BackboneConfig::default() }
    }

    #[test]
    fn round_trip_preserves_digest() {
        let mut b = Backbone::<f32>::new(small(), 3).unwrap();
        b.set_frozen(true);
        let back = decode(&encode(&b), Some(&small())).unwrap();
        assert_eq!(back.digest(), b.digest());
        assert!(back.is_frozen());
        assert_eq!(back, b);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = encode(&Backbone::<f32>::new(small(), 3).unwrap());
        for cut in [0, 3, 10, 60, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], None), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = encode(&Backbone::<f32>::new(small(), 3).unwrap());
        bytes[4] = 9;
        let err = decode(&bytes, None).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn config_mismatch_names_field() {
        let bytes = encode(&Backbone::<f32>::new(small(), 3).unwrap());
        let other = BackboneConfig { depth: 2, ..small() };
        match decode(&bytes, Some(&other)) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "depth"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
