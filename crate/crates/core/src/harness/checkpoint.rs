//! Checkpoint files: a text header (magic, config snapshot, manifest)
//! followed by a little-endian `f32` payload.
//!
//! ```text
//! STTRACK-CHECKPOINT 1
//! config <bytes>
//! <config text>
//! manifest <count>
//! <name>\t<dims, comma separated>\t<0|1 trainable>\t<byte offset>
//! payload <bytes>
//! <raw f32 data>
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::harness::model::Model;
use crate::numerics::Tensor;

const MAGIC: &str = "STTRACK-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: usize,
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let config = model.cfg.to_text();
    let mut manifest = String::new();
    let mut payload = Vec::new();
    for (_, p) in model.store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            p.name,
            dims.join(","),
            u8::from(p.trainable),
            payload.len()
        ));
        for &v in p.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(format!("{MAGIC}\nconfig {}\n", config.len()).as_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(format!("manifest {}\n", model.store.len()).as_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(format!("payload {}\n", payload.len()).as_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("checkpoint body truncated".into()));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn counted(&mut self, key: &str) -> Result<usize> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Format(format!("expected `{key} <n>`, found {line:?}")))
    }
}

fn parse_entry(line: &str) -> Result<ManifestEntry> {
    let bad = || Error::Format(format!("bad manifest line {line:?}"));
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != 4 {
        return Err(bad());
    }
    let shape = parts[1]
        .split(',')
        .map(|d| d.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    let trainable = match parts[2] {
        "0" => false,
        "1" => true,
        _ => return Err(bad()),
    };
    Ok(ManifestEntry {
        name: parts[0].to_string(),
        shape,
        trainable,
        offset: parts[3].parse().map_err(|_| bad())?,
    })
}

/// Parses a checkpoint into its config and manifest without building a model.
pub fn read_manifest(bytes: &[u8]) -> Result<(Config, Vec<ManifestEntry>)> {
    let mut r = Reader { bytes, pos: 0 };
    read_header(&mut r)
}

fn read_header(r: &mut Reader) -> Result<(Config, Vec<ManifestEntry>)> {
    if r.line()? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let n = r.counted("config")?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let cfg = Config::parse(text)?;
    let count = r.counted("manifest")?;
    let mut entries = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let e = parse_entry(r.line()?)?;
        if !seen.insert(e.name.clone()) {
            return Err(Error::Format(format!("duplicate manifest name {}", e.name)));
        }
        entries.push(e);
    }
    Ok((cfg, entries))
}

/// Rebuilds the model from its config and overwrites every parameter with
/// the stored values.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let (cfg, entries) = read_header(&mut r)?;
    let n = r.counted("payload")?;
    let payload = r.take(n)?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let mut model = Model::new(&cfg)?;
    if entries.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            entries.len(),
            model.store.len()
        )));
    }
    for e in entries {
        let id = model
            .store
            .id(&e.name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {}", e.name)))?;
        let p = model.store.get_mut(id);
        if p.value.shape() != e.shape.as_slice() || p.trainable != e.trainable {
            return Err(Error::Format(format!("tensor {} does not match the model", e.name)));
        }
        let len = p.value.len() * 4;
        let chunk = payload
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Format(format!("tensor {} runs past the payload", e.name)))?;
        let data: Vec<f64> = chunk
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let value = Tensor::new(e.shape, data)?;
        value.check_finite(&e.name)?;
        p.value = value;
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        let mut c = Config::compact();
        c.backbone.depth = 2;
        c.backbone.d = 8;
        c.backbone.heads = 2;
        c.dsf.count = 1;
        c.dsf.inner = 8;
        c.dsf.state = 2;
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = Model::new(&small()).unwrap();
        let a = to_bytes(&m);
        let back = from_bytes(&a).unwrap();
        assert_eq!(back.cfg, m.cfg);
        let b = to_bytes(&back);
        assert_eq!(a, b);
        for (id, p) in back.store.iter() {
            let orig = m.store.value(id);
            for (x, y) in p.value.data().iter().zip(orig.data()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let m = Model::new(&small()).unwrap();
        let a = to_bytes(&m);
        assert!(matches!(from_bytes(&a[..a.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(from_bytes(b"hello\n"), Err(Error::Format(_))));
        let (cfg, entries) = read_manifest(&a).unwrap();
        assert_eq!(cfg, m.cfg);
        assert_eq!(entries.len(), m.store.len());
    }
}
