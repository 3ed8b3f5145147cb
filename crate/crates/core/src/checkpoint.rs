//! Binary checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SACCN1"            6-byte magic
//! u16                 format version
//! u32 + bytes         config block, `key=value` lines
//! u32                 tensor count
//! per tensor, in name order:
//!   u32 + bytes       name
//!   u32               rank
//!   u32 × rank        extents
//!   f32 × numel       data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{NetConfig, Saccn, SaccnModel};
use crate::nn::ParamSet;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 6] = b"SACCN1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Ordered `key=value` settings.
    pub config: Vec<(String, String)>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let block: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_bytes(&mut out, block.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf() });
        }
        r.pos = MAGIC.len();
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("two bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let block = r.string()?;
        let mut config = Vec::new();
        for line in block.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.err(format!("config line `{line}` lacks `=`")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.err("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| r.err(format!("tensor `{name}`: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(r.err(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Network settings from the config block. Keys containing a `.` belong
    /// to other components and are skipped; any other unknown key is an
    /// error.
    pub fn net_config(&self) -> Result<NetConfig> {
        let mut config = NetConfig::default();
        for (k, v) in &self.config {
            if !k.contains('.') && !config.set(k, v)? {
                return Err(Error::Config(format!("unknown checkpoint setting `{k}`")));
            }
        }
        Ok(config)
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("string is not UTF-8".into()))
    }
}

impl<T: Element> SaccnModel<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config().to_pairs(),
            tensors: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Rebuild from a checkpoint. Tensors whose names contain `/` are
    /// auxiliary state and are ignored here.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let net = Saccn::new(&ckpt.net_config()?)?;
        let mut params = ParamSet::new();
        for (name, t) in &ckpt.tensors {
            if !name.contains('/') {
                params.insert(name.clone(), t.cast());
            }
        }
        Self::from_parts(net, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_and_trailing_bytes_are_rejected() {
        let mut ckpt = Checkpoint::default();
        ckpt.config.push(("a".into(), "1".into()));
        ckpt.tensors.insert("t".into(), Tensor::from_vec(&[2], vec![1.0, -2.5]).unwrap());
        let bytes = ckpt.to_bytes();
        let p = Path::new("mem");
        assert_eq!(Checkpoint::from_bytes(&bytes, p).unwrap(), ckpt);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p),
            Err(Error::Format { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer, p).is_err());
        let mut versioned = bytes;
        versioned[6] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&versioned, p),
            Err(Error::UnsupportedVersion { version: 9, .. })
        ));
    }
}
