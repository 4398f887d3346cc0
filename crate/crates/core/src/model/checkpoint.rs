//! `JCKP` checkpoint files.
//!
//! ```text
//! "JCKP" | u32 version | u32 header_len | header (UTF-8 key=value)
//!        | u64 tokens_seen | u32 n_records
//!        | n_records × ( u32 name_len | name (UTF-8) | JTEN blob )
//! ```
//!
//! The header holds the model config under `model.` and free-form metadata
//! under `meta.`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::kv::{self, KvMap};
use crate::tensor::{read_tensor, write_tensor, Tensor};

use super::{DecoderWeights, ModelConfig, ModelError};

pub const JCKP_MAGIC: &[u8; 4] = b"JCKP";
pub const JCKP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tokens_seen: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_weights(weights: &DecoderWeights, tokens_seen: u64) -> Self {
        Self {
            config: weights.config().clone(),
            tokens_seen,
            meta: BTreeMap::new(),
            tensors: weights.to_named(),
        }
    }

    /// Model weights only; extra records (e.g. optimizer moments) are ignored.
    pub fn weights(&self) -> Result<DecoderWeights, ModelError> {
        let named = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("opt."))
            .cloned()
            .collect();
        DecoderWeights::from_named(&self.config, named)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        let mut header = KvMap::new();
        self.config.write_kv(&mut header, "model.");
        for (k, v) in &self.meta {
            header.insert(format!("meta.{k}"), v.clone());
        }
        let header = kv::render(&header);
        w.write_all(JCKP_MAGIC)?;
        w.write_all(&JCKP_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        w.write_all(&self.tokens_seen.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Checkpoint(m);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != JCKP_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != JCKP_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header = read_string(r)?;
        let mut map = kv::parse(&header).map_err(|e| bad(e.to_string()))?;
        let config = ModelConfig::take_kv(&mut map, "model.").map_err(|e| bad(e.to_string()))?;
        let mut meta = BTreeMap::new();
        for (k, v) in map {
            let key = k.strip_prefix("meta.").ok_or_else(|| bad(format!("unexpected header key {k:?}")))?;
            meta.insert(key.to_string(), v);
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let tokens_seen = u64::from_le_bytes(b);
        let n = read_u32(r)?;
        let mut tensors = Vec::with_capacity(n.min(4096) as usize);
        for _ in 0..n {
            let name = read_string(r)?;
            tensors.push((name, read_tensor(r)?));
        }
        Ok(Self {
            config,
            tokens_seen,
            meta,
            tensors,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// failed write never leaves a truncated checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("jckp.tmp");
        let result = (|| {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            fs::rename(&tmp, path)?;
            Ok(())
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut r = BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, ModelError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(ModelError::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| ModelError::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decoder_forward, AttentionPath};

    #[test]
    fn save_load_forward_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let w = DecoderWeights::init(&ModelConfig::tiny(40), 5).unwrap();
        let mut ck = Checkpoint::from_weights(&w, 1234);
        ck.meta.insert("step".into(), "7".into());
        let path = dir.path().join("a.jckp");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let w2 = back.weights().unwrap();
        let tokens = [1, 5, 9, 2];
        assert_eq!(
            decoder_forward(&tokens, &w, AttentionPath::Naive).unwrap(),
            decoder_forward(&tokens, &w2, AttentionPath::Naive).unwrap()
        );
        assert!(!dir.path().join("a.jckp.tmp").exists());
    }

    #[test]
    fn header_starts_with_magic_and_config() {
        let w = DecoderWeights::init(&ModelConfig::tiny(8), 0).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_weights(&w, 0).write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"JCKP");
        let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&buf[12..12 + len]).unwrap();
        assert!(header.contains("model.bias_policy=qkv_only\n"));
    }

    #[test]
    fn unwritable_path_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let w = DecoderWeights::init(&ModelConfig::tiny(8), 0).unwrap();
        let path = dir.path().join("missing").join("x.jckp");
        assert!(Checkpoint::from_weights(&w, 0).save(&path).is_err());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = b"JCKX".to_vec();
        bytes.extend_from_slice(&[0; 16]);
        assert!(matches!(Checkpoint::read_from(&mut bytes.as_slice()), Err(ModelError::Checkpoint(_))));
    }
}
