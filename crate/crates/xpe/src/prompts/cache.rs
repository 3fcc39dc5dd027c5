//! Cached-prompt files. After training, the assembled prompt is evaluated
//! once and stored as a static L x d matrix with metadata and a CRC-64
//! checksum; inference loads that matrix and never runs the encoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::prompts::PromptComponents;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMetadata {
    pub method: String,
    pub l: usize,
    pub d: usize,
    pub source_set: String,
    pub seed: u64,
    pub creation_step: u64,
    /// CRC-64/XZ over the payload bytes, hex.
    pub crc64: String,
}

/// Immutable prompt matrix as loaded from (or written to) a cache file.
#[derive(Debug, Clone)]
pub struct CachedPrompt {
    pub metadata: CacheMetadata,
    rows: Vec<f32>,
}

impl CachedPrompt {
    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.metadata.l
    }

    pub fn is_empty(&self) -> bool {
        self.metadata.l == 0
    }

    pub fn width(&self) -> usize {
        self.metadata.d
    }

    /// The cache must match the backbone hidden size it is injected into.
    pub fn check_width(&self, d_model: usize) -> Result<()> {
        if self.metadata.d != d_model {
            return Err(Error::Compatibility(format!(
                "cached prompt has width {} but the backbone hidden size is {d_model}",
                self.metadata.d
            )));
        }
        Ok(())
    }
}

/// Evaluate the assembled prompt once and write it with metadata. The
/// encoder and pseudo prompt are not serialized; the cache is all inference
/// needs.
pub fn export_cached_prompt(
    components: &PromptComponents,
    source_set: &str,
    seed: u64,
    creation_step: u64,
    path: &Path,
) -> Result<CachedPrompt> {
    let assembled = components.assemble_static()?;
    let payload = io::encode_f32(&assembled.values);
    let metadata = CacheMetadata {
        method: components.method_label(),
        l: assembled.shape[0],
        d: assembled.shape[1],
        source_set: source_set.to_string(),
        seed,
        creation_step,
        crc64: format!("{:016x}", io::crc64(&payload)),
    };
    let header = serde_json::to_vec(&metadata)
        .map_err(|e| Error::Format(format!("cache header encode: {e}")))?;
    io::write_framed(path, &header, &payload)?;
    Ok(CachedPrompt { metadata, rows: assembled.values })
}

pub fn load_cached_prompt(path: &Path) -> Result<CachedPrompt> {
    let (header, payload) = io::read_framed(path)?;
    let metadata: CacheMetadata = serde_json::from_slice(&header)
        .map_err(|e| Error::Format(format!("{}: bad cache header: {e}", path.display())))?;
    let stored = u64::from_str_radix(&metadata.crc64, 16)
        .map_err(|e| Error::Format(format!("{}: bad crc field: {e}", path.display())))?;
    let actual = io::crc64(&payload);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "{}: cached prompt checksum mismatch (stored {stored:016x}, computed {actual:016x})",
            path.display()
        )));
    }
    let rows = io::decode_f32(&payload);
    if rows.len() != metadata.l * metadata.d {
        return Err(Error::Format(format!(
            "{}: payload holds {} values, metadata promises {}x{}",
            path.display(),
            rows.len(),
            metadata.l,
            metadata.d
        )));
    }
    Ok(CachedPrompt { metadata, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptMethod;
    use crate::rng::SeededRng;

    fn components() -> PromptComponents {
        PromptComponents::init(PromptMethod::Dual, 6, 0.5, 4, 2, &SeededRng::new(9)).unwrap()
    }

    #[test]
    fn export_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompt.cache");
        let components = components();
        let exported = export_cached_prompt(&components, "compact-3", 7, 1200, &path).unwrap();
        let loaded = load_cached_prompt(&path).unwrap();
        assert_eq!(loaded.rows(), exported.rows());
        assert_eq!(loaded.metadata, exported.metadata);
        assert_eq!(loaded.metadata.method, "dual-50");
        assert_eq!(loaded.metadata.seed, 7);
        assert_eq!(loaded.metadata.creation_step, 1200);
        assert_eq!(loaded.metadata.source_set, "compact-3");
    }

    #[test]
    fn cache_payload_holds_exactly_l_by_d_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompt.cache");
        export_cached_prompt(&components(), "s", 0, 0, &path).unwrap();
        let (_, payload) = crate::io::read_framed(&path).unwrap();
        assert_eq!(payload.len(), 6 * 4 * 4); // L * d * sizeof(f32)
    }

    #[test]
    fn tampered_cache_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompt.cache");
        export_cached_prompt(&components(), "s", 0, 0, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_cached_prompt(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn wrong_width_is_a_compatibility_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompt.cache");
        let cached = export_cached_prompt(&components(), "s", 0, 0, &path).unwrap();
        assert!(cached.check_width(4).is_ok());
        assert!(matches!(cached.check_width(8), Err(Error::Compatibility(_))));
    }
}
