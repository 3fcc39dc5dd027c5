//! Binary tensor container: an 8-byte little-endian header length, a JSON
//! header listing {tensor name, shape, dtype, byte offset}, then the raw
//! little-endian f32 payload. Used for backbone snapshots, trained-state
//! snapshots, and (with its own header type) cached prompts.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContainerHeader {
    tensors: Vec<TensorRecord>,
    /// CRC-64/XZ over the payload bytes, hex.
    crc64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn save_container(path: &Path, entries: &[TensorEntry]) -> Result<()> {
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        let numel: usize = entry.shape.iter().product();
        if numel != entry.values.len() {
            return Err(Error::Dimension {
                op: "save_container",
                lhs: entry.shape.clone(),
                rhs: vec![entry.values.len()],
            });
        }
        records.push(TensorRecord {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            dtype: "f32".to_string(),
            offset: payload.len(),
        });
        for v in &entry.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = ContainerHeader { tensors: records, crc64: format!("{:016x}", crc64(&payload)) };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
    write_framed(path, &header_json, &payload)
}

pub fn load_container(path: &Path) -> Result<Vec<TensorEntry>> {
    let (header_json, payload) = read_framed(path)?;
    let header: ContainerHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Format(format!("{}: bad container header: {e}", path.display())))?;
    let stored = u64::from_str_radix(&header.crc64, 16)
        .map_err(|e| Error::Format(format!("{}: bad crc field: {e}", path.display())))?;
    let actual = crc64(&payload);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "{}: checksum mismatch (stored {stored:016x}, computed {actual:016x})",
            path.display()
        )));
    }
    let mut entries = Vec::with_capacity(header.tensors.len());
    for rec in header.tensors {
        let numel: usize = rec.shape.iter().product();
        let end = rec.offset + numel * 4;
        if rec.dtype != "f32" || end > payload.len() {
            return Err(Error::Format(format!(
                "{}: tensor {} spans bytes {}..{} of a {}-byte payload",
                path.display(),
                rec.name,
                rec.offset,
                end,
                payload.len()
            )));
        }
        let values = decode_f32(&payload[rec.offset..end]);
        entries.push(TensorEntry { name: rec.name, shape: rec.shape, values });
    }
    Ok(entries)
}

/// Frame a structured-text header and a binary payload into one file.
pub fn write_framed(path: &Path, header: &[u8], payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(path, e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&(header.len() as u64).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(header).map_err(|e| Error::io(path, e))?;
    file.write_all(payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_framed(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if rest.len() < header_len {
        return Err(Error::Format(format!(
            "{}: truncated header ({} of {header_len} bytes)",
            path.display(),
            rest.len()
        )));
    }
    let payload = rest.split_off(header_len);
    Ok((rest, payload))
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

// ── CRC-64/XZ ────────────────────────────────────────────────────────

const CRC64_POLY: u64 = 0xC96C_5795_D787_0F42; // reflected 0x42F0E1EBA9EA3693

fn crc64_table() -> &'static [u64; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u64; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut crc = i as u64;
            for _ in 0..8 {
                crc = if crc & 1 == 1 { (crc >> 1) ^ CRC64_POLY } else { crc >> 1 };
            }
            *slot = crc;
        }
        table
    })
}

pub fn crc64(bytes: &[u8]) -> u64 {
    let table = crc64_table();
    let mut crc = !0u64;
    for &b in bytes {
        crc = table[((crc ^ b as u64) & 0xff) as usize] ^ (crc >> 8);
    }
    !crc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc64_check_vector() {
        // CRC-64/XZ reference value
        assert_eq!(crc64(b"123456789"), 0x995D_C9BB_DF19_39FA);
    }

    #[test]
    fn container_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let entries = vec![
            TensorEntry { name: "a".into(), shape: vec![2, 2], values: vec![1.0, -2.5, 3.25, 0.0] },
            TensorEntry { name: "b".into(), shape: vec![3], values: vec![f32::MIN, 0.1, f32::MAX] },
        ];
        save_container(&path, &entries).unwrap();
        let loaded = load_container(&path).unwrap();
        assert_eq!(loaded, entries);
    }

    #[test]
    fn tampered_payload_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let entries =
            vec![TensorEntry { name: "a".into(), shape: vec![2], values: vec![1.0, 2.0] }];
        save_container(&path, &entries).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_container(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_container(Path::new("/nonexistent/x.bin")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.bin"));
    }
}
