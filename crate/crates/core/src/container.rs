//! Single-file container for named numeric blobs.
//!
//! Layout: the magic bytes `PLF1`, the manifest length as a little-endian
//! `u64`, the UTF-8 JSON manifest, then the raw blob of little-endian `f32`
//! values. Model weights and feature caches share this format.

use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"PLF1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("not a PLF1 file (bad magic bytes)")]
    BadMagic,
    #[error("file truncated inside the header")]
    TruncatedHeader,
    #[error("entry `{0}` is truncated: blob ends before the entry does")]
    TruncatedEntry(String),
    #[error("manifest is not valid JSON: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unknown format version {0}")]
    UnknownVersion(u64),
    #[error("entry `{0}` overlaps or is out of order with the previous entry")]
    Overlap(String),
    #[error("entry `{name}` has shape {actual:?}, expected {expected:?}")]
    EntryShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("entry `{found}` found where `{expected}` was expected")]
    UnexpectedEntry { expected: String, found: String },
    #[error("missing entry `{0}`")]
    MissingEntry(String),
    #[error("unexpected trailing entry `{0}`")]
    ExtraEntry(String),
    #[error("blob has {blob} bytes but entries cover {covered}")]
    BlobLength { blob: u64, covered: u64 },
}

/// One named array inside the blob. `offset` is in bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl Entry {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.elements() as u64 * 4
    }

    pub fn end(&self) -> u64 {
        self.offset + self.byte_len()
    }
}

/// Assigns contiguous offsets to `(name, shape)` pairs in order.
pub fn layout_entries<'a>(items: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Vec<Entry> {
    let mut offset = 0u64;
    items
        .into_iter()
        .map(|(name, shape)| {
            let e = Entry {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset,
            };
            offset = e.end();
            e
        })
        .collect()
}

pub fn encode(manifest: &[u8], blob: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest);
    out.extend_from_slice(blob);
    out
}

/// Splits a container into its manifest and blob.
pub fn decode(bytes: &[u8]) -> Result<(&[u8], &[u8]), ContainerError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(if bytes.len() < 4 && MAGIC.starts_with(bytes) {
            ContainerError::TruncatedHeader
        } else {
            ContainerError::BadMagic
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(ContainerError::TruncatedHeader);
    }
    let len = u64::from_le_bytes(bytes[4..HEADER_LEN].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(HEADER_LEN))
        .filter(|&e| e <= bytes.len())
        .ok_or(ContainerError::TruncatedHeader)?;
    Ok((&bytes[HEADER_LEN..end], &bytes[end..]))
}

/// Reads `format_version` before the rest of the manifest is interpreted.
pub fn check_version(manifest: &[u8]) -> Result<(), ContainerError> {
    #[derive(Deserialize)]
    struct Versioned {
        format_version: u64,
    }
    let v: Versioned = serde_json::from_slice(manifest)?;
    if v.format_version != u64::from(FORMAT_VERSION) {
        return Err(ContainerError::UnknownVersion(v.format_version));
    }
    Ok(())
}

/// Checks that entries are ascending, non-overlapping and exactly cover the blob.
pub fn validate_entries(entries: &[Entry], blob_len: u64) -> Result<(), ContainerError> {
    let mut prev_end = 0u64;
    for e in entries {
        if e.offset < prev_end {
            return Err(ContainerError::Overlap(e.name.clone()));
        }
        if e.end() > blob_len {
            return Err(ContainerError::TruncatedEntry(e.name.clone()));
        }
        prev_end = e.end();
    }
    let covered: u64 = entries.iter().map(Entry::byte_len).sum();
    if covered != blob_len {
        return Err(ContainerError::BlobLength { blob: blob_len, covered });
    }
    Ok(())
}

/// Compares stored entries against the expected `(name, shape)` sequence.
pub fn check_layout(entries: &[Entry], expected: &[(String, Vec<usize>)]) -> Result<(), ContainerError> {
    for (i, (name, shape)) in expected.iter().enumerate() {
        let Some(e) = entries.get(i) else {
            return Err(ContainerError::MissingEntry(name.clone()));
        };
        if &e.name != name {
            return Err(ContainerError::UnexpectedEntry {
                expected: name.clone(),
                found: e.name.clone(),
            });
        }
        if &e.shape != shape {
            return Err(ContainerError::EntryShape {
                name: name.clone(),
                expected: shape.clone(),
                actual: e.shape.clone(),
            });
        }
    }
    if let Some(extra) = entries.get(expected.len()) {
        return Err(ContainerError::ExtraEntry(extra.name.clone()));
    }
    Ok(())
}

pub fn push_f32s(blob: &mut Vec<u8>, values: &[f32]) {
    blob.reserve(values.len() * 4);
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

/// Values of one validated entry.
pub fn read_f32s(blob: &[u8], entry: &Entry) -> Vec<f32> {
    let start = entry.offset as usize;
    blob[start..start + entry.byte_len() as usize]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = encode(b"{}", &[1, 2, 3, 4]);
        assert_eq!(&bytes[..4], b"PLF1");
        assert_eq!(&bytes[4..12], &2u64.to_le_bytes());
        assert_eq!(&bytes[12..14], b"{}");
        let (m, b) = decode(&bytes).unwrap();
        assert_eq!((m, b), (&b"{}"[..], &[1u8, 2, 3, 4][..]));
    }

    #[test]
    fn rejects_bad_magic_and_short_headers() {
        assert!(matches!(decode(b"PLF2aaaaaaaa"), Err(ContainerError::BadMagic)));
        assert!(matches!(decode(b"PLF1\x05"), Err(ContainerError::TruncatedHeader)));
        let mut bytes = encode(b"{\"a\":1}", &[]);
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode(&bytes), Err(ContainerError::TruncatedHeader)));
    }

    #[test]
    fn entry_validation() {
        let entries = layout_entries([("a", &[2, 3][..]), ("b", &[4][..])]);
        assert_eq!(entries[1].offset, 24);
        validate_entries(&entries, 40).unwrap();
        assert!(matches!(validate_entries(&entries, 39), Err(ContainerError::TruncatedEntry(n)) if n == "b"));
        assert!(matches!(validate_entries(&entries, 44), Err(ContainerError::BlobLength { .. })));
        let mut overlapping = entries.clone();
        overlapping[1].offset = 20;
        assert!(matches!(validate_entries(&overlapping, 40), Err(ContainerError::Overlap(n)) if n == "b"));
    }

    #[test]
    fn version_check() {
        check_version(br#"{"format_version":1}"#).unwrap();
        assert!(matches!(
            check_version(br#"{"format_version":7}"#),
            Err(ContainerError::UnknownVersion(7))
        ));
    }
}
