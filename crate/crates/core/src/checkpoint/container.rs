//! The `UMTK` tensor container.
//!
//! ```text
//! "UMTK" | version: u16 LE | header_len: u32 LE | header JSON (space padded) | payload
//! ```
//!
//! The header is padded so the payload starts on an 8-byte boundary.
//! Dense tensors are row-major `f64` LE. Sparse tensors are `(u64 index,
//! f64 value)` pairs in increasing index order. The header records a
//! SHA-256 over its own canonical form (with the checksum blanked)
//! followed by the payload.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FormatError, Result};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"UMTK";
pub const VERSION: u16 = 1;
const PREAMBLE: usize = 4 + 2 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub data: Matrix,
    /// Store only the non-zero entries.
    pub sparse: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<NamedTensor>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    sparse: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nnz: Option<u64>,
}

impl TensorEntry {
    fn byte_len(&self) -> Option<u64> {
        if self.sparse {
            self.nnz?.checked_mul(16)
        } else {
            (self.rows as u64).checked_mul(self.cols as u64)?.checked_mul(8)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<TensorEntry>,
    payload_len: u64,
    metadata: BTreeMap<String, String>,
    checksum: String,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, data: Matrix) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            data,
            sparse: false,
        });
    }

    pub fn push_sparse(&mut self, name: impl Into<String>, data: Matrix) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            data,
            sparse: true,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Remove and return a tensor.
    pub fn take(&mut self, name: &str) -> Option<Matrix> {
        let pos = self.tensors.iter().position(|t| t.name == name)?;
        Some(self.tensors.remove(pos).data)
    }

    pub fn require(&mut self, name: &str) -> Result<Matrix> {
        self.take(name)
            .ok_or_else(|| FormatError::MissingTensor(name.to_string()).into())
    }
}

fn digest(header: &Header, payload: &[u8]) -> String {
    let mut blank = header.clone();
    blank.checksum.clear();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&blank).expect("header serializes"));
    h.update(payload);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(container: &Container) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(container.tensors.len());
    for t in &container.tensors {
        let offset = payload.len() as u64;
        let (rows, cols) = t.data.shape();
        let nnz = if t.sparse {
            let mut count = 0u64;
            for (idx, &v) in t.data.as_slice().iter().enumerate() {
                if v.to_bits() != 0 {
                    payload.extend_from_slice(&(idx as u64).to_le_bytes());
                    payload.extend_from_slice(&v.to_le_bytes());
                    count += 1;
                }
            }
            Some(count)
        } else {
            for v in t.data.as_slice() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            None
        };
        entries.push(TensorEntry {
            name: t.name.clone(),
            rows,
            cols,
            offset,
            sparse: t.sparse,
            nnz,
        });
    }
    let mut header = Header {
        tensors: entries,
        payload_len: payload.len() as u64,
        metadata: container.metadata.clone(),
        checksum: String::new(),
    };
    header.checksum = digest(&header, &payload);
    let mut json = serde_json::to_vec(&header)?;
    while !(PREAMBLE + json.len()).is_multiple_of(8) {
        json.push(b' ');
    }
    let header_len = u32::try_from(json.len())
        .map_err(|_| FormatError::Header("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated(format!("{} bytes, no magic", bytes.len())).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    if bytes.len() < PREAMBLE {
        return Err(FormatError::Truncated("preamble incomplete".into()).into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("length checked")) as usize;
    let payload_start = PREAMBLE
        .checked_add(header_len)
        .ok_or_else(|| FormatError::Header("header length overflows".into()))?;
    if bytes.len() < payload_start {
        return Err(FormatError::Truncated(format!(
            "header declares {header_len} bytes, only {} present",
            bytes.len() - PREAMBLE
        ))
        .into());
    }
    if payload_start % 8 != 0 {
        return Err(FormatError::Header("payload is not 8-byte aligned".into()).into());
    }
    let header_text = std::str::from_utf8(&bytes[PREAMBLE..payload_start])
        .map_err(|e| FormatError::Header(format!("header is not UTF-8: {e}")))?;
    let header: Header =
        serde_json::from_str(header_text).map_err(|e| FormatError::Header(e.to_string()))?;

    let payload = &bytes[payload_start..];
    let declared = usize::try_from(header.payload_len)
        .map_err(|_| FormatError::Bounds("payload length exceeds address space".into()))?;
    if payload.len() < declared {
        return Err(FormatError::Truncated(format!(
            "payload declares {declared} bytes, only {} present",
            payload.len()
        ))
        .into());
    }
    if payload.len() > declared {
        return Err(FormatError::TrailingData(payload.len() - declared).into());
    }
    check_layout(&header)?;
    if digest(&header, payload) != header.checksum {
        return Err(FormatError::Checksum.into());
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let start = e.offset as usize;
        let len = e.byte_len().expect("checked by layout") as usize;
        let bytes = &payload[start..start + len];
        let words = bytes.chunks_exact(8).map(|c| c.try_into().expect("8-byte chunk"));
        let data = if e.sparse {
            let mut dense = vec![0.0; e.rows * e.cols];
            let mut last: Option<u64> = None;
            let mut it = words;
            while let (Some(idx), Some(val)) = (it.next(), it.next()) {
                let idx = u64::from_le_bytes(idx);
                if idx >= dense.len() as u64 || last.is_some_and(|l| idx <= l) {
                    return Err(FormatError::Bounds(format!(
                        "sparse tensor `{}` has out-of-order or out-of-range index {idx}",
                        e.name
                    ))
                    .into());
                }
                last = Some(idx);
                dense[idx as usize] = f64::from_le_bytes(val);
            }
            dense
        } else {
            words.map(f64::from_le_bytes).collect()
        };
        tensors.push(NamedTensor {
            name: e.name.clone(),
            data: Matrix::from_vec(e.rows, e.cols, data)
                .map_err(|err| FormatError::Header(err.to_string()))?,
            sparse: e.sparse,
        });
    }
    Ok(Container {
        tensors,
        metadata: header.metadata,
    })
}

/// Every range aligned, inside the payload and disjoint; names unique.
fn check_layout(header: &Header) -> Result<()> {
    let mut ranges = Vec::with_capacity(header.tensors.len());
    let mut names = std::collections::BTreeSet::new();
    for e in &header.tensors {
        if !names.insert(e.name.as_str()) {
            return Err(FormatError::Header(format!("duplicate tensor `{}`", e.name)).into());
        }
        if e.rows == 0 || e.cols == 0 {
            return Err(FormatError::Header(format!("tensor `{}` has a zero dimension", e.name)).into());
        }
        if e.sparse != e.nnz.is_some() {
            return Err(FormatError::Header(format!("tensor `{}` has an inconsistent sparse flag", e.name)).into());
        }
        if e.nnz.is_some_and(|nnz| nnz > (e.rows as u64).saturating_mul(e.cols as u64)) {
            return Err(FormatError::Bounds(format!("tensor `{}` has more entries than cells", e.name)).into());
        }
        let len = e
            .byte_len()
            .ok_or_else(|| FormatError::Bounds(format!("tensor `{}` size overflows", e.name)))?;
        let end = e
            .offset
            .checked_add(len)
            .ok_or_else(|| FormatError::Bounds(format!("tensor `{}` range overflows", e.name)))?;
        if e.offset % 8 != 0 {
            return Err(FormatError::Bounds(format!("tensor `{}` offset {} is unaligned", e.name, e.offset)).into());
        }
        if end > header.payload_len {
            return Err(FormatError::Bounds(format!(
                "tensor `{}` spans [{}, {end}) beyond payload of {} bytes",
                e.name, e.offset, header.payload_len
            ))
            .into());
        }
        ranges.push((e.offset, end, e.name.as_str()));
    }
    ranges.sort();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(FormatError::Bounds(format!(
                "tensors `{}` and `{}` overlap",
                pair[0].2, pair[1].2
            ))
            .into());
        }
    }
    Ok(())
}
