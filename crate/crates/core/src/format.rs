//! Binary container shared by checkpoints, utterance payloads, synthesized
//! mel files and embedding caches.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset       | size         | content                                  |
//! |--------------|--------------|------------------------------------------|
//! | 0            | 4            | magic `MOAT`                             |
//! | 4            | 4            | format version, `u32`, currently 1       |
//! | 8            | 8            | header length `H` in bytes, `u64`        |
//! | 16           | `H`          | UTF-8 JSON header                        |
//! | 16 + `H`     | 8 per value  | payload, `f64` values                    |
//!
//! The header is `{"kind": str, "meta": any, "sections": [{"name", "shape"}]}`.
//! Sections are laid out back to back in the payload in header order, each
//! row-major; the payload must contain exactly the declared number of values.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MOAT";
pub const VERSION: u32 = 1;
const PREFIX: usize = 16;
/// Upper bound on the JSON header; larger values are rejected before allocation.
pub const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(default)]
    meta: Value,
    sections: Vec<SectionHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensor: Tensor,
}

/// Decoded container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.sections.push(Section {
            name: name.into(),
            tensor,
        });
    }

    pub fn section(&self, name: &str) -> Result<&Tensor> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.tensor)
            .ok_or_else(|| Error::Format(format!("{} file has no section '{name}'", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind} file, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            sections: self
                .sections
                .iter()
                .map(|s| SectionHeader {
                    name: s.name.clone(),
                    shape: s.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let values: usize = self.sections.iter().map(|s| s.tensor.numel()).sum();
        let mut out = Vec::with_capacity(PREFIX + json.len() + values * 8);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in &self.sections {
            for v in s.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses untrusted bytes. Never panics; every structural problem is a
    /// [`Error::Format`].
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX {
            return Err(Error::Format("truncated prefix".into()));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_BYTES || header_len > (bytes.len() - PREFIX) as u64 {
            return Err(Error::Format(format!("header length {header_len} out of range")));
        }
        let header_end = PREFIX + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[PREFIX..header_end])
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        if !payload.len().is_multiple_of(8) {
            return Err(Error::Format("payload is not a whole number of f64".into()));
        }
        let available = payload.len() / 8;

        let mut seen = HashSet::new();
        let mut needed = 0usize;
        for s in &header.sections {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Format(format!("duplicate section '{}'", s.name)));
            }
            if s.shape.is_empty() || s.shape.contains(&0) {
                return Err(Error::Format(format!("section '{}' has empty shape", s.name)));
            }
            let numel = s
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("section '{}' shape overflows", s.name)))?;
            needed = needed
                .checked_add(numel)
                .ok_or_else(|| Error::Format("payload size overflows".into()))?;
            if needed > available {
                return Err(Error::Format(format!(
                    "payload holds {available} values, sections need more"
                )));
            }
        }
        if needed != available {
            return Err(Error::Format(format!(
                "payload holds {available} values, sections declare {needed}"
            )));
        }

        let mut sections = Vec::with_capacity(header.sections.len());
        let mut offset = 0;
        for s in header.sections {
            let numel: usize = s.shape.iter().product();
            let data = payload[offset * 8..(offset + numel) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += numel;
            sections.push(Section {
                name: s.name,
                tensor: Tensor::new(s.shape, data)?,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            sections,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// First line of every CSV artifact: `# provenance: <json>`.
pub fn provenance_header(provenance: &Value) -> String {
    format!("# provenance: {provenance}\n")
}

/// Splits a leading provenance line off `text`.
pub fn split_provenance(text: &str) -> Result<(Option<Value>, &str)> {
    match text.strip_prefix("# provenance: ") {
        Some(rest) => {
            let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
            Ok((Some(serde_json::from_str(line)?), body))
        }
        None => Ok((None, text)),
    }
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
