//! Manifest-plus-payload container shared by datasets, checkpoints and
//! reports.
//!
//! ```text
//! sounderfeit-<kind>
//! version: 1
//! key: value
//! ...
//! sha256: <hex digest of payload>
//! end
//! <payload bytes>
//! ```

use std::fmt::Display;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;
const END_MARKER: &str = "end";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("expected a `{expected}` file, found `{found}`")]
    WrongKind { expected: String, found: String },
    #[error("unsupported format version {found} (this build reads version {FORMAT_VERSION})")]
    Version { found: String },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("missing manifest key `{0}`")]
    MissingKey(String),
    #[error("bad value for `{key}`: {value}")]
    BadValue { key: String, value: String },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("payload digest mismatch")]
    DigestMismatch,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let value = value.to_string();
        debug_assert!(!value.contains('\n') && !key.contains(':'));
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, FormatError> {
        self.get(key)
            .ok_or_else(|| FormatError::MissingKey(key.to_string()))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, FormatError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| FormatError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
        })
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, FormatError> {
        let v = self.require(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| FormatError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes a manifest and payload. `version` and `sha256` are filled in.
pub fn encode(kind: &str, manifest: &Manifest, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 512);
    out.extend_from_slice(format!("sounderfeit-{kind}\nversion: {FORMAT_VERSION}\n").as_bytes());
    for (k, v) in manifest.entries() {
        if k == "version" || k == "sha256" {
            continue;
        }
        out.extend_from_slice(format!("{k}: {v}\n").as_bytes());
    }
    out.extend_from_slice(format!("sha256: {}\n{END_MARKER}\n", sha256_hex(payload)).as_bytes());
    out.extend_from_slice(payload);
    out
}

/// Parses and verifies a container, returning the manifest and the payload.
/// `expected_len` is the payload size implied by the manifest.
pub fn decode(
    kind: &str,
    bytes: &[u8],
    expected_len: impl FnOnce(&Manifest) -> Result<usize, FormatError>,
) -> Result<(Manifest, Vec<u8>), FormatError> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String, FormatError> {
        let rest = &bytes[*pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| FormatError::Malformed("unterminated manifest".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| FormatError::Malformed("manifest is not UTF-8".into()))?
            .to_string();
        *pos += nl + 1;
        Ok(line)
    };

    let header = next_line(&mut pos)?;
    let expected_header = format!("sounderfeit-{kind}");
    if header != expected_header {
        return Err(FormatError::WrongKind {
            expected: expected_header,
            found: header,
        });
    }
    let mut manifest = Manifest::new();
    loop {
        let line = next_line(&mut pos)?;
        if line == END_MARKER {
            break;
        }
        let (k, v) = line
            .split_once(": ")
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| FormatError::Malformed(format!("line `{line}`")))?;
        manifest.entries.push((k.trim().to_string(), v.trim().to_string()));
        if k.trim() == "version" && v.trim() != FORMAT_VERSION.to_string() {
            return Err(FormatError::Version {
                found: v.trim().to_string(),
            });
        }
    }
    manifest.require("version")?;
    let payload = &bytes[pos..];
    let expected = expected_len(&manifest)?;
    if payload.len() != expected {
        return Err(FormatError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if sha256_hex(payload) != manifest.require("sha256")? {
        return Err(FormatError::DigestMismatch);
    }
    Ok((manifest, payload.to_vec()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Little-endian f32 writer.
#[derive(Debug, Default)]
pub struct F32Writer(pub Vec<u8>);

impl F32Writer {
    pub fn push(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn extend<'a>(&mut self, vs: impl IntoIterator<Item = &'a f32>) {
        for v in vs {
            self.push(*v);
        }
    }
}

/// Little-endian f32 reader over a verified payload.
#[derive(Debug)]
pub struct F32Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> F32Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let end = self.pos + 4 * n;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let out = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.pos = end;
        Ok(out)
    }
}
