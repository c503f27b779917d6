//! The `LDET` tensor container.
//!
//! ```text
//! "LDET" | version u16 | count u32 |
//!   { name_len u16 | name | role u8 | dtype u8 | ndim u8 | dims u32… | payload f32… | crc u32 }…
//! | file crc u32
//! ```
//!
//! All integers little-endian. The entry CRC covers the entry bytes from
//! `name_len` through the payload; the file CRC covers everything before it.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"LDET";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 2 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EntryRole {
    Base = 0,
    LoraA = 1,
    LoraB = 2,
    FullReplace = 3,
}

impl EntryRole {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => EntryRole::Base,
            1 => EntryRole::LoraA,
            2 => EntryRole::LoraB,
            3 => EntryRole::FullReplace,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub role: EntryRole,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveEntry {
    pub fn new(name: impl Into<String>, role: EntryRole, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name length {} out of range", name.len())));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format(format!("dims {dims:?} not representable")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "archive entry",
                format!("'{name}': dims {dims:?} do not match {} values", data.len()),
            ));
        }
        Ok(Self { name, role, dims, data })
    }

    /// 2-D entry from a matrix, rounded to f32.
    pub fn from_matrix(name: impl Into<String>, role: EntryRole, m: &Matrix) -> Result<Self> {
        Self::new(
            name,
            role,
            vec![m.rows(), m.cols()],
            m.data().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let (rows, cols) = match self.dims.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => {
                return Err(Error::shape(
                    "archive entry",
                    format!("'{}' has {} dims, expected 1 or 2", self.name, self.dims.len()),
                ))
            }
        };
        Matrix::new(rows, cols, self.data.iter().map(|&v| f64::from(v)).collect())
    }

    fn encoded_len(&self) -> usize {
        2 + self.name.len() + 3 + 4 * self.dims.len() + 4 * self.data.len() + 4
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&(self.name.len() as u16).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.role as u8);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
}

/// Why an archive failed verification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IntegrityReport {
    Header(String),
    /// Entry bytes do not match their checksum.
    Entry { index: usize, name: String },
    /// The byte stream ends early or contains an impossible field.
    Structure(String),
    FileChecksum { stored: u32, computed: u32 },
}

impl fmt::Display for IntegrityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntegrityReport::Header(d) => write!(f, "bad header: {d}"),
            IntegrityReport::Entry { index, name } => write!(f, "entry {index} ('{name}') fails its CRC32"),
            IntegrityReport::Structure(d) => write!(f, "whole-file failure: {d}"),
            IntegrityReport::FileChecksum { stored, computed } => write!(
                f,
                "whole-file failure: CRC32 stored {stored:08x}, computed {computed:08x}"
            ),
        }
    }
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> std::result::Result<&'b [u8], IntegrityReport> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            IntegrityReport::Structure(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, IntegrityReport> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, IntegrityReport> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, IntegrityReport> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<Vec<ArchiveEntry>, IntegrityReport> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(IntegrityReport::Structure(format!("{} bytes is shorter than an empty archive", bytes.len())));
    }
    let body = &bytes[..bytes.len() - 4];
    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(IntegrityReport::Header("magic is not LDET".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(IntegrityReport::Header(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let start = cur.pos;
        let name_len = cur.u16()? as usize;
        let name_bytes = cur.take(name_len)?;
        let name = String::from_utf8_lossy(name_bytes).into_owned();
        let role = cur.u8()?;
        let dtype = cur.u8()?;
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| IntegrityReport::Structure(format!("entry {index} dims overflow")))?;
        let payload = cur.take(numel)?;
        let covered = &body[start..cur.pos];
        let stored = cur.u32()?;
        if crc32fast::hash(covered) != stored {
            return Err(IntegrityReport::Entry { index, name });
        }
        let role = EntryRole::from_u8(role)
            .ok_or_else(|| IntegrityReport::Structure(format!("entry '{name}' has unknown role {role}")))?;
        if dtype != DTYPE_F32 {
            return Err(IntegrityReport::Structure(format!("entry '{name}' has unknown dtype {dtype}")));
        }
        if std::str::from_utf8(name_bytes).is_err() {
            return Err(IntegrityReport::Structure(format!("entry {index} name is not UTF-8")));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(ArchiveEntry { name, role, dims, data });
    }
    if cur.pos != body.len() {
        return Err(IntegrityReport::Structure(format!(
            "{} trailing bytes after the last entry",
            body.len() - cur.pos
        )));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(IntegrityReport::FileChecksum { stored, computed });
    }
    Ok(entries)
}

/// Checks magic, version, every entry CRC and the file CRC; the first failure wins.
pub fn verify_archive(bytes: &[u8]) -> std::result::Result<(), IntegrityReport> {
    parse(bytes).map(|_| ())
}

/// Ordered, uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<ArchiveEntry>,
    index: HashMap<String, usize>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: ArchiveEntry) -> Result<()> {
        if self.index.contains_key(&entry.name) {
            return Err(Error::Format(format!("duplicate entry name '{}'", entry.name)));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Serialized size without serializing.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.entries.iter().map(ArchiveEntry::encoded_len).sum::<usize>() + 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            e.encode(&mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = parse(bytes).map_err(|r| Error::Integrity(r.to_string()))?;
        let mut archive = Self::new();
        for e in entries {
            archive.push(e)?;
        }
        Ok(archive)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let file_name = path
            .file_name()
            .ok_or_else(|| Error::Argument(format!("'{}' is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(d) => Error::Integrity(format!("{}: {d}", path.display())),
            other => other,
        })
    }
}
