//! Teacher distillation records in the `TDR1` container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic        b"TDR1"
//! kind         u32   0 = mlm, 1 = task
//! n_outputs    u32   vocabulary size (mlm) or class count (task)
//! k            u32   maximum support size per record
//! mask_seed    u64
//! mask_frac    f32
//! temperature  f32   temperature the teacher softmax was taken at
//! count        u64
//! count x record:
//!   key_a      u64   corpus line (mlm) or example row (task)
//!   key_b      u64   token position, u64::MAX for none
//!   k'         u32   support size, 1 <= k' <= k
//!   k' x (id u32, prob f32)
//! crc32        u32   over every preceding byte
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::training::TeacherDist;

pub const MAGIC: &[u8; 4] = b"TDR1";
pub const DEFAULT_TOP_K: u32 = 128;
const NO_POSITION: u64 = u64::MAX;
/// Largest accepted mass before renormalization.
pub const MAX_MASS: f64 = 1.0 + 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Mlm,
    Task,
}

impl RecordKind {
    fn code(self) -> u32 {
        match self {
            RecordKind::Mlm => 0,
            RecordKind::Task => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(RecordKind::Mlm),
            1 => Ok(RecordKind::Task),
            other => Err(Error::data(format!("unknown TDR1 record kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteKey {
    pub example: u64,
    pub position: Option<u64>,
}

impl SiteKey {
    pub fn masked(line: u64, position: u64) -> Self {
        Self {
            example: line,
            position: Some(position),
        }
    }

    pub fn example(row: u64) -> Self {
        Self {
            example: row,
            position: None,
        }
    }
}

impl std::fmt::Display for SiteKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.position {
            Some(p) => write!(f, "(line {}, position {p})", self.example),
            None => write!(f, "(example {})", self.example),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdrHeader {
    pub kind: RecordKind,
    pub n_outputs: u32,
    pub k: u32,
    pub mask_seed: u64,
    pub mask_fraction: f32,
    pub temperature: f32,
}

/// A record as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub key: SiteKey,
    pub support: Vec<u32>,
    pub probs: Vec<f32>,
}

/// A loaded record: `probs` renormalized to sum to one, `raw` as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillationRecord {
    pub key: SiteKey,
    pub support: Vec<u32>,
    pub probs: Vec<f64>,
    pub raw: Vec<f32>,
}

impl DistillationRecord {
    pub fn to_teacher<T: Real>(&self) -> TeacherDist<T> {
        TeacherDist {
            support: self.support.clone(),
            probs: self.probs.iter().map(|&p| T::from_f64_lossy(p)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecordStore {
    pub header: TdrHeader,
    records: HashMap<SiteKey, DistillationRecord>,
}

impl RecordStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records sorted by key.
    pub fn sorted(&self) -> Vec<&DistillationRecord> {
        let mut v: Vec<_> = self.records.values().collect();
        v.sort_by_key(|r| r.key);
        v
    }
}

/// Exact-key lookup; absence is for the caller to interpret.
pub fn lookup_record(store: &RecordStore, key: SiteKey) -> Option<&DistillationRecord> {
    store.records.get(&key)
}

pub fn encode_records(header: &TdrHeader, records: &[RawRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&header.kind.code().to_le_bytes());
    buf.extend_from_slice(&header.n_outputs.to_le_bytes());
    buf.extend_from_slice(&header.k.to_le_bytes());
    buf.extend_from_slice(&header.mask_seed.to_le_bytes());
    buf.extend_from_slice(&header.mask_fraction.to_le_bytes());
    buf.extend_from_slice(&header.temperature.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        if r.support.len() != r.probs.len() {
            return Err(Error::structural(format!(
                "record {} has {} ids but {} probabilities",
                r.key,
                r.support.len(),
                r.probs.len()
            )));
        }
        buf.extend_from_slice(&r.key.example.to_le_bytes());
        buf.extend_from_slice(&r.key.position.unwrap_or(NO_POSITION).to_le_bytes());
        buf.extend_from_slice(&(r.support.len() as u32).to_le_bytes());
        for (&id, &p) in r.support.iter().zip(&r.probs) {
            buf.extend_from_slice(&id.to_le_bytes());
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Writes through a temporary file and a rename.
pub fn write_records(path: &Path, header: &TdrHeader, records: &[RawRecord]) -> Result<()> {
    let bytes = encode_records(header, records)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::data(format!("TDR1 truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Reads header and records without semantic validation beyond framing.
pub fn decode_raw(bytes: &[u8]) -> Result<(TdrHeader, Vec<RawRecord>)> {
    if bytes.len() < 4 + 4 || &bytes[..4] != MAGIC {
        return Err(Error::data("not a TDR1 file (bad magic)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::data(format!(
            "TDR1 checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut c = Cursor { buf: body, at: 4 };
    let header = TdrHeader {
        kind: RecordKind::from_code(c.u32()?)?,
        n_outputs: c.u32()?,
        k: c.u32()?,
        mask_seed: c.u64()?,
        mask_fraction: c.f32()?,
        temperature: c.f32()?,
    };
    let count = c.u64()?;
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let example = c.u64()?;
        let pos = c.u64()?;
        let key = SiteKey {
            example,
            position: (pos != NO_POSITION).then_some(pos),
        };
        let k = c.u32()?;
        if k == 0 || k > header.k {
            return Err(Error::data(format!(
                "record {i} {key}: support size {k} outside 1..={}",
                header.k
            )));
        }
        let mut support = Vec::with_capacity(k as usize);
        let mut probs = Vec::with_capacity(k as usize);
        for _ in 0..k {
            support.push(c.u32()?);
            probs.push(c.f32()?);
        }
        records.push(RawRecord { key, support, probs });
    }
    if c.at != body.len() {
        return Err(Error::data(format!(
            "TDR1 has {} trailing bytes after {count} records",
            body.len() - c.at
        )));
    }
    Ok((header, records))
}

fn validate(header: &TdrHeader, r: &RawRecord, index: usize) -> Result<Vec<f64>> {
    let at = || format!("record {index} {}", r.key);
    let mut seen = HashSet::with_capacity(r.support.len());
    for &id in &r.support {
        if id >= header.n_outputs {
            return Err(Error::data(format!("{}: id {id} out of range for {} outputs", at(), header.n_outputs)));
        }
        if !seen.insert(id) {
            return Err(Error::data(format!("{}: duplicate support id {id}", at())));
        }
    }
    if let Some(p) = r.probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::data(format!("{}: probability {p} is not positive", at())));
    }
    let mass: f64 = r.probs.iter().map(|&p| p as f64).sum();
    if mass > MAX_MASS {
        return Err(Error::data(format!("{}: probabilities sum to {mass} > 1", at())));
    }
    Ok(r.probs.iter().map(|&p| p as f64 / mass).collect())
}

pub fn parse_records(bytes: &[u8], expected: RecordKind) -> Result<RecordStore> {
    let (header, raw) = decode_raw(bytes)?;
    if header.kind != expected {
        return Err(Error::data(format!(
            "TDR1 file holds {:?} records, expected {expected:?}",
            header.kind
        )));
    }
    if !(header.temperature > 0.0) {
        return Err(Error::data(format!("TDR1 temperature {} is not positive", header.temperature)));
    }
    let mut records = HashMap::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        match (expected, r.key.position) {
            (RecordKind::Mlm, None) => {
                return Err(Error::data(format!("record {i} {}: MLM record without a position", r.key)))
            }
            (RecordKind::Task, Some(_)) => {
                return Err(Error::data(format!("record {i} {}: task record with a position", r.key)))
            }
            _ => {}
        }
        let probs = validate(&header, &r, i)?;
        let rec = DistillationRecord {
            key: r.key,
            support: r.support,
            probs,
            raw: r.probs,
        };
        if records.insert(rec.key, rec).is_some() {
            return Err(Error::data(format!("record {i}: duplicate site key {}", r.key)));
        }
    }
    Ok(RecordStore { header, records })
}

pub fn load_records(path: &Path, expected: RecordKind) -> Result<RecordStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, expected).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
