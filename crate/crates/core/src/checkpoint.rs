//! Binary checkpoint container for embedding tables and heads.
//!
//! ```text
//! magic      b"CMOW"
//! version    u32 (1)
//! kind       u32   0 cmow-uni, 1 cmow-bidi, 2 cbow, 3 hybrid-uni, 4 hybrid-bidi
//! d, d_vec, n_vocab, dirs   u32 each
//! precision  u32   0 = f32 values, 1 = f64 values
//! forward matrices, backward matrices (bidirectional only), vectors
//! n_sections u32, then per section: tag u32, byte length u64, payload
//!   tag 1  MLM head: in u32, out u32, weights, bias
//!   tag 2  classifier: variant u32 (0 linear, 1 mlp), layers u32,
//!          per layer: in u32, out u32, weights, bias
//!   tag 3  UTF-8 JSON metadata
//! crc32      u32 over every preceding byte
//! ```
//!
//! Values are little-endian; weights are row-major `out x in`.

use std::path::Path;

use crate::embeddings::{EmbeddingKind, EmbeddingTable};
use crate::error::{Error, Result};
use crate::heads::{Affine, ClassifierHead, HeadVariant, MlmHead};
use crate::linalg::{Precision, Real};

pub const MAGIC: &[u8; 4] = b"CMOW";
pub const VERSION: u32 = 1;
const TAG_MLM: u32 = 1;
const TAG_CLASSIFIER: u32 = 2;
const TAG_META: u32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub table: EmbeddingTable<T>,
    pub mlm_head: Option<MlmHead<T>>,
    pub classifier: Option<ClassifierHead<T>>,
    pub metadata: serde_json::Value,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(table: EmbeddingTable<T>) -> Self {
        Self {
            table,
            mlm_head: None,
            classifier: None,
            metadata: serde_json::Value::Null,
        }
    }
}

/// Header fields, per-section sizes and metadata of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub kind: EmbeddingKind,
    pub d: usize,
    pub d_vec: usize,
    pub n_vocab: usize,
    pub precision: Precision,
    pub embedding_parameters: usize,
    /// `(tag name, payload bytes, parameter count)`
    pub sections: Vec<(String, u64, usize)>,
    pub metadata: serde_json::Value,
}

fn precision_of<T: Real>() -> Precision {
    if std::mem::size_of::<T>() == 8 {
        Precision::Wide
    } else {
        Precision::Narrow
    }
}

struct Writer {
    buf: Vec<u8>,
    wide: bool,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn dim(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::structural(format!("dimension {v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    fn values<T: Real>(&mut self, xs: &[T]) {
        for &x in xs {
            if self.wide {
                self.buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
            } else {
                self.buf.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
            }
        }
    }

    fn affine<T: Real>(&mut self, a: &Affine<T>) -> Result<()> {
        self.dim(a.in_dim)?;
        self.dim(a.out_dim)?;
        self.values(&a.weight);
        self.values(&a.bias);
        Ok(())
    }

    fn section(&mut self, tag: u32, body: impl FnOnce(&mut Writer) -> Result<()>) -> Result<()> {
        let mut inner = Writer {
            buf: Vec::new(),
            wide: self.wide,
        };
        body(&mut inner)?;
        self.u32(tag);
        self.u64(inner.buf.len() as u64);
        self.buf.extend_from_slice(&inner.buf);
        Ok(())
    }
}

pub fn encode_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let precision = precision_of::<T>();
    let mut w = Writer {
        buf: Vec::new(),
        wide: precision == Precision::Wide,
    };
    let t = &ck.table;
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(t.kind().code());
    w.dim(t.d())?;
    w.dim(t.d_vec())?;
    w.dim(t.n_vocab())?;
    w.dim(t.kind().dirs())?;
    w.u32(match precision {
        Precision::Narrow => 0,
        Precision::Wide => 1,
    });
    w.values(t.forward_block());
    w.values(t.backward_block());
    w.values(t.vector_block());
    let n_sections = [ck.mlm_head.is_some(), ck.classifier.is_some(), !ck.metadata.is_null()]
        .iter()
        .filter(|&&b| b)
        .count();
    w.u32(n_sections as u32);
    if let Some(h) = &ck.mlm_head {
        w.section(TAG_MLM, |s| s.affine(&h.proj))?;
    }
    if let Some(c) = &ck.classifier {
        w.section(TAG_CLASSIFIER, |s| {
            s.u32(match c.variant {
                HeadVariant::Linear => 0,
                HeadVariant::Mlp => 1,
            });
            s.dim(c.layers.len())?;
            c.layers.iter().try_for_each(|l| s.affine(l))
        })?;
    }
    if !ck.metadata.is_null() {
        let json = serde_json::to_vec(&ck.metadata).map_err(|e| Error::data(format!("metadata: {e}")))?;
        w.section(TAG_META, |s| {
            s.buf.extend_from_slice(&json);
            Ok(())
        })?;
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    wide: bool,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.at {
            return Err(Error::data(format!("checkpoint truncated at byte {}", self.at)));
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

    fn values<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let width = if self.wide { 8 } else { 4 };
        let bytes = self.take(n.checked_mul(width).ok_or_else(|| Error::data("checkpoint size overflow"))?)?;
        Ok(bytes
            .chunks_exact(width)
            .map(|c| {
                let v = if self.wide {
                    f64::from_le_bytes(c.try_into().expect("8 bytes"))
                } else {
                    f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                };
                T::from_f64_lossy(v)
            })
            .collect())
    }

    fn affine<T: Real>(&mut self) -> Result<Affine<T>> {
        let in_dim = self.u32()? as usize;
        let out_dim = self.u32()? as usize;
        let weight = self.values(in_dim * out_dim)?;
        let bias = self.values(out_dim)?;
        Ok(Affine {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }
}

struct Header {
    kind: EmbeddingKind,
    d: usize,
    d_vec: usize,
    n_vocab: usize,
    precision: Precision,
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    if r.take(4)? != MAGIC {
        return Err(Error::data("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let kind = EmbeddingKind::from_code(r.u32()?).map_err(|e| Error::data(e.to_string()))?;
    let d = r.u32()? as usize;
    let d_vec = r.u32()? as usize;
    let n_vocab = r.u32()? as usize;
    let dirs = r.u32()? as usize;
    if dirs != kind.dirs() {
        return Err(Error::data(format!("checkpoint declares {dirs} directions for {kind}")));
    }
    let precision = match r.u32()? {
        0 => Precision::Narrow,
        1 => Precision::Wide,
        p => return Err(Error::data(format!("unknown checkpoint precision code {p}"))),
    };
    r.wide = precision == Precision::Wide;
    Ok(Header {
        kind,
        d,
        d_vec,
        n_vocab,
        precision,
    })
}

fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 8 {
        return Err(Error::data("checkpoint too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if stored != crc32fast::hash(body) {
        return Err(Error::data("checkpoint checksum mismatch"));
    }
    Ok(body)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    decode_inner(bytes).map(|(ck, _, _)| ck)
}

fn decode_inner<T: Real>(bytes: &[u8]) -> Result<(Checkpoint<T>, Header, Vec<(u32, u64)>)> {
    let body = verify_crc(bytes)?;
    let mut r = Reader {
        buf: body,
        at: 0,
        wide: false,
    };
    let h = read_header(&mut r)?;
    let dd = h.d * h.d;
    let fw_len = if h.kind.has_matrices() { h.n_vocab * dd } else { 0 };
    let bw_len = if h.kind.is_bidirectional() { h.n_vocab * dd } else { 0 };
    let vec_len = if h.kind.has_vectors() { h.n_vocab * h.d_vec } else { 0 };
    let forward = r.values(fw_len)?;
    let backward = r.values(bw_len)?;
    let vectors = r.values(vec_len)?;
    let table = EmbeddingTable::from_blocks(h.kind, h.d, h.d_vec, h.n_vocab, forward, backward, vectors)
        .map_err(|e| Error::data(e.to_string()))?;
    let mut ck = Checkpoint::new(table);
    let n_sections = r.u32()?;
    let mut sections = Vec::new();
    for _ in 0..n_sections {
        let tag = r.u32()?;
        let len = r.u64()? as usize;
        sections.push((tag, len as u64));
        let end = r.at.checked_add(len).filter(|&e| e <= body.len());
        let end = end.ok_or_else(|| Error::data(format!("section {tag} overruns the file")))?;
        match tag {
            TAG_MLM => {
                ck.mlm_head = Some(MlmHead { proj: r.affine()? });
            }
            TAG_CLASSIFIER => {
                let variant = match r.u32()? {
                    0 => HeadVariant::Linear,
                    1 => HeadVariant::Mlp,
                    v => return Err(Error::data(format!("unknown classifier variant {v}"))),
                };
                let n = r.u32()? as usize;
                let layers = (0..n).map(|_| r.affine()).collect::<Result<Vec<_>>>()?;
                ck.classifier = Some(ClassifierHead { variant, layers });
            }
            TAG_META => {
                ck.metadata = serde_json::from_slice(r.take(len)?)
                    .map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
            }
            // Unknown sections are skipped so newer writers stay readable.
            _ => {
                r.take(len)?;
            }
        }
        if r.at != end {
            return Err(Error::data(format!("section {tag} length does not match its contents")));
        }
    }
    if r.at != body.len() {
        return Err(Error::data("trailing bytes after checkpoint sections"));
    }
    Ok((ck, h, sections))
}

pub fn save_checkpoint<T: Real>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointInfo> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (ck, h, raw_sections) = decode_inner::<f64>(&bytes)?;
    let sections = raw_sections
        .into_iter()
        .map(|(tag, len)| match tag {
            TAG_MLM => ("mlm-head".to_string(), len, ck.mlm_head.as_ref().map_or(0, |m| m.parameter_count())),
            TAG_CLASSIFIER => {
                let c = ck.classifier.as_ref();
                let name = match c.map(|c| c.variant) {
                    Some(HeadVariant::Mlp) => "classifier-mlp",
                    _ => "classifier-linear",
                };
                (name.to_string(), len, c.map_or(0, |c| c.parameter_count()))
            }
            TAG_META => ("metadata".to_string(), len, 0),
            other => (format!("unknown-{other}"), len, 0),
        })
        .collect();
    Ok(CheckpointInfo {
        kind: h.kind,
        d: h.d,
        d_vec: h.d_vec,
        n_vocab: h.n_vocab,
        precision: h.precision,
        embedding_parameters: ck.table.parameter_count(),
        sections,
        metadata: ck.metadata,
    })
}
