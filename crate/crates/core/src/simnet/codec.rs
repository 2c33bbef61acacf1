//! Little-endian framed binary format shared by round messages, checkpoints
//! and dataset dumps.
//!
//! frame = "FMPD" | version u16 | kind u8 | payload length u64 | payload | crc32(payload)

use std::collections::BTreeMap;

use thiserror::Error;

use crate::anchorbank::AnchorBank;
use crate::fedcore::{MaskRow, PersonalizationMask};
use crate::numkit::Tensor;
use crate::synthdata::{ModalityId, Sample};
use crate::toymodel::{AdamState, Arch, Layer, ModelParams, ParamSet, Role, SiteModel};

pub const MAGIC: [u8; 4] = *b"FMPD";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 1 + 8;
const TRAILER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Broadcast = 1,
    Report = 2,
    Checkpoint = 3,
    Dataset = 4,
}

impl Kind {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => Kind::Broadcast,
            2 => Kind::Report,
            3 => Kind::Checkpoint,
            4 => Kind::Dataset,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("expected message kind {expected:?}, found {found:?}")]
    WrongKind { expected: Kind, found: Kind },
    #[error("truncated input: needed {needed} bytes, {available} available")]
    Truncated { needed: u64, available: u64 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after message")]
    TrailingBytes(u64),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

pub fn encode_frame(kind: Kind, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + payload.len() + TRAILER);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out
}

/// Validates the frame and returns its kind and payload.
pub fn decode_frame(bytes: &[u8]) -> Result<(Kind, &[u8]), DecodeError> {
    let avail = bytes.len() as u64;
    let need = |n: usize| DecodeError::Truncated {
        needed: n as u64,
        available: avail,
    };
    if bytes.len() < 4 {
        return Err(need(HEADER));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    if bytes.len() < HEADER {
        return Err(need(HEADER));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let kind = Kind::from_u8(bytes[6]).ok_or(DecodeError::UnknownKind(bytes[6]))?;
    let len = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes"));
    let total = (HEADER as u64)
        .checked_add(len)
        .and_then(|t| t.checked_add(TRAILER as u64))
        .ok_or(DecodeError::Truncated {
            needed: u64::MAX,
            available: avail,
        })?;
    if total > avail {
        return Err(DecodeError::Truncated {
            needed: total,
            available: avail,
        });
    }
    if total < avail {
        return Err(DecodeError::TrailingBytes(avail - total));
    }
    let end = HEADER + len as usize;
    let payload = &bytes[HEADER..end];
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(DecodeError::ChecksumMismatch { stored, computed });
    }
    Ok((kind, payload))
}

/// Decodes a frame of the expected kind with `body`, requiring the payload to be consumed exactly.
pub fn decode_as<T>(
    bytes: &[u8],
    expected: Kind,
    body: impl FnOnce(&mut Reader<'_>) -> Result<T, DecodeError>,
) -> Result<T, DecodeError> {
    let (kind, payload) = decode_frame(bytes)?;
    if kind != expected {
        return Err(DecodeError::WrongKind { expected, found: kind });
    }
    let mut r = Reader::new(payload);
    let value = body(&mut r)?;
    r.finish()?;
    Ok(value)
}

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.buf.extend_from_slice(b);
    }
    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    pub fn opt_f64(&mut self, v: Option<f64>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.f64(x);
            }
            None => self.u8(0),
        }
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u8(u8::try_from(t.rank()).expect("rank fits in u8"));
        for &e in t.shape() {
            self.len(e);
        }
        for &v in t.values() {
            self.f64(v);
        }
    }

    pub fn param_set(&mut self, p: &ParamSet) {
        match p.role {
            Role::Encoder(m) => {
                self.u8(0);
                self.u8(m.0);
            }
            Role::Decoder => self.u8(1),
            Role::Lacca => self.u8(2),
        }
        self.len(p.layers.len());
        for l in &p.layers {
            self.str(&l.name);
            self.tensor(&l.weight);
            match &l.bias {
                Some(b) => {
                    self.u8(1);
                    self.tensor(b);
                }
                None => self.u8(0),
            }
        }
    }

    pub fn encoders(&mut self, e: &BTreeMap<ModalityId, ParamSet>) {
        self.len(e.len());
        for p in e.values() {
            self.param_set(p);
        }
    }

    pub fn model_params(&mut self, p: &ModelParams) {
        self.encoders(&p.encoders);
        self.param_set(&p.decoder);
        self.param_set(&p.lacca);
    }

    pub fn arch(&mut self, a: &Arch) {
        self.len(a.n_modalities);
        self.len(a.n_classes);
        self.len(a.channels.len());
        for &c in &a.channels {
            self.len(c);
        }
        self.len(a.n_heads);
    }

    pub fn site_model(&mut self, m: &SiteModel) {
        self.arch(&m.arch);
        self.model_params(&m.params);
        self.model_params(&m.adam.m);
        self.model_params(&m.adam.v);
        self.u64(m.adam.step);
    }

    /// Per level: rows (N_k·N_c) u32, width u32, values.
    pub fn anchors(&mut self, b: &AnchorBank) {
        self.len(b.levels.len());
        if b.levels.is_empty() {
            return;
        }
        self.len(b.n_classes);
        self.len(b.per_class);
        for &s in &b.stale {
            self.u8(u8::from(s));
        }
        for t in &b.levels {
            self.len(t.rows());
            self.len(t.cols());
            for &v in t.values() {
                self.f64(v);
            }
        }
    }

    /// One byte per filter.
    pub fn mask_row(&mut self, row: &MaskRow) {
        self.bytes(&row.bits);
    }

    pub fn mask(&mut self, m: &PersonalizationMask) {
        self.u32(m.patience);
        self.len(m.n_clients());
        self.len(m.n_filters());
        for row in &m.rows {
            self.buf.extend_from_slice(&row.bits);
            for &c in &row.counters {
                self.u32(c);
            }
        }
    }

    pub fn sample(&mut self, s: &Sample) {
        self.len(s.images.len());
        for im in &s.images {
            self.tensor(im);
        }
        self.tensor(&s.label);
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, DecodeError> {
    Err(DecodeError::Malformed(msg.into()))
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn finish(&self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n as u64)),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if n > self.remaining() {
            return Err(DecodeError::Truncated {
                needed: (self.pos as u64).saturating_add(n as u64),
                available: self.data.len() as u64,
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    pub fn len(&mut self) -> Result<usize, DecodeError> {
        Ok(self.u32()? as usize)
    }
    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => malformed(format!("flag byte {b}")),
        }
    }
    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.len()?;
        Ok(self.take(n)?.to_vec())
    }
    pub fn str(&mut self) -> Result<String, DecodeError> {
        String::from_utf8(self.bytes()?).or_else(|_| malformed("string is not UTF-8"))
    }
    pub fn opt_f64(&mut self) -> Result<Option<f64>, DecodeError> {
        Ok(if self.bool()? { Some(self.f64()?) } else { None })
    }

    /// Reads `count` f64 values, refusing counts the remaining input cannot hold.
    fn f64s(&mut self, count: usize) -> Result<Vec<f64>, DecodeError> {
        let bytes = count.checked_mul(8).ok_or(DecodeError::Truncated {
            needed: u64::MAX,
            available: self.data.len() as u64,
        })?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn tensor(&mut self) -> Result<Tensor, DecodeError> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| DecodeError::Malformed("tensor extent overflow".into()))?;
        let values = self.f64s(count)?;
        Tensor::new(shape, values).or_else(|e| malformed(e.to_string()))
    }

    pub fn param_set(&mut self) -> Result<ParamSet, DecodeError> {
        let role = match self.u8()? {
            0 => Role::Encoder(ModalityId(self.u8()?)),
            1 => Role::Decoder,
            2 => Role::Lacca,
            b => return malformed(format!("unknown parameter role {b}")),
        };
        let n = self.len()?;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = self.str()?;
            let weight = self.tensor()?;
            if weight.rank() != 2 {
                return malformed(format!("layer {name} weight is not a matrix"));
            }
            let bias = if self.bool()? {
                let b = self.tensor()?;
                if b.rank() != 1 || b.len() != weight.rows() {
                    return malformed(format!("layer {name} bias does not match its weight"));
                }
                Some(b)
            } else {
                None
            };
            layers.push(Layer { name, weight, bias });
        }
        Ok(ParamSet { role, layers })
    }

    pub fn encoders(&mut self) -> Result<BTreeMap<ModalityId, ParamSet>, DecodeError> {
        let n = self.len()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let p = self.param_set()?;
            let Role::Encoder(m) = p.role else {
                return malformed("expected an encoder parameter set");
            };
            if out.insert(m, p).is_some() {
                return malformed(format!("encoder {m} listed twice"));
            }
        }
        Ok(out)
    }

    pub fn model_params(&mut self) -> Result<ModelParams, DecodeError> {
        let encoders = self.encoders()?;
        let decoder = self.param_set()?;
        let lacca = self.param_set()?;
        if decoder.role != Role::Decoder || lacca.role != Role::Lacca {
            return malformed("model parameter roles out of order");
        }
        Ok(ModelParams {
            encoders,
            decoder,
            lacca,
        })
    }

    pub fn arch(&mut self) -> Result<Arch, DecodeError> {
        let n_modalities = self.len()?;
        let n_classes = self.len()?;
        let levels = self.len()?;
        let mut channels = Vec::with_capacity(levels.min(64));
        for _ in 0..levels {
            channels.push(self.len()?);
        }
        let n_heads = self.len()?;
        Ok(Arch {
            n_modalities,
            n_classes,
            channels,
            n_heads,
        })
    }

    pub fn site_model(&mut self) -> Result<SiteModel, DecodeError> {
        let arch = self.arch()?;
        let params = self.model_params()?;
        let m = self.model_params()?;
        let v = self.model_params()?;
        let step = self.u64()?;
        Ok(SiteModel {
            arch,
            params,
            adam: AdamState { m, v, step },
        })
    }

    pub fn anchors(&mut self) -> Result<AnchorBank, DecodeError> {
        let n_levels = self.len()?;
        if n_levels == 0 {
            return Ok(AnchorBank::empty());
        }
        let n_classes = self.len()?;
        let per_class = self.len()?;
        let mut stale = Vec::with_capacity(n_classes.min(1 << 16));
        for _ in 0..n_classes {
            stale.push(self.bool()?);
        }
        let mut levels = Vec::with_capacity(n_levels.min(64));
        for _ in 0..n_levels {
            let rows = self.len()?;
            let cols = self.len()?;
            if Some(rows) != n_classes.checked_mul(per_class) {
                return malformed(format!("anchor level has {rows} rows, expected N_k·N_c"));
            }
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| DecodeError::Malformed("anchor extent overflow".into()))?;
            let values = self.f64s(count)?;
            levels.push(Tensor::new(vec![rows, cols], values).or_else(|e| malformed(e.to_string()))?);
        }
        Ok(AnchorBank {
            levels,
            n_classes,
            per_class,
            stale,
        })
    }

    pub fn mask_row(&mut self) -> Result<MaskRow, DecodeError> {
        let bits = self.bytes()?;
        if bits.iter().any(|&b| b > 1) {
            return malformed("mask byte other than 0 or 1");
        }
        let counters = vec![0; bits.len()];
        Ok(MaskRow { bits, counters })
    }

    pub fn mask(&mut self) -> Result<PersonalizationMask, DecodeError> {
        let patience = self.u32()?;
        let n_clients = self.len()?;
        let n_filters = self.len()?;
        let mut rows = Vec::with_capacity(n_clients.min(1 << 12));
        for _ in 0..n_clients {
            let bits = self.take(n_filters)?.to_vec();
            if bits.iter().any(|&b| b > 1) {
                return malformed("mask byte other than 0 or 1");
            }
            let mut counters = Vec::with_capacity(n_filters);
            for _ in 0..n_filters {
                counters.push(self.u32()?);
            }
            rows.push(MaskRow { bits, counters });
        }
        Ok(PersonalizationMask { patience, rows })
    }

    pub fn sample(&mut self) -> Result<Sample, DecodeError> {
        let n = self.len()?;
        let mut images = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            images.push(self.tensor()?);
        }
        let label = self.tensor()?;
        if images.iter().any(|im| im.shape() != label.shape()) {
            return malformed("image and label extents differ");
        }
        Ok(Sample { images, label })
    }
}

/// Dataset dump, for inspection.
pub fn encode_dataset(samples: &[Sample]) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(samples.len());
    for s in samples {
        w.sample(s);
    }
    encode_frame(Kind::Dataset, &w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>, DecodeError> {
    decode_as(bytes, Kind::Dataset, |r| {
        let n = r.len()?;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            out.push(r.sample()?);
        }
        Ok(out)
    })
}
