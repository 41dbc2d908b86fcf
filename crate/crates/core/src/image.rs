//! Checkpoint image file format.
//!
//! ```text
//! header   magic "CRACSIM1" (8) | version:u32 = 1 | section_count:u32 = 7
//! section  tag:u32 | reserved:u32 = 0 | length:u64 | payload[length] | crc32(payload):u32
//! ```
//!
//! All integers are little-endian. Sections appear once each, in ascending
//! tag order:
//!
//! | tag | section          | payload                                                          |
//! |-----|------------------|------------------------------------------------------------------|
//! | 1   | META             | `seed:u64 arena_bytes:u64 engine_version:u32 reserved:u32`       |
//! | 2   | LOG              | `seq:u64 op:u8 kind:u8 pad:u16 size:u64 id:u64 address:u64` × n  |
//! | 3   | ALLOC_PAYLOADS   | `id:u64 len:u64 bytes[len]` × n                                  |
//! | 4   | UVM_PAGES        | `id:u64 pages:u64` then per page `index:u64 residence:u8 dirty:u8 pad:u16 len:u32 bytes[len]` |
//! | 5   | STREAMS          | `id:u64` × n                                                     |
//! | 6   | APPSTATE         | raw bytes                                                        |
//! | 7   | KERNEL_REGISTRY  | `handle:u64 live:u8 pad:u8 kernels:u16` then per kernel `name_len:u16 name buffers:u16 scalars:u16` |
//!
//! A whole image may additionally be gzip-wrapped; [`decode_any`] detects
//! the wrapper.

use std::io::{Read, Write};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::device::{AllocId, BinaryHandle, ManagedPage, Side, StreamId};
use crate::engine::{AllocPayload, ManagedPayload, Snapshot, SnapshotMeta};
use crate::shim::{kind_code, kind_from_code, BinaryRecord, CallLogEntry, LogOp};

pub const MAGIC: [u8; 8] = *b"CRACSIM1";
pub const VERSION: u32 = 1;
pub const SECTION_COUNT: u32 = 7;
pub const HEADER_LEN: usize = 16;
/// Section framing bytes excluding the payload: 16 before it, 4 after.
pub const SECTION_OVERHEAD: usize = 20;
pub const LOG_RECORD_LEN: usize = 36;
/// Framing per ALLOC_PAYLOADS record (`id`, `len`).
pub const PAYLOAD_FRAMING: usize = 16;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum SectionTag {
    Meta = 1,
    Log = 2,
    AllocPayloads = 3,
    UvmPages = 4,
    Streams = 5,
    AppState = 6,
    KernelRegistry = 7,
}

impl SectionTag {
    pub const ALL: [SectionTag; 7] = [
        SectionTag::Meta,
        SectionTag::Log,
        SectionTag::AllocPayloads,
        SectionTag::UvmPages,
        SectionTag::Streams,
        SectionTag::AppState,
        SectionTag::KernelRegistry,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SectionTag::Meta => "META",
            SectionTag::Log => "LOG",
            SectionTag::AllocPayloads => "ALLOC_PAYLOADS",
            SectionTag::UvmPages => "UVM_PAGES",
            SectionTag::Streams => "STREAMS",
            SectionTag::AppState => "APPSTATE",
            SectionTag::KernelRegistry => "KERNEL_REGISTRY",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("image corrupt: {0}")]
    Corrupt(String),
    #[error("image i/o: {0}")]
    Io(String),
}

fn corrupt(msg: impl Into<String>) -> ImageError {
    ImageError::Corrupt(msg.into())
}

/// Header and section table of an image, as reported by `inspect`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageLayout {
    pub version: u32,
    pub sections: Vec<SectionInfo>,
    pub total_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SectionInfo {
    pub tag: SectionTag,
    pub offset: usize,
    pub length: u64,
    pub crc: u32,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageError> {
        if self.buf.len() < n {
            return Err(corrupt(format!("{} truncated", self.what)));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, ImageError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ImageError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ImageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ImageError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize, ImageError> {
        usize::try_from(self.u64()?).map_err(|_| corrupt(format!("{} length overflow", self.what)))
    }
    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
    fn zero(&mut self, v: u64) -> Result<(), ImageError> {
        if v != 0 {
            return Err(corrupt(format!("{} padding not zero", self.what)));
        }
        Ok(())
    }
}

fn encode_meta(m: &SnapshotMeta) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(24));
    w.u64(m.seed);
    w.u64(m.arena_bytes);
    w.u32(m.engine_version);
    w.u32(0);
    w.0
}

fn encode_log(log: &[CallLogEntry]) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(log.len() * LOG_RECORD_LEN));
    for e in log {
        w.u64(e.seq);
        w.u8(e.op.code());
        w.u8(kind_code(e.kind));
        w.u16(0);
        w.u64(e.size);
        w.u64(e.id);
        w.u64(e.address);
    }
    w.0
}

fn encode_payloads(payloads: &[AllocPayload]) -> Vec<u8> {
    let total: usize = payloads.iter().map(|p| PAYLOAD_FRAMING + p.bytes.len()).sum();
    let mut w = Writer(Vec::with_capacity(total));
    for p in payloads {
        w.u64(p.id.0);
        w.u64(p.bytes.len() as u64);
        w.bytes(&p.bytes);
    }
    w.0
}

fn encode_uvm(managed: &[ManagedPayload]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    for m in managed {
        w.u64(m.id.0);
        w.u64(m.pages.len() as u64);
        for p in &m.pages {
            w.u64(p.index);
            w.u8(match p.residence {
                Side::Host => 0,
                Side::Device => 1,
            });
            w.u8(p.dirty as u8);
            w.u16(0);
            w.u32(p.content.len() as u32);
            w.bytes(&p.content);
        }
    }
    w.0
}

fn encode_streams(streams: &[StreamId]) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(streams.len() * 8));
    for s in streams {
        w.u64(s.0);
    }
    w.0
}

fn encode_registry(binaries: &[BinaryRecord], arity: &dyn Fn(&str) -> (u16, u16)) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    for b in binaries {
        w.u64(b.handle.0);
        w.u8(b.live as u8);
        w.u8(0);
        w.u16(b.kernels.len() as u16);
        for k in &b.kernels {
            w.u16(k.len() as u16);
            w.bytes(k.as_bytes());
            let (bufs, scalars) = arity(k);
            w.u16(bufs);
            w.u16(scalars);
        }
    }
    w.0
}

fn section(out: &mut Vec<u8>, tag: SectionTag, payload: &[u8]) {
    out.extend_from_slice(&(tag as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
}

/// Encodes a snapshot. Kernel arities are looked up through `arity` so the
/// registry records them alongside the names.
pub fn encode_with(snapshot: &Snapshot, arity: &dyn Fn(&str) -> (u16, u16)) -> Vec<u8> {
    let sections = [
        (SectionTag::Meta, encode_meta(&snapshot.meta)),
        (SectionTag::Log, encode_log(&snapshot.log)),
        (SectionTag::AllocPayloads, encode_payloads(&snapshot.payloads)),
        (SectionTag::UvmPages, encode_uvm(&snapshot.managed)),
        (SectionTag::Streams, encode_streams(&snapshot.streams)),
        (SectionTag::AppState, snapshot.app_state.clone()),
        (SectionTag::KernelRegistry, encode_registry(&snapshot.binaries, arity)),
    ];
    let total = HEADER_LEN + sections.iter().map(|(_, p)| SECTION_OVERHEAD + p.len()).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&SECTION_COUNT.to_le_bytes());
    for (tag, payload) in &sections {
        section(&mut out, *tag, payload);
    }
    out
}

/// Encodes with arities from the built-in kernel library (0/0 for unknown ids).
pub fn encode(snapshot: &Snapshot) -> Vec<u8> {
    let lib = crate::device::KernelLibrary::builtin();
    encode_with(snapshot, &|name| {
        lib.get(name)
            .map(|k| {
                let (b, s) = k.arity();
                (b as u16, s as u16)
            })
            .unwrap_or((0, 0))
    })
}

/// Parses header and section framing, verifying every CRC.
pub fn layout(bytes: &[u8]) -> Result<ImageLayout, ImageError> {
    let mut r = Reader::new(bytes, "header");
    if r.take(8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    if count != SECTION_COUNT {
        return Err(corrupt(format!("expected {SECTION_COUNT} sections, found {count}")));
    }
    let mut sections = Vec::with_capacity(SECTION_COUNT as usize);
    for expected in SectionTag::ALL {
        r.what = expected.name();
        let tag = r.u32()?;
        if tag != expected as u32 {
            return Err(corrupt(format!("section tag {tag} where {} expected", expected as u32)));
        }
        let reserved = r.u32()?;
        r.zero(reserved as u64)?;
        let length = r.u64()?;
        let offset = bytes.len() - r.buf.len();
        let payload = r.take(usize::try_from(length).map_err(|_| corrupt("section length overflow"))?)?;
        let crc = r.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(corrupt(format!("{} checksum mismatch", expected.name())));
        }
        sections.push(SectionInfo {
            tag: expected,
            offset,
            length,
            crc,
        });
    }
    if !r.is_empty() {
        return Err(corrupt("trailing bytes after last section"));
    }
    Ok(ImageLayout {
        version,
        sections,
        total_len: bytes.len(),
    })
}

fn decode_meta(b: &[u8]) -> Result<SnapshotMeta, ImageError> {
    let mut r = Reader::new(b, "META");
    let meta = SnapshotMeta {
        seed: r.u64()?,
        arena_bytes: r.u64()?,
        engine_version: r.u32()?,
    };
    let reserved = r.u32()?;
    r.zero(reserved as u64)?;
    if !r.is_empty() {
        return Err(corrupt("META has trailing bytes"));
    }
    Ok(meta)
}

fn decode_log(b: &[u8]) -> Result<Vec<CallLogEntry>, ImageError> {
    if b.len() % LOG_RECORD_LEN != 0 {
        return Err(corrupt("LOG length is not a whole number of records"));
    }
    let mut r = Reader::new(b, "LOG");
    let mut out = Vec::with_capacity(b.len() / LOG_RECORD_LEN);
    while !r.is_empty() {
        let seq = r.u64()?;
        let op = LogOp::from_code(r.u8()?).ok_or_else(|| corrupt("unknown log op"))?;
        let kind = kind_from_code(r.u8()?).ok_or_else(|| corrupt("unknown allocation kind"))?;
        let pad = r.u16()?;
        r.zero(pad as u64)?;
        out.push(CallLogEntry {
            seq,
            op,
            kind,
            size: r.u64()?,
            id: r.u64()?,
            address: r.u64()?,
        });
    }
    Ok(out)
}

fn decode_payloads(b: &[u8]) -> Result<Vec<AllocPayload>, ImageError> {
    let mut r = Reader::new(b, "ALLOC_PAYLOADS");
    let mut out = Vec::new();
    while !r.is_empty() {
        let id = AllocId(r.u64()?);
        let len = r.len()?;
        out.push(AllocPayload {
            id,
            bytes: r.take(len)?.to_vec(),
        });
    }
    Ok(out)
}

fn decode_uvm(b: &[u8]) -> Result<Vec<ManagedPayload>, ImageError> {
    let mut r = Reader::new(b, "UVM_PAGES");
    let mut out = Vec::new();
    while !r.is_empty() {
        let id = AllocId(r.u64()?);
        let count = r.len()?;
        let mut pages = Vec::with_capacity(count.min(r.buf.len() / 16));
        for _ in 0..count {
            let index = r.u64()?;
            let residence = match r.u8()? {
                0 => Side::Host,
                1 => Side::Device,
                _ => return Err(corrupt("bad page residence")),
            };
            let dirty = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(corrupt("bad dirty flag")),
            };
            let pad = r.u16()?;
            r.zero(pad as u64)?;
            let len = r.u32()? as usize;
            pages.push(ManagedPage {
                index,
                residence,
                dirty,
                content: r.take(len)?.to_vec(),
            });
        }
        out.push(ManagedPayload { id, pages });
    }
    Ok(out)
}

fn decode_streams(b: &[u8]) -> Result<Vec<StreamId>, ImageError> {
    if b.len() % 8 != 0 {
        return Err(corrupt("STREAMS length is not a multiple of 8"));
    }
    Ok(b.chunks_exact(8)
        .map(|c| StreamId(u64::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

/// Registry entries with the recorded arity of each kernel.
pub type RegistryEntry = (BinaryRecord, Vec<(u16, u16)>);

fn decode_registry(b: &[u8]) -> Result<Vec<RegistryEntry>, ImageError> {
    let mut r = Reader::new(b, "KERNEL_REGISTRY");
    let mut out = Vec::new();
    while !r.is_empty() {
        let handle = BinaryHandle(r.u64()?);
        let live = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(corrupt("bad live flag")),
        };
        let pad = r.u8()?;
        r.zero(pad as u64)?;
        let count = r.u16()?;
        let mut kernels = Vec::with_capacity(count as usize);
        let mut arities = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("kernel name is not utf-8"))?;
            kernels.push(name.to_owned());
            arities.push((r.u16()?, r.u16()?));
        }
        out.push((BinaryRecord { handle, kernels, live }, arities));
    }
    Ok(out)
}

fn section_bytes<'a>(bytes: &'a [u8], s: &SectionInfo) -> &'a [u8] {
    &bytes[s.offset..s.offset + s.length as usize]
}

/// Decodes an uncompressed image, also returning the recorded kernel arities.
pub fn decode_full(bytes: &[u8]) -> Result<(Snapshot, Vec<RegistryEntry>), ImageError> {
    let layout = layout(bytes)?;
    let sec = |tag: SectionTag| section_bytes(bytes, &layout.sections[tag as usize - 1]);
    let registry = decode_registry(sec(SectionTag::KernelRegistry))?;
    let snapshot = Snapshot {
        meta: decode_meta(sec(SectionTag::Meta))?,
        log: decode_log(sec(SectionTag::Log))?,
        payloads: decode_payloads(sec(SectionTag::AllocPayloads))?,
        managed: decode_uvm(sec(SectionTag::UvmPages))?,
        streams: decode_streams(sec(SectionTag::Streams))?,
        app_state: sec(SectionTag::AppState).to_vec(),
        binaries: registry.iter().map(|(b, _)| b.clone()).collect(),
    };
    Ok((snapshot, registry))
}

pub fn decode(bytes: &[u8]) -> Result<Snapshot, ImageError> {
    decode_full(bytes).map(|(s, _)| s)
}

/// Gzip-wraps an encoded image.
pub fn compress(image: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(image).expect("in-memory gzip");
    enc.finish().expect("in-memory gzip")
}

/// Strips a gzip wrapper if present.
pub fn unwrap_compressed(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>, ImageError> {
    if bytes.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| corrupt(format!("gzip wrapper: {e}")))?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

/// Decodes a plain or gzip-wrapped image.
pub fn decode_any(bytes: &[u8]) -> Result<Snapshot, ImageError> {
    decode(&unwrap_compressed(bytes)?)
}

pub fn write_file(path: &std::path::Path, snapshot: &Snapshot, compressed: bool) -> Result<usize, ImageError> {
    let mut bytes = encode(snapshot);
    if compressed {
        bytes = compress(&bytes);
    }
    std::fs::write(path, &bytes).map_err(|e| ImageError::Io(format!("{}: {e}", path.display())))?;
    Ok(bytes.len())
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>, ImageError> {
    let bytes = std::fs::read(path).map_err(|e| ImageError::Io(format!("{}: {e}", path.display())))?;
    Ok(unwrap_compressed(&bytes)?.into_owned())
}
