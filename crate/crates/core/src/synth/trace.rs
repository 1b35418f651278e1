//! RKV1 trace files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "RKV1" | version u32 = 1 | L | H | d_k | d_v | P | n_frames   (u32 each)
//! per frame:
//!   frame_id u32
//!   for l in 0..L, h in 0..H:
//!     K  P*d_k f32
//!     V  P*d_v f32
//!     Q  P*d_k f32
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attention::FrameQueries;
use crate::error::{Error, Result};
use crate::kvcache::{FrameKV, SlotKV};
use crate::numerics::Matrix;

use super::StreamSpec;

pub const MAGIC: [u8; 4] = *b"RKV1";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct TraceHeader {
    pub layers: u32,
    pub heads: u32,
    pub d_k: u32,
    pub d_v: u32,
    pub tokens_per_frame: u32,
    pub n_frames: u32,
}

impl TraceHeader {
    pub fn for_spec(spec: &StreamSpec) -> Self {
        Self {
            layers: spec.layers as u32,
            heads: spec.heads as u32,
            d_k: spec.d_k as u32,
            d_v: spec.d_v as u32,
            tokens_per_frame: spec.tokens_per_frame as u32,
            n_frames: spec.n_frames,
        }
    }

    pub fn slots(&self) -> usize {
        self.layers as usize * self.heads as usize
    }

    /// Bytes occupied by one frame record.
    pub fn frame_bytes(&self) -> usize {
        let p = self.tokens_per_frame as usize;
        4 + self.slots() * p * (2 * self.d_k as usize + self.d_v as usize) * 4
    }

    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        out[..4].copy_from_slice(&MAGIC);
        let fields =
            [VERSION, self.layers, self.heads, self.d_k, self.d_v, self.tokens_per_frame, self.n_frames];
        for (i, f) in fields.iter().enumerate() {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&f.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; HEADER_BYTES]) -> Result<Self> {
        if bytes[..4] != MAGIC {
            return Err(Error::UnrecognizedTrace);
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if field(0) != VERSION {
            return Err(Error::UnrecognizedTrace);
        }
        Ok(Self {
            layers: field(1),
            heads: field(2),
            d_k: field(3),
            d_v: field(4),
            tokens_per_frame: field(5),
            n_frames: field(6),
        })
    }

    fn check_frame(&self, kv: &FrameKV, q: &FrameQueries) -> Result<()> {
        let (p, d_k, d_v) = (self.tokens_per_frame as usize, self.d_k as usize, self.d_v as usize);
        let ok = kv.slots.len() == self.slots()
            && q.slots.len() == self.slots()
            && kv.frame_id == q.frame_id
            && kv.slots.iter().all(|s| {
                s.keys.rows() == p && s.keys.cols() == d_k && s.values.rows() == p && s.values.cols() == d_v
            })
            && q.slots.iter().all(|m| m.rows() == p && m.cols() == d_k);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("frame {} does not match the trace header", kv.frame_id)))
        }
    }
}

fn put_f32s<W: Write>(w: &mut W, xs: &[f32]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Incremental writer; call [`TraceWriter::finish`] to flush and verify the
/// frame count matches the header.
pub struct TraceWriter<W: Write> {
    inner: W,
    header: TraceHeader,
    written: u32,
}

impl TraceWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: TraceHeader) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut inner: W, header: TraceHeader) -> Result<Self> {
        inner.write_all(&header.to_bytes())?;
        Ok(Self { inner, header, written: 0 })
    }

    pub fn write_frame(&mut self, kv: &FrameKV, q: &FrameQueries) -> Result<()> {
        if self.written >= self.header.n_frames {
            return Err(Error::Shape(format!("header declares {} frames", self.header.n_frames)));
        }
        self.header.check_frame(kv, q)?;
        self.inner.write_all(&kv.frame_id.to_le_bytes())?;
        for (block, qm) in kv.slots.iter().zip(&q.slots) {
            put_f32s(&mut self.inner, block.keys.as_slice())?;
            put_f32s(&mut self.inner, block.values.as_slice())?;
            put_f32s(&mut self.inner, qm.as_slice())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.n_frames {
            return Err(Error::Shape(format!(
                "wrote {} frames, header declares {}",
                self.written, self.header.n_frames
            )));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_trace<'a, I>(path: impl AsRef<Path>, header: &TraceHeader, frames: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a FrameKV, &'a FrameQueries)>,
{
    let mut w = TraceWriter::create(path, *header)?;
    for (kv, q) in frames {
        w.write_frame(kv, q)?;
    }
    w.finish().map(|_| ())
}

/// Streaming reader yielding frames in file order.
pub struct TraceReader<R: Read> {
    inner: R,
    header: TraceHeader,
    next: u32,
    buf: Vec<u8>,
}

impl TraceReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> TraceReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut bytes = [0u8; HEADER_BYTES];
        inner.read_exact(&mut bytes).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::UnrecognizedTrace,
            _ => Error::Io(e),
        })?;
        let header = TraceHeader::from_bytes(&bytes)?;
        Ok(Self { inner, header, next: 0, buf: Vec::new() })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    fn matrix(&mut self, rows: usize, cols: usize, at: &mut usize) -> Matrix {
        let n = rows * cols;
        let data = self.buf[*at..*at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *at += 4 * n;
        Matrix::from_vec(rows, cols, data).expect("sized from header")
    }

    fn read_frame(&mut self) -> Result<(FrameKV, FrameQueries)> {
        let frame = self.next;
        self.buf.resize(self.header.frame_bytes(), 0);
        self.inner.read_exact(&mut self.buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::ShortRead(frame),
            _ => Error::Io(e),
        })?;
        let frame_id = u32::from_le_bytes(self.buf[..4].try_into().unwrap());
        let (p, d_k, d_v) =
            (self.header.tokens_per_frame as usize, self.header.d_k as usize, self.header.d_v as usize);
        let mut at = 4;
        let mut slots = Vec::with_capacity(self.header.slots());
        let mut queries = Vec::with_capacity(self.header.slots());
        for _ in 0..self.header.slots() {
            let keys = self.matrix(p, d_k, &mut at);
            let values = self.matrix(p, d_v, &mut at);
            queries.push(self.matrix(p, d_k, &mut at));
            slots.push(SlotKV { keys, values });
        }
        self.next += 1;
        Ok((FrameKV { frame_id, slots }, FrameQueries { frame_id, slots: queries }))
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<(FrameKV, FrameQueries)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.header.n_frames {
            return None;
        }
        let item = self.read_frame();
        if item.is_err() {
            // stop after the first failure
            self.next = self.header.n_frames;
        }
        Some(item)
    }
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<(TraceHeader, Vec<(FrameKV, FrameQueries)>)> {
    let reader = TraceReader::open(path)?;
    let header = *reader.header();
    let frames = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, frames))
}
