//! The `.ipf` file format.
//!
//! Layout (multi-byte fields little-endian, bit fields MSB-first):
//!
//! ```text
//! header   "IPF1" | version u8 | width u16 | height u16 | frames u32 | gop u8
//!          | base spec | flow spec | residual spec
//! spec     in_dim u16 | out_dim u16 | channels u16 | omega0 f32 | upsample u8
//!          | layer-string length u8 | layer-string bytes
//! frame    I-frame: base tensors
//!          P-frame: flags u8 (bit 0 = residual present) | flow tensors
//!                   | residual tensors when flagged
//! tensor   rows u16 | rows x 5-bit bitwidth, zero-padded to a byte
//!          | rows x f32 scale | integers row-major at their row's
//!          bitwidth, two's complement, zero-padded to a byte
//! ```
//!
//! Frame `i` is an I-frame when `i % gop == 0`. Tensors appear per layer,
//! weight then bias, with shapes implied by the spec.

mod bits;
mod inspect;

pub use bits::{from_twos, to_twos, BitReader, BitWriter};
pub use inspect::{inspect_report, Accounting, FrameAccount, TensorAccount};

use std::path::Path;

use thiserror::Error;

use crate::quant::{QuantError, QuantizedTensor, MAX_BITWIDTH};
use crate::siren::{ArchitectureSpec, SirenError};

pub const MAGIC: &[u8; 4] = b"IPF1";
pub const VERSION: u8 = 1;
/// Width of a bitwidth field.
pub const BITWIDTH_FIELD_BITS: u32 = 5;
pub const FLAG_RESIDUAL: u8 = 0x01;

#[derive(Debug, Error)]
pub enum BitstreamError {
    #[error("not an IPF file")]
    NotIpf,
    #[error("unsupported IPF version {0}")]
    UnsupportedVersion(u8),
    #[error("unexpected end of stream ({0})")]
    UnexpectedEnd(String),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("bitwidth field {value} outside [1, {MAX_BITWIDTH}] ({context})")]
    InvalidBitwidth { value: u8, context: String },
    #[error("non-finite scale ({0})")]
    NonFiniteScale(String),
    #[error("expected {expected} rows of {row_len}, record has {found} ({context})")]
    RowCountMismatch {
        expected: usize,
        found: usize,
        row_len: usize,
        context: String,
    },
    #[error("reserved flag bits set: {flags:#04x} (frame {frame})")]
    ReservedFlags { flags: u8, frame: usize },
    #[error("non-zero padding bits ({0})")]
    NonZeroPadding(String),
    #[error("{0} trailing bytes after the last frame")]
    TrailingBytes(usize),
    #[error("record does not match the header: {0}")]
    Inconsistent(String),
    #[error("value out of range for the format: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Spec(#[from] SirenError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub width: u16,
    pub height: u16,
    pub frame_count: u32,
    pub gop_size: u8,
    pub base: ArchitectureSpec,
    pub flow: ArchitectureSpec,
    pub residual: ArchitectureSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameRecord {
    Intra {
        base: Vec<QuantizedTensor>,
    },
    Predicted {
        flow: Vec<QuantizedTensor>,
        residual: Option<Vec<QuantizedTensor>>,
    },
}

impl FrameRecord {
    pub fn is_intra(&self) -> bool {
        matches!(self, FrameRecord::Intra { .. })
    }
}

/// `(rows, row_len)` of every stored tensor of a network, in file order.
pub fn tensor_shapes(spec: &ArchitectureSpec) -> Vec<(usize, usize)> {
    spec.layer_shapes()
        .into_iter()
        .flat_map(|(fan_in, fan_out)| [(fan_out, fan_in), (1, fan_out)])
        .collect()
}

/// Writes one tensor record and returns the number of bytes it occupies.
pub fn write_tensor(qt: &QuantizedTensor, w: &mut BitWriter) -> Result<usize, BitstreamError> {
    qt.validate()?;
    let rows = u16::try_from(qt.rows())
        .map_err(|_| BitstreamError::OutOfRange(format!("{} rows", qt.rows())))?;
    let start = w.len_bytes();
    w.write_u16(rows);
    for &b in qt.bitwidths() {
        w.write_bits(u64::from(b), BITWIDTH_FIELD_BITS);
    }
    w.align();
    for &s in qt.scales() {
        w.write_f32(s);
    }
    for (i, &b) in qt.bitwidths().iter().enumerate() {
        for &v in qt.row(i) {
            w.write_bits(to_twos(v, b), u32::from(b));
        }
    }
    w.align();
    Ok(w.len_bytes() - start)
}

/// Reads one tensor record of `rows x row_len` integers.
pub fn read_tensor(
    r: &mut BitReader<'_>,
    rows: usize,
    row_len: usize,
    context: &dyn Fn() -> String,
) -> Result<QuantizedTensor, BitstreamError> {
    let found = usize::from(r.read_u16(context)?);
    if found != rows {
        return Err(BitstreamError::RowCountMismatch {
            expected: rows,
            found,
            row_len,
            context: context(),
        });
    }
    let mut bitwidths = Vec::with_capacity(rows);
    for _ in 0..rows {
        let b = r.read_bits(BITWIDTH_FIELD_BITS, context)? as u8;
        if b == 0 || b > MAX_BITWIDTH {
            return Err(BitstreamError::InvalidBitwidth {
                value: b,
                context: context(),
            });
        }
        bitwidths.push(b);
    }
    r.align(context)?;
    let mut scales = Vec::with_capacity(rows);
    for _ in 0..rows {
        let s = r.read_f32(context)?;
        if !s.is_finite() {
            return Err(BitstreamError::NonFiniteScale(context()));
        }
        scales.push(s);
    }
    let mut ints = Vec::with_capacity(rows * row_len);
    for &b in &bitwidths {
        for _ in 0..row_len {
            ints.push(from_twos(r.read_bits(u32::from(b), context)?, b));
        }
    }
    r.align(context)?;
    Ok(QuantizedTensor::new(row_len, ints, scales, bitwidths)?)
}

fn write_spec(spec: &ArchitectureSpec, w: &mut BitWriter) {
    let layers = spec.layer_string();
    w.write_u16(spec.in_dim as u16);
    w.write_u16(spec.out_dim as u16);
    w.write_u16(spec.channels as u16);
    w.write_f32(spec.omega0);
    w.write_u8(spec.upsample_factor as u8);
    w.write_u8(layers.len() as u8);
    w.write_bytes(layers.as_bytes());
}

fn read_spec(r: &mut BitReader<'_>, which: &str) -> Result<ArchitectureSpec, BitstreamError> {
    let ctx = || format!("{which} spec");
    let in_dim = usize::from(r.read_u16(&ctx)?);
    let out_dim = usize::from(r.read_u16(&ctx)?);
    let channels = usize::from(r.read_u16(&ctx)?);
    let omega0 = r.read_f32(&ctx)?;
    let upsample = usize::from(r.read_u8(&ctx)?);
    let len = usize::from(r.read_u8(&ctx)?);
    let raw = r.read_bytes(len, &ctx)?;
    let layers = std::str::from_utf8(raw)
        .map_err(|_| BitstreamError::InvalidHeader(format!("{which} layer string is not text")))?;
    let spec = ArchitectureSpec::new(layers, channels, in_dim, out_dim)?
        .with_omega0(omega0)?
        .with_upsample_factor(upsample)?;
    if spec.layer_string() != layers {
        return Err(BitstreamError::InvalidHeader(format!(
            "{which} layer string {layers:?} is not canonical"
        )));
    }
    Ok(spec)
}

fn spec_fits(spec: &ArchitectureSpec, which: &str) -> Result<(), BitstreamError> {
    if spec.layer_string().len() > usize::from(u8::MAX) {
        return Err(BitstreamError::OutOfRange(format!("{which} layer string too long")));
    }
    Ok(())
}

impl Header {
    pub fn validate(&self) -> Result<(), BitstreamError> {
        let bad = |m: &str| Err(BitstreamError::InvalidHeader(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("zero frame dimension");
        }
        if self.gop_size == 0 {
            return bad("GoP size 0");
        }
        if self.base.out_dim != 3 {
            return bad("base network must output RGB");
        }
        if (self.flow.in_dim, self.flow.out_dim) != (2, 2) {
            return bad("flow network must map 2-D points to 2-D displacements");
        }
        if (self.residual.in_dim, self.residual.out_dim) != (2, 3) {
            return bad("residual network must map 2-D points to RGB");
        }
        if self.residual.has_upsample() || self.flow.has_upsample() {
            return bad("flow and residual networks cannot upsample");
        }
        for (s, w) in [(&self.base, "base"), (&self.flow, "flow"), (&self.residual, "residual")] {
            s.validate()?;
            spec_fits(s, w)?;
        }
        Ok(())
    }

    pub fn write(&self, w: &mut BitWriter) -> Result<usize, BitstreamError> {
        self.validate()?;
        let start = w.len_bytes();
        w.write_bytes(MAGIC);
        w.write_u8(VERSION);
        w.write_u16(self.width);
        w.write_u16(self.height);
        w.write_u32(self.frame_count);
        w.write_u8(self.gop_size);
        write_spec(&self.base, w);
        write_spec(&self.flow, w);
        write_spec(&self.residual, w);
        Ok(w.len_bytes() - start)
    }

    pub fn read(r: &mut BitReader<'_>) -> Result<Header, BitstreamError> {
        let ctx = || "header".to_string();
        let magic = r.read_bytes(4, &ctx).map_err(|_| BitstreamError::NotIpf)?;
        if magic != MAGIC {
            return Err(BitstreamError::NotIpf);
        }
        let version = r.read_u8(&ctx)?;
        if version != VERSION {
            return Err(BitstreamError::UnsupportedVersion(version));
        }
        let header = Header {
            width: r.read_u16(&ctx)?,
            height: r.read_u16(&ctx)?,
            frame_count: r.read_u32(&ctx)?,
            gop_size: r.read_u8(&ctx)?,
            base: read_spec(r, "base")?,
            flow: read_spec(r, "flow")?,
            residual: read_spec(r, "residual")?,
        };
        header.validate()?;
        Ok(header)
    }

    /// Whether frame `index` is coded as an I-frame.
    pub fn is_intra(&self, index: usize) -> bool {
        index.is_multiple_of(usize::from(self.gop_size))
    }
}

fn write_tensors(
    tensors: &[QuantizedTensor],
    spec: &ArchitectureSpec,
    what: &str,
    w: &mut BitWriter,
) -> Result<(), BitstreamError> {
    let shapes = tensor_shapes(spec);
    if tensors.len() != shapes.len() {
        return Err(BitstreamError::Inconsistent(format!(
            "{} {what} tensors for a {}-tensor spec",
            tensors.len(),
            shapes.len()
        )));
    }
    for (t, (rows, row_len)) in tensors.iter().zip(shapes) {
        if (t.rows(), t.row_len()) != (rows, row_len) {
            return Err(BitstreamError::Inconsistent(format!(
                "{what} tensor {}x{} where the spec needs {rows}x{row_len}",
                t.rows(),
                t.row_len()
            )));
        }
        write_tensor(t, w)?;
    }
    Ok(())
}

fn read_tensors(
    r: &mut BitReader<'_>,
    spec: &ArchitectureSpec,
    frame: usize,
    what: &str,
) -> Result<Vec<QuantizedTensor>, BitstreamError> {
    tensor_shapes(spec)
        .into_iter()
        .enumerate()
        .map(|(i, (rows, row_len))| {
            read_tensor(r, rows, row_len, &|| format!("frame {frame}, {what} tensor {i}"))
        })
        .collect()
}

/// Writes the record of frame `index`; its kind must match the header's
/// GoP structure.
pub fn write_frame(
    header: &Header,
    index: usize,
    record: &FrameRecord,
    w: &mut BitWriter,
) -> Result<usize, BitstreamError> {
    if record.is_intra() != header.is_intra(index) {
        return Err(BitstreamError::Inconsistent(format!(
            "frame {index} must be {}",
            if header.is_intra(index) { "an I-frame" } else { "a P-frame" }
        )));
    }
    let start = w.len_bytes();
    match record {
        FrameRecord::Intra { base } => write_tensors(base, &header.base, "base", w)?,
        FrameRecord::Predicted { flow, residual } => {
            w.write_u8(if residual.is_some() { FLAG_RESIDUAL } else { 0 });
            write_tensors(flow, &header.flow, "flow", w)?;
            if let Some(res) = residual {
                write_tensors(res, &header.residual, "residual", w)?;
            }
        }
    }
    Ok(w.len_bytes() - start)
}

/// Reads frames one at a time, touching only the bytes of frames already
/// requested.
pub struct FrameReader<'a> {
    reader: BitReader<'a>,
    header: Header,
    next: usize,
}

impl<'a> FrameReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self, BitstreamError> {
        let mut reader = BitReader::new(bytes);
        let header = Header::read(&mut reader)?;
        Ok(FrameReader {
            reader,
            header,
            next: 0,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.reader.position()
    }

    /// The next frame, or `None` after the last one. Trailing bytes after
    /// the last frame are an error.
    pub fn next_frame(&mut self) -> Result<Option<FrameRecord>, BitstreamError> {
        let index = self.next;
        if index >= self.header.frame_count as usize {
            let extra = self.reader.remaining_bytes();
            if extra > 0 {
                return Err(BitstreamError::TrailingBytes(extra));
            }
            return Ok(None);
        }
        let r = &mut self.reader;
        let record = if self.header.is_intra(index) {
            FrameRecord::Intra {
                base: read_tensors(r, &self.header.base, index, "base")?,
            }
        } else {
            let flags = r.read_u8(&|| format!("frame {index}, flags"))?;
            if flags & !FLAG_RESIDUAL != 0 {
                return Err(BitstreamError::ReservedFlags { flags, frame: index });
            }
            let flow = read_tensors(r, &self.header.flow, index, "flow")?;
            let residual = if flags & FLAG_RESIDUAL != 0 {
                Some(read_tensors(r, &self.header.residual, index, "residual")?)
            } else {
                None
            };
            FrameRecord::Predicted { flow, residual }
        };
        self.next += 1;
        Ok(Some(record))
    }
}

/// A whole `.ipf` file.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub header: Header,
    pub frames: Vec<FrameRecord>,
}

impl Document {
    pub fn parse(bytes: &[u8]) -> Result<Document, BitstreamError> {
        let mut reader = FrameReader::new(bytes)?;
        let mut frames = Vec::with_capacity(reader.header().frame_count as usize);
        while let Some(f) = reader.next_frame()? {
            frames.push(f);
        }
        Ok(Document {
            header: reader.header,
            frames,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, BitstreamError> {
        if self.frames.len() != self.header.frame_count as usize {
            return Err(BitstreamError::Inconsistent(format!(
                "{} frames for a header announcing {}",
                self.frames.len(),
                self.header.frame_count
            )));
        }
        let mut w = BitWriter::new();
        self.header.write(&mut w)?;
        for (i, f) in self.frames.iter().enumerate() {
            write_frame(&self.header, i, f, &mut w)?;
        }
        Ok(w.into_bytes())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Document, BitstreamError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| BitstreamError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Document::parse(&bytes)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<usize, BitstreamError> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|source| BitstreamError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(bytes.len())
    }

    /// Integer payload bits of every tensor, excluding all framing.
    pub fn payload_bits(&self) -> u64 {
        self.tensors().map(QuantizedTensor::payload_bits).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &QuantizedTensor> {
        self.frames.iter().flat_map(|f| match f {
            FrameRecord::Intra { base } => base.iter().chain([].iter()),
            FrameRecord::Predicted { flow, residual } => {
                flow.iter().chain(residual.as_deref().unwrap_or(&[]).iter())
            }
        })
    }
}
