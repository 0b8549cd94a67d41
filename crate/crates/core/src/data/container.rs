//! `STEN1` tensor records and named-tensor archives.
//!
//! A record is the magic `STEN1`, a dtype byte (0 = f32, 1 = u8), a rank
//! byte, `rank` little-endian u32 dims, then the row-major payload in
//! little-endian order. An archive is the magic `SARC1`, a u32 record
//! count, and for each record a u32 name length, the UTF-8 name and one
//! tensor record.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 5] = b"STEN1";
pub const ARCHIVE_MAGIC: &[u8; 5] = b"SARC1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::U8 { shape, .. } => shape,
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U8 { .. } => 1,
        }
    }
}

fn write_err(e: std::io::Error) -> Error {
    Error::format("tensor record", e.to_string())
}

pub fn write_tensor(out: &mut impl Write, t: &TensorData) -> Result<()> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::format("tensor record", format!("rank {} too large", shape.len())));
    }
    let mut head = Vec::with_capacity(7 + 4 * shape.len());
    head.extend_from_slice(TENSOR_MAGIC);
    head.push(t.dtype());
    head.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::format("tensor record", format!("dim {d} exceeds u32")))?;
        head.extend_from_slice(&d.to_le_bytes());
    }
    out.write_all(&head).map_err(write_err)?;
    match t {
        TensorData::F32(t) => {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            out.write_all(&bytes).map_err(write_err)
        }
        TensorData::U8 { data, .. } => out.write_all(data).map_err(write_err),
    }
}

/// Cursor over an in-memory buffer that reports truncation as a format
/// error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], context: &'a str) -> Self {
        Self { buf, pos: 0, context }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(
                self.context,
                format!("truncated while reading {what} at byte {}", self.pos),
            )
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn magic(&mut self, magic: &[u8; 5]) -> Result<()> {
        let got = self.take(5, "magic")?;
        if got != magic {
            return Err(Error::format(
                self.context,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }
}

pub(crate) fn read_tensor_from(r: &mut Reader<'_>) -> Result<TensorData> {
    r.magic(TENSOR_MAGIC)?;
    let head = r.take(2, "dtype and rank")?;
    let (dtype, rank) = (head[0], head[1] as usize);
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dims")? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(r.context, "element count overflows"))?;
    match dtype {
        0 => {
            let bytes = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), "f32 payload")?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(TensorData::F32(Tensor::new(shape, data)?))
        }
        1 => Ok(TensorData::U8 {
            data: r.take(numel, "u8 payload")?.to_vec(),
            shape,
        }),
        other => Err(Error::format(r.context, format!("unknown dtype code {other}"))),
    }
}

/// Decode exactly one record occupying the whole buffer.
pub fn read_tensor(buf: &[u8]) -> Result<TensorData> {
    let mut r = Reader::new(buf, "tensor record");
    let t = read_tensor_from(&mut r)?;
    if !r.at_end() {
        return Err(Error::format("tensor record", "trailing bytes after payload"));
    }
    Ok(t)
}

pub fn encode_tensor(t: &TensorData) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn encode_archive(records: &[(String, TensorData)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, t)?;
    }
    Ok(out)
}

pub fn decode_archive(buf: &[u8]) -> Result<Vec<(String, TensorData)>> {
    let mut r = Reader::new(buf, "tensor archive");
    r.magic(ARCHIVE_MAGIC)?;
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("tensor archive", format!("record {i} name is not UTF-8")))?
            .to_string();
        let t = read_tensor_from(&mut r).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format("tensor archive", format!("record `{name}`: {detail}")),
            e => e,
        })?;
        records.push((name, t));
    }
    if !r.at_end() {
        return Err(Error::format("tensor archive", "trailing bytes after last record"));
    }
    Ok(records)
}

pub fn save_archive(path: &std::path::Path, records: &[(String, TensorData)]) -> Result<()> {
    let bytes = encode_archive(records)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: &std::path::Path) -> Result<Vec<(String, TensorData)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}
