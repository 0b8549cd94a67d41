//! Binary PGM (`P5`) and PPM (`P6`) with maxval 255.

use std::path::Path;

use crate::data::container::Reader;
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor;

/// Raw 8-bit raster with 1 (gray) or 3 (RGB, interleaved) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(r: &Raster) -> Result<Vec<u8>> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::format("pnm", format!("{c} channels not encodable"))),
    };
    if r.data.len() != r.width * r.height * r.channels {
        return Err(Error::format("pnm", "payload does not match dimensions"));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    Ok(out)
}

fn header_token(r: &mut Reader<'_>, ctx: &str) -> Result<String> {
    let mut tok = String::new();
    loop {
        let b = r.take(1, "header")?[0];
        if b == b'#' {
            while r.take(1, "comment")?[0] != b'\n' {}
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else if b.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else if b.is_ascii_digit() || (tok.is_empty() && b == b'P') || tok == "P" {
            tok.push(b as char);
        } else {
            return Err(Error::format(ctx, format!("unexpected byte {b:#04x} in header")));
        }
    }
}

pub fn decode(buf: &[u8], ctx: &str) -> Result<Raster> {
    let mut r = Reader::new(buf, ctx);
    let channels = match header_token(&mut r, ctx)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::format(ctx, format!("unsupported magic `{m}`"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        header_token(&mut r, ctx)?
            .parse()
            .map_err(|_| Error::format(ctx, format!("bad {what}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::format(ctx, format!("maxval {maxval} unsupported, expected 255")));
    }
    let data = r.take(width * height * channels, "pixels")?.to_vec();
    Ok(Raster { width, height, channels, data })
}

pub fn read(path: &Path) -> Result<Raster> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, &path.display().to_string())
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    std::fs::write(path, encode(r)?).map_err(|e| Error::io(path, e))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[C, H, W]` (C = 1 or 3) in `[0, 1]` to an 8-bit raster.
pub fn raster_from_tensor(t: &Tensor) -> Result<Raster> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::shape("raster_from_tensor", format!("need [1|3, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let data = (0..plane * c)
        .map(|i| quantize(t.data()[(i % c) * plane + i / c]))
        .collect();
    Ok(Raster { width: w, height: h, channels: c, data })
}

/// Inverse of [`raster_from_tensor`] up to quantization: values `v / 255`.
pub fn tensor_from_raster(r: &Raster) -> Tensor {
    let (c, plane) = (r.channels, r.width * r.height);
    Tensor::from_fn([c, r.height, r.width], |i| {
        r.data[(i % plane) * c + i / plane] as f32 / 255.0
    })
}

pub fn read_label(path: &Path) -> Result<LabelMap> {
    let r = read(path)?;
    if r.channels != 1 {
        return Err(Error::format(path.display().to_string(), "label maps must be grayscale"));
    }
    LabelMap::new(r.height, r.width, r.data)
}

pub fn write_label(path: &Path, l: &LabelMap) -> Result<()> {
    write(path, &Raster { width: l.width, height: l.height, channels: 1, data: l.data.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_and_rgb_round_trip() {
        for channels in [1, 3] {
            let r = Raster {
                width: 3,
                height: 2,
                channels,
                data: (0..6 * channels as u8).map(|v| v * 7).collect(),
            };
            let bytes = encode(&r).unwrap();
            assert_eq!(decode(&bytes, "t").unwrap(), r);
            let t = tensor_from_raster(&r);
            assert_eq!(raster_from_tensor(&t).unwrap(), r);
        }
    }

    #[test]
    fn header_comments_and_errors() {
        let mut b = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        b.extend([10, 20]);
        assert_eq!(decode(&b, "t").unwrap().data, vec![10, 20]);
        assert!(decode(b"P5 2 1 65535\n\0\0\0\0", "t").is_err());
        assert!(decode(b"P2 2 1 255\n", "t").is_err());
        assert!(decode(b"P5 2 2 255\n\0", "t").unwrap_err().to_string().contains("truncated"));
    }
}
