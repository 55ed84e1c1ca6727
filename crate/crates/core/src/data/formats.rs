//! On-disk image formats: raw tensor files (`SRT1`), binary netpbm (P5/P6)
//! and idx3/idx1 pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SRT_MAGIC: &[u8; 4] = b"SRT1";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Parses a raw tensor image: magic `SRT1`, little-endian u32 C, H, W, then
/// `C·H·W` little-endian f32 values. Returns `[C,H,W]`.
pub fn decode_srt(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 16 || &bytes[..4] != SRT_MAGIC {
        return Err(Error::ingestion(path, "missing SRT1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c * h * w;
    if n == 0 || bytes.len() != 16 + 4 * n {
        return Err(Error::ingestion(
            path,
            format!("header says {c}x{h}x{w} but payload is {} bytes", bytes.len() - 16),
        ));
    }
    let data = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(Tensor::new(vec![c, h, w], data)?)
}

pub fn encode_srt(img: &Tensor<f32>) -> Vec<u8> {
    let s = img.shape();
    let mut out = Vec::with_capacity(16 + 4 * img.numel());
    out.extend_from_slice(SRT_MAGIC);
    for d in &s[s.len() - 3..] {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_srt(path: &Path) -> Result<Tensor<f32>> {
    decode_srt(&read_file(path)?, path)
}

pub fn write_srt(path: &Path, img: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode_srt(img))
}

struct PnmHeader {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<PnmHeader> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::ingestion(path, "not a binary netpbm file (P5/P6)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::ingestion(path, "truncated netpbm header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ingestion(path, "malformed netpbm header field"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::ingestion(path, "missing whitespace after netpbm maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::ingestion(path, format!("unsupported maxval {maxval} (8-bit only)")));
    }
    Ok(PnmHeader {
        channels,
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

/// Decodes P5/P6 into `[C,H,W]` values in `[0,1]`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let h = parse_pnm_header(bytes, path)?;
    let n = h.channels * h.width * h.height;
    let payload = &bytes[h.offset.min(bytes.len())..];
    if payload.len() < n || n == 0 {
        return Err(Error::ingestion(path, format!("expected {n} pixel bytes, found {}", payload.len())));
    }
    let scale = 1.0 / h.maxval as f32;
    let mut data = vec![0f32; n];
    let plane = h.width * h.height;
    // Interleaved HWC on disk → planar CHW.
    for (i, &b) in payload[..n].iter().enumerate() {
        let (px, ch) = (i / h.channels, i % h.channels);
        data[ch * plane + px] = b as f32 * scale;
    }
    Ok(Tensor::new(vec![h.channels, h.height, h.width], data)?)
}

/// Encodes `[C,H,W]` (C = 1 → P5, C = 3 → P6); values are clamped to `[0,1]`.
pub fn encode_pnm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Config(format!("netpbm needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for px in 0..plane {
        for ch in 0..c {
            let v = img.data()[ch * plane + px].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<Tensor<f32>> {
    decode_pnm(&read_file(path)?, path)
}

pub fn write_pnm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode_pnm(img)?)
}

/// An idx file: big-endian dimensions and an unsigned-byte payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn decode_idx(bytes: &[u8], path: &Path) -> Result<Idx> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::ingestion(path, "bad idx magic"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::ingestion(path, format!("unsupported idx element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::ingestion(path, "truncated idx header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(Error::ingestion(
            path,
            format!("idx dims {dims:?} need {n} bytes, found {}", bytes.len() - header),
        ));
    }
    Ok(Idx {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(idx: &Idx) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, idx.dims.len() as u8];
    for d in &idx.dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend_from_slice(&idx.data);
    out
}

pub fn read_idx(path: &Path) -> Result<Idx> {
    decode_idx(&read_file(path)?, path)
}

pub fn write_idx(path: &Path, idx: &Idx) -> Result<()> {
    write_file(path, &encode_idx(idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let t = decode_pnm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn ppm_roundtrip_is_planar() {
        let img = Tensor::<f32>::from_f64(&[3, 1, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let bytes = encode_pnm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[255, 0, 0, 0, 255, 0]);
        assert_eq!(decode_pnm(&bytes, Path::new("x.ppm")).unwrap(), img);
    }

    #[test]
    fn truncated_inputs_are_ingestion_errors() {
        let p = Path::new("bad");
        assert!(matches!(decode_pnm(b"P5\n4 4\n255\n\x00", p), Err(Error::Ingestion { .. })));
        assert!(matches!(decode_srt(b"SRT1\x01\x00\x00\x00", p), Err(Error::Ingestion { .. })));
        assert!(matches!(decode_idx(&[0, 0, 8, 1, 0, 0, 0, 5, 1], p), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn idx_big_endian_dims() {
        let idx = Idx {
            dims: vec![2, 3],
            data: vec![1, 2, 3, 4, 5, 6],
        };
        let bytes = encode_idx(&idx);
        assert_eq!(&bytes[..12], &[0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 3]);
        assert_eq!(decode_idx(&bytes, Path::new("x")).unwrap(), idx);
    }
}
