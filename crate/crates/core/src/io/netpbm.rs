//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use super::{format_err, read, write, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// `round(255·v)` after clamping to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Encodes a `3×H×W` tensor as P6.
pub fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let [c, h, w] = image.shape() else {
        panic!("encode_ppm expects a 3×H×W tensor, got {:?}", image.shape());
    };
    assert_eq!(*c, 3, "encode_ppm expects 3 channels");
    let n = h * w;
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * n);
    for i in 0..n {
        out.extend([quantize(d[i]), quantize(d[n + i]), quantize(d[2 * n + i])]);
    }
    out
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count must equal width×height");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("not a netpbm file".into());
    }
    let magic = [bytes[0], bytes[1]];
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
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text.parse().map_err(|_| format!("bad header field at byte {start}"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, got {maxval}"));
    }
    Ok(Header {
        magic,
        width,
        height,
        data_start: pos + 1,
    })
}

fn body<'a>(bytes: &'a [u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, &'a [u8]), String> {
    let h = parse_header(bytes)?;
    if &h.magic != magic {
        return Err(format!(
            "expected {}, found {}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&h.magic)
        ));
    }
    let need = h.width * h.height * channels;
    let data = &bytes[h.data_start..];
    if data.len() != need {
        return Err(format!("expected {need} pixel bytes, found {}", data.len()));
    }
    Ok((h.width, h.height, data))
}

/// Decodes P6 into a `3×H×W` tensor with values `b/255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>, String> {
    let (w, h, data) = body(bytes, b"P6", 3)?;
    let n = w * h;
    let mut out = vec![0.0f32; 3 * n];
    for (i, px) in data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = dequantize(px[c]);
        }
    }
    Tensor::new(&[3, h, w], out).map_err(|e| e.to_string())
}

/// Decodes P5 into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let (w, h, data) = body(bytes, b"P5", 1)?;
    Ok((w, h, data.to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&read(path)?).map_err(|m| format_err(path, m))
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write(path, &encode_ppm(image))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&read(path)?).map_err(|m| format_err(path, m))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write(path, &encode_pgm(width, height, pixels))
}
