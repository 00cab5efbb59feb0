//! PNG and PGM codecs and resampling to the network resolution.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use latentface_core::render::{Map, DEPTH_HALF_RANGE};

use crate::error::{Error, Result};

/// Side length every ingested image is resampled to.
pub const SIDE: usize = 64;

/// `[0,1] → {0..255}`: clamp, scale, round half to even.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round_ties_even() as u8
}

/// Decodes a PNG into channel-major `[0,1]` planes with three channels.
/// Grey inputs are replicated, alpha is dropped, 16-bit samples map by `v/65535`.
pub fn decode_png(bytes: &[u8]) -> Result<Map<f32>> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::data(format!("bad PNG: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::data(format!("bad PNG: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let samples = info.color_type.samples();
    let sample = |k: usize| -> f32 {
        match info.bit_depth {
            png::BitDepth::Sixteen => u16::from_be_bytes([buf[2 * k], buf[2 * k + 1]]) as f32 / 65535.0,
            _ => buf[k] as f32 / 255.0,
        }
    };
    let colour = matches!(info.color_type, png::ColorType::Rgb | png::ColorType::Rgba);
    let mut data = vec![0.0; 3 * w * h];
    for p in 0..w * h {
        for c in 0..3 {
            let src = if colour { c } else { 0 };
            data[c * w * h + p] = sample(p * samples + src);
        }
    }
    Ok(Map::new(3, h, w, data))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &Map<f32>, height: usize, width: usize) -> Map<f32> {
    if src.height == height && src.width == width {
        return src.clone();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let rows = taps(height, src.height);
    let cols = taps(width, src.width);
    let mut data = Vec::with_capacity(src.channels * height * width);
    for c in 0..src.channels {
        for &(r0, r1, fy) in &rows {
            for &(c0, c1, fx) in &cols {
                let top = src.at(c, r0, c0) * (1.0 - fx) + src.at(c, r0, c1) * fx;
                let bottom = src.at(c, r1, c0) * (1.0 - fx) + src.at(c, r1, c1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Map::new(src.channels, height, width, data)
}

/// Reads a PNG as a `3×64×64` image in `[0,1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Map<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let img = decode_png(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(resize_bilinear(&img, SIDE, SIDE))
}

/// 8-bit PNG of a one- or three-channel map.
pub fn encode_png(map: &Map<f32>) -> Vec<u8> {
    let colour = match map.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => panic!("cannot encode {c} channels"),
    };
    let plane = map.plane_len();
    let mut pixels = Vec::with_capacity(map.data.len());
    for p in 0..plane {
        for c in 0..map.channels {
            pixels.push(quantize(map.data[c * plane + p]));
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, map.width as u32, map.height as u32);
    enc.set_color(colour);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().expect("in-memory PNG header");
    w.write_image_data(&pixels).expect("in-memory PNG data");
    w.finish().expect("in-memory PNG trailer");
    out
}

pub fn write_png(path: impl AsRef<Path>, map: &Map<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(map)).map_err(Error::io(path))
}

/// Depth `[1−h, 1+h]` to `[0,1]` with `h` the canonical depth half range.
pub fn depth_to_unit(d: f32) -> f32 {
    (d - (1.0 - DEPTH_HALF_RANGE) as f32) / (2.0 * DEPTH_HALF_RANGE) as f32
}

pub fn unit_to_depth(u: f32) -> f32 {
    (1.0 - DEPTH_HALF_RANGE) as f32 + u * (2.0 * DEPTH_HALF_RANGE) as f32
}

/// Binary PGM (P5) of a depth map under the affine map `[0.9,1.1] → [0,255]`.
pub fn encode_depth_pgm(depth: &Map<f32>) -> Vec<u8> {
    assert_eq!(depth.channels, 1, "depth maps have one channel");
    let mut out = format!("P5\n{} {}\n255\n", depth.width, depth.height).into_bytes();
    out.extend(depth.data.iter().map(|&d| quantize(depth_to_unit(d))));
    out
}

/// Inverse of [`encode_depth_pgm`] up to quantization.
pub fn decode_depth_pgm(bytes: &[u8]) -> Result<Map<f32>> {
    let bad = || Error::data("bad PGM");
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || num(fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let body = bytes.get(pos + 1..).ok_or_else(bad)?;
    if body.len() != w * h {
        return Err(bad());
    }
    Ok(Map::new(1, h, w, body.iter().map(|&g| unit_to_depth(g as f32 / 255.0)).collect()))
}

pub fn write_depth_pgm(path: impl AsRef<Path>, depth: &Map<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_depth_pgm(depth)).map_err(Error::io(path))
}
