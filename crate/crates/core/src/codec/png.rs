//! Canonical PNG writer and a permissive reader.
//!
//! The writer emits 8-bit RGB, filter type 0 on every row, and a zlib stream
//! made only of stored (uncompressed) deflate blocks. That makes the encoded
//! bytes a pure function of the pixels, independent of any compressor.
//! Reading accepts any PNG the `png` crate understands and converts to RGB8.

use std::io::Cursor;

use thiserror::Error;

const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];
const STORED_BLOCK_MAX: usize = 65_535;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PngError {
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BadLength { expected: usize, actual: usize },
    #[error("png decode failed: {0}")]
    Decode(String),
}

/// Owned RGB8 raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, PngError> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(PngError::BadLength { expected, actual: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn adler32(data: &[u8]) -> u32 {
    const MOD: u32 = 65_521;
    let (mut a, mut b) = (1u32, 0u32);
    // 5552 is the largest run that cannot overflow u32 before reduction
    for chunk in data.chunks(5552) {
        for &byte in chunk {
            a += u32::from(byte);
            b += a;
        }
        a %= MOD;
        b %= MOD;
    }
    (b << 16) | a
}

fn write_chunk(out: &mut Vec<u8>, kind: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    let mut crc = crc32fast::Hasher::new();
    crc.update(kind);
    crc.update(data);
    out.extend_from_slice(kind);
    out.extend_from_slice(data);
    out.extend_from_slice(&crc.finalize().to_be_bytes());
}

/// Encodes an RGB8 buffer canonically.
pub fn encode_png(width: u32, height: u32, rgb: &[u8]) -> Result<Vec<u8>, PngError> {
    let row = width as usize * 3;
    let expected = row * height as usize;
    if rgb.len() != expected {
        return Err(PngError::BadLength { expected, actual: rgb.len() });
    }

    let mut raw = Vec::with_capacity(expected + height as usize);
    for line in rgb.chunks(row.max(1)).take(height as usize) {
        raw.push(0);
        raw.extend_from_slice(line);
    }

    let blocks = raw.len().div_ceil(STORED_BLOCK_MAX).max(1);
    let mut zlib = Vec::with_capacity(raw.len() + blocks * 5 + 6);
    zlib.extend_from_slice(&[0x78, 0x01]);
    if raw.is_empty() {
        zlib.extend_from_slice(&[1, 0, 0, 0xff, 0xff]);
    }
    let mut chunks = raw.chunks(STORED_BLOCK_MAX).peekable();
    while let Some(block) = chunks.next() {
        zlib.push(u8::from(chunks.peek().is_none()));
        let len = block.len() as u16;
        zlib.extend_from_slice(&len.to_le_bytes());
        zlib.extend_from_slice(&(!len).to_le_bytes());
        zlib.extend_from_slice(block);
    }
    zlib.extend_from_slice(&adler32(&raw).to_be_bytes());

    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&width.to_be_bytes());
    ihdr.extend_from_slice(&height.to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]);

    let mut out = Vec::with_capacity(zlib.len() + 64);
    out.extend_from_slice(&SIGNATURE);
    write_chunk(&mut out, b"IHDR", &ihdr);
    write_chunk(&mut out, b"IDAT", &zlib);
    write_chunk(&mut out, b"IEND", &[]);
    Ok(out)
}

/// Reads only the header.
pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32), PngError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let reader = decoder.read_info().map_err(|e| PngError::Decode(e.to_string()))?;
    let info = reader.info();
    Ok((info.width, info.height))
}

/// Decodes any PNG to RGB8 (alpha dropped, grey expanded, 16-bit stripped).
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, PngError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| PngError::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| PngError::Decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| PngError::Decode(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    let (w, h) = (frame.width, frame.height);
    let rgb = match frame.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(PngError::Decode("unexpanded palette".into())),
    };
    RgbImage::new(w, h, rgb)
}
