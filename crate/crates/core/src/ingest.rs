//! Frame sources to fixed-length, strided clips.
//!
//! Two on-disk forms are read: the `.mclip` container
//! (`"MCLP" | version u8 = 1 | width u16 | height u16 | fps u16 | count u32 |
//! RGB8 frames`, big-endian) and a frame directory holding `meta.json`
//! (`{fps, width, height, count}`) next to `frame_00000.png`, ….

use std::collections::VecDeque;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::decode_png;
use crate::domain::{Clip, DomainError, Frame, MIN_FRAME_SIDE};

pub const MCLIP_MAGIC: &[u8; 4] = b"MCLP";
pub const MCLIP_VERSION: u8 = 1;
const MCLIP_HEADER_LEN: usize = 4 + 1 + 2 + 2 + 2 + 4;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("bad magic: not a clip container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid resize target {width}x{height}")]
    InvalidTarget { width: u32, height: u32 },
    #[error("bad frame directory metadata: {0}")]
    BadMeta(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    File,
    Live,
}

/// Where frames come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSource {
    pub source_id: String,
    pub mode: SourceMode,
    pub fps: f64,
}

impl FrameSource {
    pub fn new(source_id: impl Into<String>, mode: SourceMode, fps: f64) -> Result<Self, IngestError> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(DomainError::InvalidClip(format!("source fps must be positive, got {fps}")).into());
        }
        Ok(Self { source_id: source_id.into(), mode, fps })
    }
}

/// Frame timestamp for `index` at `fps`, in whole milliseconds.
pub fn timestamp_for(index: u64, fps: f64) -> u64 {
    (index as f64 * 1000.0 / fps).floor() as u64
}

fn source_id_for(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".to_string())
}

/// Decodes an in-memory `.mclip` container.
pub fn decode_mclip(bytes: &[u8], source_id: &str) -> Result<Clip, IngestError> {
    if bytes.len() < 4 || &bytes[..4] != MCLIP_MAGIC {
        return Err(IngestError::BadMagic);
    }
    if bytes.len() < MCLIP_HEADER_LEN {
        return Err(IngestError::TruncatedPayload { expected: MCLIP_HEADER_LEN, actual: bytes.len() });
    }
    let version = bytes[4];
    if version != MCLIP_VERSION {
        return Err(IngestError::UnsupportedVersion(version));
    }
    let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
    let width = u32::from(u16_at(5));
    let height = u32::from(u16_at(7));
    let fps = f64::from(u16_at(9));
    let count = u32::from_be_bytes([bytes[11], bytes[12], bytes[13], bytes[14]]) as usize;
    if width < MIN_FRAME_SIDE || height < MIN_FRAME_SIDE {
        return Err(IngestError::DimensionMismatch(format!("{width}x{height} below {MIN_FRAME_SIDE}px")));
    }
    let frame_len = width as usize * height as usize * 3;
    let payload = &bytes[MCLIP_HEADER_LEN..];
    let expected = frame_len * count;
    if payload.len() != expected {
        return Err(IngestError::TruncatedPayload { expected, actual: payload.len() });
    }
    let frames = payload
        .chunks_exact(frame_len)
        .enumerate()
        .map(|(i, px)| Frame::new(i as u64, timestamp_for(i as u64, fps), width, height, px.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Clip::new(format!("{source_id}#0"), source_id, fps, frames)?)
}

/// Encodes a clip as `.mclip`. Fails if the clip fps is not a whole u16.
pub fn encode_mclip(clip: &Clip) -> Result<Vec<u8>, IngestError> {
    let fps = clip.fps();
    if fps.fract() != 0.0 || fps > f64::from(u16::MAX) {
        return Err(IngestError::DimensionMismatch(format!("fps {fps} not representable")));
    }
    let (w, h) = (clip.width(), clip.height());
    if w > u32::from(u16::MAX) || h > u32::from(u16::MAX) {
        return Err(IngestError::DimensionMismatch(format!("{w}x{h} too large")));
    }
    let mut out = Vec::with_capacity(MCLIP_HEADER_LEN + clip.len() * (w * h * 3) as usize);
    out.extend_from_slice(MCLIP_MAGIC);
    out.push(MCLIP_VERSION);
    out.extend_from_slice(&(w as u16).to_be_bytes());
    out.extend_from_slice(&(h as u16).to_be_bytes());
    out.extend_from_slice(&(fps as u16).to_be_bytes());
    out.extend_from_slice(&(clip.len() as u32).to_be_bytes());
    for f in clip.frames() {
        out.extend_from_slice(f.pixels());
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct FrameDirMeta {
    fps: f64,
    width: u32,
    height: u32,
    count: usize,
}

fn load_frame_dir(dir: &Path) -> Result<Clip, IngestError> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: FrameDirMeta = serde_json::from_str(&meta_text).map_err(|e| IngestError::BadMeta(e.to_string()))?;
    let source_id = source_id_for(dir);
    let mut frames = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let path = dir.join(format!("frame_{i:05}.png"));
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let img = decode_png(&bytes).map_err(|e| IngestError::BadMeta(format!("{}: {e}", path.display())))?;
        if (img.width, img.height) != (meta.width, meta.height) {
            return Err(IngestError::DimensionMismatch(format!(
                "{} is {}x{}, meta says {}x{}",
                path.display(),
                img.width,
                img.height,
                meta.width,
                meta.height
            )));
        }
        frames.push(Frame::new(i as u64, timestamp_for(i as u64, meta.fps), img.width, img.height, img.data)?);
    }
    Ok(Clip::new(format!("{source_id}#0"), source_id, meta.fps, frames)?)
}

/// Loads a `.mclip` file or a frame directory. Frames come back in index order.
pub fn load_clip_container(path: impl AsRef<Path>) -> Result<Clip, IngestError> {
    let path = path.as_ref();
    if path.is_dir() {
        return load_frame_dir(path);
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_mclip(&bytes, &source_id_for(path))
}

/// Start offsets of every full window; empty when `n < window_len`.
pub fn window_offsets(n: usize, window_len: usize, stride: usize) -> impl Iterator<Item = usize> {
    assert!(window_len >= 1 && (1..=window_len).contains(&stride), "invalid window {window_len}/{stride}");
    let count = if n >= window_len { (n - window_len) / stride + 1 } else { 0 };
    (0..count).map(move |j| j * stride)
}

fn clip_from_window(source: &FrameSource, frames: Vec<Frame>) -> Clip {
    let first = frames[0].index();
    Clip::new(format!("{}#{first}", source.source_id), source.source_id.clone(), source.fps, frames)
        .expect("window of a valid frame run is a valid clip")
}

fn check_run(frames: &[Frame]) -> Result<(), IngestError> {
    // a Clip over the whole run checks sizes and ordering in one place
    if frames.is_empty() {
        return Ok(());
    }
    Clip::new("run", "run", 1.0, frames.to_vec()).map_err(|e| IngestError::DimensionMismatch(e.to_string()))?;
    Ok(())
}

/// File-mode segmentation: windows of exactly `window_len` frames at
/// offsets `0, stride, 2·stride, …`; a trailing partial window is dropped.
pub fn segment(
    source: &FrameSource,
    frames: &[Frame],
    window_len: usize,
    stride: usize,
) -> Result<Vec<Clip>, IngestError> {
    if window_len == 0 || stride == 0 || stride > window_len {
        return Err(IngestError::DimensionMismatch(format!("invalid window {window_len}/{stride}")));
    }
    check_run(frames)?;
    Ok(window_offsets(frames.len(), window_len, stride)
        .map(|off| clip_from_window(source, frames[off..off + window_len].to_vec()))
        .collect())
}

/// Live-mode segmentation state for one source. Frames that do not yet fill
/// a window stay buffered until more arrive.
#[derive(Debug)]
pub struct LiveSegmenter {
    source: FrameSource,
    window_len: usize,
    stride: usize,
    buffer: VecDeque<Frame>,
    last: Option<(u64, u64, u32, u32)>,
}

impl LiveSegmenter {
    pub fn new(source: FrameSource, window_len: usize, stride: usize) -> Result<Self, IngestError> {
        if window_len == 0 || stride == 0 || stride > window_len {
            return Err(IngestError::DimensionMismatch(format!("invalid window {window_len}/{stride}")));
        }
        Ok(Self { source, window_len, stride, buffer: VecDeque::with_capacity(window_len), last: None })
    }

    pub fn source(&self) -> &FrameSource {
        &self.source
    }

    /// Frames waiting for a full window.
    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    /// Adds one frame; returns a clip whenever a window completes.
    pub fn push(&mut self, frame: Frame) -> Result<Option<Clip>, IngestError> {
        if let Some((idx, ts, w, h)) = self.last {
            if (frame.width(), frame.height()) != (w, h) {
                return Err(IngestError::DimensionMismatch(format!(
                    "frame {} is {}x{}, stream is {w}x{h}",
                    frame.index(),
                    frame.width(),
                    frame.height()
                )));
            }
            if frame.index() <= idx || frame.timestamp_ms() < ts {
                return Err(IngestError::DimensionMismatch(format!("frame {} arrived out of order", frame.index())));
            }
        }
        self.last = Some((frame.index(), frame.timestamp_ms(), frame.width(), frame.height()));
        self.buffer.push_back(frame);
        if self.buffer.len() < self.window_len {
            return Ok(None);
        }
        let clip = clip_from_window(&self.source, self.buffer.iter().cloned().collect());
        self.buffer.drain(..self.stride);
        Ok(Some(clip))
    }

    pub fn push_all(&mut self, frames: impl IntoIterator<Item = Frame>) -> Result<Vec<Clip>, IngestError> {
        let mut out = Vec::new();
        for f in frames {
            out.extend(self.push(f)?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Resizing
// ---------------------------------------------------------------------------

/// Largest centered region of the source with the target's aspect ratio.
fn center_crop(sw: u32, sh: u32, tw: u32, th: u32) -> (u32, u32, u32, u32) {
    let (sw64, sh64, tw64, th64) = (u64::from(sw), u64::from(sh), u64::from(tw), u64::from(th));
    if sw64 * th64 > sh64 * tw64 {
        let cw = ((sh64 * tw64) / th64).max(1) as u32;
        ((sw - cw) / 2, 0, cw, sh)
    } else if sw64 * th64 < sh64 * tw64 {
        let ch = ((sw64 * th64) / tw64).max(1) as u32;
        (0, (sh - ch) / 2, sw, ch)
    } else {
        (0, 0, sw, sh)
    }
}

/// Center-crop to the target aspect, then bilinear resample with half-pixel
/// centers and edge clamping. Output channels are rounded to nearest.
pub fn resize_rgb(src: &[u8], sw: u32, sh: u32, tw: u32, th: u32) -> Vec<u8> {
    let (cx, cy, cw, ch) = center_crop(sw, sh, tw, th);
    let scale_x = f64::from(cw) / f64::from(tw);
    let scale_y = f64::from(ch) / f64::from(th);
    let sample_axis = |o: u32, scale: f64, origin: u32, extent: u32| {
        let pos = ((f64::from(o) + 0.5) * scale - 0.5).clamp(0.0, f64::from(extent - 1));
        let i0 = pos.floor() as u32;
        let i1 = (i0 + 1).min(extent - 1);
        (origin + i0, origin + i1, pos - f64::from(i0))
    };
    let xs: Vec<_> = (0..tw).map(|x| sample_axis(x, scale_x, cx, cw)).collect();
    let mut out = Vec::with_capacity(tw as usize * th as usize * 3);
    let at = |x: u32, y: u32, c: usize| f64::from(src[(y as usize * sw as usize + x as usize) * 3 + c]);
    for y in 0..th {
        let (y0, y1, fy) = sample_axis(y, scale_y, cy, ch);
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = at(x0, y0, c) * (1.0 - fx) + at(x1, y0, c) * fx;
                let bottom = at(x0, y1, c) * (1.0 - fx) + at(x1, y1, c) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Resizes every frame of a clip to the recognizer's declared input size.
pub fn resize_for_model(clip: &Clip, target_w: u32, target_h: u32) -> Result<Clip, IngestError> {
    if target_w < MIN_FRAME_SIDE || target_h < MIN_FRAME_SIDE {
        return Err(IngestError::InvalidTarget { width: target_w, height: target_h });
    }
    if (clip.width(), clip.height()) == (target_w, target_h) {
        return Ok(clip.clone());
    }
    let frames = clip
        .frames()
        .iter()
        .map(|f| {
            let px = resize_rgb(f.pixels(), f.width(), f.height(), target_w, target_h);
            Frame::new(f.index(), f.timestamp_ms(), target_w, target_h, px)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Clip::new(clip.clip_id(), clip.source_id(), clip.fps(), frames)?)
}
