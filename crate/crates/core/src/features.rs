//! Feature frontend: frame stacking, subsampling and the FTMF raw feature
//! file format.
//!
//! FTMF layout (all integers little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"FTMF"`                |
//! | 4      | 4    | version (`u32`, currently 1)   |
//! | 8      | 4    | frame count `T` (`u32`)        |
//! | 12     | 4    | feature dimension (`u32`)      |
//! | 16     | 4·T·dim | row-major `f32` values      |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{FtmError, Result};

pub const FTMF_MAGIC: &[u8; 4] = b"FTMF";
pub const FTMF_VERSION: u32 = 1;

/// Frame rate of the raw features the synthetic corpus emits.
pub const RAW_FRAME_PERIOD_MS: f64 = 10.0;

/// Fixed-rate sequence of feature vectors, row-major `[n_frames, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<f32>,
    n_frames: usize,
    dim: usize,
    pub frame_period_ms: f64,
    /// Per-frame dimension before stacking.
    pub base_dim: usize,
}

impl FeatureSequence {
    /// Wraps unstacked features.
    pub fn new(frames: Vec<f32>, dim: usize, frame_period_ms: f64) -> Result<Self> {
        if dim == 0 || frames.is_empty() {
            return Err(FtmError::Empty("empty feature matrix".into()));
        }
        if !frames.len().is_multiple_of(dim) {
            return Err(FtmError::shape("FeatureSequence", &[frames.len()], &[dim]));
        }
        if frame_period_ms.is_nan() || frame_period_ms <= 0.0 {
            return Err(FtmError::Data(format!("frame period {frame_period_ms} must be positive")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(FtmError::NonFinite("feature matrix contains non-finite values".into()));
        }
        Ok(FeatureSequence {
            n_frames: frames.len() / dim,
            frames,
            dim,
            frame_period_ms,
            base_dim: dim,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    /// Frames `start..end` (clamped to the sequence) as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.n_frames);
        if start >= end {
            return Err(FtmError::Empty("empty feature matrix".into()));
        }
        Ok(FeatureSequence {
            frames: self.frames[start * self.dim..end * self.dim].to_vec(),
            n_frames: end - start,
            dim: self.dim,
            frame_period_ms: self.frame_period_ms,
            base_dim: self.base_dim,
        })
    }

    pub fn duration_ms(&self) -> f64 {
        self.n_frames as f64 * self.frame_period_ms
    }
}

/// Concatenates each kept frame with `context` neighbours on either side
/// (edges replicated) and keeps every `subsample`-th frame starting at 0.
///
/// Output frame `i` is built around raw frame `i·subsample`; the output has
/// `⌈T/subsample⌉` frames of dimension `dim·(2·context + 1)`.
pub fn stack_and_subsample(
    raw: &FeatureSequence,
    context: usize,
    subsample: usize,
) -> Result<FeatureSequence> {
    if subsample == 0 {
        return Err(FtmError::Config("subsample must be at least 1".into()));
    }
    let t = raw.n_frames;
    let dim = raw.dim;
    let out_len = t.div_ceil(subsample);
    let width = dim * (2 * context + 1);
    let mut frames = Vec::with_capacity(out_len * width);
    for i in 0..out_len {
        let centre = (i * subsample) as isize;
        for off in -(context as isize)..=(context as isize) {
            let src = (centre + off).clamp(0, t as isize - 1) as usize;
            frames.extend_from_slice(raw.frame(src));
        }
    }
    Ok(FeatureSequence {
        frames,
        n_frames: out_len,
        dim: width,
        frame_period_ms: raw.frame_period_ms * subsample as f64,
        base_dim: raw.base_dim,
    })
}

pub fn write_ftmf(w: &mut impl Write, seq: &FeatureSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + seq.frames.len() * 4);
    buf.extend_from_slice(FTMF_MAGIC);
    buf.extend_from_slice(&FTMF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.n_frames as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim as u32).to_le_bytes());
    for v in &seq.frames {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_ftmf(r: &mut impl Read, frame_period_ms: f64) -> Result<FeatureSequence> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != FTMF_MAGIC {
        return Err(FtmError::Format("missing FTMF magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FTMF_VERSION {
        return Err(FtmError::Format(format!("unsupported FTMF version {version}")));
    }
    let (t, dim) = (word(8) as usize, word(12) as usize);
    let mut payload = vec![0u8; t * dim * 4];
    r.read_exact(&mut payload)?;
    let frames = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureSequence::new(frames, dim, frame_period_ms)
}

pub fn save_ftmf(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ftmf(&mut f, seq)?;
    f.flush()?;
    Ok(())
}

pub fn load_ftmf(path: &Path, frame_period_ms: f64) -> Result<FeatureSequence> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_ftmf(&mut f, frame_period_ms)
}
