//! Token matrices, the `.omnc` token file format and 16-bit WAV I/O.
//!
//! Token file layout (little-endian, 24-byte header):
//!
//! | bytes | field |
//! |-------|-------|
//! | 0..4  | magic `OMNC` |
//! | 4..6  | version (1) |
//! | 6..8  | flags, bit 0 = has semantic stream |
//! | 8..12 | sample rate |
//! | 12..16 | hop |
//! | 16..18 | streams |
//! | 18    | bits per code |
//! | 19    | reserved |
//! | 20..24 | frame count |
//!
//! followed by `frames * streams` u16 tokens in frame-major order; inactive
//! tokens are stored as `0xFFFF`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::quantize::INACTIVE_TOKEN;
use crate::sequence::PcmBuffer;

pub const TOKEN_MAGIC: [u8; 4] = *b"OMNC";
pub const TOKEN_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

/// `[frames x streams]` code indices; `None` marks a stage inactive under
/// quantizer dropout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMatrix {
    pub frames: usize,
    pub streams: usize,
    pub has_semantic: bool,
    pub values: Vec<Option<u16>>,
}

impl TokenMatrix {
    pub fn empty(streams: usize, has_semantic: bool) -> Self {
        Self {
            frames: 0,
            streams,
            has_semantic,
            values: Vec::new(),
        }
    }

    pub fn new(frames: usize, streams: usize, has_semantic: bool, values: Vec<Option<u16>>) -> Result<Self> {
        if values.len() != frames * streams {
            return Err(Error::ShapeMismatch {
                left: vec![frames, streams],
                right: vec![values.len()],
            });
        }
        Ok(Self {
            frames,
            streams,
            has_semantic,
            values,
        })
    }

    pub fn get(&self, frame: usize, stream: usize) -> Option<u16> {
        self.values[frame * self.streams + stream]
    }

    pub fn row(&self, frame: usize) -> &[Option<u16>] {
        &self.values[frame * self.streams..(frame + 1) * self.streams]
    }

    /// Tokens of one stream over time.
    pub fn stream(&self, stream: usize) -> Vec<Option<u16>> {
        (0..self.frames).map(|f| self.get(f, stream)).collect()
    }

    pub fn acoustic_streams(&self) -> usize {
        self.streams - usize::from(self.has_semantic)
    }

    pub fn push_row(&mut self, row: &[Option<u16>]) -> Result<()> {
        if row.len() != self.streams {
            return Err(Error::DimMismatch {
                expected: self.streams,
                actual: row.len(),
            });
        }
        self.values.extend_from_slice(row);
        self.frames += 1;
        Ok(())
    }

    /// Appends the frames of `other`.
    pub fn extend(&mut self, other: &TokenMatrix) -> Result<()> {
        if other.streams != self.streams || other.has_semantic != self.has_semantic {
            return Err(Error::DimMismatch {
                expected: self.streams,
                actual: other.streams,
            });
        }
        self.values.extend_from_slice(&other.values);
        self.frames += other.frames;
        Ok(())
    }

    /// Every active token is below `limit`.
    pub fn check_range(&self, limit: u32) -> Result<()> {
        match self.values.iter().flatten().find(|&&v| v as u32 >= limit || v == INACTIVE_TOKEN) {
            Some(&v) => Err(Error::TokenOutOfRange { value: v as u32, limit }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenFileHeader {
    pub version: u16,
    pub has_semantic: bool,
    pub sample_rate: u32,
    pub hop: u32,
    pub streams: u16,
    pub bits_per_code: u8,
    pub frame_count: u32,
}

impl TokenFileHeader {
    pub fn frame_rate_hz(&self) -> f64 {
        if self.hop == 0 {
            0.0
        } else {
            self.sample_rate as f64 / self.hop as f64
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        if self.sample_rate == 0 {
            0.0
        } else {
            self.frame_count as f64 * self.hop as f64 / self.sample_rate as f64
        }
    }

    /// Bits per second actually stored on disk (16 bits per token).
    pub fn on_disk_bps(&self) -> f64 {
        self.frame_rate_hz() * self.streams as f64 * 16.0
    }
}

/// Stream layout fields shared by every file from one codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamFormat {
    pub sample_rate: u32,
    pub hop: u32,
    pub bits_per_code: u8,
}

pub fn write_tokens(m: &TokenMatrix, format: StreamFormat) -> Result<Vec<u8>> {
    let limit = 1u32 << format.bits_per_code.min(16);
    m.check_range(limit.min(INACTIVE_TOKEN as u32))?;
    let frames = u32::try_from(m.frames).map_err(|_| Error::InvalidConfig("too many frames".into()))?;
    let streams = u16::try_from(m.streams).map_err(|_| Error::InvalidConfig("too many streams".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * m.values.len());
    out.extend_from_slice(&TOKEN_MAGIC);
    out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
    out.extend_from_slice(&u16::from(m.has_semantic).to_le_bytes());
    out.extend_from_slice(&format.sample_rate.to_le_bytes());
    out.extend_from_slice(&format.hop.to_le_bytes());
    out.extend_from_slice(&streams.to_le_bytes());
    out.push(format.bits_per_code);
    out.push(0);
    out.extend_from_slice(&frames.to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.unwrap_or(INACTIVE_TOKEN).to_le_bytes());
    }
    Ok(out)
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn read_header(bytes: &[u8]) -> Result<TokenFileHeader> {
    if bytes.len() < 4 || bytes[..4] != TOKEN_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            expected: TOKEN_MAGIC,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = le_u16(bytes, 4);
    if version != TOKEN_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(TokenFileHeader {
        version,
        has_semantic: le_u16(bytes, 6) & 1 == 1,
        sample_rate: le_u32(bytes, 8),
        hop: le_u32(bytes, 12),
        streams: le_u16(bytes, 16),
        bits_per_code: bytes[18],
        frame_count: le_u32(bytes, 20),
    })
}

pub fn read_tokens(bytes: &[u8]) -> Result<(TokenMatrix, TokenFileHeader)> {
    let header = read_header(bytes)?;
    let (frames, streams) = (header.frame_count as usize, header.streams as usize);
    let expected = HEADER_LEN + 2 * frames * streams;
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    let limit = (1u32 << header.bits_per_code.min(16)).min(INACTIVE_TOKEN as u32);
    let values = bytes[HEADER_LEN..]
        .chunks_exact(2)
        .map(|c| match u16::from_le_bytes([c[0], c[1]]) {
            INACTIVE_TOKEN => Ok(None),
            v if (v as u32) < limit => Ok(Some(v)),
            v => Err(Error::TokenOutOfRange { value: v as u32, limit }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((TokenMatrix::new(frames, streams, header.has_semantic, values)?, header))
}

pub fn write_token_file(path: &Path, m: &TokenMatrix, format: StreamFormat) -> Result<()> {
    let bytes = write_tokens(m, format)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_token_file(path: &Path) -> Result<(TokenMatrix, TokenFileHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tokens(&bytes)
}

// -------------------------------------------------------------------------
// WAV

/// Reads 16-bit integer or 32-bit float PCM; stereo is averaged to mono.
pub fn wav_read(path: &Path) -> Result<PcmBuffer> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedWavEncoding(format!("{fmt:?} {bits}-bit")));
        }
    };
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedWavEncoding(format!("{channels} channels")));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect()
    };
    Ok(PcmBuffer::new(samples, spec.sample_rate))
}

/// Float sample to 16-bit with round-half-away-from-zero and clipping.
pub fn to_i16(v: f32) -> i16 {
    (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn wav_write(path: &Path, pcm: &PcmBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: pcm.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in &pcm.samples {
        w.write_sample(to_i16(s))?;
    }
    w.finalize()?;
    Ok(())
}
