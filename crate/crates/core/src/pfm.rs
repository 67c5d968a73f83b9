//! Portable float map (PFM) reading and writing.
//!
//! Layout: `Pf` (one channel) or `PF` (three channels), ASCII width and
//! height, then a scale whose sign gives the byte order (negative means
//! little-endian), a single whitespace byte, and 32-bit floats stored bottom
//! row first. Files are always written little-endian with scale `-1`.

use crate::grid::Grid;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfmError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed PFM header: {0}")]
    MalformedHeader(String),
    #[error("truncated PFM payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unsupported channel count {0}")]
    UnsupportedChannelCount(usize),
}

/// Decoded PFM contents with rows ordered top to bottom and channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, PfmError> {
        if channels != 1 && channels != 3 {
            return Err(PfmError::UnsupportedChannelCount(channels));
        }
        assert_eq!(
            data.len(),
            width * height * channels,
            "PFM buffer size mismatch"
        );
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn token(&mut self) -> Result<&'a str, PfmError> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PfmError::MalformedHeader("unexpected end of header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| PfmError::MalformedHeader("non-ASCII header".into()))
    }
}

pub fn decode_pfm(bytes: &[u8]) -> Result<PfmImage, PfmError> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let channels = match cur.token()? {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(PfmError::MalformedHeader(format!("bad magic `{other}`"))),
    };
    let mut dim = |name: &str| -> Result<usize, PfmError> {
        let tok = cur.token()?;
        tok.parse::<usize>()
            .map_err(|_| PfmError::MalformedHeader(format!("bad {name} `{tok}`")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let scale_tok = cur.token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| PfmError::MalformedHeader(format!("bad scale `{scale_tok}`")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(PfmError::MalformedHeader(format!(
            "scale must be non-zero, got {scale_tok}"
        )));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => {
            return Err(PfmError::MalformedHeader(
                "missing separator after scale".into(),
            ))
        }
    }
    let payload = &bytes[cur.pos + 1..];

    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| PfmError::MalformedHeader("dimensions overflow".into()))?;
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| PfmError::MalformedHeader("dimensions overflow".into()))?;
    if payload.len() < expected {
        return Err(PfmError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }

    let little = scale < 0.0;
    let row_len = width * channels;
    let mut data = vec![0f32; count];
    for (k, chunk) in payload[..expected].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // Stored bottom-to-top.
        let (file_row, col) = (k / row_len, k % row_len);
        data[(height - 1 - file_row) * row_len + col] = v;
    }
    Ok(PfmImage {
        width,
        height,
        channels,
        data,
    })
}

pub fn encode_pfm(img: &PfmImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "PF" } else { "Pf" };
    let header = format!("{magic}\n{} {}\n-1\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len() * 4);
    out.extend_from_slice(header.as_bytes());
    let row_len = img.width * img.channels;
    if row_len > 0 {
        for row in img.data.chunks_exact(row_len).rev() {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<PfmImage, PfmError> {
    decode_pfm(&fs::read(path)?)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &PfmImage) -> Result<(), PfmError> {
    fs::write(path, encode_pfm(img))?;
    Ok(())
}

/// Reads a single-channel PFM. Non-finite samples are reported invalid.
pub fn read_pfm_scalar(path: impl AsRef<Path>) -> Result<(Grid<f64>, Grid<bool>), PfmError> {
    let img = read_pfm(path)?;
    if img.channels != 1 {
        return Err(PfmError::UnsupportedChannelCount(img.channels));
    }
    let values = Grid::from_vec(
        img.width,
        img.height,
        img.data.iter().map(|&v| v as f64).collect(),
    );
    let valid = values.map(|v| v.is_finite());
    Ok((values, valid))
}

/// Writes a single-channel PFM (values narrowed to `f32`).
pub fn write_pfm_scalar(path: impl AsRef<Path>, values: &Grid<f64>) -> Result<(), PfmError> {
    let img = PfmImage::new(
        values.width(),
        values.height(),
        1,
        values.iter().map(|&v| v as f32).collect(),
    )?;
    write_pfm(path, &img)
}

/// Reads a three-channel PFM into per-pixel vectors.
pub fn read_pfm_vec3(path: impl AsRef<Path>) -> Result<Grid<[f64; 3]>, PfmError> {
    let img = read_pfm(path)?;
    if img.channels != 3 {
        return Err(PfmError::UnsupportedChannelCount(img.channels));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect();
    Ok(Grid::from_vec(img.width, img.height, data))
}

pub fn write_pfm_vec3(path: impl AsRef<Path>, values: &Grid<[f64; 3]>) -> Result<(), PfmError> {
    let data = values.iter().flat_map(|v| v.map(|c| c as f32)).collect();
    write_pfm(
        path,
        &PfmImage::new(values.width(), values.height(), 3, data)?,
    )
}
