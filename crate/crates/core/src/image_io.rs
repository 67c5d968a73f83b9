//! Raster images (guides, masks, normal visualizations) and CSV traces.

use crate::geometry::NormalMap;
use crate::graph::{GraphError, GuideImage};
use crate::grid::Grid;
use crate::pfm::{read_pfm_scalar, write_pfm_vec3, PfmError};
use crate::solver::ScaleTrace;
use image::{GrayImage, ImageBuffer, Rgb, RgbImage};
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Pfm(#[from] PfmError),
    #[error(transparent)]
    Guide(#[from] GraphError),
    #[error("malformed PGM: {0}")]
    MalformedPgm(String),
    #[error("confidence value {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
}

/// Loads a PNG/PPM/PGM guide, normalized to `[0, 1]`. Color images keep
/// three channels; grayscale images keep one.
pub fn load_guide(path: impl AsRef<Path>) -> Result<GuideImage, ImageIoError> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let guide = if img.color().has_color() {
        let data = img
            .to_rgb32f()
            .into_raw()
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0) as f64)
            .collect();
        GuideImage::new(w, h, 3, data)?
    } else {
        let data = img
            .to_luma32f()
            .into_raw()
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0) as f64)
            .collect();
        GuideImage::new(w, h, 1, data)?
    };
    Ok(guide)
}

/// Writes a guide as 8-bit PNG (or PPM/PGM, chosen by extension).
pub fn save_guide(path: impl AsRef<Path>, guide: &GuideImage) -> Result<(), ImageIoError> {
    let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let (w, h) = (guide.width() as u32, guide.height() as u32);
    let bytes: Vec<u8> = guide.data().iter().map(|&v| to_u8(v)).collect();
    if guide.channels() == 3 {
        RgbImage::from_raw(w, h, bytes)
            .expect("buffer size")
            .save(path)?;
    } else {
        GrayImage::from_raw(w, h, bytes)
            .expect("buffer size")
            .save(path)?;
    }
    Ok(())
}

/// Loads a confidence map from PFM (non-finite samples become 0) or PGM
/// (normalized by its maxval). Values must lie in `[0, 1]`.
pub fn load_confidence(path: impl AsRef<Path>) -> Result<Grid<f64>, ImageIoError> {
    let path = path.as_ref();
    let is_pfm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    let grid = if is_pfm {
        let (values, valid) = read_pfm_scalar(path)?;
        Grid::from_fn(values.width(), values.height(), |x, y| {
            if *valid.get(x, y) {
                *values.get(x, y)
            } else {
                0.0
            }
        })
    } else {
        decode_pgm(&fs::read(path)?)?
    };
    if let Some(&bad) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(ImageIoError::ConfidenceOutOfRange(bad));
    }
    Ok(grid)
}

/// Parses binary (`P5`) or ASCII (`P2`) PGM, dividing samples by maxval.
pub fn decode_pgm(bytes: &[u8]) -> Result<Grid<f64>, ImageIoError> {
    let bad = |msg: &str| ImageIoError::MalformedPgm(msg.to_string());
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String, ImageIoError> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    let ascii = match magic.as_str() {
        "P5" => false,
        "P2" => true,
        _ => return Err(bad("expected P5 or P2")),
    };
    let num = |pos: &mut usize| -> Result<usize, ImageIoError> {
        token(pos)?.parse::<usize>().map_err(|_| bad("bad number"))
    };
    let width = num(&mut pos)?;
    let height = num(&mut pos)?;
    let maxval = num(&mut pos)?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval must be in 1..=65535"));
    }
    let n = width * height;
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(n);
    if ascii {
        for _ in 0..n {
            let v = num(&mut pos)?;
            data.push(v as f64 / scale);
        }
    } else {
        pos += 1; // single whitespace after maxval
        let bpp = if maxval < 256 { 1 } else { 2 };
        let payload = bytes.get(pos..).unwrap_or(&[]);
        if payload.len() < n * bpp {
            return Err(bad("truncated payload"));
        }
        for k in 0..n {
            let v = if bpp == 1 {
                payload[k] as usize
            } else {
                u16::from_be_bytes([payload[2 * k], payload[2 * k + 1]]) as usize
            };
            data.push(v as f64 / scale);
        }
    }
    Ok(Grid::from_vec(width, height, data))
}

/// Maps unit normals to RGB with `round(255·(n + 1)/2)`; invalid pixels are white.
pub fn colorize_normals(normals: &NormalMap) -> RgbImage {
    let to_u8 = |c: f64| (255.0 * (c + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8;
    ImageBuffer::from_fn(
        normals.width() as u32,
        normals.height() as u32,
        |x, y| match normals.get(x as usize, y as usize) {
            Some(n) => Rgb([to_u8(n[0]), to_u8(n[1]), to_u8(n[2])]),
            None => Rgb([255, 255, 255]),
        },
    )
}

/// Stores a slope map as a 3-channel PFM `(uˣ, uʸ, 0)`.
pub fn write_u_map(path: impl AsRef<Path>, u: &Grid<[f64; 2]>) -> Result<(), PfmError> {
    write_pfm_vec3(path, &u.map(|v| [v[0], v[1], 0.0]))
}

pub fn read_u_map(path: impl AsRef<Path>) -> Result<Grid<[f64; 2]>, PfmError> {
    Ok(crate::pfm::read_pfm_vec3(path)?.map(|v| [v[0], v[1]]))
}

/// Stores normals as a 3-channel PFM; invalid pixels are written as NaN.
pub fn write_normal_map(path: impl AsRef<Path>, normals: &NormalMap) -> Result<(), PfmError> {
    let grid = Grid::from_fn(normals.width(), normals.height(), |x, y| {
        normals.get(x, y).unwrap_or([f64::NAN; 3])
    });
    write_pfm_vec3(path, &grid)
}

/// Writes `iteration,scale,energy` rows for every trace.
pub fn write_traces_csv<W: Write>(mut out: W, traces: &[ScaleTrace]) -> io::Result<()> {
    writeln!(out, "iteration,scale,energy")?;
    for trace in traces {
        for (it, e) in trace.energies.iter().enumerate() {
            writeln!(out, "{it},{},{e:e}", trace.scale)?;
        }
    }
    Ok(())
}
