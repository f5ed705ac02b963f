//! Portable float map reading and writing.
//!
//! The format: an ASCII header of four whitespace-separated tokens — `PF`
//! (3 channels) or `Pf` (1 channel), width, height, scale — followed by a
//! single whitespace byte and `width * height * channels` float32 values.
//! A negative scale marks little-endian data; positive marks big-endian.
//! Rows are stored bottom-up: the first row in the file is the bottom image
//! row. In memory this module keeps rows top-down, flipping on both read and
//! write, so a write-then-read round trip is bitwise exact. Writers always
//! emit little-endian (scale -1.0).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::KernelField;

/// Float raster with 1 or 3 interleaved channels, row-major, top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatRaster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FloatRaster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::InvalidParameter {
                parameter: "raster",
                reason: format!("unsupported shape {width}x{height}x{channels}"),
            });
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidParameter {
                parameter: "raster",
                reason: format!(
                    "{} values do not fill {width}x{height}x{channels}",
                    data.len()
                ),
            });
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Single-channel raster from f64 samples (narrowed to f32).
    pub fn from_scalar(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Self::new(width, height, 1, values.iter().map(|&v| v as f32).collect())
    }

    /// The raster as f64 samples (single channel only).
    pub fn to_scalar(&self) -> Result<Vec<f64>> {
        if self.channels != 1 {
            return Err(Error::InvalidParameter {
                parameter: "raster",
                reason: format!("expected 1 channel, raster has {}", self.channels),
            });
        }
        Ok(self.data.iter().map(|&v| v as f64).collect())
    }

    /// Three-channel raster holding a kernel field's raw parameters.
    pub fn from_field(field: &KernelField) -> Self {
        let data = field
            .raws()
            .iter()
            .flat_map(|raw| raw.iter().map(|&v| v as f32))
            .collect();
        Self {
            width: field.width(),
            height: field.height(),
            channels: 3,
            data,
        }
    }

    /// Interprets a three-channel raster as a kernel field.
    pub fn to_field(&self) -> Result<KernelField> {
        if self.channels != 3 {
            return Err(Error::InvalidParameter {
                parameter: "raster",
                reason: format!("kernel fields need 3 channels, raster has {}", self.channels),
            });
        }
        let raws = self
            .data
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        KernelField::new(self.width, self.height, raws)
    }
}

/// Header scanner that tracks the byte offset for error reporting.
struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Option<(&'a [u8], u64)> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| (&self.bytes[start..self.pos], start as u64))
    }
}

pub fn read_pfm(path: &Path) -> Result<FloatRaster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = Tokens { bytes: &bytes, pos: 0 };

    let (magic, off) = tokens
        .next()
        .ok_or_else(|| Error::format(path, "empty file", 0))?;
    let channels = match magic {
        b"PF" => 3,
        b"Pf" => 1,
        other => {
            let shown = String::from_utf8_lossy(other);
            return Err(Error::format(path, format!("bad magic `{shown}`"), off));
        }
    };

    let mut dim = |name: &str| -> Result<usize> {
        let (tok, off) = tokens
            .next()
            .ok_or_else(|| Error::format(path, format!("missing {name}"), bytes.len() as u64))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| {
                Error::format(path, format!("bad {name} `{}`", String::from_utf8_lossy(tok)), off)
            })
    };
    let width = dim("width")?;
    let height = dim("height")?;

    let (scale_tok, scale_off) = tokens
        .next()
        .ok_or_else(|| Error::format(path, "missing scale", bytes.len() as u64))?;
    let scale: f64 = std::str::from_utf8(scale_tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&v: &f64| v.is_finite() && v != 0.0)
        .ok_or_else(|| {
            Error::format(
                path,
                format!("bad scale `{}`", String::from_utf8_lossy(scale_tok)),
                scale_off,
            )
        })?;
    let little_endian = scale < 0.0;

    // Exactly one whitespace byte separates the header from the payload.
    let payload_start = tokens.pos + 1;
    if tokens.pos >= bytes.len() || !bytes[tokens.pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing header terminator", tokens.pos as u64));
    }

    let count = width * height * channels;
    let need = count * 4;
    let have = bytes.len() - payload_start;
    if have < need {
        return Err(Error::format(
            path,
            format!("payload holds {have} bytes, raster needs {need}"),
            bytes.len() as u64,
        ));
    }

    let payload = &bytes[payload_start..payload_start + need];
    let from_bits = if little_endian { f32::from_le_bytes } else { f32::from_be_bytes };
    let mut data = vec![0.0f32; count];
    let row_len = width * channels;
    for file_row in 0..height {
        let mem_row = height - 1 - file_row;
        for i in 0..row_len {
            let src = (file_row * row_len + i) * 4;
            data[mem_row * row_len + i] =
                from_bits(payload[src..src + 4].try_into().expect("4-byte chunk"));
        }
    }
    FloatRaster::new(width, height, channels, data)
}

pub fn write_pfm(path: &Path, raster: &FloatRaster) -> Result<()> {
    let magic = if raster.channels == 3 { "PF" } else { "Pf" };
    let mut bytes =
        format!("{magic}\n{} {}\n-1.0\n", raster.width, raster.height).into_bytes();
    bytes.reserve(raster.data.len() * 4);
    let row_len = raster.width * raster.channels;
    for mem_row in (0..raster.height).rev() {
        for i in 0..row_len {
            bytes.extend_from_slice(&raster.data[mem_row * row_len + i].to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
