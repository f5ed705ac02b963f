//! 16-bit grayscale depth PNG ingestion: raw integer units divided by a
//! configurable scale give meters, with raw 0 as the invalid-pixel sentinel.

use std::path::Path;

use image::ImageReader;

use crate::error::{Error, Result};

/// Dense metric depth; 0 marks invalid pixels, valid entries are positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthRaster {
    pub width: usize,
    pub height: usize,
    /// Row-major meters, top row first.
    pub meters: Vec<f64>,
}

impl DepthRaster {
    pub fn new(width: usize, height: usize, meters: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || meters.len() != width * height {
            return Err(Error::InvalidParameter {
                parameter: "raster",
                reason: format!("{} values do not fill {width}x{height}", meters.len()),
            });
        }
        if meters.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(Error::InvalidParameter {
                parameter: "raster",
                reason: "depths must be finite and non-negative (0 = invalid)".into(),
            });
        }
        Ok(Self { width, height, meters })
    }

    pub fn is_valid(&self, px: usize, py: usize) -> bool {
        self.meters[py * self.width + px] > 0.0
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            parameter: "depth_scale",
            reason: format!("{scale} raw units per meter is not positive"),
        })
    }
}

/// Reads a 16-bit grayscale PNG as metric depth (`meters = raw / scale`).
pub fn read_depth_png16(path: &Path, scale: f64) -> Result<DepthRaster> {
    check_scale(scale)?;
    let image = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string(), 0))?;
    let gray = match image {
        image::DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::format(
                path,
                format!("expected 16-bit grayscale, got {:?}", other.color()),
                0,
            ));
        }
    };
    let (width, height) = (gray.width() as usize, gray.height() as usize);
    let meters = gray.pixels().map(|p| f64::from(p.0[0]) / scale).collect();
    DepthRaster::new(width, height, meters)
}

/// Writes metric depth as a 16-bit grayscale PNG (`raw = round(m * scale)`,
/// clamped to the u16 range; invalid pixels stay raw 0).
pub fn write_depth_png16(path: &Path, raster: &DepthRaster, scale: f64) -> Result<()> {
    check_scale(scale)?;
    let raw: Vec<u16> = raster
        .meters
        .iter()
        .map(|&m| (m * scale).round().clamp(0.0, f64::from(u16::MAX)) as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        raster.width as u32,
        raster.height as u32,
        raw,
    )
    .expect("raster dims match buffer");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
