//! Datasets, the synthetic benchmark scene, depth conversion, image metrics
//! and point-cloud export.

mod dataset;
mod depth;
mod evaluate;
mod metrics;
mod pointcloud;
mod synth;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use serde::Serialize;

use crate::error::{invalid, Result};

pub use dataset::{load_dataset, save_dataset, Dataset, Manifest, DEFAULT_DEPTH_SCALE};
pub use dataset::frame_time;
pub use depth::{metric_depth_to_ray_depth, metric_to_ray_parameter, ray_depth_to_metric, RayDepthTargets};
pub use evaluate::{
    evaluate_frames, holdout_split, render_to_images, summarize, FrameMetrics, MetricsSummary, METRICS_HEADER,
};
pub use metrics::{psnr, psnr_masked, ssim, ssim_masked, SSIM_WINDOW};
pub use pointcloud::{backproject, export_pointcloud, write_ply, ColoredPoint, OPACITY_THRESHOLD};
pub use synth::{generate_synthetic, OccluderSpec, SynthScene, SynthSceneSpec, TrajectorySpec};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count does not match dimensions");
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn same_shape(&self, other: &ColorImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixels[y as usize * self.width + x as usize];
            Rgb(p.map(quantize8))
        })
    }
}

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ScalarImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "value count does not match dimensions");
        Self { width, height, values }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn same_shape(&self, other: &ScalarImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

pub(crate) fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes through a temporary sibling file and renames it into place.
pub fn atomic_write(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn png_bytes<P>(img: &ImageBuffer<P, Vec<P::Subpixel>>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    // the encoder needs Seek, so encode into memory before the atomic write
    let mut mem = std::io::Cursor::new(Vec::new());
    img.write_to(&mut mem, image::ImageFormat::Png)?;
    Ok(mem.into_inner())
}

/// 8-bit RGB PNG.
pub fn write_color_png(path: &Path, img: &ColorImage) -> Result<()> {
    let bytes = png_bytes(&img.to_rgb8())?;
    atomic_write(path, |w| Ok(w.write_all(&bytes)?))
}

/// 16-bit grayscale PNG storing `round(value * scale)`.
pub fn write_gray16_png(path: &Path, img: &ScalarImage, scale: f64) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let v = img.values[y as usize * img.width + x as usize] * scale;
        Luma([v.round().clamp(0.0, u16::MAX as f64) as u16])
    });
    let bytes = png_bytes(&buf)?;
    atomic_write(path, |w| Ok(w.write_all(&bytes)?))
}

/// 8-bit grayscale PNG of values in `[0, 1]`.
pub fn write_gray8_png(path: &Path, img: &ScalarImage) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        Luma([quantize8(img.values[y as usize * img.width + x as usize])])
    });
    let bytes = png_bytes(&buf)?;
    atomic_write(path, |w| Ok(w.write_all(&bytes)?))
}

#[derive(Serialize)]
struct DepthSidecar<'a> {
    quantity: &'a str,
    scale: f64,
    width: usize,
    height: usize,
}

/// Rendered NDC depth as a 16-bit PNG plus a JSON sidecar recording the
/// scale: `value = png / scale`.
pub fn write_depth_png(path: &Path, depth: &ScalarImage) -> Result<()> {
    let scale = u16::MAX as f64;
    write_gray16_png(path, depth, scale)?;
    let sidecar = DepthSidecar {
        quantity: "ndc_ray_parameter",
        scale,
        width: depth.width,
        height: depth.height,
    };
    atomic_write(&path.with_extension("json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &sidecar)?;
        Ok(())
    })
}

/// Non-negative map normalized by its maximum into a 16-bit heatmap.
pub fn write_heatmap_png(path: &Path, map: &ScalarImage) -> Result<()> {
    let max = map.values.iter().cloned().fold(0.0, f64::max);
    let norm = if max > 0.0 { 1.0 / max } else { 0.0 };
    let scaled = ScalarImage::new(map.width, map.height, map.values.iter().map(|v| v * norm).collect());
    write_gray16_png(path, &scaled, u16::MAX as f64)
}
