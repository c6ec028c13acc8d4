use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{atomic_write, write_color_png, write_gray16_png, write_gray8_png, ColorImage, ScalarImage};
use crate::error::{invalid, Error, Result};
use crate::renderer::Camera;

/// Metric depth is stored as `round(z * scale)` in 16-bit PNGs (millimeters).
pub const DEFAULT_DEPTH_SCALE: f64 = 1000.0;

const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frame_count: usize,
    pub fps: f64,
    pub camera: Camera,
    pub depth_scale: f64,
}

/// Frames, metric depth maps (0 = invalid) and occluder masks (0 = occluded)
/// from one stationary camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frames: Vec<ColorImage>,
    pub depths: Vec<ScalarImage>,
    pub masks: Vec<ScalarImage>,
    /// Normalized time of each frame.
    pub times: Vec<f64>,
    pub camera: Camera,
    pub fps: f64,
}

/// Time of 0-based frame `index` in a clip of `count` frames: `(index + 1) / count`.
pub fn frame_time(index: usize, count: usize) -> f64 {
    (index + 1) as f64 / count as f64
}

impl Dataset {
    pub fn new(
        frames: Vec<ColorImage>,
        depths: Vec<ScalarImage>,
        masks: Vec<ScalarImage>,
        camera: Camera,
        fps: f64,
    ) -> Result<Self> {
        let t = frames.len();
        let ds = Self {
            times: (0..t).map(|i| frame_time(i, t)).collect(),
            frames,
            depths,
            masks,
            camera,
            fps,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let t = self.frames.len();
        if t < 2 {
            return Err(invalid(format!("a dataset needs at least 2 frames, got {t}")));
        }
        if self.depths.len() != t || self.masks.len() != t || self.times.len() != t {
            return Err(invalid("frame, depth, mask and time counts differ"));
        }
        let (w, h) = (self.camera.width, self.camera.height);
        let color_ok = self.frames.iter().all(|f| f.width() == w && f.height() == h);
        let scalar_ok = self
            .depths
            .iter()
            .chain(&self.masks)
            .all(|m| m.width() == w && m.height() == h);
        if !color_ok || !scalar_ok {
            return Err(invalid(format!("all images must be {w}x{h}")));
        }
        if self.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(invalid("frame times must lie in [0, 1]"));
        }
        Ok(())
    }

    /// The frames at `indices`, keeping their original times.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(invalid(format!("frame {bad} out of range")));
        }
        let pick = |i: &usize| *i;
        let ds = Self {
            frames: indices.iter().map(|i| self.frames[pick(i)].clone()).collect(),
            depths: indices.iter().map(|i| self.depths[pick(i)].clone()).collect(),
            masks: indices.iter().map(|i| self.masks[pick(i)].clone()).collect(),
            times: indices.iter().map(|i| self.times[pick(i)]).collect(),
            camera: self.camera.clone(),
            fps: self.fps,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn frame_path(dir: &Path, kind: &str, i: usize) -> PathBuf {
    dir.join(format!("{kind}_{i:04}.png"))
}

/// Writes `manifest.json` plus `frame_%04d.png` (8-bit RGB),
/// `depth_%04d.png` (16-bit, metric times `depth_scale`) and `mask_%04d.png`.
pub fn save_dataset(dataset: &Dataset, dir: &Path, depth_scale: f64) -> Result<()> {
    dataset.validate()?;
    std::fs::create_dir_all(dir)?;
    (0..dataset.len()).into_par_iter().try_for_each(|i| -> Result<()> {
        write_color_png(&frame_path(dir, "frame", i), &dataset.frames[i])?;
        write_gray16_png(&frame_path(dir, "depth", i), &dataset.depths[i], depth_scale)?;
        write_gray8_png(&frame_path(dir, "mask", i), &dataset.masks[i])
    })?;
    let manifest = Manifest {
        frame_count: dataset.len(),
        fps: dataset.fps,
        camera: dataset.camera.clone(),
        depth_scale,
    };
    atomic_write(&dir.join(MANIFEST), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        Ok(())
    })
}

fn load_err(path: &Path, reason: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(load_err(path, "file is missing"));
    }
    image::open(path).map_err(|e| load_err(path, e))
}

fn check_dims(path: &Path, img: &image::DynamicImage, camera: &Camera) -> Result<()> {
    if img.width() as usize != camera.width || img.height() as usize != camera.height {
        return Err(load_err(
            path,
            format!(
                "image is {}x{}, manifest says {}x{}",
                img.width(),
                img.height(),
                camera.width,
                camera.height
            ),
        ));
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| load_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| load_err(&manifest_path, e))?;
    manifest
        .camera
        .validate()
        .map_err(|e| load_err(&manifest_path, e))?;
    if !(manifest.depth_scale > 0.0) {
        return Err(load_err(&manifest_path, "depth_scale must be positive"));
    }
    let t = manifest.frame_count;
    let camera = &manifest.camera;
    // every listed file must exist and nothing past the count may linger
    for kind in ["frame", "depth", "mask"] {
        for i in 0..t {
            let p = frame_path(dir, kind, i);
            if !p.exists() {
                return Err(load_err(&p, "file is missing"));
            }
        }
        let extra = frame_path(dir, kind, t);
        if extra.exists() {
            return Err(load_err(&extra, format!("manifest lists {t} frames but more exist")));
        }
    }
    let loaded = (0..t)
        .into_par_iter()
        .map(|i| -> Result<(ColorImage, ScalarImage, ScalarImage)> {
            let fp = frame_path(dir, "frame", i);
            let img = open_image(&fp)?;
            check_dims(&fp, &img, camera)?;
            let rgb = img.to_rgb8();
            let frame = ColorImage::new(
                camera.width,
                camera.height,
                rgb.pixels().map(|p| p.0.map(|c| c as f64 / 255.0)).collect(),
            );

            let dp = frame_path(dir, "depth", i);
            let img = open_image(&dp)?;
            check_dims(&dp, &img, camera)?;
            let depth = ScalarImage::new(
                camera.width,
                camera.height,
                img.to_luma16().pixels().map(|p| p.0[0] as f64 / manifest.depth_scale).collect(),
            );

            let mp = frame_path(dir, "mask", i);
            let img = open_image(&mp)?;
            check_dims(&mp, &img, camera)?;
            let mask = ScalarImage::new(
                camera.width,
                camera.height,
                img.to_luma8()
                    .pixels()
                    .map(|p| if p.0[0] as f64 / 255.0 >= 0.5 { 1.0 } else { 0.0 })
                    .collect(),
            );
            Ok((frame, depth, mask))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut frames = Vec::with_capacity(t);
    let mut depths = Vec::with_capacity(t);
    let mut masks = Vec::with_capacity(t);
    for (f, d, m) in loaded {
        frames.push(f);
        depths.push(d);
        masks.push(m);
    }
    Dataset::new(frames, depths, masks, manifest.camera, manifest.fps).map_err(|e| load_err(&manifest_path, e))
}
