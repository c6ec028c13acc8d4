//! Held-out frame evaluation against occluder-free ground truth.

use serde::Serialize;

use super::depth::metric_depth_to_ray_depth;
use super::metrics::{psnr, psnr_masked, ssim, ssim_masked};
use super::{ColorImage, Dataset, ScalarImage};
use crate::checkpoint::Model;
use crate::error::{invalid, Result};
use crate::renderer::{render_frame, Camera, FrameRender};

/// `count` evenly spread frame indices of a `total`-frame clip, and the rest.
/// For 30 frames and 5 held out this gives 3, 9, 15, 21, 27.
pub fn holdout_split(total: usize, count: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if count == 0 || total < count + 2 {
        return Err(invalid(format!("cannot hold out {count} of {total} frames and keep two for training")));
    }
    let held: Vec<usize> = (0..count).map(|k| ((2 * k + 1) * total) / (2 * count)).collect();
    let train = (0..total).filter(|i| !held.contains(i)).collect();
    Ok((train, held))
}

/// Per-frame quality numbers. Occluded-region entries are `None` for frames
/// without occluded pixels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub time: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_occluded: Option<f64>,
    pub ssim_occluded: Option<f64>,
    /// PSNR of the input frame itself over the occluded region.
    pub passthrough_psnr_occluded: Option<f64>,
    /// Mean absolute error of rendered NDC depth against the ground truth.
    pub depth_mae: f64,
}

pub const METRICS_HEADER: &str =
    "frame,time,psnr,ssim,psnr_occluded,ssim_occluded,passthrough_psnr_occluded,depth_mae";

impl FrameMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{:.6},{},{},{},{:.6}",
            self.frame,
            self.time,
            self.psnr,
            self.ssim,
            opt(self.psnr_occluded),
            opt(self.ssim_occluded),
            opt(self.passthrough_psnr_occluded),
            self.depth_mae
        )
    }
}

/// Averages over frames; occluded-region means skip frames without a region.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_occluded: Option<f64>,
    pub passthrough_psnr_occluded: Option<f64>,
    pub depth_mae: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn summarize(rows: &[FrameMetrics]) -> Result<MetricsSummary> {
    if rows.is_empty() {
        return Err(invalid("no frames to summarize"));
    }
    Ok(MetricsSummary {
        psnr: mean(rows.iter().map(|r| r.psnr)).unwrap_or(f64::NAN),
        ssim: mean(rows.iter().map(|r| r.ssim)).unwrap_or(f64::NAN),
        psnr_occluded: mean(rows.iter().filter_map(|r| r.psnr_occluded)),
        passthrough_psnr_occluded: mean(rows.iter().filter_map(|r| r.passthrough_psnr_occluded)),
        depth_mae: mean(rows.iter().map(|r| r.depth_mae)).unwrap_or(f64::NAN),
    })
}

pub fn render_to_images(render: &FrameRender) -> (ColorImage, ScalarImage, ScalarImage) {
    let (w, h) = (render.width, render.height);
    (
        ColorImage::new(w, h, render.color.clone()),
        ScalarImage::new(w, h, render.depth.clone()),
        ScalarImage::new(w, h, render.opacity.clone()),
    )
}

/// Renders `frames` of `observed` and scores them against `truth`, whose
/// frames are the occluder-free images and metric depths of the same clip.
pub fn evaluate_frames(
    model: &Model,
    observed: &Dataset,
    truth: &Dataset,
    frames: &[usize],
    n_samples: usize,
) -> Result<Vec<FrameMetrics>> {
    if observed.len() != truth.len() || observed.camera != truth.camera {
        return Err(invalid("observed and ground-truth clips differ in length or camera"));
    }
    let cam: &Camera = &observed.camera;
    frames
        .iter()
        .map(|&i| {
            if i >= observed.len() {
                return Err(invalid(format!("frame {i} out of range")));
            }
            let t = observed.times[i];
            let render = render_frame(&model.planes, &model.decoder, cam, t, n_samples)?;
            let (color, depth, _) = render_to_images(&render);
            let gt = &truth.frames[i];
            let region = ScalarImage::new(
                cam.width,
                cam.height,
                observed.masks[i].values().iter().map(|&m| if m < 0.5 { 1.0 } else { 0.0 }).collect(),
            );
            let has_region = region.values().iter().any(|&v| v > 0.5);
            let target = metric_depth_to_ray_depth(&truth.depths[i], cam)?;
            let mut err = 0.0;
            let mut n = 0usize;
            for ((d, g), ok) in depth.values().iter().zip(target.values.values()).zip(target.valid.values()) {
                if *ok > 0.5 {
                    err += (d - g).abs();
                    n += 1;
                }
            }
            Ok(FrameMetrics {
                frame: i,
                time: t,
                psnr: psnr(&color, gt)?,
                ssim: ssim(&color, gt)?,
                psnr_occluded: if has_region { Some(psnr_masked(&color, gt, &region)?) } else { None },
                ssim_occluded: if has_region { ssim_masked(&color, gt, &region).ok() } else { None },
                passthrough_psnr_occluded: if has_region {
                    Some(psnr_masked(&observed.frames[i], gt, &region)?)
                } else {
                    None
                },
                depth_mae: if n > 0 { err / n as f64 } else { 0.0 },
            })
        })
        .collect()
}
