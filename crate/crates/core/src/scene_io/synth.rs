//! Analytic benchmark scene: a textured background plane, a disk moving in
//! front of it and an occluder bar sweeping across the frame.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::frame_time;
use super::{ColorImage, Dataset, ScalarImage};
use crate::error::{Error, Result};
use crate::renderer::Camera;
use crate::rng;

/// Sinusoidal path of the disk center in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub center: [f64; 2],
    pub amplitude: [f64; 2],
    /// Full periods over the clip.
    pub cycles: f64,
    pub phase: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            center: [32.0, 30.0],
            amplitude: [12.0, 6.0],
            cycles: 1.0,
            phase: 0.0,
        }
    }
}

/// A vertical bar moving linearly from `start_col` to `end_col`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OccluderSpec {
    pub enabled: bool,
    pub width: usize,
    pub start_col: f64,
    pub end_col: f64,
    pub depth: f64,
    pub color: [f64; 3],
}

impl Default for OccluderSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            width: 8,
            start_col: 4.0,
            end_col: 52.0,
            depth: 1.2,
            color: [0.1, 0.75, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
    pub focal: f64,
    pub near: f64,
    pub far: f64,
    pub texture_seed: u64,
    pub background_depth: f64,
    pub object_depth: f64,
    pub object_radius: f64,
    pub trajectory: TrajectorySpec,
    pub occluder: OccluderSpec,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 30,
            fps: 10.0,
            focal: 64.0,
            near: 1.0,
            far: 10.0,
            texture_seed: 7,
            background_depth: 3.0,
            object_depth: 1.6,
            object_radius: 9.0,
            trajectory: TrajectorySpec::default(),
            occluder: OccluderSpec::default(),
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic scene: {m}")));
        if self.frames < 2 {
            return bad("at least 2 frames are required");
        }
        if !(self.near < self.object_depth && self.object_depth < self.background_depth && self.background_depth <= self.far) {
            return bad("depths must satisfy near < object < background <= far");
        }
        if self.object_radius <= 0.0 {
            return bad("object radius must be positive");
        }
        if self.occluder.enabled {
            if self.occluder.width == 0 || 2 * self.occluder.width >= self.width {
                return bad("occluder must be non-empty and cover less than half the frame");
            }
            if !(self.near <= self.occluder.depth && self.occluder.depth < self.object_depth) {
                return bad("occluder must sit between the near plane and the object");
            }
        }
        self.camera().validate()
    }

    pub fn camera(&self) -> Camera {
        Camera {
            width: self.width,
            height: self.height,
            fx: self.focal,
            fy: self.focal,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            near: self.near,
            far: self.far,
        }
    }

    /// Disk center `(col, row)` at normalized time `t`.
    pub fn object_center(&self, t: f64) -> [f64; 2] {
        let tr = &self.trajectory;
        let a = 2.0 * PI * tr.cycles * t + tr.phase;
        [tr.center[0] + tr.amplitude[0] * a.sin(), tr.center[1] + tr.amplitude[1] * (2.0 * a).sin()]
    }

    /// Occluded column range `[lo, hi)` of frame `index`, if any.
    pub fn occluder_columns(&self, index: usize) -> Option<(usize, usize)> {
        let oc = &self.occluder;
        if !oc.enabled {
            return None;
        }
        let f = index as f64 / (self.frames - 1) as f64;
        let left = (oc.start_col + f * (oc.end_col - oc.start_col)).round().max(0.0) as usize;
        let lo = left.min(self.width);
        Some((lo, (lo + oc.width).min(self.width)))
    }

    pub fn in_object(&self, row: usize, col: usize, t: f64) -> bool {
        let [cx, cy] = self.object_center(t);
        let dx = col as f64 + 0.5 - cx;
        let dy = row as f64 + 0.5 - cy;
        dx * dx + dy * dy <= self.object_radius * self.object_radius
    }
}

/// Generated dataset plus occluder-free ground truth.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub spec: SynthSceneSpec,
    pub dataset: Dataset,
    pub ground_truth: Vec<ColorImage>,
    pub ground_truth_depth: Vec<ScalarImage>,
}

impl SynthScene {
    /// The occluder-free clip as a dataset with all-ones masks.
    pub fn truth_dataset(&self) -> Result<Dataset> {
        let cam = self.dataset.camera.clone();
        let ones = vec![ScalarImage::filled(cam.width, cam.height, 1.0); self.ground_truth.len()];
        Dataset::new(self.ground_truth.clone(), self.ground_truth_depth.clone(), ones, cam, self.dataset.fps)
    }
}

struct Texture {
    // per channel: (amplitude, kx, ky, phase)
    waves: [[(f64, f64, f64, f64); 3]; 3],
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut g = rng::stream(seed, &[0x7E47]);
        let mut waves = [[(0.0, 0.0, 0.0, 0.0); 3]; 3];
        for ch in waves.iter_mut() {
            for w in ch.iter_mut() {
                *w = (
                    g.gen_range(0.06..0.12),
                    g.gen_range(-2.5..2.5),
                    g.gen_range(-2.5..2.5),
                    g.gen_range(0.0..2.0 * PI),
                );
            }
        }
        Self { waves }
    }

    /// Color at normalized image position `(x, y)`.
    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let base = [0.45, 0.5, 0.55];
        std::array::from_fn(|c| {
            let v: f64 = self.waves[c]
                .iter()
                .map(|&(a, kx, ky, p)| a * (2.0 * PI * (kx * x + ky * y) + p).sin())
                .sum();
            (base[c] + v).clamp(0.0, 1.0)
        })
    }
}

fn object_color(spec: &SynthSceneSpec, row: usize, col: usize, t: f64) -> [f64; 3] {
    let [cx, cy] = spec.object_center(t);
    let r = ((col as f64 + 0.5 - cx).hypot(row as f64 + 0.5 - cy) / spec.object_radius).min(1.0);
    let inner = [0.9, 0.2, 0.15];
    let outer = [0.95, 0.7, 0.1];
    std::array::from_fn(|c| inner[c] + r * (outer[c] - inner[c]))
}

pub fn generate_synthetic(spec: &SynthSceneSpec, seed: u64) -> Result<SynthScene> {
    spec.validate()?;
    let texture = Texture::new(rng::derive_seed(seed, &[spec.texture_seed]));
    let (w, h, t_count) = (spec.width, spec.height, spec.frames);
    let per_frame: Vec<_> = (0..t_count)
        .into_par_iter()
        .map(|k| {
            let t = frame_time(k, t_count);
            let occ = spec.occluder_columns(k);
            let mut gt = Vec::with_capacity(w * h);
            let mut gt_depth = Vec::with_capacity(w * h);
            let mut frame = Vec::with_capacity(w * h);
            let mut depth = Vec::with_capacity(w * h);
            let mut mask = Vec::with_capacity(w * h);
            for row in 0..h {
                for col in 0..w {
                    let (c, z) = if spec.in_object(row, col, t) {
                        (object_color(spec, row, col, t), spec.object_depth)
                    } else {
                        (texture.at(col as f64 / w as f64, row as f64 / h as f64), spec.background_depth)
                    };
                    gt.push(c);
                    gt_depth.push(z);
                    match occ {
                        Some((lo, hi)) if (lo..hi).contains(&col) => {
                            frame.push(spec.occluder.color);
                            depth.push(spec.occluder.depth);
                            mask.push(0.0);
                        }
                        _ => {
                            frame.push(c);
                            depth.push(z);
                            mask.push(1.0);
                        }
                    }
                }
            }
            (
                ColorImage::new(w, h, gt),
                ScalarImage::new(w, h, gt_depth),
                ColorImage::new(w, h, frame),
                ScalarImage::new(w, h, depth),
                ScalarImage::new(w, h, mask),
            )
        })
        .collect();
    let mut ground_truth = Vec::with_capacity(t_count);
    let mut ground_truth_depth = Vec::with_capacity(t_count);
    let mut frames = Vec::with_capacity(t_count);
    let mut depths = Vec::with_capacity(t_count);
    let mut masks = Vec::with_capacity(t_count);
    for (g, gd, f, d, m) in per_frame {
        ground_truth.push(g);
        ground_truth_depth.push(gd);
        frames.push(f);
        depths.push(d);
        masks.push(m);
    }
    let dataset = Dataset::new(frames, depths, masks, spec.camera(), spec.fps)?;
    Ok(SynthScene {
        spec: spec.clone(),
        dataset,
        ground_truth,
        ground_truth_depth,
    })
}
