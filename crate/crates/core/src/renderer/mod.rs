//! NDC rays, stratified quadrature and emission-absorption compositing.
//!
//! Cameras follow the OpenGL convention: x right, y up, looking down `-z`.
//! Rays are warped into forward-facing normalized device coordinates where
//! the near plane maps to `z = -1` and infinity to `z = +1`, so every ray
//! spans the ray parameter interval `[0, 1]`. Field queries use the NDC cube
//! affinely mapped to `[0, 1]^3`.

mod trace;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderParams;
use crate::error::{invalid, Error, Result};
use crate::field::FeaturePlaneSet;
use crate::rng;

pub use trace::{trace_rays, FieldCotangents, RayBatchTrace, RayCotangent};

/// Pinhole camera with metric near/far bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera image size must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Config("camera bounds need 0 < near < far".into()));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Camera-space direction through the pixel center, scaled to `z = -1`.
    pub fn pixel_direction(&self, row: usize, col: usize) -> [f64; 3] {
        [
            (col as f64 + 0.5 - self.cx) / self.fx,
            -(row as f64 + 0.5 - self.cy) / self.fy,
            -1.0,
        ]
    }

    /// Warps a camera-space ray into NDC. Returns `(origin, direction)`.
    pub fn to_ndc(&self, origin: [f64; 3], dir: [f64; 3]) -> ([f64; 3], [f64; 3]) {
        let n = self.near;
        // shift the origin onto the near plane
        let tn = -(n + origin[2]) / dir[2];
        let o = [origin[0] + tn * dir[0], origin[1] + tn * dir[1], origin[2] + tn * dir[2]];
        let sx = 2.0 * self.fx / self.width as f64;
        let sy = 2.0 * self.fy / self.height as f64;
        let off_x = 2.0 * self.cx / self.width as f64 - 1.0;
        let off_y = 1.0 - 2.0 * self.cy / self.height as f64;
        let ndc_o = [
            -sx * o[0] / o[2] + off_x,
            -sy * o[1] / o[2] + off_y,
            1.0 + 2.0 * n / o[2],
        ];
        let ndc_d = [
            -sx * (dir[0] / dir[2] - o[0] / o[2]),
            -sy * (dir[1] / dir[2] - o[1] / o[2]),
            -2.0 * n / o[2],
        ];
        (ndc_o, ndc_d)
    }
}

/// A ray in NDC with its world-space unit view direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    /// Unit direction in camera/world space; only the color decoder sees it.
    pub view_dir: [f64; 3],
    pub s_near: f64,
    pub s_far: f64,
    pub pixel: (usize, usize),
    pub t: f64,
}

impl Ray {
    /// Point at ray parameter `s`, mapped from the NDC cube to `[0, 1]^3`.
    pub fn unit_point(&self, s: f64) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.origin[i] + s * self.direction[i] + 1.0))
    }
}

pub fn make_ray(camera: &Camera, pixel: (usize, usize), t: f64) -> Result<Ray> {
    let (row, col) = pixel;
    if row >= camera.height || col >= camera.width {
        return Err(invalid(format!(
            "pixel {pixel:?} outside {}x{} image",
            camera.height, camera.width
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("time {t} outside [0, 1]")));
    }
    let d = camera.pixel_direction(row, col);
    let (origin, direction) = camera.to_ndc([0.0; 3], d);
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    Ok(Ray {
        origin,
        direction,
        view_dir: [d[0] / norm, d[1] / norm, d[2] / norm],
        s_near: 0.0,
        s_far: 1.0,
        pixel,
        t,
    })
}

/// Stratified sample positions and widths `(s_k, delta_k)` over `[s_n, s_f]`.
pub fn stratified_samples(ray: &Ray, n: usize, seed: u64, jitter: bool) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let mut out = vec![(0.0, 0.0); n];
    let mut r = rng::stream(seed, &[0x5A4D]);
    fill_stratified(ray.s_near, ray.s_far, jitter.then_some(&mut r), &mut out);
    Ok(out)
}

pub(crate) fn fill_stratified<R: Rng>(lo: f64, hi: f64, mut jitter: Option<&mut R>, out: &mut [(f64, f64)]) {
    let n = out.len();
    let width = (hi - lo) / n as f64;
    for (k, o) in out.iter_mut().enumerate() {
        let u = match jitter.as_deref_mut() {
            Some(r) => r.gen::<f64>(),
            None => 0.5,
        };
        *o = (lo + (k as f64 + u) * width, width);
    }
}

/// One quadrature sample along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePrediction {
    pub s: f64,
    pub delta: f64,
    pub sigma: f64,
    pub rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    /// Expected ray parameter, NDC units.
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// `T_0 = 1, ..., T_n`: transmittance before each sample and after the last.
    pub transmittance: Vec<f64>,
}

/// Cotangent of one sample's density and radiance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleCotangent {
    pub sigma: f64,
    pub rgb: [f64; 3],
}

/// Alpha compositing over a black background:
/// `alpha_k = 1 - exp(-sigma_k delta_k)`, `w_k = T_k alpha_k`.
pub fn composite(samples: &[SamplePrediction]) -> Result<RenderResult> {
    validate_samples(samples)?;
    let n = samples.len();
    let mut weights = vec![0.0; n];
    let mut transmittance = vec![1.0; n + 1];
    let (mut color, mut depth, mut opacity) = ([0.0; 3], 0.0, 0.0);
    for (k, smp) in samples.iter().enumerate() {
        let tau = smp.sigma * smp.delta;
        let alpha = -(-tau).exp_m1();
        let w = transmittance[k] * alpha;
        weights[k] = w;
        transmittance[k + 1] = transmittance[k] * (-tau).exp();
        for c in 0..3 {
            color[c] += w * smp.rgb[c];
        }
        depth += w * smp.s;
        opacity += w;
    }
    Ok(RenderResult {
        color,
        depth,
        opacity,
        weights,
        transmittance,
    })
}

fn validate_samples(samples: &[SamplePrediction]) -> Result<()> {
    if samples.windows(2).any(|w| w[1].s < w[0].s) {
        return Err(invalid("samples must be ordered by increasing s"));
    }
    if let Some(bad) = samples
        .iter()
        .find(|s| !(s.delta > 0.0 && s.sigma >= 0.0 && s.sigma.is_finite()))
    {
        return Err(invalid(format!("invalid sample {bad:?}")));
    }
    Ok(())
}

/// Adjoint of [`composite`] with respect to every `sigma_k` and `rgb_k`.
pub fn composite_backward(
    samples: &[SamplePrediction],
    d_color: [f64; 3],
    d_depth: f64,
    d_opacity: f64,
) -> Result<Vec<SampleCotangent>> {
    validate_samples(samples)?;
    let n = samples.len();
    let mut t = vec![1.0; n + 1];
    let mut alpha = vec![0.0; n];
    for (k, smp) in samples.iter().enumerate() {
        let tau = smp.sigma * smp.delta;
        alpha[k] = -(-tau).exp_m1();
        t[k + 1] = t[k] * (-tau).exp();
    }
    let mut out = vec![SampleCotangent::default(); n];
    // tail = sum_{j > k} alpha_j e_j prod_{k < i < j} (1 - alpha_i)
    let mut tail = 0.0;
    for k in (0..n).rev() {
        let smp = &samples[k];
        let e = d_color[0] * smp.rgb[0] + d_color[1] * smp.rgb[1] + d_color[2] * smp.rgb[2]
            + d_depth * smp.s
            + d_opacity;
        let d_alpha = t[k] * (e - tail);
        out[k].sigma = d_alpha * smp.delta * (1.0 - alpha[k]);
        let w = t[k] * alpha[k];
        out[k].rgb = d_color.map(|d| d * w);
        tail = alpha[k] * e + (1.0 - alpha[k]) * tail;
    }
    Ok(out)
}

/// Renders one ray. `jitter_seed = None` places samples at bin centers.
pub fn render_ray(
    planes: &FeaturePlaneSet,
    decoder: &DecoderParams,
    ray: &Ray,
    n_samples: usize,
    jitter_seed: Option<u64>,
) -> Result<RenderResult> {
    let trace = trace_rays(
        planes,
        decoder,
        std::slice::from_ref(ray),
        n_samples,
        jitter_seed.map(|s| vec![s]).as_deref(),
    )?;
    Ok(trace.result(0))
}

/// A rendered frame; all images row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRender {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

/// Renders every pixel at time `t` with samples at bin centers.
pub fn render_frame(
    planes: &FeaturePlaneSet,
    decoder: &DecoderParams,
    camera: &Camera,
    t: f64,
    n_samples: usize,
) -> Result<FrameRender> {
    camera.validate()?;
    let rows: Vec<Vec<(usize, [f64; 3], f64, f64)>> = (0..camera.height)
        .into_par_iter()
        .map(|row| -> Result<_> {
            let rays = (0..camera.width)
                .map(|col| make_ray(camera, (row, col), t))
                .collect::<Result<Vec<_>>>()?;
            let trace = trace_rays(planes, decoder, &rays, n_samples, None)?;
            Ok((0..rays.len())
                .map(|i| {
                    let (c, d, o) = trace.summary(i);
                    (i, c, d, o)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut frame = FrameRender {
        width: camera.width,
        height: camera.height,
        color: Vec::with_capacity(camera.num_pixels()),
        depth: Vec::with_capacity(camera.num_pixels()),
        opacity: Vec::with_capacity(camera.num_pixels()),
    };
    for row in rows {
        for (_, c, d, o) in row {
            frame.color.push(c);
            frame.depth.push(d);
            frame.opacity.push(o);
        }
    }
    Ok(frame)
}
