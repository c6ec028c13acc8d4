use super::ScalarImage;
use crate::error::{invalid, Result};
use crate::renderer::Camera;

/// Per-pixel NDC ray-parameter targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RayDepthTargets {
    pub values: ScalarImage,
    /// 1.0 where the sensor reported a depth, 0.0 for holes.
    pub valid: ScalarImage,
    /// Valid depths that fell outside `[near, far]` and were clamped.
    pub clamped: usize,
}

/// Ray parameter of metric depth `z` along any ray of `camera`: `1 - near / z`.
pub fn metric_to_ray_parameter(z: f64, near: f64) -> f64 {
    1.0 - near / z
}

/// Inverse of [`metric_to_ray_parameter`].
pub fn ray_depth_to_metric(s: f64, near: f64) -> f64 {
    near / (1.0 - s)
}

/// Converts a metric depth map (0 = no reading) to NDC ray-parameter targets.
pub fn metric_depth_to_ray_depth(depth: &ScalarImage, camera: &Camera) -> Result<RayDepthTargets> {
    if depth.width() != camera.width || depth.height() != camera.height {
        return Err(invalid("depth map and camera dimensions differ"));
    }
    let mut clamped = 0;
    let mut values = Vec::with_capacity(depth.len());
    let mut valid = Vec::with_capacity(depth.len());
    for &z in depth.values() {
        if !(z > 0.0) || !z.is_finite() {
            values.push(0.0);
            valid.push(0.0);
            continue;
        }
        let zc = z.clamp(camera.near, camera.far);
        if zc != z {
            clamped += 1;
        }
        values.push(metric_to_ray_parameter(zc, camera.near));
        valid.push(1.0);
    }
    if clamped > 0 {
        log::warn!("{clamped} depth readings outside [near, far] were clamped");
    }
    Ok(RayDepthTargets {
        values: ScalarImage::new(depth.width(), depth.height(), values),
        valid: ScalarImage::new(depth.width(), depth.height(), valid),
        clamped,
    })
}
