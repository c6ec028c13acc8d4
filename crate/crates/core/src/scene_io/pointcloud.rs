use std::io::Write;
use std::path::Path;

use super::{atomic_write, quantize8, ColorImage, ScalarImage};
use super::depth::ray_depth_to_metric;
use crate::error::{invalid, Result};
use crate::renderer::Camera;

/// Pixels rendered with lower opacity are not exported.
pub const OPACITY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColoredPoint {
    pub position: [f64; 3],
    pub color: [f64; 3],
}

/// Camera-space point seen through pixel `(row, col)` at NDC ray parameter
/// `s`. Depths beyond the far bound are pulled back onto it.
pub fn backproject(camera: &Camera, row: usize, col: usize, s: f64) -> [f64; 3] {
    let z = if s < 1.0 {
        ray_depth_to_metric(s, camera.near).min(camera.far)
    } else {
        camera.far
    };
    let d = camera.pixel_direction(row, col);
    [d[0] * z, d[1] * z, -z]
}

/// Back-projects every pixel with `opacity >= OPACITY_THRESHOLD`. The
/// rendered depth is divided by opacity, giving the expected depth of the
/// surface the ray hit rather than a blend with the empty background.
pub fn export_pointcloud(
    color: &ColorImage,
    depth: &ScalarImage,
    opacity: &ScalarImage,
    camera: &Camera,
) -> Result<Vec<ColoredPoint>> {
    let (w, h) = (camera.width, camera.height);
    let dims_ok = |iw: usize, ih: usize| iw == w && ih == h;
    if !dims_ok(color.width(), color.height())
        || !dims_ok(depth.width(), depth.height())
        || !dims_ok(opacity.width(), opacity.height())
    {
        return Err(invalid("point cloud inputs must match the camera size"));
    }
    let mut points = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let a = opacity.get(row, col);
            if !(a >= OPACITY_THRESHOLD) {
                continue;
            }
            let s = (depth.get(row, col) / a).clamp(0.0, 1.0);
            points.push(ColoredPoint {
                position: backproject(camera, row, col, s),
                color: color.get(row, col),
            });
        }
    }
    Ok(points)
}

/// Binary little-endian PLY with float32 positions and uint8 colors.
pub fn write_ply(path: &Path, points: &[ColoredPoint]) -> Result<()> {
    atomic_write(path, |w| {
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
            points.len()
        )?;
        for p in points {
            for v in p.position {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            w.write_all(&p.color.map(quantize8))?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::metric_to_ray_parameter;

    fn camera(w: usize, h: usize) -> Camera {
        Camera {
            width: w,
            height: h,
            fx: 8.0,
            fy: 8.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            near: 1.0,
            far: 10.0,
        }
    }

    fn read_vertices(path: &Path) -> (usize, Vec<[f32; 3]>) {
        let bytes = std::fs::read(path).unwrap();
        let marker = b"end_header\n";
        let end = bytes.windows(marker.len()).position(|w| w == marker).unwrap() + marker.len();
        let header = std::str::from_utf8(&bytes[..end]).unwrap();
        let n: usize = header
            .lines()
            .find_map(|l| l.strip_prefix("element vertex "))
            .unwrap()
            .parse()
            .unwrap();
        let body = &bytes[end..];
        assert_eq!(body.len(), n * 15);
        let verts = body
            .chunks_exact(15)
            .map(|c| std::array::from_fn(|i| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap())))
            .collect();
        (n, verts)
    }

    #[test]
    fn analytic_depth_lands_on_its_plane() {
        let cam = camera(6, 5);
        let s = metric_to_ray_parameter(3.0, cam.near);
        let depth = ScalarImage::filled(6, 5, s);
        let pts = export_pointcloud(
            &ColorImage::new(6, 5, vec![[0.2, 0.4, 0.6]; 30]),
            &depth,
            &ScalarImage::filled(6, 5, 1.0),
            &cam,
        )
        .unwrap();
        assert_eq!(pts.len(), 30);
        for p in &pts {
            assert!((p.position[2] + 3.0).abs() < 1e-4);
        }
    }

    #[test]
    fn opaque_two_by_two_gives_four_points() {
        let cam = camera(2, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let pts = export_pointcloud(
            &ColorImage::new(2, 2, vec![[1.0, 0.0, 0.0]; 4]),
            &ScalarImage::filled(2, 2, 0.5),
            &ScalarImage::filled(2, 2, 1.0),
            &cam,
        )
        .unwrap();
        write_ply(&path, &pts).unwrap();
        let (n, verts) = read_vertices(&path);
        assert_eq!(n, 4);
        for v in verts {
            assert!((v[2] + 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn transparent_frame_gives_an_empty_cloud() {
        let cam = camera(3, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ply");
        let pts = export_pointcloud(
            &ColorImage::new(3, 3, vec![[0.0; 3]; 9]),
            &ScalarImage::filled(3, 3, 0.3),
            &ScalarImage::filled(3, 3, 0.0),
            &cam,
        )
        .unwrap();
        write_ply(&path, &pts).unwrap();
        assert_eq!(read_vertices(&path).0, 0);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cam = camera(3, 3);
        let r = export_pointcloud(
            &ColorImage::new(2, 2, vec![[0.0; 3]; 4]),
            &ScalarImage::filled(3, 3, 0.3),
            &ScalarImage::filled(3, 3, 1.0),
            &cam,
        );
        assert!(r.is_err());
    }
}
