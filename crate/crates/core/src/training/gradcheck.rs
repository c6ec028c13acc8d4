//! Central finite-difference verification of analytic adjoints.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::{
    encoded_len, init_decoder, posenc, posenc_backward, sigmoid, DecoderConfig, DecoderParams, EncoderConfig,
    Linear, POINT_DIMS,
};
use crate::error::{invalid, Result};
use crate::field::{
    smooth_time, smooth_time_grad, tv1d_space, tv1d_space_grad, tv2d, tv2d_grad, FeaturePlaneSet, Plane,
    PlaneConfig, TimeResolution,
};
use crate::renderer::{composite, composite_backward, make_ray, trace_rays, Camera, RayCotangent, SamplePrediction};
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates, chosen at random.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Index of the worst coordinate.
    pub worst: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates skipped because a ReLU switched inside the stencil.
    pub kinks: usize,
}

impl GradReport {
    fn merge(&mut self, other: GradReport) {
        if other.max_rel_error > self.max_rel_error || self.checked == 0 {
            let (checked, kinks) = (self.checked, self.kinks);
            *self = GradReport {
                checked: checked + other.checked,
                kinks: kinks + other.kinks,
                ..other
            };
        } else {
            self.checked += other.checked;
            self.kinks += other.kinks;
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` with central differences of `loss` over the
/// coordinates exposed by `coords`.
pub fn check_gradient<T: Clone>(
    params: &T,
    analytic: &[f64],
    loss: impl Fn(&T) -> f64,
    coords: impl Fn(&mut T) -> Vec<&mut f64>,
    opts: &GradCheckOptions,
) -> GradReport {
    check_gradient_with_kinks(params, analytic, |p| (loss(p), 0), coords, opts)
}

/// Like [`check_gradient`], but `loss` also returns an activation pattern;
/// coordinates whose `+h` and `-h` evaluations disagree on it are skipped.
pub fn check_gradient_with_kinks<T: Clone>(
    params: &T,
    analytic: &[f64],
    loss: impl Fn(&T) -> (f64, u64),
    coords: impl Fn(&mut T) -> Vec<&mut f64>,
    opts: &GradCheckOptions,
) -> GradReport {
    let mut work = params.clone();
    let n = coords(&mut work).len();
    assert_eq!(n, analytic.len(), "analytic gradient length does not match the coordinates");
    let mut picks: Vec<usize> = if n <= opts.max_coords {
        (0..n).collect()
    } else {
        let mut g = rng::stream(opts.seed, &[0x6C4E]);
        sample(&mut g, n, opts.max_coords).into_vec()
    };
    picks.sort_unstable();
    let h = opts.step;
    let mut report = GradReport::default();
    for i in picks {
        let orig = *coords(&mut work)[i];
        *coords(&mut work)[i] = orig + h;
        let (fp, pp) = loss(&work);
        *coords(&mut work)[i] = orig - h;
        let (fm, pm) = loss(&work);
        *coords(&mut work)[i] = orig;
        if pp != pm {
            report.kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some(i);
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}

/// Differentiable operations registered with the harness.
pub const COMPONENTS: [&str; 11] = [
    "linear",
    "bilerp",
    "query_fused",
    "tv2d",
    "tv1d_space",
    "smooth_time",
    "posenc",
    "geometry_forward",
    "color_forward",
    "composite",
    "render_ray",
];

/// Maximum relative error accepted for a component.
pub fn tolerance(component: &str) -> f64 {
    match component {
        "linear" => 1e-7,
        "render_ray" => 1e-4,
        _ => 1e-5,
    }
}

fn uniform(g: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| g.gen_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_plane(g: &mut ChaCha8Rng, rows: usize, cols: usize, width: usize) -> Plane {
    Plane::from_fn(rows, cols, width, |_, _, _| g.gen_range(-1.0..1.0))
}

fn small_planes(g: &mut ChaCha8Rng, lo: f64, hi: f64) -> FeaturePlaneSet {
    let config = PlaneConfig {
        scales: vec![3, 5],
        feature_width: 3,
        time_resolution: TimeResolution::Fixed(4),
    };
    let mut set = FeaturePlaneSet::filled(&config, 0.0).expect("valid config");
    for (_, _, p) in set.planes_mut() {
        for v in p.data_mut() {
            *v = g.gen_range(lo..hi);
        }
    }
    set
}

fn small_decoder(g: &mut ChaCha8Rng, fused_width: usize) -> DecoderParams {
    let config = DecoderConfig {
        encoder: EncoderConfig {
            point_frequencies: 2,
            direction_frequencies: 2,
        },
        hidden_width: 8,
        hidden_layers: 2,
        feature_width: 4,
    };
    let mut d = init_decoder(&config, fused_width, g.gen()).expect("valid config");
    for l in d.layers_mut() {
        for b in &mut l.bias {
            *b = g.gen_range(-0.3..0.3);
        }
    }
    d
}

fn decoder_coords(d: &mut DecoderParams) -> Vec<&mut f64> {
    d.layers_mut()
        .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
        .collect()
}

fn decoder_flat(d: &DecoderParams) -> Vec<f64> {
    d.layers().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect()
}

fn plane_flat(p: &FeaturePlaneSet) -> Vec<f64> {
    p.planes().flat_map(|(_, _, p)| p.data().to_vec()).collect()
}

/// Runs the check for one registered component on a random instance.
pub fn check_component(name: &str, seed: u64) -> Result<GradReport> {
    let mut g = rng::stream(seed, &[0x6C4E, name.len() as u64, name.bytes().map(u64::from).sum()]);
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let report = match name {
        "linear" => {
            let (ni, no, n) = (5, 4, 3);
            let layer = Linear {
                inputs: ni,
                outputs: no,
                weight: uniform(&mut g, ni * no, -1.0, 1.0),
                bias: uniform(&mut g, no, -1.0, 1.0),
            };
            let x = uniform(&mut g, n * ni, -1.0, 1.0);
            let r = uniform(&mut g, n * no, -1.0, 1.0);
            let mut grad = Linear::zeros(ni, no);
            let mut dx = vec![0.0; n * ni];
            layer.backward(&x, &r, n, &mut grad, Some(&mut dx));
            let analytic: Vec<f64> = grad.weight.iter().chain(&grad.bias).chain(&dx).copied().collect();
            check_gradient(
                &(layer, x),
                &analytic,
                |(l, x)| {
                    let mut y = vec![0.0; n * no];
                    l.forward(x, n, &mut y);
                    dot(&y, &r)
                },
                |(l, x)| l.weight.iter_mut().chain(l.bias.iter_mut()).chain(x.iter_mut()).collect(),
                &opts,
            )
        }
        "bilerp" => {
            let plane = random_plane(&mut g, 5, 6, 3);
            let (u, v) = (g.gen_range(0.0..1.0), g.gen_range(0.0..1.0));
            let r = uniform(&mut g, 3, -1.0, 1.0);
            let mut analytic = vec![0.0; plane.data().len()];
            plane.scatter(&plane.stencil(u, v), &r, &mut analytic);
            check_gradient(
                &plane,
                &analytic,
                |p| dot(&p.bilerp(u, v).expect("finite coordinates"), &r),
                |p| p.data_mut().iter_mut().collect(),
                &opts,
            )
        }
        "query_fused" => {
            let set = small_planes(&mut g, -1.0, 1.0);
            let point = [g.gen(), g.gen(), g.gen(), g.gen()];
            let r = uniform(&mut g, set.fused_width(), -1.0, 1.0);
            let mut grad = set.zeros_like();
            set.query_fused_backward(point, &r, &mut grad)?;
            check_gradient(
                &set,
                &plane_flat(&grad),
                |s| dot(s.query_fused(point).expect("point in range").values(), &r),
                |s| s.planes_mut().flat_map(|(_, _, p)| p.data_mut().iter_mut()).collect(),
                &opts,
            )
        }
        "tv2d" | "tv1d_space" | "smooth_time" => {
            let plane = random_plane(&mut g, 5, 4, 3);
            let mut analytic = vec![0.0; plane.data().len()];
            match name {
                "tv2d" => tv2d_grad(&plane, 1.0, &mut analytic),
                "tv1d_space" => tv1d_space_grad(&plane, 1.0, &mut analytic),
                _ => smooth_time_grad(&plane, 1.0, &mut analytic)?,
            }
            let which = name.to_string();
            check_gradient(
                &plane,
                &analytic,
                move |p| match which.as_str() {
                    "tv2d" => tv2d(p),
                    "tv1d_space" => tv1d_space(p),
                    _ => smooth_time(p).expect("time axis long enough"),
                },
                |p| p.data_mut().iter_mut().collect(),
                &opts,
            )
        }
        "posenc" => {
            // one output at a time: a random projection of the highest
            // octaves cancels and hides the truncation error in the sum
            let l = 4;
            let x = uniform(&mut g, POINT_DIMS, 0.0, 1.0);
            let mut worst = GradReport::default();
            for j in 0..encoded_len(POINT_DIMS, l) {
                let mut r = vec![0.0; encoded_len(POINT_DIMS, l)];
                r[j] = 1.0;
                let analytic = posenc_backward(&x, l, &r);
                worst.merge(check_gradient(
                    &x,
                    &analytic,
                    |x| posenc(x, l)[j],
                    |x| x.iter_mut().collect(),
                    &opts,
                ));
            }
            worst
        }
        "geometry_forward" => {
            let fw = 6;
            let dec = small_decoder(&mut g, fw);
            let input = uniform(&mut g, dec.geometry.inputs(), -1.0, 1.0);
            let r = uniform(&mut g, dec.geometry.outputs(), -1.0, 1.0);
            let trace = dec.geometry.forward(&input, 1);
            let mut d_out = r.clone();
            d_out[0] = r[0] * sigmoid(trace.output()[0]);
            let mut grad = dec.zeros_like();
            let dx = dec
                .geometry
                .backward(&input, &trace, &d_out, 1, &mut grad.geometry, true)
                .expect("input cotangent requested");
            let mut analytic = decoder_flat(&grad);
            analytic.extend(dx);
            check_gradient_with_kinks(
                &(dec, input),
                &analytic,
                |(d, x)| {
                    let (sigma, feat) = d.geometry_forward(&x[..fw], &x[fw..]).expect("widths match");
                    let pattern = d.geometry.activation_pattern(&d.geometry.forward(x, 1));
                    (r[0] * sigma + dot(&feat, &r[1..]), pattern)
                },
                |(d, x)| {
                    let mut c = decoder_coords(d);
                    c.extend(x.iter_mut());
                    c
                },
                &opts,
            )
        }
        "color_forward" => {
            let dec = small_decoder(&mut g, 6);
            let feat = dec.config.feature_width;
            let input = uniform(&mut g, dec.color.inputs(), -1.0, 1.0);
            let r = uniform(&mut g, 3, -1.0, 1.0);
            let trace = dec.color.forward(&input, 1);
            let d_out: Vec<f64> = (0..3)
                .map(|c| {
                    let p = sigmoid(trace.output()[c]);
                    r[c] * p * (1.0 - p)
                })
                .collect();
            let mut grad = dec.zeros_like();
            let dx = dec
                .color
                .backward(&input, &trace, &d_out, 1, &mut grad.color, true)
                .expect("input cotangent requested");
            let mut analytic = decoder_flat(&grad);
            analytic.extend(dx);
            check_gradient_with_kinks(
                &(dec, input),
                &analytic,
                |(d, x)| {
                    let rgb = d.color_forward(&x[..feat], &x[feat..]).expect("widths match");
                    let pattern = d.color.activation_pattern(&d.color.forward(x, 1));
                    (dot(&rgb, &r), pattern)
                },
                |(d, x)| {
                    let mut c = decoder_coords(d);
                    c.extend(x.iter_mut());
                    c
                },
                &opts,
            )
        }
        "composite" => {
            let n = 8;
            let delta = 1.0 / n as f64;
            let samples: Vec<SamplePrediction> = (0..n)
                .map(|k| SamplePrediction {
                    s: (k as f64 + 0.5) * delta,
                    delta,
                    sigma: g.gen_range(0.0..8.0),
                    rgb: [g.gen(), g.gen(), g.gen()],
                })
                .collect();
            let rc = [g.gen_range(-1.0..1.0), g.gen_range(-1.0..1.0), g.gen_range(-1.0..1.0)];
            let (rd, ro) = (g.gen_range(-1.0..1.0), g.gen_range(-1.0..1.0));
            let cot = composite_backward(&samples, rc, rd, ro)?;
            let analytic: Vec<f64> = cot
                .iter()
                .flat_map(|c| std::iter::once(c.sigma).chain(c.rgb))
                .collect();
            check_gradient(
                &samples,
                &analytic,
                |s| {
                    let out = composite(s).expect("valid samples");
                    dot(&out.color, &rc) + rd * out.depth + ro * out.opacity
                },
                |s| {
                    s.iter_mut()
                        .flat_map(|p| std::iter::once(&mut p.sigma).chain(p.rgb.iter_mut()))
                        .collect()
                },
                &opts,
            )
        }
        "render_ray" => {
            let planes = small_planes(&mut g, 0.3, 1.2);
            let decoder = small_decoder(&mut g, planes.fused_width());
            let camera = Camera {
                width: 8,
                height: 6,
                fx: 6.0,
                fy: 6.0,
                cx: 4.0,
                cy: 3.0,
                near: 1.0,
                far: 8.0,
            };
            let ray = make_ray(&camera, (g.gen_range(0..6), g.gen_range(0..8)), g.gen())?;
            let n_samples = 12;
            let jitter = [g.gen::<u64>()];
            let cot = RayCotangent {
                color: [g.gen_range(-1.0..1.0), g.gen_range(-1.0..1.0), g.gen_range(-1.0..1.0)],
                depth: g.gen_range(-1.0..1.0),
                opacity: g.gen_range(-1.0..1.0),
            };
            let trace = trace_rays(&planes, &decoder, std::slice::from_ref(&ray), n_samples, Some(&jitter))?;
            let mut d_grad = decoder.zeros_like();
            let field_cot = trace.backward(&planes, &decoder, &[cot], &mut d_grad)?;
            let mut p_grad = planes.zeros_like();
            trace.scatter_field(&planes, &field_cot, &mut p_grad);
            let mut analytic = plane_flat(&p_grad);
            analytic.extend(decoder_flat(&d_grad));
            check_gradient_with_kinks(
                &(planes, decoder),
                &analytic,
                |(p, d)| {
                    let t = trace_rays(p, d, std::slice::from_ref(&ray), n_samples, Some(&jitter)).expect("valid ray");
                    let (c, dep, o) = t.summary(0);
                    (dot(&c, &cot.color) + dep * cot.depth + o * cot.opacity, t.activation_pattern(d))
                },
                |(p, d)| {
                    let mut c: Vec<&mut f64> = p.planes_mut().flat_map(|(_, _, q)| q.data_mut().iter_mut()).collect();
                    c.extend(decoder_coords(d));
                    c
                },
                &opts,
            )
        }
        other => return Err(invalid(format!("unknown gradient-check component `{other}`"))),
    };
    Ok(report)
}

/// Worst report for `name` over `seeds` random instances.
pub fn check_component_seeds(name: &str, seeds: impl IntoIterator<Item = u64>) -> Result<GradReport> {
    let mut worst = GradReport::default();
    for s in seeds {
        worst.merge(check_component(name, s)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = vec![1.0, 2.0];
        let r = check_gradient(&x, &[2.0, 5.0], |x| x[0] * x[0] + x[1] * x[1], |x| x.iter_mut().collect(), &GradCheckOptions::default());
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.worst, Some(1));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn every_component_is_within_tolerance() {
        for name in COMPONENTS {
            let r = check_component_seeds(name, 0..3).unwrap();
            assert!(r.max_rel_error < tolerance(name), "{name}: {r:?}");
            assert!(r.checked > 0, "{name}: nothing checked");
        }
    }

    #[test]
    fn unknown_component_is_an_error() {
        assert!(check_component("nope", 0).is_err());
    }
}
