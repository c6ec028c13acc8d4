//! Batched, differentiable ray tracing through the field and decoders.
//!
//! A forward pass keeps every intermediate needed by the backward pass. The
//! backward pass accumulates decoder gradients directly and returns per-factor
//! field cotangents; scattering those into a plane gradient is a separate step
//! so callers can run chunks in parallel and scatter in a fixed order.

use crate::decoder::{encoded_len, posenc_into, sigmoid, softplus, DecoderParams, MlpTrace, DIRECTION_DIMS, POINT_DIMS};
use crate::error::{invalid, Error, Result};
use crate::field::{FeaturePlaneSet, Stencil};
use crate::rng;

use super::{composite_backward, fill_stratified, Ray, RenderResult, SamplePrediction};

/// Loss cotangent of one ray's rendered outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayCotangent {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
}

/// Per-sample, per-plane cotangents of the bilinear factors.
#[derive(Clone, Debug, Default)]
pub struct FieldCotangents {
    pub d_factors: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RayBatchTrace {
    n_rays: usize,
    n_samples: usize,
    fused_width: usize,
    s: Vec<f64>,
    delta: Vec<f64>,
    stencils: Vec<Stencil>,
    factors: Vec<f64>,
    geo_input: Vec<f64>,
    geo: MlpTrace,
    color_input: Vec<f64>,
    color: MlpTrace,
    sigma: Vec<f64>,
    rgb: Vec<[f64; 3]>,
    results: Vec<RenderResult>,
}

/// Forward pass for a batch of rays. With `jitter_seeds`, ray `i` draws its
/// stratified offsets from a stream seeded by `jitter_seeds[i]`.
pub fn trace_rays(
    planes: &FeaturePlaneSet,
    decoder: &DecoderParams,
    rays: &[Ray],
    n_samples: usize,
    jitter_seeds: Option<&[u64]>,
) -> Result<RayBatchTrace> {
    if n_samples == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let fw = planes.fused_width();
    if decoder.fused_width != fw {
        return Err(Error::Config(format!(
            "decoder expects fused width {}, planes produce {fw}",
            decoder.fused_width
        )));
    }
    if let Some(seeds) = jitter_seeds {
        if seeds.len() != rays.len() {
            return Err(invalid("one jitter seed per ray is required"));
        }
    }
    let enc = &decoder.config.encoder;
    let enc_p = encoded_len(POINT_DIMS, enc.point_frequencies);
    let enc_d = encoded_len(DIRECTION_DIMS, enc.direction_frequencies);
    let feat = decoder.config.feature_width;
    let geo_w = fw + enc_p;
    let col_w = feat + enc_d;
    let w = planes.config().feature_width;
    let per_point = planes.stencils_per_point();
    let n = rays.len() * n_samples;

    let mut s = vec![0.0; n];
    let mut delta = vec![0.0; n];
    let mut stencils = vec![Stencil::default(); n * per_point];
    let mut factors = vec![0.0; n * per_point * w];
    let mut geo_input = vec![0.0; n * geo_w];
    let mut bins = vec![(0.0, 0.0); n_samples];
    for (r, ray) in rays.iter().enumerate() {
        match jitter_seeds {
            Some(seeds) => {
                let mut g = rng::stream(seeds[r], &[0x5A4D]);
                fill_stratified(ray.s_near, ray.s_far, Some(&mut g), &mut bins);
            }
            None => fill_stratified::<rand_chacha::ChaCha8Rng>(ray.s_near, ray.s_far, None, &mut bins),
        }
        for (k, &(sk, dk)) in bins.iter().enumerate() {
            let i = r * n_samples + k;
            s[i] = sk;
            delta[i] = dk;
            let p3 = ray.unit_point(sk);
            let point = [p3[0], p3[1], p3[2], ray.t];
            let row = &mut geo_input[i * geo_w..(i + 1) * geo_w];
            let (fused, encoded) = row.split_at_mut(fw);
            planes.forward_point(
                &point,
                &mut stencils[i * per_point..(i + 1) * per_point],
                &mut factors[i * per_point * w..(i + 1) * per_point * w],
                fused,
            );
            posenc_into(&point, enc.point_frequencies, encoded);
        }
    }

    let geo = decoder.geometry.forward(&geo_input, n);
    let raw = geo.output();
    let geo_out = 1 + feat;
    let mut sigma = vec![0.0; n];
    let mut color_input = vec![0.0; n * col_w];
    let mut dir_code = vec![0.0; enc_d];
    for (r, ray) in rays.iter().enumerate() {
        posenc_into(&ray.view_dir, enc.direction_frequencies, &mut dir_code);
        for k in 0..n_samples {
            let i = r * n_samples + k;
            let out = &raw[i * geo_out..(i + 1) * geo_out];
            sigma[i] = softplus(out[0]);
            let row = &mut color_input[i * col_w..(i + 1) * col_w];
            row[..feat].copy_from_slice(&out[1..]);
            row[feat..].copy_from_slice(&dir_code);
        }
    }
    let color = decoder.color.forward(&color_input, n);
    let rgb: Vec<[f64; 3]> = color
        .output()
        .chunks_exact(3)
        .map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
        .collect();

    let mut results = Vec::with_capacity(rays.len());
    let mut samples = vec![
        SamplePrediction {
            s: 0.0,
            delta: 0.0,
            sigma: 0.0,
            rgb: [0.0; 3]
        };
        n_samples
    ];
    for r in 0..rays.len() {
        for k in 0..n_samples {
            let i = r * n_samples + k;
            samples[k] = SamplePrediction {
                s: s[i],
                delta: delta[i],
                sigma: sigma[i],
                rgb: rgb[i],
            };
        }
        results.push(super::composite(&samples)?);
    }

    Ok(RayBatchTrace {
        n_rays: rays.len(),
        n_samples,
        fused_width: fw,
        s,
        delta,
        stencils,
        factors,
        geo_input,
        geo,
        color_input,
        color,
        sigma,
        rgb,
        results,
    })
}

impl RayBatchTrace {
    pub fn len(&self) -> usize {
        self.n_rays
    }

    pub fn is_empty(&self) -> bool {
        self.n_rays == 0
    }

    pub fn result(&self, ray: usize) -> RenderResult {
        self.results[ray].clone()
    }

    pub fn results(&self) -> &[RenderResult] {
        &self.results
    }

    /// `(color, depth, opacity)` of one ray.
    pub fn summary(&self, ray: usize) -> ([f64; 3], f64, f64) {
        let r = &self.results[ray];
        (r.color, r.depth, r.opacity)
    }

    /// Hash of every ReLU on/off state in the batch.
    pub fn activation_pattern(&self, decoder: &DecoderParams) -> u64 {
        decoder.geometry.activation_pattern(&self.geo) ^ decoder.color.activation_pattern(&self.color).rotate_left(1)
    }

    fn samples_of(&self, ray: usize) -> Vec<SamplePrediction> {
        (0..self.n_samples)
            .map(|k| {
                let i = ray * self.n_samples + k;
                SamplePrediction {
                    s: self.s[i],
                    delta: self.delta[i],
                    sigma: self.sigma[i],
                    rgb: self.rgb[i],
                }
            })
            .collect()
    }

    /// Backward pass. Decoder gradients are added into `decoder_grad`; the
    /// returned field cotangents go to [`RayBatchTrace::scatter_field`].
    pub fn backward(
        &self,
        planes: &FeaturePlaneSet,
        decoder: &DecoderParams,
        cotangents: &[RayCotangent],
        decoder_grad: &mut DecoderParams,
    ) -> Result<FieldCotangents> {
        if cotangents.len() != self.n_rays {
            return Err(invalid("one cotangent per ray is required"));
        }
        let n = self.n_rays * self.n_samples;
        let feat = decoder.config.feature_width;
        let geo_out = 1 + feat;
        let mut d_sigma = vec![0.0; n];
        let mut d_logits = vec![0.0; n * 3];
        for (r, cot) in cotangents.iter().enumerate() {
            let grads = composite_backward(&self.samples_of(r), cot.color, cot.depth, cot.opacity)?;
            for (k, g) in grads.iter().enumerate() {
                let i = r * self.n_samples + k;
                d_sigma[i] = g.sigma;
                for c in 0..3 {
                    let p = self.rgb[i][c];
                    d_logits[i * 3 + c] = g.rgb[c] * p * (1.0 - p);
                }
            }
        }

        let d_color_in = decoder
            .color
            .backward(&self.color_input, &self.color, &d_logits, n, &mut decoder_grad.color, true)
            .expect("input cotangent requested");
        let col_w = decoder.color.inputs();
        let raw = self.geo.output();
        let mut d_raw = vec![0.0; n * geo_out];
        for i in 0..n {
            // softplus' = sigmoid
            d_raw[i * geo_out] = d_sigma[i] * sigmoid(raw[i * geo_out]);
            d_raw[i * geo_out + 1..(i + 1) * geo_out].copy_from_slice(&d_color_in[i * col_w..i * col_w + feat]);
        }
        let d_geo_in = decoder
            .geometry
            .backward(&self.geo_input, &self.geo, &d_raw, n, &mut decoder_grad.geometry, true)
            .expect("input cotangent requested");

        let geo_w = decoder.geometry.inputs();
        let w = planes.config().feature_width;
        let per_point = planes.stencils_per_point() * w;
        let mut d_factors = vec![0.0; n * per_point];
        for i in 0..n {
            planes.factor_cotangents(
                &self.factors[i * per_point..(i + 1) * per_point],
                &d_geo_in[i * geo_w..i * geo_w + self.fused_width],
                &mut d_factors[i * per_point..(i + 1) * per_point],
            );
        }
        Ok(FieldCotangents { d_factors })
    }

    /// Adds the plane gradient implied by `cot` into `grad`, sample by sample.
    pub fn scatter_field(&self, planes: &FeaturePlaneSet, cot: &FieldCotangents, grad: &mut FeaturePlaneSet) {
        let sp = planes.stencils_per_point();
        let per_point = sp * planes.config().feature_width;
        for i in 0..self.n_rays * self.n_samples {
            planes.scatter_point(
                &self.stencils[i * sp..(i + 1) * sp],
                &cot.d_factors[i * per_point..(i + 1) * per_point],
                grad,
            );
        }
    }
}
