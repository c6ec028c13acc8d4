//! Positional encoding and the geometry/color decoders.
//!
//! The geometry MLP maps `[fused feature, encoded point]` to a density logit
//! and a feature vector; the color MLP maps `[feature, encoded direction]` to
//! RGB logits. Hidden layers use ReLU, density uses softplus and color uses a
//! sigmoid. Batched evaluation runs through `matrixmultiply::dgemm`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{read_f32_into, read_u32};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Frequency octaves for the `(x, y, z, t)` point.
    pub point_frequencies: usize,
    /// Frequency octaves for the view direction.
    pub direction_frequencies: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            point_frequencies: 4,
            direction_frequencies: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub encoder: EncoderConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Width of the geometry feature handed to the color MLP.
    pub feature_width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            hidden_width: 64,
            hidden_layers: 2,
            feature_width: 15,
        }
    }
}

/// Components in an encoded point: `(x, y, z, t)`.
pub const POINT_DIMS: usize = 4;
/// Components in an encoded direction: a unit 3-vector.
pub const DIRECTION_DIMS: usize = 3;

pub fn encoded_len(dims: usize, frequencies: usize) -> usize {
    dims * (2 * frequencies + 1)
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::Config("decoder hidden width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn geometry_input(&self, fused_width: usize) -> usize {
        fused_width + encoded_len(POINT_DIMS, self.encoder.point_frequencies)
    }

    pub fn color_input(&self) -> usize {
        self.feature_width + encoded_len(DIRECTION_DIMS, self.encoder.direction_frequencies)
    }
}

/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`
/// per component.
pub fn posenc(x: &[f64], frequencies: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_len(x.len(), frequencies)];
    posenc_into(x, frequencies, &mut out);
    out
}

pub fn posenc_into(x: &[f64], frequencies: usize, out: &mut [f64]) {
    let stride = 2 * frequencies + 1;
    for (i, &v) in x.iter().enumerate() {
        let o = &mut out[i * stride..(i + 1) * stride];
        o[0] = v;
        let mut freq = PI;
        for l in 0..frequencies {
            let (s, c) = (freq * v).sin_cos();
            o[1 + 2 * l] = s;
            o[2 + 2 * l] = c;
            freq *= 2.0;
        }
    }
}

/// Adjoint of [`posenc`]: cotangent of the raw input.
pub fn posenc_backward(x: &[f64], frequencies: usize, d_out: &[f64]) -> Vec<f64> {
    let stride = 2 * frequencies + 1;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = &d_out[i * stride..(i + 1) * stride];
            let mut g = d[0];
            let mut freq = PI;
            for l in 0..frequencies {
                let (s, c) = (freq * v).sin_cos();
                g += freq * (c * d[1 + 2 * l] - s * d[2 + 2 * l]);
                freq *= 2.0;
            }
            g
        })
        .collect()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dense layer `y = x W + b` with `W` stored `inputs x outputs`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let a = xavier_bound(inputs, outputs);
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| rng.gen_range(-a..=a)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    /// `y[n x outputs] = x[n x inputs] W + b`.
    pub fn forward(&self, x: &[f64], n: usize, y: &mut [f64]) {
        debug_assert_eq!(x.len(), n * self.inputs);
        debug_assert_eq!(y.len(), n * self.outputs);
        for row in y.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(&self.bias);
        }
        if n == 0 {
            return;
        }
        // SAFETY: slice lengths match the declared dimensions and strides.
        unsafe {
            matrixmultiply::dgemm(
                n,
                self.inputs,
                self.outputs,
                1.0,
                x.as_ptr(),
                self.inputs as isize,
                1,
                self.weight.as_ptr(),
                self.outputs as isize,
                1,
                1.0,
                y.as_mut_ptr(),
                self.outputs as isize,
                1,
            );
        }
    }

    /// Accumulates parameter gradients into `grad` and optionally writes the
    /// input cotangent `dx = dy W^T`.
    pub fn backward(&self, x: &[f64], dy: &[f64], n: usize, grad: &mut Linear, dx: Option<&mut [f64]>) {
        if n == 0 {
            return;
        }
        for row in dy.chunks_exact(self.outputs) {
            for (g, &d) in grad.bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        // SAFETY: as in `forward`; x is read transposed through its strides.
        unsafe {
            matrixmultiply::dgemm(
                self.inputs,
                n,
                self.outputs,
                1.0,
                x.as_ptr(),
                1,
                self.inputs as isize,
                dy.as_ptr(),
                self.outputs as isize,
                1,
                1.0,
                grad.weight.as_mut_ptr(),
                self.outputs as isize,
                1,
            );
        }
        if let Some(dx) = dx {
            debug_assert_eq!(dx.len(), n * self.inputs);
            // SAFETY: W is read transposed through its strides.
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    self.outputs,
                    self.inputs,
                    1.0,
                    dy.as_ptr(),
                    self.outputs as isize,
                    1,
                    self.weight.as_ptr(),
                    1,
                    self.outputs as isize,
                    0.0,
                    dx.as_mut_ptr(),
                    self.inputs as isize,
                    1,
                );
            }
        }
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// ReLU MLP with a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Layer outputs kept for the backward pass. `outputs[i]` is the
/// post-activation output of layer `i`; the last entry is the raw output.
#[derive(Clone, Debug, Default)]
pub struct MlpTrace {
    pub outputs: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            layers: dims.windows(2).map(|d| Linear::xavier(d[0], d[1], rng)).collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Linear::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> MlpTrace {
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &outputs[i - 1] };
            let mut y = vec![0.0; n * layer.outputs];
            layer.forward(input, n, &mut y);
            if i < last {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            outputs.push(y);
        }
        MlpTrace { outputs }
    }

    /// Backpropagates `d_out` (cotangent of the raw output). Returns the input
    /// cotangent when `want_dx` is set.
    pub fn backward(&self, x: &[f64], trace: &MlpTrace, d_out: &[f64], n: usize, grad: &mut Mlp, want_dx: bool) -> Option<Vec<f64>> {
        let mut dy = d_out.to_vec();
        let mut dx_out = None;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = if i == 0 { x } else { &trace.outputs[i - 1] };
            if i == 0 {
                if want_dx {
                    let mut dx = vec![0.0; n * layer.inputs];
                    layer.backward(input, &dy, n, &mut grad.layers[i], Some(&mut dx));
                    dx_out = Some(dx);
                } else {
                    layer.backward(input, &dy, n, &mut grad.layers[i], None);
                }
            } else {
                let mut dx = vec![0.0; n * layer.inputs];
                layer.backward(input, &dy, n, &mut grad.layers[i], Some(&mut dx));
                // ReLU of the previous layer
                for (d, &a) in dx.iter_mut().zip(&trace.outputs[i - 1]) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                dy = dx;
            }
        }
        dx_out
    }

    /// Hash of the ReLU on/off pattern. Central differences are only valid
    /// while it stays fixed.
    pub fn activation_pattern(&self, trace: &MlpTrace) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for out in &trace.outputs[..trace.outputs.len().saturating_sub(1)] {
            for &v in out {
                h ^= (v > 0.0) as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn write_segment<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            out.write_all(&(l.inputs as u32).to_le_bytes())?;
            out.write_all(&(l.outputs as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            let mut buf = Vec::with_capacity((l.weight.len() + l.bias.len()) * 4);
            for &v in l.weight.iter().chain(&l.bias) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    fn read_segment<R: Read>(input: &mut R, expected: &Mlp) -> Result<Self> {
        let count = read_u32(input)? as usize;
        if count != expected.layers.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} layers, found {count}",
                expected.layers.len()
            )));
        }
        let mut mlp = expected.zeros_like();
        for l in &mlp.layers {
            let (i, o) = (read_u32(input)? as usize, read_u32(input)? as usize);
            if (i, o) != (l.inputs, l.outputs) {
                return Err(Error::Checkpoint(format!(
                    "layer shape {i}x{o} does not match configured {}x{}",
                    l.inputs, l.outputs
                )));
            }
        }
        for l in &mut mlp.layers {
            read_f32_into(input, &mut l.weight)?;
            read_f32_into(input, &mut l.bias)?;
        }
        Ok(mlp)
    }
}

/// Geometry and color MLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub fused_width: usize,
    pub geometry: Mlp,
    pub color: Mlp,
}

fn layer_dims(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat(hidden).take(layers));
    dims.push(output);
    dims
}

/// Xavier-uniform weights and zero biases, deterministic per seed.
pub fn init_decoder(config: &DecoderConfig, fused_width: usize, seed: u64) -> Result<DecoderParams> {
    config.validate()?;
    let mut rg = rng::stream(seed, &[0xDEC0, 0]);
    let mut rc = rng::stream(seed, &[0xDEC0, 1]);
    let geometry = Mlp::new(
        &layer_dims(
            config.geometry_input(fused_width),
            config.hidden_width,
            config.hidden_layers,
            1 + config.feature_width,
        ),
        &mut rg,
    );
    let color = Mlp::new(
        &layer_dims(config.color_input(), config.hidden_width, config.hidden_layers, 3),
        &mut rc,
    );
    Ok(DecoderParams {
        config: config.clone(),
        fused_width,
        geometry,
        color,
    })
}

impl DecoderParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            fused_width: self.fused_width,
            geometry: self.geometry.zeros_like(),
            color: self.color.zeros_like(),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.geometry.layers.iter().chain(&self.color.layers)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.geometry.layers.iter_mut().chain(self.color.layers.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.geometry.num_params() + self.color.num_params()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn add_scaled(&mut self, other: &DecoderParams, k: f64) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += k * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += k * y;
            }
        }
    }

    /// Density and geometry feature for one point.
    pub fn geometry_forward(&self, fused: &[f64], enc_point: &[f64]) -> Result<(f64, Vec<f64>)> {
        if fused.len() + enc_point.len() != self.geometry.inputs() {
            return Err(Error::Config(format!(
                "geometry decoder expects {} inputs, got {}",
                self.geometry.inputs(),
                fused.len() + enc_point.len()
            )));
        }
        let x: Vec<f64> = fused.iter().chain(enc_point).copied().collect();
        let out = self.geometry.forward(&x, 1);
        let raw = out.output();
        Ok((softplus(raw[0]), raw[1..].to_vec()))
    }

    /// RGB in `(0, 1)^3` from a geometry feature and encoded direction.
    pub fn color_forward(&self, feature: &[f64], enc_dir: &[f64]) -> Result<[f64; 3]> {
        if feature.len() + enc_dir.len() != self.color.inputs() {
            return Err(Error::Config(format!(
                "color decoder expects {} inputs, got {}",
                self.color.inputs(),
                feature.len() + enc_dir.len()
            )));
        }
        let x: Vec<f64> = feature.iter().chain(enc_dir).copied().collect();
        let out = self.color.forward(&x, 1);
        let raw = out.output();
        Ok([sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])])
    }

    /// Layer-ordered segment: geometry MLP then color MLP, each as a layer
    /// count, per-layer `(inputs, outputs)` and little-endian f32 weights then biases.
    pub fn write_segment<W: Write>(&self, out: &mut W) -> Result<()> {
        self.geometry.write_segment(out)?;
        self.color.write_segment(out)
    }

    pub fn read_segment<R: Read>(input: &mut R, config: &DecoderConfig, fused_width: usize) -> Result<Self> {
        let shape = init_decoder(config, fused_width, 0)?;
        let geometry = Mlp::read_segment(input, &shape.geometry)?;
        let color = Mlp::read_segment(input, &shape.color)?;
        let params = Self {
            config: config.clone(),
            fused_width,
            geometry,
            color,
        };
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite decoder weights".into()));
        }
        Ok(params)
    }
}
