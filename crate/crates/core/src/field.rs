//! Multiscale six-plane factorization of a 4D volume.
//!
//! Each scale holds three space planes (xy, xz, yz) and three space-time
//! planes (xt, yt, zt). A 4D point is projected onto every plane, features are
//! bilinearly interpolated, multiplied elementwise within a scale and
//! concatenated across scales.
//!
//! Plane storage is row-major over `(u, v, channel)`. For space-time planes
//! `u` is the spatial axis and `v` the time axis.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Slack allowed outside `[0, 1]` before a query coordinate is rejected.
pub const COORD_SLACK: f64 = 1e-6;

const INIT_SPACE_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlaneKind {
    Xy,
    Xz,
    Yz,
    Xt,
    Yt,
    Zt,
}

impl PlaneKind {
    /// Fixed storage and serialization order.
    pub const ALL: [PlaneKind; 6] = [
        PlaneKind::Xy,
        PlaneKind::Xz,
        PlaneKind::Yz,
        PlaneKind::Xt,
        PlaneKind::Yt,
        PlaneKind::Zt,
    ];

    /// Indices into `(x, y, z, t)` of the plane's `u` and `v` axes.
    pub fn axes(self) -> (usize, usize) {
        match self {
            PlaneKind::Xy => (0, 1),
            PlaneKind::Xz => (0, 2),
            PlaneKind::Yz => (1, 2),
            PlaneKind::Xt => (0, 3),
            PlaneKind::Yt => (1, 3),
            PlaneKind::Zt => (2, 3),
        }
    }

    pub fn is_space_time(self) -> bool {
        matches!(self, PlaneKind::Xt | PlaneKind::Yt | PlaneKind::Zt)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaneKind::Xy => "xy",
            PlaneKind::Xz => "xz",
            PlaneKind::Yz => "yz",
            PlaneKind::Xt => "xt",
            PlaneKind::Yt => "yt",
            PlaneKind::Zt => "zt",
        }
    }
}

/// How many nodes the time axis of a space-time plane gets at each scale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeResolution {
    /// Same node count as the spatial axes of that scale.
    MatchSpace,
    /// One fixed node count for every scale.
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneConfig {
    /// Grid nodes per spatial axis, one entry per scale.
    pub scales: Vec<usize>,
    /// Feature channels per plane.
    pub feature_width: usize,
    pub time_resolution: TimeResolution,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        Self {
            scales: vec![64, 128, 256, 512],
            feature_width: 32,
            time_resolution: TimeResolution::MatchSpace,
        }
    }
}

impl PlaneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("plane scales must not be empty".into()));
        }
        if self.scales.iter().any(|&n| n < 2) {
            return Err(Error::Config("every plane scale needs at least 2 nodes".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("plane scales must be strictly increasing".into()));
        }
        if self.feature_width == 0 {
            return Err(Error::Config("feature width must be at least 1".into()));
        }
        if let TimeResolution::Fixed(n) = self.time_resolution {
            if n < 2 {
                return Err(Error::Config("time resolution needs at least 2 nodes".into()));
            }
        }
        Ok(())
    }

    pub fn time_nodes(&self, scale: usize) -> usize {
        match self.time_resolution {
            TimeResolution::MatchSpace => self.scales[scale],
            TimeResolution::Fixed(n) => n,
        }
    }

    /// Length of a fused feature: `feature_width * scales`.
    pub fn fused_width(&self) -> usize {
        self.feature_width * self.scales.len()
    }
}

/// Bilinear footprint of one query: offsets of the four enclosing nodes into
/// the plane's data and their blend weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stencil {
    pub offsets: [usize; 4],
    pub weights: [f64; 4],
}

/// A 2D grid of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    rows: usize,
    cols: usize,
    width: usize,
    data: Vec<f64>,
}

fn locate(coord: f64, nodes: usize) -> (usize, f64) {
    let c = coord.clamp(0.0, 1.0) * (nodes - 1) as f64;
    let i0 = (c.floor() as usize).min(nodes - 2);
    (i0, c - i0 as f64)
}

impl Plane {
    pub fn filled(rows: usize, cols: usize, width: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            width,
            data: vec![value; rows * cols * width],
        }
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols * width);
        for i in 0..rows {
            for j in 0..cols {
                for c in 0..width {
                    data.push(f(i, j, c));
                }
            }
        }
        Self {
            rows,
            cols,
            width,
            data,
        }
    }

    /// Nodes along the `u` axis.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Nodes along the `v` axis.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn node(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.cols + j) * self.width;
        &self.data[o..o + self.width]
    }

    pub fn node_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.cols + j) * self.width;
        &mut self.data[o..o + self.width]
    }

    /// Stencil for `(u, v)`, clamping both coordinates to `[0, 1]`.
    pub fn stencil(&self, u: f64, v: f64) -> Stencil {
        let (i0, fu) = locate(u, self.rows);
        let (j0, fv) = locate(v, self.cols);
        let at = |i: usize, j: usize| (i * self.cols + j) * self.width;
        Stencil {
            offsets: [at(i0, j0), at(i0, j0 + 1), at(i0 + 1, j0), at(i0 + 1, j0 + 1)],
            weights: [
                (1.0 - fu) * (1.0 - fv),
                (1.0 - fu) * fv,
                fu * (1.0 - fv),
                fu * fv,
            ],
        }
    }

    pub fn gather(&self, st: &Stencil, out: &mut [f64]) {
        let w = self.width;
        let [o0, o1, o2, o3] = st.offsets;
        let [w0, w1, w2, w3] = st.weights;
        let (a, b, c, d) = (
            &self.data[o0..o0 + w],
            &self.data[o1..o1 + w],
            &self.data[o2..o2 + w],
            &self.data[o3..o3 + w],
        );
        for k in 0..w {
            out[k] = w0 * a[k] + w1 * b[k] + w2 * c[k] + w3 * d[k];
        }
    }

    /// Adjoint of [`Plane::gather`]: adds the blended cotangent into `grad`,
    /// which must be laid out like this plane's data.
    pub fn scatter(&self, st: &Stencil, cot: &[f64], grad: &mut [f64]) {
        let w = self.width;
        for (&o, &wt) in st.offsets.iter().zip(&st.weights) {
            for (g, &c) in grad[o..o + w].iter_mut().zip(cot) {
                *g += wt * c;
            }
        }
    }

    /// Bilinear interpolation at normalized coordinates.
    pub fn bilerp(&self, u: f64, v: f64) -> Result<Vec<f64>> {
        if !u.is_finite() || !v.is_finite() {
            return Err(invalid(format!("non-finite plane coordinate ({u}, {v})")));
        }
        if self.rows < 2 || self.cols < 2 {
            return Err(invalid("plane must be at least 2x2"));
        }
        let mut out = vec![0.0; self.width];
        self.gather(&self.stencil(u, v), &mut out);
        Ok(out)
    }
}

/// Mean squared forward difference along both axes.
pub fn tv2d(plane: &Plane) -> f64 {
    let (n, m, w) = (plane.rows, plane.cols, plane.width);
    let d = &plane.data;
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..m {
            let o = (i * m + j) * w;
            if i + 1 < n {
                let o2 = o + m * w;
                sum += (0..w).map(|c| (d[o2 + c] - d[o + c]).powi(2)).sum::<f64>();
            }
            if j + 1 < m {
                let o2 = o + w;
                sum += (0..w).map(|c| (d[o2 + c] - d[o + c]).powi(2)).sum::<f64>();
            }
        }
    }
    sum / tv2d_count(plane) as f64
}

fn tv2d_count(plane: &Plane) -> usize {
    ((plane.rows - 1) * plane.cols + plane.rows * (plane.cols - 1)) * plane.width
}

/// Adds `scale * d tv2d / d plane` into `grad`.
pub fn tv2d_grad(plane: &Plane, scale: f64, grad: &mut [f64]) {
    let (n, m, w) = (plane.rows, plane.cols, plane.width);
    let d = &plane.data;
    let k = 2.0 * scale / tv2d_count(plane) as f64;
    for i in 0..n {
        for j in 0..m {
            let o = (i * m + j) * w;
            if i + 1 < n {
                let o2 = o + m * w;
                for c in 0..w {
                    let g = k * (d[o2 + c] - d[o + c]);
                    grad[o2 + c] += g;
                    grad[o + c] -= g;
                }
            }
            if j + 1 < m {
                let o2 = o + w;
                for c in 0..w {
                    let g = k * (d[o2 + c] - d[o + c]);
                    grad[o2 + c] += g;
                    grad[o + c] -= g;
                }
            }
        }
    }
}

/// Mean squared forward difference along the spatial (`u`) axis.
pub fn tv1d_space(plane: &Plane) -> f64 {
    let (n, m, w) = (plane.rows, plane.cols, plane.width);
    let stride = m * w;
    let d = &plane.data;
    let sum: f64 = (0..(n - 1) * stride)
        .map(|o| (d[o + stride] - d[o]).powi(2))
        .sum();
    sum / ((n - 1) * stride) as f64
}

pub fn tv1d_space_grad(plane: &Plane, scale: f64, grad: &mut [f64]) {
    let (n, m, w) = (plane.rows, plane.cols, plane.width);
    let stride = m * w;
    let d = &plane.data;
    let k = 2.0 * scale / ((n - 1) * stride) as f64;
    for o in 0..(n - 1) * stride {
        let g = k * (d[o + stride] - d[o]);
        grad[o + stride] += g;
        grad[o] -= g;
    }
}

/// Mean squared second difference along the time (`v`) axis.
pub fn smooth_time(plane: &Plane) -> Result<f64> {
    let (n, m, w) = (plane.rows, plane.cols, plane.width);
    if m < 3 {
        return Err(invalid(format!("time axis has {m} nodes, need at least 3")));
    }
    let d = &plane.data;
    let mut sum = 0.0;
    for i in 0..n {
        for j in 1..m - 1 {
            let o = (i * m + j) * w;
            for c in 0..w {
                let s = d[o + w + c] - 2.0 * d[o + c] + d[o - w + c];
                sum += s * s;
            }
        }
    }
    Ok(sum / (n * (m - 2) * w) as f64)
}

pub fn smooth_time_grad(plane: &Plane, scale: f64, grad: &mut [f64]) -> Result<()> {
    let (n, m, w) = (plane.rows, plane.cols, plane.width);
    if m < 3 {
        return Err(invalid(format!("time axis has {m} nodes, need at least 3")));
    }
    let d = &plane.data;
    let k = 2.0 * scale / (n * (m - 2) * w) as f64;
    for i in 0..n {
        for j in 1..m - 1 {
            let o = (i * m + j) * w;
            for c in 0..w {
                let g = k * (d[o + w + c] - 2.0 * d[o + c] + d[o - w + c]);
                grad[o + w + c] += g;
                grad[o + c] -= 2.0 * g;
                grad[o - w + c] += g;
            }
        }
    }
    Ok(())
}

/// Fused feature of one 4D point: per-scale Hadamard products, concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature(pub Vec<f64>);

impl FusedFeature {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Plane regularizer values, each averaged over the planes it applies to.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegularizerTerms {
    pub tv2d: f64,
    pub tv1d: f64,
    pub smooth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePlaneSet {
    config: PlaneConfig,
    scales: Vec<[Plane; 6]>,
}

/// Deterministic initialization: space planes uniform in `[-0.1, 0.1]`,
/// space-time planes at 1.0 so the field starts time invariant.
pub fn init_planes(config: &PlaneConfig, seed: u64) -> Result<FeaturePlaneSet> {
    config.validate()?;
    let w = config.feature_width;
    let scales = config
        .scales
        .iter()
        .enumerate()
        .map(|(s, &n)| {
            let nt = config.time_nodes(s);
            PlaneKind::ALL.map(|kind| {
                if kind.is_space_time() {
                    Plane::filled(n, nt, w, 1.0)
                } else {
                    let mut r = rng::stream(seed, &[s as u64, kind.index() as u64]);
                    Plane::from_fn(n, n, w, |_, _, _| {
                        r.gen_range(-INIT_SPACE_RANGE..=INIT_SPACE_RANGE)
                    })
                }
            })
        })
        .collect();
    Ok(FeaturePlaneSet {
        config: config.clone(),
        scales,
    })
}

impl FeaturePlaneSet {
    /// Every plane filled with `value`.
    pub fn filled(config: &PlaneConfig, value: f64) -> Result<Self> {
        config.validate()?;
        let w = config.feature_width;
        let scales = config
            .scales
            .iter()
            .enumerate()
            .map(|(s, &n)| {
                let nt = config.time_nodes(s);
                PlaneKind::ALL.map(|kind| {
                    let cols = if kind.is_space_time() { nt } else { n };
                    Plane::filled(n, cols, w, value)
                })
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            scales,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            scales: self
                .scales
                .iter()
                .map(|ps| ps.clone().map(|p| Plane::filled(p.rows, p.cols, p.width, 0.0)))
                .collect(),
        }
    }

    pub fn config(&self) -> &PlaneConfig {
        &self.config
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn fused_width(&self) -> usize {
        self.config.fused_width()
    }

    pub fn plane(&self, scale: usize, kind: PlaneKind) -> &Plane {
        &self.scales[scale][kind.index()]
    }

    pub fn plane_mut(&mut self, scale: usize, kind: PlaneKind) -> &mut Plane {
        &mut self.scales[scale][kind.index()]
    }

    /// Planes in storage order: scale-major, then [`PlaneKind::ALL`].
    pub fn planes(&self) -> impl Iterator<Item = (usize, PlaneKind, &Plane)> {
        self.scales.iter().enumerate().flat_map(|(s, ps)| {
            ps.iter().zip(PlaneKind::ALL).map(move |(p, k)| (s, k, p))
        })
    }

    pub fn planes_mut(&mut self) -> impl Iterator<Item = (usize, PlaneKind, &mut Plane)> {
        self.scales.iter_mut().enumerate().flat_map(|(s, ps)| {
            ps.iter_mut().zip(PlaneKind::ALL).map(move |(p, k)| (s, k, p))
        })
    }

    pub fn num_params(&self) -> usize {
        self.planes().map(|(_, _, p)| p.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.planes().all(|(_, _, p)| p.data.iter().all(|v| v.is_finite()))
    }

    /// Checked fused-feature query at a normalized `(x, y, z, t)` point.
    pub fn query_fused(&self, point: [f64; 4]) -> Result<FusedFeature> {
        for &c in &point {
            if !c.is_finite() || !(-COORD_SLACK..=1.0 + COORD_SLACK).contains(&c) {
                return Err(invalid(format!("query point {point:?} is outside [0, 1]^4")));
            }
        }
        let n = self.stencils_per_point();
        let mut stencils = vec![Stencil::default(); n];
        let mut factors = vec![0.0; n * self.config.feature_width];
        let mut fused = vec![0.0; self.fused_width()];
        self.forward_point(&point, &mut stencils, &mut factors, &mut fused);
        Ok(FusedFeature(fused))
    }

    /// Stencils recorded per query point (six per scale).
    pub fn stencils_per_point(&self) -> usize {
        6 * self.scales.len()
    }

    /// Unchecked fused query that records each plane's stencil and factor for
    /// the backward pass. `factors` holds `6 * scales * W` values.
    pub fn forward_point(
        &self,
        point: &[f64; 4],
        stencils: &mut [Stencil],
        factors: &mut [f64],
        fused: &mut [f64],
    ) {
        let w = self.config.feature_width;
        for (s, planes) in self.scales.iter().enumerate() {
            let out = &mut fused[s * w..(s + 1) * w];
            out.fill(1.0);
            for (k, plane) in planes.iter().enumerate() {
                let (a, b) = PlaneKind::ALL[k].axes();
                let slot = s * 6 + k;
                let st = plane.stencil(point[a], point[b]);
                let f = &mut factors[slot * w..(slot + 1) * w];
                plane.gather(&st, f);
                for (o, &v) in out.iter_mut().zip(f.iter()) {
                    *o *= v;
                }
                stencils[slot] = st;
            }
        }
    }

    /// Product rule: cotangent of each plane factor given the fused cotangent.
    pub fn factor_cotangents(&self, factors: &[f64], d_fused: &[f64], d_factors: &mut [f64]) {
        let w = self.config.feature_width;
        for s in 0..self.scales.len() {
            for c in 0..w {
                let f = |k: usize| factors[(s * 6 + k) * w + c];
                let g = d_fused[s * w + c];
                // prefix[k] = prod_{i<k} f_i, then sweep a suffix product
                let mut prefix = [1.0; 6];
                for k in 1..6 {
                    prefix[k] = prefix[k - 1] * f(k - 1);
                }
                let mut suffix = 1.0;
                for k in (0..6).rev() {
                    d_factors[(s * 6 + k) * w + c] = g * prefix[k] * suffix;
                    suffix *= f(k);
                }
            }
        }
    }

    /// Scatters per-factor cotangents of one point into `grad`.
    pub fn scatter_point(&self, stencils: &[Stencil], d_factors: &[f64], grad: &mut FeaturePlaneSet) {
        let w = self.config.feature_width;
        for (s, planes) in self.scales.iter().enumerate() {
            for (k, plane) in planes.iter().enumerate() {
                let slot = s * 6 + k;
                plane.scatter(
                    &stencils[slot],
                    &d_factors[slot * w..(slot + 1) * w],
                    &mut grad.scales[s][k].data,
                );
            }
        }
    }

    /// Adjoint of [`FeaturePlaneSet::query_fused`] with respect to every plane value.
    pub fn query_fused_backward(
        &self,
        point: [f64; 4],
        d_fused: &[f64],
        grad: &mut FeaturePlaneSet,
    ) -> Result<()> {
        if d_fused.len() != self.fused_width() {
            return Err(invalid("fused cotangent has the wrong length"));
        }
        self.query_fused(point)?;
        let n = self.stencils_per_point();
        let w = self.config.feature_width;
        let mut stencils = vec![Stencil::default(); n];
        let mut factors = vec![0.0; n * w];
        let mut fused = vec![0.0; self.fused_width()];
        self.forward_point(&point, &mut stencils, &mut factors, &mut fused);
        let mut d_factors = vec![0.0; n * w];
        self.factor_cotangents(&factors, d_fused, &mut d_factors);
        self.scatter_point(&stencils, &d_factors, grad);
        Ok(())
    }

    /// Regularizers averaged over all planes of the relevant kind and scale.
    pub fn regularizers(&self) -> Result<RegularizerTerms> {
        let mut terms = RegularizerTerms::default();
        let (mut n_space, mut n_time) = (0.0, 0.0);
        for (_, kind, plane) in self.planes() {
            if kind.is_space_time() {
                terms.tv1d += tv1d_space(plane);
                terms.smooth += smooth_time(plane)?;
                n_time += 1.0;
            } else {
                terms.tv2d += tv2d(plane);
                n_space += 1.0;
            }
        }
        terms.tv2d /= n_space;
        terms.tv1d /= n_time;
        terms.smooth /= n_time;
        Ok(terms)
    }

    /// Adds the gradient of `w.tv2d * tv2d + w.tv1d * tv1d + w.smooth * smooth`
    /// (each averaged as in [`FeaturePlaneSet::regularizers`]) into `grad`.
    pub fn regularizer_grads(&self, weights: RegularizerTerms, grad: &mut FeaturePlaneSet) -> Result<()> {
        let n = self.scales.len() as f64 * 3.0;
        for (s, kind, plane) in self.planes() {
            let g = &mut grad.scales[s][kind.index()].data;
            if kind.is_space_time() {
                if weights.tv1d != 0.0 {
                    tv1d_space_grad(plane, weights.tv1d / n, g);
                }
                if weights.smooth != 0.0 {
                    smooth_time_grad(plane, weights.smooth / n, g)?;
                }
            } else if weights.tv2d != 0.0 {
                tv2d_grad(plane, weights.tv2d / n, g);
            }
        }
        Ok(())
    }

    /// `self += other * k`, plane by plane.
    pub fn add_scaled(&mut self, other: &FeaturePlaneSet, k: f64) {
        for (a, b) in self.scales.iter_mut().zip(&other.scales) {
            for (pa, pb) in a.iter_mut().zip(b) {
                for (x, y) in pa.data.iter_mut().zip(&pb.data) {
                    *x += k * y;
                }
            }
        }
    }

    pub fn fill(&mut self, value: f64) {
        for (_, _, p) in self.planes_mut() {
            p.data.fill(value);
        }
    }

    /// Serializes the plane segment: scale count, per-scale `(N, N_t, W)`,
    /// then every plane as little-endian f32 in [`PlaneKind::ALL`] order.
    pub fn write_segment<W: Write>(&self, out: &mut W) -> Result<()> {
        let w = self.config.feature_width as u32;
        out.write_all(&(self.scales.len() as u32).to_le_bytes())?;
        for (s, &n) in self.config.scales.iter().enumerate() {
            out.write_all(&(n as u32).to_le_bytes())?;
            out.write_all(&(self.config.time_nodes(s) as u32).to_le_bytes())?;
            out.write_all(&w.to_le_bytes())?;
        }
        for (_, _, plane) in self.planes() {
            let mut buf = Vec::with_capacity(plane.data.len() * 4);
            for &v in &plane.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_segment<R: Read>(input: &mut R) -> Result<Self> {
        let count = read_u32(input)? as usize;
        if count == 0 || count > 64 {
            return Err(Error::Checkpoint(format!("implausible scale count {count}")));
        }
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            dims.push((read_u32(input)? as usize, read_u32(input)? as usize, read_u32(input)? as usize));
        }
        let width = dims[0].2;
        if dims.iter().any(|d| d.2 != width) {
            return Err(Error::Checkpoint("feature width differs between scales".into()));
        }
        let time_resolution = if dims.iter().all(|d| d.0 == d.1) {
            TimeResolution::MatchSpace
        } else if dims.iter().all(|d| d.1 == dims[0].1) {
            TimeResolution::Fixed(dims[0].1)
        } else {
            return Err(Error::Checkpoint("inconsistent time resolutions".into()));
        };
        let config = PlaneConfig {
            scales: dims.iter().map(|d| d.0).collect(),
            feature_width: width,
            time_resolution,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("plane header: {e}")))?;
        let mut set = FeaturePlaneSet::filled(&config, 0.0)?;
        for (_, _, plane) in set.planes_mut() {
            read_f32_into(input, &mut plane.data)?;
        }
        if !set.is_finite() {
            return Err(Error::Checkpoint("non-finite plane values".into()));
        }
        Ok(set)
    }
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32_into<R: Read>(input: &mut R, out: &mut [f64]) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 4];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
    for (v, b) in out.iter_mut().zip(buf.chunks_exact(4)) {
        *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    }
    Ok(())
}
