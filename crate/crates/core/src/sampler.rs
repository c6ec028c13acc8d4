//! Occlusion and motion aware ray sampling.
//!
//! Each training frame gets an occlusion importance map that is zero on
//! occluded pixels and boosts pixels that are hidden in many other frames,
//! multiplied by a clamped temporal-difference map that favors moving content.
//! Normalized, the product is the distribution rays are drawn from.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::scene_io::{ColorImage, ScalarImage};

/// How the motion map is clamped by `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    /// `min(motion, alpha)`: caps the motion weight.
    Min,
    /// `max(motion, alpha)`: floors it so static pixels keep some weight.
    Max,
}

impl std::str::FromStr for ClampMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(ClampMode::Min),
            "max" => Ok(ClampMode::Max),
            other => Err(Error::Config(format!("unknown clamp mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub alpha: f64,
    /// Window radius in frames; candidates satisfy `|j - i| < tau`.
    pub tau: usize,
    pub epsilon: f64,
    pub clamp_mode: ClampMode,
    /// Spacing of candidate frames inside the window.
    pub window_stride: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            tau: 25,
            epsilon: 1e-6,
            clamp_mode: ClampMode::Min,
            window_stride: 5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.tau < 1 || self.window_stride < 1 {
            return Err(Error::Config("tau and window stride must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// `M_i * T / (sum_k M_k + eps)` per pixel, for every frame.
pub fn occlusion_importance(masks: &[ScalarImage], epsilon: f64) -> Result<Vec<ScalarImage>> {
    let first = masks.first().ok_or_else(|| invalid("no masks given"))?;
    if masks.iter().any(|m| !m.same_shape(first)) {
        return Err(invalid("masks differ in dimensions"));
    }
    let t = masks.len() as f64;
    let mut visible = vec![0.0; first.len()];
    for m in masks {
        for (acc, &v) in visible.iter_mut().zip(m.values()) {
            *acc += v;
        }
    }
    Ok(masks
        .iter()
        .map(|m| {
            let values = m
                .values()
                .iter()
                .zip(&visible)
                .map(|(&mi, &sum)| mi * t / (sum + epsilon))
                .collect();
            ScalarImage::new(m.width(), m.height(), values)
        })
        .collect())
}

/// Frames `j != i` with `|j - i| < tau`, spaced by the window stride.
pub fn window_candidates(frame_count: usize, i: usize, config: &SamplerConfig) -> Vec<usize> {
    let mut out = Vec::new();
    let mut k = config.window_stride;
    while k < config.tau {
        if i >= k {
            out.push(i - k);
        }
        if i + k < frame_count {
            out.push(i + k);
        }
        k += config.window_stride;
    }
    out.sort_unstable();
    out
}

/// Clamped max-over-window of the per-pixel mean absolute channel difference.
pub fn motion_weight(frames: &[ColorImage], i: usize, config: &SamplerConfig) -> Result<ScalarImage> {
    let frame = frames
        .get(i)
        .ok_or_else(|| invalid(format!("frame index {i} out of range")))?;
    let candidates = window_candidates(frames.len(), i, config);
    if candidates.is_empty() {
        return Err(invalid(format!("no comparison frame within the window of frame {i}")));
    }
    let mut motion = vec![0.0f64; frame.len()];
    for &j in &candidates {
        let other = &frames[j];
        if !other.same_shape(frame) {
            return Err(invalid("frames differ in dimensions"));
        }
        for ((m, a), b) in motion.iter_mut().zip(frame.pixels()).zip(other.pixels()) {
            let d = ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
            *m = m.max(d);
        }
    }
    for m in &mut motion {
        *m = match config.clamp_mode {
            ClampMode::Min => m.min(config.alpha),
            ClampMode::Max => m.max(config.alpha),
        };
    }
    Ok(ScalarImage::new(frame.width(), frame.height(), motion))
}

/// Discrete distribution over pixels with an inverse-CDF table.
#[derive(Clone, Debug, PartialEq)]
pub struct Pmf {
    probs: Vec<f64>,
    cdf: Vec<f64>,
    last_nonzero: usize,
}

impl Pmf {
    /// Normalizes non-negative weights. Fails when they are all zero.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(invalid("weights sum to zero"));
        }
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let last_nonzero = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        Ok(Self {
            probs,
            cdf,
            last_nonzero,
        })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_weights(&vec![1.0; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = self.cdf[self.cdf.len() - 1];
        let u = rng.gen::<f64>() * total;
        let i = self.cdf.partition_point(|&c| c <= u);
        if i > self.last_nonzero {
            self.last_nonzero
        } else {
            i
        }
    }
}

/// `P_i = occlusion * motion`, normalized. Falls back to uniform over
/// unoccluded pixels when the product vanishes everywhere.
pub fn combine_and_normalize(occlusion: &ScalarImage, motion: &ScalarImage, frame: usize) -> Result<(ScalarImage, Pmf)> {
    if !occlusion.same_shape(motion) {
        return Err(invalid("occlusion and motion maps differ in dimensions"));
    }
    let combined: Vec<f64> = occlusion
        .values()
        .iter()
        .zip(motion.values())
        .map(|(a, b)| a * b)
        .collect();
    let pmf = match Pmf::from_weights(&combined) {
        Ok(p) => p,
        Err(_) => {
            let support: Vec<f64> = occlusion
                .values()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            Pmf::from_weights(&support).map_err(|_| Error::DegenerateFrame { frame })?
        }
    };
    Ok((ScalarImage::new(occlusion.width(), occlusion.height(), combined), pmf))
}

/// `count` independent draws with replacement.
pub fn draw_rays(pmf: &Pmf, count: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, &[0xD8A7]);
    (0..count).map(|_| pmf.sample(&mut r)).collect()
}

/// Precomputed per-frame maps. Frames with no unoccluded pixel have no PMF.
#[derive(Clone, Debug)]
pub struct ImportanceMaps {
    pub occlusion: Vec<ScalarImage>,
    pub motion: Vec<ScalarImage>,
    pub combined: Vec<ScalarImage>,
    pub pmfs: Vec<Option<Pmf>>,
}

impl ImportanceMaps {
    pub fn build(frames: &[ColorImage], masks: &[ScalarImage], config: &SamplerConfig) -> Result<Self> {
        config.validate()?;
        if frames.len() != masks.len() {
            return Err(invalid("frame and mask counts differ"));
        }
        let occlusion = occlusion_importance(masks, config.epsilon)?;
        let motion = (0..frames.len())
            .into_par_iter()
            .map(|i| motion_weight(frames, i, config))
            .collect::<Result<Vec<_>>>()?;
        let mut combined = Vec::with_capacity(frames.len());
        let mut pmfs = Vec::with_capacity(frames.len());
        for (i, (o, m)) in occlusion.iter().zip(&motion).enumerate() {
            match combine_and_normalize(o, m, i) {
                Ok((c, p)) => {
                    combined.push(c);
                    pmfs.push(Some(p));
                }
                Err(Error::DegenerateFrame { frame }) => {
                    log::warn!("frame {frame} is fully occluded and will not be sampled");
                    combined.push(ScalarImage::new(o.width(), o.height(), vec![0.0; o.len()]));
                    pmfs.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            occlusion,
            motion,
            combined,
            pmfs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn mask(values: Vec<f64>) -> ScalarImage {
        ScalarImage::new(values.len(), 1, values)
    }

    fn random_frames(t: usize, w: usize, h: usize, seed: u64) -> Vec<ColorImage> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|_| ColorImage::new(w, h, (0..w * h).map(|_| [r.gen(), r.gen(), r.gen()]).collect()))
            .collect()
    }

    #[test]
    fn never_occluded_pixel_gets_t_over_t_plus_eps() {
        let masks: Vec<_> = (0..10).map(|_| mask(vec![1.0, 1.0])).collect();
        let p = occlusion_importance(&masks, 1e-6).unwrap();
        for m in &p {
            assert_eq!(m.values()[0], 10.0 / (10.0 + 1e-6));
        }
    }

    #[test]
    fn occluded_pixels_are_zero_and_boosted_elsewhere() {
        let masks: Vec<_> = (0..10).map(|i| mask(vec![if i % 2 == 0 { 0.0 } else { 1.0 }, 1.0])).collect();
        let p = occlusion_importance(&masks, 1e-6).unwrap();
        for (i, m) in p.iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(m.values()[0], 0.0);
            } else {
                assert_eq!(m.values()[0], 10.0 / (5.0 + 1e-6));
                assert!((m.values()[0] - 2.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn occlusion_rejects_mismatched_masks() {
        assert!(occlusion_importance(&[mask(vec![1.0]), mask(vec![1.0, 0.0])], 1e-6).is_err());
    }

    #[test]
    fn static_video_has_no_motion() {
        let frame = random_frames(1, 4, 4, 1).remove(0);
        let frames = vec![frame; 6];
        let cfg = SamplerConfig {
            tau: 3,
            window_stride: 1,
            ..SamplerConfig::default()
        };
        let m = motion_weight(&frames, 2, &cfg).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flicker_is_clamped_in_both_modes() {
        let frames: Vec<_> = (0..4)
            .map(|i| ColorImage::new(1, 1, vec![[(i % 2) as f64; 3]]))
            .collect();
        let mut cfg = SamplerConfig {
            alpha: 0.1,
            tau: 2,
            window_stride: 1,
            clamp_mode: ClampMode::Min,
            ..SamplerConfig::default()
        };
        assert_eq!(motion_weight(&frames, 1, &cfg).unwrap().values(), &[0.1]);
        cfg.clamp_mode = ClampMode::Max;
        assert_eq!(motion_weight(&frames, 1, &cfg).unwrap().values(), &[1.0]);
        let still = vec![ColorImage::new(1, 1, vec![[0.3; 3]]); 4];
        assert_eq!(motion_weight(&still, 1, &cfg).unwrap().values(), &[0.1]);
    }

    #[test]
    fn motion_matches_window_oracle() {
        let frames = random_frames(4, 5, 3, 7);
        let cfg = SamplerConfig {
            alpha: 10.0,
            tau: 2,
            window_stride: 1,
            clamp_mode: ClampMode::Min,
            ..SamplerConfig::default()
        };
        for i in 0..4 {
            let got = motion_weight(&frames, i, &cfg).unwrap();
            for p in 0..15 {
                let mut best = 0.0f64;
                for j in 0..4usize {
                    if j != i && (j as i64 - i as i64).abs() < 2 {
                        let (a, b) = (frames[i].pixels()[p], frames[j].pixels()[p]);
                        let d = (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0;
                        best = best.max(d);
                    }
                }
                assert!((got.values()[p] - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_window_is_an_error() {
        let frames = random_frames(1, 2, 2, 0);
        assert!(motion_weight(&frames, 0, &SamplerConfig::default()).is_err());
        let frames = random_frames(3, 2, 2, 0);
        // stride 5 never reaches a neighbor inside a radius-2 window
        let cfg = SamplerConfig {
            tau: 2,
            ..SamplerConfig::default()
        };
        assert!(motion_weight(&frames, 1, &cfg).is_err());
    }

    #[test]
    fn window_uses_stride() {
        let cfg = SamplerConfig::default();
        assert_eq!(window_candidates(30, 12, &cfg), vec![2, 7, 17, 22, 27]);
        assert_eq!(window_candidates(30, 0, &cfg), vec![5, 10, 15, 20]);
    }

    #[test]
    fn combine_examples() {
        let occ = mask(vec![1.0; 4]);
        let mot = mask(vec![0.5; 4]);
        let (_, pmf) = combine_and_normalize(&occ, &mot, 0).unwrap();
        assert_eq!(pmf.probs(), &[0.25; 4]);

        let (_, pmf) = combine_and_normalize(&occ, &mask(vec![0.0, 0.0, 3.0, 0.0]), 0).unwrap();
        assert_eq!(pmf.probs(), &[0.0, 0.0, 1.0, 0.0]);

        // zero motion everywhere falls back to uniform over unoccluded pixels
        let occ = mask(vec![0.0, 2.0, 2.0, 0.0]);
        let (_, pmf) = combine_and_normalize(&occ, &mask(vec![0.0; 4]), 0).unwrap();
        assert_eq!(pmf.probs(), &[0.0, 0.5, 0.5, 0.0]);

        let err = combine_and_normalize(&mask(vec![0.0; 4]), &mask(vec![1.0; 4]), 3).unwrap_err();
        assert!(matches!(err, Error::DegenerateFrame { frame: 3 }));
    }

    #[test]
    fn combine_matches_scalar_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let occ = mask((0..50).map(|_| r.gen_range(0.0..3.0)).collect());
        let mot = mask((0..50).map(|_| r.gen_range(0.0..0.1)).collect());
        let (_, pmf) = combine_and_normalize(&occ, &mot, 0).unwrap();
        let mut total = 0.0;
        for i in 0..50 {
            total += occ.values()[i] * mot.values()[i];
        }
        for i in 0..50 {
            let want = occ.values()[i] * mot.values()[i] / total;
            assert!((pmf.probs()[i] - want).abs() < 1e-12);
        }
        assert!((pmf.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn draws_are_deterministic_and_respect_support() {
        let pmf = Pmf::from_weights(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(draw_rays(&pmf, 500, 3).iter().all(|&i| i == 2));
        let pmf = Pmf::from_weights(&[0.0, 1.0, 0.0, 2.0, 0.0]).unwrap();
        let a = draw_rays(&pmf, 1000, 11);
        assert_eq!(a, draw_rays(&pmf, 1000, 11));
        assert!(a.iter().all(|&i| i == 1 || i == 3));
    }

    #[test]
    fn two_pixel_frequencies_follow_binomial() {
        let pmf = Pmf::from_weights(&[0.25, 0.75]).unwrap();
        let n = 100_000;
        let hits = draw_rays(&pmf, n, 17).iter().filter(|&&i| i == 0).count() as f64;
        let mean = 0.25 * n as f64;
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        assert!((hits - mean).abs() < 4.0 * sd, "{hits} vs {mean}");
    }

    #[test]
    fn draws_pass_chi_square() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let weights: Vec<f64> = (0..64).map(|_| r.gen_range(0.1..2.0)).collect();
        let pmf = Pmf::from_weights(&weights).unwrap();
        let n = 100_000;
        let mut counts = vec![0.0; 64];
        for i in draw_rays(&pmf, n, 99) {
            counts[i] += 1.0;
        }
        let stat: f64 = counts
            .iter()
            .zip(pmf.probs())
            .map(|(&o, &p)| {
                let e = p * n as f64;
                (o - e) * (o - e) / e
            })
            .sum();
        let p_value = 1.0 - ChiSquared::new(63.0).unwrap().cdf(stat);
        assert!(p_value > 0.001, "chi2 = {stat}, p = {p_value}");
    }
}
