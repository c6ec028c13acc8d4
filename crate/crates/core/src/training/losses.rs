use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Weights of the depth term and the three plane regularizers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Depth.
    pub lambda1: f64,
    /// TV on space planes.
    pub lambda2: f64,
    /// TV along the space axis of space-time planes.
    pub lambda3: f64,
    /// Temporal smoothness of space-time planes.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.0002,
            lambda3: 0.0001,
            lambda4: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub color: f64,
    pub depth: f64,
    pub tv2d: f64,
    pub tv1d: f64,
    pub smooth: f64,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.color + w.lambda1 * parts.depth + w.lambda2 * parts.tv2d + w.lambda3 * parts.tv1d + w.lambda4 * parts.smooth
}

/// `(1/R) sum ||C - C_hat||^2`.
pub fn color_loss(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if rendered.len() != target.len() {
        return Err(invalid("color batches differ in size"));
    }
    if rendered.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = rendered
        .iter()
        .zip(target)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / rendered.len() as f64)
}

/// Gradient of [`color_loss`] with respect to the rendered colors.
pub fn color_loss_grad(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let k = 2.0 / rendered.len().max(1) as f64;
    rendered
        .iter()
        .zip(target)
        .map(|(a, b)| std::array::from_fn(|c| k * (a[c] - b[c])))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub valid: usize,
    /// Set when no ray in the batch had a valid target.
    pub no_valid_rays: bool,
}

/// Mean squared error over rays whose target is valid.
pub fn depth_loss(rendered: &[f64], target: &[f64], valid: &[bool]) -> Result<DepthLoss> {
    if rendered.len() != target.len() || rendered.len() != valid.len() {
        return Err(invalid("depth batches differ in size"));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for ((a, b), &ok) in rendered.iter().zip(target).zip(valid) {
        if ok {
            sum += (a - b).powi(2);
            n += 1;
        }
    }
    Ok(DepthLoss {
        value: if n > 0 { sum / n as f64 } else { 0.0 },
        valid: n,
        no_valid_rays: n == 0,
    })
}

/// Gradient of [`depth_loss`] with respect to the rendered depths.
pub fn depth_loss_grad(rendered: &[f64], target: &[f64], valid: &[bool]) -> Vec<f64> {
    let n = valid.iter().filter(|&&v| v).count();
    let k = if n > 0 { 2.0 / n as f64 } else { 0.0 };
    rendered
        .iter()
        .zip(target)
        .zip(valid)
        .map(|((a, b), &ok)| if ok { k * (a - b) } else { 0.0 })
        .collect()
}
