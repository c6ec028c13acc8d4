use super::{ColorImage, ScalarImage};
use crate::error::{invalid, Result};

/// Side length of the Gaussian SSIM window.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB for unit dynamic range. Identical images
/// give `+inf`.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(invalid("psnr: image dimensions differ"));
    }
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(psnr_from_mse(sum / (3 * a.len()) as f64))
}

/// PSNR restricted to pixels where `region >= 0.5`. Errors on an empty region.
pub fn psnr_masked(a: &ColorImage, b: &ColorImage, region: &ScalarImage) -> Result<f64> {
    if !a.same_shape(b) || a.width() != region.width() || a.height() != region.height() {
        return Err(invalid("psnr: image dimensions differ"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, q), &m) in a.pixels().iter().zip(b.pixels()).zip(region.values()) {
        if m >= 0.5 {
            sum += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
            count += 3;
        }
    }
    if count == 0 {
        return Err(invalid("psnr: empty region"));
    }
    Ok(psnr_from_mse(sum / count as f64))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering of a `w x h` channel.
fn filter(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Local SSIM of every valid window, row-major over window positions.
fn ssim_channel_map(a: &[f64], b: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<_>>();
    let mu_a = filter(a, w, h, &k);
    let mu_b = filter(b, w, h, &k);
    let aa = filter(&prod(&|i| a[i] * a[i]), w, h, &k);
    let bb = filter(&prod(&|i| b[i] * b[i]), w, h, &k);
    let ab = filter(&prod(&|i| a[i] * b[i]), w, h, &k);
    (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect()
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let map = ssim_channel_map(a, b, w, h);
    map.iter().sum::<f64>() / map.len() as f64
}

fn check_ssim_dims(a: &ColorImage, b: &ColorImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(invalid("ssim: image dimensions differ"));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    Ok(())
}

fn channel(img: &ColorImage, c: usize) -> Vec<f64> {
    img.pixels().iter().map(|p| p[c]).collect()
}

/// Mean local SSIM over the windows whose center pixel has `region >= 0.5`.
/// Errors when no such window exists.
pub fn ssim_masked(a: &ColorImage, b: &ColorImage, region: &ScalarImage) -> Result<f64> {
    check_ssim_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if region.width() != w || region.height() != h {
        return Err(invalid("ssim: region dimensions differ"));
    }
    let half = SSIM_WINDOW / 2;
    let ow = w + 1 - SSIM_WINDOW;
    let maps: Vec<Vec<f64>> = (0..3).map(|c| ssim_channel_map(&channel(a, c), &channel(b, c), w, h)).collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, _) in maps[0].iter().enumerate() {
        let (y, x) = (i / ow + half, i % ow + half);
        if region.get(y, x) >= 0.5 {
            sum += (maps[0][i] + maps[1][i] + maps[2][i]) / 3.0;
            n += 1;
        }
    }
    if n == 0 {
        return Err(invalid("ssim: no full window is centered in the region"));
    }
    Ok(sum / n as f64)
}

/// Mean structural similarity: 11x11 Gaussian window (sigma 1.5), unit
/// dynamic range, valid windows only, averaged over the three channels.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check_ssim_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if a == b {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    for c in 0..3 {
        sum += ssim_channel(&channel(a, c), &channel(b, c), w, h);
    }
    Ok(sum / 3.0)
}
