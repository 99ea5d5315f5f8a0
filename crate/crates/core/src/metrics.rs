//! Dual-space stealthiness measurement.
//!
//! PSNR and SSIM score how visible a perturbation is to a pixel-space
//! observer; the frequency disparity l2 scores what a spectrum inspector
//! sees. The three travel together in a [`StealthReport`].

use crate::error::{Error, Result};
use crate::image::Image;
use crate::objective::stealth_penalty_raw;
use crate::par;
use crate::spectral::spectrum_disparity;

/// Peak signal-to-noise ratio in dB with peak 1.0. Identical images give
/// +infinity, rendered as "Inf" by [`format_db`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "psnr shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.pixels().len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// dB value formatted for reports, two decimals, "Inf" for identity.
pub fn format_db(value: f64) -> String {
    if value.is_infinite() {
        "Inf".to_string()
    } else {
        format!("{value:.2}")
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (K1 * L)^2, K1 = 0.01, L = 1
const SSIM_C2: f64 = 9e-4; // (K2 * L)^2, K2 = 0.03

fn ssim_kernel() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut kernel = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            kernel[((dy + r) * SSIM_WINDOW as isize + dx + r) as usize] = v;
            sum += v;
        }
    }
    kernel.iter_mut().for_each(|k| *k /= sum);
    kernel
}

/// Mean structural similarity over all fully interior 11x11 Gaussian
/// windows (sigma 1.5), averaged across channels. Needs min(H, W) >= 11.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "ssim shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let kernel = ssim_kernel();
    let rows = h - SSIM_WINDOW + 1;
    let cols = w - SSIM_WINDOW + 1;

    let mut total = 0.0;
    for ch in 0..c {
        for top in 0..rows {
            for left in 0..cols {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut xx = 0.0;
                let mut yy = 0.0;
                let mut xy = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let k = kernel[dy * SSIM_WINDOW + dx];
                        let x = a.get(ch, top + dy, left + dx);
                        let y = b.get(ch, top + dy, left + dx);
                        mx += k * x;
                        my += k * y;
                        xx += k * x * x;
                        yy += k * y * y;
                        xy += k * x * y;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
    }
    Ok(total / (c * rows * cols) as f64)
}

/// Amplified frequency-disparity heat map plus the unamplified disparity
/// l2. The map is |dct2(a) - dct2(b)| averaged over channels, multiplied
/// by `amplification` and max-normalized into [0, 1] for PGM emission, so
/// any positive amplification yields the same rescaled map.
pub fn disparity_map(a: &Image, b: &Image, amplification: f64) -> Result<(Image, f64)> {
    if !(amplification > 0.0) || !amplification.is_finite() {
        return Err(Error::Argument(format!(
            "amplification {amplification} must be positive"
        )));
    }
    let disparity = spectrum_disparity(a, b)?;
    let l2 = disparity.l2_norm();
    let (h, w, c) = a.shape();
    let mut map = vec![0.0; h * w];
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                map[row * w + col] += disparity.get(ch, row, col).abs() * amplification;
            }
        }
    }
    map.iter_mut().for_each(|v| *v /= c as f64);
    let peak = map.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        map.iter_mut().for_each(|v| *v /= peak);
    }
    Ok((Image::new(h, w, 1, map)?, l2))
}

/// Per-pair stealth measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StealthReport {
    pub psnr: f64,
    pub ssim: f64,
    pub freq_l2: f64,
}

/// Scores one clean/modified pair in both spaces.
pub fn stealth_report(clean: &Image, modified: &Image) -> Result<StealthReport> {
    Ok(StealthReport {
        psnr: psnr(clean, modified)?,
        ssim: ssim(clean, modified)?,
        freq_l2: stealth_penalty_raw(clean, modified)?,
    })
}

/// Scores aligned clean/modified slices pairwise, in parallel.
pub fn batch_stealth(clean: &[Image], modified: &[Image]) -> Result<Vec<StealthReport>> {
    if clean.len() != modified.len() || clean.is_empty() {
        return Err(Error::Argument(format!(
            "need equal non-empty image lists, got {} and {}",
            clean.len(),
            modified.len()
        )));
    }
    par::map_range(clean.len(), |i| stealth_report(&clean[i], &modified[i]))
        .into_iter()
        .collect()
}

/// Arithmetic means over a batch; the PSNR mean is +infinity if any pair
/// is identical, which reads correctly as "at least this stealthy".
pub fn mean_stealth(reports: &[StealthReport]) -> Result<StealthReport> {
    if reports.is_empty() {
        return Err(Error::Argument("no stealth reports to average".into()));
    }
    let n = reports.len() as f64;
    Ok(StealthReport {
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        freq_l2: reports.iter().map(|r| r.freq_l2).sum::<f64>() / n,
    })
}
