//! Input-side defenses a deployed model might sit behind, plus the
//! robustness measurements run against them.
//!
//! Three preprocessing transforms (Gaussian smoothing, adaptive Wiener
//! filtering, JPEG-style recompression) and the STRIP entropy test. All
//! transforms are pure and keep images valid; sweeps parallelize across
//! images while per-image math stays sequential.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::EvalClassifier;
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::spectral::transform_plane;
use crate::trigger::{apply_frequency_trigger, FrequencyTrigger};

/// A preprocessing defense with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DefenseSpec {
    None,
    Gaussian { window: usize, sigma: f64 },
    Wiener { window: usize },
    Jpeg { quality: u32 },
}

/// Smoothing strength when only a window size is given.
pub fn default_gaussian_sigma(window: usize) -> f64 {
    0.3 * ((window as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

impl DefenseSpec {
    /// Gaussian defense with the default sigma for its window.
    pub fn gaussian(window: usize) -> DefenseSpec {
        DefenseSpec::Gaussian { window, sigma: default_gaussian_sigma(window) }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseSpec::None => Ok(()),
            DefenseSpec::Gaussian { window, sigma } => {
                check_window(window)?;
                if !(sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::Argument(format!("sigma {sigma} must be positive")));
                }
                Ok(())
            }
            DefenseSpec::Wiener { window } => check_window(window),
            DefenseSpec::Jpeg { quality } => {
                if !(1..=100).contains(&quality) {
                    return Err(Error::Argument(format!("jpeg quality {quality} outside 1..=100")));
                }
                Ok(())
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DefenseSpec::None => "none",
            DefenseSpec::Gaussian { .. } => "gaussian",
            DefenseSpec::Wiener { .. } => "wiener",
            DefenseSpec::Jpeg { .. } => "jpeg",
        }
    }

    /// Short parameter label for report rows.
    pub fn param(&self) -> String {
        match *self {
            DefenseSpec::None => String::new(),
            DefenseSpec::Gaussian { window, .. } => format!("w={window}"),
            DefenseSpec::Wiener { window } => format!("w={window}"),
            DefenseSpec::Jpeg { quality } => format!("q={quality}"),
        }
    }
}

impl fmt::Display for DefenseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DefenseSpec::None => write!(f, "none"),
            DefenseSpec::Gaussian { window, sigma } => {
                write!(f, "gaussian(w={window}, sigma={sigma})")
            }
            DefenseSpec::Wiener { window } => write!(f, "wiener(w={window})"),
            DefenseSpec::Jpeg { quality } => write!(f, "jpeg(q={quality})"),
        }
    }
}

fn check_window(window: usize) -> Result<()> {
    if window % 2 == 0 || window < 3 {
        return Err(Error::Argument(format!("filter window {window} must be odd and >= 3")));
    }
    Ok(())
}

/// Runs one image through a defense. `None` is the identity.
pub fn apply_defense(image: &Image, defense: &DefenseSpec) -> Result<Image> {
    match *defense {
        DefenseSpec::None => Ok(image.clone()),
        DefenseSpec::Gaussian { window, sigma } => gaussian_filter(image, window, sigma),
        DefenseSpec::Wiener { window } => wiener_filter(image, window),
        DefenseSpec::Jpeg { quality } => jpeg_compress(image, quality),
    }
}

// Edge replication: out-of-range taps read the nearest border pixel.
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Per-channel convolution with a normalized Gaussian kernel.
pub fn gaussian_filter(image: &Image, window: usize, sigma: f64) -> Result<Image> {
    DefenseSpec::Gaussian { window, sigma }.validate()?;
    let (h, w, c) = image.shape();
    let r = (window / 2) as isize;

    let mut kernel = vec![0.0; window * window];
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            kernel[((dy + r) * window as isize + dx + r) as usize] = v;
            sum += v;
        }
    }
    kernel.iter_mut().for_each(|k| *k /= sum);

    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let src = image.get(
                            ch,
                            clamp_index(row as isize + dy, h),
                            clamp_index(col as isize + dx, w),
                        );
                        acc += src * kernel[((dy + r) * window as isize + dx + r) as usize];
                    }
                }
                out[(ch * h + row) * w + col] = acc;
            }
        }
    }
    Image::from_unclipped(h, w, c, out)
}

/// Adaptive local-statistics Wiener filter. Per channel: local mean and
/// variance over the window, noise power = mean of the local variances,
/// then `mu + max(var - noise, 0) / max(var, noise) * (x - mu)`.
pub fn wiener_filter(image: &Image, window: usize) -> Result<Image> {
    check_window(window)?;
    let (h, w, c) = image.shape();
    let r = (window / 2) as isize;
    let taps = (window * window) as f64;

    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        let mut means = vec![0.0; h * w];
        let mut vars = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                let mut s = 0.0;
                let mut s2 = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let v = image.get(
                            ch,
                            clamp_index(row as isize + dy, h),
                            clamp_index(col as isize + dx, w),
                        );
                        s += v;
                        s2 += v * v;
                    }
                }
                let mu = s / taps;
                means[row * w + col] = mu;
                vars[row * w + col] = (s2 / taps - mu * mu).max(0.0);
            }
        }
        let noise = vars.iter().sum::<f64>() / (h * w) as f64;
        for row in 0..h {
            for col in 0..w {
                let i = row * w + col;
                let denom = vars[i].max(noise);
                out[ch * h * w + i] = if denom == 0.0 {
                    means[i]
                } else {
                    means[i]
                        + (vars[i] - noise).max(0.0) / denom * (image.get(ch, row, col) - means[i])
                };
            }
        }
    }
    Image::from_unclipped(h, w, c, out)
}

// Example luminance quantization table from the JPEG standard (Annex K),
// applied to every channel here.
const LUMINANCE_BASE: [i64; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

pub(crate) fn quantization_table(quality: u32) -> [i64; 64] {
    let q = quality as i64;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut table = [0i64; 64];
    for (entry, base) in table.iter_mut().zip(LUMINANCE_BASE) {
        *entry = ((base * scale + 50) / 100).max(1);
    }
    table
}

/// JPEG-style recompression: the quantization loss without the codec.
/// Channels are scaled to [-128, 127], carved into 8x8 blocks (edge
/// replication pads ragged borders), block-DCT'd, quantized by the scaled
/// luminance table, and reassembled. No subsampling, no entropy coding.
pub fn jpeg_compress(image: &Image, quality: u32) -> Result<Image> {
    DefenseSpec::Jpeg { quality }.validate()?;
    let (h, w, c) = image.shape();
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let table = quantization_table(quality);

    let mut out = vec![0.0; h * w * c];
    let mut padded = vec![0.0; ph * pw];
    let mut block = vec![0.0; 64];
    for ch in 0..c {
        for row in 0..ph {
            for col in 0..pw {
                padded[row * pw + col] =
                    image.get(ch, row.min(h - 1), col.min(w - 1)) * 255.0 - 128.0;
            }
        }
        for br in (0..ph).step_by(8) {
            for bc in (0..pw).step_by(8) {
                for dy in 0..8 {
                    for dx in 0..8 {
                        block[dy * 8 + dx] = padded[(br + dy) * pw + bc + dx];
                    }
                }
                let mut coeffs = transform_plane(&block, 8, 8, false);
                for (value, q) in coeffs.iter_mut().zip(table) {
                    *value = (*value / q as f64).round() * q as f64;
                }
                let restored = transform_plane(&coeffs, 8, 8, true);
                for dy in 0..8 {
                    for dx in 0..8 {
                        padded[(br + dy) * pw + bc + dx] = restored[dy * 8 + dx];
                    }
                }
            }
        }
        for row in 0..h {
            for col in 0..w {
                out[(ch * h + row) * w + col] = (padded[row * pw + col] + 128.0) / 255.0;
            }
        }
    }
    Image::from_unclipped(h, w, c, out)
}

/// Shannon entropy in nats; zero-probability terms contribute nothing.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// STRIP core: blend the image with sampled clean overlays, score each
/// blend with `forward`, and average the prediction entropies. The pool is
/// put into a canonical content order before the seeded no-replacement
/// draw, so pool permutations cannot change the result.
pub fn strip_entropy_with<F>(
    mut forward: F,
    image: &Image,
    pool: &[Image],
    n_overlays: usize,
    blend: f64,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&Image) -> Result<Vec<f64>>,
{
    if pool.is_empty() {
        return Err(Error::Argument("overlay pool is empty".into()));
    }
    if n_overlays == 0 || n_overlays > pool.len() {
        return Err(Error::Argument(format!(
            "need 1..={} overlays, got {n_overlays}",
            pool.len()
        )));
    }
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::Argument(format!("blend {blend} outside [0, 1]")));
    }
    for c in pool {
        if !image.same_shape(c) {
            return Err(Error::Dimension("overlay shape differs from test image".into()));
        }
    }

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (pool[a].pixels(), pool[b].pixels());
        pa.iter()
            .zip(pb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_overlays {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }

    let (h, w, c) = image.shape();
    let mut total = 0.0;
    for &pick in &order[..n_overlays] {
        let overlay = &pool[pick];
        let mixed: Vec<f64> = image
            .pixels()
            .iter()
            .zip(overlay.pixels())
            .map(|(x, o)| blend * x + (1.0 - blend) * o)
            .collect();
        let probs = forward(&Image::new(h, w, c, mixed)?)?;
        total += shannon_entropy(&probs);
    }
    Ok(total / n_overlays as f64)
}

/// STRIP against a real model's softmax output.
pub fn strip_entropy(
    model: &EvalClassifier,
    image: &Image,
    pool: &[Image],
    n_overlays: usize,
    blend: f64,
    seed: u64,
) -> Result<f64> {
    strip_entropy_with(|x| model.forward(x), image, pool, n_overlays, blend, seed)
}

/// Fraction of non-target test samples steered to the target label after
/// triggering and defending. Samples already labeled with the target are
/// excluded so the rate measures flips, not base rate.
pub fn attack_success_rate(
    model: &EvalClassifier,
    test: &LabeledDataset,
    trigger: &FrequencyTrigger,
    target_label: usize,
    defense: &DefenseSpec,
) -> Result<f64> {
    defense.validate()?;
    let eligible: Vec<usize> =
        (0..test.len()).filter(|&i| test.label(i) != target_label).collect();
    if eligible.is_empty() {
        return Err(Error::Argument(
            "no test samples with a label other than the target".into(),
        ));
    }
    let hits = par::map_slice(&eligible, |&i| -> Result<bool> {
        let triggered = apply_frequency_trigger(test.image(i), trigger)?;
        let defended = apply_defense(&triggered, defense)?;
        Ok(model.predict(&defended)? == target_label)
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&hit| hit).count() as f64 / eligible.len() as f64)
}

/// Clean accuracy with the defense in front of the model.
pub fn defended_accuracy(
    model: &EvalClassifier,
    test: &LabeledDataset,
    defense: &DefenseSpec,
) -> Result<f64> {
    defense.validate()?;
    if test.is_empty() {
        return Err(Error::Argument("empty test set".into()));
    }
    let hits = par::map_range(test.len(), |i| -> Result<bool> {
        let defended = apply_defense(test.image(i), defense)?;
        Ok(model.predict(&defended)? == test.label(i))
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&hit| hit).count() as f64 / test.len() as f64)
}
