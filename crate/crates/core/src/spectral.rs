//! Two-dimensional type-II discrete cosine transform and spectrum tools.
//!
//! The transform is orthonormal: the 1-D basis along an axis of length N
//! weighs the DC row by sqrt(1/N) and every other row by sqrt(2/N), so the
//! inverse is exactly the transpose and energy is preserved (Parseval).
//! Both directions are computed separably, one axis at a time, from cached
//! cosine tables.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::image::Image;

/// DCT coefficients of an image, stored planar like [`Image`] pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    channels: usize,
    coeffs: Vec<f64>,
}

impl Spectrum {
    /// Wraps a coefficient buffer, validating shape and finiteness.
    pub fn from_coeffs(height: usize, width: usize, channels: usize, coeffs: Vec<f64>) -> Result<Spectrum> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "spectrum shape {height}x{width}x{channels} must be positive"
            )));
        }
        if coeffs.len() != height * width * channels {
            return Err(Error::Consistency(format!(
                "coefficient buffer holds {} values, shape needs {}",
                coeffs.len(),
                height * width * channels
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Argument("non-finite DCT coefficient".into()));
        }
        Ok(Spectrum {
            height,
            width,
            channels,
            coeffs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient at (channel, row frequency, column frequency).
    pub fn get(&self, channel: usize, u: usize, v: usize) -> f64 {
        self.coeffs[(channel * self.height + u) * self.width + v]
    }

    /// Adds `delta` to the coefficient at (channel, u, v).
    pub fn add_at(&mut self, channel: usize, u: usize, v: usize, delta: f64) {
        self.coeffs[(channel * self.height + u) * self.width + v] += delta;
    }

    /// Sum of squared coefficients (spectral energy).
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    /// Euclidean norm of all coefficients.
    pub fn l2_norm(&self) -> f64 {
        self.energy().sqrt()
    }
}

/// Returns the cached orthonormal cosine table for length `n`: entry
/// `[k * n + i]` holds `scale(k) * cos(pi * (2i + 1) * k / (2n))`.
fn cos_table(n: usize) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("cosine cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| {
            let mut table = vec![0.0; n * n];
            let dc = (1.0 / n as f64).sqrt();
            let ac = (2.0 / n as f64).sqrt();
            for k in 0..n {
                let scale = if k == 0 { dc } else { ac };
                for i in 0..n {
                    let angle = std::f64::consts::PI * (2 * i + 1) as f64 * k as f64
                        / (2 * n) as f64;
                    table[k * n + i] = scale * angle.cos();
                }
            }
            Arc::new(table)
        })
        .clone()
}

fn check_buffer(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Dimension(format!(
            "shape {height}x{width}x{channels} must be positive"
        )));
    }
    if len != height * width * channels {
        return Err(Error::Consistency(format!(
            "buffer holds {len} values, shape {height}x{width}x{channels} needs {}",
            height * width * channels
        )));
    }
    Ok(())
}

/// Forward transform of one plane. `transpose_basis` selects between the
/// analysis direction (false) and the synthesis direction (true).
pub(crate) fn transform_plane(plane: &[f64], height: usize, width: usize, inverse: bool) -> Vec<f64> {
    let row_basis = cos_table(width);
    let col_basis = cos_table(height);

    // Rows first: out[r][k] = sum_i basis(k, i) * plane[r][i].
    let mut rows = vec![0.0; height * width];
    for r in 0..height {
        let src = &plane[r * width..(r + 1) * width];
        let dst = &mut rows[r * width..(r + 1) * width];
        for k in 0..width {
            let mut acc = 0.0;
            if inverse {
                for (i, &x) in src.iter().enumerate() {
                    acc += row_basis[i * width + k] * x;
                }
            } else {
                let row = &row_basis[k * width..(k + 1) * width];
                for (i, &x) in src.iter().enumerate() {
                    acc += row[i] * x;
                }
            }
            dst[k] = acc;
        }
    }

    // Then columns: out[k][c] = sum_i basis(k, i) * rows[i][c].
    let mut out = vec![0.0; height * width];
    for k in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            if inverse {
                for i in 0..height {
                    acc += col_basis[i * height + k] * rows[i * width + c];
                }
            } else {
                for i in 0..height {
                    acc += col_basis[k * height + i] * rows[i * width + c];
                }
            }
            out[k * width + c] = acc;
        }
    }
    out
}

/// Forward 2-D DCT of a planar value buffer (any real values, not just
/// pixels; difference images go through here too).
pub fn dct2_array(height: usize, width: usize, channels: usize, values: &[f64]) -> Result<Spectrum> {
    check_buffer(height, width, channels, values.len())?;
    let plane = height * width;
    let mut coeffs = Vec::with_capacity(values.len());
    for c in 0..channels {
        coeffs.extend(transform_plane(
            &values[c * plane..(c + 1) * plane],
            height,
            width,
            false,
        ));
    }
    Spectrum::from_coeffs(height, width, channels, coeffs)
}

/// Forward 2-D DCT of an image, one transform per channel.
pub fn dct2(image: &Image) -> Spectrum {
    let (h, w, c) = image.shape();
    dct2_array(h, w, c, image.pixels()).expect("valid image always transforms")
}

/// Inverse 2-D DCT. Returns the raw planar values without clipping; a
/// perturbed spectrum can land outside [0, 1] and the caller decides what
/// to do about it.
pub fn idct2(spectrum: &Spectrum) -> Vec<f64> {
    let (h, w, c) = spectrum.shape();
    let plane = h * w;
    let mut values = Vec::with_capacity(spectrum.coeffs().len());
    for ch in 0..c {
        values.extend(transform_plane(
            &spectrum.coeffs()[ch * plane..(ch + 1) * plane],
            h,
            w,
            true,
        ));
    }
    values
}

/// DCT of the pixelwise difference `a - b`. Shapes must match.
pub fn spectrum_disparity(a: &Image, b: &Image) -> Result<Spectrum> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "disparity needs matching shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let diff: Vec<f64> = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| x - y)
        .collect();
    let (h, w, c) = a.shape();
    dct2_array(h, w, c, &diff)
}

/// Per-coefficient mean of `log(1 + |dct2|)` over a set of images, averaged
/// over channels into a single-plane spectrum. This is the "where does the
/// energy sit" picture used to compare clean and poisoned sets.
pub fn average_log_spectrum(images: &[Image]) -> Result<Spectrum> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("average spectrum of an empty set".into()))?;
    let (h, w, c) = first.shape();
    if let Some(bad) = images.iter().position(|im| !im.same_shape(first)) {
        return Err(Error::Dimension(format!(
            "image {bad} has shape {:?}, expected {:?}",
            images[bad].shape(),
            first.shape()
        )));
    }

    let spectra = crate::par::map_slice(images, dct2);
    let plane = h * w;
    let mut acc = vec![0.0; plane];
    for spec in &spectra {
        for ch in 0..c {
            for (a, coeff) in acc
                .iter_mut()
                .zip(&spec.coeffs()[ch * plane..(ch + 1) * plane])
            {
                *a += coeff.abs().ln_1p();
            }
        }
    }
    let scale = 1.0 / (images.len() * c) as f64;
    for a in &mut acc {
        *a *= scale;
    }
    Spectrum::from_coeffs(h, w, 1, acc)
}

/// Renders a spectrum as a grayscale heat map: log(1 + |coeff|), channels
/// averaged, linearly rescaled so the largest value maps to white.
pub fn spectrum_heatmap(spectrum: &Spectrum) -> Image {
    let (h, w, c) = spectrum.shape();
    let plane = h * w;
    let mut mag = vec![0.0; plane];
    for ch in 0..c {
        for (m, coeff) in mag
            .iter_mut()
            .zip(&spectrum.coeffs()[ch * plane..(ch + 1) * plane])
        {
            *m += coeff.abs().ln_1p();
        }
    }
    let peak = mag.iter().fold(0.0f64, |a, &b| a.max(b));
    if peak > 0.0 {
        for m in &mut mag {
            *m /= peak;
        }
    }
    Image::new(h, w, 1, mag).expect("normalized magnitudes are valid pixels")
}

/// Writes a spectrum as CSV, one row of coefficients per line, channels as
/// consecutive blocks. An optional comment line goes first.
pub fn write_spectrum_csv(spectrum: &Spectrum, path: &Path, comment: Option<&str>) -> Result<()> {
    let mut out = Vec::new();
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let (h, w, channels) = spectrum.shape();
    for ch in 0..channels {
        if channels > 1 {
            writeln!(out, "# channel {ch}")?;
        }
        for u in 0..h {
            let row: Vec<String> = (0..w).map(|v| format!("{}", spectrum.get(ch, u, v))).collect();
            writeln!(out, "{}", row.join(","))?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Definition-level O(N^4) transform used as the oracle for the fast path.
    fn brute_dct2(height: usize, width: usize, x: &[f64]) -> Vec<f64> {
        let scale = |k: usize, n: usize| {
            if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            }
        };
        let mut out = vec![0.0; height * width];
        for u in 0..height {
            for v in 0..width {
                let mut acc = 0.0;
                for i in 0..height {
                    for j in 0..width {
                        let ci = (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64
                            / (2 * height) as f64)
                            .cos();
                        let cj = (std::f64::consts::PI * (2 * j + 1) as f64 * v as f64
                            / (2 * width) as f64)
                            .cos();
                        acc += x[i * width + j] * ci * cj;
                    }
                }
                out[u * width + v] = scale(u, height) * scale(v, width) * acc;
            }
        }
        out
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..h * w * c).map(|_| rng.random_range(0.0..=1.0)).collect();
        Image::new(h, w, c, px).unwrap()
    }

    #[test]
    fn matches_brute_force_on_small_sizes() {
        for (h, w) in [(1, 1), (2, 2), (3, 5), (4, 4), (7, 5), (8, 8)] {
            let img = random_image(h, w, 1, (h * 100 + w) as u64);
            let fast = dct2(&img);
            let brute = brute_dct2(h, w, img.pixels());
            for (f, b) in fast.coeffs().iter().zip(&brute) {
                assert!((f - b).abs() < 1e-10, "{h}x{w}: {f} vs {b}");
            }
        }
    }

    #[test]
    fn round_trip_is_tight() {
        for (h, w, c) in [(1, 1, 1), (2, 2, 1), (7, 5, 3), (28, 28, 1), (32, 32, 3)] {
            let img = random_image(h, w, c, (h * 1000 + w * 10 + c) as u64);
            let back = idct2(&dct2(&img));
            let max_err = img
                .pixels()
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-12, "{h}x{w}x{c} round trip error {max_err}");
        }
    }

    #[test]
    fn parseval_energy_is_preserved() {
        let img = random_image(28, 28, 1, 5);
        let spatial: f64 = img.pixels().iter().map(|p| p * p).sum();
        let spectral = dct2(&img).energy();
        assert!(((spatial - spectral) / spatial).abs() < 1e-12);
    }

    #[test]
    fn constant_image_concentrates_at_dc() {
        let img = Image::constant(4, 4, 1, 0.5).unwrap();
        let spec = dct2(&img);
        assert!((spec.get(0, 0, 0) - 2.0).abs() < 1e-12);
        for u in 0..4 {
            for v in 0..4 {
                if (u, v) != (0, 0) {
                    assert!(spec.get(0, u, v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transform_is_linear() {
        let img = random_image(6, 6, 1, 9);
        let doubled: Vec<f64> = img.pixels().iter().map(|p| 2.0 * p).collect();
        let a = dct2_array(6, 6, 1, img.pixels()).unwrap();
        let b = dct2_array(6, 6, 1, &doubled).unwrap();
        for (x, y) in a.coeffs().iter().zip(b.coeffs()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn disparity_of_identical_images_is_zero() {
        let img = random_image(8, 8, 3, 3);
        let d = spectrum_disparity(&img, &img).unwrap();
        assert_eq!(d.l2_norm(), 0.0);
    }

    #[test]
    fn disparity_shape_mismatch_rejected() {
        let a = random_image(8, 8, 1, 1);
        let b = random_image(8, 4, 1, 1);
        assert!(matches!(
            spectrum_disparity(&a, &b).unwrap_err(),
            Error::Dimension(_)
        ));
    }

    #[test]
    fn average_log_spectrum_of_copies_matches_single() {
        let img = random_image(8, 8, 1, 17);
        let avg = average_log_spectrum(&[img.clone(), img.clone(), img.clone()]).unwrap();
        let single = dct2(&img);
        for (a, c) in avg.coeffs().iter().zip(single.coeffs()) {
            assert!((a - c.abs().ln_1p()).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_is_normalized() {
        let img = random_image(16, 16, 1, 21);
        let map = spectrum_heatmap(&dct2(&img));
        assert_eq!(map.shape(), (16, 16, 1));
        let peak = map.pixels().iter().fold(0.0f64, |a, &b| a.max(b));
        assert!((peak - 1.0).abs() < 1e-12, "peak must rescale to 1");
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let mut coeffs = vec![0.0; 16];
        coeffs[0] = 2.0;
        let spec = Spectrum::from_coeffs(4, 4, 1, coeffs).unwrap();
        let values = idct2(&spec);
        for v in values {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }
}
