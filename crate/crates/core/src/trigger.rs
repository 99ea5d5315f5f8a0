//! Backdoor triggers: additive frequency-domain perturbations and the
//! classic blended spatial patch, plus dataset poisoning.
//!
//! A frequency trigger is a short list of (channel, row, col) spectrum
//! bands and one additive delta per band, each bounded by a budget epsilon.
//! Applying it means: transform, add the deltas, transform back, clip to
//! the pixel range.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::spectral::{dct2, idct2};

/// Rectangular sub-block of the spectrum anchored at DC: bands with
/// row < `row_limit` and col < `col_limit` are inside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrequencyRegion {
    row_limit: usize,
    col_limit: usize,
}

impl FrequencyRegion {
    /// Low-frequency square covering roughly `fraction` of the spectrum
    /// area: the side is `round(sqrt(fraction) * min(height, width))`,
    /// floored at 1. For 28x28 at the default fraction 0.183 this gives a
    /// 12x12 block; for 32x32 it gives 14x14.
    pub fn low_frequency(height: usize, width: usize, fraction: f64) -> Result<FrequencyRegion> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("region needs a positive spectrum shape".into()));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Argument(format!(
                "region fraction {fraction} outside (0, 1]"
            )));
        }
        let min_side = height.min(width) as f64;
        let side = ((fraction.sqrt() * min_side).round() as usize).max(1);
        Ok(FrequencyRegion {
            row_limit: side,
            col_limit: side,
        })
    }

    /// The whole spectrum; used by the full-spectrum control variant.
    pub fn full(height: usize, width: usize) -> Result<FrequencyRegion> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("region needs a positive spectrum shape".into()));
        }
        Ok(FrequencyRegion {
            row_limit: height,
            col_limit: width,
        })
    }

    pub fn row_limit(&self) -> usize {
        self.row_limit
    }

    pub fn col_limit(&self) -> usize {
        self.col_limit
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.row_limit && col < self.col_limit
    }

    /// Number of (row, col) cells in the region.
    pub fn cells(&self) -> usize {
        self.row_limit * self.col_limit
    }
}

/// An additive spectral perturbation: `n` distinct bands, one delta each,
/// every delta within `[-epsilon, +epsilon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTrigger {
    epsilon: f64,
    /// Bands as [channel, row, col] triples.
    bands: Vec<[usize; 3]>,
    deltas: Vec<f64>,
}

impl FrequencyTrigger {
    pub fn new(epsilon: f64, bands: Vec<[usize; 3]>, deltas: Vec<f64>) -> Result<FrequencyTrigger> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Argument(format!("epsilon {epsilon} must be positive")));
        }
        if bands.is_empty() {
            return Err(Error::Argument("trigger needs at least one band".into()));
        }
        if bands.len() != deltas.len() {
            return Err(Error::Consistency(format!(
                "{} bands but {} deltas",
                bands.len(),
                deltas.len()
            )));
        }
        for (i, a) in bands.iter().enumerate() {
            for b in &bands[i + 1..] {
                if a == b {
                    return Err(Error::Consistency(format!(
                        "band [{}, {}, {}] appears twice",
                        a[0], a[1], a[2]
                    )));
                }
            }
        }
        if let Some(bad) = deltas.iter().find(|d| d.abs() > epsilon || d.is_nan()) {
            return Err(Error::Argument(format!(
                "delta {bad} exceeds the budget epsilon = {epsilon}"
            )));
        }
        Ok(FrequencyTrigger {
            epsilon,
            bands,
            deltas,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n(&self) -> usize {
        self.bands.len()
    }

    pub fn bands(&self) -> &[[usize; 3]] {
        &self.bands
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    /// Largest perturbation magnitude.
    pub fn max_delta(&self) -> f64 {
        self.deltas.iter().fold(0.0f64, |a, d| a.max(d.abs()))
    }

    /// Euclidean norm of the delta vector. With no clipping this equals the
    /// spectral disparity between a poisoned image and its original.
    pub fn delta_norm(&self) -> f64 {
        self.deltas.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

/// Transforms, perturbs the trigger bands, transforms back and clips.
pub fn apply_frequency_trigger(image: &Image, trigger: &FrequencyTrigger) -> Result<Image> {
    let (h, w, c) = image.shape();
    for band in trigger.bands() {
        let [ch, u, v] = *band;
        if ch >= c || u >= h || v >= w {
            return Err(Error::Dimension(format!(
                "band [{ch}, {u}, {v}] outside a {h}x{w}x{c} spectrum"
            )));
        }
    }
    let mut spec = dct2(image);
    for (band, &delta) in trigger.bands().iter().zip(trigger.deltas()) {
        spec.add_at(band[0], band[1], band[2], delta);
    }
    Image::from_unclipped(h, w, c, idct2(&spec))
}

/// Draws a trigger with `n` distinct bands uniform over `region` x channels
/// and deltas uniform in `[-epsilon, epsilon]`.
pub fn random_trigger(
    region: &FrequencyRegion,
    channels: usize,
    n: usize,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<FrequencyTrigger> {
    if channels == 0 {
        return Err(Error::Argument("trigger needs at least one channel".into()));
    }
    let cells = region.cells() * channels;
    if n == 0 || n > cells {
        return Err(Error::Argument(format!(
            "cannot place {n} distinct bands in a region of {cells} cells"
        )));
    }
    // Partial Fisher-Yates over the flattened (channel, row, col) grid.
    let mut pool: Vec<usize> = (0..cells).collect();
    for i in 0..n {
        let j = rng.random_range(i..cells);
        pool.swap(i, j);
    }
    let per_channel = region.cells();
    let bands = pool[..n]
        .iter()
        .map(|&flat| {
            let ch = flat / per_channel;
            let rem = flat % per_channel;
            [ch, rem / region.col_limit(), rem % region.col_limit()]
        })
        .collect();
    let deltas = (0..n).map(|_| rng.random_range(-epsilon..=epsilon)).collect();
    FrequencyTrigger::new(epsilon, bands, deltas)
}

/// Seeded convenience wrapper around [`random_trigger`].
pub fn random_trigger_seeded(
    region: &FrequencyRegion,
    channels: usize,
    n: usize,
    epsilon: f64,
    seed: u64,
) -> Result<FrequencyTrigger> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_trigger(region, channels, n, epsilon, &mut rng)
}

/// Fresh proposal with the same band count and budget; the annealer calls
/// this once per candidate (a full resample, no local move).
pub fn resample_trigger(
    trigger: &FrequencyTrigger,
    region: &FrequencyRegion,
    channels: usize,
    rng: &mut impl Rng,
) -> Result<FrequencyTrigger> {
    random_trigger(region, channels, trigger.n(), trigger.epsilon(), rng)
}

/// Hand-built high-frequency control: `n` distinct bands in the
/// bottom-right spectrum quadrant, each delta at the full budget with a
/// random sign. Deliberately the strongest trigger the budget allows, so
/// its fragility under low-pass defenses is not an artifact of size.
pub fn high_frequency_trigger(
    height: usize,
    width: usize,
    channels: usize,
    n: usize,
    epsilon: f64,
    seed: u64,
) -> Result<FrequencyTrigger> {
    let row_base = height - height / 2;
    let col_base = width - width / 2;
    let rows = height - row_base;
    let cols = width - col_base;
    let cells = rows * cols * channels;
    if n == 0 || n > cells {
        return Err(Error::Argument(format!(
            "cannot place {n} distinct bands in a {rows}x{cols}x{channels} quadrant"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..cells).collect();
    for i in 0..n {
        let j = rng.random_range(i..cells);
        pool.swap(i, j);
    }
    let bands = pool[..n]
        .iter()
        .map(|&flat| {
            let ch = flat / (rows * cols);
            let rem = flat % (rows * cols);
            [ch, row_base + rem / cols, col_base + rem % cols]
        })
        .collect();
    let deltas = (0..n)
        .map(|_| if rng.random::<bool>() { epsilon } else { -epsilon })
        .collect();
    FrequencyTrigger::new(epsilon, bands, deltas)
}

/// Applies a trigger to the items at `indices`, re-labels them to
/// `target_label` and marks them poisoned. Order and shapes are preserved.
pub fn poison_dataset(
    dataset: &LabeledDataset,
    indices: &[usize],
    trigger: &FrequencyTrigger,
    target_label: usize,
) -> Result<LabeledDataset> {
    if target_label >= dataset.num_classes() {
        return Err(Error::Argument(format!(
            "target label {target_label} outside 0..{}",
            dataset.num_classes()
        )));
    }
    let mut flags = vec![false; dataset.len()];
    for &i in indices {
        if i >= dataset.len() {
            return Err(Error::Argument(format!(
                "poison index {i} outside dataset of {}",
                dataset.len()
            )));
        }
        if flags[i] {
            return Err(Error::Consistency(format!("poison index {i} appears twice")));
        }
        flags[i] = true;
    }
    if let Some(first) = dataset.images().first() {
        // Surface band errors before fanning out.
        apply_frequency_trigger(first, trigger)?;
    }

    let images: Vec<Image> = crate::par::map_range(dataset.len(), |i| {
        if flags[i] {
            apply_frequency_trigger(dataset.image(i), trigger)
                .expect("bands validated against dataset shape")
        } else {
            dataset.image(i).clone()
        }
    });
    let labels = (0..dataset.len())
        .map(|i| if flags[i] { target_label } else { dataset.label(i) })
        .collect();
    LabeledDataset::with_poison(images, labels, dataset.num_classes(), flags, target_label)
}

/// Spatial patch baseline: a pasted pattern with a per-pixel blend mask.
#[derive(Debug, Clone)]
pub struct PatchTrigger {
    patch: Image,
    /// Planar mask, same shape as the patch, values in [0, 1].
    mask: Vec<f64>,
}

impl PatchTrigger {
    pub fn new(patch: Image, mask: Vec<f64>) -> Result<PatchTrigger> {
        if mask.len() != patch.pixels().len() {
            return Err(Error::Consistency(format!(
                "mask holds {} values, patch needs {}",
                mask.len(),
                patch.pixels().len()
            )));
        }
        if mask.iter().any(|m| !(0.0..=1.0).contains(m) || m.is_nan()) {
            return Err(Error::Argument("mask values must lie in [0, 1]".into()));
        }
        Ok(PatchTrigger { patch, mask })
    }

    pub fn patch(&self) -> &Image {
        &self.patch
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }
}

/// Blends the patch over the image: `x * (1 - m) + t * m` per pixel.
pub fn apply_patch_trigger(image: &Image, patch: &PatchTrigger) -> Result<Image> {
    if !image.same_shape(patch.patch()) {
        return Err(Error::Dimension(format!(
            "patch shape {:?} does not match image shape {:?}",
            patch.patch().shape(),
            image.shape()
        )));
    }
    let pixels = image
        .pixels()
        .iter()
        .zip(patch.patch().pixels())
        .zip(patch.mask())
        .map(|((x, t), m)| x * (1.0 - m) + t * m)
        .collect();
    let (h, w, c) = image.shape();
    Image::new(h, w, c, pixels)
}

#[derive(Serialize, Deserialize)]
struct TriggerFile {
    n: usize,
    epsilon: f64,
    bands: Vec<[usize; 3]>,
    deltas: Vec<f64>,
}

/// Writes a trigger as a small TOML document. Optional comment lines (for
/// provenance stamps) go first, prefixed with `#`.
pub fn save_trigger(trigger: &FrequencyTrigger, path: &Path, comment: Option<&str>) -> Result<()> {
    let doc = TriggerFile {
        n: trigger.n(),
        epsilon: trigger.epsilon(),
        bands: trigger.bands().to_vec(),
        deltas: trigger.deltas().to_vec(),
    };
    let body = toml::to_string(&doc)
        .map_err(|e| Error::Format(format!("trigger serialization failed: {e}")))?;
    let mut out = Vec::new();
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    out.extend_from_slice(body.as_bytes());
    fs::write(path, out)?;
    Ok(())
}

/// Reads a trigger file and re-validates every invariant.
pub fn load_trigger(path: &Path) -> Result<FrequencyTrigger> {
    let text = fs::read_to_string(path)?;
    let doc: TriggerFile =
        toml::from_str(&text).map_err(|e| Error::Format(format!("bad trigger file: {e}")))?;
    if doc.n != doc.bands.len() {
        return Err(Error::Consistency(format!(
            "trigger file claims n = {}, lists {} bands",
            doc.n,
            doc.bands.len()
        )));
    }
    FrequencyTrigger::new(doc.epsilon, doc.bands, doc.deltas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::spectrum_disparity;

    #[test]
    fn low_frequency_region_sides() {
        let r28 = FrequencyRegion::low_frequency(28, 28, 0.183).unwrap();
        assert_eq!((r28.row_limit(), r28.col_limit()), (12, 12));
        let r32 = FrequencyRegion::low_frequency(32, 32, 0.183).unwrap();
        assert_eq!((r32.row_limit(), r32.col_limit()), (14, 14));
        let tiny = FrequencyRegion::low_frequency(28, 28, 1e-6).unwrap();
        assert_eq!(tiny.row_limit(), 1, "side floors at 1");
        assert!(FrequencyRegion::low_frequency(28, 28, 0.0).is_err());
        assert!(FrequencyRegion::low_frequency(28, 28, 1.5).is_err());
    }

    #[test]
    fn random_trigger_respects_region_and_budget() {
        let region = FrequencyRegion::low_frequency(28, 28, 0.183).unwrap();
        let t = random_trigger_seeded(&region, 1, 5, 0.2, 42).unwrap();
        assert_eq!(t.n(), 5);
        for band in t.bands() {
            assert_eq!(band[0], 0);
            assert!(region.contains(band[1], band[2]));
        }
        for d in t.deltas() {
            assert!(d.abs() <= 0.2);
        }
        let again = random_trigger_seeded(&region, 1, 5, 0.2, 42).unwrap();
        assert_eq!(t, again, "same seed, same trigger");
    }

    #[test]
    fn random_trigger_band_capacity() {
        let region = FrequencyRegion::low_frequency(4, 4, 0.25).unwrap(); // 2x2
        assert!(random_trigger_seeded(&region, 1, 5, 0.1, 0).is_err());
        let t = random_trigger_seeded(&region, 1, 4, 0.1, 0).unwrap();
        assert_eq!(t.n(), 4);
    }

    #[test]
    fn delta_draws_look_uniform() {
        // Kolmogorov-Smirnov against U(-eps, eps); the 1% critical value for
        // 10000 draws is 1.63 / sqrt(n) ~ 0.0163.
        let region = FrequencyRegion::full(12, 12).unwrap();
        let eps = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut draws = Vec::with_capacity(10_000);
        while draws.len() < 10_000 {
            let t = random_trigger(&region, 1, 4, eps, &mut rng).unwrap();
            draws.extend_from_slice(t.deltas());
        }
        draws.truncate(10_000);
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let mut ks = 0.0f64;
        for (i, d) in draws.iter().enumerate() {
            let cdf = (d + eps) / (2.0 * eps);
            ks = ks.max((cdf - i as f64 / n).abs());
            ks = ks.max((cdf - (i + 1) as f64 / n).abs());
        }
        assert!(ks < 1.63 / n.sqrt(), "KS statistic {ks} too large for uniform draws");
    }

    #[test]
    fn dc_shift_on_constant_image() {
        // 4x4 constant 0.5, DC delta 0.4: every pixel moves by 0.4 / 4 = 0.1.
        let img = Image::constant(4, 4, 1, 0.5).unwrap();
        let t = FrequencyTrigger::new(0.4, vec![[0, 0, 0]], vec![0.4]).unwrap();
        let out = apply_frequency_trigger(&img, &t).unwrap();
        for &p in out.pixels() {
            assert!((p - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_saturates_bright_images() {
        let img = Image::constant(4, 4, 1, 0.98).unwrap();
        let t = FrequencyTrigger::new(0.4, vec![[0, 0, 0]], vec![0.4]).unwrap();
        let out = apply_frequency_trigger(&img, &t).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn clip_free_disparity_equals_deltas() {
        // Mid-gray keeps every perturbed pixel inside [0, 1], so the
        // spectral disparity is exactly the injected delta vector.
        let img = Image::constant(8, 8, 1, 0.5).unwrap();
        let t = FrequencyTrigger::new(0.05, vec![[0, 1, 2], [0, 3, 0]], vec![0.05, -0.02]).unwrap();
        let out = apply_frequency_trigger(&img, &t).unwrap();
        let disp = spectrum_disparity(&out, &img).unwrap();
        assert!((disp.get(0, 1, 2) - 0.05).abs() < 1e-9);
        assert!((disp.get(0, 3, 0) + 0.02).abs() < 1e-9);
        assert!((disp.l2_norm() - t.delta_norm()).abs() < 1e-9);
    }

    #[test]
    fn band_outside_spectrum_rejected() {
        let img = Image::constant(4, 4, 1, 0.5).unwrap();
        let t = FrequencyTrigger::new(0.1, vec![[0, 7, 0]], vec![0.1]).unwrap();
        assert!(matches!(
            apply_frequency_trigger(&img, &t).unwrap_err(),
            Error::Dimension(_)
        ));
        let rgb_band = FrequencyTrigger::new(0.1, vec![[2, 0, 0]], vec![0.1]).unwrap();
        assert!(apply_frequency_trigger(&img, &rgb_band).is_err());
    }

    #[test]
    fn trigger_invariants_enforced() {
        assert!(FrequencyTrigger::new(0.1, vec![[0, 0, 0]], vec![0.2]).is_err());
        assert!(FrequencyTrigger::new(0.1, vec![[0, 0, 0], [0, 0, 0]], vec![0.1, 0.1]).is_err());
        assert!(FrequencyTrigger::new(0.1, vec![[0, 0, 0]], vec![0.1, 0.1]).is_err());
        assert!(FrequencyTrigger::new(0.0, vec![[0, 0, 0]], vec![0.0]).is_err());
        assert!(FrequencyTrigger::new(0.1, vec![], vec![]).is_err());
        // Budget boundary is inclusive.
        assert!(FrequencyTrigger::new(0.1, vec![[0, 0, 0]], vec![0.1]).is_ok());
    }

    #[test]
    fn high_frequency_trigger_sits_in_bottom_right_quadrant() {
        let t = high_frequency_trigger(28, 28, 1, 3, 0.1, 9).unwrap();
        for band in t.bands() {
            assert!(band[1] >= 14 && band[2] >= 14, "band {band:?} not high-frequency");
        }
        for d in t.deltas() {
            assert_eq!(d.abs(), 0.1);
        }
    }

    fn toy_dataset() -> LabeledDataset {
        let images = (0..6)
            .map(|i| Image::constant(8, 8, 1, 0.3 + 0.1 * i as f64).unwrap())
            .collect();
        LabeledDataset::new(images, vec![0, 1, 2, 0, 1, 2], 3).unwrap()
    }

    #[test]
    fn poisoning_relabels_and_flags() {
        let ds = toy_dataset();
        let t = FrequencyTrigger::new(0.1, vec![[0, 1, 1]], vec![0.1]).unwrap();
        let poisoned = poison_dataset(&ds, &[1, 4], &t, 2).unwrap();
        assert_eq!(poisoned.len(), ds.len());
        assert_eq!(poisoned.labels(), &[0, 2, 2, 0, 2, 2]);
        assert_eq!(poisoned.poison_flags(), &[false, true, false, false, true, false]);
        assert_eq!(poisoned.target_label(), Some(2));
        // Untouched items are bit-identical, poisoned ones moved.
        assert_eq!(poisoned.image(0).pixels(), ds.image(0).pixels());
        assert_ne!(poisoned.image(1).pixels(), ds.image(1).pixels());
    }

    #[test]
    fn poisoning_rejects_bad_indices() {
        let ds = toy_dataset();
        let t = FrequencyTrigger::new(0.1, vec![[0, 1, 1]], vec![0.1]).unwrap();
        assert!(poison_dataset(&ds, &[9], &t, 2).is_err());
        assert!(poison_dataset(&ds, &[1, 1], &t, 2).is_err());
        assert!(poison_dataset(&ds, &[1], &t, 7).is_err());
    }

    #[test]
    fn empty_index_list_is_a_noop() {
        let ds = toy_dataset();
        let t = FrequencyTrigger::new(0.1, vec![[0, 1, 1]], vec![0.1]).unwrap();
        let out = poison_dataset(&ds, &[], &t, 2).unwrap();
        assert_eq!(out.labels(), ds.labels());
        assert!(out.poison_flags().iter().all(|f| !f));
    }

    #[test]
    fn patch_blend_formula() {
        let img = Image::constant(2, 2, 1, 0.2).unwrap();
        let patch_img = Image::constant(2, 2, 1, 1.0).unwrap();
        let patch = PatchTrigger::new(patch_img, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let out = apply_patch_trigger(&img, &patch).unwrap();
        let expect = [0.2, 1.0, 0.6, 0.4];
        for (o, e) in out.pixels().iter().zip(&expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn trigger_file_round_trip_is_exact() {
        let t = FrequencyTrigger::new(
            0.1,
            vec![[0, 2, 3], [0, 11, 7], [0, 0, 5]],
            vec![0.1 / 3.0, -0.09999999999, 1e-17],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trigger.toml");
        save_trigger(&t, &path, Some("config_hash=deadbeef seed=1")).unwrap();
        let back = load_trigger(&path).unwrap();
        assert_eq!(back, t, "deltas must survive the text round trip bit-for-bit");
        // Same trigger, same bytes.
        let path2 = dir.path().join("trigger2.toml");
        save_trigger(&t, &path2, Some("config_hash=deadbeef seed=1")).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn trigger_file_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "n = 1\nepsilon = 0.1\nbands = [[0, 0, 0]]\ndeltas = [0.5]\n").unwrap();
        assert!(matches!(load_trigger(&path).unwrap_err(), Error::Argument(_)));
        fs::write(&path, "n = 2\nepsilon = 0.1\nbands = [[0, 0, 0]]\ndeltas = [0.05]\n").unwrap();
        assert!(matches!(load_trigger(&path).unwrap_err(), Error::Consistency(_)));
        fs::write(&path, "nonsense").unwrap();
        assert!(matches!(load_trigger(&path).unwrap_err(), Error::Format(_)));
    }
}
