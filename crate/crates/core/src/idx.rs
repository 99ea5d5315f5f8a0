//! IDX dataset files (the MNIST container format).
//!
//! Layout: a 4-byte big-endian magic word whose third byte encodes the
//! element type (0x08 = unsigned byte) and whose fourth byte is the
//! dimension count, followed by one big-endian u32 per dimension, followed
//! by the raw payload. Images use magic 0x00000803 (count, rows, cols),
//! labels use 0x00000801 (count). Bytes scale to pixels as b / 255.

use std::fs;
use std::path::Path;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "file truncated while reading {what} (need {end} bytes, have {})",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    if count > 0 && (rows == 0 || cols == 0) {
        return Err(Error::Format(format!("degenerate image shape {rows}x{cols}")));
    }
    let payload = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("image payload size overflows".into()))?;
    let body = &bytes[16..];
    if body.len() != payload {
        return Err(Error::Format(format!(
            "image payload holds {} bytes, header promises {payload}",
            body.len()
        )));
    }
    Ok((count, rows, cols, body))
}

fn parse_labels(bytes: &[u8]) -> Result<(usize, &[u8])> {
    let magic = read_u32(bytes, 0, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "label payload holds {} bytes, header promises {count}",
            body.len()
        )));
    }
    Ok((count, body))
}

/// Loads an image/label file pair into a dataset. The class count is
/// inferred as `max label + 1` (floored at 2 so degenerate files still form
/// a valid dataset).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let (n_images, rows, cols, image_body) = parse_images(&image_bytes)?;
    let (n_labels, label_body) = parse_labels(&label_bytes)?;
    if n_images != n_labels {
        return Err(Error::Consistency(format!(
            "{n_images} images but {n_labels} labels"
        )));
    }

    let stride = rows * cols;
    let images = crate::par::map_range(n_images, |i| {
        let pixels = image_body[i * stride..(i + 1) * stride]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        // Range and shape hold by construction: bytes map into [0, 1].
        Image::new(rows, cols, 1, pixels).expect("byte-scaled image is always valid")
    });
    let labels: Vec<usize> = label_body.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    LabeledDataset::new(images, labels, num_classes)
}

/// Writes a dataset back out as an IDX pair, quantizing pixels to bytes
/// with round-to-nearest. Only single-channel datasets fit the format.
pub fn save_idx(dataset: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Argument("refusing to write an empty IDX pair".into()));
    }
    let (rows, cols, channels) = dataset.image_shape()?;
    if channels != 1 {
        return Err(Error::Dimension(format!(
            "IDX stores single-channel images, dataset has {channels} channels"
        )));
    }
    let n = dataset.len() as u32;

    let mut image_bytes = Vec::with_capacity(16 + dataset.len() * rows * cols);
    image_bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&n.to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for image in dataset.images() {
        for &p in image.pixels() {
            image_bytes.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }

    let mut label_bytes = Vec::with_capacity(8 + dataset.len());
    label_bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&n.to_be_bytes());
    for &l in dataset.labels() {
        if l > 255 {
            return Err(Error::Argument(format!("label {l} does not fit a byte")));
        }
        label_bytes.push(l as u8);
    }

    fs::write(images_path, image_bytes)?;
    fs::write(labels_path, label_bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(count: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&count.to_be_bytes());
        bytes.extend_from_slice(&rows.to_be_bytes());
        bytes.extend_from_slice(&cols.to_be_bytes());
        bytes.extend_from_slice(body);
        bytes
    }

    fn label_file(count: u32, body: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&count.to_be_bytes());
        bytes.extend_from_slice(body);
        bytes
    }

    fn write_pair(images: &[u8], labels: &[u8]) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images-idx3-ubyte");
        let lp = dir.path().join("labels-idx1-ubyte");
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (dir, ip, lp)
    }

    #[test]
    fn loads_and_scales_pixels() {
        let (_d, ip, lp) = write_pair(
            &image_file(2, 2, 2, &[0, 51, 102, 153, 204, 255, 0, 127]),
            &label_file(2, &[3, 9]),
        );
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_shape().unwrap(), (2, 2, 1));
        assert_eq!(ds.num_classes(), 10);
        assert!((ds.image(0).get(0, 0, 1) - 51.0 / 255.0).abs() < 1e-15);
        assert_eq!(ds.labels(), &[3, 9]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut img = image_file(1, 1, 1, &[0]);
        img[2] = 0x07;
        let (_d, ip, lp) = write_pair(&img, &label_file(1, &[0]));
        assert!(matches!(load_idx(&ip, &lp).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn rejects_truncated_payload() {
        let (_d, ip, lp) = write_pair(&image_file(2, 2, 2, &[0; 7]), &label_file(2, &[0, 1]));
        assert!(matches!(load_idx(&ip, &lp).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn rejects_count_mismatch() {
        let (_d, ip, lp) = write_pair(&image_file(2, 1, 1, &[0, 1]), &label_file(1, &[0]));
        assert!(matches!(load_idx(&ip, &lp).unwrap_err(), Error::Consistency(_)));
    }

    #[test]
    fn empty_pair_loads_cleanly() {
        let (_d, ip, lp) = write_pair(&image_file(0, 28, 28, &[]), &label_file(0, &[]));
        let ds = load_idx(&ip, &lp).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn save_load_round_trip_quantizes_once() {
        let images = vec![
            Image::new(2, 2, 1, vec![0.0, 0.2, 0.4, 1.0]).unwrap(),
            Image::new(2, 2, 1, vec![0.9, 0.5, 0.1, 0.3]).unwrap(),
        ];
        let ds = LabeledDataset::new(images, vec![1, 7], 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("im");
        let lp = dir.path().join("lb");
        save_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.image(0).pixels().iter().zip(ds.image(0).pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // A second trip through the quantizer is exact.
        let dir2 = tempfile::tempdir().unwrap();
        let ip2 = dir2.path().join("im");
        let lp2 = dir2.path().join("lb");
        save_idx(&back, &ip2, &lp2).unwrap();
        let again = load_idx(&ip2, &lp2).unwrap();
        assert_eq!(again.image(1).pixels(), back.image(1).pixels());
    }
}
