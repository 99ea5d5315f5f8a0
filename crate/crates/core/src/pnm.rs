//! Binary PNM images: P5 (grayscale) and P6 (RGB), maxval 255 only.
//!
//! Written headers are canonical ("P5\n<w> <h>\n255\n" followed by the
//! payload); the reader accepts any whitespace between header tokens.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Saves an image as P5 (1 channel) or P6 (3 channels), quantizing each
/// pixel with round-to-nearest.
pub fn save_pnm(image: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = image.shape();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => unreachable!("Image enforces 1 or 3 channels"),
    };
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    // PNM interleaves channels per pixel; our store is planar.
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let p = image.get(ch, row, col);
                bytes.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a P5 or P6 file written by [`save_pnm`] or any other maxval-255
/// producer.
pub fn load_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("not a binary PNM file (P5/P6)".into())),
    };

    // Scan three ASCII integers (width, height, maxval) separated by
    // whitespace, then exactly one whitespace byte before the payload.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("PNM header ended before width/height/maxval".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf-8");
        *field = text
            .parse()
            .map_err(|_| Error::Format(format!("PNM header field '{text}' out of range")))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace after PNM maxval".into()));
    }
    pos += 1;

    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PNM maxval {maxval}, expected 255")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Format(format!("degenerate PNM shape {w}x{h}")));
    }
    let payload = &bytes[pos..];
    let expected = h * w * channels;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "PNM payload holds {} bytes, {w}x{h}x{channels} needs {expected}",
            payload.len()
        )));
    }

    let mut pixels = vec![0.0; expected];
    let plane = h * w;
    for row in 0..h {
        for col in 0..w {
            for ch in 0..channels {
                let b = payload[(row * w + col) * channels + ch];
                pixels[ch * plane + row * w + col] = f64::from(b) / 255.0;
            }
        }
    }
    Image::new(h, w, channels, pixels)
}
