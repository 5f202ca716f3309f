//! 8-bit PNG output and input, plus a lossless float sidecar.
//!
//! The sidecar is a little-endian `u32` header length, a JSON header
//! `{"shape": [H, W, C], "dtype": "float64"}`, then the values as
//! little-endian `f64` in row-major HWC order.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::buffer::Image;
use crate::error::{Error, Result};

/// Linear map from `[lo, hi]` onto the 8-bit range before clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ChannelRange {
    fn default() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }
}

impl ChannelRange {
    fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Domain(format!(
                "channel range needs finite lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Clamps to `[0, 1]`, scales by 255 and rounds half up.
pub fn quantize(value: f64) -> u8 {
    let v = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn plane_bytes(img: &Image, channel: usize, range: ChannelRange) -> Vec<u8> {
    let c = img.channels();
    img.data()
        .iter()
        .skip(channel)
        .step_by(c)
        .map(|v| quantize((v - range.lo) / (range.hi - range.lo)))
        .collect()
}

/// Path of the grayscale plane for channel `k`: `<stem>_f<k>.png`.
pub fn plane_path(path: &Path, channel: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    path.with_file_name(format!("{stem}_f{channel}.png"))
}

/// Writes a 1- or 3-channel image as a single PNG. Any other channel count
/// is written as one grayscale PNG per channel next to `path`. Returns the
/// files written.
pub fn save_image(img: &Image, path: impl AsRef<Path>, range: ChannelRange) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    range.validate()?;
    ensure_parent(path)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    match img.channels() {
        1 => {
            let buf = GrayImage::from_raw(w, h, plane_bytes(img, 0, range)).expect("plane size");
            buf.save(path).map_err(|e| image_err(path, e))?;
            Ok(vec![path.to_path_buf()])
        }
        3 => {
            let bytes: Vec<u8> = img
                .data()
                .iter()
                .map(|v| quantize((v - range.lo) / (range.hi - range.lo)))
                .collect();
            let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("rgb size");
            buf.save(path).map_err(|e| image_err(path, e))?;
            Ok(vec![path.to_path_buf()])
        }
        _ => save_planes(img, path, range),
    }
}

/// Writes every channel as its own grayscale PNG, `<stem>_f0.png` onward.
pub fn save_planes(img: &Image, path: impl AsRef<Path>, range: ChannelRange) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    range.validate()?;
    ensure_parent(path)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    (0..img.channels())
        .map(|k| {
            let out = plane_path(path, k);
            let buf = GrayImage::from_raw(w, h, plane_bytes(img, k, range)).expect("plane size");
            buf.save(&out).map_err(|e| image_err(&out, e))?;
            Ok(out)
        })
        .collect()
}

/// Reads an 8-bit PNG as values in `[0, 1]`. Gray stays one channel, color
/// becomes RGB, and any alpha channel is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, bytes) = if decoded.color().has_color() {
        (3, decoded.to_rgb8().into_raw())
    } else {
        (1, decoded.to_luma8().into_raw())
    };
    Image::from_vec(w, h, channels, bytes.into_iter().map(|b| b as f64 / 255.0).collect())
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    shape: [usize; 3],
    dtype: String,
}

/// Lossless float dump of an image, for payloads PNG cannot hold.
pub fn save_raw(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let header = serde_json::to_vec(&RawHeader {
        shape: [img.height(), img.width(), img.channels()],
        dtype: "float64".into(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(4 + header.len() + img.data().len() * 8);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |offset: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 4 {
        return Err(parse_err(0, "missing header length"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes.get(4..4 + len).ok_or_else(|| parse_err(4, "truncated header"))?;
    let header: RawHeader = serde_json::from_slice(header_bytes).map_err(|e| parse_err(4, &e.to_string()))?;
    if header.dtype != "float64" {
        return Err(parse_err(4, "unsupported dtype"));
    }
    let [h, w, c] = header.shape;
    let body = &bytes[4 + len..];
    if body.len() != h * w * c * 8 {
        return Err(parse_err(4 + len + body.len(), "payload length does not match shape"));
    }
    let data = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Image::from_vec(w, h, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up_and_clamps() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.5), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(f64::NAN), 0);
    }

    #[test]
    fn png_round_trip_through_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 3, 3, |x, y, c| ((x + 5 * y) * 3 + c) as f64 / 255.0);
        let path = dir.path().join("a.png");
        assert_eq!(save_image(&img, &path, ChannelRange::default()).unwrap(), vec![path.clone()]);
        let back = load_image(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn many_channels_become_planes() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(4, 2, 9, |_, _, c| c as f64 / 8.0);
        let path = dir.path().join("feat.png");
        let written = save_image(&img, &path, ChannelRange::default()).unwrap();
        assert_eq!(written.len(), 9);
        for (k, p) in written.iter().enumerate() {
            assert_eq!(p.file_name().unwrap().to_str().unwrap(), format!("feat_f{k}.png"));
            let plane = load_image(p).unwrap();
            assert_eq!(plane.channels(), 1);
            assert_eq!(plane.get(0, 0, 0), quantize(k as f64 / 8.0) as f64 / 255.0);
        }
    }

    #[test]
    fn channel_range_maps_before_quantizing() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_vec(2, 1, 1, vec![-1.0, 1.0]).unwrap();
        let path = dir.path().join("g.png");
        save_image(&img, &path, ChannelRange { lo: -1.0, hi: 1.0 }).unwrap();
        assert_eq!(load_image(&path).unwrap().data(), &[0.0, 1.0]);
        assert!(save_image(&img, &path, ChannelRange { lo: 1.0, hi: 1.0 }).is_err());
    }

    #[test]
    fn raw_sidecar_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 2, 4, |x, y, c| (x as f64 - 1.3) * 1e-7 + y as f64 * 3.7 - c as f64);
        let path = dir.path().join("f.raw");
        save_raw(&img, &path).unwrap();
        assert_eq!(load_raw(&path).unwrap(), img);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_raw(&path).unwrap_err(), Error::Parse { .. }));
    }
}
