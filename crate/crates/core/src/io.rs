//! PNG reading and writing for images, masks and overlays.

use std::path::Path;

use image::{ImageBuffer, ImageError, Luma, Rgb};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// Overlay blend weight of the mask color.
pub const OVERLAY_ALPHA: f64 = 0.4;
pub const OVERLAY_COLOR: [f64; 3] = [1.0, 0.0, 0.0];

fn image_error(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(source) => Error::io(path, source),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Reads any supported image as RGB in `[0, 1]`, at 16-bit precision.
pub fn read_image<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.into_rgb16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| T::lit(f64::from(v) / 65535.0)).collect();
    ImageTensor::new(h as usize, w as usize, 3, data)
}

/// Writes an RGB image as a 16-bit PNG.
pub fn write_image<T: Scalar>(path: &Path, image: &ImageTensor<T>) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::shape("3 channels", image.channels()));
    }
    let data: Vec<u16> = image.data().iter().map(|v| to_u16(v.as_f64())).collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, data).expect("buffer size matches");
    buf.save(path).map_err(|e| image_error(path, e))
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Reads a mask; pixels with luma above 127 are set.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    let bits = img.into_raw().into_iter().map(|v| v > 127).collect();
    BinaryMask::new(h as usize, w as usize, bits)
}

/// Writes a mask as an 8-bit grayscale PNG with values {0, 255}.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, data).expect("buffer size matches");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// 8-bit RGB pixels of `image` with the mask blended in red.
pub fn overlay_rgb8<T: Scalar>(image: &ImageTensor<T>, mask: &BinaryMask) -> Result<Vec<u8>> {
    image.check_mask(mask)?;
    let c = image.channels();
    let mut out = Vec::with_capacity(image.height() * image.width() * 3);
    for y in 0..image.height() {
        for x in 0..image.width() {
            for ch in 0..3 {
                let v = image.get(y, x, if c == 3 { ch } else { 0 }).as_f64();
                let v = if mask.get(y, x) {
                    (1.0 - OVERLAY_ALPHA) * v + OVERLAY_ALPHA * OVERLAY_COLOR[ch]
                } else {
                    v
                };
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_at_16_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let data: Vec<f64> = (0..8 * 9 * 3).map(|i| (i as f64 * 0.37).fract()).collect();
        let img = ImageTensor::new(8, 9, 3, data).unwrap();
        write_image(&p, &img).unwrap();
        let back: ImageTensor<f64> = read_image(&p).unwrap();
        assert_eq!(back.shape(), (8, 9, 3));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = BinaryMask::rect(10, 12, 2, 5, 3, 9);
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_image::<f64>(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn overlay_blends_inside_mask() {
        let img = ImageTensor::<f64>::filled(8, 8, 3, 0.5).unwrap();
        let m = BinaryMask::rect(8, 8, 0, 1, 0, 1);
        let px = overlay_rgb8(&img, &m).unwrap();
        assert_eq!(&px[0..3], &[179, 77, 77]);
        assert_eq!(&px[3..6], &[128, 128, 128]);
    }
}
