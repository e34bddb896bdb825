//! PNG input and output for `[3,H,W]` image tensors.
//!
//! Loading maps 8-bit channels to `[0, 1]` by `/255`; saving rounds
//! `v * 255` half-up, so a round trip moves each value by at most `1/510`.

use std::path::Path;

use image::{ImageFormat, ImageReader, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::generator::ImageTensor;
use crate::tensor::Tensor;

/// `round_half_up(v * 255)` clamped to `0..=255`.
pub fn to_u8(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Snaps every value to the nearest representable `k / 255`.
pub fn quantize(image: &ImageTensor) -> ImageTensor {
    image.map(|v| f64::from(to_u8(v)) / 255.0)
}

fn check_image(image: &ImageTensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = image.dims3()?;
    ensure!(
        c == 3 || c == 1,
        Error::dim("save_image", format!("expected 1 or 3 channels, got {c}"))
    );
    ensure!(
        image.is_finite(),
        Error::contract("image contains non-finite values")
    );
    Ok((c, h, w))
}

/// Single-channel tensors are written as gray.
pub fn to_rgb8(image: &ImageTensor) -> Result<RgbImage> {
    let (c, h, w) = check_image(image)?;
    let d = image.data();
    let plane = if c == 1 { 0 } else { h * w };
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    }))
}

pub fn from_rgb8(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f64::from(raw[p * 3 + c]) / 255.0
    })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let mut reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.set_format(ImageFormat::Png);
    let img = reader.decode().map_err(|e| Error::io(path, e))?;
    let depth = img.color().bytes_per_pixel() / img.color().channel_count();
    if depth != 1 {
        return Err(Error::io(path, "expected an 8-bit PNG"));
    }
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn save_image(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    to_rgb8(image)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_rounds_up() {
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(-0.2), 0);
        assert_eq!(to_u8(1.3), 255);
    }

    #[test]
    fn gray_round_trip_is_128() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.png");
        save_image(&Tensor::full([3, 4, 5], 0.5), &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.shape(), [3, 4, 5]);
        assert!(back.data().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn truncated_png_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_image(&Tensor::full([3, 8, 8], 0.25), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        match load_image(&p) {
            Err(Error::Io { path, .. }) => assert_eq!(path, p),
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_two_channel_tensor() {
        assert!(matches!(
            to_rgb8(&Tensor::zeros([2, 3, 3])),
            Err(Error::Dimension { .. })
        ));
    }
}
