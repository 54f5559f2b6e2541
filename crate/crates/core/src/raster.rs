//! Three-channel images with values in `[-1, 1]`, stored channel-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Fixed-size RGB raster, channel-major `[3, H, W]`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Person crop fed to the generator and the re-id backbones.
pub type PersonImage = Image;
/// Skeleton rendering that conditions the generator.
pub type PoseImage = Image;

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self { height, width, data }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[plane + i] = rgb[1];
        self.data[2 * plane + i] = rgb[2];
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        (0..self.height * self.width).map(move |i| {
            let plane = self.height * self.width;
            [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
        })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[3, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("image shape")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("expected a [3, H, W] tensor, got {s:?}")));
        }
        Self::from_data(
            s[1],
            s[2],
            t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        )
    }

    /// Converts to 8-bit RGB, mapping `[-1, 1]` onto `[0, 255]`.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::filled(h, w, [0.0; 3]);
        for (x, y, p) in img.enumerate_pixels() {
            out.set_pixel(y as usize, x as usize, p.0.map(|v| v as f32 / 127.5 - 1.0));
        }
        out
    }

    /// The image as it reads back after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(&self.to_rgb8())
    }

    /// Creates missing parent directories.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8().save(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

/// Places images side by side (all must share a height).
pub fn hstack(images: &[&Image]) -> Result<Image> {
    let h = images.first().map_or(0, |i| i.height);
    if images.iter().any(|i| i.height != h) {
        return Err(Error::Shape("hstack needs equal heights".into()));
    }
    let w: usize = images.iter().map(|i| i.width).sum();
    let mut out = Image::filled(h, w, [0.0; 3]);
    let mut x0 = 0;
    for img in images {
        for y in 0..h {
            for x in 0..img.width {
                out.set_pixel(y, x0 + x, img.pixel(y, x));
            }
        }
        x0 += img.width;
    }
    Ok(out)
}

/// Stacks rows of equal width vertically.
pub fn vstack(images: &[Image]) -> Result<Image> {
    let w = images.first().map_or(0, |i| i.width);
    if images.iter().any(|i| i.width != w) {
        return Err(Error::Shape("vstack needs equal widths".into()));
    }
    let h: usize = images.iter().map(|i| i.height).sum();
    let mut out = Image::filled(h, w, [0.0; 3]);
    let mut y0 = 0;
    for img in images {
        for y in 0..img.height {
            for x in 0..w {
                out.set_pixel(y0 + y, x, img.pixel(y, x));
            }
        }
        y0 += img.height;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_on_quantized_values() {
        let mut img = Image::filled(4, 2, [-1.0, 1.0, 0.0]);
        img.set_pixel(1, 1, [51.0 / 127.5 - 1.0, -1.0, 1.0]);
        let back = Image::from_rgb8(&img.to_rgb8());
        assert_eq!(back.pixel(1, 1), img.pixel(1, 1));
        let p = back.pixel(0, 0);
        assert_eq!(&p[..2], &[-1.0, 1.0]);
        assert!((p[2] - 1.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::filled(2, 2, [0.25, -0.5, 1.0]);
        assert_eq!(Image::from_tensor(&img.to_tensor::<f32>()).unwrap(), img);
    }
}
