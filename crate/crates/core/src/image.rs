//! RGB images in `[0, 1]` and their conversion to and from 8-bit files.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, RgbImage};

use crate::error::{bail_shape, Error, Result};

/// Planar RGB image (`3 x height x width`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from planar data, clamping every value into `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            bail_shape!("image dimensions must be positive, got {height}x{width}");
        }
        if data.len() != 3 * height * width {
            bail_shape!(
                "planar data of length {} does not match 3x{height}x{width}",
                data.len()
            );
        }
        let data = data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Ok(Self { height, width, data })
    }

    /// Image filled by evaluating `f(row, col) -> [r, g, b]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = vec![0.0; 3 * height * width];
        for r in 0..height {
            for c in 0..width {
                let px = f(r, c);
                for (ch, v) in px.into_iter().enumerate() {
                    data[(ch * height + r) * width + c] = v;
                }
            }
        }
        Self::from_planar(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let hw = self.height * self.width;
        let i = row * self.width + col;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }

    /// `[1, 3, H, W]` tensor of the given dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads a `[3, H, W]` or `[1, 3, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => bail_shape!("expected a single [3, H, W] image tensor, got {:?}", t.dims()),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            bail_shape!("expected 3 channels, got {c}");
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_planar(h, w, data)
    }

    /// Stacks images of identical size into `[B, 3, H, W]`.
    pub fn stack(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty image list".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if im.height != first.height || im.width != first.width {
                bail_shape!(
                    "cannot stack {}x{} with {}x{}",
                    im.height,
                    im.width,
                    first.height,
                    first.width
                );
            }
            data.extend_from_slice(&im.data);
        }
        let t = Tensor::from_vec(data, (images.len(), 3, first.height, first.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    fn to_rgb8(&self) -> RgbImage {
        let hw = self.height * self.width;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let q = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([q(self.data[i]), q(self.data[hw + i]), q(self.data[2 * hw + i])])
        })
    }

    fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let hw = h * w;
        let mut data = vec![0.0; 3 * hw];
        for (x, y, px) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for ch in 0..3 {
                data[ch * hw + i] = px.0[ch] as f32 / 255.0;
            }
        }
        Self { height: h, width: w, data }
    }

    /// Loads a PNG or JPEG file as 8-bit sRGB scaled by `1/255`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Writes the image as 8-bit sRGB; the format follows the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Bilinear resize to exactly `height x width`.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let resized = image::imageops::resize(&self.to_rgb32f(), width as u32, height as u32, FilterType::Triangle);
        let hw = height * width;
        let mut data = vec![0.0; 3 * hw];
        for (x, y, px) in resized.enumerate_pixels() {
            let i = y as usize * width + x as usize;
            for ch in 0..3 {
                data[ch * hw + i] = px.0[ch].clamp(0.0, 1.0);
            }
        }
        Self { height, width, data }
    }

    /// Target size when the shorter edge is scaled to `short_edge`, aspect
    /// preserved, long edge rounded to the nearest pixel.
    pub fn short_edge_size(height: usize, width: usize, short_edge: usize) -> (usize, usize) {
        let scale = |long: usize, short: usize| ((long * short_edge) as f64 / short as f64).round() as usize;
        if height <= width {
            (short_edge, scale(width, height))
        } else {
            (scale(height, width), short_edge)
        }
    }

    pub fn resize_short_edge(&self, short_edge: usize) -> Self {
        let (h, w) = Self::short_edge_size(self.height, self.width, short_edge);
        self.resize(h, w)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            bail_shape!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height,
                self.width
            );
        }
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(3 * height * width);
        for ch in 0..3 {
            for r in top..top + height {
                let start = ch * hw + r * self.width + left;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(Self { height, width, data })
    }

    fn to_rgb32f(&self) -> image::Rgb32FImage {
        let hw = self.height * self.width;
        image::Rgb32FImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb([self.data[i], self.data[hw + i], self.data[2 * hw + i]])
        })
    }
}

/// Peak signal-to-noise ratio in dB for values in `[0, 1]`. Identical
/// images give infinity.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        bail_shape!("psnr of {}x{} against {}x{}", a.height, a.width, b.height, b.width);
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(-10.0 * mse.log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_edge_arithmetic() {
        assert_eq!(Image::short_edge_size(600, 800, 512), (512, 683));
        assert_eq!(Image::short_edge_size(800, 600, 512), (683, 512));
        assert_eq!(Image::short_edge_size(512, 512, 512), (512, 512));
    }

    #[test]
    fn values_are_clamped() {
        let im = Image::from_planar(1, 1, vec![-0.5, 0.5, 2.0]).unwrap();
        assert_eq!(im.pixel(0, 0), [0.0, 0.5, 1.0]);
    }

    #[test]
    fn png_round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let im = Image::from_fn(5, 7, |r, c| [r as f32 / 4.0, c as f32 / 6.0, 0.3337]).unwrap();
        im.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!((back.height(), back.width()), (5, 7));
        for (a, b) in im.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn crop_bounds_are_checked() {
        let im = Image::from_fn(4, 4, |_, _| [0.0; 3]).unwrap();
        assert!(im.crop(2, 2, 3, 1).is_err());
        assert_eq!(im.crop(1, 1, 3, 2).unwrap().width(), 2);
    }
}
