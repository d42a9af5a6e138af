//! Differentiable log-chroma color histogram and the Hellinger distance
//! between two of them.
//!
//! Each pixel contributes to three planes, one per reference channel `c`:
//! `u = log(I_c + e) - log(I_{c+1} + e)` and `v = log(I_c + e) - log(I_{c+2} + e)`
//! (channel indices mod 3). The contribution is weighted by the pixel
//! intensity `sqrt(R^2 + G^2 + B^2)` and spread over bins with the
//! inverse-quadratic kernel `1 / (1 + ((x - center) / tau)^2)`. The plane
//! for each reference channel is a `bins x bins` grid and all three planes
//! together are normalized to sum to one.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{bail_shape, Error, Result};

/// Shape and smoothing of a histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramGeometry {
    /// Bins per log-chroma axis.
    pub bins: usize,
    /// Kernel width.
    pub falloff: f64,
    /// Bin centers are evenly spaced over `[-range, range]`.
    pub range: f64,
    /// Added to each channel before taking logarithms.
    pub intensity_floor: f64,
}

impl Default for HistogramGeometry {
    fn default() -> Self {
        Self {
            bins: 64,
            falloff: 0.02,
            range: 3.0,
            intensity_floor: 1e-6,
        }
    }
}

impl HistogramGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("histogram needs at least 2 bins, got {}", self.bins)));
        }
        if !(self.falloff > 0.0) || !(self.range > 0.0) || !(self.intensity_floor > 0.0) {
            return Err(Error::Config("histogram falloff, range and floor must be positive".into()));
        }
        Ok(())
    }

    /// Center of bin `i`.
    pub fn center(&self, i: usize) -> f64 {
        -self.range + 2.0 * self.range * i as f64 / (self.bins - 1) as f64
    }
}

/// Normalized histogram `[B, 3, bins, bins]`.
#[derive(Debug, Clone)]
pub struct ColorHistogram {
    pub tensor: Tensor,
    pub geometry: HistogramGeometry,
}

/// Builds the soft histogram of `[B, 3, H, W]` images. Values are clamped to
/// `[0, 1]` first.
pub fn build_color_histogram(images: &Tensor, geometry: HistogramGeometry) -> Result<ColorHistogram> {
    geometry.validate()?;
    let (b, c, h, w) = images.dims4()?;
    if c != 3 {
        bail_shape!("color histogram needs RGB input, got {c} channels");
    }
    let n = h * w;
    let dev = images.device();
    let dtype = images.dtype();
    let x = images.clamp(0.0, 1.0)?.reshape((b, 3, n))?;
    let intensity = (x.sqr()?.sum_keepdim(1)? + geometry.intensity_floor)?.sqrt()?; // [B, 1, N]
    let logs = (x + geometry.intensity_floor)?.log()?;
    let centers: Vec<f64> = (0..geometry.bins).map(|i| geometry.center(i)).collect();
    let centers = Tensor::from_vec(centers, (1, 1, geometry.bins), dev)?.to_dtype(dtype)?;
    let kernel = |coord: &Tensor| -> Result<Tensor> {
        // coord [B, N] -> [B, N, bins]
        let d = coord.unsqueeze(D::Minus1)?.broadcast_sub(&centers)?;
        let q = (d / geometry.falloff)?.sqr()?;
        Ok((q + 1.0)?.recip()?)
    };
    let weight = intensity.transpose(1, 2)?; // [B, N, 1]
    let mut planes = Vec::with_capacity(3);
    for ch in 0..3 {
        let base = logs.narrow(1, ch, 1)?.squeeze(1)?;
        let u = (&base - logs.narrow(1, (ch + 1) % 3, 1)?.squeeze(1)?)?;
        let v = (&base - logs.narrow(1, (ch + 2) % 3, 1)?.squeeze(1)?)?;
        let ku = kernel(&u)?.broadcast_mul(&weight)?;
        let kv = kernel(&v)?;
        planes.push(ku.transpose(1, 2)?.matmul(&kv)?); // [B, bins, bins]
    }
    let hist = Tensor::stack(&planes, 1)?;
    let total = hist.sum_keepdim((1, 2, 3))?;
    Ok(ColorHistogram {
        tensor: hist.broadcast_div(&total)?,
        geometry,
    })
}

/// `(1/sqrt 2) * |sqrt(H_s) - sqrt(H_cs)|_2`, averaged over the batch.
pub fn histogram_loss(style: &ColorHistogram, stylized: &ColorHistogram) -> Result<Tensor> {
    if style.geometry != stylized.geometry || style.tensor.dims() != stylized.tensor.dims() {
        bail_shape!(
            "histogram geometry mismatch: {:?} {:?} vs {:?} {:?}",
            style.geometry,
            style.tensor.dims(),
            stylized.geometry,
            stylized.tensor.dims()
        );
    }
    let diff = (style.tensor.sqrt()? - stylized.tensor.sqrt()?)?;
    let sq = (diff.sqr()?.sum((1, 2, 3))? + 1e-24)?;
    Ok((sq.sqrt()? / std::f64::consts::SQRT_2)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::features::scalar;
    use candle_core::{DType, Device};

    fn hist_of(tensor: Tensor) -> ColorHistogram {
        let bins = tensor.dims()[2];
        ColorHistogram {
            tensor,
            geometry: HistogramGeometry {
                bins,
                ..Default::default()
            },
        }
    }

    fn image(pixels: &[[f64; 3]], h: usize, w: usize) -> Tensor {
        let mut data = vec![0.0; 3 * h * w];
        for (i, p) in pixels.iter().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = p[c];
            }
        }
        Tensor::from_vec(data, (1, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn sums_to_one_even_for_black() {
        let black = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let h = build_color_histogram(&black, HistogramGeometry::default()).unwrap();
        assert!((scalar(&h.tensor.sum_all().unwrap()).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(h.tensor.dims(), &[1, 3, 64, 64]);
    }

    #[test]
    fn single_color_peaks_at_its_bin() {
        let g = HistogramGeometry::default();
        let color = [0.8, 0.3, 0.5];
        let img = image(&[color; 9], 3, 3);
        let h = build_color_histogram(&img, g).unwrap();
        let plane: Vec<Vec<f64>> = h.tensor.get(0).unwrap().get(0).unwrap().to_vec2().unwrap();
        let u = (0.8f64 + 1e-6).ln() - (0.3f64 + 1e-6).ln();
        let v = (0.8f64 + 1e-6).ln() - (0.5f64 + 1e-6).ln();
        let nearest = |x: f64| (0..g.bins).min_by(|a, b| (g.center(*a) - x).abs().total_cmp(&(g.center(*b) - x).abs())).unwrap();
        let (mut bi, mut bj, mut best) = (0, 0, -1.0);
        for (i, row) in plane.iter().enumerate() {
            for (j, val) in row.iter().enumerate() {
                if *val > best {
                    (bi, bj, best) = (i, j, *val);
                }
            }
        }
        assert_eq!((bi, bj), (nearest(u), nearest(v)));
    }

    #[test]
    fn hellinger_examples() {
        let dev = Device::Cpu;
        let a = hist_of(Tensor::new(&[0.5f64, 0.5, 0.0, 0.0], &dev).unwrap().reshape((1, 1, 2, 2)).unwrap());
        let b = hist_of(Tensor::new(&[1f64, 0.0, 0.0, 0.0], &dev).unwrap().reshape((1, 1, 2, 2)).unwrap());
        let c = hist_of(Tensor::new(&[0f64, 0.0, 0.5, 0.5], &dev).unwrap().reshape((1, 1, 2, 2)).unwrap());
        assert!(scalar(&histogram_loss(&a, &a).unwrap()).unwrap() < 1e-6);
        let want = ((0.5f64.sqrt() - 1.0).powi(2) + 0.5).sqrt() / 2f64.sqrt();
        let got = scalar(&histogram_loss(&a, &b).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-9 && (got - 0.5412).abs() < 1e-4);
        assert!((scalar(&histogram_loss(&a, &c).unwrap()).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let dev = Device::Cpu;
        let a = hist_of(Tensor::ones((1, 3, 2, 2), DType::F64, &dev).unwrap());
        let b = hist_of(Tensor::ones((1, 3, 3, 3), DType::F64, &dev).unwrap());
        assert!(matches!(histogram_loss(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let img = Tensor::ones((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let g = HistogramGeometry {
            bins: 1,
            ..Default::default()
        };
        assert!(build_color_histogram(&img, g).is_err());
    }
}
