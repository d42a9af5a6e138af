//! Differentiable building blocks shared by the codec and the alignment
//! blocks.

mod conv;

pub use conv::{reflect_conv2d, reflect_index};

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, D};

use crate::error::Result;

/// Convolution weights plus a per-output-channel bias.
#[derive(Debug, Clone)]
pub struct Conv {
    /// `[C_out, C_in, k, k]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

impl Conv {
    pub fn new(weight: Tensor, bias: Tensor) -> Self {
        Self { weight, bias }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = reflect_conv2d(x, &self.weight)?;
        let bias = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }
}

struct Sigmoid;

impl Sigmoid {
    fn apply<T: num_float::Float>(v: &[T]) -> Vec<T> {
        v.iter().map(|&x| x.logistic()).collect()
    }
}

mod num_float {
    pub trait Float: Copy {
        fn logistic(self) -> Self;
    }
    impl Float for f32 {
        fn logistic(self) -> Self {
            if self >= 0.0 {
                1.0 / (1.0 + (-self).exp())
            } else {
                let e = self.exp();
                e / (1.0 + e)
            }
        }
    }
    impl Float for f64 {
        fn logistic(self) -> Self {
            if self >= 0.0 {
                1.0 / (1.0 + (-self).exp())
            } else {
                let e = self.exp();
                e / (1.0 + e)
            }
        }
    }
}

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("logistic: non-contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(Self::apply(&v[start..end])),
            CpuStorage::F64(v) => CpuStorage::F64(Self::apply(&v[start..end])),
            _ => candle_core::bail!("logistic: only f32 and f64 are supported"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let slope = (res * (1.0 - res)?)?;
        Ok(Some((grad_res * slope)?))
    }
}

/// Numerically stable logistic function `1 / (1 + e^-x)`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Sigmoid)?)
}

/// Shifted logits below this are raised to it before `exp`. Peaked rows
/// otherwise fill with subnormal floats, which are very slow on x86; the
/// change is far below f32 resolution.
const SOFTMAX_FLOOR: f64 = -50.0;

/// Softmax over the last dimension. The row max is subtracted as a constant,
/// which leaves both the value and the gradient unchanged.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.maximum(SOFTMAX_FLOOR)?.exp()?;
    let total = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&total)?)
}

/// Per-sample, per-channel mean-variance normalization of `[B, C, H, W]`
/// using the population variance over spatial positions.
pub fn mean_variance_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let std = (var + eps)?.sqrt()?;
    Ok(centered.broadcast_div(&std)?.reshape((b, c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn sigmoid_is_stable_and_differentiable() {
        let dev = Device::Cpu;
        let x = Var::new(&[-800f32, -1.0, 0.0, 2.0, 800.0], &dev).unwrap();
        let y = sigmoid(x.as_tensor()).unwrap();
        let v = y.to_vec1::<f32>().unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[2], 0.5);
        assert_eq!(v[4], 1.0);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gv = g.get(x.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        assert!(gv.iter().all(|g| g.is_finite()));
        assert!((gv[2] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[1000f32, 1001.0, 999.0], [0.0, 0.0, 0.0]], &dev).unwrap();
        let s = softmax_last_dim(&x).unwrap().to_vec2::<f32>().unwrap();
        for row in s {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
