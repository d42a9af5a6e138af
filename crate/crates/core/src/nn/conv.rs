//! Stride-1 convolution with reflection padding, computed by im2col + gemm.
//!
//! Candle's built-in conv backward goes through a direct transposed
//! convolution, which dominates training time on CPU. This op keeps the
//! forward and both backward products on the same gemm path and folds the
//! reflection padding into the column gather, so no padded copy of the input
//! is materialized.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::{bail_shape, Result};

/// Upper bound on the number of elements in one im2col buffer.
const COLUMN_BUDGET: usize = 1 << 22;

/// Maps an out-of-range index onto `0..n` by mirroring about the edge
/// samples (no edge repeat). Handles offsets larger than `n`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub(crate) trait GemmFloat: WithDType + Copy + Default + std::ops::AddAssign {
    /// `c = a * b + beta * c` over strided row-major views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
    fn slice(storage: &CpuStorage) -> Option<&[Self]>;
    fn wrap(data: Vec<Self>) -> CpuStorage;
}

macro_rules! impl_gemm_float {
    ($t:ty, $gemm:path, $variant:ident) => {
        impl GemmFloat for $t {
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
            fn slice(storage: &CpuStorage) -> Option<&[Self]> {
                match storage {
                    CpuStorage::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn wrap(data: Vec<Self>) -> CpuStorage {
                CpuStorage::$variant(data)
            }
        }
    };
}

impl_gemm_float!(f32, matrixmultiply::sgemm, F32);
impl_gemm_float!(f64, matrixmultiply::dgemm, F64);

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    height: usize,
    width: usize,
    kernel: usize,
}

impl Geometry {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    /// Output rows processed per im2col chunk.
    fn chunk_rows(&self) -> usize {
        let per_row = self.patch() * self.width;
        (COLUMN_BUDGET / per_row.max(1)).clamp(1, self.height)
    }

    /// Reflected source column for every (kx, output column).
    fn column_table(&self) -> Vec<usize> {
        let p = self.pad();
        let mut table = Vec::with_capacity(self.kernel * self.width);
        for kx in 0..self.kernel {
            for c in 0..self.width {
                table.push(reflect_index(c as isize + kx as isize - p, self.width));
            }
        }
        table
    }

    fn im2col<T: Copy>(&self, image: &[T], rows: std::ops::Range<usize>, table: &[usize], cols: &mut [T]) {
        let (h, w, k, p) = (self.height, self.width, self.kernel, self.pad());
        let n = rows.len() * w;
        for ci in 0..self.c_in {
            let plane = &image[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let tab = &table[kx * w..(kx + 1) * w];
                    for (ri, r) in rows.clone().enumerate() {
                        let sr = reflect_index(r as isize + ky as isize - p, h);
                        let src = &plane[sr * w..(sr + 1) * w];
                        let out = &mut dst[ri * w..(ri + 1) * w];
                        for (o, &sc) in out.iter_mut().zip(tab) {
                            *o = src[sc];
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Copy + std::ops::AddAssign>(
        &self,
        cols: &[T],
        rows: std::ops::Range<usize>,
        table: &[usize],
        image: &mut [T],
    ) {
        let (h, w, k, p) = (self.height, self.width, self.kernel, self.pad());
        let n = rows.len() * w;
        for ci in 0..self.c_in {
            let plane = &mut image[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    let tab = &table[kx * w..(kx + 1) * w];
                    for (ri, r) in rows.clone().enumerate() {
                        let sr = reflect_index(r as isize + ky as isize - p, h);
                        let dst = &mut plane[sr * w..(sr + 1) * w];
                        for (&g, &sc) in src[ri * w..(ri + 1) * w].iter().zip(tab) {
                            dst[sc] += g;
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: GemmFloat>(g: &Geometry, x: &[T], weight: &[T]) -> Vec<T> {
    let hw = g.height * g.width;
    let patch = g.patch();
    let mut out = vec![T::default(); g.batch * g.c_out * hw];
    let table = g.column_table();
    let chunk = g.chunk_rows();
    let mut cols = vec![T::default(); patch * chunk * g.width];
    for b in 0..g.batch {
        let image = &x[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        let dst = &mut out[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        let mut r0 = 0;
        while r0 < g.height {
            let r1 = (r0 + chunk).min(g.height);
            let n = (r1 - r0) * g.width;
            g.im2col(image, r0..r1, &table, &mut cols[..patch * n]);
            // dst[:, r0*w..r1*w] = weight (c_out x patch) * cols (patch x n)
            unsafe {
                T::gemm(
                    g.c_out,
                    patch,
                    n,
                    weight.as_ptr(),
                    patch as isize,
                    1,
                    cols.as_ptr(),
                    n as isize,
                    1,
                    T::zero(),
                    dst.as_mut_ptr().add(r0 * g.width),
                    hw as isize,
                    1,
                );
            }
            r0 = r1;
        }
    }
    out
}

fn backward<T: GemmFloat>(g: &Geometry, x: &[T], weight: &[T], grad_out: &[T]) -> (Vec<T>, Vec<T>) {
    let hw = g.height * g.width;
    let patch = g.patch();
    let mut grad_x = vec![T::default(); g.batch * g.c_in * hw];
    let mut grad_w = vec![T::default(); g.c_out * patch];
    let table = g.column_table();
    let chunk = g.chunk_rows();
    let mut cols = vec![T::default(); patch * chunk * g.width];
    let mut grad_cols = vec![T::default(); patch * chunk * g.width];
    for b in 0..g.batch {
        let image = &x[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        let gy = &grad_out[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        let gx = &mut grad_x[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        let mut r0 = 0;
        while r0 < g.height {
            let r1 = (r0 + chunk).min(g.height);
            let n = (r1 - r0) * g.width;
            g.im2col(image, r0..r1, &table, &mut cols[..patch * n]);
            unsafe {
                // grad_w += gy_chunk (c_out x n) * cols^T (n x patch)
                T::gemm(
                    g.c_out,
                    n,
                    patch,
                    gy.as_ptr().add(r0 * g.width),
                    hw as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    n as isize,
                    T::one(),
                    grad_w.as_mut_ptr(),
                    patch as isize,
                    1,
                );
                // grad_cols = weight^T (patch x c_out) * gy_chunk (c_out x n)
                T::gemm(
                    patch,
                    g.c_out,
                    n,
                    weight.as_ptr(),
                    1,
                    patch as isize,
                    gy.as_ptr().add(r0 * g.width),
                    hw as isize,
                    1,
                    T::zero(),
                    grad_cols.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            g.col2im(&grad_cols[..patch * n], r0..r1, &table, gx);
            r0 = r1;
        }
    }
    (grad_x, grad_w)
}

fn contiguous<'a, T: GemmFloat>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::slice(storage).ok_or_else(|| candle_core::Error::Msg("reflect_conv2d: unsupported dtype".into()))?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("reflect_conv2d: non-contiguous input"),
    }
}

struct ReflectConv2d {
    kernel: usize,
}

impl ReflectConv2d {
    fn geometry(&self, x: &Layout, w: &Layout) -> candle_core::Result<Geometry> {
        let (batch, c_in, height, width) = x.shape().dims4()?;
        let (c_out, wc_in, kh, kw) = w.shape().dims4()?;
        if wc_in != c_in || kh != self.kernel || kw != self.kernel {
            candle_core::bail!(
                "reflect_conv2d: weight {:?} incompatible with input {:?}",
                w.shape(),
                x.shape()
            );
        }
        Ok(Geometry {
            batch,
            c_in,
            c_out,
            height,
            width,
            kernel: self.kernel,
        })
    }

    fn fwd_typed<T: GemmFloat>(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry(l1, l2)?;
        let x = contiguous::<T>(s1, l1)?;
        let w = contiguous::<T>(s2, l2)?;
        let out = forward(&g, x, w);
        Ok((T::wrap(out), Shape::from((g.batch, g.c_out, g.height, g.width))))
    }
}

impl CustomOp2 for ReflectConv2d {
    fn name(&self) -> &'static str {
        "reflect-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.fwd_typed::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => self.fwd_typed::<f64>(s1, l1, s2, l2),
            _ => candle_core::bail!("reflect_conv2d: only f32 and f64 are supported"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (gx, gw) = match x.dtype() {
            candle_core::DType::F32 => backward_tensors::<f32>(self.kernel, x, w, grad_res)?,
            candle_core::DType::F64 => backward_tensors::<f64>(self.kernel, x, w, grad_res)?,
            dt => candle_core::bail!("reflect_conv2d: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

fn backward_tensors<T: GemmFloat>(
    kernel: usize,
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
) -> candle_core::Result<(Tensor, Tensor)> {
    let (batch, c_in, height, width) = x.dims4()?;
    let c_out = w.dim(0)?;
    let g = Geometry {
        batch,
        c_in,
        c_out,
        height,
        width,
        kernel,
    };
    let xs = x.flatten_all()?.to_vec1::<T>()?;
    let ws = w.flatten_all()?.to_vec1::<T>()?;
    let gs = grad.flatten_all()?.to_vec1::<T>()?;
    let (gx, gw) = backward(&g, &xs, &ws, &gs);
    Ok((
        Tensor::from_vec(gx, x.shape(), x.device())?,
        Tensor::from_vec(gw, w.shape(), w.device())?,
    ))
}

/// Same-size convolution of `x` (`[B, C_in, H, W]`) with `weight`
/// (`[C_out, C_in, k, k]`, odd `k`) using reflection padding of `k / 2`.
pub fn reflect_conv2d(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (_, _, kh, kw) = weight.dims4()?;
    if kh != kw || kh % 2 == 0 {
        bail_shape!("reflect_conv2d needs an odd square kernel, got {kh}x{kw}");
    }
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    Ok(x.apply_op2(&weight, ReflectConv2d { kernel: kh })?)
}
