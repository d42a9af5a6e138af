//! Independent oracles and a finite-difference gradient checker.
//!
//! The oracles here are plain scalar loops. They deliberately share no code
//! with the loss implementations they are compared against.

mod suite;

pub use suite::{gradient_suite, invariant_suite, oracle_suite, run_all, schedule_check, CheckResult, GRAD_STEP, GRAD_THRESHOLD};

use candle_core::{DType, Device, Tensor, Var};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{ColorHistogram, HistogramGeometry, SelfSimilarityNorm};

/// `1 - cos(a, b)` with no stabilizers.
fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Relaxed earth mover distance between point sets `x` and `y` by explicit
/// double loops.
pub fn remd_oracle(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let mut cost = vec![vec![0.0; y.len()]; x.len()];
    for (i, a) in x.iter().enumerate() {
        for (j, b) in y.iter().enumerate() {
            cost[i][j] = cosine_distance(a, b);
        }
    }
    let mut rows = 0.0;
    for row in &cost {
        rows += row.iter().cloned().fold(f64::INFINITY, f64::min);
    }
    let mut cols = 0.0;
    for j in 0..y.len() {
        cols += (0..x.len()).map(|i| cost[i][j]).fold(f64::INFINITY, f64::min);
    }
    (rows / x.len() as f64).max(cols / y.len() as f64)
}

/// Self-similarity loss between two equally sized point sets by explicit
/// loops.
pub fn self_similarity_oracle(content: &[Vec<f64>], stylized: &[Vec<f64>], norm: SelfSimilarityNorm) -> f64 {
    let n = content.len();
    let dist = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| cosine_distance(&set[i], &set[j])).collect()).collect()
    };
    let dc = dist(content);
    let ds = dist(stylized);
    let mut total = 0.0;
    for i in 0..n {
        let ds_row: f64 = ds[i].iter().sum();
        for j in 0..n {
            let c = match norm {
                SelfSimilarityNorm::Rows => dc[i][j] / dc[i].iter().sum::<f64>(),
                SelfSimilarityNorm::ContentColumns => dc[i][j] / (0..n).map(|k| dc[k][j]).sum::<f64>(),
            };
            total += (c - ds[i][j] / ds_row).abs();
        }
    }
    total / n as f64
}

/// Hard histogram: every pixel adds its intensity to the single nearest
/// bin of each log-chroma plane; the result sums to one.
pub fn hard_histogram_oracle(image: &Image, geometry: HistogramGeometry) -> Result<ColorHistogram> {
    geometry.validate()?;
    let bins = geometry.bins;
    let spacing = 2.0 * geometry.range / (bins - 1) as f64;
    let nearest = |coord: f64| -> usize {
        let k = ((coord + geometry.range) / spacing).round();
        k.clamp(0.0, (bins - 1) as f64) as usize
    };
    let mut hist = vec![0.0f64; 3 * bins * bins];
    for r in 0..image.height() {
        for c in 0..image.width() {
            let px = image.pixel(r, c).map(|v| (v as f64).clamp(0.0, 1.0));
            let weight = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2] + geometry.intensity_floor).sqrt();
            let l = px.map(|v| (v + geometry.intensity_floor).ln());
            for plane in 0..3 {
                let u = l[plane] - l[(plane + 1) % 3];
                let v = l[plane] - l[(plane + 2) % 3];
                hist[plane * bins * bins + nearest(u) * bins + nearest(v)] += weight;
            }
        }
    }
    let total: f64 = hist.iter().sum();
    hist.iter_mut().for_each(|h| *h /= total);
    Ok(ColorHistogram {
        tensor: Tensor::from_vec(hist, (1, 3, bins, bins), &Device::Cpu)?,
        geometry,
    })
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub operation: String,
    /// Worst `|a - n| / max(|a|, |n|, 1e-12)` over coordinates (and
    /// instances, for aggregated reports).
    pub max_rel_error: f64,
    pub step: f64,
    pub shape: Vec<usize>,
    pub threshold: f64,
    pub passed: bool,
    pub instances: usize,
}

impl GradCheckReport {
    /// Folds another report for the same operation into this one.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.instances += other.instances;
        self.passed = self.passed && other.passed;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the autodiff gradient of scalar `f` at `input` against a
/// fourth-order central difference with step `step`. Runs in `f64`.
pub fn grad_check<F>(operation: &str, f: F, input: &Tensor, step: f64, threshold: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("grad_check step must be positive and finite, got {step}")));
    }
    let shape = input.dims().to_vec();
    let x0: Vec<f64> = input.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let var = Var::from_tensor(&Tensor::from_vec(x0.clone(), shape.as_slice(), input.device())?)?;
    let y = f(var.as_tensor())?;
    if y.elem_count() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar function, got {:?}", y.dims())));
    }
    let grads = y.sum_all()?.backward()?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        None => vec![0.0; x0.len()],
    };
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            term: format!("{operation} analytic gradient at coordinate {i}"),
        });
    }
    let eval = |x: &[f64]| -> Result<f64> {
        let t = Tensor::from_vec(x.to_vec(), shape.as_slice(), input.device())?;
        Ok(f(&t)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
    };
    let mut worst = 0.0f64;
    let mut x = x0.clone();
    for i in 0..x0.len() {
        let mut at = |k: f64| -> Result<f64> {
            x[i] = x0[i] + k * step;
            eval(&x)
        };
        let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
        x[i] = x0[i];
        // differences first, so an unaffected coordinate gives exactly zero
        let numeric = ((m2 - p2) + 8.0 * (p1 - m1)) / (12.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(GradCheckReport {
        operation: operation.to_string(),
        max_rel_error: worst,
        step,
        shape,
        threshold,
        passed: worst < threshold,
        instances: 1,
    })
}
