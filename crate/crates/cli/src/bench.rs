use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::commands::load_model;
use crate::{CmdResult, Failure};

pub const MIN_RESOLUTION: usize = 16;
pub const MIN_TRIALS: usize = 10;
pub const CSV_HEADER: &str = "resolution,mean_ms,std_ms,trials,device";

/// Published per-image times for 256 and 512 px on a V100.
pub const PAPER_REFERENCE_MS: [(usize, f64); 2] = [(256, 8.527), (512, 9.871)];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub resolution: usize,
    pub warmup: usize,
    pub trials: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub device: String,
}

impl BenchmarkReport {
    /// Summarizes timed trials. Warmup runs are never part of `samples_ms`.
    pub fn from_samples(resolution: usize, warmup: usize, samples_ms: &[f64], device: String) -> Self {
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = if samples_ms.len() > 1 {
            samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            resolution,
            warmup,
            trials: samples_ms.len(),
            mean_ms: mean,
            std_ms: var.sqrt(),
            device,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{},{}",
            self.resolution, self.mean_ms, self.std_ms, self.trials, self.device
        )
    }
}

pub fn validate(resolutions: &[usize], trials: usize) -> CmdResult {
    if resolutions.is_empty() {
        return Err(Failure::user("--resolutions needs at least one value"));
    }
    if let Some(r) = resolutions.iter().find(|r| **r < MIN_RESOLUTION) {
        return Err(Failure::user(format!("resolution {r} is below the minimum of {MIN_RESOLUTION}")));
    }
    if trials < MIN_TRIALS {
        return Err(Failure::user(format!("--trials must be at least {MIN_TRIALS}, got {trials}")));
    }
    Ok(())
}

fn device_description() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("cpu ({threads} threads)")
}

fn random_image(rng: &mut ChaCha8Rng, size: usize, model: &pama::model::PamaModel) -> Result<Tensor, Failure> {
    let data: Vec<f32> = (0..3 * size * size).map(|_| rng.gen()).collect();
    let t = Tensor::from_vec(data, (1, 3, size, size), &Device::Cpu).map_err(pama::Error::from)?;
    Ok(t.to_dtype(model.dtype()).map_err(pama::Error::from)?)
}

pub fn run(checkpoint: &Path, resolutions: &[usize], trials: usize, warmup: usize, out: &Path, seed: u64) -> CmdResult {
    validate(resolutions, trials)?;
    let model = load_model(checkpoint)?;
    let device = device_description();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for &res in resolutions {
        let content = random_image(&mut rng, res, &model)?;
        let style = random_image(&mut rng, res, &model)?;
        let mut trace = Vec::new();
        for _ in 0..warmup {
            model.stylize_tensor(&content, &style, &mut trace)?;
        }
        let mut samples = Vec::with_capacity(trials);
        for _ in 0..trials {
            trace.clear();
            let start = Instant::now();
            model.stylize_tensor(&content, &style, &mut trace)?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let r = BenchmarkReport::from_samples(res, warmup, &samples, device.clone());
        println!(
            "{res:>5} px  {:>10.3} ms +/- {:<8.3} ({} trials after {} warmup, {})",
            r.mean_ms, r.std_ms, r.trials, r.warmup, r.device
        );
        reports.push(r);
    }
    println!("reference only, measured on different hardware and not a target:");
    for (res, ms) in PAPER_REFERENCE_MS {
        println!("{res:>5} px  {ms:>10.3} ms  (published, NVIDIA V100)");
    }
    let mut csv = format!("{CSV_HEADER}\n");
    for r in &reports {
        writeln!(csv, "{}", r.csv_row()).expect("string write");
    }
    std::fs::write(out, csv).map_err(pama::Error::from)?;
    println!("report: {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics_use_sample_deviation() {
        let r = BenchmarkReport::from_samples(256, 3, &[1.0, 2.0, 3.0, 4.0], "cpu".into());
        assert_eq!(r.trials, 4);
        assert!((r.mean_ms - 2.5).abs() < 1e-12);
        assert!((r.std_ms - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.csv_row(), "256,2.5000,1.2910,4,cpu");
    }

    #[test]
    fn argument_validation() {
        assert!(validate(&[256], 10).is_ok());
        assert!(validate(&[256], 0).is_err());
        assert!(validate(&[256], 9).is_err());
        assert!(validate(&[15], 100).is_err());
        assert!(validate(&[], 100).is_err());
    }
}
