//! Seeded, enumerable verification runs: gradient checks, oracle
//! equivalence and algebraic invariants.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{grad_check, hard_histogram_oracle, remd_oracle, self_similarity_oracle, GradCheckReport};
use crate::ama::{ama_block, ama_block_detailed, attention_map, AmaBlockParams, AmaOptions};
use crate::codec::{Encoder, FeatureMap, Tap, CodecProfile};
use crate::error::Result;
use crate::image::Image;
use crate::losses::{
    build_color_histogram, histogram_loss, moment_loss, remd_loss, self_similarity_loss, HistogramGeometry,
    LossConfig, LossEvaluator, Reference, SelfSimilarityNorm, StageSchedule, Subsampling,
};
use crate::params::ParamStore;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_THRESHOLD: f64 = 1e-4;
/// Smallest gap tolerated between the two cheapest matches (and between the
/// two one-sided REMD averages) before an instance is redrawn.
const TIE_GAP: f64 = 1e-3;
const MAX_REDRAWS: usize = 1000;

/// One line of a verification table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    /// Acceptance criterion the check belongs to.
    pub criterion: u8,
    pub name: String,
    /// Worst observed value of the checked quantity.
    pub metric: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn below(criterion: u8, name: &str, metric: f64, threshold: f64, detail: String) -> Self {
        Self {
            criterion,
            name: name.to_string(),
            metric,
            threshold,
            passed: metric < threshold,
            detail,
        }
    }

    fn at_most(criterion: u8, name: &str, metric: f64, threshold: f64, detail: String) -> Self {
        Self {
            passed: metric <= threshold,
            ..Self::below(criterion, name, metric, threshold, detail)
        }
    }

    pub fn from_grad(report: &GradCheckReport) -> Self {
        Self::below(
            1,
            &format!("grad {}", report.operation),
            report.max_rel_error,
            report.threshold,
            format!("{} instances of {:?}, step {:e}", report.instances, report.shape, report.step),
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

fn feature(data: Tensor) -> Result<FeatureMap> {
    FeatureMap::new(data, Tap::Relu4_1)
}

/// Point set as a `[1, C, 1, P]` feature map.
fn points_to_feature(points: &[Vec<f64>]) -> Result<FeatureMap> {
    let c = points[0].len();
    let p = points.len();
    let mut data = vec![0.0; c * p];
    for (j, v) in points.iter().enumerate() {
        for (i, x) in v.iter().enumerate() {
            data[i * p + j] = *x;
        }
    }
    feature(tensor(data, &[1, c, 1, p])?)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| uniform(rng, c, -1.0, 1.0)).collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// REMD is smooth at an instance when every row and column minimum is
/// unique by a margin and the two one-sided averages differ.
fn remd_is_smooth(x: &[Vec<f64>], y: &[Vec<f64>]) -> bool {
    let cost: Vec<Vec<f64>> = x.iter().map(|a| y.iter().map(|b| cosine(a, b)).collect()).collect();
    let gap = |mut v: Vec<f64>| -> bool {
        v.sort_by(f64::total_cmp);
        v.len() < 2 || v[1] - v[0] >= TIE_GAP
    };
    let rows_ok = cost.iter().all(|r| gap(r.clone()));
    let cols_ok = (0..y.len()).all(|j| gap(cost.iter().map(|r| r[j]).collect()));
    let row_mean = cost.iter().map(|r| r.iter().cloned().fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64;
    let col_mean = (0..y.len())
        .map(|j| cost.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / y.len() as f64;
    rows_ok && cols_ok && (row_mean - col_mean).abs() >= TIE_GAP
}

fn block_params(rng: &mut ChaCha8Rng, channels: usize, dtype: DType) -> Result<AmaBlockParams> {
    let mut store = ParamStore::new(dtype);
    AmaBlockParams::init(&mut store, "block", channels, rng)?;
    // move h and theta away from the identity so they take part
    for name in ["block.h.weight", "block.theta.weight"] {
        let eye = store.get(name)?.to_dtype(DType::F64)?;
        let noise = tensor(uniform(rng, channels * channels, -0.3, 0.3), eye.dims())?;
        store.set(name, &(eye + noise)?)?;
    }
    AmaBlockParams::from_store(&store, "block")
}

fn gradient_reports(
    name: &str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut one: impl FnMut(&mut ChaCha8Rng) -> Result<GradCheckReport>,
) -> Result<GradCheckReport> {
    let mut total: Option<GradCheckReport> = None;
    for _ in 0..instances {
        let r = one(rng)?;
        match total.as_mut() {
            Some(t) => t.merge(&r),
            None => total = Some(r),
        }
    }
    let mut total = total.expect("at least one instance");
    total.operation = name.to_string();
    Ok(total)
}

/// Finite-difference checks of every loss and of the full alignment block,
/// `instances` seeded instances each, in double precision.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (8, 3, 3);
    let shape = [1, c, h, w];
    let mut out = Vec::new();

    out.push(gradient_reports("self_similarity_loss", instances, &mut rng, |rng| {
        let content = feature(tensor(uniform(rng, c * h * w, -1.0, 1.0), &shape)?)?;
        let x = tensor(uniform(rng, c * h * w, -1.0, 1.0), &shape)?;
        grad_check(
            "self_similarity_loss",
            |t| self_similarity_loss(&content, &feature(t.clone())?, SelfSimilarityNorm::Rows, &mut Subsampling::exact()),
            &x,
            GRAD_STEP,
            GRAD_THRESHOLD,
        )
    })?);

    out.push(gradient_reports("remd_loss", instances, &mut rng, |rng| {
        for _ in 0..MAX_REDRAWS {
            let xs = random_points(rng, h * w, c);
            let ys = random_points(rng, h * w, c);
            if !remd_is_smooth(&xs, &ys) {
                continue;
            }
            let style = points_to_feature(&ys)?;
            let x = points_to_feature(&xs)?.data;
            return grad_check(
                "remd_loss",
                |t| remd_loss(&feature(t.clone())?, &style, &mut Subsampling::exact()),
                &x,
                GRAD_STEP,
                GRAD_THRESHOLD,
            );
        }
        Err(crate::Error::Degenerate("no tie-free REMD instance found".into()))
    })?);

    out.push(gradient_reports("moment_loss", instances, &mut rng, |rng| {
        let style = feature(tensor(uniform(rng, c * h * w, -1.0, 1.0), &shape)?)?;
        let x = tensor(uniform(rng, c * h * w, -1.0, 1.0), &shape)?;
        grad_check(
            "moment_loss",
            |t| moment_loss(&feature(t.clone())?, &style, &mut Subsampling::exact()),
            &x,
            GRAD_STEP,
            GRAD_THRESHOLD,
        )
    })?);

    let geometry = HistogramGeometry::default();
    out.push(gradient_reports("histogram_loss", instances, &mut rng, |rng| {
        let style = build_color_histogram(&tensor(uniform(rng, 3 * h * w, 0.05, 0.95), &[1, 3, h, w])?, geometry)?;
        let x = tensor(uniform(rng, 3 * h * w, 0.05, 0.95), &[1, 3, h, w])?;
        grad_check(
            "histogram_loss",
            |t| histogram_loss(&style, &build_color_histogram(t, geometry)?),
            &x,
            GRAD_STEP,
            GRAD_THRESHOLD,
        )
    })?);

    let mut store = ParamStore::new(DType::F64);
    Encoder::init(CodecProfile::TINY, &mut store, &mut rng)?;
    let encoder = Encoder::from_store(CodecProfile::TINY, &store)?;
    let loss_config = LossConfig::default();
    let evaluator = LossEvaluator::new(&encoder, &loss_config);
    let taps = [Tap::Relu1_1];
    out.push(gradient_reports("reconstruction_loss", instances, &mut rng, |rng| {
        let image = |rng: &mut ChaCha8Rng| tensor(uniform(rng, 3 * h * w, 0.05, 0.95), &[1, 3, h, w]);
        // references only need the shallow tap, which a 3x3 image supports
        let reference = |img: Tensor| -> Result<Reference> {
            let mut features = encoder.forward(&img, Tap::Relu1_1)?;
            features.detach();
            Ok(Reference { image: img, features })
        };
        let content = reference(image(rng)?)?;
        let style = reference(image(rng)?)?;
        let rec_style = image(rng)?;
        for _ in 0..MAX_REDRAWS {
            let x = image(rng)?;
            // keep every ReLU well away from its kink
            if encoder.relu_margin(&x, Tap::Relu1_1)? < 1e-3 {
                continue;
            }
            return grad_check(
                "reconstruction_loss",
                |t| evaluator.reconstruction_loss(t, &content, &rec_style, &style, &taps),
                &x,
                GRAD_STEP,
                GRAD_THRESHOLD,
            );
        }
        Err(crate::Error::Degenerate("no kink-free reconstruction instance found".into()))
    })?);

    out.push(gradient_reports("ama_block", instances, &mut rng, |rng| {
        let params = block_params(rng, c, DType::F64)?;
        let content = tensor(uniform(rng, c * h * w, -1.0, 1.0), &shape)?;
        let style = tensor(uniform(rng, c * h * w, -1.0, 1.0), &shape)?;
        let proj = tensor(uniform(rng, c * h * w, -1.0, 1.0), &shape)?;
        let project = |fc: &Tensor, fs: &Tensor| -> Result<Tensor> {
            let out = ama_block(&feature(fc.clone())?, &feature(fs.clone())?, &params)?;
            Ok((out.data * &proj)?.sum_all()?)
        };
        let mut r = grad_check("ama_block", |t| project(t, &style), &content, GRAD_STEP, GRAD_THRESHOLD)?;
        r.merge(&grad_check("ama_block", |t| project(&content, t), &style, GRAD_STEP, GRAD_THRESHOLD)?);
        r.instances = 1;
        Ok(r)
    })?);
    Ok(out)
}

/// Point sets and images compared against the scalar oracles.
pub fn oracle_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = rng.gen_range(2..=8);
        let p = rng.gen_range(1..=8);
        let q = rng.gen_range(1..=8);
        let xs = random_points(&mut rng, p, c);
        let ys = random_points(&mut rng, q, c);
        let got = scalar(&remd_loss(
            &points_to_feature(&xs)?,
            &points_to_feature(&ys)?,
            &mut Subsampling::exact(),
        )?)?;
        worst = worst.max((got - remd_oracle(&xs, &ys)).abs());
    }
    out.push(CheckResult::below(2, "remd_loss vs oracle", worst, 1e-6, "100 instances, sets of 1..=8".into()));

    let mut worst = 0.0f64;
    for i in 0..100 {
        let norm = if i % 2 == 0 { SelfSimilarityNorm::Rows } else { SelfSimilarityNorm::ContentColumns };
        let c = rng.gen_range(2..=8);
        let p = rng.gen_range(2..=8);
        let xs = random_points(&mut rng, p, c);
        let ys = random_points(&mut rng, p, c);
        let got = scalar(&self_similarity_loss(
            &points_to_feature(&xs)?,
            &points_to_feature(&ys)?,
            norm,
            &mut Subsampling::exact(),
        )?)?;
        worst = worst.max((got - self_similarity_oracle(&xs, &ys, norm)).abs());
    }
    out.push(CheckResult::below(
        2,
        "self_similarity_loss vs oracle",
        worst,
        1e-6,
        "100 instances, both normalizations".into(),
    ));

    let geometry = HistogramGeometry {
        bins: 33,
        falloff: 1e-4,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let img = on_grid_image(&mut rng, geometry)?;
        let soft = build_color_histogram(&img.to_tensor(DType::F64, &Device::Cpu)?, geometry)?;
        let hard = hard_histogram_oracle(&img, geometry)?;
        let diff = scalar(&(soft.tensor - hard.tensor)?.abs()?.max_keepdim(3)?.max_keepdim(2)?.max_keepdim(1)?.flatten_all()?.max(0)?)?;
        worst = worst.max(diff);
    }
    out.push(CheckResult::below(
        2,
        "histogram at falloff 1e-4 vs hard oracle",
        worst,
        1e-3,
        "20 images, 33 bins, per-bin max".into(),
    ));
    Ok(out)
}

/// An image whose colors sit exactly on histogram bin centers: channel
/// logarithms differ by whole bin spacings.
fn on_grid_image(rng: &mut ChaCha8Rng, g: HistogramGeometry) -> Result<Image> {
    let spacing = 2.0 * g.range / (g.bins - 1) as f64;
    let max_steps = (g.range / spacing).floor() as i32;
    let palette: Vec<[f32; 3]> = (0..rng.gen_range(2..=4))
        .map(|_| {
            let top: f64 = rng.gen_range(0.5..1.0);
            std::array::from_fn(|_| {
                let n = rng.gen_range(0..=max_steps) as f64;
                (top * (-n * spacing).exp() - g.intensity_floor) as f32
            })
        })
        .collect();
    let (h, w) = (rng.gen_range(4..=12), rng.gen_range(4..=12));
    let picks: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..palette.len())).collect();
    Image::from_fn(h, w, |r, c| palette[picks[r * w + c]])
}

/// Row sums, interpolation endpoints and loss ranges on random instances.
pub fn invariant_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let f32_tensor = |data: Vec<f64>, shape: &[usize]| -> Result<Tensor> { Ok(tensor(data, shape)?.to_dtype(DType::F32)?) };

    let mut worst = 0.0f64;
    let mut params = block_params(&mut rng, 1, DType::F32)?;
    for i in 0..1000 {
        let c = 1 + i % 8;
        if params.channels() != c {
            params = block_params(&mut rng, c, DType::F32)?;
        }
        let dims = |rng: &mut ChaCha8Rng| loop {
            let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            if h * w >= 2 {
                break (h, w);
            }
        };
        let ((hc, wc), (hs, ws)) = (dims(&mut rng), dims(&mut rng));
        let scale = rng.gen_range(0.1..10.0);
        let content = feature(f32_tensor(uniform(&mut rng, c * hc * wc, -scale, scale), &[1, c, hc, wc])?)?;
        let style = feature(f32_tensor(uniform(&mut rng, c * hs * ws, -scale, scale), &[1, c, hs, ws])?)?;
        let a = attention_map(&content, &style, &params)?;
        let sums: Vec<f64> = a.matrix.sum(2)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        worst = sums.iter().fold(worst, |m, s| m.max((s - 1.0).abs()));
    }
    out.push(CheckResult::below(3, "attention rows sum to 1", worst, 1e-5, "1000 instances, f32".into()));

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = rng.gen_range(1..=8);
        let params = block_params(&mut rng, c, DType::F32)?;
        let content = feature(f32_tensor(uniform(&mut rng, c * 9, -2.0, 2.0), &[1, c, 3, 3])?)?;
        let style = feature(f32_tensor(uniform(&mut rng, c * 6, -2.0, 2.0), &[1, c, 2, 3])?)?;
        for (w, expect_content) in [(1.0, true), (0.0, false)] {
            let options = AmaOptions {
                force_w: Some(w),
                ..Default::default()
            };
            let o = ama_block_detailed(&content, &style, &params, &options)?;
            let target = if expect_content { &content.data } else { &o.rearranged.data };
            let d = scalar(&(&o.stylized.data - target)?.abs()?.flatten_all()?.max(0)?)?;
            worst = worst.max(d);
        }
    }
    out.push(CheckResult::at_most(
        3,
        "interpolation endpoints W=1 and W=0",
        worst,
        0.0,
        "50 instances, f32, max abs difference".into(),
    ));

    let mut store = ParamStore::new(DType::F64);
    Encoder::init(CodecProfile::TINY, &mut store, &mut rng)?;
    let encoder = Encoder::from_store(CodecProfile::TINY, &store)?;
    let loss_config = LossConfig::default();
    let evaluator = LossEvaluator::new(&encoder, &loss_config);
    let geometry = HistogramGeometry::default();
    let mut lowest = f64::INFINITY;
    let mut identical = 0.0f64;
    let mut hist_outside = 0.0f64;
    for i in 0..200 {
        let c = rng.gen_range(4..=8);
        let a = feature(tensor(uniform(&mut rng, c * 12, -1.0, 1.0), &[1, c, 3, 4])?)?;
        let b = feature(tensor(uniform(&mut rng, c * 12, -1.0, 1.0), &[1, c, 3, 4])?)?;
        let ex = &mut Subsampling::exact;
        let pairs = [
            (
                scalar(&self_similarity_loss(&a, &b, SelfSimilarityNorm::Rows, &mut ex())?)?,
                scalar(&self_similarity_loss(&a, &a, SelfSimilarityNorm::Rows, &mut ex())?)?,
            ),
            (
                scalar(&remd_loss(&a, &b, &mut ex())?)?,
                scalar(&remd_loss(&a, &a, &mut ex())?)?,
            ),
            (
                scalar(&moment_loss(&a, &b, &mut ex())?)?,
                scalar(&moment_loss(&a, &a, &mut ex())?)?,
            ),
        ];
        // images include black, white and saturated extremes
        let image = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let data = (0..3 * 16 * 16)
                .map(|_| match rng.gen_range(0..6) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.gen_range(0.0..1.0),
                })
                .collect();
            tensor(data, &[1, 3, 16, 16])
        };
        let (ia, ib) = (image(&mut rng)?, image(&mut rng)?);
        let ha = build_color_histogram(&ia, geometry)?;
        let hb = build_color_histogram(&ib, geometry)?;
        let h_diff = scalar(&histogram_loss(&ha, &hb)?)?;
        let h_same = scalar(&histogram_loss(&ha, &ha)?)?;
        hist_outside = hist_outside.max(-h_diff).max(h_diff - 1.0);
        let mut all = pairs.to_vec();
        all.push((h_diff, h_same));
        if i < 20 {
            let ra = evaluator.reference(&ia)?;
            let rb = evaluator.reference(&ib)?;
            let diff = scalar(&evaluator.reconstruction_loss(&ib, &ra, &ia, &rb, &Tap::ALL[..4])?)?;
            let same = scalar(&evaluator.reconstruction_loss(&ia, &ra, &ib, &rb, &Tap::ALL[..4])?)?;
            all.push((diff, same));
        }
        for (d, s) in all {
            lowest = lowest.min(d).min(s);
            identical = identical.max(s.abs());
        }
    }
    out.push(CheckResult::at_most(
        3,
        "losses are non-negative",
        (-lowest).max(0.0),
        0.0,
        format!("smallest value {lowest:e}"),
    ));
    out.push(CheckResult::below(
        3,
        "losses vanish on identical inputs",
        identical,
        1e-6,
        "200 instances (20 for reconstruction)".into(),
    ));
    out.push(CheckResult::at_most(
        3,
        "histogram loss within [0, 1]",
        hist_outside,
        0.0,
        "200 image pairs with extremes".into(),
    ));
    Ok(out)
}

/// The default schedule against its literal values.
pub fn schedule_check() -> CheckResult {
    let s = StageSchedule::default();
    let w = s.weights(0);
    let ok = s.lambda_ss == [12.0, 9.0, 7.0]
        && s.lambda_r == [2.0; 3]
        && s.lambda_m == [2.0; 3]
        && s.lambda_h == [0.25, 0.5, 1.0]
        && s.lambda_rec_pixel == 50.0
        && w.as_ref().is_ok_and(|w| w.ss == 0.75);
    CheckResult {
        criterion: 4,
        name: "default stage schedule".into(),
        metric: if ok { 0.0 } else { 1.0 },
        threshold: 0.0,
        passed: ok,
        detail: format!("{s:?}"),
    }
}

/// Every check the `verify` command reports, in criterion order.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out: Vec<CheckResult> = gradient_suite(instances, seed)?.iter().map(CheckResult::from_grad).collect();
    out.extend(oracle_suite(seed)?);
    out.extend(invariant_suite(seed)?);
    out.push(schedule_check());
    Ok(out)
}
