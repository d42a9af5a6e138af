//! The multistage loss suite: structure self-similarity, relaxed earth mover
//! distance, moment matching and color histogram terms per alignment stage,
//! plus the image/feature reconstruction loss.

mod features;
mod histogram;

pub use features::{
    cosine_distance_matrix, feature_moments, moment_loss, remd_loss, sample_positions, self_similarity_loss,
    DistanceMatrix, SelfSimilarityNorm, Subsampling, COSINE_EPS,
};
pub use histogram::{build_color_histogram, histogram_loss, ColorHistogram, HistogramGeometry};

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Encoder, FeatureMap, MultiLayerFeatures, Tap};
use crate::error::{bail_shape, Error, Result};

pub(crate) use features::scalar;

/// Taps feeding the self-similarity, REMD and moment terms.
pub const STYLE_TAPS: [Tap; 3] = [Tap::Relu3_1, Tap::Relu4_1, Tap::Relu5_1];
/// Taps feeding the feature part of the reconstruction loss.
pub const RECONSTRUCTION_TAPS: [Tap; 4] = [Tap::Relu1_1, Tap::Relu2_1, Tap::Relu3_1, Tap::Relu4_1];

/// Per-stage loss weights and the reconstruction pixel weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub lambda_ss: Vec<f64>,
    pub lambda_r: Vec<f64>,
    pub lambda_m: Vec<f64>,
    pub lambda_h: Vec<f64>,
    pub lambda_rec_pixel: f64,
}

/// Weights of one stage after normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageWeights {
    pub ss: f64,
    pub r: f64,
    pub m: f64,
    pub h: f64,
}

impl StageSchedule {
    const DEFAULT_SS: [f64; 3] = [12.0, 9.0, 7.0];
    const DEFAULT_H: [f64; 3] = [0.25, 0.5, 1.0];

    /// The default three-stage weights. Fewer stages keep the weights of
    /// the last stages, so a single-stage network trains with (7, 2, 2, 1).
    pub fn with_stages(stages: usize) -> Result<Self> {
        if !(1..=3).contains(&stages) {
            return Err(Error::Config(format!("stage count must be 1..=3, got {stages}")));
        }
        let skip = 3 - stages;
        Ok(Self {
            lambda_ss: Self::DEFAULT_SS[skip..].to_vec(),
            lambda_r: vec![2.0; stages],
            lambda_m: vec![2.0; stages],
            lambda_h: Self::DEFAULT_H[skip..].to_vec(),
            lambda_rec_pixel: 50.0,
        })
    }

    pub fn stages(&self) -> usize {
        self.lambda_ss.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        if n == 0 {
            return Err(Error::Config("schedule has no stages".into()));
        }
        for (key, v) in [
            ("lambda_r", &self.lambda_r),
            ("lambda_m", &self.lambda_m),
            ("lambda_h", &self.lambda_h),
        ] {
            if v.len() != n {
                return Err(Error::Config(format!("{key} has {} entries, lambda_ss has {n}", v.len())));
            }
        }
        let all = self
            .lambda_ss
            .iter()
            .chain(&self.lambda_r)
            .chain(&self.lambda_m)
            .chain(&self.lambda_h)
            .chain(std::iter::once(&self.lambda_rec_pixel));
        for w in all {
            if !(*w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w}")));
            }
        }
        for i in 0..n {
            if self.lambda_ss[i] + self.lambda_r[i] + self.lambda_m[i] <= 0.0 {
                return Err(Error::Config(format!("stage {} has zero content/style weight sum", i + 1)));
            }
        }
        Ok(())
    }

    /// Weights of stage `index` (zero based). `ss`, `r` and `m` are divided
    /// by their sum; `h` is used as given.
    pub fn weights(&self, index: usize) -> Result<StageWeights> {
        if index >= self.stages() {
            return Err(Error::Config(format!(
                "stage {} requested but the schedule has {}",
                index + 1,
                self.stages()
            )));
        }
        let sum = self.lambda_ss[index] + self.lambda_r[index] + self.lambda_m[index];
        Ok(StageWeights {
            ss: self.lambda_ss[index] / sum,
            r: self.lambda_r[index] / sum,
            m: self.lambda_m[index] / sum,
            h: self.lambda_h[index],
        })
    }

    /// Weighted stage total for already-evaluated component values.
    pub fn combine(&self, index: usize, terms: &StageValues) -> Result<f64> {
        let w = self.weights(index)?;
        Ok(w.ss * terms.ss + w.r * terms.r + w.m * terms.m + w.h * terms.h)
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self::with_stages(3).expect("three stages are valid")
    }
}

/// Everything the loss suite needs besides the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub schedule: StageSchedule,
    pub histogram: HistogramGeometry,
    /// Maximum positions per pairwise matrix; larger maps are subsampled.
    pub subsample_limit: usize,
    pub self_similarity_norm: SelfSimilarityNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            schedule: StageSchedule::default(),
            histogram: HistogramGeometry::default(),
            subsample_limit: 1024,
            self_similarity_norm: SelfSimilarityNorm::Rows,
        }
    }
}

/// Unweighted component values of one stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageValues {
    pub ss: f64,
    pub r: f64,
    pub m: f64,
    pub h: f64,
}

/// Differentiable component terms of one stage.
#[derive(Debug, Clone)]
pub struct StageTerms {
    pub ss: Tensor,
    pub r: Tensor,
    pub m: Tensor,
    pub h: Tensor,
}

impl StageTerms {
    pub fn values(&self) -> Result<StageValues> {
        Ok(StageValues {
            ss: scalar(&self.ss)?,
            r: scalar(&self.r)?,
            m: scalar(&self.m)?,
            h: scalar(&self.h)?,
        })
    }

    pub fn weighted(&self, w: &StageWeights) -> Result<Tensor> {
        let a = (self.ss.affine(w.ss, 0.0)? + self.r.affine(w.r, 0.0)?)?;
        let b = (self.m.affine(w.m, 0.0)? + self.h.affine(w.h, 0.0)?)?;
        Ok((a + b)?)
    }
}

/// Total loss with its per-term breakdown.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub stages: Vec<StageValues>,
    pub stage_totals: Vec<f64>,
    pub reconstruction: f64,
}

/// Per-sample Euclidean norm over all non-batch axes, `[B]`.
fn per_sample_norm(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    let sq = x.reshape((b, ()))?.sqr()?.sum(1)?;
    Ok((sq + 1e-24)?.sqrt()?)
}

/// An input image together with its (detached) encoder features.
#[derive(Debug, Clone)]
pub struct Reference {
    pub image: Tensor,
    pub features: MultiLayerFeatures,
}

/// Everything one training step feeds into the total loss.
#[derive(Debug, Clone)]
pub struct LossInputs<'t> {
    /// Raw decoder output of every alignment stage.
    pub stage_images: &'t [Tensor],
    pub content: &'t Reference,
    pub style: &'t Reference,
    /// Raw decoder output of the content and style reconstruction branch.
    pub rec_content: &'t Tensor,
    pub rec_style: &'t Tensor,
}

/// Evaluates the loss suite through a (possibly trainable) encoder.
pub struct LossEvaluator<'a> {
    pub encoder: &'a Encoder,
    pub config: &'a LossConfig,
}

impl<'a> LossEvaluator<'a> {
    pub fn new(encoder: &'a Encoder, config: &'a LossConfig) -> Self {
        Self { encoder, config }
    }

    /// Encodes an input image down to relu5_1. The features are detached:
    /// they act as targets, so no gradient flows back through them.
    pub fn reference(&self, image: &Tensor) -> Result<Reference> {
        let mut features = self.encoder.forward(image, Tap::Relu5_1)?;
        features.detach();
        Ok(Reference {
            image: image.detach(),
            features,
        })
    }

    /// `lambda * (|I_rc - I_c| + |I_rs - I_s|)` plus the same norms between
    /// encoder features at `taps`, per image, averaged over the batch.
    pub fn reconstruction_loss(
        &self,
        rec_content: &Tensor,
        content: &Reference,
        rec_style: &Tensor,
        style: &Reference,
        taps: &[Tap],
    ) -> Result<Tensor> {
        let pairs = [(rec_content, content), (rec_style, style)];
        for (rec, orig) in pairs {
            if rec.dims() != orig.image.dims() {
                bail_shape!("reconstruction {:?} vs original {:?}", rec.dims(), orig.image.dims());
            }
        }
        let lambda = self.config.schedule.lambda_rec_pixel;
        let mut total: Option<Tensor> = None;
        for (rec, orig) in pairs {
            let mut term = per_sample_norm(&(rec - &orig.image)?)?.affine(lambda, 0.0)?;
            if let Some(deepest) = taps.iter().max() {
                let fr = self.encoder.forward(rec, *deepest)?;
                for tap in taps {
                    let d = (&fr.get(*tap)?.data - &orig.features.get(*tap)?.data)?;
                    term = (term + per_sample_norm(&d)?)?;
                }
            }
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
        Ok(total.expect("two branches").mean_all()?)
    }

    /// Soft color histogram of raw decoder output or input images.
    pub fn histogram(&self, images: &Tensor) -> Result<ColorHistogram> {
        build_color_histogram(images, self.config.histogram)
    }

    /// Component terms of one stage from the re-encoded stage image.
    pub fn stage_terms(
        &self,
        stage_image: &Tensor,
        content: &MultiLayerFeatures,
        style: &MultiLayerFeatures,
        style_hist: &ColorHistogram,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StageTerms> {
        let stylized = self.encoder.forward(stage_image, Tap::Relu5_1)?;
        let limit = self.config.subsample_limit;
        let mut ss: Option<Tensor> = None;
        let mut r: Option<Tensor> = None;
        let mut m: Option<Tensor> = None;
        let add = |acc: &mut Option<Tensor>, t: Tensor| -> Result<()> {
            *acc = Some(match acc.take() {
                Some(a) => (a + t)?,
                None => t,
            });
            Ok(())
        };
        for tap in STYLE_TAPS {
            let fcs: &FeatureMap = stylized.get(tap)?;
            let fc = content.get(tap)?;
            let fs = style.get(tap)?;
            let mut sub = Subsampling {
                limit,
                rng: rng.as_deref_mut(),
            };
            add(
                &mut ss,
                self_similarity_loss(fc, fcs, self.config.self_similarity_norm, &mut sub)?,
            )?;
            add(&mut r, remd_loss(fcs, fs, &mut sub)?)?;
            add(&mut m, moment_loss(fcs, fs, &mut sub)?)?;
        }
        let h = histogram_loss(style_hist, &self.histogram(stage_image)?)?;
        Ok(StageTerms {
            ss: ss.expect("style taps are non-empty"),
            r: r.expect("style taps are non-empty"),
            m: m.expect("style taps are non-empty"),
            h,
        })
    }

    /// Weighted loss of stage `index` for a decoded stage image.
    pub fn stage_loss(
        &self,
        index: usize,
        stage_image: &Tensor,
        content: &Reference,
        style: &Reference,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, StageTerms)> {
        let weights = self.config.schedule.weights(index)?;
        let style_hist = self.histogram(&style.image)?;
        let terms = self.stage_terms(stage_image, &content.features, &style.features, &style_hist, rng)?;
        Ok((terms.weighted(&weights)?, terms))
    }

    /// Sum of all stage losses plus the reconstruction loss.
    pub fn total_loss(&self, inputs: &LossInputs<'_>, mut rng: Option<&mut ChaCha8Rng>) -> Result<LossOutput> {
        let schedule = &self.config.schedule;
        if inputs.stage_images.len() != schedule.stages() {
            return Err(Error::Config(format!(
                "{} stage images for a {}-stage schedule",
                inputs.stage_images.len(),
                schedule.stages()
            )));
        }
        let rec = self.reconstruction_loss(
            inputs.rec_content,
            inputs.content,
            inputs.rec_style,
            inputs.style,
            &RECONSTRUCTION_TAPS,
        )?;
        let style_hist = self.histogram(&inputs.style.image)?;
        let mut total = rec.clone();
        let mut stages = Vec::with_capacity(schedule.stages());
        let mut stage_totals = Vec::with_capacity(schedule.stages());
        for (i, img) in inputs.stage_images.iter().enumerate() {
            let terms = self.stage_terms(
                img,
                &inputs.content.features,
                &inputs.style.features,
                &style_hist,
                rng.as_deref_mut(),
            )?;
            let weighted = terms.weighted(&schedule.weights(i)?)?;
            stage_totals.push(scalar(&weighted)?);
            stages.push(terms.values()?);
            total = (total + weighted)?;
        }
        Ok(LossOutput {
            total,
            stages,
            stage_totals,
            reconstruction: scalar(&rec)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_literal() {
        let s = StageSchedule::default();
        assert_eq!(s.lambda_ss, vec![12.0, 9.0, 7.0]);
        assert_eq!(s.lambda_r, vec![2.0; 3]);
        assert_eq!(s.lambda_m, vec![2.0; 3]);
        assert_eq!(s.lambda_h, vec![0.25, 0.5, 1.0]);
        assert_eq!(s.lambda_rec_pixel, 50.0);
        let w = s.weights(0).unwrap();
        assert_eq!(w.ss, 0.75);
        assert_eq!((w.r, w.m, w.h), (0.125, 0.125, 0.25));
    }

    #[test]
    fn stage_three_arithmetic() {
        let s = StageSchedule::default();
        let ones = StageValues {
            ss: 1.0,
            r: 1.0,
            m: 1.0,
            h: 1.0,
        };
        assert!((s.combine(2, &ones).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(s.combine(0, &StageValues::default()).unwrap(), 0.0);
        assert!(matches!(s.combine(3, &ones), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_schedules_keep_last_stages() {
        let one = StageSchedule::with_stages(1).unwrap();
        assert_eq!((one.lambda_ss[0], one.lambda_h[0]), (7.0, 1.0));
        let two = StageSchedule::with_stages(2).unwrap();
        assert_eq!(two.lambda_ss, vec![9.0, 7.0]);
        assert!(StageSchedule::with_stages(0).is_err());
        assert!(StageSchedule::with_stages(4).is_err());
    }

    #[test]
    fn validation_catches_bad_schedules() {
        let mut s = StageSchedule::default();
        s.lambda_h.pop();
        assert!(s.validate().is_err());
        let mut s = StageSchedule::default();
        s.lambda_r[1] = -1.0;
        assert!(s.validate().is_err());
        assert!(StageSchedule::default().validate().is_ok());
    }
}
