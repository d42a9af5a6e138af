//! The assembled network: encoder, alignment blocks and decoder over one
//! parameter store.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::ama::{pama_forward_detailed, AmaBlockOutput, AmaBlockParams, AmaOptions};
use crate::codec::{CodecProfile, Decoder, Encoder, FeatureMap, Tap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::ParamStore;

/// Blocks in the default pipeline.
pub const DEFAULT_STAGES: usize = 3;

/// One unit of work done by a forward pass, recorded for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    EncodeContent,
    EncodeStyle,
    Align { stage: usize },
    /// Decoding a stage output. Only the last stage is decoded at inference.
    Decode { stage: usize },
    /// Decoding encoder features of an input image without alignment.
    Reconstruct,
}

/// Every tensor a training step needs from the network.
#[derive(Debug, Clone)]
pub struct TrainForward {
    /// Raw decoder output per stage.
    pub stage_images: Vec<Tensor>,
    pub rec_content: Tensor,
    pub rec_style: Tensor,
}

/// Diagnostic outputs of one stage.
#[derive(Debug, Clone)]
pub struct StageInspection {
    /// Decoded rearranged style feature.
    pub rearranged: Image,
    /// Interpolation weights, row-major on the feature grid.
    pub weights: Vec<f32>,
    pub grid_height: usize,
    pub grid_width: usize,
}

fn block_prefix(i: usize) -> String {
    format!("ama.{i}")
}

#[derive(Debug, Clone)]
pub struct PamaModel {
    encoder: Encoder,
    blocks: Vec<AmaBlockParams>,
    decoder: Decoder,
    pub options: AmaOptions,
}

impl PamaModel {
    /// Adds freshly initialized parameters for every component to `store`.
    pub fn init(profile: CodecProfile, stages: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        if stages == 0 {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        Encoder::init(profile, store, rng)?;
        Decoder::init(profile, store, rng)?;
        for i in 0..stages {
            AmaBlockParams::init(store, &block_prefix(i), profile.feature_width(), rng)?;
        }
        Ok(())
    }

    /// Binds the model to parameters already in `store`. The model shares
    /// storage with the store, so in-place updates are visible immediately.
    pub fn from_store(profile: CodecProfile, stages: usize, store: &ParamStore) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        let blocks = (0..stages)
            .map(|i| AmaBlockParams::from_store(store, &block_prefix(i)))
            .collect::<Result<Vec<_>>>()?;
        for b in &blocks {
            if b.channels() != profile.feature_width() {
                return Err(Error::Shape(format!(
                    "alignment block width {} does not match profile {} ({})",
                    b.channels(),
                    profile.name,
                    profile.feature_width()
                )));
            }
        }
        Ok(Self {
            encoder: Encoder::from_store(profile, store)?,
            blocks,
            decoder: Decoder::from_store(profile, store)?,
            options: AmaOptions::default(),
        })
    }

    pub fn profile(&self) -> CodecProfile {
        self.encoder.profile()
    }

    pub fn stages(&self) -> usize {
        self.blocks.len()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn blocks(&self) -> &[AmaBlockParams] {
        &self.blocks
    }

    pub fn dtype(&self) -> DType {
        self.blocks[0].f.weight.dtype()
    }

    fn bottleneck(&self, images: &Tensor) -> Result<FeatureMap> {
        let feats = self.encoder.forward(images, Tap::Relu4_1)?;
        Ok(feats.get(Tap::Relu4_1)?.clone())
    }

    fn align(
        &self,
        content: &Tensor,
        style: &Tensor,
        trace: &mut Vec<TraceEvent>,
    ) -> Result<(FeatureMap, Vec<AmaBlockOutput>)> {
        trace.push(TraceEvent::EncodeContent);
        let fc = self.bottleneck(content)?;
        trace.push(TraceEvent::EncodeStyle);
        let fs = self.bottleneck(style)?;
        let outputs = pama_forward_detailed(&fc, &fs, &self.blocks, &self.options)?;
        trace.extend((1..=outputs.len()).map(|stage| TraceEvent::Align { stage }));
        Ok((fs, outputs))
    }

    /// Full training forward: every stage decoded, plus the reconstruction
    /// branch for both inputs.
    pub fn forward_train(&self, content: &Tensor, style: &Tensor, trace: &mut Vec<TraceEvent>) -> Result<TrainForward> {
        let (fs, outputs) = self.align(content, style, trace)?;
        let mut stage_images = Vec::with_capacity(outputs.len());
        for (i, out) in outputs.iter().enumerate() {
            trace.push(TraceEvent::Decode { stage: i + 1 });
            stage_images.push(self.decoder.forward(&out.stylized.data)?);
        }
        trace.push(TraceEvent::Reconstruct);
        let rec_content = self.decoder.forward(&self.bottleneck(content)?.data)?;
        trace.push(TraceEvent::Reconstruct);
        let rec_style = self.decoder.forward(&fs.data)?;
        Ok(TrainForward {
            stage_images,
            rec_content,
            rec_style,
        })
    }

    /// Inference on batched tensors: only the final stage is decoded.
    /// Returns the raw decoder output.
    pub fn stylize_tensor(&self, content: &Tensor, style: &Tensor, trace: &mut Vec<TraceEvent>) -> Result<Tensor> {
        let (_, outputs) = self.align(content, style, trace)?;
        let last = outputs.last().expect("at least one stage");
        trace.push(TraceEvent::Decode { stage: outputs.len() });
        self.decoder.forward(&last.stylized.data)
    }

    /// Stylizes one image pair. The output has the content image's size.
    pub fn stylize(&self, content: &Image, style: &Image) -> Result<Image> {
        self.stylize_traced(content, style, &mut Vec::new())
    }

    pub fn stylize_traced(&self, content: &Image, style: &Image, trace: &mut Vec<TraceEvent>) -> Result<Image> {
        let dev = candle_core::Device::Cpu;
        let c = content.to_tensor(self.dtype(), &dev)?;
        let s = style.to_tensor(self.dtype(), &dev)?;
        let out = self.stylize_tensor(&c, &s, trace)?;
        to_content_size(&out, content)
    }

    /// Decodes the output of every stage. Diagnostic only.
    pub fn stylize_stages(&self, content: &Image, style: &Image) -> Result<Vec<Image>> {
        let dev = candle_core::Device::Cpu;
        let c = content.to_tensor(self.dtype(), &dev)?;
        let s = style.to_tensor(self.dtype(), &dev)?;
        let (_, outputs) = self.align(&c, &s, &mut Vec::new())?;
        outputs
            .iter()
            .map(|o| to_content_size(&self.decoder.forward(&o.stylized.data)?, content))
            .collect()
    }

    /// Per stage: the decoded rearranged style feature and the weight field.
    pub fn inspect(&self, content: &Image, style: &Image) -> Result<Vec<StageInspection>> {
        let dev = candle_core::Device::Cpu;
        let c = content.to_tensor(self.dtype(), &dev)?;
        let s = style.to_tensor(self.dtype(), &dev)?;
        let (_, outputs) = self.align(&c, &s, &mut Vec::new())?;
        outputs
            .iter()
            .map(|o| {
                let (_, _, gh, gw) = o.field.weights.dims4()?;
                let weights = o.field.weights.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok(StageInspection {
                    rearranged: to_content_size(&self.decoder.forward(&o.rearranged.data)?, content)?,
                    weights,
                    grid_height: gh,
                    grid_width: gw,
                })
            })
            .collect()
    }
}

/// Clamps a `[1, 3, H, W]` decoder output and, when the content size is
/// not a multiple of the bottleneck stride, resizes it back.
fn to_content_size(raw: &Tensor, content: &Image) -> Result<Image> {
    let img = Image::from_tensor(&raw.clamp(0.0, 1.0)?.get(0)?)?;
    if img.height() == content.height() && img.width() == content.width() {
        Ok(img)
    } else {
        Ok(img.resize(content.height(), content.width()))
    }
}

/// Colormap anchors: weight 0 is blue, weight 1 is yellow.
pub const HEATMAP_LOW: [f32; 3] = [0.0, 0.0, 1.0];
pub const HEATMAP_HIGH: [f32; 3] = [1.0, 1.0, 0.0];

/// False-color image of a weight grid, each cell repeated `scale` times
/// along both axes.
pub fn weight_heatmap(weights: &[f32], height: usize, width: usize, scale: usize) -> Result<Image> {
    if weights.len() != height * width || scale == 0 {
        return Err(Error::Shape(format!(
            "heatmap of {} weights for a {height}x{width} grid at scale {scale}",
            weights.len()
        )));
    }
    Image::from_fn(height * scale, width * scale, |r, c| {
        let w = weights[(r / scale) * width + c / scale].clamp(0.0, 1.0);
        std::array::from_fn(|k| HEATMAP_LOW[k] + w * (HEATMAP_HIGH[k] - HEATMAP_LOW[k]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ProfileName;
    use rand::SeedableRng;

    fn tiny(stages: usize) -> (ParamStore, PamaModel) {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let profile = CodecProfile::named(ProfileName::Tiny);
        PamaModel::init(profile, stages, &mut store, &mut rng).unwrap();
        let model = PamaModel::from_store(profile, stages, &store).unwrap();
        (store, model)
    }

    fn gradient(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |r, c| [r as f32 / h as f32, c as f32 / w as f32, 0.5]).unwrap()
    }

    #[test]
    fn inference_skips_training_branches() {
        let (_, model) = tiny(3);
        let mut trace = Vec::new();
        let out = model.stylize_traced(&gradient(32, 48), &gradient(16, 16), &mut trace).unwrap();
        assert_eq!((out.height(), out.width()), (32, 48));
        assert_eq!(
            trace,
            vec![
                TraceEvent::EncodeContent,
                TraceEvent::EncodeStyle,
                TraceEvent::Align { stage: 1 },
                TraceEvent::Align { stage: 2 },
                TraceEvent::Align { stage: 3 },
                TraceEvent::Decode { stage: 3 },
            ]
        );
    }

    #[test]
    fn training_forward_runs_every_branch() {
        let (_, model) = tiny(2);
        let c = gradient(16, 16).to_tensor(DType::F32, &candle_core::Device::Cpu).unwrap();
        let mut trace = Vec::new();
        let f = model.forward_train(&c, &c, &mut trace).unwrap();
        assert_eq!(f.stage_images.len(), 2);
        assert_eq!(f.rec_content.dims(), &[1, 3, 16, 16]);
        assert_eq!(trace.iter().filter(|e| **e == TraceEvent::Reconstruct).count(), 2);
        assert!(trace.contains(&TraceEvent::Decode { stage: 1 }));
    }

    #[test]
    fn odd_sizes_come_back_at_content_size() {
        let (_, model) = tiny(1);
        let out = model.stylize(&gradient(21, 35), &gradient(16, 16)).unwrap();
        assert_eq!((out.height(), out.width()), (21, 35));
    }

    #[test]
    fn inspection_has_one_entry_per_stage() {
        let (_, model) = tiny(3);
        let ins = model.inspect(&gradient(32, 32), &gradient(16, 16)).unwrap();
        assert_eq!(ins.len(), 3);
        assert_eq!((ins[0].grid_height, ins[0].grid_width), (4, 4));
        assert!(ins.iter().all(|s| s.weights.iter().all(|w| (0.0..=1.0).contains(w))));
    }

    #[test]
    fn heatmap_anchors_and_geometry() {
        let img = weight_heatmap(&[0.0, 1.0, 0.5, 0.25], 2, 2, 8).unwrap();
        assert_eq!((img.height(), img.width()), (16, 16));
        assert_eq!(img.pixel(0, 0), HEATMAP_LOW);
        assert_eq!(img.pixel(7, 15), HEATMAP_HIGH);
        assert_eq!(img.pixel(8, 0), [0.5, 0.5, 0.5]);
        assert_eq!(img.pixel(15, 8), [0.25, 0.25, 0.75]);
        assert!(weight_heatmap(&[0.0; 3], 2, 2, 8).is_err());
    }

    #[test]
    fn store_updates_reach_the_model() {
        let (store, model) = tiny(1);
        let name = "ama.0.theta.weight";
        let zero = store.get(name).unwrap().zeros_like().unwrap();
        store.set(name, &zero).unwrap();
        let w: f32 = model.blocks()[0].theta.weight.abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(w, 0.0);
    }
}
