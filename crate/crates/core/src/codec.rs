//! VGG-topology encoder, its mirrored decoder, and the feature-map types that
//! flow between them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_shape, Error, Result};
use crate::image::Image;
use crate::nn::{self, Conv};
use crate::params::ParamStore;

/// Stabilizer in the mean-variance normalization denominator.
pub const NORM_EPS: f64 = 1e-5;

/// Per-channel input statistics applied before the first convolution
/// (ImageNet RGB mean and standard deviation).
const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Encoder tap: the first ReLU of each VGG stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tap {
    #[serde(rename = "relu1_1")]
    Relu1_1,
    #[serde(rename = "relu2_1")]
    Relu2_1,
    #[serde(rename = "relu3_1")]
    Relu3_1,
    #[serde(rename = "relu4_1")]
    Relu4_1,
    #[serde(rename = "relu5_1")]
    Relu5_1,
}

impl Tap {
    pub const ALL: [Tap; 5] = [Tap::Relu1_1, Tap::Relu2_1, Tap::Relu3_1, Tap::Relu4_1, Tap::Relu5_1];

    /// Zero-based VGG stage index.
    pub fn stage(self) -> usize {
        self as usize
    }

    /// Spatial downsampling factor relative to the input image.
    pub fn stride(self) -> usize {
        1 << self.stage()
    }

    pub fn name(self) -> &'static str {
        match self {
            Tap::Relu1_1 => "relu1_1",
            Tap::Relu2_1 => "relu2_1",
            Tap::Relu3_1 => "relu3_1",
            Tap::Relu4_1 => "relu4_1",
            Tap::Relu5_1 => "relu5_1",
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tap::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown tap {s:?}")))
    }
}

/// Named architecture profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Full,
    Tiny,
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileName::Full => "full",
            ProfileName::Tiny => "tiny",
        })
    }
}

impl FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ProfileName::Full),
            "tiny" => Ok(ProfileName::Tiny),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected full or tiny)"))),
        }
    }
}

/// Channel widths of the five VGG stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecProfile {
    pub name: ProfileName,
    pub widths: [usize; 5],
}

impl CodecProfile {
    /// VGG19 trunk up to relu5_1.
    pub const FULL: CodecProfile = CodecProfile {
        name: ProfileName::Full,
        widths: [64, 128, 256, 512, 512],
    };

    /// Same topology at a quarter of the width, trained from scratch.
    pub const TINY: CodecProfile = CodecProfile {
        name: ProfileName::Tiny,
        widths: [16, 32, 64, 128, 128],
    };

    pub fn named(name: ProfileName) -> Self {
        match name {
            ProfileName::Full => Self::FULL,
            ProfileName::Tiny => Self::TINY,
        }
    }

    pub fn width(&self, tap: Tap) -> usize {
        self.widths[tap.stage()]
    }

    /// Channel count of the relu4_1 features the alignment blocks work on.
    pub fn feature_width(&self) -> usize {
        self.width(Tap::Relu4_1)
    }

    /// Encoder layers as `(name, c_in, c_out, tap emitted after its ReLU)`.
    /// A pooling step precedes every `convN_1` with `N > 1`.
    fn encoder_layers(&self) -> Vec<(String, usize, usize, Option<Tap>)> {
        let convs_per_stage = [2, 2, 4, 4, 1];
        let mut layers = Vec::new();
        let mut c_in = 3;
        for (stage, &count) in convs_per_stage.iter().enumerate() {
            let c_out = self.widths[stage];
            for i in 0..count {
                let tap = (i == 0).then(|| Tap::ALL[stage]);
                layers.push((format!("conv{}_{}", stage + 1, i + 1), c_in, c_out, tap));
                c_in = c_out;
            }
        }
        layers
    }

    /// Decoder layers as `(c_in, c_out, upsample after)`; the last layer has
    /// no ReLU.
    fn decoder_layers(&self) -> Vec<(usize, usize, bool)> {
        let [w1, w2, w3, w4, _] = self.widths;
        vec![
            (w4, w3, true),
            (w3, w3, false),
            (w3, w3, false),
            (w3, w3, false),
            (w3, w2, true),
            (w2, w2, false),
            (w2, w1, true),
            (w1, w1, false),
            (w1, 3, false),
        ]
    }
}

/// Activation tensor `[B, C, H, W]` tagged with the tap it came from. A
/// batch of one is the common case; every operation acts per sample.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub tap: Tap,
}

impl FeatureMap {
    pub fn new(data: Tensor, tap: Tap) -> Result<Self> {
        if data.rank() != 4 {
            bail_shape!("feature map must be [B, C, H, W], got {:?}", data.dims());
        }
        Ok(Self { data, tap })
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[3]
    }

    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }
}

/// Features of every tap from one encoder pass.
#[derive(Debug, Clone, Default)]
pub struct MultiLayerFeatures {
    maps: BTreeMap<Tap, FeatureMap>,
}

impl MultiLayerFeatures {
    pub fn get(&self, tap: Tap) -> Result<&FeatureMap> {
        self.maps
            .get(&tap)
            .ok_or_else(|| Error::Config(format!("tap {tap} was not computed")))
    }

    pub fn taps(&self) -> impl Iterator<Item = Tap> + '_ {
        self.maps.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Cuts every map out of the autodiff graph.
    pub fn detach(&mut self) {
        for map in self.maps.values_mut() {
            map.data = map.data.detach();
        }
    }
}

/// Per-channel mean-variance normalization with `eps = 1e-5`.
pub fn mean_variance_normalize(feature: &FeatureMap) -> Result<FeatureMap> {
    if feature.positions() < 2 {
        return Err(Error::Degenerate(
            "mean-variance normalization needs at least two spatial positions".into(),
        ));
    }
    FeatureMap::new(nn::mean_variance_normalize(&feature.data, NORM_EPS)?, feature.tap)
}

/// The VGG-style encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    profile: CodecProfile,
    layers: Vec<(Conv, Option<Tap>, bool)>,
}

impl Encoder {
    pub fn init(profile: CodecProfile, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for (name, c_in, c_out, _) in profile.encoder_layers() {
            store.init_conv(&format!("encoder.{name}"), c_in, c_out, 3, 2f64.sqrt(), rng)?;
        }
        Ok(())
    }

    pub fn from_store(profile: CodecProfile, store: &ParamStore) -> Result<Self> {
        let mut layers = Vec::new();
        for (name, c_in, c_out, tap) in profile.encoder_layers() {
            let conv = store.conv(&format!("encoder.{name}"))?;
            if conv.in_channels() != c_in || conv.out_channels() != c_out {
                bail_shape!(
                    "encoder.{name}: expected {c_in}->{c_out}, checkpoint has {}->{}",
                    conv.in_channels(),
                    conv.out_channels()
                );
            }
            let pool_before = name.ends_with("_1") && !name.starts_with("conv1");
            layers.push((conv, tap, pool_before));
        }
        Ok(Self { profile, layers })
    }

    pub fn profile(&self) -> CodecProfile {
        self.profile
    }

    /// A view sharing this encoder's weights with gradient tracking cut:
    /// gradients still reach the input, never the weights. Used as a fixed
    /// loss network.
    pub fn detached(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|(conv, tap, pool)| (Conv::new(conv.weight.detach(), conv.bias.detach()), *tap, *pool))
            .collect();
        Self {
            profile: self.profile,
            layers,
        }
    }

    fn check_size(height: usize, width: usize, deepest: Tap) -> Result<()> {
        let needed = deepest.stride();
        if height < needed || width < needed {
            return Err(Error::Dimension {
                tap: deepest,
                height,
                width,
                needed,
            });
        }
        Ok(())
    }

    fn normalize_input(x: &Tensor) -> Result<Tensor> {
        let dev = x.device();
        let mean = Tensor::new(&INPUT_MEAN, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&INPUT_STD, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Runs `[B, 3, H, W]` images through the encoder, keeping every tap up
    /// to and including `deepest`.
    pub fn forward(&self, images: &Tensor, deepest: Tap) -> Result<MultiLayerFeatures> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            bail_shape!("encoder expects 3 input channels, got {c}");
        }
        Self::check_size(h, w, deepest)?;
        let mut x = Self::normalize_input(images)?;
        let mut out = MultiLayerFeatures::default();
        for (conv, tap, pool_before) in &self.layers {
            if *pool_before {
                x = x.max_pool2d(2)?;
            }
            x = conv.forward(&x)?.relu()?;
            if let Some(tap) = tap {
                out.maps.insert(*tap, FeatureMap::new(x.clone(), *tap)?);
                if *tap == deepest {
                    break;
                }
            }
        }
        Ok(out)
    }

    /// Smallest absolute pre-activation across all ReLUs up to `deepest`.
    /// Finite-difference checks use it to avoid sampling near kinks.
    pub fn relu_margin(&self, images: &Tensor, deepest: Tap) -> Result<f64> {
        let mut x = Self::normalize_input(images)?;
        let mut margin = f64::INFINITY;
        for (conv, tap, pool_before) in &self.layers {
            if *pool_before {
                x = x.max_pool2d(2)?;
            }
            let z = conv.forward(&x)?;
            let m = z.abs()?.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            margin = margin.min(m);
            x = z.relu()?;
            if *tap == Some(deepest) {
                break;
            }
        }
        Ok(margin)
    }

    /// Encodes a single image, returning all five taps.
    pub fn encode(&self, image: &Image) -> Result<MultiLayerFeatures> {
        let dtype = self.layers[0].0.weight.dtype();
        let x = image.to_tensor(dtype, self.layers[0].0.weight.device())?;
        self.forward(&x, Tap::Relu5_1)
    }
}

/// Decoder from relu4_1 features back to pixels, mirroring the encoder with
/// nearest-neighbour upsampling in place of pooling.
#[derive(Debug, Clone)]
pub struct Decoder {
    profile: CodecProfile,
    layers: Vec<(Conv, bool)>,
}

impl Decoder {
    pub fn init(profile: CodecProfile, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let layers = profile.decoder_layers();
        let last = layers.len() - 1;
        for (i, (c_in, c_out, _)) in layers.into_iter().enumerate() {
            let gain = if i == last { 1.0 } else { 2f64.sqrt() };
            store.init_conv(&format!("decoder.{i}"), c_in, c_out, 3, gain, rng)?;
        }
        Ok(())
    }

    pub fn from_store(profile: CodecProfile, store: &ParamStore) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, (c_in, c_out, up)) in profile.decoder_layers().into_iter().enumerate() {
            let conv = store.conv(&format!("decoder.{i}"))?;
            if conv.in_channels() != c_in || conv.out_channels() != c_out {
                bail_shape!(
                    "decoder.{i}: expected {c_in}->{c_out}, checkpoint has {}->{}",
                    conv.in_channels(),
                    conv.out_channels()
                );
            }
            layers.push((conv, up));
        }
        Ok(Self { profile, layers })
    }

    pub fn profile(&self) -> CodecProfile {
        self.profile
    }

    /// Raw (unclamped) decoder output `[B, 3, 8H, 8W]` for relu4_1 features.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = features.dims4()?;
        if c != self.profile.feature_width() {
            bail_shape!(
                "decoder for profile {} expects {} channels, got {c}",
                self.profile.name,
                self.profile.feature_width()
            );
        }
        let mut x = features.clone();
        let last = self.layers.len() - 1;
        for (i, (conv, up)) in self.layers.iter().enumerate() {
            x = conv.forward(&x)?;
            if i != last {
                x = x.relu()?;
            }
            if *up {
                let (_, _, h, w) = x.dims4()?;
                x = x.upsample_nearest2d(2 * h, 2 * w)?;
            }
        }
        Ok(x)
    }

    /// Decodes relu4_1 features into images clamped to `[0, 1]`.
    pub fn decode(&self, feature: &FeatureMap) -> Result<Vec<Image>> {
        if feature.tap != Tap::Relu4_1 {
            bail_shape!("decoder consumes relu4_1 features, got {}", feature.tap);
        }
        let out = self.forward(&feature.data)?.clamp(0.0, 1.0)?;
        (0..feature.batch()).map(|b| Image::from_tensor(&out.get(b)?)).collect()
    }
}

/// Encoder and decoder of one profile.
#[derive(Debug, Clone)]
pub struct FeatureCodec {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl FeatureCodec {
    pub fn init(profile: CodecProfile, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        Encoder::init(profile, store, rng)?;
        Decoder::init(profile, store, rng)
    }

    pub fn from_store(profile: CodecProfile, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::from_store(profile, store)?,
            decoder: Decoder::from_store(profile, store)?,
        })
    }

    pub fn profile(&self) -> CodecProfile {
        self.encoder.profile()
    }

    /// Encodes then decodes one image through the relu4_1 bottleneck.
    pub fn reconstruct(&self, image: &Image) -> Result<Image> {
        let feats = self.encoder.forward(
            &image.to_tensor(self.dtype(), &candle_core::Device::Cpu)?,
            Tap::Relu4_1,
        )?;
        let mut out = self.decoder.decode(feats.get(Tap::Relu4_1)?)?;
        Ok(out.remove(0))
    }

    pub fn dtype(&self) -> DType {
        self.encoder.layers[0].0.weight.dtype()
    }
}
