//! Attentional manifold alignment: attention-driven style rearrangement
//! followed by a learned, spatially varying blend with the content feature,
//! repeated over several independent blocks.

use candle_core::{DType, Tensor, D};
use rand_chacha::ChaCha8Rng;

use crate::codec::{mean_variance_normalize, FeatureMap};
use crate::error::{bail_shape, Error, Result};
use crate::nn::{self, Conv};
use crate::params::ParamStore;

/// Kernel sizes of the channel-dense convolutions that produce `W`.
pub const DENSE_KERNELS: [usize; 3] = [3, 5, 7];

/// Default cap on the memory of one attention block, in bytes.
pub const DEFAULT_ATTENTION_BUDGET: usize = 256 << 20;

/// Row-stochastic attention matrix `[B, Nc, Ns]` between content positions
/// (rows) and style positions (columns).
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub matrix: Tensor,
    pub content_height: usize,
    pub content_width: usize,
}

impl AttentionMap {
    pub fn style_positions(&self) -> usize {
        self.matrix.dims()[2]
    }
}

/// Per-position blend weights `[B, 1, H, W]` with entries in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct InterpolationField {
    pub weights: Tensor,
}

impl InterpolationField {
    /// Field of constant value `w` matching `like`'s batch and grid.
    pub fn constant(like: &FeatureMap, w: f64) -> Result<Self> {
        let t = Tensor::full(w, (like.batch(), 1, like.height(), like.width()), like.data.device())?
            .to_dtype(like.data.dtype())?;
        Ok(Self { weights: t })
    }
}

/// Parameters of one alignment block.
#[derive(Debug, Clone)]
pub struct AmaBlockParams {
    /// Content embedding for the attention logits.
    pub f: Conv,
    /// Style embedding for the attention logits.
    pub g: Conv,
    /// Style embedding for the values being rearranged.
    pub h: Conv,
    /// Output embedding applied after rearrangement.
    pub theta: Conv,
    /// Channel-dense convolutions `2C -> 1`, one per kernel size.
    pub psi: Vec<Conv>,
}

impl AmaBlockParams {
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        store.init_conv(&format!("{prefix}.f"), channels, channels, 1, 1.0, rng)?;
        store.init_conv(&format!("{prefix}.g"), channels, channels, 1, 1.0, rng)?;
        for name in ["h", "theta"] {
            let eye = Tensor::eye(channels, DType::F64, store.device())?.reshape((channels, channels, 1, 1))?;
            store.insert(format!("{prefix}.{name}.weight"), &eye)?;
            store.insert(
                format!("{prefix}.{name}.bias"),
                &Tensor::zeros(channels, DType::F64, store.device())?,
            )?;
        }
        for k in DENSE_KERNELS {
            store.init_conv(&format!("{prefix}.psi{k}"), 2 * channels, 1, k, 1.0, rng)?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let psi = DENSE_KERNELS
            .iter()
            .map(|k| store.conv(&format!("{prefix}.psi{k}")))
            .collect::<Result<Vec<_>>>()?;
        let params = Self {
            f: store.conv(&format!("{prefix}.f"))?,
            g: store.conv(&format!("{prefix}.g"))?,
            h: store.conv(&format!("{prefix}.h"))?,
            theta: store.conv(&format!("{prefix}.theta"))?,
            psi,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn channels(&self) -> usize {
        self.f.in_channels()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, conv) in [("f", &self.f), ("g", &self.g), ("h", &self.h), ("theta", &self.theta)] {
            if conv.in_channels() != c || conv.out_channels() != c || conv.kernel() != 1 {
                bail_shape!("embedding {name} must be a 1x1 convolution {c}->{c}");
            }
        }
        if self.psi.is_empty() {
            return Err(Error::Config("at least one channel-dense kernel is required".into()));
        }
        for conv in &self.psi {
            if conv.in_channels() != 2 * c || conv.out_channels() != 1 {
                bail_shape!("channel-dense kernel must map {}->1", 2 * c);
            }
        }
        Ok(())
    }
}

/// Tuning knobs that do not change the block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AmaOptions {
    /// Diagnostic override: use this constant in place of the learned `W`.
    pub force_w: Option<f64>,
    /// Attention rows are computed in blocks so one block's logits stay
    /// under this many bytes.
    pub attention_budget: usize,
}

impl Default for AmaOptions {
    fn default() -> Self {
        Self {
            force_w: None,
            attention_budget: DEFAULT_ATTENTION_BUDGET,
        }
    }
}

fn check_channels(a: &FeatureMap, b: &FeatureMap, params: &AmaBlockParams) -> Result<()> {
    if a.channels() != b.channels() || a.channels() != params.channels() {
        bail_shape!(
            "channel mismatch: {} vs {} (block expects {})",
            a.channels(),
            b.channels(),
            params.channels()
        );
    }
    if a.batch() != b.batch() {
        bail_shape!("batch mismatch: {} vs {}", a.batch(), b.batch());
    }
    Ok(())
}

/// `[B, C, H, W] -> [B, C, H*W]`
fn flatten_positions(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?)
}

/// Embedded, normalized content keys `[B, Nc, C]` and style keys `[B, C, Ns]`.
fn attention_keys(content: &FeatureMap, style: &FeatureMap, params: &AmaBlockParams) -> Result<(Tensor, Tensor)> {
    let fc = params.f.forward(&mean_variance_normalize(content)?.data)?;
    let gs = params.g.forward(&mean_variance_normalize(style)?.data)?;
    Ok((flatten_positions(&fc)?.transpose(1, 2)?.contiguous()?, flatten_positions(&gs)?))
}

/// `A = softmax(f(Norm(F_c))^T g(Norm(F_s)))`, softmax over style positions.
pub fn attention_map(content: &FeatureMap, style: &FeatureMap, params: &AmaBlockParams) -> Result<AttentionMap> {
    check_channels(content, style, params)?;
    let (keys_c, keys_s) = attention_keys(content, style, params)?;
    let logits = keys_c.matmul(&keys_s)?;
    Ok(AttentionMap {
        matrix: nn::softmax_last_dim(&logits)?,
        content_height: content.height(),
        content_width: content.width(),
    })
}

/// Attention-weighted combination of `h(F_s)` on the content grid, before
/// the output embedding `theta`.
pub fn attended_style(style: &FeatureMap, attention: &AttentionMap, params: &AmaBlockParams) -> Result<FeatureMap> {
    if attention.style_positions() != style.positions() {
        bail_shape!(
            "attention has {} style columns but the style feature has {} positions",
            attention.style_positions(),
            style.positions()
        );
    }
    if style.channels() != params.channels() {
        bail_shape!("style has {} channels, block expects {}", style.channels(), params.channels());
    }
    let values = flatten_positions(&params.h.forward(&style.data)?)?;
    let mixed = values.matmul(&attention.matrix.transpose(1, 2)?)?;
    let (b, c, _) = mixed.dims3()?;
    FeatureMap::new(
        mixed.reshape((b, c, attention.content_height, attention.content_width))?,
        style.tap,
    )
}

/// Rearranged style feature `theta(A h(F_s)^T)` on the content grid.
pub fn rearrange_style(style: &FeatureMap, attention: &AttentionMap, params: &AmaBlockParams) -> Result<FeatureMap> {
    let mixed = attended_style(style, attention, params)?;
    FeatureMap::new(params.theta.forward(&mixed.data)?, style.tap)
}

/// `W = sigmoid(mean_i psi_i([F_c, F_hat_s]))`.
pub fn space_aware_weights(
    content: &FeatureMap,
    rearranged: &FeatureMap,
    params: &AmaBlockParams,
) -> Result<InterpolationField> {
    check_channels(content, rearranged, params)?;
    if content.data.dims() != rearranged.data.dims() {
        bail_shape!(
            "content {:?} and rearranged style {:?} differ in shape",
            content.data.dims(),
            rearranged.data.dims()
        );
    }
    let joined = Tensor::cat(&[&content.data, &rearranged.data], 1)?;
    let mut acc: Option<Tensor> = None;
    for conv in &params.psi {
        let y = conv.forward(&joined)?;
        acc = Some(match acc {
            Some(a) => (a + y)?,
            None => y,
        });
    }
    let mean = (acc.expect("validated non-empty") / params.psi.len() as f64)?;
    Ok(InterpolationField {
        weights: nn::sigmoid(&mean)?,
    })
}

/// `F_cs = W * F_c + (1 - W) * F_hat_s`, `W` broadcast over channels.
pub fn interpolate(content: &FeatureMap, rearranged: &FeatureMap, field: &InterpolationField) -> Result<FeatureMap> {
    if content.data.dims() != rearranged.data.dims() {
        bail_shape!(
            "content {:?} and rearranged style {:?} differ in shape",
            content.data.dims(),
            rearranged.data.dims()
        );
    }
    let (b, _, h, w) = content.data.dims4()?;
    if field.weights.dims() != [b, 1, h, w] {
        bail_shape!("interpolation field {:?} does not match grid {b}x1x{h}x{w}", field.weights.dims());
    }
    let flat = field.weights.flatten_all()?.to_dtype(DType::F64)?;
    let lo = flat.min(0)?.to_scalar::<f64>()?;
    let hi = flat.max(0)?.to_scalar::<f64>()?;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
        return Err(Error::Contract(format!("interpolation weights span [{lo}, {hi}], outside [0, 1]")));
    }
    let keep = field.weights.broadcast_mul(&content.data)?;
    let blend = (1.0 - &field.weights)?.broadcast_mul(&rearranged.data)?;
    FeatureMap::new((keep + blend)?, content.tap)
}

/// Every intermediate of one block, for training and inspection.
#[derive(Debug, Clone)]
pub struct AmaBlockOutput {
    pub stylized: FeatureMap,
    pub rearranged: FeatureMap,
    pub field: InterpolationField,
}

/// Attention rows in blocks sized to the memory budget, fused with the
/// value aggregation so the full matrix is never held at once.
fn rearrange_blocked(
    content: &FeatureMap,
    style: &FeatureMap,
    params: &AmaBlockParams,
    budget: usize,
) -> Result<FeatureMap> {
    let (keys_c, keys_s) = attention_keys(content, style, params)?;
    let values = flatten_positions(&params.h.forward(&style.data)?)?;
    let (b, nc, _) = keys_c.dims3()?;
    let ns = style.positions();
    let bytes_per_row = b * ns * content.data.dtype().size_in_bytes();
    let rows = (budget / bytes_per_row.max(1)).clamp(1, nc);
    let mut parts = Vec::with_capacity(nc.div_ceil(rows));
    let mut start = 0;
    while start < nc {
        let n = rows.min(nc - start);
        let logits = keys_c.narrow(1, start, n)?.matmul(&keys_s)?;
        let a = nn::softmax_last_dim(&logits)?;
        parts.push(values.matmul(&a.transpose(1, 2)?)?);
        start += n;
    }
    let mixed = if parts.len() == 1 { parts.pop().unwrap() } else { Tensor::cat(&parts, D::Minus1)? };
    let c = values.dim(1)?;
    let mixed = mixed.reshape((b, c, content.height(), content.width()))?;
    FeatureMap::new(params.theta.forward(&mixed)?, style.tap)
}

/// One full block: attention, rearrangement, weights, interpolation.
pub fn ama_block_detailed(
    content: &FeatureMap,
    style: &FeatureMap,
    params: &AmaBlockParams,
    options: &AmaOptions,
) -> Result<AmaBlockOutput> {
    check_channels(content, style, params)?;
    let rearranged = rearrange_blocked(content, style, params, options.attention_budget)?;
    let field = match options.force_w {
        Some(w) => InterpolationField::constant(content, w)?,
        None => space_aware_weights(content, &rearranged, params)?,
    };
    let stylized = interpolate(content, &rearranged, &field)?;
    Ok(AmaBlockOutput {
        stylized,
        rearranged,
        field,
    })
}

/// One block with default options, returning only `F_cs`.
pub fn ama_block(content: &FeatureMap, style: &FeatureMap, params: &AmaBlockParams) -> Result<FeatureMap> {
    Ok(ama_block_detailed(content, style, params, &AmaOptions::default())?.stylized)
}

/// Chains the blocks: each consumes the previous output as content and the
/// original style feature. Returns every block's output.
pub fn pama_forward_detailed(
    content: &FeatureMap,
    style: &FeatureMap,
    blocks: &[AmaBlockParams],
    options: &AmaOptions,
) -> Result<Vec<AmaBlockOutput>> {
    if blocks.is_empty() {
        return Err(Error::Config("alignment pipeline needs at least one block".into()));
    }
    let mut outputs: Vec<AmaBlockOutput> = Vec::with_capacity(blocks.len());
    for params in blocks {
        let input = outputs.last().map(|o| &o.stylized).unwrap_or(content);
        outputs.push(ama_block_detailed(input, style, params, options)?);
    }
    Ok(outputs)
}

pub fn pama_forward(
    content: &FeatureMap,
    style: &FeatureMap,
    blocks: &[AmaBlockParams],
    options: &AmaOptions,
) -> Result<Vec<FeatureMap>> {
    Ok(pama_forward_detailed(content, style, blocks, options)?
        .into_iter()
        .map(|o| o.stylized)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Tap;
    use candle_core::Device;
    use rand::SeedableRng;

    fn block(c: usize, seed: u64) -> AmaBlockParams {
        let mut store = ParamStore::new(DType::F64);
        AmaBlockParams::init(&mut store, "b", c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        AmaBlockParams::from_store(&store, "b").unwrap()
    }

    fn feat(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(Tensor::from_vec(data, (1, c, h, w), &Device::Cpu).unwrap(), Tap::Relu4_1).unwrap()
    }

    fn zero_conv(conv: &Conv) -> Conv {
        Conv::new(conv.weight.zeros_like().unwrap(), conv.bias.zeros_like().unwrap())
    }

    fn identity_conv(c: usize) -> Conv {
        let dev = Device::Cpu;
        Conv::new(
            Tensor::eye(c, DType::F64, &dev).unwrap().reshape((c, c, 1, 1)).unwrap(),
            Tensor::zeros(c, DType::F64, &dev).unwrap(),
        )
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn zero_embeddings_give_uniform_attention() {
        let mut p = block(4, 0);
        p.f = zero_conv(&p.f);
        p.g = zero_conv(&p.g);
        let a = attention_map(&feat(4, 3, 3, 0), &feat(4, 2, 5, 1), &p).unwrap();
        assert_eq!(a.matrix.dims(), &[1, 9, 10]);
        assert!(values(&a.matrix).iter().all(|v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn two_position_softmax_oracle() {
        // After normalization the content row and the two style columns are
        // (+1) and (-1, +1), so the embedded inner products differ by 2.
        let dev = Device::Cpu;
        let mut p = block(1, 0);
        p.f = identity_conv(1);
        p.g = identity_conv(1);
        let mk = |v: [f64; 2]| FeatureMap::new(Tensor::new(&v, &dev).unwrap().reshape((1, 1, 1, 2)).unwrap(), Tap::Relu4_1).unwrap();
        let a = attention_map(&mk([3.0, 7.0]), &mk([-1.0, 4.0]), &p).unwrap();
        let m = values(&a.matrix);
        let e2 = 2f64.exp();
        let (lo, hi) = (1.0 / (e2 + 1.0), e2 / (e2 + 1.0));
        assert!((m[2] - lo).abs() < 1e-4 && (m[3] - hi).abs() < 1e-4, "{m:?}");
        assert!((hi - 0.8808).abs() < 1e-4 && (lo - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn permutation_attention_permutes_style() {
        let dev = Device::Cpu;
        let mut p = block(3, 0);
        p.h = identity_conv(3);
        p.theta = identity_conv(3);
        let style = feat(3, 1, 4, 2);
        let perm = [2usize, 0, 3, 1];
        let mut m = vec![0f64; 16];
        for (row, &col) in perm.iter().enumerate() {
            m[row * 4 + col] = 1.0;
        }
        let a = AttentionMap {
            matrix: Tensor::from_vec(m, (1, 4, 4), &dev).unwrap(),
            content_height: 2,
            content_width: 2,
        };
        let out = values(&rearrange_style(&style, &a, &p).unwrap().data);
        let s = values(&style.data);
        for c in 0..3 {
            for (row, &col) in perm.iter().enumerate() {
                assert_eq!(out[c * 4 + row], s[c * 4 + col]);
            }
        }
    }

    #[test]
    fn uniform_attention_averages_embedded_style() {
        let dev = Device::Cpu;
        let p = block(3, 5);
        let style = feat(3, 2, 3, 3);
        let a = AttentionMap {
            matrix: Tensor::full(1.0 / 6.0, (1, 2, 6), &dev).unwrap(),
            content_height: 1,
            content_width: 2,
        };
        let out = values(&rearrange_style(&style, &a, &p).unwrap().data);
        // oracle: average h(F_s) over positions by hand, then apply theta
        let hs = values(&p.h.forward(&style.data).unwrap());
        let mean: Vec<f64> = (0..3).map(|c| hs[c * 6..(c + 1) * 6].iter().sum::<f64>() / 6.0).collect();
        let mean_t = Tensor::from_vec(mean, (1, 3, 1, 1), &dev).unwrap();
        let want = values(&p.theta.forward(&mean_t).unwrap());
        for c in 0..3 {
            for pos in 0..2 {
                assert!((out[c * 2 + pos] - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_style_position_ignores_attention() {
        let dev = Device::Cpu;
        let p = block(2, 1);
        let style = feat(2, 1, 1, 9);
        let a = AttentionMap {
            matrix: Tensor::ones((1, 3, 1), DType::F64, &dev).unwrap(),
            content_height: 3,
            content_width: 1,
        };
        let out = values(&rearrange_style(&style, &a, &p).unwrap().data);
        let want = values(&p.theta.forward(&p.h.forward(&style.data).unwrap()).unwrap());
        for c in 0..2 {
            for pos in 0..3 {
                assert!((out[c * 3 + pos] - want[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_dense_kernels_give_half() {
        let mut p = block(2, 0);
        p.psi = p.psi.iter().map(zero_conv).collect();
        let f = space_aware_weights(&feat(2, 4, 3, 0), &feat(2, 4, 3, 1), &p).unwrap();
        assert_eq!(f.weights.dims(), &[1, 1, 4, 3]);
        assert!(values(&f.weights).iter().all(|v| *v == 0.5));
    }

    #[test]
    fn single_kernel_equals_direct_sigmoid() {
        let mut p = block(2, 4);
        p.psi.truncate(1);
        let (c, r) = (feat(2, 3, 3, 0), feat(2, 3, 3, 1));
        let got = values(&space_aware_weights(&c, &r, &p).unwrap().weights);
        let joined = Tensor::cat(&[&c.data, &r.data], 1).unwrap();
        let pre = values(&p.psi[0].forward(&joined).unwrap());
        for (g, z) in got.iter().zip(pre) {
            assert!((g - 1.0 / (1.0 + (-z).exp())).abs() < 1e-14);
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let (c, r) = (feat(3, 2, 2, 0), feat(3, 2, 2, 1));
        let one = interpolate(&c, &r, &InterpolationField::constant(&c, 1.0).unwrap()).unwrap();
        assert_eq!(values(&one.data), values(&c.data));
        let zero = interpolate(&c, &r, &InterpolationField::constant(&c, 0.0).unwrap()).unwrap();
        assert_eq!(values(&zero.data), values(&r.data));
        let half = interpolate(&c, &r, &InterpolationField::constant(&c, 0.5).unwrap()).unwrap();
        for ((h, a), b) in values(&half.data).iter().zip(values(&c.data)).zip(values(&r.data)) {
            assert!((h - 0.5 * (a + b)).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_field_is_a_contract_violation() {
        let (c, r) = (feat(3, 2, 2, 0), feat(3, 2, 2, 1));
        let bad = InterpolationField::constant(&c, 1.5).unwrap();
        assert!(matches!(interpolate(&c, &r, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let p = block(3, 0);
        assert!(matches!(attention_map(&feat(3, 2, 2, 0), &feat(4, 2, 2, 0), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn blocked_attention_matches_full_matrix() {
        let p = block(4, 2);
        let (c, s) = (feat(4, 5, 6, 0), feat(4, 4, 7, 1));
        let a = attention_map(&c, &s, &p).unwrap();
        let full = values(&rearrange_style(&s, &a, &p).unwrap().data);
        // 3 rows per block with 28 style columns in f64
        let tiny = rearrange_blocked(&c, &s, &p, 3 * 28 * 8).unwrap();
        for (x, y) in full.iter().zip(values(&tiny.data)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pipeline_shapes_and_forced_identity() {
        let blocks: Vec<_> = (0..3).map(|i| block(4, i)).collect();
        let (c, s) = (feat(4, 3, 5, 0), feat(4, 6, 2, 1));
        let outs = pama_forward(&c, &s, &blocks, &AmaOptions::default()).unwrap();
        assert_eq!(outs.len(), 3);
        assert!(outs.iter().all(|o| o.data.dims() == c.data.dims()));

        let forced = AmaOptions {
            force_w: Some(1.0),
            ..Default::default()
        };
        let outs = pama_forward(&c, &s, &blocks, &forced).unwrap();
        assert_eq!(values(&outs[2].data), values(&c.data));
        assert!(pama_forward(&c, &s, &[], &forced).is_err());
    }
}
