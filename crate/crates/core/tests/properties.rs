use candle_core::{DType, Device, Tensor};
use pama::ama::{ama_block_detailed, attention_map, rearrange_style, AmaBlockParams, AmaOptions};
use pama::checkpoint::{Checkpoint, CheckpointMeta};
use pama::codec::{mean_variance_normalize, CodecProfile, FeatureMap, ProfileName, Tap};
use pama::image::Image;
use pama::losses::{
    build_color_histogram, histogram_loss, remd_loss, sample_positions, self_similarity_loss, HistogramGeometry,
    SelfSimilarityNorm, Subsampling,
};
use pama::model::{weight_heatmap, PamaModel, HEATMAP_HIGH, HEATMAP_LOW};
use pama::params::ParamStore;
use pama::verify::{remd_oracle, self_similarity_oracle};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn feature(data: Vec<f64>, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(Tensor::from_vec(data, (1, c, h, w), &Device::Cpu).unwrap(), Tap::Relu4_1).unwrap()
}

fn points(f: &FeatureMap) -> Vec<Vec<f64>> {
    let (_, c, h, w) = f.data.dims4().unwrap();
    let flat: Vec<f64> = f.data.flatten_all().unwrap().to_vec1().unwrap();
    (0..h * w).map(|j| (0..c).map(|i| flat[i * h * w + j]).collect()).collect()
}

fn block(channels: usize, seed: u64) -> AmaBlockParams {
    let mut store = ParamStore::new(DType::F64);
    AmaBlockParams::init(&mut store, "b", channels, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    AmaBlockParams::from_store(&store, "b").unwrap()
}

fn max_abs(t: &Tensor) -> f64 {
    t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// `(c, h, w, values)` with at least two positions and no flat channel.
fn feature_strategy(min_c: usize, max_c: usize, max_side: usize) -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (min_c..=max_c, 1..=max_side, 2..=max_side)
        .prop_flat_map(|(c, h, w)| (Just(c), Just(h), Just(w), prop::collection::vec(-3.0f64..3.0, c * h * w)))
        .prop_filter("flat channel", |(_, h, w, v)| {
            v.chunks(h * w).all(|ch| {
                let m = ch.iter().sum::<f64>() / ch.len() as f64;
                ch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ch.len() as f64 > 0.1
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_is_idempotent((c, h, w, v) in feature_strategy(1, 6, 5)) {
        let f = feature(v, c, h, w);
        let once = mean_variance_normalize(&f).unwrap();
        let twice = mean_variance_normalize(&once).unwrap();
        // the epsilon inside the variance makes the second pass not quite exact
        prop_assert!(max_abs(&(&once.data - &twice.data).unwrap()) < 1e-4);
    }

    #[test]
    fn attention_rows_are_distributions(
        (c, h, w, v) in feature_strategy(1, 6, 4),
        sh in 1usize..4, sw in 2usize..4, seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs: Vec<f64> = (0..c * sh * sw).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
        let a = attention_map(&feature(v, c, h, w), &feature(fs, c, sh, sw), &block(c, seed)).unwrap();
        prop_assert_eq!(a.matrix.dims(), &[1, h * w, sh * sw]);
        let sums: Vec<f64> = a.matrix.sum(2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(a.matrix.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|x| *x >= 0.0));
    }

    /// Style positions form an unordered set: mirroring the style map leaves
    /// the rearranged feature unchanged.
    #[test]
    fn rearrangement_ignores_style_layout((c, h, w, v) in feature_strategy(1, 5, 4), seed in 0u64..1000) {
        let params = block(c, seed);
        let content = feature(v.clone(), c, h, w);
        let style = feature(v.iter().map(|x| x.sin() * 2.0).collect(), c, h, w);
        let mirrored = FeatureMap::new(style.data.flip(&[3]).unwrap(), Tap::Relu4_1).unwrap();
        let a = rearrange_style(&style, &attention_map(&content, &style, &params).unwrap(), &params).unwrap();
        let b = rearrange_style(&mirrored, &attention_map(&content, &mirrored, &params).unwrap(), &params).unwrap();
        prop_assert!(max_abs(&(&a.data - &b.data).unwrap()) < 1e-9);
    }

    #[test]
    fn interpolation_endpoints((c, h, w, v) in feature_strategy(1, 5, 4), seed in 0u64..1000) {
        let params = block(c, seed);
        let content = feature(v.clone(), c, h, w);
        let style = feature(v.iter().rev().cloned().collect(), c, h, w);
        for (weight, expect_content) in [(1.0, true), (0.0, false)] {
            let opts = AmaOptions { force_w: Some(weight), ..Default::default() };
            let out = ama_block_detailed(&content, &style, &params, &opts).unwrap();
            let target = if expect_content { &content.data } else { &out.rearranged.data };
            prop_assert_eq!(max_abs(&(&out.stylized.data - target).unwrap()), 0.0);
        }
    }

    #[test]
    fn remd_matches_oracle((c, h, w, v) in feature_strategy(2, 6, 3), shift in -1.0f64..1.0) {
        let x = feature(v.clone(), c, h, w);
        let y = feature(v.iter().map(|a| (a + shift).cos()).collect(), c, h, w);
        let away = |p: &Vec<f64>| p.iter().map(|a| a * a).sum::<f64>() > 1e-2;
        prop_assume!(points(&x).iter().all(away) && points(&y).iter().all(away));
        let got: f64 = remd_loss(&x, &y, &mut Subsampling::exact()).unwrap().to_scalar().unwrap();
        prop_assert!((got - remd_oracle(&points(&x), &points(&y))).abs() < 1e-6);
    }

    #[test]
    fn self_similarity_matches_oracle((c, h, w, v) in feature_strategy(2, 6, 3), cols in any::<bool>()) {
        let norm = if cols { SelfSimilarityNorm::ContentColumns } else { SelfSimilarityNorm::Rows };
        let x = feature(v.clone(), c, h, w);
        let y = feature(v.iter().map(|a| a * a - 1.0).collect(), c, h, w);
        // cosine distance is undefined at the origin
        let away = |p: &Vec<f64>| p.iter().map(|a| a * a).sum::<f64>() > 1e-2;
        prop_assume!(points(&x).iter().all(away) && points(&y).iter().all(away));
        // the production rows carry a 1e-8 stabilizer; keep row sums well above it
        let spread = |f: &FeatureMap| {
            let p = points(f);
            p.iter().all(|a| p.iter().map(|b| remd_oracle(&[a.clone()], &[b.clone()])).sum::<f64>() > 1e-1)
        };
        prop_assume!(spread(&x) && spread(&y));
        let got: f64 = self_similarity_loss(&x, &y, norm, &mut Subsampling::exact()).unwrap().to_scalar().unwrap();
        prop_assert!((got - self_similarity_oracle(&points(&x), &points(&y), norm)).abs() < 1e-6);
    }

    #[test]
    fn histograms_are_normalized_and_distances_bounded(
        a in prop::collection::vec(0.0f64..=1.0, 3 * 36),
        b in prop::collection::vec(0.0f64..=1.0, 3 * 36),
    ) {
        let g = HistogramGeometry { bins: 16, ..Default::default() };
        let t = |v: Vec<f64>| Tensor::from_vec(v, (1, 3, 6, 6), &Device::Cpu).unwrap();
        let ha = build_color_histogram(&t(a), g).unwrap();
        let hb = build_color_histogram(&t(b), g).unwrap();
        let total: f64 = ha.tensor.sum_all().unwrap().to_scalar().unwrap();
        prop_assert!((total - 1.0).abs() < 1e-9);
        let ab: f64 = histogram_loss(&ha, &hb).unwrap().to_scalar().unwrap();
        let ba: f64 = histogram_loss(&hb, &ha).unwrap().to_scalar().unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn heatmap_geometry_and_colormap(
        (h, w, weights) in (1usize..5, 1usize..5).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(0.0f32..=1.0, h * w))
        }),
        scale in 1usize..9,
    ) {
        let img = weight_heatmap(&weights, h, w, scale).unwrap();
        prop_assert_eq!((img.height(), img.width()), (h * scale, w * scale));
        for r in 0..img.height() {
            for c in 0..img.width() {
                let x = weights[(r / scale) * w + c / scale];
                let px = img.pixel(r, c);
                for k in 0..3 {
                    let expect = HEATMAP_LOW[k] + x * (HEATMAP_HIGH[k] - HEATMAP_LOW[k]);
                    prop_assert!((px[k] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sampled_positions_are_sorted_and_distinct(positions in 1usize..5000, limit in 1usize..2000, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_positions(positions, limit, Some(&mut rng)) {
            None => prop_assert!(positions <= limit),
            Some(idx) => {
                prop_assert_eq!(idx.len(), limit);
                prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
                prop_assert!((*idx.last().unwrap() as usize) < positions);
            }
        }
    }

    #[test]
    fn short_edge_resize_hits_the_target(h in 1usize..2000, w in 1usize..2000, edge in 1usize..1000) {
        let (rh, rw) = Image::short_edge_size(h, w, edge);
        prop_assert_eq!(rh.min(rw), edge);
        let expect = (h.max(w) as f64 * edge as f64 / h.min(w) as f64).round() as usize;
        prop_assert_eq!(rh.max(rw), expect);
    }

    #[test]
    fn checkpoints_round_trip(
        arrays in prop::collection::btree_map("[a-z][a-z0-9_.]{0,12}", prop::collection::vec(-1e6f32..1e6, 1..20), 1..6),
        step in any::<u64>(),
        flip in any::<prop::sample::Index>(),
    ) {
        let mut meta = CheckpointMeta::new(ProfileName::Tiny, 2);
        meta.step = step;
        let mut ck = Checkpoint::new(meta);
        for (name, v) in &arrays {
            ck.tensors.insert(name.clone(), Tensor::new(v.as_slice(), &Device::Cpu).unwrap());
        }
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.meta.step, step);
        for (name, v) in &arrays {
            prop_assert_eq!(&back.get(name).unwrap().to_vec1::<f32>().unwrap(), v);
        }
        let mut broken = bytes.clone();
        broken[flip.index(bytes.len())] ^= 0x40;
        prop_assert!(Checkpoint::from_bytes(&broken).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn images_round_trip_through_png(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::from_fn(h, w, |_, _| std::array::from_fn(|_| rand::Rng::gen_range(&mut rng, 0.0..=1.0))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        prop_assert_eq!((back.height(), back.width()), (h, w));
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    /// The content grid governs the output size for any pair of sizes.
    #[test]
    fn stylized_output_has_content_size(ch in 16usize..48, cw in 16usize..48, sh in 16usize..40, sw in 16usize..40) {
        let mut store = ParamStore::new(DType::F32);
        PamaModel::init(CodecProfile::TINY, 3, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let model = PamaModel::from_store(CodecProfile::TINY, 3, &store).unwrap();
        let content = Image::from_fn(ch, cw, |r, c| [r as f32 / ch as f32, c as f32 / cw as f32, 0.3]).unwrap();
        let style = Image::from_fn(sh, sw, |r, c| [((r + c) % 2) as f32, 0.5, 0.1]).unwrap();
        let out = model.stylize(&content, &style).unwrap();
        prop_assert_eq!((out.height(), out.width()), (ch, cw));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
