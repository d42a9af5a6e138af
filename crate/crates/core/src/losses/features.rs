//! Feature-space losses: structure self-similarity, relaxed earth mover
//! distance and moment matching.

use candle_core::{DType, Tensor, D};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::FeatureMap;
use crate::error::{bail_shape, Error, Result};

/// Guards the cosine denominator against zero vectors.
pub const COSINE_EPS: f64 = 1e-8;
/// Added under the square root of vector norms so zero vectors have a
/// finite gradient.
const NORM_FLOOR: f64 = 1e-24;
/// Guards the row sums of a self-distance matrix.
const ROW_SUM_EPS: f64 = 1e-8;

/// Pairwise cosine distances `[B, P, Q]`, entries in `[0, 2]`.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub matrix: Tensor,
}

/// `[B, C, P]` and `[B, C, Q]` column vectors to `1 - cos(x_i, y_j)`.
pub fn cosine_distance_matrix(x: &Tensor, y: &Tensor) -> Result<DistanceMatrix> {
    let (bx, cx, _) = x.dims3()?;
    let (by, cy, _) = y.dims3()?;
    if bx != by || cx != cy {
        bail_shape!("cosine distance between {:?} and {:?}", x.dims(), y.dims());
    }
    let norm = |t: &Tensor| -> Result<Tensor> { Ok((t.sqr()?.sum_keepdim(1)? + NORM_FLOOR)?.sqrt()?) };
    let nx = norm(x)?; // [B, 1, P]
    let ny = norm(y)?; // [B, 1, Q]
    let dots = x.transpose(1, 2)?.matmul(y)?; // [B, P, Q]
    let denom = (nx.transpose(1, 2)?.matmul(&ny)? + COSINE_EPS)?;
    Ok(DistanceMatrix {
        matrix: (1.0 - dots.div(&denom)?)?,
    })
}

/// How the two self-distance matrices are normalized before comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfSimilarityNorm {
    /// Both matrices divided by their row sums.
    #[default]
    Rows,
    /// Content matrix divided by column sums, stylized matrix by row sums.
    ContentColumns,
}

fn flat(f: &FeatureMap) -> Result<Tensor> {
    let (b, c, h, w) = f.data.dims4()?;
    Ok(f.data.reshape((b, c, h * w))?)
}

/// Random subset of at most `limit` spatial positions, shared across the
/// batch. `None` keeps every position.
pub fn sample_positions(positions: usize, limit: usize, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<u32>> {
    match rng {
        Some(rng) if positions > limit && limit > 0 => {
            let mut idx: Vec<u32> = sample(rng, positions, limit).into_iter().map(|i| i as u32).collect();
            idx.sort_unstable();
            Some(idx)
        }
        _ => None,
    }
}

fn select(x: &Tensor, idx: &Option<Vec<u32>>) -> Result<Tensor> {
    match idx {
        None => Ok(x.clone()),
        Some(idx) => {
            let t = Tensor::from_slice(idx, idx.len(), x.device())?;
            Ok(x.index_select(&t, 2)?)
        }
    }
}

/// Positions drawn for one loss evaluation.
#[derive(Debug, Default)]
pub struct Subsampling<'a> {
    pub limit: usize,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Subsampling<'_> {
    pub fn exact() -> Self {
        Self { limit: 0, rng: None }
    }

    fn draw(&mut self, positions: usize) -> Option<Vec<u32>> {
        sample_positions(positions, self.limit, self.rng.as_deref_mut())
    }
}

/// Mean absolute difference between the normalized self-distance matrices
/// of `content` and `stylized`, scaled by `1/P`, averaged over the batch.
pub fn self_similarity_loss(
    content: &FeatureMap,
    stylized: &FeatureMap,
    norm: SelfSimilarityNorm,
    sub: &mut Subsampling<'_>,
) -> Result<Tensor> {
    if content.data.dims() != stylized.data.dims() {
        bail_shape!(
            "self-similarity needs equal shapes, got {:?} and {:?}",
            content.data.dims(),
            stylized.data.dims()
        );
    }
    let idx = sub.draw(content.positions());
    let xc = select(&flat(content)?, &idx)?;
    let xs = select(&flat(stylized)?, &idx)?;
    let p = xc.dim(2)?;
    if p < 2 {
        return Err(Error::Degenerate(format!("self-similarity needs at least 2 positions, got {p}")));
    }
    let dc = cosine_distance_matrix(&xc, &xc)?.matrix;
    let ds = cosine_distance_matrix(&xs, &xs)?.matrix;
    let by_rows = |d: &Tensor| -> Result<Tensor> { Ok(d.broadcast_div(&(d.sum_keepdim(2)? + ROW_SUM_EPS)?)?) };
    let nc = match norm {
        SelfSimilarityNorm::Rows => by_rows(&dc)?,
        SelfSimilarityNorm::ContentColumns => dc.broadcast_div(&(dc.sum_keepdim(1)? + ROW_SUM_EPS)?)?,
    };
    let ns = by_rows(&ds)?;
    let per_sample = (nc - ns)?.abs()?.sum((1, 2))?.affine(1.0 / p as f64, 0.0)?;
    Ok(per_sample.mean_all()?)
}

/// Relaxed earth mover distance between the stylized and style point sets.
pub fn remd_loss(stylized: &FeatureMap, style: &FeatureMap, sub: &mut Subsampling<'_>) -> Result<Tensor> {
    let xs = select(&flat(stylized)?, &sub.draw(stylized.positions()))?;
    let ys = select(&flat(style)?, &sub.draw(style.positions()))?;
    let cost = cosine_distance_matrix(&xs, &ys)?.matrix; // [B, P, Q]
    // mean over style points of their closest stylized point, and the converse
    let per_style = cost.min(1)?.mean(D::Minus1)?;
    let per_stylized = cost.min(2)?.mean(D::Minus1)?;
    Ok(per_style.maximum(&per_stylized)?.mean_all()?)
}

/// Mean `[B, C]` and population covariance `[B, C, C]` over positions.
pub fn feature_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, p) = x.dims3()?;
    let mean = x.mean_keepdim(2)?;
    let centered = x.broadcast_sub(&mean)?;
    let cov = centered.matmul(&centered.transpose(1, 2)?)?.affine(1.0 / p as f64, 0.0)?;
    Ok((mean.squeeze(2)?, cov))
}

/// `|mu_cs - mu_s|_1 + |Sigma_cs - Sigma_s|_1`, averaged over the batch.
pub fn moment_loss(stylized: &FeatureMap, style: &FeatureMap, sub: &mut Subsampling<'_>) -> Result<Tensor> {
    if stylized.channels() != style.channels() {
        bail_shape!("moment loss channel mismatch: {} vs {}", stylized.channels(), style.channels());
    }
    let xs = select(&flat(stylized)?, &sub.draw(stylized.positions()))?;
    let ys = select(&flat(style)?, &sub.draw(style.positions()))?;
    let (mu_x, cov_x) = feature_moments(&xs)?;
    let (mu_y, cov_y) = feature_moments(&ys)?;
    let mean_term = (mu_x - mu_y)?.abs()?.sum(1)?;
    let cov_term = (cov_x - cov_y)?.abs()?.sum((1, 2))?;
    Ok((mean_term + cov_term)?.mean_all()?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Tap;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};

    fn fm(data: Vec<f64>, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(Tensor::from_vec(data, (1, c, h, w), &Device::Cpu).unwrap(), Tap::Relu3_1).unwrap()
    }

    fn random_fm(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fm((0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(), c, h, w)
    }

    fn cols(vectors: &[&[f64]]) -> Tensor {
        let c = vectors[0].len();
        let mut data = vec![0.0; c * vectors.len()];
        for (j, v) in vectors.iter().enumerate() {
            for (i, x) in v.iter().enumerate() {
                data[i * vectors.len() + j] = *x;
            }
        }
        Tensor::from_vec(data, (1, c, vectors.len()), &Device::Cpu).unwrap()
    }

    fn entries(d: &DistanceMatrix) -> Vec<f64> {
        d.matrix.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn cosine_examples() {
        let v = cols(&[&[0.3, -2.0, 1.0]]);
        assert!(entries(&cosine_distance_matrix(&v, &v).unwrap())[0].abs() < 1e-6);
        let e = cols(&[&[1.0, 0.0]]);
        let f = cols(&[&[0.0, 1.0]]);
        assert!((entries(&cosine_distance_matrix(&e, &f).unwrap())[0] - 1.0).abs() < 1e-12);
        let neg = cols(&[&[-0.3, 2.0, -1.0]]);
        assert!((entries(&cosine_distance_matrix(&v, &neg).unwrap())[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_has_unit_distance_and_finite_gradient() {
        let z = candle_core::Var::from_tensor(&cols(&[&[0.0, 0.0], &[1.0, 2.0]])).unwrap();
        let d = cosine_distance_matrix(z.as_tensor(), z.as_tensor()).unwrap();
        let m = entries(&d);
        assert!((m[0] - 1.0).abs() < 1e-12);
        let g = d.matrix.sum_all().unwrap().backward().unwrap();
        let gv: Vec<f64> = g.get(z.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(gv.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn self_similarity_identity_and_scale_invariance() {
        let a = random_fm(4, 3, 3, 1);
        let zero = scalar(&self_similarity_loss(&a, &a, SelfSimilarityNorm::Rows, &mut Subsampling::exact()).unwrap()).unwrap();
        assert_eq!(zero, 0.0);

        let b = random_fm(4, 3, 3, 2);
        let base = scalar(&self_similarity_loss(&a, &b, SelfSimilarityNorm::Rows, &mut Subsampling::exact()).unwrap()).unwrap();
        // rescale each position of b by its own positive factor
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scales: Vec<f64> = (0..9).map(|_| rng.gen_range(0.1..10.0)).collect();
        let bd: Vec<f64> = b.data.flatten_all().unwrap().to_vec1().unwrap();
        let scaled = fm(bd.iter().enumerate().map(|(i, v)| v * scales[i % 9]).collect(), 4, 3, 3);
        let after = scalar(&self_similarity_loss(&a, &scaled, SelfSimilarityNorm::Rows, &mut Subsampling::exact()).unwrap()).unwrap();
        assert!((base - after).abs() < 1e-7, "{base} vs {after}");
    }

    #[test]
    fn self_similarity_rejects_single_position() {
        let a = random_fm(4, 1, 1, 1);
        let err = self_similarity_loss(&a, &a, SelfSimilarityNorm::Rows, &mut Subsampling::exact()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn remd_examples() {
        let a = random_fm(3, 2, 2, 4);
        assert!(scalar(&remd_loss(&a, &a, &mut Subsampling::exact()).unwrap()).unwrap().abs() < 1e-6);
        let e1 = fm(vec![1.0, 0.0], 2, 1, 1);
        let e2 = fm(vec![0.0, 1.0], 2, 1, 1);
        assert!((scalar(&remd_loss(&e1, &e2, &mut Subsampling::exact()).unwrap()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn moment_examples() {
        let a = random_fm(3, 2, 3, 5);
        assert_eq!(scalar(&moment_loss(&a, &a, &mut Subsampling::exact()).unwrap()).unwrap(), 0.0);

        // per-channel shift leaves the covariance untouched
        let delta = [0.5, -1.25, 2.0];
        let ad: Vec<f64> = a.data.flatten_all().unwrap().to_vec1().unwrap();
        let shifted = fm(ad.iter().enumerate().map(|(i, v)| v + delta[i / 6]).collect(), 3, 2, 3);
        let got = scalar(&moment_loss(&shifted, &a, &mut Subsampling::exact()).unwrap()).unwrap();
        assert!((got - 3.75).abs() < 1e-12, "{got}");

        // single positions: covariance is zero, only the mean gap remains
        let p = fm(vec![1.0, 2.0, 3.0], 3, 1, 1);
        let q = fm(vec![0.0, 4.0, 3.5], 3, 1, 1);
        let got = scalar(&moment_loss(&p, &q, &mut Subsampling::exact()).unwrap()).unwrap();
        assert!((got - 3.5).abs() < 1e-12);
    }

    #[test]
    fn covariance_is_symmetric_with_nonnegative_diagonal() {
        let a = random_fm(5, 3, 4, 6);
        let (_, cov) = feature_moments(&flat(&a).unwrap()).unwrap();
        let m: Vec<Vec<f64>> = cov.squeeze(0).unwrap().to_vec2().unwrap();
        for i in 0..5 {
            assert!(m[i][i] >= 0.0);
            for j in 0..5 {
                assert!((m[i][j] - m[j][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn subsampling_caps_positions_and_is_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = sample_positions(5000, 1024, Some(&mut r1)).unwrap();
        let b = sample_positions(5000, 1024, Some(&mut r2)).unwrap();
        assert_eq!(a.len(), 1024);
        assert_eq!(a, b);
        assert!(sample_positions(100, 1024, Some(&mut r1)).is_none());
        assert!(sample_positions(5000, 1024, None).is_none());
    }
}
