//! Evaluation artifacts: scan-score histograms and embedding drift between
//! baseline and steered generations.
//!
//! Embeddings are the denoiser's last hidden activations for the clean image
//! at a fixed mid-schedule timestep under the null condition. A two-component
//! PCA basis fitted on reference images gives the plane used for drift arrows;
//! similarity claims are checked in the full feature space.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diffusion::{from_unit_image, Denoiser, DiffusionError};
use crate::numerics::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("extractor has no fitted basis")]
    Unfitted,
    #[error("need at least 3 samples to fit, got {0}")]
    TooFewSamples(usize),
    #[error("feature matrix has rank below 2")]
    RankDeficient,
    #[error("feature length {got}, expected {expected}")]
    FeatureLength { got: usize, expected: usize },
    #[error("{baseline} baseline vs {steered} steered items")]
    LengthMismatch { baseline: usize, steered: usize },
    #[error("histogram edges must be at least two strictly increasing finite values")]
    BadEdges,
    #[error("score {score} outside histogram range [{lo}, {hi}]; extend the edges")]
    OutOfRange { score: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Mean plus the two leading principal directions, stored in f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    pub directions: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, feature: &[f32]) -> Result<[f64; 2], MetricsError> {
        if feature.len() != self.dim() {
            return Err(MetricsError::FeatureLength { got: feature.len(), expected: self.dim() });
        }
        let mut out = [0.0; 2];
        for (o, dir) in out.iter_mut().zip(&self.directions) {
            *o = feature
                .iter()
                .zip(&self.mean)
                .zip(dir)
                .map(|((&f, m), d)| (f64::from(f) - m) * d)
                .sum();
        }
        Ok(out)
    }
}

/// Top-2 PCA of the rows of `features` via the symmetric eigendecomposition
/// of their covariance. Each direction is signed so that its largest-magnitude
/// component is positive.
pub fn fit_pca(features: &[Vec<f32>]) -> Result<PcaBasis, MetricsError> {
    let n = features.len();
    if n < 3 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(MetricsError::FeatureLength { got: bad.len(), expected: d });
    }
    let mut mean = vec![0.0f64; d];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| f64::from(features[i][j]) - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 <= l1 * 1e-12 {
        return Err(MetricsError::RankDeficient);
    }
    let direction = |k: usize| -> Vec<f64> {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = v
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, x)| x)
            .unwrap_or(1.0);
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    Ok(PcaBasis {
        mean,
        directions: [direction(order[0]), direction(order[1])],
        variances: [l1, l2],
    })
}

/// Feature extractor over a trained denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingExtractor {
    pub timestep: usize,
    pub basis: Option<PcaBasis>,
}

impl EmbeddingExtractor {
    /// Evaluates at `t = T/2`.
    pub fn new(steps: usize) -> Self {
        Self { timestep: steps / 2, basis: None }
    }

    /// Last hidden activations for a `[0, 1]` image. Needs no basis.
    pub fn features(&self, model: &Denoiser, image: &Tensor) -> Result<Vec<f32>, MetricsError> {
        let x = from_unit_image(image)?;
        let null = model.config().null_condition();
        let (_, cache) = model.forward(x.data(), &[self.timestep], &[null])?;
        Ok(cache.penultimate().to_vec())
    }

    pub fn fit(&mut self, model: &Denoiser, images: &[Tensor]) -> Result<(), MetricsError> {
        let feats = images
            .iter()
            .map(|im| self.features(model, im))
            .collect::<Result<Vec<_>, _>>()?;
        self.basis = Some(fit_pca(&feats)?);
        Ok(())
    }

    pub fn basis(&self) -> Result<&PcaBasis, MetricsError> {
        self.basis.as_ref().ok_or(MetricsError::Unfitted)
    }

    pub fn embed(&self, model: &Denoiser, image: &Tensor) -> Result<Vec<f32>, MetricsError> {
        self.basis()?;
        self.features(model, image)
    }
}

fn cosine64(a: &[f32], b: &[f32]) -> f64 {
    if a == b {
        return 1.0;
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Euclidean distance in f64.
pub fn feature_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftPair {
    pub baseline: [f64; 2],
    pub steered: [f64; 2],
    pub arrow: [f64; 2],
    /// Full-dimensional cosine similarity of the two features.
    pub cosine: f64,
    /// Full-dimensional Euclidean distance of the two features.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftReport {
    pub pairs: Vec<DriftPair>,
    pub mean_displacement: f64,
    pub mean_cosine: f64,
    pub mean_distance: f64,
}

pub fn drift(
    baseline: &[Vec<f32>],
    steered: &[Vec<f32>],
    basis: &PcaBasis,
) -> Result<DriftReport, MetricsError> {
    if baseline.len() != steered.len() {
        return Err(MetricsError::LengthMismatch { baseline: baseline.len(), steered: steered.len() });
    }
    let mut pairs = Vec::with_capacity(baseline.len());
    for (b, s) in baseline.iter().zip(steered) {
        if b.len() != s.len() {
            return Err(MetricsError::FeatureLength { got: s.len(), expected: b.len() });
        }
        let pb = basis.project(b)?;
        let ps = basis.project(s)?;
        pairs.push(DriftPair {
            baseline: pb,
            steered: ps,
            arrow: [ps[0] - pb[0], ps[1] - pb[1]],
            cosine: cosine64(b, s),
            distance: feature_distance(b, s),
        });
    }
    // An empty report describes no drift at all.
    if pairs.is_empty() {
        return Ok(DriftReport { pairs, mean_displacement: 0.0, mean_cosine: 1.0, mean_distance: 0.0 });
    }
    let n = pairs.len() as f64;
    Ok(DriftReport {
        mean_displacement: pairs.iter().map(|p| p.arrow[0].hypot(p.arrow[1])).sum::<f64>() / n,
        mean_cosine: pairs.iter().map(|p| p.cosine).sum::<f64>() / n,
        mean_distance: pairs.iter().map(|p| p.distance).sum::<f64>() / n,
        pairs,
    })
}

/// Mean feature distance over all pairs whose labels differ. `None` when no
/// such pair exists.
pub fn mean_cross_label_distance(items: &[(usize, Vec<f32>)]) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (ca, fa)) in items.iter().enumerate() {
        for (cb, fb) in &items[i + 1..] {
            if ca != cb {
                total += feature_distance(fa, fb);
                count += 1;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub threshold: f64,
    /// Samples strictly below the threshold.
    pub below_threshold: u64,
}

impl DistanceHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// `n` equal-width bins over `[lo, hi]`.
pub fn uniform_edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Bins are half-open `[e_i, e_{i+1})` except the last, which is closed.
pub fn histogram(scores: &[f64], edges: &[f64], threshold: f64) -> Result<DistanceHistogram, MetricsError> {
    if edges.len() < 2 || edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricsError::BadEdges);
    }
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    let mut counts = vec![0u64; edges.len() - 1];
    for &s in scores {
        if !(lo..=hi).contains(&s) {
            return Err(MetricsError::OutOfRange { score: s, lo, hi });
        }
        let bin = edges.partition_point(|&e| e <= s).saturating_sub(1).min(counts.len() - 1);
        counts[bin] += 1;
    }
    Ok(DistanceHistogram {
        edges: edges.to_vec(),
        counts,
        threshold,
        below_threshold: scores.iter().filter(|&&s| s < threshold).count() as u64,
    })
}

/// `lower,upper,count` rows.
pub fn histogram_csv(h: &DistanceHistogram) -> String {
    let mut out = String::from("lower,upper,count\n");
    for (w, c) in h.edges.windows(2).zip(&h.counts) {
        let _ = writeln!(out, "{},{},{}", w[0], w[1], c);
    }
    out
}

/// One row of the drift CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub condition: usize,
    pub seed: u64,
    pub pair: DriftPair,
    pub tiled_l2: f32,
}

pub fn drift_csv(rows: &[DriftRow]) -> String {
    let mut out = String::from("condition,seed,base_x,base_y,steer_x,steer_y,cosine,tiled_l2\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.condition,
            r.seed,
            r.pair.baseline[0],
            r.pair.baseline[1],
            r.pair.steered[0],
            r.pair.steered[1],
            r.pair.cosine,
            r.tiled_l2
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserConfig;
    use crate::numerics::RngState;

    fn model() -> Denoiser {
        let cfg = DenoiserConfig {
            image_len: 16,
            hidden: 12,
            layers: 3,
            time_dim: 4,
            cond_dim: 2,
            cond_count: 2,
            skip: true,
        };
        Denoiser::new(cfg, &mut RngState::new(5)).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        Tensor::new(vec![4, 4], (0..16).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn embedding_shape_and_stability() {
        let m = model();
        let mut ex = EmbeddingExtractor::new(100);
        assert_eq!(ex.timestep, 50);
        assert!(matches!(ex.embed(&m, &image(1)), Err(MetricsError::Unfitted)));
        ex.fit(&m, &[image(1), image(2), image(3), image(4)]).unwrap();
        let a = ex.embed(&m, &image(1)).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, ex.embed(&m, &image(1)).unwrap());
        assert!(feature_distance(&a, &ex.embed(&m, &image(2)).unwrap()) > 0.0);

        let json = serde_json::to_string(&ex).unwrap();
        let back: EmbeddingExtractor = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ex);
        assert_eq!(back.embed(&m, &image(3)).unwrap(), ex.embed(&m, &image(3)).unwrap());
    }

    #[test]
    fn identical_images_cannot_be_fitted() {
        let m = model();
        let mut ex = EmbeddingExtractor::new(100);
        let im = image(1);
        assert!(matches!(ex.fit(&m, &[im.clone(), im.clone(), im]), Err(MetricsError::RankDeficient)));
        assert!(matches!(ex.fit(&m, &[image(1), image(2)]), Err(MetricsError::TooFewSamples(2))));
    }

    #[test]
    fn pca_orders_and_signs_directions() {
        let feats: Vec<Vec<f32>> = (0..7)
            .map(|i| {
                let t = i as f32 - 3.0;
                vec![-3.0 * t, 0.5 * (t * t - 4.0), 0.0]
            })
            .collect();
        let b = fit_pca(&feats).unwrap();
        assert!(b.variances[0] >= b.variances[1]);
        for dir in &b.directions {
            let n: f64 = dir.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
            let pivot = dir.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
            assert!(pivot > 0.0);
        }
        let dot: f64 = b.directions[0].iter().zip(&b.directions[1]).map(|(a, c)| a * c).sum();
        assert!(dot.abs() < 1e-12);
        assert!((b.directions[0][0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn drift_of_identical_sets_is_zero() {
        let feats: Vec<Vec<f32>> = (0..4).map(|i| vec![i as f32, 1.0 - i as f32, 2.0 * i as f32 * i as f32]).collect();
        let b = fit_pca(&feats).unwrap();
        let r = drift(&feats, &feats, &b).unwrap();
        assert!(r.pairs.iter().all(|p| p.arrow == [0.0, 0.0] && p.cosine == 1.0 && p.distance == 0.0));
        assert_eq!(r.mean_displacement, 0.0);
        assert!(matches!(drift(&feats, &feats[1..], &b), Err(MetricsError::LengthMismatch { .. })));
        let back: DriftReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn histogram_basics() {
        let h = histogram(&[0.35], &uniform_edges(0.0, 1.0, 10), 0.1).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.counts[3], 1);
        let h = histogram(&[0.0, 1.0, 0.05], &[0.0, 0.5, 1.0], 0.1).unwrap();
        assert_eq!(h.counts, vec![2, 1]);
        assert_eq!(h.below_threshold, 2);
        assert!(matches!(histogram(&[1.5], &[0.0, 1.0], 0.1), Err(MetricsError::OutOfRange { .. })));
        assert!(matches!(histogram(&[0.5], &[1.0, 1.0], 0.1), Err(MetricsError::BadEdges)));
        assert!(matches!(histogram(&[0.5], &[0.0], 0.1), Err(MetricsError::BadEdges)));
    }

    #[test]
    fn csv_headers() {
        let h = histogram(&[0.2], &[0.0, 0.5, 1.0], 0.1).unwrap();
        assert_eq!(histogram_csv(&h), "lower,upper,count\n0,0.5,1\n0.5,1,0\n");
        assert!(drift_csv(&[]).starts_with("condition,seed,base_x"));
    }

    #[test]
    fn cross_label_distance() {
        let items = vec![(0, vec![0.0, 0.0]), (0, vec![10.0, 0.0]), (1, vec![3.0, 4.0])];
        let d = mean_cross_label_distance(&items).unwrap();
        let want = (5.0 + 65f64.sqrt()) / 2.0;
        assert!((d - want).abs() < 1e-12);
        assert!(mean_cross_label_distance(&items[..2]).is_none());
    }
}
