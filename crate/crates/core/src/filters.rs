//! Content filters. A filter inspects a generated image and returns a
//! [`FilterVerdict`]; the guard pipeline regenerates whenever any verdict is
//! triggered. The only shipped filter is [`MemorizationFilter`], which flags
//! images that replicate a reference-corpus image under the tiled ℓ2 metric.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ImageRecord};
use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("tile {tile} does not fit a {height}x{width} image")]
    TileTooLarge { tile: usize, height: usize, width: usize },
    #[error("invalid filter parameters: {0}")]
    Params(String),
    #[error("reference corpus is empty")]
    EmptyCorpus,
    #[error("expected a rank-2 image, got shape {0:?}")]
    NotAnImage(Vec<usize>),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub reference: String,
    pub distance: f32,
}

/// Outcome of one filter on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub filter: String,
    pub triggered: bool,
    pub score: f32,
    pub threshold: f32,
    /// Sorted ascending by distance; non-empty whenever `triggered`.
    pub matches: Vec<Match>,
}

/// A verdict-producing hook run on every generated image.
pub trait ContentFilter: Send + Sync {
    fn name(&self) -> &str;

    fn scan(&self, image: &Tensor) -> Result<FilterVerdict, FilterError>;

    /// Reference images this filter can name in [`Match::reference`]. Filters
    /// that do not compare against references return `None`.
    fn reference(&self, _id: &str) -> Option<&ImageRecord> {
        None
    }
}

fn image_dims(t: &Tensor) -> Result<(usize, usize), FilterError> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        other => Err(FilterError::NotAnImage(other.to_vec())),
    }
}

/// Tile origins along one axis: `0, stride, 2·stride, …` with a final tile
/// clamped to end at the image edge.
pub fn tile_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut pos = 0;
    while pos + tile < extent {
        pos = (pos + stride).min(extent - tile);
        out.push(pos);
    }
    out
}

/// Maximum over aligned `tile × tile` windows of the per-window normalised
/// ℓ2 distance. Small means every region of `a` closely matches `b`.
pub fn tiled_l2(a: &Tensor, b: &Tensor, tile: usize, stride: usize) -> Result<f32, FilterError> {
    a.check_same_shape(b)?;
    let (h, w) = image_dims(a)?;
    if tile == 0 || tile > h || tile > w {
        return Err(FilterError::TileTooLarge {
            tile,
            height: h,
            width: w,
        });
    }
    if stride == 0 || stride > tile {
        return Err(FilterError::Params(format!(
            "stride {stride} must be in 1..={tile}"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let rows = tile_origins(h, tile, stride);
    let cols = tile_origins(w, tile, stride);
    let n = (tile * tile) as f64;
    let mut worst = 0.0f32;
    for &y in &rows {
        for &x in &cols {
            let mut ss = 0.0f64;
            for r in y..y + tile {
                let row = r * w;
                for (&p, &q) in ad[row + x..row + x + tile].iter().zip(&bd[row + x..row + x + tile]) {
                    let d = f64::from(p) - f64::from(q);
                    ss += d * d;
                }
            }
            worst = worst.max((ss / n).sqrt() as f32);
        }
    }
    Ok(worst)
}

/// Flags generations whose tiled ℓ2 distance to some corpus image is below
/// `threshold`.
#[derive(Debug, Clone)]
pub struct MemorizationFilter {
    tile: usize,
    stride: usize,
    threshold: f32,
    corpus: Arc<Corpus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorizationParams {
    pub tile: usize,
    pub stride: usize,
    pub threshold: f32,
}

impl MemorizationParams {
    /// Half-edge tiles at half-tile stride, threshold 0.1.
    pub fn for_image(height: usize, width: usize) -> Self {
        let tile = (height.min(width) / 2).max(1);
        Self {
            tile,
            stride: (tile / 2).max(1),
            threshold: 0.1,
        }
    }
}

impl MemorizationFilter {
    pub const NAME: &'static str = "memorization";

    pub fn new(params: MemorizationParams, corpus: Arc<Corpus>) -> Result<Self, FilterError> {
        let MemorizationParams {
            tile,
            stride,
            threshold,
        } = params;
        if corpus.is_empty() {
            return Err(FilterError::EmptyCorpus);
        }
        let edge = corpus.height().min(corpus.width());
        if tile == 0 || tile > edge {
            return Err(FilterError::TileTooLarge {
                tile,
                height: corpus.height(),
                width: corpus.width(),
            });
        }
        if stride == 0 || stride > tile {
            return Err(FilterError::Params(format!(
                "stride {stride} must be in 1..={tile}"
            )));
        }
        if !(threshold > 0.0) {
            return Err(FilterError::Params(format!("threshold {threshold} must be positive")));
        }
        Ok(Self {
            tile,
            stride,
            threshold,
            corpus,
        })
    }

    pub fn params(&self) -> MemorizationParams {
        MemorizationParams {
            tile: self.tile,
            stride: self.stride,
            threshold: self.threshold,
        }
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    /// Distance from `image` to every corpus record, in corpus order.
    pub fn distances(&self, image: &Tensor) -> Result<Vec<(String, f32)>, FilterError> {
        self.corpus
            .records()
            .iter()
            .map(|r| Ok((r.id.clone(), tiled_l2(image, &r.pixels, self.tile, self.stride)?)))
            .collect()
    }
}

impl ContentFilter for MemorizationFilter {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn scan(&self, image: &Tensor) -> Result<FilterVerdict, FilterError> {
        let dists = self.distances(image)?;
        let score = dists
            .iter()
            .map(|(_, d)| *d)
            .fold(f32::INFINITY, f32::min);
        let mut matches: Vec<Match> = dists
            .into_iter()
            .filter(|(_, d)| *d < self.threshold)
            .map(|(reference, distance)| Match { reference, distance })
            .collect();
        matches.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then_with(|| a.reference.cmp(&b.reference))
        });
        Ok(FilterVerdict {
            filter: Self::NAME.to_string(),
            triggered: score < self.threshold,
            score,
            threshold: self.threshold,
            matches,
        })
    }

    fn reference(&self, id: &str) -> Option<&ImageRecord> {
        self.corpus.get(id)
    }
}
