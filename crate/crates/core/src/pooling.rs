//! The pooling operator that reduces encoder feature maps `(b, d, m, n)` to
//! one vector per image before projection.
//!
//! All weighted variants share one formula, `sum(Y * W) / (sum(W) + eps)`,
//! with the weight map broadcast over channels:
//!
//! | variant    | weights `W`                         |
//! |------------|-------------------------------------|
//! | `avg`      | uniform (plain mean, no `eps`)      |
//! | `segm`     | moving-object exclusion mask `B`    |
//! | `conf`     | warp confidence `P`                 |
//! | `segconf`  | `B * P`                             |

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{SegmentationMap, IGNORE_INDEX};

/// Default stabilizer for the weighted pools.
pub const POOL_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Avg,
    Segm,
    Conf,
    Segconf,
}

impl PoolingKind {
    pub fn uses_mask(self) -> bool {
        matches!(self, PoolingKind::Segm | PoolingKind::Segconf)
    }

    pub fn uses_confidence(self) -> bool {
        matches!(self, PoolingKind::Conf | PoolingKind::Segconf)
    }

    pub fn label(self) -> &'static str {
        match self {
            PoolingKind::Avg => "Avg.",
            PoolingKind::Segm => "Segm.",
            PoolingKind::Conf => "Conf.",
            PoolingKind::Segconf => "SegConf.",
        }
    }
}

/// Encoder output `(b, d, m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Array4<f64>);

impl FeatureMap {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        let (_, _, m, n) = values.dim();
        if m == 0 || n == 0 {
            return Err(Error::shape("feature map needs a non-empty spatial grid"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array4<f64> {
        self.0
    }

    fn spatial(&self) -> (usize, usize, usize) {
        let (b, _, m, n) = self.0.dim();
        (b, m, n)
    }
}

/// One vector per image, `(b, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature(Array2<f64>);

impl PooledFeature {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array2<f64> {
        self.0
    }
}

/// `(b, m, n)` map with 0 on moving objects and 1 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask(Array3<f64>);

impl BinaryMask {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("binary mask entries must be exactly 0 or 1"));
        }
        Ok(Self(values))
    }

    pub fn ones(dim: (usize, usize, usize)) -> Self {
        Self(Array3::ones(dim))
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }
}

/// `(b, m, n)` warp-confidence weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(Array3<f64>);

impl ConfidenceMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("confidence entries must lie in [0, 1]"));
        }
        Ok(Self(values))
    }

    pub fn ones(dim: (usize, usize, usize)) -> Self {
        Self(Array3::ones(dim))
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }
}

pub fn average_pool(y: &FeatureMap) -> PooledFeature {
    let (_, _, m, n) = y.0.dim();
    let sum = y.0.sum_axis(Axis(3)).sum_axis(Axis(2));
    PooledFeature(sum / (m * n) as f64)
}

/// Block-majority downsampling of `s` to `grid`, then 0 on `mobile_classes`.
///
/// Ties in a block go to the smallest class id. Blocks made only of ignore
/// labels count as static.
pub fn mask_from_segmentation(
    s: &SegmentationMap,
    mobile_classes: &[u8],
    grid: (usize, usize),
) -> Result<BinaryMask> {
    if let Some(&bad) = mobile_classes
        .iter()
        .find(|&&c| c as usize >= s.num_classes())
    {
        return Err(Error::invalid(format!(
            "mobile class {bad} unknown for {} classes",
            s.num_classes()
        )));
    }
    let labels = majority_downsample(s.labels(), s.num_classes(), grid)?;
    Ok(BinaryMask(labels.mapv(|l| {
        if l != IGNORE_INDEX && mobile_classes.contains(&l) {
            0.0
        } else {
            1.0
        }
    })))
}

/// Block majority vote of a label batch onto a coarser grid.
pub fn majority_downsample(
    labels: &Array3<u8>,
    num_classes: usize,
    grid: (usize, usize),
) -> Result<Array3<u8>> {
    let (b, h, w) = labels.dim();
    let (bh, bw) = block_size((h, w), grid)?;
    let mut out = Array3::from_elem((b, grid.0, grid.1), IGNORE_INDEX);
    let mut votes = vec![0usize; num_classes];
    for k in 0..b {
        for i in 0..grid.0 {
            for j in 0..grid.1 {
                votes.iter_mut().for_each(|v| *v = 0);
                let block = labels.slice(s![k, i * bh..(i + 1) * bh, j * bw..(j + 1) * bw]);
                for &l in block.iter() {
                    if l != IGNORE_INDEX {
                        votes[l as usize] += 1;
                    }
                }
                let (best, &count) = votes
                    .iter()
                    .enumerate()
                    .rev()
                    .max_by_key(|(_, c)| **c)
                    .expect("num_classes > 0");
                if count > 0 {
                    out[[k, i, j]] = best as u8;
                }
            }
        }
    }
    Ok(out)
}

/// Block mean of a full-resolution confidence batch onto `grid`.
pub fn downsample_confidence(conf: &Array3<f64>, grid: (usize, usize)) -> Result<ConfidenceMap> {
    let (b, h, w) = conf.dim();
    let (bh, bw) = block_size((h, w), grid)?;
    let area = (bh * bw) as f64;
    let mut out = Array3::zeros((b, grid.0, grid.1));
    for ((k, i, j), v) in out.indexed_iter_mut() {
        *v = conf
            .slice(s![k, i * bh..(i + 1) * bh, j * bw..(j + 1) * bw])
            .sum()
            / area;
    }
    ConfidenceMap::new(out.mapv(|v: f64| v.clamp(0.0, 1.0)))
}

pub fn masked_average_pool(y: &FeatureMap, mask: &BinaryMask, epsilon: f64) -> Result<PooledFeature> {
    check_weights(y, mask.0.view())?;
    Ok(PooledFeature(weighted_pool(y.0.view(), mask.0.view(), epsilon)))
}

pub fn confidence_average_pool(
    y: &FeatureMap,
    p: &ConfidenceMap,
    epsilon: f64,
) -> Result<PooledFeature> {
    check_weights(y, p.0.view())?;
    Ok(PooledFeature(weighted_pool(y.0.view(), p.0.view(), epsilon)))
}

pub fn segconf_average_pool(
    y: &FeatureMap,
    mask: &BinaryMask,
    p: &ConfidenceMap,
    epsilon: f64,
) -> Result<PooledFeature> {
    check_weights(y, mask.0.view())?;
    check_weights(y, p.0.view())?;
    let w = &mask.0 * &p.0;
    Ok(PooledFeature(weighted_pool(y.0.view(), w.view(), epsilon)))
}

/// Weights for `kind`, or `None` when the plain mean applies.
///
/// A missing mask or confidence falls back to neutral weights, so `Segm`
/// without a mask degrades to `Avg` and `Segconf` to `Conf`.
pub fn pool_weights(
    kind: PoolingKind,
    mask: Option<&BinaryMask>,
    confidence: Option<&ConfidenceMap>,
) -> Option<Array3<f64>> {
    let mask = mask.filter(|_| kind.uses_mask()).map(|m| &m.0);
    let conf = confidence.filter(|_| kind.uses_confidence()).map(|c| &c.0);
    match (mask, conf) {
        (None, None) => None,
        (Some(m), None) => Some(m.clone()),
        (None, Some(c)) => Some(c.clone()),
        (Some(m), Some(c)) => Some(m * c),
    }
}

/// `sum(Y * W) / (sum(W) + eps)` per sample and channel.
pub fn weighted_pool(y: ndarray::ArrayView4<f64>, w: ArrayView3<f64>, epsilon: f64) -> Array2<f64> {
    let (b, d, _, _) = y.dim();
    let mut out = Array2::zeros((b, d));
    for k in 0..b {
        let wk = w.index_axis(Axis(0), k);
        let denom = wk.sum() + epsilon;
        for c in 0..d {
            let yc = y.slice(s![k, c, .., ..]);
            out[[k, c]] = Zip::from(&yc).and(&wk).fold(0.0, |acc, &a, &b| acc + a * b) / denom;
        }
    }
    out
}

/// Gradient of [`weighted_pool`] (or the plain mean when `w` is `None`)
/// with respect to the feature map.
pub fn pool_backward(
    grad: &Array2<f64>,
    w: Option<ArrayView3<f64>>,
    epsilon: f64,
    dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (b, d, m, n) = dim;
    let mut out = Array4::zeros(dim);
    for k in 0..b {
        match w {
            Some(w) => {
                let wk = w.index_axis(Axis(0), k);
                let denom = wk.sum() + epsilon;
                for c in 0..d {
                    let g = grad[[k, c]] / denom;
                    out.slice_mut(s![k, c, .., ..]).assign(&wk.mapv(|v| v * g));
                }
            }
            None => {
                for c in 0..d {
                    out.slice_mut(s![k, c, .., ..]).fill(grad[[k, c]] / (m * n) as f64);
                }
            }
        }
    }
    out
}

/// Forward pass shared by the trainer: pooled values for optional weights.
pub fn pool_forward(y: ndarray::ArrayView4<f64>, w: Option<ArrayView3<f64>>, epsilon: f64) -> Array2<f64> {
    match w {
        Some(w) => weighted_pool(y, w, epsilon),
        None => {
            let (_, _, m, n) = y.dim();
            y.sum_axis(Axis(3)).sum_axis(Axis(2)) / (m * n) as f64
        }
    }
}

fn block_size(full: (usize, usize), grid: (usize, usize)) -> Result<(usize, usize)> {
    if grid.0 == 0 || grid.1 == 0 || full.0 % grid.0 != 0 || full.1 % grid.1 != 0 {
        return Err(Error::shape(format!(
            "grid {grid:?} does not evenly divide resolution {full:?}"
        )));
    }
    Ok((full.0 / grid.0, full.1 / grid.1))
}

fn check_weights(y: &FeatureMap, w: ArrayView3<f64>) -> Result<()> {
    if y.spatial() != w.dim() {
        return Err(Error::shape(format!(
            "weights {:?} do not match feature grid {:?}",
            w.dim(),
            y.spatial()
        )));
    }
    Ok(())
}
