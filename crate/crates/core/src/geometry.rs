//! Pre-alignment of the adverse image to the clear one: dense warp
//! application, valid-region extraction, largest interior rectangle and
//! consistent cropping.
//!
//! Warp coordinates are absolute positions in the sampled image using the
//! pixel-center convention: pixel `(i, j)` covers `[j, j+1) x [i, i+1)` and its
//! center sits at `(j + 0.5, i + 0.5)`. The exact pair `(0, 0)` is reserved as
//! the invalid sentinel; it is a pixel corner, never a center, so integer and
//! identity warps never collide with it.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Image;

/// Dense `(h, w, 2)` field of `(x, y)` sample coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    coords: Array3<f32>,
}

impl WarpField {
    pub fn new(coords: Array3<f32>) -> Result<Self> {
        if coords.dim().2 != 2 {
            return Err(Error::shape(format!(
                "warp field must be (h, w, 2), got {:?}",
                coords.dim()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("warp field".into()));
        }
        Ok(Self { coords })
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Self::from_shift(h, w, 0, 0)
    }

    /// Output pixel `(i, j)` samples input pixel `(i + dy, j + dx)`; samples
    /// that fall outside the frame carry the sentinel.
    pub fn from_shift(h: usize, w: usize, dy: i64, dx: i64) -> Self {
        let mut coords = Array3::zeros((h, w, 2));
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = (i as i64 + dy, j as i64 + dx);
                if (0..h as i64).contains(&si) && (0..w as i64).contains(&sj) {
                    coords[[i, j, 0]] = sj as f32 + 0.5;
                    coords[[i, j, 1]] = si as f32 + 0.5;
                }
            }
        }
        Self { coords }
    }

    pub fn coords(&self) -> &Array3<f32> {
        &self.coords
    }

    pub fn height(&self) -> usize {
        self.coords.dim().0
    }

    pub fn width(&self) -> usize {
        self.coords.dim().1
    }

    fn sample_point(&self, i: usize, j: usize) -> Option<(f64, f64)> {
        let x = self.coords[[i, j, 0]];
        let y = self.coords[[i, j, 1]];
        if x == 0.0 && y == 0.0 {
            return None;
        }
        let (x, y) = (x as f64, y as f64);
        let in_frame = (0.0..self.width() as f64).contains(&x) && (0.0..self.height() as f64).contains(&y);
        in_frame.then_some((x, y))
    }

    /// Pixels whose sample is neither the sentinel nor out of frame.
    pub fn valid_mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.height(), self.width()), |(i, j)| {
            self.sample_point(i, j).is_some()
        })
    }
}

/// Axis-aligned rectangle in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self::new(0, 0, h, w)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height >= 1 && self.width >= 1 && self.top + self.height <= h && self.left + self.width <= w
    }
}

/// Source, aligned target, source labels and confidence sharing one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub source: Image,
    pub target: Image,
    pub labels: Array2<u8>,
    pub confidence: Array2<f64>,
}

impl AlignedPair {
    pub fn new(source: Image, target: Image, labels: Array2<u8>, confidence: Array2<f64>) -> Result<Self> {
        let hw = labels.dim();
        let ok = source.dim().1 == hw.0
            && source.dim().2 == hw.1
            && target.dim() == source.dim()
            && confidence.dim() == hw;
        if !ok {
            return Err(Error::shape(format!(
                "aligned pair members disagree: source {:?}, target {:?}, labels {:?}, confidence {:?}",
                source.dim(),
                target.dim(),
                hw,
                confidence.dim()
            )));
        }
        Ok(Self {
            source,
            target,
            labels,
            confidence,
        })
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }
}

/// Bilinear resampling of `image` at the warp coordinates.
///
/// Returns the warped image and its validity mask; invalid pixels are zero.
/// Samples within half a pixel of the border clamp to the edge pixels.
pub fn apply_warp(image: &Image, warp: &WarpField) -> Result<(Image, Array2<bool>)> {
    let (c, h, w) = image.dim();
    if (h, w) != (warp.height(), warp.width()) {
        return Err(Error::shape(format!(
            "image {:?} and warp {:?} differ in size",
            (h, w),
            (warp.height(), warp.width())
        )));
    }
    let mut out = Array3::zeros((c, h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            let Some((x, y)) = warp.sample_point(i, j) else {
                continue;
            };
            valid[[i, j]] = true;
            let u = (x - 0.5).clamp(0.0, (w - 1) as f64);
            let v = (y - 0.5).clamp(0.0, (h - 1) as f64);
            let (j0, i0) = (u.floor() as usize, v.floor() as usize);
            let (j1, i1) = ((j0 + 1).min(w - 1), (i0 + 1).min(h - 1));
            let (fu, fv) = (u - j0 as f64, v - i0 as f64);
            for ch in 0..c {
                let top = image[[ch, i0, j0]] * (1.0 - fu) + image[[ch, i0, j1]] * fu;
                let bottom = image[[ch, i1, j0]] * (1.0 - fu) + image[[ch, i1, j1]] * fu;
                out[[ch, i, j]] = top * (1.0 - fv) + bottom * fv;
            }
        }
    }
    Ok((out, valid))
}

/// Maximal-area rectangle containing only valid pixels.
///
/// Row-by-row histogram of column heights; for every bar the maximal span
/// with heights at least as tall is found with two monotone stacks, which
/// enumerates every rectangle that cannot grow in any direction. Ties go to
/// the smallest top, then the smallest left, then the largest width.
pub fn largest_interior_rectangle(valid: &Array2<bool>) -> Result<Rect> {
    let (h, w) = valid.dim();
    let mut heights = vec![0usize; w];
    let mut left = vec![0usize; w];
    let mut right = vec![0usize; w];
    let mut stack: Vec<usize> = Vec::with_capacity(w);
    let mut best: Option<Rect> = None;

    for (row, line) in valid.axis_iter(Axis(0)).enumerate() {
        for (hgt, &v) in heights.iter_mut().zip(line.iter()) {
            *hgt = if v { *hgt + 1 } else { 0 };
        }
        // left[k]: first column of the run with heights >= heights[k]
        stack.clear();
        for k in 0..w {
            while stack.last().is_some_and(|&t| heights[t] >= heights[k]) {
                stack.pop();
            }
            left[k] = stack.last().map_or(0, |&t| t + 1);
            stack.push(k);
        }
        // right[k]: one past the last column of that run
        stack.clear();
        for k in (0..w).rev() {
            while stack.last().is_some_and(|&t| heights[t] >= heights[k]) {
                stack.pop();
            }
            right[k] = stack.last().copied().unwrap_or(w);
            stack.push(k);
        }
        for k in 0..w {
            if heights[k] == 0 {
                continue;
            }
            let cand = Rect::new(row + 1 - heights[k], left[k], heights[k], right[k] - left[k]);
            if best.is_none_or(|b| better(&cand, &b)) {
                best = Some(cand);
            }
        }
    }
    best.ok_or_else(|| Error::invalid(format!("mask {h}x{w} has no valid pixel")))
}

fn better(a: &Rect, b: &Rect) -> bool {
    (a.area(), std::cmp::Reverse(a.top), std::cmp::Reverse(a.left), a.width)
        > (b.area(), std::cmp::Reverse(b.top), std::cmp::Reverse(b.left), b.width)
}

/// Crops all four members of a pair to `rect`.
pub fn crop_triple(
    source: &Image,
    warped_target: &Image,
    labels: &Array2<u8>,
    confidence: &Array2<f64>,
    rect: Rect,
) -> Result<AlignedPair> {
    let (h, w) = labels.dim();
    if !rect.fits(h, w) {
        return Err(Error::invalid(format!("{rect:?} exceeds a {h}x{w} frame")));
    }
    let rows = rect.top..rect.top + rect.height;
    let cols = rect.left..rect.left + rect.width;
    AlignedPair::new(
        source.slice(s![.., rows.clone(), cols.clone()]).to_owned(),
        warped_target.slice(s![.., rows.clone(), cols.clone()]).to_owned(),
        labels.slice(s![rows.clone(), cols.clone()]).to_owned(),
        confidence.slice(s![rows, cols]).to_owned(),
    )
}

/// Thresholds deciding whether an aligned pair is usable for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterRule {
    pub min_valid_fraction: f64,
    pub min_rect_side: usize,
}

impl Default for FilterRule {
    fn default() -> Self {
        Self {
            min_valid_fraction: 0.3,
            min_rect_side: 32,
        }
    }
}

pub fn filter_pair(valid: ArrayView2<bool>, min_valid_fraction: f64, min_rect_side: usize) -> bool {
    if valid.is_empty() {
        return false;
    }
    let count = valid.iter().filter(|&&v| v).count();
    if (count as f64) < min_valid_fraction * valid.len() as f64 {
        return false;
    }
    match largest_interior_rectangle(&valid.to_owned()) {
        Ok(r) => r.height >= min_rect_side && r.width >= min_rect_side,
        Err(_) => false,
    }
}
