//! Array aliases and label containers shared across the pipeline.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Label value excluded from losses and confusion counts.
pub const IGNORE_INDEX: u8 = 255;

/// A single image, channels first: `(c, h, w)`, values in `[0, 1]`.
pub type Image = Array3<f64>;

/// Per-pixel class ids for a batch, `(b, h, w)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    labels: Array3<u8>,
    num_classes: usize,
}

impl SegmentationMap {
    /// Every entry must be a class id `< num_classes` or [`IGNORE_INDEX`].
    pub fn new(labels: Array3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > IGNORE_INDEX as usize {
            return Err(Error::invalid(format!("unsupported class count {num_classes}")));
        }
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l != IGNORE_INDEX && l as usize >= num_classes)
        {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn from_single(labels: Array2<u8>, num_classes: usize) -> Result<Self> {
        let (h, w) = labels.dim();
        Self::new(labels.into_shape_with_order((1, h, w)).expect("contiguous"), num_classes)
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}
