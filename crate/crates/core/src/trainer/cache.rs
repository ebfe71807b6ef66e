use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use crate::barlow::{raw_loss_and_grad, Domain, LossWeights};
use crate::error::{Error, Result};

/// Rolling per-domain store of recent embeddings.
///
/// Rows are kept oldest first; pushing past capacity evicts the oldest rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    capacity: usize,
    dim: usize,
    source: VecDeque<Vec<f64>>,
    target: VecDeque<Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity < 2 || dim == 0 {
            return Err(Error::invalid(format!(
                "cache needs capacity >= 2 and dim > 0, got {capacity} and {dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            source: VecDeque::with_capacity(capacity),
            target: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self, domain: Domain) -> usize {
        self.slot(domain).len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty() && self.target.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.source.len() == self.capacity && self.target.len() == self.capacity
    }

    pub fn clear(&mut self) {
        self.source.clear();
        self.target.clear();
    }

    pub fn push(&mut self, domain: Domain, rows: ArrayView2<f64>) -> Result<()> {
        if rows.ncols() != self.dim {
            return Err(Error::shape(format!(
                "cache holds width {}, got {}",
                self.dim,
                rows.ncols()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cached embedding".into()));
        }
        let cap = self.capacity;
        let slot = self.slot_mut(domain);
        for row in rows.rows() {
            if slot.len() == cap {
                slot.pop_front();
            }
            slot.push_back(row.to_vec());
        }
        Ok(())
    }

    /// Cached rows of one domain stacked oldest first, `(len, dim)`.
    pub fn stacked(&self, domain: Domain) -> Array2<f64> {
        let slot = self.slot(domain);
        Array2::from_shape_fn((slot.len(), self.dim), |(i, j)| slot[i][j])
    }

    fn slot(&self, domain: Domain) -> &VecDeque<Vec<f64>> {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    fn slot_mut(&mut self, domain: Domain) -> &mut VecDeque<Vec<f64>> {
        match domain {
            Domain::Source => &mut self.source,
            Domain::Target => &mut self.target,
        }
    }

    fn check_ready(&self) -> Result<()> {
        if self.source.len() != self.target.len() {
            return Err(Error::invalid(format!(
                "unbalanced cache: {} source rows, {} target rows",
                self.source.len(),
                self.target.len()
            )));
        }
        if !self.is_full() {
            return Err(Error::invalid(format!(
                "cache holds {} of {} rows per domain",
                self.source.len(),
                self.capacity
            )));
        }
        Ok(())
    }
}

/// Barlow Twins loss over the full cache, treated as one batch.
pub fn bt_loss_cached(cache: &EmbeddingCache, weights: &LossWeights) -> Result<f64> {
    Ok(bt_cached_with_grad(cache, weights, 0)?.0)
}

/// Loss over the cache plus the gradient for its `newest` most recent rows
/// per domain; older rows are constants.
pub(crate) fn bt_cached_with_grad(
    cache: &EmbeddingCache,
    weights: &LossWeights,
    newest: usize,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    weights.validate()?;
    cache.check_ready()?;
    if newest > cache.capacity {
        return Err(Error::invalid(format!(
            "{newest} current rows exceed cache capacity {}",
            cache.capacity
        )));
    }
    let a = cache.stacked(Domain::Source);
    let b = cache.stacked(Domain::Target);
    let g = raw_loss_and_grad(a.view(), b.view(), weights.lambda_bt, weights.epsilon);
    let from = cache.capacity - newest;
    Ok((
        g.loss,
        g.grad_a.slice(ndarray::s![from.., ..]).to_owned(),
        g.grad_b.slice(ndarray::s![from.., ..]).to_owned(),
    ))
}
