//! Redundancy-reduction loss kernels.
//!
//! Two embedding batches `(b, p)` are normalized per dimension across the
//! batch, cross-correlated into a `p x p` matrix `C`, and penalized by
//! `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2`. Every function here is
//! pure; the `*_with_grad` variants also return the analytic gradient so the
//! trainer can back-propagate without an autodiff engine.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default stabilizer added to the batch variance before the square root.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Balance between cross-entropy and the redundancy-reduction term.
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// A batch of embeddings, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Array2<f64>,
    domain: Domain,
}

impl Embedding {
    /// Wraps `values` after checking `b >= 2` and finiteness.
    pub fn new(values: Array2<f64>, domain: Domain) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::invalid(format!(
                "embedding batch must hold at least 2 rows, got {}",
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self { values, domain })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn batch(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Square matrix of per-dimension correlations between two normalized batches.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelation(Array2<f64>);

impl CrossCorrelation {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::shape(format!(
                "cross-correlation must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cross-correlation".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Off-diagonal weight.
    pub lambda_bt: f64,
    /// Weight of the redundancy term in the combined objective.
    pub alpha: f64,
    /// Normalization stabilizer.
    pub epsilon: f64,
}

impl LossWeights {
    pub fn new(lambda_bt: f64, alpha: f64, epsilon: f64) -> Result<Self> {
        let w = Self {
            lambda_bt,
            alpha,
            epsilon,
        };
        w.validate()?;
        Ok(w)
    }

    /// Weights for embedding width `p`: `lambda = 1/p`, default alpha and epsilon.
    pub fn for_dim(p: usize) -> Result<Self> {
        Self::new(default_lambda(p)?, DEFAULT_ALPHA, DEFAULT_EPSILON)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_bt > 0.0 && self.lambda_bt.is_finite()) {
            return Err(Error::invalid(format!("lambda_bt must be > 0, got {}", self.lambda_bt)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Centers each column and divides by `sqrt(var + epsilon)` (population variance).
pub fn batch_normalize(z: &Embedding, epsilon: f64) -> Result<Embedding> {
    check_epsilon(epsilon)?;
    let (n, _) = normalize_columns(z.values.view(), epsilon);
    Ok(Embedding {
        values: n,
        domain: z.domain,
    })
}

/// `C[i][j] = (1/b) * sum_k a[k][i] * b[k][j]`.
pub fn cross_correlation(z_a: &Embedding, z_b: &Embedding) -> Result<CrossCorrelation> {
    check_same_shape(z_a.values.view(), z_b.values.view())?;
    Ok(CrossCorrelation(correlate(z_a.values.view(), z_b.values.view())))
}

pub fn bt_loss(c: &CrossCorrelation, lambda_bt: f64) -> Result<f64> {
    if !(lambda_bt > 0.0) {
        return Err(Error::invalid(format!("lambda_bt must be > 0, got {lambda_bt}")));
    }
    Ok(loss_of(c.values(), lambda_bt))
}

/// Gradient of [`bt_loss`] with respect to every entry of `C`.
pub fn bt_loss_grad(c: &CrossCorrelation, lambda_bt: f64) -> Array2<f64> {
    let mut g = c.values().mapv(|v| 2.0 * lambda_bt * v);
    for i in 0..c.dim() {
        g[[i, i]] = -2.0 * (1.0 - c.values()[[i, i]]);
    }
    g
}

/// `1/p`, the ratio of diagonal to off-diagonal entries of a `p x p` matrix.
pub fn default_lambda(p: usize) -> Result<f64> {
    if p < 2 {
        return Err(Error::invalid(format!("embedding width must be >= 2, got {p}")));
    }
    Ok(1.0 / p as f64)
}

pub fn combined_loss(l_ce: f64, l_bt: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [("l_ce", l_ce), ("l_bt", l_bt), ("alpha", alpha)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
        if v < 0.0 {
            return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
        }
    }
    Ok(l_ce + alpha * l_bt)
}

/// Normalize both batches, correlate, and evaluate the loss.
pub fn bt_loss_from_raw(z_a: &Embedding, z_b: &Embedding, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    check_same_shape(z_a.values.view(), z_b.values.view())?;
    let (na, _) = normalize_columns(z_a.values.view(), weights.epsilon);
    let (nb, _) = normalize_columns(z_b.values.view(), weights.epsilon);
    Ok(loss_of(&correlate(na.view(), nb.view()), weights.lambda_bt))
}

/// Loss value together with its gradient with respect to both raw batches.
#[derive(Debug, Clone)]
pub struct BtLossGrad {
    pub loss: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

pub fn bt_loss_from_raw_with_grad(
    z_a: &Embedding,
    z_b: &Embedding,
    weights: &LossWeights,
) -> Result<BtLossGrad> {
    weights.validate()?;
    check_same_shape(z_a.values.view(), z_b.values.view())?;
    Ok(raw_loss_and_grad(
        z_a.values.view(),
        z_b.values.view(),
        weights.lambda_bt,
        weights.epsilon,
    ))
}

pub(crate) fn raw_loss_and_grad(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    lambda_bt: f64,
    epsilon: f64,
) -> BtLossGrad {
    let batch = a.nrows() as f64;
    let (na, sa) = normalize_columns(a, epsilon);
    let (nb, sb) = normalize_columns(b, epsilon);
    let c = CrossCorrelation(correlate(na.view(), nb.view()));
    let loss = loss_of(c.values(), lambda_bt);
    let gc = bt_loss_grad(&c, lambda_bt);
    // dC/dna[k,i] = nb[k,j]/b, dC/dnb[k,j] = na[k,i]/b
    let gna = nb.dot(&gc.t()) / batch;
    let gnb = na.dot(&gc) / batch;
    BtLossGrad {
        loss,
        grad_a: normalize_backward(gna.view(), na.view(), sa.view()),
        grad_b: normalize_backward(gnb.view(), nb.view(), sb.view()),
    }
}

/// Returns the normalized matrix and the per-column `sqrt(var + eps)`.
pub(crate) fn normalize_columns(z: ArrayView2<f64>, epsilon: f64) -> (Array2<f64>, Array1<f64>) {
    let b = z.nrows() as f64;
    let mean = z.sum_axis(Axis(0)) / b;
    let centered = &z - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / b;
    let std = var.mapv(|v| (v + epsilon).sqrt());
    (centered / &std, std)
}

/// Back-propagates `g = dL/dn` through [`normalize_columns`].
///
/// With `n = (x - mean) / s` and `s = sqrt(var + eps)`:
/// `dx = (g - mean(g) - n * mean(g * n)) / s`.
pub(crate) fn normalize_backward(
    g: ArrayView2<f64>,
    n: ArrayView2<f64>,
    std: ndarray::ArrayView1<f64>,
) -> Array2<f64> {
    let b = g.nrows() as f64;
    let mean_g = g.sum_axis(Axis(0)) / b;
    let mean_gn = (&g * &n).sum_axis(Axis(0)) / b;
    let mut dx = &g - &mean_g;
    dx -= &(&n * &mean_gn);
    dx / &std
}

fn correlate(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    a.t().dot(&b) / a.nrows() as f64
}

fn loss_of(c: &Array2<f64>, lambda_bt: f64) -> f64 {
    let mut on = 0.0;
    let mut off = 0.0;
    for ((i, j), &v) in c.indexed_iter() {
        if i == j {
            on += (1.0 - v) * (1.0 - v);
        } else {
            off += v * v;
        }
    }
    on + lambda_bt * off
}

fn check_same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "embedding batches differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn emb(v: Array2<f64>) -> Embedding {
        Embedding::new(v, Domain::Source).unwrap()
    }

    #[test]
    fn normalize_two_rows() {
        let z = emb(array![[1.0], [3.0]]);
        let n = batch_normalize(&z, 1e-300).unwrap();
        assert!((n.values()[[0, 0]] + 1.0).abs() < 1e-12);
        assert!((n.values()[[1, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_normalizes_to_zero() {
        let z = emb(array![[5.0], [5.0], [5.0]]);
        let n = batch_normalize(&z, DEFAULT_EPSILON).unwrap();
        assert!(n.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_singleton_batch_and_nan() {
        assert!(Embedding::new(array![[1.0, 2.0]], Domain::Source).is_err());
        assert!(Embedding::new(array![[1.0], [f64::NAN]], Domain::Target).is_err());
        let z = emb(array![[1.0], [2.0]]);
        assert!(batch_normalize(&z, 0.0).is_err());
    }

    #[test]
    fn orthogonal_columns_give_identity() {
        let z = emb(array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]);
        let c = cross_correlation(&z, &z).unwrap();
        assert_eq!(c.values(), &Array2::<f64>::eye(2));
        assert_eq!(bt_loss(&c, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn perfectly_correlated_columns() {
        let z = emb(array![[1.0, 1.0], [-1.0, -1.0]]);
        let c = cross_correlation(&z, &z).unwrap();
        assert_eq!(c.values(), &Array2::from_elem((2, 2), 1.0));
        assert_eq!(bt_loss(&c, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn raw_linear_columns() {
        let z = emb(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let w = LossWeights::new(0.5, 0.1, 1e-12).unwrap();
        let l = bt_loss_from_raw(&z, &z, &w).unwrap();
        assert!((l - 1.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn shape_errors() {
        let a = emb(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = emb(array![[1.0], [3.0]]);
        assert!(cross_correlation(&a, &b).is_err());
        assert!(CrossCorrelation::new(Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn lambda_rule() {
        assert_eq!(default_lambda(256).unwrap(), 0.00390625);
        assert_eq!(default_lambda(2).unwrap(), 0.5);
        assert_eq!(default_lambda(512).unwrap(), 1.0 / 512.0);
        assert!(default_lambda(1).is_err());
    }

    #[test]
    fn combined() {
        assert_eq!(combined_loss(2.0, 5.0, 0.1).unwrap(), 2.5);
        assert_eq!(combined_loss(1.25, 7.0, 0.0).unwrap(), 1.25);
        assert_eq!(combined_loss(0.0, 3.0, 1.0).unwrap(), 3.0);
        assert!(combined_loss(-1.0, 3.0, 1.0).is_err());
        assert!(combined_loss(1.0, f64::NAN, 1.0).is_err());
    }
}
