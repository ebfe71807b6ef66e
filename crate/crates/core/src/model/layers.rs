//! Layers with hand-written backward passes. Every `forward` returns the
//! cache its `backward` needs; gradients accumulate into a [`Gradients`]
//! buffer shared by the whole model.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Gradients, ParamGroup, ParamStore, Slot};
use crate::barlow::{normalize_backward, normalize_columns};
use crate::types::IGNORE_INDEX;

/// He-style fan-in initialization.
fn he_init<R: Rng>(store: &mut ParamStore, slot: Slot, fan_in: usize, rng: &mut R) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    for v in store.get_mut(slot) {
        *v = normal.sample(rng);
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Slot,
    bias: Slot,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct Conv2dCache {
    /// Per-sample im2col matrices `(cin*k*k, oh*ow)`.
    cols: Vec<Array2<f64>>,
    input_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.alloc(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            group,
        );
        let bias = store.alloc(format!("{name}.bias"), &[out_channels], group);
        he_init(store, weight, in_channels * kernel * kernel, rng);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn weight_matrix<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.out_channels, self.in_channels * self.kernel * self.kernel),
            store.get(self.weight),
        )
        .expect("weight slot matches shape")
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView4<f64>) -> (Array4<f64>, Conv2dCache) {
        let (b, c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let (oh, ow) = self.output_size(h, w);
        let wm = self.weight_matrix(store);
        let bias = store.get(self.bias);
        let mut out = Array4::zeros((b, self.out_channels, oh, ow));
        let mut cols = Vec::with_capacity(b);
        for k in 0..b {
            let col = self.im2col(x.index_axis(Axis(0), k), oh, ow);
            let mut y = wm.dot(&col);
            for (row, &bv) in y.rows_mut().into_iter().zip(bias) {
                row.into_iter().for_each(|v| *v += bv);
            }
            out.index_axis_mut(Axis(0), k)
                .assign(&y.into_shape_with_order((self.out_channels, oh, ow)).expect("contiguous"));
            cols.push(col);
        }
        (
            out,
            Conv2dCache {
                cols,
                input_dim: (b, c, h, w),
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &Conv2dCache,
        dy: ArrayView4<f64>,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<Array4<f64>> {
        let (b, c, h, w) = cache.input_dim;
        let (_, _, oh, ow) = dy.dim();
        let wm = self.weight_matrix(store);
        let mut dw = Array2::<f64>::zeros(wm.dim());
        let mut db = vec![0.0; self.out_channels];
        let mut dx = need_input_grad.then(|| Array4::zeros((b, c, h, w)));
        for k in 0..b {
            let dyk = dy
                .index_axis(Axis(0), k)
                .to_owned()
                .into_shape_with_order((self.out_channels, oh * ow))
                .expect("contiguous");
            dw += &dyk.dot(&cache.cols[k].t());
            for (acc, row) in db.iter_mut().zip(dyk.rows()) {
                *acc += row.sum();
            }
            if let Some(dx) = dx.as_mut() {
                let dcol = wm.t().dot(&dyk);
                self.col2im(&dcol, dx.index_axis_mut(Axis(0), k), oh, ow);
            }
        }
        for (g, v) in grads.get_mut(self.weight).iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, v) in grads.get_mut(self.bias).iter_mut().zip(&db) {
            *g += v;
        }
        dx
    }

    fn im2col(&self, x: ndarray::ArrayView3<f64>, oh: usize, ow: usize) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        if k == 1 && self.stride == 1 {
            return x.to_owned().into_shape_with_order((c, h * w)).expect("contiguous");
        }
        let mut col = Array2::zeros((c * k * k, oh * ow));
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let mut dst = col.row_mut(row);
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[oi * ow + oj] = x[[ch, ii as usize, jj as usize]];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &Array2<f64>, mut dx: ndarray::ArrayViewMut3<f64>, oh: usize, ow: usize) {
        let (c, h, w) = dx.dim();
        let k = self.kernel;
        if k == 1 && self.stride == 1 {
            dx += &col.view().into_shape_with_order((c, h, w)).expect("contiguous");
            return;
        }
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let src = col.row((ch * k + ki) * k + kj);
                    for oi in 0..oh {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj >= 0 && jj < w as isize {
                                dx[[ch, ii as usize, jj as usize]] += src[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn relu(x: Array4<f64>) -> Array4<f64> {
    x.mapv_into(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(mut dy: Array4<f64>, y: &Array4<f64>) -> Array4<f64> {
    ndarray::Zip::from(&mut dy).and(y).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0
        }
    });
    dy
}

/// Separable bilinear resize with half-pixel centers (edges clamped).
#[derive(Debug, Clone)]
pub struct Resize {
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
    src: (usize, usize),
}

impl Resize {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self {
            rows: Self::taps(src.0, dst.0),
            cols: Self::taps(src.1, dst.1),
            src,
        }
    }

    fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.src == (self.rows.len(), self.cols.len())
    }

    pub fn forward(&self, x: ArrayView4<f64>) -> Array4<f64> {
        if self.is_identity() {
            return x.to_owned();
        }
        let (b, c, _, _) = x.dim();
        let mut out = Array4::zeros((b, c, self.rows.len(), self.cols.len()));
        for k in 0..b {
            for ch in 0..c {
                let src = x.slice(s![k, ch, .., ..]);
                let mut dst = out.slice_mut(s![k, ch, .., ..]);
                for (oi, &(i0, i1, fi)) in self.rows.iter().enumerate() {
                    for (oj, &(j0, j1, fj)) in self.cols.iter().enumerate() {
                        let top = src[[i0, j0]] * (1.0 - fj) + src[[i0, j1]] * fj;
                        let bot = src[[i1, j0]] * (1.0 - fj) + src[[i1, j1]] * fj;
                        dst[[oi, oj]] = top * (1.0 - fi) + bot * fi;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, dy: ArrayView4<f64>) -> Array4<f64> {
        if self.is_identity() {
            return dy.to_owned();
        }
        let (b, c, _, _) = dy.dim();
        let mut dx = Array4::zeros((b, c, self.src.0, self.src.1));
        for k in 0..b {
            for ch in 0..c {
                let g = dy.slice(s![k, ch, .., ..]);
                let mut d = dx.slice_mut(s![k, ch, .., ..]);
                for (oi, &(i0, i1, fi)) in self.rows.iter().enumerate() {
                    for (oj, &(j0, j1, fj)) in self.cols.iter().enumerate() {
                        let v = g[[oi, oj]];
                        d[[i0, j0]] += v * (1.0 - fi) * (1.0 - fj);
                        d[[i0, j1]] += v * (1.0 - fi) * fj;
                        d[[i1, j0]] += v * fi * (1.0 - fj);
                        d[[i1, j1]] += v * fi * fj;
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Slot,
    bias: Slot,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.alloc(format!("{name}.weight"), &[out_features, in_features], group);
        let bias = store.alloc(format!("{name}.bias"), &[out_features], group);
        he_init(store, weight, in_features, rng);
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    fn weight_matrix<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.out_features, self.in_features), store.get(self.weight))
            .expect("weight slot matches shape")
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        let bias = ndarray::ArrayView1::from(store.get(self.bias));
        x.dot(&self.weight_matrix(store).t()) + bias
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        let dw = dy.t().dot(&x);
        for (g, v) in grads.get_mut(self.weight).iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, v) in grads.get_mut(self.bias).iter_mut().zip(dy.sum_axis(Axis(0)).iter()) {
            *g += v;
        }
        dy.dot(&self.weight_matrix(store))
    }
}

/// Per-batch normalization of `(b, f)` activations with an affine map and
/// running statistics for evaluation.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    gamma: Slot,
    beta: Slot,
    pub features: usize,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

pub struct BatchNormCache {
    normalized: Array2<f64>,
    std: Array1<f64>,
}

impl BatchNorm1d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPSILON: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, features: usize) -> Self {
        let gamma = store.alloc(format!("{name}.gamma"), &[features], group);
        let beta = store.alloc(format!("{name}.beta"), &[features], group);
        store.get_mut(gamma).fill(1.0);
        Self {
            gamma,
            beta,
            features,
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum: Self::MOMENTUM,
            epsilon: Self::EPSILON,
        }
    }

    fn affine(&self, store: &ParamStore, n: &Array2<f64>) -> Array2<f64> {
        let gamma = ndarray::ArrayView1::from(store.get(self.gamma));
        let beta = ndarray::ArrayView1::from(store.get(self.beta));
        n * &gamma + beta
    }

    /// Batch statistics; also folds them into the running estimates.
    pub fn forward_train(&mut self, store: &ParamStore, x: ArrayView2<f64>) -> (Array2<f64>, BatchNormCache) {
        let b = x.nrows() as f64;
        let (n, std) = normalize_columns(x, self.epsilon);
        let mean = x.sum_axis(Axis(0)) / b;
        let var = (&x - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / (b - 1.0).max(1.0);
        self.running_mean = &self.running_mean * (1.0 - self.momentum) + &(mean * self.momentum);
        self.running_var = &self.running_var * (1.0 - self.momentum) + &(var * self.momentum);
        let y = self.affine(store, &n);
        (y, BatchNormCache { normalized: n, std })
    }

    /// Batch statistics without touching the running estimates.
    pub fn forward_batch(&self, store: &ParamStore, x: ArrayView2<f64>) -> (Array2<f64>, BatchNormCache) {
        let (n, std) = normalize_columns(x, self.epsilon);
        let y = self.affine(store, &n);
        (y, BatchNormCache { normalized: n, std })
    }

    pub fn forward_eval(&self, store: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        let std = self.running_var.mapv(|v| (v + self.epsilon).sqrt());
        let n = (&x - &self.running_mean) / &std;
        self.affine(store, &n)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BatchNormCache,
        dy: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        let dgamma = (&dy * &cache.normalized).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        for (g, v) in grads.get_mut(self.gamma).iter_mut().zip(dgamma.iter()) {
            *g += v;
        }
        for (g, v) in grads.get_mut(self.beta).iter_mut().zip(dbeta.iter()) {
            *g += v;
        }
        let gamma = ndarray::ArrayView1::from(store.get(self.gamma));
        let dn = &dy * &gamma;
        normalize_backward(dn.view(), cache.normalized.view(), cache.std.view())
    }
}

/// Softmax cross-entropy summed over non-ignored pixels.
///
/// Returns the summed loss, the number of scored pixels, and the gradient of
/// `sum / normalizer` with respect to the logits.
pub fn cross_entropy(
    logits: ArrayView4<f64>,
    labels: ndarray::ArrayView3<u8>,
    normalizer: f64,
) -> (f64, usize, Array4<f64>) {
    let (b, c, h, w) = logits.dim();
    let mut grad = Array4::zeros((b, c, h, w));
    let mut total = 0.0;
    let mut count = 0usize;
    let mut probs = vec![0.0; c];
    for k in 0..b {
        for i in 0..h {
            for j in 0..w {
                let label = labels[[k, i, j]];
                if label == IGNORE_INDEX {
                    continue;
                }
                let max = (0..c).map(|ch| logits[[k, ch, i, j]]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (ch, p) in probs.iter_mut().enumerate() {
                    *p = (logits[[k, ch, i, j]] - max).exp();
                    z += *p;
                }
                total += z.ln() + max - logits[[k, label as usize, i, j]];
                count += 1;
                for (ch, p) in probs.iter().enumerate() {
                    let target = if ch == label as usize { 1.0 } else { 0.0 };
                    grad[[k, ch, i, j]] = (p / z - target) / normalizer;
                }
            }
        }
    }
    (total, count, grad)
}

/// Per-pixel argmax over the class axis; ties go to the lowest class id.
pub fn argmax_classes(logits: ArrayView4<f64>) -> ndarray::Array3<u8> {
    let (b, c, h, w) = logits.dim();
    ndarray::Array3::from_shape_fn((b, h, w), |(k, i, j)| {
        let mut best = 0;
        for ch in 1..c {
            if logits[[k, ch, i, j]] > logits[[k, best, i, j]] {
                best = ch;
            }
        }
        best as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        let conv = Conv2d::new(&mut store, "c", ParamGroup::Encoder, 2, 3, 3, 2, &mut rng);
        for v in store.get_mut(conv.bias) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x = Array4::from_shape_fn((2, 2, 6, 5), |_| rng.gen_range(-1.0..1.0));
        let (y, _) = conv.forward(&store, x.view());
        assert_eq!(y.dim(), (2, 3, 3, 3));
        let wv = store.get(conv.weight);
        let bv = store.get(conv.bias);
        for ((k, o, oi, oj), &got) in y.indexed_iter() {
            let mut acc = bv[o];
            for c in 0..2 {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let ii = (oi * 2 + ki) as isize - 1;
                        let jj = (oj * 2 + kj) as isize - 1;
                        if ii >= 0 && ii < 6 && jj >= 0 && jj < 5 {
                            acc += wv[((o * 2 + c) * 3 + ki) * 3 + kj] * x[[k, c, ii as usize, jj as usize]];
                        }
                    }
                }
            }
            assert!((acc - got).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let r = Resize::new((3, 4), (7, 9));
        let y = r.forward(Array4::from_elem((1, 2, 3, 4), 2.5).view());
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = Resize::new((4, 3), (8, 6));
        let x = Array4::from_shape_fn((1, 1, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let g = Array4::from_shape_fn((1, 1, 8, 6), |_| rng.gen_range(-1.0..1.0));
        let lhs = (&r.forward(x.view()) * &g).sum();
        let rhs = (&x * &r.backward(g.view())).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Array4::zeros((1, 4, 2, 2));
        let mut labels = ndarray::Array3::zeros((1, 2, 2));
        labels[[0, 1, 1]] = IGNORE_INDEX;
        let (loss, count, grad) = cross_entropy(logits.view(), labels.view(), 3.0);
        assert_eq!(count, 3);
        assert!((loss - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((grad[[0, 0, 0, 0]] - (0.25 - 1.0) / 3.0).abs() < 1e-12);
        assert_eq!(grad[[0, 2, 1, 1]], 0.0);
    }
}
