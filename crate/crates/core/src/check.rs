//! Runtime self-checks: scalar-loop oracles and finite differences against
//! the library kernels.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::barlow::{
    batch_normalize, bt_loss_from_raw, bt_loss_from_raw_with_grad, cross_correlation, default_lambda, Domain,
    Embedding, LossWeights, DEFAULT_EPSILON,
};
use crate::geometry::{largest_interior_rectangle, AlignedPair};
use crate::metrics::{iou, ConfusionMatrix};
use crate::model::{EncoderSpec, DecoderSpec, ModelSpec, ParamGroup, ProjectorSpec, SegModel};
use crate::pooling::{pool_backward, pool_forward, PoolingKind, POOL_EPSILON};
use crate::trainer::{combined_loss_and_grad, LossProbe, MaskSource};
use crate::types::SegmentationMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckScope {
    Grads,
    Oracles,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

pub fn run_checks(scope: CheckScope) -> Vec<CheckResult> {
    let mut out = Vec::new();
    if matches!(scope, CheckScope::Oracles | CheckScope::All) {
        out.push(oracle_bt());
        out.push(oracle_pooling());
        out.push(oracle_lir());
        out.push(oracle_iou());
    }
    if matches!(scope, CheckScope::Grads | CheckScope::All) {
        out.push(grad_bt());
        out.push(grad_pooling());
        out.push(grad_end_to_end());
    }
    out
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn vector_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-2.0..2.0))
}

fn oracle_bt() -> CheckResult {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, p) = (rng.gen_range(2..12), rng.gen_range(1..9));
        let a = random_matrix(&mut rng, b, p);
        let c = random_matrix(&mut rng, b, p);
        let na = loop_normalize(&a);
        let nc = loop_normalize(&c);
        let ea = Embedding::new(a, Domain::Source).expect("valid");
        let ec = Embedding::new(c, Domain::Target).expect("valid");
        let kn = batch_normalize(&ea, DEFAULT_EPSILON).expect("valid");
        for (x, y) in kn.values().iter().zip(na.iter()) {
            worst = worst.max(rel(*x, *y));
        }
        let corr = loop_correlate(&na, &nc);
        let kc = cross_correlation(
            &kn,
            &batch_normalize(&ec, DEFAULT_EPSILON).expect("valid"),
        )
        .expect("valid");
        for (x, y) in kc.values().iter().zip(corr.iter()) {
            worst = worst.max(rel(*x, *y));
        }
        let lambda = if p >= 2 { default_lambda(p).expect("p >= 2") } else { 0.5 };
        let weights = LossWeights::new(lambda, 0.1, DEFAULT_EPSILON).expect("valid");
        let mut expect = 0.0;
        for i in 0..p {
            for j in 0..p {
                expect += if i == j {
                    (1.0 - corr[[i, i]]).powi(2)
                } else {
                    lambda * corr[[i, j]].powi(2)
                };
            }
        }
        worst = worst.max(rel(bt_loss_from_raw(&ea, &ec, &weights).expect("valid"), expect));
    }
    CheckResult {
        name: "oracle: normalize / correlate / bt loss",
        max_rel_err: worst,
        tolerance: 1e-9,
    }
}

fn loop_normalize(z: &Array2<f64>) -> Array2<f64> {
    let (b, p) = z.dim();
    let mut out = Array2::zeros((b, p));
    for j in 0..p {
        let mut mean = 0.0;
        for i in 0..b {
            mean += z[[i, j]];
        }
        mean /= b as f64;
        let mut var = 0.0;
        for i in 0..b {
            var += (z[[i, j]] - mean).powi(2);
        }
        var /= b as f64;
        for i in 0..b {
            out[[i, j]] = (z[[i, j]] - mean) / (var + DEFAULT_EPSILON).sqrt();
        }
    }
    out
}

fn loop_correlate(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, p) = a.dim();
    let mut c = Array2::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..n {
                s += a[[k, i]] * b[[k, j]];
            }
            c[[i, j]] = s / n as f64;
        }
    }
    c
}

fn oracle_pooling() -> CheckResult {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let dim = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let y = Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0));
        let mask = Array3::from_shape_fn((dim.0, dim.2, dim.3), |_| f64::from(rng.gen_bool(0.7) as u8));
        let conf = Array3::from_shape_fn((dim.0, dim.2, dim.3), |_| rng.gen_range(0.0..1.0));
        for kind in [PoolingKind::Avg, PoolingKind::Segm, PoolingKind::Conf, PoolingKind::Segconf] {
            let w = match kind {
                PoolingKind::Avg => None,
                PoolingKind::Segm => Some(mask.clone()),
                PoolingKind::Conf => Some(conf.clone()),
                PoolingKind::Segconf => Some(&mask * &conf),
            };
            let got = pool_forward(y.view(), w.as_ref().map(|w| w.view()), POOL_EPSILON);
            for k in 0..dim.0 {
                for c in 0..dim.1 {
                    let (mut num, mut den) = (0.0, 0.0);
                    for i in 0..dim.2 {
                        for j in 0..dim.3 {
                            let wt = w.as_ref().map_or(1.0, |w| w[[k, i, j]]);
                            num += y[[k, c, i, j]] * wt;
                            den += wt;
                        }
                    }
                    let expect = if w.is_some() { num / (den + POOL_EPSILON) } else { num / den };
                    worst = worst.max(rel(got[[k, c]], expect));
                }
            }
        }
    }
    CheckResult {
        name: "oracle: four pooling variants",
        max_rel_err: worst,
        tolerance: 1e-9,
    }
}

fn oracle_lir() -> CheckResult {
    let mut failures = 0usize;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (h, w) = (rng.gen_range(1..16), rng.gen_range(1..16));
        let density = rng.gen_range(0.5..0.95);
        let mut mask = Array2::from_shape_fn((h, w), |_| rng.gen_bool(density));
        mask[[rng.gen_range(0..h), rng.gen_range(0..w)]] = true;
        let r = largest_interior_rectangle(&mask).expect("one valid pixel");
        let all_valid = (r.top..r.top + r.height).all(|i| (r.left..r.left + r.width).all(|j| mask[[i, j]]));
        if !all_valid || r.area() != brute_force_area(&mask) {
            failures += 1;
        }
    }
    CheckResult {
        name: "oracle: largest interior rectangle",
        max_rel_err: failures as f64,
        tolerance: 0.0,
    }
}

/// Largest all-true axis-aligned rectangle by exhaustive search.
pub fn brute_force_area(mask: &Array2<bool>) -> usize {
    let (h, w) = mask.dim();
    let mut best = 0;
    for top in 0..h {
        for left in 0..w {
            let mut max_width = w - left;
            for bottom in top..h {
                let mut run = 0;
                while run < max_width && mask[[bottom, left + run]] {
                    run += 1;
                }
                max_width = run;
                if max_width == 0 {
                    break;
                }
                best = best.max(max_width * (bottom - top + 1));
            }
        }
    }
    best
}

fn oracle_iou() -> CheckResult {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rng.gen_range(2..6);
        let dim = (rng.gen_range(1..3), rng.gen_range(1..8), rng.gen_range(1..8));
        let gt = Array3::from_shape_fn(dim, |_| rng.gen_range(0..n as u8));
        let pred = Array3::from_shape_fn(dim, |_| rng.gen_range(0..n as u8));
        let mut cm = ConfusionMatrix::new(n);
        cm.accumulate(
            &SegmentationMap::new(pred.clone(), n).expect("valid"),
            &SegmentationMap::new(gt.clone(), n).expect("valid"),
            crate::types::IGNORE_INDEX,
        )
        .expect("valid");
        let report = iou(&cm).expect("some class defined");
        for c in 0..n as u8 {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&g, &p) in gt.iter().zip(pred.iter()) {
                inter += (g == c && p == c) as usize;
                union += (g == c || p == c) as usize;
            }
            match report.per_class_iou[c as usize] {
                Some(v) if union > 0 => worst = worst.max(rel(v, inter as f64 / union as f64)),
                None if union == 0 => {}
                _ => worst = f64::INFINITY,
            }
        }
    }
    CheckResult {
        name: "oracle: confusion matrix IoU",
        max_rel_err: worst,
        tolerance: 1e-9,
    }
}

fn grad_bt() -> CheckResult {
    let mut worst = 0.0f64;
    let h = 1e-6;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (b, p) = (6, 5);
        let a = random_matrix(&mut rng, b, p);
        let c = random_matrix(&mut rng, b, p);
        let weights = LossWeights::for_dim(p).expect("p >= 2");
        let loss = |a: &Array2<f64>, c: &Array2<f64>| {
            bt_loss_from_raw(
                &Embedding::new(a.clone(), Domain::Source).expect("valid"),
                &Embedding::new(c.clone(), Domain::Target).expect("valid"),
                &weights,
            )
            .expect("valid")
        };
        let g = bt_loss_from_raw_with_grad(
            &Embedding::new(a.clone(), Domain::Source).expect("valid"),
            &Embedding::new(c.clone(), Domain::Target).expect("valid"),
            &weights,
        )
        .expect("valid");
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for which in 0..2 {
            for idx in 0..b * p {
                let (i, j) = (idx / p, idx % p);
                let (mut ap, mut cp) = (a.clone(), c.clone());
                let (mut am, mut cm) = (a.clone(), c.clone());
                if which == 0 {
                    ap[[i, j]] += h;
                    am[[i, j]] -= h;
                    analytic.push(g.grad_a[[i, j]]);
                } else {
                    cp[[i, j]] += h;
                    cm[[i, j]] -= h;
                    analytic.push(g.grad_b[[i, j]]);
                }
                numeric.push((loss(&ap, &cp) - loss(&am, &cm)) / (2.0 * h));
            }
        }
        worst = worst.max(vector_rel_err(&analytic, &numeric));
    }
    CheckResult {
        name: "grad: bt loss wrt raw embeddings",
        max_rel_err: worst,
        tolerance: 1e-4,
    }
}

fn grad_pooling() -> CheckResult {
    let mut worst = 0.0f64;
    let h = 1e-6;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let dim = (2, 3, 4, 4);
        let y = Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0));
        let w = Array3::from_shape_fn((2, 4, 4), |_| rng.gen_range(0.0..1.0));
        let r = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let f = |y: &Array4<f64>| (pool_forward(y.view(), Some(w.view()), POOL_EPSILON) * &r).sum();
        let analytic = pool_backward(&r, Some(w.view()), POOL_EPSILON, dim);
        let mut numeric = Vec::new();
        for idx in 0..y.len() {
            let (mut yp, mut ym) = (y.clone(), y.clone());
            yp.as_slice_mut().expect("standard")[idx] += h;
            ym.as_slice_mut().expect("standard")[idx] -= h;
            numeric.push((f(&yp) - f(&ym)) / (2.0 * h));
        }
        worst = worst.max(vector_rel_err(analytic.as_slice().expect("standard"), &numeric));
    }
    CheckResult {
        name: "grad: weighted pooling wrt features",
        max_rel_err: worst,
        tolerance: 1e-4,
    }
}

/// Small model for gradient checks: 16 fused channels, 8-dim embeddings,
/// 4 classes.
pub fn gradcheck_model_spec() -> ModelSpec {
    ModelSpec {
        encoder: EncoderSpec {
            in_channels: 3,
            stem_channels: 4,
            stage_channels: vec![6, 5, 5],
            stage_strides: vec![4, 8, 16],
            fused_dim: 16,
        },
        decoder: DecoderSpec {
            num_classes: 4,
            hidden_channels: 6,
            upsample: 4,
        },
        projector: ProjectorSpec {
            layer_dims: vec![16, 12, 8],
        },
        seed: 7,
    }
}

/// Four random 16x16 pairs with labels over 4 classes, class 3 mobile.
pub fn gradcheck_batch(seed: u64) -> Vec<AlignedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|_| {
            AlignedPair::new(
                Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0..1.0)),
                Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0..1.0)),
                Array2::from_shape_fn((16, 16), |_| rng.gen_range(0..4u8)),
                Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..1.0)),
            )
            .expect("consistent shapes")
        })
        .collect()
}

fn grad_end_to_end() -> CheckResult {
    let mut model = SegModel::new(gradcheck_model_spec()).expect("valid spec");
    let batch = gradcheck_batch(11);
    let probe = LossProbe {
        pooling: PoolingKind::Segconf,
        alpha: 0.1,
        mobile_classes: vec![3],
        mask_from_labels: true,
        mask_source: MaskSource::Shared,
    };
    let (_, grads) = combined_loss_and_grad(&mut model, &batch, &probe).expect("valid batch");
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = 1e-5;
    for group in ParamGroup::ALL {
        let indices: Vec<usize> = model
            .params()
            .entries()
            .iter()
            .filter(|e| e.group == group)
            .flat_map(|e| e.range())
            .collect();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for _ in 0..24 {
            let k = indices[rng.gen_range(0..indices.len())];
            let orig = model.params().values()[k];
            model.params_mut().values_mut()[k] = orig + h;
            let lp = combined_loss_and_grad(&mut model, &batch, &probe).expect("valid").0;
            model.params_mut().values_mut()[k] = orig - h;
            let lm = combined_loss_and_grad(&mut model, &batch, &probe).expect("valid").0;
            model.params_mut().values_mut()[k] = orig;
            analytic.push(grads.0[k]);
            numeric.push((lp - lm) / (2.0 * h));
        }
        worst = worst.max(vector_rel_err(&analytic, &numeric));
    }
    CheckResult {
        name: "grad: combined loss wrt all parameters",
        max_rel_err: worst,
        tolerance: 1e-3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_checks(CheckScope::All) {
            assert!(r.passed(), "{r:?}");
        }
    }
}
