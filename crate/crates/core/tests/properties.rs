use btseg::barlow::{bt_loss_from_raw, Domain, Embedding, LossWeights};
use btseg::geometry::{apply_warp, largest_interior_rectangle, AlignedPair, WarpField};
use btseg::metrics::{iou, ConfusionMatrix};
use btseg::pooling::{pool_forward, POOL_EPSILON};
use btseg::synthdata::{generate_pair, SceneSpec};
use btseg::trainer::{bt_loss_cached, lr_schedule, paired_augment, EmbeddingCache};
use btseg::types::{SegmentationMap, IGNORE_INDEX};
use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn pair_of_matrices() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (2usize..10, 2usize..7).prop_flat_map(|(b, p)| (matrix(b, p), matrix(b, p)))
}

fn brute_force_area(mask: &Array2<bool>) -> usize {
    let (h, w) = mask.dim();
    let mut best = 0;
    for t in 0..h {
        for b in t..h {
            for l in 0..w {
                for r in l..w {
                    if (t..=b).all(|i| (l..=r).all(|j| mask[[i, j]])) {
                        best = best.max((b - t + 1) * (r - l + 1));
                    }
                }
            }
        }
    }
    best
}

fn seg(labels: Array3<u8>, n: usize) -> SegmentationMap {
    SegmentationMap::new(labels, n).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bt_loss_nonnegative_and_domain_symmetric((a, b) in pair_of_matrices()) {
        let w = LossWeights::for_dim(a.ncols()).unwrap();
        let ab = bt_loss_from_raw(
            &Embedding::new(a.clone(), Domain::Source).unwrap(),
            &Embedding::new(b.clone(), Domain::Target).unwrap(),
            &w,
        ).unwrap();
        let ba = bt_loss_from_raw(
            &Embedding::new(b, Domain::Source).unwrap(),
            &Embedding::new(a, Domain::Target).unwrap(),
            &w,
        ).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-10 * ab.max(1.0));
    }

    #[test]
    fn cache_value_equals_full_batch((a, b) in pair_of_matrices(), chunk in 1usize..4) {
        let w = LossWeights::for_dim(a.ncols()).unwrap();
        let mut cache = EmbeddingCache::new(a.nrows(), a.ncols()).unwrap();
        let mut start = 0;
        while start < a.nrows() {
            let end = (start + chunk).min(a.nrows());
            cache.push(Domain::Source, a.slice(ndarray::s![start..end, ..])).unwrap();
            cache.push(Domain::Target, b.slice(ndarray::s![start..end, ..])).unwrap();
            start = end;
        }
        let direct = bt_loss_from_raw(
            &Embedding::new(a, Domain::Source).unwrap(),
            &Embedding::new(b, Domain::Target).unwrap(),
            &w,
        ).unwrap();
        let cached = bt_loss_cached(&cache, &w).unwrap();
        prop_assert!((cached - direct).abs() <= 1e-6 * direct.abs().max(1e-12));
    }

    #[test]
    fn pooled_values_stay_within_feature_range(
        vals in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 4 * 4),
        weights in prop::collection::vec(0.0f64..1.0, 2 * 4 * 4),
    ) {
        let y = Array4::from_shape_vec((2, 3, 4, 4), vals).unwrap();
        let w = Array3::from_shape_vec((2, 4, 4), weights).unwrap();
        let (lo, hi) = y.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for pooled in [pool_forward(y.view(), None, POOL_EPSILON), pool_forward(y.view(), Some(w.view()), POOL_EPSILON)] {
            for &v in pooled.iter() {
                prop_assert!(v >= lo.min(0.0) - 1e-12 && v <= hi.max(0.0) + 1e-12);
            }
        }
    }

    #[test]
    fn all_ones_weights_match_plain_mean(vals in prop::collection::vec(-2.0f64..2.0, 3 * 5 * 5)) {
        let y = Array4::from_shape_vec((1, 3, 5, 5), vals).unwrap();
        let ones = Array3::ones((1, 5, 5));
        let avg = pool_forward(y.view(), None, POOL_EPSILON);
        let weighted = pool_forward(y.view(), Some(ones.view()), POOL_EPSILON);
        for (a, w) in avg.iter().zip(weighted.iter()) {
            prop_assert!((a * 25.0 / (25.0 + POOL_EPSILON) - w).abs() < 1e-12);
        }
    }

    #[test]
    fn lir_is_valid_and_maximal(h in 1usize..9, w in 1usize..9, bits in prop::collection::vec(any::<bool>(), 64)) {
        let mut mask = Array2::from_shape_fn((h, w), |(i, j)| bits[i * 8 + j]);
        mask[[0, 0]] = true;
        let r = largest_interior_rectangle(&mask).unwrap();
        for i in r.top..r.top + r.height {
            for j in r.left..r.left + r.width {
                prop_assert!(mask[[i, j]]);
            }
        }
        prop_assert_eq!(r.area(), brute_force_area(&mask));
    }

    #[test]
    fn iou_symmetric_under_swap(
        a in prop::collection::vec(0u8..4, 36),
        b in prop::collection::vec(0u8..4, 36),
    ) {
        let pa = Array3::from_shape_vec((1, 6, 6), a).unwrap();
        let pb = Array3::from_shape_vec((1, 6, 6), b).unwrap();
        let mut ab = ConfusionMatrix::new(4);
        ab.accumulate(&seg(pa.clone(), 4), &seg(pb.clone(), 4), IGNORE_INDEX).unwrap();
        let mut ba = ConfusionMatrix::new(4);
        ba.accumulate(&seg(pb, 4), &seg(pa, 4), IGNORE_INDEX).unwrap();
        let (ra, rb) = (iou(&ab).unwrap(), iou(&ba).unwrap());
        prop_assert_eq!(&ra.per_class_iou, &rb.per_class_iou);
        prop_assert!((0.0..=1.0).contains(&ra.mean_iou));
        for v in ra.per_class_iou.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn confusion_accumulation_is_additive(
        a in prop::collection::vec(0u8..3, 32),
        b in prop::collection::vec(0u8..3, 32),
    ) {
        let pred = Array3::from_shape_vec((2, 4, 4), a).unwrap();
        let gt = Array3::from_shape_vec((2, 4, 4), b).unwrap();
        let mut whole = ConfusionMatrix::new(3);
        whole.accumulate(&seg(pred.clone(), 3), &seg(gt.clone(), 3), IGNORE_INDEX).unwrap();
        let mut parts = ConfusionMatrix::new(3);
        for k in 0..2 {
            let mut part = ConfusionMatrix::new(3);
            let p = pred.slice(ndarray::s![k..k + 1, .., ..]).to_owned();
            let g = gt.slice(ndarray::s![k..k + 1, .., ..]).to_owned();
            part.accumulate(&seg(p, 3), &seg(g, 3), IGNORE_INDEX).unwrap();
            parts.merge(&part).unwrap();
        }
        prop_assert_eq!(whole.total(), 32);
        prop_assert_eq!(whole, parts);
    }

    #[test]
    fn schedule_is_bounded_and_peaks_after_warmup(total in 1usize..500, frac in 0.0f64..1.0, base in 1e-5f64..1.0) {
        let warmup = (total as f64 * frac) as usize;
        let peak = lr_schedule(warmup, base, warmup, total).unwrap();
        for step in 0..=total {
            let lr = lr_schedule(step, base, warmup, total).unwrap();
            prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
            prop_assert!(lr <= peak + 1e-15 || warmup == total);
        }
        prop_assert_eq!(lr_schedule(total, base, warmup, total).unwrap(), 0.0);
        prop_assert!(lr_schedule(total + 1, base, warmup, total).is_err());
    }

    #[test]
    fn shift_warp_valid_count(h in 4usize..20, w in 4usize..20, dy in -3i64..=3, dx in -3i64..=3) {
        let warp = WarpField::from_shift(h, w, dy, dx);
        let count = warp.valid_mask().iter().filter(|&&v| v).count();
        prop_assert_eq!(count, (h - dy.unsigned_abs() as usize) * (w - dx.unsigned_abs() as usize));
    }

    #[test]
    fn augmentation_keeps_labels_registered(seed in any::<u64>(), flip in 0.0f64..=1.0) {
        // labels encode the pixel position, channel 0/1 of the source encode it too
        let (h, w) = (24, 20);
        let source = Array3::from_shape_fn((3, h, w), |(c, i, j)| match c {
            0 => i as f64,
            1 => j as f64,
            _ => 0.0,
        });
        let labels = Array2::from_shape_fn((h, w), |(i, j)| ((i * w + j) % 250) as u8);
        let conf = Array2::from_shape_fn((h, w), |(i, j)| (i * w + j) as f64 / (h * w) as f64);
        let pair = AlignedPair::new(source.clone(), source, labels, conf).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = paired_augment(&pair, (16, 8), flip, &mut rng).unwrap();
        for i in 0..16 {
            for j in 0..8 {
                let (oi, oj) = (out.source[[0, i, j]] as usize, out.source[[1, i, j]] as usize);
                prop_assert_eq!(out.labels[[i, j]], ((oi * w + oj) % 250) as u8);
                prop_assert_eq!(out.target[[0, i, j]], out.source[[0, i, j]]);
                prop_assert_eq!(out.confidence[[i, j]], (oi * w + oj) as f64 / (h * w) as f64);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_pairs_meet_their_contract(seed in 0u64..1000, index in 0usize..50) {
        let spec = SceneSpec { image_size: (48, 48), seed, ..SceneSpec::default() };
        let s = generate_pair(&spec, index).unwrap();
        let mut classes: Vec<u8> = s.source_labels.iter().copied().collect();
        classes.sort_unstable();
        classes.dedup();
        prop_assert!(classes.len() >= 2);
        prop_assert!(classes.iter().all(|&c| (c as usize) < spec.num_classes));
        prop_assert!(s.confidence.iter().all(|&c| (0.0..=1.0).contains(&c)));
        let diff: f64 = (&s.source - &s.target).mapv(f64::abs).mean().unwrap();
        prop_assert!(diff > 0.0);

        // static, correctly mapped pixels carry the same label in both frames
        let coords = s.warp.coords();
        for i in 0..48 {
            for j in 0..48 {
                if s.confidence[[i, j]] < 1.0 {
                    continue;
                }
                let (x, y) = (coords[[i, j, 0]], coords[[i, j, 1]]);
                let (ti, tj) = ((y - 0.5) as usize, (x - 0.5) as usize);
                prop_assert_eq!(s.source_labels[[i, j]], s.adverse_labels_heldout[[ti, tj]]);
            }
        }
        prop_assert!(s.confidence.iter().any(|&c| c == 0.0 || c < 0.3) || spec.max_shift_px == 0);
    }
}

#[test]
fn uncorrupted_warp_reproduces_static_source() {
    use btseg::synthdata::{Corruption, CorruptionKind};
    let spec = SceneSpec {
        image_size: (40, 40),
        corruption: Corruption {
            kind: CorruptionKind::Darken,
            strength: 0.0,
        },
        seed: 3,
        ..SceneSpec::default()
    };
    for index in 0..8 {
        let s = generate_pair(&spec, index).unwrap();
        let (warped, valid) = apply_warp(&s.target, &s.warp).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                if valid[[i, j]] && s.confidence[[i, j]] == 1.0 {
                    for c in 0..3 {
                        assert_eq!(warped[[c, i, j]], s.source[[c, i, j]]);
                    }
                }
            }
        }
    }
}
