//! One line per acceptance criterion. Run with
//! `cargo test --release --test acceptance`; the adaptation criterion trains
//! nine full-length models and takes several minutes.

use std::fs;
use std::path::Path;
use std::time::Instant;

use btseg::barlow::{
    batch_normalize, bt_loss_from_raw, bt_loss_from_raw_with_grad, cross_correlation, default_lambda, Domain,
    Embedding, LossWeights, DEFAULT_EPSILON,
};
use btseg::check::{gradcheck_batch, gradcheck_model_spec};
use btseg::cli::{ablation_rows, main_with_args, EXIT_OK};
use btseg::config::RunConfig;
use btseg::geometry::largest_interior_rectangle;
use btseg::metrics::{evaluate, iou, ConfusionMatrix};
use btseg::model::{ModelSpec, ParamGroup, SegModel};
use btseg::pooling::{
    average_pool, confidence_average_pool, masked_average_pool, pool_backward, segconf_average_pool,
    BinaryMask, ConfidenceMap, FeatureMap, PoolingKind, POOL_EPSILON,
};
use btseg::synthdata::{generate_pair, Corruption, CorruptionKind, SceneSpec};
use btseg::trainer::{
    bt_loss_cached, combined_loss_and_grad, EmbeddingCache, LossProbe, MaskSource, Switches, TrainConfig, Trainer,
};
use btseg::types::{SegmentationMap, IGNORE_INDEX};
use ndarray::{s, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

fn norm_rel(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

// loop oracles

fn normalize_loop(z: &Array2<f64>) -> Array2<f64> {
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
            var += (z[[i, j]] - mean) * (z[[i, j]] - mean);
        }
        var /= b as f64;
        for i in 0..b {
            out[[i, j]] = (z[[i, j]] - mean) / (var + DEFAULT_EPSILON).sqrt();
        }
    }
    out
}

fn correlate_loop(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, p) = a.dim();
    let mut c = Array2::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[[k, i]] * b[[k, j]];
            }
            c[[i, j]] = acc / n as f64;
        }
    }
    c
}

fn bt_loop(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let c = correlate_loop(&normalize_loop(a), &normalize_loop(b));
    let p = c.nrows();
    let lambda = 1.0 / p as f64;
    let mut loss = 0.0;
    for i in 0..p {
        for j in 0..p {
            loss += if i == j {
                (1.0 - c[[i, i]]).powi(2)
            } else {
                lambda * c[[i, j]].powi(2)
            };
        }
    }
    loss
}

fn pool_loop(y: &Array4<f64>, w: Option<&Array3<f64>>) -> Array2<f64> {
    let (b, d, m, n) = y.dim();
    let mut out = Array2::zeros((b, d));
    for k in 0..b {
        for c in 0..d {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..m {
                for j in 0..n {
                    let wt = w.map_or(1.0, |w| w[[k, i, j]]);
                    num += y[[k, c, i, j]] * wt;
                    den += wt;
                }
            }
            out[[k, c]] = match w {
                Some(_) => num / (den + POOL_EPSILON),
                None => num / (m * n) as f64,
            };
        }
    }
    out
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-2.0..2.0))
}

fn emb(values: &Array2<f64>, domain: Domain) -> Embedding {
    Embedding::new(values.clone(), domain).unwrap()
}

fn kernel_oracles() -> Outcome {
    let mut worst = [0.0f64; 8];
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, p) = (rng.gen_range(2..24), rng.gen_range(2..16));
        let za = random_matrix(&mut rng, b, p);
        let zb = random_matrix(&mut rng, b, p);
        let (ea, eb) = (emb(&za, Domain::Source), emb(&zb, Domain::Target));
        let weights = LossWeights::for_dim(p).unwrap();
        worst[0] = worst[0].max(rel(bt_loss_from_raw(&ea, &eb, &weights).unwrap(), bt_loop(&za, &zb)));
        let c = cross_correlation(&ea, &eb).unwrap();
        worst[1] = worst[1].max(norm_rel(&flat(c.values()), &flat(&correlate_loop(&za, &zb))));
        let n = batch_normalize(&ea, DEFAULT_EPSILON).unwrap();
        worst[2] = worst[2].max(norm_rel(&flat(n.values()), &flat(&normalize_loop(&za))));

        let dim = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..7), rng.gen_range(1..7));
        let y = Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0));
        let mask = Array3::from_shape_fn((dim.0, dim.2, dim.3), |_| rng.gen_range(0..2) as f64);
        let conf = Array3::from_shape_fn((dim.0, dim.2, dim.3), |_| rng.gen_range(0.0..1.0));
        let fm = FeatureMap::new(y.clone()).unwrap();
        let bm = BinaryMask::new(mask.clone()).unwrap();
        let cm = ConfidenceMap::new(conf.clone()).unwrap();
        let both = &mask * &conf;
        let cases = [
            (average_pool(&fm).into_values(), pool_loop(&y, None)),
            (masked_average_pool(&fm, &bm, POOL_EPSILON).unwrap().into_values(), pool_loop(&y, Some(&mask))),
            (confidence_average_pool(&fm, &cm, POOL_EPSILON).unwrap().into_values(), pool_loop(&y, Some(&conf))),
            (segconf_average_pool(&fm, &bm, &cm, POOL_EPSILON).unwrap().into_values(), pool_loop(&y, Some(&both))),
        ];
        for (slot, (got, want)) in cases.iter().enumerate() {
            worst[3 + slot] = worst[3 + slot].max(norm_rel(&flat(got), &flat(want)));
        }

        let classes = rng.gen_range(2..7u8);
        let shape = (rng.gen_range(1..3), rng.gen_range(2..10), rng.gen_range(2..10));
        let pick = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.1) { IGNORE_INDEX } else { rng.gen_range(0..classes) };
        let gt = Array3::from_shape_fn(shape, |_| pick(&mut rng));
        let pred = Array3::from_shape_fn(shape, |_| rng.gen_range(0..classes));
        let mut matrix = ConfusionMatrix::new(classes as usize);
        matrix
            .accumulate(
                &SegmentationMap::new(pred.clone(), classes as usize).unwrap(),
                &SegmentationMap::new(gt.clone(), classes as usize).unwrap(),
                IGNORE_INDEX,
            )
            .unwrap();
        let Ok(report) = iou(&matrix) else { continue };
        for c in 0..classes {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (&g, &q) in gt.iter().zip(pred.iter()) {
                if g == IGNORE_INDEX {
                    continue;
                }
                tp += (g == c && q == c) as usize;
                fp += (g != c && q == c) as usize;
                fneg += (g == c && q != c) as usize;
            }
            let denom = tp + fp + fneg;
            match report.per_class_iou[c as usize] {
                Some(v) if denom > 0 => worst[7] = worst[7].max(rel(v, tp as f64 / denom as f64)),
                None if denom == 0 => {}
                _ => worst[7] = f64::INFINITY,
            }
        }
    }
    let names = ["bt", "xcorr", "bnorm", "avg", "segm", "conf", "segconf", "iou"];
    let max = worst.iter().copied().fold(0.0, f64::max);
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(max <= 1e-9, format!("50 instances each; max rel err {detail}"))
}

fn gradients() -> Outcome {
    let h = 1e-6;
    let mut bt_worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let za = random_matrix(&mut rng, 8, 6);
        let zb = random_matrix(&mut rng, 8, 6);
        let weights = LossWeights::for_dim(6).unwrap();
        let g = bt_loss_from_raw_with_grad(&emb(&za, Domain::Source), &emb(&zb, Domain::Target), &weights).unwrap();
        let (mut analytic, mut numeric) = (flat(&g.grad_a), Vec::new());
        analytic.extend(flat(&g.grad_b));
        for which in 0..2 {
            for idx in 0..za.len() {
                let shift = |d: f64| {
                    let (mut a, mut b) = (za.clone(), zb.clone());
                    let target = if which == 0 { &mut a } else { &mut b };
                    target.as_slice_mut().unwrap()[idx] += d;
                    bt_loop(&a, &b)
                };
                numeric.push((shift(h) - shift(-h)) / (2.0 * h));
            }
        }
        bt_worst = bt_worst.max(norm_rel(&analytic, &numeric));
    }

    let mut pool_worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let dim = (2, 4, 5, 5);
        let y = Array4::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0));
        let w = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(0.0..1.0));
        let r = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));
        let analytic = pool_backward(&r, Some(w.view()), POOL_EPSILON, dim);
        let mut numeric = Vec::new();
        for idx in 0..y.len() {
            let shift = |d: f64| {
                let mut yy = y.clone();
                yy.as_slice_mut().unwrap()[idx] += d;
                (pool_loop(&yy, Some(&w)) * &r).sum()
            };
            numeric.push((shift(h) - shift(-h)) / (2.0 * h));
        }
        pool_worst = pool_worst.max(norm_rel(&flat(&analytic), &numeric));
    }

    let spec = gradcheck_model_spec();
    let mut model = SegModel::new(spec.clone()).unwrap();
    let batch = gradcheck_batch(21);
    let probe = LossProbe {
        pooling: PoolingKind::Segconf,
        alpha: 0.1,
        mobile_classes: vec![3],
        mask_from_labels: true,
        mask_source: MaskSource::Shared,
    };
    let (_, grads) = combined_loss_and_grad(&mut model, &batch, &probe).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut e2e_worst = 0.0f64;
    let h = 1e-5;
    for group in ParamGroup::ALL {
        let range: Vec<usize> = model
            .params()
            .entries()
            .iter()
            .filter(|e| e.group == group)
            .flat_map(|e| e.range())
            .collect();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for _ in 0..32 {
            let k = range[rng.gen_range(0..range.len())];
            let orig = model.params().values()[k];
            let mut at = |v: f64| {
                model.params_mut().values_mut()[k] = v;
                combined_loss_and_grad(&mut model, &batch, &probe).unwrap().0
            };
            let d = (at(orig + h) - at(orig - h)) / (2.0 * h);
            model.params_mut().values_mut()[k] = orig;
            analytic.push(grads.as_slice()[k]);
            numeric.push(d);
        }
        e2e_worst = e2e_worst.max(norm_rel(&analytic, &numeric));
    }
    let shape = format!(
        "b={} {}x{} d={} p={} classes={}",
        batch.len(),
        batch[0].height(),
        batch[0].width(),
        spec.encoder.fused_dim,
        spec.projector.embedding_dim(),
        spec.decoder.num_classes
    );
    outcome(
        bt_worst < 1e-4 && pool_worst < 1e-4 && e2e_worst < 1e-3,
        format!("bt {bt_worst:.1e}, pooling {pool_worst:.1e} (<1e-4); end-to-end {e2e_worst:.1e} (<1e-3) at {shape}"),
    )
}

fn brute_force_area(mask: &Array2<bool>) -> usize {
    let (h, w) = mask.dim();
    let mut best = 0;
    for t in 0..h {
        for b in t..h {
            for l in 0..w {
                for r in l..w {
                    let area = (b - t + 1) * (r - l + 1);
                    if area > best && mask.slice(s![t..=b, l..=r]).iter().all(|&v| v) {
                        best = area;
                    }
                }
            }
        }
    }
    best
}

fn lir() -> Outcome {
    let mut failures = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (h, w) = (rng.gen_range(1..=24), rng.gen_range(1..=24));
        let density = rng.gen_range(0.3..1.0);
        let mut mask = Array2::from_shape_fn((h, w), |_| rng.gen_bool(density));
        mask[[rng.gen_range(0..h), rng.gen_range(0..w)]] = true;
        let rect = largest_interior_rectangle(&mask).unwrap();
        let inside = mask
            .slice(s![rect.top..rect.top + rect.height, rect.left..rect.left + rect.width])
            .iter()
            .all(|&v| v);
        if !inside || rect.area() != brute_force_area(&mask) {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("200 masks up to 24x24, {failures} wrong"))
}

fn cache() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let p = rng.gen_range(2..12);
        let za = random_matrix(&mut rng, 32, p);
        let zb = random_matrix(&mut rng, 32, p);
        let mut cache = EmbeddingCache::new(32, p).unwrap();
        // more rows than fit: the oldest eight fall out
        let older = random_matrix(&mut rng, 8, p);
        cache.push(Domain::Source, older.view()).unwrap();
        cache.push(Domain::Target, older.view()).unwrap();
        for chunk in 0..8 {
            let rows = s![chunk * 4..(chunk + 1) * 4, ..];
            cache.push(Domain::Source, za.slice(rows)).unwrap();
            cache.push(Domain::Target, zb.slice(rows)).unwrap();
        }
        let cached = bt_loss_cached(&cache, &LossWeights::for_dim(p).unwrap()).unwrap();
        worst = worst.max((cached - bt_loop(&za, &zb)).abs());
    }
    outcome(worst <= 1e-6, format!("20 caches of 32+32, max abs diff {worst:.1e}"))
}

fn small_scene() -> SceneSpec {
    SceneSpec {
        image_size: (48, 48),
        max_shift_px: 2,
        ..SceneSpec::default()
    }
}

fn stop_gradient() -> Outcome {
    let scene = small_scene();
    let data: Vec<_> = (0..6).map(|i| generate_pair(&scene, i).unwrap()).collect();
    let run = |alpha| {
        let cfg = TrainConfig {
            total_steps: 8,
            warmup_steps: 2,
            stopgrad_steps: 8,
            effective_batch: 4,
            micro_batch: 2,
            crop_size: (32, 32),
            checkpoint_every: 0,
            alpha,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg, ModelSpec::default(), &data, &scene.mobile_class_ids, "").unwrap();
        t.run(None).unwrap();
        t.into_model()
    };
    let (bt, plain) = (run(0.1), run(0.0));
    let bits = |m: &SegModel, g| m.params().group_values(g).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let encoder_equal = bits(&bt, ParamGroup::Encoder) == bits(&plain, ParamGroup::Encoder);
    let projector_differs = bits(&bt, ParamGroup::Projector) != bits(&plain, ParamGroup::Projector);
    outcome(
        encoder_equal && projector_differs,
        format!("8 steps inside the window: encoder bitwise equal {encoder_equal}, projector differs {projector_differs}"),
    )
}

fn adaptation_switches() -> [(&'static str, Switches); 3] {
    let rows = ablation_rows();
    let find = |name| rows.iter().find(|(n, _)| *n == name).copied().unwrap();
    [find("bt_off"), find("bt"), find("segconf")]
}

fn adaptation() -> Outcome {
    let seeds = [0u64, 1, 2];
    let rows = adaptation_switches();
    let mut scores = vec![Vec::new(); rows.len()];
    for &seed in &seeds {
        let scene = SceneSpec {
            corruption: Corruption {
                kind: CorruptionKind::FogBlend,
                strength: 0.6,
            },
            max_shift_px: 4,
            seed,
            ..SceneSpec::default()
        };
        let samples: Vec<_> = (0..80).map(|i| generate_pair(&scene, i).unwrap()).collect();
        let (train, val) = samples.split_at(64);
        for (slot, (_, switches)) in rows.iter().enumerate() {
            let mut cfg = TrainConfig {
                total_steps: 2000,
                seed,
                ..TrainConfig::default()
            };
            cfg.switches = *switches;
            let spec = ModelSpec {
                seed,
                ..ModelSpec::default()
            };
            let mut trainer = Trainer::new(cfg, spec, train, &scene.mobile_class_ids, "").unwrap();
            trainer.run(None).unwrap();
            let report = evaluate(trainer.model(), val, Domain::Target, "").unwrap();
            scores[slot].push(100.0 * report.mean_iou);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (off, plain, full) = (mean(&scores[0]), mean(&scores[1]), mean(&scores[2]));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/");
    outcome(
        full - off >= 3.0 && full >= plain - 1.0,
        format!(
            "adverse val mIoU over seeds 0,1,2: no BT {off:.1} ({}), plain BT {plain:.1} ({}), full {full:.1} ({}); full-off {:+.1}pp (>=3), full-plain {:+.1}pp (>=-1)",
            fmt(&scores[0]),
            fmt(&scores[1]),
            fmt(&scores[2]),
            full - off,
            full - plain
        ),
    )
}

const SMALL_RUN: &str = r#"
[scene]
image_size = [48, 48]
max_shift_px = 2

[data]
count = 8
train_fraction = 0.5

[train]
total_steps = 4
effective_batch = 4
micro_batch = 2
warmup_steps = 1
stopgrad_steps = 2
crop_size = [32, 32]
checkpoint_every = 0
"#;

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("btseg").chain(args.iter().copied()))
}

fn ablation(root: &Path) -> Outcome {
    let config = root.join("ablate.toml");
    fs::write(&config, SMALL_RUN).unwrap();
    let data = root.join("ablate_data");
    let out = root.join("ablate_out");
    let c = config.to_str().unwrap();
    let (d, o) = (data.to_str().unwrap(), out.to_str().unwrap());
    if cli(&["generate", "--config", c, "--out", d]) != EXIT_OK
        || cli(&["ablate", "--config", c, "--data", d, "--out", o]) != EXIT_OK
    {
        return outcome(false, "ablate command failed");
    }
    let record: serde_json::Value = serde_json::from_slice(&fs::read(out.join("ablation.json")).unwrap()).unwrap();
    let rows = record["rows"].as_array().unwrap();
    let base = RunConfig::from_toml(SMALL_RUN).unwrap();
    let mut only_switches = true;
    let mut complete = true;
    for row in rows {
        let text = fs::read_to_string(out.join("rows").join(row["name"].as_str().unwrap()).join("config.toml")).unwrap();
        let mut cfg = RunConfig::from_toml(&text).unwrap();
        cfg.train.switches = base.train.switches;
        only_switches &= cfg.fingerprint() == base.fingerprint();
        let per_class = row["report"]["per_class_iou"].as_array().unwrap();
        complete &= per_class.len() == base.scene.num_classes && row["report"]["mean_iou"].is_number();
    }
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    let table_rows = table.lines().count() - 1;
    outcome(
        rows.len() == 7 && table_rows == 7 && only_switches && complete,
        format!(
            "{} json rows, {table_rows} table rows, per-class and mean present {complete}, differ only in switches {only_switches}",
            rows.len()
        ),
    )
}

fn lambda_rule() -> Outcome {
    let exact = [2usize, 256, 8192]
        .iter()
        .all(|&p| default_lambda(p).unwrap() == 1.0 / p as f64);
    outcome(exact, "p in {2, 256, 8192}")
}

fn determinism(root: &Path) -> Outcome {
    let config = root.join("det.toml");
    fs::write(&config, SMALL_RUN).unwrap();
    let c = config.to_str().unwrap();
    let mut runs = Vec::new();
    for run in ["one", "two"] {
        let data = root.join(run).join("data");
        let out = root.join(run).join("out");
        let (d, o) = (data.to_str().unwrap(), out.to_str().unwrap());
        let codes = [
            cli(&["generate", "--config", c, "--out", d]),
            cli(&["train", "--config", c, "--data", d, "--out", o]),
            cli(&["eval", "--config", c, "--data", d, "--out", o]),
        ];
        if codes.iter().any(|&code| code != EXIT_OK) {
            return outcome(false, format!("exit codes {codes:?}"));
        }
        let files = [
            data.join("manifest.json"),
            data.join("train/00000/target.png"),
            out.join("metrics.jsonl"),
            out.join("checkpoint.bin"),
            out.join("eval_report.json"),
        ];
        runs.push(files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>());
    }
    let same = runs[0] == runs[1];
    outcome(same, "manifest, sample png, metrics.jsonl, checkpoint.bin, eval_report.json")
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("kernel oracles", Box::new(kernel_oracles)),
        ("gradients", Box::new(gradients)),
        ("largest interior rectangle", Box::new(lir)),
        ("embedding cache", Box::new(cache)),
        ("stop-gradient", Box::new(stop_gradient)),
        ("adaptation effect", Box::new(adaptation)),
        ("ablation table", Box::new(|| ablation(root.path()))),
        ("lambda rule", Box::new(lambda_rule)),
        ("determinism", Box::new(|| determinism(root.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        failed += usize::from(!result.passed);
        println!(
            "{} {}. {name}: {} [{:.1}s]",
            if result.passed { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
}
