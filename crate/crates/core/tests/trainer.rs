use std::fs;

use btseg::barlow::Domain;
use btseg::metrics::evaluate;
use btseg::model::checkpoint::Checkpoint;
use btseg::model::{ModelSpec, ParamGroup};
use btseg::synthdata::{generate_pair, write_dataset, Dataset, PairedSample, SceneSpec};
use btseg::check::{gradcheck_batch, gradcheck_model_spec};
use btseg::model::SegModel;
use btseg::pooling::PoolingKind;
use btseg::trainer::{
    combined_loss_and_grad, fit, lr_schedule, paired_augment, FitOptions, LossProbe, MaskSource, TrainConfig, Trainer,
    CHECKPOINT_FILE, METRICS_FILE,
};
use btseg::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene() -> SceneSpec {
    SceneSpec {
        image_size: (48, 48),
        max_shift_px: 2,
        seed: 5,
        ..SceneSpec::default()
    }
}

fn samples(n: usize) -> Vec<PairedSample> {
    (0..n).map(|i| generate_pair(&scene(), i).unwrap()).collect()
}

fn small_config(total_steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps,
        effective_batch: 4,
        micro_batch: 2,
        warmup_steps: 2,
        stopgrad_steps: 0,
        crop_size: (32, 32),
        checkpoint_every: 0,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn trainer(cfg: TrainConfig, data: &[PairedSample]) -> Trainer {
    Trainer::new(cfg, ModelSpec::default(), data, &scene().mobile_class_ids, "test").unwrap()
}

#[test]
fn schedule_examples() {
    assert!((lr_schedule(750, 1.6e-4, 1500, 10000).unwrap() - 0.8e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(1500, 1.6e-4, 1500, 10000).unwrap(), 1.6e-4);
    assert_eq!(lr_schedule(10000, 1.6e-4, 1500, 10000).unwrap(), 0.0);
    assert!(lr_schedule(10001, 1.6e-4, 1500, 10000).is_err());
}

#[test]
fn augment_identity_and_errors() {
    let data = samples(1);
    let t = trainer(small_config(2), &data);
    let pair = &t.pairs()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let same = paired_augment(pair, (pair.height(), pair.width()), 0.0, &mut rng).unwrap();
    assert_eq!(&same, pair);
    assert!(paired_augment(pair, (pair.height() + 1, 8), 0.0, &mut rng).is_err());
    let a = paired_augment(pair, (16, 16), 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = paired_augment(pair, (16, 16), 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stop_gradient_window_freezes_bt_path_into_encoder() {
    let data = samples(6);
    let run = |alpha: f64| {
        let cfg = TrainConfig {
            alpha,
            stopgrad_steps: 100,
            ..small_config(6)
        };
        let mut t = trainer(cfg, &data);
        let records = t.run(None).unwrap();
        (t.into_model(), records)
    };
    let (with_bt, rec_bt) = run(0.1);
    let (without, _) = run(0.0);
    assert!(rec_bt.iter().any(|r| r.l_bt.is_some()));
    for group in [ParamGroup::Encoder, ParamGroup::Decoder] {
        let a = with_bt.params().group_values(group);
        let b = without.params().group_values(group);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{group:?}");
    }
    assert_ne!(
        with_bt.params().group_values(ParamGroup::Projector),
        without.params().group_values(ParamGroup::Projector)
    );
}

#[test]
fn bt_reaches_encoder_after_window() {
    let data = samples(6);
    let run = |alpha: f64| {
        let mut t = trainer(TrainConfig { alpha, ..small_config(6) }, &data);
        t.run(None).unwrap();
        t.into_model().params().group_values(ParamGroup::Encoder)
    };
    assert_ne!(run(0.1), run(0.0));
}

#[test]
fn zero_alpha_matches_disabled_branch() {
    let data = samples(4);
    let mut a = trainer(TrainConfig { alpha: 0.0, ..small_config(5) }, &data);
    let mut cfg = small_config(5);
    cfg.switches.use_bt = false;
    let mut b = trainer(cfg, &data);
    let ra = a.run(None).unwrap();
    let rb = b.run(None).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.model().params(), b.model().params());
    assert!(ra.iter().all(|r| r.l_bt.is_none()));
}

#[test]
fn identical_runs_identical_curves() {
    let data = samples(4);
    let mut a = trainer(small_config(6), &data);
    let mut b = trainer(small_config(6), &data);
    assert_eq!(a.run(None).unwrap(), b.run(None).unwrap());
    assert_eq!(a.model().params(), b.model().params());
}

#[test]
fn zero_steps_returns_initial_model() {
    let data = samples(2);
    let mut t = trainer(TrainConfig { warmup_steps: 0, ..small_config(0) }, &data);
    let before = t.model().params().clone();
    assert!(t.run(None).unwrap().is_empty());
    assert_eq!(t.model().params(), &before);
}

#[test]
fn cross_entropy_drops_within_fifty_steps() {
    let data = samples(8);
    let mut t = trainer(TrainConfig { warmup_steps: 5, ..small_config(50) }, &data);
    let records = t.run(None).unwrap();
    assert_eq!(records.len(), 50);
    assert!(records[49].l_ce < records[0].l_ce, "{} vs {}", records[49].l_ce, records[0].l_ce);
}

#[test]
fn inference_never_touches_projector() {
    let data = samples(4);
    let mut t = trainer(small_config(3), &data);
    t.run(None).unwrap();
    let model = t.model();
    let calls = model.projector_calls();
    evaluate(model, &data, Domain::Source, "").unwrap();
    evaluate(model, &data, Domain::Target, "").unwrap();
    assert_eq!(model.projector_calls(), calls);
}

#[test]
fn resume_continues_identically() {
    let root = tempfile::tempdir().unwrap();
    let data_dir = root.path().join("data");
    write_dataset(&scene(), 6, 1.0, &data_dir, "fp").unwrap();
    let dataset = Dataset::load(&data_dir).unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 4,
        ..small_config(10)
    };
    let options = |dir: &str, resume| FitOptions {
        out_dir: Some(root.path().join(dir)),
        resume,
        config_fingerprint: "fp".into(),
    };

    let straight = fit(&dataset, &cfg, &ModelSpec::default(), &options("straight", false)).unwrap();

    let mut t = Trainer::new(
        cfg.clone(),
        ModelSpec::default(),
        &dataset.train,
        &dataset.manifest.spec.mobile_class_ids,
        "fp",
    )
    .unwrap();
    let dir = root.path().join("split");
    t.run_to(7, Some(&dir)).unwrap();
    // a stale record past the checkpoint must be dropped on resume
    let mut log = fs::read_to_string(dir.join(METRICS_FILE)).unwrap();
    log.push_str(&log.lines().last().unwrap().replace("\"step\":6", "\"step\":7"));
    log.push('\n');
    fs::write(dir.join(METRICS_FILE), log).unwrap();
    let resumed = fit(&dataset, &cfg, &ModelSpec::default(), &options("split", true)).unwrap();

    assert_eq!(resumed.resumed_from, Some(7));
    assert_eq!(resumed.records, straight.records[7..]);
    assert_eq!(resumed.model.params(), straight.model.params());
    for file in [METRICS_FILE, CHECKPOINT_FILE] {
        assert_eq!(
            fs::read(root.path().join("straight").join(file)).unwrap(),
            fs::read(dir.join(file)).unwrap(),
            "{file}"
        );
    }
    assert_eq!(Checkpoint::load(&dir.join(CHECKPOINT_FILE)).unwrap().step, 10);

    let mismatched = FitOptions {
        config_fingerprint: "other".into(),
        ..options("split", true)
    };
    assert!(matches!(
        fit(&dataset, &cfg, &ModelSpec::default(), &mismatched),
        Err(Error::Config(_))
    ));
}

#[test]
fn nan_input_aborts_with_dump() {
    let mut data = samples(4);
    for s in &mut data {
        s.source.fill(f64::NAN);
    }
    let out = tempfile::tempdir().unwrap();
    let mut t = trainer(small_config(3), &data);
    match t.run(Some(out.path())) {
        Err(Error::NumericAbort { step, dump, .. }) => {
            assert_eq!(step, 0);
            assert!(dump.exists());
            assert!(out.path().join("nan_state.bin").exists());
        }
        other => panic!("expected numeric abort, got {other:?}"),
    }
}

#[test]
fn config_invariants_rejected() {
    let data = samples(2);
    let bad = [
        TrainConfig { warmup_steps: 20, ..small_config(10) },
        TrainConfig { effective_batch: 1, ..small_config(10) },
        TrainConfig { lr_decoder: 0.0, ..small_config(10) },
        TrainConfig { crop_size: (24, 32), ..small_config(10) },
    ];
    for cfg in bad {
        assert!(Trainer::new(cfg, ModelSpec::default(), &data, &[4, 5], "").is_err());
    }
}

#[test]
fn per_path_masks_change_training() {
    let data = samples(6);
    let run = |mask_source| {
        let mut t = trainer(TrainConfig { mask_source, ..small_config(6) }, &data);
        t.run(None).unwrap();
        t.into_model().params().group_values(ParamGroup::Encoder)
    };
    assert_ne!(run(MaskSource::Shared), run(MaskSource::PerPath));
}

#[test]
fn per_path_gradient_matches_differences() {
    let mut model = SegModel::new(gradcheck_model_spec()).unwrap();
    let batch = gradcheck_batch(31);
    let probe = LossProbe {
        pooling: PoolingKind::Segm,
        alpha: 0.1,
        mobile_classes: vec![3],
        mask_from_labels: false,
        mask_source: MaskSource::PerPath,
    };
    let (_, grads) = combined_loss_and_grad(&mut model, &batch, &probe).unwrap();
    let h = 1e-5;
    let n = model.params().len();
    for k in (0..n).step_by(n / 40) {
        let orig = model.params().values()[k];
        let mut at = |v: f64| {
            model.params_mut().values_mut()[k] = v;
            combined_loss_and_grad(&mut model, &batch, &probe).unwrap().0
        };
        let numeric = (at(orig + h) - at(orig - h)) / (2.0 * h);
        model.params_mut().values_mut()[k] = orig;
        let analytic = grads.as_slice()[k];
        assert!((analytic - numeric).abs() <= 1e-5 + 1e-3 * numeric.abs(), "param {k}: {analytic} vs {numeric}");
    }
}
