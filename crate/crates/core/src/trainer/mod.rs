//! Training loop: paired augmentation, rolling embedding cache, gradient
//! accumulation, per-group learning rates and the stop-gradient window.

mod cache;
mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barlow::{raw_loss_and_grad, Domain, LossWeights, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::geometry::{apply_warp, crop_triple, filter_pair, largest_interior_rectangle, AlignedPair, FilterRule};
use crate::model::checkpoint::Checkpoint;
use crate::model::layers::{argmax_classes, cross_entropy};
use crate::model::{stop_gradient_boundary, Gradients, ModelSpec, ParamGroup, ProjectorMode, SegModel};
use crate::pooling::{
    downsample_confidence, majority_downsample, pool_backward, pool_forward, pool_weights, BinaryMask, PoolingKind,
    POOL_EPSILON,
};
use crate::synthdata::{Dataset, PairedSample};
use crate::types::IGNORE_INDEX;

pub use cache::{bt_loss_cached, EmbeddingCache};
pub use optim::AdamW;

pub(crate) use cache::bt_cached_with_grad;

/// Which prediction supplies the pooling mask of the adverse path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Both paths pool with the mask from the clear-image prediction.
    #[default]
    Shared,
    /// Each path pools with the mask from its own prediction.
    PerPath,
}

/// The switch fields varied by the ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Switches {
    pub use_bt: bool,
    pub use_warp: bool,
    pub use_crop: bool,
    pub pooling: PoolingKind,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            use_bt: true,
            use_warp: true,
            use_crop: true,
            pooling: PoolingKind::Segconf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// Rows per domain in the embedding cache.
    pub effective_batch: usize,
    /// Pairs per forward pass.
    pub micro_batch: usize,
    /// Micro-batches accumulated into one optimizer update.
    pub accumulation_steps: usize,
    pub alpha: f64,
    pub warmup_steps: usize,
    pub stopgrad_steps: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_projector: f64,
    pub weight_decay: f64,
    pub crop_size: (usize, usize),
    pub flip_prob: f64,
    pub switches: Switches,
    pub mask_source: MaskSource,
    pub filter: FilterRule,
    /// Steps between checkpoint writes; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            effective_batch: 16,
            micro_batch: 8,
            accumulation_steps: 1,
            alpha: DEFAULT_ALPHA,
            warmup_steps: 300,
            stopgrad_steps: 500,
            lr_encoder: 2e-3,
            lr_decoder: 2e-3,
            lr_projector: 2e-3,
            weight_decay: 0.01,
            crop_size: (64, 64),
            flip_prob: 0.5,
            switches: Switches::default(),
            mask_source: MaskSource::Shared,
            filter: FilterRule::default(),
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup_steps > self.total_steps {
            return fail(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.effective_batch < 2 {
            return fail(format!("effective_batch must be >= 2, got {}", self.effective_batch));
        }
        if self.micro_batch < 2 || self.micro_batch > self.effective_batch {
            return fail(format!(
                "micro_batch must lie in [2, effective_batch], got {}",
                self.micro_batch
            ));
        }
        if self.accumulation_steps == 0 {
            return fail("accumulation_steps must be >= 1".into());
        }
        for (name, lr) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
            ("lr_projector", self.lr_projector),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return fail(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return fail("crop_size must be positive".into());
        }
        Ok(())
    }

    pub fn pairs_per_step(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }

    /// Mask-guided pooling waits for the stop-gradient window to close.
    pub fn pooling_at(&self, step: usize) -> PoolingKind {
        match self.switches.pooling {
            PoolingKind::Segm if step < self.stopgrad_steps => PoolingKind::Avg,
            PoolingKind::Segconf if step < self.stopgrad_steps => PoolingKind::Conf,
            k => k,
        }
    }

    fn lr(&self, step: usize, group: ParamGroup) -> Result<f64> {
        let base = match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Decoder => self.lr_decoder,
            ParamGroup::Projector => self.lr_projector,
        };
        lr_schedule(step, base, self.warmup_steps, self.total_steps)
    }
}

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<f64> {
    if step > total_steps || warmup_steps > total_steps {
        return Err(Error::invalid(format!(
            "step {step} (warmup {warmup_steps}) outside a {total_steps}-step schedule"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(base_lr * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
}

/// Same flip decision and crop window for every member of the pair.
pub fn paired_augment<R: Rng>(
    pair: &AlignedPair,
    crop_size: (usize, usize),
    flip_prob: f64,
    rng: &mut R,
) -> Result<AlignedPair> {
    let (h, w) = (pair.height(), pair.width());
    let (ch, cw) = crop_size;
    if ch > h || cw > w || ch == 0 || cw == 0 {
        return Err(Error::invalid(format!("crop {ch}x{cw} does not fit a {h}x{w} pair")));
    }
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    let flip = rng.gen_bool(flip_prob);
    let rows = top..top + ch;
    let cols = left..left + cw;
    let mut out = AlignedPair::new(
        pair.source.slice(s![.., rows.clone(), cols.clone()]).to_owned(),
        pair.target.slice(s![.., rows.clone(), cols.clone()]).to_owned(),
        pair.labels.slice(s![rows.clone(), cols.clone()]).to_owned(),
        pair.confidence.slice(s![rows, cols]).to_owned(),
    )?;
    if flip {
        out.source.invert_axis(Axis(2));
        out.target.invert_axis(Axis(2));
        out.labels.invert_axis(Axis(1));
        out.confidence.invert_axis(Axis(1));
        out = AlignedPair::new(
            out.source.as_standard_layout().to_owned(),
            out.target.as_standard_layout().to_owned(),
            out.labels.as_standard_layout().to_owned(),
            out.confidence.as_standard_layout().to_owned(),
        )?;
    }
    Ok(out)
}

/// Builds the training pair for `sample` under the warp and crop switches.
///
/// Returns `None` when the pair fails the filter rule.
pub fn prepare_pair(sample: &PairedSample, switches: &Switches, filter: &FilterRule) -> Result<Option<AlignedPair>> {
    let valid = sample.warp.valid_mask();
    if !filter_pair(valid.view(), filter.min_valid_fraction, filter.min_rect_side) {
        return Ok(None);
    }
    let target = if switches.use_warp {
        apply_warp(&sample.target, &sample.warp)?.0
    } else {
        sample.target.clone()
    };
    let confidence = sample.confidence_f64();
    if switches.use_crop {
        let rect = largest_interior_rectangle(&valid)?;
        return crop_triple(&sample.source, &target, &sample.source_labels, &confidence, rect).map(Some);
    }
    AlignedPair::new(sample.source.clone(), target, sample.source_labels.clone(), confidence).map(Some)
}

/// Per-step losses as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_ce: f64,
    /// Absent while the cache is filling or the branch is off.
    pub l_bt: Option<f64>,
    pub lr_enc: f64,
    pub lr_dec: f64,
    pub lr_proj: f64,
}

pub(crate) struct MicroBatch {
    pub xs: Array4<f64>,
    pub xt: Array4<f64>,
    pub labels: Array3<u8>,
    pub conf: Array3<f64>,
}

impl MicroBatch {
    pub(crate) fn stack(pairs: &[AlignedPair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::invalid("empty micro-batch"))?;
        let (h, w) = (first.height(), first.width());
        if pairs.iter().any(|p| (p.height(), p.width()) != (h, w)) {
            return Err(Error::shape("pairs in a micro-batch differ in size"));
        }
        let n = pairs.len();
        let c = first.source.dim().0;
        let mut mb = Self {
            xs: Array4::zeros((n, c, h, w)),
            xt: Array4::zeros((n, c, h, w)),
            labels: Array3::zeros((n, h, w)),
            conf: Array3::zeros((n, h, w)),
        };
        for (k, p) in pairs.iter().enumerate() {
            mb.xs.index_axis_mut(Axis(0), k).assign(&p.source);
            mb.xt.index_axis_mut(Axis(0), k).assign(&p.target);
            mb.labels.index_axis_mut(Axis(0), k).assign(&p.labels);
            mb.conf.index_axis_mut(Axis(0), k).assign(&p.confidence);
        }
        Ok(mb)
    }
}

pub(crate) enum BtSink<'a> {
    /// Loss over the micro-batch itself.
    Direct,
    /// Loss over the rolling cache after pushing the micro-batch.
    Cache(&'a mut EmbeddingCache),
}

pub(crate) struct PassOptions<'a> {
    pub pooling: PoolingKind,
    /// Zero disables the branch entirely.
    pub alpha: f64,
    pub weights: LossWeights,
    pub ce_normalizer: f64,
    /// Extra factor on the BT gradient, for accumulation.
    pub bt_scale: f64,
    pub block_encoder_bt: bool,
    pub mobile_classes: &'a [u8],
    pub num_classes: usize,
    pub projector_mode: ProjectorMode,
    /// Take the pooling mask from the labels instead of the prediction.
    pub mask_from_labels: bool,
    pub mask_source: MaskSource,
}

pub(crate) struct PassResult {
    pub ce_sum: f64,
    pub l_bt: Option<f64>,
}

/// One forward and backward pass, accumulating into `grads`.
pub(crate) fn forward_backward(
    model: &mut SegModel,
    mb: &MicroBatch,
    opts: &PassOptions,
    sink: BtSink,
    grads: &mut Gradients,
) -> Result<PassResult> {
    let (n, _, h, w) = mb.xs.dim();
    let (ys, enc_s) = model.encode_forward(mb.xs.view())?;
    let (logits, dec) = model.decode_forward(ys.view(), (h, w))?;
    let (ce_sum, _, dlogits) = cross_entropy(logits.view(), mb.labels.view(), opts.ce_normalizer);
    let mut dys = model.decode_backward(&dec, dlogits.view(), grads);
    let mut l_bt = None;

    if opts.alpha > 0.0 {
        let (yt, enc_t) = model.encode_forward(mb.xt.view())?;
        let grid = (ys.dim().2, ys.dim().3);
        let labels = if opts.mask_from_labels {
            mb.labels.clone()
        } else {
            argmax_classes(logits.view())
        };
        let weights = guidance_weights(opts, &labels, &mb.conf, grid)?;
        let weights_t = match opts.mask_source {
            MaskSource::PerPath if opts.pooling.uses_mask() && !opts.mask_from_labels => {
                let (logits_t, _) = model.decode_forward(yt.view(), (h, w))?;
                guidance_weights(opts, &argmax_classes(logits_t.view()), &mb.conf, grid)?
            }
            _ => weights.clone(),
        };
        let wv = weights.as_ref().map(|w| w.view());
        let wtv = weights_t.as_ref().map(|w| w.view());
        let ps = pool_forward(ys.view(), wv, POOL_EPSILON);
        let pt = pool_forward(yt.view(), wtv, POOL_EPSILON);
        let (zs, pc_s) = model.project_forward(ps.view(), opts.projector_mode)?;
        let (zt, pc_t) = model.project_forward(pt.view(), opts.projector_mode)?;
        let found = match sink {
            BtSink::Direct => {
                let g = raw_loss_and_grad(zs.view(), zt.view(), opts.weights.lambda_bt, opts.weights.epsilon);
                Some((g.loss, g.grad_a, g.grad_b))
            }
            BtSink::Cache(cache) => {
                cache.push(Domain::Source, zs.view())?;
                cache.push(Domain::Target, zt.view())?;
                if cache.is_full() {
                    Some(bt_cached_with_grad(cache, &opts.weights, n)?)
                } else {
                    None
                }
            }
        };
        if let Some((loss, gzs, gzt)) = found {
            let scale = opts.alpha * opts.bt_scale;
            let dps = model.project_backward(&pc_s, (gzs * scale).view(), grads);
            let dpt = model.project_backward(&pc_t, (gzt * scale).view(), grads);
            if let Some((dps, dpt)) = stop_gradient_boundary(opts.block_encoder_bt).pass((dps, dpt)) {
                dys += &pool_backward(&dps, wv, POOL_EPSILON, ys.dim());
                let dyt = pool_backward(&dpt, wtv, POOL_EPSILON, yt.dim());
                model.encode_backward(&enc_t, dyt.view(), grads);
            }
            l_bt = Some(loss);
        }
    }
    model.encode_backward(&enc_s, dys.view(), grads);
    Ok(PassResult { ce_sum, l_bt })
}

fn guidance_weights(
    opts: &PassOptions,
    labels: &Array3<u8>,
    conf: &Array3<f64>,
    grid: (usize, usize),
) -> Result<Option<Array3<f64>>> {
    let mask = if opts.pooling.uses_mask() {
        let coarse = majority_downsample(labels, opts.num_classes, grid)?;
        Some(BinaryMask::new(coarse.mapv(|l| {
            if l != IGNORE_INDEX && opts.mobile_classes.contains(&l) {
                0.0
            } else {
                1.0
            }
        }))?)
    } else {
        None
    };
    let confidence = if opts.pooling.uses_confidence() {
        Some(downsample_confidence(conf, grid)?)
    } else {
        None
    };
    Ok(pool_weights(opts.pooling, mask.as_ref(), confidence.as_ref()))
}

/// Model, optimizer and cache together with the prepared training pairs.
pub struct Trainer {
    config: TrainConfig,
    model: SegModel,
    optimizer: AdamW,
    cache: EmbeddingCache,
    pairs: Vec<AlignedPair>,
    mobile_classes: Vec<u8>,
    loss_weights: LossWeights,
    next_step: usize,
    fingerprint: String,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        model_spec: ModelSpec,
        samples: &[PairedSample],
        mobile_classes: &[u8],
        fingerprint: &str,
    ) -> Result<Self> {
        config.validate()?;
        let model = SegModel::new(model_spec)?;
        let stride = model.spec().encoder.max_stride();
        if config.crop_size.0 % stride != 0 || config.crop_size.1 % stride != 0 {
            return Err(Error::Config(format!(
                "crop_size {:?} must be divisible by the encoder stride {stride}",
                config.crop_size
            )));
        }
        let mut pairs = Vec::with_capacity(samples.len());
        for s in samples {
            if let Some(p) = prepare_pair(s, &config.switches, &config.filter)? {
                pairs.push(p);
            }
        }
        if pairs.is_empty() {
            return Err(Error::invalid("no training pair survives the filter"));
        }
        let dim = model.spec().projector.embedding_dim();
        Ok(Self {
            optimizer: AdamW::new(model.params().len(), config.weight_decay),
            cache: EmbeddingCache::new(config.effective_batch, dim)?,
            loss_weights: LossWeights::for_dim(dim)?,
            config,
            model,
            pairs,
            mobile_classes: mobile_classes.to_vec(),
            next_step: 0,
            fingerprint: fingerprint.to_string(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn into_model(self) -> SegModel {
        self.model
    }

    pub fn pairs(&self) -> &[AlignedPair] {
        &self.pairs
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }

    /// Seeded per `(seed, step, slot)`, so any step can be rebuilt in isolation.
    pub fn batch_for_step(&self, step: usize) -> Result<Vec<AlignedPair>> {
        let per_step = self.config.pairs_per_step();
        (0..per_step)
            .map(|slot| {
                let index = sample_index(self.config.seed, step * per_step + slot, self.pairs.len());
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(((step as u64) << 16) | slot as u64);
                paired_augment(&self.pairs[index], self.config.crop_size, self.config.flip_prob, &mut rng)
            })
            .collect()
    }

    /// One optimizer update over `batch` (`micro_batch * accumulation_steps` pairs).
    pub fn train_step(&mut self, batch: &[AlignedPair], step: usize) -> Result<StepRecord> {
        let cfg = &self.config;
        if batch.len() != cfg.pairs_per_step() {
            return Err(Error::invalid(format!(
                "step expects {} pairs, got {}",
                cfg.pairs_per_step(),
                batch.len()
            )));
        }
        let lrs = [
            cfg.lr(step, ParamGroup::Encoder)?,
            cfg.lr(step, ParamGroup::Decoder)?,
            cfg.lr(step, ParamGroup::Projector)?,
        ];
        let scored = batch
            .iter()
            .map(|p| p.labels.iter().filter(|&&l| l != IGNORE_INDEX).count())
            .sum::<usize>()
            .max(1) as f64;
        let alpha = if cfg.switches.use_bt { cfg.alpha } else { 0.0 };
        let opts = PassOptions {
            pooling: cfg.pooling_at(step),
            alpha,
            weights: LossWeights {
                alpha,
                ..self.loss_weights
            },
            ce_normalizer: scored,
            bt_scale: 1.0 / cfg.accumulation_steps as f64,
            block_encoder_bt: step < cfg.stopgrad_steps,
            mobile_classes: &self.mobile_classes,
            num_classes: self.model.spec().decoder.num_classes,
            projector_mode: ProjectorMode::Train,
            mask_from_labels: false,
            mask_source: self.config.mask_source,
        };
        let mut grads = self.model.params().zeros_like();
        let mut ce = 0.0;
        let mut bt = Vec::new();
        for chunk in batch.chunks(cfg.micro_batch) {
            let mb = MicroBatch::stack(chunk)?;
            let r = forward_backward(&mut self.model, &mb, &opts, BtSink::Cache(&mut self.cache), &mut grads)?;
            ce += r.ce_sum;
            bt.extend(r.l_bt);
        }
        let l_ce = ce / scored;
        let l_bt = (!bt.is_empty()).then(|| bt.iter().sum::<f64>() / bt.len() as f64);
        if !l_ce.is_finite() || l_bt.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("loss (l_ce {l_ce}, l_bt {l_bt:?})")));
        }
        if grads.0.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.optimizer.step(self.model.params_mut(), &grads, |g| match g {
            ParamGroup::Encoder => lrs[0],
            ParamGroup::Decoder => lrs[1],
            ParamGroup::Projector => lrs[2],
        })?;
        self.next_step = step + 1;
        Ok(StepRecord {
            step,
            l_ce,
            l_bt,
            lr_enc: lrs[0],
            lr_dec: lrs[1],
            lr_proj: lrs[2],
        })
    }

    /// Model, optimizer moments and cache contents; `step` is the next step to run.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.next_step, &self.fingerprint);
        let (m, v) = self.optimizer.moments();
        ck.push("optim.m", vec![m.len()], m.to_vec());
        ck.push("optim.v", vec![v.len()], v.to_vec());
        ck.push("optim.t", vec![1], vec![self.optimizer.steps() as f64]);
        for (name, domain) in [("cache.source", Domain::Source), ("cache.target", Domain::Target)] {
            let rows = self.cache.stacked(domain);
            ck.push(name, vec![rows.nrows(), rows.ncols()], rows.into_raw_vec_and_offset().0);
        }
        ck
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.config_fingerprint != self.fingerprint {
            return Err(Error::Config(format!(
                "checkpoint fingerprint {} does not match config {}",
                ck.config_fingerprint, self.fingerprint
            )));
        }
        let need = |name: &str| {
            ck.get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks {name}")))
        };
        self.model = ck.restore_model()?;
        self.optimizer.restore(
            need("optim.m")?.data.clone(),
            need("optim.v")?.data.clone(),
            need("optim.t")?.data[0] as u64,
        )?;
        self.cache.clear();
        for (name, domain) in [("cache.source", Domain::Source), ("cache.target", Domain::Target)] {
            let t = need(name)?;
            let rows = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::shape(e.to_string()))?;
            self.cache.push(domain, rows.view())?;
        }
        self.next_step = ck.step;
        Ok(())
    }

    /// Runs the remaining steps. With `out`, appends to `metrics.jsonl` and
    /// writes `checkpoint.bin` periodically and at the end.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<StepRecord>> {
        self.run_to(self.config.total_steps, out)
    }

    /// Like [`Trainer::run`] but stops before step `end`; the checkpoint
    /// written at the end resumes from there.
    pub fn run_to(&mut self, end: usize, out: Option<&Path>) -> Result<Vec<StepRecord>> {
        let end = end.min(self.config.total_steps);
        let mut log = match out {
            Some(dir) => Some(open_log(dir, self.next_step)?),
            None => None,
        };
        let mut records = Vec::new();
        for step in self.next_step..end {
            let batch = self.batch_for_step(step)?;
            let record = match self.train_step(&batch, step) {
                Ok(r) => r,
                Err(Error::NonFinite(reason)) => return Err(self.numeric_abort(step, reason, out)),
                Err(e) => return Err(e),
            };
            if let Some((path, file)) = log.as_mut() {
                let mut line = serde_json::to_vec(&record).expect("record serializes");
                line.push(b'\n');
                file.write_all(&line).map_err(|e| Error::io(&*path, e))?;
            }
            records.push(record);
            let every = self.config.checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && self.next_step % every == 0 && self.next_step < self.config.total_steps {
                    self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(records)
    }

    fn numeric_abort(&self, step: usize, reason: String, out: Option<&Path>) -> Error {
        let Some(dir) = out else {
            return Error::NumericAbort {
                step,
                reason,
                dump: PathBuf::new(),
            };
        };
        let dump = dir.join("nan_dump.json");
        let norms: Vec<_> = ParamGroup::ALL
            .iter()
            .map(|&g| {
                let v = self.model.params().group_values(g);
                (g.name(), v.iter().map(|x| x * x).sum::<f64>().sqrt())
            })
            .collect();
        let body = serde_json::json!({
            "step": step,
            "reason": reason,
            "config_fingerprint": self.fingerprint,
            "param_norms": norms,
            "state": "nan_state.bin",
        });
        let _ = fs::write(&dump, serde_json::to_vec_pretty(&body).expect("json"));
        let _ = self.checkpoint().save(&dir.join("nan_state.bin"));
        Error::NumericAbort { step, reason, dump }
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Opens the metrics log, keeping only records before `from_step`.
fn open_log(dir: &Path, from_step: usize) -> Result<(PathBuf, fs::File)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(METRICS_FILE);
    let kept = if from_step > 0 {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut kept = String::new();
        for line in text.lines() {
            let rec: StepRecord = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            if rec.step < from_step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        kept
    } else {
        String::new()
    };
    fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok((path, file))
}

/// Epoch-wise shuffled sampling without replacement.
fn sample_index(seed: u64, position: usize, n: usize) -> usize {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream((position / n) as u64);
    order.shuffle(&mut rng);
    order[position % n]
}

const SHUFFLE_SALT: u64 = 0x005e_ed0f_5a37_15e5;

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    pub config_fingerprint: String,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub model: SegModel,
    pub records: Vec<StepRecord>,
    pub resumed_from: Option<usize>,
}

/// Trains on the train split of `dataset`.
pub fn fit(dataset: &Dataset, config: &TrainConfig, model_spec: &ModelSpec, options: &FitOptions) -> Result<FitOutcome> {
    if dataset.train.is_empty() {
        return Err(Error::invalid("dataset has no training samples"));
    }
    if model_spec.decoder.num_classes != dataset.num_classes() {
        return Err(Error::Config(format!(
            "model predicts {} classes, dataset has {}",
            model_spec.decoder.num_classes,
            dataset.num_classes()
        )));
    }
    let mut trainer = Trainer::new(
        config.clone(),
        model_spec.clone(),
        &dataset.train,
        &dataset.manifest.spec.mobile_class_ids,
        &options.config_fingerprint,
    )?;
    let mut resumed_from = None;
    if options.resume {
        let dir = options
            .out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("resume needs an output directory".into()))?;
        let path = dir.join(CHECKPOINT_FILE);
        if path.exists() {
            trainer.restore(&Checkpoint::load(&path)?)?;
            resumed_from = Some(trainer.next_step());
        }
    }
    let records = trainer.run(options.out_dir.as_deref())?;
    Ok(FitOutcome {
        model: trainer.into_model(),
        records,
        resumed_from,
    })
}

/// Settings for [`combined_loss_and_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossProbe {
    pub pooling: PoolingKind,
    pub alpha: f64,
    pub mobile_classes: Vec<u8>,
    /// Pooling mask from the labels rather than the argmax prediction.
    pub mask_from_labels: bool,
    pub mask_source: MaskSource,
}

/// `L_CE + alpha * L_BT` on one batch of pairs and its gradient for every
/// parameter. The projector uses batch statistics without touching its
/// running estimates, and the BT loss is taken over the batch itself.
pub fn combined_loss_and_grad(
    model: &mut SegModel,
    pairs: &[AlignedPair],
    probe: &LossProbe,
) -> Result<(f64, Gradients)> {
    let mb = MicroBatch::stack(pairs)?;
    let scored = mb.labels.iter().filter(|&&l| l != IGNORE_INDEX).count().max(1) as f64;
    let dim = model.spec().projector.embedding_dim();
    let opts = PassOptions {
        pooling: probe.pooling,
        alpha: probe.alpha,
        weights: LossWeights {
            alpha: probe.alpha,
            ..LossWeights::for_dim(dim)?
        },
        ce_normalizer: scored,
        bt_scale: 1.0,
        block_encoder_bt: false,
        mobile_classes: &probe.mobile_classes,
        num_classes: model.spec().decoder.num_classes,
        projector_mode: ProjectorMode::Batch,
        mask_from_labels: probe.mask_from_labels,
        mask_source: probe.mask_source,
    };
    let mut grads = model.params().zeros_like();
    let r = forward_backward(model, &mb, &opts, BtSink::Direct, &mut grads)?;
    Ok((r.ce_sum / scored + probe.alpha * r.l_bt.unwrap_or(0.0), grads))
}
