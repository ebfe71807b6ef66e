//! Encoder, multi-scale fusion, segmentation decoder and projection head.
//!
//! The encoder is a strided convolutional pyramid whose stage outputs are
//! bilinearly resized to the finest stage and concatenated into the feature
//! map `Y`. The decoder is a per-pixel MLP (two 1x1 convolutions) followed by
//! bilinear upsampling to the input size. The projection head maps pooled
//! features to embeddings through `Linear -> BatchNorm -> ReLU` blocks and a
//! final `Linear`; it is only used during training.

pub mod checkpoint;
pub mod layers;
pub mod params;

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{concatenate, s, Array2, Array3, Array4, ArrayView2, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::FeatureMap;
use layers::{argmax_classes, relu, relu_backward, BatchNorm1d, BatchNormCache, Conv2d, Conv2dCache, Linear, Resize};
pub use params::{Gradients, ParamEntry, ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Output channels of every stage.
    pub stage_channels: Vec<usize>,
    /// Cumulative downsampling factor of every stage.
    pub stage_strides: Vec<usize>,
    /// Channels of the fused map; equals the sum of `stage_channels`.
    pub fused_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 12,
            stage_channels: vec![16, 16, 16],
            stage_strides: vec![4, 8, 16],
            fused_dim: 48,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::Config(
                "encoder needs one stride per stage and at least one stage".into(),
            ));
        }
        let mut prev = 2;
        for &s in &self.stage_strides {
            if !s.is_power_of_two() || s < prev {
                return Err(Error::Config(format!(
                    "stage strides must be non-decreasing powers of two >= 2, got {:?}",
                    self.stage_strides
                )));
            }
            prev = s;
        }
        let total: usize = self.stage_channels.iter().sum();
        if total != self.fused_dim {
            return Err(Error::Config(format!(
                "fused_dim {} differs from summed stage channels {total}",
                self.fused_dim
            )));
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn max_stride(&self) -> usize {
        *self.stage_strides.last().expect("validated")
    }

    pub fn min_stride(&self) -> usize {
        self.stage_strides[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSpec {
    pub num_classes: usize,
    pub hidden_channels: usize,
    /// Factor from the feature grid back to input resolution.
    pub upsample: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            hidden_channels: 32,
            upsample: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorSpec {
    /// Widths from the pooled feature to the embedding, e.g. `[d, d/2, d/4]`.
    pub layer_dims: Vec<usize>,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        Self {
            layer_dims: vec![48, 24, 12],
        }
    }
}

impl ProjectorSpec {
    pub fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    /// Trainable scalars: weights and biases of every linear layer plus the
    /// affine terms of each hidden normalization.
    pub fn param_count(&self) -> usize {
        let n = self.layer_dims.len();
        self.layer_dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let linear = w[0] * w[1] + w[1];
                if i + 2 < n {
                    linear + 2 * w[1]
                } else {
                    linear
                }
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub projector: ProjectorSpec,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::default(),
            decoder: DecoderSpec::default(),
            projector: ProjectorSpec::default(),
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder.num_classes < 2 {
            return Err(Error::Config("decoder needs at least 2 classes".into()));
        }
        if self.decoder.upsample != self.encoder.min_stride() {
            return Err(Error::Config(format!(
                "decoder upsample {} must equal the finest encoder stride {}",
                self.decoder.upsample,
                self.encoder.min_stride()
            )));
        }
        let dims = &self.projector.layer_dims;
        if dims.len() < 3 {
            return Err(Error::Config("projector needs at least two layers".into()));
        }
        if dims[0] != self.encoder.fused_dim {
            return Err(Error::Config(format!(
                "projector input {} must match fused_dim {}",
                dims[0], self.encoder.fused_dim
            )));
        }
        if self.projector.embedding_dim() < 2 || dims.contains(&0) {
            return Err(Error::Config("projector widths must be positive and end at >= 2".into()));
        }
        Ok(())
    }
}

struct Stage {
    down: Conv2d,
    refine: Conv2d,
}

pub(crate) struct EncoderCache {
    stem: Conv2dCache,
    stem_out: Array4<f64>,
    stages: Vec<StageCache>,
    resizes: Vec<Resize>,
}

struct StageCache {
    down: Conv2dCache,
    down_out: Array4<f64>,
    refine: Conv2dCache,
    refine_out: Array4<f64>,
}

pub(crate) struct DecoderCache {
    hidden: Conv2dCache,
    hidden_out: Array4<f64>,
    classifier: Conv2dCache,
    resize: Resize,
}

pub(crate) struct ProjectorCache {
    inputs: Vec<Array2<f64>>,
    norms: Vec<BatchNormCache>,
    activations: Vec<Array2<f64>>,
}

/// How the projector's normalization layers pick their statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorMode {
    /// Batch statistics, running estimates updated.
    Train,
    /// Batch statistics, running estimates untouched.
    Batch,
    /// Running estimates.
    Eval,
}

/// Gates the gradient flowing from the projection head into the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientGate {
    blocked: bool,
}

/// When `enabled`, gradients reaching the pooled features stop there.
pub fn stop_gradient_boundary(enabled: bool) -> GradientGate {
    GradientGate { blocked: enabled }
}

impl GradientGate {
    pub fn is_blocked(&self) -> bool {
        self.blocked
    }

    pub fn pass<T>(&self, grad: T) -> Option<T> {
        (!self.blocked).then_some(grad)
    }
}

/// Resizes every stage to the finest grid and concatenates along channels.
pub fn fuse_multiscale(stages: &[Array4<f64>]) -> Result<FeatureMap> {
    let first = stages
        .first()
        .ok_or_else(|| Error::invalid("cannot fuse an empty stage list"))?;
    let (b, _, m, n) = first.dim();
    let mut resized = Vec::with_capacity(stages.len());
    for st in stages {
        let (sb, _, sm, sn) = st.dim();
        if sb != b {
            return Err(Error::shape(format!("stage batch {sb} differs from {b}")));
        }
        resized.push(Resize::new((sm, sn), (m, n)).forward(st.view()));
    }
    let views: Vec<_> = resized.iter().map(|a| a.view()).collect();
    FeatureMap::new(concatenate(Axis(1), &views).expect("matching grids"))
}

/// Segmentation network with its training-only projection head.
pub struct SegModel {
    spec: ModelSpec,
    params: ParamStore,
    stem: Conv2d,
    stages: Vec<Stage>,
    dec_hidden: Conv2d,
    dec_classifier: Conv2d,
    proj_blocks: Vec<(Linear, BatchNorm1d)>,
    proj_out: Linear,
    projector_calls: AtomicUsize,
}

impl std::fmt::Debug for SegModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegModel")
            .field("spec", &self.spec)
            .field("params", &self.params.len())
            .finish()
    }
}

impl SegModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::default();
        let enc = &spec.encoder;
        let stem = Conv2d::new(
            &mut store,
            "encoder.stem",
            ParamGroup::Encoder,
            enc.in_channels,
            enc.stem_channels,
            3,
            2,
            &mut rng,
        );
        let mut stages = Vec::new();
        let (mut cin, mut stride) = (enc.stem_channels, 2);
        for (i, (&cout, &s)) in enc.stage_channels.iter().zip(&enc.stage_strides).enumerate() {
            let down = Conv2d::new(
                &mut store,
                &format!("encoder.stage{i}.down"),
                ParamGroup::Encoder,
                cin,
                cout,
                3,
                s / stride,
                &mut rng,
            );
            let refine = Conv2d::new(
                &mut store,
                &format!("encoder.stage{i}.refine"),
                ParamGroup::Encoder,
                cout,
                cout,
                3,
                1,
                &mut rng,
            );
            stages.push(Stage { down, refine });
            cin = cout;
            stride = s;
        }
        let dec = &spec.decoder;
        let dec_hidden = Conv2d::new(
            &mut store,
            "decoder.hidden",
            ParamGroup::Decoder,
            enc.fused_dim,
            dec.hidden_channels,
            1,
            1,
            &mut rng,
        );
        let dec_classifier = Conv2d::new(
            &mut store,
            "decoder.classifier",
            ParamGroup::Decoder,
            dec.hidden_channels,
            dec.num_classes,
            1,
            1,
            &mut rng,
        );
        let dims = &spec.projector.layer_dims;
        let mut proj_blocks = Vec::new();
        for (i, w) in dims[..dims.len() - 1].windows(2).enumerate() {
            let lin = Linear::new(
                &mut store,
                &format!("projector.layer{i}"),
                ParamGroup::Projector,
                w[0],
                w[1],
                &mut rng,
            );
            let bn = BatchNorm1d::new(&mut store, &format!("projector.norm{i}"), ParamGroup::Projector, w[1]);
            proj_blocks.push((lin, bn));
        }
        let last = dims.len() - 1;
        let proj_out = Linear::new(
            &mut store,
            &format!("projector.layer{}", last - 1),
            ParamGroup::Projector,
            dims[last - 1],
            dims[last],
            &mut rng,
        );
        Ok(Self {
            spec,
            params: store,
            stem,
            stages,
            dec_hidden,
            dec_classifier,
            proj_blocks,
            proj_out,
            projector_calls: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of projector forward passes since construction.
    pub fn projector_calls(&self) -> usize {
        self.projector_calls.load(Ordering::Relaxed)
    }

    /// Non-trainable state: running statistics of the projector normalization.
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        self.proj_blocks
            .iter()
            .enumerate()
            .flat_map(|(i, (_, bn))| {
                [
                    (format!("projector.norm{i}.running_mean"), bn.running_mean.to_vec()),
                    (format!("projector.norm{i}.running_var"), bn.running_var.to_vec()),
                ]
            })
            .collect()
    }

    pub fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<()> {
        for (i, (_, bn)) in self.proj_blocks.iter_mut().enumerate() {
            let target = if name == format!("projector.norm{i}.running_mean") {
                &mut bn.running_mean
            } else if name == format!("projector.norm{i}.running_var") {
                &mut bn.running_var
            } else {
                continue;
            };
            if target.len() != values.len() {
                return Err(Error::shape(format!("buffer {name} has length {}", target.len())));
            }
            target.assign(&ndarray::ArrayView1::from(values));
            return Ok(());
        }
        Err(Error::invalid(format!("unknown buffer {name}")))
    }

    fn check_input(&self, x: ArrayView4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let s = self.spec.encoder.max_stride();
        if c != self.spec.encoder.in_channels {
            return Err(Error::shape(format!(
                "expected {} input channels, got {c}",
                self.spec.encoder.in_channels
            )));
        }
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by the encoder stride {s}"
            )));
        }
        Ok(())
    }

    /// Encoder plus multi-scale fusion: `(b, 3, h, w) -> (b, d, h/s, w/s)`.
    pub fn encode(&self, x: &Array4<f64>) -> Result<FeatureMap> {
        let (y, _) = self.encode_forward(x.view())?;
        FeatureMap::new(y)
    }

    pub(crate) fn encode_forward(&self, x: ArrayView4<f64>) -> Result<(Array4<f64>, EncoderCache)> {
        self.check_input(x)?;
        let p = &self.params;
        let (stem_out, stem) = self.stem.forward(p, x);
        let stem_out = relu(stem_out);
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let input = caches.last().map_or(&stem_out, |c: &StageCache| &c.refine_out);
            let (d, down) = stage.down.forward(p, input.view());
            let down_out = relu(d);
            let (r, refine) = stage.refine.forward(p, down_out.view());
            caches.push(StageCache {
                down,
                down_out,
                refine,
                refine_out: relu(r),
            });
        }
        let (_, _, m, n) = caches[0].refine_out.dim();
        let resizes: Vec<Resize> = caches
            .iter()
            .map(|c| {
                let (_, _, sm, sn) = c.refine_out.dim();
                Resize::new((sm, sn), (m, n))
            })
            .collect();
        let parts: Vec<Array4<f64>> = caches
            .iter()
            .zip(&resizes)
            .map(|(c, r)| r.forward(c.refine_out.view()))
            .collect();
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        let fused = concatenate(Axis(1), &views).expect("matching grids");
        Ok((
            fused,
            EncoderCache {
                stem,
                stem_out,
                stages: caches,
                resizes,
            },
        ))
    }

    pub(crate) fn encode_backward(&self, cache: &EncoderCache, dy: ArrayView4<f64>, grads: &mut Gradients) {
        let p = &self.params;
        let mut offset = 0;
        let mut stage_grads = Vec::with_capacity(self.stages.len());
        for (c, r) in self.spec.encoder.stage_channels.iter().zip(&cache.resizes) {
            stage_grads.push(r.backward(dy.slice(s![.., offset..offset + c, .., ..])));
            offset += c;
        }
        let mut carry: Option<Array4<f64>> = None;
        for ((stage, sc), mut g) in self.stages.iter().zip(&cache.stages).zip(stage_grads).rev() {
            if let Some(c) = carry.take() {
                g += &c;
            }
            let g = relu_backward(g, &sc.refine_out);
            let g = stage.refine.backward(p, &sc.refine, g.view(), grads, true).expect("input grad");
            let g = relu_backward(g, &sc.down_out);
            carry = stage.down.backward(p, &sc.down, g.view(), grads, true);
        }
        let g = relu_backward(carry.expect("at least one stage"), &cache.stem_out);
        self.stem.backward(p, &cache.stem, g.view(), grads, false);
    }

    /// Per-pixel class logits at `out_hw`.
    pub fn decode(&self, y: &FeatureMap, out_hw: (usize, usize)) -> Result<Array4<f64>> {
        Ok(self.decode_forward(y.values().view(), out_hw)?.0)
    }

    pub(crate) fn decode_forward(
        &self,
        y: ArrayView4<f64>,
        out_hw: (usize, usize),
    ) -> Result<(Array4<f64>, DecoderCache)> {
        let (_, d, m, n) = y.dim();
        if d != self.spec.encoder.fused_dim {
            return Err(Error::shape(format!(
                "decoder expects {} channels, got {d}",
                self.spec.encoder.fused_dim
            )));
        }
        let p = &self.params;
        let (h, hidden) = self.dec_hidden.forward(p, y);
        let hidden_out = relu(h);
        let (small, classifier) = self.dec_classifier.forward(p, hidden_out.view());
        let resize = Resize::new((m, n), out_hw);
        let logits = resize.forward(small.view());
        Ok((
            logits,
            DecoderCache {
                hidden,
                hidden_out,
                classifier,
                resize,
            },
        ))
    }

    pub(crate) fn decode_backward(
        &self,
        cache: &DecoderCache,
        dlogits: ArrayView4<f64>,
        grads: &mut Gradients,
    ) -> Array4<f64> {
        let p = &self.params;
        let g = cache.resize.backward(dlogits);
        let g = self
            .dec_classifier
            .backward(p, &cache.classifier, g.view(), grads, true)
            .expect("input grad");
        let g = relu_backward(g, &cache.hidden_out);
        self.dec_hidden
            .backward(p, &cache.hidden, g.view(), grads, true)
            .expect("input grad")
    }

    /// Inference path: encoder and decoder only, argmax labels `(b, h, w)`.
    pub fn predict(&self, x: &Array4<f64>) -> Result<Array3<u8>> {
        let (_, _, h, w) = x.dim();
        let (y, _) = self.encode_forward(x.view())?;
        let (logits, _) = self.decode_forward(y.view(), (h, w))?;
        Ok(argmax_classes(logits.view()))
    }

    /// Pooled features `(b, d)` to embeddings `(b, p)`.
    pub fn project(&mut self, pooled: &Array2<f64>, mode: ProjectorMode) -> Result<Array2<f64>> {
        Ok(self.project_forward(pooled.view(), mode)?.0)
    }

    pub(crate) fn project_forward(
        &mut self,
        pooled: ArrayView2<f64>,
        mode: ProjectorMode,
    ) -> Result<(Array2<f64>, ProjectorCache)> {
        let (b, d) = pooled.dim();
        if d != self.spec.projector.layer_dims[0] {
            return Err(Error::shape(format!(
                "projector expects width {}, got {d}",
                self.spec.projector.layer_dims[0]
            )));
        }
        if mode != ProjectorMode::Eval && b < 2 {
            return Err(Error::invalid(format!(
                "projector batch statistics need at least 2 rows, got {b}"
            )));
        }
        self.projector_calls.fetch_add(1, Ordering::Relaxed);
        let p = &self.params;
        let mut cache = ProjectorCache {
            inputs: Vec::new(),
            norms: Vec::new(),
            activations: Vec::new(),
        };
        let mut x = pooled.to_owned();
        for (lin, bn) in self.proj_blocks.iter_mut() {
            let h = lin.forward(p, x.view());
            cache.inputs.push(x);
            let normed = match mode {
                ProjectorMode::Train => {
                    let (y, c) = bn.forward_train(p, h.view());
                    cache.norms.push(c);
                    y
                }
                ProjectorMode::Batch => {
                    let (y, c) = bn.forward_batch(p, h.view());
                    cache.norms.push(c);
                    y
                }
                ProjectorMode::Eval => bn.forward_eval(p, h.view()),
            };
            x = normed.mapv_into(|v| v.max(0.0));
            cache.activations.push(x.clone());
        }
        let z = self.proj_out.forward(p, x.view());
        cache.inputs.push(x);
        Ok((z, cache))
    }

    /// Returns the gradient with respect to the pooled input.
    pub(crate) fn project_backward(
        &self,
        cache: &ProjectorCache,
        dz: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        let p = &self.params;
        let mut g = self
            .proj_out
            .backward(p, cache.inputs.last().expect("final input").view(), dz, grads);
        for (i, (lin, bn)) in self.proj_blocks.iter().enumerate().rev() {
            ndarray::Zip::from(&mut g).and(&cache.activations[i]).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
            let gh = bn.backward(p, &cache.norms[i], g.view(), grads);
            g = lin.backward(p, cache.inputs[i].view(), gh.view(), grads);
        }
        g
    }
}
