//! Masked-prediction upstream: a small transformer encoder over log-mel
//! frames, pretrained to predict k-means cluster ids of masked spans.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::attention::BlockCache;
use crate::nn::layers::{cross_entropy, xavier_uniform};
use crate::nn::{adam_step, clip_grad_norm, zero_grads, AdamState, Linear, Parameter, Scalar, Tensor, TransformerBlock};
use crate::seed;

/// Span-masking parameters. Each frame starts a span with probability
/// `start_prob`; a span covers `span_len` frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub start_prob: f64,
    pub span_len: usize,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            start_prob: 0.08,
            span_len: 10,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.start_prob) {
            return Err(Error::Range {
                field: "mask.start_prob".into(),
                message: format!("{} is not in [0, 1]", self.start_prob),
            });
        }
        if self.span_len == 0 {
            return Err(Error::Range {
                field: "mask.span_len".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Span mask of length `t`. Overlapping spans are allowed; spans are clipped
/// at the end of the sequence.
pub fn sample_mask(t: usize, spec: &MaskSpec) -> Vec<bool> {
    let mut rng = seed::rng(spec.seed);
    let mut mask = vec![false; t];
    for start in 0..t {
        if rng.random::<f64>() < spec.start_prob {
            let end = (start + spec.span_len).min(t);
            mask[start..end].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

/// Like [`sample_mask`] but retries with `seed + 1, seed + 2, ...` until at
/// least one frame is masked.
pub fn sample_nonempty_mask(t: usize, spec: &MaskSpec) -> Result<Vec<bool>> {
    if t == 0 {
        return Err(Error::EmptyBatch);
    }
    if spec.start_prob <= 0.0 {
        return Err(Error::DegenerateInput("mask start probability is zero".into()));
    }
    let mut s = *spec;
    for _ in 0..10_000 {
        let mask = sample_mask(t, &s);
        if mask.iter().any(|&m| m) {
            return Ok(mask);
        }
        s.seed = s.seed.wrapping_add(1);
    }
    Err(Error::DegenerateInput(format!(
        "no non-empty mask found for T = {t}, p = {}",
        spec.start_prob
    )))
}

/// Replaces masked rows by `embedding`.
pub fn apply_mask<S: Scalar>(x: &Tensor<S>, mask: &[bool], embedding: &[S]) -> Result<Tensor<S>> {
    if mask.len() != x.rows() || embedding.len() != x.cols() || x.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "mask of length {} and embedding of width {} for input {:?}",
            mask.len(),
            embedding.len(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out.row_mut(t).copy_from_slice(embedding);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpstreamConfig {
    pub n_mels: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Number of cluster targets, K.
    pub codebook_size: usize,
    pub positional_encoding: bool,
}

impl Default for UpstreamConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            d_model: 96,
            n_blocks: 3,
            n_heads: 4,
            ffn_dim: 384,
            codebook_size: 50,
            positional_encoding: true,
        }
    }
}

impl UpstreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Range {
                field: format!("model.{field}"),
                message,
            })
        };
        for (field, v) in [
            ("n_mels", self.n_mels),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if self.codebook_size < 2 {
            return bad("codebook_size", "need at least 2 clusters".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            );
        }
        Ok(())
    }
}

/// Sinusoidal position code for frame `t`, dimension `i` of `d`.
fn position_code(t: usize, i: usize, d: usize) -> f64 {
    let angle = t as f64 / 10000f64.powf((i / 2 * 2) as f64 / d as f64);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

const PRED_INIT_SCALE: f64 = 0.1;

/// Input normalization, input projection, mask embedding, positional code,
/// transformer blocks and a linear prediction head over K clusters.
#[derive(Debug, Clone)]
pub struct UpstreamModel<S: Scalar = f32> {
    config: UpstreamConfig,
    /// Per-band feature mean and inverse std; fixed before pretraining,
    /// never trained.
    pub norm_mean: Tensor<S>,
    pub norm_inv_std: Tensor<S>,
    pub proj: Linear<S>,
    pub mask_emb: Parameter<S>,
    pub blocks: Vec<TransformerBlock<S>>,
    pub pred: Linear<S>,
}

pub struct UpstreamCache<S> {
    input: Tensor<S>,
    mask: Option<Vec<bool>>,
    blocks: Vec<BlockCache<S>>,
}

impl<S: Scalar> UpstreamModel<S> {
    pub fn new(config: UpstreamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let d = config.d_model;
        let proj = Linear::new("upstream.proj", config.n_mels, d, &mut rng);
        let mask_emb = Parameter::new(
            "upstream.mask_emb",
            Tensor::from_vec(&[d], xavier_uniform::<S>(1, d, &mut rng).into_data())?,
        );
        let blocks = (0..config.n_blocks)
            .map(|i| {
                TransformerBlock::new(&format!("upstream.block{i}"), d, config.n_heads, config.ffn_dim, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut pred = Linear::new("upstream.pred", d, config.codebook_size, &mut rng);
        // Xavier scaled down so the untrained head predicts near-uniform
        // cluster posteriors.
        pred.weight.value.scale(S::of(PRED_INIT_SCALE));
        Ok(Self {
            norm_mean: Tensor::zeros(&[config.n_mels]),
            norm_inv_std: Tensor::filled(&[config.n_mels], S::one()),
            config,
            proj,
            mask_emb,
            blocks,
            pred,
        })
    }

    pub fn config(&self) -> &UpstreamConfig {
        &self.config
    }

    /// Sets the global per-band normalization from training frames.
    pub fn fit_normalization<'a>(&mut self, feats: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<()> {
        let n_mels = self.config.n_mels;
        let mut sum = vec![0.0f64; n_mels];
        let mut sq = vec![0.0f64; n_mels];
        let mut count = 0usize;
        for f in feats {
            check_dim(f.dim(), n_mels)?;
            for t in 0..f.frames() {
                for (i, &v) in f.frame(t).iter().enumerate() {
                    sum[i] += v as f64;
                    sq[i] += (v as f64) * (v as f64);
                }
            }
            count += f.frames();
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        for i in 0..n_mels {
            let mean = sum[i] / count as f64;
            let var = (sq[i] / count as f64 - mean * mean).max(0.0);
            self.norm_mean.data_mut()[i] = S::of(mean);
            self.norm_inv_std.data_mut()[i] = S::of(1.0 / (var + 1e-6).sqrt());
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        check_dim(x.cols(), self.config.n_mels)?;
        let mut out = x.clone();
        let (m, s) = (self.norm_mean.data(), self.norm_inv_std.data());
        for t in 0..out.rows() {
            for (i, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = (*v - m[i]) * s[i];
            }
        }
        Ok(out)
    }

    /// Encoder forward pass, optionally with masking. Returns the final
    /// block's hidden states.
    pub fn encode(&self, x: &Tensor<S>, mask: Option<&[bool]>) -> Result<(Tensor<S>, UpstreamCache<S>)> {
        if x.shape().len() != 2 || x.rows() == 0 {
            return Err(Error::ShapeMismatch(format!("upstream input must be T x D, got {:?}", x.shape())));
        }
        let input = self.normalize(x)?;
        let mut h = self.proj.forward(&input)?;
        if let Some(m) = mask {
            h = apply_mask(&h, m, self.mask_emb.value.data())?;
        }
        if self.config.positional_encoding {
            let d = self.config.d_model;
            for t in 0..h.rows() {
                for (i, v) in h.row_mut(t).iter_mut().enumerate() {
                    *v += S::of(position_code(t, i, d));
                }
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h)?;
            h = y;
            caches.push(c);
        }
        h.ensure_finite("upstream hidden states")?;
        Ok((
            h,
            UpstreamCache {
                input,
                mask: mask.map(<[bool]>::to_vec),
                blocks: caches,
            },
        ))
    }

    /// Accumulates encoder gradients for upstream gradient `dh`.
    pub fn encode_backward(&mut self, cache: &UpstreamCache<S>, dh: &Tensor<S>) {
        let mut d = dh.clone();
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = b.backward(c, &d);
        }
        if let Some(mask) = &cache.mask {
            let g = self.mask_emb.grad.data_mut();
            for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                for (gi, &v) in g.iter_mut().zip(d.row(t)) {
                    *gi += v;
                }
                d.row_mut(t).iter_mut().for_each(|v| *v = S::zero());
            }
        }
        self.proj.backward(&cache.input, &d);
    }

    /// Mean cross-entropy of the prediction head over masked frames. With
    /// `backward`, gradients are accumulated into the parameters.
    pub fn masked_prediction_loss(
        &mut self,
        x: &Tensor<S>,
        targets: &[usize],
        mask: &[bool],
        backward: bool,
    ) -> Result<f64> {
        if x.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if targets.len() != x.rows() {
            return Err(Error::LengthMismatch(targets.len(), x.rows()));
        }
        let idx: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
        if idx.is_empty() {
            return Err(Error::DegenerateInput("no masked frames".into()));
        }
        let (h, cache) = self.encode(x, Some(mask))?;
        let hm = h.gather_rows(&idx);
        let logits = self.pred.forward(&hm)?;
        let k = self.config.codebook_size;
        let scale = S::of(1.0 / idx.len() as f64);
        let mut loss = 0.0;
        let mut dlogits = Tensor::zeros(&[idx.len(), k]);
        for (r, &t) in idx.iter().enumerate() {
            let (l, g) = cross_entropy(logits.row(r), targets[t])?;
            loss += l.as_f64();
            for (o, gv) in dlogits.row_mut(r).iter_mut().zip(g) {
                *o = gv * scale;
            }
        }
        let loss = loss / idx.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("pretraining loss".into()));
        }
        if backward {
            let dhm = self.pred.backward(&hm, &dlogits);
            let mut dh = Tensor::zeros(h.shape());
            for (r, &t) in idx.iter().enumerate() {
                dh.row_mut(t).copy_from_slice(dhm.row(r));
            }
            self.encode_backward(&cache, &dh);
        }
        Ok(loss)
    }

    /// Every trainable parameter, in a fixed order.
    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut out = self.proj.params();
        out.push(&self.mask_emb);
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.pred.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = self.proj.params_mut();
        out.push(&mut self.mask_emb);
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.pred.params_mut());
        out
    }

    /// Parameters on the inference path (no mask embedding, no prediction
    /// head). These are what finetuning updates.
    pub fn encoder_params(&self) -> Vec<&Parameter<S>> {
        let mut out = self.proj.params();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = self.proj.params_mut();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out
    }
}

impl UpstreamModel<f32> {
    /// All tensors needed to rebuild the model: parameters plus the
    /// normalization buffers.
    pub fn state(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![
            ("upstream.norm.mean".to_string(), self.norm_mean.clone()),
            ("upstream.norm.inv_std".to_string(), self.norm_inv_std.clone()),
        ];
        out.extend(self.params().into_iter().map(|p| (p.name.clone(), p.value.clone())));
        out
    }

    /// Overwrites every named tensor present in `tensors`. Tensors with
    /// other prefixes are ignored; a shape mismatch is an error.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<usize> {
        let mut loaded = 0;
        for (name, dst) in [
            ("upstream.norm.mean", &mut self.norm_mean),
            ("upstream.norm.inv_std", &mut self.norm_inv_std),
        ] {
            if let Some(t) = tensors.get(name) {
                copy_checked(name, dst, t)?;
                loaded += 1;
            }
        }
        for p in self.params_mut() {
            if let Some(t) = tensors.get(&p.name) {
                copy_checked(&p.name, &mut p.value, t)?;
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn from_state(config: UpstreamConfig, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        let expected = m.params().len() + 2;
        let loaded = m.load_tensors(tensors)?;
        if loaded != expected {
            return Err(Error::Container(format!(
                "upstream state has {loaded} of {expected} tensors"
            )));
        }
        Ok(m)
    }
}

fn copy_checked<S: Scalar>(name: &str, dst: &mut Tensor<S>, src: &Tensor<S>) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::IncompatibleCheckpoints(format!(
            "{name}: shape {:?} vs {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

fn check_dim(actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::ShapeMismatch(format!(
            "features have {actual} coefficients, model expects {expected}"
        )));
    }
    Ok(())
}

/// One masked-prediction step on one utterance: samples a non-empty mask,
/// accumulates gradients and returns the loss.
pub fn pretrain_step(
    model: &mut UpstreamModel,
    features: &FeatureSequence,
    targets: &[usize],
    spec: &MaskSpec,
) -> Result<f64> {
    let mask = sample_nonempty_mask(features.frames(), spec)?;
    model.masked_prediction_loss(features.data(), targets, &mask, true)
}

/// Frame-level representations: the encoder without masking or the
/// prediction head.
pub fn extract(model: &UpstreamModel, features: &FeatureSequence) -> Result<FeatureSequence> {
    let (h, _) = model.encode(features.data(), None)?;
    FeatureSequence::new(h, features.frame_shift_ms, features.frame_length_ms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Utterances longer than this are randomly cropped for each step.
    pub max_frames: usize,
    pub max_grad_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            lr: 1e-3,
            max_frames: 200,
            max_grad_norm: Some(1.0),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str| {
            Err(Error::Range {
                field: format!("pretrain.{field}"),
                message: "must be positive".into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.max_frames == 0 {
            return bad("max_frames");
        }
        if !(self.lr > 0.0) {
            return bad("lr");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainLog {
    /// Mean masked-frame loss of each step's batch.
    pub losses: Vec<f64>,
}

/// Minibatch masked-prediction pretraining with Adam. Batches are drawn
/// uniformly with replacement; masks and crops are seeded per step.
pub fn pretrain(
    model: &mut UpstreamModel,
    feats: &[FeatureSequence],
    targets: &[Vec<usize>],
    mask: &MaskSpec,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainLog> {
    cfg.validate()?;
    mask.validate()?;
    if feats.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if feats.len() != targets.len() {
        return Err(Error::LengthMismatch(feats.len(), targets.len()));
    }
    let mut rng = seed::rng(seed);
    let mut adam = AdamState::new(cfg.lr);
    let mut log = PretrainLog::default();
    for step in 0..cfg.steps {
        zero_grads(&mut model.params_mut());
        let mut total = 0.0;
        for b in 0..cfg.batch_size {
            let i = rng.random_range(0..feats.len());
            let f = &feats[i];
            let (start, len) = if f.frames() > cfg.max_frames {
                (rng.random_range(0..=f.frames() - cfg.max_frames), cfg.max_frames)
            } else {
                (0, f.frames())
            };
            let rows: Vec<usize> = (start..start + len).collect();
            let x = f.data().gather_rows(&rows);
            let spec = mask.with_seed(seed::derive_seed(mask.seed, &format!("pretrain/{step}/{b}")));
            let m = sample_nonempty_mask(len, &spec)?;
            total += model.masked_prediction_loss(&x, &targets[i][start..start + len], &m, true)?;
        }
        let mut params = model.params_mut();
        crate::nn::scale_grads(&mut params, 1.0 / cfg.batch_size as f32);
        if let Some(max) = cfg.max_grad_norm {
            clip_grad_norm(&mut params, max);
        }
        adam_step(&mut params, &mut adam);
        log.losses.push(total / cfg.batch_size as f64);
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedAccuracy {
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent masked-frame target.
    pub majority_baseline: f64,
    pub frames: usize,
}

/// Argmax accuracy of the prediction head on masked frames.
pub fn masked_accuracy(
    model: &UpstreamModel,
    feats: &[FeatureSequence],
    targets: &[Vec<usize>],
    mask: &MaskSpec,
) -> Result<MaskedAccuracy> {
    let mut correct = 0usize;
    let mut frames = 0usize;
    let mut counts = vec![0usize; model.config.codebook_size];
    for (i, (f, tg)) in feats.iter().zip(targets).enumerate() {
        let spec = mask.with_seed(seed::derive_seed(mask.seed, &format!("heldout/{i}")));
        let m = sample_nonempty_mask(f.frames(), &spec)?;
        let idx: Vec<usize> = (0..m.len()).filter(|&t| m[t]).collect();
        let (h, _) = model.encode(f.data(), Some(&m))?;
        let logits = model.pred.forward(&h.gather_rows(&idx))?;
        for (r, &t) in idx.iter().enumerate() {
            let row = logits.row(r);
            let pred = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(pred == tg[t]);
            counts[tg[t]] += 1;
        }
        frames += idx.len();
    }
    if frames == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(MaskedAccuracy {
        accuracy: correct as f64 / frames as f64,
        majority_baseline: *counts.iter().max().unwrap_or(&0) as f64 / frames as f64,
        frames,
    })
}
