//! Task training in frozen or finetune mode, checkpoint stores, and the two
//! weight-averaging recipes (top-k by dev metric, best plus a fixed step).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::downstream::{classify, pool_mean, ClassifierHead};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::layers::cross_entropy;
use crate::nn::{adam_step, clip_grad_norm, scale_grads, zero_grads, AdamState, Parameter, Tensor};
use crate::seed;
use crate::upstream::{extract, UpstreamModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Only the head is trained; upstream representations are computed once.
    Frozen,
    /// Head and upstream encoder are trained jointly.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub head_lr: f64,
    /// Defaults to a tenth of `head_lr`. Ignored in frozen mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upstream_lr: Option<f64>,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every_steps: u64,
    /// Evaluations without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Frozen,
            head_lr: 1e-2,
            upstream_lr: None,
            batch_size: 16,
            max_steps: 1000,
            eval_every_steps: 100,
            patience: 10,
            seed: 0,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn upstream_lr(&self) -> f64 {
        self.upstream_lr.unwrap_or(self.head_lr / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Range {
                field: format!("train.{field}"),
                message: message.into(),
            })
        };
        if !(self.head_lr > 0.0) {
            return bad("head_lr", "must be positive");
        }
        if let Some(lr) = self.upstream_lr {
            if !(lr > 0.0) {
                return bad("upstream_lr", "must be positive");
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps", "must be positive");
        }
        if self.eval_every_steps == 0 {
            return bad("eval_every_steps", "must be positive");
        }
        if self.patience == 0 {
            return bad("patience", "must be positive");
        }
        Ok(())
    }
}

/// Immutable snapshot of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub step: u64,
    /// Dev-set accuracy; `None` after averaging until re-evaluated.
    pub dev_metric: Option<f64>,
    pub config_fingerprint: String,
    /// Task name to ordered label set, for every head in the checkpoint.
    pub label_sets: BTreeMap<String, Vec<String>>,
}

impl Checkpoint {
    pub fn from_params<'a>(
        params: impl IntoIterator<Item = &'a Parameter<f32>>,
        step: u64,
        dev_metric: Option<f64>,
        config_fingerprint: &str,
        label_sets: BTreeMap<String, Vec<String>>,
    ) -> Self {
        Self {
            tensors: params.into_iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            step,
            dev_metric,
            config_fingerprint: config_fingerprint.to_string(),
            label_sets,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_map(&self) -> BTreeMap<String, Tensor<f32>> {
        self.tensors.iter().cloned().collect()
    }

    /// Loads the checkpoint into a head and, when it carries upstream
    /// tensors, into the upstream.
    pub fn apply(&self, upstream: &mut UpstreamModel, head: &mut ClassifierHead) -> Result<()> {
        let map = self.tensor_map();
        let n = head.load_tensors(&map)? + upstream.load_tensors(&map)?;
        if n != self.tensors.len() {
            return Err(Error::IncompatibleCheckpoints(format!(
                "{} of {} checkpoint tensors matched the model",
                n,
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

/// Append-only, step-ordered checkpoints of one training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointStore {
    pub run_id: String,
    checkpoints: Vec<Checkpoint>,
}

impl CheckpointStore {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            checkpoints: Vec::new(),
        }
    }

    pub fn push(&mut self, ck: Checkpoint) -> Result<()> {
        if let Some(last) = self.checkpoints.last() {
            if ck.step <= last.step {
                return Err(Error::IncompatibleCheckpoints(format!(
                    "step {} does not follow step {}",
                    ck.step, last.step
                )));
            }
            if ck.config_fingerprint != last.config_fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected: last.config_fingerprint.clone(),
                    found: ck.config_fingerprint,
                });
            }
        }
        ck_finite(&ck)?;
        self.checkpoints.push(ck);
        Ok(())
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    /// Highest dev metric, earliest step on ties.
    pub fn best(&self) -> Result<&Checkpoint> {
        let step = select_top_k(self, 1)?[0].step;
        Ok(self.checkpoints.iter().find(|c| c.step == step).expect("selected from store"))
    }

    /// Relative path of a checkpoint file: `<run_id>/step<N>.ckpt`.
    pub fn file_name(&self, step: u64) -> PathBuf {
        Path::new(&self.run_id).join(format!("step{step}.ckpt"))
    }
}

fn ck_finite(ck: &Checkpoint) -> Result<()> {
    for (name, t) in &ck.tensors {
        t.ensure_finite(name)?;
    }
    Ok(())
}

/// Elementwise mean of every named tensor. Accumulates in double precision
/// so averaging identical checkpoints is exact.
pub fn average_checkpoints(cks: &[Checkpoint]) -> Result<Checkpoint> {
    let first = cks.first().ok_or(Error::EmptyList)?;
    for c in &cks[1..] {
        if c.config_fingerprint != first.config_fingerprint {
            return Err(Error::IncompatibleCheckpoints(format!(
                "fingerprints {} and {} differ",
                first.config_fingerprint, c.config_fingerprint
            )));
        }
        if c.tensors.len() != first.tensors.len() {
            return Err(Error::IncompatibleCheckpoints("tensor counts differ".into()));
        }
        for ((na, ta), (nb, tb)) in first.tensors.iter().zip(&c.tensors) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::IncompatibleCheckpoints(format!(
                    "{na} {:?} vs {nb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
    }
    let n = cks.len() as f64;
    let tensors = first
        .tensors
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let mut acc = vec![0.0f64; t.len()];
            for c in cks {
                for (a, &v) in acc.iter_mut().zip(c.tensors[i].1.data()) {
                    *a += v as f64;
                }
            }
            let data = acc.into_iter().map(|a| (a / n) as f32).collect();
            (name.clone(), Tensor::from_vec(t.shape(), data).expect("same shape"))
        })
        .collect();
    Ok(Checkpoint {
        tensors,
        step: cks.iter().map(|c| c.step).max().unwrap_or(0),
        dev_metric: None,
        config_fingerprint: first.config_fingerprint.clone(),
        label_sets: first.label_sets.clone(),
    })
}

/// The `k` checkpoints with the highest dev metric, earlier step first on
/// ties. Returned best first.
pub fn select_top_k(store: &CheckpointStore, k: usize) -> Result<Vec<Checkpoint>> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if k == 0 {
        return Err(Error::Range {
            field: "top_k".into(),
            message: "k must be at least 1".into(),
        });
    }
    let mut ranked: Vec<&Checkpoint> = store.checkpoints.iter().collect();
    for c in &ranked {
        if c.dev_metric.is_none() {
            return Err(Error::MissingDevMetric(c.step));
        }
    }
    ranked.sort_by(|a, b| {
        b.dev_metric
            .unwrap()
            .total_cmp(&a.dev_metric.unwrap())
            .then(a.step.cmp(&b.step))
    });
    Ok(ranked.into_iter().take(k).cloned().collect())
}

/// `[best-dev, first checkpoint at or after step]`, deduplicated.
pub fn select_best_plus_step(store: &CheckpointStore, step: u64) -> Result<Vec<Checkpoint>> {
    let best = select_top_k(store, 1)?.remove(0);
    let at = store
        .checkpoints
        .iter()
        .find(|c| c.step >= step)
        .ok_or(Error::StepNotReached {
            requested: step,
            last: store.last().map(|c| c.step).unwrap_or(0),
        })?;
    if at.step == best.step {
        Ok(vec![best])
    } else {
        Ok(vec![best, at.clone()])
    }
}

/// A training or evaluation utterance: its log-mel frames and label.
#[derive(Debug, Clone)]
pub struct Example {
    pub features: FeatureSequence,
    pub label: String,
}

/// Fingerprint of a training run: config plus model dimensions.
pub fn train_fingerprint(cfg: &TrainConfig, upstream: &UpstreamModel, head: &ClassifierHead) -> String {
    let blob = serde_json::json!({
        "train": cfg,
        "upstream": upstream.config(),
        "task": head.task_name,
        "labels": head.label_set,
    });
    seed::fingerprint(blob.to_string().as_bytes())
}

fn label_indices(head: &ClassifierHead, examples: &[Example]) -> Result<Vec<usize>> {
    examples.iter().map(|e| head.label_index(&e.label)).collect()
}

/// Pooled upstream representations of a set of examples.
pub fn pooled(upstream: &UpstreamModel, examples: &[Example]) -> Result<Vec<Vec<f32>>> {
    examples
        .iter()
        .map(|e| pool_mean(extract(upstream, &e.features)?.data()))
        .collect()
}

/// Accuracy of argmax predictions on precomputed pooled vectors.
pub fn accuracy_on_pooled(head: &ClassifierHead, pooled: &[Vec<f32>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for (x, &y) in pooled.iter().zip(labels) {
        let (p, _) = classify(x, head)?;
        correct += usize::from(crate::downstream::argmax(&p) == y);
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Trains `head` (and, in finetune mode, the upstream encoder) with
/// minibatch cross-entropy. Every `eval_every_steps` the dev accuracy is
/// computed and a checkpoint of the trainable tensors is appended.
pub fn train(
    upstream: &mut UpstreamModel,
    head: &mut ClassifierHead,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainConfig,
) -> Result<CheckpointStore> {
    cfg.validate()?;
    if dev_set.is_empty() {
        return Err(Error::EmptyDevSet);
    }
    if train_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let y_train = label_indices(head, train_set)?;
    let y_dev = label_indices(head, dev_set)?;
    let fingerprint = train_fingerprint(cfg, upstream, head);
    let label_sets = BTreeMap::from([(head.task_name.clone(), head.label_set.clone())]);
    let mut store = CheckpointStore::new(format!("{}-{}", head.task_name, &fingerprint[..8]));
    let mut rng = seed::rng(cfg.seed);
    let mut head_adam = AdamState::new(cfg.head_lr);
    let mut up_adam = AdamState::new(cfg.upstream_lr());

    let frozen_train = match cfg.mode {
        TrainMode::Frozen => Some(pooled(upstream, train_set)?),
        TrainMode::Finetune => None,
    };
    let frozen_dev = match cfg.mode {
        TrainMode::Frozen => Some(pooled(upstream, dev_set)?),
        TrainMode::Finetune => None,
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for step in 1..=cfg.max_steps {
        zero_grads(&mut head.params_mut());
        if cfg.mode == TrainMode::Finetune {
            zero_grads(&mut upstream.encoder_params_mut());
        }
        let batch: Vec<usize> = (0..cfg.batch_size.min(train_set.len()))
            .map(|_| {
                if cursor == order.len() {
                    order = (0..train_set.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                order[cursor - 1]
            })
            .collect();
        let scale = 1.0 / batch.len() as f32;
        for &i in &batch {
            match &frozen_train {
                Some(p) => {
                    head_backward(head, &p[i], y_train[i])?;
                }
                None => {
                    let (h, cache) = upstream.encode(train_set[i].features.data(), None)?;
                    let x = pool_mean(&h)?;
                    let dx = head_backward(head, &x, y_train[i])?;
                    let t = h.rows();
                    let mut dh = Tensor::zeros(h.shape());
                    let row: Vec<f32> = dx.iter().map(|g| g / t as f32).collect();
                    for r in 0..t {
                        dh.row_mut(r).copy_from_slice(&row);
                    }
                    upstream.encode_backward(&cache, &dh);
                }
            }
        }
        {
            let mut hp = head.params_mut();
            scale_grads(&mut hp, scale);
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut hp, max);
            }
            adam_step(&mut hp, &mut head_adam);
        }
        if cfg.mode == TrainMode::Finetune {
            let mut up = upstream.encoder_params_mut();
            scale_grads(&mut up, scale);
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut up, max);
            }
            adam_step(&mut up, &mut up_adam);
        }

        if step % cfg.eval_every_steps == 0 {
            let metric = match &frozen_dev {
                Some(p) => accuracy_on_pooled(head, p, &y_dev)?,
                None => accuracy_on_pooled(head, &pooled(upstream, dev_set)?, &y_dev)?,
            };
            let mut params: Vec<&Parameter<f32>> = head.params();
            if cfg.mode == TrainMode::Finetune {
                params.extend(upstream.encoder_params());
            }
            store.push(Checkpoint::from_params(
                params,
                step,
                Some(metric),
                &fingerprint,
                label_sets.clone(),
            ))?;
            if metric > best {
                best = metric;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(store)
}

/// Accumulates head gradients for one example; returns d loss / d pooled.
fn head_backward(head: &mut ClassifierHead, x: &[f32], y: usize) -> Result<Vec<f32>> {
    let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
    let z = head.linear.forward(&xt)?;
    let (loss, g) = cross_entropy(z.data(), y)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let dz = Tensor::matrix(1, g.len(), g)?;
    Ok(head.linear.backward(&xt, &dz).into_data())
}

/// Mean cross-entropy of the head over a set, upstream in inference mode.
pub fn mean_loss(upstream: &UpstreamModel, head: &ClassifierHead, set: &[Example]) -> Result<f64> {
    let ys = label_indices(head, set)?;
    let mut total = 0.0;
    for (e, &y) in set.iter().zip(&ys) {
        let x = pool_mean(extract(upstream, &e.features)?.data())?;
        let (_, logp) = classify(&x, head)?;
        total -= logp[y];
    }
    Ok(total / set.len().max(1) as f64)
}

/// Names present in every checkpoint, for diagnostics.
pub fn common_names(cks: &[Checkpoint]) -> BTreeSet<String> {
    let mut it = cks.iter();
    let mut set: BTreeSet<String> = match it.next() {
        Some(c) => c.tensors.iter().map(|(n, _)| n.clone()).collect(),
        None => return BTreeSet::new(),
    };
    for c in it {
        let names: BTreeSet<String> = c.tensors.iter().map(|(n, _)| n.clone()).collect();
        set = set.intersection(&names).cloned().collect();
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::upstream::UpstreamConfig;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn ck(step: u64, metric: f64, w: Vec<f32>) -> Checkpoint {
        Checkpoint {
            tensors: vec![("w".into(), Tensor::from_vec(&[w.len()], w).unwrap())],
            step,
            dev_metric: Some(metric),
            config_fingerprint: "fp".into(),
            label_sets: BTreeMap::new(),
        }
    }

    fn store(metrics: &[f64]) -> CheckpointStore {
        let mut s = CheckpointStore::new("run");
        for (i, &m) in metrics.iter().enumerate() {
            s.push(ck(100 * (i as u64 + 1), m, vec![i as f32])).unwrap();
        }
        s
    }

    #[test]
    fn averaging_identities() {
        let a = ck(1, 0.5, vec![0.0, 2.0]);
        let b = ck(2, 0.5, vec![2.0, 4.0]);
        let avg = average_checkpoints(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(avg.get("w").unwrap().data(), &[1.0, 3.0]);
        assert_eq!(avg.step, 2);
        assert_eq!(avg.dev_metric, None);
        let single = average_checkpoints(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.tensors, a.tensors);
        assert!(matches!(average_checkpoints(&[]), Err(Error::EmptyList)));
        let mut c = b.clone();
        c.config_fingerprint = "other".into();
        assert!(matches!(average_checkpoints(&[a.clone(), c]), Err(Error::IncompatibleCheckpoints(_))));
        let mut d = b.clone();
        d.tensors[0].1 = Tensor::zeros(&[3]);
        assert!(matches!(average_checkpoints(&[a, d]), Err(Error::IncompatibleCheckpoints(_))));
    }

    #[test]
    fn top_k_tie_rule() {
        let s = store(&[0.6, 0.8, 0.8, 0.7]);
        let top: Vec<u64> = select_top_k(&s, 2).unwrap().iter().map(|c| c.step).collect();
        assert_eq!(top, vec![200, 300]);
        assert_eq!(select_top_k(&s, 1).unwrap()[0].step, 200);
        assert_eq!(select_top_k(&s, 10).unwrap().len(), 4);
        assert!(matches!(select_top_k(&CheckpointStore::new("e"), 1), Err(Error::EmptyStore)));
    }

    #[test]
    fn best_plus_step_rules() {
        let metrics: Vec<f64> = (1..=100).map(|i| if i == 100 { 0.9 } else { 0.5 }).collect();
        let s = store(&metrics);
        assert_eq!(select_best_plus_step(&s, 10_000).unwrap().len(), 1);
        let metrics: Vec<f64> = (1..=100).map(|i| if i == 7 { 0.9 } else { 0.5 }).collect();
        let s = store(&metrics);
        let pair: Vec<u64> = select_best_plus_step(&s, 10_000).unwrap().iter().map(|c| c.step).collect();
        assert_eq!(pair, vec![700, 10_000]);
        let short = store(&vec![0.5; 50]);
        assert!(matches!(
            select_best_plus_step(&short, 10_000),
            Err(Error::StepNotReached { requested: 10_000, last: 5000 })
        ));
    }

    #[test]
    fn store_rejects_out_of_order_steps() {
        let mut s = store(&[0.5]);
        assert!(s.push(ck(100, 0.1, vec![0.0])).is_err());
        let mut other = ck(200, 0.1, vec![0.0]);
        other.config_fingerprint = "x".into();
        assert!(matches!(s.push(other), Err(Error::FingerprintMismatch { .. })));
        assert_eq!(s.file_name(300), Path::new("run/step300.ckpt"));
    }

    fn toy_task(seed: u64, n: usize) -> Vec<Example> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|i| {
                let c = i % 2;
                let data = (0..6 * 4)
                    .map(|j| if j % 4 == c { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3f32))
                    .collect();
                Example {
                    features: FeatureSequence::new(Tensor::matrix(6, 4, data).unwrap(), 10.0, 25.0).unwrap(),
                    label: format!("l{c}"),
                }
            })
            .collect()
    }

    fn toy_models() -> (UpstreamModel, ClassifierHead) {
        let cfg = UpstreamConfig {
            n_mels: 4,
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            ffn_dim: 16,
            codebook_size: 3,
            positional_encoding: true,
        };
        (
            UpstreamModel::new(cfg, 1).unwrap(),
            ClassifierHead::new("toy", vec!["l0".into(), "l1".into()], 8, 2).unwrap(),
        )
    }

    #[test]
    fn frozen_training_leaves_upstream_untouched_and_counts_checkpoints() {
        let (mut up, mut head) = toy_models();
        let before = up.state();
        let cfg = TrainConfig {
            max_steps: 1000,
            eval_every_steps: 100,
            patience: 1000,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let s = train(&mut up, &mut head, &toy_task(1, 20), &toy_task(2, 8), &cfg).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(up.state(), before);
        assert!(s.checkpoints().iter().all(|c| c.tensors.iter().all(|(n, _)| n.starts_with("head.toy."))));

        // reproducible, and every checkpoint re-evaluates to its dev metric
        let (mut up2, mut head2) = toy_models();
        let s2 = train(&mut up2, &mut head2, &toy_task(1, 20), &toy_task(2, 8), &cfg).unwrap();
        assert_eq!(s, s2);
        let dev = toy_task(2, 8);
        let ys: Vec<usize> = dev.iter().map(|e| head.label_index(&e.label).unwrap()).collect();
        let p = pooled(&up, &dev).unwrap();
        for c in s.checkpoints() {
            c.apply(&mut up, &mut head).unwrap();
            let acc = accuracy_on_pooled(&head, &p, &ys).unwrap();
            assert!((acc - c.dev_metric.unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn finetune_moves_upstream_and_lowers_loss() {
        let (mut up, mut head) = toy_models();
        let before = up.state();
        let data = toy_task(3, 16);
        let l0 = mean_loss(&up, &head, &data).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::Finetune,
            max_steps: 60,
            eval_every_steps: 20,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let s = train(&mut up, &mut head, &data, &toy_task(4, 6), &cfg).unwrap();
        assert!(up.state() != before);
        assert!(mean_loss(&up, &head, &data).unwrap() < l0);
        assert!(s.checkpoints()[0].get("upstream.proj.weight").is_some());
    }

    #[test]
    fn input_errors() {
        let (mut up, mut head) = toy_models();
        let cfg = TrainConfig::default();
        assert!(matches!(train(&mut up, &mut head, &toy_task(1, 4), &[], &cfg), Err(Error::EmptyDevSet)));
        let mut bad = toy_task(1, 4);
        bad[0].label = "zz".into();
        assert!(matches!(
            train(&mut up, &mut head, &bad, &toy_task(2, 2), &cfg),
            Err(Error::LabelMismatch(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn averaging_is_permutation_invariant_and_exact_on_copies(
            vals in proptest::collection::vec(proptest::collection::vec(-100.0f32..100.0, 3), 1..6),
            copies in 1usize..8,
            seed in any::<u64>(),
        ) {
            let cks: Vec<Checkpoint> = vals.iter().enumerate().map(|(i, v)| ck(i as u64, 0.0, v.clone())).collect();
            let mut perm = cks.clone();
            perm.shuffle(&mut seed::rng(seed));
            prop_assert_eq!(
                average_checkpoints(&cks).unwrap().tensors,
                average_checkpoints(&perm).unwrap().tensors
            );
            let same = vec![cks[0].clone(); copies];
            prop_assert_eq!(&average_checkpoints(&same).unwrap().tensors, &cks[0].tensors);
        }
    }
}
