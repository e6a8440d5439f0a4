//! Task heads: temporal average pooling followed by one linear layer and a
//! softmax.

use std::collections::BTreeMap;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::features::logmel;
use crate::nn::{Linear, Parameter, Tensor};
use crate::seed;
use crate::upstream::{extract, UpstreamModel};

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub task_name: String,
    pub label_set: Vec<String>,
    pub linear: Linear<f32>,
}

impl ClassifierHead {
    pub fn new(task_name: &str, label_set: Vec<String>, d_model: usize, seed: u64) -> Result<Self> {
        if label_set.len() < 2 {
            return Err(Error::LabelMismatch(format!(
                "task {task_name:?} needs at least 2 labels, got {}",
                label_set.len()
            )));
        }
        let mut sorted = label_set.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != label_set.len() {
            return Err(Error::LabelMismatch(format!("task {task_name:?} has duplicate labels")));
        }
        let mut rng = seed::rng(seed);
        Ok(Self {
            task_name: task_name.to_string(),
            linear: Linear::new(&format!("head.{task_name}"), d_model, label_set.len(), &mut rng),
            label_set,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_set.len()
    }

    pub fn d_model(&self) -> usize {
        self.linear.d_in()
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.label_set.iter().position(|l| l == label).ok_or_else(|| {
            Error::LabelMismatch(format!("label {label:?} is not in the label set of task {:?}", self.task_name))
        })
    }

    pub fn params(&self) -> Vec<&Parameter<f32>> {
        self.linear.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<f32>> {
        self.linear.params_mut()
    }

    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<usize> {
        let mut loaded = 0;
        for p in self.params_mut() {
            if let Some(t) = tensors.get(&p.name) {
                if t.shape() != p.value.shape() {
                    return Err(Error::IncompatibleCheckpoints(format!(
                        "{}: shape {:?} vs {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value.data_mut().copy_from_slice(t.data());
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

/// Mean over the time axis of a `T x D` matrix.
pub fn pool_mean(reps: &Tensor<f32>) -> Result<Vec<f32>> {
    if reps.shape().len() != 2 || reps.rows() == 0 || reps.cols() == 0 {
        return Err(Error::EmptySequence);
    }
    let mut acc = vec![0.0f64; reps.cols()];
    for t in 0..reps.rows() {
        for (a, &v) in acc.iter_mut().zip(reps.row(t)) {
            *a += v as f64;
        }
    }
    let n = reps.rows() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Logits of the head, computed in double precision.
pub fn logits(pooled: &[f32], head: &ClassifierHead) -> Result<Vec<f64>> {
    if pooled.len() != head.d_model() {
        return Err(Error::DimensionMismatch {
            expected: head.d_model(),
            actual: pooled.len(),
        });
    }
    let (w, b) = (&head.linear.weight.value, head.linear.bias.value.data());
    Ok((0..head.num_classes())
        .map(|c| {
            b[c] as f64 + w.row(c).iter().zip(pooled).map(|(&wi, &x)| wi as f64 * x as f64).sum::<f64>()
        })
        .collect())
}

/// `(softmax(W x + b), log_softmax(W x + b))`.
pub fn classify(pooled: &[f32], head: &ClassifierHead) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = logits(pooled, head)?;
    let logp = crate::nn::log_softmax(&z)?;
    let p = crate::nn::softmax(&z)?;
    Ok((p, logp))
}

/// Pooled upstream representation of a waveform.
pub fn pooled_representation(upstream: &UpstreamModel, w: &Waveform) -> Result<Vec<f32>> {
    let feats = logmel(w, upstream.config().n_mels)?;
    pool_mean(extract(upstream, &feats)?.data())
}

/// Log-mel, upstream, pooling, head. Returns posteriors and log posteriors.
pub fn score_utterance_full(
    upstream: &UpstreamModel,
    head: &ClassifierHead,
    w: &Waveform,
) -> Result<(Vec<f64>, Vec<f64>)> {
    classify(&pooled_representation(upstream, w)?, head)
}

pub fn score_utterance(upstream: &UpstreamModel, head: &ClassifierHead, w: &Waveform) -> Result<Vec<f64>> {
    Ok(score_utterance_full(upstream, head, w)?.0)
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::upstream::UpstreamConfig;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn pooling_cases() {
        let one = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pool_mean(&one).unwrap(), vec![1.0, 2.0, 3.0]);
        let two = Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        assert_eq!(pool_mean(&two).unwrap(), vec![2.0, 4.0]);
        assert!(matches!(pool_mean(&Tensor::zeros(&[0, 3])), Err(Error::EmptySequence)));
    }

    #[test]
    fn zero_head_is_uniform_and_dims_checked() {
        let mut head = ClassifierHead::new("t", labels(4), 3, 0).unwrap();
        head.params_mut().into_iter().for_each(|p| p.value.fill(0.0));
        let (p, logp) = classify(&[1.0, -2.0, 0.5], &head).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(logp.iter().all(|&v| (v - 0.25f64.ln()).abs() < 1e-15));
        assert!(matches!(
            classify(&[1.0], &head),
            Err(Error::DimensionMismatch { expected: 3, actual: 1 })
        ));
        assert!(ClassifierHead::new("t", labels(1), 3, 0).is_err());
    }

    #[test]
    fn argmax_of_posteriors_matches_logits() {
        let head = ClassifierHead::new("t", labels(5), 6, 1).unwrap();
        let mut rng = seed::rng(2);
        for _ in 0..1000 {
            let x: Vec<f32> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z = logits(&x, &head).unwrap();
            let (p, _) = classify(&x, &head).unwrap();
            assert_eq!(argmax(&p), argmax(&z));
        }
    }

    #[test]
    fn bias_shift_leaves_posteriors_unchanged() {
        let mut head = ClassifierHead::new("t", labels(3), 4, 3).unwrap();
        let x = [0.2, -0.1, 0.7, 1.1];
        let (p, _) = classify(&x, &head).unwrap();
        head.linear.bias.value.data_mut().iter_mut().for_each(|b| *b += 5.0);
        let (q, _) = classify(&x, &head).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn end_to_end_scoring_is_deterministic() {
        let cfg = UpstreamConfig {
            n_mels: 40,
            d_model: 16,
            n_blocks: 1,
            n_heads: 2,
            ffn_dim: 32,
            codebook_size: 4,
            positional_encoding: true,
        };
        let up = UpstreamModel::new(cfg, 0).unwrap();
        let head = ClassifierHead::new("t", labels(3), 16, 0).unwrap();
        let w = Waveform::new((0..4000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect(), 16000).unwrap();
        let a = score_utterance(&up, &head, &w).unwrap();
        assert_eq!(a, score_utterance(&up, &head, &w).unwrap());
        assert_eq!(a.len(), 3);
        let short = Waveform::new(vec![0.0; 100], 16000).unwrap();
        assert!(matches!(score_utterance(&up, &head, &short), Err(Error::TooShort { .. })));
    }

    proptest! {
        #[test]
        fn pooling_ignores_order_and_duplication(v in proptest::collection::vec(-10.0f32..10.0, 2..40), seed in any::<u64>()) {
            let t = v.len() / 2;
            let x = Tensor::matrix(t, 2, v[..t * 2].to_vec()).unwrap();
            let mut order: Vec<usize> = (0..t).collect();
            let mut rng = crate::seed::rng(seed);
            for i in (1..t).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let base = pool_mean(&x).unwrap();
            let perm = pool_mean(&x.gather_rows(&order)).unwrap();
            let twice: Vec<usize> = (0..t).chain(0..t).collect();
            let dup = pool_mean(&x.gather_rows(&twice)).unwrap();
            for i in 0..2 {
                prop_assert!((base[i] - perm[i]).abs() <= 1e-5 * (1.0 + base[i].abs()));
                prop_assert!((base[i] - dup[i]).abs() <= 1e-5 * (1.0 + base[i].abs()));
            }
        }

        #[test]
        fn posteriors_sum_to_one(x in proptest::collection::vec(-5.0f32..5.0, 4), seed in 0u64..100) {
            let head = ClassifierHead::new("t", labels(6), 4, seed).unwrap();
            let (p, _) = classify(&x, &head).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
