//! Measurement protocols: closed-set detection EER, utterance accuracy,
//! duration-sliced evaluation and the corpus splitters.

mod metrics;
mod split;

pub use metrics::{closed_set_trials, confusion_matrix, eer, eer_macro, weighted_accuracy, TrialSet};
pub use split::{dev_split, group_kfold, subsample_per_class, Fold, FoldPlan, GroupKey};

use serde::{Deserialize, Serialize};

use crate::audio::{crop_duration, CropMode, Waveform};
use crate::downstream::{argmax, score_utterance_full, ClassifierHead};
use crate::error::Result;
use crate::upstream::UpstreamModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Eer,
    WeightedAccuracy,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Eer => "eer",
            MetricKind::WeightedAccuracy => "weighted_accuracy",
        }
    }
}

/// Pooled one-vs-rest trials with a single threshold, or the mean of
/// per-class EERs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EerMode {
    #[default]
    Pooled,
    Macro,
}

/// Scores for one test-duration slice. `duration_s == None` is full length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResult {
    pub duration_s: Option<f64>,
    pub eer: f64,
    pub weighted_accuracy: f64,
    pub n_trials: usize,
    pub n_targets: usize,
}

impl SliceResult {
    pub fn value(&self, metric: MetricKind) -> f64 {
        match metric {
            MetricKind::Eer => self.eer,
            MetricKind::WeightedAccuracy => self.weighted_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_name: String,
    /// Metrics reported downstream; every slice carries both.
    pub metrics: Vec<MetricKind>,
    pub label_set: Vec<String>,
    /// One entry per requested duration in request order, or a single
    /// full-length entry when none were requested.
    pub slices: Vec<SliceResult>,
    /// Rows are true labels, columns predictions; full-length utterances.
    pub confusion: Vec<Vec<usize>>,
    pub n_utterances: usize,
    pub fold: usize,
    /// `None` means the full training set.
    pub n_per_class: Option<usize>,
    pub seed: u64,
    pub averaging: String,
    pub config_fingerprint: String,
}

impl EvalReport {
    /// The full-length slice if present, else the longest one.
    pub fn headline(&self) -> &SliceResult {
        self.slices
            .iter()
            .find(|s| s.duration_s.is_none())
            .or_else(|| self.slices.iter().max_by(|a, b| a.duration_s.partial_cmp(&b.duration_s).unwrap()))
            .expect("a report always has a slice")
    }
}

fn score_slice(
    upstream: &UpstreamModel,
    head: &ClassifierHead,
    test: &[(Waveform, String)],
    labels: &[usize],
    duration_s: Option<f64>,
    mode: EerMode,
) -> Result<(SliceResult, Vec<usize>)> {
    let mut scores = Vec::with_capacity(test.len());
    let mut preds = Vec::with_capacity(test.len());
    for (w, _) in test {
        let (p, logp) = match duration_s {
            Some(d) => score_utterance_full(upstream, head, &crop_duration(w, d, CropMode::Center)?)?,
            None => score_utterance_full(upstream, head, w)?,
        };
        preds.push(argmax(&p));
        scores.push(logp);
    }
    let trials = closed_set_trials(&scores, labels)?;
    let rate = match mode {
        EerMode::Pooled => eer(&trials),
        EerMode::Macro => eer_macro(&scores, labels)?,
    };
    let slice = SliceResult {
        duration_s,
        eer: rate,
        weighted_accuracy: weighted_accuracy(&preds, labels)?,
        n_trials: trials.len(),
        n_targets: trials.num_targets(),
    };
    Ok((slice, preds))
}

/// Scores every test utterance center-cropped to each duration (EER over
/// closed-set trials, accuracy) and at full length (confusion matrix).
/// An empty `durations` list evaluates full-length utterances only.
pub fn duration_sliced_eval(
    upstream: &UpstreamModel,
    head: &ClassifierHead,
    test: &[(Waveform, String)],
    durations: &[f64],
    mode: EerMode,
) -> Result<EvalReport> {
    let labels: Vec<usize> = test
        .iter()
        .map(|(_, l)| head.label_index(l))
        .collect::<Result<_>>()?;
    let (full, full_preds) = score_slice(upstream, head, test, &labels, None, mode)?;
    let slices = if durations.is_empty() {
        vec![full]
    } else {
        durations
            .iter()
            .map(|&d| Ok(score_slice(upstream, head, test, &labels, Some(d), mode)?.0))
            .collect::<Result<_>>()?
    };
    Ok(EvalReport {
        task_name: head.task_name.clone(),
        metrics: vec![MetricKind::Eer, MetricKind::WeightedAccuracy],
        label_set: head.label_set.clone(),
        slices,
        confusion: confusion_matrix(&full_preds, &labels, head.num_classes())?,
        n_utterances: test.len(),
        fold: 0,
        n_per_class: None,
        seed: 0,
        averaging: String::new(),
        config_fingerprint: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::upstream::UpstreamConfig;

    #[test]
    fn report_shape_and_confusion_rows() {
        let cfg = UpstreamConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            ffn_dim: 16,
            codebook_size: 4,
            ..UpstreamConfig::default()
        };
        let up = UpstreamModel::new(cfg, 0).unwrap();
        let head = ClassifierHead::new("t", vec!["a".into(), "b".into()], 8, 0).unwrap();
        let tone = |f: f32| Waveform::new((0..8000).map(|i| (i as f32 * f).sin() * 0.2).collect(), 16000).unwrap();
        let test = vec![(tone(0.05), "a".to_string()), (tone(0.3), "b".to_string()), (tone(0.1), "b".to_string())];
        let r = duration_sliced_eval(&up, &head, &test, &[0.1, 0.3], EerMode::Pooled).unwrap();
        assert_eq!(r.slices.len(), 2);
        assert_eq!(r.slices[0].n_trials, 6);
        assert_eq!(r.headline().duration_s, Some(0.3));
        let rows: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(rows, vec![1, 2]);
        assert!(r.slices.iter().all(|d| (0.0..=1.0).contains(&d.eer)));
        let full = duration_sliced_eval(&up, &head, &test, &[], EerMode::Macro).unwrap();
        assert_eq!(full.slices.len(), 1);
        assert_eq!(full.headline().duration_s, None);
    }
}
