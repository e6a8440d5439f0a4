use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detection scores with target flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    scores: Vec<f64>,
    is_target: Vec<bool>,
}

impl TrialSet {
    pub fn new(scores: Vec<f64>, is_target: Vec<bool>) -> Result<Self> {
        if scores.len() != is_target.len() {
            return Err(Error::LengthMismatch(scores.len(), is_target.len()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("trial scores".into()));
        }
        let targets = is_target.iter().filter(|&&t| t).count();
        if targets == 0 || targets == is_target.len() {
            return Err(Error::DegenerateTrialSet);
        }
        Ok(Self { scores, is_target })
    }

    /// Builds from separate target and nontarget score lists.
    pub fn from_split(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let scores = targets.iter().chain(nontargets).copied().collect();
        let flags = std::iter::repeat_n(true, targets.len())
            .chain(std::iter::repeat_n(false, nontargets.len()))
            .collect();
        Self::new(scores, flags)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_target(&self) -> &[bool] {
        &self.is_target
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.is_target.iter().filter(|&&t| t).count()
    }
}

/// Equal error rate. A trial is accepted iff `score >= threshold`. The
/// thresholds swept are the distinct scores plus +inf; EER is read where
/// `FAR - FRR` first reaches zero, interpolating linearly between the two
/// operating points that bracket the sign change.
pub fn eer(trials: &TrialSet) -> f64 {
    let nt = trials.num_targets();
    let nn = trials.len() - nt;
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| trials.scores[a].total_cmp(&trials.scores[b]));

    // At the lowest threshold everything is accepted.
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let point = |tb: usize, nb: usize| {
        let far = (nn - nb) as f64 / nn as f64;
        let frr = tb as f64 / nt as f64;
        (far, frr)
    };
    let (mut prev_far, mut prev_frr) = point(0, 0);
    let mut i = 0;
    loop {
        // Advance the threshold past the current group of equal scores.
        let next = if i < order.len() {
            let s = trials.scores[order[i]];
            while i < order.len() && trials.scores[order[i]] == s {
                if trials.is_target[order[i]] {
                    targets_below += 1;
                } else {
                    nontargets_below += 1;
                }
                i += 1;
            }
            point(targets_below, nontargets_below)
        } else {
            unreachable!("FAR - FRR reaches -1 at +inf")
        };
        let (far, frr) = next;
        let d = far - frr;
        if d <= 0.0 {
            if d == 0.0 {
                return far;
            }
            let d_prev = prev_far - prev_frr;
            let alpha = d_prev / (d_prev - d);
            return prev_far + alpha * (far - prev_far);
        }
        prev_far = far;
        prev_frr = frr;
    }
}

/// One trial per (utterance, hypothesized class), utterance-major. The
/// score is the log posterior; the trial is a target iff the class is the
/// true label.
pub fn closed_set_trials(log_scores: &[Vec<f64>], labels: &[usize]) -> Result<TrialSet> {
    if log_scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score rows for {} labels",
            log_scores.len(),
            labels.len()
        )));
    }
    let c = log_scores.first().map_or(0, Vec::len);
    let mut scores = Vec::with_capacity(labels.len() * c);
    let mut flags = Vec::with_capacity(labels.len() * c);
    for (row, &y) in log_scores.iter().zip(labels) {
        if row.len() != c || y >= c {
            return Err(Error::ShapeMismatch(format!(
                "score row of width {} with label {y}, expected width {c}",
                row.len()
            )));
        }
        for (j, &s) in row.iter().enumerate() {
            scores.push(s);
            flags.push(j == y);
        }
    }
    TrialSet::new(scores, flags)
}

/// Mean of per-class one-vs-rest EERs, over classes that have both target
/// and nontarget trials.
pub fn eer_macro(log_scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    closed_set_trials(log_scores, labels)?;
    let c = log_scores[0].len();
    let mut rates = Vec::new();
    for class in 0..c {
        let scores: Vec<f64> = log_scores.iter().map(|r| r[class]).collect();
        let flags: Vec<bool> = labels.iter().map(|&y| y == class).collect();
        if let Ok(t) = TrialSet::new(scores, flags) {
            rates.push(eer(&t));
        }
    }
    if rates.is_empty() {
        return Err(Error::DegenerateTrialSet);
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Fraction of utterances whose prediction equals the label.
pub fn weighted_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// `C x C` counts, rows indexed by true label.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::IndexOutOfRange {
                index: p.max(y),
                len: classes,
            });
        }
        m[y][p] += 1;
    }
    Ok(m)
}
