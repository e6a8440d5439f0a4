use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{Manifest, UtteranceRecord};
use crate::seed;

/// What a cross-validation group is. `group_id` values of the form
/// `session/speaker` group by their prefix under `Session`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Speaker,
    Session,
}

impl GroupKey {
    pub fn of<'a>(&self, r: &'a UtteranceRecord) -> &'a str {
        match self {
            GroupKey::Speaker => &r.group_id,
            GroupKey::Session => r.group_id.split('/').next().unwrap_or(&r.group_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train_groups: Vec<String>,
    pub test_groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub group_key: GroupKey,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// `(train, test)` manifests of fold `i`, in manifest order.
    pub fn split(&self, m: &Manifest, i: usize) -> Result<(Manifest, Manifest)> {
        let fold = self.folds.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.folds.len(),
        })?;
        let test: BTreeSet<&str> = fold.test_groups.iter().map(String::as_str).collect();
        let (te, tr): (Vec<_>, Vec<_>) = m
            .records()
            .iter()
            .cloned()
            .partition(|r| test.contains(self.group_key.of(r)));
        Ok((m.with_records(tr), m.with_records(te)))
    }
}

/// Shuffles the distinct groups with `seed` and deals them round-robin into
/// `k` test sets; each fold trains on every other group.
pub fn group_kfold(m: &Manifest, k: usize, key: GroupKey, seed: u64) -> Result<FoldPlan> {
    let mut groups: Vec<String> = m
        .records()
        .iter()
        .map(|r| key.of(r).to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if k < 2 || groups.len() < k {
        return Err(Error::TooFewGroups { groups: groups.len(), k });
    }
    groups.shuffle(&mut seed::rng(seed));
    let folds = (0..k)
        .map(|j| {
            let (test, train): (Vec<_>, Vec<_>) = groups
                .iter()
                .enumerate()
                .partition(|(i, _)| i % k == j);
            let mut test: Vec<String> = test.into_iter().map(|(_, g)| g.clone()).collect();
            let mut train: Vec<String> = train.into_iter().map(|(_, g)| g.clone()).collect();
            test.sort();
            train.sort();
            Fold {
                train_groups: train,
                test_groups: test,
            }
        })
        .collect();
    Ok(FoldPlan { k, group_key: key, folds })
}

/// Seeded choice of `count` positions out of each label's records; the
/// result keeps manifest order.
fn per_label_pick(m: &Manifest, seed: u64, count: impl Fn(usize) -> usize) -> Vec<bool> {
    let mut rng = seed::rng(seed);
    let mut chosen = vec![false; m.len()];
    for (_, mut idx) in m.by_label() {
        let n = count(idx.len());
        idx.shuffle(&mut rng);
        for &i in &idx[..n.min(idx.len())] {
            chosen[i] = true;
        }
    }
    chosen
}

/// Label-stratified split: `round(fraction * n_label)` records of each
/// label go to dev. Returns `(train, dev)`.
pub fn dev_split(m: &Manifest, fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Range {
            field: "dev_fraction".into(),
            message: format!("{fraction} is not in [0, 1)"),
        });
    }
    let dev = per_label_pick(m, seed, |n| (fraction * n as f64).round() as usize);
    let (d, t): (Vec<_>, Vec<_>) = m.records().iter().zip(&dev).partition(|(_, &d)| d);
    Ok((
        m.with_records(t.into_iter().map(|(r, _)| r.clone()).collect()),
        m.with_records(d.into_iter().map(|(r, _)| r.clone()).collect()),
    ))
}

/// Up to `n_per_class` records of each label, chosen uniformly by seed.
pub fn subsample_per_class(m: &Manifest, n_per_class: usize, seed: u64) -> Result<Manifest> {
    if n_per_class == 0 {
        return Err(Error::Range {
            field: "n_per_class".into(),
            message: "must be at least 1".into(),
        });
    }
    let keep = per_label_pick(m, seed, |_| n_per_class);
    Ok(m.with_records(
        m.records()
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(r, _)| r.clone())
            .collect(),
    ))
}
