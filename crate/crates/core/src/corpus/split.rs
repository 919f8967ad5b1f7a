use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::RawTrial;
use crate::{util, Error, Result};

/// Seeds used for the five-run mean ± standard error reporting.
pub const CANONICAL_SEEDS: [u64; 5] = [2017, 2018, 2019, 2020, 2021];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Test utterances come from games (speakers) never seen in training.
    LanguageGeneralization,
    /// Test targets are objects never used as training targets.
    ObjectGeneralization,
}

/// Disjoint, exhaustive train/val/test partition of trial indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub mode: SplitMode,
    pub fractions: [f64; 3],
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn partition_of(&self, trial: usize) -> Option<&'static str> {
        if self.train.contains(&trial) {
            Some("train")
        } else if self.val.contains(&trial) {
            Some("val")
        } else if self.test.contains(&trial) {
            Some("test")
        } else {
            None
        }
    }
}

/// Partitions `trials` deterministically for `seed`.
///
/// Language mode groups trials by game and assigns whole games; object mode
/// partitions the distinct target objects and sends each trial where its target went.
pub fn make_split(trials: &[RawTrial], mode: SplitMode, fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::Invalid(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let key = |t: &RawTrial| -> String {
        match mode {
            SplitMode::LanguageGeneralization => t.game_id.clone(),
            SplitMode::ObjectGeneralization => t.target_id().to_string(),
        }
    };
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, t) in trials.iter().enumerate() {
        groups.entry(key(t)).or_default().push(i);
    }
    let mut keys: Vec<String> = groups.keys().cloned().collect();
    keys.shuffle(&mut util::rng(seed));

    // Language mode balances trial counts; object mode balances object counts.
    let weight = |k: &String| match mode {
        SplitMode::LanguageGeneralization => groups[k].len(),
        SplitMode::ObjectGeneralization => 1,
    };
    let n: usize = keys.iter().map(weight).sum();
    let targets = [
        fractions[0] * n as f64,
        fractions[1] * n as f64,
        fractions[2] * n as f64,
    ];

    // Each group goes to the partition furthest below its target size; ties favour train, then val.
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut filled = [0usize; 3];
    for k in &keys {
        let dest = (0..3)
            .map(|p| (p, targets[p] - filled[p] as f64))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        filled[dest] += weight(k);
        parts[dest].extend_from_slice(&groups[k]);
    }
    let [mut train, mut val, mut test] = parts;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        if part.is_empty() {
            return Err(Error::EmptyPartition(name));
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit { mode, fractions, seed, train, val, test })
}

/// Target object ids used by the given trials.
pub fn target_ids(trials: &[RawTrial], idx: &[usize]) -> HashSet<String> {
    idx.iter().map(|&i| trials[i].target_id().to_string()).collect()
}
