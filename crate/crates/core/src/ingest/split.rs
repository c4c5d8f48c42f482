use std::collections::{BTreeMap, HashSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instances::{AppVocab, PredictionInstance, PAD};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Standard,
    ColdStart,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Standard => "standard",
            SplitMode::ColdStart => "cold_start",
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SplitMode::Standard),
            "cold_start" => Ok(SplitMode::ColdStart),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PredictionInstance>,
    pub val: Vec<PredictionInstance>,
    pub test: Vec<PredictionInstance>,
    pub mode: SplitMode,
}

fn by_user(instances: &[PredictionInstance]) -> BTreeMap<&str, Vec<&PredictionInstance>> {
    let mut users: BTreeMap<&str, Vec<&PredictionInstance>> = BTreeMap::new();
    for inst in instances {
        users.entry(inst.user_id.as_str()).or_default().push(inst);
    }
    users
}

/// Per user and in the given (chronological) order: the first `floor(0.7n)`
/// instances train, the next `floor(0.1n)` validate, the rest test. Users
/// with fewer than three instances go entirely to training.
pub fn split_standard(instances: &[PredictionInstance]) -> (DatasetSplit, Vec<String>) {
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        mode: SplitMode::Standard,
    };
    let mut warnings = Vec::new();
    for (user, items) in by_user(instances) {
        let n = items.len();
        if n < 3 {
            let msg = format!("user {user} has {n} instances; all assigned to train");
            warn!("{msg}");
            warnings.push(msg);
            split.train.extend(items.into_iter().cloned());
            continue;
        }
        let n_train = n * 7 / 10;
        let n_val = n / 10;
        for (i, inst) in items.into_iter().enumerate() {
            let bucket = if i < n_train {
                &mut split.train
            } else if i < n_train + n_val {
                &mut split.val
            } else {
                &mut split.test
            };
            bucket.push(inst.clone());
        }
    }
    (split, warnings)
}

/// Seeded user-level partition: `floor(0.9U)` users feed train (their last
/// `floor(0.1n)` instances become validation), the remaining users are test.
pub fn split_coldstart(instances: &[PredictionInstance], seed: u64) -> Result<DatasetSplit> {
    let users = by_user(instances);
    if users.len() < 2 {
        return Err(Error::invalid(
            "split_coldstart",
            format!("need at least 2 users, found {}", users.len()),
        ));
    }
    let mut ids: Vec<&str> = users.keys().copied().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train_users = ids.len() * 9 / 10;
    let train_users: HashSet<&str> = ids[..n_train_users].iter().copied().collect();

    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        mode: SplitMode::ColdStart,
    };
    for (user, items) in users {
        if train_users.contains(user) {
            let n_val = items.len() / 10;
            let cut = items.len() - n_val;
            split.train.extend(items[..cut].iter().map(|&i| i.clone()));
            split.val.extend(items[cut..].iter().map(|&i| i.clone()));
        } else {
            split.test.extend(items.into_iter().cloned());
        }
    }
    Ok(split)
}

/// Outcome of [`reindex_by_train`].
#[derive(Clone, Debug)]
pub struct Reindexed {
    pub split: DatasetSplit,
    pub vocab: AppVocab,
    pub dropped_val: usize,
    pub dropped_test: usize,
}

/// Re-numbers apps by first appearance in the training instances (window
/// then target) and drops validation/test instances that mention an app
/// never seen in training.
pub fn reindex_by_train(split: DatasetSplit, provisional: &AppVocab) -> Reindexed {
    let mut vocab = AppVocab::new();
    let name = |i: u32| provisional.name(i).expect("index from provisional vocab");
    for inst in &split.train {
        for &a in inst.apps() {
            vocab.intern(name(a));
        }
        vocab.intern(name(inst.target));
    }
    let remap = |inst: &PredictionInstance| -> Option<PredictionInstance> {
        let map = |a: u32| if a == PAD { Some(PAD) } else { vocab.get(name(a)) };
        let window = inst.window.iter().map(|&a| map(a)).collect::<Option<Vec<_>>>()?;
        Some(PredictionInstance {
            window,
            target: map(inst.target)?,
            ..inst.clone()
        })
    };
    let train: Vec<_> = split.train.iter().map(|i| remap(i).expect("train apps are in vocab")).collect();
    let val: Vec<_> = split.val.iter().filter_map(remap).collect();
    let test: Vec<_> = split.test.iter().filter_map(remap).collect();
    let dropped_val = split.val.len() - val.len();
    let dropped_test = split.test.len() - test.len();
    if dropped_val + dropped_test > 0 {
        warn!("dropped {dropped_val} validation and {dropped_test} test instances with apps unseen in training");
    }
    Reindexed {
        split: DatasetSplit {
            train,
            val,
            test,
            mode: split.mode,
        },
        vocab,
        dropped_val,
        dropped_test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(user: &str, target: u32, ts: i64) -> PredictionInstance {
        PredictionInstance {
            user_id: user.into(),
            window: vec![0, 1],
            window_len: 1,
            target,
            tau: 0,
            rho_category: None,
            timestamp: ts,
        }
    }

    fn counts(n: usize) -> (usize, usize, usize) {
        let items: Vec<_> = (0..n).map(|i| inst("u", 2, i as i64)).collect();
        let (s, _) = split_standard(&items);
        (s.train.len(), s.val.len(), s.test.len())
    }

    #[test]
    fn standard_fractions() {
        assert_eq!(counts(10), (7, 1, 2));
        assert_eq!(counts(9), (6, 0, 3));
        assert_eq!(counts(2), (2, 0, 0));
        let (_, warnings) = split_standard(&[inst("u", 2, 0)]);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn standard_is_chronological_per_user() {
        let items: Vec<_> = (0..20)
            .map(|i| inst(if i % 2 == 0 { "a" } else { "b" }, 2, i))
            .collect();
        let (s, _) = split_standard(&items);
        for user in ["a", "b"] {
            let max_train = s.train.iter().filter(|i| i.user_id == user).map(|i| i.timestamp).max().unwrap();
            let min_val = s.val.iter().filter(|i| i.user_id == user).map(|i| i.timestamp).min().unwrap();
            let min_test = s.test.iter().filter(|i| i.user_id == user).map(|i| i.timestamp).min().unwrap();
            assert!(max_train <= min_val && min_val <= min_test);
        }
    }

    #[test]
    fn coldstart_partitions_users() {
        let items: Vec<_> = (0..10)
            .flat_map(|u| (0..20).map(move |t| inst(&format!("u{u}"), 2, t)))
            .collect();
        let s = split_coldstart(&items, 7).unwrap();
        let train_users: HashSet<_> = s.train.iter().chain(&s.val).map(|i| i.user_id.clone()).collect();
        let test_users: HashSet<_> = s.test.iter().map(|i| i.user_id.clone()).collect();
        assert_eq!(train_users.len(), 9);
        assert_eq!(test_users.len(), 1);
        assert!(train_users.is_disjoint(&test_users));
        assert_eq!(s.val.len(), 9 * 2);
        assert_eq!(split_coldstart(&items, 7).unwrap(), s);
    }

    #[test]
    fn coldstart_needs_two_users() {
        assert!(split_coldstart(&[inst("u", 2, 0)], 1).is_err());
    }

    #[test]
    fn unseen_targets_are_dropped() {
        let mut prov = AppVocab::new();
        for n in ["a", "b", "c"] {
            prov.intern(n);
        }
        let split = DatasetSplit {
            train: vec![inst("x", 2, 0)],
            val: vec![],
            test: vec![inst("y", 2, 1), inst("y", 3, 2)],
            mode: SplitMode::ColdStart,
        };
        let r = reindex_by_train(split, &prov);
        assert_eq!(r.dropped_test, 1);
        assert_eq!(r.split.test.len(), 1);
        // "a" (window) is first, then "b" (target)
        assert_eq!(r.vocab.names(), ["a", "b"]);
        assert_eq!(r.split.test[0].target, 2);
    }
}
