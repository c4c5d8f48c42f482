use std::collections::{BTreeMap, HashMap};

use crate::ingest::{PredictionInstance, PAD};

/// Per-user and global app usage counts.
#[derive(Clone, Debug, Default)]
pub struct UsageCounts {
    pub num_apps: usize,
    pub per_user: BTreeMap<String, Vec<u64>>,
    pub global: Vec<u64>,
}

impl UsageCounts {
    /// Counts every event of the given per-user app sequences.
    pub fn from_sequences<'a, I>(sequences: I, num_apps: usize) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a [u32])>,
    {
        let mut out = UsageCounts {
            num_apps,
            per_user: BTreeMap::new(),
            global: vec![0; num_apps + 1],
        };
        for (user, apps) in sequences {
            let counts = out
                .per_user
                .entry(user.to_string())
                .or_insert_with(|| vec![0; num_apps + 1]);
            for &a in apps.iter().filter(|&&a| a != PAD) {
                counts[a as usize] += 1;
                out.global[a as usize] += 1;
            }
        }
        out
    }
}

fn rank_by_counts(counts: &[u64], target: u32) -> usize {
    let t = counts[target as usize];
    1 + (1..counts.len())
        .filter(|&j| counts[j] > t || (counts[j] == t && j < target as usize))
        .count()
}

/// Most-frequently-used ranks. Users without training history fall back to
/// global counts.
pub fn baseline_mfu(counts: &UsageCounts, instances: &[PredictionInstance]) -> Vec<usize> {
    instances
        .iter()
        .map(|inst| {
            let c = counts.per_user.get(&inst.user_id).unwrap_or(&counts.global);
            rank_by_counts(c, inst.target)
        })
        .collect()
}

/// Most-recently-used rank of the target: apps seen in the window ordered by
/// last occurrence (latest first), then unseen apps by index.
pub fn mru_rank(window: &[u32], target: u32) -> usize {
    let mut last_seen: HashMap<u32, usize> = HashMap::new();
    for (i, &a) in window.iter().enumerate().filter(|(_, &a)| a != PAD) {
        last_seen.insert(a, i);
    }
    match last_seen.get(&target) {
        Some(&pos) => 1 + last_seen.values().filter(|&&p| p > pos).count(),
        None => {
            let unseen_before = (1..target).filter(|a| !last_seen.contains_key(a)).count();
            1 + last_seen.len() + unseen_before
        }
    }
}

pub fn baseline_mru(instances: &[PredictionInstance]) -> Vec<usize> {
    instances.iter().map(|i| mru_rank(&i.window, i.target)).collect()
}
