use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How MRR@k treats ranks beyond `k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrrMode {
    /// Ranks beyond `k` contribute zero.
    #[default]
    Truncated,
    /// Plain mean reciprocal rank; `k` is ignored.
    Full,
}

impl std::str::FromStr for MrrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncated" => Ok(MrrMode::Truncated),
            "full" => Ok(MrrMode::Full),
            other => Err(Error::config("mrr_mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// 1-based rank of `target` (a 0-based score index): one plus the number of
/// strictly higher scores plus the number of equal scores at lower indices.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

pub fn acc_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn mrr_at_k(ranks: &[usize], k: usize) -> f64 {
    mrr_with(ranks, k, MrrMode::Truncated)
}

pub fn mrr_with(ranks: &[usize], k: usize, mode: MrrMode) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let total: f64 = ranks
        .iter()
        .map(|&r| match mode {
            MrrMode::Truncated if r > k => 0.0,
            _ => 1.0 / r as f64,
        })
        .sum();
    total / ranks.len() as f64
}

pub const ACC_KS: [usize; 3] = [1, 3, 5];
pub const MRR_KS: [usize; 2] = [3, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub ranks: Vec<usize>,
    pub acc: BTreeMap<usize, f64>,
    pub mrr: BTreeMap<usize, f64>,
    pub n: usize,
}

impl RankingResult {
    pub fn from_ranks(ranks: Vec<usize>, mode: MrrMode) -> Self {
        let acc = ACC_KS.iter().map(|&k| (k, acc_at_k(&ranks, k))).collect();
        let mrr = MRR_KS.iter().map(|&k| (k, mrr_with(&ranks, k, mode))).collect();
        RankingResult {
            n: ranks.len(),
            ranks,
            acc,
            mrr,
        }
    }

    pub fn row(&self) -> MetricRow {
        MetricRow {
            acc1: self.acc[&1],
            acc3: self.acc[&3],
            acc5: self.acc[&5],
            mrr3: self.mrr[&3],
            mrr5: self.mrr[&5],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(rename = "ACC@1")]
    pub acc1: f64,
    #[serde(rename = "ACC@3")]
    pub acc3: f64,
    #[serde(rename = "ACC@5")]
    pub acc5: f64,
    #[serde(rename = "MRR@3")]
    pub mrr3: f64,
    #[serde(rename = "MRR@5")]
    pub mrr5: f64,
}

/// Metrics of several methods on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub instances: usize,
    pub mrr_mode: MrrMode,
    /// Method name and its metrics, in display order.
    pub methods: Vec<(String, MetricRow)>,
}

impl MetricsReport {
    pub fn get(&self, method: &str) -> Option<&MetricRow> {
        self.methods.iter().find(|(m, _)| m == method).map(|(_, r)| r)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut methods = serde_json::Map::new();
        for (name, row) in &self.methods {
            methods.insert(name.clone(), serde_json::to_value(row)?);
        }
        let doc = serde_json::json!({
            "split": self.split,
            "instances": self.instances,
            "mrr_mode": self.mrr_mode,
            "methods": methods,
        });
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "split: {} ({} instances)", self.split, self.instances).unwrap();
        writeln!(
            s,
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "method", "ACC@1", "ACC@3", "ACC@5", "MRR@3", "MRR@5"
        )
        .unwrap();
        for (name, r) in &self.methods {
            writeln!(
                s,
                "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name, r.acc1, r.acc3, r.acc5, r.mrr3, r.mrr5
            )
            .unwrap();
        }
        s
    }
}
