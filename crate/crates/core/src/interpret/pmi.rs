use std::collections::{BTreeSet, HashMap};

use crate::graphs::{MultiHopGraphs, HOPS};
use crate::ingest::PAD;

pub const PMI_EPSILON: f64 = 1e-9;

/// Session-level occurrence statistics of apps and app pairs.
#[derive(Clone, Debug)]
pub struct PmiTable {
    pub sessions: usize,
    pub epsilon: f64,
    single: HashMap<u32, u64>,
    pair: HashMap<(u32, u32), u64>,
}

impl PmiTable {
    /// Counts, per session, each distinct app and each distinct unordered pair.
    pub fn build<'a, I>(sessions: I) -> Self
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        let mut t = PmiTable {
            sessions: 0,
            epsilon: PMI_EPSILON,
            single: HashMap::new(),
            pair: HashMap::new(),
        };
        for s in sessions {
            t.sessions += 1;
            let apps: Vec<u32> = s
                .iter()
                .copied()
                .filter(|&a| a != PAD)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            for (i, &u) in apps.iter().enumerate() {
                *t.single.entry(u).or_default() += 1;
                for &y in &apps[i + 1..] {
                    *t.pair.entry((u, y)).or_default() += 1;
                }
            }
        }
        t
    }

    pub fn p(&self, u: u32) -> f64 {
        if self.sessions == 0 {
            return 0.0;
        }
        self.single.get(&u).copied().unwrap_or(0) as f64 / self.sessions as f64
    }

    pub fn p_joint(&self, u: u32, y: u32) -> f64 {
        if u == y {
            return self.p(u);
        }
        if self.sessions == 0 {
            return 0.0;
        }
        let key = (u.min(y), u.max(y));
        self.pair.get(&key).copied().unwrap_or(0) as f64 / self.sessions as f64
    }

    /// `ln((P(u,y) + eps) / (P(u) P(y) + eps))`.
    pub fn pmi(&self, u: u32, y: u32) -> f64 {
        ((self.p_joint(u, y) + self.epsilon) / (self.p(u) * self.p(y) + self.epsilon)).ln()
    }
}

/// Mean PMI with `target` over the non-isolated nodes of each hop.
#[derive(Clone, Debug, PartialEq)]
pub struct HopRelevance {
    pub sims: Vec<f64>,
    /// Hops without any edge; their similarity is reported as 0.
    pub empty: Vec<bool>,
}

pub fn hop_relevance(graphs: &MultiHopGraphs, pmi: &PmiTable, target: u32) -> HopRelevance {
    let mut sims = Vec::with_capacity(HOPS);
    let mut empty = Vec::with_capacity(HOPS);
    for hop in 1..=HOPS {
        let nodes = graphs.non_isolated(hop);
        if nodes.is_empty() {
            sims.push(0.0);
            empty.push(true);
        } else {
            let total: f64 = nodes.iter().map(|&u| pmi.pmi(u, target)).sum();
            sims.push(total / nodes.len() as f64);
            empty.push(false);
        }
    }
    HopRelevance { sims, empty }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::build_graphs;

    #[test]
    fn probabilities_and_examples() {
        let sessions: Vec<Vec<u32>> = vec![vec![1, 2, 3], vec![1, 2], vec![1, 4], vec![1, 5]];
        let t = PmiTable::build(sessions.iter().map(Vec::as_slice));
        assert_eq!(t.p(1), 1.0);
        assert_eq!(t.p(2), 0.5);
        assert_eq!(t.p_joint(1, 2), 0.5);
        assert_eq!(t.pmi(2, 1), t.pmi(1, 2));
        // 2 and 1 always together, 2 in half the sessions: log(0.5 / 0.5).
        assert!(t.pmi(1, 2).abs() < 1e-8);
        assert!(t.pmi(4, 5) < -10.0 && t.pmi(4, 5).is_finite());
    }

    #[test]
    fn half_and_half_pair_gives_log_two() {
        let sessions: Vec<Vec<u32>> = vec![vec![1, 2], vec![1, 2], vec![3], vec![4]];
        let t = PmiTable::build(sessions.iter().map(Vec::as_slice));
        assert!((t.pmi(1, 2) - 2f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn relevance_single_edge() {
        let sessions: Vec<Vec<u32>> = vec![vec![1, 3], vec![2, 3], vec![1], vec![2, 4]];
        let t = PmiTable::build(sessions.iter().map(Vec::as_slice));
        let g = build_graphs(&[0, 0, 1, 2]).unwrap();
        let r = hop_relevance(&g, &t, 3);
        assert!((r.sims[0] - (t.pmi(1, 3) + t.pmi(2, 3)) / 2.0).abs() < 1e-15);
        assert_eq!(r.empty, vec![false, true, true]);
        assert_eq!(r.sims[1], 0.0);
    }
}
