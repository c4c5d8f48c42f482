use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::pmi::PmiTable;
use super::stats::jaccard;
use crate::error::{Error, Result};
use crate::graphs::build_graphs;
use crate::ingest::PredictionInstance;
use crate::model::Misapp;
use crate::numeric::argmax;

/// Which occurrences of the influential app are replaced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceMode {
    #[default]
    All,
    /// Only the most recent occurrence.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbationResult {
    pub index: usize,
    pub target: u32,
    /// Hop with the largest weight (1-based).
    pub hop: usize,
    pub node: u32,
    pub replacement: u32,
    pub p_orig: f64,
    pub p_pert: f64,
    pub delta: f64,
    pub top1_orig: u32,
    pub top1_pert: u32,
}

impl PerturbationResult {
    pub fn top1_changed(&self) -> bool {
        self.top1_orig != self.top1_pert
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum PerturbOutcome {
    Done(PerturbationResult),
    Skipped { index: usize, reason: String },
}

/// Distinct-app sets of training sequences for donor lookup.
#[derive(Clone, Debug)]
pub struct DonorIndex {
    sets: Vec<BTreeSet<u32>>,
}

impl DonorIndex {
    pub fn new<'a, I: IntoIterator<Item = &'a [u32]>>(sequences: I) -> Self {
        DonorIndex {
            sets: sequences.into_iter().map(|s| s.iter().copied().collect()).collect(),
        }
    }

    /// Lowest app of the most Jaccard-similar donor that still has an app
    /// absent from `window` (earliest donor on ties).
    pub fn replacement(&self, window: &BTreeSet<u32>) -> Option<u32> {
        let mut best: Option<(f64, u32)> = None;
        for set in &self.sets {
            let Some(&fresh) = set.iter().find(|a| !window.contains(a)) else {
                continue;
            };
            let j = jaccard(set, window);
            if best.is_none_or(|(b, _)| j > b) {
                best = Some((j, fresh));
            }
        }
        best.map(|(_, a)| a)
    }
}

/// The instance with `node` replaced by `replacement`; padding is untouched.
pub fn substitute(inst: &PredictionInstance, node: u32, replacement: u32, mode: ReplaceMode) -> PredictionInstance {
    let mut out = inst.clone();
    let pad = inst.window.len() - inst.window_len;
    let positions: Vec<usize> = (pad..inst.window.len()).filter(|&i| inst.window[i] == node).collect();
    let chosen: &[usize] = match mode {
        ReplaceMode::All => &positions,
        ReplaceMode::Last => &positions[positions.len().saturating_sub(1)..],
    };
    for &i in chosen {
        out.window[i] = replacement;
    }
    out
}

/// Target-probability drop from replacing `node` with `replacement`.
pub fn perturb_node(
    model: &Misapp,
    inst: &PredictionInstance,
    index: usize,
    hop: usize,
    node: u32,
    replacement: u32,
    mode: ReplaceMode,
) -> Result<PerturbationResult> {
    if node == replacement || inst.apps().contains(&replacement) {
        return Err(Error::invalid("perturb", "replacement must be a new app"));
    }
    if !inst.apps().contains(&node) {
        return Err(Error::invalid("perturb", format!("app {node} is not in the window")));
    }
    let t = inst.target as usize - 1;
    let orig = model.forward(inst)?.probabilities;
    let pert = model.forward(&substitute(inst, node, replacement, mode))?.probabilities;
    Ok(PerturbationResult {
        index,
        target: inst.target,
        hop,
        node,
        replacement,
        p_orig: orig[t],
        p_pert: pert[t],
        delta: orig[t] - pert[t],
        top1_orig: argmax(&orig) as u32 + 1,
        top1_pert: argmax(&pert) as u32 + 1,
    })
}

/// The app the model leans on most: the max-PMI node of the highest-weight
/// hop, with lowest-index tie-breaking throughout.
pub fn influential_node(model: &Misapp, inst: &PredictionInstance, pmi: &PmiTable) -> Result<Option<(usize, u32)>> {
    let trace = model.forward(inst)?;
    let hop = argmax(&trace.hop_weights) + 1;
    let graphs = build_graphs(&inst.window)?;
    let mut best: Option<(f64, u32)> = None;
    for u in graphs.non_isolated(hop) {
        let s = pmi.pmi(u, inst.target);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, u));
        }
    }
    Ok(best.map(|(_, u)| (hop, u)))
}

pub fn perturb(
    model: &Misapp,
    inst: &PredictionInstance,
    index: usize,
    pmi: &PmiTable,
    donors: &DonorIndex,
    mode: ReplaceMode,
) -> Result<PerturbOutcome> {
    let skip = |reason: &str| {
        Ok(PerturbOutcome::Skipped {
            index,
            reason: reason.into(),
        })
    };
    let Some((hop, node)) = influential_node(model, inst, pmi)? else {
        return skip("top-weighted hop has no edges");
    };
    let window: BTreeSet<u32> = inst.apps().iter().copied().collect();
    let Some(replacement) = donors.replacement(&window) else {
        return skip("no donor app outside the window");
    };
    Ok(PerturbOutcome::Done(perturb_node(model, inst, index, hop, node, replacement, mode)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn inst(window: &[u32], target: u32) -> PredictionInstance {
        let mut w = vec![0; 8 - window.len()];
        w.extend_from_slice(window);
        PredictionInstance {
            user_id: "u".into(),
            window: w,
            window_len: window.len(),
            target,
            tau: 0,
            rho_category: None,
            timestamp: 0,
        }
    }

    #[test]
    fn donor_choice() {
        let seqs: Vec<Vec<u32>> = vec![vec![1, 2], vec![1, 2, 3, 7], vec![1, 2, 5], vec![9]];
        let d = DonorIndex::new(seqs.iter().map(Vec::as_slice));
        let w: BTreeSet<u32> = [1, 2, 3].into_iter().collect();
        // [1,2] has nothing new; [1,2,3,7] has jaccard 3/4.
        assert_eq!(d.replacement(&w), Some(7));
        let none = DonorIndex::new([[1u32, 2].as_slice()]);
        assert_eq!(none.replacement(&w), None);
    }

    #[test]
    fn substitution_keeps_structure() {
        let x = inst(&[1, 2, 1, 3], 4);
        let all = substitute(&x, 1, 5, ReplaceMode::All);
        assert_eq!(all.apps(), &[5, 2, 5, 3]);
        assert_eq!(all.window.len(), x.window.len());
        assert_eq!(all.window_len, x.window_len);
        let last = substitute(&x, 1, 5, ReplaceMode::Last);
        assert_eq!(last.apps(), &[1, 2, 5, 3]);
    }

    #[test]
    fn delta_definition_and_guard() {
        let m = Misapp::new(ModelConfig::toy(6), 0).unwrap();
        let x = inst(&[1, 2, 3], 4);
        let r = perturb_node(&m, &x, 0, 1, 2, 6, ReplaceMode::All).unwrap();
        assert_eq!(r.delta, r.p_orig - r.p_pert);
        assert!(perturb_node(&m, &x, 0, 1, 2, 2, ReplaceMode::All).is_err());
        assert!(perturb_node(&m, &x, 0, 1, 2, 3, ReplaceMode::All).is_err());
    }

    #[test]
    fn full_perturbation_runs() {
        let m = Misapp::new(ModelConfig::toy(6), 0).unwrap();
        let seqs: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![2, 3, 5], vec![6]];
        let pmi = PmiTable::build(seqs.iter().map(Vec::as_slice));
        let donors = DonorIndex::new(seqs.iter().map(Vec::as_slice));
        let x = inst(&[1, 2, 3], 4);
        match perturb(&m, &x, 0, &pmi, &donors, ReplaceMode::All).unwrap() {
            PerturbOutcome::Done(r) => {
                assert!(x.apps().contains(&r.node));
                assert_eq!(r.replacement, 4);
            }
            PerturbOutcome::Skipped { reason, .. } => assert!(reason.contains("edges")),
        }
    }
}
