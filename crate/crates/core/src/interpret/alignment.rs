use std::fmt::Write as _;

use log::warn;
use serde::Serialize;

use super::pmi::{hop_relevance, PmiTable};
use super::stats::kendall_tau;
use crate::error::Result;
use crate::graphs::build_graphs;
use crate::ingest::{AppVocab, PredictionInstance};
use crate::model::Misapp;
use crate::numeric::argmax;
use crate::train_eval::rank_of;

/// An instance the multi-hop model gets right and the 1-hop model misses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub index: usize,
    pub p_full: f64,
    pub p_one_hop: f64,
}

impl Candidate {
    pub fn gain(&self) -> f64 {
        self.p_full - self.p_one_hop
    }
}

/// The `n` qualifying instances with the largest target-probability gain
/// of `full` over `one_hop` (ties by instance order).
pub fn select_candidates(
    full: &Misapp,
    one_hop: &Misapp,
    instances: &[PredictionInstance],
    n: usize,
) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for (index, inst) in instances.iter().enumerate() {
        let t = inst.target as usize - 1;
        let pf = full.forward(inst)?.probabilities;
        let po = one_hop.forward(inst)?.probabilities;
        if rank_of(&pf, t) == 1 && rank_of(&po, t) > 1 {
            out.push(Candidate {
                index,
                p_full: pf[t],
                p_one_hop: po[t],
            });
        }
    }
    out.sort_by(|a, b| b.gain().total_cmp(&a.gain()).then(a.index.cmp(&b.index)));
    if out.len() < n {
        warn!("only {} qualifying samples, {n} requested", out.len());
    }
    out.truncate(n);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentSample {
    pub index: usize,
    pub target: u32,
    pub sims: Vec<f64>,
    pub empty_hops: Vec<bool>,
    pub hop_weights: Vec<f64>,
    pub tau: f64,
    pub top1_agree: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub samples: Vec<AlignmentSample>,
    pub mean_tau: f64,
    pub consistency_rate: f64,
}

/// Compares hop relevance against the hop weights returned by `weights`
/// for each selected instance.
pub fn alignment_study<F>(
    indices: &[usize],
    instances: &[PredictionInstance],
    pmi: &PmiTable,
    weights: F,
) -> Result<AlignmentReport>
where
    F: Fn(&PredictionInstance) -> Result<Vec<f64>>,
{
    let mut samples = Vec::with_capacity(indices.len());
    for &index in indices {
        let inst = &instances[index];
        let graphs = build_graphs(&inst.window)?;
        let rel = hop_relevance(&graphs, pmi, inst.target);
        let w = weights(inst)?;
        let tau = kendall_tau(&rel.sims, &w)?;
        samples.push(AlignmentSample {
            index,
            target: inst.target,
            top1_agree: argmax(&rel.sims) == argmax(&w),
            sims: rel.sims,
            empty_hops: rel.empty,
            hop_weights: w,
            tau,
        });
    }
    let n = samples.len().max(1) as f64;
    Ok(AlignmentReport {
        mean_tau: samples.iter().map(|s| s.tau).sum::<f64>() / n,
        consistency_rate: samples.iter().filter(|s| s.top1_agree).count() as f64 / n,
        samples,
    })
}

impl AlignmentReport {
    /// `sequence,target,sim_1..3,w_hop_1..3` with space-separated app names.
    pub fn to_csv(&self, instances: &[PredictionInstance], vocab: Option<&AppVocab>) -> String {
        let name = |a: u32| match vocab.and_then(|v| v.name(a)) {
            Some(n) => n.to_string(),
            None => a.to_string(),
        };
        let mut s = String::from("sequence,target,sim_1,sim_2,sim_3,w_hop_1,w_hop_2,w_hop_3\n");
        for smp in &self.samples {
            let seq: Vec<String> = instances[smp.index].apps().iter().map(|&a| name(a)).collect();
            write!(s, "{},{}", seq.join(" "), name(smp.target)).unwrap();
            for v in smp.sims.iter().chain(&smp.hop_weights) {
                write!(s, ",{v:.4}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::softmax;

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
    fn softmax_of_relevance_aligns_perfectly() {
        let sessions: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![2, 5], vec![1, 4, 5], vec![3, 6]];
        let pmi = PmiTable::build(sessions.iter().map(Vec::as_slice));
        let data = vec![inst(&[1, 2, 3, 6], 4), inst(&[5, 1, 2, 4], 3)];
        let rep = alignment_study(&[0, 1], &data, &pmi, |x| {
            let g = build_graphs(&x.window)?;
            Ok(softmax(&hop_relevance(&g, &pmi, x.target).sims))
        })
        .unwrap();
        assert_eq!(rep.mean_tau, 1.0);
        assert_eq!(rep.consistency_rate, 1.0);
        let csv = rep.to_csv(&data, None);
        assert!(csv.starts_with("sequence,target"));
        assert_eq!(csv.lines().count(), 3);
    }
}
