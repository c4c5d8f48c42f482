//! Hop-relevance analysis, rank agreement with learned hop weights, and
//! structured input perturbation.

mod alignment;
mod perturb;
mod pmi;
mod stats;

pub use alignment::{alignment_study, select_candidates, AlignmentReport, AlignmentSample, Candidate};
pub use perturb::{
    influential_node, perturb, perturb_node, substitute, DonorIndex, PerturbOutcome, PerturbationResult, ReplaceMode,
};
pub use pmi::{hop_relevance, HopRelevance, PmiTable, PMI_EPSILON};
pub use stats::{jaccard, kendall_tau, sign_test};
