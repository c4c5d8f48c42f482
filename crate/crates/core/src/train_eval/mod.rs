//! Training loop, ranking metrics and frequency/recency baselines.

mod baselines;
mod metrics;
mod train;

pub use baselines::{baseline_mfu, baseline_mru, mru_rank, UsageCounts};
pub use metrics::{
    acc_at_k, mrr_at_k, mrr_with, rank_of, MetricRow, MetricsReport, MrrMode, RankingResult, ACC_KS, MRR_KS,
};
pub use train::{evaluate, fit, rank_instances, EpochRecord, FitResult, TrainConfig};
