use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{rank_of, MrrMode, RankingResult};
use crate::error::{Error, Result};
use crate::ingest::PredictionInstance;
use crate::model::{Misapp, ModelConfig};
use crate::numeric::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a better validation MRR@5.
    pub patience: Option<usize>,
    /// Where the best checkpoint is written whenever it improves.
    pub checkpoint: Option<PathBuf>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            lr: 0.001,
            epochs: 50,
            seed: 0,
            patience: None,
            checkpoint: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("{} is not a finite non-negative rate", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc1: Option<f64>,
    pub val_mrr5: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters of the best epoch (by validation MRR@5, or the last epoch
    /// without validation data).
    pub model: Misapp,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Ranks of every instance's target under `model`.
pub fn rank_instances(model: &Misapp, instances: &[PredictionInstance]) -> Result<Vec<usize>> {
    instances
        .iter()
        .map(|inst| Ok(rank_of(&model.scores(inst)?, inst.target as usize - 1)))
        .collect()
}

pub fn evaluate(model: &Misapp, instances: &[PredictionInstance], mode: MrrMode) -> Result<RankingResult> {
    Ok(RankingResult::from_ranks(rank_instances(model, instances)?, mode))
}

/// Mini-batch Adam training with a seeded shuffle per epoch.
pub fn fit(
    train: &[PredictionInstance],
    val: &[PredictionInstance],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("fit", "empty training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Misapp::new(model_config.clone(), config.seed)?;
    let mut adam = AdamState::new(&model.params.tensors, config.adam.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Misapp)> = None;
    let train_mode = model_config.dropout > 0.0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PredictionInstance> = chunk.iter().map(|&i| &train[i]).collect();
            let drop_rng: Option<&mut dyn rand::RngCore> = if train_mode { Some(&mut rng) } else { None };
            let (loss, grads) = model.loss_and_gradients(&batch, drop_rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adam.update(&mut model.params.tensors, &grads, config.lr)?;
            if !model.params.all_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_acc1, val_mrr5) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&model, val, MrrMode::Truncated)?;
            (Some(r.acc[&1]), Some(r.mrr[&5]))
        };
        info!(
            "epoch {epoch}: loss {train_loss:.5} val ACC@1 {} MRR@5 {}",
            val_acc1.map_or("-".into(), |v| format!("{v:.4}")),
            val_mrr5.map_or("-".into(), |v| format!("{v:.4}")),
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_acc1,
            val_mrr5,
        });

        let score = val_mrr5.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => score > *b || val_mrr5.is_none(),
        };
        if improved {
            if let Some(path) = &config.checkpoint {
                model.save(path)?;
            }
            best = Some((score, epoch, model.clone()));
        } else if let (Some(p), Some((_, be, _))) = (config.patience, &best) {
            if epoch - be >= p {
                info!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(FitResult {
        model,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(window: &[u32], target: u32) -> PredictionInstance {
        let mut w = vec![0; 8 - window.len()];
        w.extend_from_slice(window);
        PredictionInstance {
            user_id: "u".into(),
            window: w,
            window_len: window.len(),
            target,
            tau: 4,
            rho_category: None,
            timestamp: 0,
        }
    }

    fn small() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            lr: 0.01,
            epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn memorizes_single_instance() {
        let data = [inst(&[1, 2, 3], 4)];
        let cfg = TrainConfig { epochs: 150, lr: 0.01, ..small() };
        let out = fit(&data, &[], &ModelConfig::toy(5), &cfg).unwrap();
        assert!(out.history.last().unwrap().train_loss < 0.01);
        assert_eq!(rank_instances(&out.model, &data).unwrap(), vec![1]);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data = [inst(&[1, 2], 3), inst(&[2, 3], 1), inst(&[3, 1, 2], 4)];
        let mc = ModelConfig { dropout: 0.1, ..ModelConfig::toy(4) };
        let a = fit(&data, &data, &mc, &small()).unwrap();
        let b = fit(&data, &data, &mc, &small()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn zero_rate_keeps_parameters() {
        let data = [inst(&[1, 2], 3), inst(&[2, 3], 1)];
        let cfg = TrainConfig { lr: 0.0, ..small() };
        let out = fit(&data, &[], &ModelConfig::toy(4), &cfg).unwrap();
        assert_eq!(out.model.params, Misapp::new(ModelConfig::toy(4), 5).unwrap().params);
        let l: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
        assert!(l.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn pad_row_stays_zero() {
        let data = [inst(&[1, 2], 3), inst(&[2, 3], 1)];
        let out = fit(&data, &[], &ModelConfig::toy(4), &small()).unwrap();
        let app = out.model.params.layout.app_emb;
        assert!(out.model.params.tensors[app].row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_config() {
        let data = [inst(&[1], 2)];
        let cfg = TrainConfig { batch_size: 0, ..small() };
        assert!(matches!(fit(&data, &[], &ModelConfig::toy(3), &cfg), Err(Error::Config { .. })));
        assert!(fit(&[], &[], &ModelConfig::toy(3), &small()).is_err());
    }
}
