//! The next-app network: per-hop graph propagation and pooling, immediate
//! intent, hop attention, context fusion, encoder/decoder and scoring.

mod config;
mod forward;
pub mod layers;
mod params;

use std::path::Path;

use rand::RngCore;
use serde_json::json;

pub use config::{FusionMode, ModelConfig};
pub use forward::{forward_on_tape, ForwardTrace, TapeForward};
pub use params::{AttnIds, DecoderLayerIds, EncoderLayerIds, FfnIds, FusionIds, Layout, ModelParams, NormIds};

use crate::error::{Error, Result};
use crate::ingest::{AppVocab, PredictionInstance};
use crate::numeric::{Checkpoint, Tape, Tensor, Var};

/// Mean cross-entropy of `batch` recorded on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    vars: &[Var],
    layout: &Layout,
    config: &ModelConfig,
    batch: &[&PredictionInstance],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("loss", "empty batch"));
    }
    let mut total: Option<Var> = None;
    for inst in batch {
        let f = forward_on_tape(tape, vars, layout, config, inst, forward::reborrow(&mut rng))?;
        let l = layers::cross_entropy(tape, f.logits, inst.target)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Misapp {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Misapp {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Misapp { config, params })
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Forward pass in evaluation mode (no dropout).
    pub fn forward(&self, inst: &PredictionInstance) -> Result<ForwardTrace> {
        self.forward_with(inst, None)
    }

    pub fn forward_with(&self, inst: &PredictionInstance, rng: Option<&mut dyn RngCore>) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let f = forward_on_tape(&mut tape, &vars, &self.params.layout, &self.config, inst, rng)?;
        Ok(f.trace(&tape))
    }

    /// Scores of every real app; entry `i` is app `i + 1`.
    pub fn scores(&self, inst: &PredictionInstance) -> Result<Vec<f64>> {
        Ok(self.forward(inst)?.logits)
    }

    /// Mean batch loss and its gradient for every parameter tensor. The
    /// PAD row of the app table always gets a zero gradient.
    pub fn loss_and_gradients(
        &self,
        batch: &[&PredictionInstance],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let loss = batch_loss(&mut tape, &vars, &self.params.layout, &self.config, batch, rng)?;
        let mut grads = tape.backward(loss)?;
        let mut out: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
        out[self.params.layout.app_emb].row_mut(0).fill(0.0);
        Ok((tape.scalar(loss), out))
    }

    pub fn mean_loss(&self, instances: &[PredictionInstance]) -> Result<f64> {
        let mut total = 0.0;
        for inst in instances {
            let logits = self.scores(inst)?;
            let p = crate::numeric::softmax(&logits);
            total -= p[inst.target as usize - 1].ln();
        }
        Ok(total / instances.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        self.params.to_checkpoint(&self.config)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (config, params) = ModelParams::from_checkpoint(ck)?;
        Ok(Misapp { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// JSON view of a trace: hop weights, per-hop pooling attention keyed by
/// app, and the ten most probable apps.
pub fn trace_json(trace: &ForwardTrace, vocab: Option<&AppVocab>) -> serde_json::Value {
    let name = |a: u32| match vocab.and_then(|v| v.name(a)) {
        Some(n) => n.to_string(),
        None => a.to_string(),
    };
    let mut order: Vec<usize> = (0..trace.probabilities.len()).collect();
    order.sort_by(|&a, &b| trace.probabilities[b].total_cmp(&trace.probabilities[a]).then(a.cmp(&b)));
    let top: Vec<_> = order
        .iter()
        .take(10)
        .map(|&i| json!({"app": name(i as u32 + 1), "probability": trace.probabilities[i]}))
        .collect();
    let pools: Vec<_> = trace
        .pool_attention
        .iter()
        .map(|alpha| {
            trace
                .nodes
                .iter()
                .zip(alpha)
                .map(|(&a, &w)| json!({"app": name(a), "weight": w}))
                .collect::<Vec<_>>()
        })
        .collect();
    json!({
        "last_app": name(trace.last_app),
        "hop_weights": trace.hop_weights,
        "pool_attention": pools,
        "top10": top,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inst(window: &[u32], target: u32, tau: u8, rho: Option<u32>) -> PredictionInstance {
        let mut w = vec![0; 8 - window.len()];
        w.extend_from_slice(window);
        PredictionInstance {
            user_id: "u".into(),
            window: w,
            window_len: window.len(),
            target,
            tau,
            rho_category: rho,
            timestamp: 0,
        }
    }

    fn sums_to_one(v: &[f64]) -> bool {
        (v.iter().sum::<f64>() - 1.0).abs() < 1e-9 && v.iter().all(|&x| x >= 0.0)
    }

    #[test]
    fn trace_distributions_are_normalized() {
        let cfg = ModelConfig { num_categories: 3, ..ModelConfig::toy(6) };
        let m = Misapp::new(cfg, 4).unwrap();
        let t = m.forward(&inst(&[1, 2, 3, 1, 4], 5, 13, Some(2))).unwrap();
        assert_eq!(t.hop_weights.len(), 3);
        assert!(sums_to_one(&t.hop_weights));
        assert!(sums_to_one(&t.probabilities));
        assert_eq!(t.probabilities.len(), 6);
        assert!(t.pool_attention.iter().all(|a| sums_to_one(a)));
        assert_eq!(t.u.len(), 8);
    }

    #[test]
    fn forward_is_deterministic_including_dropout() {
        let cfg = ModelConfig { dropout: 0.2, ..ModelConfig::toy(5) };
        let m = Misapp::new(cfg, 1).unwrap();
        let x = inst(&[2, 3, 2], 1, 7, None);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(m.forward_with(&x, Some(&mut r1)).unwrap(), m.forward_with(&x, Some(&mut r2)).unwrap());
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn single_hop_ablation_uses_first_graph() {
        let cfg = ModelConfig { use_multihop: false, ..ModelConfig::toy(5) };
        let m = Misapp::new(cfg, 2).unwrap();
        let t = m.forward(&inst(&[1, 2, 3], 4, 0, None)).unwrap();
        assert_eq!(t.hop_weights, vec![1.0]);
        assert_eq!(t.g, t.graph_embeddings[0]);
    }

    #[test]
    fn bare_configuration_still_predicts() {
        let cfg = ModelConfig {
            use_multihop: false,
            use_temporal: false,
            use_spatial: false,
            use_decoder: false,
            ..ModelConfig::toy(4)
        };
        let m = Misapp::new(cfg, 3).unwrap();
        let t = m.forward(&inst(&[3], 2, 5, Some(1))).unwrap();
        assert_eq!(t.h, t.g);
        assert_eq!(t.u, t.encoded);
        assert!(sums_to_one(&t.probabilities));
    }

    #[test]
    fn rejects_bad_context() {
        let cfg = ModelConfig { num_categories: 2, ..ModelConfig::toy(4) };
        let m = Misapp::new(cfg, 0).unwrap();
        assert!(m.forward(&inst(&[1, 2], 3, 24, None)).is_err());
        assert!(m.forward(&inst(&[1, 2], 3, 1, Some(3))).is_err());
        assert!(m.forward(&inst(&[1, 2], 0, 1, None)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for fusion in [FusionMode::Cmgf, FusionMode::Gated] {
            let cfg = ModelConfig { fusion, num_categories: 2, ..ModelConfig::toy(12) };
            let m = Misapp::new(cfg.clone(), 0).unwrap();
            let batch = [
                inst(&[1, 2, 3, 4, 2, 5, 6, 3], 7, 3, Some(1)),
                inst(&[8, 9, 10, 8, 11, 12, 9, 7], 2, 20, Some(2)),
            ];
            let refs: Vec<&PredictionInstance> = batch.iter().collect();
            let layout = m.params.layout.clone();
            let errs = finite_diff_check(
                |tape, vars| batch_loss(tape, vars, &layout, &cfg, &refs, None),
                &m.params.tensors,
                1e-5,
            )
            .unwrap();
            for (name, e) in m.params.names.iter().zip(&errs) {
                assert!(*e < 1e-4, "{fusion:?} {name}: {e}");
            }
        }
    }

    #[test]
    fn pad_row_gradient_is_masked() {
        let m = Misapp::new(ModelConfig::toy(4), 0).unwrap();
        let x = inst(&[1, 2], 3, 1, None);
        let (loss, grads) = m.loss_and_gradients(&[&x], None).unwrap();
        assert!(loss > 0.0);
        assert!(grads[m.params.layout.app_emb].row(0).iter().all(|&g| g == 0.0));
        assert!(relative_error(loss, m.mean_loss(&[x]).unwrap()) < 1e-12);
    }

    #[test]
    fn trace_json_lists_top_apps() {
        let m = Misapp::new(ModelConfig::toy(12), 0).unwrap();
        let t = m.forward(&inst(&[1, 2], 3, 1, None)).unwrap();
        let j = trace_json(&t, None);
        assert_eq!(j["top10"].as_array().unwrap().len(), 10);
        assert_eq!(j["hop_weights"].as_array().unwrap().len(), 3);
    }
}
