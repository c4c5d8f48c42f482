use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{FusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::numeric::{Checkpoint, Tensor};

/// Parameter indices of one fusion site.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionIds {
    /// Query/key/value projections of modality 1 then modality 2, each
    /// `d x d` with head `b` occupying rows `b*d/B .. (b+1)*d/B`.
    Cmgf {
        q1: usize,
        k1: usize,
        v1: usize,
        q2: usize,
        k2: usize,
        v2: usize,
    },
    Gated {
        w: usize,
    },
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnIds {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormIds {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerIds {
    pub attn: AttnIds,
    pub norm1: NormIds,
    pub ffn: FfnIds,
    pub norm2: NormIds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerIds {
    pub self_attn: AttnIds,
    pub norm1: NormIds,
    pub cross_attn: AttnIds,
    pub norm2: NormIds,
    pub ffn: FfnIds,
    pub norm3: NormIds,
}

/// Where each named parameter lives in [`ModelParams::tensors`]. Components
/// disabled by the config have no parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub app_emb: usize,
    pub hour_emb: Option<usize>,
    pub region_emb: Option<usize>,
    pub pool_q: usize,
    pub pool_k: usize,
    pub pool_v: usize,
    pub intent: usize,
    /// Fuses the temporal and spatial embeddings (both paths active only).
    pub fuse_context: Option<FusionIds>,
    /// Fuses the graph embedding with the context embedding.
    pub fuse_graph: Option<FusionIds>,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub layout: Layout,
}

enum Init {
    /// Uniform in `±1/sqrt(fan_in)`, fan-in taken as the last extent.
    FanIn,
    Zeros,
    Ones,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let t = match (init, self.rng.as_deref_mut()) {
            (Init::FanIn, Some(rng)) => {
                let fan_in = *shape.last().expect("rank >= 1");
                Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
            }
            (Init::Ones, _) => Tensor::full(shape, 1.0),
            _ => Tensor::zeros(shape),
        };
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn fusion(&mut self, prefix: &str, mode: FusionMode, d: usize) -> FusionIds {
        match mode {
            FusionMode::Cmgf => {
                let mut p = |n: &str| self.add(format!("{prefix}.{n}"), &[d, d], Init::FanIn);
                FusionIds::Cmgf {
                    q1: p("w_q1"),
                    k1: p("w_k1"),
                    v1: p("w_v1"),
                    q2: p("w_q2"),
                    k2: p("w_k2"),
                    v2: p("w_v2"),
                }
            }
            FusionMode::Gated => FusionIds::Gated {
                w: self.add(format!("{prefix}.w_gate"), &[d, 2 * d], Init::FanIn),
            },
            FusionMode::Sum => FusionIds::Sum,
            FusionMode::Mean => FusionIds::Mean,
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let mut p = |n: &str| self.add(format!("{prefix}.{n}"), &[d, d], Init::FanIn);
        AttnIds {
            q: p("w_q"),
            k: p("w_k"),
            v: p("w_v"),
            o: p("w_o"),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{prefix}.w1"), &[4 * d, d], Init::FanIn),
            b1: self.add(format!("{prefix}.b1"), &[4 * d], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), &[d, 4 * d], Init::FanIn),
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gamma: self.add(format!("{prefix}.gamma"), &[d], Init::Ones),
            beta: self.add(format!("{prefix}.beta"), &[d], Init::Zeros),
        }
    }
}

fn build(config: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> ModelParams {
    let d = config.dim;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng,
    };
    let app_emb = b.add("app_emb".into(), &[config.num_apps + 1, d], Init::FanIn);
    b.tensors[app_emb].row_mut(0).fill(0.0);
    let hour_emb = config
        .use_temporal
        .then(|| b.add("hour_emb".into(), &[config.num_hours, d], Init::FanIn));
    let region_emb = config
        .spatial_enabled()
        .then(|| b.add("region_emb".into(), &[config.num_categories, d], Init::FanIn));
    let pool_q = b.add("pool.w_q".into(), &[d, d], Init::FanIn);
    let pool_k = b.add("pool.w_k".into(), &[d, d], Init::FanIn);
    let pool_v = b.add("pool.w_v".into(), &[d, d], Init::FanIn);
    let intent = b.add("intent.w".into(), &[d, config.intent_window * d], Init::FanIn);
    let fuse_context = (hour_emb.is_some() && region_emb.is_some())
        .then(|| b.fusion("fuse_context", config.fusion, d));
    let fuse_graph = (hour_emb.is_some() || region_emb.is_some())
        .then(|| b.fusion("fuse_graph", config.fusion, d));
    let encoder = (0..config.layers)
        .map(|l| EncoderLayerIds {
            attn: b.attn(&format!("encoder.{l}.attn"), d),
            norm1: b.norm(&format!("encoder.{l}.norm1"), d),
            ffn: b.ffn(&format!("encoder.{l}.ffn"), d),
            norm2: b.norm(&format!("encoder.{l}.norm2"), d),
        })
        .collect();
    let decoder = if config.use_decoder {
        (0..config.layers)
            .map(|l| DecoderLayerIds {
                self_attn: b.attn(&format!("decoder.{l}.self_attn"), d),
                norm1: b.norm(&format!("decoder.{l}.norm1"), d),
                cross_attn: b.attn(&format!("decoder.{l}.cross_attn"), d),
                norm2: b.norm(&format!("decoder.{l}.norm2"), d),
                ffn: b.ffn(&format!("decoder.{l}.ffn"), d),
                norm3: b.norm(&format!("decoder.{l}.norm3"), d),
            })
            .collect()
    } else {
        Vec::new()
    };
    ModelParams {
        names: b.names,
        tensors: b.tensors,
        layout: Layout {
            app_emb,
            hour_emb,
            region_emb,
            pool_q,
            pool_k,
            pool_v,
            intent,
            fuse_context,
            fuse_graph,
            encoder,
            decoder,
        },
    }
}

impl ModelParams {
    /// Seeded initialization; the PAD row of the app table starts at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(build(config, Some(&mut rng)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn to_checkpoint(&self, config: &ModelConfig) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: serde_json::to_string(config)?,
            tensors: self
                .names
                .iter()
                .cloned()
                .zip(self.tensors.iter().cloned())
                .collect(),
        })
    }

    /// Rebuilds parameters from a checkpoint whose metadata is the model config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ModelConfig, Self)> {
        let config: ModelConfig = serde_json::from_str(&ck.meta)?;
        config.validate()?;
        let mut params = build(&config, None);
        if ck.tensors.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.len(),
                ck.tensors.len()
            )));
        }
        for (i, name) in params.names.iter().enumerate() {
            let t = ck
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != params.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    params.tensors[i].shape()
                )));
            }
            params.tensors[i] = t.clone();
        }
        Ok((config, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_pad_row_is_zero() {
        let cfg = ModelConfig::toy(6);
        let a = ModelParams::init(&cfg, 1).unwrap();
        let b = ModelParams::init(&cfg, 1).unwrap();
        let c = ModelParams::init(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tensors, c.tensors);
        assert!(a.tensors[a.layout.app_emb].row(0).iter().all(|&v| v == 0.0));
        let bound = 1.0 / (cfg.dim as f64).sqrt();
        assert!(a.get("pool.w_q").unwrap().data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn ablations_drop_parameters() {
        let full = ModelParams::init(&ModelConfig { num_categories: 3, ..ModelConfig::toy(6) }, 0).unwrap();
        assert!(full.layout.fuse_context.is_some());
        assert!(full.get("region_emb").is_some());
        let bare = ModelParams::init(
            &ModelConfig {
                use_temporal: false,
                use_decoder: false,
                ..ModelConfig::toy(6)
            },
            0,
        )
        .unwrap();
        assert!(bare.layout.fuse_graph.is_none());
        assert!(bare.layout.decoder.is_empty());
        assert!(bare.get("hour_emb").is_none());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = ModelConfig {
            fusion: FusionMode::Gated,
            num_categories: 2,
            ..ModelConfig::toy(4)
        };
        let p = ModelParams::init(&cfg, 3).unwrap();
        let ck = p.to_checkpoint(&cfg).unwrap();
        let (cfg2, p2) = ModelParams::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(p2, p);
    }
}
