use rand::RngCore;
use serde::Serialize;

use super::config::ModelConfig;
use super::layers::{self, AttnWeights, CmgfWeights, FfnWeights};
use super::params::{AttnIds, FfnIds, FusionIds, Layout};
use crate::error::{Error, Result};
use crate::graphs::{build_graphs, MultiHopGraphs};
use crate::ingest::{PredictionInstance, PAD};
use crate::numeric::{Tape, Tensor, Var};

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub graphs: MultiHopGraphs,
    /// Node ids in row order of the node matrices.
    pub nodes: Vec<u32>,
    pub node_reprs: Vec<Var>,
    pub pool_attention: Vec<Var>,
    pub graph_embeddings: Vec<Var>,
    pub intent: Var,
    pub hop_weights: Var,
    pub g: Var,
    pub h: Var,
    pub encoded: Var,
    pub u: Var,
    pub logits: Var,
}

/// Recorded intermediates of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForwardTrace {
    pub nodes: Vec<u32>,
    pub last_app: u32,
    /// `[nodes, d]` per hop.
    pub node_reprs: Vec<Vec<Vec<f64>>>,
    pub pool_attention: Vec<Vec<f64>>,
    pub graph_embeddings: Vec<Vec<f64>>,
    pub intent: Vec<f64>,
    pub hop_weights: Vec<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub encoded: Vec<f64>,
    pub u: Vec<f64>,
    pub logits: Vec<f64>,
    /// Over real apps; entry `i` is app `i + 1`.
    pub probabilities: Vec<f64>,
}

fn attn(v: &[Var], ids: &AttnIds) -> AttnWeights {
    AttnWeights {
        q: v[ids.q],
        k: v[ids.k],
        v: v[ids.v],
        o: v[ids.o],
    }
}

fn ffn(v: &[Var], ids: &FfnIds) -> FfnWeights {
    FfnWeights {
        w1: v[ids.w1],
        b1: v[ids.b1],
        w2: v[ids.w2],
        b2: v[ids.b2],
    }
}

fn fuse(tape: &mut Tape, v: &[Var], ids: &FusionIds, heads: usize, x1: Var, x2: Var) -> Result<Var> {
    match ids {
        FusionIds::Cmgf { q1, k1, v1, q2, k2, v2 } => {
            let w = CmgfWeights {
                q1: v[*q1],
                k1: v[*k1],
                v1: v[*v1],
                q2: v[*q2],
                k2: v[*k2],
                v2: v[*v2],
            };
            Ok(layers::cmgf(tape, x1, x2, &w, heads)?.0)
        }
        FusionIds::Gated { w } => layers::gated_fusion(tape, x1, x2, v[*w]),
        FusionIds::Sum => tape.add(x1, x2),
        FusionIds::Mean => {
            let s = tape.add(x1, x2)?;
            Ok(tape.scale(s, 0.5))
        }
    }
}

/// Shortens the trait-object lifetime so the generator can be lent repeatedly.
pub(crate) fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn drop(tape: &mut Tape, x: Var, rate: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
    match rng {
        Some(r) => tape.dropout(x, rate, *r),
        None => Ok(x),
    }
}

/// Records one forward pass. `vars` are the parameter handles in layout
/// order; dropout is applied only when `rng` is given.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &[Var],
    layout: &Layout,
    config: &ModelConfig,
    inst: &PredictionInstance,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<TapeForward> {
    inst.validate(config.window, config.num_apps)?;
    if inst.tau as usize >= config.num_hours {
        return Err(Error::invalid(
            "embed_context",
            format!("hour {} outside 0..{}", inst.tau, config.num_hours),
        ));
    }
    let graphs = build_graphs(&inst.window)?;
    let nodes: Vec<u32> = graphs.nodes.iter().copied().collect();
    let pos = |a: u32| nodes.binary_search(&a).expect("window app is a node");
    let rate = config.dropout;

    let indices: Vec<usize> = nodes.iter().map(|&a| a as usize).collect();
    let x0 = tape.gather(vars[layout.app_emb], &indices)?;
    let x0 = drop(tape, x0, rate, &mut rng)?;

    let mut node_reprs = Vec::new();
    let mut pool_attention = Vec::new();
    let mut graph_embeddings = Vec::new();
    let query = pos(graphs.last_app);
    for hop in 1..=config.hops() {
        let adj = layers::normalized_adjacency(&nodes, graphs.edges(hop));
        let n = layers::lightgcn_propagate(tape, x0, &adj, config.gcn_layers)?;
        let (g, alpha) = layers::attention_pool(
            tape,
            n,
            query,
            vars[layout.pool_q],
            vars[layout.pool_k],
            vars[layout.pool_v],
        )?;
        node_reprs.push(n);
        pool_attention.push(alpha);
        graph_embeddings.push(g);
    }

    let k = config.intent_window;
    let rows: Vec<Option<usize>> = inst.window[config.window - k..]
        .iter()
        .map(|&a| (a != PAD).then(|| pos(a)))
        .collect();
    let intent = layers::immediate_intent(tape, node_reprs[0], &rows, vars[layout.intent])?;
    let (g, hop_weights) = if config.use_multihop {
        layers::hop_attention(tape, intent, &graph_embeddings)?
    } else {
        (graph_embeddings[0], tape.constant(Tensor::vector(vec![1.0])))
    };

    let e_t = match layout.hour_emb {
        Some(id) => {
            let e = tape.gather(vars[id], &[inst.tau as usize])?;
            let e = tape.reshape(e, &[config.dim])?;
            Some(drop(tape, e, rate, &mut rng)?)
        }
        None => None,
    };
    let e_r = match (layout.region_emb, inst.rho_category) {
        (Some(id), Some(c)) => {
            if c == 0 || c as usize > config.num_categories {
                return Err(Error::invalid(
                    "embed_context",
                    format!("category {c} outside 1..={}", config.num_categories),
                ));
            }
            let e = tape.gather(vars[id], &[c as usize - 1])?;
            let e = tape.reshape(e, &[config.dim])?;
            Some(drop(tape, e, rate, &mut rng)?)
        }
        _ => None,
    };
    let context = match (e_t, e_r) {
        (Some(t), Some(r)) => {
            let ids = layout.fuse_context.as_ref().expect("both context paths have a site");
            Some(fuse(tape, vars, ids, config.fusion_heads, t, r)?)
        }
        (one, other) => one.or(other),
    };
    let h = match context {
        Some(c) => {
            let ids = layout.fuse_graph.as_ref().expect("context implies a graph site");
            fuse(tape, vars, ids, config.fusion_heads, g, c)?
        }
        None => g,
    };

    let mut enc = h;
    for l in &layout.encoder {
        let a = layers::attention(tape, enc, enc, &attn(vars, &l.attn), config.heads)?;
        enc = layers::add_norm(tape, enc, a, vars[l.norm1.gamma], vars[l.norm1.beta])?;
        let f = layers::feed_forward(tape, enc, &ffn(vars, &l.ffn), rate, reborrow(&mut rng))?;
        enc = layers::add_norm(tape, enc, f, vars[l.norm2.gamma], vars[l.norm2.beta])?;
    }

    let mut u = if layout.decoder.is_empty() { enc } else { intent };
    for l in &layout.decoder {
        let a = layers::attention(tape, u, u, &attn(vars, &l.self_attn), config.heads)?;
        u = layers::add_norm(tape, u, a, vars[l.norm1.gamma], vars[l.norm1.beta])?;
        let c = layers::attention(tape, u, enc, &attn(vars, &l.cross_attn), config.heads)?;
        u = layers::add_norm(tape, u, c, vars[l.norm2.gamma], vars[l.norm2.beta])?;
        let f = layers::feed_forward(tape, u, &ffn(vars, &l.ffn), rate, reborrow(&mut rng))?;
        u = layers::add_norm(tape, u, f, vars[l.norm3.gamma], vars[l.norm3.beta])?;
    }

    let logits = layers::score(tape, u, vars[layout.app_emb])?;
    Ok(TapeForward {
        graphs,
        nodes,
        node_reprs,
        pool_attention,
        graph_embeddings,
        intent,
        hop_weights,
        g,
        h,
        encoded: enc,
        u,
        logits,
    })
}

impl TapeForward {
    pub fn trace(&self, tape: &Tape) -> ForwardTrace {
        let vec = |v: Var| tape.value(v).data().to_vec();
        let matrix = |v: Var| {
            let t = tape.value(v);
            (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
        };
        let logits = vec(self.logits);
        ForwardTrace {
            nodes: self.nodes.clone(),
            last_app: self.graphs.last_app,
            node_reprs: self.node_reprs.iter().map(|&v| matrix(v)).collect(),
            pool_attention: self.pool_attention.iter().map(|&v| vec(v)).collect(),
            graph_embeddings: self.graph_embeddings.iter().map(|&v| vec(v)).collect(),
            intent: vec(self.intent),
            hop_weights: vec(self.hop_weights),
            g: vec(self.g),
            h: vec(self.h),
            encoded: vec(self.encoded),
            u: vec(self.u),
            probabilities: crate::numeric::softmax(&logits),
            logits,
        }
    }
}
