//! Differentiable building blocks. Every function records onto a [`Tape`] and
//! works on single `[d]` vectors unless stated otherwise.

use std::collections::BTreeSet;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::graphs::Edge;
use crate::numeric::{Tape, Tensor, Var, LAYER_NORM_EPS};

/// Symmetrically normalized adjacency over `nodes` (in sorted order). The
/// neighbor set of a node is the union of its in- and out-neighbors.
pub fn normalized_adjacency(nodes: &[u32], edges: &BTreeSet<Edge>) -> Tensor {
    let n = nodes.len();
    let pos = |a: u32| nodes.binary_search(&a).expect("edge endpoint is a node");
    let mut nbrs = vec![BTreeSet::new(); n];
    for &(u, v) in edges {
        let (i, j) = (pos(u), pos(v));
        nbrs[i].insert(j);
        nbrs[j].insert(i);
    }
    let mut adj = Tensor::zeros(&[n, n]);
    for (i, set) in nbrs.iter().enumerate() {
        for &j in set {
            adj.data_mut()[i * n + j] = 1.0 / ((set.len() * nbrs[j].len()) as f64).sqrt();
        }
    }
    adj
}

/// Mean of `x0, A x0, ..., A^layers x0` for node matrix `x0: [n, d]`.
pub fn lightgcn_propagate(tape: &mut Tape, x0: Var, adjacency: &Tensor, layers: usize) -> Result<Var> {
    let adj = tape.constant(adjacency.clone());
    let mut outs = vec![x0];
    for _ in 0..layers {
        let prev = *outs.last().unwrap();
        outs.push(tape.matmul(adj, prev)?);
    }
    let stacked = tape.stack(&outs)?;
    tape.mean(stacked, 0)
}

/// Row `i` of a rank-2 node as a `[d]` vector.
pub fn row(tape: &mut Tape, x: Var, i: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let r = tape.slice(x, 0, i, 1)?;
    tape.reshape(r, &[d])
}

/// Attention pooling of node rows `n: [m, d]` queried by row `query`.
/// Returns the pooled `[d]` vector and the `[m]` attention weights.
pub fn attention_pool(
    tape: &mut Tape,
    n: Var,
    query: usize,
    w_q: Var,
    w_k: Var,
    w_v: Var,
) -> Result<(Var, Var)> {
    let d = tape.shape(n)[1];
    let last = row(tape, n, query)?;
    let q = tape.matmul(w_q, last)?;
    let wk_t = tape.transpose(w_k)?;
    let keys = tape.matmul(n, wk_t)?;
    let logits = tape.matmul(keys, q)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let alpha = tape.softmax(logits, 0)?;
    let wv_t = tape.transpose(w_v)?;
    let values = tape.matmul(n, wv_t)?;
    let g = tape.matmul(alpha, values)?;
    Ok((g, alpha))
}

/// Projects the concatenated rows of `n1` selected by `rows` (oldest first;
/// `None` stands for a padded slot and contributes zeros).
pub fn immediate_intent(tape: &mut Tape, n1: Var, rows: &[Option<usize>], w_intent: Var) -> Result<Var> {
    let d = tape.shape(n1)[1];
    let parts = rows
        .iter()
        .map(|r| match r {
            Some(i) => row(tape, n1, *i),
            None => Ok(tape.constant(Tensor::zeros(&[d]))),
        })
        .collect::<Result<Vec<_>>>()?;
    let cat = tape.concat(&parts, 0)?;
    tape.matmul(w_intent, cat)
}

/// Softmax over `s . g_k` and the weighted sum of the `g_k`.
pub fn hop_attention(tape: &mut Tape, s: Var, graphs: &[Var]) -> Result<(Var, Var)> {
    let stacked = tape.stack(graphs)?;
    let logits = tape.matmul(stacked, s)?;
    let weights = tape.softmax(logits, 0)?;
    let g = tape.matmul(weights, stacked)?;
    Ok((g, weights))
}

/// Projections of one cross-modal gated fusion site, each `d x d` with head
/// `b` owning rows `b*d/B .. (b+1)*d/B`.
#[derive(Clone, Copy, Debug)]
pub struct CmgfWeights {
    pub q1: Var,
    pub k1: Var,
    pub v1: Var,
    pub q2: Var,
    pub k2: Var,
    pub v2: Var,
}

/// Cross-modal gated fusion with `heads` scalar sigmoid gates per direction.
/// Returns the fused vector and the gates as `(g_1<-2, g_2<-1)` per head.
pub fn cmgf(
    tape: &mut Tape,
    x1: Var,
    x2: Var,
    w: &CmgfWeights,
    heads: usize,
) -> Result<(Var, Vec<(f64, f64)>)> {
    let d = tape.shape(x1)[0];
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid("cmgf", format!("{heads} heads do not divide {d}")));
    }
    let dk = d / heads;
    let q1 = tape.matmul(w.q1, x1)?;
    let k1 = tape.matmul(w.k1, x1)?;
    let v1 = tape.matmul(w.v1, x1)?;
    let q2 = tape.matmul(w.q2, x2)?;
    let k2 = tape.matmul(w.k2, x2)?;
    let v2 = tape.matmul(w.v2, x2)?;
    let mut a1 = Vec::with_capacity(heads);
    let mut a2 = Vec::with_capacity(heads);
    let mut gates = Vec::with_capacity(heads);
    let scale = 1.0 / (dk as f64).sqrt();
    for b in 0..heads {
        let head = |tape: &mut Tape, x: Var| tape.slice(x, 0, b * dk, dk);
        let (qb1, kb1, vb1) = (head(tape, q1)?, head(tape, k1)?, head(tape, v1)?);
        let (qb2, kb2, vb2) = (head(tape, q2)?, head(tape, k2)?, head(tape, v2)?);
        let s12 = tape.dot(qb1, kb2)?;
        let s12 = tape.scale(s12, scale);
        let g12 = tape.sigmoid(s12);
        let s21 = tape.dot(qb2, kb1)?;
        let s21 = tape.scale(s21, scale);
        let g21 = tape.sigmoid(s21);
        gates.push((tape.scalar(g12), tape.scalar(g21)));
        a1.push(tape.scale_by(g12, vb2)?);
        a2.push(tape.scale_by(g21, vb1)?);
    }
    let a1 = tape.concat(&a1, 0)?;
    let a2 = tape.concat(&a2, 0)?;
    let z = tape.add(a1, a2)?;
    Ok((tape.scale(z, 0.5), gates))
}

/// `sigmoid(W [x1 || x2]) * x1 + (1 - sigmoid(.)) * x2` with `W: [d, 2d]`.
pub fn gated_fusion(tape: &mut Tape, x1: Var, x2: Var, w: Var) -> Result<Var> {
    let cat = tape.concat(&[x1, x2], 0)?;
    let pre = tape.matmul(w, cat)?;
    let gate = tape.sigmoid(pre);
    let diff = tape.sub(x1, x2)?;
    let gated = tape.mul(gate, diff)?;
    tape.add(x2, gated)
}

#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// Multi-head attention of the single query token `x` over the single
/// key/value token `memory`.
pub fn attention(tape: &mut Tape, x: Var, memory: Var, w: &AttnWeights, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[0];
    let dh = d / heads;
    let q = tape.matmul(w.q, x)?;
    let k = tape.matmul(w.k, memory)?;
    let v = tape.matmul(w.v, memory)?;
    let mut outs = Vec::with_capacity(heads);
    for b in 0..heads {
        let qb = tape.slice(q, 0, b * dh, dh)?;
        let kb = tape.slice(k, 0, b * dh, dh)?;
        let vb = tape.slice(v, 0, b * dh, dh)?;
        let score = tape.dot(qb, kb)?;
        let score = tape.scale(score, 1.0 / (dh as f64).sqrt());
        let score = tape.reshape(score, &[1])?;
        let weight = tape.softmax(score, 0)?;
        outs.push(tape.scale_by(weight, vb)?);
    }
    let cat = tape.concat(&outs, 0)?;
    tape.matmul(w.o, cat)
}

#[derive(Clone, Copy, Debug)]
pub struct FfnWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn feed_forward(
    tape: &mut Tape,
    x: Var,
    w: &FfnWeights,
    dropout: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let h = tape.matmul(w.w1, x)?;
    let h = tape.add(h, w.b1)?;
    let mut h = tape.gelu(h);
    if let Some(rng) = rng {
        h = tape.dropout(h, dropout, rng)?;
    }
    let out = tape.matmul(w.w2, h)?;
    tape.add(out, w.b2)
}

/// Layer norm of `x + delta` followed by the elementwise affine map.
pub fn add_norm(tape: &mut Tape, x: Var, delta: Var, gamma: Var, beta: Var) -> Result<Var> {
    let sum = tape.add(x, delta)?;
    let normed = tape.layer_norm(sum, LAYER_NORM_EPS)?;
    let scaled = tape.mul(normed, gamma)?;
    tape.add(scaled, beta)
}

/// Scores of every real app (the PAD row 0 is skipped) against `u`.
pub fn score(tape: &mut Tape, u: Var, app_emb: Var) -> Result<Var> {
    let rows = tape.shape(app_emb)[0];
    if rows < 2 {
        return Err(Error::invalid("score", "embedding table has no real apps"));
    }
    let real = tape.slice(app_emb, 0, 1, rows - 1)?;
    tape.matmul(real, u)
}

/// Cross-entropy of `logits` against the 1-based app index `target`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, target: u32) -> Result<Var> {
    let n = tape.shape(logits)[0];
    if target == 0 || target as usize > n {
        return Err(Error::invalid("loss", format!("target {target} outside 1..={n}")));
    }
    let lp = tape.log_softmax(logits, 0)?;
    let picked = tape.pick(lp, target as usize - 1)?;
    Ok(tape.scale(picked, -1.0))
}
