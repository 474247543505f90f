//! Dynamic graph construction: one weighted directed adjacency per input step.
//!
//! For every step `s` of the input window the block
//!
//! 1. runs three GRU chains backwards in time (source, destination and hop
//!    embeddings),
//! 2. gates the source/destination embeddings with that step's base embeddings,
//! 3. scores every ordered pair with a linear head over `tanh([e_i ; e_j])`,
//! 4. normalizes the scores to mean 0 / std `alpha` and squashes them to edge
//!    probabilities,
//! 5. (training) relaxes the Bernoulli edges with logistic noise and drops
//!    edges at rate `1 - gamma`,
//! 6. picks a hop radius per node and prunes each row to its k-hop mask.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{open_unit, StreamRng};
use crate::roadnet::StructureInfoGroup;
use crate::tensor::Tensor;

/// Edge probabilities are kept inside `[EDGE_CLAMP, 1 - EDGE_CLAMP]`.
pub const EDGE_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How the hard hop choice passes gradients in training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopEstimator {
    /// Hard one-hot forward, Gumbel-softmax gradient backward.
    StraightThrough,
    /// Soft Gumbel-softmax weights forward and backward. Exactly
    /// differentiable, used by the gradient checks.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub nodes: usize,
    pub input_len: usize,
    pub features: usize,
    pub embed_dim: usize,
    pub hop_embed_dim: usize,
    /// Width of the projected flow fed into the GRU chains.
    pub proj_dim: usize,
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub eval_sampling: bool,
    pub hop_estimator: HopEstimator,
}

/// Parameters of one recurrent embedding chain.
#[derive(Debug, Clone)]
pub struct ChainParams {
    pub init: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub z_w: ParamId,
    pub z_b: ParamId,
    pub r_w: ParamId,
    pub r_b: ParamId,
    pub g_w: ParamId,
    pub g_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct GateParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct EdgeHeadParams {
    /// Weights on the source half of the concatenation, `d x 1`.
    pub w_src: ParamId,
    /// Weights on the destination half, `d x 1`.
    pub w_dst: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct HopSelectorParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct GraphParams {
    pub st: ChainParams,
    pub ed: ChainParams,
    pub hop: ChainParams,
    pub base_st: Vec<ParamId>,
    pub base_ed: Vec<ParamId>,
    pub gate_st: GateParams,
    pub gate_ed: GateParams,
    pub edge_head: EdgeHeadParams,
    pub selector: HopSelectorParams,
}

/// Parameter initialiser shared by every module.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut StreamRng,
}

impl Init<'_> {
    /// Glorot-uniform matrix.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.add(name, Tensor::matrix(fan_in, fan_out, data))
    }

    pub fn weight_shaped(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(&[rows, cols]))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.store.add(name, Tensor::full(&[rows, cols], 1.0))
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn embedding(&mut self, name: &str, rows: usize, cols: usize, scale: f64) -> Result<ParamId> {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-scale..scale)).collect();
        self.store.add(name, Tensor::matrix(rows, cols, data))
    }
}

impl ChainParams {
    pub fn new(init: &mut Init<'_>, prefix: &str, nodes: usize, dim: usize, features: usize, proj: usize) -> Result<Self> {
        Ok(ChainParams {
            init: init.embedding(&format!("{prefix}.init"), nodes, dim, 1.0)?,
            proj_w: init.weight(&format!("{prefix}.proj.w"), features, proj)?,
            proj_b: init.zeros(&format!("{prefix}.proj.b"), 1, proj)?,
            z_w: init.weight(&format!("{prefix}.z.w"), dim + proj, dim)?,
            z_b: init.zeros(&format!("{prefix}.z.b"), 1, dim)?,
            r_w: init.weight(&format!("{prefix}.r.w"), dim + proj, dim)?,
            r_b: init.zeros(&format!("{prefix}.r.b"), 1, dim)?,
            g_w: init.weight(&format!("{prefix}.g.w"), dim + proj, dim)?,
            g_b: init.zeros(&format!("{prefix}.g.b"), 1, dim)?,
        })
    }
}

impl GraphParams {
    pub fn new(init: &mut Init<'_>, cfg: &GraphConfig, hop_group: usize) -> Result<Self> {
        let (n, d, m, f, p) = (cfg.nodes, cfg.embed_dim, cfg.hop_embed_dim, cfg.features, cfg.proj_dim);
        let st = ChainParams::new(init, "graph.st", n, d, f, p)?;
        let ed = ChainParams::new(init, "graph.ed", n, d, f, p)?;
        let hop = ChainParams::new(init, "graph.hop", n, m, f, p)?;
        let mut base_st = Vec::with_capacity(cfg.input_len);
        let mut base_ed = Vec::with_capacity(cfg.input_len);
        for s in 0..cfg.input_len {
            base_st.push(init.embedding(&format!("graph.base_st.{s}"), n, d, 1.0)?);
            base_ed.push(init.embedding(&format!("graph.base_ed.{s}"), n, d, 1.0)?);
        }
        Ok(GraphParams {
            st,
            ed,
            hop,
            base_st,
            base_ed,
            gate_st: GateParams { w: init.weight("graph.gate_st.w", d, d)?, b: init.zeros("graph.gate_st.b", 1, d)? },
            gate_ed: GateParams { w: init.weight("graph.gate_ed.w", d, d)?, b: init.zeros("graph.gate_ed.b", 1, d)? },
            edge_head: EdgeHeadParams {
                w_src: init.weight("graph.edge.w_src", d, 1)?,
                w_dst: init.weight("graph.edge.w_dst", d, 1)?,
                b: init.zeros("graph.edge.b", 1, 1)?,
            },
            selector: HopSelectorParams {
                w1: init.weight("graph.hop_nn.w1", m, m)?,
                b1: init.zeros("graph.hop_nn.b1", 1, m)?,
                w2: init.weight("graph.hop_nn.w2", m, hop_group)?,
                b2: init.zeros("graph.hop_nn.b2", 1, hop_group)?,
            },
        })
    }
}

/// `x W + b` with `b` broadcast over rows.
pub fn linear(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

/// One backward-in-time GRU step: `E(s-1) = GRU(E(s), X(s-1))`.
pub fn gru_step(tape: &mut Tape, store: &ParamStore, p: &ChainParams, emb: Var, x_prev: Var) -> Result<Var> {
    let proj = linear(tape, store, x_prev, p.proj_w, p.proj_b)?;
    let joint = tape.concat_cols(&[emb, proj])?;
    let z = linear(tape, store, joint, p.z_w, p.z_b)?;
    let z = tape.sigmoid(z);
    let r = linear(tape, store, joint, p.r_w, p.r_b)?;
    let r = tape.sigmoid(r);
    let reset = tape.mul(r, emb)?;
    let joint_r = tape.concat_cols(&[reset, proj])?;
    let cand = linear(tape, store, joint_r, p.g_w, p.g_b)?;
    let cand = tape.tanh(cand);
    let ones = Tensor::full(tape.value(z).shape(), 1.0);
    let neg_z = tape.scale(z, -1.0);
    let keep_new = tape.add_const(neg_z, &ones)?;
    let new_part = tape.mul(keep_new, cand)?;
    let old_part = tape.mul(z, emb)?;
    tape.add(new_part, old_part)
}

/// Embeddings for every window position, oldest first. The newest position
/// holds the chain's initial embedding; each earlier one is one GRU step back
/// in time, fed with the flow at that earlier position.
pub fn run_chain(tape: &mut Tape, store: &ParamStore, p: &ChainParams, inputs: &[Var]) -> Result<Vec<Var>> {
    let len = inputs.len();
    if len == 0 {
        return Err(Error::config("run_chain needs a non-empty window"));
    }
    let mut out = vec![tape.param(store, p.init); len];
    for pos in (1..len).rev() {
        out[pos - 1] = gru_step(tape, store, p, out[pos], inputs[pos - 1])?;
    }
    Ok(out)
}

/// `E * sigmoid(E_base W + b)`.
pub fn gate(tape: &mut Tape, store: &ParamStore, emb: Var, base: ParamId, g: &GateParams) -> Result<Var> {
    let base = tape.param(store, base);
    let pre = linear(tape, store, base, g.w, g.b)?;
    let open = tape.sigmoid(pre);
    tape.mul(emb, open)
}

/// `omega[i][j] = w . tanh([e_src_i ; e_dst_j]) + b`, an `N x N` matrix.
pub fn edge_logits(tape: &mut Tape, store: &ParamStore, src: Var, dst: Var, head: &EdgeHeadParams) -> Result<Var> {
    let ts = tape.tanh(src);
    let td = tape.tanh(dst);
    let ws = tape.param(store, head.w_src);
    let wd = tape.param(store, head.w_dst);
    let b = tape.param(store, head.b);
    // The linear head splits over the concatenation: w.[a;b] = w_src.a + w_dst.b.
    let row_part = tape.matmul(ts, ws)?;
    let row_part = tape.add_row(row_part, b)?;
    let col_part = tape.matmul(td, wd)?;
    tape.outer_add(row_part, col_part)
}

/// Normalized pre-sigmoid logits and the clamped edge probabilities.
pub fn normalize_logits(tape: &mut Tape, omega: Var, alpha: f64) -> (Var, Var) {
    let norm = tape.normalize(omega, alpha);
    let prob = tape.sigmoid(norm);
    let prob = tape.clamp(prob, EDGE_CLAMP, 1.0 - EDGE_CLAMP);
    (norm, prob)
}

/// Logistic (binary Gumbel) relaxation with a fixed uniform draw `delta`.
pub fn gumbel_relax_value(prob: f64, tau: f64, delta: f64) -> f64 {
    let logit = |x: f64| (x / (1.0 - x)).ln();
    let z = (logit(delta) + logit(prob)) / tau;
    1.0 / (1.0 + (-z).exp())
}

/// `sigmoid((logit(delta) + logit(prob)) / tau)` with one uniform draw per entry.
pub fn gumbel_relax(tape: &mut Tape, prob: Var, tau: f64, rng: &mut StreamRng) -> Result<Var> {
    let shape = tape.value(prob).shape().to_vec();
    let noise: Vec<f64> = (0..tape.value(prob).len())
        .map(|_| {
            let d = open_unit(rng);
            (d / (1.0 - d)).ln()
        })
        .collect();
    let noise = Tensor::new(shape, noise)?;
    let l = tape.logit(prob);
    let l = tape.add_const(l, &noise)?;
    let l = tape.scale(l, 1.0 / tau);
    Ok(tape.sigmoid(l))
}

/// Keep mask: entry survives iff `gamma >= rho`, `rho ~ U(0,1)`.
pub fn edge_keep_mask(shape: &[usize], gamma: f64, rng: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let rho: f64 = rng.random();
            if gamma < rho { 0.0 } else { 1.0 }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

pub fn edge_sample(tape: &mut Tape, p: Var, gamma: f64, rng: &mut StreamRng) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("edge sampling rate gamma={gamma} outside [0,1]")));
    }
    let mask = edge_keep_mask(tape.value(p).shape(), gamma, rng);
    tape.mul_const(p, mask)
}

/// Per-node hop-range distribution, `N x L`.
pub fn hop_probs(tape: &mut Tape, store: &ParamStore, emb: Var, sel: &HopSelectorParams) -> Result<Var> {
    let h = linear(tape, store, emb, sel.w1, sel.b1)?;
    let h = tape.tanh(h);
    let logits = linear(tape, store, h, sel.w2, sel.b2)?;
    Ok(tape.softmax_rows(logits))
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn one_hot(choices: &[usize], width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[choices.len(), width]);
    for (i, &c) in choices.iter().enumerate() {
        t.set(i, c, 1.0);
    }
    t
}

/// Hop choice per node (1-based radius) and the weights used to mix masks.
pub struct HopSelection {
    pub hops: Vec<usize>,
    pub weights: Var,
}

/// Train mode draws Gumbel-perturbed choices; eval mode takes the plain argmax.
pub fn select_hops(
    tape: &mut Tape,
    probs: Var,
    tau: f64,
    mode: Mode,
    estimator: HopEstimator,
    rng: &mut StreamRng,
) -> Result<HopSelection> {
    let (n, l) = (tape.value(probs).rows(), tape.value(probs).cols());
    match mode {
        Mode::Eval => {
            let hops: Vec<usize> = (0..n).map(|i| argmax_first(tape.value(probs).row(i))).collect();
            let weights = tape.constant(one_hot(&hops, l));
            Ok(HopSelection { hops: hops.iter().map(|h| h + 1).collect(), weights })
        }
        Mode::Train => {
            let gumbel: Vec<f64> = (0..n * l).map(|_| -(-open_unit(rng).ln()).ln()).collect();
            let logp = tape.log(probs);
            let perturbed = tape.add_const(logp, &Tensor::matrix(n, l, gumbel))?;
            let perturbed = tape.scale(perturbed, 1.0 / tau);
            let soft = tape.softmax_rows(perturbed);
            let hops: Vec<usize> = (0..n).map(|i| argmax_first(tape.value(soft).row(i))).collect();
            let weights = match estimator {
                HopEstimator::StraightThrough => tape.straight_through(one_hot(&hops, l), soft)?,
                HopEstimator::Relaxed => soft,
            };
            Ok(HopSelection { hops: hops.iter().map(|h| h + 1).collect(), weights })
        }
    }
}

/// Masks row `i` of `raw` with row `i` of `S^{h_i}` (mixed by `weights`).
pub fn prune(tape: &mut Tape, raw: Var, weights: Var, group: &StructureInfoGroup) -> Result<Var> {
    let mask = tape.mix_masks(weights, Arc::clone(group.masks()))?;
    tape.mul(raw, mask)
}

/// Tape handles and diagnostics for one window's graph sequence.
pub struct GraphSequence {
    /// `A^s`, oldest first.
    pub adjacency: Vec<Var>,
    /// Selected hop radius per step and node, in `1..=L`.
    pub hops: Vec<Vec<usize>>,
    /// Clamped edge probabilities before relaxation.
    pub edge_probs: Vec<Var>,
    /// Normalized pre-sigmoid logits.
    pub logits: Vec<Var>,
}

/// `inputs[s]` is the `N x F` flow at window position `s` (oldest first).
#[allow(clippy::too_many_arguments)]
pub fn build_graph_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GraphParams,
    cfg: &GraphConfig,
    group: &StructureInfoGroup,
    inputs: &[Var],
    mode: Mode,
    rng: &mut StreamRng,
) -> Result<GraphSequence> {
    if inputs.len() != cfg.input_len {
        return Err(Error::config(format!(
            "graph construction expects {} input steps, got {}",
            cfg.input_len,
            inputs.len()
        )));
    }
    if group.num_nodes() != cfg.nodes {
        return Err(Error::config(format!(
            "structure group has {} nodes, model expects {}",
            group.num_nodes(),
            cfg.nodes
        )));
    }
    let st = run_chain(tape, store, &params.st, inputs)?;
    let ed = run_chain(tape, store, &params.ed, inputs)?;
    let hop = run_chain(tape, store, &params.hop, inputs)?;

    let mut seq = GraphSequence {
        adjacency: Vec::with_capacity(inputs.len()),
        hops: Vec::with_capacity(inputs.len()),
        edge_probs: Vec::with_capacity(inputs.len()),
        logits: Vec::with_capacity(inputs.len()),
    };
    for s in 0..inputs.len() {
        let src = gate(tape, store, st[s], params.base_st[s], &params.gate_st)?;
        let dst = gate(tape, store, ed[s], params.base_ed[s], &params.gate_ed)?;
        let omega = edge_logits(tape, store, src, dst, &params.edge_head)?;
        let (norm, prob) = normalize_logits(tape, omega, cfg.alpha);
        let raw = match mode {
            Mode::Train => {
                let relaxed = gumbel_relax(tape, prob, cfg.tau, rng)?;
                edge_sample(tape, relaxed, cfg.gamma, rng)?
            }
            Mode::Eval if cfg.eval_sampling => edge_sample(tape, prob, cfg.gamma, rng)?,
            Mode::Eval => prob,
        };
        let probs = hop_probs(tape, store, hop[s], &params.selector)?;
        let selection = select_hops(tape, probs, cfg.tau, mode, cfg.hop_estimator, rng)?;
        let adj = prune(tape, raw, selection.weights, group)?;
        seq.adjacency.push(adj);
        seq.hops.push(selection.hops);
        seq.edge_probs.push(prob);
        seq.logits.push(norm);
    }
    Ok(seq)
}
