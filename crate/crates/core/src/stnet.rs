//! Spatio-temporal processing: input layer, diffusion convolution (SPL),
//! gated temporal convolution (TPL), per-block output layer.
//!
//! A stream is a list of `N x D` matrices, one per time slice, oldest first.
//! Each block runs `SPL -> TPL -> SPL -> TPL`. Temporal convolutions are
//! unpadded, so every TPL shortens the stream by `Ks - 1`; slice `j` of a
//! shortened stream is aligned with the original step `offset + j`, the
//! latest step its receptive field covers, and uses that step's graph.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::dyngraph::{Init, Mode};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub const SPL_PER_BLOCK: usize = 2;
pub const TPL_PER_BLOCK: usize = 2;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub features: usize,
    pub diffusion_steps: usize,
    pub kernel_size: usize,
    pub input_len: usize,
    pub dropout: f64,
}

impl BlockConfig {
    /// Stream length entering each block plus the length after the last one.
    pub fn schedule(&self) -> Result<Vec<usize>> {
        if self.kernel_size == 0 || self.n_blocks == 0 || self.diffusion_steps == 0 {
            return Err(Error::config("n_blocks, kernel_size and diffusion_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let mut lens = vec![self.input_len];
        let mut t = self.input_len;
        for b in 0..self.n_blocks {
            for layer in 0..TPL_PER_BLOCK {
                if t < self.kernel_size {
                    return Err(Error::config(format!(
                        "time schedule underflows: block {b} TPL {layer} receives {t} steps but Ks = {} \
                         (input_len {}, n_blocks {})",
                        self.kernel_size, self.input_len, self.n_blocks
                    )));
                }
                t -= self.kernel_size - 1;
            }
            lens.push(t);
        }
        Ok(lens)
    }
}

#[derive(Debug, Clone)]
pub struct SplParams {
    /// `D' x D x K x 2`.
    pub theta: ParamId,
}

#[derive(Debug, Clone)]
pub struct TplParams {
    /// `Ks x D x 2D`.
    pub lambda: ParamId,
    pub bias: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct OutputParams {
    /// `T_in x D x D`.
    pub w: ParamId,
    pub b: ParamId,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub spl: Vec<SplParams>,
    pub tpl: Vec<TplParams>,
    pub output: OutputParams,
}

#[derive(Debug, Clone)]
pub struct StParams {
    pub input_w: ParamId,
    pub input_b: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl StParams {
    pub fn new(init: &mut Init<'_>, cfg: &BlockConfig) -> Result<Self> {
        let schedule = cfg.schedule()?;
        let (d, k, ks) = (cfg.hidden, cfg.diffusion_steps, cfg.kernel_size);
        if cfg.features >= d {
            return Err(Error::config(format!(
                "input layer must widen features: F = {} but D = {d}",
                cfg.features
            )));
        }
        let input_w = init.weight("input.w", cfg.features, d)?;
        let input_b = init.zeros("input.b", 1, d)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let spl = (0..SPL_PER_BLOCK)
                .map(|i| {
                    Ok(SplParams {
                        theta: init.weight_shaped(&format!("block{b}.spl{i}.theta"), &[d, d, k, 2], d * k * 2, d)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let tpl = (0..TPL_PER_BLOCK)
                .map(|i| {
                    Ok(TplParams {
                        lambda: init.weight_shaped(&format!("block{b}.tpl{i}.lambda"), &[ks, d, 2 * d], ks * d, 2 * d)?,
                        bias: init.zeros(&format!("block{b}.tpl{i}.bias"), 1, 2 * d)?,
                        ln_gamma: init.ones(&format!("block{b}.tpl{i}.ln_gamma"), 1, d)?,
                        ln_beta: init.zeros(&format!("block{b}.tpl{i}.ln_beta"), 1, d)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let width = schedule[b + 1];
            let output = OutputParams {
                w: init.weight_shaped(&format!("block{b}.out.w"), &[width, d, d], width * d, d)?,
                b: init.zeros(&format!("block{b}.out.b"), 1, d)?,
                width,
            };
            blocks.push(BlockParams { spl, tpl, output });
        }
        Ok(StParams { input_w, input_b, blocks })
    }
}

/// Affine map `N x F -> N x D`, no activation.
pub fn input_layer(tape: &mut Tape, store: &ParamStore, p: &StParams, x: Var) -> Result<Var> {
    crate::dyngraph::linear(tape, store, x, p.input_w, p.input_b)
}

/// Matrices `Theta[:, :, k, dir]^T` (shape `D x D'`) for each step and direction.
pub fn diffusion_filters(tape: &mut Tape, theta: Var) -> Result<Vec<[Var; 2]>> {
    let shape = tape.value(theta).shape().to_vec();
    let [d_out, d_in, k_steps, two] = shape[..] else {
        return Err(Error::config(format!("diffusion filter must be rank 4, got {shape:?}")));
    };
    if two != 2 {
        return Err(Error::config(format!("diffusion filter last dim must be 2, got {two}")));
    }
    let mut out = Vec::with_capacity(k_steps);
    for k in 0..k_steps {
        let mut pair = [theta; 2];
        for (dir, slot) in pair.iter_mut().enumerate() {
            let mut idx = Vec::with_capacity(d_in * d_out);
            for p in 0..d_in {
                for q in 0..d_out {
                    idx.push(((q * d_in + p) * k_steps + k) * 2 + dir);
                }
            }
            *slot = tape.gather(theta, Arc::new(idx), &[d_in, d_out])?;
        }
        out.push(pair);
    }
    Ok(out)
}

/// `H = sum_k (D_O^-1 A)^k X Theta_k1 + (D_I^-1 A^T)^k X Theta_k2`.
/// Rows with zero out-degree (or in-degree) diffuse nothing.
pub fn diffusion_conv(tape: &mut Tape, x: Var, adj: Var, filters: &[[Var; 2]]) -> Result<Var> {
    let (n, a_rows, a_cols) = (tape.value(x).rows(), tape.value(adj).rows(), tape.value(adj).cols());
    if a_rows != n || a_cols != n {
        return Err(Error::config(format!(
            "diffusion_conv: adjacency {a_rows}x{a_cols} for {n} nodes"
        )));
    }
    let forward = tape.row_normalize(adj);
    let adj_t = tape.transpose(adj);
    let backward = tape.row_normalize(adj_t);
    let mut acc: Option<Var> = None;
    for (dir, transition) in [forward, backward].into_iter().enumerate() {
        let mut z = x;
        for (k, pair) in filters.iter().enumerate() {
            if k > 0 {
                z = tape.matmul(transition, z)?;
            }
            let term = tape.matmul(z, pair[dir])?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
    }
    acc.ok_or_else(|| Error::config("diffusion_conv needs at least one diffusion step"))
}

/// `ReLU(H + X)`.
pub fn spl(tape: &mut Tape, x: Var, adj: Var, filters: &[[Var; 2]]) -> Result<Var> {
    let h = diffusion_conv(tape, x, adj, filters)?;
    if tape.value(h).shape() != tape.value(x).shape() {
        return Err(Error::config(format!(
            "SPL residual needs D == D', got input {:?} and output {:?}",
            tape.value(x).shape(),
            tape.value(h).shape()
        )));
    }
    let sum = tape.add(h, x)?;
    Ok(tape.relu(sum))
}

/// Kernel taps `Lambda[s]` as `D x 2D` matrices.
pub fn temporal_taps(tape: &mut Tape, lambda: Var) -> Result<Vec<Var>> {
    let shape = tape.value(lambda).shape().to_vec();
    let [ks, d, d2] = shape[..] else {
        return Err(Error::config(format!("temporal kernel must be rank 3, got {shape:?}")));
    };
    (0..ks)
        .map(|s| {
            let idx: Vec<usize> = (s * d * d2..(s + 1) * d * d2).collect();
            tape.gather(lambda, Arc::new(idx), &[d, d2])
        })
        .collect()
}

/// Valid temporal convolution producing `[U, V]`, then `tanh(U) * sigmoid(V)`.
pub fn gtu_conv(tape: &mut Tape, stream: &[Var], taps: &[Var], bias: Option<Var>) -> Result<Vec<Var>> {
    let ks = taps.len();
    if stream.len() < ks || ks == 0 {
        return Err(Error::config(format!(
            "temporal convolution with Ks = {ks} on {} time steps",
            stream.len()
        )));
    }
    let d2 = tape.value(taps[0]).cols();
    if !d2.is_multiple_of(2) {
        return Err(Error::config(format!("GTU needs an even channel count, got {d2}")));
    }
    let d = d2 / 2;
    let mut out = Vec::with_capacity(stream.len() - ks + 1);
    for t in 0..=stream.len() - ks {
        let mut acc = tape.matmul(stream[t], taps[0])?;
        for s in 1..ks {
            let term = tape.matmul(stream[t + s], taps[s])?;
            acc = tape.add(acc, term)?;
        }
        if let Some(b) = bias {
            acc = tape.add_row(acc, b)?;
        }
        let u = tape.slice_cols(acc, 0, d)?;
        let v = tape.slice_cols(acc, d, d)?;
        let u = tape.tanh(u);
        let v = tape.sigmoid(v);
        out.push(tape.mul(u, v)?);
    }
    Ok(out)
}

/// `LayerNorm(GTU(X) + X[last slices])` with per-channel scale and shift.
pub fn tpl(tape: &mut Tape, store: &ParamStore, p: &TplParams, stream: &[Var]) -> Result<Vec<Var>> {
    let lambda = tape.param(store, p.lambda);
    let taps = temporal_taps(tape, lambda)?;
    let bias = tape.param(store, p.bias);
    let gated = gtu_conv(tape, stream, &taps, Some(bias))?;
    let shift = taps.len() - 1;
    let gamma = tape.param(store, p.ln_gamma);
    let beta = tape.param(store, p.ln_beta);
    gated
        .into_iter()
        .enumerate()
        .map(|(t, g)| {
            let res = tape.add(g, stream[t + shift])?;
            let normed = tape.layer_norm_rows(res, LAYER_NORM_EPS);
            let scaled = tape.mul_row(normed, gamma)?;
            tape.add_row(scaled, beta)
        })
        .collect()
}

/// Temporal convolution whose kernel spans the whole stream: `N x D` out.
pub fn output_layer(tape: &mut Tape, store: &ParamStore, p: &OutputParams, stream: &[Var]) -> Result<Var> {
    if stream.len() != p.width {
        return Err(Error::config(format!(
            "output layer kernel spans {} steps, stream has {}",
            p.width,
            stream.len()
        )));
    }
    let w = tape.param(store, p.w);
    let taps = (0..p.width)
        .map(|s| {
            let shape = tape.value(w).shape().to_vec();
            let (d_in, d_out) = (shape[1], shape[2]);
            let idx: Vec<usize> = (s * d_in * d_out..(s + 1) * d_in * d_out).collect();
            tape.gather(w, Arc::new(idx), &[d_in, d_out])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = tape.matmul(stream[0], taps[0])?;
    for s in 1..p.width {
        let term = tape.matmul(stream[s], taps[s])?;
        acc = tape.add(acc, term)?;
    }
    let b = tape.param(store, p.b);
    tape.add_row(acc, b)
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut StreamRng) -> Result<Var> {
    let keep = 1.0 - rate;
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    tape.mul_const(x, Tensor::new(shape, mask)?)
}

/// Output of one spatio-temporal block.
pub struct BlockOutput {
    pub stream: Vec<Var>,
    /// Original time index of the first slice of `stream`.
    pub offset: usize,
    /// `O_i`, `N x D`.
    pub tap: Var,
}

/// `SPL -> TPL -> SPL -> TPL`, then the output layer on the reduced stream.
/// `graphs[s]` is the adjacency of original step `s`.
#[allow(clippy::too_many_arguments)]
pub fn st_block(
    tape: &mut Tape,
    store: &ParamStore,
    p: &BlockParams,
    stream: Vec<Var>,
    offset: usize,
    graphs: &[Var],
    dropout_rate: f64,
    mode: Mode,
    rng: &mut StreamRng,
) -> Result<BlockOutput> {
    let mut stream = stream;
    let mut offset = offset;
    for (spl_p, tpl_p) in p.spl.iter().zip(&p.tpl) {
        let theta = tape.param(store, spl_p.theta);
        let filters = diffusion_filters(tape, theta)?;
        let mut spatial = Vec::with_capacity(stream.len());
        for (j, &x) in stream.iter().enumerate() {
            let adj = *graphs.get(offset + j).ok_or_else(|| {
                Error::config(format!("no graph for original step {} ({} graphs)", offset + j, graphs.len()))
            })?;
            spatial.push(spl(tape, x, adj, &filters)?);
        }
        let ks = store.value(tpl_p.lambda).shape()[0];
        stream = tpl(tape, store, tpl_p, &spatial)?;
        offset += ks - 1;
        if mode == Mode::Train && dropout_rate > 0.0 {
            stream = stream.into_iter().map(|x| dropout(tape, x, dropout_rate, rng)).collect::<Result<_>>()?;
        }
    }
    let tap = output_layer(tape, store, &p.output, &stream)?;
    Ok(BlockOutput { stream, offset, tap })
}
