//! End-to-end model: graph construction, input layer, stacked blocks and
//! the prediction head over the concatenated block outputs.

use crate::autodiff::{Tape, Var};
use crate::data::Scaler;
use crate::dyngraph::{build_graph_sequence, GraphConfig, GraphParams, GraphSequence, HopEstimator, Init, Mode};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, StreamRng};
use crate::roadnet::{hop_distances, RoadNetwork, StructureInfoGroup};
use crate::stnet::{input_layer, st_block, BlockConfig, StParams};
use crate::tensor::Tensor;

/// Architecture hyperparameters. Defaults follow the desk-scale setup.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub features: usize,
    pub embed_dim: usize,
    pub hop_embed_dim: usize,
    pub proj_dim: usize,
    pub hidden: usize,
    pub diffusion_steps: usize,
    pub kernel_size: usize,
    pub n_blocks: usize,
    pub hop_group: usize,
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub dropout: f64,
    pub eval_sampling: bool,
    pub symmetrize_hops: bool,
    pub hop_estimator: HopEstimator,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            nodes: 8,
            input_len: 12,
            horizon: 12,
            features: 1,
            embed_dim: 8,
            hop_embed_dim: 8,
            proj_dim: 4,
            hidden: 64,
            diffusion_steps: 2,
            kernel_size: 2,
            n_blocks: 3,
            hop_group: 5,
            alpha: 1.0,
            tau: 1.0,
            gamma: 0.3,
            dropout: 0.1,
            eval_sampling: false,
            symmetrize_hops: false,
            hop_estimator: HopEstimator::StraightThrough,
        }
    }
}

impl ModelConfig {
    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            nodes: self.nodes,
            input_len: self.input_len,
            features: self.features,
            embed_dim: self.embed_dim,
            hop_embed_dim: self.hop_embed_dim,
            proj_dim: self.proj_dim,
            alpha: self.alpha,
            tau: self.tau,
            gamma: self.gamma,
            eval_sampling: self.eval_sampling,
            hop_estimator: self.hop_estimator,
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            n_blocks: self.n_blocks,
            hidden: self.hidden,
            features: self.features,
            diffusion_steps: self.diffusion_steps,
            kernel_size: self.kernel_size,
            input_len: self.input_len,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("features", self.features),
            ("embed_dim", self.embed_dim),
            ("hop_embed_dim", self.hop_embed_dim),
            ("proj_dim", self.proj_dim),
            ("hidden", self.hidden),
            ("hop_group", self.hop_group),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.features != 1 {
            return Err(Error::config(format!("only single-feature flows are supported, features = {}", self.features)));
        }
        if !(self.alpha > 0.0) || !(self.tau > 0.0) {
            return Err(Error::config("alpha and tau must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        self.block_config().schedule().map(|_| ())
    }
}

/// Learnable parameters and fixed structure of one model instance.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub graph: GraphParams,
    pub st: StParams,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub network: RoadNetwork,
    pub group: StructureInfoGroup,
    pub scaler: Scaler,
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    /// Scaled predictions, `N x T`.
    pub pred: Var,
    pub graphs: GraphSequence,
}

impl Model {
    /// Builds a freshly initialised model. Parameter draws come from `seed`.
    pub fn new(config: ModelConfig, network: RoadNetwork, scaler: Scaler, seed: u64) -> Result<Self> {
        config.validate()?;
        if network.num_nodes() != config.nodes {
            return Err(Error::config(format!(
                "road network has {} nodes, model configured for {}",
                network.num_nodes(),
                config.nodes
            )));
        }
        if !scaler.is_global() && scaler.mean.len() != config.nodes {
            return Err(Error::config(format!(
                "scaler covers {} sensors, model configured for {}",
                scaler.mean.len(),
                config.nodes
            )));
        }
        let dist = hop_distances(&network, config.symmetrize_hops);
        let group = StructureInfoGroup::build(&dist, config.hop_group)?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, &[0x1417]);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let graph = GraphParams::new(&mut init, &config.graph_config(), config.hop_group)?;
        let st = StParams::new(&mut init, &config.block_config())?;
        let head_w = init.weight("head.w", config.n_blocks * config.hidden, config.horizon)?;
        let head_b = init.zeros("head.b", 1, config.horizon)?;
        Ok(Model { config, store, graph, st, head_w, head_b, network, group, scaler })
    }

    /// `window` is the scaled input, `T' x N`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, window: &Tensor, mode: Mode, rng: &mut StreamRng) -> Result<Forward> {
        let cfg = &self.config;
        if window.shape() != [cfg.input_len, cfg.nodes] {
            return Err(Error::config(format!(
                "model expects a {}x{} window, got {:?}",
                cfg.input_len,
                cfg.nodes,
                window.shape()
            )));
        }
        let inputs: Vec<Var> = (0..cfg.input_len)
            .map(|s| tape.constant(Tensor::matrix(cfg.nodes, 1, window.row(s).to_vec())))
            .collect();
        let graphs = build_graph_sequence(tape, store, &self.graph, &cfg.graph_config(), &self.group, &inputs, mode, rng)?;
        let mut stream = inputs
            .iter()
            .map(|&x| input_layer(tape, store, &self.st, x))
            .collect::<Result<Vec<_>>>()?;
        let mut offset = 0;
        let mut taps = Vec::with_capacity(cfg.n_blocks);
        for block in &self.st.blocks {
            let out = st_block(tape, store, block, stream, offset, &graphs.adjacency, cfg.dropout, mode, rng)?;
            stream = out.stream;
            offset = out.offset;
            taps.push(out.tap);
        }
        let features = tape.concat_cols(&taps)?;
        let pred = crate::dyngraph::linear(tape, store, features, self.head_w, self.head_b)?;
        Ok(Forward { pred, graphs })
    }

    /// Maps scaled `N x T` predictions to original units on the tape.
    pub fn denormalize(&self, tape: &mut Tape, pred: Var) -> Result<Var> {
        let (n, t) = (tape.value(pred).rows(), tape.value(pred).cols());
        let std = Tensor::matrix(n, t, (0..n * t).map(|k| self.scaler.std_of(k / t)).collect());
        let mean = Tensor::matrix(n, t, (0..n * t).map(|k| self.scaler.mean_of(k / t)).collect());
        let scaled = tape.mul_const(pred, std)?;
        tape.add_const(scaled, &mean)
    }

    /// Deterministic prediction in original units, `T x N`.
    pub fn predict(&self, window: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = rng::stream(0, &[]);
        let fwd = self.forward(&mut tape, &self.store, window, Mode::Eval, &mut rng)?;
        let raw = self.denormalize(&mut tape, fwd.pred)?;
        Ok(tape.value(raw).transpose())
    }

    /// Eval-mode graphs for one window: adjacency values, hop choices and
    /// clamped edge probabilities per input step.
    pub fn inspect_graphs(&self, window: &Tensor) -> Result<Vec<GraphSnapshot>> {
        let mut tape = Tape::new();
        let mut rng = rng::stream(0, &[]);
        let fwd = self.forward(&mut tape, &self.store, window, Mode::Eval, &mut rng)?;
        let g = &fwd.graphs;
        Ok((0..g.adjacency.len())
            .map(|s| GraphSnapshot {
                adjacency: tape.value(g.adjacency[s]).clone(),
                edge_probs: tape.value(g.edge_probs[s]).clone(),
                hops: g.hops[s].clone(),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSnapshot {
    pub adjacency: Tensor,
    pub edge_probs: Tensor,
    pub hops: Vec<usize>,
}
