//! Browser bindings for three interactive views:
//!
//! - k-hop structure masks of a small road network,
//! - the binary Gumbel relaxation of one edge probability,
//! - a tiny model trained epoch by epoch, exposing its learned adjacency.
//!
//! The plain-Rust functions are what the native tests exercise; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use std::collections::BTreeMap;

use wasm_bindgen::prelude::*;

use tglrn::data::synth::{generate, SynthConfig, Topology};
use tglrn::data::{Dataset, Split, SplitRatios};
use tglrn::dyngraph::gumbel_relax_value;
use tglrn::model::{GraphSnapshot, Model, ModelConfig};
use tglrn::rng::{self, open_unit};
use tglrn::roadnet::{hop_distances, structure_info, RoadNetwork};
use tglrn::trainer::{self, Adam, TrainConfig};
use tglrn::{Error, ParamId, Result, Tensor};

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn network(topology: &str, nodes: usize) -> Result<RoadNetwork> {
    let topo: Topology = topology.parse()?;
    if nodes < 2 {
        return Err(Error::input("need at least two sensors"));
    }
    RoadNetwork::build_asp(&topo.edges(nodes), nodes)
}

/// Row-major `N x N` mask `S^k` of the chosen topology.
pub fn structure_mask(topology: &str, nodes: usize, k: usize, symmetrize: bool) -> Result<Vec<f64>> {
    let net = network(topology, nodes)?;
    Ok(structure_info(&hop_distances(&net, symmetrize), k)?.into_data())
}

/// Histogram (fractions per bin over `[0, 1]`) of relaxed samples of one
/// edge, followed by the fraction of samples above one half.
pub fn gumbel_histogram(prob: f64, tau: f64, samples: usize, bins: usize, seed: u64) -> Result<Vec<f64>> {
    if !(0.0 < prob && prob < 1.0) || !(tau > 0.0) || samples == 0 || bins == 0 {
        return Err(Error::input("need 0 < prob < 1, tau > 0 and positive sample and bin counts"));
    }
    let mut r = rng::stream(seed, &[0x9u64]);
    let mut hist = vec![0.0; bins + 1];
    for _ in 0..samples {
        let p = gumbel_relax_value(prob, tau, open_unit(&mut r));
        hist[((p * bins as f64) as usize).min(bins - 1)] += 1.0;
        if p > 0.5 {
            hist[bins] += 1.0;
        }
    }
    hist.iter_mut().for_each(|h| *h /= samples as f64);
    Ok(hist)
}

#[wasm_bindgen(js_name = structureMask)]
pub fn structure_mask_js(topology: &str, nodes: usize, k: usize, symmetrize: bool) -> std::result::Result<Vec<f64>, JsError> {
    structure_mask(topology, nodes, k, symmetrize).map_err(js)
}

#[wasm_bindgen(js_name = gumbelHistogram)]
pub fn gumbel_histogram_js(prob: f64, tau: f64, samples: usize, bins: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    gumbel_histogram(prob, tau, samples, bins, seed.into()).map_err(js)
}

/// A small model on synthetic data, trained one epoch per call.
#[wasm_bindgen]
pub struct LearnedGraph {
    model: Model,
    data: Dataset,
    adam: Adam,
    train: TrainConfig,
    epoch: usize,
    window: usize,
    snapshots: Vec<GraphSnapshot>,
}

impl LearnedGraph {
    pub fn build(topology: &str, nodes: usize, seed: u64) -> Result<Self> {
        let topo: Topology = topology.parse()?;
        let synth = generate(&SynthConfig {
            nodes,
            steps: 240,
            topology: topo,
            regime_period: 24,
            period: 48.0,
            noise_std: 0.5,
            seed,
            ..SynthConfig::default()
        })?;
        let data = Dataset::prepare(synth.flows, 6, 3, SplitRatios::default(), true)?;
        let cfg = ModelConfig {
            nodes,
            input_len: 6,
            horizon: 3,
            embed_dim: 4,
            hop_embed_dim: 4,
            proj_dim: 2,
            hidden: 8,
            n_blocks: 1,
            hop_group: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, synth.network, data.scaler.clone(), seed)?;
        let adam = Adam::new(&model.store, 0.005);
        let train = TrainConfig { seed, batch_size: 16, ..TrainConfig::default() };
        let mut g = LearnedGraph { model, data, adam, train, epoch: 0, window: 0, snapshots: Vec::new() };
        g.refresh()?;
        Ok(g)
    }

    fn refresh(&mut self) -> Result<()> {
        let start = self.data.test.starts[self.window];
        self.snapshots = self.model.inspect_graphs(&self.data.input(start))?;
        Ok(())
    }

    /// One pass over the training windows; returns the mean training MAE.
    pub fn step_epoch(&mut self) -> Result<f64> {
        self.epoch += 1;
        let starts = self.data.train.starts.clone();
        let mut total = 0.0;
        for batch in starts.chunks(self.train.batch_size) {
            let mut sum: BTreeMap<ParamId, Tensor> = BTreeMap::new();
            for &s in batch {
                let (loss, grads) = trainer::window_gradients(&self.model, &self.data, s, self.epoch, &self.train, None)?;
                total += loss;
                for (id, g) in grads {
                    match sum.get_mut(&id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            sum.insert(id, g);
                        }
                    }
                }
            }
            self.model.store.zero_grad();
            for (id, mut g) in sum {
                g.scale_assign(1.0 / batch.len() as f64);
                self.model.store.get_mut(id).gradient = g;
            }
            if let Some(name) = self.model.store.first_non_finite_gradient() {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
            self.adam.step(&mut self.model.store);
        }
        self.refresh()?;
        Ok(total / starts.len() as f64)
    }

    pub fn test_mae(&self) -> Result<f64> {
        Ok(trainer::evaluate(&self.model, &self.data, Split::Test, 1.0)?.overall.mae)
    }
}

#[wasm_bindgen]
impl LearnedGraph {
    #[wasm_bindgen(constructor)]
    pub fn new(topology: &str, nodes: usize, seed: u32) -> std::result::Result<LearnedGraph, JsError> {
        Self::build(topology, nodes, seed.into()).map_err(js)
    }

    #[wasm_bindgen(js_name = trainEpoch)]
    pub fn train_epoch(&mut self) -> std::result::Result<f64, JsError> {
        self.step_epoch().map_err(js)
    }

    #[wasm_bindgen(js_name = testMae)]
    pub fn test_mae_js(&self) -> std::result::Result<f64, JsError> {
        self.test_mae().map_err(js)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn nodes(&self) -> usize {
        self.model.config.nodes
    }

    /// Number of input steps, i.e. of adjacency matrices per window.
    pub fn steps(&self) -> usize {
        self.snapshots.len()
    }

    /// Picks the test window whose graphs are shown (clamped to range).
    #[wasm_bindgen(js_name = setWindow)]
    pub fn set_window(&mut self, window: usize) -> std::result::Result<usize, JsError> {
        self.window = window.min(self.data.test.starts.len() - 1);
        self.refresh().map_err(js)?;
        Ok(self.window)
    }

    /// Eval-mode adjacency `A^t` at input step `step`, row-major.
    pub fn adjacency(&self, step: usize) -> Vec<f64> {
        self.snapshots.get(step).map(|s| s.adjacency.data().to_vec()).unwrap_or_default()
    }

    /// Selected hop radius per sensor at input step `step`.
    pub fn hops(&self, step: usize) -> Vec<u32> {
        self.snapshots.get(step).map(|s| s.hops.iter().map(|&h| h as u32).collect()).unwrap_or_default()
    }
}
