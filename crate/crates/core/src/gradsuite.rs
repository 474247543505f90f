//! Finite-difference checks of every layer and of a toy end-to-end model.
//!
//! Each case reduces a layer output to a scalar with fixed random weights and
//! compares tape gradients against central differences for all parameters;
//! layer inputs are registered as parameters too, so input gradients are
//! covered. Hop selection uses the relaxed estimator, since the hard
//! straight-through choice is piecewise constant in its forward value.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::Scaler;
use crate::dyngraph::{self, ChainParams, EdgeHeadParams, GateParams, HopEstimator, HopSelectorParams, Init, Mode};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, StreamRng};
use crate::roadnet::{hop_distances, RoadNetwork, StructureInfoGroup};
use crate::stnet::{self, OutputParams, TplParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn random(rng: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

fn input(init: &mut Init<'_>, name: &str, shape: &[usize], scale: f64) -> Result<ParamId> {
    let t = random(init.rng, shape, scale);
    init.store.add(name, t)
}

/// `sum(W * out)` with `W` fixed by `seed`.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = random(&mut rng::stream(seed, &[0xfeed]), tape.value(out).shape(), 1.0);
    let y = tape.mul_const(out, w)?;
    Ok(tape.sum(y))
}

fn run<F>(name: &'static str, mut store: ParamStore, cfg: GradCheckConfig, f: F) -> Result<CaseReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    Ok(CaseReport { name, report: finite_diff_check(&mut store, f, cfg)? })
}

/// Runs every case. Fails only on construction errors; check the reports.
pub fn run_suite(seed: u64) -> Result<Vec<CaseReport>> {
    let cfg = GradCheckConfig::default();
    let mut reports = Vec::new();
    let (n, d, f) = (4, 3, 1);

    {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[1]);
        let mut init = Init { store: &mut store, rng: &mut r };
        let x = input(&mut init, "x", &[n, f], 1.0)?;
        let w = init.weight("w", f, 5)?;
        let b = input(&mut init, "b", &[1, 5], 0.5)?;
        reports.push(run("input layer", store, cfg, move |t, s| {
            let x = t.param(s, x);
            let y = dyngraph::linear(t, s, x, w, b)?;
            project(t, y, seed)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[2]);
        let mut init = Init { store: &mut store, rng: &mut r };
        let p = ChainParams::new(&mut init, "gru", n, d, f, 2)?;
        let x = input(&mut init, "x", &[n, f], 1.0)?;
        for id in [p.z_b, p.r_b, p.g_b, p.proj_b] {
            let t = random(init.rng, init.store.value(id).shape(), 0.3);
            *init.store.value_mut(id) = t;
        }
        reports.push(run("GRU cell", store, cfg, move |t, s| {
            let e = t.param(s, p.init);
            let x = t.param(s, x);
            let y = dyngraph::gru_step(t, s, &p, e, x)?;
            project(t, y, seed)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[3]);
        let mut init = Init { store: &mut store, rng: &mut r };
        let e = input(&mut init, "e", &[n, d], 1.0)?;
        let base = input(&mut init, "base", &[n, d], 1.0)?;
        let g = GateParams { w: init.weight("gate.w", d, d)?, b: input(&mut init, "gate.b", &[1, d], 0.3)? };
        reports.push(run("gating", store, cfg, move |t, s| {
            let e = t.param(s, e);
            let y = dyngraph::gate(t, s, e, base, &g)?;
            project(t, y, seed)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[4]);
        let mut init = Init { store: &mut store, rng: &mut r };
        let src = input(&mut init, "src", &[n, d], 1.0)?;
        let dst = input(&mut init, "dst", &[n, d], 1.0)?;
        let head = EdgeHeadParams {
            w_src: init.weight("w_src", d, 1)?,
            w_dst: init.weight("w_dst", d, 1)?,
            b: input(&mut init, "b", &[1, 1], 0.5)?,
        };
        reports.push(run("edge logits", store, cfg, move |t, s| {
            let a = t.param(s, src);
            let b = t.param(s, dst);
            let y = dyngraph::edge_logits(t, s, a, b, &head)?;
            project(t, y, seed)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[5]);
        let mut init = Init { store: &mut store, rng: &mut r };
        let omega = input(&mut init, "omega", &[n, n], 2.0)?;
        reports.push(run("normalization + sigmoid", store, cfg, move |t, s| {
            let o = t.param(s, omega);
            let (_, p) = dyngraph::normalize_logits(t, o, 1.0);
            project(t, p, seed)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[6]);
        let mut init = Init { store: &mut store, rng: &mut r };
        let logits = input(&mut init, "logits", &[n, n], 1.5)?;
        reports.push(run("Gumbel relaxation + edge sampling", store, cfg, move |t, s| {
            let l = t.param(s, logits);
            let p = t.sigmoid(l);
            let mut noise = rng::stream(seed, &[6, 1]);
            let relaxed = dyngraph::gumbel_relax(t, p, 0.7, &mut noise)?;
            let kept = dyngraph::edge_sample(t, relaxed, 0.5, &mut noise)?;
            project(t, kept, seed)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[7]);
        let mut init = Init { store: &mut store, rng: &mut r };
        let l = 3;
        let emb = input(&mut init, "hop_emb", &[n, d], 1.0)?;
        let raw = input(&mut init, "raw", &[n, n], 1.0)?;
        let sel = HopSelectorParams {
            w1: init.weight("w1", d, d)?,
            b1: input(&mut init, "b1", &[1, d], 0.3)?,
            w2: init.weight("w2", d, l)?,
            b2: input(&mut init, "b2", &[1, l], 0.3)?,
        };
        let net = RoadNetwork::build_asp(&[(0, 1), (1, 2), (2, 3)], n)?;
        let group = StructureInfoGroup::build(&hop_distances(&net, false), l)?;
        reports.push(run("hop selector + pruning", store, cfg, move |t, s| {
            let e = t.param(s, emb);
            let probs = dyngraph::hop_probs(t, s, e, &sel)?;
            let mut noise = rng::stream(seed, &[7, 1]);
            let choice = dyngraph::select_hops(t, probs, 1.0, Mode::Train, HopEstimator::Relaxed, &mut noise)?;
            let raw = t.param(s, raw);
            let y = dyngraph::prune(t, raw, choice.weights, &group)?;
            project(t, y, seed)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[8]);
        let mut init = Init { store: &mut store, rng: &mut r };
        let x = input(&mut init, "x", &[n, d], 1.0)?;
        let adj = init.store.add("adj", random(init.rng, &[n, n], 1.0).map(|v| v.abs() + 0.05))?;
        let theta = input(&mut init, "theta", &[d, d, 2, 2], 0.5)?;
        reports.push(run("diffusion convolution", store, cfg, move |t, s| {
            let x = t.param(s, x);
            let a = t.param(s, adj);
            let th = t.param(s, theta);
            let filters = stnet::diffusion_filters(t, th)?;
            let y = stnet::diffusion_conv(t, x, a, &filters)?;
            project(t, y, seed)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[9]);
        let mut init = Init { store: &mut store, rng: &mut r };
        let xs = (0..4).map(|k| input(&mut init, &format!("x{k}"), &[n, d], 1.0)).collect::<Result<Vec<_>>>()?;
        let lambda = input(&mut init, "lambda", &[2, d, 2 * d], 0.7)?;
        let xs_gtu = xs.clone();
        reports.push(run("GTU convolution", store.clone(), cfg, move |t, s| {
            let stream: Vec<Var> = xs_gtu.iter().map(|&x| t.param(s, x)).collect();
            let l = t.param(s, lambda);
            let taps = stnet::temporal_taps(t, l)?;
            let ys = stnet::gtu_conv(t, &stream, &taps, None)?;
            let y = t.concat_cols(&ys)?;
            project(t, y, seed)
        })?);

        let mut init = Init { store: &mut store, rng: &mut r };
        let p = TplParams {
            lambda,
            bias: input(&mut init, "bias", &[1, 2 * d], 0.3)?,
            ln_gamma: init.store.add("ln_gamma", random(init.rng, &[1, d], 0.5).map(|v| v + 1.0))?,
            ln_beta: input(&mut init, "ln_beta", &[1, d], 0.3)?,
        };
        reports.push(run("TPL with layer norm", store, cfg, move |t, s| {
            let stream: Vec<Var> = xs.iter().map(|&x| t.param(s, x)).collect();
            let ys = stnet::tpl(t, s, &p, &stream)?;
            let y = t.concat_cols(&ys)?;
            project(t, y, seed)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[10]);
        let mut init = Init { store: &mut store, rng: &mut r };
        let xs = (0..3).map(|k| input(&mut init, &format!("x{k}"), &[n, d], 1.0)).collect::<Result<Vec<_>>>()?;
        let p = OutputParams { w: input(&mut init, "w", &[3, d, d], 0.7)?, b: input(&mut init, "b", &[1, d], 0.3)?, width: 3 };
        reports.push(run("output layer", store, cfg, move |t, s| {
            let stream: Vec<Var> = xs.iter().map(|&x| t.param(s, x)).collect();
            let y = stnet::output_layer(t, s, &p, &stream)?;
            project(t, y, seed)
        })?);
    }
    {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[11]);
        let mut init = Init { store: &mut store, rng: &mut r };
        let taps = (0..2).map(|k| input(&mut init, &format!("o{k}"), &[n, d], 1.0)).collect::<Result<Vec<_>>>()?;
        let w = init.weight("head.w", 2 * d, 2)?;
        let b = input(&mut init, "head.b", &[1, 2], 0.3)?;
        reports.push(run("prediction head", store, cfg, move |t, s| {
            let os: Vec<Var> = taps.iter().map(|&o| t.param(s, o)).collect();
            let cat = t.concat_cols(&os)?;
            let y = dyngraph::linear(t, s, cat, w, b)?;
            project(t, y, seed)
        })?);
    }
    reports.push(end_to_end(seed)?);
    Ok(reports)
}

/// The toy model: N=4, T'=6, T=2, d=m=4, D=8, one block.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        nodes: 4,
        input_len: 6,
        horizon: 2,
        embed_dim: 4,
        hop_embed_dim: 4,
        proj_dim: 2,
        hidden: 8,
        n_blocks: 1,
        hop_group: 2,
        gamma: 0.5,
        dropout: 0.1,
        hop_estimator: HopEstimator::Relaxed,
        ..ModelConfig::default()
    }
}

fn end_to_end(seed: u64) -> Result<CaseReport> {
    let net = RoadNetwork::build_asp(&[(0, 1), (1, 2), (2, 3)], 4)?;
    let scaler = Scaler { mean: vec![50.0; 4], std: vec![10.0; 4] };
    let model = Model::new(toy_model_config(), net, scaler, seed)?;
    let mut r = rng::stream(seed, &[12]);
    let window = random(&mut r, &[6, 4], 1.5);
    let target = random(&mut r, &[4, 2], 1.0);
    let store = model.store.clone();
    run("end-to-end toy model", store, GradCheckConfig::default(), move |t, s| {
        let mut noise = rng::stream(seed, &[12, 1]);
        let fwd = model.forward(t, s, &window, Mode::Train, &mut noise)?;
        // Squared error keeps the scalar smooth; scaled space keeps it O(1).
        let tgt = t.constant(target.clone());
        let diff = t.sub(fwd.pred, tgt)?;
        let sq = t.mul(diff, diff)?;
        Ok(t.mean(sq))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let reports = run_suite(3).unwrap();
        assert_eq!(reports.len(), 13);
        for c in &reports {
            assert!(c.passed(), "{}: {:?}", c.name, c.report.failures().collect::<Vec<_>>());
        }
    }
}
