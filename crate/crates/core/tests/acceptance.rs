//! Acceptance suite. Runs with a custom harness so every criterion prints a
//! single `PASS` / `FAIL` line regardless of output capturing:
//!
//! ```text
//! cargo test -p tglrn --test acceptance
//! ```
//!
//! Tolerances are pinned in the constants below. Setting
//! `TGLRN_ACCEPTANCE=2,7` runs only the listed criteria.

#![allow(clippy::needless_range_loop)] // the oracles are deliberately written as plain index loops

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;

use tglrn::data::synth::{generate, SynthConfig};
use tglrn::data::{Dataset, FlowSeries, Split, SplitRatios};
use tglrn::dyngraph::{edge_keep_mask, edge_sample, gumbel_relax, select_hops, HopEstimator, Mode};
use tglrn::model::{Forward, Model, ModelConfig};
use tglrn::rng;
use tglrn::roadnet::{hop_distances, structure_info, RoadNetwork};
use tglrn::stnet::{diffusion_conv, diffusion_filters, gtu_conv};
use tglrn::trainer::{self, baseline_ha, evaluate, Control, EpochRecord, Hooks, TrainConfig};
use tglrn::{checkpoint, config::RunConfig, gradsuite, Tape, Tensor};

const GRAD_SUITE_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_INSTANCES: usize = 50;
const SIGMAS: f64 = 3.0;
const KEEP_SAMPLES: usize = 100_000;
const GUMBEL_SAMPLES: usize = 100_000;
const HOP_SAMPLES: usize = 50_000;
const INVARIANT_TOL: f64 = 1e-9;
const OVERFIT_FRACTION: f64 = 0.15;
const OVERFIT_EPOCHS: usize = 100;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const HA_TOL: f64 = 1e-9;
const SEEDS: u64 = 5;
const SEEDS_REQUIRED: usize = 4;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    // `cargo test -- --list` and friends must not start a long run.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [Criterion; 9] = [
        ("1 gradient suite", gradient_suite),
        ("2 oracle equivalence", oracle_equivalence),
        ("3 stochastic contracts", stochastic_contracts),
        ("4 structural invariants", structural_invariants),
        ("5 synthetic overfit", synthetic_overfit),
        ("6 planted dependency recovery", planted_recovery),
        ("7 baseline sanity", baseline_sanity),
        ("8 determinism and persistence", determinism_and_persistence),
        ("train-loss descent", early_descent),
    ];
    let only: Option<Vec<String>> =
        std::env::var("TGLRN_ACCEPTANCE").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut failed = 0;
    for (name, run) in criteria {
        let number = name.split(' ').next().unwrap_or_default();
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == number)) {
            continue;
        }
        let t0 = Instant::now();
        let out = run();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {name}: {verdict} ({}; {:.1}s)", out.detail, t0.elapsed().as_secs_f64());
        failed += usize::from(!out.pass);
    }
    println!("criterion 9 full-scale PeMS08 run: SKIP (optional, needs the real dataset and hours of training)");
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let reports = gradsuite::run_suite(17).expect("gradient suite runs");
    let elapsed = t0.elapsed();
    let worst = reports.iter().map(|r| r.report.max_rel_error()).fold(0.0, f64::max);
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    Outcome::new(
        failing.is_empty() && elapsed < GRAD_SUITE_BUDGET,
        format!("{} cases, worst rel err {worst:.2e}, failing {failing:?}, took {:.2}s", reports.len(), elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 2

fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows)
}

fn naive_row_normalize(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(|v| if s == 0.0 { 0.0 } else { v / s }).collect()
        })
        .collect()
}

fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            for k in 0..m {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn diffusion_case(r: &mut impl Rng) -> f64 {
    let n = r.random_range(2..=6);
    let k_steps = r.random_range(1..=3);
    let d_in = r.random_range(1..=4);
    let d_out = r.random_range(1..=4);
    // Non-negative weights with some structural zeros, including empty rows.
    let adj: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| if r.random_bool(0.4) { 0.0 } else { r.random_range(0.0..1.0) }).collect())
        .collect();
    let x = random_matrix(r, n, d_in);
    let theta: Vec<f64> = (0..d_out * d_in * k_steps * 2).map(|_| r.random_range(-1.0..1.0)).collect();
    let at = |o: usize, c: usize, k: usize, dir: usize| theta[((o * d_in + c) * k_steps + k) * 2 + dir];

    let mut tape = Tape::new();
    let xv = tape.constant(to_tensor(&x));
    let av = tape.constant(to_tensor(&adj));
    let tv = tape.constant(Tensor::new(vec![d_out, d_in, k_steps, 2], theta.clone()).unwrap());
    let filters = diffusion_filters(&mut tape, tv).unwrap();
    let h = diffusion_conv(&mut tape, xv, av, &filters).unwrap();
    let got = tape.value(h).clone();

    let transposed: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| adj[j][i]).collect()).collect();
    let transitions = [naive_row_normalize(&adj), naive_row_normalize(&transposed)];
    let mut expected = vec![vec![0.0; d_out]; n];
    for (dir, p) in transitions.iter().enumerate() {
        let mut z = x.clone();
        for k in 0..k_steps {
            if k > 0 {
                z = naive_matmul(p, &z);
            }
            for i in 0..n {
                for o in 0..d_out {
                    for c in 0..d_in {
                        expected[i][o] += z[i][c] * at(o, c, k, dir);
                    }
                }
            }
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for o in 0..d_out {
            worst = worst.max((got.get(i, o) - expected[i][o]).abs());
        }
    }
    worst
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gtu_case(r: &mut impl Rng) -> f64 {
    let n = r.random_range(1..=5);
    let d = r.random_range(1..=4);
    let ks = r.random_range(1..=3);
    let len = ks + r.random_range(0..=4);
    let stream: Vec<Vec<Vec<f64>>> = (0..len).map(|_| random_matrix(r, n, d)).collect();
    let taps: Vec<Vec<Vec<f64>>> = (0..ks).map(|_| random_matrix(r, d, 2 * d)).collect();
    let bias: Vec<f64> = (0..2 * d).map(|_| r.random_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let sv: Vec<_> = stream.iter().map(|m| tape.constant(to_tensor(m))).collect();
    let tv: Vec<_> = taps.iter().map(|m| tape.constant(to_tensor(m))).collect();
    let bv = tape.constant(Tensor::matrix(1, 2 * d, bias.clone()));
    let out = gtu_conv(&mut tape, &sv, &tv, Some(bv)).unwrap();
    if out.len() != len - ks + 1 {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (t, v) in out.iter().enumerate() {
        let got = tape.value(*v);
        for i in 0..n {
            for o in 0..d {
                let (mut a, mut b) = (bias[o], bias[o + d]);
                for (s, tap) in taps.iter().enumerate() {
                    for c in 0..d {
                        a += stream[t + s][i][c] * tap[c][o];
                        b += stream[t + s][i][c] * tap[c][o + d];
                    }
                }
                worst = worst.max((got.get(i, o) - a.tanh() * sigmoid(b)).abs());
            }
        }
    }
    worst
}

/// Returns the number of mismatching mask entries.
fn structure_case(r: &mut impl Rng) -> usize {
    let n = r.random_range(1..=15);
    let density = r.random_range(0.05..0.4);
    let edges: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|_| r.random_bool(density)).collect();
    let net = RoadNetwork::build_asp(&edges, n).unwrap();
    let mut mismatches = 0;
    for symmetrize in [false, true] {
        let inf = usize::MAX / 4;
        let mut fw = vec![vec![inf; n]; n];
        for (i, row) in fw.iter_mut().enumerate() {
            row[i] = 0;
        }
        for &(i, j) in &edges {
            if i != j {
                fw[i][j] = 1;
                if symmetrize {
                    fw[j][i] = 1;
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    fw[i][j] = fw[i][j].min(fw[i][k] + fw[k][j]);
                }
            }
        }
        let dist = hop_distances(&net, symmetrize);
        for k in 1..=n.max(1) {
            let mask = structure_info(&dist, k).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let want = if fw[i][j] <= k { 1.0 } else { 0.0 };
                    mismatches += usize::from(mask.get(i, j) != want);
                }
            }
        }
    }
    mismatches
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng::stream(2024, &[2]);
    let diff = (0..ORACLE_INSTANCES).map(|_| diffusion_case(&mut r)).fold(0.0, f64::max);
    let gtu = (0..ORACLE_INSTANCES).map(|_| gtu_case(&mut r)).fold(0.0, f64::max);
    let mismatches: usize = (0..ORACLE_INSTANCES).map(|_| structure_case(&mut r)).sum();
    Outcome::new(
        diff <= ORACLE_TOL && gtu <= ORACLE_TOL && mismatches == 0,
        format!("diffusion max err {diff:.1e}, gtu max err {gtu:.1e}, structure mask mismatches {mismatches}"),
    )
}

// ---------------------------------------------------------------- 3

fn within_sigmas(observed: f64, p: f64, n: usize) -> bool {
    (observed - p).abs() <= SIGMAS * (p * (1.0 - p) / n as f64).sqrt()
}

fn stochastic_contracts() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    for (i, gamma) in [0.05, 0.1, 0.2, 0.3].into_iter().enumerate() {
        let mut r = rng::stream(3, &[1, i as u64]);
        let mask = edge_keep_mask(&[KEEP_SAMPLES], gamma, &mut r);
        let rate = mask.sum() / KEEP_SAMPLES as f64;
        // The tape operation must apply exactly such a mask.
        let mut r2 = rng::stream(3, &[1, i as u64]);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[KEEP_SAMPLES], 0.75));
        let sampled = edge_sample(&mut tape, p, gamma, &mut r2).unwrap();
        let consistent = tape.value(sampled).data().iter().zip(mask.data()).all(|(s, m)| *s == 0.75 * m);
        pass &= within_sigmas(rate, gamma, KEEP_SAMPLES) && consistent;
        notes.push(format!("keep {gamma}->{rate:.4}"));
    }

    for (i, (prob, tau)) in [(0.1, 1.0), (0.3, 0.5), (0.5, 1.0), (0.8, 2.0)].into_iter().enumerate() {
        let mut r = rng::stream(3, &[2, i as u64]);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[GUMBEL_SAMPLES], prob));
        let relaxed = gumbel_relax(&mut tape, p, tau, &mut r).unwrap();
        let frac = tape.value(relaxed).data().iter().filter(|&&v| v > 0.5).count() as f64 / GUMBEL_SAMPLES as f64;
        pass &= within_sigmas(frac, prob, GUMBEL_SAMPLES);
        notes.push(format!("P(p>1/2|{prob})={frac:.4}"));
    }

    let dist = [0.1, 0.25, 0.05, 0.4, 0.2];
    for (i, estimator) in [HopEstimator::StraightThrough, HopEstimator::Relaxed].into_iter().enumerate() {
        let mut r = rng::stream(3, &[3, i as u64]);
        let mut tape = Tape::new();
        let rows: Vec<f64> = (0..HOP_SAMPLES).flat_map(|_| dist).collect();
        let probs = tape.constant(Tensor::matrix(HOP_SAMPLES, dist.len(), rows));
        let sel = select_hops(&mut tape, probs, 0.7, Mode::Train, estimator, &mut r).unwrap();
        let mut counts = [0usize; 5];
        for &h in &sel.hops {
            counts[h - 1] += 1;
        }
        for (c, p) in counts.iter().zip(dist) {
            pass &= within_sigmas(*c as f64 / HOP_SAMPLES as f64, p, HOP_SAMPLES);
        }
        if estimator == HopEstimator::StraightThrough {
            // The forward weights are exactly one-hot at the chosen radius.
            let w = tape.value(sel.weights);
            pass &= sel.hops.iter().enumerate().all(|(n, &h)| (0..5).all(|k| w.get(n, k) == f64::from(u8::from(k + 1 == h))));
            notes.push(format!("hop freq {:?}", counts.map(|c| c as f64 / HOP_SAMPLES as f64)));
        }
    }
    Outcome::new(pass, notes.join(", "))
}

// ---------------------------------------------------------------- 4

fn structural_invariants() -> Outcome {
    let synth = generate(&SynthConfig { nodes: 8, steps: 400, seed: 4, ..SynthConfig::default() }).unwrap();
    let data = Dataset::prepare(synth.flows, 12, 12, SplitRatios::default(), true).unwrap();
    let cfg = ModelConfig { hidden: 16, ..ModelConfig::default() };
    let mut model = Model::new(cfg, synth.network, data.scaler.clone(), 4).unwrap();
    let masks = model.group.clone();
    let alpha = model.config.alpha;

    let windows = AtomicUsize::new(0);
    let outside = AtomicUsize::new(0);
    let out_of_range = AtomicUsize::new(0);
    let worst = Mutex::new((0.0f64, 0.0f64));
    let check = |tape: &Tape, fwd: &Forward| -> tglrn::Result<()> {
        let g = &fwd.graphs;
        let mut local_outside = 0;
        let mut local_range = 0;
        for (s, &adj) in g.adjacency.iter().enumerate() {
            let a = tape.value(adj);
            for (i, &h) in g.hops[s].iter().enumerate() {
                let mask = masks.mask(h);
                for j in 0..a.cols() {
                    let v = a.get(i, j);
                    local_range += usize::from(!(0.0..=1.0).contains(&v));
                    local_outside += usize::from(v != 0.0 && mask.get(i, j) == 0.0);
                }
            }
            let l = tape.value(g.logits[s]);
            let mean = l.mean();
            let std = (l.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l.len() as f64).sqrt();
            let mut w = worst.lock().unwrap();
            w.0 = w.0.max(mean.abs());
            w.1 = w.1.max((std - alpha).abs());
        }
        windows.fetch_add(1, Ordering::Relaxed);
        outside.fetch_add(local_outside, Ordering::Relaxed);
        out_of_range.fetch_add(local_range, Ordering::Relaxed);
        Ok(())
    };
    let tc = TrainConfig { seed: 4, max_epochs: 5, patience: 100, batch_size: 16, max_train_windows: 120, ..TrainConfig::default() };
    trainer::train(&mut model, &data, &tc, Hooks { on_window: Some(&check), on_epoch: None }).unwrap();

    let (mean_dev, std_dev) = *worst.lock().unwrap();
    let (outside, out_of_range) = (outside.into_inner(), out_of_range.into_inner());
    Outcome::new(
        outside == 0 && out_of_range == 0 && mean_dev < INVARIANT_TOL && std_dev < INVARIANT_TOL,
        format!(
            "{} windows, entries outside masks {outside}, outside [0,1] {out_of_range}, max |mean| {mean_dev:.1e}, max |std-alpha| {std_dev:.1e}",
            windows.into_inner()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn population_std(values: &[f64]) -> f64 {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

fn synthetic_overfit() -> Outcome {
    let t0 = Instant::now();
    let mut hits = 0;
    let mut notes = Vec::new();
    for seed in 0..SEEDS {
        let synth = generate(&SynthConfig { nodes: 8, steps: 380, noise_std: 0.05, seed, ..SynthConfig::default() }).unwrap();
        let mut data = Dataset::prepare(synth.flows, 12, 12, SplitRatios::default(), true).unwrap();
        data.train.starts.truncate(200);
        assert_eq!(data.train.len(), 200, "overfit set needs 200 windows");
        let targets: Vec<f64> = data.train.starts.iter().flat_map(|&s| data.target_raw(s).into_data()).collect();
        let threshold = OVERFIT_FRACTION * population_std(&targets);

        // Stochastic edge dropping and dropout are regularisers; memorisation
        // is measured without them.
        let cfg = ModelConfig { hidden: 16, dropout: 0.0, gamma: 1.0, ..ModelConfig::default() };
        let mut model = Model::new(cfg, synth.network, data.scaler.clone(), seed).unwrap();
        let tc = TrainConfig { seed, max_epochs: OVERFIT_EPOCHS, patience: OVERFIT_EPOCHS, batch_size: 8, ..TrainConfig::default() };
        let mut best = f64::INFINITY;
        let mut reached = None;
        let mut on_epoch = |r: &EpochRecord, m: &Model| {
            if !r.epoch.is_multiple_of(5) {
                return Control::Continue;
            }
            let mae = evaluate(m, &data, Split::Train, 1.0).unwrap().overall.mae;
            best = best.min(mae);
            if mae < threshold {
                reached = Some(r.epoch);
                return Control::Stop;
            }
            Control::Continue
        };
        trainer::train(&mut model, &data, &tc, Hooks { on_window: None, on_epoch: Some(&mut on_epoch) }).unwrap();
        hits += usize::from(reached.is_some());
        notes.push(match reached {
            Some(e) => format!("seed {seed}: {best:.2}<{threshold:.2} at epoch {e}"),
            None => format!("seed {seed}: best {best:.2} vs {threshold:.2}"),
        });
    }
    let elapsed = t0.elapsed();
    Outcome::new(
        hits >= SEEDS_REQUIRED && elapsed < OVERFIT_BUDGET,
        format!("{hits}/{SEEDS} seeds; {}", notes.join("; ")),
    )
}

// ---------------------------------------------------------------- 6

fn planted_recovery() -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 0..SEEDS {
        let synth = generate(&SynthConfig { nodes: 8, steps: 600, noise_std: 0.5, seed, ..SynthConfig::default() }).unwrap();
        let active: HashSet<(usize, usize, usize)> = synth.planted.iter().map(|p| (p.t, p.from, p.to)).collect();
        let ever: HashSet<(usize, usize)> = synth.planted.iter().map(|p| (p.from, p.to)).collect();
        let data = Dataset::prepare(synth.flows, 12, 12, SplitRatios::default(), true).unwrap();
        // With random edge dropping during training the signal on a single
        // pair is too faint to separate from chance at this scale.
        let cfg = ModelConfig { hidden: 16, gamma: 1.0, ..ModelConfig::default() };
        let n = cfg.nodes;
        let mut model = Model::new(cfg, synth.network.clone(), data.scaler.clone(), seed).unwrap();
        let tc = TrainConfig { seed, max_epochs: 30, patience: 30, batch_size: 16, max_train_windows: 200, ..TrainConfig::default() };
        trainer::train(&mut model, &data, &tc, Hooks::default()).unwrap();

        let net = &synth.network;
        let (mut planted, mut n_planted, mut other, mut n_other) = (0.0, 0usize, 0.0, 0usize);
        for &start in &data.test.starts {
            for (s, snap) in model.inspect_graphs(&data.input(start)).unwrap().iter().enumerate() {
                for i in 0..n {
                    for j in (0..n).filter(|&j| j != i) {
                        let w = snap.edge_probs.get(i, j);
                        if active.contains(&(start + s, i, j)) {
                            planted += w;
                            n_planted += 1;
                        } else if !ever.contains(&(i, j)) && !net.has_edge(i, j) && !net.has_edge(j, i) {
                            other += w;
                            n_other += 1;
                        }
                    }
                }
            }
        }
        let (planted, other) = (planted / n_planted as f64, other / n_other as f64);
        wins += usize::from(planted > other);
        notes.push(format!("seed {seed}: planted {planted:.4} vs non-neighbour {other:.4}"));
    }
    Outcome::new(wins >= SEEDS_REQUIRED, format!("{wins}/{SEEDS} seeds; {}", notes.join("; ")))
}

// ---------------------------------------------------------------- 7

fn baseline_sanity() -> Outcome {
    let (n, input_len, horizon) = (3, 12, 6);
    let flat = FlowSeries::new(200, n, (0..200 * n).map(|i| 10.0 + (i % n) as f64).collect()).unwrap();
    let data = Dataset::prepare(flat, input_len, horizon, SplitRatios::default(), true).unwrap();
    let flat_mae: Vec<f64> =
        [Split::Train, Split::Val, Split::Test].iter().map(|&s| baseline_ha(&data, s, 1.0).unwrap().overall.mae).collect();

    // Sensor j rises by (j + 1) per step: the window mean trails the target
    // at horizon h by slope * ((T' - 1) / 2 + h).
    let ramp = FlowSeries::new(200, n, (0..200 * n).map(|i| ((i % n) + 1) as f64 * (i / n) as f64).collect()).unwrap();
    let data = Dataset::prepare(ramp, input_len, horizon, SplitRatios::default(), true).unwrap();
    let report = baseline_ha(&data, Split::Test, 1.0).unwrap();
    let mean_slope = (1..=n).sum::<usize>() as f64 / n as f64;
    let worst = report
        .per_horizon
        .iter()
        .enumerate()
        .map(|(h, m)| (m.mae - mean_slope * ((input_len as f64 - 1.0) / 2.0 + (h + 1) as f64)).abs())
        .fold(0.0, f64::max);
    Outcome::new(
        flat_mae.iter().all(|&m| m == 0.0) && worst <= HA_TOL,
        format!("constant-series MAE {flat_mae:?}, ramp closed-form max err {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 8

fn small_run() -> (Model, Dataset, RunConfig) {
    let mut run = RunConfig::default();
    for kv in ["hidden=8", "n_blocks=2", "seed=8", "max_epochs=3", "batch_size=16", "max_train_windows=64"] {
        run.apply_override(kv).unwrap();
    }
    let synth = generate(&SynthConfig { nodes: 6, steps: 300, seed: 8, ..SynthConfig::default() }).unwrap();
    let data = Dataset::prepare(synth.flows, run.input_len, run.horizon, run.ratios(), run.per_sensor_scaler).unwrap();
    let model = Model::new(run.model_config(6), synth.network, data.scaler.clone(), run.seed).unwrap();
    (model, data, run)
}

fn history_bytes(threads: usize, dir: &std::path::Path) -> Vec<u8> {
    let (mut model, data, run) = small_run();
    let tc = run.train_config();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let outcome = pool.install(|| trainer::train(&mut model, &data, &tc, Hooks::default())).unwrap();
    let path = dir.join(format!("history_{threads}.csv"));
    outcome.history.write_csv(&path).unwrap();
    std::fs::read(path).unwrap()
}

fn bits(m: &trainer::MetricsReport) -> Vec<u64> {
    std::iter::once(&m.overall).chain(&m.per_horizon).flat_map(|x| [x.mae, x.rmse, x.mape]).map(f64::to_bits).collect()
}

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let first = history_bytes(1, dir.path());
    let again = history_bytes(1, dir.path());
    let threaded = history_bytes(3, dir.path());
    let histories_match = first == again && first == threaded;

    let (mut model, data, run) = small_run();
    trainer::train(&mut model, &data, &run.train_config(), Hooks::default()).unwrap();
    let before = evaluate(&model, &data, Split::Test, 1.0).unwrap();
    let path = dir.path().join("checkpoint.bin");
    checkpoint::save(&path, &model, &run).unwrap();
    let (_, restored) = checkpoint::load(&path, Some(data.nodes())).unwrap();
    let after = evaluate(&restored, &data, Split::Test, 1.0).unwrap();
    let metrics_match = bits(&before) == bits(&after);
    Outcome::new(
        histories_match && metrics_match,
        format!("history identical across reruns and thread counts: {histories_match}; checkpoint test metrics bitwise equal: {metrics_match}"),
    )
}

// ---------------------------------------------------------------- extra

/// Mean training MAE falls at every one of the first five epochs in at
/// least nine of ten seeds (default model, chain of 8, 200 windows).
fn early_descent() -> Outcome {
    let mut monotone = 0;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let synth = generate(&SynthConfig { nodes: 8, steps: 380, seed, ..SynthConfig::default() }).unwrap();
        let mut data = Dataset::prepare(synth.flows, 12, 12, SplitRatios::default(), true).unwrap();
        data.train.starts.truncate(200);
        let cfg = ModelConfig { hidden: 16, ..ModelConfig::default() };
        let mut model = Model::new(cfg, synth.network, data.scaler.clone(), seed).unwrap();
        let tc = TrainConfig { seed, max_epochs: 5, patience: 5, batch_size: 16, ..TrainConfig::default() };
        let outcome = trainer::train(&mut model, &data, &tc, Hooks::default()).unwrap();
        let losses: Vec<f64> = outcome.history.records.iter().map(|r| r.train_loss).collect();
        let ok = losses.windows(2).all(|w| w[1] < w[0]);
        monotone += usize::from(ok);
        if !ok {
            notes.push(format!("seed {seed}: {:?}", losses.iter().map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>()));
        }
    }
    let mut detail = format!("{monotone}/10 seeds monotone");
    for n in notes {
        detail += &format!("; {n}");
    }
    Outcome::new(monotone >= 9, detail)
}
