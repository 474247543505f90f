//! Loss, optimiser, training loop, evaluation metrics and the historical
//! average baseline.
//!
//! Every window gets its own tape and its own random stream keyed by
//! `(seed, epoch, window start)`, and per-window gradients are reduced in
//! window order. Results therefore do not depend on the thread count.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Split};
use crate::dyngraph::Mode;
use crate::error::{Error, Result};
use crate::model::{Forward, Model};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::roadnet::csv_io;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Loss on z-scored values instead of original units.
    pub normalized_loss: bool,
    pub mape_threshold: f64,
    /// Keep only the first `n` training windows; 0 keeps all.
    pub max_train_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            batch_size: 64,
            max_epochs: 200,
            patience: 15,
            seed: 0,
            normalized_loss: false,
            mape_threshold: 1.0,
            max_train_windows: 0,
        }
    }
}

/// Mean absolute error over all entries.
pub fn mae_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<ParamId> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (w, &g)) in p.tensor.data_mut().iter_mut().zip(p.gradient.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w -= self.lr * update;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent. 0 when no target clears the threshold.
    pub mape: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub overall: Metrics,
    /// Index `h - 1` holds horizon `h`.
    pub per_horizon: Vec<Metrics>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accumulator {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    ape_count: usize,
}

impl Accumulator {
    fn push(&mut self, pred: f64, target: f64, threshold: f64) {
        let e = pred - target;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if target.abs() >= threshold {
            self.ape += (e / target).abs();
            self.ape_count += 1;
        }
    }

    fn merge(&mut self, o: &Accumulator) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.ape += o.ape;
        self.count += o.count;
        self.ape_count += o.ape_count;
    }

    fn finish(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.ape_count == 0 { 0.0 } else { 100.0 * self.ape / self.ape_count as f64 },
        }
    }
}

/// Metrics over paired `T x N` prediction and target matrices.
pub fn compute_metrics(preds: &[Tensor], targets: &[Tensor], mape_threshold: f64) -> Result<MetricsReport> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::input(format!(
            "metrics need matching non-empty inputs, got {} predictions and {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let horizon = targets[0].rows();
    let mut acc = vec![Accumulator::default(); horizon];
    for (p, t) in preds.iter().zip(targets) {
        if p.shape() != t.shape() || t.rows() != horizon {
            return Err(Error::input(format!("prediction {:?} vs target {:?}", p.shape(), t.shape())));
        }
        for h in 0..horizon {
            for (&a, &b) in p.row(h).iter().zip(t.row(h)) {
                acc[h].push(a, b, mape_threshold);
            }
        }
    }
    let mut total = Accumulator::default();
    acc.iter().for_each(|a| total.merge(a));
    Ok(MetricsReport { overall: total.finish(), per_horizon: acc.iter().map(Accumulator::finish).collect() })
}

impl MetricsReport {
    /// `horizon,mae,rmse,mape` with one row per horizon and a final `all` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["horizon", "mae", "rmse", "mape"]).map_err(|e| csv_io(path, e))?;
        let rows = self.per_horizon.iter().enumerate().map(|(h, m)| ((h + 1).to_string(), m));
        for (label, m) in rows.chain(std::iter::once(("all".to_string(), &self.overall))) {
            w.write_record([label, m.mae.to_string(), m.rmse.to_string(), m.mape.to_string()])
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Predicts in eval mode for every window of a split, in window order.
/// Returns `T x N` matrices in original units.
pub fn predict_split(model: &Model, data: &Dataset, split: Split) -> Result<Vec<(usize, Tensor)>> {
    let starts = &data.split(split).starts;
    if starts.is_empty() {
        return Err(Error::input(format!("the {} split has no windows", split.name())));
    }
    starts.par_iter().map(|&s| Ok((s, model.predict(&data.input(s))?))).collect()
}

pub fn evaluate(model: &Model, data: &Dataset, split: Split, mape_threshold: f64) -> Result<MetricsReport> {
    let preds = predict_split(model, data, split)?;
    let targets: Vec<Tensor> = preds.iter().map(|(s, _)| data.target_raw(*s)).collect();
    let preds: Vec<Tensor> = preds.into_iter().map(|(_, p)| p).collect();
    compute_metrics(&preds, &targets, mape_threshold)
}

/// Historical average: every horizon predicts the input-window mean per sensor.
pub fn baseline_ha(data: &Dataset, split: Split, mape_threshold: f64) -> Result<MetricsReport> {
    let starts = &data.split(split).starts;
    if starts.is_empty() {
        return Err(Error::input(format!("the {} split has no windows", split.name())));
    }
    let (n, t) = (data.nodes(), data.horizon());
    let mut preds = Vec::with_capacity(starts.len());
    let mut targets = Vec::with_capacity(starts.len());
    for &s in starts {
        let x = data.input_raw(s);
        let means: Vec<f64> = (0..n).map(|j| (0..x.rows()).map(|r| x.get(r, j)).sum::<f64>() / x.rows() as f64).collect();
        preds.push(Tensor::matrix(t, n, (0..t).flat_map(|_| means.iter().copied()).collect()));
        targets.push(data.target_raw(s));
    }
    compute_metrics(&preds, &targets, mape_threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["epoch", "train_loss", "val_mae", "val_rmse", "val_mape"]).map_err(|e| csv_io(path, e))?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val.mae.to_string(),
                r.val.rmse.to_string(),
                r.val.mape.to_string(),
            ])
            .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Per-window check run on every training forward pass.
pub type WindowCheck<'a> = &'a (dyn Fn(&Tape, &Forward) -> Result<()> + Sync);

/// Optional observers of a training run.
#[derive(Default)]
pub struct Hooks<'a> {
    pub on_window: Option<WindowCheck<'a>>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord, &Model) -> Control>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: History,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Loss and parameter gradients for one training window.
pub fn window_gradients(
    model: &Model,
    data: &Dataset,
    start: usize,
    epoch: usize,
    cfg: &TrainConfig,
    check: Option<WindowCheck<'_>>,
) -> Result<(f64, BTreeMap<ParamId, Tensor>)> {
    let mut tape = Tape::new();
    let mut r = rng::stream(cfg.seed, &[0x7a1, epoch as u64, start as u64]);
    let fwd = model.forward(&mut tape, &model.store, &data.input(start), Mode::Train, &mut r)?;
    if let Some(check) = check {
        check(&tape, &fwd)?;
    }
    let (pred, target) = if cfg.normalized_loss {
        (fwd.pred, data.target_scaled(start).transpose())
    } else {
        (model.denormalize(&mut tape, fwd.pred)?, data.target_raw(start).transpose())
    };
    let target = tape.constant(target);
    let loss = mae_loss(&mut tape, pred, target)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.params(&tape)))
}

/// Trains in place. On return `model` holds the best-on-validation parameters.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, mut hooks: Hooks<'_>) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::config("batch_size and max_epochs must be positive"));
    }
    if !(cfg.learning_rate >= 0.0) {
        return Err(Error::config(format!("learning_rate {} must be non-negative", cfg.learning_rate)));
    }
    let mut starts = data.train.starts.clone();
    if cfg.max_train_windows > 0 {
        starts.truncate(cfg.max_train_windows);
    }
    if starts.is_empty() {
        return Err(Error::input("the train split has no windows"));
    }
    if data.val.starts.is_empty() {
        return Err(Error::input("the val split has no windows"));
    }
    let mut adam = Adam::new(&model.store, cfg.learning_rate);
    let mut history = History::default();
    let mut best = (f64::INFINITY, 0usize, model.store.clone());
    for epoch in 1..=cfg.max_epochs {
        let mut order = starts.clone();
        order.shuffle(&mut rng::stream(cfg.seed, &[0x5b0f, epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let shared: &Model = model;
            let results = batch
                .par_iter()
                .map(|&s| window_gradients(shared, data, s, epoch, cfg, hooks.on_window))
                .collect::<Result<Vec<_>>>()?;
            model.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for (loss, grads) in results {
                batch_loss += loss;
                for (id, mut g) in grads {
                    g.scale_assign(scale);
                    model.store.get_mut(id).gradient.add_assign(&g);
                }
            }
            let bad_grad = model.store.first_non_finite_gradient().map(str::to_string);
            if !batch_loss.is_finite() || bad_grad.is_some() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {b}; first non-finite gradient: {}",
                    bad_grad.as_deref().unwrap_or("none")
                )));
            }
            loss_sum += batch_loss;
            adam.step(&mut model.store);
        }
        let val = evaluate(model, data, Split::Val, cfg.mape_threshold)?.overall;
        let record = EpochRecord { epoch, train_loss: loss_sum / order.len() as f64, val };
        log::info!(
            "epoch {epoch}: train loss {:.5}, val mae {:.5} rmse {:.5} mape {:.3}%",
            record.train_loss,
            val.mae,
            val.rmse,
            val.mape
        );
        if val.mae < best.0 {
            best = (val.mae, epoch, model.store.clone());
        }
        history.records.push(record);
        let record = history.records.last().expect("just pushed");
        let control = match hooks.on_epoch.as_mut() {
            Some(f) => f(record, model),
            None => Control::Continue,
        };
        if control == Control::Stop || epoch - best.1 >= cfg.patience.max(1) {
            break;
        }
    }
    let (best_val_mae, best_epoch, store) = best;
    model.store = store;
    Ok(TrainOutcome { history, best_epoch, best_val_mae })
}
