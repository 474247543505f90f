//! Flow ingestion, z-score scaling, sliding windows and chronological splits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::roadnet::csv_io;
use crate::tensor::Tensor;

pub mod synth;

/// Minutes between consecutive rows of a flow file.
pub const INTERVAL_MINUTES: u32 = 5;

/// Traffic flow for every sensor, `T_total x N` with one feature per sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSeries {
    steps: usize,
    nodes: usize,
    values: Vec<f64>,
}

impl FlowSeries {
    pub fn new(steps: usize, nodes: usize, values: Vec<f64>) -> Result<Self> {
        if steps == 0 || nodes == 0 || values.len() != steps * nodes {
            return Err(Error::input(format!(
                "flow series {steps}x{nodes} cannot hold {} values",
                values.len()
            )));
        }
        Ok(FlowSeries { steps, nodes, values })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// `[T_total, N, F]` with `F = 1`.
    pub fn shape(&self) -> [usize; 3] {
        [self.steps, self.nodes, 1]
    }

    pub fn get(&self, t: usize, sensor: usize) -> f64 {
        self.values[t * self.nodes + sensor]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.nodes..(t + 1) * self.nodes]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Rows `start..start + len` as a `len x N` matrix.
    pub fn slice(&self, start: usize, len: usize) -> Tensor {
        let n = self.nodes;
        Tensor::matrix(len, n, self.values[start * n..(start + len) * n].to_vec())
    }

    /// Reads a `t,s0,...,s{N-1}` CSV. The leading index column is optional.
    /// Empty, `nan` and zero cells are treated as missing and linearly
    /// interpolated per sensor.
    pub fn load(path: &Path, nodes: Option<usize>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_io(path, e))?;
        let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
        let has_index = headers.get(0).is_some_and(|h| h.eq_ignore_ascii_case("t"));
        let width = headers.len() - usize::from(has_index);
        if let Some(n) = nodes {
            if n != width {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: format!("expected {n} sensor columns, header has {width}"),
                });
            }
        }
        if width == 0 {
            return Err(Error::Parse { path: path.to_path_buf(), line: 1, msg: "no sensor columns".into() });
        }
        let mut values: Vec<Option<f64>> = Vec::new();
        let mut steps = 0;
        for (k, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| csv_io(path, e))?;
            let line = k + 2;
            if rec.len() != headers.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("row has {} cells, header has {}", rec.len(), headers.len()),
                });
            }
            for cell in rec.iter().skip(usize::from(has_index)) {
                values.push(parse_cell(cell).map_err(|msg| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg,
                })?);
            }
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Parse { path: path.to_path_buf(), line: 2, msg: "no data rows".into() });
        }
        let filled = interpolate_missing(&values, steps, width)?;
        FlowSeries::new(steps, width, filled)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["t".to_string()];
        header.extend((0..self.nodes).map(|s| format!("s{s}")));
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for t in 0..self.steps {
            let mut rec = vec![t.to_string()];
            rec.extend(self.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn parse_cell(cell: &str) -> std::result::Result<Option<f64>, String> {
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| format!("non-numeric cell {cell:?}"))?;
    if !v.is_finite() || v == 0.0 {
        Ok(None)
    } else {
        Ok(Some(v))
    }
}

/// Per-sensor linear interpolation; leading/trailing gaps take the nearest
/// observed value. A sensor with no observations at all is filled with zeros.
fn interpolate_missing(values: &[Option<f64>], steps: usize, nodes: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; steps * nodes];
    for s in 0..nodes {
        let observed: Vec<(usize, f64)> =
            (0..steps).filter_map(|t| values[t * nodes + s].map(|v| (t, v))).collect();
        if observed.is_empty() {
            log::warn!("sensor {s} has no valid observations; filling with zeros");
            continue;
        }
        let mut next = 0;
        for t in 0..steps {
            while next < observed.len() && observed[next].0 < t {
                next += 1;
            }
            let v = match (next.checked_sub(1).map(|p| observed[p]), observed.get(next)) {
                (_, Some(&(tn, vn))) if tn == t => vn,
                (Some((tp, vp)), Some(&(tn, vn))) => vp + (vn - vp) * (t - tp) as f64 / (tn - tp) as f64,
                (Some((_, vp)), None) => vp,
                (None, Some(&(_, vn))) => vn,
                (None, None) => unreachable!("observed is non-empty"),
            };
            out[t * nodes + s] = v;
        }
    }
    Ok(out)
}

/// Smallest standard deviation a scaler will divide by.
pub const MIN_STD: f64 = 1e-8;

/// Z-score statistics, per sensor or a single global pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fits on rows `0..train_steps` only. Population standard deviation.
    pub fn fit(series: &FlowSeries, train_steps: usize, per_sensor: bool) -> Result<Self> {
        if train_steps == 0 || train_steps > series.steps() {
            return Err(Error::input(format!(
                "scaler fit range 0..{train_steps} outside series of {} steps",
                series.steps()
            )));
        }
        let n = series.nodes();
        let groups: Vec<Vec<usize>> =
            if per_sensor { (0..n).map(|s| vec![s]).collect() } else { vec![(0..n).collect()] };
        let mut mean = Vec::with_capacity(groups.len());
        let mut std = Vec::with_capacity(groups.len());
        for cols in &groups {
            let count = (train_steps * cols.len()) as f64;
            let values = || (0..train_steps).flat_map(|t| cols.iter().map(move |&s| series.get(t, s)));
            let m = values().sum::<f64>() / count;
            let var = values().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            let mut sd = var.sqrt();
            if sd < MIN_STD {
                log::warn!("zero-variance sensor group {cols:?}; std floored at {MIN_STD}");
                sd = MIN_STD;
            }
            mean.push(m);
            std.push(sd);
        }
        Ok(Scaler { mean, std })
    }

    pub fn is_global(&self) -> bool {
        self.mean.len() == 1
    }

    pub fn mean_of(&self, sensor: usize) -> f64 {
        if self.is_global() { self.mean[0] } else { self.mean[sensor] }
    }

    pub fn std_of(&self, sensor: usize) -> f64 {
        if self.is_global() { self.std[0] } else { self.std[sensor] }
    }

    pub fn apply_value(&self, sensor: usize, x: f64) -> f64 {
        (x - self.mean_of(sensor)) / self.std_of(sensor)
    }

    pub fn invert_value(&self, sensor: usize, z: f64) -> f64 {
        z * self.std_of(sensor) + self.mean_of(sensor)
    }

    pub fn apply(&self, series: &FlowSeries) -> FlowSeries {
        self.map_series(series, |s, v| self.apply_value(s, v))
    }

    pub fn invert(&self, series: &FlowSeries) -> FlowSeries {
        self.map_series(series, |s, v| self.invert_value(s, v))
    }

    fn map_series(&self, series: &FlowSeries, f: impl Fn(usize, f64) -> f64) -> FlowSeries {
        let n = series.nodes();
        let values = series.values().iter().enumerate().map(|(k, &v)| f(k % n, v)).collect();
        FlowSeries { steps: series.steps(), nodes: n, values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Windows of one split, identified by their first input row.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub split: Split,
    pub starts: Vec<usize>,
    pub input_len: usize,
    pub horizon: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!(
                "split ratios {:?} must be in [0,1] and sum to 1",
                parts
            )));
        }
        Ok(())
    }

    /// Exclusive end rows of the train and val portions.
    pub fn boundaries(&self, steps: usize) -> (usize, usize) {
        let train_end = (self.train * steps as f64).floor() as usize;
        let val_end = ((self.train + self.val) * steps as f64).floor() as usize;
        (train_end, val_end.max(train_end))
    }
}

/// Stride-1 windows assigned to splits by the row of their last target.
pub fn make_windows(
    steps: usize,
    input_len: usize,
    horizon: usize,
    ratios: SplitRatios,
) -> Result<[WindowedDataset; 3]> {
    ratios.validate()?;
    if input_len == 0 || horizon == 0 {
        return Err(Error::input("input length and horizon must be positive"));
    }
    let span = input_len + horizon;
    if steps < span {
        return Err(Error::input(format!(
            "series of {steps} steps is shorter than one window ({input_len} + {horizon})"
        )));
    }
    let (train_end, val_end) = ratios.boundaries(steps);
    let mut out = [Split::Train, Split::Val, Split::Test]
        .map(|split| WindowedDataset { split, starts: Vec::new(), input_len, horizon });
    for start in 0..=steps - span {
        let last_target = start + span - 1;
        let slot = if last_target < train_end {
            0
        } else if last_target < val_end {
            1
        } else {
            2
        };
        out[slot].starts.push(start);
    }
    Ok(out)
}

/// A flow series prepared for training: raw and scaled copies plus splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub raw: FlowSeries,
    pub scaled: FlowSeries,
    pub scaler: Scaler,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

impl Dataset {
    pub fn prepare(
        raw: FlowSeries,
        input_len: usize,
        horizon: usize,
        ratios: SplitRatios,
        per_sensor_scaler: bool,
    ) -> Result<Self> {
        let [train, val, test] = make_windows(raw.steps(), input_len, horizon, ratios)?;
        let (train_end, _) = ratios.boundaries(raw.steps());
        let scaler = Scaler::fit(&raw, train_end, per_sensor_scaler)?;
        let scaled = scaler.apply(&raw);
        Ok(Dataset { raw, scaled, scaler, train, val, test })
    }

    /// Same windows as [`Dataset::prepare`], but scaled with statistics
    /// fitted elsewhere (typically those stored in a checkpoint).
    pub fn with_scaler(raw: FlowSeries, input_len: usize, horizon: usize, ratios: SplitRatios, scaler: Scaler) -> Result<Self> {
        if !scaler.is_global() && scaler.mean.len() != raw.nodes() {
            return Err(Error::input(format!(
                "scaler covers {} sensors, flows have {}",
                scaler.mean.len(),
                raw.nodes()
            )));
        }
        let [train, val, test] = make_windows(raw.steps(), input_len, horizon, ratios)?;
        let scaled = scaler.apply(&raw);
        Ok(Dataset { raw, scaled, scaler, train, val, test })
    }

    pub fn split(&self, split: Split) -> &WindowedDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn nodes(&self) -> usize {
        self.raw.nodes()
    }

    pub fn input_len(&self) -> usize {
        self.train.input_len
    }

    pub fn horizon(&self) -> usize {
        self.train.horizon
    }

    /// Scaled model input, `T' x N`.
    pub fn input(&self, start: usize) -> Tensor {
        self.scaled.slice(start, self.input_len())
    }

    /// Raw targets, `T x N`.
    pub fn target_raw(&self, start: usize) -> Tensor {
        self.raw.slice(start + self.input_len(), self.horizon())
    }

    /// Scaled targets, `T x N`.
    pub fn target_scaled(&self, start: usize) -> Tensor {
        self.scaled.slice(start + self.input_len(), self.horizon())
    }

    pub fn input_raw(&self, start: usize) -> Tensor {
        self.raw.slice(start, self.input_len())
    }
}
