//! Central finite-difference checks of tape gradients.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { epsilon: 1e-5, tolerance: 1e-4, floor: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.params.iter().filter(|p| !p.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Analytic gradients of the scalar produced by `loss_fn` for every parameter.
pub fn analytic_gradients<F>(store: &ParamStore, loss_fn: &F) -> Result<BTreeMap<ParamId, Tensor>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut by_param = grads.params(&tape);
    for id in store.ids() {
        by_param.entry(id).or_insert_with(|| Tensor::zeros(store.value(id).shape()));
    }
    Ok(by_param)
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::State(format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares supplied gradients against central differences of `loss_fn`.
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    analytic: &BTreeMap<ParamId, Tensor>,
    loss_fn: &F,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if config.epsilon <= 0.0 {
        return Err(Error::input(format!("epsilon must be positive, got {}", config.epsilon)));
    }
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let mut worst = (0.0, 0usize);
        for k in 0..n {
            let original = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = original + config.epsilon;
            let plus = eval_loss(store, loss_fn);
            store.value_mut(id).data_mut()[k] = original - config.epsilon;
            let minus = eval_loss(store, loss_fn);
            store.value_mut(id).data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * config.epsilon);
            let a = analytic.get(&id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, numeric, config.floor);
            if err > worst.0 || err.is_nan() {
                worst = (err, k);
            }
        }
        report.params.push(ParamReport {
            name: store.get(id).name.clone(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            passed: worst.0 <= config.tolerance,
        });
    }
    Ok(report)
}

/// Tape gradients of `loss_fn` checked against central finite differences,
/// one report line per parameter.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    loss_fn: F,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &loss_fn)?;
    compare_gradients(store, &analytic, &loss_fn, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", Tensor::matrix(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4])).unwrap();
        store.add("b", Tensor::matrix(1, 2, vec![0.05, -0.1])).unwrap();
        store
    }

    fn linear_loss(tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]));
        let w = tape.param(store, store.id_of("w").unwrap());
        let b = tape.param(store, store.id_of("b").unwrap());
        let h = tape.matmul(x, w)?;
        let h = tape.add_row(h, b)?;
        let h = tape.tanh(h);
        let sq = tape.mul(h, h)?;
        Ok(tape.sum(sq))
    }

    #[test]
    fn linear_layer_passes() {
        let mut store = linear_store();
        let report = finite_diff_check(&mut store, linear_loss, GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params.len(), 2);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut store = linear_store();
        let mut analytic = analytic_gradients(&store, &linear_loss).unwrap();
        let w = store.id_of("w").unwrap();
        analytic.get_mut(&w).unwrap().data_mut()[3] += 0.01;
        let report =
            compare_gradients(&mut store, &analytic, &linear_loss, GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
        let bad: Vec<_> = report.failures().map(|p| p.name.as_str()).collect();
        assert_eq!(bad, ["w"]);
        assert_eq!(report.params[0].worst_index, 3);
    }

    #[test]
    fn non_positive_epsilon_rejected() {
        let mut store = linear_store();
        let cfg = GradCheckConfig { epsilon: 0.0, ..Default::default() };
        assert!(finite_diff_check(&mut store, linear_loss, cfg).is_err());
    }
}
