//! Finite-difference verification of reverse-mode gradients.
//!
//! Analytic gradients come from an `f32` graph; the reference is a central
//! difference of the same builder evaluated in `f64`.

use crate::error::Result;
use crate::numerics::{Graph, NodeId, ParamStore, Scalar, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the per-coordinate relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

/// A graph-constructing procedure that can be instantiated at any precision.
pub trait GradProbe {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[NodeId]) -> Result<NodeId>;
}

/// Like [`GradProbe`] but reading its weights from a parameter store.
pub trait ParamProbe {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, params: &ParamStore<S>) -> Result<NodeId>;
}

#[derive(Clone, Debug)]
pub struct GradInput {
    pub value: Tensor<f64>,
    /// Frozen inputs are fed without `requires_grad` and skipped.
    pub frozen: bool,
}

impl GradInput {
    pub fn new(value: Tensor<f64>) -> Self {
        Self { value, frozen: false }
    }

    pub fn frozen(value: Tensor<f64>) -> Self {
        Self { value, frozen: true }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Input index or parameter name plus coordinate of the worst error.
    pub worst: Option<(String, usize)>,
}

impl GradCheck {
    fn record(&mut self, label: &str, coord: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((label.to_string(), coord));
        }
    }
}

fn eval_inputs<P: GradProbe>(probe: &P, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
    let loss = probe.build(&mut g, &ids)?;
    Ok(g.value(loss).data()[0])
}

/// Compares backward output with central differences on every coordinate of
/// every non-frozen input. Errors are reported as values, never raised.
pub fn check_gradients<P: GradProbe>(probe: &P, inputs: &[GradInput]) -> Result<GradCheck> {
    let mut g = Graph::<f32>::new();
    let ids: Vec<_> = inputs
        .iter()
        .map(|i| g.input(i.value.cast(), !i.frozen))
        .collect();
    let loss = probe.build(&mut g, &ids)?;
    let back = g.backward(loss)?;

    let mut report = GradCheck::default();
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|i| i.value.clone()).collect();
    for (k, inp) in inputs.iter().enumerate() {
        if inp.frozen {
            continue;
        }
        let analytic = back.input(ids[k]).expect("input requires grad");
        for c in 0..inp.value.len() {
            let orig = values[k].data()[c];
            values[k].data_mut()[c] = orig + FD_STEP;
            let up = eval_inputs(probe, &values)?;
            values[k].data_mut()[c] = orig - FD_STEP;
            let down = eval_inputs(probe, &values)?;
            values[k].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(&format!("input{k}"), c, analytic.data()[c] as f64, numeric);
        }
    }
    Ok(report)
}

fn eval_params<P: ParamProbe>(probe: &P, params: &ParamStore<f64>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let loss = probe.build(&mut g, params)?;
    Ok(g.value(loss).data()[0])
}

/// Finite-difference check over every coordinate of every unfrozen parameter.
pub fn check_param_gradients<P: ParamProbe>(probe: &P, params: &ParamStore<f32>) -> Result<GradCheck> {
    let mut g = Graph::<f32>::new();
    let loss = probe.build(&mut g, params)?;
    let back = g.backward(loss)?;

    let mut wide: ParamStore<f64> = params.cast();
    let mut report = GradCheck::default();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, _, frozen)| !frozen)
        .map(|(n, _, _)| n.to_string())
        .collect();
    for name in names {
        let Some(analytic) = back.params.get(&name) else {
            continue;
        };
        let base = wide.get(&name)?.clone();
        for c in 0..base.len() {
            let mut t = base.clone();
            t.data_mut()[c] += FD_STEP;
            wide.set(&name, t)?;
            let up = eval_params(probe, &wide)?;
            let mut t = base.clone();
            t.data_mut()[c] -= FD_STEP;
            wide.set(&name, t)?;
            let down = eval_params(probe, &wide)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(&name, c, analytic.data()[c] as f64, numeric);
        }
        wide.set(&name, base)?;
    }
    Ok(report)
}
