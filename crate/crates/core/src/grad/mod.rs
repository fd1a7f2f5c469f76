//! Differentiation contract: operations expose a forward evaluation and a
//! vector-Jacobian product, gradients land in a [`GradTape`], and central
//! finite differences verify both.

pub mod ops;

use std::any::Any;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Model, ParamId};

/// Activations a [`DiffOp`] keeps between forward and VJP.
pub type Saved = Box<dyn Any + Send + Sync>;

/// A differentiable map between flat `f64` vectors.
pub trait DiffOp: Send + Sync {
    fn name(&self) -> String;

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved);

    /// Pulls `d_out` back to a cotangent on `x`.
    fn vjp(&self, x: &[f64], saved: &Saved, d_out: &[f64]) -> Vec<f64>;

    /// Distance of `x` from the nearest non-smooth point of the op, when
    /// the op has any.
    fn smooth_margin(&self, _x: &[f64]) -> f64 {
        f64::INFINITY
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).0
    }
}

/// Sequential composition; the output of each op feeds the next.
pub struct Chain {
    ops: Vec<Box<dyn DiffOp>>,
}

impl Chain {
    pub fn new(ops: Vec<Box<dyn DiffOp>>) -> Self {
        Self { ops }
    }
}

struct ChainSaved {
    /// `(input, saved)` per op.
    steps: Vec<(Vec<f64>, Saved)>,
}

impl DiffOp for Chain {
    fn name(&self) -> String {
        self.ops.iter().map(|o| o.name()).collect::<Vec<_>>().join(" -> ")
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        let mut cur = x.to_vec();
        let mut steps = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let (out, saved) = op.forward(&cur);
            steps.push((std::mem::replace(&mut cur, out), saved));
        }
        (cur, Box::new(ChainSaved { steps }))
    }

    fn vjp(&self, _x: &[f64], saved: &Saved, d_out: &[f64]) -> Vec<f64> {
        let saved = saved.downcast_ref::<ChainSaved>().expect("chain activations");
        let mut d = d_out.to_vec();
        for (op, (input, s)) in self.ops.iter().zip(&saved.steps).rev() {
            d = op.vjp(input, s, &d);
        }
        d
    }

    fn smooth_margin(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let mut margin = f64::INFINITY;
        for op in &self.ops {
            margin = margin.min(op.smooth_margin(&cur));
            cur = op.eval(&cur);
        }
        margin
    }
}

/// Accumulated parameter gradients and per-Gaussian screen-space gradient
/// samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTape {
    grads: BTreeMap<ParamId, Vec<f64>>,
    /// Per Gaussian: one `|dL/d mu_ndc|` sample per view that saw it.
    ndc: Vec<Vec<f64>>,
}

impl GradTape {
    /// All-zero tape shaped like `model`.
    pub fn for_model(model: &Model) -> Self {
        Self {
            grads: ParamId::ALL
                .iter()
                .map(|&id| (id, vec![0.0; model.params(id).len()]))
                .collect(),
            ndc: vec![Vec::new(); model.cloud.len()],
        }
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[&id]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.grads.get_mut(&id).expect("every parameter has a slot")
    }

    pub fn add(&mut self, id: ParamId, values: &[f64]) {
        let slot = self.grad_mut(id);
        assert_eq!(slot.len(), values.len(), "gradient shape for {id}");
        for (a, b) in slot.iter_mut().zip(values) {
            *a += b;
        }
    }

    pub fn record_ndc(&mut self, gaussian: usize, norm: f64) {
        self.ndc[gaussian].push(norm);
    }

    pub fn ndc_samples(&self, gaussian: usize) -> &[f64] {
        &self.ndc[gaussian]
    }

    /// Number of views in which the Gaussian was visible.
    pub fn visible_count(&self, gaussian: usize) -> usize {
        self.ndc[gaussian].len()
    }

    pub fn num_gaussians(&self) -> usize {
        self.ndc.len()
    }

    pub fn zero(&mut self) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        self.ndc.iter_mut().for_each(Vec::clear);
    }

    pub fn is_zero(&self) -> bool {
        self.grads.values().flatten().all(|v| *v == 0.0) && self.ndc.iter().all(Vec::is_empty)
    }

    /// Adds another tape of the same shape, appending its NDC samples.
    pub fn merge(&mut self, other: &GradTape) {
        for (id, g) in &other.grads {
            self.add(*id, g);
        }
        for (a, b) in self.ndc.iter_mut().zip(&other.ndc) {
            a.extend_from_slice(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().flatten().all(|v| v.is_finite())
    }

    /// Parameter with the first non-finite gradient entry, if any.
    pub fn first_non_finite(&self) -> Option<(ParamId, usize)> {
        self.grads
            .iter()
            .find_map(|(id, g)| g.iter().position(|v| !v.is_finite()).map(|k| (*id, k)))
    }
}

/// Relative error used by every gradient check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference of a scalar function of a vector.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize, step: f64) -> f64 {
    let mut p = x.to_vec();
    p[k] = x[k] + step;
    let fp = f(&p);
    p[k] = x[k] - step;
    let fm = f(&p);
    (fp - fm) / (2.0 * step)
}

/// Error between an op's VJP and central differences of `<d_out, op(x)>`:
/// the largest coordinate discrepancy relative to the largest gradient
/// component (floored at 1e-8). Scaling by the whole vector keeps
/// coordinates whose gradient happens to be near zero from measuring only
/// rounding noise.
pub fn check_op(op: &dyn DiffOp, x: &[f64], d_out: &[f64], step: f64) -> f64 {
    let (_, saved) = op.forward(x);
    let analytic = op.vjp(x, &saved, d_out);
    let f = |y: &[f64]| -> f64 { op.eval(y).iter().zip(d_out).map(|(a, b)| a * b).sum() };
    let numeric: Vec<f64> = (0..x.len()).map(|k| central_difference(&f, x, k, step)).collect();
    let scale = analytic.iter().chain(&numeric).fold(1e-8, |m: f64, v| m.max(v.abs()));
    analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs() / scale).fold(0.0, f64::max)
}

/// One compared coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSample {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<FdSample>,
    pub checked: usize,
}

/// Every coordinate of the listed parameter arrays.
pub fn select_coords(model: &Model, params: &[ParamId]) -> Vec<(ParamId, usize)> {
    params
        .iter()
        .flat_map(|&id| (0..model.params(id).len()).map(move |k| (id, k)))
        .collect()
}

/// Compares `tape` against central differences of a loss at the selected
/// coordinates of `model`. `terms` returns summands of the loss; they are
/// differenced one by one before summing, so a large term does not bury
/// the rounding of the small ones.
pub fn finite_diff_check<F>(
    terms: F,
    model: &Model,
    tape: &GradTape,
    coords: &[(ParamId, usize)],
    step: f64,
) -> Result<FdReport>
where
    F: Fn(&Model) -> Result<Vec<f64>>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = model.clone();
    for &(id, k) in coords {
        let x = model.params(id)[k];
        probe.params_mut(id)[k] = x + step;
        let fp = terms(&probe)?;
        probe.params_mut(id)[k] = x - step;
        let fm = terms(&probe)?;
        probe.params_mut(id)[k] = x;
        if fp.len() != fm.len() || !fp.iter().chain(&fm).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("loss while perturbing {id}[{k}]")));
        }
        let numeric = fp.iter().zip(&fm).map(|(a, b)| a - b).sum::<f64>() / (2.0 * step);
        let analytic = tape.grad(id)[k];
        let rel_error = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || rel_error > report.max_rel_error {
            report.max_rel_error = rel_error;
            report.worst = Some(FdSample {
                param: id,
                index: k,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    Ok(report)
}
