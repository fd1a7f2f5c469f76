//! Adam with per-array learning rates, plus the learning-rate schedules used
//! by the trainer.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::grad::GradTape;
use crate::model::{Model, ParamId};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Fraction of the initial rate left at the end of a cosine schedule.
pub const COSINE_FLOOR: f64 = 0.01;

/// Cosine annealing from `initial` at iteration 0 to `COSINE_FLOOR * initial`
/// at `max_iterations`.
pub fn cosine_lr(initial: f64, iteration: usize, max_iterations: usize) -> f64 {
    if max_iterations == 0 {
        return initial;
    }
    let p = (iteration.min(max_iterations) as f64) / max_iterations as f64;
    initial * (COSINE_FLOOR + (1.0 - COSINE_FLOOR) * 0.5 * (1.0 + (PI * p).cos()))
}

/// Log-linear interpolation from `initial` to `last` over `max_iterations`;
/// linear when either end is zero.
pub fn exponential_lr(initial: f64, last: f64, iteration: usize, max_iterations: usize) -> f64 {
    if max_iterations == 0 {
        return initial;
    }
    let p = (iteration.min(max_iterations) as f64) / max_iterations as f64;
    if initial <= 0.0 || last <= 0.0 {
        return initial * (1.0 - p) + last * p;
    }
    (initial.ln() * (1.0 - p) + last.ln() * p).exp()
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-entry step count, so rows appended by densification start their
    /// bias correction from scratch.
    steps: Vec<u32>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: vec![0; n],
        }
    }
}

/// Adam state for every parameter array of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    state: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        Self {
            state: ParamId::ALL
                .iter()
                .map(|&id| (id, Moments::zeros(model.params(id).len())))
                .collect(),
        }
    }

    /// One update of array `id` with learning rate `lr`.
    pub fn step(&mut self, model: &mut Model, tape: &GradTape, id: ParamId, lr: f64) {
        let st = self.state.get_mut(&id).expect("every array has moments");
        let params = model.params_mut(id);
        let grad = tape.grad(id);
        debug_assert_eq!(params.len(), st.m.len());
        for k in 0..params.len() {
            let g = grad[k];
            st.steps[k] += 1;
            let t = st.steps[k] as i32;
            st.m[k] = ADAM_BETA1 * st.m[k] + (1.0 - ADAM_BETA1) * g;
            st.v[k] = ADAM_BETA2 * st.v[k] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = st.m[k] / (1.0 - ADAM_BETA1.powi(t));
            let v_hat = st.v[k] / (1.0 - ADAM_BETA2.powi(t));
            params[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }

    /// Rebuilds per-Gaussian moments after densification: new Gaussian `j`
    /// inherits the moments of `sources[j]`, or starts from zero for `None`.
    pub fn remap_gaussians(&mut self, sources: &[Option<usize>]) {
        for (id, st) in self.state.iter_mut() {
            if !id.is_gaussian() {
                continue;
            }
            let w = id.width();
            let mut next = Moments::zeros(sources.len() * w);
            for (j, src) in sources.iter().enumerate() {
                if let Some(i) = *src {
                    next.m[j * w..(j + 1) * w].copy_from_slice(&st.m[i * w..(i + 1) * w]);
                    next.v[j * w..(j + 1) * w].copy_from_slice(&st.v[i * w..(i + 1) * w]);
                    next.steps[j * w..(j + 1) * w].copy_from_slice(&st.steps[i * w..(i + 1) * w]);
                }
            }
            *st = next;
        }
    }

    /// Number of entries tracked for `id`.
    pub fn len(&self, id: ParamId) -> usize {
        self.state[&id].m.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::InitConfig;

    #[test]
    fn cosine_midpoint_and_ends() {
        assert_eq!(cosine_lr(2.0, 0, 100), 2.0);
        assert!((cosine_lr(2.0, 50, 100) - 2.0 * 0.505).abs() < 1e-15);
        assert!((cosine_lr(2.0, 100, 100) - 0.02).abs() < 1e-15);
        assert!((cosine_lr(2.0, 500, 100) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn exponential_endpoints() {
        assert!((exponential_lr(1e-2, 1e-4, 0, 10) - 1e-2).abs() < 1e-16);
        assert!((exponential_lr(1e-2, 1e-4, 5, 10) - 1e-3).abs() < 1e-16);
        assert!((exponential_lr(1e-2, 1e-4, 10, 10) - 1e-4).abs() < 1e-17);
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_the_gradient_sign() {
        let mut model = Model::init(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], &InitConfig::default(), 3).unwrap();
        let before = model.cloud.mu.clone();
        let mut tape = GradTape::for_model(&model);
        tape.grad_mut(ParamId::Mu).copy_from_slice(&[0.5, -2.0, 0.0, 1e-9, 0.0, 3.0]);
        let mut adam = Adam::new(&model);
        adam.step(&mut model, &tape, ParamId::Mu, 0.1);
        let moved: Vec<f64> = model.cloud.mu.as_flattened().iter().zip(before.as_flattened()).map(|(a, b)| a - b).collect();
        let expected = [-0.1, 0.1, 0.0, -0.1, 0.0, -0.1];
        for (m, e) in moved.iter().zip(expected) {
            assert!((m - e).abs() < 1e-6, "{moved:?}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model = Model::init(&[[0.0, 0.0, 0.0]], &InitConfig::default(), 1).unwrap();
        let before = model.clone();
        let mut tape = GradTape::for_model(&model);
        tape.grad_mut(ParamId::ToneMap).iter_mut().for_each(|g| *g = 1.0);
        let mut adam = Adam::new(&model);
        adam.step(&mut model, &tape, ParamId::ToneMap, 0.0);
        assert_eq!(model, before);
    }

    #[test]
    fn remap_copies_and_zeroes_rows() {
        let mut model = Model::init(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], &InitConfig::default(), 3).unwrap();
        let mut tape = GradTape::for_model(&model);
        tape.grad_mut(ParamId::Opacity).copy_from_slice(&[1.0, 2.0]);
        let mut adam = Adam::new(&model);
        adam.step(&mut model, &tape, ParamId::Opacity, 0.1);
        adam.remap_gaussians(&[Some(1), None, Some(1)]);
        let st = &adam.state[&ParamId::Opacity];
        assert_eq!(st.m.len(), 3);
        assert_eq!(st.m[1], 0.0);
        assert_eq!(st.steps, vec![1, 0, 1]);
        assert!((st.m[0] - 0.2).abs() < 1e-15 && st.m[0] == st.m[2]);
        assert_eq!(adam.len(ParamId::Rotation), 12);
    }
}
