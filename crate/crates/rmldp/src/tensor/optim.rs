use std::collections::BTreeMap;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
}

/// Parameter updater. Adam uses the standard bias-corrected moment update
/// with decay rates 0.9/0.999 and epsilon 1e-8.
pub struct Optimizer {
    kind: OptKind,
    lr: f64,
    step_count: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptKind, lr: f64) -> Self {
        Optimizer { kind, lr, step_count: 0, moments: BTreeMap::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One update over the gradient map. Gradients may cover a subset of the
    /// parameters; uncovered parameters are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if p.shape() != g.shape() {
                return Err(Error::OptimizerState(name.clone()));
            }
            match self.kind {
                OptKind::Sgd => {
                    for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *pi -= self.lr * gi;
                    }
                }
                OptKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    if m.len() != g.len() {
                        return Err(Error::OptimizerState(name.clone()));
                    }
                    let bc1 = 1.0 - BETA1.powi(t);
                    let bc2 = 1.0 - BETA2.powi(t);
                    for ((pi, gi), (mi, vi)) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *pi -= self.lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
