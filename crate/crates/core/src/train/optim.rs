use serde::{Deserialize, Serialize};

use crate::arch::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer state, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    /// Momentum velocity, or Adam's first moment.
    first: Vec<Vec<f64>>,
    /// Adam's second moment.
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new<T: Element>(kind: OptimizerKind, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Optimizer {
            kind,
            first: zeros(),
            second: match kind {
                OptimizerKind::Adam { .. } => zeros(),
                OptimizerKind::SgdMomentum { .. } => Vec::new(),
            },
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter of
    /// `params`; a missing entry is a contract error and leaves every
    /// parameter untouched.
    pub fn step<T: Element>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            match g {
                None => {
                    return Err(Error::Contract(format!("no gradient for parameter {name}")))
                }
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::Contract(format!(
                        "gradient for {name} has shape {}, parameter has {}",
                        g.shape(),
                        p.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.as_ref().expect("checked above").data();
            let p = p.data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    for ((p, &g), v) in p.iter_mut().zip(g).zip(&mut self.first[i]) {
                        *v = momentum * *v - lr * g.to_f64_lossy();
                        *p = *p + T::from_f64_lossy(*v);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let moments = self.first[i].iter_mut().zip(&mut self.second[i]);
                    for ((p, &g), (m, v)) in p.iter_mut().zip(g).zip(moments) {
                        let g = g.to_f64_lossy();
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        *p = *p - T::from_f64_lossy(update);
                    }
                }
            }
        }
        Ok(())
    }
}
