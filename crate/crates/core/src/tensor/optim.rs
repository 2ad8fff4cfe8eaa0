use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Per-parameter optimizer state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn sgd(lr: f32) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f32) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Validates every gradient, then updates all parameters as one step.
    pub fn step<'a, P, G>(&mut self, params: P, grads: G) -> Result<(), TensorError>
    where
        P: IntoIterator<Item = (String, &'a mut [f32])>,
        G: IntoIterator<Item = (String, &'a [f32])>,
    {
        let params: Vec<_> = params.into_iter().collect();
        let grads: Vec<_> = grads.into_iter().collect();
        if params.len() != grads.len() {
            return Err(TensorError::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((pn, p), (gn, g)) in params.iter().zip(&grads) {
            if pn != gn || p.len() != g.len() {
                return Err(TensorError::Shape(format!(
                    "parameter `{pn}` ({}) paired with gradient `{gn}` ({})",
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient(pn.clone()));
            }
            if let Some((m, _)) = self.moments.get(pn) {
                if m.len() != p.len() {
                    return Err(TensorError::Shape(format!(
                        "optimizer moments for `{pn}` have {} entries, parameter has {}",
                        m.len(),
                        p.len()
                    )));
                }
            }
        }
        self.step += 1;
        for ((name, p), (_, g)) in params.into_iter().zip(grads) {
            self.apply(&name, p, g);
        }
        Ok(())
    }

    fn apply(&mut self, name: &str, p: &mut [f32], g: &[f32]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, d) in p.iter_mut().zip(g) {
                    *w -= self.lr * d;
                }
            }
            OptimizerKind::Adam => {
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for i in 0..p.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    p[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}
