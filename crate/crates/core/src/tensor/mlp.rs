use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dense, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f32) -> f32 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f32, a: f32) -> f32 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Layer widths `[input, hidden.., output]`; hidden layers use `activation`,
/// the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self, TensorError> {
        if widths.len() < 2 {
            return Err(TensorError::Shape(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(TensorError::Shape(format!("zero width in {widths:?}")));
        }
        Ok(Self { widths, activation })
    }

    /// `[input] ++ hidden ++ [output]` with relu hidden units.
    pub fn tower(input: usize, hidden: &[usize], output: usize) -> Result<Self, TensorError> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, Activation::Relu)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out x in`
    pub weight: Dense,
    /// `1 x out`
    pub bias: Dense,
}

/// Multi-layer perceptron with exact reverse-mode gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
    #[serde(skip)]
    generation: u64,
}

/// Cached activations from one forward call.
#[derive(Debug, Clone)]
pub struct Tape {
    widths: Vec<usize>,
    generation: u64,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f32>>,
    /// Pre-activations of every layer.
    pre: Vec<Vec<f32>>,
}

impl Tape {
    pub fn output(&self) -> &[f32] {
        self.acts.last().expect("tape has at least the input")
    }

    /// Sign pattern of every hidden unit; changes exactly when a relu kink
    /// is crossed.
    pub fn activation_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden]
            .iter()
            .flat_map(|z| z.iter().map(|&v| v > 0.0))
    }
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Linear {
                weight: Dense::zeros(w[1], w[0]),
                bias: Dense::zeros(1, w[1]),
            })
            .collect();
        Self {
            spec,
            layers,
            generation: 0,
        }
    }

    /// He-scaled weights, zero biases.
    pub fn init<R: Rng>(spec: MlpSpec, rng: &mut R) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Linear {
                weight: Dense::he(w[1], w[0], rng),
                bias: Dense::zeros(1, w[1]),
            })
            .collect();
        Self {
            spec,
            layers,
            generation: 0,
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Mutable access to weights; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Linear] {
        self.generation = self.generation.wrapping_add(1);
        &mut self.layers
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec.clone())
    }

    pub fn forward(&self, x: &[f32]) -> Result<Tape, TensorError> {
        if x.len() != self.spec.input_dim() {
            return Err(TensorError::Shape(format!(
                "MLP input has {} values, expected {}",
                x.len(),
                self.spec.input_dim()
            )));
        }
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        acts.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = &acts[l];
            let out_dim = layer.weight.rows();
            let mut z = Vec::with_capacity(out_dim);
            for r in 0..out_dim {
                z.push(super::dot(layer.weight.row(r), input) + layer.bias.as_slice()[r]);
            }
            let a = if l + 1 < n {
                z.iter().map(|&v| self.spec.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
        }
        Ok(Tape {
            widths: self.spec.widths.clone(),
            generation: self.generation,
            acts,
            pre,
        })
    }

    /// Forward pass returning only the output.
    pub fn predict(&self, x: &[f32]) -> Result<Vec<f32>, TensorError> {
        Ok(self.forward(x)?.acts.pop().expect("non-empty"))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &[f32],
        grads: &mut Mlp,
    ) -> Result<Vec<f32>, TensorError> {
        if tape.widths != self.spec.widths || tape.generation != self.generation {
            return Err(TensorError::StaleTape);
        }
        if grads.spec.widths != self.spec.widths {
            return Err(TensorError::Shape("gradient buffer has a different shape".into()));
        }
        if upstream.len() != self.spec.output_dim() {
            return Err(TensorError::Shape(format!(
                "upstream gradient has {} values, expected {}",
                upstream.len(),
                self.spec.output_dim()
            )));
        }
        let n = self.layers.len();
        let mut delta = upstream.to_vec();
        for l in (0..n).rev() {
            if l + 1 < n {
                for (d, (&z, &a)) in delta.iter_mut().zip(tape.pre[l].iter().zip(&tape.acts[l + 1])) {
                    *d *= self.spec.activation.derivative(z, a);
                }
            }
            let input = &tape.acts[l];
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias.as_mut_slice()[r] += d;
                for (gw, &x) in g.weight.row_mut(r).iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            let mut next = vec![0.0f32; layer.weight.cols()];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (nx, &w) in next.iter_mut().zip(layer.weight.row(r)) {
                    *nx += d * w;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// `(name, tensor)` pairs with a common prefix, in a fixed order.
    pub fn named_params<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Dense)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.w{l}"), &layer.weight));
            out.push((format!("{prefix}.b{l}"), &layer.bias));
        }
        out
    }

    pub fn named_params_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Dense)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (l, layer) in self.layers_mut().iter_mut().enumerate() {
            out.push((format!("{prefix}.w{l}"), &mut layer.weight));
            out.push((format!("{prefix}.b{l}"), &mut layer.bias));
        }
        out
    }
}
