//! Small dense networks with hand-rolled backprop.
//!
//! Hidden units are tanh; the output head is either a softmax (actor,
//! simplex-valued by construction) or a linear scalar (critic). Gradients
//! flow through the head, so actor updates respect the simplex without any
//! projection step.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputHead {
    /// Simplex output via a numerically stable softmax.
    Softmax,
    /// Raw affine output (scalar for critics).
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Feed-forward parameters: tanh hidden layers and an output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
    pub head: OutputHead,
}

/// Per-layer gradients, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

/// Forward caches needed by the backward pass.
pub struct ForwardCache {
    /// Inputs to each layer: `acts[0]` is the network input, `acts[l]` the
    /// tanh output feeding layer `l`.
    acts: Vec<DVector<f64>>,
    /// Post-head output (softmax probabilities or the affine output).
    out: DVector<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &DVector<f64> {
        &self.out
    }
}

impl NetworkParams {
    /// Builds a net with the given layer widths. Hidden weights are
    /// uniform in +-1/sqrt(fan_in); the final layer is uniform in
    /// +-3e-3 so initial actions start near the simplex center and
    /// initial values near zero.
    pub fn new<R: Rng>(dims: &[usize], head: OutputHead, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let scale = if l == dims.len() - 2 {
                3e-3
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            let weight =
                DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-scale..scale));
            let bias = DVector::from_fn(fan_out, |_, _| rng.random_range(-scale..scale));
            layers.push(Layer { weight, bias });
        }
        NetworkParams { layers, head }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty net").weight.nrows()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Pre-head output (the actor's logits).
    pub fn logits(&self, input: &DVector<f64>) -> DVector<f64> {
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &h + &layer.bias;
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            h = z;
        }
        h
    }

    pub fn forward(&self, input: &DVector<f64>) -> DVector<f64> {
        let z = self.logits(input);
        match self.head {
            OutputHead::Softmax => softmax(&z),
            OutputHead::Linear => z,
        }
    }

    pub fn forward_cached(&self, input: &DVector<f64>) -> ForwardCache {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(input.clone());
        let mut h = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &h + &layer.bias;
            if l < last {
                z.apply(|v| *v = v.tanh());
                acts.push(z.clone());
            }
            h = z;
        }
        let out = match self.head {
            OutputHead::Softmax => softmax(&h),
            OutputHead::Linear => h,
        };
        ForwardCache { acts, out }
    }

    /// Backpropagates `upstream = dL/d(output)` through the head and the
    /// layers, accumulating parameter gradients into `grads` and returning
    /// the gradient with respect to the network input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &DVector<f64>,
        grads: &mut Gradients,
    ) -> DVector<f64> {
        let mut dz = match self.head {
            OutputHead::Softmax => {
                // J_softmax' u = s.u - s (s'u)
                let s = &cache.out;
                let inner = s.dot(upstream);
                s.component_mul(upstream) - s * inner
            }
            OutputHead::Linear => upstream.clone(),
        };
        for l in (0..self.layers.len()).rev() {
            grads.layers[l].weight += &dz * cache.acts[l].transpose();
            grads.layers[l].bias += &dz;
            let dh = self.layers[l].weight.transpose() * &dz;
            if l == 0 {
                return dh;
            }
            // tanh' = 1 - tanh^2, with acts[l] holding the tanh output
            dz = dh.zip_map(&cache.acts[l], |g, a| g * (1.0 - a * a));
        }
        unreachable!("loop returns at l == 0")
    }

    /// One SGD step: `theta -= lr * grad`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weight -= &g.weight * lr;
            layer.bias -= &g.bias * lr;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }
}

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales gradients down to the given global L2 norm when they exceed it.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for l in &mut self.layers {
                l.weight *= s;
                l.bias *= s;
            }
        }
    }
}

/// Numerically stable softmax; output sums to 1 to float precision.
pub fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let m = z.max();
    let mut e = z.map(|v| (v - m).exp());
    let s = e.sum();
    e /= s;
    e
}

/// Polyak averaging: `target = tau * live + (1 - tau) * target`.
/// Rate 1 copies exactly, rate 0 leaves the target untouched.
pub fn polyak(target: &mut NetworkParams, live: &NetworkParams, tau: f64) {
    for (t, l) in target.layers.iter_mut().zip(&live.layers) {
        t.weight.zip_apply(&l.weight, |tv, lv| *tv = tau * lv + (1.0 - tau) * *tv);
        t.bias.zip_apply(&l.bias, |tv, lv| *tv = tau * lv + (1.0 - tau) * *tv);
    }
}
