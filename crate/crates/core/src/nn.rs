//! Small building blocks for the fully connected networks used by the
//! coefficient and texture models: a dense layer, its tape counterpart, and an
//! Adam optimizer.
//!
//! Layers store weights as `in_dim x out_dim` so a batch `x` of shape
//! `B x in_dim` maps to `x . W + b`. The same parameter arrays can be pushed
//! onto a [`Tape`](crate::tape::Tape) as differentiable leaves (for training)
//! or as constants (for the frozen half of a GAN step).

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{NodeId, Tape};

/// One dense layer: `y = x . weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in_dim x out_dim`.
    pub weight: Array2<f64>,
    /// `1 x out_dim`, broadcast over the batch.
    pub bias: Array2<f64>,
}

impl Linear {
    /// Fan-in scaled Gaussian weights (`std = 1/sqrt(in_dim)`), zero biases.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        let weight = Array2::from_shape_fn((in_dim, out_dim), |_| dist.sample(rng));
        Self {
            weight,
            bias: Array2::zeros((1, out_dim)),
        }
    }

    /// All-zero layer (useful for hand-built test networks).
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((in_dim, out_dim)),
            bias: Array2::zeros((1, out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Concrete forward pass without a tape.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Push the parameters onto a tape, as gradient-tracked leaves or as
    /// constants.
    pub fn nodes(&self, tape: &mut Tape, requires_grad: bool) -> LinearNodes {
        let weight = if requires_grad {
            tape.leaf(self.weight.clone(), true)
        } else {
            tape.constant(self.weight.clone())
        };
        let bias = if requires_grad {
            tape.leaf(self.bias.clone(), true)
        } else {
            tape.constant(self.bias.clone())
        };
        LinearNodes { weight, bias }
    }
}

/// Tape handles for one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl LinearNodes {
    /// `x . W + b` on the tape.
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let xw = tape.matmul(x, self.weight);
        tape.add_row(xw, self.bias)
    }
}

/// Concrete leaky rectifier, matching the tape op bit for bit.
pub fn leaky_relu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v < 0.0 { slope * v } else { v })
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon: 1e-8,
        }
    }
}

/// Adam optimizer over an ordered list of parameter tensors. The caller must
/// present the same tensors in the same order on every step; moment slots are
/// allocated lazily from the first step's gradient shapes.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step_count: u64,
    moments: Vec<(Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    /// Change the learning rate without touching moment estimates or the
    /// step counter, e.g. for warmup or decay schedules.
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Apply one update. `params` and `grads` are parallel slices.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.moments.is_empty() {
            self.moments = grads
                .iter()
                .map(|g| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim())))
                .collect();
        }
        assert_eq!(
            self.moments.len(),
            params.len(),
            "parameter count changed between Adam steps"
        );
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((param, grad), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            assert_eq!(param.raw_dim(), grad.raw_dim(), "param/grad shape mismatch");
            m.zip_mut_with(grad, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(grad, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            ndarray::Zip::from(&mut **param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
                });
        }
    }
}
