//! Parameter-backed conv and affine layers.
//!
//! A layer only records the names of its parameters; values and gradient
//! slots live in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Uniform-init gain giving unit output variance into a ReLU (He).
pub const RELU_GAIN: f64 = 2.449_489_742_783_178;
/// Uniform-init gain giving unit output variance for a linear output.
pub const LINEAR_GAIN: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
}

impl Conv {
    pub fn new(prefix: &str) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
        }
    }

    /// Registers a `cin -> cout` conv with a square `k x k` kernel, weights
    /// uniform in `±gain/sqrt(fan_in)` and bias uniform in `±1/sqrt(fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Result<()> {
        let fan_in = (cin * k * k) as f64;
        store.insert_uniform(&self.weight, &[cout, cin, k, k], gain / fan_in.sqrt(), trainable, rng)?;
        store.insert_uniform(&self.bias, &[cout], 1.0 / fan_in.sqrt(), trainable, rng)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, store.value(&self.weight)?, store.value(&self.bias)?)
    }

    /// Accumulates kernel/bias gradients and returns the input gradient.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let g = ops::conv2d_backward(x, store.value(&self.weight)?, store.value(&self.bias)?, dy)?;
        store.accumulate(&self.weight, &g.dk)?;
        store.accumulate(&self.bias, &g.db)?;
        Ok(g.dx)
    }

    /// Applies the conv to every view of an `[N,C,H,W]` tensor.
    pub fn forward_views(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let views = (0..x.dims()[0])
            .map(|n| self.forward(store, &x.index0(n)))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&views)
    }

    pub fn backward_views(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let views = (0..x.dims()[0])
            .map(|n| self.backward(store, &x.index0(n), &dy.index0(n)))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&views)
    }
}

#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: String,
    pub bias: String,
}

impl Affine {
    pub fn new(prefix: &str) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Result<()> {
        let scale = 1.0 / (fan_in as f64).sqrt();
        store.insert_uniform(&self.weight, &[fan_in, fan_out], gain * scale, trainable, rng)?;
        store.insert_uniform(&self.bias, &[fan_out], scale, trainable, rng)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        ops::affine(x, store.value(&self.weight)?, store.value(&self.bias)?)
    }

    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let g = ops::affine_backward(x, store.value(&self.weight)?, store.value(&self.bias)?, dy)?;
        store.accumulate(&self.weight, &g.dw)?;
        store.accumulate(&self.bias, &g.db)?;
        Ok(g.dx)
    }
}
