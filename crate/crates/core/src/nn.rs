//! Parameterized layers: thin wrappers that own [`ParamId`]s in a store and
//! emit tape ops through a [`Session`].

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Session, StatsId, Var};
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

/// Convolution without bias unless requested; "same" padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Kaiming-normal (fan-out) initialization, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (c_out * k * k) as f64).sqrt();
        let kernel = store.add(format!("{name}.kernel"), Tensor::normal(Shape::new(c_out, c_in, k, k), std, rng), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)), false));
        Conv {
            kernel,
            bias,
            stride,
            padding: k / 2,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let k = s.param(self.kernel);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, k, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(s), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(s), false),
            stats: store.add_stats(name, channels),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        s.batch_norm(x, self.gamma, self.beta, self.stats)
    }
}

/// Convolution followed by batch norm.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ConvBn {
            conv: Conv::new(store, &format!("{name}.conv"), c_in, c_out, k, stride, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        self.bn.forward(s, y)
    }

    pub fn forward_relu(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.forward(s, x)?;
        s.tape.relu(y)
    }
}

/// Fully connected layer on `N×C×1×1` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Normal(0, 1/c_in) weights, or all zeros when `zero` is set; zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, zero: bool, rng: &mut R) -> Self {
        let s = Shape::new(c_out, c_in, 1, 1);
        let w = if zero {
            Tensor::zeros(s)
        } else {
            Tensor::normal(s, (1.0 / c_in as f64).sqrt(), rng)
        };
        Linear {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)), false),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.tape.linear(x, w, Some(b))
    }
}
