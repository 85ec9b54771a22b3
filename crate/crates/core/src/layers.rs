//! Building blocks shared by the speaker encoder, the backbone and the adapters.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Registers named parameters while a network is being built.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub init: &'a mut Init,
}

impl Builder<'_> {
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.store.insert(name, value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    FanIn,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, input: usize, output: usize, init: WeightInit) -> Result<Self> {
        let w = match init {
            WeightInit::FanIn => b.init.fan_in(&[input, output], input),
            WeightInit::Zero => Tensor::zeros(vec![input, output]),
        };
        Ok(Self {
            weight: b.param(format!("{name}.weight"), w)?,
            bias: b.param(format!("{name}.bias"), Tensor::zeros(vec![output]))?,
            input,
            output,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.input * self.output + self.output
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param(format!("{name}.gamma"), Tensor::filled(vec![dim], 1.0))?,
            beta: b.param(format!("{name}.beta"), Tensor::zeros(vec![dim]))?,
            dim,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Same-padded 1-D convolution over the time (row) axis of `[T, C_in]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub proj: Linear,
}

impl Conv1d {
    pub fn new(b: &mut Builder<'_>, name: &str, input: usize, output: usize, kernel: usize) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
        }
        Ok(Self {
            kernel,
            proj: Linear::new(b, name, kernel * input, output, WeightInit::FanIn)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        if self.kernel == 1 {
            return self.proj.forward(s, x);
        }
        let steps = s.graph.value(x).rows();
        let half = (self.kernel / 2) as isize;
        let mut taps = Vec::with_capacity(self.kernel);
        for off in -half..=half {
            let idx: Vec<Option<usize>> = (0..steps as isize)
                .map(|t| {
                    let src = t + off;
                    (src >= 0 && src < steps as isize).then_some(src as usize)
                })
                .collect();
            taps.push(s.graph.gather_rows(x, &idx)?);
        }
        let cols = s.graph.concat_cols(&taps)?;
        self.proj.forward(s, cols)
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            qkv: Linear::new(b, &format!("{name}.qkv"), dim, 3 * dim, WeightInit::FanIn)?,
            out: Linear::new(b, &format!("{name}.out"), dim, dim, WeightInit::FanIn)?,
            heads,
            dim,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let qkv = self.qkv.forward(s, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = s.graph.slice_cols(qkv, h * dh, dh)?;
            let k = s.graph.slice_cols(qkv, self.dim + h * dh, dh)?;
            let v = s.graph.slice_cols(qkv, 2 * self.dim + h * dh, dh)?;
            let scores = s.graph.matmul_ext(q, k, true)?;
            let scores = s.graph.scale(scores, scale);
            let attn = s.graph.softmax(scores);
            heads.push(s.graph.matmul(attn, v)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            s.graph.concat_cols(&heads)?
        };
        self.out.forward(s, merged)
    }
}

/// Position-wise feed-forward: conv(kernel) -> ReLU -> conv(1).
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
}

impl FeedForward {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, filter: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(b, &format!("{name}.conv1"), dim, filter, kernel)?,
            conv2: Conv1d::new(b, &format!("{name}.conv2"), filter, dim, 1)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = s.graph.relu(h);
        self.conv2.forward(s, h)
    }
}

/// Standard sinusoidal position table, `[steps, dim]`.
pub fn sinusoid_table(steps: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![steps, dim]);
    let data = t.data_mut();
    for pos in 0..steps {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}
