//! Neural network building blocks expressed on the autodiff [`Graph`].

mod attention;
mod conv;
mod ffn;
mod norm;
mod rope;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

pub use attention::{attention_step, causal_self_attention, AttentionParams, KvCache};
pub use conv::{conv2d, depth_to_space, space_to_depth, ConvParams};
pub use ffn::{ffn_hidden, gated_ffn, FfnParams};
pub use norm::{adaptive_group_norm, group_norm, rms_norm, AdaptiveGroupNorm, GroupNorm, RmsNorm};
pub use rope::{apply_rotary, ROPE_BASE};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Anything that owns parameters. Visit order is stable and defines the
/// order of checkpoint records.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.numel());
        n
    }
}

/// Shape-only description of a parameter, used to size models without
/// allocating them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Dense layer `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::randn(&[inputs, outputs], std, rng),
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[outputs]))),
        }
    }

    pub fn specs(name: &str, inputs: usize, outputs: usize, bias: bool, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![inputs, outputs],
        });
        if bias {
            out.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![outputs],
            });
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn zero_(&mut self) {
        self.weight.value = Tensor::zeros(self.weight.value.shape());
        if let Some(b) = &mut self.bias {
            b.value = Tensor::zeros(b.value.shape());
        }
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Inverted dropout. `rng == None` means evaluation mode (identity).
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    rate: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let n = crate::tensor::numel(&shape);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(&shape, mask)?);
    g.mul(x, m)
}
