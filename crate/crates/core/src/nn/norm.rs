use rand::Rng;

use super::{Linear, Module, Param, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-6;

/// Group normalization over `[B,C,H,W]`: every (sample, group) slice is
/// standardized to zero mean and unit variance, then scaled and shifted per
/// channel.
pub fn group_norm(g: &mut Graph, x: Var, groups: usize, scale: Var, shift: Var) -> Result<Var> {
    let xhat = standardize_groups(g, x, groups)?;
    let c = g.shape(x)[1];
    let s = g.reshape(scale, &[1, c, 1, 1])?;
    let b = g.reshape(shift, &[1, c, 1, 1])?;
    let y = g.mul(xhat, s)?;
    g.add(y, b)
}

/// The pre-affine part of [`group_norm`].
pub(crate) fn standardize_groups(g: &mut Graph, x: Var, groups: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::invalid("group_norm", format!("expects [B,C,H,W], got {shape:?}")));
    };
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    let t = g.reshape(x, &[b, groups, (c / groups) * h * w])?;
    let mean = g.mean(t, &[2], true)?;
    let centered = g.sub(t, mean)?;
    let sq = g.square(centered)?;
    let var = g.mean(sq, &[2], true)?;
    let var = g.add_scalar(var, NORM_EPS);
    let inv = g.powf(var, -0.5);
    let xhat = g.mul(centered, inv)?;
    g.reshape(xhat, &shape)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub scale: Param,
    pub shift: Param,
}

impl GroupNorm {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        Self {
            groups,
            scale: Param::new(format!("{name}.scale"), Tensor::ones(&[channels])),
            shift: Param::new(format!("{name}.shift"), Tensor::zeros(&[channels])),
        }
    }

    pub fn specs(name: &str, channels: usize, out: &mut Vec<ParamSpec>) {
        for part in ["scale", "shift"] {
            out.push(ParamSpec {
                name: format!("{name}.{part}"),
                shape: vec![channels],
            });
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.param(&self.scale);
        let b = g.param(&self.shift);
        group_norm(g, x, self.groups, s, b)
    }
}

impl Module for GroupNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.scale);
        f(&self.shift);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.scale);
        f(&mut self.shift);
    }
}

/// Group norm whose output is modulated by the quantized code map:
/// `(1 + s) * group_norm(x) + b`, where `(s, b)` come from `proj` applied
/// to the spatial average of `quant`.
pub fn adaptive_group_norm(
    g: &mut Graph,
    x: Var,
    quant: Var,
    norm: &GroupNorm,
    proj: &Linear,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let qs = g.shape(quant).to_vec();
    if qs.len() != 4 || xs.len() != 4 || qs[0] != xs[0] {
        return Err(Error::Shape {
            op: "adaptive_group_norm",
            lhs: xs,
            rhs: qs,
        });
    }
    let (b, c) = (xs[0], xs[1]);
    let normed = norm.forward(g, x)?;
    let pooled = g.mean(quant, &[2, 3], false)?;
    let mods = proj.forward(g, pooled)?;
    if g.shape(mods) != [b, 2 * c] {
        return Err(Error::Shape {
            op: "adaptive_group_norm proj",
            lhs: g.shape(mods).to_vec(),
            rhs: vec![b, 2 * c],
        });
    }
    let s = g.slice(mods, 1, 0, c)?;
    let s = g.reshape(s, &[b, c, 1, 1])?;
    let shift = g.slice(mods, 1, c, c)?;
    let shift = g.reshape(shift, &[b, c, 1, 1])?;
    let gain = g.add_scalar(s, 1.0);
    let y = g.mul(normed, gain)?;
    g.add(y, shift)
}

#[derive(Clone, Debug)]
pub struct AdaptiveGroupNorm {
    pub norm: GroupNorm,
    pub proj: Linear,
}

impl AdaptiveGroupNorm {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        channels: usize,
        groups: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut proj = Linear::new(&format!("{name}.proj"), cond_dim, 2 * channels, true, rng);
        for v in proj.weight.value.data_mut() {
            *v *= 0.1;
        }
        Self {
            norm: GroupNorm::new(&format!("{name}.norm"), channels, groups),
            proj,
        }
    }

    pub fn specs(name: &str, channels: usize, cond_dim: usize, out: &mut Vec<ParamSpec>) {
        GroupNorm::specs(&format!("{name}.norm"), channels, out);
        Linear::specs(&format!("{name}.proj"), cond_dim, 2 * channels, true, out);
    }

    pub fn forward(&self, g: &mut Graph, x: Var, quant: Var) -> Result<Var> {
        adaptive_group_norm(g, x, quant, &self.norm, &self.proj)
    }
}

impl Module for AdaptiveGroupNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.norm.visit(f);
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm.visit_mut(f);
        self.proj.visit_mut(f);
    }
}

/// Root-mean-square normalization over the last axis.
pub fn rms_norm(g: &mut Graph, x: Var, scale: Var) -> Result<Var> {
    let last = g.shape(x).len().checked_sub(1).ok_or_else(|| {
        Error::invalid("rms_norm", "scalar input")
    })?;
    let sq = g.square(x)?;
    let ms = g.mean(sq, &[last], true)?;
    let ms = g.add_scalar(ms, NORM_EPS);
    let inv = g.powf(ms, -0.5);
    let y = g.mul(x, inv)?;
    g.mul(y, scale)
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub scale: Param,
}

impl RmsNorm {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            scale: Param::new(format!("{name}.scale"), Tensor::ones(&[width])),
        }
    }

    pub fn specs(name: &str, width: usize, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: format!("{name}.scale"),
            shape: vec![width],
        });
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.param(&self.scale);
        rms_norm(g, x, s)
    }
}

impl Module for RmsNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.scale);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.scale);
    }
}
