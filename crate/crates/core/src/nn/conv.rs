use rand::Rng;

use super::{Module, Param, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Learned convolution kernel `[outC, inC, kH, kW]`, bias `[outC]` and stride.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub kernel: Param,
    pub bias: Param,
    pub stride: usize,
}

impl ConvParams {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * ksize * ksize) as f64;
        Self {
            kernel: Param::new(
                format!("{name}.kernel"),
                Tensor::randn(&[out_ch, in_ch, ksize, ksize], (1.0 / fan_in).sqrt(), rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            stride,
        }
    }

    pub fn specs(name: &str, in_ch: usize, out_ch: usize, ksize: usize, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: format!("{name}.kernel"),
            shape: vec![out_ch, in_ch, ksize, ksize],
        });
        out.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![out_ch],
        });
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.value.shape()[0]
    }
}

impl Module for ConvParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.kernel);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

/// Zero same-padded cross-correlation; stride 2 halves the spatial extents
/// (rounding up).
pub fn conv2d(g: &mut Graph, x: Var, p: &ConvParams) -> Result<Var> {
    let k = g.param(&p.kernel);
    let b = g.param(&p.bias);
    g.conv2d(x, k, Some(b), p.stride)
}

fn check_rank4(g: &Graph, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::invalid(op, format!("expects [B,C,H,W], got {:?}", g.shape(x)))),
    }
}

/// Pixel shuffle: `[B, C*r*r, H, W] -> [B, C, H*r, W*r]`. Channel
/// `c*r*r + i*r + j` lands at offset `(i, j)` inside each `r x r` block.
pub fn depth_to_space(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let [b, c, h, w] = check_rank4(g, x, "depth_to_space")?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::invalid(
            "depth_to_space",
            format!("{c} channels not divisible by {r}^2"),
        ));
    }
    let oc = c / (r * r);
    let t = g.reshape(x, &[b, oc, r, r, h, w])?;
    let t = g.permute(t, &[0, 1, 4, 2, 5, 3])?;
    g.reshape(t, &[b, oc, h * r, w * r])
}

/// Inverse of [`depth_to_space`].
pub fn space_to_depth(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let [b, c, h, w] = check_rank4(g, x, "space_to_depth")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::invalid(
            "space_to_depth",
            format!("{h}x{w} not divisible by {r}"),
        ));
    }
    let t = g.reshape(x, &[b, c, h / r, r, w / r, r])?;
    let t = g.permute(t, &[0, 1, 3, 5, 2, 4])?;
    g.reshape(t, &[b, c * r * r, h / r, w / r])
}
