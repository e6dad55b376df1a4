use rand::Rng;

use super::{Linear, Module, Param, ParamSpec};
use crate::error::Result;
use crate::tensor::{Graph, Var};

/// SwiGLU-style feed-forward: `down(silu(gate(x)) * up(x))`.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

/// Hidden width for a given model width and multiplier.
pub fn ffn_hidden(width: usize, multiplier: f64) -> usize {
    ((width as f64 * multiplier).ceil() as usize).max(1)
}

impl FfnParams {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, multiplier: f64, rng: &mut R) -> Self {
        let hidden = ffn_hidden(width, multiplier);
        Self {
            gate: Linear::new(&format!("{name}.gate"), width, hidden, false, rng),
            up: Linear::new(&format!("{name}.up"), width, hidden, false, rng),
            down: Linear::new(&format!("{name}.down"), hidden, width, false, rng),
        }
    }

    pub fn specs(name: &str, width: usize, multiplier: f64, out: &mut Vec<ParamSpec>) {
        let hidden = ffn_hidden(width, multiplier);
        Linear::specs(&format!("{name}.gate"), width, hidden, false, out);
        Linear::specs(&format!("{name}.up"), width, hidden, false, out);
        Linear::specs(&format!("{name}.down"), hidden, width, false, out);
    }
}

impl Module for FfnParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.gate.visit(f);
        self.up.visit(f);
        self.down.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.gate.visit_mut(f);
        self.up.visit_mut(f);
        self.down.visit_mut(f);
    }
}

pub fn gated_ffn(g: &mut Graph, x: Var, p: &FfnParams) -> Result<Var> {
    let a = p.gate.forward(g, x)?;
    let a = g.silu(a)?;
    let b = p.up.forward(g, x)?;
    let h = g.mul(a, b)?;
    p.down.forward(g, h)
}
