use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const ROPE_BASE: f64 = 10000.0;

/// Rotate feature pairs `(2j, 2j+1)` of `x: [B, h, T, d]` by angle
/// `position * base^(-2j/d)`; `positions[t]` is the position of slot `t`.
pub fn apply_rotary(g: &mut Graph, x: Var, positions: &[usize]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [b, h, t, d] = shape[..] else {
        return Err(Error::invalid("rotary", format!("expects [B,h,T,d], got {shape:?}")));
    };
    if d % 2 != 0 {
        return Err(Error::invalid("rotary", format!("head dim {d} must be even")));
    }
    if positions.len() != t {
        return Err(Error::invalid(
            "rotary",
            format!("{} positions for {t} slots", positions.len()),
        ));
    }
    let half = d / 2;
    let mut cos = Vec::with_capacity(t * half);
    let mut sin = Vec::with_capacity(t * half);
    for &p in positions {
        for j in 0..half {
            let theta = ROPE_BASE.powf(-2.0 * j as f64 / d as f64);
            let angle = p as f64 * theta;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    let cos = g.constant(Tensor::new(&[t, half, 1], cos)?);
    let sin = g.constant(Tensor::new(&[t, half, 1], sin)?);
    let pairs = g.reshape(x, &[b, h, t, half, 2])?;
    let even = g.slice(pairs, 4, 0, 1)?;
    let odd = g.slice(pairs, 4, 1, 1)?;
    let ec = g.mul(even, cos)?;
    let os = g.mul(odd, sin)?;
    let es = g.mul(even, sin)?;
    let oc = g.mul(odd, cos)?;
    let new_even = g.sub(ec, os)?;
    let new_odd = g.add(es, oc)?;
    let joined = g.concat(&[new_even, new_odd], 4)?;
    g.reshape(joined, &shape)
}
