use rand::Rng;

use super::{apply_rotary, Linear, Module, Param, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Query/key/value/output projections for multi-head attention.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("width {width} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            heads,
            query: Linear::new(&format!("{name}.q"), width, width, false, rng),
            key: Linear::new(&format!("{name}.k"), width, width, false, rng),
            value: Linear::new(&format!("{name}.v"), width, width, false, rng),
            output: Linear::new(&format!("{name}.o"), width, width, false, rng),
        })
    }

    pub fn specs(name: &str, width: usize, out: &mut Vec<ParamSpec>) {
        for p in ["q", "k", "v", "o"] {
            Linear::specs(&format!("{name}.{p}"), width, width, false, out);
        }
    }

    pub fn width(&self) -> usize {
        self.query.weight.value.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }
}

impl Module for AttentionParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// Cached rotated keys and values `[B, h, t, d_h]` of one attention layer.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Option<Tensor>,
    values: Option<Tensor>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.keys.as_ref().map_or(0, |k| k.shape()[2])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[B, T, w] -> [B, h, T, d_h]`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let [b, t, w] = g.shape(x)[..] else {
        return Err(Error::invalid("attention", format!("expects [B,T,w], got {:?}", g.shape(x))));
    };
    let r = g.reshape(x, &[b, t, heads, w / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let [b, h, t, d] = g.shape(x)[..] else {
        unreachable!("merge_heads on non rank-4 input")
    };
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[b, t, h * d])
}

fn check_width(g: &Graph, x: Var, p: &AttentionParams) -> Result<()> {
    match g.shape(x) {
        [_, _, w] if *w == p.width() => Ok(()),
        s => Err(Error::Shape {
            op: "attention",
            lhs: s.to_vec(),
            rhs: vec![0, 0, p.width()],
        }),
    }
}

fn attend(g: &mut Graph, q: Var, k: Var, v: Var, head_dim: usize) -> Result<Var> {
    let kt = g.transpose(k, 2, 3)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let masked = g.causal_mask(scores)?;
    let weights = g.softmax(masked)?;
    g.matmul(weights, v)
}

/// Scaled dot-product self-attention over `x: [B, T, w]` in which slot `t`
/// only attends to slots `0..=t`. With `positions` the queries and keys are
/// rotated first; `None` skips the rotary embedding.
pub fn causal_self_attention(
    g: &mut Graph,
    x: Var,
    p: &AttentionParams,
    positions: Option<&[usize]>,
) -> Result<Var> {
    check_width(g, x, p)?;
    let q = p.query.forward(g, x)?;
    let k = p.key.forward(g, x)?;
    let v = p.value.forward(g, x)?;
    let mut q = split_heads(g, q, p.heads)?;
    let mut k = split_heads(g, k, p.heads)?;
    let v = split_heads(g, v, p.heads)?;
    if let Some(pos) = positions {
        q = apply_rotary(g, q, pos)?;
        k = apply_rotary(g, k, pos)?;
    }
    let out = attend(g, q, k, v, p.head_dim())?;
    let merged = merge_heads(g, out)?;
    p.output.forward(g, merged)
}

/// Incremental form of [`causal_self_attention`]: `x: [B, n, w]` holds the
/// next `n` slots, which sit at `positions` and attend to everything already
/// in `cache` plus themselves. The cache is extended in place.
pub fn attention_step(
    g: &mut Graph,
    x: Var,
    p: &AttentionParams,
    positions: Option<&[usize]>,
    cache: &mut KvCache,
) -> Result<Var> {
    check_width(g, x, p)?;
    let q = p.query.forward(g, x)?;
    let k = p.key.forward(g, x)?;
    let v = p.value.forward(g, x)?;
    let mut q = split_heads(g, q, p.heads)?;
    let mut k = split_heads(g, k, p.heads)?;
    let mut v = split_heads(g, v, p.heads)?;
    if let Some(pos) = positions {
        q = apply_rotary(g, q, pos)?;
        k = apply_rotary(g, k, pos)?;
    }
    if let (Some(ck), Some(cv)) = (&cache.keys, &cache.values) {
        let ck = g.constant(ck.clone());
        let cv = g.constant(cv.clone());
        k = g.concat(&[ck, k], 2)?;
        v = g.concat(&[cv, v], 2)?;
    }
    cache.keys = Some(g.value(k).clone());
    cache.values = Some(g.value(v).clone());
    let out = attend(g, q, k, v, p.head_dim())?;
    let merged = merge_heads(g, out)?;
    p.output.forward(g, merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionParams::new("a", 8, 2, &mut rng).unwrap()
    }

    #[test]
    fn single_slot_output_is_value_projection() {
        let p = params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = causal_self_attention(&mut g, xv, &p, Some(&[0])).unwrap();
        let v = p.value.forward(&mut g, xv).unwrap();
        let expect = p.output.forward(&mut g, v).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn future_perturbation_leaves_past_bit_identical() {
        let p = params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
        let pos: Vec<usize> = (0..5).collect();
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = causal_self_attention(&mut g, xv, &p, Some(&pos)).unwrap();
            g.value(y).clone()
        };
        let base = run(&x);
        for t in 0..4 {
            let mut x2 = x.clone();
            for b in 0..2 {
                for c in 0..8 {
                    x2.data_mut()[(b * 5 + t + 1) * 8 + c] += 3.0;
                }
            }
            let pert = run(&x2);
            for b in 0..2 {
                let keep = (b * 5) * 8..(b * 5 + t + 1) * 8;
                for i in keep {
                    assert_eq!(base.data()[i].to_bits(), pert.data()[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn uniform_input_gives_position_independent_output_without_rotary() {
        let p = params(5);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let x = Tensor::new(&[1, 4, 8], row.repeat(4)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = causal_self_attention(&mut g, xv, &p, None).unwrap();
        let d = g.value(y).data();
        for t in 1..4 {
            for c in 0..8 {
                assert!((d[t * 8 + c] - d[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cached_steps_match_full_pass() {
        let p = params(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[1, 4, 8], 1.0, &mut rng);
        let pos: Vec<usize> = (0..4).collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let full = causal_self_attention(&mut g, xv, &p, Some(&pos)).unwrap();
        let full = g.value(full).clone();
        let mut cache = KvCache::default();
        for t in 0..4 {
            let mut g = Graph::new();
            let step_in = g.constant(Tensor::new(&[1, 1, 8], x.data()[t * 8..(t + 1) * 8].to_vec()).unwrap());
            let y = attention_step(&mut g, step_in, &p, Some(&[t]), &mut cache).unwrap();
            for c in 0..8 {
                assert!((g.value(y).data()[c] - full.data()[t * 8 + c]).abs() < 1e-12);
            }
        }
        assert_eq!(cache.len(), 4);
    }

    #[test]
    fn attention_gradient_check() {
        let p = params(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[1, 3, 8], 1.0, &mut rng);
        let probe = Tensor::randn(&[1, 3, 8], 1.0, &mut rng);
        let err = finite_diff_check(
            |g, x| {
                let y = causal_self_attention(g, x, &p, Some(&[0, 1, 2]))?;
                let pr = g.constant(probe.clone());
                let m = g.mul(y, pr)?;
                g.sum_all(m)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn width_must_divide_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionParams::new("a", 10, 4, &mut rng).is_err());
    }
}
