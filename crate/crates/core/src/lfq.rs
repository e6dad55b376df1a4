//! Lookup-free quantization.
//!
//! Every latent dimension is binarized independently to `-1` or `+1`, so the
//! implicit codebook is `{-1, +1}^K` and a token index is just the bit
//! pattern of the positive components. There is no embedding table to look
//! up; decoding an index reproduces its code exactly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const MAX_BITS: usize = 30;

/// Quantizer settings. `bits` is K, the code length (codebook size `2^K`).
#[derive(Clone, Debug, PartialEq)]
pub struct LfqConfig {
    pub bits: usize,
    pub temperature: f64,
    pub entropy_weight: f64,
    pub commitment_weight: f64,
}

impl LfqConfig {
    pub fn new(bits: usize) -> Result<Self> {
        let cfg = Self {
            bits,
            temperature: 0.1,
            entropy_weight: 0.1,
            commitment_weight: 0.25,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_BITS).contains(&self.bits) {
            return Err(Error::invalid(
                "lfq",
                format!("bits {} outside 1..={MAX_BITS}", self.bits),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("lfq", "temperature must be positive"));
        }
        if !(self.entropy_weight >= 0.0 && self.commitment_weight >= 0.0) {
            return Err(Error::invalid("lfq", "loss weights must be nonnegative"));
        }
        Ok(())
    }

    pub fn codebook_size(&self) -> u64 {
        1u64 << self.bits
    }
}

/// `-1` where `z <= 0`, `+1` elsewhere.
pub fn quantize_sign(z: &Tensor) -> Tensor {
    let data = z
        .data()
        .iter()
        .map(|&v| if v <= 0.0 { -1.0 } else { 1.0 })
        .collect();
    Tensor::from_parts(z.shape().to_vec(), data, z.dtype())
}

/// Bit `k` of the index is set iff component `k` is positive.
pub fn code_to_index(code: &[f64]) -> Result<u32> {
    if code.is_empty() || code.len() > MAX_BITS {
        return Err(Error::invalid(
            "code_to_index",
            format!("code length {} outside 1..={MAX_BITS}", code.len()),
        ));
    }
    let mut index = 0u32;
    for (k, &c) in code.iter().enumerate() {
        if c == 1.0 {
            index |= 1 << k;
        } else if c != -1.0 {
            return Err(Error::invalid(
                "code_to_index",
                format!("component {k} is {c}, expected -1 or +1"),
            ));
        }
    }
    Ok(index)
}

pub fn index_to_code(index: u32, bits: usize) -> Result<Vec<f64>> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid("index_to_code", format!("bits {bits} out of range")));
    }
    if u64::from(index) >= 1u64 << bits {
        return Err(Error::OutOfRange {
            what: "token index",
            index: index.into(),
            bound: 1u64 << bits,
        });
    }
    Ok((0..bits)
        .map(|k| if index >> k & 1 == 1 { 1.0 } else { -1.0 })
        .collect())
}

/// Sign quantization whose backward pass is the identity.
pub fn straight_through(g: &mut Graph, z: Var) -> Var {
    g.straight_through(z)
}

/// Per-bit probability of the `+1` code, `sigmoid(2 z / tau)`. The implied
/// distribution over all `2^K` codes is the product of these Bernoullis.
pub fn soft_assignment(g: &mut Graph, z: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("soft_assignment", "temperature must be positive"));
    }
    let a = g.scale(z, 2.0 / temperature);
    Ok(g.sigmoid(a))
}

/// Handles to the pieces of the entropy regularizer.
#[derive(Clone, Copy, Debug)]
pub struct EntropyTerms {
    /// `per_sample - codebook`, the value to minimize.
    pub loss: Var,
    /// Mean over samples of each sample's assignment entropy.
    pub per_sample: Var,
    /// Entropy of the batch-averaged assignment.
    pub codebook: Var,
}

const MARGINAL_CLAMP: f64 = 1e-12;

/// Entropy penalty over `z: [N, K]`: average per-sample assignment entropy
/// (pushes confident codes) minus entropy of the average assignment (pushes
/// the batch to spread over the codebook). Both entropies are evaluated per
/// bit; for the per-sample term that is exact, for the batch term it is the
/// sum of marginal entropies.
pub fn entropy_loss(g: &mut Graph, z: Var, temperature: f64) -> Result<EntropyTerms> {
    let shape = g.shape(z).to_vec();
    let [n, _k] = shape[..] else {
        return Err(Error::invalid("entropy_loss", format!("expects [N, K], got {shape:?}")));
    };
    if n == 0 {
        return Err(Error::invalid("entropy_loss", "empty batch"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("entropy_loss", "temperature must be positive"));
    }
    let a = g.scale(z, 2.0 / temperature);
    let p = g.sigmoid(a);
    // H(p) = p * softplus(-a) + (1 - p) * softplus(a), finite even when saturated
    let neg_a = g.neg(a);
    let nll_pos = g.softplus(neg_a);
    let nll_neg = g.softplus(a);
    let neg_p = g.neg(p);
    let q = g.add_scalar(neg_p, 1.0);
    let h1 = g.mul(p, nll_pos)?;
    let h0 = g.mul(q, nll_neg)?;
    let h = g.add(h1, h0)?;
    let total = g.sum_all(h)?;
    let per_sample = g.scale(total, 1.0 / n as f64);

    let avg = g.mean(p, &[0], false)?;
    let avg = g.clamp(avg, MARGINAL_CLAMP, 1.0 - MARGINAL_CLAMP);
    let codebook = binary_entropy_sum(g, avg)?;
    let loss = g.sub(per_sample, codebook)?;
    Ok(EntropyTerms {
        loss,
        per_sample,
        codebook,
    })
}

fn binary_entropy_sum(g: &mut Graph, p: Var) -> Result<Var> {
    let lp = g.log(p);
    let neg_p = g.neg(p);
    let q = g.add_scalar(neg_p, 1.0);
    let lq = g.log(q);
    let a = g.mul(p, lp)?;
    let b = g.mul(q, lq)?;
    let s = g.add(a, b)?;
    let s = g.sum_all(s)?;
    Ok(g.neg(s))
}

/// Mean squared distance between `z` and the (gradient-stopped) codes.
pub fn commitment_loss(g: &mut Graph, z: Var, codes: Var) -> Result<Var> {
    if g.shape(z) != g.shape(codes) {
        return Err(Error::Shape {
            op: "commitment_loss",
            lhs: g.shape(z).to_vec(),
            rhs: g.shape(codes).to_vec(),
        });
    }
    let target = g.detach(codes);
    let d = g.sub(z, target)?;
    let sq = g.square(d)?;
    g.mean_all(sq)
}

/// Token indices over a batch of `height x width` latent grids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(batch: usize, height: usize, width: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != batch * height * width {
            return Err(Error::invalid(
                "token grid",
                format!(
                    "{} indices for {batch}x{height}x{width}",
                    indices.len()
                ),
            ));
        }
        Ok(Self {
            batch,
            height,
            width,
            indices,
        })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// The indices of one sample.
    pub fn sample(&self, b: usize) -> &[u32] {
        let n = self.positions();
        &self.indices[b * n..(b + 1) * n]
    }

    pub fn check_range(&self, bits: usize) -> Result<()> {
        let bound = 1u64 << bits;
        match self.indices.iter().find(|&&i| u64::from(i) >= bound) {
            Some(&i) => Err(Error::OutOfRange {
                what: "token index",
                index: i.into(),
                bound,
            }),
            None => Ok(()),
        }
    }
}

/// Quantized codes `[B, K, H, W]` and the matching token indices.
#[derive(Clone, Debug)]
pub struct QuantizedMap {
    pub codes: Tensor,
    pub indices: TokenGrid,
}

/// Indices of a `[B, K, H, W]` map of +-1 codes (or raw latents, which are
/// sign-quantized first).
pub fn quantize_map(z: &Tensor) -> Result<QuantizedMap> {
    let [b, k, h, w] = z.shape()[..] else {
        return Err(Error::invalid("quantize", format!("expects [B,K,H,W], got {:?}", z.shape())));
    };
    let codes = quantize_sign(z);
    let d = codes.data();
    let mut indices = Vec::with_capacity(b * h * w);
    let mut code = vec![0.0; k];
    for n in 0..b {
        for pos in 0..h * w {
            for (bit, c) in code.iter_mut().enumerate() {
                *c = d[(n * k + bit) * h * w + pos];
            }
            indices.push(code_to_index(&code)?);
        }
    }
    Ok(QuantizedMap {
        codes,
        indices: TokenGrid::new(b, h, w, indices)?,
    })
}

/// `[B, K, H, W]` code map for a token grid.
pub fn codes_from_indices(grid: &TokenGrid, bits: usize) -> Result<Tensor> {
    let (b, h, w) = (grid.batch, grid.height, grid.width);
    let mut data = vec![0.0; b * bits * h * w];
    for n in 0..b {
        for pos in 0..h * w {
            let code = index_to_code(grid.indices[n * h * w + pos], bits)?;
            for (bit, c) in code.into_iter().enumerate() {
                data[(n * bits + bit) * h * w + pos] = c;
            }
        }
    }
    Tensor::new(&[b, bits, h, w], data)
}

/// Occurrence counts of token indices; shards merge by adding counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CodeUsage {
    counts: BTreeMap<u32, u64>,
}

impl CodeUsage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, indices: &[u32]) {
        for &i in indices {
            *self.counts.entry(i).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: &CodeUsage) {
        for (&i, &c) in &other.counts {
            *self.counts.entry(i).or_default() += c;
        }
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn counts(&self) -> &BTreeMap<u32, u64> {
        &self.counts
    }

    /// Fraction of the `2^bits` codes seen at least once.
    pub fn fraction(&self, bits: usize) -> f64 {
        self.distinct() as f64 / (1u64 << bits) as f64
    }
}

pub fn codebook_usage(grids: &[TokenGrid], bits: usize) -> f64 {
    let mut usage = CodeUsage::new();
    for g in grids {
        usage.record(&g.indices);
    }
    usage.fraction(bits)
}
