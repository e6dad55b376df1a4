//! Splitting a `2^K` token vocabulary into `M` bit-slice sub-vocabularies.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Which end of the index the first sub-token reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BitOrder {
    /// Sub-token 1 takes the lowest-order `k_1` bits.
    #[default]
    LowFirst,
    /// Sub-token 1 takes the highest-order `k_1` bits.
    HighFirst,
}

impl BitOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            BitOrder::LowFirst => "low_first",
            BitOrder::HighFirst => "high_first",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "low_first" => Some(BitOrder::LowFirst),
            "high_first" => Some(BitOrder::HighFirst),
            _ => None,
        }
    }
}

/// Bit widths `k_1..k_M` of the sub-vocabularies; `sum(k) == K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorizationScheme {
    bits: Vec<u32>,
    order: BitOrder,
}

impl FactorizationScheme {
    pub fn new(bits: Vec<u32>, order: BitOrder) -> Result<Self> {
        if bits.is_empty() || bits.iter().any(|&k| k == 0) {
            return Err(Error::invalid(
                "factorization",
                format!("sub-token widths {bits:?} must be non-empty and >= 1"),
            ));
        }
        let total: u32 = bits.iter().sum();
        if total as usize > crate::lfq::MAX_BITS {
            return Err(Error::invalid(
                "factorization",
                format!("total width {total} exceeds {}", crate::lfq::MAX_BITS),
            ));
        }
        Ok(Self { bits, order })
    }

    pub fn low_first(bits: &[u32]) -> Result<Self> {
        Self::new(bits.to_vec(), BitOrder::LowFirst)
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    pub fn order(&self) -> BitOrder {
        self.order
    }

    /// M, the number of sub-tokens.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// K, the full index width.
    pub fn total_bits(&self) -> usize {
        self.bits.iter().sum::<u32>() as usize
    }

    pub fn vocab(&self, m: usize) -> usize {
        1usize << self.bits[m]
    }

    /// Bit offset of sub-token `m` inside the index.
    fn shift(&self, m: usize) -> u32 {
        match self.order {
            BitOrder::LowFirst => self.bits[..m].iter().sum(),
            BitOrder::HighFirst => self.bits[m + 1..].iter().sum(),
        }
    }

    pub fn factorize(&self, index: u32) -> Result<Vec<u32>> {
        let k = self.total_bits();
        if u64::from(index) >= 1u64 << k {
            return Err(Error::OutOfRange {
                what: "token index",
                index: index.into(),
                bound: 1u64 << k,
            });
        }
        Ok((0..self.len())
            .map(|m| (index >> self.shift(m)) & ((1u32 << self.bits[m]) - 1))
            .collect())
    }

    pub fn defactorize(&self, parts: &[u32]) -> Result<u32> {
        if parts.len() != self.len() {
            return Err(Error::invalid(
                "defactorize",
                format!("{} sub-tokens for a {}-way scheme", parts.len(), self.len()),
            ));
        }
        let mut index = 0u32;
        for (m, &x) in parts.iter().enumerate() {
            if x as usize >= self.vocab(m) {
                return Err(Error::OutOfRange {
                    what: "sub-token",
                    index: x.into(),
                    bound: self.vocab(m) as u64,
                });
            }
            index |= x << self.shift(m);
        }
        Ok(index)
    }
}

/// Sum of per-sub-space embeddings for each position: `tables[m]` is
/// `[2^{k_m}, w]` and `subtokens[n]` holds `(x^1..x^M)` of position `n`.
/// Returns `[n, w]`.
pub fn embed_subtokens(g: &mut Graph, tables: &[Var], subtokens: &[Vec<u32>]) -> Result<Var> {
    if tables.is_empty() {
        return Err(Error::invalid("embed_subtokens", "no embedding tables"));
    }
    let mut acc: Option<Var> = None;
    for (m, &table) in tables.iter().enumerate() {
        let rows = g.shape(table)[0];
        let mut idx = Vec::with_capacity(subtokens.len());
        for parts in subtokens {
            let Some(&x) = parts.get(m) else {
                return Err(Error::invalid(
                    "embed_subtokens",
                    format!("position has {} sub-tokens, need {}", parts.len(), tables.len()),
                ));
            };
            if x as usize >= rows {
                return Err(Error::OutOfRange {
                    what: "sub-token",
                    index: x.into(),
                    bound: rows as u64,
                });
            }
            idx.push(x as usize);
        }
        let e = g.gather(table, &idx)?;
        acc = Some(match acc {
            Some(a) => g.add(a, e)?,
            None => e,
        });
    }
    Ok(acc.expect("at least one table"))
}
