//! Class-conditional autoregressive generator over factorized tokens.
//!
//! An inter-position transformer turns the class token and the summed
//! sub-token embeddings of earlier positions into one context vector per
//! position. A small intra-position transformer then predicts the sub-tokens
//! of that position one after another from the context vector and the
//! sub-tokens already chosen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::factorizer::{embed_subtokens, FactorizationScheme};
use crate::lfq::TokenGrid;
use crate::nn::{
    attention_step, causal_self_attention, dropout, gated_ffn, AttentionParams, FfnParams,
    KvCache, Linear, Module, Param, ParamSpec, RmsNorm,
};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_FFN_MULTIPLIER: f64 = 8.0 / 3.0;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ArConfig {
    pub inter_blocks: usize,
    pub intra_blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub scheme: FactorizationScheme,
    pub class_count: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub dropout: f64,
    pub cond_drop: f64,
    pub ffn_multiplier: f64,
}

impl ArConfig {
    /// N=4, L=2, w=128, h=4, k=(3,5) over a 4x4 grid.
    pub fn desk(class_count: usize) -> Self {
        Self {
            inter_blocks: 4,
            intra_blocks: 2,
            width: 128,
            heads: 4,
            scheme: FactorizationScheme::low_first(&[3, 5]).expect("valid widths"),
            class_count,
            grid_height: 4,
            grid_width: 4,
            dropout: 0.1,
            cond_drop: 0.1,
            ffn_multiplier: DEFAULT_FFN_MULTIPLIER,
        }
    }

    /// Published model sizes `B`, `L` and `XL`: 1000 classes, 16x16 grids,
    /// sub-vocabularies of 2^6 and 2^12.
    pub fn preset(name: &str) -> Result<Self> {
        let (n, l, w, h) = match name {
            "B" => (24, 2, 1024, 16),
            "L" => (36, 3, 1280, 20),
            "XL" => (48, 4, 1536, 24),
            other => return Err(Error::Config(format!("unknown model size {other:?}"))),
        };
        Ok(Self {
            inter_blocks: n,
            intra_blocks: l,
            width: w,
            heads: h,
            scheme: FactorizationScheme::low_first(&[6, 12])?,
            class_count: 1000,
            grid_height: 16,
            grid_width: 16,
            dropout: 0.1,
            cond_drop: 0.1,
            ffn_multiplier: DEFAULT_FFN_MULTIPLIER,
        })
    }

    /// T, the number of token positions.
    pub fn seq_len(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn subtokens(&self) -> usize {
        self.scheme.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if (self.width / self.heads) % 2 != 0 {
            return fail(format!("head dim {} must be even", self.width / self.heads));
        }
        if self.seq_len() == 0 {
            return fail("sequence length must be at least 1".into());
        }
        if self.class_count == 0 {
            return fail("class count must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return fail(format!("condition drop {} outside [0, 1]", self.cond_drop));
        }
        if !(self.ffn_multiplier > 0.0) {
            return fail("ffn multiplier must be positive".into());
        }
        Ok(())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(ArModel::param_specs(self)?
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum())
    }
}

/// Sub-tokens `(x^1..x^M)` of every position of one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubTokenGrid {
    positions: Vec<Vec<u32>>,
}

impl SubTokenGrid {
    pub fn new(positions: Vec<Vec<u32>>, scheme: &FactorizationScheme) -> Result<Self> {
        for p in &positions {
            if p.len() != scheme.len() {
                return Err(Error::invalid(
                    "sub-token grid",
                    format!("position has {} sub-tokens, scheme has {}", p.len(), scheme.len()),
                ));
            }
            for (m, &x) in p.iter().enumerate() {
                if x as usize >= scheme.vocab(m) {
                    return Err(Error::OutOfRange {
                        what: "sub-token",
                        index: x.into(),
                        bound: scheme.vocab(m) as u64,
                    });
                }
            }
        }
        Ok(Self { positions })
    }

    pub fn from_indices(scheme: &FactorizationScheme, indices: &[u32]) -> Result<Self> {
        let positions = indices
            .iter()
            .map(|&i| scheme.factorize(i))
            .collect::<Result<_>>()?;
        Ok(Self { positions })
    }

    pub fn to_indices(&self, scheme: &FactorizationScheme) -> Result<Vec<u32>> {
        self.positions.iter().map(|p| scheme.defactorize(p)).collect()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, t: usize) -> &[u32] {
        &self.positions[t]
    }

    pub fn positions(&self) -> &[Vec<u32>] {
        &self.positions
    }
}

/// One training or scoring example. `class == None` selects the learned
/// null condition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub class: Option<usize>,
    pub grid: SubTokenGrid,
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: RmsNorm,
    attn: AttentionParams,
    ffn_norm: RmsNorm,
    ffn: FfnParams,
}

impl Block {
    fn new<R: Rng + ?Sized>(name: &str, cfg: &ArConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn_norm: RmsNorm::new(&format!("{name}.attn_norm"), cfg.width),
            attn: AttentionParams::new(&format!("{name}.attn"), cfg.width, cfg.heads, rng)?,
            ffn_norm: RmsNorm::new(&format!("{name}.ffn_norm"), cfg.width),
            ffn: FfnParams::new(&format!("{name}.ffn"), cfg.width, cfg.ffn_multiplier, rng),
        })
    }

    fn specs(name: &str, cfg: &ArConfig, out: &mut Vec<ParamSpec>) {
        RmsNorm::specs(&format!("{name}.attn_norm"), cfg.width, out);
        AttentionParams::specs(&format!("{name}.attn"), cfg.width, out);
        RmsNorm::specs(&format!("{name}.ffn_norm"), cfg.width, out);
        FfnParams::specs(&format!("{name}.ffn"), cfg.width, cfg.ffn_multiplier, out);
    }

    fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        positions: &[usize],
        rate: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let h = self.attn_norm.forward(g, x)?;
        let h = causal_self_attention(g, h, &self.attn, Some(positions))?;
        let x = g.add(x, h)?;
        let h = self.ffn_norm.forward(g, x)?;
        let h = gated_ffn(g, h, &self.ffn)?;
        let h = dropout(g, h, rate, rng)?;
        g.add(x, h)
    }

    fn step(&self, g: &mut Graph, x: Var, positions: &[usize], cache: &mut KvCache) -> Result<Var> {
        let h = self.attn_norm.forward(g, x)?;
        let h = attention_step(g, h, &self.attn, Some(positions), cache)?;
        let x = g.add(x, h)?;
        let h = self.ffn_norm.forward(g, x)?;
        let h = gated_ffn(g, h, &self.ffn)?;
        g.add(x, h)
    }
}

impl Module for Block {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.attn_norm.visit(f);
        self.attn.visit(f);
        self.ffn_norm.visit(f);
        self.ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.attn_norm.visit_mut(f);
        self.attn.visit_mut(f);
        self.ffn_norm.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct ArModel {
    config: ArConfig,
    /// One `[2^{k_m}, w]` table per sub-vocabulary, summed into the
    /// inter-position input.
    token_emb: Vec<Param>,
    /// `[class_count + 1, w]`; the last row is the null condition.
    class_emb: Param,
    inter: Vec<Block>,
    inter_norm: RmsNorm,
    /// Tables for sub-tokens `1..M-1` fed to the intra-position stack.
    intra_emb: Vec<Param>,
    intra: Vec<Block>,
    intra_norm: RmsNorm,
    heads: Vec<Linear>,
}

fn embedding<R: Rng + ?Sized>(name: String, rows: usize, w: usize, rng: &mut R) -> Param {
    Param::new(name, Tensor::randn(&[rows, w], EMBED_STD, rng))
}

fn spec(name: String, shape: Vec<usize>) -> ParamSpec {
    ParamSpec { name, shape }
}

impl ArModel {
    pub fn new(config: ArConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let s = &config.scheme;
        let token_emb = (0..s.len())
            .map(|m| embedding(format!("tok_emb.{m}"), s.vocab(m), w, &mut rng))
            .collect();
        let class_emb = embedding("class_emb".into(), config.class_count + 1, w, &mut rng);
        let inter = (0..config.inter_blocks)
            .map(|i| Block::new(&format!("inter.{i}"), &config, &mut rng))
            .collect::<Result<_>>()?;
        let intra_emb = (0..s.len() - 1)
            .map(|m| embedding(format!("intra_emb.{m}"), s.vocab(m), w, &mut rng))
            .collect();
        let intra = (0..config.intra_blocks)
            .map(|i| Block::new(&format!("intra.{i}"), &config, &mut rng))
            .collect::<Result<_>>()?;
        let heads = (0..s.len())
            .map(|m| Linear::new(&format!("head.{m}"), w, s.vocab(m), false, &mut rng))
            .collect();
        Ok(Self {
            token_emb,
            class_emb,
            inter,
            inter_norm: RmsNorm::new("inter_norm", w),
            intra_emb,
            intra,
            intra_norm: RmsNorm::new("intra_norm", w),
            heads,
            config,
        })
    }

    /// Parameter names and shapes in visit order, without allocating.
    pub fn param_specs(config: &ArConfig) -> Result<Vec<ParamSpec>> {
        config.validate()?;
        let w = config.width;
        let s = &config.scheme;
        let mut out = Vec::new();
        for m in 0..s.len() {
            out.push(spec(format!("tok_emb.{m}"), vec![s.vocab(m), w]));
        }
        out.push(spec("class_emb".into(), vec![config.class_count + 1, w]));
        for i in 0..config.inter_blocks {
            Block::specs(&format!("inter.{i}"), config, &mut out);
        }
        RmsNorm::specs("inter_norm", w, &mut out);
        for m in 0..s.len() - 1 {
            out.push(spec(format!("intra_emb.{m}"), vec![s.vocab(m), w]));
        }
        for i in 0..config.intra_blocks {
            Block::specs(&format!("intra.{i}"), config, &mut out);
        }
        RmsNorm::specs("intra_norm", w, &mut out);
        for m in 0..s.len() {
            Linear::specs(&format!("head.{m}"), w, s.vocab(m), false, &mut out);
        }
        Ok(out)
    }

    pub fn config(&self) -> &ArConfig {
        &self.config
    }

    fn scheme(&self) -> &FactorizationScheme {
        &self.config.scheme
    }

    fn class_row(&self, class: Option<usize>) -> Result<usize> {
        match class {
            None => Ok(self.config.class_count),
            Some(c) if c < self.config.class_count => Ok(c),
            Some(c) => Err(Error::OutOfRange {
                what: "class id",
                index: c as u64,
                bound: self.config.class_count as u64,
            }),
        }
    }

    fn check_batch(&self, batch: &[Sequence]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::invalid("ar model", "empty batch"));
        }
        let t = self.config.seq_len();
        for s in batch {
            if s.grid.len() != t {
                return Err(Error::invalid(
                    "ar model",
                    format!("grid has {} positions, model expects {t}", s.grid.len()),
                ));
            }
            SubTokenGrid::new(s.grid.positions.clone(), self.scheme())?;
            self.class_row(s.class)?;
        }
        Ok(())
    }

    /// Context vectors `C: [B, T, w]`. Slot `t` sees the class token and the
    /// sub-tokens of positions `< t`. `rng` enables dropout.
    pub fn inter_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &[Sequence],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let (b, t, w) = (batch.len(), self.config.seq_len(), self.config.width);
        let rate = self.config.dropout;

        let rows: Vec<usize> = batch
            .iter()
            .map(|s| self.class_row(s.class))
            .collect::<Result<_>>()?;
        let table = g.param(&self.class_emb);
        let cls = g.gather(table, &rows)?;
        let cls = dropout(g, cls, rate, rng.as_deref_mut())?;
        let cls = g.reshape(cls, &[b, 1, w])?;

        let x = if t > 1 {
            let prev: Vec<Vec<u32>> = batch
                .iter()
                .flat_map(|s| s.grid.positions[..t - 1].iter().cloned())
                .collect();
            let tables: Vec<Var> = self.token_emb.iter().map(|p| g.param(p)).collect();
            let e = embed_subtokens(g, &tables, &prev)?;
            let e = dropout(g, e, rate, rng.as_deref_mut())?;
            let e = g.reshape(e, &[b, t - 1, w])?;
            g.concat(&[cls, e], 1)?
        } else {
            cls
        };
        let positions: Vec<usize> = (0..t).collect();
        let mut h = x;
        for blk in &self.inter {
            h = blk.forward(g, h, &positions, rate, rng.as_deref_mut())?;
        }
        self.inter_norm.forward(g, h)
    }

    /// Intra-position input `[n, M, w]`: the context vector followed by the
    /// embeddings of sub-tokens `1..M-1`.
    fn intra_input<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        ctx: Var,
        subtokens: &[&[u32]],
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let n = subtokens.len();
        let w = self.config.width;
        let mut slots = vec![g.reshape(ctx, &[n, 1, w])?];
        let mut embs = Vec::new();
        for (m, table) in self.intra_emb.iter().enumerate() {
            let tv = g.param(table);
            let idx: Vec<usize> = subtokens.iter().map(|p| p[m] as usize).collect();
            let e = g.gather(tv, &idx)?;
            embs.push(g.reshape(e, &[n, 1, w])?);
        }
        if !embs.is_empty() {
            let e = g.concat(&embs, 1)?;
            let e = dropout(g, e, self.config.dropout, rng)?;
            slots.push(e);
        }
        if slots.len() == 1 {
            Ok(slots[0])
        } else {
            g.concat(&slots, 1)
        }
    }

    /// Logits of every sub-token for `n` positions at once, teacher-forced:
    /// `ctx: [n, w]`, `subtokens[i]` holds the full `(x^1..x^M)` of row `i`.
    /// Element `m` of the result is `[n, 2^{k_m}]`.
    pub fn intra_forward_all<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        ctx: Var,
        subtokens: &[&[u32]],
        mut rng: Option<&mut R>,
    ) -> Result<Vec<Var>> {
        let mm = self.config.subtokens();
        let x = self.intra_input(g, ctx, subtokens, rng.as_deref_mut())?;
        let positions: Vec<usize> = (0..mm).collect();
        let mut h = x;
        for blk in &self.intra {
            h = blk.forward(g, h, &positions, self.config.dropout, rng.as_deref_mut())?;
        }
        let h = self.intra_norm.forward(g, h)?;
        let n = subtokens.len();
        let w = self.config.width;
        (0..mm)
            .map(|m| {
                let slot = g.slice(h, 1, m, 1)?;
                let slot = g.reshape(slot, &[n, w])?;
                self.heads[m].forward(g, slot)
            })
            .collect()
    }

    /// Logits for sub-token `m` (1-based) of one position given its context
    /// vector `[w]` and the preceding sub-tokens `x^1..x^{m-1}`. Entries of
    /// `partial` beyond `m - 1` are ignored.
    pub fn intra_forward(&self, context: &Tensor, partial: &[u32], m: usize) -> Result<Tensor> {
        let mm = self.config.subtokens();
        if m == 0 || m > mm {
            return Err(Error::OutOfRange {
                what: "sub-token slot",
                index: m as u64,
                bound: mm as u64 + 1,
            });
        }
        if partial.len() < m - 1 {
            return Err(Error::invalid(
                "intra_forward",
                format!("slot {m} needs {} preceding sub-tokens", m - 1),
            ));
        }
        if context.shape() != [self.config.width] {
            return Err(Error::Shape {
                op: "intra_forward",
                lhs: context.shape().to_vec(),
                rhs: vec![self.config.width],
            });
        }
        let mut full = vec![0u32; mm];
        for (j, &x) in partial.iter().take(m - 1).enumerate() {
            if x as usize >= self.scheme().vocab(j) {
                return Err(Error::OutOfRange {
                    what: "sub-token",
                    index: x.into(),
                    bound: self.scheme().vocab(j) as u64,
                });
            }
            full[j] = x;
        }
        let mut g = Graph::new();
        let ctx = g.constant(context.reshape(&[1, self.config.width])?);
        let logits = self.intra_forward_all::<ChaCha8Rng>(&mut g, ctx, &[&full], None)?;
        g.ensure_finite()?;
        let out = g.value(logits[m - 1]);
        out.reshape(&[out.numel()])
    }

    /// Per-sample log-likelihood `[B]` of the full grids, one teacher-forced
    /// pass.
    pub fn logprob_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &[Sequence],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let c = self.inter_forward(g, batch, rng.as_deref_mut())?;
        let (b, t, w) = (batch.len(), self.config.seq_len(), self.config.width);
        let ctx = g.reshape(c, &[b * t, w])?;
        let rows: Vec<&[u32]> = batch
            .iter()
            .flat_map(|s| s.grid.positions.iter().map(|p| p.as_slice()))
            .collect();
        let logits = self.intra_forward_all(g, ctx, &rows, rng)?;
        let mut total: Option<Var> = None;
        for (m, &lg) in logits.iter().enumerate() {
            let v = self.scheme().vocab(m);
            let lp = g.log_softmax(lg)?;
            let mut onehot = vec![0.0; b * t * v];
            for (i, r) in rows.iter().enumerate() {
                onehot[i * v + r[m] as usize] = 1.0;
            }
            let mask = g.constant(Tensor::new(&[b * t, v], onehot)?);
            let picked = g.mul(lp, mask)?;
            let picked = g.reshape(picked, &[b, t * v])?;
            let per = g.sum(picked, &[1], false)?;
            total = Some(match total {
                Some(a) => g.add(a, per)?,
                None => per,
            });
        }
        Ok(total.expect("at least one sub-token"))
    }

    /// `sum_t sum_m log p(x_t^m | earlier positions, x_t^{<m})` per sample,
    /// evaluation mode.
    pub fn sequence_logprob(&self, batch: &[Sequence]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let lp = self.logprob_graph::<ChaCha8Rng>(&mut g, batch, None)?;
        g.ensure_finite()?;
        Ok(g.value(lp).data().to_vec())
    }

    /// Mean negative log-likelihood per sub-token. With `rng` the model is in
    /// training mode: dropout is active and each class is replaced by the
    /// null condition with the configured probability.
    pub fn train_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &[Sequence],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::invalid("train_loss", "empty batch"));
        }
        let batch: Vec<Sequence> = match rng.as_deref_mut() {
            Some(r) => batch
                .iter()
                .map(|s| Sequence {
                    class: if r.random::<f64>() < self.config.cond_drop {
                        None
                    } else {
                        s.class
                    },
                    grid: s.grid.clone(),
                })
                .collect(),
            None => batch.to_vec(),
        };
        let lp = self.logprob_graph(g, &batch, rng)?;
        let total = g.sum_all(lp)?;
        let count = batch.len() * self.config.seq_len() * self.config.subtokens();
        let loss = g.scale(total, -1.0 / count as f64);
        g.ensure_finite()?;
        Ok(loss)
    }

    /// Start incremental decoding for a batch of conditions; returns the
    /// decoder state and the first context vectors `[B, w]`.
    pub fn context_begin(&self, classes: &[Option<usize>]) -> Result<(ContextDecoder, Tensor)> {
        if classes.is_empty() {
            return Err(Error::invalid("context_begin", "empty batch"));
        }
        let rows: Vec<usize> = classes
            .iter()
            .map(|&c| self.class_row(c))
            .collect::<Result<_>>()?;
        let mut state = ContextDecoder {
            caches: vec![KvCache::default(); self.inter.len()],
            next: 0,
            batch: classes.len(),
        };
        let mut g = Graph::new();
        let table = g.param(&self.class_emb);
        let x = g.gather(table, &rows)?;
        let ctx = self.context_run(&mut g, &mut state, x)?;
        Ok((state, ctx))
    }

    /// Feed the sub-tokens of the position just sampled (one row per batch
    /// entry) and return the next context vectors `[B, w]`.
    pub fn context_advance(&self, state: &mut ContextDecoder, subtokens: &[Vec<u32>]) -> Result<Tensor> {
        if subtokens.len() != state.batch {
            return Err(Error::invalid(
                "context_advance",
                format!("{} rows for a batch of {}", subtokens.len(), state.batch),
            ));
        }
        if state.next >= self.config.seq_len() {
            return Err(Error::invalid("context_advance", "sequence already complete"));
        }
        let mut g = Graph::new();
        let tables: Vec<Var> = self.token_emb.iter().map(|p| g.param(p)).collect();
        let x = embed_subtokens(&mut g, &tables, subtokens)?;
        self.context_run(&mut g, state, x)
    }

    fn context_run(&self, g: &mut Graph, state: &mut ContextDecoder, x: Var) -> Result<Tensor> {
        let (b, w) = (state.batch, self.config.width);
        let mut h = g.reshape(x, &[b, 1, w])?;
        let pos = [state.next];
        for (blk, cache) in self.inter.iter().zip(&mut state.caches) {
            h = blk.step(g, h, &pos, cache)?;
        }
        let h = self.inter_norm.forward(g, h)?;
        g.ensure_finite()?;
        state.next += 1;
        g.value(h).reshape(&[b, w])
    }

    /// Start sub-token decoding at one position from context vectors
    /// `[B, w]`; returns the state and the logits of sub-token 1.
    pub fn intra_begin(&self, context: &Tensor) -> Result<(IntraDecoder, Tensor)> {
        let [b, w] = context.shape()[..] else {
            return Err(Error::invalid("intra_begin", "context must be [B, w]"));
        };
        if w != self.config.width {
            return Err(Error::Shape {
                op: "intra_begin",
                lhs: context.shape().to_vec(),
                rhs: vec![b, self.config.width],
            });
        }
        let mut state = IntraDecoder {
            caches: vec![KvCache::default(); self.intra.len()],
            next: 0,
            batch: b,
        };
        let mut g = Graph::new();
        let x = g.constant(context.clone());
        let logits = self.intra_run(&mut g, &mut state, x)?;
        Ok((state, logits))
    }

    /// Feed sub-token `m` just sampled (one per batch row) and return the
    /// logits of sub-token `m + 1`.
    pub fn intra_advance(&self, state: &mut IntraDecoder, subtoken: &[u32]) -> Result<Tensor> {
        let m = state.next - 1;
        if m + 1 >= self.config.subtokens() {
            return Err(Error::invalid("intra_advance", "all sub-tokens already predicted"));
        }
        if subtoken.len() != state.batch {
            return Err(Error::invalid(
                "intra_advance",
                format!("{} sub-tokens for a batch of {}", subtoken.len(), state.batch),
            ));
        }
        let mut g = Graph::new();
        let table = g.param(&self.intra_emb[m]);
        let idx: Vec<usize> = subtoken.iter().map(|&x| x as usize).collect();
        let x = g.gather(table, &idx)?;
        self.intra_run(&mut g, state, x)
    }

    fn intra_run(&self, g: &mut Graph, state: &mut IntraDecoder, x: Var) -> Result<Tensor> {
        let (b, w) = (state.batch, self.config.width);
        let mut h = g.reshape(x, &[b, 1, w])?;
        let pos = [state.next];
        for (blk, cache) in self.intra.iter().zip(&mut state.caches) {
            h = blk.step(g, h, &pos, cache)?;
        }
        let h = self.intra_norm.forward(g, h)?;
        let h = g.reshape(h, &[b, w])?;
        let logits = self.heads[state.next].forward(g, h)?;
        g.ensure_finite()?;
        state.next += 1;
        Ok(g.value(logits).clone())
    }

    /// Log-likelihood of each sequence computed position by position through
    /// the cached decoding path.
    pub fn incremental_logprob(&self, batch: &[Sequence]) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let classes: Vec<Option<usize>> = batch.iter().map(|s| s.class).collect();
        let (mut state, mut ctx) = self.context_begin(&classes)?;
        let mut total = vec![0.0; batch.len()];
        for t in 0..self.config.seq_len() {
            let rows: Vec<Vec<u32>> = batch.iter().map(|s| s.grid.positions[t].clone()).collect();
            let (mut intra, mut logits) = self.intra_begin(&ctx)?;
            for m in 0..self.config.subtokens() {
                let v = self.scheme().vocab(m);
                for (i, r) in rows.iter().enumerate() {
                    let lp = log_softmax(&logits.data()[i * v..(i + 1) * v]);
                    total[i] += lp[r[m] as usize];
                }
                if m + 1 < self.config.subtokens() {
                    let picked: Vec<u32> = rows.iter().map(|r| r[m]).collect();
                    logits = self.intra_advance(&mut intra, &picked)?;
                }
            }
            if t + 1 < self.config.seq_len() {
                ctx = self.context_advance(&mut state, &rows)?;
            }
        }
        Ok(total)
    }

    /// Sample one token grid. `class == None` samples unconditionally.
    pub fn generate(&self, class: Option<usize>, opts: &SamplingOptions, seed: u64) -> Result<TokenGrid> {
        self.generate_batch(&[class], opts, seed)
    }

    /// Sample one grid per entry of `classes`; sample `i` draws from stream
    /// `i` of the seeded generator, so results do not depend on batch
    /// composition.
    pub fn generate_batch(
        &self,
        classes: &[Option<usize>],
        opts: &SamplingOptions,
        seed: u64,
    ) -> Result<TokenGrid> {
        opts.validate(self.scheme())?;
        let mut indices = Vec::with_capacity(classes.len() * self.config.seq_len());
        for (i, &class) in classes.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let grid = self.sample_one(class, opts, &mut rng)?;
            indices.extend(grid.to_indices(self.scheme())?);
        }
        TokenGrid::new(
            classes.len(),
            self.config.grid_height,
            self.config.grid_width,
            indices,
        )
    }

    fn sample_one<R: Rng + ?Sized>(
        &self,
        class: Option<usize>,
        opts: &SamplingOptions,
        rng: &mut R,
    ) -> Result<SubTokenGrid> {
        self.class_row(class)?;
        let guided = class.is_some() && opts.guidance != 1.0;
        let conds: Vec<Option<usize>> = if guided { vec![class, None] } else { vec![class] };
        let rows = conds.len();
        let (mut state, mut ctx) = self.context_begin(&conds)?;
        let mut out = Vec::with_capacity(self.config.seq_len());
        for t in 0..self.config.seq_len() {
            let (mut intra, mut logits) = self.intra_begin(&ctx)?;
            let mut subs = Vec::with_capacity(self.config.subtokens());
            for m in 0..self.config.subtokens() {
                let v = self.scheme().vocab(m);
                let d = logits.data();
                let mixed: Vec<f64> = if guided {
                    (0..v)
                        .map(|j| d[v + j] + opts.guidance * (d[j] - d[v + j]))
                        .collect()
                } else {
                    d[..v].to_vec()
                };
                let x = sample_logits(&mixed, opts.temperature, opts.top_k, rng)? as u32;
                subs.push(x);
                if m + 1 < self.config.subtokens() {
                    logits = self.intra_advance(&mut intra, &vec![x; rows])?;
                }
            }
            if t + 1 < self.config.seq_len() {
                ctx = self.context_advance(&mut state, &vec![subs.clone(); rows])?;
            }
            out.push(subs);
        }
        SubTokenGrid::new(out, self.scheme())
    }
}

impl Module for ArModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.token_emb.iter().for_each(&mut *f);
        f(&self.class_emb);
        for b in &self.inter {
            b.visit(f);
        }
        self.inter_norm.visit(f);
        self.intra_emb.iter().for_each(&mut *f);
        for b in &self.intra {
            b.visit(f);
        }
        self.intra_norm.visit(f);
        for h in &self.heads {
            h.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.token_emb.iter_mut().for_each(&mut *f);
        f(&mut self.class_emb);
        for b in &mut self.inter {
            b.visit_mut(f);
        }
        self.inter_norm.visit_mut(f);
        self.intra_emb.iter_mut().for_each(&mut *f);
        for b in &mut self.intra {
            b.visit_mut(f);
        }
        self.intra_norm.visit_mut(f);
        for h in &mut self.heads {
            h.visit_mut(f);
        }
    }
}

/// Cached inter-position state during incremental decoding.
#[derive(Clone, Debug)]
pub struct ContextDecoder {
    caches: Vec<KvCache>,
    next: usize,
    batch: usize,
}

impl ContextDecoder {
    /// Number of positions fed so far (including the class token).
    pub fn fed(&self) -> usize {
        self.next
    }
}

/// Cached intra-position state while the sub-tokens of one position are
/// decoded.
#[derive(Clone, Debug)]
pub struct IntraDecoder {
    caches: Vec<KvCache>,
    next: usize,
    batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingOptions {
    /// 0 selects the argmax.
    pub temperature: f64,
    /// Keep only the `k` most likely sub-tokens; clamped to each
    /// sub-vocabulary. `None` keeps all.
    pub top_k: Option<usize>,
    /// `null + guidance * (cond - null)`; 1 disables the null pass.
    pub guidance: f64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            guidance: 2.0,
        }
    }
}

impl SamplingOptions {
    pub fn validate(&self, scheme: &FactorizationScheme) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid("sampling", "temperature must be finite and >= 0"));
        }
        if !self.guidance.is_finite() {
            return Err(Error::invalid("sampling", "guidance scale must be finite"));
        }
        if let Some(k) = self.top_k {
            let largest = (0..scheme.len()).map(|m| scheme.vocab(m)).max().unwrap_or(0);
            if k == 0 || k > largest {
                return Err(Error::OutOfRange {
                    what: "top_k",
                    index: k as u64,
                    bound: largest as u64 + 1,
                });
            }
        }
        Ok(())
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Distribution actually sampled from for `temperature > 0`: logits divided
/// by the temperature, everything outside the top `k` removed, softmax.
pub fn sampling_distribution(logits: &[f64], temperature: f64, top_k: Option<usize>) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("sampling", "temperature must be positive"));
    }
    let k = top_k.unwrap_or(logits.len()).min(logits.len());
    if k == 0 {
        return Err(Error::invalid("sampling", "top_k must be at least 1"));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut scaled = vec![f64::NEG_INFINITY; logits.len()];
    for &i in &order[..k] {
        scaled[i] = logits[i] / temperature;
    }
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

pub fn sample_logits<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    top_k: Option<usize>,
    rng: &mut R,
) -> Result<usize> {
    if temperature == 0.0 {
        return Ok(argmax(logits));
    }
    let p = sampling_distribution(logits, temperature, top_k)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last = i;
            acc += pi;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}
