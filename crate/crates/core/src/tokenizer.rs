//! Convolutional encoder -> lookup-free quantizer -> decoder.
//!
//! The encoder downsamples with stride-2 convolutions; the decoder upsamples
//! with depth-to-space and conditions every residual block on the quantized
//! code map through adaptive group normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lfq::{self, LfqConfig, QuantizedMap, TokenGrid};
use crate::nn::{
    conv2d, depth_to_space, AdaptiveGroupNorm, ConvParams, GroupNorm, Module, Param, ParamSpec,
};
use crate::tensor::{Graph, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub image_size: usize,
    /// Channel width of each resolution stage; one stride-2 stage each.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    pub groups: usize,
    pub lfq: LfqConfig,
}

impl TokenizerConfig {
    /// Three stages (downsample ratio 8), widths 32/64/128, one residual
    /// block per stage.
    pub fn desk(image_size: usize, bits: usize) -> Result<Self> {
        let cfg = Self {
            image_size,
            channels: vec![32, 64, 128],
            res_blocks: 1,
            groups: 8,
            lfq: LfqConfig::new(bits)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn downsample(&self) -> usize {
        1 << self.channels.len()
    }

    /// Side of the latent token grid, `H' = H / p`.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.downsample()
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn validate(&self) -> Result<()> {
        self.lfq.validate()?;
        if self.channels.is_empty() || self.channels.len() > 8 {
            return Err(Error::Config("tokenizer needs 1..=8 stages".into()));
        }
        let p = self.downsample();
        if self.image_size == 0 || self.image_size % p != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by downsample ratio {p}",
                self.image_size
            )));
        }
        if self.groups == 0 {
            return Err(Error::Config("groups must be positive".into()));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % self.groups != 0) {
            return Err(Error::Config(format!(
                "channel width {c} not divisible into {} groups",
                self.groups
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: ConvParams,
    norm2: GroupNorm,
    conv2: ConvParams,
}

impl ResBlock {
    fn new(name: &str, ch: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: GroupNorm::new(&format!("{name}.norm1"), ch, groups),
            conv1: ConvParams::new(&format!("{name}.conv1"), ch, ch, 3, 1, rng),
            norm2: GroupNorm::new(&format!("{name}.norm2"), ch, groups),
            conv2: ConvParams::new(&format!("{name}.conv2"), ch, ch, 3, 1, rng),
        }
    }

    fn specs(name: &str, ch: usize, out: &mut Vec<ParamSpec>) {
        GroupNorm::specs(&format!("{name}.norm1"), ch, out);
        ConvParams::specs(&format!("{name}.conv1"), ch, ch, 3, out);
        GroupNorm::specs(&format!("{name}.norm2"), ch, out);
        ConvParams::specs(&format!("{name}.conv2"), ch, ch, 3, out);
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h)?;
        let h = conv2d(g, h, &self.conv1)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h)?;
        let h = conv2d(g, h, &self.conv2)?;
        g.add(x, h)
    }
}

impl Module for ResBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.norm1.visit(f);
        self.conv1.visit(f);
        self.norm2.visit(f);
        self.conv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.norm2.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

/// Residual block whose normalizations read the quantized code map.
#[derive(Clone, Debug)]
struct CondResBlock {
    norm1: AdaptiveGroupNorm,
    conv1: ConvParams,
    norm2: AdaptiveGroupNorm,
    conv2: ConvParams,
}

impl CondResBlock {
    fn new(name: &str, ch: usize, groups: usize, bits: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: AdaptiveGroupNorm::new(&format!("{name}.norm1"), ch, groups, bits, rng),
            conv1: ConvParams::new(&format!("{name}.conv1"), ch, ch, 3, 1, rng),
            norm2: AdaptiveGroupNorm::new(&format!("{name}.norm2"), ch, groups, bits, rng),
            conv2: ConvParams::new(&format!("{name}.conv2"), ch, ch, 3, 1, rng),
        }
    }

    fn specs(name: &str, ch: usize, bits: usize, out: &mut Vec<ParamSpec>) {
        AdaptiveGroupNorm::specs(&format!("{name}.norm1"), ch, bits, out);
        ConvParams::specs(&format!("{name}.conv1"), ch, ch, 3, out);
        AdaptiveGroupNorm::specs(&format!("{name}.norm2"), ch, bits, out);
        ConvParams::specs(&format!("{name}.conv2"), ch, ch, 3, out);
    }

    fn forward(&self, g: &mut Graph, x: Var, quant: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x, quant)?;
        let h = g.silu(h)?;
        let h = conv2d(g, h, &self.conv1)?;
        let h = self.norm2.forward(g, h, quant)?;
        let h = g.silu(h)?;
        let h = conv2d(g, h, &self.conv2)?;
        g.add(x, h)
    }
}

impl Module for CondResBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.norm1.visit(f);
        self.conv1.visit(f);
        self.norm2.visit(f);
        self.conv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.norm2.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    blocks: Vec<ResBlock>,
    down: ConvParams,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    blocks: Vec<CondResBlock>,
    up: ConvParams,
}

/// Weights of the reconstruction objective's auxiliary terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub entropy: f64,
    pub commitment: f64,
}

impl From<&LfqConfig> for LossWeights {
    fn from(c: &LfqConfig) -> Self {
        Self {
            entropy: c.entropy_weight,
            commitment: c.commitment_weight,
        }
    }
}

/// Graph handles of a tokenizer loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub reconstruction: Var,
    pub entropy: Var,
    pub commitment: Var,
    pub latents: Var,
    pub reconstruction_image: Var,
}

/// Plain values of a tokenizer loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub entropy: f64,
    pub commitment: f64,
}

/// Quantizer replaced by `z + (codes0 - z0)` with `codes0`, `z0` captured at
/// one parameter setting. Its true derivative equals the straight-through
/// gradient, which makes the whole loss checkable by finite differences.
#[derive(Clone, Debug)]
pub struct FrozenQuantizer {
    pub codes: Tensor,
    pub offset: Tensor,
}

#[derive(Clone, Debug)]
pub struct TokenizerModel {
    config: TokenizerConfig,
    enc_in: ConvParams,
    enc_stages: Vec<EncoderStage>,
    enc_norm: GroupNorm,
    enc_out: ConvParams,
    dec_in: ConvParams,
    dec_stages: Vec<DecoderStage>,
    dec_norm: GroupNorm,
    dec_out: ConvParams,
}

impl TokenizerModel {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = &config.channels;
        let last = *ch.last().unwrap();
        let k = config.lfq.bits;
        let groups = config.groups;

        let enc_in = ConvParams::new("enc.in", IMAGE_CHANNELS, ch[0], 3, 1, &mut rng);
        let mut enc_stages = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            let next = ch.get(i + 1).copied().unwrap_or(c);
            let blocks = (0..config.res_blocks)
                .map(|j| ResBlock::new(&format!("enc.s{i}.res{j}"), c, groups, &mut rng))
                .collect();
            let down = ConvParams::new(&format!("enc.s{i}.down"), c, next, 3, 2, &mut rng);
            enc_stages.push(EncoderStage { blocks, down });
        }
        let enc_norm = GroupNorm::new("enc.norm", last, groups);
        let enc_out = ConvParams::new("enc.out", last, k, 1, 1, &mut rng);

        let dec_in = ConvParams::new("dec.in", k, last, 3, 1, &mut rng);
        let mut dec_stages = Vec::new();
        for i in (0..ch.len()).rev() {
            let c = ch[i];
            let prev = if i == 0 { ch[0] } else { ch[i - 1] };
            let blocks = (0..config.res_blocks)
                .map(|j| CondResBlock::new(&format!("dec.s{i}.res{j}"), c, groups, k, &mut rng))
                .collect();
            let up = ConvParams::new(&format!("dec.s{i}.up"), c, prev * 4, 3, 1, &mut rng);
            dec_stages.push(DecoderStage { blocks, up });
        }
        let dec_norm = GroupNorm::new("dec.norm", ch[0], groups);
        let dec_out = ConvParams::new("dec.out", ch[0], IMAGE_CHANNELS, 3, 1, &mut rng);

        Ok(Self {
            config,
            enc_in,
            enc_stages,
            enc_norm,
            enc_out,
            dec_in,
            dec_stages,
            dec_norm,
            dec_out,
        })
    }

    /// Parameter names and shapes in visit order, without allocating.
    pub fn param_specs(config: &TokenizerConfig) -> Result<Vec<ParamSpec>> {
        config.validate()?;
        let ch = &config.channels;
        let last = *ch.last().unwrap();
        let k = config.lfq.bits;
        let mut out = Vec::new();
        ConvParams::specs("enc.in", IMAGE_CHANNELS, ch[0], 3, &mut out);
        for (i, &c) in ch.iter().enumerate() {
            let next = ch.get(i + 1).copied().unwrap_or(c);
            for j in 0..config.res_blocks {
                ResBlock::specs(&format!("enc.s{i}.res{j}"), c, &mut out);
            }
            ConvParams::specs(&format!("enc.s{i}.down"), c, next, 3, &mut out);
        }
        GroupNorm::specs("enc.norm", last, &mut out);
        ConvParams::specs("enc.out", last, k, 1, &mut out);
        ConvParams::specs("dec.in", k, last, 3, &mut out);
        for i in (0..ch.len()).rev() {
            let c = ch[i];
            let prev = if i == 0 { ch[0] } else { ch[i - 1] };
            for j in 0..config.res_blocks {
                CondResBlock::specs(&format!("dec.s{i}.res{j}"), c, k, &mut out);
            }
            ConvParams::specs(&format!("dec.s{i}.up"), c, prev * 4, 3, &mut out);
        }
        GroupNorm::specs("dec.norm", ch[0], &mut out);
        ConvParams::specs("dec.out", ch[0], IMAGE_CHANNELS, 3, &mut out);
        Ok(out)
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn bits(&self) -> usize {
        self.config.lfq.bits
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        match image.shape() {
            [_, c, h, w] if *c == IMAGE_CHANNELS && *h == s && *w == s => Ok(()),
            other => Err(Error::Shape {
                op: "tokenizer input",
                lhs: other.to_vec(),
                rhs: vec![0, IMAGE_CHANNELS, s, s],
            }),
        }
    }

    /// Continuous latents `Z: [B, K, H', W']`.
    pub fn encoder_graph(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let mut h = conv2d(g, image, &self.enc_in)?;
        for stage in &self.enc_stages {
            for b in &stage.blocks {
                h = b.forward(g, h)?;
            }
            h = conv2d(g, h, &stage.down)?;
        }
        h = self.enc_norm.forward(g, h)?;
        h = g.silu(h)?;
        let z = conv2d(g, h, &self.enc_out)?;
        debug_assert_eq!(g.shape(z)[1], self.bits());
        Ok(z)
    }

    /// Image from a `[B, K, H', W']` code map.
    pub fn decoder_graph(&self, g: &mut Graph, codes: Var) -> Result<Var> {
        let mut h = conv2d(g, codes, &self.dec_in)?;
        for stage in &self.dec_stages {
            for b in &stage.blocks {
                h = b.forward(g, h, codes)?;
            }
            h = conv2d(g, h, &stage.up)?;
            h = depth_to_space(g, h, 2)?;
        }
        h = self.dec_norm.forward(g, h)?;
        h = g.silu(h)?;
        conv2d(g, h, &self.dec_out)
    }

    pub fn encode(&self, image: &Tensor) -> Result<(Tensor, QuantizedMap)> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let z = self.encoder_graph(&mut g, x)?;
        g.ensure_finite()?;
        let z = g.value(z).clone();
        let q = lfq::quantize_map(&z)?;
        Ok((z, q))
    }

    pub fn decode(&self, indices: &TokenGrid) -> Result<Tensor> {
        let side = self.config.grid_size();
        if indices.height != side || indices.width != side {
            return Err(Error::invalid(
                "decode",
                format!(
                    "grid {}x{} does not match tokenizer grid {side}x{side}",
                    indices.height, indices.width
                ),
            ));
        }
        indices.check_range(self.bits())?;
        let codes = lfq::codes_from_indices(indices, self.bits())?;
        let mut g = Graph::new();
        let c = g.constant(codes);
        let img = self.decoder_graph(&mut g, c)?;
        g.ensure_finite()?;
        Ok(g.value(img).clone())
    }

    /// Capture the quantizer at the current parameters for gradient checks.
    pub fn freeze_quantizer(&self, image: &Tensor) -> Result<FrozenQuantizer> {
        let (z, q) = self.encode(image)?;
        let offset: Vec<f64> = q
            .codes
            .data()
            .iter()
            .zip(z.data())
            .map(|(c, z)| c - z)
            .collect();
        Ok(FrozenQuantizer {
            offset: Tensor::new(z.shape(), offset)?,
            codes: q.codes,
        })
    }

    /// Records the full objective `recon + w_e * entropy + w_c * commitment`
    /// on `g`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        image: &Tensor,
        weights: LossWeights,
        frozen: Option<&FrozenQuantizer>,
    ) -> Result<LossVars> {
        self.check_image(image)?;
        let x = g.constant(image.clone());
        let z = self.encoder_graph(g, x)?;
        let (quant, codes) = match frozen {
            Some(f) => {
                let off = g.constant(f.offset.clone());
                let q = g.add(z, off)?;
                (q, g.constant(f.codes.clone()))
            }
            None => {
                let q = lfq::straight_through(g, z);
                (q, g.detach(q))
            }
        };
        let recon_img = self.decoder_graph(g, quant)?;
        let diff = g.sub(recon_img, x)?;
        let sq = g.square(diff)?;
        let recon = g.mean_all(sq)?;

        let [b, k, h, w] = g.shape(z)[..] else {
            unreachable!("encoder output is rank 4")
        };
        let flat = g.permute(z, &[0, 2, 3, 1])?;
        let flat = g.reshape(flat, &[b * h * w, k])?;
        let entropy = lfq::entropy_loss(g, flat, self.config.lfq.temperature)?.loss;
        let commitment = lfq::commitment_loss(g, z, codes)?;

        let e = g.scale(entropy, weights.entropy);
        let c = g.scale(commitment, weights.commitment);
        let total = g.add(recon, e)?;
        let total = g.add(total, c)?;
        g.ensure_finite()?;
        Ok(LossVars {
            total,
            reconstruction: recon,
            entropy,
            commitment,
            latents: z,
            reconstruction_image: recon_img,
        })
    }

    pub fn loss(&self, image: &Tensor, weights: LossWeights) -> Result<LossParts> {
        let mut g = Graph::new();
        let v = self.loss_graph(&mut g, image, weights, None)?;
        Ok(LossParts {
            total: g.value(v.total).item(),
            reconstruction: g.value(v.reconstruction).item(),
            entropy: g.value(v.entropy).item(),
            commitment: g.value(v.commitment).item(),
        })
    }
}

impl Module for TokenizerModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.enc_in.visit(f);
        for s in &self.enc_stages {
            for b in &s.blocks {
                b.visit(f);
            }
            s.down.visit(f);
        }
        self.enc_norm.visit(f);
        self.enc_out.visit(f);
        self.dec_in.visit(f);
        for s in &self.dec_stages {
            for b in &s.blocks {
                b.visit(f);
            }
            s.up.visit(f);
        }
        self.dec_norm.visit(f);
        self.dec_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.enc_in.visit_mut(f);
        for s in &mut self.enc_stages {
            for b in &mut s.blocks {
                b.visit_mut(f);
            }
            s.down.visit_mut(f);
        }
        self.enc_norm.visit_mut(f);
        self.enc_out.visit_mut(f);
        self.dec_in.visit_mut(f);
        for s in &mut self.dec_stages {
            for b in &mut s.blocks {
                b.visit_mut(f);
            }
            s.up.visit_mut(f);
        }
        self.dec_norm.visit_mut(f);
        self.dec_out.visit_mut(f);
    }
}
