use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::ar::ArConfig;
use crate::error::{Error, Result};
use crate::factorizer::{BitOrder, FactorizationScheme};
use crate::lfq::LfqConfig;
use crate::tokenizer::TokenizerConfig;

pub const SEED_ENV: &str = "LFQGEN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Tokenizer,
    Ar,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Tokenizer => "tokenizer",
            Stage::Ar => "ar",
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub stage: Stage,
    /// Base learning rate per 256 samples; see [`super::lr_schedule`].
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Decay applied directly to the weights instead of through the gradient.
    pub decoupled_decay: bool,
    pub batch_size: usize,
    pub steps: u64,
    pub warmup: u64,
    /// 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub dataset: String,
    pub checkpoint: String,
    pub tokenizer: TokenizerConfig,
    pub ar: ArConfig,
}

impl RunConfig {
    /// Stage defaults: the tokenizer uses Adam with betas (0.5, 0.9) and no
    /// decay; the generator uses decoupled decay 0.05, betas (0.9, 0.95) and
    /// clipping at 1.
    pub fn defaults(stage: Stage) -> Self {
        let tokenizer = TokenizerConfig {
            image_size: 32,
            channels: vec![32, 64, 128],
            res_blocks: 1,
            groups: 8,
            lfq: LfqConfig::new(8).expect("valid width"),
        };
        let mut ar = ArConfig::desk(10);
        ar.grid_height = tokenizer.grid_size();
        ar.grid_width = tokenizer.grid_size();
        let (beta1, beta2, weight_decay, decoupled_decay) = match stage {
            Stage::Tokenizer => (0.5, 0.9, 0.0, false),
            Stage::Ar => (0.9, 0.95, 0.05, true),
        };
        Self {
            stage,
            lr: 1e-4,
            beta1,
            beta2,
            weight_decay,
            decoupled_decay,
            batch_size: 8,
            steps: 1000,
            warmup: 0,
            grad_clip: 1.0,
            seed: 0,
            dataset: String::new(),
            checkpoint: String::new(),
            tokenizer,
            ar,
        }
    }

    /// Replace the seed with `LFQGEN_SEED` when set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{k} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.grad_clip >= 0.0) {
            return fail(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        self.tokenizer.validate()?;
        self.ar.validate()?;
        if self.ar.scheme.total_bits() != self.tokenizer.lfq.bits {
            return fail(format!(
                "sub-token widths {:?} do not sum to bits = {}",
                self.ar.scheme.bits(),
                self.tokenizer.lfq.bits
            ));
        }
        if self.ar.grid_height != self.tokenizer.grid_size()
            || self.ar.grid_width != self.tokenizer.grid_size()
        {
            return fail("generator grid does not match tokenizer grid".into());
        }
        Ok(())
    }

    /// Flat `key = value` text; [`parse_config`] reads it back unchanged.
    pub fn serialize(&self) -> String {
        let t = &self.tokenizer;
        let a = &self.ar;
        let join = |v: &[String]| v.join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("stage", self.stage.as_str().into());
        kv("lr", fmt_f(self.lr));
        kv("beta1", fmt_f(self.beta1));
        kv("beta2", fmt_f(self.beta2));
        kv("weight_decay", fmt_f(self.weight_decay));
        kv("decoupled_decay", self.decoupled_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("warmup", self.warmup.to_string());
        kv("grad_clip", fmt_f(self.grad_clip));
        kv("seed", self.seed.to_string());
        kv("dataset", self.dataset.clone());
        kv("checkpoint", self.checkpoint.clone());
        kv("image_size", t.image_size.to_string());
        kv("channels", join(&t.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>()));
        kv("res_blocks", t.res_blocks.to_string());
        kv("groups", t.groups.to_string());
        kv("bits", t.lfq.bits.to_string());
        kv("temperature", fmt_f(t.lfq.temperature));
        kv("entropy_weight", fmt_f(t.lfq.entropy_weight));
        kv("commitment_weight", fmt_f(t.lfq.commitment_weight));
        kv("inter_blocks", a.inter_blocks.to_string());
        kv("intra_blocks", a.intra_blocks.to_string());
        kv("width", a.width.to_string());
        kv("heads", a.heads.to_string());
        kv("subtoken_bits", join(&a.scheme.bits().iter().map(|c| c.to_string()).collect::<Vec<_>>()));
        kv("bit_order", a.scheme.order().as_str().into());
        kv("class_count", a.class_count.to_string());
        kv("dropout", fmt_f(a.dropout));
        kv("cond_drop", fmt_f(a.cond_drop));
        kv("ffn_multiplier", fmt_f(a.ffn_multiplier));
        s
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

/// Parse flat `key = value` lines. `#` starts a comment; unknown or repeated
/// keys are errors. `stage` is required and selects the defaults for every
/// key not given.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", lineno + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !seen.insert(k.to_string()) {
            return Err(Error::Config(format!("duplicate key {k:?}")));
        }
        entries.push((k.to_string(), v.to_string()));
    }
    let stage = match entries.iter().find(|(k, _)| k == "stage").map(|(_, v)| v.as_str()) {
        Some("tokenizer") => Stage::Tokenizer,
        Some("ar") => Stage::Ar,
        Some(other) => return Err(Error::Config(format!("unknown stage {other:?}"))),
        None => return Err(Error::Config("missing key \"stage\"".into())),
    };
    let mut c = RunConfig::defaults(stage);
    let mut sub_bits: Option<Vec<u32>> = None;
    let mut order = BitOrder::default();
    for (k, v) in &entries {
        let (k, v) = (k.as_str(), v.as_str());
        match k {
            "stage" => {}
            "lr" => c.lr = parse_num(k, v)?,
            "beta1" => c.beta1 = parse_num(k, v)?,
            "beta2" => c.beta2 = parse_num(k, v)?,
            "weight_decay" => c.weight_decay = parse_num(k, v)?,
            "decoupled_decay" => c.decoupled_decay = parse_num(k, v)?,
            "batch_size" => c.batch_size = parse_num(k, v)?,
            "steps" => c.steps = parse_num(k, v)?,
            "warmup" => c.warmup = parse_num(k, v)?,
            "grad_clip" => c.grad_clip = parse_num(k, v)?,
            "seed" => c.seed = parse_num(k, v)?,
            "dataset" => c.dataset = v.to_string(),
            "checkpoint" => c.checkpoint = v.to_string(),
            "image_size" => c.tokenizer.image_size = parse_num(k, v)?,
            "channels" => c.tokenizer.channels = parse_list(k, v)?,
            "res_blocks" => c.tokenizer.res_blocks = parse_num(k, v)?,
            "groups" => c.tokenizer.groups = parse_num(k, v)?,
            "bits" => c.tokenizer.lfq.bits = parse_num(k, v)?,
            "temperature" => c.tokenizer.lfq.temperature = parse_num(k, v)?,
            "entropy_weight" => c.tokenizer.lfq.entropy_weight = parse_num(k, v)?,
            "commitment_weight" => c.tokenizer.lfq.commitment_weight = parse_num(k, v)?,
            "inter_blocks" => c.ar.inter_blocks = parse_num(k, v)?,
            "intra_blocks" => c.ar.intra_blocks = parse_num(k, v)?,
            "width" => c.ar.width = parse_num(k, v)?,
            "heads" => c.ar.heads = parse_num(k, v)?,
            "subtoken_bits" => sub_bits = Some(parse_list(k, v)?),
            "bit_order" => {
                order = BitOrder::parse(v)
                    .ok_or_else(|| Error::Config(format!("unknown bit_order {v:?}")))?
            }
            "class_count" => c.ar.class_count = parse_num(k, v)?,
            "dropout" => c.ar.dropout = parse_num(k, v)?,
            "cond_drop" => c.ar.cond_drop = parse_num(k, v)?,
            "ffn_multiplier" => c.ar.ffn_multiplier = parse_num(k, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
    }
    let bits = match sub_bits {
        Some(b) => b,
        None => default_split(c.tokenizer.lfq.bits),
    };
    c.ar.scheme = FactorizationScheme::new(bits, order)?;
    if c.tokenizer.channels.is_empty() || c.tokenizer.channels.len() > 8 {
        return Err(Error::Config("channels must list 1..=8 stage widths".into()));
    }
    c.ar.grid_height = c.tokenizer.image_size >> c.tokenizer.channels.len();
    c.ar.grid_width = c.ar.grid_height;
    c.validate()?;
    Ok(c)
}

/// Two sub-tokens, the smaller one taking 3/8 of the bits (8 -> 3+5,
/// 18 -> 6+12).
fn default_split(bits: usize) -> Vec<u32> {
    let bits = bits as u32;
    if bits < 2 {
        return vec![bits.max(1)];
    }
    let small = (3 * bits / 8).max(1);
    vec![small, bits - small]
}
