//! Optimization, data ingestion and persistence for both training stages.

mod checkpoint;
mod config;
mod data;
mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, Record, RecordData, CHECKPOINT_VERSION};
pub use config::{parse_config, RunConfig, Stage, SEED_ENV};
pub use data::{
    batch_indices, epoch_order, load_dataset, pixel_to_unit, stack, unit_to_pixel, Dataset,
    DatasetManifest, ManifestRecord, Raster,
};
pub use optim::{adamw_step, clip_grad_norm, collect_grads, lr_schedule, AdamHyper, Optimizer, ADAM_EPS};

use crate::ar::{ArModel, Sequence, SubTokenGrid};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::{LossWeights, TokenizerModel};

const DROPOUT_SALT: u64 = 0x6472_6f70;

/// What one optimizer step observed.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based number of the update just applied.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub parts: Vec<(&'static str, f64)>,
}

fn hyper(c: &RunConfig) -> AdamHyper {
    AdamHyper {
        beta1: c.beta1,
        beta2: c.beta2,
        weight_decay: c.weight_decay,
        decoupled: c.decoupled_decay,
    }
}

fn apply_update<M: Module>(
    c: &RunConfig,
    g: &Graph,
    model: &mut M,
    optim: &mut Optimizer,
) -> Result<(u64, f64, f64)> {
    let mut grads = collect_grads(g, model);
    let norm = if c.grad_clip > 0.0 {
        clip_grad_norm(&mut grads, c.grad_clip)
    } else {
        clip_grad_norm(&mut grads, f64::INFINITY)
    };
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm"));
    }
    let t = optim.step + 1;
    let lr = lr_schedule(t, c.warmup, c.lr, c.batch_size);
    optim.update(model, &grads, lr)?;
    Ok((t, lr, norm))
}

fn check_stage(c: &RunConfig, want: Stage) -> Result<()> {
    if c.stage != want {
        return Err(Error::Config(format!(
            "config is for stage {}, expected {}",
            c.stage.as_str(),
            want.as_str()
        )));
    }
    Ok(())
}

fn restore<M: Module>(ck: &Checkpoint, model: &mut M, optim: &mut Optimizer) -> Result<()> {
    ck.restore_model(model)?;
    if ck.has_optimizer() {
        ck.restore_optimizer(optim)?;
    }
    Ok(())
}

/// Reconstruction training of the tokenizer.
#[derive(Clone, Debug)]
pub struct TokenizerTrainer {
    pub config: RunConfig,
    pub model: TokenizerModel,
    pub optim: Optimizer,
}

impl TokenizerTrainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        check_stage(&config, Stage::Tokenizer)?;
        let model = TokenizerModel::new(config.tokenizer.clone(), config.seed)?;
        let optim = Optimizer::new(&model, hyper(&config));
        Ok(Self {
            config,
            model,
            optim,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(parse_config(&ck.config)?)?;
        restore(ck, &mut t.model, &mut t.optim)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config.serialize(), &self.model, Some(&self.optim))
    }

    pub fn step(&mut self, data: &Dataset) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::invalid("train", "dataset is empty"));
        }
        let c = &self.config;
        let idx = batch_indices(data.len(), c.batch_size, c.seed, self.optim.step);
        let images = data.batch(&idx)?;
        let mut g = Graph::new();
        let weights = LossWeights::from(&c.tokenizer.lfq);
        let v = self.model.loss_graph(&mut g, &images, weights, None)?;
        g.backward(v.total)?;
        let (step, lr, grad_norm) = apply_update(c, &g, &mut self.model, &mut self.optim)?;
        Ok(StepLog {
            step,
            lr,
            loss: g.value(v.total).item(),
            grad_norm,
            parts: vec![
                ("reconstruction", g.value(v.reconstruction).item()),
                ("entropy", g.value(v.entropy).item()),
                ("commitment", g.value(v.commitment).item()),
            ],
        })
    }

    /// Train until `config.steps` updates have been applied in total.
    pub fn run(&mut self, data: &Dataset, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while self.optim.step < self.config.steps {
            let log = self.step(data)?;
            on_step(&log);
        }
        Ok(())
    }
}

/// Token grids of every image, factorized for the generator.
pub fn encode_dataset(
    tokenizer: &TokenizerModel,
    data: &Dataset,
    scheme: &crate::factorizer::FactorizationScheme,
) -> Result<Vec<Sequence>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(16) {
        let images = data.batch(chunk)?;
        let (_, q) = tokenizer.encode(&images)?;
        for (j, &i) in chunk.iter().enumerate() {
            out.push(Sequence {
                class: Some(data.classes[i]),
                grid: SubTokenGrid::from_indices(scheme, q.indices.sample(j))?,
            });
        }
    }
    Ok(out)
}

/// Next sub-token training of the generator.
#[derive(Clone, Debug)]
pub struct ArTrainer {
    pub config: RunConfig,
    pub model: ArModel,
    pub optim: Optimizer,
}

impl ArTrainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        check_stage(&config, Stage::Ar)?;
        let model = ArModel::new(config.ar.clone(), config.seed)?;
        let optim = Optimizer::new(&model, hyper(&config));
        Ok(Self {
            config,
            model,
            optim,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(parse_config(&ck.config)?)?;
        restore(ck, &mut t.model, &mut t.optim)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config.serialize(), &self.model, Some(&self.optim))
    }

    pub fn step(&mut self, data: &[Sequence]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::invalid("train", "no training sequences"));
        }
        let c = &self.config;
        let idx = batch_indices(data.len(), c.batch_size, c.seed, self.optim.step);
        let batch: Vec<Sequence> = idx.iter().map(|&i| data[i].clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ DROPOUT_SALT);
        rng.set_stream(self.optim.step);
        let mut g = Graph::new();
        let loss = self.model.train_loss(&mut g, &batch, Some(&mut rng))?;
        g.backward(loss)?;
        let (step, lr, grad_norm) = apply_update(c, &g, &mut self.model, &mut self.optim)?;
        Ok(StepLog {
            step,
            lr,
            loss: g.value(loss).item(),
            grad_norm,
            parts: Vec::new(),
        })
    }

    pub fn run(&mut self, data: &[Sequence], mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while self.optim.step < self.config.steps {
            let log = self.step(data)?;
            on_step(&log);
        }
        Ok(())
    }
}

/// Rebuild a trained tokenizer from a checkpoint.
pub fn load_tokenizer(ck: &Checkpoint) -> Result<TokenizerModel> {
    let c = parse_config(&ck.config)?;
    let mut m = TokenizerModel::new(c.tokenizer, c.seed)?;
    ck.restore_model(&mut m)?;
    Ok(m)
}

/// Rebuild a trained generator from a checkpoint.
pub fn load_generator(ck: &Checkpoint) -> Result<ArModel> {
    let c = parse_config(&ck.config)?;
    let mut m = ArModel::new(c.ar, c.seed)?;
    ck.restore_model(&mut m)?;
    Ok(m)
}

/// Images `[B, 3, H, W]` as rasters.
pub fn tensor_to_rasters(images: &Tensor) -> Result<Vec<Raster>> {
    let [b, c, h, w] = images.shape()[..] else {
        return Err(Error::invalid("rasters", format!("expects [B,C,H,W], got {:?}", images.shape())));
    };
    let per = c * h * w;
    (0..b)
        .map(|i| {
            let t = Tensor::new(&[c, h, w], images.data()[i * per..(i + 1) * per].to_vec())?;
            Raster::from_tensor(&t)
        })
        .collect()
}
