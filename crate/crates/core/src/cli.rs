//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ar::SamplingOptions;
use crate::error::{Error, Result};
use crate::eval::{
    fingerprint, frechet_gaussian, mse, psnr_from_mse, usage_report, FeatureNet, FeatureSummary,
    MetricReport, TokenFile, UNIT_PEAK,
};
use crate::lfq::TokenGrid;
use crate::nn::Module;
use crate::tensor::Tensor;
use crate::tokenizer::TokenizerModel;
use crate::train::{
    encode_dataset, load_dataset, load_generator, load_tokenizer, parse_config, stack,
    tensor_to_rasters, ArTrainer, Checkpoint, Dataset, Raster, RunConfig, Stage, StepLog,
    TokenizerTrainer,
};

pub const EXIT_USAGE: i32 = 2;
const FEATURE_DIM: usize = 16;
const FEATURE_SEED: u64 = 0x4645_4154;
const CODEC_BATCH: usize = 16;

#[derive(Parser, Debug)]
#[command(name = "lfqgen", version, about = "Lookup-free image tokenizer and factorized autoregressive generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the image tokenizer.
    TrainTokenizer {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the configured checkpoint if it exists.
        #[arg(long)]
        resume: bool,
        /// Print a progress line every N steps.
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Train the generator on token grids produced by a trained tokenizer.
    TrainAr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Tokenize a directory of raster images.
    Encode {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct images from a token file.
    Decode {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample class-conditional images.
    Generate {
        #[arg(long)]
        ar: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value_t = 2.0)]
        guidance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction metrics and codebook usage over a dataset.
    Eval {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Process exit code for an error category.
pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        "io" => 3,
        "format" => 4,
        "config" => 5,
        "numeric" => 6,
        _ => 7,
    }
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainTokenizer {
            config,
            resume,
            log_every,
        } => train_tokenizer(&config, resume, log_every),
        Command::TrainAr {
            config,
            tokenizer,
            resume,
            log_every,
        } => train_ar(&config, &tokenizer, resume, log_every),
        Command::Encode {
            tokenizer,
            input,
            out,
        } => encode(&tokenizer, &input, &out),
        Command::Decode {
            tokenizer,
            input,
            out,
        } => decode(&tokenizer, &input, &out),
        Command::Generate {
            ar,
            tokenizer,
            class,
            n,
            seed,
            temperature,
            top_k,
            guidance,
            out,
        } => generate(
            &ar,
            &tokenizer,
            class,
            n,
            seed,
            SamplingOptions {
                temperature,
                top_k,
                guidance,
            },
            &out,
        ),
        Command::Eval {
            tokenizer,
            data,
            out,
        } => eval(&tokenizer, &data, out.as_deref()),
    }
}

/// Read a run config; relative dataset and checkpoint paths resolve against
/// the config file's directory.
fn read_config(path: &Path, stage: Stage) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut c = parse_config(&text)?.with_env_overrides()?;
    if c.stage != stage {
        return Err(Error::Config(format!(
            "{} is a {} config",
            path.display(),
            c.stage.as_str()
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut c.dataset, &mut c.checkpoint] {
        if p.is_empty() {
            return Err(Error::Config("dataset and checkpoint paths are required".into()));
        }
        if Path::new(p.as_str()).is_relative() {
            *p = base.join(p.as_str()).to_string_lossy().into_owned();
        }
    }
    Ok(c)
}

fn progress(every: u64) -> impl FnMut(&StepLog) {
    move |log: &StepLog| {
        if every > 0 && (log.step % every == 0 || log.step == 1) {
            let parts: String = log.parts.iter().map(|(k, v)| format!(" {k}={v:.5}")).collect();
            eprintln!(
                "step {} lr={:.3e} loss={:.5} grad_norm={:.4}{parts}",
                log.step, log.lr, log.loss, log.grad_norm
            );
        }
    }
}

fn train_tokenizer(config: &Path, resume: bool, log_every: u64) -> Result<()> {
    let c = read_config(config, Stage::Tokenizer)?;
    let data = load_dataset(Path::new(&c.dataset), c.tokenizer.image_size)?;
    let ckpt = PathBuf::from(&c.checkpoint);
    let mut trainer = if resume && ckpt.exists() {
        let mut t = TokenizerTrainer::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
        t.config.steps = c.steps;
        t
    } else {
        TokenizerTrainer::new(c)?
    };
    eprintln!(
        "tokenizer: {} parameters, {} images",
        trainer.model.param_count(),
        data.len()
    );
    trainer.run(&data, progress(log_every))?;
    trainer.checkpoint().save(&ckpt)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn train_ar(config: &Path, tokenizer: &Path, resume: bool, log_every: u64) -> Result<()> {
    let c = read_config(config, Stage::Ar)?;
    let tok = load_tokenizer(&Checkpoint::load(tokenizer)?)?;
    if tok.config() != &c.tokenizer {
        return Err(Error::Config(format!(
            "tokenizer settings in {} differ from the checkpoint {}",
            config.display(),
            tokenizer.display()
        )));
    }
    let data = load_dataset(Path::new(&c.dataset), c.tokenizer.image_size)?;
    let seqs = encode_dataset(&tok, &data, &c.ar.scheme)?;
    let ckpt = PathBuf::from(&c.checkpoint);
    let mut trainer = if resume && ckpt.exists() {
        let mut t = ArTrainer::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
        t.config.steps = c.steps;
        t
    } else {
        ArTrainer::new(c)?
    };
    eprintln!(
        "generator: {} parameters, {} sequences",
        trainer.model.param_count(),
        seqs.len()
    );
    trainer.run(&seqs, progress(log_every))?;
    trainer.checkpoint().save(&ckpt)?;
    println!("{}", ckpt.display());
    Ok(())
}

/// All `.lfqi` files of a directory in name order.
fn read_raster_dir(dir: &Path) -> Result<Vec<Raster>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lfqi"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Raster::read(p)).collect()
}

fn write_raster_dir(dir: &Path, images: &[Raster]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, r) in images.iter().enumerate() {
        r.write(&dir.join(format!("img_{i:05}.lfqi")))?;
    }
    Ok(())
}

fn decode_grid(tok: &TokenizerModel, grid: &TokenGrid) -> Result<Vec<Raster>> {
    let mut out = Vec::with_capacity(grid.batch);
    let per = grid.positions();
    for start in (0..grid.batch).step_by(CODEC_BATCH) {
        let n = CODEC_BATCH.min(grid.batch - start);
        let part = TokenGrid::new(
            n,
            grid.height,
            grid.width,
            grid.indices[start * per..(start + n) * per].to_vec(),
        )?;
        out.extend(tensor_to_rasters(&tok.decode(&part)?)?);
    }
    Ok(out)
}

/// Encode images in chunks; returns the token grid and the reconstructions.
fn round_trip(tok: &TokenizerModel, images: &[Tensor]) -> Result<(TokenGrid, Vec<Tensor>)> {
    let side = tok.config().grid_size();
    let mut indices = Vec::new();
    let mut recon = Vec::with_capacity(images.len());
    for chunk in images.chunks(CODEC_BATCH) {
        let batch = stack(chunk)?;
        let (_, q) = tok.encode(&batch)?;
        let r = tok.decode(&q.indices)?;
        let per: usize = r.shape()[1..].iter().product();
        for i in 0..chunk.len() {
            recon.push(Tensor::new(&r.shape()[1..], r.data()[i * per..(i + 1) * per].to_vec())?);
        }
        indices.extend(q.indices.indices);
    }
    Ok((TokenGrid::new(images.len(), side, side, indices)?, recon))
}

fn reconstruction_metrics(
    report: &mut MetricReport,
    originals: &[Tensor],
    recon: &[Tensor],
) -> Result<()> {
    let a = stack(originals)?;
    let b = stack(recon)?;
    let m = mse(&a, &b)?;
    let p = psnr_from_mse(m, UNIT_PEAK);
    report.set("mse", m);
    report.set("psnr", p.db);
    report.set("psnr.exact", if p.exact { 1.0 } else { 0.0 });
    Ok(())
}

fn encode(tokenizer: &Path, input: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(tokenizer)?;
    let tok = load_tokenizer(&ck)?;
    let size = tok.config().image_size;
    let rasters = read_raster_dir(input)?;
    if rasters.is_empty() {
        return Err(Error::invalid("encode", format!("no .lfqi images in {}", input.display())));
    }
    let mut images = Vec::with_capacity(rasters.len());
    for r in &rasters {
        if r.width != size || r.height != size || r.channels != 3 {
            return Err(Error::invalid(
                "encode",
                format!("image {}x{}x{} does not match tokenizer size {size}", r.width, r.height, r.channels),
            ));
        }
        images.push(r.to_tensor());
    }
    let (grid, recon) = round_trip(&tok, &images)?;
    TokenFile {
        bits: tok.bits(),
        grid,
    }
    .write(out)?;
    let mut report = MetricReport::new(fingerprint(&ck.config));
    report.samples = images.len() as u64;
    reconstruction_metrics(&mut report, &images, &recon)?;
    print!("{}", report.to_text());
    Ok(())
}

fn decode(tokenizer: &Path, input: &Path, out: &Path) -> Result<()> {
    let tok = load_tokenizer(&Checkpoint::load(tokenizer)?)?;
    let tf = TokenFile::read(input)?;
    if tf.bits != tok.bits() {
        return Err(Error::invalid(
            "decode",
            format!("token file uses {} bits, tokenizer {}", tf.bits, tok.bits()),
        ));
    }
    let images = decode_grid(&tok, &tf.grid)?;
    write_raster_dir(out, &images)?;
    println!("{} images", images.len());
    Ok(())
}

fn generate(
    ar: &Path,
    tokenizer: &Path,
    class: usize,
    n: usize,
    seed: u64,
    opts: SamplingOptions,
    out: &Path,
) -> Result<()> {
    let model = load_generator(&Checkpoint::load(ar)?)?;
    let tok = load_tokenizer(&Checkpoint::load(tokenizer)?)?;
    let side = tok.config().grid_size();
    let cfg = model.config();
    if cfg.scheme.total_bits() != tok.bits() || cfg.grid_height != side || cfg.grid_width != side {
        return Err(Error::Config("generator and tokenizer checkpoints do not match".into()));
    }
    if n == 0 {
        return Err(Error::invalid("generate", "--n must be at least 1"));
    }
    let grid = model.generate_batch(&vec![Some(class); n], &opts, seed)?;
    let images = decode_grid(&tok, &grid)?;
    write_raster_dir(out, &images)?;
    println!("{} images", images.len());
    Ok(())
}

fn eval(tokenizer: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(tokenizer)?;
    let tok = load_tokenizer(&ck)?;
    let ds: Dataset = load_dataset(data, tok.config().image_size)?;
    if ds.is_empty() {
        return Err(Error::invalid("eval", "dataset is empty"));
    }
    let (grid, recon) = round_trip(&tok, &ds.images)?;
    let mut report = usage_report(&[grid], tok.bits())?.metrics(&fingerprint(&ck.config));
    report.samples = ds.len() as u64;
    reconstruction_metrics(&mut report, &ds.images, &recon)?;
    let net = FeatureNet::new(3, FEATURE_DIM, FEATURE_SEED);
    let real = FeatureSummary::from_features(&net.features(&stack(&ds.images)?)?)?;
    let fake = FeatureSummary::from_features(&net.features(&stack(&recon)?)?)?;
    report.set("frechet", frechet_gaussian(&real, &fake)?);
    let text = report.to_text();
    if let Some(p) = out {
        crate::binio::write_atomic(p, text.as_bytes())?;
    }
    let _ = std::io::stdout().write_all(text.as_bytes());
    Ok(())
}
