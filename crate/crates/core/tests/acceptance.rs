//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::{BTreeMap, HashSet};

use common::{rng, textures, Timer};
use lfqgen::ar::{ArConfig, ArModel, SamplingOptions, Sequence, SubTokenGrid, DEFAULT_FFN_MULTIPLIER};
use lfqgen::factorizer::{embed_subtokens, FactorizationScheme};
use lfqgen::lfq::{code_to_index, commitment_loss, entropy_loss, index_to_code, soft_assignment, LfqConfig};
use lfqgen::nn::{
    apply_rotary, causal_self_attention, depth_to_space, dropout, gated_ffn, space_to_depth, AdaptiveGroupNorm,
    AttentionParams, ConvParams, FfnParams, GroupNorm, Linear, Module, RmsNorm,
};
use lfqgen::tensor::{Graph, Tensor, Var};
use lfqgen::tokenizer::{LossWeights, TokenizerConfig, TokenizerModel};
use lfqgen::train::{
    encode_dataset, parse_config, stack, ArTrainer, Checkpoint, Dataset, RunConfig, TokenizerTrainer,
};
use lfqgen::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 codec exactness", codec_exactness),
        ("2 factorization bijection", factorization_bijection),
        ("3 gradient soundness", gradient_soundness),
        ("4 entropy-loss anchors", entropy_anchors),
        ("5 likelihood normalization", likelihood_normalization),
        ("6 causality", causality),
        ("7 sampler fidelity", sampler_fidelity),
        ("8 codebook utilization", codebook_utilization),
        ("9 end-to-end overfit", end_to_end_overfit),
        ("10 persistence", persistence),
        ("11 preset-shape smoke test", preset_shapes),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Timer::start();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("[{verdict}] criterion {name}: {} ({:.1}s)", o.detail, t.secs());
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn codec_exactness() -> Outcome {
    let t = Timer::start();
    let k = 10;
    let mut mismatches = 0;
    for i in 0..(1u32 << k) {
        let code = index_to_code(i, k).unwrap();
        let ok = code.len() == k
            && code.iter().all(|&c| c == 1.0 || c == -1.0)
            && code_to_index(&code).unwrap() == i;
        if !ok {
            mismatches += 1;
        }
    }
    let secs = t.secs();
    outcome(
        mismatches == 0 && secs < 1.0,
        format!("K=10, {mismatches} mismatches over 1024 indices in {secs:.4}s (limit 1s)"),
    )
}

fn factorization_bijection() -> Outcome {
    let t = Timer::start();
    let scheme = FactorizationScheme::low_first(&[3, 5]).unwrap();
    let mut seen = HashSet::new();
    let mut errors = 0;
    for i in 0..256u32 {
        let parts = scheme.factorize(i).unwrap();
        let in_range = parts.len() == 2 && parts[0] < 8 && parts[1] < 32;
        if !in_range || scheme.defactorize(&parts).unwrap() != i || !seen.insert(parts) {
            errors += 1;
        }
    }
    let secs = t.secs();
    outcome(
        errors == 0 && seen.len() == 256 && secs < 1.0,
        format!("K=8, k=(3,5): {errors} collisions or mismatches, {} distinct pairs in {secs:.4}s (limit 1s)", seen.len()),
    )
}

// ---------------------------------------------------------------------------
// Gradient soundness

const OP_TOL: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;
const STEP: f64 = 1e-3;

/// Fourth-order central difference of a scalar function of one coordinate.
fn central_diff(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-12)
}

/// Worst relative error over every component of every input and every
/// parameter of `module` for the scalar `f`.
fn grad_check<M, F>(module: &M, inputs: &[Tensor], f: F) -> f64
where
    M: Module + Clone,
    F: Fn(&mut Graph, &M, &[Var]) -> Result<Var>,
{
    let value = |m: &M, xs: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, m, &vs).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, module, &vs).unwrap();
    g.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vs.iter().enumerate() {
        let grad = g.grad_or_zeros(*v);
        for j in 0..grad.numel() {
            let numeric = central_diff(
                |d| {
                    let mut xs = inputs.to_vec();
                    xs[i].data_mut()[j] += d;
                    value(module, &xs)
                },
                STEP,
            );
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
    }
    let mut names = Vec::new();
    module.visit(&mut |p| names.push((p.name.clone(), p.value.numel())));
    for (name, n) in names {
        let grad = g.param_grad(&name).unwrap_or_else(|| Tensor::zeros(&[n]));
        for j in 0..n {
            let numeric = central_diff(
                |d| {
                    let mut m = module.clone();
                    m.visit_mut(&mut |p| {
                        if p.name == name {
                            p.value.data_mut()[j] += d;
                        }
                    });
                    value(&m, inputs)
                },
                STEP,
            );
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
    }
    worst
}

/// Same as [`grad_check`] for a loss of model parameters only, on `probes`
/// randomly chosen coordinates.
fn sampled_param_check<M, F>(model: &M, probes: usize, rng: &mut ChaCha8Rng, f: F) -> f64
where
    M: Module + Clone,
    F: Fn(&mut Graph, &M) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, model).unwrap();
    g.backward(out).unwrap();
    let mut coords = Vec::new();
    model.visit(&mut |p| {
        let grad = g.param_grad(&p.name).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for j in 0..p.value.numel() {
            coords.push((p.name.clone(), j, grad.data()[j]));
        }
    });
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let (name, j, analytic) = &coords[rng.random_range(0..coords.len())];
        let numeric = central_diff(
            |d| {
                let mut m = model.clone();
                m.visit_mut(&mut |p| {
                    if &p.name == name {
                        p.value.data_mut()[*j] += d;
                    }
                });
                let mut g = Graph::new();
                let out = f(&mut g, &m).unwrap();
                g.value(out).item()
            },
            STEP,
        );
        worst = worst.max(rel_err(*analytic, numeric));
    }
    worst
}

/// Replace every parameter with Gaussian noise so that no gradient is
/// trivially structured by the initializer.
fn randomize<M: Module>(m: &mut M, rng: &mut ChaCha8Rng) {
    m.visit_mut(&mut |p| p.value = Tensor::randn(p.value.shape(), 0.5, rng));
}

fn weighted_sum(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var> {
    let mut r = rng(rng_seed);
    let w = Tensor::rand_uniform(g.shape(y), 0.5, 1.5, &mut r);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

#[derive(Clone)]
struct NoParams;

impl Module for NoParams {
    fn visit<'a>(&'a self, _: &mut dyn FnMut(&'a lfqgen::nn::Param)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut lfqgen::nn::Param)) {}
}

type OpCheck = fn(u64) -> f64;

fn op(seed: u64, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    grad_check(&NoParams, &inputs, |g, _, v| {
        let y = f(g, v)?;
        weighted_sum(g, y, seed ^ 0x5eed)
    })
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, 0.5, 2.0, r)
}

fn primitive_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("add (broadcast)", |s| {
            let mut r = rng(s);
            op(s, vec![randn(&[2, 3], &mut r), randn(&[3], &mut r)], |g, v| g.add(v[0], v[1]))
        }),
        ("sub (broadcast)", |s| {
            let mut r = rng(s);
            op(s, vec![randn(&[2, 1, 3], &mut r), randn(&[4, 1], &mut r)], |g, v| g.sub(v[0], v[1]))
        }),
        ("mul (broadcast)", |s| {
            let mut r = rng(s);
            op(s, vec![randn(&[2, 3], &mut r), randn(&[2, 1], &mut r)], |g, v| g.mul(v[0], v[1]))
        }),
        ("div", |s| {
            let mut r = rng(s);
            op(s, vec![randn(&[2, 3], &mut r), positive(&[3], &mut r)], |g, v| g.div(v[0], v[1]))
        }),
        ("exp", |s| op(s, vec![randn(&[5], &mut rng(s))], |g, v| Ok(g.exp(v[0])))),
        ("log", |s| op(s, vec![positive(&[5], &mut rng(s))], |g, v| Ok(g.log(v[0])))),
        ("tanh", |s| op(s, vec![randn(&[5], &mut rng(s))], |g, v| Ok(g.tanh(v[0])))),
        ("sigmoid", |s| op(s, vec![randn(&[5], &mut rng(s))], |g, v| Ok(g.sigmoid(v[0])))),
        ("softplus", |s| op(s, vec![randn(&[5], &mut rng(s))], |g, v| Ok(g.softplus(v[0])))),
        ("powf", |s| op(s, vec![positive(&[5], &mut rng(s))], |g, v| Ok(g.powf(v[0], -0.5)))),
        ("square", |s| op(s, vec![randn(&[5], &mut rng(s))], |g, v| g.square(v[0]))),
        ("silu", |s| op(s, vec![randn(&[5], &mut rng(s))], |g, v| g.silu(v[0]))),
        ("sum", |s| op(s, vec![randn(&[2, 3, 4], &mut rng(s))], |g, v| g.sum(v[0], &[0, 2], true))),
        ("mean", |s| op(s, vec![randn(&[2, 3, 4], &mut rng(s))], |g, v| g.mean(v[0], &[1], false))),
        ("broadcast_to", |s| op(s, vec![randn(&[3, 1], &mut rng(s))], |g, v| g.broadcast_to(v[0], &[2, 3, 4]))),
        ("permute", |s| op(s, vec![randn(&[2, 3, 4], &mut rng(s))], |g, v| g.permute(v[0], &[2, 0, 1]))),
        ("concat", |s| {
            let mut r = rng(s);
            op(s, vec![randn(&[2, 3], &mut r), randn(&[2, 2], &mut r)], |g, v| g.concat(&[v[0], v[1]], 1))
        }),
        ("slice", |s| op(s, vec![randn(&[4, 3], &mut rng(s))], |g, v| g.slice(v[0], 0, 1, 2))),
        ("matmul", |s| {
            let mut r = rng(s);
            op(s, vec![randn(&[2, 3, 4], &mut r), randn(&[2, 4, 2], &mut r)], |g, v| g.matmul(v[0], v[1]))
        }),
        ("gather", |s| op(s, vec![randn(&[4, 3], &mut rng(s))], |g, v| g.gather(v[0], &[3, 0, 3, 2]))),
        ("softmax", |s| op(s, vec![randn(&[2, 5], &mut rng(s))], |g, v| g.softmax(v[0]))),
        ("log_softmax", |s| op(s, vec![randn(&[2, 5], &mut rng(s))], |g, v| g.log_softmax(v[0]))),
        ("masked softmax", |s| {
            op(s, vec![randn(&[2, 3, 3], &mut rng(s))], |g, v| {
                let m = g.causal_mask(v[0])?;
                g.softmax(m)
            })
        }),
        ("conv2d", |s| {
            let mut r = rng(s);
            let ins = vec![randn(&[1, 2, 5, 5], &mut r), randn(&[3, 2, 3, 3], &mut r), randn(&[3], &mut r)];
            op(s, ins, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2))
        }),
    ]
}

fn block_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("linear", |s| {
            let mut r = rng(s);
            let mut m = Linear::new("l", 4, 3, true, &mut r);
            randomize(&mut m, &mut r);
            let x = randn(&[2, 4], &mut r);
            grad_check(&m, &[x], |g, m, v| {
                let y = m.forward(g, v[0])?;
                weighted_sum(g, y, s)
            })
        }),
        ("conv block", |s| {
            let mut r = rng(s);
            let mut m = ConvParams::new("c", 2, 3, 3, 1, &mut r);
            randomize(&mut m, &mut r);
            let x = randn(&[1, 2, 4, 4], &mut r);
            grad_check(&m, &[x], |g, m, v| {
                let y = lfqgen::nn::conv2d(g, v[0], m)?;
                weighted_sum(g, y, s)
            })
        }),
        ("strided conv block", |s| {
            let mut r = rng(s);
            let mut m = ConvParams::new("c", 2, 2, 3, 2, &mut r);
            randomize(&mut m, &mut r);
            let x = randn(&[1, 2, 4, 4], &mut r);
            grad_check(&m, &[x], |g, m, v| {
                let y = lfqgen::nn::conv2d(g, v[0], m)?;
                weighted_sum(g, y, s)
            })
        }),
        ("depth_to_space", |s| {
            op(s, vec![randn(&[1, 8, 2, 3], &mut rng(s))], |g, v| depth_to_space(g, v[0], 2))
        }),
        ("space_to_depth", |s| {
            op(s, vec![randn(&[1, 2, 4, 2], &mut rng(s))], |g, v| space_to_depth(g, v[0], 2))
        }),
        ("group_norm", |s| {
            let mut r = rng(s);
            let mut m = GroupNorm::new("n", 4, 2);
            randomize(&mut m, &mut r);
            let x = randn(&[2, 4, 3, 3], &mut r);
            grad_check(&m, &[x], |g, m, v| {
                let y = m.forward(g, v[0])?;
                weighted_sum(g, y, s)
            })
        }),
        ("adaptive_group_norm", |s| {
            let mut r = rng(s);
            let mut m = AdaptiveGroupNorm::new("a", 4, 2, 3, &mut r);
            randomize(&mut m, &mut r);
            let x = randn(&[2, 4, 2, 2], &mut r);
            let q = randn(&[2, 3, 1, 1], &mut r);
            grad_check(&m, &[x, q], |g, m, v| {
                let y = m.forward(g, v[0], v[1])?;
                weighted_sum(g, y, s)
            })
        }),
        ("rms_norm", |s| {
            let mut r = rng(s);
            let mut m = RmsNorm::new("n", 5);
            randomize(&mut m, &mut r);
            let x = randn(&[3, 5], &mut r);
            grad_check(&m, &[x], |g, m, v| {
                let y = m.forward(g, v[0])?;
                weighted_sum(g, y, s)
            })
        }),
        ("rotary", |s| {
            op(s, vec![randn(&[1, 2, 3, 4], &mut rng(s))], |g, v| apply_rotary(g, v[0], &[0, 5, 2]))
        }),
        ("causal attention", |s| {
            let mut r = rng(s);
            let mut m = AttentionParams::new("a", 4, 2, &mut r).unwrap();
            randomize(&mut m, &mut r);
            let x = randn(&[2, 3, 4], &mut r);
            grad_check(&m, &[x], |g, m, v| {
                let y = causal_self_attention(g, v[0], m, Some(&[0, 1, 2]))?;
                weighted_sum(g, y, s)
            })
        }),
        ("gated ffn", |s| {
            let mut r = rng(s);
            let mut m = FfnParams::new("f", 4, DEFAULT_FFN_MULTIPLIER, &mut r);
            randomize(&mut m, &mut r);
            let x = randn(&[2, 4], &mut r);
            grad_check(&m, &[x], |g, m, v| {
                let y = gated_ffn(g, v[0], m)?;
                weighted_sum(g, y, s)
            })
        }),
        ("dropout", |s| {
            op(s, vec![randn(&[4, 4], &mut rng(s))], move |g, v| {
                dropout(g, v[0], 0.3, Some(&mut rng(s ^ 0xd)))
            })
        }),
        ("sub-token embedding", |s| {
            let mut r = rng(s);
            let tables = vec![randn(&[2, 3], &mut r), randn(&[4, 3], &mut r)];
            op(s, tables, |g, v| embed_subtokens(g, v, &[vec![1, 3], vec![0, 3], vec![1, 0]]))
        }),
        ("soft assignment", |s| {
            op(s, vec![randn(&[3, 4], &mut rng(s))], |g, v| soft_assignment(g, v[0], 0.7))
        }),
        ("entropy_loss", |s| {
            op(s, vec![randn(&[6, 4], &mut rng(s))], |g, v| Ok(entropy_loss(g, v[0], 1.0)?.loss))
        }),
        ("commitment_loss", |s| {
            let mut r = rng(s);
            let codes = lfqgen::lfq::quantize_sign(&randn(&[6, 4], &mut r));
            op(s, vec![randn(&[6, 4], &mut r)], move |g, v| {
                let c = g.constant(codes.clone());
                commitment_loss(g, v[0], c)
            })
        }),
    ]
}

fn tokenizer_loss_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut lfq = LfqConfig::new(4).unwrap();
    lfq.temperature = 1.0;
    let cfg = TokenizerConfig {
        image_size: 8,
        channels: vec![4, 4],
        res_blocks: 1,
        groups: 2,
        lfq,
    };
    let model = TokenizerModel::new(cfg, seed).unwrap();
    let img = Tensor::rand_uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let frozen = model.freeze_quantizer(&img).unwrap();
    let w = LossWeights {
        entropy: 0.1,
        commitment: 0.25,
    };
    sampled_param_check(&model, 24, &mut r, |g, m| {
        Ok(m.loss_graph(g, &img, w, Some(&frozen))?.total)
    })
}

fn tiny_ar(bits: &[u32], grid: (usize, usize), seed: u64) -> ArModel {
    let cfg = ArConfig {
        inter_blocks: 2,
        intra_blocks: 1,
        width: 8,
        heads: 2,
        scheme: FactorizationScheme::low_first(bits).unwrap(),
        class_count: 3,
        grid_height: grid.0,
        grid_width: grid.1,
        dropout: 0.1,
        cond_drop: 0.1,
        ffn_multiplier: DEFAULT_FFN_MULTIPLIER,
    };
    ArModel::new(cfg, seed).unwrap()
}

fn random_sequence(m: &ArModel, class: Option<usize>, r: &mut ChaCha8Rng) -> Sequence {
    let c = m.config();
    let positions = (0..c.seq_len())
        .map(|_| (0..c.scheme.len()).map(|j| r.random_range(0..c.scheme.vocab(j) as u32)).collect())
        .collect();
    Sequence {
        class,
        grid: SubTokenGrid::new(positions, &c.scheme).unwrap(),
    }
}

fn train_loss_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut model = tiny_ar(&[1, 2], (2, 2), seed);
    randomize_scale(&mut model, &mut r);
    let batch: Vec<Sequence> = (0..3).map(|i| random_sequence(&model, Some(i % 3), &mut r)).collect();
    sampled_param_check(&model, 24, &mut r, |g, m| {
        let mut drop_rng = rng(seed ^ 0xa5);
        m.train_loss(g, &batch, Some(&mut drop_rng))
    })
}

/// Perturb the initialization so embeddings and heads are not near zero.
fn randomize_scale<M: Module>(m: &mut M, r: &mut ChaCha8Rng) {
    m.visit_mut(&mut |p| {
        let noise = Tensor::randn(p.value.shape(), 0.3, r);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    });
}

fn gradient_soundness() -> Outcome {
    let t = Timer::start();
    let mut worst_op: (f64, &str) = (0.0, "");
    let mut failures = Vec::new();
    let mut count = 0;
    for (name, check) in primitive_checks().into_iter().chain(block_checks()) {
        count += 1;
        for s in 0..INSTANCES {
            let e = check(1000 * count + s);
            if e > worst_op.0 {
                worst_op = (e, name);
            }
            if !(e <= OP_TOL) {
                failures.push(format!("{name}#{s}={e:.2e}"));
            }
        }
    }
    let mut worst_loss: (f64, &str) = (0.0, "");
    let losses: [(&str, OpCheck); 2] = [("tokenizer_loss", tokenizer_loss_check), ("train_loss", train_loss_check)];
    for (name, check) in losses {
        for s in 0..INSTANCES {
            let e = check(77 + s);
            if e > worst_loss.0 {
                worst_loss = (e, name);
            }
            if !(e <= LOSS_TOL) {
                failures.push(format!("{name}#{s}={e:.2e}"));
            }
        }
    }
    let secs = t.secs();
    outcome(
        failures.is_empty() && secs < 120.0,
        format!(
            "{count} ops x {INSTANCES} worst {:.2e} ({}) limit {OP_TOL:.0e}; 2 losses x {INSTANCES} worst {:.2e} ({}) limit {LOSS_TOL:.0e}; {secs:.1}s (limit 120s){}",
            worst_op.0,
            worst_op.1,
            worst_loss.0,
            worst_loss.1,
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------

/// Exhaustive categorical version of the entropy penalty: each row defines
/// a distribution over all `2^K` codes (product of the per-bit soft
/// assignments); returns mean row entropy minus entropy of the mean.
fn categorical_entropy_oracle(z: &[Vec<f64>], tau: f64) -> f64 {
    let k = z[0].len();
    let n = z.len() as f64;
    let h = |p: &[f64]| -> f64 { p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum() };
    let mut mean = vec![0.0; 1 << k];
    let mut per_sample = 0.0;
    for row in z {
        let p_pos: Vec<f64> = row.iter().map(|v| 1.0 / (1.0 + (-2.0 * v / tau).exp())).collect();
        let dist: Vec<f64> = (0..1usize << k)
            .map(|c| (0..k).map(|b| if c >> b & 1 == 1 { p_pos[b] } else { 1.0 - p_pos[b] }).product())
            .collect();
        per_sample += h(&dist) / n;
        for (m, d) in mean.iter_mut().zip(&dist) {
            *m += d / n;
        }
    }
    per_sample - h(&mean)
}

fn entropy_value(z: &[Vec<f64>], tau: f64) -> f64 {
    let k = z[0].len();
    let t = Tensor::new(&[z.len(), k], z.concat()).unwrap();
    let mut g = Graph::new();
    let v = g.constant(t);
    let e = entropy_loss(&mut g, v, tau).unwrap();
    g.value(e.loss).item()
}

fn entropy_anchors() -> Outcome {
    let tau = 0.1;
    let zero = vec![vec![0.0; 3]; 5];
    let at_zero = entropy_value(&zero, tau);
    let saturated: Vec<Vec<f64>> = (0..8u32).map(|i| index_to_code(i, 3).unwrap()).collect();
    let at_cover = entropy_value(&saturated, tau);
    let oracle = categorical_entropy_oracle(&saturated, tau);
    let target = -3.0 * std::f64::consts::LN_2;
    let pass = at_zero.abs() <= 1e-9 && (at_cover - target).abs() <= 1e-3 && (at_cover - oracle).abs() <= 1e-3;
    outcome(
        pass,
        format!(
            "z=0 -> {at_zero:.3e} (want 0 +- 1e-9); covering K=3 batch -> {at_cover:.6} vs -3 ln2 = {target:.6} and 8-way oracle {oracle:.6} (+- 1e-3)"
        ),
    )
}

fn likelihood_normalization() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (seed, class) in [(1, Some(0)), (2, Some(2)), (3, None)] {
        let model = tiny_ar(&[1, 2], (1, 2), seed);
        let scheme = model.config().scheme.clone();
        let batch: Vec<Sequence> = (0..64u32)
            .map(|c| Sequence {
                class,
                grid: SubTokenGrid::from_indices(&scheme, &[c & 7, c >> 3]).unwrap(),
            })
            .collect();
        for (path, lp) in [
            ("teacher-forced", model.sequence_logprob(&batch).unwrap()),
            ("incremental", model.incremental_logprob(&batch).unwrap()),
        ] {
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            worst = worst.max((total - 1.0).abs());
            if seed == 1 {
                detail.push(format!("{path} sum {total:.12}"));
            }
        }
    }
    outcome(
        worst <= 1e-5,
        format!("T=2, k=(1,2), 64 grids x 3 models x 2 paths: {}; worst |sum-1| = {worst:.2e} (limit 1e-5)", detail.join(", ")),
    )
}

fn causality() -> Outcome {
    let mut inter_fail = 0;
    let mut intra_fail = 0;
    let mut vacuous = 0;
    for seed in 0..50u64 {
        let mut r = rng(500 + seed);
        let model = tiny_ar(&[1, 2, 2], (2, 2), seed);
        let c = model.config().clone();
        let (t_len, w) = (c.seq_len(), c.width);
        let base = random_sequence(&model, Some(seed as usize % 3), &mut r);

        let contexts = |s: &Sequence| {
            let mut g = Graph::new();
            let v = model.inter_forward::<ChaCha8Rng>(&mut g, std::slice::from_ref(s), None).unwrap();
            g.value(v).clone()
        };
        let pos = r.random_range(0..t_len);
        let mut changed = base.clone();
        let mut positions = changed.grid.positions().to_vec();
        for (m, x) in positions[pos].iter_mut().enumerate() {
            *x = (*x + 1) % c.scheme.vocab(m) as u32;
        }
        changed.grid = SubTokenGrid::new(positions, &c.scheme).unwrap();
        let (a, b) = (contexts(&base), contexts(&changed));
        for t in 0..t_len {
            let same = a.data()[t * w..(t + 1) * w] == b.data()[t * w..(t + 1) * w];
            if t <= pos && !same {
                inter_fail += 1;
            }
            if t > pos && same {
                vacuous += 1;
            }
        }

        let ctx = Tensor::randn(&[1, w], 1.0, &mut r);
        let logits = |subs: &[u32]| {
            let mut g = Graph::new();
            let cv = g.constant(ctx.clone());
            let out = model.intra_forward_all::<ChaCha8Rng>(&mut g, cv, &[subs], None).unwrap();
            out.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        let subs: Vec<u32> = (0..c.scheme.len()).map(|m| r.random_range(0..c.scheme.vocab(m) as u32)).collect();
        let ref_logits = logits(&subs);
        for j in 0..subs.len() {
            let mut alt = subs.clone();
            alt[j] = (alt[j] + 1) % c.scheme.vocab(j) as u32;
            let got = logits(&alt);
            for m in 0..subs.len() {
                let same = got[m].bit_eq(&ref_logits[m]);
                if m <= j && !same {
                    intra_fail += 1;
                }
                if m > j && same {
                    vacuous += 1;
                }
            }
        }
    }
    outcome(
        inter_fail == 0 && intra_fail == 0 && vacuous == 0,
        format!(
            "50 models: {inter_fail} inter-position leaks, {intra_fail} intra-position leaks, {vacuous} perturbations with no downstream effect"
        ),
    )
}

/// Distribution over whole first-position tokens, enumerated from the
/// teacher-forced context and per-slot logits.
fn enumerate_first_token(model: &ArModel, class: usize, opts: &SamplingOptions) -> BTreeMap<Vec<u32>, f64> {
    let c = model.config();
    let w = c.width;
    let ctx_of = |cls: Option<usize>| {
        let seq = Sequence {
            class: cls,
            grid: SubTokenGrid::new(vec![vec![0; c.scheme.len()]; c.seq_len()], &c.scheme).unwrap(),
        };
        let mut g = Graph::new();
        let v = model.inter_forward::<ChaCha8Rng>(&mut g, &[seq], None).unwrap();
        Tensor::new(&[w], g.value(v).data()[..w].to_vec()).unwrap()
    };
    let cond = ctx_of(Some(class));
    let null = ctx_of(None);
    let mut out = BTreeMap::new();
    let mut prefixes = vec![(Vec::new(), 1.0)];
    for m in 1..=c.scheme.len() {
        let mut next = Vec::new();
        for (prefix, p) in prefixes {
            let lc = model.intra_forward(&cond, &prefix, m).unwrap();
            let logits: Vec<f64> = if opts.guidance == 1.0 {
                lc.data().to_vec()
            } else {
                let lu = model.intra_forward(&null, &prefix, m).unwrap();
                lc.data().iter().zip(lu.data()).map(|(a, b)| b + opts.guidance * (a - b)).collect()
            };
            let dist = lfqgen::ar::sampling_distribution(&logits, opts.temperature, opts.top_k).unwrap();
            for (x, q) in dist.iter().enumerate() {
                let mut longer = prefix.clone();
                longer.push(x as u32);
                next.push((longer, p * q));
            }
        }
        prefixes = next;
    }
    for (k, p) in prefixes {
        out.insert(k, p);
    }
    out
}

fn greedy_chain(model: &ArModel, class: usize) -> Vec<Vec<u32>> {
    let c = model.config();
    let w = c.width;
    let mut chosen: Vec<Vec<u32>> = vec![vec![0; c.scheme.len()]; c.seq_len()];
    for t in 0..c.seq_len() {
        let seq = Sequence {
            class: Some(class),
            grid: SubTokenGrid::new(chosen.clone(), &c.scheme).unwrap(),
        };
        let mut g = Graph::new();
        let v = model.inter_forward::<ChaCha8Rng>(&mut g, &[seq], None).unwrap();
        let ctx = Tensor::new(&[w], g.value(v).data()[t * w..(t + 1) * w].to_vec()).unwrap();
        for m in 1..=c.scheme.len() {
            let logits = model.intra_forward(&ctx, &chosen[t], m).unwrap();
            chosen[t][m - 1] = lfqgen::ar::argmax(logits.data()) as u32;
        }
    }
    chosen
}

fn sampler_fidelity() -> Outcome {
    const DRAWS: usize = 50_000;
    let model = tiny_ar(&[1, 2], (1, 2), 42);
    let scheme = model.config().scheme.clone();
    let settings = [
        SamplingOptions { temperature: 1.0, top_k: None, guidance: 1.0 },
        SamplingOptions { temperature: 0.7, top_k: Some(3), guidance: 1.0 },
        SamplingOptions { temperature: 1.0, top_k: None, guidance: 2.0 },
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (i, opts) in settings.iter().enumerate() {
        let expected = enumerate_first_token(&model, 1, opts);
        let grids = model.generate_batch(&vec![Some(1); DRAWS], opts, 9 + i as u64).unwrap();
        let mut counts: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        for s in 0..DRAWS {
            let first = grids.sample(s)[0];
            *counts.entry(scheme.factorize(first).unwrap()).or_default() += 1;
        }
        let tv: f64 = 0.5
            * expected
                .iter()
                .map(|(k, p)| (p - *counts.get(k).unwrap_or(&0) as f64 / DRAWS as f64).abs())
                .sum::<f64>();
        let outside: usize = counts.iter().filter(|(k, _)| !expected.contains_key(*k)).map(|(_, c)| c).sum();
        worst = worst.max(tv + outside as f64 / DRAWS as f64);
        parts.push(format!(
            "T={} top_k={:?} cfg={} TV {tv:.4}",
            opts.temperature, opts.top_k, opts.guidance
        ));
    }

    let mut greedy_ok = true;
    for seed in 0..5 {
        let m = tiny_ar(&[1, 2], (2, 2), 100 + seed);
        let opts = SamplingOptions { temperature: 0.0, top_k: None, guidance: 1.0 };
        let grid = m.generate(Some(2), &opts, seed).unwrap();
        let chain = greedy_chain(&m, 2);
        let want: Vec<u32> = chain.iter().map(|p| m.config().scheme.defactorize(p).unwrap()).collect();
        greedy_ok &= grid.indices == want;
    }
    outcome(
        worst <= 0.02 && greedy_ok,
        format!(
            "{DRAWS} draws each: {}; limit 0.02; temperature 0 equals argmax chain on 5 models: {greedy_ok}",
            parts.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------
// Training criteria

const UTIL_CHANNELS: &str = "8,16,32";
const UTIL_STEPS: u64 = 3000;
const UTIL_LR: f64 = 0.001;

fn utilization_config(entropy_weight: f64) -> RunConfig {
    parse_config(&format!(
        "stage = tokenizer\nimage_size = 32\nchannels = {UTIL_CHANNELS}\ngroups = 8\nbits = 8\n\
         batch_size = 8\nlr = {UTIL_LR}\nsteps = {UTIL_STEPS}\nseed = 5\n\
         entropy_weight = {entropy_weight}\n"
    ))
    .unwrap()
}

fn usage_of(model: &TokenizerModel, data: &Dataset) -> (f64, usize) {
    let mut usage = lfqgen::lfq::CodeUsage::new();
    for chunk in data.images.chunks(32) {
        let (_, q) = model.encode(&stack(chunk).unwrap()).unwrap();
        usage.record(&q.indices.indices);
    }
    (usage.fraction(model.bits()), usage.distinct())
}

fn codebook_utilization() -> Outcome {
    let t = Timer::start();
    let data = textures(512, 32, 1);
    let mut results = Vec::new();
    for ew in [0.1, 0.0] {
        let mut trainer = TokenizerTrainer::new(utilization_config(ew)).unwrap();
        trainer.run(&data, |_| {}).unwrap();
        results.push(usage_of(&trainer.model, &data));
    }
    let secs = t.secs();
    let ((with, wd), (without, wod)) = (results[0], results[1]);
    outcome(
        with >= 0.95 && with > without && secs <= 1800.0,
        format!(
            "K=8, 512 textures, {UTIL_STEPS} steps: usage {with:.4} ({wd}/256) with entropy weight 0.1 (want >= 0.95) vs {without:.4} ({wod}/256) without; {secs:.0}s for both (limit 1800s)"
        ),
    )
}

const OVERFIT_TOK_STEPS: u64 = 1500;
const OVERFIT_AR_STEPS: u64 = 400;

fn end_to_end_overfit() -> Outcome {
    let t = Timer::start();
    let data = textures(8, 32, 2);
    let tok_cfg = parse_config(&format!(
        "stage = tokenizer\nimage_size = 32\nchannels = 16,32,64\ngroups = 8\nbits = 8\n\
         batch_size = 8\nlr = 0.1\nsteps = {OVERFIT_TOK_STEPS}\nseed = 3\n"
    ))
    .unwrap();
    let mut tok = TokenizerTrainer::new(tok_cfg).unwrap();
    tok.run(&data, |_| {}).unwrap();
    let all = stack(&data.images).unwrap();
    let (_, q) = tok.model.encode(&all).unwrap();
    let recon = tok.model.decode(&q.indices).unwrap();
    let mse = lfqgen::eval::mse(&recon, &all).unwrap();

    let ar_cfg = parse_config(&format!(
        "stage = ar\nimage_size = 32\nchannels = 16,32,64\ngroups = 8\nbits = 8\n\
         inter_blocks = 2\nintra_blocks = 1\nwidth = 64\nheads = 4\nclass_count = 8\n\
         dropout = 0\ncond_drop = 0\nbatch_size = 8\nlr = 0.3\nsteps = {OVERFIT_AR_STEPS}\nseed = 4\n"
    ))
    .unwrap();
    let by_image = Dataset {
        images: data.images.clone(),
        classes: (0..data.len()).collect(),
        image_size: data.image_size,
    };
    let seqs = encode_dataset(&tok.model, &by_image, &ar_cfg.ar.scheme).unwrap();
    let mut ar = ArTrainer::new(ar_cfg).unwrap();
    ar.run(&seqs, |_| {}).unwrap();
    let greedy = SamplingOptions { temperature: 0.0, top_k: None, guidance: 1.0 };
    let mut hit = 0;
    let mut total = 0;
    for (i, s) in seqs.iter().enumerate() {
        let grid = ar.model.generate(Some(i), &greedy, 0).unwrap();
        let want = s.grid.to_indices(&ar.model.config().scheme).unwrap();
        hit += grid.indices.iter().zip(&want).filter(|(a, b)| a == b).count();
        total += want.len();
    }
    let frac = hit as f64 / total as f64;
    let secs = t.secs();
    outcome(
        mse <= 0.01 && frac >= 0.9 && secs <= 1800.0,
        format!(
            "8 images: tokenizer MSE {mse:.5} (limit 0.01); greedy generation reproduces {hit}/{total} = {frac:.3} token positions (want >= 0.9); {secs:.0}s (limit 1800s)"
        ),
    )
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = textures(12, 8, 3);
    let cfg = parse_config(
        "stage = tokenizer\nimage_size = 8\nchannels = 4,8\ngroups = 2\nbits = 6\n\
         batch_size = 4\nlr = 0.2\nsteps = 10\nwarmup = 3\nseed = 21\n",
    )
    .unwrap();

    let mut full = TokenizerTrainer::new(cfg.clone()).unwrap();
    full.run(&data, |_| {}).unwrap();

    let mut first = TokenizerTrainer::new(cfg).unwrap();
    for _ in 0..4 {
        first.step(&data).unwrap();
    }
    let path = dir.path().join("mid.ckpt");
    first.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let again = dir.path().join("again.ckpt");
    loaded.save(&again).unwrap();
    let save_load_save = std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap();

    let mut resumed = TokenizerTrainer::from_checkpoint(&loaded).unwrap();
    resumed.run(&data, |_| {}).unwrap();
    let mut same_params = true;
    let mut a = Vec::new();
    full.model.visit(&mut |p| a.push(p.value.clone()));
    let mut i = 0;
    resumed.model.visit(&mut |p| {
        same_params &= p.value.bit_eq(&a[i]);
        i += 1;
    });
    let same_bytes = resumed.checkpoint().to_bytes() == full.checkpoint().to_bytes();
    outcome(
        save_load_save && same_params && same_bytes && resumed.optim.step == 10,
        format!(
            "save->load->save identical: {save_load_save}; resume at step 4 of 10 matches uninterrupted parameters bit-for-bit: {same_params}; full checkpoints identical: {same_bytes}"
        ),
    )
}

fn preset_shapes() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, n, l, w, h) in [("B", 24, 2, 1024, 16), ("L", 36, 3, 1280, 20), ("XL", 48, 4, 1536, 24)] {
        let text = format!(
            "stage = ar\nimage_size = 256\nchannels = 64,128,256,512\ngroups = 8\nbits = 18\n\
             inter_blocks = {n}\nintra_blocks = {l}\nwidth = {w}\nheads = {h}\nclass_count = 1000\n"
        );
        let parsed = parse_config(&text).and_then(|c| {
            c.validate()?;
            Ok(c)
        });
        match (parsed, ArConfig::preset(name)) {
            (Ok(c), Ok(p)) => {
                let specs = ArModel::param_specs(&c.ar);
                let count = p.param_count();
                let same = c.ar == p;
                ok &= same && specs.is_ok() && count.is_ok();
                lines.push(format!(
                    "{name}: {} parameters, parsed config equals preset: {same}",
                    count.map(|v| v.to_string()).unwrap_or_else(|e| e.to_string())
                ));
            }
            (a, b) => {
                ok = false;
                lines.push(format!("{name}: {:?} / {:?}", a.err(), b.err()));
            }
        }
    }
    outcome(ok, lines.join("; "))
}
