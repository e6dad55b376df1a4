#![allow(dead_code)]

use std::time::Instant;

use lfqgen::nn::Module;
use lfqgen::tensor::{Graph, Tensor, Var};
use lfqgen::train::Dataset;
use lfqgen::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth periodic color patterns in `[-1, 1]`, one class per frequency band.
pub fn textures(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = rng(seed);
    let tau = std::f64::consts::TAU;
    let mut images = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        let fx: f64 = rng.random_range(0.5..4.0);
        let fy: f64 = rng.random_range(0.5..4.0);
        let phase: f64 = rng.random_range(0.0..tau);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        let mut d = vec![0.0; 3 * size * size];
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let u = x as f64 / size as f64 * tau;
                    let v = y as f64 / size as f64 * tau;
                    let s = (fx * u + fy * v + phase).sin();
                    d[(c * size + y) * size + x] = (base[c] + 0.5 * color[c] * s).clamp(-1.0, 1.0);
                }
            }
        }
        images.push(Tensor::new(&[3, size, size], d).unwrap());
        classes.push(usize::from(fx + fy > 4.5));
    }
    Dataset {
        images,
        classes,
        image_size: size,
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-12)
}

/// Finite-difference check of the gradients a scalar loss assigns to the
/// parameters of `model`. `probes` random coordinates are checked, or all of
/// them when `None`. Returns the worst relative error.
pub fn param_grad_check<M, F>(model: &M, loss: F, probes: Option<usize>, eps: f64, rng: &mut ChaCha8Rng) -> f64
where
    M: Module + Clone,
    F: Fn(&mut Graph, &M) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, model).unwrap();
    g.backward(out).unwrap();

    let mut coords = Vec::new();
    let mut grads = Vec::new();
    model.visit(&mut |p| {
        let grad = g.param_grad(&p.name).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for j in 0..p.value.numel() {
            coords.push((p.name.clone(), j, grad.data()[j]));
        }
        grads.push(grad);
    });
    let chosen: Vec<usize> = match probes {
        Some(k) if k < coords.len() => (0..k).map(|_| rng.random_range(0..coords.len())).collect(),
        _ => (0..coords.len()).collect(),
    };

    let eval = |name: &str, j: usize, delta: f64| {
        let mut m = model.clone();
        m.visit_mut(&mut |p| {
            if p.name == name {
                p.value.data_mut()[j] += delta;
            }
        });
        let mut g = Graph::new();
        let out = loss(&mut g, &m).unwrap();
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for i in chosen {
        let (name, j, analytic) = &coords[i];
        let numeric = (eval(name, *j, eps) - eval(name, *j, -eps)) / (2.0 * eps);
        worst = worst.max(rel_err(*analytic, numeric));
    }
    worst
}

/// Weighted sum of every element, turning a tensor output into a scalar
/// whose gradient reaches all elements with distinct weights.
pub fn probe_sum(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

pub fn probe_weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, 0.5, 1.5, rng)
}

pub struct Timer(Instant);

impl Timer {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    pub fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
