use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{DType, Graph, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// `true`: shrink weights by `lr * wd` directly. `false`: add `wd * w`
    /// to the gradient before the moment updates.
    pub decoupled: bool,
}

/// One bias-corrected Adam update of a flat parameter buffer; `t` is the
/// 1-based step number.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    h: &AdamHyper,
    lr: f64,
    t: u64,
) -> Result<()> {
    if t < 1 {
        return Err(Error::invalid("adamw_step", "step counter must be >= 1"));
    }
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::invalid("adamw_step", "buffer lengths differ"));
    }
    let bc1 = 1.0 - h.beta1.powf(t as f64);
    let bc2 = 1.0 - h.beta2.powf(t as f64);
    for i in 0..n {
        let mut gi = grad[i];
        if !h.decoupled {
            gi += h.weight_decay * param[i];
        }
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        if h.decoupled {
            param[i] -= lr * h.weight_decay * param[i];
        }
        param[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Scale all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm observed before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Linear warmup from 0 to `base * batch / 256`, then constant.
pub fn lr_schedule(step: u64, warmup: u64, base: f64, batch: usize) -> f64 {
    let peak = base * batch as f64 / 256.0;
    if warmup == 0 || step >= warmup {
        peak
    } else {
        peak * step as f64 / warmup as f64
    }
}

/// Adam state for every parameter of a model, kept in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub hyper: AdamHyper,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl Optimizer {
    pub fn new<M: Module>(model: &M, hyper: AdamHyper) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        model.visit(&mut |p| {
            names.push(p.name.clone());
            m.push(Tensor::zeros(p.value.shape()));
        });
        Self {
            hyper,
            names,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    /// Apply one update; `grads` follows the model's visit order.
    pub fn update<M: Module>(&mut self, model: &mut M, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.names.len() {
            return Err(Error::invalid(
                "optimizer",
                format!("{} gradients for {} parameters", grads.len(), self.names.len()),
            ));
        }
        let t = self.step + 1;
        let mut i = 0;
        let mut err = None;
        model.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            if p.name != self.names[i] || p.value.shape() != grads[i].shape() {
                err = Some(Error::invalid(
                    "optimizer",
                    format!("parameter {} does not match optimizer slot {}", p.name, self.names[i]),
                ));
                return;
            }
            let r = adamw_step(
                p.value.data_mut(),
                grads[i].data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                &self.hyper,
                lr,
                t,
            );
            if let Err(e) = r {
                err = Some(e);
            }
            if p.value.dtype() == DType::F32 {
                p.value = p.value.to_dtype(DType::F32);
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.step = t;
        Ok(())
    }
}

/// Gradients of every model parameter after `g.backward`, in visit order.
/// Parameters the loss did not touch get zeros.
pub fn collect_grads<M: Module>(g: &Graph, model: &M) -> Vec<Tensor> {
    let mut out = Vec::new();
    model.visit(&mut |p| {
        out.push(
            g.param_grad(&p.name)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape())),
        );
    });
    out
}
