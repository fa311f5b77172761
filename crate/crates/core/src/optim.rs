//! Adam and SGD with explicit, checkpointable state, and step learning-rate
//! schedules.

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::models::Checkpoint;

fn zero_grads(params: &[(String, Tensor)]) {
    for (_, p) in params {
        let mut g = p.grad();
        if g.defined() {
            let _ = g.detach_().zero_();
        }
    }
}

fn grad_or_zeros(p: &Tensor) -> Tensor {
    let g = p.grad();
    if g.defined() {
        g
    } else {
        p.zeros_like()
    }
}

/// Adam with the usual bias correction (`eps` added after the square root).
#[derive(Debug)]
pub struct Adam {
    params: Vec<(String, Tensor)>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect();
        let v = params.iter().map(|(_, p)| p.zeros_like()).collect();
        Self {
            params,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> i64 {
        self.step
    }

    pub fn zero_grad(&self) {
        zero_grads(&self.params);
    }

    pub fn step(&mut self) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        tch::no_grad(|| {
            for (i, (_, p)) in self.params.iter().enumerate() {
                let g = grad_or_zeros(p);
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                let _ = m.g_mul_scalar_(self.beta1).g_add_(&(&g * (1.0 - self.beta1)));
                let _ = v
                    .g_mul_scalar_(self.beta2)
                    .g_add_(&(&g * &g * (1.0 - self.beta2)));
                let denom = (&*v / bc2).sqrt() + self.eps;
                let update = (&*m / bc1) / denom * self.lr;
                let _ = p.shallow_clone().g_sub_(&update);
            }
        });
    }

    pub fn save_state(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_tensor(format!("{prefix}.step"), &Tensor::from_slice(&[self.step]));
        for (i, (name, _)) in self.params.iter().enumerate() {
            ck.insert_tensor(format!("{prefix}.m.{name}"), &self.m[i]);
            ck.insert_tensor(format!("{prefix}.v.{name}"), &self.v[i]);
        }
    }

    pub fn load_state(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        self.step = ck.tensor(&format!("{prefix}.step"))?.int64_value(&[0]);
        for (i, (name, p)) in self.params.iter().enumerate() {
            self.m[i] = restore(ck, &format!("{prefix}.m.{name}"), p)?;
            self.v[i] = restore(ck, &format!("{prefix}.v.{name}"), p)?;
        }
        Ok(())
    }
}

fn restore(ck: &Checkpoint, key: &str, like: &Tensor) -> Result<Tensor> {
    let t = ck.tensor(key)?;
    if t.size() != like.size() {
        return Err(Error::Checkpoint(format!(
            "optimizer state `{key}` has shape {:?}, expected {:?}",
            t.size(),
            like.size()
        )));
    }
    Ok(t.to_kind(like.kind()).copy())
}

/// SGD with momentum; weight decay is added to the gradient before the
/// momentum buffer (no dampening, no Nesterov).
#[derive(Debug)]
pub struct Sgd {
    params: Vec<(String, Tensor)>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buf: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: Vec<(String, Tensor)>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let buf = params.iter().map(|(_, p)| p.zeros_like()).collect();
        Self {
            params,
            lr,
            momentum,
            weight_decay,
            buf,
        }
    }

    pub fn zero_grad(&self) {
        zero_grads(&self.params);
    }

    pub fn step(&mut self) {
        tch::no_grad(|| {
            for (i, (_, p)) in self.params.iter().enumerate() {
                let mut d = grad_or_zeros(p);
                if self.weight_decay != 0.0 {
                    d = d + p * self.weight_decay;
                }
                let b = &mut self.buf[i];
                let _ = b.g_mul_scalar_(self.momentum).g_add_(&d);
                let _ = p.shallow_clone().g_sub_(&(&*b * self.lr));
            }
        });
    }

    pub fn save_state(&self, ck: &mut Checkpoint, prefix: &str) {
        for (i, (name, _)) in self.params.iter().enumerate() {
            ck.insert_tensor(format!("{prefix}.buf.{name}"), &self.buf[i]);
        }
    }

    pub fn load_state(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            self.buf[i] = restore(ck, &format!("{prefix}.buf.{name}"), p)?;
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: divided by `factor` at each epoch in
/// `drops`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base: f64,
    pub drops: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn new(base: f64, drops: Vec<usize>, factor: f64) -> Result<Self> {
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {base}")));
        }
        if !(factor >= 1.0) {
            return Err(Error::Invalid(format!("drop factor must be >= 1, got {factor}")));
        }
        if drops.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "drop epochs must be strictly increasing: {drops:?}"
            )));
        }
        Ok(Self { base, drops, factor })
    }

    pub fn constant(base: f64) -> Self {
        Self {
            base,
            drops: Vec::new(),
            factor: 1.0,
        }
    }

    /// Rate in effect during `epoch` (0-based).
    pub fn lr(&self, epoch: usize) -> f64 {
        let k = self.drops.iter().filter(|d| **d <= epoch).count();
        self.base / self.factor.powi(k as i32)
    }

    /// Checks every drop epoch is below `epochs`.
    pub fn check_within(&self, epochs: usize) -> Result<()> {
        match self.drops.last() {
            Some(d) if *d >= epochs && epochs > 0 => Err(Error::Invalid(format!(
                "drop epoch {d} is not below the epoch count {epochs}"
            ))),
            _ => Ok(()),
        }
    }
}
