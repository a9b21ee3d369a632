use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Lamb,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Lamb => "lamb",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "lamb" => Ok(Self::Lamb),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Peak learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
            warmup_steps: 500,
            total_steps: 10_000,
            batch_size: 32,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!(
                "betas ({}, {}) must lie in (0, 1)",
                self.beta1, self.beta2
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lr >= 0.0) || !(self.eps > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr must be >= 0, eps > 0, batch_size > 0".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, cfg: &OptimizerConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    if step < w {
        cfg.lr * step as f64 / w as f64
    } else if step >= t {
        0.0
    } else {
        cfg.lr * (t - step) as f64 / (t - w) as f64
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Real> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Updates applied so far (drives bias correction).
    pub t: u64,
}

impl<T: Real> Moments<T> {
    pub fn zeros(params: &ParamStore<T>) -> Self {
        let z = |p: &ParamStore<T>| p.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            m: z(params),
            v: z(params),
            t: 0,
        }
    }
}

/// Global L2 norm of all gradients; errors on a non-finite gradient,
/// naming the tensor.
pub fn grad_norm<T: Real>(params: &ParamStore<T>) -> Result<f64> {
    let mut sq = 0.0;
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            for &x in g {
                let x = x.as_f64();
                if !x.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient in `{name}`")));
                }
                sq += x * x;
            }
        }
    }
    Ok(sq.sqrt())
}

/// One Adam or LAMB update from the gradients held by `params`, at
/// learning rate `lr`. Tensors without a gradient count as zero gradient.
pub fn optimizer_step<T: Real>(
    params: &mut ParamStore<T>,
    moments: &mut Moments<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    let norm = grad_norm(params)?;
    let clip = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    moments.t += 1;
    let t = moments.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (i, p) in params.tensors_mut().enumerate() {
        let n = p.numel();
        let g: Vec<f64> = match p.grad() {
            Some(g) => g.iter().map(|x| x.as_f64() * clip).collect(),
            None => vec![0.0; n],
        };
        let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
        let mut r = vec![0.0; n];
        for k in 0..n {
            let mk = b1 * m[k].as_f64() + (1.0 - b1) * g[k];
            let vk = b2 * v[k].as_f64() + (1.0 - b2) * g[k] * g[k];
            m[k] = T::of(mk);
            v[k] = T::of(vk);
            r[k] = (mk / c1) / ((vk / c2).sqrt() + cfg.eps) + cfg.weight_decay * p.data()[k].as_f64();
        }
        let scale = match cfg.kind {
            OptimizerKind::Adam => lr,
            OptimizerKind::Lamb => {
                let pn = p.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
                let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                let trust = if pn > 0.0 && rn > 0.0 { pn / rn } else { 1.0 };
                lr * trust
            }
        };
        for (x, rk) in p.data_mut().iter_mut().zip(&r) {
            *x = T::of(x.as_f64() - scale * rk);
        }
    }
    Ok(())
}

/// True iff none of the last `patience` values strictly improves on the
/// best value before them.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let patience = patience.max(1);
    if history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let best = history[..split].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    history[split..].iter().all(|&x| x <= best)
}
