//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use lamae_tensor::{Float, Tensor};

use crate::config::{OptimConfig, ScheduleConfig};
use crate::error::{LamaeError, Result};
use crate::params::ParamStore;

/// Learning rate at a (fractional) epoch: linear warmup from
/// `base_lr * warmup_start_factor` to `base_lr`, then cosine decay to
/// `min_lr` at `total_epochs`.
pub fn lr_at(epoch: f64, cfg: &ScheduleConfig) -> f64 {
    let epoch = epoch.clamp(0.0, cfg.total_epochs);
    if epoch < cfg.warmup_epochs {
        let start = cfg.base_lr * cfg.warmup_start_factor;
        return start + (cfg.base_lr - start) * epoch / cfg.warmup_epochs;
    }
    let p = (epoch - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs);
    cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + (PI * p).cos())
}

/// Whether weight decay applies to a parameter: dense weight matrices only,
/// never biases, norms, tokens, or slot embeddings.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// First and second moments per parameter plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if g.has_non_finite() {
                return Err(LamaeError::Numeric(format!("non-finite gradient in {name}")));
            }
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                Some(p) => {
                    return Err(LamaeError::Integrity(format!(
                        "gradient {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                None => return Err(LamaeError::Integrity(format!("gradient for unknown parameter {name}"))),
            }
        }
        self.step += 1;
        let OptimConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let decay = if decays(name) { lr * weight_decay } else { 0.0 };
            for (((p, m), v), g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gf = g.as_f64();
                let mf = beta1 * m.as_f64() + (1.0 - beta1) * gf;
                let vf = beta2 * v.as_f64() + (1.0 - beta2) * gf * gf;
                *m = T::from_f64(mf);
                *v = T::from_f64(vf);
                let mut pf = p.as_f64();
                pf -= decay * pf;
                pf -= lr * (mf / c1) / ((vf / c2).sqrt() + eps);
                *p = T::from_f64(pf);
            }
        }
        Ok(())
    }
}
