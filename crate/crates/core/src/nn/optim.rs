use candle_core::backprop::GradStore;
use candle_core::Var;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::Result;

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with a per-step cosine learning-rate schedule.
pub struct CosineAdamW {
    opt: AdamW,
    base_lr: f64,
    total_steps: usize,
    step: usize,
}

impl CosineAdamW {
    pub fn new(vars: Vec<Var>, base_lr: f64, weight_decay: f64, total_steps: usize) -> Result<Self> {
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: base_lr,
                weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        Ok(Self {
            opt,
            base_lr,
            total_steps,
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps)
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.opt.set_learning_rate(self.lr());
        self.opt.step(grads)?;
        self.step += 1;
        Ok(())
    }
}
