use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

/// Noise schedule over timesteps `1..=t_max`. Index `i` of `betas` and
/// `alpha_bars` is timestep `i + 1`; timestep 0 is the clean image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Closed-form cosine `alpha_bar(t) = f(t) / f(0)`.
pub fn cosine_alpha_bar(t: f64, t_max: usize) -> f64 {
    let f = |t: f64| ((t / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    f(t) / f(0.0)
}

pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if t_max == 0 {
        return Err(Error::invalid("schedule", "T must be >= 1"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / t_max as f64;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            (0..t_max)
                .map(|i| {
                    let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
                    (lo + (hi - lo) * frac).min(MAX_BETA)
                })
                .collect()
        }
        ScheduleKind::Cosine => (1..=t_max)
            .map(|t| {
                let ratio = cosine_alpha_bar(t as f64, t_max) / cosine_alpha_bar((t - 1) as f64, t_max);
                (1.0 - ratio).clamp(0.0, MAX_BETA)
            })
            .collect(),
    };
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    let s = DiffusionSchedule {
        t_max,
        kind,
        betas,
        alpha_bars,
    };
    s.validate()?;
    Ok(s)
}

impl DiffusionSchedule {
    /// `alpha_bar` at timestep `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("schedule", r.to_string()));
        if self.betas.len() != self.t_max || self.alpha_bars.len() != self.t_max {
            return bad("length mismatch");
        }
        if self.betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return bad("betas must lie in (0, 1)");
        }
        if self.alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return bad("alpha_bars must be strictly decreasing");
        }
        let mut acc = 1.0;
        for (b, a) in self.betas.iter().zip(&self.alpha_bars) {
            acc *= 1.0 - b;
            if acc != *a {
                return bad("alpha_bars are not the cumulative product of betas");
            }
        }
        Ok(())
    }
}
