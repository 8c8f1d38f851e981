use candle_core::{DType, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use super::objective::{objective_tensor, GuidanceClassifier, Objective};
use crate::corpus::Termination;
use crate::diffusion::{ddim_grid, ddim_step, decode, DiffusionSchedule, EpsModel};
use crate::error::{Error, Result};
use crate::nn::randn;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentOptimizer {
    /// Constant-step gradient descent.
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMemory {
    /// Store only the latents and recompute each denoiser call on the way back.
    Recompute,
    /// Keep the whole sampling graph.
    Retain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub objective: Objective,
    #[serde(default)]
    pub target_class_id: Option<usize>,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
    /// Zero samples once without optimizing.
    pub max_outer_steps: usize,
    #[serde(default = "default_lr")]
    pub latent_lr: f64,
    #[serde(default)]
    pub optimize_conditioning: bool,
    pub seed: u64,
    pub sampling_steps: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: LatentOptimizer,
    #[serde(default = "default_memory")]
    pub memory: GradientMemory,
    /// Runs optimized together in one batch.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_threshold() -> f64 {
    0.40
}
fn default_lr() -> f64 {
    0.05
}
fn default_optimizer() -> LatentOptimizer {
    LatentOptimizer::Sgd
}
fn default_memory() -> GradientMemory {
    GradientMemory::Recompute
}
fn default_batch() -> usize {
    16
}

impl GuidanceConfig {
    pub fn target_confidence(target: usize, seed: u64) -> Self {
        Self {
            objective: Objective::TargetConfidence,
            target_class_id: Some(target),
            confidence_threshold: default_threshold(),
            max_outer_steps: 30,
            latent_lr: default_lr(),
            optimize_conditioning: false,
            seed,
            sampling_steps: 20,
            optimizer: default_optimizer(),
            memory: default_memory(),
            batch_size: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(Error::invalid("guidance config", "confidence_threshold must lie in (0, 1)"));
        }
        if !(self.latent_lr > 0.0) {
            return Err(Error::invalid("guidance config", "latent_lr must be > 0"));
        }
        if self.sampling_steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("guidance config", "sampling_steps and batch_size must be > 0"));
        }
        if self.objective == Objective::TargetConfidence && self.target_class_id.is_none() {
            return Err(Error::invalid("guidance config", "target_confidence needs target_class_id"));
        }
        Ok(())
    }

    /// Entropy guidance has no confidence-based stopping rule and always
    /// spends the full step budget.
    pub fn stops_at_threshold(&self) -> bool {
        self.objective == Objective::TargetConfidence
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub objective: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct GuidanceTrace {
    pub seed: u64,
    pub records: Vec<TraceRecord>,
    /// `(1, 3, S, S)`
    pub final_z_t: Tensor,
    /// `(3, S, S)`
    pub final_image: Tensor,
    pub termination: Termination,
    /// Gradient updates applied to the latent.
    pub steps_used: usize,
}

impl GuidanceTrace {
    pub fn final_confidence(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.confidence)
    }
}

/// Seeded standard-normal starting latent for one run.
pub fn initial_latent(seed: u64, size: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    randn(&mut SplitMix64::labelled(seed, "guidance/z_T"), &[1, 3, size, size], dtype, device)
}

// Moment estimates for the optional Adam update, one row per run.
struct Moments {
    m: Tensor,
    v: Tensor,
    t: Vec<i32>,
}

struct Batch {
    seeds: Vec<u64>,
    z: Tensor,
    cond: Tensor,
    moments: Option<(Moments, Option<Moments>)>,
    records: Vec<Vec<TraceRecord>>,
    steps: Vec<usize>,
}

/// Samples `z` and returns the final image, keeping the graph when requested.
fn sample(model: &dyn EpsModel, z: &Tensor, cond: &Tensor, s: &DiffusionSchedule, grid: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
    let mut zs = vec![z.clone()];
    for w in grid.windows(2) {
        let cur = zs.last().expect("nonempty");
        let eps = model.predict_eps(cur, w[0], cond)?;
        zs.push(ddim_step(s, cur, &eps, w[0], w[1])?);
    }
    Ok((decode(zs.last().expect("nonempty")), zs))
}

struct Evaluation {
    images: Tensor,
    objective: Vec<f64>,
    confidence: Vec<f64>,
    grad_z: Option<Tensor>,
    grad_cond: Option<Tensor>,
}

fn probs_of(logits: &Tensor, target: Option<usize>) -> Result<Vec<f64>> {
    let p = candle_nn::ops::softmax(logits, D::Minus1)?.to_dtype(DType::F64)?;
    let (b, _) = p.dims2()?;
    Ok(match target {
        Some(t) => p.narrow(1, t, 1)?.squeeze(1)?.to_vec1()?,
        None => p.max(1)?.to_vec1()?,
    }
    .into_iter()
    .take(b)
    .collect())
}

/// Objective, confidence and (optionally) gradients for every run in the batch.
fn evaluate(
    model: &dyn EpsModel,
    classifier: &dyn GuidanceClassifier,
    config: &GuidanceConfig,
    schedule: &DiffusionSchedule,
    grid: &[usize],
    z: &Tensor,
    cond: &Tensor,
    want_grad: bool,
) -> Result<Evaluation> {
    let target = config.target_class_id;
    let with_cond = config.optimize_conditioning;
    if !want_grad {
        let (img, _) = sample(model, z, cond, schedule, grid)?;
        let logits = classifier.logits(&img)?;
        return Ok(Evaluation {
            images: img,
            objective: objective_tensor(&logits, config.objective, target)?.to_dtype(DType::F64)?.to_vec1()?,
            confidence: probs_of(&logits, target)?,
            grad_z: None,
            grad_cond: None,
        });
    }
    match config.memory {
        GradientMemory::Retain => {
            let zv = Var::from_tensor(z)?;
            let cv = Var::from_tensor(cond)?;
            let c = if with_cond { cv.as_tensor().clone() } else { cond.clone() };
            let (img, _) = sample(model, zv.as_tensor(), &c, schedule, grid)?;
            let logits = classifier.logits(&img)?;
            let obj = objective_tensor(&logits, config.objective, target)?;
            let grads = obj.sum_all()?.backward()?;
            Ok(Evaluation {
                images: img.detach(),
                objective: obj.to_dtype(DType::F64)?.to_vec1()?,
                confidence: probs_of(&logits, target)?,
                grad_z: grads.get(&zv).cloned(),
                grad_cond: if with_cond { grads.get(&cv).cloned() } else { None },
            })
        }
        GradientMemory::Recompute => {
            let (_, zs) = sample(model, z, cond, schedule, grid)?;
            let z0 = Var::from_tensor(zs.last().expect("nonempty"))?;
            let img = decode(z0.as_tensor());
            let logits = classifier.logits(&img)?;
            let obj = objective_tensor(&logits, config.objective, target)?;
            let grads = obj.sum_all()?.backward()?;
            let mut g = grads
                .get(&z0)
                .cloned()
                .unwrap_or(z0.as_tensor().zeros_like()?);
            let mut g_cond: Option<Tensor> = None;
            for (k, w) in grid.windows(2).enumerate().rev() {
                let zk = Var::from_tensor(&zs[k])?;
                let cv = Var::from_tensor(cond)?;
                let c = if with_cond { cv.as_tensor().clone() } else { cond.clone() };
                let eps = model.predict_eps(zk.as_tensor(), w[0], &c)?;
                let out = ddim_step(schedule, zk.as_tensor(), &eps, w[0], w[1])?;
                let grads = (out * &g)?.sum_all()?.backward()?;
                g = grads.get(&zk).cloned().unwrap_or(zk.as_tensor().zeros_like()?);
                if with_cond {
                    if let Some(gc) = grads.get(&cv) {
                        g_cond = Some(match g_cond {
                            Some(acc) => (acc + gc)?,
                            None => gc.clone(),
                        });
                    }
                }
            }
            Ok(Evaluation {
                images: img.detach(),
                objective: obj.to_dtype(DType::F64)?.to_vec1()?,
                confidence: probs_of(&logits, target)?,
                grad_z: Some(g),
                grad_cond: g_cond,
            })
        }
    }
}

fn adam_update(x: &Tensor, g: &Tensor, mo: &mut Moments, lr: f64) -> Result<Tensor> {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    mo.m = ((&mo.m * b1)? + (g * (1.0 - b1))?)?;
    mo.v = ((&mo.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
    for t in &mut mo.t {
        *t += 1;
    }
    let c1: Vec<f64> = mo.t.iter().map(|&t| 1.0 / (1.0 - b1.powi(t))).collect();
    let c2: Vec<f64> = mo.t.iter().map(|&t| 1.0 / (1.0 - b2.powi(t))).collect();
    let mut shape = vec![mo.t.len()];
    shape.resize(x.rank(), 1);
    let c1 = Tensor::from_vec(c1, shape.as_slice(), x.device())?.to_dtype(x.dtype())?;
    let c2 = Tensor::from_vec(c2, shape.as_slice(), x.device())?.to_dtype(x.dtype())?;
    let mhat = mo.m.broadcast_mul(&c1)?;
    let vhat = mo.v.broadcast_mul(&c2)?;
    Ok((x - ((mhat / (vhat.sqrt()? + eps)?)? * lr)?)?)
}

fn select(t: &Tensor, keep: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = keep.iter().map(|&i| i as u32).collect();
    Ok(t.index_select(&Tensor::new(idx.as_slice(), t.device())?, 0)?)
}

fn check_finite(g: &Tensor) -> Result<Vec<bool>> {
    let flat = g.flatten_from(1)?.to_dtype(DType::F64)?;
    let rows: Vec<Vec<f64>> = flat.to_vec2()?;
    let ok: Vec<bool> = rows.iter().map(|r| r.iter().all(|v| v.is_finite())).collect();
    Ok(ok)
}

/// Optimizes one run per seed, all sharing config and conditioning
/// `cond: (1, L, D)`. Runs leave the batch as they finish; a run whose
/// gradient turns non-finite yields an error naming the step.
pub fn optimize_latents(
    model: &dyn EpsModel,
    cond: &Tensor,
    classifier: &dyn GuidanceClassifier,
    config: &GuidanceConfig,
    schedule: &DiffusionSchedule,
    size: usize,
    seeds: &[u64],
) -> Result<Vec<Result<GuidanceTrace>>> {
    config.validate()?;
    if config.optimize_conditioning && cond.elem_count() == 0 {
        return Err(Error::invalid("guidance config", "optimize_conditioning needs a non-empty conditioning vector"));
    }
    if let Some(s) = classifier.image_size() {
        if s != size {
            return Err(Error::invalid("guidance", format!("classifier expects {s} pixels, sampler produces {size}")));
        }
    }
    let grid = ddim_grid(schedule.t_max, config.sampling_steps)?;
    let device = cond.device().clone();
    let dtype = cond.dtype();
    let mut results: Vec<Option<Result<GuidanceTrace>>> = (0..seeds.len()).map(|_| None).collect();
    for chunk_start in (0..seeds.len()).step_by(config.batch_size) {
        let chunk: Vec<usize> = (chunk_start..(chunk_start + config.batch_size).min(seeds.len())).collect();
        let zs: Vec<Tensor> = chunk
            .iter()
            .map(|&i| initial_latent(seeds[i], size, dtype, &device))
            .collect::<Result<_>>()?;
        let z = Tensor::cat(&zs, 0)?;
        let (l, d) = (cond.dims()[1], cond.dims()[2]);
        let c = cond.broadcast_as((chunk.len(), l, d))?.contiguous()?;
        let moments = match config.optimizer {
            LatentOptimizer::Sgd => None,
            LatentOptimizer::Adam => {
                let mk = |t: &Tensor| -> Result<Moments> {
                    Ok(Moments {
                        m: t.zeros_like()?,
                        v: t.zeros_like()?,
                        t: vec![0; chunk.len()],
                    })
                };
                Some((mk(&z)?, if config.optimize_conditioning { Some(mk(&c)?) } else { None }))
            }
        };
        let mut batch = Batch {
            seeds: chunk.iter().map(|&i| seeds[i]).collect(),
            z,
            cond: c,
            moments,
            records: vec![Vec::new(); chunk.len()],
            steps: vec![0; chunk.len()],
        };
        let mut slots: Vec<usize> = chunk.clone();
        for step in 0..=config.max_outer_steps {
            let last = step == config.max_outer_steps;
            let ev = evaluate(model, classifier, config, schedule, &grid, &batch.z, &batch.cond, !last)?;
            let mut keep = Vec::new();
            let finite = match &ev.grad_z {
                Some(g) => check_finite(g)?,
                None => vec![true; slots.len()],
            };
            for (j, &slot) in slots.iter().enumerate() {
                batch.records[j].push(TraceRecord {
                    step,
                    objective: ev.objective[j],
                    confidence: ev.confidence[j],
                });
                let met = ev.confidence[j] >= config.confidence_threshold;
                if (config.stops_at_threshold() && met) || last {
                    let termination = if met { Termination::ThresholdMet } else { Termination::MaxSteps };
                    results[slot] = Some(finish(&batch, j, termination, &ev.images));
                } else if !finite[j] || !ev.objective[j].is_finite() {
                    results[slot] = Some(Err(Error::NonFiniteGradient {
                        step,
                        seed: batch.seeds[j],
                    }));
                } else {
                    keep.push(j);
                }
            }
            if keep.is_empty() {
                break;
            }
            // Gradient step for the runs still active, then drop the finished ones.
            let gz = ev.grad_z.expect("gradients requested");
            let (mut z, mut c) = (batch.z.clone(), batch.cond.clone());
            match &mut batch.moments {
                None => {
                    z = (z - (gz * config.latent_lr)?)?;
                    if let Some(gc) = &ev.grad_cond {
                        c = (c - (gc * config.latent_lr)?)?;
                    }
                }
                Some((mz, mc)) => {
                    z = adam_update(&z, &gz, mz, config.latent_lr)?;
                    if let (Some(gc), Some(mc)) = (&ev.grad_cond, mc.as_mut()) {
                        c = adam_update(&c, gc, mc, config.latent_lr)?;
                    }
                }
            }
            for s in &mut batch.steps {
                *s += 1;
            }
            if keep.len() < slots.len() {
                z = select(&z, &keep)?;
                c = select(&c, &keep)?;
                if let Some((mz, mc)) = &mut batch.moments {
                    for mo in std::iter::once(mz).chain(mc.as_mut()) {
                        mo.m = select(&mo.m, &keep)?;
                        mo.v = select(&mo.v, &keep)?;
                        mo.t = keep.iter().map(|&j| mo.t[j]).collect();
                    }
                }
                batch.seeds = keep.iter().map(|&j| batch.seeds[j]).collect();
                batch.records = keep.iter().map(|&j| batch.records[j].clone()).collect();
                batch.steps = keep.iter().map(|&j| batch.steps[j]).collect();
                slots = keep.iter().map(|&j| slots[j]).collect();
            }
            batch.z = z.detach();
            batch.cond = c.detach();
        }
    }
    Ok(results.into_iter().map(|r| r.expect("every run finishes")).collect())
}

fn finish(batch: &Batch, j: usize, termination: Termination, images: &Tensor) -> Result<GuidanceTrace> {
    Ok(GuidanceTrace {
        seed: batch.seeds[j],
        records: batch.records[j].clone(),
        final_z_t: batch.z.narrow(0, j, 1)?.detach(),
        final_image: images.get(j)?,
        termination,
        steps_used: batch.steps[j],
    })
}

/// Single-run form of [`optimize_latents`] using `config.seed`.
pub fn optimize_latent(
    model: &dyn EpsModel,
    cond: &Tensor,
    classifier: &dyn GuidanceClassifier,
    config: &GuidanceConfig,
    schedule: &DiffusionSchedule,
    size: usize,
) -> Result<GuidanceTrace> {
    optimize_latents(model, cond, classifier, config, schedule, size, &[config.seed])?
        .pop()
        .expect("one run")
}
