use candle_core::Tensor;

use super::denoiser::EpsModel;
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};

/// Descending uniform-stride grid `t_k = k * T / n` for `k = n..=0`.
pub fn ddim_grid(t_max: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > t_max {
        return Err(Error::invalid("ddim steps", format!("{n_steps} not in 1..={t_max}")));
    }
    Ok((0..=n_steps).rev().map(|k| k * t_max / n_steps).collect())
}

/// Deterministic update from timestep `t` to `s < t` given predicted noise.
pub fn ddim_step(schedule: &DiffusionSchedule, z: &Tensor, eps: &Tensor, t: usize, s: usize) -> Result<Tensor> {
    let (at, as_) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let x0 = ((z - (eps * (1.0 - at).sqrt())?)? / at.sqrt())?;
    Ok(((x0 * as_.sqrt())? + (eps * (1.0 - as_).sqrt())?)?)
}

/// Latents along a sampling trajectory, from `z_T` to `z_0`.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub trajectory: Vec<Tensor>,
    pub timesteps: Vec<usize>,
}

impl LatentState {
    pub fn z0(&self) -> &Tensor {
        self.trajectory.last().expect("trajectory is never empty")
    }
}

/// Decoding from latent to image space. Sampling runs in pixel space, so
/// this is the identity.
pub fn decode(z: &Tensor) -> Tensor {
    z.clone()
}

pub(crate) fn check_shapes(model: &dyn EpsModel, z: &Tensor, cond: &Tensor) -> Result<()> {
    let (b, c, h, w) = z.dims4().map_err(|_| Error::invalid("latent", "expected (B, 3, S, S)"))?;
    let (bc, _, _) = cond.dims3().map_err(|_| Error::invalid("conditioning", "expected (B, L, D)"))?;
    if c != 3 || h != w || bc != b {
        return Err(Error::invalid(
            "latent",
            format!("shape {:?} does not fit conditioning {:?}", z.dims(), cond.dims()),
        ));
    }
    if let Some(s) = model.image_size() {
        if s != h {
            return Err(Error::invalid("latent", format!("size {h} but the model expects {s}")));
        }
    }
    Ok(())
}

/// Runs the deterministic sampler and keeps every intermediate latent. The
/// returned tensors carry the autograd graph of whatever inputs were tracked.
pub fn ddim_sample(
    model: &dyn EpsModel,
    z_t: &Tensor,
    cond: &Tensor,
    schedule: &DiffusionSchedule,
    n_steps: usize,
) -> Result<LatentState> {
    check_shapes(model, z_t, cond)?;
    let grid = ddim_grid(schedule.t_max, n_steps)?;
    let mut trajectory = vec![z_t.clone()];
    for w in grid.windows(2) {
        let z = trajectory.last().expect("nonempty");
        let eps = model.predict_eps(z, w[0], cond)?;
        let next = ddim_step(schedule, z, &eps, w[0], w[1])?;
        trajectory.push(next);
    }
    Ok(LatentState {
        trajectory,
        timesteps: grid,
    })
}
