use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::schedule::DiffusionSchedule;
use super::unet::{Conditioning, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{json_tensor, tensor_json, ParamStore, Params};
use crate::rng::SplitMix64;

/// Noise predictor used by the sampler.
pub trait EpsModel {
    /// `z: (B, 3, S, S)`, shared timestep `t`, `cond: (B, L, D)`.
    fn predict_eps(&self, z: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor>;

    /// Expected spatial size of the input, if fixed.
    fn image_size(&self) -> Option<usize> {
        None
    }
}

impl EpsModel for UNet {
    fn predict_eps(&self, z: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self.forward(z, &[t], cond)
    }

    fn image_size(&self) -> Option<usize> {
        Some(UNet::image_size(self))
    }
}

/// Denoiser weights together with the schedule and conditioning table.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub store: ParamStore,
    pub config: UNetConfig,
    pub schedule: DiffusionSchedule,
    pub n_classes: usize,
}

impl Denoiser {
    pub fn init(config: &UNetConfig, schedule: DiffusionSchedule, n_classes: usize, seed: u64, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32, device);
        let mut rng = SplitMix64::labelled(seed, "diffusion/init");
        {
            let mut p = Params::new(&mut store, &mut rng, true);
            UNet::new(&mut p.push("unet"), config)?;
            Conditioning::new(&mut p, n_classes, config)?;
        }
        Ok(Self {
            store,
            config: config.clone(),
            schedule,
            n_classes,
        })
    }

    /// Builds the network and conditioning table. With `trainable = false`
    /// weights are constants and gradients reach only the inputs.
    pub fn network(&self, trainable: bool) -> Result<(UNet, Conditioning)> {
        let mut store = self.store.clone();
        let mut rng = SplitMix64::new(0);
        let mut p = Params::new(&mut store, &mut rng, trainable);
        let unet = UNet::new(&mut p.push("unet"), &self.config)?;
        let cond = Conditioning::new(&mut p, self.n_classes, &self.config)?;
        if store.len() != self.store.len() {
            return Err(Error::invalid("denoiser", "weights do not match the stored configuration"));
        }
        Ok((unet, cond))
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            store: self.store.to_dtype(dtype)?,
            ..self.clone()
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extras = BTreeMap::from([
            ("__unet__".to_string(), json_tensor(&self.config)?),
            ("__schedule__".to_string(), json_tensor(&self.schedule)?),
            ("__n_classes__".to_string(), json_tensor(&self.n_classes)?),
        ]);
        self.store.save(path, &extras)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (store, extras) = ParamStore::load(path, device)?;
        let get = |k: &str| {
            extras
                .get(k)
                .ok_or_else(|| Error::invalid("denoiser file", format!("{} lacks {k}", path.display())))
        };
        Ok(Self {
            config: tensor_json(get("__unet__")?)?,
            schedule: tensor_json(get("__schedule__")?)?,
            n_classes: tensor_json(get("__n_classes__")?)?,
            store,
        })
    }
}
