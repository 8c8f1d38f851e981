use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::schedule::DiffusionSchedule;
use super::unet::{Conditioning, UNet, UNetConfig};
use crate::corpus::{DatasetManifest, ImageSet, Record, Split};
use crate::error::{Error, Result};
use crate::nn::{randn, CosineAdamW};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Probability of replacing a sample's class with the null embedding.
    pub cond_dropout: f64,
    pub seed: u64,
    /// Steps between held-out evaluations.
    pub eval_every: usize,
    #[serde(default = "default_true")]
    pub augment_flip: bool,
}

fn default_true() -> bool {
    true
}

impl DiffusionTrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            steps: 4000,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            cond_dropout: 0.1,
            seed,
            eval_every: 500,
            augment_flip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("diffusion config", "steps, batch_size and eval_every must be > 0"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid("diffusion config", "learning_rate must be > 0 and cond_dropout in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

pub struct DiffusionOutcome {
    pub denoiser: Denoiser,
    pub curve: Vec<LossPoint>,
}

/// Per-sample noisy inputs `sqrt(a) x0 + sqrt(1 - a) eps`.
pub(crate) fn noisy(x0: &Tensor, eps: &Tensor, schedule: &DiffusionSchedule, ts: &[usize]) -> Result<Tensor> {
    let dev = x0.device();
    let a: Vec<f32> = ts.iter().map(|&t| schedule.alpha_bar(t).sqrt() as f32).collect();
    let s: Vec<f32> = ts.iter().map(|&t| (1.0 - schedule.alpha_bar(t)).sqrt() as f32).collect();
    let a = Tensor::from_vec(a, (ts.len(), 1, 1, 1), dev)?.to_dtype(x0.dtype())?;
    let s = Tensor::from_vec(s, (ts.len(), 1, 1, 1), dev)?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Fixed noise and timesteps for comparing denoisers on the same images.
pub struct HeldoutSet {
    pub images: ImageSet,
    pub classes: Vec<usize>,
    pub ts: Vec<usize>,
    pub noise: Tensor,
}

impl HeldoutSet {
    pub fn new(
        manifest: &DatasetManifest,
        records: &[Record],
        size: usize,
        schedule: &DiffusionSchedule,
        seed: u64,
        device: &Device,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("held-out set", "no records"));
        }
        let images = ImageSet::load(manifest, records, size)?;
        let mut rng = SplitMix64::labelled(seed, "diffusion/heldout");
        let ts: Vec<usize> = (0..images.len()).map(|_| 1 + rng.below(schedule.t_max)).collect();
        let noise = randn(&mut rng, &[images.len(), 3, size, size], DType::F32, device)?;
        Ok(Self {
            classes: images.labels.clone(),
            images,
            ts,
            noise,
        })
    }

    /// Mean squared noise-prediction error.
    pub fn mse(&self, unet: &UNet, cond: &Conditioning, schedule: &DiffusionSchedule) -> Result<f64> {
        let dev = self.noise.device();
        let mut total = 0.0;
        let idx: Vec<usize> = (0..self.images.len()).collect();
        for chunk in idx.chunks(64) {
            let x0 = self.images.batch(chunk, None, DType::F32, dev)?;
            let start = chunk[0];
            let eps = self.noise.narrow(0, start, chunk.len())?;
            let ts = &self.ts[start..start + chunk.len()];
            let zt = noisy(&x0, &eps, schedule, ts)?;
            let classes: Vec<Option<usize>> = chunk.iter().map(|&i| Some(self.classes[i])).collect();
            let pred = unet.forward(&zt, ts, &cond.tokens(&classes)?)?;
            let se = (pred - eps)?.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            total += se;
        }
        Ok(total / self.noise.elem_count() as f64)
    }
}

/// Trains an epsilon-prediction denoiser on the train split with class
/// conditioning and conditioning dropout. Held-out loss uses the val split.
pub fn train_diffusion(
    manifest: &DatasetManifest,
    unet_config: &UNetConfig,
    schedule: &DiffusionSchedule,
    config: &DiffusionTrainConfig,
) -> Result<DiffusionOutcome> {
    config.validate()?;
    schedule.validate()?;
    let device = Device::Cpu;
    let train_records = manifest.split_records(Split::Train);
    if train_records.is_empty() {
        return Err(Error::invalid("diffusion training", "empty train split"));
    }
    let size = unet_config.image_size;
    let train = ImageSet::load(manifest, &train_records, size)?;
    let mut val_records = manifest.split_records(Split::Val);
    if val_records.is_empty() {
        val_records = train_records.clone();
    }
    let heldout = HeldoutSet::new(manifest, &val_records, size, schedule, config.seed, &device)?;

    let denoiser = Denoiser::init(unet_config, schedule.clone(), manifest.taxonomy.n_classes(), config.seed, &device)?;
    let (unet, cond) = denoiser.network(true)?;
    let mut opt = CosineAdamW::new(denoiser.store.vars(), config.learning_rate, config.weight_decay, config.steps)?;
    let mut rng = SplitMix64::labelled(config.seed, "diffusion/train");
    let mut curve = vec![LossPoint {
        step: 0,
        train_loss: f64::NAN,
        heldout_loss: heldout.mse(&unet, &cond, schedule)?,
    }];
    let mut order: Vec<usize> = Vec::new();
    let mut running = 0.0;
    let mut since = 0usize;
    for step in 1..=config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size {
            if order.is_empty() {
                order = rng.permutation(train.len());
            }
            idx.push(order.pop().expect("refilled"));
        }
        let x0 = train.batch(&idx, config.augment_flip.then_some(&mut rng), DType::F32, &device)?;
        let ts: Vec<usize> = idx.iter().map(|_| 1 + rng.below(schedule.t_max)).collect();
        let classes: Vec<Option<usize>> = idx
            .iter()
            .map(|&i| (!rng.bernoulli(config.cond_dropout)).then_some(train.labels[i]))
            .collect();
        let eps = randn(&mut rng, x0.dims(), DType::F32, &device)?;
        let zt = noisy(&x0, &eps, schedule, &ts)?;
        let pred = unet.forward(&zt, &ts, &cond.tokens(&classes)?)?;
        let loss = (pred - eps)?.sqr()?.mean_all()?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::invalid("diffusion training", format!("non-finite loss at step {step}")));
        }
        running += v;
        since += 1;
        opt.step(&loss.backward()?)?;
        if step % config.eval_every == 0 || step == config.steps {
            let h = heldout.mse(&unet, &cond, schedule)?;
            log::info!("diffusion step {step}: train {:.4} held-out {h:.4}", running / since as f64);
            curve.push(LossPoint {
                step,
                train_loss: running / since as f64,
                heldout_loss: h,
            });
            running = 0.0;
            since = 0;
        }
    }
    Ok(DiffusionOutcome { denoiser, curve })
}
