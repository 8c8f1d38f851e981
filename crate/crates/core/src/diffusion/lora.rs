use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::train::{noisy, HeldoutSet, LossPoint};
use super::unet::UNet;
use crate::corpus::{DatasetManifest, ImageSet, Split};
use crate::error::{Error, Result};
use crate::nn::{json_tensor, randn, tensor_json, CosineAdamW, Linear, LowRank, ParamStore};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub augment_flip: bool,
    pub eval_every: usize,
}

fn default_true() -> bool {
    true
}

impl LoraConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            learning_rate: 1e-4,
            steps: 2000,
            batch_size: 16,
            seed,
            augment_flip: true,
            eval_every: 500,
        }
    }

    /// Longer schedule for 512-pixel images.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            steps: 15000,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("lora config", "rank, steps, batch_size and eval_every must be > 0"));
        }
        if !(self.learning_rate > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::invalid("lora config", "learning_rate and alpha must be > 0"));
        }
        Ok(())
    }
}

/// Low-rank updates `W' = W + scale * (alpha / rank) * B A` per target layer.
#[derive(Debug, Clone)]
pub struct LoRAAdapter {
    pub rank: usize,
    pub alpha: f64,
    /// Target name to `(A: r x d_in, B: d_out x r)`.
    pub layers: BTreeMap<String, (Tensor, Tensor)>,
}

impl LoRAAdapter {
    /// Untrained adapter for every attention projection of `base`, as used at
    /// the start of finetuning.
    pub fn init(base: &Denoiser, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let (mut unet, _) = base.network(false)?;
        let vars = attach(&mut unet, rank, alpha, seed, base.store.device())?;
        let layers = vars
            .into_iter()
            .map(|(k, (a, b))| (k, (a.as_tensor().clone(), b.as_tensor().clone())))
            .collect();
        Ok(Self { rank, alpha, layers })
    }

    /// Installs the factors on `unet` without merging, scaled by `scale`.
    pub fn attach_to(&self, unet: &mut UNet, scale: f64) -> Result<()> {
        let mut linears: BTreeMap<String, &mut Linear> = unet.attention_linears_mut().into_iter().collect();
        let missing: Vec<String> = self.layers.keys().filter(|t| !linears.contains_key(*t)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::MissingTargets(missing));
        }
        for (target, (a, b)) in &self.layers {
            let lin = linears.get_mut(target).expect("checked");
            let dtype = lin.weight.dtype();
            lin.low_rank = Some(LowRank {
                a: a.to_dtype(dtype)?,
                b: b.to_dtype(dtype)?,
                factor: scale * self.factor(),
            });
        }
        Ok(())
    }

    pub fn factor(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `B A` scaled by `alpha / rank`, the weight delta at scale 1, in f64.
    pub fn delta(&self, target: &str) -> Result<Tensor> {
        let (a, b) = self
            .layers
            .get(target)
            .ok_or_else(|| Error::MissingTargets(vec![target.to_string()]))?;
        Ok((b.to_dtype(DType::F64)?.matmul(&a.to_dtype(DType::F64)?)? * self.factor())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let store = ParamStore::new(DType::F32, &Device::Cpu);
        let mut tensors = BTreeMap::new();
        for (name, (a, b)) in &self.layers {
            tensors.insert(format!("{name}.a"), a.clone());
            tensors.insert(format!("{name}.b"), b.clone());
        }
        let mut extras = BTreeMap::from([
            ("__rank__".to_string(), json_tensor(&self.rank)?),
            ("__alpha__".to_string(), json_tensor(&self.alpha)?),
        ]);
        for (k, t) in tensors {
            extras.insert(format!("__layer__{k}"), t);
        }
        store.save(path, &extras)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (_, extras) = ParamStore::load(path, device)?;
        let get = |k: &str| {
            extras
                .get(k)
                .ok_or_else(|| Error::invalid("adapter file", format!("{} lacks {k}", path.display())))
        };
        let rank = tensor_json(get("__rank__")?)?;
        let alpha = tensor_json(get("__alpha__")?)?;
        let mut layers = BTreeMap::new();
        for (k, t) in &extras {
            if let Some(name) = k.strip_prefix("__layer__").and_then(|n| n.strip_suffix(".a")) {
                let b = get(&format!("__layer__{name}.b"))?;
                layers.insert(name.to_string(), (t.clone(), b.clone()));
            }
        }
        Ok(Self { rank, alpha, layers })
    }
}

pub const UNET_PREFIX: &str = "unet.";

/// Merged weights of `base` plus `scale` times the adapter's deltas.
pub fn apply_adapter(base: &Denoiser, adapter: &LoRAAdapter, scale: f64) -> Result<Denoiser> {
    let missing: Vec<String> = adapter
        .layers
        .keys()
        .filter(|t| base.store.get(&format!("{UNET_PREFIX}{t}.weight")).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTargets(missing));
    }
    let merged = base.store.snapshot()?;
    if scale != 0.0 {
        for (target, (a, b)) in &adapter.layers {
            let name = format!("{UNET_PREFIX}{target}.weight");
            let w = merged.get(&name).expect("checked").as_tensor().to_dtype(DType::F64)?;
            let delta = b.to_dtype(DType::F64)?.matmul(&a.to_dtype(DType::F64)?)?;
            if delta.dims() != w.dims() {
                return Err(Error::invalid(
                    "adapter",
                    format!("{target}: delta {:?} does not match weight {:?}", delta.dims(), w.dims()),
                ));
            }
            merged.set(&name, &(w + (delta * (scale * adapter.factor()))?)?)?;
        }
    }
    Ok(Denoiser {
        store: merged,
        ..base.clone()
    })
}

/// Attaches fresh adapter variables (`A` normal, `B` zero) to every
/// attention projection of `unet`.
fn attach(unet: &mut UNet, rank: usize, alpha: f64, seed: u64, device: &Device) -> Result<BTreeMap<String, (Var, Var)>> {
    let mut rng = SplitMix64::labelled(seed, "lora/init");
    let mut vars = BTreeMap::new();
    for (name, lin) in unet.attention_linears_mut() {
        let (d_out, d_in) = lin.weight.dims2()?;
        let a = Var::from_tensor(&(randn(&mut rng, &[rank, d_in], DType::F32, device)? / (d_in as f64).sqrt())?)?;
        let b = Var::from_tensor(&Tensor::zeros((d_out, rank), DType::F32, device)?)?;
        lin.low_rank = Some(LowRank {
            a: a.as_tensor().clone(),
            b: b.as_tensor().clone(),
            factor: alpha / rank as f64,
        });
        vars.insert(name, (a, b));
    }
    Ok(vars)
}

pub struct LoraOutcome {
    pub adapter: LoRAAdapter,
    pub curve: Vec<LossPoint>,
}

/// Trains adapter matrices on a tail-only manifest with the base weights frozen.
///
/// Any head-class record in the manifest is rejected. Held-out loss is
/// tracked on the manifest's val split when it has records.
pub fn lora_finetune(base: &Denoiser, manifest: &DatasetManifest, config: &LoraConfig) -> Result<LoraOutcome> {
    config.validate()?;
    let tax = &manifest.taxonomy;
    let head_records: Vec<&str> = manifest
        .records
        .iter()
        .filter(|r| !tax.is_tail(r.class_id))
        .map(|r| r.sample_id.as_str())
        .collect();
    if !head_records.is_empty() {
        return Err(Error::invalid(
            "lora manifest",
            format!(
                "adapter finetuning uses tail classes only; found {} head records (first: {})",
                head_records.len(),
                head_records[0]
            ),
        ));
    }
    if tax.n_classes() != base.n_classes {
        return Err(Error::invalid("lora manifest", "taxonomy does not match the denoiser's classes"));
    }
    let train_records = manifest.split_records(Split::Train);
    if train_records.is_empty() {
        return Err(Error::invalid("lora manifest", "empty train split"));
    }
    let device = base.store.device().clone();
    let size = base.config.image_size;
    let schedule = &base.schedule;
    let train = ImageSet::load(manifest, &train_records, size)?;
    let val_records = manifest.split_records(Split::Val);
    let heldout = if val_records.is_empty() {
        None
    } else {
        Some(HeldoutSet::new(manifest, &val_records, size, schedule, config.seed, &device)?)
    };

    let (mut unet, cond) = base.network(false)?;
    let vars = attach(&mut unet, config.rank, config.alpha, config.seed, &device)?;
    let trainable: Vec<Var> = vars.values().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
    let mut opt = CosineAdamW::new(trainable, config.learning_rate, 0.0, config.steps)?;
    let mut rng = SplitMix64::labelled(config.seed, "lora/train");
    let mse = |unet: &UNet| -> Result<f64> {
        match &heldout {
            Some(h) => h.mse(unet, &cond, schedule),
            None => Ok(f64::NAN),
        }
    };
    let mut curve = vec![LossPoint {
        step: 0,
        train_loss: f64::NAN,
        heldout_loss: mse(&unet)?,
    }];
    let mut order: Vec<usize> = Vec::new();
    let (mut running, mut since) = (0.0, 0usize);
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
        let classes: Vec<Option<usize>> = idx.iter().map(|&i| Some(train.labels[i])).collect();
        let eps = randn(&mut rng, x0.dims(), DType::F32, &device)?;
        let zt = noisy(&x0, &eps, schedule, &ts)?;
        let pred = unet.forward(&zt, &ts, &cond.tokens(&classes)?)?;
        let loss = (pred - eps)?.sqr()?.mean_all()?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::invalid("lora training", format!("non-finite loss at step {step}")));
        }
        running += v;
        since += 1;
        opt.step(&loss.backward()?)?;
        if step % config.eval_every == 0 || step == config.steps {
            let h = mse(&unet)?;
            log::info!("lora step {step}: train {:.4} held-out {h:.4}", running / since as f64);
            curve.push(LossPoint {
                step,
                train_loss: running / since as f64,
                heldout_loss: h,
            });
            running = 0.0;
            since = 0;
        }
    }
    let layers = vars
        .into_iter()
        .map(|(k, (a, b))| Ok((k, (a.as_tensor().copy()?, b.as_tensor().copy()?))))
        .collect::<Result<_>>()?;
    Ok(LoraOutcome {
        adapter: LoRAAdapter {
            rank: config.rank,
            alpha: config.alpha,
            layers,
        },
        curve,
    })
}
