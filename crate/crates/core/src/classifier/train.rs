use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::{ClassifierConfig, ReweightMode};
use super::losses::{batch_loss, cb_weights, ldam_margins, softmax, LossKind};
use super::model::{head_forward, rows_f64, Predictions, ResNet};
use crate::corpus::{ClassTaxonomy, DatasetManifest, ImageSet, Split};
use crate::error::{Error, IoContext, Result};
use crate::eval::{auroc, balanced_accuracy, fpr_at_tpr};
use crate::nn::{json_tensor, tensor_json, CosineAdamW, ParamStore, Params};
use crate::rng::SplitMix64;

const EVAL_BATCH: usize = 256;

/// Validation metrics in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub bacc_head: f64,
    pub bacc_tail: f64,
    pub fpr_tail: f64,
    pub auc_tail: f64,
}

impl ValMetrics {
    pub fn selection_criterion(&self) -> f64 {
        self.bacc_head - self.fpr_tail
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub weights: ParamStore,
    pub config: ClassifierConfig,
    pub epoch: usize,
    pub metrics: ValMetrics,
}

impl Checkpoint {
    /// Rebuilds the network. With `trainable = false` the weights are
    /// constants, so gradients flow only to the inputs.
    pub fn network(&self, trainable: bool) -> Result<ResNet> {
        let mut store = self.weights.clone();
        let mut rng = SplitMix64::new(0);
        let mut p = Params::new(&mut store, &mut rng, trainable);
        let net = ResNet::new(
            &mut p,
            &self.config.arch()?,
            self.config.n_classes,
            self.config.head_kind(),
            self.config.output_scale(),
        )?;
        if store.len() != self.weights.len() {
            return Err(Error::invalid("checkpoint", "weights do not match the stored architecture"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extras = BTreeMap::from([
            ("__config__".to_string(), json_tensor(&self.config)?),
            ("__epoch__".to_string(), json_tensor(&self.epoch)?),
            ("__metrics__".to_string(), json_tensor(&self.metrics)?),
        ]);
        self.weights.save(path, &extras)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (weights, extras) = ParamStore::load(path, device)?;
        let get = |k: &str| {
            extras
                .get(k)
                .ok_or_else(|| Error::invalid("checkpoint", format!("{} lacks {k}", path.display())))
        };
        Ok(Self {
            config: tensor_json(get("__config__")?)?,
            epoch: tensor_json(get("__epoch__")?)?,
            metrics: tensor_json(get("__metrics__")?)?,
            weights,
        })
    }
}

/// `bAcc_head - FPR_tail`, ties going to the earliest epoch.
pub fn select_best(checkpoints: &[Checkpoint]) -> Result<&Checkpoint> {
    let mut best: Option<&Checkpoint> = None;
    for c in checkpoints {
        for v in [c.metrics.bacc_head, c.metrics.fpr_tail] {
            if !v.is_finite() {
                return Err(Error::invalid("checkpoint", format!("epoch {} has non-finite metrics", c.epoch)));
            }
        }
        let better = match best {
            None => true,
            Some(b) => {
                let (cv, bv) = (c.metrics.selection_criterion(), b.metrics.selection_criterion());
                cv > bv || (cv == bv && c.epoch < b.epoch)
            }
        };
        if better {
            best = Some(c);
        }
    }
    best.ok_or_else(|| Error::invalid("checkpoints", "empty series"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn metric_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,split,metric,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.split, r.metric, r.value);
    }
    s
}

pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        std::fs::write(path, metric_log_csv(&self.log)).ctx(|| format!("writing {}", path.display()))
    }
}

/// Runs `net` over `images` in fixed batches.
pub fn predict(net: &ResNet, images: &ImageSet, dtype: DType, device: &Device) -> Result<Predictions> {
    let mut logits = Vec::with_capacity(images.len());
    let mut features = Vec::with_capacity(images.len());
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = images.batch(chunk, None, dtype, device)?;
        let (z, f) = net.forward(&x)?;
        logits.extend(rows_f64(&net.output(&z)?)?);
        features.extend(rows_f64(&f)?);
    }
    Ok(Predictions { logits, features })
}

/// Tail probability mass per sample.
pub fn p_tail_of(logits: &[Vec<f64>], taxonomy: &ClassTaxonomy) -> Vec<f64> {
    logits
        .iter()
        .map(|row| {
            let p = softmax(row);
            taxonomy.tail_ids.iter().map(|&i| p[i]).sum()
        })
        .collect()
}

pub fn classification_metrics(
    logits: &[Vec<f64>],
    labels: &[usize],
    taxonomy: &ClassTaxonomy,
    tpr_target: f64,
) -> Result<ValMetrics> {
    let pred: Vec<usize> = Predictions {
        logits: logits.to_vec(),
        features: vec![],
    }
    .argmax();
    let is_tail: Vec<bool> = labels.iter().map(|&l| taxonomy.is_tail(l)).collect();
    let score = p_tail_of(logits, taxonomy);
    Ok(ValMetrics {
        bacc_head: 100.0 * balanced_accuracy(&pred, labels, &taxonomy.head())?,
        bacc_tail: 100.0 * balanced_accuracy(&pred, labels, &taxonomy.tail())?,
        fpr_tail: 100.0 * fpr_at_tpr(&score, &is_tail, tpr_target)?,
        auc_tail: 100.0 * auroc(&score, &is_tail)?,
    })
}

fn check_finite(loss: &Tensor, epoch: usize) -> Result<f64> {
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::invalid("training", format!("non-finite loss {v} in epoch {epoch}")));
    }
    Ok(v)
}

/// Trains a classifier on the manifest's train split and returns one
/// checkpoint per validation interval.
pub fn train_classifier(config: &ClassifierConfig, manifest: &DatasetManifest) -> Result<TrainOutcome> {
    train_classifier_on(config, manifest, &Device::Cpu)
}

pub fn train_classifier_on(config: &ClassifierConfig, manifest: &DatasetManifest, device: &Device) -> Result<TrainOutcome> {
    config.validate()?;
    let tax = &manifest.taxonomy;
    if config.n_classes != tax.n_classes() {
        return Err(Error::invalid(
            "classifier config",
            format!("n_classes {} but the taxonomy has {}", config.n_classes, tax.n_classes()),
        ));
    }
    let counts = manifest.train_class_counts();
    let empty: Vec<String> = (0..tax.n_classes()).filter(|&c| counts[c] == 0).map(|c| tax.name(c).to_string()).collect();
    if !empty.is_empty() {
        return Err(Error::invalid("train split", format!("classes without samples: {}", empty.join(" "))));
    }
    let val_records = manifest.split_records(Split::Val);
    if val_records.is_empty() {
        return Err(Error::invalid("val split", "empty"));
    }
    let train = ImageSet::load(manifest, &manifest.split_records(Split::Train), config.image_size)?;
    let val = ImageSet::load(manifest, &val_records, config.image_size)?;
    let dtype = DType::F32;

    let mut store = ParamStore::new(dtype, device);
    let mut init_rng = SplitMix64::labelled(config.seed, "classifier/init");
    let net = ResNet::new(
        &mut Params::new(&mut store, &mut init_rng, true),
        &config.arch()?,
        config.n_classes,
        config.head_kind(),
        config.output_scale(),
    )?;
    log::info!(
        "classifier: {} parameters, {} train / {} val images",
        store.n_parameters(),
        train.len(),
        val.len()
    );

    let spec = &config.loss_spec;
    let rw = &config.reweight_spec;
    let margins = match spec.kind {
        LossKind::Ldam => Some(ldam_margins(&counts, spec.ldam_max_margin)?),
        _ => None,
    };
    let weights = cb_weights(&counts, rw.beta)?;
    let tail_mask = tax.tail_mask();
    let n = train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut opt = CosineAdamW::new(
        store.vars(),
        config.base_learning_rate,
        config.weight_decay,
        config.epochs * steps_per_epoch,
    )?;

    let mut checkpoints = Vec::new();
    let mut log = Vec::new();
    let crt = rw.mode == ReweightMode::Crt;
    for epoch in 0..config.epochs {
        let w = match rw.mode {
            ReweightMode::CbReweight => Some(weights.as_slice()),
            ReweightMode::Drw if epoch >= rw.drw_start_epoch => Some(weights.as_slice()),
            _ => None,
        };
        let order = SplitMix64::labelled(config.seed, &format!("classifier/epoch/{epoch}")).permutation(n);
        let mut flip = SplitMix64::labelled(config.seed, &format!("classifier/flip/{epoch}"));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = train.batch(chunk, config.augment_flip.then_some(&mut flip), dtype, device)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (z, _) = net.forward(&x)?;
            let loss = batch_loss(spec, &z, &labels, w, margins.as_deref(), &tail_mask)?;
            total += check_finite(&loss, epoch)? * chunk.len() as f64;
            opt.step(&loss.backward()?)?;
        }
        log.push(LogRow {
            epoch: epoch + 1,
            split: "train".into(),
            metric: "loss".into(),
            value: total / n as f64,
        });
        let due = (epoch + 1) % config.eval_interval == 0 || epoch + 1 == config.epochs;
        if due && !crt {
            let m = evaluate(&net, &val, tax, config, dtype, device)?;
            push_metrics(&mut log, epoch + 1, &m);
            checkpoints.push(Checkpoint {
                weights: store.snapshot()?,
                config: config.clone(),
                epoch: epoch + 1,
                metrics: m,
            });
        }
    }

    if crt {
        retrain_head(config, &mut store, net, &train, &val, tax, &mut checkpoints, &mut log, device)?;
    }
    Ok(TrainOutcome { checkpoints, log })
}

fn evaluate(
    net: &ResNet,
    val: &ImageSet,
    tax: &ClassTaxonomy,
    config: &ClassifierConfig,
    dtype: DType,
    device: &Device,
) -> Result<ValMetrics> {
    let pred = predict(net, val, dtype, device)?;
    classification_metrics(&pred.logits, &val.labels, tax, config.tpr_target)
}

fn push_metrics(log: &mut Vec<LogRow>, epoch: usize, m: &ValMetrics) {
    for (name, v) in [
        ("bacc_head", m.bacc_head),
        ("bacc_tail", m.bacc_tail),
        ("fpr_tail", m.fpr_tail),
        ("auc_tail", m.auc_tail),
    ] {
        log.push(LogRow {
            epoch,
            split: "val".into(),
            metric: name.into(),
            value: v,
        });
    }
}

/// Classifier re-training: frozen features, fresh head, class-balanced
/// sampling with replacement.
#[allow(clippy::too_many_arguments)]
fn retrain_head(
    config: &ClassifierConfig,
    store: &mut ParamStore,
    mut net: ResNet,
    train: &ImageSet,
    val: &ImageSet,
    tax: &ClassTaxonomy,
    checkpoints: &mut Vec<Checkpoint>,
    log: &mut Vec<LogRow>,
    device: &Device,
) -> Result<()> {
    let dtype = store.dtype();
    let feats = predict(&net, train, dtype, device)?.features;
    let d = feats[0].len();
    let feats = Tensor::from_vec(feats.concat(), (train.len(), d), device)?.to_dtype(dtype)?;

    let mut rng = SplitMix64::labelled(config.seed, "classifier/crt/head");
    let fresh = {
        let mut s = ParamStore::new(dtype, device);
        ResNet::new_head(&mut Params::new(&mut s, &mut rng, true), d, config.n_classes, config.head_kind())?;
        s
    };
    for name in fresh.names() {
        store.set(name, fresh.get(name).expect("listed").as_tensor())?;
    }
    net.head = ResNet::new_head(&mut Params::new(store, &mut rng, true), d, config.n_classes, config.head_kind())?;

    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); config.n_classes];
    for (i, &l) in train.labels.iter().enumerate() {
        by_class[l].push(i as u32);
    }
    let epochs = config.reweight_spec.crt_epochs;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let mut opt = CosineAdamW::new(
        store.vars_with_prefix("head"),
        config.base_learning_rate,
        config.weight_decay,
        epochs * steps_per_epoch,
    )?;
    let tail_mask = tax.tail_mask();
    let counts = train_counts(&train.labels, config.n_classes);
    let margins = match config.loss_spec.kind {
        LossKind::Ldam => Some(ldam_margins(&counts, config.loss_spec.ldam_max_margin)?),
        _ => None,
    };
    for e in 0..epochs {
        let epoch = config.epochs + e + 1;
        let mut draw = SplitMix64::labelled(config.seed, &format!("classifier/crt/epoch/{e}"));
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let mut idx = Vec::with_capacity(config.batch_size);
            let mut labels = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let c = draw.below(config.n_classes);
                idx.push(by_class[c][draw.below(by_class[c].len())]);
                labels.push(c);
            }
            let x = feats.index_select(&Tensor::new(idx.as_slice(), device)?, 0)?;
            let z = head_forward(&net.head, net.head_kind, &x)?;
            let loss = batch_loss(&config.loss_spec, &z, &labels, None, margins.as_deref(), &tail_mask)?;
            total += check_finite(&loss, epoch)?;
            opt.step(&loss.backward()?)?;
        }
        log.push(LogRow {
            epoch,
            split: "train".into(),
            metric: "crt_loss".into(),
            value: total / steps_per_epoch as f64,
        });
        if (e + 1) % config.eval_interval == 0 || e + 1 == epochs {
            let m = evaluate(&net, val, tax, config, dtype, device)?;
            push_metrics(log, epoch, &m);
            checkpoints.push(Checkpoint {
                weights: store.snapshot()?,
                config: config.clone(),
                epoch,
                metrics: m,
            });
        }
    }
    Ok(())
}

fn train_counts(labels: &[usize], n: usize) -> Vec<usize> {
    let mut c = vec![0; n];
    for &l in labels {
        c[l] += 1;
    }
    c
}
