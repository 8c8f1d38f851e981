use candle_core::{DType, Device, Tensor, Var};
use logex::corpus::{generate_toy_corpus, CorpusSpec, Split};
use logex::diffusion::*;
use logex::nn::randn;
use logex::rng::SplitMix64;
use nalgebra::DMatrix;

fn tiny_unet(size: usize) -> UNetConfig {
    UNetConfig {
        image_size: size,
        base_channels: 4,
        cond_tokens: 2,
        cond_dim: 4,
        heads: 2,
        groups: 2,
    }
}

fn tiny_denoiser(size: usize, dtype: DType) -> Denoiser {
    let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
    Denoiser::init(&tiny_unet(size), s, 3, 5, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

struct Zero;
impl EpsModel for Zero {
    fn predict_eps(&self, z: &Tensor, _t: usize, _c: &Tensor) -> logex::Result<Tensor> {
        Ok(z.zeros_like()?)
    }
}

struct Scaled(f64);
impl EpsModel for Scaled {
    fn predict_eps(&self, z: &Tensor, _t: usize, _c: &Tensor) -> logex::Result<Tensor> {
        Ok((z * self.0)?)
    }
}

fn latent(seed: u64, size: usize) -> Tensor {
    randn(&mut SplitMix64::new(seed), &[1, 3, size, size], DType::F64, &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

#[test]
fn zero_noise_prediction_single_step() {
    let s = make_schedule(50, ScheduleKind::Linear).unwrap();
    let z = latent(1, 4);
    let cond = Tensor::zeros((1, 1, 1), DType::F64, &Device::Cpu).unwrap();
    let out = ddim_sample(&Zero, &z, &cond, &s, 1).unwrap();
    let expect = (&z / s.alpha_bar(50).sqrt()).unwrap();
    assert_eq!(out.timesteps, vec![50, 0]);
    assert!(max_abs_diff(out.z0(), &expect) < 1e-12);
}

#[test]
fn linear_noise_model_two_steps_closed_form() {
    let s = make_schedule(200, ScheduleKind::Cosine).unwrap();
    let c = 0.3;
    let z = latent(2, 4);
    let cond = Tensor::zeros((1, 1, 1), DType::F64, &Device::Cpu).unwrap();
    let out = ddim_sample(&Scaled(c), &z, &cond, &s, 2).unwrap();
    // With eps = c z, each update multiplies z by
    // sqrt(a_s) (1 - c sqrt(1 - a_t)) / sqrt(a_t) + c sqrt(1 - a_s).
    let k = |t: usize, u: usize| {
        let (at, au) = (s.alpha_bar(t), s.alpha_bar(u));
        au.sqrt() * (1.0 - c * (1.0 - at).sqrt()) / at.sqrt() + c * (1.0 - au).sqrt()
    };
    let expect = (&z * (k(200, 100) * k(100, 0))).unwrap();
    assert!(max_abs_diff(out.z0(), &expect) < 1e-12);
}

#[test]
fn sampler_is_bit_deterministic() {
    let d = tiny_denoiser(8, DType::F32);
    let (unet, cond) = d.network(false).unwrap();
    let z = latent(3, 8).to_dtype(DType::F32).unwrap();
    let c = cond.tokens(&[Some(1)]).unwrap();
    let a = ddim_sample(&unet, &z, &c, &d.schedule, 5).unwrap();
    let b = ddim_sample(&unet, &z, &c, &d.schedule, 5).unwrap();
    let va: Vec<f32> = a.z0().flatten_all().unwrap().to_vec1().unwrap();
    let vb: Vec<f32> = b.z0().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(va, vb);
    assert!(ddim_sample(&unet, &latent(3, 4).to_dtype(DType::F32).unwrap(), &c, &d.schedule, 5).is_err());
    assert!(ddim_sample(&unet, &z, &c, &d.schedule, 11).is_err());
}

#[test]
fn sampler_vjp_matches_finite_differences() {
    let d = tiny_denoiser(4, DType::F64);
    let (unet, cond) = d.network(false).unwrap();
    let c = cond.tokens(&[Some(0)]).unwrap();
    let z = latent(4, 4);
    let w = latent(5, 4);
    let v = latent(6, 4);
    let objective = |z: &Tensor| -> Tensor {
        let out = ddim_sample(&unet, z, &c, &d.schedule, 2).unwrap();
        (out.z0() * &w).unwrap().sum_all().unwrap()
    };
    let zv = Var::from_tensor(&z).unwrap();
    let grads = objective(zv.as_tensor()).backward().unwrap();
    let g = grads.get(&zv).unwrap();
    let analytic: f64 = (g * &v).unwrap().sum_all().unwrap().to_scalar().unwrap();
    let h = 1e-3;
    let plus: f64 = objective(&(&z + (&v * h).unwrap()).unwrap()).to_scalar().unwrap();
    let minus: f64 = objective(&(&z - (&v * h).unwrap()).unwrap()).to_scalar().unwrap();
    let fd = (plus - minus) / (2.0 * h);
    assert!((fd - analytic).abs() / analytic.abs().max(1e-8) < 1e-2, "fd {fd} vs autograd {analytic}");
}

fn fake_adapter(d: &Denoiser, rank: usize, seed: u64, zero_b: bool) -> LoRAAdapter {
    let mut rng = SplitMix64::new(seed);
    let mut layers = std::collections::BTreeMap::new();
    for name in d.store.names() {
        if let Some(t) = name.strip_prefix(UNET_PREFIX).and_then(|n| n.strip_suffix(".weight")) {
            if t.contains("attn.") && t.contains(".to_") {
                let (o, i) = d.store.get(name).unwrap().as_tensor().dims2().unwrap();
                let a = randn(&mut rng, &[rank, i], DType::F64, &Device::Cpu).unwrap();
                let b = if zero_b {
                    Tensor::zeros((o, rank), DType::F64, &Device::Cpu).unwrap()
                } else {
                    randn(&mut rng, &[o, rank], DType::F64, &Device::Cpu).unwrap()
                };
                layers.insert(t.to_string(), (a, b));
            }
        }
    }
    assert_eq!(layers.len(), 24);
    LoRAAdapter { rank, alpha: 2.0, layers }
}

#[test]
fn adapter_scale_zero_and_zero_up_matrix_are_neutral() {
    let d = tiny_denoiser(8, DType::F64);
    let z = latent(7, 8);
    let run = |den: &Denoiser| -> Vec<f64> {
        let (u, c) = den.network(false).unwrap();
        let tok = c.tokens(&[Some(2)]).unwrap();
        ddim_sample(&u, &z, &tok, &den.schedule, 3).unwrap().z0().flatten_all().unwrap().to_vec1().unwrap()
    };
    let base = run(&d);
    assert_eq!(run(&apply_adapter(&d, &fake_adapter(&d, 4, 1, true), 1.0).unwrap()), base);
    assert_eq!(run(&apply_adapter(&d, &fake_adapter(&d, 4, 1, false), 0.0).unwrap()), base);
    assert_ne!(run(&apply_adapter(&d, &fake_adapter(&d, 4, 1, false), 1.0).unwrap()), base);
}

#[test]
fn adapter_is_linear_in_scale_and_low_rank() {
    let d = tiny_denoiser(8, DType::F64);
    let ad = fake_adapter(&d, 2, 9, false);
    let twice = apply_adapter(&apply_adapter(&d, &ad, 1.0).unwrap(), &ad, 1.0).unwrap();
    let summed = apply_adapter(&d, &ad, 2.0).unwrap();
    for t in ad.layers.keys() {
        let name = format!("{UNET_PREFIX}{t}.weight");
        let a = twice.store.get(&name).unwrap().as_tensor();
        let b = summed.store.get(&name).unwrap().as_tensor();
        assert!(max_abs_diff(a, b) < 1e-12, "{t}");
        let base = d.store.get(&name).unwrap().as_tensor();
        let delta = (a - base).unwrap();
        let (r, c) = delta.dims2().unwrap();
        let m = DMatrix::from_row_slice(r, c, &delta.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let sv = m.singular_values();
        let top = sv.max();
        assert!(sv.iter().filter(|&&s| s > 1e-9 * top).count() <= 2, "{t}");
    }
}

#[test]
fn adapter_with_unknown_target_lists_missing_layers() {
    let d = tiny_denoiser(8, DType::F64);
    let mut ad = fake_adapter(&d, 2, 1, false);
    let (a, b) = ad.layers.values().next().unwrap().clone();
    ad.layers.insert("nowhere.to_q".into(), (a, b));
    match apply_adapter(&d, &ad, 1.0) {
        Err(logex::Error::MissingTargets(m)) => assert_eq!(m, vec!["nowhere.to_q".to_string()]),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn training_and_finetuning_on_a_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        n_classes: 4,
        n_head_classes: 2,
        head_count_per_class: 16,
        tail_count_per_class: 6,
        val_head_count: 4,
        val_tail_count: 4,
        test_count_per_class: 2,
        image_size: 8,
        texture_seed: 1,
        feature_strength: 1.0,
    };
    let m = generate_toy_corpus(&spec, dir.path()).unwrap();
    let schedule = make_schedule(20, ScheduleKind::Cosine).unwrap();
    let mut cfg = DiffusionTrainConfig::desk(3);
    cfg.steps = 40;
    cfg.batch_size = 8;
    cfg.eval_every = 20;
    cfg.learning_rate = 3e-3;
    let unet = UNetConfig {
        base_channels: 8,
        groups: 4,
        ..tiny_unet(8)
    };
    let a = train_diffusion(&m, &unet, &schedule, &cfg).unwrap();
    let b = train_diffusion(&m, &unet, &schedule, &cfg).unwrap();
    let (first, last) = (a.curve[0].heldout_loss, a.curve.last().unwrap().heldout_loss);
    assert!(last < first, "held-out loss {first} -> {last}");
    assert_eq!(a.curve.last().unwrap().train_loss, b.curve.last().unwrap().train_loss);
    assert_eq!(a.denoiser.store.checksum().unwrap(), b.denoiser.store.checksum().unwrap());

    let tail_only = m.filtered(|r| m.taxonomy.is_tail(r.class_id));
    let before = a.denoiser.store.checksum().unwrap();
    let mut lcfg = LoraConfig::desk(0);
    lcfg.steps = 10;
    lcfg.batch_size = 4;
    lcfg.eval_every = 5;
    lcfg.learning_rate = 1e-2;
    let out = lora_finetune(&a.denoiser, &tail_only, &lcfg).unwrap();
    assert_eq!(a.denoiser.store.checksum().unwrap(), before);
    assert_eq!(out.adapter.layers.len(), 24);
    for (t, (a_m, b_m)) in &out.adapter.layers {
        assert_eq!(a_m.dims()[0], 4, "{t}");
        assert_eq!(b_m.dims()[1], 4, "{t}");
    }
    let path = dir.path().join("adapter.safetensors");
    out.adapter.save(&path).unwrap();
    let back = LoRAAdapter::load(&path, &Device::Cpu).unwrap();
    assert_eq!(back.layers.len(), 24);
    assert_eq!(back.rank, 4);

    let err = lora_finetune(&a.denoiser, &m, &lcfg).err().expect("head records rejected");
    assert!(err.to_string().contains("head"), "{err}");
    assert!(m.split(Split::Train).any(|r| !m.taxonomy.is_tail(r.class_id)));
}
