//! Conditional pixel-space denoiser, deterministic sampler and low-rank
//! adapters trained on tail classes.

mod denoiser;
mod lora;
mod sampler;
mod schedule;
mod train;
mod unet;

pub use denoiser::{Denoiser, EpsModel};
pub use lora::{apply_adapter, lora_finetune, LoRAAdapter, LoraConfig, LoraOutcome, UNET_PREFIX};
pub use sampler::{ddim_grid, ddim_sample, ddim_step, decode, LatentState};
pub use schedule::{cosine_alpha_bar, make_schedule, DiffusionSchedule, ScheduleKind};
pub use train::{train_diffusion, DiffusionOutcome, DiffusionTrainConfig, HeldoutSet, LossPoint};
pub use unet::{timestep_features, Conditioning, UNet, UNetConfig, COND_TABLE};
