//! Parameter storage and the few layers the classifier and denoiser share.

mod layers;
mod optim;
mod store;

pub use layers::{Conv2d, GroupNorm, Linear, LowRank};
pub use optim::{cosine_lr, CosineAdamW};
pub use store::{json_tensor, randn, tensor_json, Init, ParamStore, Params};
