//! Minimal neural network toolkit: parameters, optimisers, autodiff and a 3D U-Net.

pub mod params;
pub mod tape;
pub mod unet;

pub use params::{clip_global_norm, Adam, Ema, Init, ParamId, ParamStore};
pub use tape::{Conv3dLayer, Gradients, GroupNormLayer, LinearLayer, Tape, Var};
pub use unet::{ncdhw_to_volume, volume_to_ncdhw, Denoiser, UNet, UNetConfig};
