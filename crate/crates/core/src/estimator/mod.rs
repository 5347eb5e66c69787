//! Convolutional U-Net that predicts a neural parameter map from a photo.

pub mod conv;
pub mod unet;

pub use conv::{ha_conv_forward, ConvKind, ConvLayerSpec, HaConv};
pub use unet::{estimate, UNet, UNetSpec};
