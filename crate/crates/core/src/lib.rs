//! Expression editing for talking-face frame sequences.
//!
//! The toolkit decomposes each frame into a linear morphable-model shape and
//! an extracted texture map, transforms both under a continuous emotion
//! vector (a coefficient-space GAN for the shape, latent-space editing
//! directions for the texture), smooths the per-frame codes over time and
//! re-renders the face onto the original background.
//!
//! Modules follow that flow:
//!
//! * [`morphable`] — basis algebra, coefficients, landmark fitting, synthetic
//!   emotion-labeled data.
//! * [`render`] — software rasterizer, texture extraction, masked blending.
//! * [`shape_gan`] — the coefficient-space generator/discriminator and its
//!   losses.
//! * [`texture_space`] — stacked-latent texture autoencoder and per-emotion
//!   editing directions.
//! * [`temporal`] — emotion-track interpolation and windowed smoothing.
//! * [`mouth_inpaint`] — homography-aligned mouth crops and teeth filling.
//! * [`metrics`] — intensity-linearity, Fréchet feature distance, identity
//!   similarity.
//! * [`pipeline`] — dataset ingestion, configuration, checkpoints and the
//!   end-to-end edit loop.

pub mod image;
pub mod metrics;
pub mod morphable;
pub mod mouth_inpaint;
pub mod nn;
pub mod render;
pub mod shape_gan;
pub mod tape;
pub mod temporal;
pub mod tensorfile;
pub mod texture_space;

pub use image::Image;
pub use morphable::{EmotionVector, FaceCoefficients, MorphableBasis};
