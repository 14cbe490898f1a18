//! Inserting a Gaussian-splat object into a splat scene and re-lighting its
//! colours with two-step DDS guidance.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f32`, with `*64` variants for reference checks.

pub mod backend;
pub mod fixtures;
pub mod cloud;
pub mod geom;
pub mod guidance;
pub mod image_io;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod personalize;
pub mod ply;
pub mod relight;
pub mod render;
pub mod scalar;
pub mod sh;

pub use scalar::Real;

pub type Cloud = cloud::GaussianCloud<f32>;
pub type Cloud64 = cloud::GaussianCloud<f64>;
pub type Gaussian = cloud::Gaussian<f32>;
pub type InsertionSpec = cloud::InsertionSpec<f32>;
pub type Camera = render::Camera<f32>;
pub type Camera64 = render::Camera<f64>;
pub type RenderBundle = render::RenderBundle<f32>;
pub type Schedule = guidance::DiffusionSchedule<f32>;
pub type ToyDenoiser = guidance::ToyDenoiser<f32>;
pub type ToyDenoiser64 = guidance::ToyDenoiser<f64>;
