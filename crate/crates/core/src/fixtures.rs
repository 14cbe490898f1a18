//! Small deterministic scenes for tests, smoke runs and offline demos.

use ndarray::Array3;

use crate::cloud::{init_object_appearance, insert_object, Gaussian, GaussianCloud, InsertionSpec, ShInsertion};
use crate::guidance::{DiffusionSchedule, LatentCodec, ToyCodec, ToyDenoiser};
use crate::relight::{init_prompt, target_prompt};
use crate::render::{render, Camera};
use crate::scalar::Real;

pub const TOY_SIZE: usize = 8;
pub const TOY_OBJECT_DESC: &str = "lamp";
pub const TOY_SCENE_DESC: &str = "room";
/// Base colour the toy target prompt asks the object to take.
pub const TOY_BRIGHT_RGB: [f64; 3] = [0.9, 0.75, 0.5];

/// An 8×8 view of a 36-Gaussian wall with a 9-Gaussian object in front.
#[derive(Clone, Debug)]
pub struct ToyScene<T> {
    pub scene: GaussianCloud<T>,
    pub object: GaussianCloud<T>,
    /// Scene + object, object appearance initialized to its mean colour.
    pub merged: GaussianCloud<T>,
    pub object_range: std::ops::Range<usize>,
    pub camera: Camera<f64>,
    pub background: [f64; 3],
    pub prompt_tgt: String,
    pub prompt_init: String,
}

pub fn toy_camera(size: usize) -> Camera<f64> {
    Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, 1.0, 0.0], 10.0 * size as f64 / 8.0, size, size)
}

pub fn toy_scene<T: Real>() -> ToyScene<T> {
    let l = T::lit;
    let mut wall = Vec::new();
    for i in 0..6 {
        for j in 0..6 {
            let (x, y) = (-2.0 + 0.8 * i as f64, -2.0 + 0.8 * j as f64);
            let tone = 0.35 + 0.1 * ((i + j) % 2) as f64;
            wall.push(Gaussian::isotropic([l(x), l(y), l(1.0)], l(0.45), l(0.95), [l(tone), l(0.3), l(0.25)]));
        }
    }
    let mut obj = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            let (x, y) = (-0.3 + 0.3 * i as f64, -0.3 + 0.3 * j as f64);
            let v = 0.05 * (i * 3 + j) as f64 / 8.0;
            obj.push(Gaussian::isotropic(
                [l(x), l(y), l(-0.5)],
                l(0.12),
                l(0.95),
                [l(0.2 + v), l(0.25 - v), l(0.3)],
            ));
        }
    }
    let scene = GaussianCloud::from_gaussians(wall).expect("valid wall");
    let object = GaussianCloud::from_gaussians(obj).expect("valid object");
    let (merged, spec) =
        insert_object(&scene, &object, &InsertionSpec::identity(), ShInsertion::ZeroHigherBands).expect("valid insert");
    let merged = init_object_appearance(&merged, spec.object_range.clone()).expect("non-empty object");
    ToyScene {
        scene,
        object,
        merged,
        object_range: spec.object_range,
        camera: toy_camera(TOY_SIZE),
        background: [0.0; 3],
        prompt_tgt: target_prompt(TOY_OBJECT_DESC, TOY_SCENE_DESC),
        prompt_init: init_prompt(TOY_SCENE_DESC),
    }
}

impl<T: Real> ToyScene<T> {
    /// The merged cloud with every object Gaussian set to `rgb`.
    pub fn with_object_rgb(&self, rgb: [f64; 3]) -> GaussianCloud<T> {
        let block: Vec<_> = self
            .object_range
            .clone()
            .map(|_| Gaussian::<T>::isotropic([T::zero(); 3], T::one(), T::one(), rgb.map(T::lit)).sh)
            .collect();
        self.merged
            .clone()
            .with_sh_block(self.object_range.clone(), &block)
            .expect("block matches range")
    }

    pub fn render_rgb(&self, cloud: &GaussianCloud<T>) -> Array3<T> {
        render(cloud, &self.camera.cast(), self.background.map(T::lit))
            .expect("toy camera is valid")
            .rgb
    }

    /// Toy denoiser whose target prompt's data mean is the latent of the
    /// scene with a bright object and whose scene prompt's mean is the latent
    /// of the object-free scene.
    pub fn toy_denoiser(&self, spread: T) -> ToyDenoiser<T> {
        let codec = ToyCodec;
        let bright = self.render_rgb(&self.with_object_rgb(TOY_BRIGHT_RGB));
        let empty = self.render_rgb(&self.scene);
        let sched = DiffusionSchedule::scaled_linear(1000).expect("valid schedule");
        ToyDenoiser::new(sched)
            .with_target(self.prompt_tgt.clone(), codec.encode(&bright).expect("even size"), spread)
            .with_target(self.prompt_init.clone(), codec.encode(&empty).expect("even size"), spread)
    }
}

/// Colour a prompt hashes to, each channel in `[0.15, 0.9]`.
pub fn prompt_rgb(prompt: &str) -> [f64; 3] {
    let h = crate::backend::fnv1a(prompt.as_bytes());
    std::array::from_fn(|k| 0.15 + 0.75 * ((h >> (16 * k)) & 0xffff) as f64 / 65535.0)
}

/// Spread used by the CLI's offline models and the matching bridge fixture.
pub const PROMPT_TOY_SPREAD: f64 = 0.05;

/// Offline denoiser for arbitrary prompts: the data distribution of a prompt
/// is a constant latent of its hashed colour with isotropic spread `s`.
#[derive(Clone, Debug)]
pub struct PromptColorDenoiser<T> {
    pub schedule: DiffusionSchedule<T>,
    pub spread: T,
}

impl<T: Real> PromptColorDenoiser<T> {
    pub fn new(spread: T) -> Self {
        Self {
            schedule: DiffusionSchedule::scaled_linear(1000).expect("valid schedule"),
            spread,
        }
    }
}

impl<T: Real> crate::guidance::Denoiser<T> for PromptColorDenoiser<T> {
    fn predict_noise(
        &self,
        z_t: &Array3<T>,
        t: usize,
        cond: &crate::guidance::DenoiserCondition<T>,
        _unconditional: bool,
    ) -> Result<crate::guidance::NoisePrediction<T>, crate::guidance::GuidanceError> {
        let rgb = prompt_rgb(&cond.prompt);
        let mu = Array3::from_shape_fn(z_t.dim(), |(_, _, k)| T::lit(rgb[k % 3]));
        let target = crate::guidance::ToyTarget { mu, s: self.spread };
        crate::guidance::toy_denoiser_predict(z_t, t, &self.schedule, &target)
    }
}
