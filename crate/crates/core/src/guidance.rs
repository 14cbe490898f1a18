//! Diffusion schedule, classifier-free guidance and the SDS/DDS cotangents,
//! together with the denoiser/codec abstractions and their analytic toy
//! implementations.
//!
//! Nothing here differentiates through a denoiser: `sds_grad` and `dds_grad`
//! return the cotangent that is fed to the renderer's backward pass.

use std::collections::HashMap;

use ndarray::{Array2, Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

pub const BETA_START: f64 = 0.00085;
pub const BETA_END: f64 = 0.012;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("schedule needs at least 2 steps, got {0}")]
    InvalidT(usize),
    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("sigma_t is zero")]
    SigmaZero,
    #[error("invalid condition: {0}")]
    InvalidCondition(String),
    #[error("denoiser failure: {0}")]
    DenoiserFailure(String),
    #[error("codec: {0}")]
    Codec(String),
}

fn check_shape<T>(a: &Array3<T>, b: &Array3<T>) -> Result<(), GuidanceError> {
    if a.shape() != b.shape() {
        return Err(GuidanceError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `alpha_t`, `sigma_t` for `t = 1..=T` (stored at index `t - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule<T> {
    alphas: Vec<T>,
    sigmas: Vec<T>,
}

impl<T: Real> DiffusionSchedule<T> {
    /// Scaled-linear β schedule (`√β` linear from `√0.00085` to `√0.012`).
    pub fn scaled_linear(steps: usize) -> Result<Self, GuidanceError> {
        if steps < 2 {
            return Err(GuidanceError::InvalidT(steps));
        }
        let (a, b) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut alpha_bar = 1.0f64;
        let mut alphas = Vec::with_capacity(steps);
        let mut sigmas = Vec::with_capacity(steps);
        for i in 0..steps {
            let r = a + (b - a) * i as f64 / (steps - 1) as f64;
            alpha_bar *= 1.0 - r * r;
            alphas.push(T::lit(alpha_bar.sqrt()));
            sigmas.push(T::lit((1.0 - alpha_bar).sqrt()));
        }
        Ok(Self { alphas, sigmas })
    }

    pub fn num_steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alphas[t - 1]
    }

    pub fn sigma(&self, t: usize) -> T {
        self.sigmas[t - 1]
    }

    fn check(&self, t: usize) -> Result<(), GuidanceError> {
        if t == 0 || t > self.num_steps() {
            return Err(GuidanceError::TimestepOutOfRange {
                t,
                max: self.num_steps(),
            });
        }
        Ok(())
    }

    /// `alpha_t·x + sigma_t·ε`.
    pub fn add_noise(&self, x: &Array3<T>, eps: &Array3<T>, t: usize) -> Array3<T> {
        let (a, s) = (self.alpha(t), self.sigma(t));
        Zip::from(x).and(eps).map_collect(|&x, &e| a * x + s * e)
    }
}

pub fn make_schedule<T: Real>(steps: usize) -> Result<DiffusionSchedule<T>, GuidanceError> {
    DiffusionSchedule::scaled_linear(steps)
}

/// What the denoiser is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserCondition<T> {
    pub prompt: String,
    /// Optional depth map in `[0,1]`.
    pub depth: Option<Array2<T>>,
    pub condition_strength: T,
}

impl<T: Real> DenoiserCondition<T> {
    pub fn prompt(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            depth: None,
            condition_strength: T::one(),
        }
    }

    pub fn with_depth(mut self, depth: Array2<T>, strength: T) -> Self {
        self.depth = Some(depth);
        self.condition_strength = strength;
        self
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        let s = self.condition_strength;
        if !(s >= T::zero() && s <= T::two()) {
            return Err(GuidanceError::InvalidCondition(format!("strength {s} outside [0, 2]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisePrediction<T> {
    pub epsilon_hat: Array3<T>,
}

impl<T: Real> NoisePrediction<T> {
    pub fn new(epsilon_hat: Array3<T>) -> Result<Self, GuidanceError> {
        if epsilon_hat.iter().any(|v| !v.is_finite()) {
            return Err(GuidanceError::DenoiserFailure("non-finite noise prediction".into()));
        }
        Ok(Self { epsilon_hat })
    }
}

/// A forward-only noise predictor `ε_φ(z_t; y; t)`.
pub trait Denoiser<T: Real>: Send + Sync {
    fn predict_noise(
        &self,
        z_t: &Array3<T>,
        t: usize,
        cond: &DenoiserCondition<T>,
        unconditional: bool,
    ) -> Result<NoisePrediction<T>, GuidanceError>;

    /// Returns `(unconditional, conditional)`; remote implementations issue
    /// both requests concurrently.
    fn predict_pair(
        &self,
        z_t: &Array3<T>,
        t: usize,
        cond: &DenoiserCondition<T>,
    ) -> Result<(NoisePrediction<T>, NoisePrediction<T>), GuidanceError> {
        Ok((
            self.predict_noise(z_t, t, cond, true)?,
            self.predict_noise(z_t, t, cond, false)?,
        ))
    }
}

impl<T: Real, D: Denoiser<T> + ?Sized> Denoiser<T> for &D {
    fn predict_noise(
        &self,
        z_t: &Array3<T>,
        t: usize,
        cond: &DenoiserCondition<T>,
        unconditional: bool,
    ) -> Result<NoisePrediction<T>, GuidanceError> {
        (**self).predict_noise(z_t, t, cond, unconditional)
    }

    fn predict_pair(
        &self,
        z_t: &Array3<T>,
        t: usize,
        cond: &DenoiserCondition<T>,
    ) -> Result<(NoisePrediction<T>, NoisePrediction<T>), GuidanceError> {
        (**self).predict_pair(z_t, t, cond)
    }
}

/// Image ↔ latent mapping used by the two-step optimizers.
pub trait LatentCodec<T: Real>: Send + Sync {
    fn encode(&self, image: &Array3<T>) -> Result<Array3<T>, GuidanceError>;
    fn decode(&self, latent: &Array3<T>) -> Result<Array3<T>, GuidanceError>;
}

/// `ε_uncond + ω·(ε_cond − ε_uncond)`.
pub fn cfg_combine<T: Real>(
    uncond: &NoisePrediction<T>,
    cond: &NoisePrediction<T>,
    omega: T,
) -> Result<NoisePrediction<T>, GuidanceError> {
    check_shape(&uncond.epsilon_hat, &cond.epsilon_hat)?;
    let eps = Zip::from(&uncond.epsilon_hat)
        .and(&cond.epsilon_hat)
        .map_collect(|&u, &c| u + omega * (c - u));
    Ok(NoisePrediction { epsilon_hat: eps })
}

/// Per-timestep weight `ω(t)` applied to SDS/DDS cotangents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepWeight {
    #[default]
    Unit,
    /// `σ_t²`.
    SigmaSquared,
}

impl TimestepWeight {
    pub fn at<T: Real>(self, sched: &DiffusionSchedule<T>, t: usize) -> T {
        match self {
            Self::Unit => T::one(),
            Self::SigmaSquared => sched.sigma(t) * sched.sigma(t),
        }
    }
}

/// Which timesteps the sampler draws from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepRange {
    /// Uniform over `[⌈0.02·T⌉, ⌊0.98·T⌋]`.
    #[default]
    Clipped,
    /// Uniform over `[1, T]`.
    Full,
}

impl TimestepRange {
    pub fn bounds(self, steps: usize) -> (usize, usize) {
        match self {
            Self::Full => (1, steps),
            Self::Clipped => {
                let lo = ((0.02 * steps as f64).ceil() as usize).max(1);
                let hi = ((0.98 * steps as f64).floor() as usize).clamp(lo, steps);
                (lo, hi)
            }
        }
    }
}

/// One `(t, ε)` draw; fully determined by `rng_seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSample<T> {
    pub t: usize,
    pub epsilon: Array3<T>,
    pub rng_seed: u64,
}

impl<T: Real> GuidanceSample<T> {
    pub fn draw(rng_seed: u64, shape: (usize, usize, usize), steps: usize, range: TimestepRange) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (lo, hi) = range.bounds(steps);
        let t = rng.random_range(lo..=hi);
        let epsilon = Array3::from_shape_simple_fn(shape, || {
            let v: f64 = rng.sample(StandardNormal);
            T::lit(v)
        });
        Self { t, epsilon, rng_seed }
    }
}

/// Seeded stream of guidance samples.
#[derive(Clone, Debug)]
pub struct GuidanceSampler {
    rng: ChaCha8Rng,
    steps: usize,
    range: TimestepRange,
}

impl GuidanceSampler {
    pub fn new(seed: u64, steps: usize, range: TimestepRange) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps,
            range,
        }
    }

    pub fn next<T: Real>(&mut self, shape: (usize, usize, usize)) -> GuidanceSample<T> {
        let seed = self.rng.random::<u64>();
        GuidanceSample::draw(seed, shape, self.steps, self.range)
    }
}

fn guided_prediction<T: Real, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    z_t: &Array3<T>,
    t: usize,
    cond: &DenoiserCondition<T>,
    omega: T,
) -> Result<NoisePrediction<T>, GuidanceError> {
    let (u, c) = denoiser.predict_pair(z_t, t, cond)?;
    check_shape(z_t, &u.epsilon_hat)?;
    check_shape(z_t, &c.epsilon_hat)?;
    cfg_combine(&u, &c, omega)
}

/// Guidance knobs shared by SDS and DDS.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceParams<T> {
    pub omega: T,
    pub weight: TimestepWeight,
}

impl<T: Real> GuidanceParams<T> {
    pub fn new(omega: T) -> Self {
        Self {
            omega,
            weight: TimestepWeight::Unit,
        }
    }
}

/// SDS cotangent `ω(t)·(ε̂^ω(α_t x + σ_t ε; y; t) − ε)`.
pub fn sds_grad<T: Real, D: Denoiser<T> + ?Sized>(
    x: &Array3<T>,
    sample: &GuidanceSample<T>,
    sched: &DiffusionSchedule<T>,
    denoiser: &D,
    cond: &DenoiserCondition<T>,
    params: GuidanceParams<T>,
) -> Result<Array3<T>, GuidanceError> {
    sched.check(sample.t)?;
    check_shape(x, &sample.epsilon)?;
    cond.validate()?;
    let z = sched.add_noise(x, &sample.epsilon, sample.t);
    let eps_hat = guided_prediction(denoiser, &z, sample.t, cond, params.omega)?;
    let w = params.weight.at(sched, sample.t);
    Ok(Zip::from(&eps_hat.epsilon_hat)
        .and(&sample.epsilon)
        .map_collect(|&p, &e| w * (p - e)))
}

/// DDS cotangent for the target branch: both branches are noised with the
/// same `(t, ε)` and `ε` cancels.
#[allow(clippy::too_many_arguments)]
pub fn dds_grad<T: Real, D: Denoiser<T> + ?Sized>(
    x_tgt: &Array3<T>,
    x_init: &Array3<T>,
    sample: &GuidanceSample<T>,
    sched: &DiffusionSchedule<T>,
    denoiser: &D,
    cond_tgt: &DenoiserCondition<T>,
    cond_init: &DenoiserCondition<T>,
    params: GuidanceParams<T>,
) -> Result<Array3<T>, GuidanceError> {
    sched.check(sample.t)?;
    check_shape(x_tgt, x_init)?;
    check_shape(x_tgt, &sample.epsilon)?;
    cond_tgt.validate()?;
    cond_init.validate()?;
    let z_tgt = sched.add_noise(x_tgt, &sample.epsilon, sample.t);
    let z_init = sched.add_noise(x_init, &sample.epsilon, sample.t);
    let tgt = guided_prediction(denoiser, &z_tgt, sample.t, cond_tgt, params.omega)?;
    let init = guided_prediction(denoiser, &z_init, sample.t, cond_init, params.omega)?;
    let w = params.weight.at(sched, sample.t);
    Ok(Zip::from(&tgt.epsilon_hat)
        .and(&init.epsilon_hat)
        .map_collect(|&a, &b| w * (a - b)))
}

/// Multiplies every channel of an `H × W × C` gradient by an `H × W` mask.
pub fn mask_grad<T: Real>(grad: &Array3<T>, mask: &Array2<T>) -> Result<Array3<T>, GuidanceError> {
    let (h, w, _) = grad.dim();
    if mask.dim() != (h, w) {
        return Err(GuidanceError::ShapeMismatch(
            grad.shape().to_vec(),
            mask.shape().to_vec(),
        ));
    }
    Ok(Array3::from_shape_fn(grad.dim(), |(y, x, c)| grad[[y, x, c]] * mask[[y, x]]))
}

/// Data distribution `N(mu, s²I)` of the analytic toy denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTarget<T> {
    pub mu: Array3<T>,
    pub s: T,
}

/// Bayes-optimal noise prediction for data drawn from `N(mu, s²I)`.
pub fn toy_denoiser_predict<T: Real>(
    x_t: &Array3<T>,
    t: usize,
    sched: &DiffusionSchedule<T>,
    target: &ToyTarget<T>,
) -> Result<NoisePrediction<T>, GuidanceError> {
    sched.check(t)?;
    check_shape(x_t, &target.mu)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    if s == T::zero() {
        return Err(GuidanceError::SigmaZero);
    }
    if target.s < T::zero() {
        return Err(GuidanceError::InvalidCondition("toy spread must be non-negative".into()));
    }
    let s2 = target.s * target.s;
    let denom = a * a * s2 + s * s;
    let eps = Zip::from(x_t).and(&target.mu).map_collect(|&x, &mu| {
        let x0 = (a * s2 * x + s * s * mu) / denom;
        (x - a * x0) / s
    });
    NoisePrediction::new(eps)
}

/// Toy denoiser with one Gaussian data distribution per prompt.
///
/// The unconditional branch uses `uncond` when set, otherwise the prompt's
/// own distribution. Depth maps are accepted and ignored.
#[derive(Clone, Debug)]
pub struct ToyDenoiser<T> {
    pub schedule: DiffusionSchedule<T>,
    pub targets: HashMap<String, ToyTarget<T>>,
    pub uncond: Option<ToyTarget<T>>,
}

impl<T: Real> ToyDenoiser<T> {
    pub fn new(schedule: DiffusionSchedule<T>) -> Self {
        Self {
            schedule,
            targets: HashMap::new(),
            uncond: None,
        }
    }

    pub fn with_target(mut self, prompt: impl Into<String>, mu: Array3<T>, s: T) -> Self {
        self.targets.insert(prompt.into(), ToyTarget { mu, s });
        self
    }

    pub fn with_uncond(mut self, mu: Array3<T>, s: T) -> Self {
        self.uncond = Some(ToyTarget { mu, s });
        self
    }
}

impl<T: Real> Denoiser<T> for ToyDenoiser<T> {
    fn predict_noise(
        &self,
        z_t: &Array3<T>,
        t: usize,
        cond: &DenoiserCondition<T>,
        unconditional: bool,
    ) -> Result<NoisePrediction<T>, GuidanceError> {
        let target = self
            .targets
            .get(&cond.prompt)
            .ok_or_else(|| GuidanceError::DenoiserFailure(format!("toy denoiser has no prompt '{}'", cond.prompt)))?;
        let target = match (&self.uncond, unconditional) {
            (Some(u), true) => u,
            _ => target,
        };
        toy_denoiser_predict(z_t, t, &self.schedule, target)
    }
}

/// Toy latent codec: 2×2 block average down, mass-preserving bilinear up.
///
/// `decode` adds back the block-mean residual of plain bilinear upsampling, so
/// `encode ∘ decode` is the identity and `decode ∘ encode` is a projection.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyCodec;

impl ToyCodec {
    fn block_average<T: Real>(image: &Array3<T>) -> Array3<T> {
        let (h, w, c) = image.dim();
        let q = T::lit(0.25);
        Array3::from_shape_fn((h / 2, w / 2, c), |(y, x, k)| {
            q * (image[[2 * y, 2 * x, k]]
                + image[[2 * y, 2 * x + 1, k]]
                + image[[2 * y + 1, 2 * x, k]]
                + image[[2 * y + 1, 2 * x + 1, k]])
        })
    }

    fn bilinear_up<T: Real>(latent: &Array3<T>) -> Array3<T> {
        let (h, w, c) = latent.dim();
        // Output pixel i samples input coordinate (i + 0.5) / 2 - 0.5, clamped at the border.
        let taps = |i: usize, n: usize| -> (usize, usize, T) {
            let pos = (i as f64 + 0.5) / 2.0 - 0.5;
            let pos = pos.clamp(0.0, (n - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, T::lit(pos - i0 as f64))
        };
        Array3::from_shape_fn((2 * h, 2 * w, c), |(y, x, k)| {
            let (y0, y1, fy) = taps(y, h);
            let (x0, x1, fx) = taps(x, w);
            let one = T::one();
            let top = latent[[y0, x0, k]] * (one - fx) + latent[[y0, x1, k]] * fx;
            let bot = latent[[y1, x0, k]] * (one - fx) + latent[[y1, x1, k]] * fx;
            top * (one - fy) + bot * fy
        })
    }
}

impl<T: Real> LatentCodec<T> for ToyCodec {
    fn encode(&self, image: &Array3<T>) -> Result<Array3<T>, GuidanceError> {
        let (h, w, _) = image.dim();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(GuidanceError::Codec(format!("odd or empty image dimensions {h}×{w}")));
        }
        Ok(Self::block_average(image))
    }

    fn decode(&self, latent: &Array3<T>) -> Result<Array3<T>, GuidanceError> {
        let (h, w, _) = latent.dim();
        if h == 0 || w == 0 {
            return Err(GuidanceError::Codec("empty latent".into()));
        }
        let up = Self::bilinear_up(latent);
        let residual = latent - &Self::block_average(&up);
        Ok(Array3::from_shape_fn(up.dim(), |(y, x, k)| up[[y, x, k]] + residual[[y / 2, x / 2, k]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> DiffusionSchedule<f64> {
        make_schedule(1000).unwrap()
    }

    #[test]
    fn schedule_first_step_and_identity() {
        let s = sched();
        assert!((s.alpha(1) - 0.99915f64.sqrt()).abs() < 1e-12);
        assert!((s.sigma(1) - 0.00085f64.sqrt()).abs() < 1e-12);
        for t in 1..=1000 {
            let (a, g) = (s.alpha(t), s.sigma(t));
            assert!((a * a + g * g - 1.0).abs() < 1e-6);
            if t > 1 {
                assert!(a <= s.alpha(t - 1) && g >= s.sigma(t - 1));
            }
        }
        assert!(s.alpha(1000) < 0.1);
        assert!(matches!(make_schedule::<f64>(1), Err(GuidanceError::InvalidT(1))));
    }

    #[test]
    fn cfg_scalar_anchor() {
        let u = NoisePrediction { epsilon_hat: Array3::from_elem((1, 1, 1), 0.0f64) };
        let c = NoisePrediction { epsilon_hat: Array3::from_elem((1, 1, 1), 1.0f64) };
        assert_eq!(cfg_combine(&u, &c, 7.5).unwrap().epsilon_hat[[0, 0, 0]], 7.5);
        let bad = NoisePrediction { epsilon_hat: Array3::zeros((1, 2, 1)) };
        assert!(cfg_combine(&u, &bad, 1.0).is_err());
    }

    #[test]
    fn toy_point_mass() {
        let s = sched();
        let mu = Array3::from_elem((1, 1, 1), 0.7);
        let x = Array3::from_elem((1, 1, 1), 0.2);
        let t = 300;
        let p = toy_denoiser_predict(&x, t, &s, &ToyTarget { mu: mu.clone(), s: 0.0 }).unwrap();
        let want = (0.2 - s.alpha(t) * 0.7) / s.sigma(t);
        assert!((p.epsilon_hat[[0, 0, 0]] - want).abs() < 1e-12);
        let on = mu.mapv(|m| m * s.alpha(t));
        let p = toy_denoiser_predict(&on, t, &s, &ToyTarget { mu, s: 0.0 }).unwrap();
        assert!(p.epsilon_hat[[0, 0, 0]].abs() < 1e-12);
    }

    #[test]
    fn perfect_denoiser_gives_zero_sds() {
        struct Oracle(Array3<f64>);
        impl Denoiser<f64> for Oracle {
            fn predict_noise(
                &self,
                _: &Array3<f64>,
                _: usize,
                _: &DenoiserCondition<f64>,
                _: bool,
            ) -> Result<NoisePrediction<f64>, GuidanceError> {
                Ok(NoisePrediction { epsilon_hat: self.0.clone() })
            }
        }
        let sample = GuidanceSample::<f64>::draw(3, (2, 2, 1), 1000, TimestepRange::Clipped);
        let g = sds_grad(
            &Array3::zeros((2, 2, 1)),
            &sample,
            &sched(),
            &Oracle(sample.epsilon.clone()),
            &DenoiserCondition::prompt("p"),
            GuidanceParams::new(7.5),
        )
        .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn toy_sds_pushes_towards_mean() {
        let s = sched();
        let toy = ToyDenoiser::new(s.clone()).with_target("p", Array3::from_elem((1, 1, 1), 1.0), 0.0);
        let sample = GuidanceSample::<f64>::draw(11, (1, 1, 1), 1000, TimestepRange::Clipped);
        let g = sds_grad(
            &Array3::zeros((1, 1, 1)),
            &sample,
            &s,
            &toy,
            &DenoiserCondition::prompt("p"),
            GuidanceParams::new(1.0),
        )
        .unwrap();
        assert!(g[[0, 0, 0]] < 0.0);
    }

    #[test]
    fn mask_partitions() {
        let g = Array3::from_shape_fn((2, 4, 3), |(y, x, c)| (y * 12 + x * 3 + c) as f64 + 1.0);
        let mask = Array2::from_shape_fn((2, 4), |(_, x)| if x < 2 { 1.0 } else { 0.0 });
        let m = mask_grad(&g, &mask).unwrap();
        for ((y, x, c), v) in m.indexed_iter() {
            if x < 2 {
                assert_eq!(*v, g[[y, x, c]]);
            } else {
                assert_eq!(v.to_bits(), 0f64.to_bits());
            }
        }
        assert!(mask_grad(&g, &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn codec_shapes_and_constants() {
        let img = Array3::from_elem((6, 8, 3), 0.37f64);
        let lat = ToyCodec.encode(&img).unwrap();
        assert_eq!(lat.dim(), (3, 4, 3));
        let back = ToyCodec.decode(&lat).unwrap();
        for v in back.iter() {
            assert!((v - 0.37).abs() < 1e-15);
        }
        assert!(LatentCodec::<f64>::encode(&ToyCodec, &Array3::zeros((5, 4, 3))).is_err());
    }

    #[test]
    fn timestep_ranges() {
        assert_eq!(TimestepRange::Clipped.bounds(1000), (20, 980));
        assert_eq!(TimestepRange::Full.bounds(1000), (1, 1000));
        let a = GuidanceSample::<f32>::draw(5, (2, 2, 4), 1000, TimestepRange::Clipped);
        let b = GuidanceSample::<f32>::draw(5, (2, 2, 4), 1000, TimestepRange::Clipped);
        assert_eq!(a, b);
    }
}
