//! Two-step DDS relighting of an inserted object, and the image-space
//! two-step variants (DDS editing, SDS generation).
//!
//! Each outer iteration encodes the current render once, runs
//! `steps_latent` plain gradient steps on the latent with the DDS cotangent,
//! decodes the result and then fits object colours/SH to the decoded image
//! with `steps_image` Adam steps on a masked L1 loss.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{Array2, Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{active_degree_at, sh_count, CloudError, GaussianCloud, ShCoeffs, ShScheduleConfig, SH_COEFFS, SH_MAX_DEGREE};
use crate::guidance::{
    dds_grad, mask_grad, sds_grad, DenoiserCondition, Denoiser, DiffusionSchedule, GuidanceError, GuidanceParams,
    GuidanceSampler, LatentCodec, TimestepRange, TimestepWeight,
};
use crate::optim::{adam_step, AdamState, ExponentialDecay};
use crate::render::{backprop_color, render, selection, Camera, RenderBundle, RenderError};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum RelightError {
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("non-finite loss at outer iteration {outer_iter}")]
    NonFiniteLoss { outer_iter: u64 },
    #[error("interrupted after outer iteration {outer_iters_done}")]
    Interrupted { outer_iters_done: u64 },
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Checkpoint(#[from] serde_json::Error),
}

impl RelightError {
    /// True when the denoiser (or its transport) failed.
    pub fn is_denoiser_failure(&self) -> bool {
        matches!(self, Self::Guidance(GuidanceError::DenoiserFailure(_)))
    }
}

/// Every knob of the relighting loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationConfig {
    pub num_iters: u64,
    pub steps_latent: usize,
    pub steps_image: usize,
    pub guidance_scale: f64,
    pub latent_lr: f64,
    pub color_lr: f64,
    pub sh_lr: f64,
    /// Per-step colour learning-rate factor; `None` decays to 1% over `num_iters`.
    pub lr_decay: Option<f64>,
    pub sh_degree_interval: u64,
    pub rng_seed: u64,
    pub camera_pool: Vec<Camera<f64>>,
    pub background: [f64; 3],
    pub diffusion_steps: usize,
    pub timestep_range: TimestepRange,
    pub timestep_weight: TimestepWeight,
    pub depth_conditioning: bool,
    pub condition_strength: f64,
    /// Outer iterations between checkpoints.
    pub checkpoint_every: u64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            num_iters: 20_000,
            steps_latent: 16,
            steps_image: 256,
            guidance_scale: 7.5,
            latent_lr: 0.1,
            color_lr: 0.0025,
            sh_lr: 0.000125,
            lr_decay: None,
            sh_degree_interval: 5000,
            rng_seed: 0,
            camera_pool: Vec::new(),
            background: [0.0; 3],
            diffusion_steps: 1000,
            timestep_range: TimestepRange::Clipped,
            timestep_weight: TimestepWeight::Unit,
            depth_conditioning: false,
            condition_strength: 1.0,
            checkpoint_every: 1000,
        }
    }
}

/// Final colour learning rate as a fraction of `color_lr`.
pub const LR_DECAY_FINAL_FRACTION: f64 = 0.01;

impl OptimizationConfig {
    pub fn validate(&self) -> Result<(), RelightError> {
        let bad = |m: &str| Err(RelightError::InvalidJob(m.to_string()));
        if self.num_iters == 0 || self.steps_latent == 0 || self.steps_image == 0 {
            return bad("step counts must be positive");
        }
        if !(self.latent_lr > 0.0 && self.color_lr > 0.0 && self.sh_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.camera_pool.is_empty() {
            return bad("camera pool is empty");
        }
        if let Some(g) = self.lr_decay {
            if !(g > 0.0 && g <= 1.0) {
                return bad("lr_decay must be in (0, 1]");
            }
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        Ok(())
    }

    pub fn outer_iterations(&self) -> u64 {
        self.num_iters.div_ceil(self.steps_image as u64)
    }

    pub fn color_schedule(&self) -> ExponentialDecay {
        match self.lr_decay {
            Some(gamma) => ExponentialDecay {
                initial: self.color_lr,
                gamma,
            },
            None => ExponentialDecay::to_fraction(self.color_lr, LR_DECAY_FINAL_FRACTION, self.num_iters),
        }
    }
}

/// `a <object_desc> in a <scene_desc>`.
pub fn target_prompt(object_desc: &str, scene_desc: &str) -> String {
    format!("a {object_desc} in a {scene_desc}")
}

/// `a <scene_desc>`.
pub fn init_prompt(scene_desc: &str) -> String {
    format!("a {scene_desc}")
}

pub struct RelightJob<'a, T: Real> {
    /// Scene plus inserted object.
    pub cloud: GaussianCloud<T>,
    pub object_range: Range<usize>,
    pub prompt_tgt: String,
    pub prompt_init: String,
    pub config: OptimizationConfig,
    pub denoiser: &'a dyn Denoiser<T>,
    pub codec: &'a dyn LatentCodec<T>,
}

impl<T: Real> RelightJob<'_, T> {
    pub fn validate(&self) -> Result<(), RelightError> {
        self.config.validate()?;
        if self.prompt_tgt.trim().is_empty() || self.prompt_init.trim().is_empty() {
            return Err(RelightError::InvalidJob("prompts must be non-empty".into()));
        }
        if self.object_range.is_empty() || self.object_range.end > self.cloud.len() {
            return Err(RelightError::InvalidJob(format!(
                "object range {:?} invalid for {} gaussians",
                self.object_range,
                self.cloud.len()
            )));
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub outer_iter: u64,
    /// Mean L2 norm of the DDS cotangent over the latent steps.
    pub dds_grad_norm: f64,
    /// L1 loss at the last image step.
    pub l1_loss: f64,
    /// Colour learning rate at the last image step.
    pub lr: f64,
}

pub fn write_metrics_csv(rows: &[IterationLog], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "outer_iter,dds_grad_norm,l1_loss,lr")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.outer_iter, r.dds_grad_norm, r.l1_loss, r.lr)?;
    }
    f.flush()
}

/// Resumable optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub outer_iters_done: u64,
    pub global_step: u64,
    pub object_range: Range<usize>,
    pub object_sh: Vec<ShCoeffs<T>>,
    pub adam_color: AdamState<T>,
    pub adam_sh: AdamState<T>,
    pub log: Vec<IterationLog>,
}

pub const CHECKPOINT_STATE: &str = "checkpoint.json";
pub const CHECKPOINT_CLOUD: &str = "checkpoint.ply";

impl<T: Real> Checkpoint<T> {
    pub fn save(&self, dir: impl AsRef<Path>, cloud: &GaussianCloud<T>) -> Result<(), RelightError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!("{CHECKPOINT_STATE}.tmp"));
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, dir.join(CHECKPOINT_STATE))?;
        crate::ply::save_cloud(cloud, dir.join(CHECKPOINT_CLOUD))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, RelightError> {
        let bytes = fs::read(dir.as_ref().join(CHECKPOINT_STATE))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Run-time hooks for [`two_step_dds_with`].
#[derive(Default)]
pub struct RunOptions<'a, T: Real> {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint<T>>,
    /// Checked between outer iterations; when set, a checkpoint is written and
    /// the run stops with [`RelightError::Interrupted`].
    pub cancel: Option<&'a AtomicBool>,
    /// Called after every outer iteration with the log row and current cloud.
    #[allow(clippy::type_complexity)]
    pub on_iteration: Option<Box<dyn FnMut(&IterationLog, &GaussianCloud<T>) + 'a>>,
    /// Called after every image step with the outer iteration and the L1
    /// loss measured before that step's update.
    #[allow(clippy::type_complexity)]
    pub on_image_step: Option<Box<dyn FnMut(u64, f64) + 'a>>,
    /// Stop after this many outer iterations in total (for staged runs).
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RelightOutcome<T> {
    pub cloud: GaussianCloud<T>,
    pub log: Vec<IterationLog>,
    pub checkpoint: Checkpoint<T>,
}

/// Seeds the generator of one outer iteration; independent of how many
/// iterations ran before, which makes resumed runs bit-identical.
fn outer_rng(seed: u64, outer: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(outer);
    rng
}

/// Colour image from frozen compositing weights; identical to the `rgb` a
/// fresh render would produce, since geometry and opacity never change.
pub fn recolor<T: Real>(
    bundle: &RenderBundle<T>,
    cloud: &GaussianCloud<T>,
    cam: &Camera<T>,
    background: [T; 3],
) -> Array3<T> {
    let colors = crate::render::gaussian_colors(cloud, cam).colors;
    let (h, w) = (bundle.height(), bundle.width());
    let mut rgb = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let mut c = [T::zero(); 3];
            let mut acc = T::zero();
            for &(i, wt) in bundle.weights.at(x, y, w) {
                let col = colors[i as usize];
                for k in 0..3 {
                    c[k] += wt * col[k];
                }
                acc += wt;
            }
            for k in 0..3 {
                rgb[[y, x, k]] = c[k] + (T::one() - acc) * background[k];
            }
        }
    }
    rgb
}

/// Mean absolute error and its subgradient `sign(pred − target) / N`.
fn l1_with_grad<T: Real>(pred: &Array3<T>, target: &Array3<T>) -> (T, Array3<T>) {
    let n = T::from_usize(pred.len().max(1)).unwrap();
    let mut loss = T::zero();
    let grad = Zip::from(pred).and(target).map_collect(|&p, &q| {
        let d = p - q;
        loss += d.abs();
        if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        }
    });
    (loss / n, grad)
}

fn l2_norm<T: Real>(a: &Array3<T>) -> f64 {
    a.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

fn depth_condition<T: Real>(bundle: &RenderBundle<T>) -> Array2<T> {
    let max = bundle.depth.iter().fold(T::zero(), |m, &v| m.max(v));
    if max > T::zero() {
        bundle.depth.mapv(|d| d / max)
    } else {
        bundle.depth.clone()
    }
}

pub fn two_step_dds<T: Real>(job: &RelightJob<'_, T>) -> Result<RelightOutcome<T>, RelightError> {
    two_step_dds_with(job, RunOptions::default())
}

/// Two-step DDS with checkpointing, resume and cancellation.
pub fn two_step_dds_with<T: Real>(
    job: &RelightJob<'_, T>,
    mut opts: RunOptions<'_, T>,
) -> Result<RelightOutcome<T>, RelightError> {
    job.validate()?;
    let cfg = &job.config;
    let range = job.object_range.clone();
    let n_obj = range.len();
    let sched: DiffusionSchedule<T> = DiffusionSchedule::scaled_linear(cfg.diffusion_steps)?;
    let cameras: Vec<Camera<T>> = cfg.camera_pool.iter().map(|c| c.cast()).collect();
    for cam in &cameras {
        cam.validate()?;
    }
    let bg = cfg.background.map(T::lit);
    let scene_only = job.cloud.without(range.clone());
    let object_sel = selection(job.cloud.len(), &range.clone().collect::<Vec<_>>());
    let sh_sched = ShScheduleConfig {
        sh_degree_interval: cfg.sh_degree_interval,
    };
    let lr_sched = cfg.color_schedule();
    let params = GuidanceParams {
        omega: T::lit(cfg.guidance_scale),
        weight: cfg.timestep_weight,
    };
    let strength = T::lit(cfg.condition_strength);

    let mut cloud = job.cloud.clone();
    let mut state = match opts.resume.take() {
        Some(ck) => {
            if ck.object_range != range || ck.object_sh.len() != n_obj {
                return Err(RelightError::InvalidJob("checkpoint does not match job".into()));
            }
            cloud = cloud.with_sh_block(range.clone(), &ck.object_sh)?;
            ck
        }
        None => Checkpoint {
            outer_iters_done: 0,
            global_step: 0,
            object_range: range.clone(),
            object_sh: cloud.sh()[range.clone()].to_vec(),
            adam_color: AdamState::new(n_obj * 3),
            adam_sh: AdamState::new(n_obj * 3 * (SH_COEFFS - 1)),
            log: Vec::new(),
        },
    };

    let total_outer = cfg.outer_iterations();
    let stop = opts.stop_after.unwrap_or(total_outer).min(total_outer);
    let save = |state: &Checkpoint<T>, cloud: &GaussianCloud<T>| -> Result<(), RelightError> {
        if let Some(dir) = &opts.checkpoint_dir {
            state.save(dir, cloud)?;
        }
        Ok(())
    };

    let mut dc_params = vec![T::zero(); n_obj * 3];
    let mut rest_params = vec![T::zero(); n_obj * 3 * (SH_COEFFS - 1)];
    let mut dc_grad = vec![T::zero(); dc_params.len()];
    let mut rest_grad = vec![T::zero(); rest_params.len()];

    while state.outer_iters_done < stop {
        if opts.cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            save(&state, &cloud)?;
            return Err(RelightError::Interrupted {
                outer_iters_done: state.outer_iters_done,
            });
        }
        let outer = state.outer_iters_done;
        let mut rng = outer_rng(cfg.rng_seed, outer);
        let cam = &cameras[rng.random_range(0..cameras.len())];

        let tgt = render(&cloud, cam, bg)?;
        let init = render(&scene_only, cam, bg)?;

        // Step 1: latent descent with the DDS cotangent.
        let step1 = (|| -> Result<(Array3<T>, f64), RelightError> {
            let mut latent = job.codec.encode(&tgt.rgb)?;
            let x_init = job.codec.encode(&init.rgb)?;
            let mut cond_tgt = DenoiserCondition::prompt(job.prompt_tgt.clone());
            let mut cond_init = DenoiserCondition::prompt(job.prompt_init.clone());
            if cfg.depth_conditioning {
                let depth = depth_condition(&tgt);
                cond_tgt = cond_tgt.with_depth(depth.clone(), strength);
                cond_init = cond_init.with_depth(depth, strength);
            }
            let mut sampler = GuidanceSampler::new(rng.random(), cfg.diffusion_steps, cfg.timestep_range);
            let lr = T::lit(cfg.latent_lr);
            let mut norm_sum = 0.0;
            for _ in 0..cfg.steps_latent {
                let sample = sampler.next(latent.dim());
                let g = dds_grad(&latent, &x_init, &sample, &sched, job.denoiser, &cond_tgt, &cond_init, params)?;
                norm_sum += l2_norm(&g);
                latent.zip_mut_with(&g, |l, &d| *l -= lr * d);
            }
            let image_opt = job.codec.decode(&latent)?;
            Ok((image_opt, norm_sum / cfg.steps_latent as f64))
        })();
        let (image_opt, dds_norm) = match step1 {
            Ok(v) => v,
            Err(e) => {
                save(&state, &cloud)?;
                return Err(e);
            }
        };
        if image_opt.dim() != tgt.rgb.dim() {
            return Err(RelightError::Guidance(GuidanceError::ShapeMismatch(
                image_opt.shape().to_vec(),
                tgt.rgb.shape().to_vec(),
            )));
        }

        // Step 2: Adam on object colours/SH against the decoded image.
        let mask = tgt.mask(&object_sel);
        let mut last_loss = T::zero();
        let mut last_lr = 0.0;
        for _ in 0..cfg.steps_image {
            let step = state.global_step;
            let degree = active_degree_at(step, &sh_sched, SH_MAX_DEGREE);
            let n_rest = sh_count(degree) - 1;
            let rgb = recolor(&tgt, &cloud, cam, bg);
            let (loss, d_img) = l1_with_grad(&rgb, &image_opt);
            if !loss.is_finite() {
                return Err(RelightError::NonFiniteLoss { outer_iter: outer });
            }
            let d_img = mask_grad(&d_img, &mask)?;
            let grad = backprop_color(&tgt, &cloud, cam, &d_img)?;

            for (j, i) in range.clone().enumerate() {
                let sh = &cloud.sh()[i];
                let g = &grad.sh[i];
                for c in 0..3 {
                    dc_params[j * 3 + c] = sh[0][c];
                    dc_grad[j * 3 + c] = g[0][c];
                    for k in 1..SH_COEFFS {
                        let idx = (j * 3 + c) * (SH_COEFFS - 1) + (k - 1);
                        rest_params[idx] = sh[k][c];
                        rest_grad[idx] = if k <= n_rest { g[k][c] } else { T::zero() };
                    }
                }
            }
            let lr = lr_sched.at(step);
            adam_step(&mut state.adam_color, &mut dc_params, &dc_grad, T::lit(lr)).expect("sized at start");
            adam_step(&mut state.adam_sh, &mut rest_params, &rest_grad, T::lit(cfg.sh_lr)).expect("sized at start");
            let sh = cloud.sh_mut();
            for (j, i) in range.clone().enumerate() {
                for c in 0..3 {
                    sh[i][0][c] = dc_params[j * 3 + c];
                    for k in 1..SH_COEFFS {
                        sh[i][k][c] = rest_params[(j * 3 + c) * (SH_COEFFS - 1) + (k - 1)];
                    }
                }
            }
            if sh[range.clone()].iter().flatten().flatten().any(|v| !v.is_finite()) {
                return Err(RelightError::NonFiniteLoss { outer_iter: outer });
            }
            state.global_step += 1;
            if let Some(cb) = opts.on_image_step.as_mut() {
                cb(outer, loss.as_f64());
            }
            last_loss = loss;
            last_lr = lr;
        }

        let row = IterationLog {
            outer_iter: outer,
            dds_grad_norm: dds_norm,
            l1_loss: last_loss.as_f64(),
            lr: last_lr,
        };
        state.outer_iters_done += 1;
        state.object_sh = cloud.sh()[range.clone()].to_vec();
        state.log.push(row.clone());
        if let Some(cb) = opts.on_iteration.as_mut() {
            cb(&row, &cloud);
        }
        if state.outer_iters_done % cfg.checkpoint_every == 0 || state.outer_iters_done == stop {
            save(&state, &cloud)?;
        }
    }

    Ok(RelightOutcome {
        cloud,
        log: state.log.clone(),
        checkpoint: state,
    })
}

/// Settings for [`dds_edit_2d`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Edit2dConfig {
    pub n_steps: usize,
    pub latent_lr: f64,
    pub guidance_scale: f64,
    pub rng_seed: u64,
    pub diffusion_steps: usize,
    pub timestep_range: TimestepRange,
    pub timestep_weight: TimestepWeight,
    pub condition_strength: f64,
}

impl Default for Edit2dConfig {
    fn default() -> Self {
        Self {
            n_steps: 200,
            latent_lr: 0.1,
            guidance_scale: 7.5,
            rng_seed: 0,
            diffusion_steps: 1000,
            timestep_range: TimestepRange::Clipped,
            timestep_weight: TimestepWeight::Unit,
            condition_strength: 1.0,
        }
    }
}

/// DDS image editing with the reference branch set to `img_init` (typically
/// the object-free scene). With a mask, the result is composited back over
/// `img_tgt_init` so unmasked pixels are returned unchanged.
#[allow(clippy::too_many_arguments)]
pub fn dds_edit_2d<T: Real>(
    img_tgt_init: &Array3<T>,
    img_init: &Array3<T>,
    prompt_tgt: &str,
    prompt_init: &str,
    mask: Option<&Array2<T>>,
    depth: Option<&Array2<T>>,
    cfg: &Edit2dConfig,
    denoiser: &dyn Denoiser<T>,
    codec: &dyn LatentCodec<T>,
) -> Result<Array3<T>, RelightError> {
    if img_tgt_init.dim() != img_init.dim() {
        return Err(GuidanceError::ShapeMismatch(img_tgt_init.shape().to_vec(), img_init.shape().to_vec()).into());
    }
    if let Some(m) = mask {
        let (h, w, _) = img_tgt_init.dim();
        if m.dim() != (h, w) {
            return Err(GuidanceError::ShapeMismatch(img_tgt_init.shape().to_vec(), m.shape().to_vec()).into());
        }
    }
    let sched = DiffusionSchedule::scaled_linear(cfg.diffusion_steps)?;
    let mut cond_tgt = DenoiserCondition::prompt(prompt_tgt);
    let mut cond_init = DenoiserCondition::prompt(prompt_init);
    if let Some(d) = depth {
        let s = T::lit(cfg.condition_strength);
        cond_tgt = cond_tgt.with_depth(d.clone(), s);
        cond_init = cond_init.with_depth(d.clone(), s);
    }
    let params = GuidanceParams {
        omega: T::lit(cfg.guidance_scale),
        weight: cfg.timestep_weight,
    };
    let mut latent = codec.encode(img_tgt_init)?;
    let x_init = codec.encode(img_init)?;
    let mut sampler = GuidanceSampler::new(cfg.rng_seed, cfg.diffusion_steps, cfg.timestep_range);
    let lr = T::lit(cfg.latent_lr);
    for _ in 0..cfg.n_steps {
        let sample = sampler.next(latent.dim());
        let g = dds_grad(&latent, &x_init, &sample, &sched, denoiser, &cond_tgt, &cond_init, params)?;
        latent.zip_mut_with(&g, |l, &d| *l -= lr * d);
    }
    let decoded = codec.decode(&latent)?;
    Ok(match mask {
        None => decoded,
        Some(m) => Array3::from_shape_fn(decoded.dim(), |(y, x, c)| {
            let a = m[[y, x]];
            if a == T::zero() {
                img_tgt_init[[y, x, c]]
            } else {
                a * decoded[[y, x, c]] + (T::one() - a) * img_tgt_init[[y, x, c]]
            }
        }),
    })
}

/// Settings for [`two_step_sds_2d`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sds2dConfig {
    pub omega: f64,
    /// Total latent updates.
    pub n_steps: usize,
    pub steps_latent: usize,
    pub steps_image: usize,
    pub latent_lr: f64,
    pub image_lr: f64,
    pub rng_seed: u64,
    pub diffusion_steps: usize,
    pub timestep_range: TimestepRange,
    pub timestep_weight: TimestepWeight,
}

impl Default for Sds2dConfig {
    fn default() -> Self {
        Self {
            omega: 15.0,
            n_steps: 1000,
            steps_latent: 16,
            steps_image: 256,
            latent_lr: 0.1,
            image_lr: 0.01,
            rng_seed: 0,
            diffusion_steps: 1000,
            timestep_range: TimestepRange::Clipped,
            timestep_weight: TimestepWeight::Unit,
        }
    }
}

/// Two-step SDS generation of an `height × width` image from noise.
pub fn two_step_sds_2d<T: Real>(
    prompt: &str,
    shape: (usize, usize),
    cfg: &Sds2dConfig,
    denoiser: &dyn Denoiser<T>,
    codec: &dyn LatentCodec<T>,
) -> Result<Array3<T>, RelightError> {
    if cfg.steps_latent == 0 || cfg.steps_image == 0 {
        return Err(RelightError::InvalidJob("step counts must be positive".into()));
    }
    let sched = DiffusionSchedule::scaled_linear(cfg.diffusion_steps)?;
    let cond = DenoiserCondition::prompt(prompt);
    let params = GuidanceParams {
        omega: T::lit(cfg.omega),
        weight: cfg.timestep_weight,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut image = Array3::from_shape_simple_fn((shape.0, shape.1, 3), || {
        let v: f64 = rng.sample(StandardNormal);
        T::lit(v)
    });
    let mut sampler = GuidanceSampler::new(rng.random(), cfg.diffusion_steps, cfg.timestep_range);
    let mut adam = AdamState::new(image.len());
    let (latent_lr, image_lr) = (T::lit(cfg.latent_lr), T::lit(cfg.image_lr));
    let mut done = 0;
    while done < cfg.n_steps {
        let mut latent = codec.encode(&image)?;
        let n = cfg.steps_latent.min(cfg.n_steps - done);
        for _ in 0..n {
            let sample = sampler.next(latent.dim());
            let g = sds_grad(&latent, &sample, &sched, denoiser, &cond, params)?;
            latent.zip_mut_with(&g, |l, &d| *l -= latent_lr * d);
        }
        done += n;
        let target = codec.decode(&latent)?;
        for _ in 0..cfg.steps_image {
            let (_, grad) = l1_with_grad(&image, &target);
            let flat = image.as_slice_mut().expect("standard layout");
            adam_step(&mut adam, flat, grad.as_slice().expect("standard layout"), image_lr).expect("sized at start");
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_echo() {
        let v = serde_json::to_value(OptimizationConfig::default()).unwrap();
        assert_eq!(v["num_iters"], 20000);
        assert_eq!(v["steps_latent"], 16);
        assert_eq!(v["steps_image"], 256);
        assert_eq!(v["guidance_scale"], 7.5);
        assert_eq!(v["latent_lr"], 0.1);
        assert_eq!(v["color_lr"], 0.0025);
        assert_eq!(v["sh_lr"], 0.000125);
        assert_eq!(v["sh_degree_interval"], 5000);
    }

    #[test]
    fn outer_iteration_count_rounds_up() {
        let cfg = OptimizationConfig::default();
        assert_eq!(cfg.outer_iterations(), 79);
        let cfg = OptimizationConfig {
            num_iters: 512,
            ..Default::default()
        };
        assert_eq!(cfg.outer_iterations(), 2);
    }

    #[test]
    fn prompt_templates() {
        assert_eq!(target_prompt("red mug", "kitchen"), "a red mug in a kitchen");
        assert_eq!(init_prompt("kitchen"), "a kitchen");
    }

    #[test]
    fn l1_subgradient() {
        let p = Array3::from_shape_vec((1, 1, 3), vec![1.0, 0.0, 0.5]).unwrap();
        let q = Array3::from_shape_vec((1, 1, 3), vec![0.0, 1.0, 0.5]).unwrap();
        let (l, g) = l1_with_grad(&p, &q);
        assert!((l - 2.0 / 3.0f64).abs() < 1e-15);
        assert_eq!(g.as_slice().unwrap(), &[1.0 / 3.0, -1.0 / 3.0, 0.0]);
    }
}
