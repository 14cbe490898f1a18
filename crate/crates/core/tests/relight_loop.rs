mod common;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use common::{axis_camera, random_cloud, rng};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::Rng;
use splatlight::cloud::{dc_to_rgb, Gaussian, GaussianCloud};
use splatlight::fixtures::{toy_scene, ToyScene, TOY_BRIGHT_RGB};
use splatlight::guidance::*;
use splatlight::optim::{adam_step, AdamState};
use splatlight::relight::*;
use splatlight::render::{render, selection};

fn toy_config(scene: &ToyScene<f64>, outer: u64, steps_image: usize) -> OptimizationConfig {
    OptimizationConfig {
        num_iters: outer * steps_image as u64,
        steps_image,
        camera_pool: vec![scene.camera.clone()],
        background: scene.background,
        rng_seed: 7,
        ..Default::default()
    }
}

fn object_rgb_error(scene: &ToyScene<f64>, cloud: &GaussianCloud<f64>) -> f64 {
    let mut err = 0.0;
    for i in scene.object_range.clone() {
        for c in 0..3 {
            err += (dc_to_rgb(cloud.sh()[i][0][c]) - TOY_BRIGHT_RGB[c]).abs();
        }
    }
    err / (3 * scene.object_range.len()) as f64
}

#[test]
fn toy_relight_moves_object_only() {
    let scene = toy_scene::<f64>();
    let den = scene.toy_denoiser(0.05);
    let job = RelightJob {
        cloud: scene.merged.clone(),
        object_range: scene.object_range.clone(),
        prompt_tgt: scene.prompt_tgt.clone(),
        prompt_init: scene.prompt_init.clone(),
        config: toy_config(&scene, 12, 256),
        denoiser: &den,
        codec: &ToyCodec,
    };
    let out = two_step_dds(&job).unwrap();
    assert_eq!(out.log.len(), 12);

    // The object colour heads for the prompt's colour.
    let before = object_rgb_error(&scene, &scene.merged);
    let after = object_rgb_error(&scene, &out.cloud);
    assert!(after < 0.5 * before, "{before} -> {after}");

    // Geometry, opacity and every scene Gaussian are untouched.
    assert_eq!(out.cloud.means(), scene.merged.means());
    assert_eq!(out.cloud.scales(), scene.merged.scales());
    assert_eq!(out.cloud.rotations(), scene.merged.rotations());
    assert_eq!(out.cloud.opacities(), scene.merged.opacities());
    assert_eq!(out.cloud.sh()[..scene.object_range.start], scene.merged.sh()[..scene.object_range.start]);

    // Pixels the object does not reach are bit-identical.
    let cam = &scene.camera;
    let b0 = render(&scene.merged, cam, scene.background).unwrap();
    let b1 = render(&out.cloud, cam, scene.background).unwrap();
    let mask = b0.mask(&selection(scene.merged.len(), &scene.object_range.clone().collect::<Vec<_>>()));
    let mut untouched = 0;
    for ((y, x), m) in mask.indexed_iter() {
        if *m == 0.0 {
            untouched += 1;
            for k in 0..3 {
                assert_eq!(b0.rgb[[y, x, k]], b1.rgb[[y, x, k]]);
            }
        }
    }
    assert!(untouched > 0);

    // Colour learning rate decays every outer iteration.
    assert!(out.log.windows(2).all(|w| w[1].lr < w[0].lr));
}

/// Predicts zero noise for every input, so every DDS cotangent is zero.
struct ZeroDenoiser;

impl Denoiser<f64> for ZeroDenoiser {
    fn predict_noise(
        &self,
        z_t: &Array3<f64>,
        _t: usize,
        _cond: &DenoiserCondition<f64>,
        _unconditional: bool,
    ) -> Result<NoisePrediction<f64>, GuidanceError> {
        NoisePrediction::new(Array3::zeros(z_t.dim()))
    }
}

#[test]
fn inert_guidance_leaves_a_uniform_view_fixed() {
    // A mid-grey object filling the whole view over a mid-grey background
    // renders to exactly 0.5, which the codec reproduces exactly.
    let scene_g = Gaussian::isotropic([50.0, 0.0, 0.0], 0.1, 0.5, [0.5; 3]);
    let object_g = Gaussian::isotropic([0.0; 3], 40.0, 0.99, [0.5; 3]);
    let cloud = GaussianCloud::from_gaussians(vec![scene_g, object_g]).unwrap();
    let cam = axis_camera(8, 10.0);
    let bg = [0.5; 3];
    let b = render(&cloud, &cam, bg).unwrap();
    assert!(b.rgb.iter().all(|v| *v == 0.5));
    let config = OptimizationConfig {
        num_iters: 4 * 32,
        steps_image: 32,
        camera_pool: vec![cam],
        background: bg,
        ..Default::default()
    };
    let job = RelightJob {
        cloud: cloud.clone(),
        object_range: 1..2,
        prompt_tgt: "a grey ball in a room".into(),
        prompt_init: "a room".into(),
        config,
        denoiser: &ZeroDenoiser,
        codec: &ToyCodec,
    };
    let out = two_step_dds(&job).unwrap();
    assert_eq!(out.cloud.sh(), cloud.sh());
    assert!(out.log.iter().all(|r| r.dds_grad_norm == 0.0 && r.l1_loss == 0.0));
}

fn small_job<'a>(scene: &'a ToyScene<f64>, den: &'a dyn Denoiser<f64>, outer: u64) -> RelightJob<'a, f64> {
    let mut config = toy_config(scene, outer, 32);
    config.checkpoint_every = 1;
    config.sh_degree_interval = 40;
    RelightJob {
        cloud: scene.merged.clone(),
        object_range: scene.object_range.clone(),
        prompt_tgt: scene.prompt_tgt.clone(),
        prompt_init: scene.prompt_init.clone(),
        config,
        denoiser: den,
        codec: &ToyCodec,
    }
}

#[test]
fn resumed_run_is_bit_identical() {
    let scene = toy_scene::<f64>();
    let den = scene.toy_denoiser(0.1);
    let job = small_job(&scene, &den, 6);
    let full = two_step_dds(&job).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = two_step_dds_with(
        &job,
        RunOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(3),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(first.log.len(), 3);
    let ck = Checkpoint::<f64>::load(dir.path()).unwrap();
    assert_eq!(ck.outer_iters_done, 3);
    let resumed = two_step_dds_with(
        &job,
        RunOptions {
            resume: Some(ck),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.cloud.sh(), full.cloud.sh());
    assert_eq!(resumed.log, full.log);
    assert_eq!(resumed.checkpoint.adam_color, full.checkpoint.adam_color);
}

#[test]
fn cancellation_checkpoints_and_stops() {
    let scene = toy_scene::<f64>();
    let den = scene.toy_denoiser(0.1);
    let job = small_job(&scene, &den, 6);
    let flag = AtomicBool::new(false);
    let dir = tempfile::tempdir().unwrap();
    let err = two_step_dds_with(
        &job,
        RunOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            cancel: Some(&flag),
            on_iteration: Some(Box::new(|row: &IterationLog, _: &GaussianCloud<f64>| {
                if row.outer_iter == 1 {
                    flag.store(true, Ordering::SeqCst);
                }
            })),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, RelightError::Interrupted { outer_iters_done: 2 }));
    assert_eq!(Checkpoint::<f64>::load(dir.path()).unwrap().outer_iters_done, 2);
}

/// Wraps a denoiser and fails once a call budget is spent.
struct Flaky<D> {
    inner: D,
    budget: usize,
    calls: AtomicUsize,
}

impl<D: Denoiser<f64>> Denoiser<f64> for Flaky<D> {
    fn predict_noise(
        &self,
        z_t: &Array3<f64>,
        t: usize,
        cond: &DenoiserCondition<f64>,
        unconditional: bool,
    ) -> Result<NoisePrediction<f64>, GuidanceError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(GuidanceError::DenoiserFailure("bridge went away".into()));
        }
        self.inner.predict_noise(z_t, t, cond, unconditional)
    }
}

#[test]
fn denoiser_failure_keeps_last_good_checkpoint() {
    let scene = toy_scene::<f64>();
    // Four predictions per latent step, 16 latent steps per outer iteration;
    // the budget runs out partway through the third.
    let den = Flaky {
        inner: scene.toy_denoiser(0.1),
        budget: 2 * 64 + 10,
        calls: AtomicUsize::new(0),
    };
    let job = small_job(&scene, &den, 6);
    let dir = tempfile::tempdir().unwrap();
    let err = two_step_dds_with(
        &job,
        RunOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(err.is_denoiser_failure());
    let ck = Checkpoint::<f64>::load(dir.path()).unwrap();
    assert_eq!(ck.outer_iters_done, 2);
    assert_eq!(ck.log.len(), 2);
}

#[test]
fn invalid_jobs_are_rejected() {
    let scene = toy_scene::<f64>();
    let den = scene.toy_denoiser(0.1);
    let mut job = small_job(&scene, &den, 2);
    job.config.camera_pool.clear();
    assert!(matches!(two_step_dds(&job), Err(RelightError::InvalidJob(_))));
    let mut job = small_job(&scene, &den, 2);
    job.config.steps_latent = 0;
    assert!(matches!(two_step_dds(&job), Err(RelightError::InvalidJob(_))));
}

#[test]
fn adam_first_step_closed_form() {
    let mut st = AdamState::<f64>::new(3);
    let mut p = vec![1.0, 2.0, 3.0];
    let g = [0.5, -4.0, 1e-3];
    adam_step(&mut st, &mut p, &g, 0.1).unwrap();
    for i in 0..3 {
        let expect = [1.0, 2.0, 3.0][i] - 0.1 * g[i] / (g[i].abs() + 1e-8);
        assert!((p[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let c = [0.3, -1.2, 2.5, 0.0];
    let mut st = AdamState::<f64>::new(4);
    let mut p = vec![0.0; 4];
    for _ in 0..4000 {
        let g: Vec<f64> = p.iter().zip(c).map(|(x, c)| 2.0 * (x - c)).collect();
        adam_step(&mut st, &mut p, &g, 0.01).unwrap();
    }
    for (x, c) in p.iter().zip(c) {
        assert!((x - c).abs() < 1e-2);
    }
}

#[test]
fn adam_reaches_the_origin_of_a_unit_bowl() {
    let mut st = AdamState::<f64>::new(2);
    let mut p = vec![0.6, -0.8];
    for _ in 0..500 {
        let g = p.clone();
        adam_step(&mut st, &mut p, &g, 0.1).unwrap();
    }
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "{norm}");
}

#[test]
fn colour_learning_rate_decays_to_one_percent() {
    let cfg = OptimizationConfig::default();
    let s = cfg.color_schedule();
    let mut prev = f64::INFINITY;
    for k in (0..=20_000).step_by(250) {
        let lr = s.at(k);
        assert!(lr < prev);
        prev = lr;
    }
    assert!((s.at(20_000) - 0.0025 * 0.01).abs() < 1e-12);
}

#[test]
fn edit_with_equal_branches_is_a_codec_round_trip() {
    let img = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| 0.1 * y as f64 - 0.05 * x as f64 + 0.2 * c as f64);
    let den = ToyDenoiser::new(make_schedule(1000).unwrap()).with_target("p", Array3::zeros((4, 4, 3)), 0.3);
    let out = dds_edit_2d(&img, &img, "p", "p", None, None, &Edit2dConfig::default(), &den, &ToyCodec).unwrap();
    let expect = ToyCodec.decode(&ToyCodec.encode(&img).unwrap()).unwrap();
    assert_eq!(out, expect);

    let zero = Array2::zeros((8, 8));
    let den = den.with_target("q", Array3::from_elem((4, 4, 3), 1.0), 0.3);
    let out = dds_edit_2d(&img, &img, "q", "p", Some(&zero), None, &Edit2dConfig::default(), &den, &ToyCodec).unwrap();
    assert_eq!(out, img);
}

#[test]
fn edit_follows_scalar_recurrence() {
    let sched = make_schedule::<f64>(1000).unwrap();
    let (mu_t, mu_i, x_t0, x_i) = (0.8, 0.2, 0.1, 0.3);
    let den = ToyDenoiser::new(sched.clone())
        .with_target("t", Array3::from_elem((2, 2, 3), mu_t), 0.0)
        .with_target("i", Array3::from_elem((2, 2, 3), mu_i), 0.0);
    let cfg = Edit2dConfig::default();
    let out = dds_edit_2d(
        &Array3::from_elem((4, 4, 3), x_t0),
        &Array3::from_elem((4, 4, 3), x_i),
        "t",
        "i",
        None,
        None,
        &cfg,
        &den,
        &ToyCodec,
    )
    .unwrap();

    let mut sampler = GuidanceSampler::new(cfg.rng_seed, 1000, TimestepRange::Clipped);
    let mut l = x_t0;
    for _ in 0..cfg.n_steps {
        let t = sampler.next::<f64>((2, 2, 3)).t;
        let k = sched.alpha(t) / sched.sigma(t);
        l -= cfg.latent_lr * k * ((l - mu_t) - (x_i - mu_i));
    }
    assert!(out.iter().all(|v| (v - l).abs() < 1e-9));
    assert!((l - (mu_t + x_i - mu_i)).abs() < 1e-6);
}

#[test]
fn sds_generation_reaches_the_prompt_mean() {
    let mu = Array3::from_shape_fn((4, 4, 3), |(y, x, c)| 0.2 + 0.05 * (y + x) as f64 - 0.1 * c as f64);
    let den = ToyDenoiser::new(make_schedule(1000).unwrap()).with_target("a lamp", mu.clone(), 0.0);
    let cfg = Sds2dConfig {
        n_steps: 320,
        ..Default::default()
    };
    let img = two_step_sds_2d("a lamp", (8, 8), &cfg, &den, &ToyCodec).unwrap();
    let again = two_step_sds_2d("a lamp", (8, 8), &cfg, &den, &ToyCodec).unwrap();
    assert_eq!(img, again);
    let target = ToyCodec.decode(&mu).unwrap();
    let worst = img.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 0.05, "{worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn recolor_matches_a_fresh_render(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cloud = random_cloud(&mut r, 15, 3);
        let cam = axis_camera(10, 10.0);
        let bg = [0.2, 0.1, 0.7];
        let bundle = render(&cloud, &cam, bg).unwrap();
        let block: Vec<_> = (0..5).map(|_| {
            let mut sh = [[0.0; 3]; 16];
            for row in sh.iter_mut() {
                for v in row.iter_mut() {
                    *v = r.random_range(-0.3..0.3);
                }
            }
            sh
        }).collect();
        let edited = cloud.with_sh_block(5..10, &block).unwrap();
        let fresh = render(&edited, &cam, bg).unwrap();
        prop_assert_eq!(recolor(&bundle, &edited, &cam, bg), fresh.rgb);
    }
}

#[test]
fn image_fit_loss_rarely_rises() {
    // Adam is not a descent method, so the bar is 95% of inner loops rather
    // than all of them.
    let scene = toy_scene::<f64>();
    let (mut monotone, mut total) = (0, 0);
    for (trial, spread) in [0.05, 0.1].into_iter().cycle().take(16).enumerate() {
        let den = scene.toy_denoiser(spread);
        let mut config = toy_config(&scene, 4, 64);
        config.rng_seed = 100 + trial as u64;
        let job = RelightJob {
            cloud: scene.merged.clone(),
            object_range: scene.object_range.clone(),
            prompt_tgt: scene.prompt_tgt.clone(),
            prompt_init: scene.prompt_init.clone(),
            config,
            denoiser: &den,
            codec: &ToyCodec,
        };
        let mut losses = vec![Vec::new(); 4];
        {
            let losses = &mut losses;
            let opts = RunOptions {
                on_image_step: Some(Box::new(move |outer, loss| losses[outer as usize].push(loss))),
                ..Default::default()
            };
            two_step_dds_with(&job, opts).unwrap();
        }
        for run in &losses {
            assert_eq!(run.len(), 64);
            total += 1;
            monotone += run.windows(2).all(|w| w[1] <= w[0]) as usize;
        }
    }
    assert!(monotone * 100 >= 95 * total, "{monotone}/{total} inner loops non-increasing");
}
