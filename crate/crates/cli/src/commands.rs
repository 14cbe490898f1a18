use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use splatlight::cloud::{init_object_appearance, insert_object, InsertionSpecFile, ShInsertion};
use splatlight::image_io::{save_npy, save_png};
use splatlight::mesh::{sample_points, write_xyz, MeshScene, SampleConfig};
use splatlight::metrics::run_benchmark;
use splatlight::personalize::{build_dataset, FinetuneJobSpec, PersonalizationPlan};
use splatlight::ply::{load_cloud, save_cloud, save_positions};
use splatlight::relight::{
    two_step_dds_with, two_step_sds_2d, write_metrics_csv, Checkpoint, OptimizationConfig, RelightJob, RunOptions, Sds2dConfig,
};
use splatlight::{Camera64, Cloud};
use splatlight_bridge::wire::{finetune_ids, JobStatus};

use crate::error::{data, CliError};
use crate::run::*;
use crate::{Cli, CliResult, Command, EvalArgs, Generate2dArgs, Global, InsertArgs, PersonalizeArgs, RelightArgs, SampleArgs};

pub fn dispatch(cli: &Cli) -> CliResult<PathBuf> {
    let g = &cli.global;
    match &cli.command {
        Command::Insert(a) => insert(g, a),
        Command::Relight(a) => relight(g, a),
        Command::Eval(a) => eval(g, a),
        Command::SamplePoints(a) => sample(g, a),
        Command::Personalize(a) => personalize(g, a),
        Command::Generate2d(a) => generate_2d(g, a),
    }
}

/// What `insert` records for `relight`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub scene: PathBuf,
    pub object: PathBuf,
    pub spec: InsertionSpecFile,
    pub object_range: [usize; 2],
    pub init_mean: bool,
}

fn insert(g: &Global, a: &InsertArgs) -> CliResult<PathBuf> {
    for p in [&a.scene, &a.object, &a.spec] {
        require_file(p)?;
    }
    if a.cameras.is_none() && (a.preview_views == 0 || a.preview_size == 0) {
        return Err(CliError::Usage("--preview-views and --preview-size must be positive".into()));
    }
    let spec_file: InsertionSpecFile = read_json(&a.spec)?;
    let scene: Cloud = load_cloud(&a.scene)?;
    let object: Cloud = load_cloud(&a.object)?;
    let (mut merged, spec) = insert_object(&scene, &object, &spec_file.to_spec(), ShInsertion::ZeroHigherBands)?;
    let range = spec.object_range.clone();
    if a.init_mean {
        merged = init_object_appearance(&merged, range.clone())?;
    }
    let cams = match &a.cameras {
        Some(p) => load_cameras(p)?,
        None => {
            let (c, r) = merged.select(&range.clone().collect::<Vec<_>>()).bounding_sphere();
            orbit_cameras(c.map(|v| v as f64), r as f64, a.preview_views, a.preview_size)
        }
    };

    let run = RunDir::create(g, "insert", "none", a)?;
    save_cloud(&merged, run.join("merged.ply"))?;
    let record = InsertionRecord {
        scene: a.scene.clone(),
        object: a.object.clone(),
        spec: spec_file,
        object_range: [range.start, range.end],
        init_mean: a.init_mean,
    };
    write_json(&run.join("insertion.json"), &record)?;
    write_json(&run.join("cameras.json"), &cameras_map(&cams))?;
    save_png(&preview_grid(&merged, &cams, [0.0; 3])?, run.join("preview.png"))?;
    log::info!("inserted {} Gaussians at {:?}; {} preview tiles", range.len(), range, cams.len());
    Ok(run.path)
}

/// Contents of a relight job file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelightJobFile {
    /// Merged scene + object cloud.
    pub cloud: PathBuf,
    /// Record written by `insert`; supplies the object's index range.
    pub insertion: PathBuf,
    /// Camera pool; may instead come from `config.camera_pool`.
    #[serde(default)]
    pub cameras: Option<PathBuf>,
    #[serde(default)]
    pub prompt_tgt: Option<String>,
    #[serde(default)]
    pub prompt_init: Option<String>,
    /// Overrides of the optimization config.
    #[serde(default)]
    pub config: Value,
    #[serde(default)]
    pub bridge: Option<String>,
    /// Fine-tuned model to use on a remote bridge.
    #[serde(default)]
    pub model_id: Option<String>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn prompt(p: &Option<String>, name: &str) -> CliResult<String> {
    match p.as_deref().map(str::trim) {
        Some(s) if !s.is_empty() => Ok(s.to_string()),
        _ => Err(CliError::Usage(format!("job is missing {name}"))),
    }
}

const MAX_PREVIEW_TILES: usize = 8;

fn relight(g: &Global, a: &RelightArgs) -> CliResult<PathBuf> {
    require_file(&a.job)?;
    let job: RelightJobFile = read_json(&a.job)?;
    let prompt_tgt = prompt(&job.prompt_tgt, "prompt_tgt")?;
    let prompt_init = prompt(&job.prompt_init, "prompt_init")?;
    let base = a.job.parent().unwrap_or(Path::new("."));
    let mut config: OptimizationConfig = merge_overrides(&OptimizationConfig::default(), &job.config, "config")?;
    config.rng_seed = g.seed;
    if let Some(p) = &job.cameras {
        config.camera_pool = load_cameras(&resolve(base, p))?;
    }
    if config.camera_pool.is_empty() {
        return Err(CliError::Usage("job names no cameras".into()));
    }
    let cloud_path = resolve(base, &job.cloud);
    require_file(&cloud_path)?;
    let record: InsertionRecord = read_json(&resolve(base, &job.insertion))?;
    let cloud: Cloud = load_cloud(&cloud_path)?;
    let range = record.object_range[0]..record.object_range[1];
    if range.is_empty() || range.end > cloud.len() {
        return Err(data(format!("object range {range:?} does not fit a cloud of {}", cloud.len())));
    }
    let bridge = bridge_choice(g, job.bridge.as_deref())?;

    #[derive(Serialize)]
    struct Snapshot<'a> {
        job: &'a Path,
        prompt_tgt: &'a str,
        prompt_init: &'a str,
        cloud: &'a Path,
        object_range: [usize; 2],
        model_id: &'a Option<String>,
        config: &'a OptimizationConfig,
    }
    let run = RunDir::create(
        g,
        "relight",
        &bridge,
        &Snapshot {
            job: &a.job,
            prompt_tgt: &prompt_tgt,
            prompt_init: &prompt_init,
            cloud: &cloud_path,
            object_range: record.object_range,
            model_id: &job.model_id,
            config: &config,
        },
    )?;
    let models = Models::connect(g, &bridge)?;
    let denoiser = models.denoiser(job.model_id.clone());
    let codec = models.codec();
    let ck_dir = run.join("checkpoint");
    let resume = if a.resume {
        Some(Checkpoint::load(&ck_dir).map_err(|e| data(format!("no checkpoint to resume in {}: {e}", ck_dir.display())))?)
    } else {
        None
    };

    let preview_cams: Vec<Camera64> = config.camera_pool.iter().take(MAX_PREVIEW_TILES).cloned().collect();
    let bg = config.background;
    save_png(&preview_grid(&cloud, &preview_cams, bg)?, run.join("preview_before.png"))?;

    let cancel = Arc::new(AtomicBool::new(false));
    {
        let cancel = cancel.clone();
        // A second handler registration (in-process reuse) is harmless to skip.
        let _ = ctrlc::set_handler(move || cancel.store(true, Ordering::SeqCst));
    }
    let previews = run.join("previews");
    fs::create_dir_all(&previews)?;
    let every = config.checkpoint_every.max(1);
    let first_cam = preview_cams[0].clone();
    let job_spec = RelightJob {
        cloud,
        object_range: range,
        prompt_tgt,
        prompt_init,
        config: config.clone(),
        denoiser: denoiser.as_ref(),
        codec: codec.as_ref(),
    };
    let opts = RunOptions {
        checkpoint_dir: Some(ck_dir),
        resume,
        cancel: Some(&cancel),
        on_iteration: Some(Box::new(|row, cloud: &Cloud| {
            if (row.outer_iter + 1) % every == 0 {
                let path = previews.join(format!("iter_{:05}.png", row.outer_iter + 1));
                match preview_grid(cloud, std::slice::from_ref(&first_cam), bg) {
                    Ok(img) => {
                        if let Err(e) = save_png(&img, &path) {
                            log::warn!("{}: {e}", path.display());
                        }
                    }
                    Err(e) => log::warn!("preview: {e}"),
                }
            }
            log::debug!("outer {} dds {:.4e} l1 {:.4e}", row.outer_iter, row.dds_grad_norm, row.l1_loss);
        })),
        on_image_step: None,
        stop_after: a.stop_after,
    };
    let outcome = two_step_dds_with(&job_spec, opts)?;
    write_metrics_csv(&outcome.log, run.join("log.csv"))?;
    let done = outcome.checkpoint.outer_iters_done;
    if done < config.outer_iterations() {
        log::info!("stopped after {done} of {} outer iterations; rerun with --resume", config.outer_iterations());
        return Ok(run.path);
    }
    save_cloud(&outcome.cloud, run.join("relit.ply"))?;
    save_png(&preview_grid(&outcome.cloud, &preview_cams, bg)?, run.join("preview_after.png"))?;
    Ok(run.path)
}

fn eval(g: &Global, a: &EvalArgs) -> CliResult<PathBuf> {
    for p in [&a.dataset, &a.outputs] {
        if !p.is_dir() {
            return Err(data(format!("{}: not a directory", p.display())));
        }
    }
    let bridge = if a.no_embedder { "none".to_string() } else { bridge_choice(g, None)? };
    let run = RunDir::create(g, "eval", &bridge, a)?;
    let models = if a.no_embedder { None } else { Some(Models::connect(g, &bridge)?) };
    let report = run_benchmark(&a.dataset, &a.outputs, models.as_ref().map(|m| m.embedder()))?;
    report.write(&run.path)?;
    Ok(run.path)
}

fn sample(g: &Global, a: &SampleArgs) -> CliResult<PathBuf> {
    require_file(&a.mesh)?;
    let mesh = MeshScene::load_obj(&a.mesh)?;
    let cfg = SampleConfig {
        strategy: a.strategy,
        count: a.count,
        rng_seed: g.seed,
    };
    let points = sample_points(&mesh, &cfg)?;
    let run = RunDir::create(g, "sample-points", "none", a)?;
    let as_f32: Vec<[f32; 3]> = points.iter().map(|p| p.map(|v| v as f32)).collect();
    save_positions(&as_f32, run.join("points.ply"))?;
    if a.xyz {
        write_xyz(&points, run.join("points.xyz"))?;
    }
    Ok(run.path)
}

const DATASET_DIR: &str = "dataset";
const POLL_INTERVAL: Duration = Duration::from_millis(200);
const MAX_POLLS: usize = 3000;

fn personalize(g: &Global, a: &PersonalizeArgs) -> CliResult<PathBuf> {
    require_file(&a.object)?;
    let mut plan: PersonalizationPlan = read_json(&a.plan)?;
    plan.rng_seed = g.seed;
    plan.validate()?;
    let object: Cloud = load_cloud(&a.object)?;
    let bridge = bridge_choice(g, None)?;
    let run = RunDir::create(g, "personalize", &bridge, &json!({ "object": a.object, "plan": plan }))?;
    let models = Models::connect(g, &bridge)?;
    let manifest = build_dataset(&object, &plan, models.personalization(), &run.join(DATASET_DIR))?;
    // Relative to the run directory so the job is independent of --out.
    let job = FinetuneJobSpec::from_manifest(&manifest, Path::new(DATASET_DIR));
    job.write(&run.join("finetune_job.json"))?;

    let (job_id, status) = match &models {
        Models::Toy => {
            let (id, model) = finetune_ids(&job);
            (id, json!({ "status": JobStatus::Completed, "model_id": model }))
        }
        Models::Remote(client) => {
            let id = client.submit_finetune(&job)?;
            let mut polls = 0;
            let st = loop {
                let st = client.poll_finetune(&id)?;
                if matches!(st.status, JobStatus::Completed | JobStatus::Failed) || polls >= MAX_POLLS {
                    break st;
                }
                polls += 1;
                std::thread::sleep(POLL_INTERVAL);
            };
            (id, serde_json::to_value(st).expect("serializable"))
        }
    };
    write_json(&run.join("finetune.json"), &json!({ "job_id": job_id, "result": status }))?;
    log::info!("fine-tune job {job_id}");
    Ok(run.path)
}

fn generate_2d(g: &Global, a: &Generate2dArgs) -> CliResult<PathBuf> {
    if a.size == 0 || a.steps == 0 {
        return Err(CliError::Usage("--size and --steps must be positive".into()));
    }
    if a.prompt.trim().is_empty() {
        return Err(CliError::Usage("--prompt is empty".into()));
    }
    let bridge = bridge_choice(g, None)?;
    let run = RunDir::create(g, "generate-2d", &bridge, a)?;
    let models = Models::connect(g, &bridge)?;
    let cfg = Sds2dConfig {
        omega: a.omega,
        n_steps: a.steps,
        rng_seed: g.seed,
        ..Sds2dConfig::default()
    };
    let (den, codec) = (models.denoiser(None), models.codec());
    let image = two_step_sds_2d(&a.prompt, (a.size, a.size), &cfg, den.as_ref(), codec.as_ref())?;
    save_png(&image, run.join("image.png"))?;
    save_npy(&image.clone().into_dyn(), run.join("image.npy"))?;
    Ok(run.path)
}
