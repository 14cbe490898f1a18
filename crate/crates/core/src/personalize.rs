//! Personalization dataset: relit renders of the object from random orbit
//! views plus generic class images, and the fine-tune job description.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LightDirection, PersonalizationBackend};
use crate::cloud::GaussianCloud;
use crate::geom::{add, cross, normalize, scale, Vec3};
use crate::image_io::{save_png, ImageIoError};
use crate::render::{render, Camera, RenderError};

#[derive(Debug, Error)]
pub enum PersonalizeError {
    #[error("invalid plan: {0}")]
    InvariantViolation(String),
    #[error("bridge failure after {completed} records: {source}")]
    BridgeFailure {
        completed: usize,
        #[source]
        source: BackendError,
    },
    #[error("manifest lacks {0} records")]
    MissingSource(Source),
    #[error("existing output does not match this plan: {0}")]
    ResumeMismatch(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

const BACKGROUNDS_V1: &str = include_str!("../assets/backgrounds_v1.json");

#[derive(Deserialize)]
struct BackgroundFile {
    version: u32,
    backgrounds: Vec<String>,
}

/// The 20 background prompts, version 1.
pub fn default_backgrounds() -> Vec<String> {
    let f: BackgroundFile = serde_json::from_str(BACKGROUNDS_V1).expect("bundled asset parses");
    debug_assert_eq!(f.version, 1);
    f.backgrounds
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: u32,
    pub batch: u32,
    pub lr: f64,
    pub weight_decay: f64,
    pub scheduler: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            batch: 4,
            lr: 5e-6,
            weight_decay: 1e-2,
            scheduler: "constant".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonalizationPlan {
    pub object_desc: String,
    pub rare_token: String,
    pub n_views: usize,
    pub backgrounds: Vec<String>,
    pub directions: Vec<LightDirection>,
    pub n_class_images: usize,
    pub instance_probability: f64,
    pub train: TrainConfig,
    pub image_size: usize,
    /// Orbit radius as a multiple of the object's bounding-sphere radius.
    pub orbit_radius_factor: f64,
    pub elevation_deg: [f64; 2],
    pub up: [f64; 3],
    pub rng_seed: u64,
}

impl Default for PersonalizationPlan {
    fn default() -> Self {
        Self {
            object_desc: "object".into(),
            rare_token: "<ktn>".into(),
            n_views: 32,
            backgrounds: default_backgrounds(),
            directions: LightDirection::ALL.to_vec(),
            n_class_images: 200,
            instance_probability: 0.7,
            train: TrainConfig::default(),
            image_size: 512,
            orbit_radius_factor: 2.5,
            elevation_deg: [-10.0, 40.0],
            up: [0.0, 0.0, 1.0],
            rng_seed: 0,
        }
    }
}

/// White, for relighting inputs.
pub const RENDER_BACKGROUND: [f32; 3] = [1.0; 3];

impl PersonalizationPlan {
    pub fn validate(&self) -> Result<(), PersonalizeError> {
        let bad = |m: &str| Err(PersonalizeError::InvariantViolation(m.to_string()));
        if !(self.instance_probability > 0.0 && self.instance_probability < 1.0) {
            return bad("instance_probability must be in (0, 1)");
        }
        if self.n_views == 0 {
            return bad("n_views must be positive");
        }
        if self.backgrounds.is_empty() {
            return bad("backgrounds must be non-empty");
        }
        if self.directions.is_empty() {
            return bad("directions must be non-empty");
        }
        if self.object_desc.trim().is_empty() {
            return bad("object_desc must be non-empty");
        }
        if self.rare_token.trim().is_empty() || self.object_desc.contains(&self.rare_token) {
            return bad("rare token must be non-empty and absent from object_desc");
        }
        if self.image_size == 0 || !(self.orbit_radius_factor > 1.0) {
            return bad("image_size must be positive and orbit_radius_factor > 1");
        }
        if !(self.elevation_deg[0] <= self.elevation_deg[1]) || self.elevation_deg.iter().any(|e| e.abs() >= 90.0) {
            return bad("elevation range must lie inside (-90, 90)");
        }
        if crate::geom::norm(self.up) == 0.0 {
            return bad("up must be non-zero");
        }
        Ok(())
    }

    /// `a <object_desc>`.
    pub fn class_prompt(&self) -> String {
        format!("a {}", self.object_desc)
    }

    /// `a <rare_token> <object_desc>`.
    pub fn instance_prompt(&self) -> String {
        format!("a {} {}", self.rare_token, self.object_desc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Iclight,
    Class,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Iclight => "iclight",
            Source::Class => "class",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    /// Relative to the manifest directory.
    pub image: String,
    pub prompt: String,
    pub source: Source,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub background: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub direction: Option<LightDirection>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub azimuth_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub elevation_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<DatasetRecord>,
    pub plan: PersonalizationPlan,
    pub rng_seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PLAN_FILE: &str = "plan.json";
pub const CURSOR_FILE: &str = "cursor.json";

/// Progress of a partially built dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResumeCursor {
    pub instance_done: usize,
    pub class_done: usize,
}

impl DatasetManifest {
    /// One JSON record per line, sorted by id.
    pub fn to_jsonl(&self) -> String {
        let mut recs = self.records.clone();
        recs.sort_by(|a, b| a.id.cmp(&b.id));
        let mut out = String::new();
        for r in &recs {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), PersonalizeError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), self.to_jsonl())?;
        fs::write(dir.join(PLAN_FILE), serde_json::to_vec_pretty(&self.plan)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PersonalizeError> {
        let plan: PersonalizationPlan = serde_json::from_slice(&fs::read(dir.join(PLAN_FILE))?)?;
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<DatasetRecord>, _>>()?;
        Ok(Self {
            rng_seed: plan.rng_seed,
            records,
            plan,
        })
    }

    pub fn count(&self, source: Source) -> usize {
        self.records.iter().filter(|r| r.source == source).count()
    }
}

/// One orbit viewpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct OrbitView {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub camera: Camera<f64>,
}

/// Uniform azimuth and uniform elevation in the plan's range around a
/// sphere, with the focal length chosen so the sphere fills ~90% of the frame.
pub fn sample_orbit_view<R: Rng + ?Sized>(
    rng: &mut R,
    center: Vec3<f64>,
    radius: f64,
    plan: &PersonalizationPlan,
) -> OrbitView {
    let az: f64 = rng.random_range(0.0..360.0);
    let [lo, hi] = plan.elevation_deg;
    let el: f64 = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let radius = if radius > 0.0 { radius } else { 1.0 };
    let up = normalize(plan.up);
    let helper = if up[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalize(cross(up, helper));
    let e2 = cross(up, e1);
    let (a, e) = (az.to_radians(), el.to_radians());
    let dist = plan.orbit_radius_factor * radius;
    let dir = add(add(scale(e1, e.cos() * a.cos()), scale(e2, e.cos() * a.sin())), scale(up, e.sin()));
    let eye = add(center, scale(dir, dist));
    let half = (radius / (dist * dist - radius * radius).sqrt()).atan() / 0.9;
    let focal = (plan.image_size as f64 / 2.0) / half.tan();
    OrbitView {
        azimuth_deg: az,
        elevation_deg: el,
        camera: Camera::look_at(eye, center, up, focal, plan.image_size, plan.image_size),
    }
}

fn view_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const CLASS_STREAM_OFFSET: u64 = 1 << 32;

fn instance_record(plan: &PersonalizationPlan, cloud: &GaussianCloud<f32>, i: usize) -> (DatasetRecord, Camera<f32>) {
    let (c, r) = cloud.bounding_sphere();
    let mut rng = view_rng(plan.rng_seed, i as u64);
    let view = sample_orbit_view(&mut rng, c.map(|v| v as f64), r as f64, plan);
    let background = plan.backgrounds[rng.random_range(0..plan.backgrounds.len())].clone();
    let direction = plan.directions[rng.random_range(0..plan.directions.len())];
    (
        DatasetRecord {
            id: format!("iclight_{i:04}"),
            image: format!("iclight/{i:04}.png"),
            prompt: plan.instance_prompt(),
            source: Source::Iclight,
            background: Some(background),
            direction: Some(direction),
            azimuth_deg: Some(view.azimuth_deg),
            elevation_deg: Some(view.elevation_deg),
        },
        view.camera.cast(),
    )
}

fn class_record(plan: &PersonalizationPlan, j: usize) -> (DatasetRecord, u64) {
    let seed = view_rng(plan.rng_seed, CLASS_STREAM_OFFSET + j as u64).random::<u64>();
    (
        DatasetRecord {
            id: format!("class_{j:04}"),
            image: format!("class/{j:04}.png"),
            prompt: plan.class_prompt(),
            source: Source::Class,
            background: None,
            direction: None,
            azimuth_deg: None,
            elevation_deg: None,
        },
        seed,
    )
}

/// Renders, relights and samples the dataset into `out_dir`.
///
/// Progress is persisted after every record; a failed run leaves a partial
/// manifest and `cursor.json`, and calling again with the same plan resumes.
pub fn build_dataset(
    object: &GaussianCloud<f32>,
    plan: &PersonalizationPlan,
    backend: &dyn PersonalizationBackend,
    out_dir: &Path,
) -> Result<DatasetManifest, PersonalizeError> {
    plan.validate()?;
    fs::create_dir_all(out_dir.join("iclight"))?;
    fs::create_dir_all(out_dir.join("class"))?;

    let cursor_path = out_dir.join(CURSOR_FILE);
    let mut cursor = ResumeCursor::default();
    if cursor_path.exists() {
        let previous: PersonalizationPlan = serde_json::from_slice(&fs::read(out_dir.join(PLAN_FILE))?)?;
        if &previous != plan {
            return Err(PersonalizeError::ResumeMismatch("plan differs from the partial run".into()));
        }
        cursor = serde_json::from_slice(&fs::read(&cursor_path)?)?;
    }

    let mut manifest = DatasetManifest {
        records: Vec::new(),
        plan: plan.clone(),
        rng_seed: plan.rng_seed,
    };
    let persist = |m: &DatasetManifest, c: &ResumeCursor| -> Result<(), PersonalizeError> {
        m.write(out_dir)?;
        fs::write(&cursor_path, serde_json::to_vec(c)?)?;
        Ok(())
    };
    let fail = |m: &DatasetManifest, c: &ResumeCursor, e: BackendError| -> PersonalizeError {
        if let Err(io) = persist(m, c) {
            return io;
        }
        PersonalizeError::BridgeFailure {
            completed: m.records.len(),
            source: e,
        }
    };

    for i in 0..plan.n_views {
        let (rec, cam) = instance_record(plan, object, i);
        if i < cursor.instance_done {
            manifest.records.push(rec);
            continue;
        }
        let img = render(object, &cam, RENDER_BACKGROUND)?.rgb;
        let relit = match backend.relight(
            &img,
            &plan.class_prompt(),
            rec.background.as_deref().expect("instance record"),
            rec.direction.expect("instance record"),
        ) {
            Ok(r) => r,
            Err(e) => return Err(fail(&manifest, &cursor, e)),
        };
        save_png(&relit, out_dir.join(&rec.image))?;
        manifest.records.push(rec);
        cursor.instance_done = i + 1;
        persist(&manifest, &cursor)?;
    }
    for j in 0..plan.n_class_images {
        let (rec, seed) = class_record(plan, j);
        if j < cursor.class_done {
            manifest.records.push(rec);
            continue;
        }
        let img = match backend.sample_class(&plan.class_prompt(), seed, plan.image_size, plan.image_size) {
            Ok(r) => r,
            Err(e) => return Err(fail(&manifest, &cursor, e)),
        };
        save_png(&img, out_dir.join(&rec.image))?;
        manifest.records.push(rec);
        cursor.class_done = j + 1;
        persist(&manifest, &cursor)?;
    }
    manifest.records.sort_by(|a, b| a.id.cmp(&b.id));
    manifest.write(out_dir)?;
    fs::remove_file(&cursor_path)?;
    Ok(manifest)
}

/// `k` independent draws: an instance record with the plan's probability,
/// otherwise a class record, each uniform within its source.
pub fn sample_training_mix<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    k: usize,
    rng: &mut R,
) -> Result<Vec<DatasetRecord>, PersonalizeError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let inst: Vec<&DatasetRecord> = manifest.records.iter().filter(|r| r.source == Source::Iclight).collect();
    let class: Vec<&DatasetRecord> = manifest.records.iter().filter(|r| r.source == Source::Class).collect();
    if inst.is_empty() {
        return Err(PersonalizeError::MissingSource(Source::Iclight));
    }
    if class.is_empty() {
        return Err(PersonalizeError::MissingSource(Source::Class));
    }
    let p = manifest.plan.instance_probability;
    Ok((0..k)
        .map(|_| {
            let pool = if rng.random_bool(p) { &inst } else { &class };
            pool[rng.random_range(0..pool.len())].clone()
        })
        .collect())
}

/// What the fine-tune service receives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneJobSpec {
    pub manifest: PathBuf,
    pub instance_prompt: String,
    pub class_prompt: String,
    pub instance_probability: f64,
    pub records: Vec<DatasetRecord>,
    pub train: TrainConfig,
    pub rng_seed: u64,
}

impl FinetuneJobSpec {
    pub fn from_manifest(manifest: &DatasetManifest, manifest_dir: &Path) -> Self {
        Self {
            manifest: manifest_dir.join(MANIFEST_FILE),
            instance_prompt: manifest.plan.instance_prompt(),
            class_prompt: manifest.plan.class_prompt(),
            instance_probability: manifest.plan.instance_probability,
            records: manifest.records.clone(),
            train: manifest.plan.train.clone(),
            rng_seed: manifest.rng_seed,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), PersonalizeError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_defaults_and_prompts() {
        let p = PersonalizationPlan {
            object_desc: "cup".into(),
            ..Default::default()
        };
        p.validate().unwrap();
        assert_eq!(p.backgrounds.len(), 20);
        assert_eq!(&p.backgrounds[..4], &["kitchen", "beach", "forest", "library"]);
        assert_eq!(p.class_prompt(), "a cup");
        assert_eq!(p.instance_prompt(), "a <ktn> cup");
    }

    #[test]
    fn plan_validation() {
        let p = PersonalizationPlan {
            backgrounds: vec![],
            ..Default::default()
        };
        assert!(matches!(p.validate(), Err(PersonalizeError::InvariantViolation(_))));
        let p = PersonalizationPlan {
            instance_probability: 1.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
