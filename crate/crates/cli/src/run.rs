//! Run directories, config snapshots and model selection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array3, Axis};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use splatlight::backend::{fnv1a, Embedder, PersonalizationBackend, ToyEmbedder, ToyPersonalization};
use splatlight::fixtures::{PromptColorDenoiser, PROMPT_TOY_SPREAD};
use splatlight::guidance::{Denoiser, LatentCodec, ToyCodec};
use splatlight::render::{render, Camera};
use splatlight::{Camera64, Cloud};
use splatlight_bridge::{BridgeClient, BridgeEndpoint, RemoteCodec, RemoteDenoiser};

use crate::error::{data, CliError};
use crate::{CliResult, Global};

pub const SNAPSHOT_SCHEMA: u32 = 1;
pub const SNAPSHOT_FILE: &str = "config.json";

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<out>/<run-id>/` and writes the config snapshot. The default
    /// run id hashes the snapshot, so reruns of the same command share a
    /// directory.
    pub fn create(global: &Global, command: &str, bridge: &str, args: &impl Serialize) -> CliResult<Self> {
        let snapshot = json!({
            "schema_version": SNAPSHOT_SCHEMA,
            "tool": "splatlight",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": global.seed,
            "bridge": bridge,
            "bridge_timeout": global.bridge_timeout,
            "bridge_retries": global.bridge_retries,
            "args": args,
        });
        let text = serde_json::to_string_pretty(&snapshot).expect("serializable") + "\n";
        let id = match &global.run_id {
            Some(id) if id.is_empty() || id.contains(['/', '\\']) || id == ".." => {
                return Err(CliError::Usage(format!("bad run id {id:?}")))
            }
            Some(id) => id.clone(),
            None => format!("{command}-{:016x}", fnv1a(text.as_bytes())),
        };
        let path = global.out.join(id);
        fs::create_dir_all(&path).map_err(|e| data(format!("{}: {e}", path.display())))?;
        fs::write(path.join(SNAPSHOT_FILE), text)?;
        Ok(Self { path })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(data(format!("{}: no such file", path.display())))
    }
}

/// Cameras keyed by id, in id order.
pub fn load_cameras(path: &Path) -> CliResult<Vec<Camera64>> {
    let cams: BTreeMap<String, Camera64> = read_json(path)?;
    if cams.is_empty() {
        return Err(data(format!("{}: no cameras", path.display())));
    }
    for (id, c) in &cams {
        c.validate().map_err(|e| data(format!("{}: camera {id}: {e}", path.display())))?;
    }
    Ok(cams.into_values().collect())
}

pub fn cameras_map(cams: &[Camera64]) -> BTreeMap<String, Camera64> {
    cams.iter().enumerate().map(|(i, c)| (format!("{i:03}"), c.clone())).collect()
}

/// `n` cameras on a ring around `center` looking inward, 20° above it.
pub fn orbit_cameras(center: [f64; 3], radius: f64, n: usize, size: usize) -> Vec<Camera64> {
    let dist = 3.0 * radius.max(1e-3);
    let el = 20f64.to_radians();
    (0..n)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / n as f64;
            let eye = [
                center[0] + dist * el.cos() * az.sin(),
                center[1] - dist * el.sin(),
                center[2] - dist * el.cos() * az.cos(),
            ];
            Camera::look_at(eye, center, [0.0, 1.0, 0.0], 1.2 * size as f64, size, size)
        })
        .collect()
}

/// Renders every camera and lays the tiles out left to right.
pub fn preview_grid(cloud: &Cloud, cams: &[Camera64], bg: [f64; 3]) -> CliResult<Array3<f32>> {
    let bg = bg.map(|v| v as f32);
    let mut tiles = Vec::with_capacity(cams.len());
    for c in cams {
        tiles.push(render(cloud, &c.cast(), bg).map_err(data)?.rgb);
    }
    let h = tiles[0].dim().0;
    if tiles.iter().any(|t| t.dim().0 != h) {
        return Err(data("preview cameras differ in height"));
    }
    let views: Vec<_> = tiles.iter().map(|t| t.view()).collect();
    Ok(concatenate(Axis(1), &views).expect("equal heights"))
}

/// Resolves the backend: `toy`, or an http(s) base URL.
pub fn bridge_choice(global: &Global, from_job: Option<&str>) -> CliResult<String> {
    let choice = match (global.bridge.as_deref(), from_job) {
        (Some(a), Some(b)) if a != b => {
            return Err(CliError::Usage(format!("--bridge {a} conflicts with the job's bridge {b}")))
        }
        (Some(a), _) => a,
        (None, Some(b)) => b,
        (None, None) => "toy",
    };
    if choice != "toy" && !(choice.starts_with("http://") || choice.starts_with("https://")) {
        return Err(CliError::Usage(format!("--bridge must be `toy` or an http(s) URL, got {choice:?}")));
    }
    Ok(choice.to_string())
}

pub enum Models {
    Toy,
    Remote(BridgeClient),
}

impl Models {
    pub fn connect(global: &Global, choice: &str) -> CliResult<Self> {
        if choice == "toy" {
            return Ok(Self::Toy);
        }
        let endpoint = BridgeEndpoint {
            timeout_secs: global.bridge_timeout,
            max_retries: global.bridge_retries,
            token: std::env::var("BRIDGE_TOKEN").ok().filter(|t| !t.is_empty()),
            ..BridgeEndpoint::new(choice)
        };
        let client = BridgeClient::new(endpoint)?;
        let caps = client.capabilities()?;
        log::info!("bridge {choice}: {caps:?}");
        Ok(Self::Remote(client))
    }

    pub fn denoiser(&self, model_id: Option<String>) -> Box<dyn Denoiser<f32> + '_> {
        match self {
            Self::Toy => Box::new(PromptColorDenoiser::new(PROMPT_TOY_SPREAD as f32)),
            Self::Remote(client) => Box::new(RemoteDenoiser { client, model_id }),
        }
    }

    pub fn codec(&self) -> Box<dyn LatentCodec<f32> + '_> {
        match self {
            Self::Toy => Box::new(ToyCodec),
            Self::Remote(client) => Box::new(RemoteCodec { client }),
        }
    }

    pub fn embedder(&self) -> &dyn Embedder {
        match self {
            Self::Toy => &ToyEmbedder,
            Self::Remote(c) => c,
        }
    }

    pub fn personalization(&self) -> &dyn PersonalizationBackend {
        match self {
            Self::Toy => &ToyPersonalization,
            Self::Remote(c) => c,
        }
    }
}

/// Overlays `overrides` on `defaults`; unknown keys are usage errors.
pub fn merge_overrides<T: Serialize + DeserializeOwned>(defaults: &T, overrides: &Value, what: &str) -> CliResult<T> {
    let mut base = serde_json::to_value(defaults).expect("serializable");
    match overrides {
        Value::Null => {}
        Value::Object(map) => {
            let obj = base.as_object_mut().expect("struct serializes to an object");
            for (k, v) in map {
                if !obj.contains_key(k) {
                    return Err(CliError::Usage(format!("unknown {what} key {k:?}")));
                }
                obj.insert(k.clone(), v.clone());
            }
        }
        _ => return Err(CliError::Usage(format!("{what} overrides must be a JSON object"))),
    }
    serde_json::from_value(base).map_err(|e| CliError::Usage(format!("{what}: {e}")))
}
