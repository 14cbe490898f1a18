//! JSON envelope and tensor encoding shared by client and fixture server.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: u32 = 1;
pub const RPC_PATH: &str = "/v1/rpc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: String,
    pub request_id: String,
    pub payload: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub request_id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl Response {
    pub fn success(request_id: &str, payload: Value) -> Self {
        Self {
            request_id: request_id.into(),
            ok: true,
            payload: Some(payload),
            error: None,
        }
    }

    pub fn failure(request_id: &str, code: &str, message: impl Into<String>) -> Self {
        Self {
            request_id: request_id.into(),
            ok: false,
            payload: None,
            error: Some(ErrorBody {
                code: code.into(),
                message: message.into(),
            }),
        }
    }
}

/// Row-major little-endian `f32` array with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl Tensor {
    pub fn from_array<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> Self {
        let mut bytes = Vec::with_capacity(a.len() * 4);
        for v in a.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            dtype: "float32".into(),
            shape: a.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    /// Fails when the dtype is unknown or the byte count disagrees with the shape.
    pub fn to_array(&self) -> Result<ArrayD<f32>, String> {
        if self.dtype != "float32" {
            return Err(format!("unsupported dtype {:?}", self.dtype));
        }
        let bytes = STANDARD.decode(&self.data).map_err(|e| format!("bad base64: {e}"))?;
        let n = self
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("shape overflows")?;
        if bytes.len() != n * 4 {
            return Err(format!("shape {:?} needs {} bytes, got {}", self.shape, n * 4, bytes.len()));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&self.shape), values).map_err(|e| e.to_string())
    }

    pub fn to_array3(&self) -> Result<ndarray::Array3<f32>, String> {
        self.to_array()?.into_dimensionality().map_err(|_| format!("expected rank 3, got shape {:?}", self.shape))
    }

    pub fn to_array2(&self) -> Result<ndarray::Array2<f32>, String> {
        self.to_array()?.into_dimensionality().map_err(|_| format!("expected rank 2, got shape {:?}", self.shape))
    }

    pub fn to_vec(&self) -> Result<Vec<f32>, String> {
        let a: ndarray::Array1<f32> =
            self.to_array()?.into_dimensionality().map_err(|_| format!("expected rank 1, got shape {:?}", self.shape))?;
        Ok(a.to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub version: u32,
    pub downscale: usize,
    pub latent_channels: usize,
    pub embed_dim: usize,
}

impl Capabilities {
    /// Latent shape for an `h × w` image.
    pub fn latent_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        (h / self.downscale, w / self.downscale, self.latent_channels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictNoise {
    pub latent: Tensor,
    pub t: usize,
    pub prompt: String,
    pub unconditional: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<Tensor>,
    pub condition_strength: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relight {
    pub image: Tensor,
    pub fg_prompt: String,
    pub bg_prompt: String,
    pub direction: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleClass {
    pub prompt: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneStatus {
    pub status: JobStatus,
    #[serde(default)]
    pub model_id: Option<String>,
}

/// Content-addressed `(job_id, model_id)` of a fine-tune job.
pub fn finetune_ids(job: &splatlight::personalize::FinetuneJobSpec) -> (String, String) {
    let bytes = serde_json::to_vec(job).expect("serializable");
    let h = splatlight::backend::fnv1a(&bytes);
    (format!("ft-{h:016x}"), format!("model-{h:016x}"))
}
