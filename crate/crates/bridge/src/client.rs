//! Blocking HTTP client for the model bridge.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use ndarray::Array3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use splatlight::backend::{BackendError, Embedder, LightDirection, PersonalizationBackend};
use splatlight::guidance::{Denoiser, DenoiserCondition, GuidanceError, LatentCodec, NoisePrediction};
use splatlight::personalize::FinetuneJobSpec;
use splatlight::Real;

use crate::wire::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeEndpoint {
    pub base_url: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    /// First retry delay; doubles on each further retry.
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
}

fn default_backoff() -> f64 {
    0.5
}

impl BridgeEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout_secs: 30.0,
            max_retries: 2,
            token: None,
            backoff_base_secs: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<(), BridgeError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(BridgeError::Config(format!("timeout_secs must be > 0, got {}", self.timeout_secs)));
        }
        if !(self.backoff_base_secs >= 0.0 && self.backoff_base_secs.is_finite()) {
            return Err(BridgeError::Config("backoff_base_secs must be >= 0".into()));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(BridgeError::Config(format!("base_url must be http(s), got {:?}", self.base_url)));
        }
        Ok(())
    }

    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_base_secs * 2f64.powi(retry as i32))
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum BridgeError {
    #[error("bridge unreachable or timed out after {attempts} attempt(s): {detail}")]
    Timeout { attempts: u32, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error {code}: {message}")]
    Server { code: String, message: String },
    #[error("unknown fine-tune job {0:?}")]
    UnknownJob(String),
    #[error("invalid bridge configuration: {0}")]
    Config(String),
}

impl BridgeError {
    fn retryable(&self) -> bool {
        matches!(self, Self::Timeout { .. })
            || matches!(self, Self::Server { code, .. } if code.starts_with("http_5"))
    }
}

impl From<BridgeError> for GuidanceError {
    fn from(e: BridgeError) -> Self {
        GuidanceError::DenoiserFailure(e.to_string())
    }
}

impl From<BridgeError> for BackendError {
    fn from(e: BridgeError) -> Self {
        BackendError(e.to_string())
    }
}

/// One connection pool per client; `Sync`, so a single client can serve the
/// two concurrent requests of a guidance pair.
#[derive(Debug)]
pub struct BridgeClient {
    endpoint: BridgeEndpoint,
    agent: ureq::Agent,
    next_id: AtomicU64,
    attempts: AtomicU64,
}

impl BridgeClient {
    pub fn new(endpoint: BridgeEndpoint) -> Result<Self, BridgeError> {
        endpoint.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .max_idle_connections_per_host(2)
            .build();
        Ok(Self {
            endpoint,
            agent,
            next_id: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
        })
    }

    pub fn endpoint(&self) -> &BridgeEndpoint {
        &self.endpoint
    }

    /// HTTP attempts made so far, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.endpoint.base_url.trim_end_matches('/'), path)
    }

    /// Sends one op, retrying on timeouts and 5xx responses.
    pub fn call(&self, op: &str, payload: Value) -> Result<Value, BridgeError> {
        let id = format!("req-{:08}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let body = serde_json::to_string(&Request {
            op: op.into(),
            request_id: id.clone(),
            payload,
        })
        .map_err(|e| BridgeError::Protocol(e.to_string()))?;
        let mut retry = 0;
        loop {
            match self.attempt(&id, &body) {
                Err(e) if e.retryable() && retry < self.endpoint.max_retries => {
                    thread::sleep(self.endpoint.backoff(retry));
                    retry += 1;
                }
                Err(BridgeError::Timeout { detail, .. }) => {
                    return Err(BridgeError::Timeout {
                        attempts: retry + 1,
                        detail,
                    })
                }
                other => return other,
            }
        }
    }

    fn attempt(&self, id: &str, body: &str) -> Result<Value, BridgeError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.post(&self.url(RPC_PATH)).set("Content-Type", "application/json");
        if let Some(token) = &self.endpoint.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let (status, text) = match req.send_string(body) {
            Ok(r) => (r.status(), r.into_string()),
            Err(ureq::Error::Status(code, r)) => (code, r.into_string()),
            Err(ureq::Error::Transport(t)) => {
                return Err(BridgeError::Timeout {
                    attempts: 1,
                    detail: t.to_string(),
                })
            }
        };
        let text = text.map_err(|e| BridgeError::Timeout {
            attempts: 1,
            detail: format!("reading body: {e}"),
        })?;
        let resp: Response = match serde_json::from_str(&text) {
            Ok(r) => r,
            Err(_) if status >= 500 => {
                return Err(BridgeError::Server {
                    code: format!("http_{status}"),
                    message: text,
                })
            }
            Err(e) => return Err(BridgeError::Protocol(format!("HTTP {status}: malformed response: {e}"))),
        };
        if resp.request_id != id {
            return Err(BridgeError::Protocol(format!(
                "request_id mismatch: sent {id}, got {}",
                resp.request_id
            )));
        }
        if resp.ok {
            return resp.payload.ok_or_else(|| BridgeError::Protocol("ok response without payload".into()));
        }
        let err = resp.error.ok_or_else(|| BridgeError::Protocol("error response without error body".into()))?;
        Err(match (status, err.code.as_str()) {
            (s, _) if s >= 500 => BridgeError::Server {
                code: format!("http_{s}"),
                message: format!("{}: {}", err.code, err.message),
            },
            (_, "unknown_job") => BridgeError::UnknownJob(err.message),
            (_, "bad_request" | "unauthorized" | "unknown_op") => BridgeError::Protocol(format!("{}: {}", err.code, err.message)),
            _ => BridgeError::Server {
                code: err.code,
                message: err.message,
            },
        })
    }

    fn call_as<R: DeserializeOwned>(&self, op: &str, payload: Value) -> Result<R, BridgeError> {
        let v = self.call(op, payload)?;
        serde_json::from_value(v).map_err(|e| BridgeError::Protocol(format!("{op}: bad payload: {e}")))
    }

    fn tensor_field(v: &Value, key: &str) -> Result<Tensor, BridgeError> {
        let t = v.get(key).ok_or_else(|| BridgeError::Protocol(format!("missing field {key:?}")))?;
        serde_json::from_value(t.clone()).map_err(|e| BridgeError::Protocol(format!("{key}: {e}")))
    }

    fn array3_field(v: &Value, key: &str) -> Result<Array3<f32>, BridgeError> {
        Self::tensor_field(v, key)?.to_array3().map_err(BridgeError::Protocol)
    }

    /// GET `/healthz`; true on HTTP 200.
    pub fn healthy(&self) -> bool {
        matches!(self.agent.get(&self.url("/healthz")).call(), Ok(r) if r.status() == 200)
    }

    pub fn capabilities(&self) -> Result<Capabilities, BridgeError> {
        let c: Capabilities = self.call_as("capabilities", json!({}))?;
        if c.version != PROTOCOL_VERSION {
            return Err(BridgeError::Protocol(format!("server speaks version {}, client {PROTOCOL_VERSION}", c.version)));
        }
        Ok(c)
    }

    pub fn predict_noise(&self, req: &PredictNoise) -> Result<Array3<f32>, BridgeError> {
        let want = req.latent.shape.clone();
        let v = self.call("predict_noise", serde_json::to_value(req).expect("serializable"))?;
        let eps = Self::array3_field(&v, "epsilon")?;
        if eps.shape() != want.as_slice() {
            return Err(BridgeError::Protocol(format!("epsilon shape {:?}, latent {want:?}", eps.shape())));
        }
        Ok(eps)
    }

    pub fn encode(&self, image: &Array3<f32>) -> Result<Array3<f32>, BridgeError> {
        let v = self.call("encode", json!({ "image": Tensor::from_array(image) }))?;
        Self::array3_field(&v, "latent")
    }

    pub fn decode(&self, latent: &Array3<f32>) -> Result<Array3<f32>, BridgeError> {
        let v = self.call("decode", json!({ "latent": Tensor::from_array(latent) }))?;
        Self::array3_field(&v, "image")
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f32>, BridgeError> {
        let v = self.call("embed", json!({ "text": text }))?;
        Self::tensor_field(&v, "embedding")?.to_vec().map_err(BridgeError::Protocol)
    }

    pub fn embed_image(&self, image: &Array3<f32>) -> Result<Vec<f32>, BridgeError> {
        let v = self.call("embed", json!({ "image": Tensor::from_array(image) }))?;
        Self::tensor_field(&v, "embedding")?.to_vec().map_err(BridgeError::Protocol)
    }

    /// `direction` is passed through verbatim so servers can reject bad values.
    pub fn relight_raw(&self, image: &Array3<f32>, fg: &str, bg: &str, direction: &str) -> Result<Array3<f32>, BridgeError> {
        let req = Relight {
            image: Tensor::from_array(image),
            fg_prompt: fg.into(),
            bg_prompt: bg.into(),
            direction: direction.into(),
        };
        let v = self.call("relight", serde_json::to_value(req).expect("serializable"))?;
        Self::array3_field(&v, "image")
    }

    pub fn sample_class_image(&self, prompt: &str, seed: u64, height: usize, width: usize) -> Result<Array3<f32>, BridgeError> {
        let req = SampleClass {
            prompt: prompt.into(),
            seed,
            height,
            width,
        };
        let v = self.call("sample_class", serde_json::to_value(req).expect("serializable"))?;
        Self::array3_field(&v, "image")
    }

    pub fn submit_finetune(&self, job: &FinetuneJobSpec) -> Result<String, BridgeError> {
        let v = self.call("submit_finetune", json!({ "job": job }))?;
        v.get("job_id")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| BridgeError::Protocol("missing job_id".into()))
    }

    pub fn poll_finetune(&self, job_id: &str) -> Result<FinetuneStatus, BridgeError> {
        self.call_as("poll_finetune", json!({ "job_id": job_id }))
    }
}

impl Embedder for BridgeClient {
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        Ok(BridgeClient::embed_text(self, text)?)
    }

    fn embed_image(&self, image: &Array3<f32>) -> Result<Vec<f32>, BackendError> {
        Ok(BridgeClient::embed_image(self, image)?)
    }

    fn name(&self) -> String {
        format!("bridge:{}", self.endpoint.base_url)
    }
}

impl PersonalizationBackend for BridgeClient {
    fn relight(&self, image: &Array3<f32>, fg: &str, bg: &str, direction: LightDirection) -> Result<Array3<f32>, BackendError> {
        Ok(self.relight_raw(image, fg, bg, direction.as_str())?)
    }

    fn sample_class(&self, prompt: &str, seed: u64, height: usize, width: usize) -> Result<Array3<f32>, BackendError> {
        Ok(self.sample_class_image(prompt, seed, height, width)?)
    }
}

fn to_f32<T: Real>(a: &Array3<T>) -> Array3<f32> {
    a.mapv(|v| v.as_f32())
}

fn from_f32<T: Real>(a: Array3<f32>) -> Array3<T> {
    a.mapv(|v| T::lit(v as f64))
}

/// Remote denoiser; `model_id` selects a fine-tuned model.
#[derive(Debug)]
pub struct RemoteDenoiser<'a> {
    pub client: &'a BridgeClient,
    pub model_id: Option<String>,
}

impl RemoteDenoiser<'_> {
    fn request<T: Real>(&self, z_t: &Array3<T>, t: usize, cond: &DenoiserCondition<T>, unconditional: bool) -> PredictNoise {
        PredictNoise {
            latent: Tensor::from_array(&to_f32(z_t)),
            t,
            prompt: cond.prompt.clone(),
            unconditional,
            depth: cond
                .depth
                .as_ref()
                .map(|d| Tensor::from_array(&d.mapv(|v| v.as_f32()))),
            condition_strength: cond.condition_strength.as_f32(),
            model_id: self.model_id.clone(),
        }
    }
}

impl<T: Real> Denoiser<T> for RemoteDenoiser<'_> {
    fn predict_noise(
        &self,
        z_t: &Array3<T>,
        t: usize,
        cond: &DenoiserCondition<T>,
        unconditional: bool,
    ) -> Result<NoisePrediction<T>, GuidanceError> {
        let eps = self.client.predict_noise(&self.request(z_t, t, cond, unconditional))?;
        NoisePrediction::new(from_f32(eps))
    }

    fn predict_pair(
        &self,
        z_t: &Array3<T>,
        t: usize,
        cond: &DenoiserCondition<T>,
    ) -> Result<(NoisePrediction<T>, NoisePrediction<T>), GuidanceError> {
        let (u, c) = (self.request(z_t, t, cond, true), self.request(z_t, t, cond, false));
        let (u, c) = thread::scope(|s| {
            let h = s.spawn(|| self.client.predict_noise(&u));
            let c = self.client.predict_noise(&c);
            (h.join().expect("request thread panicked"), c)
        });
        Ok((NoisePrediction::new(from_f32(u?))?, NoisePrediction::new(from_f32(c?))?))
    }
}

#[derive(Debug)]
pub struct RemoteCodec<'a> {
    pub client: &'a BridgeClient,
}

impl<T: Real> LatentCodec<T> for RemoteCodec<'_> {
    fn encode(&self, image: &Array3<T>) -> Result<Array3<T>, GuidanceError> {
        Ok(from_f32(self.client.encode(&to_f32(image))?))
    }

    fn decode(&self, latent: &Array3<T>) -> Result<Array3<T>, GuidanceError> {
        Ok(from_f32(self.client.decode(&to_f32(latent))?))
    }
}
