//! In-process loopback server speaking the bridge protocol.
//!
//! `Echo` returns the sent latent as the noise prediction and uses a
//! block-average codec sized by the advertised capabilities. `Toy` serves the
//! offline prompt-colour denoiser and the toy codec, so a run against it
//! matches a run with the in-process toy models bit for bit.

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use ndarray::Array3;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Server};

use splatlight::backend::{Embedder, LightDirection, PersonalizationBackend, ToyEmbedder, ToyPersonalization, TOY_EMBED_DIM};
use splatlight::fixtures::PromptColorDenoiser;
use splatlight::guidance::{Denoiser, DenoiserCondition, LatentCodec, ToyCodec};
use splatlight::personalize::FinetuneJobSpec;

use crate::wire::*;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FixtureMode {
    Echo,
    /// Prompt-colour toy denoiser with the given spread.
    Toy { spread: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    None,
    /// The first `n` RPC requests get HTTP 503.
    Unavailable(usize),
    /// Every RPC request sleeps this long before answering.
    Stall(Duration),
    /// Returned tensors claim one more row than they carry.
    MalformedShape,
    WrongRequestId,
}

#[derive(Clone, Debug)]
pub struct FixtureConfig {
    pub mode: FixtureMode,
    pub capabilities: Capabilities,
    pub fault: Fault,
    pub token: Option<String>,
}

impl FixtureConfig {
    pub fn echo() -> Self {
        Self {
            mode: FixtureMode::Echo,
            capabilities: Capabilities {
                version: PROTOCOL_VERSION,
                downscale: 1,
                latent_channels: 3,
                embed_dim: TOY_EMBED_DIM,
            },
            fault: Fault::None,
            token: None,
        }
    }

    /// Advertises the latent geometry of an SD-class model.
    pub fn sd_echo() -> Self {
        let mut c = Self::echo();
        c.capabilities.downscale = 8;
        c.capabilities.latent_channels = 4;
        c
    }

    pub fn toy(spread: f32) -> Self {
        let mut c = Self::echo();
        c.mode = FixtureMode::Toy { spread };
        c.capabilities.downscale = 2;
        c
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = fault;
        self
    }

    pub fn with_token(mut self, token: &str) -> Self {
        self.token = Some(token.into());
        self
    }
}

#[derive(Debug, Default)]
struct State {
    rpc_requests: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    ops: Mutex<Vec<String>>,
    jobs: Mutex<HashMap<String, String>>,
}

pub struct FixtureServer {
    addr: SocketAddr,
    server: Arc<Server>,
    state: Arc<State>,
    acceptor: Option<JoinHandle<()>>,
}

impl FixtureServer {
    pub fn start(config: FixtureConfig) -> io::Result<Self> {
        let server = Arc::new(Server::http("127.0.0.1:0").map_err(io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("fixture bound to a non-IP address"))?;
        let state = Arc::new(State::default());
        let config = Arc::new(config);
        let acceptor = {
            let (server, state) = (server.clone(), state.clone());
            thread::spawn(move || {
                for req in server.incoming_requests() {
                    let (state, config) = (state.clone(), config.clone());
                    thread::spawn(move || handle(req, &state, &config));
                }
            })
        };
        Ok(Self {
            addr,
            server,
            state,
            acceptor: Some(acceptor),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// RPC requests received, including ones answered with an error.
    pub fn rpc_requests(&self) -> usize {
        self.state.rpc_requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }

    /// Ops in arrival order.
    pub fn ops(&self) -> Vec<String> {
        self.state.ops.lock().unwrap().clone()
    }
}

impl Drop for FixtureServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn json_header() -> Header {
    "Content-Type: application/json".parse().expect("static header")
}

fn respond(req: tiny_http::Request, status: u16, body: String) {
    let r = tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(json_header());
    let _ = req.respond(r);
}

fn handle(mut req: tiny_http::Request, state: &State, config: &FixtureConfig) {
    match (req.method(), req.url()) {
        (Method::Get, "/healthz") => return respond(req, 200, "{\"status\":\"ok\"}".into()),
        (Method::Get, "/capabilities") => {
            return respond(req, 200, serde_json::to_string(&config.capabilities).expect("serializable"))
        }
        (Method::Post, RPC_PATH) => {}
        _ => return respond(req, 404, "{\"error\":\"not found\"}".into()),
    }
    let n = state.rpc_requests.fetch_add(1, Ordering::SeqCst);
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(now, Ordering::SeqCst);

    let authorized = match &config.token {
        None => true,
        Some(t) => req
            .headers()
            .iter()
            .any(|h| h.field.equiv("Authorization") && h.value.as_str() == format!("Bearer {t}")),
    };
    let mut body = String::new();
    let parsed = req
        .as_reader()
        .read_to_string(&mut body)
        .ok()
        .and_then(|_| serde_json::from_str::<Request>(&body).ok());

    let (status, resp) = match parsed {
        None => (400, Response::failure("", "bad_request", "body is not a request envelope")),
        Some(r) => {
            state.ops.lock().unwrap().push(r.op.clone());
            if let Fault::Stall(d) = config.fault {
                thread::sleep(d);
            }
            if matches!(config.fault, Fault::Unavailable(k) if n < k) {
                (503, Response::failure(&r.request_id, "unavailable", "warming up"))
            } else if !authorized {
                (401, Response::failure(&r.request_id, "unauthorized", "missing or wrong bearer token"))
            } else {
                match dispatch(&r.op, &r.payload, state, config) {
                    Ok(mut payload) => {
                        if config.fault == Fault::MalformedShape {
                            corrupt_shapes(&mut payload);
                        }
                        (200, Response::success(&r.request_id, payload))
                    }
                    Err((status, code, msg)) => (status, Response::failure(&r.request_id, code, msg)),
                }
            }
        }
    };
    let resp = if config.fault == Fault::WrongRequestId {
        Response {
            request_id: "req-bogus".into(),
            ..resp
        }
    } else {
        resp
    };
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    respond(req, status, serde_json::to_string(&resp).expect("serializable"));
}

fn corrupt_shapes(v: &mut Value) {
    if let Value::Object(map) = v {
        for field in map.values_mut() {
            if let Some(Value::Array(shape)) = field.get_mut("shape") {
                if let Some(first) = shape.first_mut().and_then(|d| d.as_u64()) {
                    shape[0] = json!(first + 1);
                }
            }
        }
    }
}

type OpError = (u16, &'static str, String);

fn bad(msg: impl Into<String>) -> OpError {
    (400, "bad_request", msg.into())
}

fn field<T: serde::de::DeserializeOwned>(payload: &Value, key: &str) -> Result<T, OpError> {
    let v = payload.get(key).ok_or_else(|| bad(format!("missing field {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| bad(format!("{key}: {e}")))
}

fn tensor3(payload: &Value, key: &str) -> Result<Array3<f32>, OpError> {
    field::<Tensor>(payload, key)?.to_array3().map_err(bad)
}

fn tensor_payload(key: &str, a: &Array3<f32>) -> Value {
    json!({ key: Tensor::from_array(a) })
}

fn echo_encode(image: &Array3<f32>, caps: &Capabilities) -> Result<Array3<f32>, OpError> {
    let (h, w, c) = image.dim();
    let d = caps.downscale;
    if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
        return Err(bad(format!("image {h}×{w} not divisible by {d}")));
    }
    let norm = 1.0 / (d * d) as f32;
    Ok(Array3::from_shape_fn((h / d, w / d, caps.latent_channels), |(y, x, k)| {
        if k >= c {
            return 0.0;
        }
        let mut s = 0.0;
        for dy in 0..d {
            for dx in 0..d {
                s += image[[y * d + dy, x * d + dx, k]];
            }
        }
        s * norm
    }))
}

fn echo_decode(latent: &Array3<f32>, caps: &Capabilities) -> Array3<f32> {
    let (h, w, c) = latent.dim();
    let d = caps.downscale;
    Array3::from_shape_fn((h * d, w * d, 3), |(y, x, k)| if k < c { latent[[y / d, x / d, k]] } else { 0.0 })
}

fn dispatch(op: &str, p: &Value, state: &State, config: &FixtureConfig) -> Result<Value, OpError> {
    let caps = &config.capabilities;
    match op {
        "capabilities" => Ok(serde_json::to_value(caps).expect("serializable")),
        "predict_noise" => {
            let req: PredictNoise = serde_json::from_value(p.clone()).map_err(|e| bad(e.to_string()))?;
            let z = req.latent.to_array3().map_err(bad)?;
            let depth = req.depth.as_ref().map(|d| d.to_array2().map_err(bad)).transpose()?;
            if z.dim().2 != caps.latent_channels {
                return Err(bad(format!("latent has {} channels, expected {}", z.dim().2, caps.latent_channels)));
            }
            let eps = match config.mode {
                FixtureMode::Echo => z,
                FixtureMode::Toy { spread } => {
                    let mut cond = DenoiserCondition::prompt(req.prompt);
                    cond.depth = depth;
                    cond.condition_strength = req.condition_strength;
                    PromptColorDenoiser::new(spread)
                        .predict_noise(&z, req.t, &cond, req.unconditional)
                        .map_err(|e| bad(e.to_string()))?
                        .epsilon_hat
                }
            };
            Ok(tensor_payload("epsilon", &eps))
        }
        "encode" => {
            let image = tensor3(p, "image")?;
            let latent = match config.mode {
                FixtureMode::Echo => echo_encode(&image, caps)?,
                FixtureMode::Toy { .. } => ToyCodec.encode(&image).map_err(|e| bad(e.to_string()))?,
            };
            Ok(tensor_payload("latent", &latent))
        }
        "decode" => {
            let latent = tensor3(p, "latent")?;
            let image = match config.mode {
                FixtureMode::Echo => echo_decode(&latent, caps),
                FixtureMode::Toy { .. } => ToyCodec.decode(&latent).map_err(|e| bad(e.to_string()))?,
            };
            Ok(tensor_payload("image", &image))
        }
        "embed" => {
            let e = if let Some(text) = p.get("text").and_then(Value::as_str) {
                ToyEmbedder.embed_text(text)
            } else {
                ToyEmbedder.embed_image(&tensor3(p, "image")?)
            }
            .map_err(|e| bad(e.0))?;
            Ok(json!({ "embedding": Tensor::from_array(&ndarray::Array1::from(e)) }))
        }
        "relight" => {
            let req: Relight = serde_json::from_value(p.clone()).map_err(|e| bad(e.to_string()))?;
            let dir: LightDirection = req.direction.parse().map_err(|e: splatlight::backend::BackendError| bad(e.0))?;
            let image = req.image.to_array3().map_err(bad)?;
            let out = ToyPersonalization
                .relight(&image, &req.fg_prompt, &req.bg_prompt, dir)
                .map_err(|e| bad(e.0))?;
            Ok(tensor_payload("image", &out))
        }
        "sample_class" => {
            let req: SampleClass = serde_json::from_value(p.clone()).map_err(|e| bad(e.to_string()))?;
            let out = ToyPersonalization
                .sample_class(&req.prompt, req.seed, req.height, req.width)
                .map_err(|e| bad(e.0))?;
            Ok(tensor_payload("image", &out))
        }
        "submit_finetune" => {
            let job: FinetuneJobSpec = field(p, "job")?;
            if job.records.is_empty() {
                return Err((422, "invalid_dataset", "manifest has no images".into()));
            }
            let (id, model) = finetune_ids(&job);
            state.jobs.lock().unwrap().insert(id.clone(), model);
            Ok(json!({ "job_id": id }))
        }
        "poll_finetune" => {
            let id: String = field(p, "job_id")?;
            match state.jobs.lock().unwrap().get(&id) {
                Some(model) => Ok(serde_json::to_value(FinetuneStatus {
                    status: JobStatus::Completed,
                    model_id: Some(model.clone()),
                })
                .expect("serializable")),
                None => Err((404, "unknown_job", id)),
            }
        }
        other => Err((400, "unknown_op", format!("unknown op {other:?}"))),
    }
}
