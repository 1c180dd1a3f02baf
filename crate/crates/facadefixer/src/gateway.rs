//! Uniform clients for the external experts.
//!
//! Every expert is addressed through an [`ExpertDescriptor`]. Endpoints are
//! either `mock:<seed>` (deterministic in-process stand-ins), an HTTP(S)
//! URL speaking the JSON wire protocol, or `disabled`. Wire replies are
//! validated here so that nothing malformed reaches the core types.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use facadefixer_core::adjudication::{self, AdjudicationRequest, EndpointFailure, Verdict};
use facadefixer_core::fusion::ExpertOutput;
use facadefixer_core::geometry::{BinaryMask, BoundingBox, DefectCategory, Detection, ImageRef, RasterImage, Rle};
use facadefixer_core::mock;
use facadefixer_core::plan::{plan, InstructionProfile, TaskPlan};
use facadefixer_core::prompt::SegmentPrompt;
use facadefixer_core::recompose::{composed_instance_mask, mock_compose, mock_inpaint, BlendSpec, InpaintJob};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{read, Error};
use crate::imageio::{from_base64_png, to_base64_png};

/// Attempts per wire call: the first try plus one retry.
pub const WIRE_ATTEMPTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Detector,
    CrackSegmenter,
    PromptableSegmenter,
    Generator,
    Adjudicator,
    Embedder,
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertKind::Detector => "detector",
            ExpertKind::CrackSegmenter => "crack_segmenter",
            ExpertKind::PromptableSegmenter => "promptable_segmenter",
            ExpertKind::Generator => "generator",
            ExpertKind::Adjudicator => "adjudicator",
            ExpertKind::Embedder => "embedder",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Endpoint {
    Mock(u64),
    Http(String),
    Disabled,
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(seed) = s.strip_prefix("mock:") {
            return seed
                .parse()
                .map(Endpoint::Mock)
                .map_err(|_| format!("bad mock seed in endpoint {s:?}"));
        }
        if s == "disabled" {
            return Ok(Endpoint::Disabled);
        }
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(Endpoint::Http(s.to_string()));
        }
        Err(format!("endpoint {s:?} is not mock:<seed>, disabled, or an http(s) URL"))
    }
}

impl TryFrom<String> for Endpoint {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> String {
        match e {
            Endpoint::Mock(seed) => format!("mock:{seed}"),
            Endpoint::Http(url) => url,
            Endpoint::Disabled => "disabled".into(),
        }
    }
}

fn default_timeout() -> u64 {
    30_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDescriptor {
    pub id: String,
    pub kind: ExpertKind,
    pub endpoint: Endpoint,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Opaque expert parameters, forwarded verbatim on the wire.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, Value>,
    /// Environment variable holding a bearer token for this endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
}

impl ExpertDescriptor {
    pub fn mock(id: &str, kind: ExpertKind, seed: u64) -> Self {
        Self {
            id: id.into(),
            kind,
            endpoint: Endpoint::Mock(seed),
            timeout_ms: default_timeout(),
            params: BTreeMap::new(),
            token_env: None,
        }
    }
}

fn default_concurrency() -> usize {
    4
}

fn default_dim() -> usize {
    facadefixer_core::memory::DEFAULT_DIM
}

/// The experts configuration file: the roster plus client-wide limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertsConfig {
    pub experts: Vec<ExpertDescriptor>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

/// Candidate labels the detection node reserves for fused outputs.
const RESERVED_IDS: [&str; 2] = ["union", "intersection"];

impl ExpertsConfig {
    /// Reads a JSON or TOML (by `.toml` extension) configuration file.
    pub fn load(path: &Path) -> crate::Result<Self> {
        let bytes = read(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::format(path, e))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::format(path, e))?
        };
        cfg.validate().map_err(|e| Error::format(path, e))?;
        Ok(cfg)
    }

    /// A full roster of seeded mocks: three detectors, two crack segmenters,
    /// and one of every other kind.
    pub fn all_mock(seed: u64) -> Self {
        use ExpertKind::*;
        let experts = vec![
            ExpertDescriptor::mock("yolo11", Detector, seed + 1),
            ExpertDescriptor::mock("yolo12", Detector, seed + 2),
            ExpertDescriptor::mock("rtdetr", Detector, seed + 3),
            ExpertDescriptor::mock("crack-a", CrackSegmenter, seed + 11),
            ExpertDescriptor::mock("crack-b", CrackSegmenter, seed + 12),
            ExpertDescriptor::mock("sam", PromptableSegmenter, seed + 21),
            ExpertDescriptor::mock("painter", Generator, seed + 31),
            ExpertDescriptor::mock("judge", Adjudicator, seed + 41),
            ExpertDescriptor::mock("clip", Embedder, seed + 51),
        ];
        Self {
            experts,
            concurrency: default_concurrency(),
            embedding_dim: default_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(m));
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be at least 1".into());
        }
        let mut seen = BTreeSet::new();
        for d in &self.experts {
            if d.id.is_empty() || RESERVED_IDS.contains(&d.id.as_str()) {
                return bad(format!("expert id {:?} is reserved or empty", d.id));
            }
            if !seen.insert(d.id.as_str()) {
                return bad(format!("duplicate expert id {:?}", d.id));
            }
            if d.timeout_ms == 0 {
                return bad(format!("expert {}: timeout must be positive", d.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("expert {expert}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        expert: String,
        attempts: usize,
        message: String,
    },
    #[error("expert {expert}: malformed reply field `{field}`: {message}")]
    Protocol {
        expert: String,
        field: String,
        message: String,
    },
    #[error("expert {expert}: {message}")]
    Usage { expert: String, message: String },
    #[error("no {0} in the expert roster")]
    Missing(ExpertKind),
    #[error("expert {expert} is a {found}, expected {expected}")]
    KindMismatch {
        expert: String,
        expected: String,
        found: ExpertKind,
    },
    #[error("expert {0} is disabled")]
    Disabled(String),
    #[error("invalid experts configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] facadefixer_core::Error),
}

/// Moves one JSON request body to an endpoint and returns the raw reply.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, body: &str, timeout: Duration, bearer: Option<&str>) -> Result<String, String>;
}

/// Blocking HTTP transport.
#[derive(Debug, Default, Clone, Copy)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post(&self, url: &str, body: &str, timeout: Duration, bearer: Option<&str>) -> Result<String, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut req = agent.post(url).header("content-type", "application/json");
        if let Some(token) = bearer {
            req = req.header("authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        resp.body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_string()
            .map_err(|e| e.to_string())
    }
}

/// Counting semaphore bounding in-flight wire requests.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorReply {
    pub output: ExpertOutput,
    /// Clamping and dropping notes for boxes that left the image.
    pub warnings: Vec<String>,
}

/// A generator job in the shape of the recomposition wire schema.
#[derive(Debug, Clone, Copy)]
pub enum GeneratorRequest<'a> {
    Inpaint {
        pixels: &'a RasterImage,
        job: &'a InpaintJob,
        seed: u64,
    },
    Compose {
        spec: &'a BlendSpec<'a>,
    },
}

#[derive(Debug, Clone, Copy)]
pub enum EmbedInput<'a> {
    Image(&'a RasterImage),
    Text(&'a str),
}

impl EmbedInput<'_> {
    /// Input identity the mock embedder hashes.
    fn identity(&self) -> Vec<u8> {
        match self {
            EmbedInput::Image(img) => {
                let (w, h) = img.dims();
                let mut out = b"image".to_vec();
                out.extend_from_slice(&w.to_le_bytes());
                out.extend_from_slice(&h.to_le_bytes());
                out.extend_from_slice(img.as_bytes());
                out
            }
            EmbedInput::Text(t) => [b"text".as_slice(), t.as_bytes()].concat(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", content = "reason", rename_all = "snake_case")]
pub enum PlanSource {
    Endpoint,
    Fallback(String),
}

pub struct Gateway {
    config: ExpertsConfig,
    transport: Arc<dyn Transport>,
    limiter: Limiter,
    next_request: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("config", &self.config).finish_non_exhaustive()
    }
}

fn wire_image(image: &ImageRef, pixels: Option<&RasterImage>) -> Value {
    let mut v = json!({
        "id": image.id,
        "uri": image.uri,
        "width": image.width,
        "height": image.height,
    });
    if let Some(p) = pixels {
        v["data"] = json!(to_base64_png(p));
    }
    v
}

impl Gateway {
    pub fn new(config: ExpertsConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Self {
            limiter: Limiter::new(config.concurrency),
            config,
            transport,
            next_request: AtomicU64::new(0),
        })
    }

    pub fn with_http(config: ExpertsConfig) -> Result<Self, GatewayError> {
        Self::new(config, Arc::new(HttpTransport))
    }

    pub fn config(&self) -> &ExpertsConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn expert(&self, id: &str) -> Option<&ExpertDescriptor> {
        self.config.experts.iter().find(|d| d.id == id)
    }

    /// Experts of one kind, in id order.
    pub fn experts_of(&self, kind: ExpertKind) -> Vec<&ExpertDescriptor> {
        let mut v: Vec<_> = self.config.experts.iter().filter(|d| d.kind == kind).collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    pub fn first_of(&self, kind: ExpertKind) -> Result<&ExpertDescriptor, GatewayError> {
        self.experts_of(kind).into_iter().next().ok_or(GatewayError::Missing(kind))
    }

    fn check_kind(d: &ExpertDescriptor, allowed: &[ExpertKind]) -> Result<(), GatewayError> {
        if allowed.contains(&d.kind) {
            Ok(())
        } else {
            let expected: Vec<String> = allowed.iter().map(|k| k.to_string()).collect();
            Err(GatewayError::KindMismatch {
                expert: d.id.clone(),
                expected: expected.join(" or "),
                found: d.kind,
            })
        }
    }

    fn post_once(&self, d: &ExpertDescriptor, url: &str, body: &str) -> Result<String, String> {
        let token = d.token_env.as_deref().and_then(|name| std::env::var(name).ok());
        let _permit = self.limiter.acquire();
        self.transport
            .post(url, body, Duration::from_millis(d.timeout_ms), token.as_deref())
    }

    /// Sends `body` (with a fresh request id and the expert's params) and
    /// returns the parsed reply object.
    fn request(&self, d: &ExpertDescriptor, url: &str, mut body: Value) -> Result<Value, GatewayError> {
        let request_id = format!("req-{}", self.next_request.fetch_add(1, Ordering::Relaxed));
        body["request_id"] = json!(request_id);
        if !d.params.is_empty() {
            body["params"] = json!(d.params);
        }
        let body = body.to_string();
        let mut last = String::new();
        let mut raw = None;
        for _ in 0..WIRE_ATTEMPTS {
            match self.post_once(d, url, &body) {
                Ok(reply) => {
                    raw = Some(reply);
                    break;
                }
                Err(e) => last = e,
            }
        }
        let raw = raw.ok_or_else(|| GatewayError::Transport {
            expert: d.id.clone(),
            attempts: WIRE_ATTEMPTS,
            message: last,
        })?;
        let reply: Value = serde_json::from_str(&raw).map_err(|e| protocol(d, "body", e))?;
        if !reply.is_object() {
            return Err(protocol(d, "body", "reply is not a JSON object"));
        }
        if let Some(echo) = reply.get("request_id") {
            if echo.as_str() != Some(request_id.as_str()) {
                return Err(protocol(d, "request_id", format!("expected {request_id}, got {echo}")));
            }
        }
        Ok(reply)
    }

    pub fn call_detector(
        &self,
        image: &ImageRef,
        pixels: &RasterImage,
        d: &ExpertDescriptor,
    ) -> Result<DetectorReply, GatewayError> {
        Self::check_kind(d, &[ExpertKind::Detector])?;
        let (detections, warnings) = match &d.endpoint {
            Endpoint::Mock(seed) => (mock::mock_detect(*seed, &d.id, image), Vec::new()),
            Endpoint::Disabled => return Err(GatewayError::Disabled(d.id.clone())),
            Endpoint::Http(url) => {
                let reply = self.request(d, url, json!({ "task": "detect", "image": wire_image(image, Some(pixels)) }))?;
                parse_detections(d, image, &reply)?
            }
        };
        Ok(DetectorReply {
            output: ExpertOutput::detections(d.id.clone(), image.id.clone(), detections),
            warnings,
        })
    }

    /// Segments `image`. Crack segmenters take no prompt (box and point
    /// prompts are ignored, text prompts are a usage error); promptable
    /// segmenters require one.
    pub fn call_segmenter(
        &self,
        image: &ImageRef,
        pixels: &RasterImage,
        prompt: Option<&SegmentPrompt>,
        d: &ExpertDescriptor,
    ) -> Result<BinaryMask, GatewayError> {
        Self::check_kind(d, &[ExpertKind::CrackSegmenter, ExpertKind::PromptableSegmenter])?;
        let usage = |message: &str| GatewayError::Usage {
            expert: d.id.clone(),
            message: message.into(),
        };
        let crack = d.kind == ExpertKind::CrackSegmenter;
        if crack && matches!(prompt, Some(SegmentPrompt::Text { .. })) {
            return Err(usage("text prompts are not accepted by crack segmenters"));
        }
        if !crack && prompt.is_none() {
            return Err(usage("promptable segmenter called without a prompt"));
        }
        if let Some(p) = prompt {
            p.validate()?;
        }
        match &d.endpoint {
            Endpoint::Mock(seed) => Ok(match prompt {
                Some(p) if !crack => mock::mock_segment(*seed, image, p),
                _ => mock::mock_crack_segment(*seed, image),
            }),
            Endpoint::Disabled => Err(GatewayError::Disabled(d.id.clone())),
            Endpoint::Http(url) => {
                let mut body = json!({ "task": "segment", "image": wire_image(image, Some(pixels)) });
                if let (Some(p), false) = (prompt, crack) {
                    body["prompt"] = json!(p);
                }
                let reply = self.request(d, url, body)?;
                parse_mask(d, &reply, "mask_rle", image.dims())
            }
        }
    }

    pub fn call_generator(&self, req: &GeneratorRequest<'_>, d: &ExpertDescriptor) -> Result<RasterImage, GatewayError> {
        Self::check_kind(d, &[ExpertKind::Generator])?;
        match (&d.endpoint, req) {
            (Endpoint::Mock(_), GeneratorRequest::Inpaint { pixels, job, .. }) => Ok(mock_inpaint(pixels, job)?),
            (Endpoint::Mock(_), GeneratorRequest::Compose { spec }) => Ok(mock_compose(spec)?.image),
            (Endpoint::Disabled, _) => Err(GatewayError::Disabled(d.id.clone())),
            (Endpoint::Http(url), _) => {
                let (body, dims) = match req {
                    GeneratorRequest::Inpaint { pixels, job, seed } => (
                        json!({
                            "task": "inpaint",
                            "image": wire_image(&job.image, Some(pixels)),
                            "mask_rle": job.hole_mask.to_rle(),
                            "category": Value::Null,
                            "text": Value::Null,
                            "seed": seed,
                        }),
                        pixels.dims(),
                    ),
                    GeneratorRequest::Compose { spec } => {
                        let mask = composed_instance_mask(spec)?;
                        let entry = spec.entry;
                        (
                            json!({
                                "task": "compose",
                                "image": wire_image(&spec.background.image, Some(&spec.background.pixels)),
                                "mask_rle": mask.to_rle(),
                                "category": entry.category,
                                "text": entry.text,
                                "seed": spec.seed,
                                "reference": {
                                    "image": to_base64_png(&entry.crop_pixels),
                                    "mask_rle": entry.mask.to_rle(),
                                },
                            }),
                            spec.background.pixels.dims(),
                        )
                    }
                };
                let reply = self.request(d, url, body)?;
                let data = reply
                    .get("image")
                    .and_then(Value::as_str)
                    .ok_or_else(|| protocol(d, "image", "missing base64 PNG string"))?;
                let img = from_base64_png(data).map_err(|e| protocol(d, "image", e))?;
                if img.dims() != dims {
                    return Err(protocol(
                        d,
                        "image",
                        format!("reply is {}x{}, requested {}x{}", img.width(), img.height(), dims.0, dims.1),
                    ));
                }
                Ok(img)
            }
        }
    }

    /// Unit-norm embedding of the configured dimension.
    pub fn embed(&self, input: EmbedInput<'_>, d: &ExpertDescriptor) -> Result<Vec<f32>, GatewayError> {
        Self::check_kind(d, &[ExpertKind::Embedder])?;
        let dim = self.config.embedding_dim;
        match &d.endpoint {
            Endpoint::Mock(seed) => Ok(mock::mock_embed(*seed, &input.identity(), dim)),
            Endpoint::Disabled => Err(GatewayError::Disabled(d.id.clone())),
            Endpoint::Http(url) => {
                let body = match input {
                    EmbedInput::Image(img) => {
                        let r = ImageRef::new("embed-input", "", img.width(), img.height())?;
                        json!({ "task": "embed", "image": wire_image(&r, Some(img)) })
                    }
                    EmbedInput::Text(t) => json!({ "task": "embed", "image": Value::Null, "text": t }),
                };
                let reply = self.request(d, url, body)?;
                parse_embedding(d, &reply, dim)
            }
        }
    }

    /// Embeds with the first rostered embedder.
    pub fn embed_default(&self, input: EmbedInput<'_>) -> Result<Vec<f32>, GatewayError> {
        self.embed(input, self.first_of(ExpertKind::Embedder)?)
    }

    /// Resolves an adjudication with the first rostered adjudicator. A
    /// missing or disabled adjudicator resolves through bypass or fallback.
    pub fn adjudicate(&self, request: &AdjudicationRequest, fallback: &str) -> Result<Verdict, GatewayError> {
        let d = self.experts_of(ExpertKind::Adjudicator).into_iter().next();
        let verdict = match d.map(|d| (d, &d.endpoint)) {
            None | Some((_, Endpoint::Disabled)) => adjudication::adjudicate(request, None, fallback)?,
            Some((_, Endpoint::Mock(_))) => {
                let screened = adjudication::adjudicate(request, None, fallback)?;
                if request.candidates.len() == 1 {
                    screened
                } else {
                    adjudication::mock_adjudicate(request)
                }
            }
            Some((d, Endpoint::Http(url))) => {
                let mut endpoint =
                    |body: &str| self.post_once(d, url, body).map_err(EndpointFailure);
                adjudication::adjudicate(request, Some(&mut endpoint), fallback)?
            }
        };
        Ok(verdict)
    }

    /// Asks the adjudicator endpoint for a task plan and accepts it only if
    /// it has the same dependency structure as the rule-based plan.
    pub fn plan_via_endpoint(&self, profile: &InstructionProfile) -> (TaskPlan, PlanSource) {
        let rule = plan(profile);
        let fallback = |reason: String| (rule.clone(), PlanSource::Fallback(reason));
        let Some(d) = self.experts_of(ExpertKind::Adjudicator).into_iter().next() else {
            return fallback("no adjudicator in the roster".into());
        };
        let proposed: Result<TaskPlan, String> = match &d.endpoint {
            Endpoint::Disabled => return fallback(format!("adjudicator {} is disabled", d.id)),
            Endpoint::Mock(_) => Ok(rule.clone()),
            Endpoint::Http(url) => self
                .request(d, url, json!({ "task": "plan", "image": Value::Null, "profile": profile }))
                .map_err(|e| e.to_string())
                .and_then(|reply| {
                    serde_json::from_value(reply.get("plan").cloned().unwrap_or(Value::Null))
                        .map_err(|e| format!("plan: {e}"))
                }),
        };
        match proposed.and_then(|p| p.validate_for(profile).map(|_| p).map_err(|e| e.to_string())) {
            Ok(p) => (p, PlanSource::Endpoint),
            Err(reason) => fallback(reason),
        }
    }
}

fn protocol(d: &ExpertDescriptor, field: &str, message: impl ToString) -> GatewayError {
    GatewayError::Protocol {
        expert: d.id.clone(),
        field: field.into(),
        message: message.to_string(),
    }
}

fn parse_detections(
    d: &ExpertDescriptor,
    image: &ImageRef,
    reply: &Value,
) -> Result<(Vec<Detection>, Vec<String>), GatewayError> {
    let records = reply
        .get("detections")
        .and_then(Value::as_array)
        .ok_or_else(|| protocol(d, "detections", "missing array"))?;
    let mut out = Vec::with_capacity(records.len());
    let mut warnings = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let field = |name: &str| format!("detections[{i}].{name}");
        let coords: Vec<f64> = rec
            .get("bbox")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default();
        if coords.len() != 4 {
            return Err(protocol(d, &field("bbox"), "expected [x, y, w, h]"));
        }
        let bbox = BoundingBox::new(coords[0], coords[1], coords[2], coords[3])
            .map_err(|e| protocol(d, &field("bbox"), e))?;
        let category: DefectCategory = rec
            .get("category")
            .and_then(Value::as_str)
            .ok_or_else(|| protocol(d, &field("category"), "missing"))?
            .parse()
            .map_err(|e| protocol(d, &field("category"), e))?;
        let confidence = rec
            .get("confidence")
            .and_then(Value::as_f64)
            .filter(|c| (0.0..=1.0).contains(c))
            .ok_or_else(|| protocol(d, &field("confidence"), "expected a number in [0, 1]"))?;
        let bbox = if bbox.fits_within(image.width, image.height) {
            bbox
        } else if let Some(clamped) = bbox.clamp_to(image.width, image.height) {
            warnings.push(format!("{}: detections[{i}] clamped to the image bounds", d.id));
            clamped
        } else {
            warnings.push(format!("{}: detections[{i}] lies outside the image, dropped", d.id));
            continue;
        };
        out.push(Detection {
            bbox,
            category,
            confidence,
            source: d.id.clone(),
        });
    }
    Ok((out, warnings))
}

fn parse_mask(d: &ExpertDescriptor, reply: &Value, field: &str, dims: (u32, u32)) -> Result<BinaryMask, GatewayError> {
    let raw = reply.get(field).cloned().ok_or_else(|| protocol(d, field, "missing"))?;
    let rle: Rle = serde_json::from_value(raw).map_err(|e| protocol(d, field, e))?;
    if (rle.width, rle.height) != dims {
        return Err(protocol(
            d,
            field,
            format!("mask is {}x{}, image is {}x{}", rle.width, rle.height, dims.0, dims.1),
        ));
    }
    BinaryMask::from_rle(&rle).map_err(|e| protocol(d, field, e))
}

fn parse_embedding(d: &ExpertDescriptor, reply: &Value, dim: usize) -> Result<Vec<f32>, GatewayError> {
    let values: Vec<f64> = reply
        .get("embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| protocol(d, "embedding", "missing array"))?
        .iter()
        .map(|v| v.as_f64().filter(|x| x.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| protocol(d, "embedding", "non-numeric component"))?;
    if values.len() != dim {
        return Err(protocol(d, "embedding", format!("length {} but D = {dim}", values.len())));
    }
    let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(protocol(d, "embedding", "zero vector"));
    }
    Ok(values.iter().map(|x| (x / norm) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    /// Transport answering from a closure, counting calls.
    struct Scripted<F> {
        reply: F,
        calls: AtomicUsize,
    }

    impl<F> Transport for Scripted<F>
    where
        F: Fn(&Value) -> Result<String, String> + Send + Sync,
    {
        fn post(&self, _url: &str, body: &str, _t: Duration, _b: Option<&str>) -> Result<String, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            (self.reply)(&serde_json::from_str(body).unwrap())
        }
    }

    fn scripted<F>(f: F) -> Arc<Scripted<F>>
    where
        F: Fn(&Value) -> Result<String, String> + Send + Sync,
    {
        Arc::new(Scripted {
            reply: f,
            calls: AtomicUsize::new(0),
        })
    }

    fn live(kind: ExpertKind) -> ExpertsConfig {
        let mut d = ExpertDescriptor::mock("remote", kind, 0);
        d.endpoint = Endpoint::Http("http://expert.invalid/v1".into());
        ExpertsConfig {
            experts: vec![d],
            concurrency: 2,
            embedding_dim: 4,
        }
    }

    fn image() -> (ImageRef, RasterImage) {
        (
            ImageRef::new("img1", "img1.png", 100, 80).unwrap(),
            RasterImage::filled(100, 80, [120, 110, 100]).unwrap(),
        )
    }

    #[test]
    fn endpoint_strings_round_trip() {
        for s in ["mock:7", "disabled", "https://x.example/detect"] {
            let e: Endpoint = s.parse().unwrap();
            assert_eq!(String::from(e), s);
        }
        assert!("ftp://x".parse::<Endpoint>().is_err());
        assert!("mock:x".parse::<Endpoint>().is_err());
    }

    #[test]
    fn mock_detector_is_deterministic() {
        let gw = Gateway::with_http(ExpertsConfig::all_mock(7)).unwrap();
        let d = gw.expert("yolo11").unwrap();
        let (r, p) = image();
        let a = gw.call_detector(&r, &p, d).unwrap();
        let b = gw.call_detector(&r, &p, d).unwrap();
        assert_eq!(a, b);
        assert!(a.output.image_id == "img1");
    }

    #[test]
    fn kind_is_checked() {
        let gw = Gateway::with_http(ExpertsConfig::all_mock(0)).unwrap();
        let (r, p) = image();
        let err = gw.call_detector(&r, &p, gw.expert("sam").unwrap()).unwrap_err();
        assert!(matches!(err, GatewayError::KindMismatch { .. }));
    }

    #[test]
    fn text_prompt_to_crack_segmenter_is_a_usage_error() {
        let gw = Gateway::with_http(ExpertsConfig::all_mock(0)).unwrap();
        let (r, p) = image();
        let prompt = SegmentPrompt::Text {
            concepts: vec!["crack".into()],
        };
        let err = gw.call_segmenter(&r, &p, Some(&prompt), gw.expert("crack-a").unwrap()).unwrap_err();
        assert!(matches!(err, GatewayError::Usage { .. }));
    }

    #[test]
    fn mock_bbox_segmentation_stays_in_the_box() {
        let gw = Gateway::with_http(ExpertsConfig::all_mock(3)).unwrap();
        let (r, p) = image();
        let b = BoundingBox::new(20.0, 10.0, 30.0, 25.0).unwrap();
        let prompt = SegmentPrompt::Bbox { boxes: vec![b] };
        let m = gw.call_segmenter(&r, &p, Some(&prompt), gw.expert("sam").unwrap()).unwrap();
        assert!(!m.is_empty());
        assert!(m.is_subset_of(&BinaryMask::from_box(100, 80, &b)));
    }

    #[test]
    fn transport_failure_is_retried_once() {
        let t = scripted(|_| Err("connection refused".into()));
        let gw = Gateway::new(live(ExpertKind::Detector), t.clone()).unwrap();
        let (r, p) = image();
        let err = gw.call_detector(&r, &p, gw.expert("remote").unwrap()).unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 2, .. }), "{err}");
        assert_eq!(t.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn second_attempt_can_succeed() {
        let t = scripted({
            let n = AtomicUsize::new(0);
            move |_| {
                if n.fetch_add(1, Ordering::SeqCst) == 0 {
                    Err("timeout".into())
                } else {
                    Ok(r#"{"detections": []}"#.into())
                }
            }
        });
        let gw = Gateway::new(live(ExpertKind::Detector), t.clone()).unwrap();
        let (r, p) = image();
        assert!(gw.call_detector(&r, &p, gw.expert("remote").unwrap()).is_ok());
        assert_eq!(t.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn boxes_past_the_edge_are_clamped_with_a_warning() {
        let t = scripted(|_| {
            Ok(json!({"detections": [
                {"bbox": [90, 70, 30, 30], "category": "rust_stain", "confidence": 0.8},
                {"bbox": [200, 200, 5, 5], "category": "crack", "confidence": 0.5},
                {"bbox": [10, 10, 5, 5], "category": "crack", "confidence": 0.5}
            ]})
            .to_string())
        });
        let gw = Gateway::new(live(ExpertKind::Detector), t).unwrap();
        let (r, p) = image();
        let reply = gw.call_detector(&r, &p, gw.expert("remote").unwrap()).unwrap();
        let ExpertOutput { payload, .. } = reply.output;
        let facadefixer_core::fusion::ExpertPayload::Detections(dets) = payload else { panic!() };
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].bbox, BoundingBox::new(90.0, 70.0, 10.0, 10.0).unwrap());
        assert_eq!(reply.warnings.len(), 2);
    }

    #[test]
    fn malformed_fields_are_named() {
        let cases = [
            (json!({}), "detections"),
            (json!({"detections": [{"bbox": [1, 2, 3], "category": "crack", "confidence": 0.5}]}), "detections[0].bbox"),
            (json!({"detections": [{"bbox": [1, 2, 3, 4], "category": "graffiti", "confidence": 0.5}]}), "detections[0].category"),
            (json!({"detections": [{"bbox": [1, 2, 3, 4], "category": "crack", "confidence": 1.5}]}), "detections[0].confidence"),
        ];
        for (reply, expected) in cases {
            let t = scripted(move |_| Ok(reply.to_string()));
            let gw = Gateway::new(live(ExpertKind::Detector), t).unwrap();
            let (r, p) = image();
            match gw.call_detector(&r, &p, gw.expert("remote").unwrap()) {
                Err(GatewayError::Protocol { field, .. }) => assert_eq!(field, expected),
                other => panic!("expected protocol error for {expected}, got {other:?}"),
            }
        }
    }

    #[test]
    fn mismatched_request_id_is_rejected() {
        let t = scripted(|_| Ok(r#"{"request_id": "someone-else", "detections": []}"#.into()));
        let gw = Gateway::new(live(ExpertKind::Detector), t).unwrap();
        let (r, p) = image();
        let err = gw.call_detector(&r, &p, gw.expert("remote").unwrap()).unwrap_err();
        assert!(matches!(err, GatewayError::Protocol { ref field, .. } if field == "request_id"));
    }

    #[test]
    fn oversized_mask_reply_is_a_protocol_error() {
        let t = scripted(|_| Ok(json!({"mask_rle": {"size": [80, 120], "counts": [9600]}}).to_string()));
        let gw = Gateway::new(live(ExpertKind::PromptableSegmenter), t).unwrap();
        let (r, p) = image();
        let prompt = SegmentPrompt::Bbox {
            boxes: vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap()],
        };
        let err = gw.call_segmenter(&r, &p, Some(&prompt), gw.expert("remote").unwrap()).unwrap_err();
        assert!(matches!(err, GatewayError::Protocol { ref field, .. } if field == "mask_rle"), "{err}");
    }

    #[test]
    fn segment_request_carries_the_prompt() {
        let t = scripted(|body| {
            assert_eq!(body["task"], "segment");
            assert_eq!(body["prompt"]["mode"], "points");
            Ok(json!({"request_id": body["request_id"], "mask_rle": {"size": [80, 100], "counts": [8000]}}).to_string())
        });
        let gw = Gateway::new(live(ExpertKind::PromptableSegmenter), t).unwrap();
        let (r, p) = image();
        let prompt = SegmentPrompt::Points {
            points: vec![[5.0, 5.0]],
        };
        let m = gw.call_segmenter(&r, &p, Some(&prompt), gw.expert("remote").unwrap()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn live_embeddings_are_normalized_and_length_checked() {
        let t = scripted(|_| Ok(r#"{"embedding": [3, 0, 4, 0]}"#.into()));
        let gw = Gateway::new(live(ExpertKind::Embedder), t).unwrap();
        let v = gw.embed(EmbedInput::Text("crack"), gw.expert("remote").unwrap()).unwrap();
        assert_eq!(v, vec![0.6, 0.0, 0.8, 0.0]);

        let t = scripted(|_| Ok(r#"{"embedding": [1, 2]}"#.into()));
        let gw = Gateway::new(live(ExpertKind::Embedder), t).unwrap();
        assert!(gw.embed(EmbedInput::Text("crack"), gw.expert("remote").unwrap()).is_err());
    }

    #[test]
    fn mock_embeddings_are_unit_and_distinct() {
        let gw = Gateway::with_http(ExpertsConfig::all_mock(1)).unwrap();
        let words = ["crack", "spalling", "rust", "plaster", "plant", "rubbish"];
        let vs: Vec<Vec<f32>> = words.iter().map(|w| gw.embed_default(EmbedInput::Text(w)).unwrap()).collect();
        for (i, v) in vs.iter().enumerate() {
            let n: f64 = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            for w in &vs[i + 1..] {
                assert!(facadefixer_core::memory::cosine(v, w).unwrap() < 1.0);
            }
        }
        assert_eq!(vs[0], gw.embed_default(EmbedInput::Text("crack")).unwrap());
    }

    #[test]
    fn reserved_and_duplicate_ids_are_rejected() {
        let mut cfg = ExpertsConfig::all_mock(0);
        cfg.experts[0].id = "union".into();
        assert!(cfg.validate().is_err());
        let mut cfg = ExpertsConfig::all_mock(0);
        cfg.experts[1].id = cfg.experts[0].id.clone();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn limiter_bounds_in_flight_requests() {
        let peak = Arc::new(AtomicUsize::new(0));
        let now = Arc::new(AtomicUsize::new(0));
        let t = scripted({
            let (peak, now) = (peak.clone(), now.clone());
            move |_| {
                let n = now.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(n, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                now.fetch_sub(1, Ordering::SeqCst);
                Ok(r#"{"detections": []}"#.into())
            }
        });
        let gw = Gateway::new(live(ExpertKind::Detector), t).unwrap();
        let (r, p) = image();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| gw.call_detector(&r, &p, gw.expert("remote").unwrap()).unwrap());
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn planner_falls_back_on_invalid_plans() {
        let profile = facadefixer_core::plan::interpret_profile(&json!({"toggles": ["segment"]})).unwrap();
        let t = scripted(|_| {
            Ok(json!({"plan": {"nodes": [{"id": "segment", "kind": "segment"}], "edges": []}}).to_string())
        });
        let gw = Gateway::new(live(ExpertKind::Adjudicator), t).unwrap();
        let (p, source) = gw.plan_via_endpoint(&profile);
        assert_eq!(p, plan(&profile));
        assert!(matches!(source, PlanSource::Fallback(_)));

        let rule = plan(&profile);
        let t = scripted(move |_| Ok(json!({ "plan": rule }).to_string()));
        let gw = Gateway::new(live(ExpertKind::Adjudicator), t).unwrap();
        assert_eq!(gw.plan_via_endpoint(&profile).1, PlanSource::Endpoint);

        let t = scripted(|_| Err("unreachable".into()));
        let gw = Gateway::new(live(ExpertKind::Adjudicator), t).unwrap();
        assert!(matches!(gw.plan_via_endpoint(&profile).1, PlanSource::Fallback(_)));
    }
}
