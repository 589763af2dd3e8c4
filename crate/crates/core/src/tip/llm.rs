//! Extractor generation through a pluggable text-completion client.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::expr::parse_program;
use super::{known_field, probe_fixture, validate_extractor, Extractor, ExtractorSpec, Provenance, TipError};
use super::HANDCRAFTED_SOURCE;

pub const PROMPT_TEMPLATE_V1: &str = include_str!("../../prompts/tip_extractor_v1.txt");
pub const PROMPT_VERSION: &str = "tip_extractor_v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("request failed: {0}")]
    Failed(String),
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;

    fn provenance(&self) -> Provenance {
        Provenance::LlmGenerated
    }
}

/// Hermetic client returning a fixed, versioned response.
#[derive(Clone, Debug, Default)]
pub struct MockClient;

impl MockClient {
    pub const RESPONSE_VERSION: &'static str = "mock-v1";

    pub fn canned_response() -> String {
        format!("Here is the extractor.\n\n```tip\n{HANDCRAFTED_SOURCE}```\n")
    }
}

impl LlmClient for MockClient {
    fn complete(&self, _prompt: &str) -> Result<String, LlmError> {
        Ok(Self::canned_response())
    }

    fn provenance(&self) -> Provenance {
        Provenance::Mock
    }
}

/// Replays a fixed list of responses in order, then repeats the last one.
/// Also records the prompts it was given.
#[derive(Debug)]
pub struct CannedClient {
    responses: Vec<Result<String, LlmError>>,
    state: Mutex<(usize, Vec<String>)>,
}

impl CannedClient {
    pub fn new(responses: Vec<Result<String, LlmError>>) -> Self {
        assert!(!responses.is_empty());
        Self { responses, state: Mutex::new((0, Vec::new())) }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.state.lock().unwrap().1.clone()
    }
}

impl LlmClient for CannedClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let mut st = self.state.lock().unwrap();
        let i = st.0.min(self.responses.len() - 1);
        st.0 += 1;
        st.1.push(prompt.to_string());
        self.responses[i].clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub name: String,
    pub unit: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsSchema {
    pub fields: Vec<FieldSchema>,
}

impl ObsSchema {
    pub fn render(&self) -> String {
        self.fields
            .iter()
            .map(|f| format!("- {} [{}]: {}", f.name, f.unit, f.description))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Description of every privileged state field the interpreter exposes.
pub fn obs_schema(scan_rays: usize) -> ObsSchema {
    let f = |name: &str, unit: &str, description: &str| FieldSchema {
        name: name.into(),
        unit: unit.into(),
        description: description.into(),
    };
    ObsSchema {
        fields: vec![
            f("body_x", "m", "horizontal body position along the track"),
            f("body_y", "m", "body centre height"),
            f("body_vx", "m/s", "horizontal body velocity"),
            f("body_vy", "m/s", "vertical body velocity"),
            f("leg_extension", "m", "current leg length"),
            f("contact_force", "N", "vertical ground reaction, zero in the air"),
            f("slip_speed", "m/s", "horizontal slip speed of the foot, zero in the air"),
            f("in_contact", "0/1", "1 when the foot touches the ground"),
            f("command_velocity", "m/s", "commanded forward speed"),
            f("footprint_ground_max", "m", "highest ground point under the body footprint, -inf over a hole"),
            f("footprint_ceiling_min", "m", "lowest ceiling point over the body footprint, +inf when open"),
            f(
                &format!("local_heights[0..{}]", scan_rays),
                "m",
                "ground heights ahead of the body, then ceiling heights, clamped to max_range",
            ),
            f("max_range", "m", "sensor range used for clamping"),
            f("mass", "kg", "body mass"),
            f("friction", "-", "ground friction coefficient"),
            f("com_offset", "m", "centre-of-mass offset"),
            f("actuator_gain", "-", "actuator strength multiplier"),
        ],
    }
}

pub fn render_prompt(task_description: &str, schema: &ObsSchema) -> String {
    PROMPT_TEMPLATE_V1
        .replace("{task_description}", task_description)
        .replace("{obs_schema}", &schema.render())
}

fn fenced_block(response: &str) -> Option<&str> {
    let start = response.find("```")?;
    let rest = &response[start + 3..];
    let body_start = rest.find('\n')? + 1;
    let body = &rest[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

/// Asks the client for an extractor, parses it and attaches a validation
/// report computed on the probe fixture. The report may be failing.
pub fn generate_extractor(
    task_description: &str,
    schema: &ObsSchema,
    client: &dyn LlmClient,
) -> Result<ExtractorSpec, TipError> {
    let prompt = render_prompt(task_description, schema);
    let response = client.complete(&prompt).map_err(|e| match e {
        LlmError::Timeout(m) => TipError::Retriable(m),
        LlmError::Failed(m) => TipError::GenerationFailed(m),
    })?;
    let source = fenced_block(&response)
        .ok_or_else(|| TipError::GenerationFailed("response has no fenced code block".into()))?
        .to_string();
    let program =
        parse_program(&source, &known_field).map_err(|e| TipError::GenerationFailed(format!("unparseable: {e}")))?;
    let provenance = client.provenance();
    let name = match provenance {
        Provenance::Mock => "clearance_contact_v1".to_string(),
        _ => {
            let digest = hex::encode(Sha256::digest(source.as_bytes()));
            format!("generated_{}", &digest[..12])
        }
    };
    let spec = ExtractorSpec {
        name,
        source_text: source,
        output_dim: program.outputs.len(),
        provenance,
        validation_report: None,
    };
    let extractor = Extractor::compile(spec)?;
    let report = validate_extractor(&extractor, &probe_fixture());
    let mut spec = extractor.spec().clone();
    spec.validation_report = Some(report);
    Ok(spec)
}

/// OpenAI-compatible chat endpoint. Reads `DREAMTIP_LLM_ENDPOINT`,
/// `DREAMTIP_LLM_KEY` and optionally `DREAMTIP_LLM_MODEL`.
#[cfg(feature = "live-llm")]
pub struct LiveClient {
    endpoint: String,
    key: String,
    model: String,
}

#[cfg(feature = "live-llm")]
impl LiveClient {
    pub fn from_env() -> Result<Self, LlmError> {
        let var = |k: &str| std::env::var(k).map_err(|_| LlmError::Failed(format!("{k} not set")));
        Ok(Self {
            endpoint: var("DREAMTIP_LLM_ENDPOINT")?,
            key: var("DREAMTIP_LLM_KEY")?,
            model: std::env::var("DREAMTIP_LLM_MODEL").unwrap_or_else(|_| "gpt-4o".into()),
        })
    }
}

#[cfg(feature = "live-llm")]
impl LlmClient for LiveClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0.0,
        });
        let resp = ureq::post(&self.endpoint)
            .timeout(std::time::Duration::from_secs(120))
            .set("Authorization", &format!("Bearer {}", self.key))
            .send_json(body)
            .map_err(|e| match e {
                ureq::Error::Transport(t) if t.kind() == ureq::ErrorKind::Io => LlmError::Timeout(t.to_string()),
                other => LlmError::Failed(other.to_string()),
            })?;
        let v: serde_json::Value = resp.into_json().map_err(|e| LlmError::Failed(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Failed("response missing message content".into()))
    }
}
