use std::collections::VecDeque;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::parse::parse_stage_probs;
use super::prompts::build_classification_prompt;
use super::select::StageBelief;
use super::{HvtsError, StageTemplate};

pub const ENDPOINT_ENV: &str = "VADF_VLM_ENDPOINT";
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_TOP_P: f64 = 0.7;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 1024;

/// What a classifier may look at.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassifyContext<'a> {
    /// Encoded images, earliest first.
    pub frames: &'a [Vec<u8>],
    /// Ground-truth stage, when the environment exposes one.
    pub true_stage: Option<usize>,
}

impl ClassifyContext<'_> {
    pub fn with_stage(stage: usize) -> Self {
        Self {
            frames: &[],
            true_stage: Some(stage),
        }
    }
}

pub trait StageClassifier {
    fn classify(&mut self, ctx: &ClassifyContext<'_>) -> Result<StageBelief, HvtsError>;
}

/// Returns a one-hot belief on the ground-truth stage.
#[derive(Debug, Clone, Copy)]
pub struct OracleClassifier {
    num_stages: usize,
}

impl OracleClassifier {
    pub fn new(num_stages: usize) -> Self {
        Self { num_stages }
    }
}

impl StageClassifier for OracleClassifier {
    fn classify(&mut self, ctx: &ClassifyContext<'_>) -> Result<StageBelief, HvtsError> {
        let stage = ctx
            .true_stage
            .ok_or(HvtsError::MissingInput("the ground-truth stage"))?;
        if stage >= self.num_stages {
            return Err(HvtsError::StageIndex {
                index: stage,
                len: self.num_stages,
            });
        }
        Ok(StageBelief::one_hot(stage))
    }
}

/// One user turn: text prompt plus encoded images.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChatRequest {
    pub prompt: String,
    pub images: Vec<Vec<u8>>,
}

/// Produces the assistant's text for a request.
pub trait ChatBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, HvtsError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Network(String),
}

impl From<TransportError> for HvtsError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Timeout => HvtsError::Timeout,
            TransportError::Network(msg) => HvtsError::Network(msg),
        }
    }
}

/// Blocking JSON POST.
pub trait Transport {
    fn post_json(&self, url: &str, body: &str, timeout: Duration) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, body: &str, timeout: Duration) -> Result<String, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut response = agent
            .post(url)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(transport_error)?;
        response.body_mut().read_to_string().map_err(transport_error)
    }
}

fn transport_error(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::Io(io)
            if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) =>
        {
            TransportError::Timeout
        }
        other => TransportError::Network(other.to_string()),
    }
}

/// Chat-completions client over a [`Transport`].
#[derive(Debug, Clone)]
pub struct HttpChat<T: Transport> {
    pub transport: T,
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl<T: Transport> HttpChat<T> {
    pub fn new(transport: T, endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            transport,
            endpoint: endpoint.into(),
            model: "default".into(),
            timeout,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }

    /// Endpoint taken from the environment variable [`ENDPOINT_ENV`].
    pub fn from_env(transport: T, timeout: Duration) -> Result<Self, HvtsError> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| HvtsError::MissingInput("the VADF_VLM_ENDPOINT environment variable"))?;
        Ok(Self::new(transport, endpoint, timeout))
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let b64 = base64::engine::general_purpose::STANDARD;
        let mut content: Vec<Value> = request
            .images
            .iter()
            .map(|img| {
                json!({
                    "type": "image_url",
                    "image_url": { "url": format!("data:image/png;base64,{}", b64.encode(img)) }
                })
            })
            .collect();
        content.push(json!({ "type": "text", "text": request.prompt }));
        json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": content }],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_new_tokens": self.max_new_tokens,
            "max_tokens": self.max_new_tokens,
        })
    }
}

impl<T: Transport> ChatBackend for HttpChat<T> {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, HvtsError> {
        let body = self.request_body(request).to_string();
        let raw = self.transport.post_json(&self.endpoint, &body, self.timeout)?;
        let value: Value = serde_json::from_str(&raw)
            .map_err(|e| HvtsError::Response(format!("body is not JSON: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| HvtsError::Response("no choices[0].message.content".into()))
    }
}

/// Replays canned responses in order and records every request.
#[derive(Debug, Clone, Default)]
pub struct ScriptedChat {
    responses: VecDeque<String>,
    pub requests: Vec<ChatRequest>,
}

impl ScriptedChat {
    pub fn new<I: IntoIterator<Item = String>>(responses: I) -> Self {
        Self {
            responses: responses.into_iter().collect(),
            requests: Vec::new(),
        }
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, HvtsError> {
        self.requests.push(request.clone());
        self.responses
            .pop_front()
            .ok_or_else(|| HvtsError::Response("scripted responses exhausted".into()))
    }
}

/// Stage classification through a chat model.
pub struct RemoteClassifier<B: ChatBackend> {
    pub backend: B,
    stages: Vec<StageTemplate>,
    top_k: usize,
    prompt: String,
}

impl<B: ChatBackend> RemoteClassifier<B> {
    pub fn new(backend: B, stages: Vec<StageTemplate>, top_k: usize) -> Result<Self, HvtsError> {
        let prompt = build_classification_prompt(&stages, top_k)?;
        Ok(Self {
            backend,
            stages,
            top_k,
            prompt,
        })
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }
}

impl<B: ChatBackend> StageClassifier for RemoteClassifier<B> {
    fn classify(&mut self, ctx: &ClassifyContext<'_>) -> Result<StageBelief, HvtsError> {
        let request = ChatRequest {
            prompt: self.prompt.clone(),
            images: ctx.frames.to_vec(),
        };
        let text = self.backend.complete(&request)?;
        parse_stage_probs(&text, &self.stages, self.top_k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    struct Recorder {
        bodies: RefCell<Vec<String>>,
        reply: Result<String, TransportError>,
    }

    impl Transport for Recorder {
        fn post_json(&self, _: &str, body: &str, _: Duration) -> Result<String, TransportError> {
            self.bodies.borrow_mut().push(body.to_string());
            self.reply.clone()
        }
    }

    fn stages() -> Vec<StageTemplate> {
        vec![
            StageTemplate::new("reach", "a").unwrap(),
            StageTemplate::new("push", "b").unwrap(),
        ]
    }

    #[test]
    fn oracle_is_one_hot() {
        let mut o = OracleClassifier::new(5);
        let b = o.classify(&ClassifyContext::with_stage(3)).unwrap();
        assert_eq!(b.entries(), &[(3, 1.0)]);
        assert!(o.classify(&ClassifyContext::default()).is_err());
        assert!(o.classify(&ClassifyContext::with_stage(5)).is_err());
    }

    #[test]
    fn request_body_carries_decoding_settings_and_frames() {
        let reply = json!({"choices": [{"message": {"content": "push: 0.8\nreach: 0.2"}}]});
        let t = Recorder {
            bodies: RefCell::new(Vec::new()),
            reply: Ok(reply.to_string()),
        };
        let chat = HttpChat::new(t, "http://localhost:1/v1/chat/completions", Duration::from_secs(1));
        let mut c = RemoteClassifier::new(chat, stages(), 3).unwrap();
        let frames = vec![vec![1u8, 2, 3], vec![4u8]];
        let ctx = ClassifyContext {
            frames: &frames,
            true_stage: None,
        };
        let b = c.classify(&ctx).unwrap();
        assert_eq!(b.entries(), &[(1, 0.8), (0, 0.2)]);
        let body: Value = serde_json::from_str(&c.backend.transport.bodies.borrow()[0]).unwrap();
        assert_eq!(body["temperature"], 0.1);
        assert_eq!(body["top_p"], 0.7);
        assert_eq!(body["max_new_tokens"], 1024);
        let content = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(content.len(), 3);
        assert_eq!(content[0]["image_url"]["url"], "data:image/png;base64,AQID");
        assert_eq!(content[2]["type"], "text");
    }

    #[test]
    fn failures_are_distinct() {
        let mk = |reply| Recorder {
            bodies: RefCell::new(Vec::new()),
            reply,
        };
        let run = |t: Recorder| {
            let chat = HttpChat::new(t, "http://x", Duration::from_millis(5));
            RemoteClassifier::new(chat, stages(), 3)
                .unwrap()
                .classify(&ClassifyContext::default())
        };
        assert!(matches!(run(mk(Err(TransportError::Timeout))), Err(HvtsError::Timeout)));
        assert!(matches!(
            run(mk(Err(TransportError::Network("refused".into())))),
            Err(HvtsError::Network(_))
        ));
        assert!(matches!(run(mk(Ok("<html>".into()))), Err(HvtsError::Response(_))));
        let nonsense = json!({"choices": [{"message": {"content": "no idea"}}]}).to_string();
        assert!(matches!(run(mk(Ok(nonsense))), Err(HvtsError::NoRecognizedStages)));
    }

    #[test]
    fn scripted_chat_replays_in_order() {
        let mut s = ScriptedChat::new(["one".to_string(), "two".to_string()]);
        let r = ChatRequest::default();
        assert_eq!(s.complete(&r).unwrap(), "one");
        assert_eq!(s.complete(&r).unwrap(), "two");
        assert!(s.complete(&r).is_err());
        assert_eq!(s.requests.len(), 3);
    }
}
