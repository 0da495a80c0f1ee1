//! Text rewriters used by the augmentation steps.
//!
//! [`TemplateRewriter`] is deterministic and offline. [`ExternalRewriter`]
//! talks to an OpenAI-style chat-completions endpoint configured through
//! environment variables. [`CachedRewriter`] memoizes any rewriter on disk,
//! keyed by the template hash, the request inputs, the temperature and the
//! attempt number.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::augment::{template_question, template_step2_reply};

pub const ENV_ENDPOINT: &str = "SVCO_REWRITER_ENDPOINT";
pub const ENV_MODEL: &str = "SVCO_REWRITER_MODEL";
pub const ENV_API_KEY: &str = "SVCO_REWRITER_API_KEY";
pub const DEFAULT_MODEL: &str = "gpt-4o";
pub const TEMPERATURE: f64 = 0.7;

pub const STEP1_SYSTEM: &str = "You are a helpful assistant that generates a natural-sounding instruction prompt for a vision-language scenario. Given two responses about an image: one 'chosen' and one 'rejected', your task is to produce a single instruction or question that encourages the user to naturally reveal the critical differences between the two responses. Focus on attributes that differ (like number, color, position, orientation). The prompt should sound like a normal request someone might ask when wanting more detail about the image. It should not sound overly forced or contrived, and it should not explicitly mention that there are two responses or that differences are being tested. Also, try to vary your phrasing, and do not always start the instruction with 'Could' or 'Can'.";

pub const STEP1_USER: &str = "Chosen response: {ORIGINAL_RESPONSE}
Rejected response: {CONTRAST_RESPONSE}

Generate a single, natural-sounding instruction or question that would prompt a user or model to include the detail of the collar in a natural way. Avoid making the prompt sound forced or unnatural, and do not explicitly mention comparing two descriptions.";

pub const STEP2_SYSTEM: &str = "You are a helpful assistant that revises instruction prompts and their corresponding responses for vision-language scenarios. Given an initial instruction and two responses about an image: one 'chosen' and one 'rejected', your task is to:
1. Revise the instruction to make it sound more natural and conversational and ensure it seamlessly leads to the given responses. Also, try to vary your phrasing, and do not always start the instruction with 'Could' or 'Can'.
2. Rephrase both the chosen and rejected responses to diversify the language without adding or removing any details.
3. Ensure that the differences between the chosen and rejected responses remain highlighted and are consistent with the original responses.

Do not introduce any new information or omit existing details. The revisions should maintain accuracy and ensure coherence between the instruction and responses.";

pub const STEP2_USER: &str = r#"Initial Instruction: {STEP1_GENERATED}
Chosen Response: {ORIGINAL_RESPONSE}
Rejected Response: {CONTRAST_RESPONSE}

Revise the instruction and both responses as described above.

Here are some examples:

1.
Initial Instruction: "What can you tell me about the hair color of the woman who is sweeping the floor?"
Chosen Response: "A blonde-haired woman wearing a white skirt, white shirt, white apron, and black shoes is sweeping the floor."
Rejected Response: "A black-haired woman wearing a white skirt, white shirt, white apron, and black shoes is sweeping the floor."
Revised Instruction: "Describe the woman's hair color and her attire while she's sweeping the floor?"
Revised Chosen Response: "The woman sweeping the floor has blonde hair and is wearing a white skirt, white shirt, white apron, and black shoes."
Revised Rejected Response: "The woman sweeping the floor has black hair and is wearing a white skirt, white shirt, white apron, and black shoes."

2.
Initial Instruction: "Where is the air stunt relative to the snowy mound in the image?"
Chosen Response: "An air stunt is above a snowy mound."
Rejected Response: "An air stunt is below a snowy mound."
Revised Instruction: "What do you notice about the position of the air stunt in relation to the snowy mound in the image?"
Revised Chosen Response: "The air stunt is positioned above the snowy mound."
Revised Rejected Response: "The air stunt is located below the snowy mound."

Now, revise the following instruction and responses:
Initial Instruction: {STEP1_GENERATED}
Chosen Response: {ORIGINAL_RESPONSE}
Rejected Response: {CONTRAST_RESPONSE}

Reply ONLY in the following format and no other text or notes:

Revised Instruction:
Revised Chosen Response:
Revised Rejected Response: "#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    Query,
    Revise,
}

/// Structured inputs alongside the rendered prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub step: Step,
    pub caption_w: String,
    pub caption_l: String,
    pub instruction: Option<String>,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    /// 1-based attempt index; part of the cache key so retries can differ.
    pub attempt: u32,
}

impl RewriteRequest {
    pub fn step1(caption_w: &str, caption_l: &str) -> Self {
        Self {
            step: Step::Query,
            caption_w: caption_w.into(),
            caption_l: caption_l.into(),
            instruction: None,
            system: STEP1_SYSTEM.into(),
            user: STEP1_USER
                .replace("{ORIGINAL_RESPONSE}", caption_w)
                .replace("{CONTRAST_RESPONSE}", caption_l),
            temperature: TEMPERATURE,
            attempt: 1,
        }
    }

    pub fn step2(instruction: &str, caption_w: &str, caption_l: &str) -> Self {
        Self {
            step: Step::Revise,
            caption_w: caption_w.into(),
            caption_l: caption_l.into(),
            instruction: Some(instruction.into()),
            system: STEP2_SYSTEM.into(),
            user: STEP2_USER
                .replace("{STEP1_GENERATED}", instruction)
                .replace("{ORIGINAL_RESPONSE}", caption_w)
                .replace("{CONTRAST_RESPONSE}", caption_l),
            temperature: TEMPERATURE,
            attempt: 1,
        }
    }

    fn template_text(&self) -> (&'static str, &'static str) {
        match self.step {
            Step::Query => (STEP1_SYSTEM, STEP1_USER),
            Step::Revise => (STEP2_SYSTEM, STEP2_USER),
        }
    }

    /// Hex SHA-256 over template hash, inputs, temperature and attempt.
    pub fn cache_key(&self) -> String {
        let (sys, user) = self.template_text();
        let template_hash = Sha256::new()
            .chain_update(sys.as_bytes())
            .chain_update([0u8])
            .chain_update(user.as_bytes())
            .finalize();
        let mut h = Sha256::new();
        h.update(template_hash);
        for part in [
            self.caption_w.as_str(),
            self.caption_l.as_str(),
            self.instruction.as_deref().unwrap_or(""),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.update(self.temperature.to_le_bytes());
        h.update(self.attempt.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewriteError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rewriter misconfigured: {0}")]
    Config(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl RewriteError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, RewriteError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Template,
    ExternalLlm,
}

pub trait Rewriter {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String, RewriteError>;
    fn provenance(&self) -> Provenance;
}

/// Deterministic slot-filling rewriter.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateRewriter;

impl Rewriter for TemplateRewriter {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String, RewriteError> {
        Ok(match req.step {
            Step::Query => template_question(&req.caption_w, &req.caption_l),
            Step::Revise => template_step2_reply(
                req.instruction.as_deref().unwrap_or_default(),
                &req.caption_w,
                &req.caption_l,
            ),
        })
    }

    fn provenance(&self) -> Provenance {
        Provenance::Template
    }
}

/// Chat-completions client. Reads endpoint, model and key from the environment.
#[derive(Debug, Clone)]
pub struct ExternalRewriter {
    pub endpoint: String,
    pub model: String,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 2],
}

impl ExternalRewriter {
    pub fn from_env() -> Result<Self, RewriteError> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| RewriteError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        Ok(Self {
            endpoint,
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.into()),
            api_key: std::env::var(ENV_API_KEY).ok(),
        })
    }

    pub fn request_body(&self, req: &RewriteRequest) -> String {
        serde_json::to_string(&ChatRequest {
            model: &self.model,
            temperature: req.temperature,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &req.system,
                },
                ChatMessage {
                    role: "user",
                    content: &req.user,
                },
            ],
        })
        .expect("serializable request")
    }
}

/// First choice's message content from a chat-completions response body.
pub fn extract_content(body: &str) -> Result<String, RewriteError> {
    let v: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| RewriteError::Transport(format!("response is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| RewriteError::Transport("response has no choices[0].message.content".into()))
}

impl Rewriter for ExternalRewriter {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String, RewriteError> {
        let body = self.request_body(req);
        log::info!("rewriter request to {}: {}", self.endpoint, body);
        let mut call = ureq::post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send(body.as_bytes())
            .map_err(|e| RewriteError::Transport(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| RewriteError::Transport(e.to_string()))?;
        log::info!("rewriter response: {text}");
        extract_content(&text)
    }

    fn provenance(&self) -> Provenance {
        Provenance::ExternalLlm
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    request: RewriteRequest,
    response: String,
}

/// Disk memoization of another rewriter; one JSON file per key.
pub struct CachedRewriter<R> {
    inner: R,
    dir: PathBuf,
}

impl<R: Rewriter> CachedRewriter<R> {
    pub fn new(inner: R, dir: impl Into<PathBuf>) -> Result<Self, RewriteError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| RewriteError::Cache(e.to_string()))?;
        Ok(Self { inner, dir })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }
}

impl<R: Rewriter> Rewriter for CachedRewriter<R> {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String, RewriteError> {
        let key = req.cache_key();
        let path = self.path(&key);
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(entry) = serde_json::from_slice::<CacheEntry>(&bytes) {
                if entry.key == key {
                    return Ok(entry.response);
                }
            }
        }
        let response = self.inner.rewrite(req)?;
        let entry = CacheEntry {
            key,
            request: req.clone(),
            response: response.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&entry).map_err(|e| RewriteError::Cache(e.to_string()))?;
        std::fs::write(&path, bytes).map_err(|e| RewriteError::Cache(e.to_string()))?;
        Ok(response)
    }

    fn provenance(&self) -> Provenance {
        self.inner.provenance()
    }
}

impl<R: Rewriter + ?Sized> Rewriter for &R {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String, RewriteError> {
        (**self).rewrite(req)
    }

    fn provenance(&self) -> Provenance {
        (**self).provenance()
    }
}

impl<R: Rewriter + ?Sized> Rewriter for Box<R> {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String, RewriteError> {
        (**self).rewrite(req)
    }

    fn provenance(&self) -> Provenance {
        (**self).provenance()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct Counting<'a>(&'a Cell<u32>);

    impl Rewriter for Counting<'_> {
        fn rewrite(&self, req: &RewriteRequest) -> Result<String, RewriteError> {
            self.0.set(self.0.get() + 1);
            Ok(format!("reply {}", req.attempt))
        }

        fn provenance(&self) -> Provenance {
            Provenance::ExternalLlm
        }
    }

    #[test]
    fn prompts_are_filled() {
        let r = RewriteRequest::step1("a red cup", "a blue cup");
        assert!(r.user.starts_with("Chosen response: a red cup\nRejected response: a blue cup\n"));
        assert_eq!(r.temperature, 0.7);
        let r = RewriteRequest::step2("What color?", "a red cup", "a blue cup");
        assert!(r.user.contains("Initial Instruction: What color?\nChosen Response: a red cup"));
        assert!(r.user.ends_with("Revised Rejected Response: "));
        assert!(!r.user.contains("{STEP1_GENERATED}"));
    }

    #[test]
    fn cache_key_depends_on_inputs() {
        let a = RewriteRequest::step1("x", "y");
        let mut b = a.clone();
        assert_eq!(a.cache_key(), b.cache_key());
        b.attempt = 2;
        assert_ne!(a.cache_key(), b.cache_key());
        let mut c = a.clone();
        c.temperature = 0.0;
        assert_ne!(a.cache_key(), c.cache_key());
        assert_ne!(a.cache_key(), RewriteRequest::step1("xy", "").cache_key());
    }

    #[test]
    fn cache_serves_repeat_requests() {
        let dir = tempfile::tempdir().unwrap();
        let calls = Cell::new(0);
        let cached = CachedRewriter::new(Counting(&calls), dir.path()).unwrap();
        let req = RewriteRequest::step1("x", "y");
        assert_eq!(cached.rewrite(&req).unwrap(), "reply 1");
        assert_eq!(cached.rewrite(&req).unwrap(), "reply 1");
        assert_eq!(calls.get(), 1);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn external_body_and_content() {
        let ext = ExternalRewriter {
            endpoint: "http://localhost:1/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key: None,
        };
        let body: serde_json::Value =
            serde_json::from_str(&ext.request_body(&RewriteRequest::step1("x", "y"))).unwrap();
        assert_eq!(body["temperature"], 0.7);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][0]["content"], STEP1_SYSTEM);
        let reply = r#"{"choices":[{"message":{"role":"assistant","content":"Where is it?"}}]}"#;
        assert_eq!(extract_content(reply).unwrap(), "Where is it?");
        assert!(extract_content("{}").is_err());
        // Nothing listens on port 1.
        assert!(matches!(
            ext.rewrite(&RewriteRequest::step1("x", "y")),
            Err(RewriteError::Transport(_))
        ));
    }
}
