//! Conversations and model providers.
//!
//! Every conversation starts with the fixed system prompt, optionally followed
//! by a `HARDWARE:` block. Providers turn a conversation ending in a user
//! message into one assistant message. The replay provider answers from a
//! JSON Lines fixture keyed by [`Conversation::digest`].

use std::collections::{HashMap, VecDeque};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SYSTEM_PROMPT: &str = "You are an expert Arduino programmer. Only return valid and complete Arduino code, without any explanations or comments.";

pub const DEFAULT_TIMEOUT_SECS: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// System message carrying the fixed instruction, plus hardware context when given.
pub fn build_system_prompt(context: Option<&str>) -> ChatMessage {
    match context {
        Some(ctx) => ChatMessage::system(format!("{SYSTEM_PROMPT}\n\nHARDWARE:\n{ctx}")),
        None => ChatMessage::system(SYSTEM_PROMPT),
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConversationError {
    #[error("message content is empty")]
    EmptyContent,
    #[error("conversation must start with a system message")]
    MissingSystem,
    #[error("expected a {expected} message, got {got}")]
    OutOfTurn {
        expected: &'static str,
        got: &'static str,
    },
}

/// Append-only message list: one system message, then alternating user and
/// assistant turns starting with the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    messages: Vec<ChatMessage>,
}

impl Conversation {
    pub fn new(system: ChatMessage) -> Result<Self, ConversationError> {
        if system.role != Role::System {
            return Err(ConversationError::MissingSystem);
        }
        if system.content.is_empty() {
            return Err(ConversationError::EmptyContent);
        }
        Ok(Conversation {
            messages: vec![system],
        })
    }

    /// Rebuilds a conversation from stored messages, checking every invariant.
    pub fn from_messages(messages: Vec<ChatMessage>) -> Result<Self, ConversationError> {
        let mut iter = messages.into_iter();
        let mut conv = Conversation::new(iter.next().ok_or(ConversationError::MissingSystem)?)?;
        for m in iter {
            conv.push(m)?;
        }
        Ok(conv)
    }

    fn expected_next(&self) -> Role {
        match self.messages.last().map(|m| m.role) {
            Some(Role::User) => Role::Assistant,
            _ => Role::User,
        }
    }

    pub fn push(&mut self, message: ChatMessage) -> Result<(), ConversationError> {
        if message.content.is_empty() {
            return Err(ConversationError::EmptyContent);
        }
        let expected = self.expected_next();
        if message.role != expected {
            return Err(ConversationError::OutOfTurn {
                expected: expected.as_str(),
                got: message.role.as_str(),
            });
        }
        self.messages.push(message);
        Ok(())
    }

    pub fn push_user(&mut self, content: impl Into<String>) -> Result<(), ConversationError> {
        self.push(ChatMessage::user(content))
    }

    pub fn push_assistant(&mut self, content: impl Into<String>) -> Result<(), ConversationError> {
        self.push(ChatMessage::assistant(content))
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn last(&self) -> &ChatMessage {
        self.messages
            .last()
            .expect("conversation always holds the system message")
    }

    /// SHA-256 over the role/content sequence, lowercase hex.
    ///
    /// Each message contributes its role name, a NUL, the content length as
    /// little-endian u64 and the content bytes, so no two sequences collide by
    /// concatenation.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.messages {
            hasher.update(m.role.as_str().as_bytes());
            hasher.update([0u8]);
            hasher.update((m.content.len() as u64).to_le_bytes());
            hasher.update(m.content.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub credential_env: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub fixture_path: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Extra request fields passed through to the live endpoint untouched.
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}

impl ProviderConfig {
    pub fn replay(fixture_path: impl Into<PathBuf>) -> Self {
        ProviderConfig {
            kind: ProviderKind::Replay,
            endpoint: None,
            credential_env: None,
            model: None,
            fixture_path: Some(fixture_path.into()),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            params: Default::default(),
        }
    }

    pub fn live(endpoint: impl Into<String>, credential_env: impl Into<String>) -> Self {
        ProviderConfig {
            kind: ProviderKind::Live,
            endpoint: Some(endpoint.into()),
            credential_env: Some(credential_env.into()),
            model: None,
            fixture_path: None,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            params: Default::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        match self.kind {
            ProviderKind::Live if self.endpoint.is_none() => Err(ProviderError::Config(
                "live provider requires an endpoint".into(),
            )),
            ProviderKind::Live if self.credential_env.is_none() => Err(ProviderError::Config(
                "live provider requires credential_env".into(),
            )),
            ProviderKind::Replay if self.fixture_path.is_none() => Err(ProviderError::Config(
                "replay provider requires fixture_path".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Instantiates the provider this config describes.
    pub fn build(&self) -> Result<Box<dyn ModelProvider>, ProviderError> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::Live => Box::new(LiveProvider::new(self.clone())),
            ProviderKind::Replay => Box::new(ReplayProvider::new(
                self.fixture_path.clone().expect("validated"),
            )),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("model request timed out")]
    Timeout,
    #[error("authentication failed: {0}")]
    Authentication(String),
    #[error("rate limited by provider")]
    RateLimited { retry_after: Option<Duration> },
    #[error("no recorded response for conversation {digest}")]
    ReplayMiss { digest: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid conversation: {0}")]
    InvalidConversation(String),
    #[error("fixture file: {0}")]
    Fixture(String),
}

impl ProviderError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ProviderError::RateLimited { .. })
    }
}

/// A model backend. Implementations must not retain the conversation.
pub trait ModelProvider: Send + Sync {
    fn complete(&self, conversation: &Conversation) -> Result<ChatMessage, ProviderError>;
}

/// Sends a conversation that ends with a user turn and returns the reply.
pub fn send(
    provider: &dyn ModelProvider,
    conversation: &Conversation,
) -> Result<ChatMessage, ProviderError> {
    if conversation.last().role != Role::User {
        return Err(ProviderError::InvalidConversation(
            "last message must come from the user".into(),
        ));
    }
    let reply = provider.complete(conversation)?;
    if reply.role != Role::Assistant || reply.content.is_empty() {
        return Err(ProviderError::Transport(
            "provider returned no assistant content".into(),
        ));
    }
    Ok(reply)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub digest: String,
    pub response_content: String,
}

fn read_fixture(path: &Path) -> Result<Vec<FixtureEntry>, ProviderError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ProviderError::Fixture(format!("{}: {e}", path.display()))),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                ProviderError::Fixture(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Appends `response` to the fixture under the conversation's digest.
///
/// Re-recording an identical pair leaves the file untouched. When a digest is
/// recorded twice with different content, the later entry wins on replay.
pub fn record_fixture(
    conversation: &Conversation,
    response: &ChatMessage,
    fixture_path: &Path,
) -> Result<(), ProviderError> {
    if response.role != Role::Assistant {
        return Err(ProviderError::Fixture(
            "only assistant replies can be recorded".into(),
        ));
    }
    let entry = FixtureEntry {
        digest: conversation.digest(),
        response_content: response.content.clone(),
    };
    let existing = read_fixture(fixture_path)?;
    if existing.iter().rev().find(|e| e.digest == entry.digest) == Some(&entry) {
        return Ok(());
    }
    let io_err =
        |e: std::io::Error| ProviderError::Fixture(format!("{}: {e}", fixture_path.display()));
    if let Some(dir) = fixture_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(fixture_path)
        .map_err(io_err)?;
    let line = serde_json::to_string(&entry).expect("fixture entry serializes");
    writeln!(file, "{line}").map_err(io_err)?;
    Ok(())
}

/// Answers from a recorded fixture file. The file is re-read on each call so
/// fresh recordings are visible immediately.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    path: PathBuf,
}

impl ReplayProvider {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ReplayProvider { path: path.into() }
    }

    fn entries(&self) -> Result<HashMap<String, String>, ProviderError> {
        Ok(read_fixture(&self.path)?
            .into_iter()
            .map(|e| (e.digest, e.response_content))
            .collect())
    }
}

impl ModelProvider for ReplayProvider {
    fn complete(&self, conversation: &Conversation) -> Result<ChatMessage, ProviderError> {
        let digest = conversation.digest();
        self.entries()?
            .remove(&digest)
            .map(ChatMessage::assistant)
            .ok_or(ProviderError::ReplayMiss { digest })
    }
}

/// Wraps another provider and records every successful exchange.
pub struct RecordingProvider<P> {
    inner: P,
    path: PathBuf,
}

impl<P: ModelProvider> RecordingProvider<P> {
    pub fn new(inner: P, path: impl Into<PathBuf>) -> Self {
        RecordingProvider {
            inner,
            path: path.into(),
        }
    }
}

impl<P: ModelProvider> ModelProvider for RecordingProvider<P> {
    fn complete(&self, conversation: &Conversation) -> Result<ChatMessage, ProviderError> {
        let reply = self.inner.complete(conversation)?;
        record_fixture(conversation, &reply, &self.path)?;
        Ok(reply)
    }
}

/// Hands out pre-scripted outcomes in order, ignoring the conversation.
/// Used to drive sessions in tests and when generating fixtures.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    script: Mutex<VecDeque<Result<String, ProviderError>>>,
}

impl ScriptedProvider {
    pub fn new<I>(script: I) -> Self
    where
        I: IntoIterator<Item = Result<String, ProviderError>>,
    {
        ScriptedProvider {
            script: Mutex::new(script.into_iter().collect()),
        }
    }

    pub fn replies<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(replies.into_iter().map(|s| Ok(s.into())))
    }

    pub fn push(&self, outcome: Result<String, ProviderError>) {
        self.script.lock().unwrap().push_back(outcome);
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap().len()
    }
}

impl ModelProvider for ScriptedProvider {
    fn complete(&self, conversation: &Conversation) -> Result<ChatMessage, ProviderError> {
        match self.script.lock().unwrap().pop_front() {
            Some(outcome) => outcome.map(ChatMessage::assistant),
            None => Err(ProviderError::ReplayMiss {
                digest: conversation.digest(),
            }),
        }
    }
}

/// Chat-completion provider over HTTP.
///
/// Posts `{"model", "messages": [{role, content}], ...params}` with a bearer
/// token and reads `choices[0].message.content` from the response.
#[derive(Debug, Clone)]
pub struct LiveProvider {
    config: ProviderConfig,
}

impl LiveProvider {
    pub fn new(config: ProviderConfig) -> Self {
        LiveProvider { config }
    }

    fn credential(&self) -> Result<String, ProviderError> {
        let var = self
            .config
            .credential_env
            .as_deref()
            .ok_or_else(|| ProviderError::Config("credential_env not set".into()))?;
        match std::env::var(var) {
            Ok(v) if !v.trim().is_empty() => Ok(v),
            _ => Err(ProviderError::Authentication(format!(
                "environment variable {var} is not set"
            ))),
        }
    }

    fn request_body(&self, conversation: &Conversation) -> serde_json::Value {
        let mut body = self.config.params.clone();
        if let Some(model) = &self.config.model {
            body.insert("model".into(), model.clone().into());
        }
        body.insert(
            "messages".into(),
            serde_json::to_value(conversation.messages()).expect("messages serialize"),
        );
        serde_json::Value::Object(body)
    }

    fn post_once(&self, key: &str, body: &serde_json::Value) -> Result<ChatMessage, ProviderError> {
        let endpoint = self.config.endpoint.as_deref().expect("validated");
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(self.config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let resp = client
            .post(endpoint)
            .bearer_auth(key)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    ProviderError::Timeout
                } else {
                    ProviderError::Transport(e.to_string())
                }
            })?;

        let status = resp.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(ProviderError::Authentication(format!(
                "endpoint answered {status}"
            )));
        }
        if status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(ProviderError::RateLimited { retry_after });
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(ProviderError::Transport(format!(
                "endpoint answered {status}: {text}"
            )));
        }
        let json: serde_json::Value = resp.json().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;
        json.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(ChatMessage::assistant)
            .ok_or_else(|| {
                ProviderError::Transport("response has no choices[0].message.content".into())
            })
    }
}

/// Longest we wait on a provider-supplied retry delay before retrying once.
const MAX_RETRY_DELAY: Duration = Duration::from_secs(30);

impl ModelProvider for LiveProvider {
    fn complete(&self, conversation: &Conversation) -> Result<ChatMessage, ProviderError> {
        self.config.validate()?;
        // Fails before any network traffic when the key is missing.
        let key = self.credential()?;
        let body = self.request_body(conversation);
        match self.post_once(&key, &body) {
            Err(ProviderError::RateLimited { retry_after }) => {
                let delay = retry_after
                    .unwrap_or(Duration::from_secs(1))
                    .min(MAX_RETRY_DELAY);
                std::thread::sleep(delay);
                self.post_once(&key, &body)
            }
            other => other,
        }
    }
}
