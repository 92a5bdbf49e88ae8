//! Generate, extract, compile and feed errors back, as a pure state machine.
//!
//! Every transition takes `&self` and returns a new [`LoopState`], so a
//! rejected event leaves the caller's state untouched. Callers (the session
//! layer) perform the actual model and toolchain calls and feed the outcomes
//! back as events.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{extract_sketch, GeneratedSketch};
use crate::llm::{build_system_prompt, ChatMessage, Conversation, ConversationError, Role};
use crate::toolchain::{CompileResult, DiagnosticSeverity};

pub const DIAGNOSTICS_HEADER: &str = "The code failed to compile with these errors:";
pub const DIAGNOSTICS_FOOTER: &str = "Return the corrected, complete code only.";
pub const CORRECTIVE_MESSAGE: &str = "Return only complete code.";
pub const MAX_RENDERED_ERRORS: usize = 10;
pub const MAX_RAW_LINES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopPolicy {
    pub max_auto_iterations: u32,
    pub auto_repair: bool,
}

impl Default for LoopPolicy {
    fn default() -> Self {
        LoopPolicy {
            max_auto_iterations: 3,
            auto_repair: true,
        }
    }
}

impl LoopPolicy {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.max_auto_iterations == 0 {
            return Err(LoopError::InvalidPolicy);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopStatus {
    Idle,
    AwaitingModel,
    Extracted,
    Compiling,
    /// The toolchain could not run; the sketch was not judged.
    FailedCompile,
    Succeeded,
    FailedFinal,
    AwaitingUser,
}

impl LoopStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, LoopStatus::Succeeded | LoopStatus::FailedFinal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LoopStatus::Idle => "idle",
            LoopStatus::AwaitingModel => "awaiting-model",
            LoopStatus::Extracted => "extracted",
            LoopStatus::Compiling => "compiling",
            LoopStatus::FailedCompile => "failed-compile",
            LoopStatus::Succeeded => "succeeded",
            LoopStatus::FailedFinal => "failed-final",
            LoopStatus::AwaitingUser => "awaiting-user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoopEvent {
    ModelReply(ChatMessage),
    CompileStarted,
    CompileFinished(CompileResult),
}

impl LoopEvent {
    fn name(&self) -> &'static str {
        match self {
            LoopEvent::ModelReply(_) => "model-reply",
            LoopEvent::CompileStarted => "compile-started",
            LoopEvent::CompileFinished(_) => "compile-result",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoopError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("max_auto_iterations must be at least 1")]
    InvalidPolicy,
    #[error("{event} not accepted while {}", status.as_str())]
    Rejected {
        status: LoopStatus,
        event: &'static str,
    },
    #[error("compile succeeded; nothing to repair")]
    NotAFailure,
    #[error(transparent)]
    Conversation(#[from] ConversationError),
}

/// One run of the loop.
///
/// `iteration` counts replies that contained code; `model_calls` counts every
/// reply and is what the iteration budget is charged against, so prose-only
/// replies cannot keep the loop alive forever.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopState {
    pub status: LoopStatus,
    pub iteration: u32,
    pub model_calls: u32,
    pub policy: LoopPolicy,
    pub current_sketch: Option<GeneratedSketch>,
    pub last_result: Option<CompileResult>,
    /// User message the caller should send next, when awaiting the model.
    pub outgoing: Option<ChatMessage>,
}

/// Opens a conversation: system prompt (with hardware context) plus the
/// user's instruction.
pub fn start(
    instruction: &str,
    manifest_context: Option<&str>,
    policy: LoopPolicy,
) -> Result<(LoopState, Conversation), LoopError> {
    policy.validate()?;
    if instruction.trim().is_empty() {
        return Err(LoopError::EmptyInstruction);
    }
    let mut conversation = Conversation::new(build_system_prompt(manifest_context))?;
    conversation.push_user(instruction)?;
    Ok((LoopState::idle(policy).new_run(), conversation))
}

/// Renders a failed compile as the next user turn.
///
/// Lists up to [`MAX_RENDERED_ERRORS`] error diagnostics as `line L: message`
/// (first line of the message only). When the toolchain produced no error
/// diagnostics at all, the last [`MAX_RAW_LINES`] non-empty output lines are
/// embedded instead.
pub fn diagnostics_to_prompt(result: &CompileResult) -> Result<ChatMessage, LoopError> {
    if result.success {
        return Err(LoopError::NotAFailure);
    }
    let errors: Vec<_> = result
        .diagnostics
        .iter()
        .filter(|d| d.severity == DiagnosticSeverity::Error)
        .collect();

    let mut lines = vec![DIAGNOSTICS_HEADER.to_owned()];
    if errors.is_empty() {
        let raw: Vec<&str> = result
            .raw_output
            .lines()
            .filter(|l| !l.trim().is_empty())
            .collect();
        let tail = &raw[raw.len().saturating_sub(MAX_RAW_LINES)..];
        lines.extend(tail.iter().map(|l| l.to_string()));
    } else {
        for d in errors.iter().take(MAX_RENDERED_ERRORS) {
            let first = d.message.lines().next().unwrap_or_default();
            lines.push(format!("line {}: {first}", d.line));
        }
        if errors.len() > MAX_RENDERED_ERRORS {
            lines.push(format!(
                "…and {} more errors.",
                errors.len() - MAX_RENDERED_ERRORS
            ));
        }
    }
    lines.push(DIAGNOSTICS_FOOTER.to_owned());
    Ok(ChatMessage::user(lines.join("\n")))
}

impl LoopState {
    pub fn idle(policy: LoopPolicy) -> Self {
        LoopState {
            status: LoopStatus::Idle,
            iteration: 0,
            model_calls: 0,
            policy,
            current_sketch: None,
            last_result: None,
            outgoing: None,
        }
    }

    /// Fresh run waiting on the model. The current sketch carries over so the
    /// session keeps showing it until new code arrives.
    pub fn new_run(&self) -> LoopState {
        LoopState {
            status: LoopStatus::AwaitingModel,
            iteration: 0,
            model_calls: 0,
            policy: self.policy,
            current_sketch: self.current_sketch.clone(),
            last_result: None,
            outgoing: None,
        }
    }

    /// Swaps in an edited sketch (knob patch) ready to compile. Counters are kept.
    pub fn with_edited_sketch(&self, sketch: GeneratedSketch) -> LoopState {
        LoopState {
            status: LoopStatus::Extracted,
            current_sketch: Some(sketch),
            last_result: None,
            outgoing: None,
            ..self.clone()
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.status.is_terminal()
    }

    fn budget_exhausted(&self) -> bool {
        self.model_calls >= self.policy.max_auto_iterations
    }

    fn reject(&self, event: &'static str) -> LoopError {
        LoopError::Rejected {
            status: self.status,
            event,
        }
    }

    pub fn apply(&self, event: &LoopEvent) -> Result<LoopState, LoopError> {
        match event {
            LoopEvent::ModelReply(reply) => self.on_model_reply(reply),
            LoopEvent::CompileStarted => self.begin_compile(),
            LoopEvent::CompileFinished(result) => self.on_compile_result(result),
        }
    }

    pub fn on_model_reply(&self, reply: &ChatMessage) -> Result<LoopState, LoopError> {
        if self.status != LoopStatus::AwaitingModel || reply.role != Role::Assistant {
            return Err(self.reject(LoopEvent::ModelReply(reply.clone()).name()));
        }
        let mut next = self.clone();
        next.model_calls += 1;
        next.outgoing = None;
        match extract_sketch(&reply.content) {
            Ok(sketch) => {
                next.status = LoopStatus::Extracted;
                next.iteration += 1;
                next.current_sketch = Some(sketch);
            }
            Err(_) if next.budget_exhausted() => next.status = LoopStatus::FailedFinal,
            Err(_) => next.outgoing = Some(ChatMessage::user(CORRECTIVE_MESSAGE)),
        }
        Ok(next)
    }

    pub fn begin_compile(&self) -> Result<LoopState, LoopError> {
        let ready = matches!(
            self.status,
            LoopStatus::Extracted | LoopStatus::AwaitingUser | LoopStatus::FailedCompile
        );
        if !ready || self.current_sketch.is_none() {
            return Err(self.reject("compile-started"));
        }
        Ok(LoopState {
            status: LoopStatus::Compiling,
            ..self.clone()
        })
    }

    pub fn on_compile_result(&self, result: &CompileResult) -> Result<LoopState, LoopError> {
        if self.status != LoopStatus::Compiling {
            return Err(self.reject("compile-result"));
        }
        let mut next = self.clone();
        next.last_result = Some(result.clone());
        next.status = if result.success {
            LoopStatus::Succeeded
        } else if result.toolchain_error.is_some() {
            LoopStatus::FailedCompile
        } else if self.budget_exhausted() {
            LoopStatus::FailedFinal
        } else if self.policy.auto_repair {
            next.outgoing = Some(diagnostics_to_prompt(result)?);
            LoopStatus::AwaitingModel
        } else {
            LoopStatus::AwaitingUser
        };
        Ok(next)
    }
}
