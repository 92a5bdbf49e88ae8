//! Sessions as a fold over an append-only event log.
//!
//! [`Session::apply`] is the only way session state changes. The service
//! applies each event to the live state before persisting it, and replay runs
//! the same reducer over the stored log, so both paths agree by construction.

mod service;
mod store;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::HardwareManifest;
use crate::extract::GeneratedSketch;
use crate::knobs::KnobManifest;
use crate::llm::{build_system_prompt, ChatMessage};
use crate::repair::{LoopPolicy, LoopState, LoopStatus};
use crate::toolchain::{CompileResult, PortInfo, UploadResult};

pub use service::{SessionError, SessionService};
pub use store::EventStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageOrigin {
    /// Typed by the user.
    User,
    /// Compile diagnostics fed back automatically.
    Repair,
    /// Sent after a reply without code.
    Corrective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "kebab-case")]
pub enum EventPayload {
    Created {
        session_id: String,
        policy: LoopPolicy,
    },
    ManifestSet {
        manifest: HardwareManifest,
        prompt_context: String,
    },
    UserMessage {
        text: String,
        origin: MessageOrigin,
    },
    ModelReply {
        content: String,
    },
    SketchExtracted {
        version: String,
        sketch: GeneratedSketch,
        knobs: KnobManifest,
    },
    CompileRequested {},
    CompileResult {
        result: CompileResult,
    },
    UploadRequested {
        port: String,
    },
    UploadResult {
        result: UploadResult,
    },
    KnobPatched {
        knob_id: String,
        value: f64,
        version: String,
        sketch: GeneratedSketch,
        knobs: KnobManifest,
    },
    PortSelected {
        port: String,
        available: Vec<PortInfo>,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::Created { .. } => "created",
            EventPayload::ManifestSet { .. } => "manifest-set",
            EventPayload::UserMessage { .. } => "user-message",
            EventPayload::ModelReply { .. } => "model-reply",
            EventPayload::SketchExtracted { .. } => "sketch-extracted",
            EventPayload::CompileRequested {} => "compile-requested",
            EventPayload::CompileResult { .. } => "compile-result",
            EventPayload::UploadRequested { .. } => "upload-requested",
            EventPayload::UploadResult { .. } => "upload-result",
            EventPayload::KnobPatched { .. } => "knob-patched",
            EventPayload::PortSelected { .. } => "port-selected",
        }
    }
}

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchVersion {
    pub version: String,
    pub sketch: GeneratedSketch,
    pub knobs: KnobManifest,
}

/// State behind one chat + toolchain panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub manifest: Option<HardwareManifest>,
    pub prompt_context: Option<String>,
    /// Empty until the first exchange; then system prompt followed by turns.
    pub conversation: Vec<ChatMessage>,
    /// User turn sent to the model and not yet answered.
    pub pending_message: Option<String>,
    pub loop_state: LoopState,
    pub sketch_versions: Vec<SketchVersion>,
    pub selected_port: Option<String>,
    pub available_ports: Vec<PortInfo>,
    pub last_upload: Option<UploadResult>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("session log is empty")]
    EmptyLog,
    #[error("corrupt session log at seq {seq}: {reason}")]
    Corrupt { seq: u64, reason: String },
    #[error("session log has a gap: expected seq {expected}, found seq {found}")]
    Gap { expected: u64, found: u64 },
    #[error("event at seq {seq} cannot be applied: {reason}")]
    Rejected { seq: u64, reason: String },
}

impl Session {
    fn created(id: &str, policy: LoopPolicy) -> Self {
        Session {
            id: id.to_owned(),
            manifest: None,
            prompt_context: None,
            conversation: Vec::new(),
            pending_message: None,
            loop_state: LoopState::idle(policy),
            sketch_versions: Vec::new(),
            selected_port: None,
            available_ports: Vec::new(),
            last_upload: None,
        }
    }

    pub fn current_version(&self) -> Option<&SketchVersion> {
        self.sketch_versions.last()
    }

    pub fn status(&self) -> LoopStatus {
        self.loop_state.status
    }

    /// Reducer. Leaves `self` untouched when the event is rejected.
    pub fn apply(&mut self, event: &EventPayload) -> Result<(), String> {
        let mut next = self.clone();
        match event {
            EventPayload::Created { .. } => return Err("session already created".into()),
            EventPayload::ManifestSet {
                manifest,
                prompt_context,
            } => {
                next.manifest = Some(manifest.clone());
                next.prompt_context = Some(prompt_context.clone());
            }
            EventPayload::UserMessage { text, .. } => {
                if text.trim().is_empty() {
                    return Err("empty user message".into());
                }
                next.pending_message = Some(text.clone());
            }
            EventPayload::ModelReply { content } => {
                let pending = next
                    .pending_message
                    .take()
                    .ok_or("model reply without a pending user message")?;
                if next.conversation.is_empty() {
                    next.conversation
                        .push(build_system_prompt(next.prompt_context.as_deref()));
                }
                let reply = ChatMessage::assistant(content.clone());
                next.conversation.push(ChatMessage::user(pending));
                next.conversation.push(reply.clone());
                if next.loop_state.status != LoopStatus::AwaitingModel {
                    next.loop_state = next.loop_state.new_run();
                }
                next.loop_state = next
                    .loop_state
                    .on_model_reply(&reply)
                    .map_err(|e| e.to_string())?;
            }
            EventPayload::SketchExtracted {
                version,
                sketch,
                knobs,
            } => {
                next.sketch_versions.push(SketchVersion {
                    version: version.clone(),
                    sketch: sketch.clone(),
                    knobs: knobs.clone(),
                });
            }
            EventPayload::CompileRequested {} => {
                next.loop_state = next.loop_state.begin_compile().map_err(|e| e.to_string())?;
            }
            EventPayload::CompileResult { result } => {
                next.loop_state = next
                    .loop_state
                    .on_compile_result(result)
                    .map_err(|e| e.to_string())?;
            }
            EventPayload::UploadRequested { .. } => {}
            EventPayload::UploadResult { result } => next.last_upload = Some(result.clone()),
            EventPayload::KnobPatched {
                version,
                sketch,
                knobs,
                ..
            } => {
                next.sketch_versions.push(SketchVersion {
                    version: version.clone(),
                    sketch: sketch.clone(),
                    knobs: knobs.clone(),
                });
                next.loop_state = next.loop_state.with_edited_sketch(sketch.clone());
            }
            EventPayload::PortSelected { port, available } => {
                if !available.iter().any(|p| &p.port == port) {
                    return Err(format!("port {port} is not among the listed ports"));
                }
                next.selected_port = Some(port.clone());
                next.available_ports = available.clone();
            }
        }
        *self = next;
        Ok(())
    }

    /// Rebuilds a session from its full event sequence.
    pub fn replay<'a, I>(events: I) -> Result<Session, ReplayError>
    where
        I: IntoIterator<Item = &'a SessionEvent>,
    {
        let mut iter = events.into_iter();
        let first = iter.next().ok_or(ReplayError::EmptyLog)?;
        if first.seq != 1 {
            return Err(ReplayError::Gap {
                expected: 1,
                found: first.seq,
            });
        }
        let mut session = match &first.payload {
            EventPayload::Created { session_id, policy } => Session::created(session_id, *policy),
            other => {
                return Err(ReplayError::Rejected {
                    seq: 1,
                    reason: format!("log starts with {} instead of created", other.kind()),
                })
            }
        };
        for (expected, event) in (2..).zip(iter) {
            if event.seq != expected {
                return Err(ReplayError::Gap {
                    expected,
                    found: event.seq,
                });
            }
            session
                .apply(&event.payload)
                .map_err(|reason| ReplayError::Rejected {
                    seq: event.seq,
                    reason,
                })?;
        }
        Ok(session)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(seq: u64, payload: EventPayload) -> SessionEvent {
        SessionEvent {
            seq,
            at: Utc::now(),
            payload,
        }
    }

    #[test]
    fn event_json_shape() {
        let e = ev(
            3,
            EventPayload::UploadRequested {
                port: "MOCK0".into(),
            },
        );
        let json = serde_json::to_value(&e).unwrap();
        assert_eq!(json["seq"], 3);
        assert_eq!(json["kind"], "upload-requested");
        assert_eq!(json["payload"]["port"], "MOCK0");
        let back: SessionEvent = serde_json::from_value(json).unwrap();
        assert_eq!(back, e);
        let e = ev(4, EventPayload::CompileRequested {});
        let back: SessionEvent = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn replay_guards() {
        assert_eq!(Session::replay(&[]), Err(ReplayError::EmptyLog));
        let created = ev(
            1,
            EventPayload::Created {
                session_id: "s".into(),
                policy: LoopPolicy::default(),
            },
        );
        let msg = |seq| {
            ev(
                seq,
                EventPayload::UserMessage {
                    text: "hi".into(),
                    origin: MessageOrigin::User,
                },
            )
        };
        let log = vec![created.clone(), msg(2), msg(3), msg(5)];
        let err = Session::replay(&log).unwrap_err();
        assert_eq!(
            err,
            ReplayError::Gap {
                expected: 4,
                found: 5
            }
        );
        assert!(err.to_string().contains("seq 4"));
        let bad = vec![
            created,
            ev(
                2,
                EventPayload::ModelReply {
                    content: "x".into(),
                },
            ),
        ];
        assert!(matches!(
            Session::replay(&bad),
            Err(ReplayError::Rejected { seq: 2, .. })
        ));
    }

    #[test]
    fn reply_builds_conversation_and_run() {
        let mut s = Session::created("s", LoopPolicy::default());
        s.apply(&EventPayload::ManifestSet {
            manifest: HardwareManifest::new("DeneyapG"),
            prompt_context: "Board: Deneyap G".into(),
        })
        .unwrap();
        s.apply(&EventPayload::UserMessage {
            text: "blink".into(),
            origin: MessageOrigin::User,
        })
        .unwrap();
        assert!(s.conversation.is_empty());
        s.apply(&EventPayload::ModelReply {
            content: "```\nvoid setup(){}\nvoid loop(){}\n```".into(),
        })
        .unwrap();
        assert_eq!(s.conversation.len(), 3);
        assert!(s.conversation[0]
            .content
            .ends_with("HARDWARE:\nBoard: Deneyap G"));
        assert_eq!(s.status(), LoopStatus::Extracted);
        assert_eq!(s.loop_state.iteration, 1);
        let before = s.clone();
        assert!(s
            .apply(&EventPayload::ModelReply {
                content: "again".into()
            })
            .is_err());
        assert_eq!(s, before);
    }
}
