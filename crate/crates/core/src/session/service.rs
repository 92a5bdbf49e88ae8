use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::Utc;
use thiserror::Error;

use super::store::EventStore;
use super::{EventPayload, MessageOrigin, ReplayError, Session, SessionEvent};
use crate::catalog::{manifest_to_prompt_context, Catalog, HardwareManifest, ValidationReport};
use crate::extract::{ExtractionMethod, GeneratedSketch};
use crate::knobs::{extract_knobs, patch_knob, KnobError, KnobManifest};
use crate::llm::{
    self, build_system_prompt, ChatMessage, Conversation, ModelProvider, ProviderError,
};
use crate::repair::{LoopPolicy, LoopStatus, CORRECTIVE_MESSAGE};
use crate::toolchain::{
    CompileResult, PortInfo, Toolchain, ToolchainError, ToolchainKind, UploadResult,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("{0}")]
    InvalidManifest(ValidationReport),
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("session has no sketch yet")]
    NoSketch,
    #[error("{0}")]
    Rejected(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error(transparent)]
    Knob(#[from] KnobError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("event store: {0}")]
    Store(String),
}

struct Entry {
    session: Session,
    next_seq: u64,
}

/// Owns every session and performs model and toolchain calls on their behalf.
///
/// Calls on one session are serialized by that session's lock; different
/// sessions proceed independently.
pub struct SessionService {
    catalog: Arc<Catalog>,
    provider: Arc<dyn ModelProvider>,
    toolchain: Arc<Toolchain>,
    store: EventStore,
    policy: LoopPolicy,
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
    load_failures: Vec<(PathBuf, ReplayError)>,
}

impl SessionService {
    /// Opens the data directory and rebuilds every stored session from its log.
    pub fn open(
        catalog: Arc<Catalog>,
        provider: Arc<dyn ModelProvider>,
        toolchain: Arc<Toolchain>,
        data_dir: impl AsRef<Path>,
        policy: LoopPolicy,
    ) -> Result<Self, SessionError> {
        policy
            .validate()
            .map_err(|e| SessionError::Rejected(e.to_string()))?;
        let store =
            EventStore::open(data_dir.as_ref()).map_err(|e| SessionError::Store(e.to_string()))?;
        let mut sessions = HashMap::new();
        let mut load_failures = Vec::new();
        for id in store
            .session_ids()
            .map_err(|e| SessionError::Store(e.to_string()))?
        {
            let loaded = store.read(&id).and_then(|events| {
                let session = Session::replay(&events)?;
                Ok((session, events.len() as u64 + 1))
            });
            match loaded {
                Ok((session, next_seq)) => {
                    sessions.insert(id, Arc::new(Mutex::new(Entry { session, next_seq })));
                }
                Err(e) => load_failures.push((store.path(&id), e)),
            }
        }
        Ok(SessionService {
            catalog,
            provider,
            toolchain,
            store,
            policy,
            sessions: RwLock::new(sessions),
            load_failures,
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn toolchain(&self) -> &Toolchain {
        &self.toolchain
    }

    pub fn store(&self) -> &EventStore {
        &self.store
    }

    /// Logs that could not be replayed at startup.
    pub fn load_failures(&self) -> &[(PathBuf, ReplayError)] {
        &self.load_failures
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    fn entry(&self, id: &str) -> Result<Arc<Mutex<Entry>>, SessionError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.to_owned()))
    }

    fn with_entry<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Entry) -> Result<T, SessionError>,
    ) -> Result<T, SessionError> {
        let entry = self.entry(id)?;
        let mut guard = entry
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner());
        f(&mut guard)
    }

    /// Applies an event to the live state, then persists it. A rejected event
    /// is neither applied nor written.
    fn append(&self, entry: &mut Entry, payload: EventPayload) -> Result<(), SessionError> {
        let mut next = entry.session.clone();
        next.apply(&payload).map_err(SessionError::Rejected)?;
        let event = SessionEvent {
            seq: entry.next_seq,
            at: Utc::now(),
            payload,
        };
        self.store
            .append(&entry.session.id, &event)
            .map_err(|e| SessionError::Store(e.to_string()))?;
        entry.session = next;
        entry.next_seq += 1;
        Ok(())
    }

    pub fn create_session(&self, manifest: HardwareManifest) -> Result<Session, SessionError> {
        let prompt_context = manifest_to_prompt_context(&manifest, &self.catalog)
            .map_err(|e| SessionError::InvalidManifest(e.0))?;
        let id = uuid::Uuid::new_v4().to_string();
        let created = SessionEvent {
            seq: 1,
            at: Utc::now(),
            payload: EventPayload::Created {
                session_id: id.clone(),
                policy: self.policy,
            },
        };
        let session = Session::replay([&created]).expect("created event starts a log");
        let mut entry = Entry {
            session,
            next_seq: 1,
        };
        self.store
            .append(&id, &created)
            .map_err(|e| SessionError::Store(e.to_string()))?;
        entry.next_seq = 2;
        self.append(
            &mut entry,
            EventPayload::ManifestSet {
                manifest,
                prompt_context,
            },
        )?;
        let session = entry.session.clone();
        self.sessions
            .write()
            .unwrap()
            .insert(id, Arc::new(Mutex::new(entry)));
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Result<Session, SessionError> {
        self.with_entry(id, |e| Ok(e.session.clone()))
    }

    /// Stored events for a session, in order.
    pub fn events(&self, id: &str) -> Result<Vec<SessionEvent>, SessionError> {
        self.with_entry(id, |_| Ok(self.store.read(id)?))
    }

    /// Rebuilds a session purely from its stored log.
    pub fn replay(&self, id: &str) -> Result<Session, SessionError> {
        let events = self.store.read(id)?;
        Ok(Session::replay(&events)?)
    }

    /// Sends one user turn and records the reply.
    fn exchange(
        &self,
        entry: &mut Entry,
        text: String,
        origin: MessageOrigin,
    ) -> Result<(), SessionError> {
        let session = &entry.session;
        let mut messages = session.conversation.clone();
        if messages.is_empty() {
            messages.push(build_system_prompt(session.prompt_context.as_deref()));
        }
        messages.push(ChatMessage::user(text.clone()));
        let conversation = Conversation::from_messages(messages)
            .map_err(|e| SessionError::Rejected(e.to_string()))?;

        self.append(entry, EventPayload::UserMessage { text, origin })?;
        let reply = llm::send(self.provider.as_ref(), &conversation)?;
        self.append(
            entry,
            EventPayload::ModelReply {
                content: reply.content,
            },
        )?;

        if entry.session.status() == LoopStatus::Extracted {
            let sketch = entry
                .session
                .loop_state
                .current_sketch
                .clone()
                .expect("extracted state carries a sketch");
            let knobs = extract_knobs(&sketch.source);
            let version = format!("v{}", entry.session.sketch_versions.len() + 1);
            self.append(
                entry,
                EventPayload::SketchExtracted {
                    version,
                    sketch,
                    knobs,
                },
            )?;
        }
        Ok(())
    }

    fn sketch_name(id: &str) -> String {
        format!("s{}", id.replace('-', ""))
    }

    /// Compiles the current sketch and records the outcome. Toolchain failures
    /// are logged as a failed result and then returned as errors.
    fn compile_step(&self, entry: &mut Entry) -> Result<(), SessionError> {
        self.append(entry, EventPayload::CompileRequested {})?;
        let sketch = entry
            .session
            .loop_state
            .current_sketch
            .clone()
            .expect("compiling state has a sketch");
        let outcome = self
            .toolchain
            .prepare_sketch_dir(&sketch, &Self::sketch_name(&entry.session.id))
            .and_then(|dir| self.toolchain.compile(&dir));
        match outcome {
            Ok(result) => self.append(entry, EventPayload::CompileResult { result }),
            Err(err) => {
                let result = CompileResult::from_toolchain_error(&err);
                self.append(entry, EventPayload::CompileResult { result })?;
                Err(err.into())
            }
        }
    }

    /// Runs queued repair/corrective exchanges, and with `auto_compile` also
    /// compiles each freshly extracted sketch, until the loop needs the user.
    fn drive(&self, entry: &mut Entry, auto_compile: bool) -> Result<(), SessionError> {
        loop {
            let state = &entry.session.loop_state;
            match state.status {
                LoopStatus::AwaitingModel => {
                    let Some(outgoing) = state.outgoing.clone() else {
                        return Ok(());
                    };
                    let origin = if outgoing.content == CORRECTIVE_MESSAGE {
                        MessageOrigin::Corrective
                    } else {
                        MessageOrigin::Repair
                    };
                    self.exchange(entry, outgoing.content, origin)?;
                }
                LoopStatus::Extracted if auto_compile => {
                    let sketch_ok = state
                        .current_sketch
                        .as_ref()
                        .is_some_and(|s| !s.has_errors());
                    if !sketch_ok {
                        return Ok(());
                    }
                    self.compile_step(entry)?;
                }
                _ => return Ok(()),
            }
        }
    }

    /// Sends a user instruction. The first instruction opens the conversation;
    /// later ones continue it and start a fresh repair run.
    pub fn post_instruction(&self, id: &str, text: &str) -> Result<Session, SessionError> {
        if text.trim().is_empty() {
            return Err(SessionError::EmptyInstruction);
        }
        self.with_entry(id, |entry| {
            if entry.session.status() == LoopStatus::AwaitingModel {
                return Err(SessionError::Rejected(
                    "a model reply is still pending; compile to resume the repair loop".into(),
                ));
            }
            self.exchange(entry, text.to_owned(), MessageOrigin::User)?;
            self.drive(entry, false)?;
            Ok(entry.session.clone())
        })
    }

    fn compile_locked(&self, entry: &mut Entry) -> Result<(), SessionError> {
        if entry.session.sketch_versions.is_empty() {
            return Err(SessionError::NoSketch);
        }
        let status = entry.session.status();
        if status.is_terminal() {
            return Err(SessionError::Rejected(format!(
                "loop is {}; send a new instruction or adjust a knob first",
                status.as_str()
            )));
        }
        if status != LoopStatus::AwaitingModel {
            self.compile_step(entry)?;
        }
        self.drive(entry, true)
    }

    /// Compiles the current sketch; on failure with auto-repair enabled, keeps
    /// exchanging diagnostics with the model and recompiling within budget.
    pub fn compile_current(&self, id: &str) -> Result<Session, SessionError> {
        self.with_entry(id, |entry| {
            self.compile_locked(entry)?;
            Ok(entry.session.clone())
        })
    }

    fn upload_locked(&self, entry: &mut Entry, port: &str) -> Result<(), SessionError> {
        let Some(current) = entry.session.current_version().cloned() else {
            return Err(SessionError::NoSketch);
        };
        if port.trim().is_empty() {
            return Err(SessionError::Rejected("no port given".into()));
        }
        let compiled = entry
            .session
            .loop_state
            .last_result
            .as_ref()
            .is_some_and(|r| r.success);
        if self.toolchain.kind() == ToolchainKind::External && !compiled {
            return Err(SessionError::Rejected(
                "compile the current sketch before uploading".into(),
            ));
        }

        let ports = self.toolchain.list_ports()?;
        let listed = ports.iter().any(|p| p.port == port);
        if listed
            && (entry.session.selected_port.as_deref() != Some(port)
                || entry.session.available_ports != ports)
        {
            self.append(
                entry,
                EventPayload::PortSelected {
                    port: port.to_owned(),
                    available: ports,
                },
            )?;
        }

        self.append(
            entry,
            EventPayload::UploadRequested {
                port: port.to_owned(),
            },
        )?;
        let outcome = self
            .toolchain
            .prepare_sketch_dir(&current.sketch, &Self::sketch_name(&entry.session.id))
            .and_then(|dir| self.toolchain.upload(&dir, port));
        match outcome {
            Ok(result) => self.append(entry, EventPayload::UploadResult { result }),
            Err(err) => {
                let result = UploadResult {
                    success: false,
                    port: port.to_owned(),
                    raw_output: err.to_string(),
                };
                self.append(entry, EventPayload::UploadResult { result })?;
                Err(err.into())
            }
        }
    }

    pub fn upload_current(&self, id: &str, port: &str) -> Result<Session, SessionError> {
        self.with_entry(id, |entry| {
            self.upload_locked(entry, port)?;
            Ok(entry.session.clone())
        })
    }

    /// Compile, then upload only if the loop ended in success.
    pub fn compile_and_upload(&self, id: &str, port: &str) -> Result<Session, SessionError> {
        self.with_entry(id, |entry| {
            self.compile_locked(entry)?;
            if entry.session.status() == LoopStatus::Succeeded {
                self.upload_locked(entry, port)?;
            }
            Ok(entry.session.clone())
        })
    }

    pub fn get_knobs(&self, id: &str) -> Result<KnobManifest, SessionError> {
        self.with_entry(id, |entry| {
            entry
                .session
                .current_version()
                .map(|v| v.knobs.clone())
                .ok_or(SessionError::NoSketch)
        })
    }

    /// Patches one knob into a new sketch version. Never compiles or uploads.
    pub fn set_knob(&self, id: &str, knob_id: &str, value: f64) -> Result<Session, SessionError> {
        self.with_entry(id, |entry| {
            let current = entry
                .session
                .current_version()
                .cloned()
                .ok_or(SessionError::NoSketch)?;
            let (source, knobs) =
                patch_knob(&current.sketch.source, &current.knobs, knob_id, value)?;
            let sketch = GeneratedSketch::from_source(source, ExtractionMethod::KnobPatch);
            let version = format!("v{}", entry.session.sketch_versions.len() + 1);
            self.append(
                entry,
                EventPayload::KnobPatched {
                    knob_id: knob_id.to_owned(),
                    value,
                    version,
                    sketch,
                    knobs,
                },
            )?;
            Ok(entry.session.clone())
        })
    }

    pub fn list_ports(&self) -> Result<Vec<PortInfo>, SessionError> {
        Ok(self.toolchain.list_ports()?)
    }
}
