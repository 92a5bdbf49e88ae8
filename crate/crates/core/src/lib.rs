//! Core of sketchsmith: turns plain-language instructions and a declared
//! hardware kit into compiled, uploaded microcontroller sketches.
//!
//! The crate is split by stage:
//!
//! * [`catalog`]: supported boards/modules and user hardware manifests
//! * [`llm`]: conversations and model providers (live, replay, scripted)
//! * [`extract`]: sketch extraction from model replies
//! * [`toolchain`]: compile/upload/port listing and diagnostics parsing
//! * [`repair`]: the compile-repair state machine
//! * [`knobs`]: tunable constants patched in place
//! * [`session`]: event-sourced sessions tying the stages together

pub mod catalog;
pub mod extract;
pub mod knobs;
pub mod llm;
pub mod repair;
pub mod session;
pub mod toolchain;

pub use catalog::{Catalog, HardwareManifest, ValidationReport};
pub use extract::{extract_sketch, GeneratedSketch};
pub use knobs::{extract_knobs, patch_knob, Knob, KnobManifest};
pub use llm::{ChatMessage, Conversation, ModelProvider, ProviderConfig};
pub use repair::{LoopPolicy, LoopState, LoopStatus};
pub use session::{Session, SessionError, SessionEvent, SessionService};
pub use toolchain::{CompileResult, Diagnostic, Toolchain, ToolchainConfig};
