#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use sketchsmith_core::catalog::{Catalog, HardwareManifest};
use sketchsmith_core::llm::ModelProvider;
use sketchsmith_core::repair::LoopPolicy;
use sketchsmith_core::session::{Session, SessionService};
use sketchsmith_core::toolchain::{Toolchain, ToolchainConfig};

pub const CONCEPTS: [&str; 4] = ["guiding_steps", "bake_hero", "pedal_pulse", "fit_fit"];

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn replay_fixture() -> PathBuf {
    fixtures_dir().join("concepts.replay.jsonl")
}

pub struct Concept {
    pub name: String,
    pub manifest: HardwareManifest,
    pub prompt: String,
    /// Scripted model replies, in order. Only used to record the replay fixture.
    pub replies: Vec<String>,
}

pub fn load_concept(name: &str) -> Concept {
    let dir = fixtures_dir().join("concepts").join(name);
    let manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let prompt = std::fs::read_to_string(dir.join("prompt.txt")).unwrap();
    let mut replies = Vec::new();
    for n in 1.. {
        match std::fs::read_to_string(dir.join(format!("reply-{n}.md"))) {
            Ok(text) => replies.push(text.trim_end().to_owned()),
            Err(_) => break,
        }
    }
    Concept {
        name: name.to_owned(),
        manifest,
        prompt,
        replies,
    }
}

pub fn mock_service(
    root: &Path,
    provider: Arc<dyn ModelProvider>,
    policy: LoopPolicy,
) -> SessionService {
    let toolchain = Toolchain::new(ToolchainConfig::mock(root.join("work"))).unwrap();
    SessionService::open(
        Arc::new(Catalog::builtin()),
        provider,
        Arc::new(toolchain),
        root.join("data"),
        policy,
    )
    .unwrap()
}

/// Runs a concept the way a user would: instruction, compile, upload.
pub fn run_concept(service: &SessionService, concept: &Concept) -> Result<Session, String> {
    let id = service
        .create_session(concept.manifest.clone())
        .map_err(|e| e.to_string())?
        .id;
    service
        .post_instruction(&id, &concept.prompt)
        .map_err(|e| format!("{}: {e}", concept.name))?;
    service
        .compile_and_upload(&id, "MOCK0")
        .map_err(|e| format!("{}: {e}", concept.name))
}
