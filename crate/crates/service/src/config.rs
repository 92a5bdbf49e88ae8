use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Deserialize;
use sketchsmith_core::llm::ProviderConfig;
use sketchsmith_core::{Catalog, LoopPolicy, SessionService, Toolchain, ToolchainConfig};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
}

fn default_bind() -> String {
    DEFAULT_BIND.to_owned()
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: default_bind(),
        }
    }
}

/// Service configuration, read from TOML.
///
/// Relative paths are resolved against the directory holding the config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub data_dir: PathBuf,
    /// Module catalog document; the built-in catalog when absent.
    #[serde(default)]
    pub catalog: Option<PathBuf>,
    pub provider: ProviderConfig,
    pub toolchain: ToolchainConfig,
    #[serde(default)]
    pub policy: LoopPolicy,
    #[serde(default)]
    pub server: ServerConfig,
}

impl Config {
    pub fn parse(text: &str, base: &Path) -> Result<Config> {
        let mut config: Config = toml::from_str(text).context("invalid config")?;
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::parse(&text, base).with_context(|| format!("in {}", path.display()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.toolchain.work_root);
        if let Some(p) = self.catalog.as_mut() {
            fix(p);
        }
        if let Some(p) = self.provider.fixture_path.as_mut() {
            fix(p);
        }
    }

    pub fn load_catalog(&self) -> Result<Catalog> {
        match &self.catalog {
            None => Ok(Catalog::builtin()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                text.parse()
                    .with_context(|| format!("catalog {}", path.display()))
            }
        }
    }

    /// Opens the session service this config describes.
    pub fn open_service(&self) -> Result<SessionService> {
        let provider = self.provider.build().context("provider")?;
        let toolchain = Toolchain::new(self.toolchain.clone()).context("toolchain")?;
        let service = SessionService::open(
            Arc::new(self.load_catalog()?),
            Arc::from(provider),
            Arc::new(toolchain),
            &self.data_dir,
            self.policy,
        )
        .context("opening session store")?;
        for (path, err) in service.load_failures() {
            tracing::warn!("skipping {}: {err}", path.display());
        }
        Ok(service)
    }
}
