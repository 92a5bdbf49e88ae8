//! Hardware catalog and user manifests.
//!
//! A catalog is a plain-text document of `key: value` records separated by
//! blank lines. The built-in catalog ships as `catalog/default.cat`. A
//! [`HardwareManifest`] names one main board, the modules daisy-chained on its
//! I2C connector, onboard peripherals in use and an optional power module.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Contents of the shipped `catalog/default.cat`.
pub const DEFAULT_CATALOG: &str = include_str!("../catalog/default.cat");

/// Upper bound on [`HardwareManifest::freeform_note`], in characters.
pub const MAX_NOTE_CHARS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleKind {
    Sensor,
    Actuator,
    Main,
    Power,
}

impl ModuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Sensor => "sensor",
            ModuleKind::Actuator => "actuator",
            ModuleKind::Main => "main",
            ModuleKind::Power => "power",
        }
    }
}

impl FromStr for ModuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sensor" => Ok(ModuleKind::Sensor),
            "actuator" => Ok(ModuleKind::Actuator),
            "main" => Ok(ModuleKind::Main),
            "power" => Ok(ModuleKind::Power),
            other => Err(format!("unknown kind `{other}`")),
        }
    }
}

/// How a module connects to the main board.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attachment {
    I2cChain,
    Onboard,
    PowerRail,
}

impl Attachment {
    pub fn as_str(self) -> &'static str {
        match self {
            Attachment::I2cChain => "i2c-chain",
            Attachment::Onboard => "onboard",
            Attachment::PowerRail => "power-rail",
        }
    }
}

impl FromStr for Attachment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "i2c-chain" => Ok(Attachment::I2cChain),
            "onboard" => Ok(Attachment::Onboard),
            "power-rail" => Ok(Attachment::PowerRail),
            other => Err(format!("unknown attachment `{other}`")),
        }
    }
}

/// One catalog entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<String>,
    pub kind: ModuleKind,
    pub attachment: Attachment,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library_hint: Option<String>,
    /// Onboard peripheral ids carried by a main module.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub peripherals: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("catalog parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("catalog schema error: {0}")]
    Schema(String),
}

/// Immutable set of modules, indexed by id. Order follows the source document.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Catalog {
    modules: Vec<ModuleSpec>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.modules == other.modules
    }
}

impl Eq for Catalog {}

const FIELDS: [&str; 8] = [
    "id",
    "name",
    "part",
    "kind",
    "attachment",
    "summary",
    "library_hint",
    "peripherals",
];

#[derive(Default)]
struct RawRecord {
    start_line: usize,
    fields: HashMap<&'static str, (String, usize)>,
}

impl RawRecord {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.fields.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<(String, usize), CatalogError> {
        self.take(key).ok_or_else(|| CatalogError::Parse {
            line: self.start_line,
            message: format!("record is missing required field `{key}`"),
        })
    }

    fn into_spec(mut self) -> Result<ModuleSpec, CatalogError> {
        let (id, id_line) = self.required("id")?;
        if id.chars().any(char::is_whitespace) {
            return Err(CatalogError::Parse {
                line: id_line,
                message: format!("module id `{id}` contains whitespace"),
            });
        }
        let (name, _) = self.required("name")?;
        let (kind, kind_line) = self.required("kind")?;
        let kind = kind
            .parse::<ModuleKind>()
            .map_err(|message| CatalogError::Parse {
                line: kind_line,
                message,
            })?;
        let (attachment, att_line) = self.required("attachment")?;
        let attachment =
            attachment
                .parse::<Attachment>()
                .map_err(|message| CatalogError::Parse {
                    line: att_line,
                    message,
                })?;
        let (summary, _) = self.required("summary")?;
        let part = self.take("part").map(|(v, _)| v);
        let library_hint = self.take("library_hint").map(|(v, _)| v);
        let peripherals = self
            .take("peripherals")
            .map(|(v, _)| {
                v.split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(str::to_owned)
                    .collect()
            })
            .unwrap_or_default();
        Ok(ModuleSpec {
            id,
            name,
            part,
            kind,
            attachment,
            summary,
            library_hint,
            peripherals,
        })
    }
}

impl Catalog {
    /// The shipped default kit.
    pub fn builtin() -> Self {
        DEFAULT_CATALOG
            .parse()
            .expect("shipped default catalog is well-formed")
    }

    /// Builds a catalog from already-parsed entries, enforcing schema rules.
    pub fn from_modules(modules: Vec<ModuleSpec>) -> Result<Self, CatalogError> {
        let mut index = HashMap::with_capacity(modules.len());
        for (i, module) in modules.iter().enumerate() {
            if index.insert(module.id.clone(), i).is_some() {
                return Err(CatalogError::Schema(format!(
                    "duplicate module id `{}`",
                    module.id
                )));
            }
        }

        let mut has_main = false;
        for module in &modules {
            if module.kind == ModuleKind::Main {
                has_main = true;
                if module.attachment != Attachment::Onboard {
                    return Err(CatalogError::Schema(format!(
                        "main module `{}` must use attachment onboard",
                        module.id
                    )));
                }
            } else if !module.peripherals.is_empty() {
                return Err(CatalogError::Schema(format!(
                    "only main modules may declare peripherals (`{}`)",
                    module.id
                )));
            }
            for peripheral in &module.peripherals {
                match index.get(peripheral).map(|&i| &modules[i]) {
                    Some(p)
                        if p.attachment == Attachment::Onboard && p.kind != ModuleKind::Main => {}
                    Some(_) => {
                        return Err(CatalogError::Schema(format!(
                            "peripheral `{peripheral}` of `{}` is not an onboard module",
                            module.id
                        )))
                    }
                    None => {
                        return Err(CatalogError::Schema(format!(
                            "peripheral `{peripheral}` of `{}` is not in the catalog",
                            module.id
                        )))
                    }
                }
            }
        }

        if !has_main {
            if let Some(m) = modules
                .iter()
                .find(|m| m.attachment == Attachment::I2cChain)
            {
                return Err(CatalogError::Schema(format!(
                    "chain module `{}` has no main module to attach to",
                    m.id
                )));
            }
        }

        Ok(Catalog { modules, index })
    }

    pub fn get(&self, id: &str) -> Option<&ModuleSpec> {
        self.index.get(id).map(|&i| &self.modules[i])
    }

    pub fn modules(&self) -> &[ModuleSpec] {
        &self.modules
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn count_kind(&self, kind: ModuleKind) -> usize {
        self.modules.iter().filter(|m| m.kind == kind).count()
    }

    /// Renders the catalog back into the document format accepted by `parse`.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        for (i, m) in self.modules.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("id: {}\nname: {}\n", m.id, m.name));
            if let Some(part) = &m.part {
                out.push_str(&format!("part: {part}\n"));
            }
            out.push_str(&format!(
                "kind: {}\nattachment: {}\n",
                m.kind.as_str(),
                m.attachment.as_str()
            ));
            if !m.peripherals.is_empty() {
                out.push_str(&format!("peripherals: {}\n", m.peripherals.join(", ")));
            }
            out.push_str(&format!("summary: {}\n", m.summary));
            if let Some(hint) = &m.library_hint {
                out.push_str(&format!("library_hint: {hint}\n"));
            }
        }
        out
    }
}

impl FromStr for Catalog {
    type Err = CatalogError;

    fn from_str(doc: &str) -> Result<Self, Self::Err> {
        let mut specs = Vec::new();
        let mut current: Option<RawRecord> = None;

        for (idx, raw_line) in doc.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.trim_end_matches('\r');
            let trimmed = line.trim();
            if trimmed.is_empty() {
                if let Some(record) = current.take() {
                    specs.push(record.into_spec()?);
                }
                continue;
            }
            if trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once(':').ok_or_else(|| CatalogError::Parse {
                line: line_no,
                message: format!("expected `key: value`, found `{trimmed}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let key =
                FIELDS
                    .iter()
                    .copied()
                    .find(|f| *f == key)
                    .ok_or_else(|| CatalogError::Parse {
                        line: line_no,
                        message: format!("unknown field `{key}`"),
                    })?;
            let record = current.get_or_insert_with(|| RawRecord {
                start_line: line_no,
                ..RawRecord::default()
            });
            if value.is_empty() {
                // Blank optional values are the same as omitting the field.
                if matches!(key, "part" | "library_hint" | "peripherals") {
                    continue;
                }
                return Err(CatalogError::Parse {
                    line: line_no,
                    message: format!("field `{key}` is empty"),
                });
            }
            if record
                .fields
                .insert(key, (value.to_owned(), line_no))
                .is_some()
            {
                return Err(CatalogError::Parse {
                    line: line_no,
                    message: format!("field `{key}` repeated within one record"),
                });
            }
        }
        if let Some(record) = current.take() {
            specs.push(record.into_spec()?);
        }

        Catalog::from_modules(specs)
    }
}

/// The user's declared hardware setup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareManifest {
    pub board: String,
    /// Daisy-chain order, nearest to the board first.
    #[serde(default)]
    pub chain: Vec<String>,
    #[serde(default)]
    pub onboard_used: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeform_note: Option<String>,
}

impl HardwareManifest {
    pub fn new(board: impl Into<String>) -> Self {
        HardwareManifest {
            board: board.into(),
            chain: Vec::new(),
            onboard_used: Vec::new(),
            power: None,
            freeform_note: None,
        }
    }

    pub fn with_chain<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.chain = ids.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_onboard<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.onboard_used = ids.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_power(mut self, id: impl Into<String>) -> Self {
        self.power = Some(id.into());
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.freeform_note = Some(note.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FindingSeverity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFinding {
    pub severity: FindingSeverity,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offending_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub findings: Vec<ManifestFinding>,
}

impl ValidationReport {
    fn from_findings(findings: Vec<ManifestFinding>) -> Self {
        let ok = !findings
            .iter()
            .any(|f| f.severity == FindingSeverity::Error);
        ValidationReport { ok, findings }
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let errors: Vec<_> = self
            .findings
            .iter()
            .filter(|x| x.severity == FindingSeverity::Error)
            .map(|x| x.message.as_str())
            .collect();
        if errors.is_empty() {
            write!(f, "manifest is valid")
        } else {
            write!(f, "invalid manifest: {}", errors.join("; "))
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct InvalidManifest(pub ValidationReport);

fn error(code: &str, message: String, id: &str) -> ManifestFinding {
    ManifestFinding {
        severity: FindingSeverity::Error,
        code: code.to_owned(),
        message,
        offending_id: Some(id.to_owned()),
    }
}

/// Checks a manifest against the catalog. Never fails; problems are findings.
pub fn validate_manifest(manifest: &HardwareManifest, catalog: &Catalog) -> ValidationReport {
    let mut findings = Vec::new();

    let board = catalog.get(&manifest.board);
    match board {
        None => findings.push(error(
            "unknown-board",
            format!("board `{}` is not in the catalog", manifest.board),
            &manifest.board,
        )),
        Some(b) if b.kind != ModuleKind::Main => findings.push(error(
            "board-not-main",
            format!(
                "`{}` is a {} module, not a main board",
                b.id,
                b.kind.as_str()
            ),
            &b.id,
        )),
        Some(_) => {}
    }
    let board = board.filter(|b| b.kind == ModuleKind::Main);

    let mut seen = HashSet::new();
    for id in &manifest.chain {
        if !seen.insert(id.as_str()) {
            findings.push(error(
                "duplicate-module",
                format!("module `{id}` appears more than once in the chain"),
                id,
            ));
            continue;
        }
        match catalog.get(id) {
            None => findings.push(error(
                "unknown-module",
                format!("chain module `{id}` is not in the catalog"),
                id,
            )),
            Some(m) if m.attachment != Attachment::I2cChain => findings.push(error(
                "not-chainable",
                format!(
                    "`{id}` attaches via {}, not the I2C chain",
                    m.attachment.as_str()
                ),
                id,
            )),
            Some(_) => {}
        }
    }

    let mut seen = HashSet::new();
    for id in &manifest.onboard_used {
        if !seen.insert(id.as_str()) {
            findings.push(error(
                "duplicate-peripheral",
                format!("onboard peripheral `{id}` listed more than once"),
                id,
            ));
            continue;
        }
        if catalog.get(id).is_none() {
            findings.push(error(
                "unknown-peripheral",
                format!("onboard peripheral `{id}` is not in the catalog"),
                id,
            ));
        } else if let Some(b) = board {
            if !b.peripherals.iter().any(|p| p == id) {
                findings.push(error(
                    "peripheral-not-on-board",
                    format!("`{}` has no onboard peripheral `{id}`", b.id),
                    id,
                ));
            }
        }
    }

    if let Some(id) = &manifest.power {
        match catalog.get(id) {
            None => findings.push(error(
                "unknown-power",
                format!("power module `{id}` is not in the catalog"),
                id,
            )),
            Some(m) if m.kind != ModuleKind::Power => findings.push(error(
                "not-power",
                format!("`{id}` is a {} module, not a power module", m.kind.as_str()),
                id,
            )),
            Some(_) => {}
        }
    }

    if let Some(note) = &manifest.freeform_note {
        let chars = note.chars().count();
        if chars > MAX_NOTE_CHARS {
            findings.push(ManifestFinding {
                severity: FindingSeverity::Error,
                code: "note-too-long".into(),
                message: format!("freeform note has {chars} characters, limit is {MAX_NOTE_CHARS}"),
                offending_id: None,
            });
        }
    }

    ValidationReport::from_findings(findings)
}

fn describe(m: &ModuleSpec) -> String {
    let mut line = format!("{} {}", m.id, m.name);
    let mut extra = Vec::new();
    if let Some(part) = &m.part {
        extra.push(format!("part: {part}"));
    }
    if let Some(hint) = &m.library_hint {
        extra.push(format!("library: {hint}"));
    }
    if !extra.is_empty() {
        line.push_str(&format!(" ({})", extra.join("; ")));
    }
    line
}

/// Canonical hardware description handed to the model.
///
/// Layout: the board line, one `I2C chain N:` line per chained module, an
/// `Onboard:` line, a `Power:` line and finally the note verbatim. Sections
/// with nothing to say are omitted, so a bare board renders as one line.
pub fn manifest_to_prompt_context(
    manifest: &HardwareManifest,
    catalog: &Catalog,
) -> Result<String, InvalidManifest> {
    let report = validate_manifest(manifest, catalog);
    if !report.ok {
        return Err(InvalidManifest(report));
    }
    // Validation guarantees every id below resolves.
    let lookup = |id: &str| catalog.get(id).expect("validated id");

    let mut lines = vec![format!("Board: {}", lookup(&manifest.board).name)];
    for (i, id) in manifest.chain.iter().enumerate() {
        lines.push(format!("I2C chain {}: {}", i + 1, describe(lookup(id))));
    }
    if !manifest.onboard_used.is_empty() {
        let used: Vec<String> = manifest
            .onboard_used
            .iter()
            .map(|id| describe(lookup(id)))
            .collect();
        lines.push(format!("Onboard: {}", used.join(", ")));
    }
    if let Some(id) = &manifest.power {
        lines.push(format!("Power: {}", describe(lookup(id))));
    }
    if let Some(note) = &manifest.freeform_note {
        lines.push(note.clone());
    }
    Ok(lines.join("\n"))
}
