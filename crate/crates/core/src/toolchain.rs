//! Board toolchain: sketch directories, compile, upload, port listing and
//! GCC-style diagnostic parsing.
//!
//! The external kind shells out to configurable command templates (by default
//! `arduino-cli`). The mock kind is deterministic: a sketch fails to compile
//! iff it contains `#error`, and only port `MOCK0` accepts uploads.

use std::collections::HashSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::GeneratedSketch;

pub const DEFAULT_COMPILE_TIMEOUT_SECS: u64 = 120;
pub const MOCK_PORT: &str = "MOCK0";
pub const MOCK_BOARD: &str = "Mock Board";
const MOCK_ERROR_MARKER: &str = "#error";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolchainKind {
    External,
    Mock,
}

fn default_compile() -> Vec<String> {
    [
        "arduino-cli",
        "compile",
        "--fqbn",
        "{board_id}",
        "--build-path",
        "{build_dir}",
        "{sketch_dir}",
    ]
    .map(String::from)
    .to_vec()
}

fn default_upload() -> Vec<String> {
    [
        "arduino-cli",
        "upload",
        "--fqbn",
        "{board_id}",
        "--port",
        "{port}",
        "{sketch_dir}",
    ]
    .map(String::from)
    .to_vec()
}

fn default_list_ports() -> Vec<String> {
    ["arduino-cli", "board", "list"].map(String::from).to_vec()
}

fn default_timeout() -> u64 {
    DEFAULT_COMPILE_TIMEOUT_SECS
}

fn default_work_root() -> PathBuf {
    PathBuf::from("work")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolchainConfig {
    pub kind: ToolchainKind,
    #[serde(default = "default_compile")]
    pub compile_command: Vec<String>,
    #[serde(default = "default_upload")]
    pub upload_command: Vec<String>,
    #[serde(default = "default_list_ports")]
    pub list_ports_command: Vec<String>,
    /// Fully qualified board name. Required for the external kind; no default.
    #[serde(default)]
    pub board_id: Option<String>,
    #[serde(default = "default_work_root")]
    pub work_root: PathBuf,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl ToolchainConfig {
    pub fn mock(work_root: impl Into<PathBuf>) -> Self {
        ToolchainConfig {
            kind: ToolchainKind::Mock,
            compile_command: default_compile(),
            upload_command: default_upload(),
            list_ports_command: default_list_ports(),
            board_id: None,
            work_root: work_root.into(),
            timeout_secs: DEFAULT_COMPILE_TIMEOUT_SECS,
        }
    }

    pub fn external(work_root: impl Into<PathBuf>, board_id: impl Into<String>) -> Self {
        ToolchainConfig {
            kind: ToolchainKind::External,
            board_id: Some(board_id.into()),
            ..Self::mock(work_root)
        }
    }

    pub fn validate(&self) -> Result<(), ToolchainError> {
        if self.kind == ToolchainKind::Mock {
            return Ok(());
        }
        if self.board_id.as_deref().is_none_or(str::is_empty) {
            return Err(ToolchainError::Config(
                "external toolchain requires board_id".into(),
            ));
        }
        let check = |name: &str, template: &[String], required: &[&str]| {
            if template.is_empty() {
                return Err(ToolchainError::Config(format!("{name} command is empty")));
            }
            for placeholder in required {
                if !template.iter().any(|a| a.contains(placeholder)) {
                    return Err(ToolchainError::Config(format!(
                        "{name} command lacks placeholder {placeholder}"
                    )));
                }
            }
            Ok(())
        };
        check(
            "compile",
            &self.compile_command,
            &["{sketch_dir}", "{board_id}"],
        )?;
        check(
            "upload",
            &self.upload_command,
            &["{sketch_dir}", "{board_id}", "{port}"],
        )?;
        check("list_ports", &self.list_ports_command, &[])?;
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ToolchainError {
    #[error("toolchain configuration: {0}")]
    Config(String),
    #[error("sketch name `{0}` must match [A-Za-z][A-Za-z0-9_]*")]
    InvalidName(String),
    #[error("toolchain command `{0}` not found")]
    NotFound(String),
    #[error("toolchain command timed out after {0} s")]
    Timeout(u64),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagnosticSeverity {
    Error,
    Warning,
    Note,
    /// A line that did not match the diagnostic pattern, kept verbatim.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub file: String,
    /// 1-based; 0 for raw lines.
    pub line: u32,
    pub column: Option<u32>,
    pub severity: DiagnosticSeverity,
    pub message: String,
}

impl Diagnostic {
    pub fn raw(line: impl Into<String>) -> Self {
        Diagnostic {
            file: String::new(),
            line: 0,
            column: None,
            severity: DiagnosticSeverity::Raw,
            message: line.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileResult {
    pub success: bool,
    pub diagnostics: Vec<Diagnostic>,
    pub raw_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_path: Option<PathBuf>,
    /// Set when the toolchain itself could not run; the sketch was not judged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toolchain_error: Option<String>,
}

impl CompileResult {
    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics
            .iter()
            .filter(|d| d.severity == DiagnosticSeverity::Error)
    }

    /// A failed result standing in for a toolchain that could not be run.
    pub fn from_toolchain_error(err: &ToolchainError) -> Self {
        CompileResult {
            success: false,
            diagnostics: Vec::new(),
            raw_output: err.to_string(),
            artifact_path: None,
            toolchain_error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadResult {
    pub success: bool,
    pub port: String,
    pub raw_output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortInfo {
    pub port: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub board_hint: Option<String>,
}

fn diagnostic_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^(?P<file>.+?):(?P<line>\d+)(?::(?P<col>\d+))?:\s*(?P<sev>fatal error|error|warning|note):\s?(?P<msg>.*)$")
            .unwrap()
    })
}

fn parse_diagnostic_line(line: &str) -> Option<Diagnostic> {
    let caps = diagnostic_re().captures(line)?;
    let line_no: u32 = caps["line"].parse().ok().filter(|&n| n > 0)?;
    let column = caps
        .name("col")
        .and_then(|c| c.as_str().parse::<u32>().ok())
        .filter(|&c| c > 0);
    let severity = match caps["sev"].to_ascii_lowercase().as_str() {
        "warning" => DiagnosticSeverity::Warning,
        "note" => DiagnosticSeverity::Note,
        _ => DiagnosticSeverity::Error,
    };
    Some(Diagnostic {
        file: caps["file"].to_owned(),
        line: line_no,
        column,
        severity,
        message: caps["msg"].to_owned(),
    })
}

/// Parses compiler output in the `FILE:LINE[:COL]: SEVERITY: MESSAGE` form.
///
/// Non-matching lines directly after a diagnostic are appended to its message
/// on new lines; a blank line ends that run. Any other line becomes a raw
/// diagnostic holding the line verbatim.
pub fn parse_diagnostics(raw_output: &str) -> Vec<Diagnostic> {
    let mut out: Vec<Diagnostic> = Vec::new();
    let mut continuing = false;
    for line in raw_output.split('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continuing = false;
            continue;
        }
        if let Some(d) = parse_diagnostic_line(line) {
            out.push(d);
            continuing = true;
        } else if continuing {
            let last = out.last_mut().expect("continuation follows a diagnostic");
            last.message.push('\n');
            last.message.push_str(line);
        } else {
            out.push(Diagnostic::raw(line));
        }
    }
    out
}

/// Parses port listing output: one port per line, first token is the port,
/// the rest of the line (if any) is a board hint.
pub fn parse_port_list(output: &str) -> Vec<PortInfo> {
    output
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        // arduino-cli prints a column header and a "no boards" notice.
        .filter(|l| !l.starts_with("Port ") && !l.starts_with("No boards found"))
        .map(|l| {
            let mut parts = l.splitn(2, char::is_whitespace);
            let port = parts.next().unwrap_or_default().to_owned();
            let board_hint = parts
                .next()
                .map(str::trim)
                .filter(|h| !h.is_empty())
                .map(str::to_owned);
            PortInfo { port, board_hint }
        })
        .collect()
}

fn valid_sketch_name(name: &str) -> bool {
    let mut chars = name.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Exclusive claims on serial ports. Dropping a [`PortLease`] releases it.
#[derive(Debug, Clone, Default)]
pub struct PortLeases {
    held: Arc<Mutex<HashSet<String>>>,
}

#[derive(Debug)]
pub struct PortLease {
    port: String,
    held: Arc<Mutex<HashSet<String>>>,
}

impl PortLeases {
    pub fn try_acquire(&self, port: &str) -> Option<PortLease> {
        let mut held = self.held.lock().unwrap();
        held.insert(port.to_owned()).then(|| PortLease {
            port: port.to_owned(),
            held: Arc::clone(&self.held),
        })
    }

    pub fn is_held(&self, port: &str) -> bool {
        self.held.lock().unwrap().contains(port)
    }
}

impl Drop for PortLease {
    fn drop(&mut self) {
        self.held.lock().unwrap().remove(&self.port);
    }
}

struct CommandOutput {
    success: bool,
    output: String,
}

fn substitute(template: &[String], vars: &[(&str, &str)]) -> Vec<String> {
    template
        .iter()
        .map(|arg| {
            vars.iter().fold(arg.clone(), |acc, (key, value)| {
                acc.replace(&format!("{{{key}}}"), value)
            })
        })
        .collect()
}

fn run_command(argv: &[String], timeout: Duration) -> Result<CommandOutput, ToolchainError> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| ToolchainError::Config("empty command".into()))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ToolchainError::NotFound(program.clone()),
            _ => ToolchainError::Io(format!("{program}: {e}")),
        })?;

    fn drain<R: Read + Send + 'static>(mut r: R) -> thread::JoinHandle<Vec<u8>> {
        thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = r.read_to_end(&mut buf);
            buf
        })
    }
    let stdout = drain(child.stdout.take().expect("piped"));
    let stderr = drain(child.stderr.take().expect("piped"));

    let started = Instant::now();
    let status = loop {
        if let Some(status) = child
            .try_wait()
            .map_err(|e| ToolchainError::Io(e.to_string()))?
        {
            break status;
        }
        if started.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ToolchainError::Timeout(timeout.as_secs()));
        }
        thread::sleep(Duration::from_millis(20));
    };

    let mut output = String::from_utf8_lossy(&stdout.join().unwrap_or_default()).into_owned();
    let err = String::from_utf8_lossy(&stderr.join().unwrap_or_default()).into_owned();
    if !err.is_empty() {
        if !output.is_empty() && !output.ends_with('\n') {
            output.push('\n');
        }
        output.push_str(&err);
    }
    if !status.success() && output.trim().is_empty() {
        output = format!("{program} exited with {status}");
    }
    Ok(CommandOutput {
        success: status.success(),
        output,
    })
}

/// Toolchain front end shared by all sessions.
#[derive(Debug, Clone)]
pub struct Toolchain {
    config: ToolchainConfig,
    leases: PortLeases,
}

impl Toolchain {
    pub fn new(config: ToolchainConfig) -> Result<Self, ToolchainError> {
        config.validate()?;
        Ok(Toolchain {
            config,
            leases: PortLeases::default(),
        })
    }

    pub fn config(&self) -> &ToolchainConfig {
        &self.config
    }

    pub fn kind(&self) -> ToolchainKind {
        self.config.kind
    }

    pub fn leases(&self) -> &PortLeases {
        &self.leases
    }

    fn board_id(&self) -> &str {
        self.config.board_id.as_deref().unwrap_or_default()
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.config.timeout_secs)
    }

    /// Writes `work_root/name/name.ino`, replacing any previous contents.
    pub fn prepare_sketch_dir(
        &self,
        sketch: &GeneratedSketch,
        name: &str,
    ) -> Result<PathBuf, ToolchainError> {
        if !valid_sketch_name(name) {
            return Err(ToolchainError::InvalidName(name.to_owned()));
        }
        let dir = self.config.work_root.join(name);
        let io = |e: std::io::Error| ToolchainError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(&dir).map_err(io)?;
        fs::write(dir.join(format!("{name}.ino")), &sketch.source).map_err(io)?;
        Ok(dir)
    }

    fn sketch_file(sketch_dir: &Path) -> Result<PathBuf, ToolchainError> {
        let name = sketch_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| {
                ToolchainError::Io(format!("bad sketch dir {}", sketch_dir.display()))
            })?;
        Ok(sketch_dir.join(format!("{name}.ino")))
    }

    pub fn compile(&self, sketch_dir: &Path) -> Result<CompileResult, ToolchainError> {
        match self.config.kind {
            ToolchainKind::Mock => self.mock_compile(sketch_dir),
            ToolchainKind::External => self.external_compile(sketch_dir),
        }
    }

    fn mock_compile(&self, sketch_dir: &Path) -> Result<CompileResult, ToolchainError> {
        let file = Self::sketch_file(sketch_dir)?;
        let source = fs::read_to_string(&file)
            .map_err(|e| ToolchainError::Io(format!("{}: {e}", file.display())))?;
        let file_text = file.display().to_string();
        let diagnostics: Vec<Diagnostic> = source
            .lines()
            .enumerate()
            .filter(|(_, l)| l.contains(MOCK_ERROR_MARKER))
            .map(|(i, l)| {
                let after = &l[l.find(MOCK_ERROR_MARKER).unwrap() + MOCK_ERROR_MARKER.len()..];
                let message = after.trim().trim_matches('"').trim();
                Diagnostic {
                    file: file_text.clone(),
                    line: i as u32 + 1,
                    column: None,
                    severity: DiagnosticSeverity::Error,
                    message: if message.is_empty() {
                        "#error".into()
                    } else {
                        message.to_owned()
                    },
                }
            })
            .collect();
        let raw_output = if diagnostics.is_empty() {
            "Sketch compiled successfully (mock toolchain).\n".to_owned()
        } else {
            diagnostics
                .iter()
                .map(|d| format!("{}:{}: error: {}\n", d.file, d.line, d.message))
                .collect()
        };
        Ok(CompileResult {
            success: diagnostics.is_empty(),
            diagnostics,
            raw_output,
            artifact_path: None,
            toolchain_error: None,
        })
    }

    fn external_compile(&self, sketch_dir: &Path) -> Result<CompileResult, ToolchainError> {
        let build_dir = sketch_dir.join("build");
        let sketch = sketch_dir.display().to_string();
        let build = build_dir.display().to_string();
        let argv = substitute(
            &self.config.compile_command,
            &[
                ("sketch_dir", &sketch),
                ("board_id", self.board_id()),
                ("build_dir", &build),
            ],
        );
        let out = run_command(&argv, self.timeout())?;
        let diagnostics = parse_diagnostics(&out.output);
        let has_error = diagnostics
            .iter()
            .any(|d| d.severity == DiagnosticSeverity::Error);
        let success = out.success && !has_error;
        let artifact_path = success.then(|| find_artifact(&build_dir).unwrap_or(build_dir));
        Ok(CompileResult {
            success,
            diagnostics,
            raw_output: out.output,
            artifact_path,
            toolchain_error: None,
        })
    }

    pub fn upload(&self, sketch_dir: &Path, port: &str) -> Result<UploadResult, ToolchainError> {
        let Some(_lease) = self.leases.try_acquire(port) else {
            return Ok(UploadResult {
                success: false,
                port: port.to_owned(),
                raw_output: format!("port {port} is busy with another upload"),
            });
        };
        match self.config.kind {
            ToolchainKind::Mock => {
                let success = port == MOCK_PORT;
                let raw_output = if success {
                    format!(
                        "Uploaded {} to {port} (mock toolchain).\n",
                        sketch_dir.display()
                    )
                } else {
                    format!("Failed uploading: no device found on {port}\n")
                };
                Ok(UploadResult {
                    success,
                    port: port.to_owned(),
                    raw_output,
                })
            }
            ToolchainKind::External => {
                let sketch = sketch_dir.display().to_string();
                let argv = substitute(
                    &self.config.upload_command,
                    &[
                        ("sketch_dir", &sketch),
                        ("board_id", self.board_id()),
                        ("port", port),
                    ],
                );
                let out = run_command(&argv, self.timeout())?;
                Ok(UploadResult {
                    success: out.success,
                    port: port.to_owned(),
                    raw_output: out.output,
                })
            }
        }
    }

    pub fn list_ports(&self) -> Result<Vec<PortInfo>, ToolchainError> {
        match self.config.kind {
            ToolchainKind::Mock => Ok(vec![PortInfo {
                port: MOCK_PORT.into(),
                board_hint: Some(MOCK_BOARD.into()),
            }]),
            ToolchainKind::External => {
                let argv = substitute(
                    &self.config.list_ports_command,
                    &[("board_id", self.board_id())],
                );
                let out = run_command(&argv, self.timeout())?;
                Ok(parse_port_list(&out.output))
            }
        }
    }
}

fn find_artifact(build_dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(build_dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e, "bin" | "hex" | "elf" | "uf2"))
        })
        .collect();
    // Prefer flashable images over the ELF.
    found.sort_by_key(|p| {
        (
            p.extension().and_then(|e| e.to_str()) == Some("elf"),
            p.clone(),
        )
    });
    found.into_iter().next()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::ExtractionMethod;

    fn sketch(src: &str) -> GeneratedSketch {
        GeneratedSketch::from_source(src, ExtractionMethod::WholeResponse)
    }

    fn mock() -> (tempfile::TempDir, Toolchain) {
        let dir = tempfile::tempdir().unwrap();
        let tc = Toolchain::new(ToolchainConfig::mock(dir.path())).unwrap();
        (dir, tc)
    }

    #[test]
    fn prepare_writes_named_file() {
        let (root, tc) = mock();
        let s = sketch("void setup(){}\nvoid loop(){}");
        let dir = tc.prepare_sketch_dir(&s, "fitfit").unwrap();
        assert_eq!(dir, root.path().join("fitfit"));
        assert_eq!(
            fs::read_to_string(dir.join("fitfit.ino")).unwrap(),
            s.source
        );
        let again = tc
            .prepare_sketch_dir(&sketch("void setup(){1;}"), "fitfit")
            .unwrap();
        assert_eq!(again, dir);
        assert_eq!(
            fs::read_to_string(dir.join("fitfit.ino")).unwrap(),
            "void setup(){1;}"
        );
        assert_eq!(
            tc.prepare_sketch_dir(&s, "1bad"),
            Err(ToolchainError::InvalidName("1bad".into()))
        );
        assert!(tc.prepare_sketch_dir(&s, "").is_err());
        assert!(tc.prepare_sketch_dir(&s, "a-b").is_err());
    }

    #[test]
    fn mock_compile_success() {
        let (_root, tc) = mock();
        let dir = tc
            .prepare_sketch_dir(&sketch("void setup(){}\nvoid loop(){}"), "ok")
            .unwrap();
        let r = tc.compile(&dir).unwrap();
        assert!(r.success);
        assert!(r.diagnostics.is_empty());
    }

    #[test]
    fn mock_compile_error_line() {
        let (_root, tc) = mock();
        let src = "void setup(){}\nvoid loop(){}\n#error boom\n";
        let dir = tc.prepare_sketch_dir(&sketch(src), "bad").unwrap();
        let r = tc.compile(&dir).unwrap();
        assert!(!r.success);
        assert_eq!(r.diagnostics.len(), 1);
        assert_eq!(r.diagnostics[0].line, 3);
        assert_eq!(r.diagnostics[0].severity, DiagnosticSeverity::Error);
        assert_eq!(r.diagnostics[0].message, "boom");
        // The mock's raw output parses back into the same diagnostics.
        assert_eq!(parse_diagnostics(&r.raw_output), r.diagnostics);
    }

    #[test]
    fn mock_upload_and_ports() {
        let (_root, tc) = mock();
        let dir = tc
            .prepare_sketch_dir(&sketch("void setup(){}\nvoid loop(){}"), "up")
            .unwrap();
        assert!(tc.upload(&dir, "MOCK0").unwrap().success);
        let r = tc.upload(&dir, "NOPE").unwrap();
        assert!(!r.success);
        assert_eq!(r.port, "NOPE");
        assert_eq!(
            tc.list_ports().unwrap(),
            vec![PortInfo {
                port: "MOCK0".into(),
                board_hint: Some("Mock Board".into())
            }]
        );
    }

    #[test]
    fn busy_port_fails_upload() {
        let (_root, tc) = mock();
        let dir = tc
            .prepare_sketch_dir(&sketch("void setup(){}\nvoid loop(){}"), "busy")
            .unwrap();
        let lease = tc.leases().try_acquire("MOCK0").unwrap();
        assert!(tc.leases().try_acquire("MOCK0").is_none());
        let r = tc.upload(&dir, "MOCK0").unwrap();
        assert!(!r.success);
        assert!(r.raw_output.contains("busy"));
        drop(lease);
        assert!(!tc.leases().is_held("MOCK0"));
        assert!(tc.upload(&dir, "MOCK0").unwrap().success);
    }

    #[test]
    fn parse_empty() {
        assert!(parse_diagnostics("").is_empty());
        assert!(parse_diagnostics("\n\n").is_empty());
    }

    #[test]
    fn parse_gcc_error() {
        let d = parse_diagnostics("/w/s/s.ino:12:5: error: 'fooo' was not declared in this scope");
        assert_eq!(
            d,
            vec![Diagnostic {
                file: "/w/s/s.ino".into(),
                line: 12,
                column: Some(5),
                severity: DiagnosticSeverity::Error,
                message: "'fooo' was not declared in this scope".into(),
            }]
        );
    }

    #[test]
    fn parse_raw_and_continuation() {
        let out = "Linking everything together...\n/a/b.ino:3:1: warning: unused\n   int x;\n   ^\n\nexit status 1\n";
        let d = parse_diagnostics(out);
        assert_eq!(d.len(), 3);
        assert_eq!(d[0], Diagnostic::raw("Linking everything together..."));
        assert_eq!(d[1].message, "unused\n   int x;\n   ^");
        assert_eq!(d[2], Diagnostic::raw("exit status 1"));
    }

    #[test]
    fn parse_windows_path_and_case() {
        let d = parse_diagnostics(r"C:\Users\p\s\s.ino:7: ERROR: boom");
        assert_eq!(d[0].file, r"C:\Users\p\s\s.ino");
        assert_eq!(d[0].line, 7);
        assert_eq!(d[0].column, None);
        assert_eq!(d[0].severity, DiagnosticSeverity::Error);
    }

    #[test]
    fn port_list_parsing() {
        assert!(parse_port_list("").is_empty());
        let ports = parse_port_list("COM3  Deneyap G\n/dev/ttyUSB0\n");
        assert_eq!(
            ports[0],
            PortInfo {
                port: "COM3".into(),
                board_hint: Some("Deneyap G".into())
            }
        );
        assert_eq!(
            ports[1],
            PortInfo {
                port: "/dev/ttyUSB0".into(),
                board_hint: None
            }
        );
        let with_header = "Port         Protocol Type Board Name\n/dev/ttyACM0 serial   Serial Port (USB) Unknown\n";
        assert_eq!(parse_port_list(with_header).len(), 1);
    }

    #[test]
    fn external_config_validation() {
        let mut cfg = ToolchainConfig::external("w", "vendor:arch:board");
        assert!(cfg.validate().is_ok());
        cfg.upload_command = vec!["flash".into(), "{sketch_dir}".into()];
        assert!(
            matches!(cfg.validate(), Err(ToolchainError::Config(m)) if m.contains("{board_id}"))
        );
        let mut cfg = ToolchainConfig::external("w", "");
        assert!(cfg.validate().is_err());
        cfg.kind = ToolchainKind::Mock;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn substitution() {
        let t = vec![
            "x".to_string(),
            "--fqbn={board_id}".into(),
            "{sketch_dir}".into(),
        ];
        assert_eq!(
            substitute(&t, &[("board_id", "a:b:c"), ("sketch_dir", "/s")]),
            vec!["x", "--fqbn=a:b:c", "/s"]
        );
    }

    #[cfg(unix)]
    #[test]
    fn external_runs_templates() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = ToolchainConfig::external(root.path(), "v:a:b");
        cfg.compile_command = [
            "sh",
            "-c",
            "echo \"$1/x.ino:4:2: error: 'fooo' was not declared in this scope\" >&2; exit 1",
            "sh",
            "{sketch_dir}",
            "{board_id}",
        ]
        .map(String::from)
        .to_vec();
        cfg.upload_command = [
            "sh",
            "-c",
            "echo \"no device on $1\"; exit 1",
            "sh",
            "{port}",
            "{sketch_dir}",
            "{board_id}",
        ]
        .map(String::from)
        .to_vec();
        cfg.list_ports_command = ["printf", "COM3  Deneyap G\\n"].map(String::from).to_vec();
        let tc = Toolchain::new(cfg).unwrap();
        let dir = tc
            .prepare_sketch_dir(&sketch("void setup(){fooo();}\nvoid loop(){}"), "ext")
            .unwrap();
        let r = tc.compile(&dir).unwrap();
        assert!(!r.success);
        assert!(!r.raw_output.is_empty());
        assert_eq!(r.diagnostics[0].line, 4);
        assert!(r.diagnostics[0]
            .message
            .contains("was not declared in this scope"));
        let u = tc.upload(&dir, "/dev/ttyX").unwrap();
        assert!(!u.success);
        assert!(u.raw_output.contains("/dev/ttyX"));
        assert_eq!(
            tc.list_ports().unwrap()[0].board_hint.as_deref(),
            Some("Deneyap G")
        );
    }

    #[cfg(unix)]
    #[test]
    fn external_success_reports_artifact() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = ToolchainConfig::external(root.path(), "v:a:b");
        cfg.compile_command = [
            "sh",
            "-c",
            "mkdir -p \"$1\" && touch \"$1/s.ino.bin\"",
            "sh",
            "{build_dir}",
            "{sketch_dir}",
            "{board_id}",
        ]
        .map(String::from)
        .to_vec();
        let tc = Toolchain::new(cfg).unwrap();
        let dir = tc
            .prepare_sketch_dir(&sketch("void setup(){}\nvoid loop(){}"), "s")
            .unwrap();
        let r = tc.compile(&dir).unwrap();
        assert!(r.success, "{}", r.raw_output);
        assert_eq!(r.artifact_path, Some(dir.join("build/s.ino.bin")));
    }

    #[test]
    fn missing_binary_and_timeout() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = ToolchainConfig::external(root.path(), "v:a:b");
        cfg.compile_command = [
            "definitely-not-a-toolchain-xyz",
            "{sketch_dir}",
            "{board_id}",
        ]
        .map(String::from)
        .to_vec();
        let tc = Toolchain::new(cfg.clone()).unwrap();
        let dir = tc
            .prepare_sketch_dir(&sketch("void setup(){}\nvoid loop(){}"), "m")
            .unwrap();
        assert_eq!(
            tc.compile(&dir),
            Err(ToolchainError::NotFound(
                "definitely-not-a-toolchain-xyz".into()
            ))
        );
        if cfg!(unix) {
            cfg.compile_command = ["sh", "-c", "sleep 5", "sh", "{sketch_dir}", "{board_id}"]
                .map(String::from)
                .to_vec();
            cfg.timeout_secs = 0;
            let tc = Toolchain::new(cfg).unwrap();
            assert_eq!(tc.compile(&dir), Err(ToolchainError::Timeout(0)));
        }
    }
}
