//! Pulling a sketch out of a model reply and sanity-checking its shape.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionMethod {
    Fenced,
    WholeResponse,
    /// Produced by patching a knob value into an earlier sketch.
    KnobPatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralFinding {
    pub severity: Severity,
    pub code: String,
    pub message: String,
}

impl StructuralFinding {
    fn error(code: &str, message: impl Into<String>) -> Self {
        StructuralFinding {
            severity: Severity::Error,
            code: code.into(),
            message: message.into(),
        }
    }

    fn warning(code: &str, message: impl Into<String>) -> Self {
        StructuralFinding {
            severity: Severity::Warning,
            code: code.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSketch {
    pub source: String,
    pub method: ExtractionMethod,
    /// Byte range of `source` inside the reply it came from.
    pub origin_span: (usize, usize),
    pub findings: Vec<StructuralFinding>,
}

impl GeneratedSketch {
    /// Wraps source text that did not come from a model reply.
    pub fn from_source(source: impl Into<String>, method: ExtractionMethod) -> Self {
        let source = source.into();
        let findings = validate_structure(&source);
        GeneratedSketch {
            origin_span: (0, source.len()),
            source,
            method,
            findings,
        }
    }

    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Error)
    }

    pub fn has_finding(&self, code: &str) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no sketch with setup() and loop() found in the reply")]
pub struct NoCodeFound;

fn setup_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bvoid\s+setup\s*\(").unwrap())
}

fn loop_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bvoid\s+loop\s*\(").unwrap())
}

fn defines_entry_points(code: &str) -> bool {
    setup_re().is_match(code) && loop_re().is_match(code)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FenceBlock {
    pub start: usize,
    pub end: usize,
    pub terminated: bool,
}

fn is_closing_fence(line: &str) -> bool {
    let t = line.trim();
    t.len() >= 3 && t.bytes().all(|b| b == b'`')
}

/// Finds triple-backtick blocks. The body runs from the line after the opening
/// fence up to, not including, the newline before the closing fence. An
/// unterminated fence extends to the end of the text.
pub(crate) fn fence_blocks(text: &str) -> Vec<FenceBlock> {
    let mut blocks = Vec::new();
    // Body start, and whether the opening fence line ended in CRLF.
    let mut open: Option<(usize, bool)> = None;
    let mut pos = 0;
    while pos < text.len() {
        let line_end = text[pos..].find('\n').map_or(text.len(), |i| pos + i);
        let raw = &text[pos..line_end];
        let line = raw.trim_end_matches('\r');
        let next = (line_end + 1).min(text.len());
        match open {
            None if line.trim_start().starts_with("```") => {
                open = Some((next, raw.ends_with('\r')))
            }
            Some((start, crlf)) if is_closing_fence(line) => {
                // Drop the line break that precedes the closing fence.
                let mut end = pos.max(start);
                if end > start && text.as_bytes()[end - 1] == b'\n' {
                    end -= 1;
                    if crlf && end > start && text.as_bytes()[end - 1] == b'\r' {
                        end -= 1;
                    }
                }
                blocks.push(FenceBlock {
                    start,
                    end,
                    terminated: true,
                });
                open = None;
            }
            _ => {}
        }
        pos = line_end + 1;
    }
    if let Some((start, _)) = open {
        blocks.push(FenceBlock {
            start: start.min(text.len()),
            end: text.len(),
            terminated: false,
        });
    }
    blocks
}

/// Selects the sketch in a model reply.
///
/// Fenced blocks defining both `setup` and `loop` win, longest first. Without
/// any fences the whole trimmed reply is used if it defines both.
pub fn extract_sketch(response: &str) -> Result<GeneratedSketch, NoCodeFound> {
    let blocks = fence_blocks(response);
    if !blocks.is_empty() {
        let best = blocks
            .iter()
            .filter(|b| defines_entry_points(&response[b.start..b.end]))
            // max_by_key keeps the last maximum; reverse so the first one wins ties.
            .rev()
            .max_by_key(|b| b.end - b.start)
            .ok_or(NoCodeFound)?;
        let source = response[best.start..best.end].to_owned();
        let mut findings = Vec::new();
        if !best.terminated {
            findings.push(StructuralFinding::warning(
                "unterminated-fence",
                "code fence was not closed; using the rest of the reply",
            ));
        }
        findings.extend(validate_structure(&source));
        return Ok(GeneratedSketch {
            source,
            method: ExtractionMethod::Fenced,
            origin_span: (best.start, best.end),
            findings,
        });
    }

    let trimmed = response.trim();
    if trimmed.is_empty() || !defines_entry_points(trimmed) {
        return Err(NoCodeFound);
    }
    let start = trimmed.as_ptr() as usize - response.as_ptr() as usize;
    Ok(GeneratedSketch {
        source: trimmed.to_owned(),
        method: ExtractionMethod::WholeResponse,
        origin_span: (start, start + trimmed.len()),
        findings: validate_structure(trimmed),
    })
}

/// Replaces comments and string/char literal contents with spaces.
///
/// Every byte of a masked char becomes an ASCII space and newlines are kept,
/// so byte offsets and line numbers line up with the input.
pub(crate) fn mask_comments_and_literals(source: &str) -> String {
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Code,
        LineComment,
        BlockComment,
        Str,
        Char,
    }

    let mut out = source.as_bytes().to_vec();
    let mut blank = |at: usize, c: char| {
        if c != '\n' {
            out[at..at + c.len_utf8()].fill(b' ');
        }
    };
    let mut state = State::Code;
    let mut chars = source.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let next = chars.peek().map(|&(_, n)| n);
        match state {
            State::Code => match (c, next) {
                ('/', Some('/')) | ('/', Some('*')) => {
                    state = if next == Some('/') {
                        State::LineComment
                    } else {
                        State::BlockComment
                    };
                    blank(i, c);
                    let (j, n) = chars.next().unwrap();
                    blank(j, n);
                }
                ('"', _) => state = State::Str,
                ('\'', _) => state = State::Char,
                _ => {}
            },
            State::LineComment => {
                if c == '\n' {
                    state = State::Code;
                } else {
                    blank(i, c);
                }
            }
            State::BlockComment => {
                blank(i, c);
                if c == '*' && next == Some('/') {
                    let (j, n) = chars.next().unwrap();
                    blank(j, n);
                    state = State::Code;
                }
            }
            State::Str | State::Char => {
                let quote = if state == State::Str { '"' } else { '\'' };
                if c == '\\' {
                    blank(i, c);
                    if let Some((j, n)) = chars.next() {
                        blank(j, n);
                    }
                } else if c == quote || c == '\n' {
                    // A newline ends an unterminated literal.
                    state = State::Code;
                } else {
                    blank(i, c);
                }
            }
        }
    }
    String::from_utf8(out).expect("masking replaces whole chars")
}

/// Cheap pre-compile checks. An empty result means the sketch is plausible,
/// not that it compiles.
pub fn validate_structure(source: &str) -> Vec<StructuralFinding> {
    let mut findings = Vec::new();
    let code = mask_comments_and_literals(source);

    if code.trim().is_empty() {
        findings.push(StructuralFinding::warning(
            "empty-body",
            "sketch contains no code",
        ));
    }
    if !setup_re().is_match(&code) {
        findings.push(StructuralFinding::error(
            "missing-setup",
            "no `void setup()` definition",
        ));
    }
    if !loop_re().is_match(&code) {
        findings.push(StructuralFinding::error(
            "missing-loop",
            "no `void loop()` definition",
        ));
    }
    let open = code.bytes().filter(|&b| b == b'{').count();
    let close = code.bytes().filter(|&b| b == b'}').count();
    if open != close {
        findings.push(StructuralFinding::error(
            "unbalanced-braces",
            format!("{open} opening and {close} closing braces"),
        ));
    }
    findings
}
