//! Tunable numeric constants in a sketch.
//!
//! A knob is a `#define NAME LIT` or `const TYPE NAME = LIT;` whose literal is
//! a plain decimal integer or float. Knobs are located by byte span so a new
//! value can be written back without touching anything else in the source.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extract::mask_comments_and_literals;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnobForm {
    Define,
    ConstDecl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumberKind {
    Integer,
    Float,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knob {
    pub id: String,
    pub name: String,
    pub value: f64,
    /// The literal exactly as written, sign and suffix included.
    pub text: String,
    pub kind: NumberKind,
    pub form: KnobForm,
    pub span: (usize, usize),
    pub suggested_min: f64,
    pub suggested_max: f64,
    pub suggested_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnobManifest {
    /// Content hash of the source the knobs were extracted from.
    pub sketch_version: String,
    pub knobs: Vec<Knob>,
}

impl KnobManifest {
    pub fn get(&self, id: &str) -> Option<&Knob> {
        self.knobs.iter().find(|k| k.id == id)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnobError {
    #[error("unknown knob `{0}`")]
    UnknownKnob(String),
    #[error("knob manifest is stale: the sketch changed since it was extracted")]
    StaleManifest,
    #[error("value {value} for `{id}` is outside [{min}, {max}]")]
    OutOfRange {
        id: String,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("`{id}` is an integer constant; {value} is not a whole number")]
    NotAnInteger { id: String, value: f64 },
    #[error("value must be finite")]
    NotFinite,
}

/// Short content hash identifying a sketch text.
pub fn sketch_version(source: &str) -> String {
    let digest = Sha256::digest(source.as_bytes());
    hex::encode(&digest[..8])
}

const LITERAL: &str = r"[+-]?(?:(?:\d+\.\d*|\.\d+)[fF]?|\d+)";

fn define_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"(?m)^[ \t]*#[ \t]*define[ \t]+(?P<name>[A-Za-z_]\w*)[ \t]+(?P<lit>{LITERAL})[ \t]*\r?$"
        ))
        .unwrap()
    })
}

fn const_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"\bconst\s+(?:unsigned\s+int|int|long|float|double|uint8_t|uint16_t|uint32_t)\s+(?P<name>[A-Za-z_]\w*)\s*=\s*(?P<lit>{LITERAL})\s*;"
        ))
        .unwrap()
    })
}

fn classify(text: &str) -> (f64, NumberKind) {
    let body = text.trim_end_matches(['f', 'F']);
    let value: f64 = body
        .parse()
        .expect("literal grammar only admits parseable numbers");
    let kind = if body.contains('.') {
        NumberKind::Float
    } else {
        NumberKind::Integer
    };
    (value, kind)
}

fn suggested_range(value: f64, kind: NumberKind) -> (f64, f64, f64) {
    let (min, max) = if value > 0.0 {
        (0.0, 2.0 * value)
    } else if value < 0.0 {
        (2.0 * value, 0.0)
    } else {
        (-1.0, 1.0)
    };
    let step = match kind {
        NumberKind::Integer => 1.0,
        NumberKind::Float => (value.abs() / 100.0).max(0.01),
    };
    (min, max, step)
}

/// Finds every knob outside comments and string literals, in source order.
pub fn extract_knobs(source: &str) -> KnobManifest {
    let masked = mask_comments_and_literals(source);
    let mut found: Vec<(usize, usize, String, KnobForm)> = Vec::new();
    for (re, form) in [
        (define_re(), KnobForm::Define),
        (const_re(), KnobForm::ConstDecl),
    ] {
        for caps in re.captures_iter(&masked) {
            let lit = caps.name("lit").unwrap();
            found.push((lit.start(), lit.end(), caps["name"].to_owned(), form));
        }
    }
    found.sort_by_key(|f| f.0);

    let mut seen: HashMap<String, usize> = HashMap::new();
    let knobs = found
        .into_iter()
        .map(|(start, end, name, form)| {
            // Masking never alters code bytes, so the literal is identical in `source`.
            let text = source[start..end].to_owned();
            let (value, kind) = classify(&text);
            let (suggested_min, suggested_max, suggested_step) = suggested_range(value, kind);
            let ordinal = seen
                .entry(name.clone())
                .and_modify(|n| *n += 1)
                .or_insert(1);
            let id = if *ordinal == 1 {
                name.clone()
            } else {
                format!("{name}.{ordinal}")
            };
            Knob {
                id,
                name,
                value,
                text,
                kind,
                form,
                span: (start, end),
                suggested_min,
                suggested_max,
                suggested_step,
            }
        })
        .collect();

    KnobManifest {
        sketch_version: sketch_version(source),
        knobs,
    }
}

/// Canonical literal for `value` in the style of `knob`: integers stay
/// integers, floats keep a decimal point and the original `f`/`F` suffix.
pub fn format_literal(knob: &Knob, value: f64) -> Result<String, KnobError> {
    if !value.is_finite() {
        return Err(KnobError::NotFinite);
    }
    match knob.kind {
        NumberKind::Integer => {
            if value.fract() != 0.0 || value.abs() > 9_007_199_254_740_992.0 {
                return Err(KnobError::NotAnInteger {
                    id: knob.id.clone(),
                    value,
                });
            }
            Ok(format!("{}", value as i64))
        }
        NumberKind::Float => {
            let mut text = format!("{value}");
            if !text.contains('.') {
                text.push_str(".0");
            }
            if let Some(suffix) = knob.text.chars().last().filter(|c| matches!(c, 'f' | 'F')) {
                text.push(suffix);
            }
            Ok(text)
        }
    }
}

/// Writes `new_value` into the knob's literal and re-extracts.
///
/// Values may go beyond the suggested range by one range width on either
/// side. Writing the current value back returns the source unchanged.
pub fn patch_knob(
    source: &str,
    manifest: &KnobManifest,
    knob_id: &str,
    new_value: f64,
) -> Result<(String, KnobManifest), KnobError> {
    let knob = manifest
        .get(knob_id)
        .ok_or_else(|| KnobError::UnknownKnob(knob_id.to_owned()))?;
    if manifest.sketch_version != sketch_version(source)
        || source.get(knob.span.0..knob.span.1) != Some(knob.text.as_str())
    {
        return Err(KnobError::StaleManifest);
    }
    if !new_value.is_finite() {
        return Err(KnobError::NotFinite);
    }
    let width = knob.suggested_max - knob.suggested_min;
    let (min, max) = (knob.suggested_min - width, knob.suggested_max + width);
    if new_value < min || new_value > max {
        return Err(KnobError::OutOfRange {
            id: knob.id.clone(),
            value: new_value,
            min,
            max,
        });
    }

    let replacement = if new_value == knob.value {
        knob.text.clone()
    } else {
        format_literal(knob, new_value)?
    };
    let mut patched = String::with_capacity(source.len() + replacement.len());
    patched.push_str(&source[..knob.span.0]);
    patched.push_str(&replacement);
    patched.push_str(&source[knob.span.1..]);
    let manifest = extract_knobs(&patched);
    Ok((patched, manifest))
}
