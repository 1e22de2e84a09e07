//! Helpers shared by the line-oriented text formats (detections, keypoints,
//! poses, headset streams).
//!
//! Every line-oriented file starts with a `#!<kind> v<version>` header. Blank
//! lines and lines starting with `#` are ignored. Floats are written with
//! Rust's shortest round-trip `Display`, so `save(load(x))` is bit-identical
//! for files produced by this crate.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported schema {found:?}, expected {expected:?}")]
    SchemaVersionMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl FormatError {
    pub fn parse(path: &str, line: usize, message: impl Into<String>) -> Self {
        FormatError::Parse {
            path: path.to_string(),
            line,
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn invalid(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        FormatError::Invalid {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }

    /// Line number for parse errors.
    pub fn line(&self) -> Option<usize> {
        match self {
            FormatError::Parse { line, .. } => Some(*line),
            _ => None,
        }
    }
}

pub(crate) fn header_line(kind: &str, version: u32) -> String {
    format!("#!{kind} v{version}")
}

/// Validates a `#!kind vN` header line.
pub(crate) fn check_header(
    path: &str,
    line: &str,
    kind: &str,
    version: u32,
) -> Result<(), FormatError> {
    let expected = header_line(kind, version);
    if line.trim() == expected {
        Ok(())
    } else {
        Err(FormatError::SchemaVersionMismatch {
            path: path.to_string(),
            found: line.trim().to_string(),
            expected,
        })
    }
}

pub(crate) fn is_skippable(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || (t.starts_with('#') && !t.starts_with("#!"))
}

/// Whitespace tokenizer over one record, carrying location for errors.
pub(crate) struct Fields<'a> {
    path: &'a str,
    line: usize,
    tokens: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    pub fn new(path: &'a str, line: usize, text: &'a str) -> Self {
        Fields {
            path,
            line,
            tokens: text.split_whitespace(),
        }
    }

    pub fn err(&self, message: impl Into<String>) -> FormatError {
        FormatError::parse(self.path, self.line, message)
    }

    pub fn next_str(&mut self, what: &str) -> Result<&'a str, FormatError> {
        self.tokens
            .next()
            .ok_or_else(|| self.err(format!("missing field `{what}`")))
    }

    pub fn next_f64(&mut self, what: &str) -> Result<f64, FormatError> {
        let tok = self.next_str(what)?;
        let v: f64 = tok
            .parse()
            .map_err(|_| self.err(format!("field `{what}`: invalid number {tok:?}")))?;
        if !v.is_finite() {
            return Err(self.err(format!("field `{what}`: non-finite value {tok:?}")));
        }
        Ok(v)
    }

    pub fn next_u64(&mut self, what: &str) -> Result<u64, FormatError> {
        let tok = self.next_str(what)?;
        tok.parse()
            .map_err(|_| self.err(format!("field `{what}`: invalid integer {tok:?}")))
    }

    pub fn next_bool01(&mut self, what: &str) -> Result<bool, FormatError> {
        match self.next_str(what)? {
            "0" => Ok(false),
            "1" => Ok(true),
            tok => Err(self.err(format!("field `{what}`: expected 0 or 1, got {tok:?}"))),
        }
    }

    /// Returns `None` for the missing-value marker `-`.
    pub fn next_opt_f64(&mut self, what: &str) -> Result<Option<f64>, FormatError> {
        let tok = self.next_str(what)?;
        if tok == "-" {
            return Ok(None);
        }
        let v: f64 = tok
            .parse()
            .map_err(|_| self.err(format!("field `{what}`: invalid number {tok:?}")))?;
        if !v.is_finite() {
            return Err(self.err(format!("field `{what}`: non-finite value {tok:?}")));
        }
        Ok(Some(v))
    }

    pub fn finish(mut self) -> Result<(), FormatError> {
        match self.tokens.next() {
            None => Ok(()),
            Some(tok) => Err(self.err(format!("unexpected trailing field {tok:?}"))),
        }
    }
}

/// Appends `values` to `out`, each preceded by a single space.
pub(crate) fn push_floats(out: &mut String, values: &[f64]) {
    for v in values {
        // Writing to a String cannot fail.
        let _ = write!(out, " {v}");
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String, FormatError> {
    std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))
}

pub(crate) fn write_string(path: &Path, contents: &str) -> Result<(), FormatError> {
    std::fs::write(path, contents).map_err(|e| FormatError::io(path, e))
}
