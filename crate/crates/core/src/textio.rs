//! Helpers for the whitespace-separated text formats.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{Se3Pose, Vec3};

/// Formats a float with 17 significant digits so it parses back bit-identical.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_pose(p: &Se3Pose) -> String {
    let q = p.wxyz();
    let t = p.translation();
    [q[0], q[1], q[2], q[3], t.x, t.y, t.z]
        .iter()
        .map(|v| fmt_f64(*v))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tokenizer over one line that reports 1-based line and column on errors.
pub struct Fields<'a> {
    line: &'a str,
    pos: usize,
    path: PathBuf,
    line_no: usize,
}

impl<'a> Fields<'a> {
    pub fn new(line: &'a str, path: &Path, line_no: usize) -> Self {
        Self {
            line,
            pos: 0,
            path: path.to_path_buf(),
            line_no,
        }
    }

    pub fn error(&self, column: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line_no,
            column,
            message: message.into(),
        }
    }

    pub fn line_no(&self) -> usize {
        self.line_no
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Next token and its 1-based column.
    pub fn next_token(&mut self, what: &str) -> Result<(&'a str, usize)> {
        let rest = &self.line[self.pos..];
        let skip = rest.len() - rest.trim_start().len();
        let start = self.pos + skip;
        let rest = &self.line[start..];
        let len = rest.find(char::is_whitespace).unwrap_or(rest.len());
        if len == 0 {
            return Err(self.error(start + 1, format!("missing field '{what}'")));
        }
        self.pos = start + len;
        Ok((&self.line[start..start + len], start + 1))
    }

    pub fn str(&mut self, what: &str) -> Result<&'a str> {
        Ok(self.next_token(what)?.0)
    }

    pub fn parse<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let (tok, col) = self.next_token(what)?;
        tok.parse()
            .map_err(|_| self.error(col, format!("invalid {what} '{tok}'")))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let (tok, col) = self.next_token(what)?;
        let v: f64 = tok
            .parse()
            .map_err(|_| self.error(col, format!("invalid {what} '{tok}'")))?;
        if !v.is_finite() {
            return Err(self.error(col, format!("non-finite {what}")));
        }
        Ok(v)
    }

    pub fn i64(&mut self, what: &str) -> Result<i64> {
        self.parse(what)
    }

    pub fn usize(&mut self, what: &str) -> Result<usize> {
        self.parse(what)
    }

    pub fn flag(&mut self, what: &str) -> Result<bool> {
        let (tok, col) = self.next_token(what)?;
        match tok {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(self.error(col, format!("{what} must be 0 or 1, got '{tok}'"))),
        }
    }

    pub fn vec3(&mut self, what: &str) -> Result<Vec3> {
        Ok(Vec3::new(self.f64(what)?, self.f64(what)?, self.f64(what)?))
    }

    /// Seven fields `qw qx qy qz tx ty tz`.
    pub fn pose(&mut self) -> Result<Se3Pose> {
        let col = self.pos + 1;
        let q = [
            self.f64("qw")?,
            self.f64("qx")?,
            self.f64("qy")?,
            self.f64("qz")?,
        ];
        let t = Vec3::new(self.f64("tx")?, self.f64("ty")?, self.f64("tz")?);
        Se3Pose::from_wxyz(q, t).map_err(|e| self.error(col, e.to_string()))
    }

    /// Fails if unparsed tokens remain.
    pub fn finish(&mut self) -> Result<()> {
        let rest = &self.line[self.pos..];
        let trimmed = rest.trim_start();
        if trimmed.is_empty() {
            Ok(())
        } else {
            let col = self.pos + (rest.len() - trimmed.len()) + 1;
            Err(self.error(
                col,
                format!(
                    "unexpected trailing field '{}'",
                    trimmed.split_whitespace().next().unwrap_or("")
                ),
            ))
        }
    }

    pub fn at_end(&self) -> bool {
        self.line[self.pos..].trim().is_empty()
    }
}

/// Iterates over non-empty, non-comment lines with 1-based line numbers.
pub fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}
