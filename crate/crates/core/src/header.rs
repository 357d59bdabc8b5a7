//! Plain-text `key value` headers terminated by an `end` line, followed by
//! raw little-endian binary payloads.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_header<W: Write>(w: &mut W, magic: &str, fields: &[(&str, String)]) -> Result<()> {
    writeln!(w, "{magic}")?;
    for (k, v) in fields {
        writeln!(w, "{k} {v}")?;
    }
    writeln!(w, "end")?;
    Ok(())
}

#[derive(Debug)]
pub(crate) struct Header {
    path: std::path::PathBuf,
    fields: Vec<(String, String)>,
}

impl Header {
    pub fn read<R: BufRead>(r: &mut R, magic: &str, path: &Path) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let fmt = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if line.trim_end() != magic {
            return Err(fmt(format!("expected `{magic}` header")));
        }
        let mut fields = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(fmt("header not terminated by `end`".into()));
            }
            let trimmed = line.trim_end();
            if trimmed == "end" {
                break;
            }
            let (k, v) = trimmed.split_once(' ').unwrap_or((trimmed, ""));
            fields.push((k.to_string(), v.to_string()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            fields,
        })
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            message: message.into(),
        }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| self.error(format!("missing header field `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| self.error(format!("cannot parse `{key}` value `{raw}`")))
    }

    pub fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.get(key)?;
        raw.split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| self.error(format!("cannot parse `{key}` entry `{s}`")))
            })
            .collect()
    }
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> Result<()> {
    let mut buf = [0u8; 8];
    for v in out {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: impl Iterator<Item = f32>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, out: &mut [f32]) -> Result<()> {
    let mut buf = [0u8; 4];
    for v in out {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    Ok(())
}
