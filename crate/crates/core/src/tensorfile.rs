//! Named f32 arrays stored as a text manifest plus one little-endian blob.
//!
//! ```text
//! pwself-tensors 1
//! blob checkpoint.bin
//! meta step 120
//! tensor student/cls 1,96 0 96
//! ```
//!
//! `tensor` lines give name, shape, element offset and element count. The blob
//! lives next to the manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "pwself-tensors 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Blob path for a manifest: same stem, `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Config(format!("{what} {s:?} must be one non-empty word")));
    }
    Ok(())
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a metadata entry. Keys may repeat; values are single lines.
    pub fn push_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        check_token("meta key", key)?;
        let value = value.to_string();
        if value.contains('\n') {
            return Err(Error::Config(format!("meta {key} value spans lines")));
        }
        self.meta.push((key.to_string(), value));
        Ok(())
    }

    pub fn push(&mut self, name: &str, t: Tensor<f32>) -> Result<()> {
        check_token("tensor name", name)?;
        if self.tensor(name).is_some() {
            return Err(Error::Config(format!("duplicate tensor {name}")));
        }
        self.tensors.push((name.to_string(), t));
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.meta.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensor(name)
            .ok_or_else(|| Error::Config(format!("missing tensor {name}")))
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Config(format!("missing meta {key}")))
    }

    pub fn write(&self, manifest: &Path) -> Result<()> {
        let blob = blob_path(manifest);
        if blob == manifest {
            return Err(Error::Config(format!(
                "manifest {} must not use the .bin extension",
                manifest.display()
            )));
        }
        let blob_name = blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Config(format!("bad manifest path {}", manifest.display())))?;
        let mut text = format!("{MAGIC}\nblob {blob_name}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(text, "meta {k} {v}");
        }
        let mut bytes = Vec::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let shape = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            let _ = writeln!(text, "tensor {name} {shape} {offset} {}", t.len());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.len();
        }
        std::fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
        std::fs::write(manifest, text).map_err(|e| Error::io(manifest, e))
    }

    pub fn read(manifest: &Path) -> Result<Self> {
        let fmt_err = |reason: String| Error::Format {
            path: manifest.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fmt_err("not a tensor manifest".into()));
        }
        let blob_name = lines
            .next()
            .and_then(|l| l.strip_prefix("blob "))
            .ok_or_else(|| fmt_err("missing blob line".into()))?;
        let blob = manifest.with_file_name(blob_name);
        let bytes = std::fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        if bytes.len() % 4 != 0 {
            return Err(fmt_err(format!("blob of {} bytes", bytes.len())));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut out = Self::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                out.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 4 {
                    return Err(fmt_err(format!("bad tensor line {line:?}")));
                }
                let shape: Vec<usize> = if parts[1] == "-" {
                    Vec::new()
                } else {
                    parts[1]
                        .split(',')
                        .map(|d| d.parse().map_err(|_| fmt_err(format!("bad shape in {line:?}"))))
                        .collect::<Result<_>>()?
                };
                let offset: usize = parts[2]
                    .parse()
                    .map_err(|_| fmt_err(format!("bad offset in {line:?}")))?;
                let count: usize = parts[3]
                    .parse()
                    .map_err(|_| fmt_err(format!("bad count in {line:?}")))?;
                let end = offset
                    .checked_add(count)
                    .filter(|&e| e <= values.len())
                    .ok_or_else(|| fmt_err(format!("{} runs past the blob", parts[0])))?;
                let t = Tensor::new(&shape, values[offset..end].to_vec())
                    .map_err(|e| fmt_err(format!("{}: {e}", parts[0])))?;
                out.tensors.push((parts[0].to_string(), t));
            } else if !line.is_empty() {
                return Err(fmt_err(format!("unexpected line {line:?}")));
            }
        }
        Ok(out)
    }
}
