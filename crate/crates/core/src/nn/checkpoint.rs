//! Plain-text parameter files.
//!
//! ```text
//! # alignnd-checkpoint v1
//! # channels=64
//! atom_embedding 3x64 1.2e-1 -3.4e-2 ...
//! ```
//!
//! Lines starting with `#` carry `key=value` metadata. Every other
//! non-blank line is one parameter: its name, its shape joined by `x`, then
//! the row-major values. Values use shortest round-trip formatting, so a
//! write/read cycle reproduces every bit.

use std::fmt::Write as _;

use super::array::Array;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "alignnd-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointFile {
    pub metadata: Vec<(String, String)>,
    pub params: Vec<(String, Array)>,
}

impl CheckpointFile {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn write_checkpoint(store: &ParamStore, metadata: &[(String, String)]) -> String {
    let mut out = format!("# {CHECKPOINT_MAGIC}\n");
    for (k, v) in metadata {
        let _ = writeln!(out, "# {k}={v}");
    }
    for p in store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = write!(out, "{} {}", p.name, shape.join("x"));
        for v in p.value.data() {
            let _ = write!(out, " {v:e}");
        }
        out.push('\n');
    }
    out
}

pub fn read_checkpoint(text: &str) -> Result<CheckpointFile> {
    let mut file = CheckpointFile::default();
    let mut saw_magic = false;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if rest == CHECKPOINT_MAGIC {
                saw_magic = true;
            } else if let Some((k, v)) = rest.split_once('=') {
                file.metadata.push((k.trim().to_string(), v.trim().to_string()));
            }
            continue;
        }
        let err = |message: String| Error::Checkpoint {
            line: lineno,
            message,
        };
        let mut fields = line.split_whitespace();
        let name = fields.next().ok_or_else(|| err("missing name".into()))?;
        let shape_text = fields.next().ok_or_else(|| err("missing shape".into()))?;
        let shape = shape_text
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err(format!("bad shape `{shape_text}`")))?;
        let values = fields
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err(format!("non-numeric value in `{name}`")))?;
        let array = Array::from_vec(&shape, values).map_err(|e| err(e.to_string()))?;
        file.params.push((name.to_string(), array));
    }
    if !saw_magic {
        return Err(Error::Checkpoint {
            line: 1,
            message: format!("missing `# {CHECKPOINT_MAGIC}` header"),
        });
    }
    Ok(file)
}

/// Copies values from `file` into matching parameters of `store`. Every
/// parameter must be present with the same shape, and no extras allowed.
pub fn load_into(store: &mut ParamStore, file: &CheckpointFile) -> Result<()> {
    if file.params.len() != store.len() {
        return Err(Error::Checkpoint {
            line: 0,
            message: format!(
                "checkpoint has {} parameters, model has {}",
                file.params.len(),
                store.len()
            ),
        });
    }
    for (name, array) in &file.params {
        let id = store.id(name).ok_or_else(|| Error::Checkpoint {
            line: 0,
            message: format!("unknown parameter `{name}`"),
        })?;
        let p = store.get_mut(id);
        if p.value.shape() != array.shape() {
            return Err(Error::Checkpoint {
                line: 0,
                message: format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    array.shape(),
                    p.value.shape()
                ),
            });
        }
        p.value = array.clone();
    }
    Ok(())
}
