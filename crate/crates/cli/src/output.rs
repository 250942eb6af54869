//! Artifact writing. Every file goes through a temp file in the target
//! directory and is renamed into place once complete.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf).with_context(|| format!("writing {}", path.display()))?;
        buf.flush()?;
    }
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Serializes `body` with a leading `"schema"` field and writes it atomically.
pub fn write_json<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    let text = json_text(kind, body)?;
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

pub fn json_text<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    let mut doc = serde_json::Map::new();
    doc.insert("schema".into(), Value::from(SCHEMA_VERSION));
    doc.insert("kind".into(), Value::from(kind));
    match serde_json::to_value(body)? {
        Value::Object(fields) => doc.extend(fields),
        other => {
            doc.insert("data".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(doc))?;
    text.push('\n');
    Ok(text)
}

/// Reads a JSON artifact back, checking the schema version.
pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)?;
    let schema = value.get("schema").and_then(Value::as_u64);
    anyhow::ensure!(schema == Some(SCHEMA_VERSION as u64), "{} has schema {:?}, expected {}", path.display(), schema, SCHEMA_VERSION);
    Ok(value)
}

pub fn artifact(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
