//! Append-only JSON-lines metrics stream.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::{Error, Result};

/// Writes one JSON object per event to an optional file and, optionally,
/// standard output.
pub struct MetricsSink {
    file: Option<File>,
    echo: bool,
    records: Vec<Value>,
}

impl MetricsSink {
    pub fn memory() -> Self {
        Self {
            file: None,
            echo: false,
            records: Vec::new(),
        }
    }

    pub fn to_file(path: impl AsRef<Path>, echo: bool) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(Error::io(format!("metrics {}", path.display())))?;
        Ok(Self {
            file: Some(file),
            echo,
            records: Vec::new(),
        })
    }

    pub fn emit(&mut self, event: &str, fields: impl Serialize) -> Result<()> {
        let mut obj = Map::new();
        obj.insert("event".into(), Value::from(event));
        match serde_json::to_value(fields).map_err(|e| Error::Input(e.to_string()))? {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("value".into(), other);
            }
        }
        let v = Value::Object(obj);
        let line = v.to_string();
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}").map_err(Error::io("writing metrics"))?;
        }
        if self.echo {
            println!("{line}");
        }
        self.records.push(v);
        Ok(())
    }

    /// Every record emitted through this sink, in order.
    pub fn records(&self) -> &[Value] {
        &self.records
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        {
            let mut s = MetricsSink::to_file(&p, false).unwrap();
            s.emit("step", json!({"step": 1, "loss": 0.5})).unwrap();
        }
        let mut s = MetricsSink::to_file(&p, false).unwrap();
        s.emit("step", json!({"step": 2, "loss": 0.25})).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1]["event"], "step");
        assert_eq!(lines[1]["loss"], 0.25);
    }
}
